//! Symmetric linear solves for the discretized system: factorization with
//! inertia, resonance detection, best approximation in the companion inner
//! product, and the discrete inf-sup constant.
//!
//! The primal matrix is symmetric indefinite, so the dense backend uses a
//! Bunch-Kaufman factorization and the sparse backend an LDL^T with
//! fill-reducing ordering, simplicial or supernodal by fill heuristic. Both
//! expose the inertia of the matrix, which is
//! how near-resonant frequencies are reported: a calibrated discretization
//! away from resonance has no zero eigenvalues, and the number of negative
//! ones counts the eigenmodes below `omega^2`.

use crate::assembly::{broken_moments, AssembledForms, AssemblyError, MaterialModel};
use crate::femspace::{BrokenField, FemError};
use crate::mesh::{Mesh, Point};
use crate::sparse::SymCsc;
use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::ldlt::factor::LdltRegularization;
use faer::linalg::solvers::{Lblt, Solve};
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, supernodal::SupernodalLdltRef, CholeskySymbolicParams, LdltRef,
    SymbolicCholesky, SymbolicCholeskyRaw, SymmetricOrdering,
};
use faer::{Conj, Mat, Par, Side};
use nalgebra::{DVector, Vector3};
use thiserror::Error;

/// Largest dof count solved with the dense Bunch-Kaufman backend.
pub const DENSE_SOLVE_LIMIT: usize = 3000;
/// Largest dof count for which the inf-sup constant is computed by a dense
/// congruence eigensolve; larger systems use spectrum-slicing bisection.
pub const INFSUP_DENSE_LIMIT: usize = 2500;
/// Relative residual above which a solve is declared resonant even when the
/// factorization went through.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;
/// Relative threshold below which a pivot eigenvalue counts as zero.
const PIVOT_ZERO_REL: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(
        "system is resonant or near-singular: inertia (-{negative}, 0:{zero}, +{positive}), relative residual {residual:.3e}"
    )]
    Resonance {
        negative: usize,
        zero: usize,
        positive: usize,
        residual: f64,
    },
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
}

/// Signature of a symmetric matrix: eigenvalue counts by sign.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Inertia {
    pub negative: usize,
    pub zero: usize,
    pub positive: usize,
}

enum Backend {
    Dense(Lblt<f64>),
    Sparse {
        symbolic: SymbolicCholesky<usize>,
        values: Vec<f64>,
    },
}

/// A factorized symmetric matrix with its inertia, ready for repeated solves.
pub struct SymmetricFactor {
    n: usize,
    backend: Backend,
    inertia: Inertia,
}

fn classify(eigs: &[f64]) -> Inertia {
    let scale = eigs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = PIVOT_ZERO_REL * scale;
    let mut inertia = Inertia {
        negative: 0,
        zero: 0,
        positive: 0,
    };
    for &e in eigs {
        if e > tol {
            inertia.positive += 1;
        } else if e < -tol {
            inertia.negative += 1;
        } else {
            inertia.zero += 1;
        }
    }
    inertia
}

impl SymmetricFactor {
    /// Factorizes, choosing the backend by size.
    pub fn new(matrix: &SymCsc) -> Result<Self, SolverError> {
        Self::with_backend(matrix, matrix.n <= DENSE_SOLVE_LIMIT)
    }

    /// Factorizes with an explicit backend choice. A sparse factorization of
    /// an exactly singular matrix fails with a zero pivot, which is reported
    /// as resonance.
    pub fn with_backend(matrix: &SymCsc, dense: bool) -> Result<Self, SolverError> {
        Self::with_backend_params(matrix, dense, CholeskySymbolicParams::default())
    }

    fn with_backend_params(
        matrix: &SymCsc,
        dense: bool,
        params: CholeskySymbolicParams,
    ) -> Result<Self, SolverError> {
        let n = matrix.n;
        if dense {
            let fact = matrix.to_dense().lblt(Side::Lower);
            // Eigenvalues of the 1x1 and 2x2 pivot blocks carry the inertia.
            let diag = fact.B_diag().column_vector().to_owned();
            let sub = fact.B_subdiag().column_vector().to_owned();
            let mut eigs = Vec::with_capacity(n);
            let mut j = 0;
            while j < n {
                if j + 1 < n && sub[j] != 0.0 {
                    let (a, b, s) = (diag[j], diag[j + 1], sub[j]);
                    let half_tr = 0.5 * (a + b);
                    let disc = (0.25 * (a - b) * (a - b) + s * s).sqrt();
                    eigs.push(half_tr + disc);
                    eigs.push(half_tr - disc);
                    j += 2;
                } else {
                    eigs.push(diag[j]);
                    j += 1;
                }
            }
            let inertia = classify(&eigs);
            Ok(SymmetricFactor {
                n,
                backend: Backend::Dense(fact),
                inertia,
            })
        } else {
            let upper = matrix.to_faer_upper();
            let symbolic = factorize_symbolic_cholesky(
                upper.symbolic(),
                Side::Upper,
                SymmetricOrdering::Amd,
                params,
            )
            .map_err(|e| SolverError::Factorization(format!("symbolic phase failed: {e:?}")))?;
            let mut values = vec![0.0f64; symbolic.len_val()];
            let mut buffer = MemBuffer::new(
                symbolic.factorize_numeric_ldlt_scratch::<f64>(Par::Seq, Default::default()),
            );
            let result = symbolic.factorize_numeric_ldlt(
                &mut values,
                upper.as_ref(),
                Side::Upper,
                LdltRegularization::default(),
                Par::Seq,
                MemStack::new(&mut buffer),
                Default::default(),
            );
            if result.is_err() {
                // An exact zero pivot: the matrix is singular.
                return Err(SolverError::Resonance {
                    negative: 0,
                    zero: 1,
                    positive: 0,
                    residual: f64::INFINITY,
                });
            }
            // The diagonal factor D carries the inertia; the fill-reducing
            // permutation is a congruence and does not change it. In the
            // simplicial layout D sits at the head of each column of L, in the
            // supernodal layout on the diagonal of each supernode dense block.
            let eigs: Vec<f64> = match symbolic.raw() {
                SymbolicCholeskyRaw::Simplicial(s) => {
                    let col_ptr = s.col_ptr();
                    (0..n).map(|j| values[col_ptr[j]]).collect()
                }
                SymbolicCholeskyRaw::Supernodal(s) => {
                    let ldlt = SupernodalLdltRef::new(s, &values);
                    let mut diag = Vec::with_capacity(n);
                    for node in 0..s.n_supernodes() {
                        let block = ldlt.supernode(node).val();
                        for j in 0..block.ncols() {
                            diag.push(block[(j, j)]);
                        }
                    }
                    diag
                }
            };
            let inertia = classify(&eigs);
            Ok(SymmetricFactor {
                n,
                backend: Backend::Sparse { symbolic, values },
                inertia,
            })
        }
    }

    pub fn inertia(&self) -> Inertia {
        self.inertia
    }

    /// Solves against one right-hand side.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        match &self.backend {
            Backend::Dense(fact) => {
                let rhs = Mat::from_fn(self.n, 1, |i, _| b[i]);
                let x = fact.solve(&rhs);
                (0..self.n).map(|i| x[(i, 0)]).collect()
            }
            Backend::Sparse { symbolic, values } => {
                let ldlt = LdltRef::new(symbolic, values);
                let mut x = Mat::from_fn(self.n, 1, |i, _| b[i]);
                let mut buffer =
                    MemBuffer::new(symbolic.solve_in_place_scratch::<f64>(1, Par::Seq));
                ldlt.solve_in_place_with_conj(
                    Conj::No,
                    x.as_mut(),
                    Par::Seq,
                    MemStack::new(&mut buffer),
                );
                (0..self.n).map(|i| x[(i, 0)]).collect()
            }
        }
    }

    /// Solves with iterative refinement against the assembled matrix and
    /// returns the solution together with the final relative residual.
    pub fn solve_refined(&self, matrix: &SymCsc, b: &[f64], rounds: usize) -> (Vec<f64>, f64) {
        let norm_b: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm_b == 0.0 {
            return (vec![0.0; self.n], 0.0);
        }
        let mut x = self.solve(b);
        let mut residual = f64::INFINITY;
        for _ in 0..=rounds {
            let ax = matrix.matvec(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            residual = r.iter().map(|v| v * v).sum::<f64>().sqrt() / norm_b;
            if residual <= 1e-15 {
                break;
            }
            let dx = self.solve(&r);
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
        }
        // Report the residual of the returned iterate.
        let ax = matrix.matvec(&x);
        let r: f64 = b
            .iter()
            .zip(&ax)
            .map(|(bi, ai)| (bi - ai) * (bi - ai))
            .sum::<f64>()
            .sqrt();
        residual = residual.min(r / norm_b);
        (x, residual)
    }
}

/// A primal solve with its diagnostic data.
pub struct DgSolution {
    pub field: BrokenField,
    pub inertia: Inertia,
    pub residual_rel: f64,
}

/// Solves the primal system `B x = rhs` and converts the coefficients into a
/// broken field. Fails with [`SolverError::Resonance`] when the matrix has a
/// numerically zero eigenvalue or the refined residual stays above
/// [`RESIDUAL_TOLERANCE`].
pub fn solve_primal(forms: &AssembledForms, rhs: &[f64]) -> Result<DgSolution, SolverError> {
    let matrix = forms.b_sharp();
    let fact = SymmetricFactor::new(&matrix)?;
    let inertia = fact.inertia();
    let (x, residual) = fact.solve_refined(&matrix, rhs, 2);
    if inertia.zero > 0 || residual > RESIDUAL_TOLERANCE {
        return Err(SolverError::Resonance {
            negative: inertia.negative,
            zero: inertia.zero,
            positive: inertia.positive,
            residual,
        });
    }
    let field = BrokenField::from_coeffs(forms.space.k, forms.space.n_cells, x)?;
    Ok(DgSolution {
        field,
        inertia,
        residual_rel: residual,
    })
}

/// Moments of a curl-conforming field against the lifted forms: the returned
/// vector `r` satisfies `r . x_w = sign omega^2 (eps E, w) + (nu curl E, C(w))`
/// for every discrete field `w` with coefficients `x_w`. With `mass_sign`
/// `+1` this is the companion-form pairing, with `-1` the primal-form
/// pairing. Valid for fields whose tangential trace vanishes on the domain
/// boundary; otherwise the jump lifting of the field itself would contribute.
pub fn conforming_pairing<FE, FC>(
    mesh: &Mesh,
    forms: &AssembledForms,
    material: &MaterialModel,
    exact: FE,
    exact_curl: FC,
    quad_exactness: usize,
    mass_sign: f64,
) -> Result<Vec<f64>, SolverError>
where
    FE: Fn(&Point) -> Vector3<f64>,
    FC: Fn(&Point) -> Vector3<f64>,
{
    let space = &forms.space;
    let omega2 = forms.omega * forms.omega;
    // sign omega^2 (eps E, w) moments over the primal space.
    let mut rhs = broken_moments(mesh, space.k, quad_exactness, |cell, p| {
        mass_sign * omega2 * (material.eps[cell] * exact(p))
    })?;
    // (nu curl E, C(w))_nu: lifting-space moments of nu curl E, scattered
    // through the transposed discrete-curl blocks.
    let q = broken_moments(mesh, space.ell, quad_exactness, |cell, p| {
        material.nu[cell] * exact_curl(p)
    })?;
    let dc = &forms.discrete_curl;
    for cell in 0..space.n_cells {
        let lo = space.ell_offset(cell);
        let qm = DVector::from_column_slice(&q[lo..lo + space.ell_dofs_per_cell()]);
        for (source, block) in &dc.lifting.cells[cell].sources {
            let contrib = block.tr_mul(&qm);
            let off = space.cell_offset(*source);
            for (i, v) in contrib.iter().enumerate() {
                rhs[off + i] += v;
            }
        }
        let contrib = dc.curl_blocks[cell].tr_mul(&qm);
        let off = space.cell_offset(cell);
        for (i, v) in contrib.iter().enumerate() {
            rhs[off + i] += v;
        }
    }
    Ok(rhs)
}

/// Best approximation of a conforming exact field in the companion inner
/// product: the discrete field `B(E)` with
/// `b+(B(E), w) = omega^2 (E, w)_eps + (curl E, C(w))_nu` for all `w`.
///
/// For a curl-conforming `E` the right side is exactly `b+(E, w)`: the jumps
/// of `E` vanish, so its lifting and penalty terms drop out. `B(E)` is then
/// the orthogonal projection of `E` in the energy inner product, and its
/// error is the benchmark the primal solution is compared against.
pub fn best_approximation<FE, FC>(
    mesh: &Mesh,
    forms: &AssembledForms,
    material: &MaterialModel,
    exact: FE,
    exact_curl: FC,
    quad_exactness: usize,
) -> Result<BrokenField, SolverError>
where
    FE: Fn(&Point) -> Vector3<f64>,
    FC: Fn(&Point) -> Vector3<f64>,
{
    let space = &forms.space;
    let rhs = conforming_pairing(mesh, forms, material, exact, exact_curl, quad_exactness, 1.0)?;
    let matrix = forms.b_sharp_plus();
    let fact = SymmetricFactor::new(&matrix)?;
    let inertia = fact.inertia();
    let (x, residual) = fact.solve_refined(&matrix, &rhs, 2);
    if inertia.zero > 0 || inertia.negative > 0 || residual > RESIDUAL_TOLERANCE {
        return Err(SolverError::Resonance {
            negative: inertia.negative,
            zero: inertia.zero,
            positive: inertia.positive,
            residual,
        });
    }
    Ok(BrokenField::from_coeffs(space.k, space.n_cells, x)?)
}

/// The discrete inf-sup constant: the smallest absolute eigenvalue of
/// `G^{-1/2} B G^{-1/2}`, where `B` is the primal matrix and `G` the
/// companion inner product. Always in `[0, 1]`, and close to one away from
/// resonance at small frequencies.
pub fn infsup_constant(forms: &AssembledForms) -> Result<f64, SolverError> {
    let b = forms.b_sharp();
    let g = forms.b_sharp_plus();
    if b.n <= INFSUP_DENSE_LIMIT {
        infsup_dense(&b, &g)
    } else {
        infsup_bisection(&b, &g)
    }
}

fn infsup_dense(b: &SymCsc, g: &SymCsc) -> Result<f64, SolverError> {
    let n = b.n;
    let eig = g
        .to_dense()
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| SolverError::Factorization(format!("eigensolve failed: {e:?}")))?;
    let vals = eig.S().column_vector();
    if vals[0] <= 0.0 {
        return Err(SolverError::Factorization(format!(
            "companion form is not positive definite (min eigenvalue {})",
            vals[0]
        )));
    }
    // Whitening W = U diag(lambda^{-1/2}); the congruent matrix W^T B W has
    // the pencil eigenvalues.
    let mut w = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        let s = 1.0 / vals[j].sqrt();
        for r in 0..n {
            w[(r, j)] = eig.U()[(r, j)] * s;
        }
    }
    let bw = b.to_dense() * &w;
    let a = w.transpose() * &bw;
    let evs = a
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| SolverError::Factorization(format!("eigensolve failed: {e:?}")))?;
    Ok(evs.iter().fold(f64::INFINITY, |acc, &l| acc.min(l.abs())))
}

/// Spectrum-slicing bisection for the pencil eigenvalue of smallest absolute
/// value. The inertia of `B - t G` counts the pencil eigenvalues below `t`,
/// so bisecting that count locates the eigenvalue nearest zero from each
/// side. For the calibrated forms the pencil spectrum lies in `[-1, 1]`. This
/// is robust where power iteration stalls: at small frequencies the dominant
/// pencil eigenvalues cluster tightly near one.
fn infsup_bisection(b: &SymCsc, g: &SymCsc) -> Result<f64, SolverError> {
    let fact_b = SymmetricFactor::new(b)?;
    if fact_b.inertia().zero > 0 {
        return Ok(0.0);
    }
    let m_neg = fact_b.inertia().negative;
    let m_pos = fact_b.inertia().positive;
    let count_below = |t: f64| -> Result<usize, SolverError> {
        let shifted = SymCsc::lin_comb(&[(1.0, b), (-t, g)]);
        match SymmetricFactor::with_backend(&shifted, false) {
            Ok(f) => Ok(f.inertia().negative),
            // An exact zero pivot means t hit an eigenvalue; nudge past it.
            Err(SolverError::Resonance { .. }) => {
                let shifted = SymCsc::lin_comb(&[(1.0, b), (-(t * (1.0 + 1e-13) + 1e-300), g)]);
                Ok(SymmetricFactor::with_backend(&shifted, false)?
                    .inertia()
                    .negative)
            }
            Err(e) => Err(e),
        }
    };
    let tol = 1e-10;
    let mut sigma = f64::INFINITY;
    if m_pos > 0 {
        let (mut lo, mut hi) = (0.0f64, 1.0 + 1e-6);
        if count_below(hi)? > m_neg {
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                if count_below(mid)? > m_neg {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            sigma = sigma.min(0.5 * (lo + hi));
        } else {
            // All positive eigenvalues sit above the unit bracket.
            sigma = sigma.min(hi);
        }
    }
    if m_neg > 0 {
        let (mut lo, mut hi) = (-1.0 - 1e-6, 0.0f64);
        if count_below(lo)? < m_neg {
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                if count_below(mid)? < m_neg {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            sigma = sigma.min(-0.5 * (lo + hi));
        } else {
            sigma = sigma.min(-lo);
        }
    }
    if !sigma.is_finite() {
        // No nonzero eigenvalues at all: the primal form is identically zero.
        return Ok(0.0);
    }
    Ok(sigma)
}
