//! Assembly of the discretized sesquilinear forms and stabilization
//! calibration.
//!
//! The primal system is assembled from four symmetric pieces over the broken
//! space of degree `k`:
//!
//! - the material mass matrix `M[(u, v)] = (u, v)_eps`,
//! - the lifted curl stiffness `A[(u, v)] = (C(u), C(v))_nu`,
//! - the tangential jump penalty
//!   `S[(u, v)] = sum_F (nu_F / h_F) ([[u]], [[v]])_F`, where `nu_F` is the
//!   largest over the face's cells of the smallest eigenvalue of `nu_K`,
//! - the lifting Gram matrix `G[(u, v)] = (L(u), L(v))_nu`.
//!
//! They combine into `B = -omega^2 M + A + eta S - G`, which coincides with
//! the classical interior-penalty form (elementwise curls plus symmetric face
//! consistency terms) whenever the lifting degree satisfies `ell >= k - 1`;
//! [`assemble_bh`] builds the classical form directly and serves as the
//! reference for that identity. The penalty weight `eta` is calibrated so
//! that `eta S - G` is positive semidefinite, which makes the combined form
//! coercive up to the mass term.

use crate::femspace::{quadrature, DGSpace, Domain, FemError, ReferenceBasis};
use crate::lifting::{
    build_discrete_curl, face_trace, tangential_cross_matrix, tangential_projector, trace_values,
    DiscreteCurl,
};
use crate::mesh::{Mesh, Point};
use crate::sparse::{SymCoo, SymCsc};
use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, CholeskySymbolicParams, SymmetricOrdering,
};
use faer::sparse::linalg::SupernodalThreshold;
use faer::{Mat, Par, Side};
use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

/// Largest primal dof count handled by the dense calibration eigensolver;
/// larger systems fall back to bisection with sparse Cholesky probes.
pub const DENSE_CALIBRATION_LIMIT: usize = 2500;

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("material tensor on cell {cell} is not symmetric")]
    NonSymmetricMaterial { cell: usize },
    #[error("material tensor on cell {cell} is not positive definite (eigenvalue {eigenvalue})")]
    NonPositiveMaterial { cell: usize, eigenvalue: f64 },
    #[error("material field has {got} cells, mesh has {expected}")]
    MaterialShape { expected: usize, got: usize },
    #[error("stabilization calibration failed: {0}")]
    Calibration(String),
    #[error(transparent)]
    Fem(#[from] FemError),
}

/// Piecewise-constant symmetric positive definite material tensors, with the
/// per-cell eigenvalue extremes used by the penalty and the estimator.
pub struct MaterialModel {
    pub eps: Vec<Matrix3<f64>>,
    pub nu: Vec<Matrix3<f64>>,
    pub eps_min: Vec<f64>,
    pub eps_max: Vec<f64>,
    pub nu_min: Vec<f64>,
    pub nu_max: Vec<f64>,
}

fn validate_spd(m: &Matrix3<f64>, cell: usize) -> Result<(f64, f64), AssemblyError> {
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let asym = (m - m.transpose()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if asym > 1e-12 * scale.max(1.0) {
        return Err(AssemblyError::NonSymmetricMaterial { cell });
    }
    let sym = 0.5 * (m + m.transpose());
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &l in eig.eigenvalues.iter() {
        lo = lo.min(l);
        hi = hi.max(l);
    }
    if lo <= 1e-14 * scale.max(1.0) {
        return Err(AssemblyError::NonPositiveMaterial {
            cell,
            eigenvalue: lo,
        });
    }
    Ok((lo, hi))
}

impl MaterialModel {
    /// Builds and validates a per-cell material field.
    pub fn from_cells(
        mesh: &Mesh,
        eps: Vec<Matrix3<f64>>,
        nu: Vec<Matrix3<f64>>,
    ) -> Result<Self, AssemblyError> {
        if eps.len() != mesh.n_cells() || nu.len() != mesh.n_cells() {
            return Err(AssemblyError::MaterialShape {
                expected: mesh.n_cells(),
                got: eps.len().min(nu.len()),
            });
        }
        let mut eps_min = Vec::with_capacity(eps.len());
        let mut eps_max = Vec::with_capacity(eps.len());
        let mut nu_min = Vec::with_capacity(nu.len());
        let mut nu_max = Vec::with_capacity(nu.len());
        for (cell, m) in eps.iter().enumerate() {
            let (lo, hi) = validate_spd(m, cell)?;
            eps_min.push(lo);
            eps_max.push(hi);
        }
        for (cell, m) in nu.iter().enumerate() {
            let (lo, hi) = validate_spd(m, cell)?;
            nu_min.push(lo);
            nu_max.push(hi);
        }
        Ok(MaterialModel {
            eps,
            nu,
            eps_min,
            eps_max,
            nu_min,
            nu_max,
        })
    }

    /// The same tensors on every cell.
    pub fn uniform(
        mesh: &Mesh,
        eps: Matrix3<f64>,
        nu: Matrix3<f64>,
    ) -> Result<Self, AssemblyError> {
        Self::from_cells(mesh, vec![eps; mesh.n_cells()], vec![nu; mesh.n_cells()])
    }

    /// Unit permittivity and unit reluctivity.
    pub fn vacuum(mesh: &Mesh) -> Self {
        Self::uniform(mesh, Matrix3::identity(), Matrix3::identity())
            .expect("identity tensors are SPD")
    }

    /// The global wave speed `sqrt(min_K nu_min,K / max_K eps_max,K)`.
    pub fn wavespeed(&self) -> f64 {
        let nu_lo = self.nu_min.iter().cloned().fold(f64::INFINITY, f64::min);
        let eps_hi = self.eps_max.iter().cloned().fold(0.0f64, f64::max);
        (nu_lo / eps_hi).sqrt()
    }

    /// The face penalty coefficient `nu_F`: the largest over the face's cells
    /// of the smallest eigenvalue of `nu_K`.
    pub fn nu_tilde_face(&self, mesh: &Mesh, face: usize) -> f64 {
        let f = &mesh.faces[face];
        let mut v = self.nu_min[f.left];
        if let Some(r) = f.right {
            v = v.max(self.nu_min[r]);
        }
        v
    }
}

/// Assembles a weighted mass matrix `(u, v)_W` with a constant symmetric
/// weight per cell. With the orthonormal basis this is exact and block
/// diagonal: mode `m` couples only with itself, through the 3x3 weight.
pub fn assemble_mass(space: &DGSpace, weights: &[Matrix3<f64>]) -> SymCsc {
    assert_eq!(weights.len(), space.n_cells);
    let mut coo = SymCoo::new(space.total_dofs());
    for (cell, w) in weights.iter().enumerate() {
        let off = space.cell_offset(cell);
        for m in 0..space.dim_k {
            for d in 0..3 {
                for e in d..3 {
                    coo.push(off + 3 * m + d, off + 3 * m + e, w[(d, e)]);
                }
            }
        }
    }
    coo.to_csc()
}

/// Applies the componentwise 3x3 weight to a lifting-space block: rows come
/// in groups of three per scalar mode.
fn weight_rows(nu: &Matrix3<f64>, block: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::<f64>::zeros(block.nrows(), block.ncols());
    let groups = block.nrows() / 3;
    for n in 0..groups {
        for c in 0..block.ncols() {
            for e in 0..3 {
                let mut s = 0.0;
                for ep in 0..3 {
                    s += nu[(e, ep)] * block[(3 * n + ep, c)];
                }
                out[(3 * n + e, c)] = s;
            }
        }
    }
    out
}

/// Scatters `sum_M D_M^T W_M D_M` for per-cell local operators given as
/// source blocks, pushing only the upper triangle.
fn scatter_gram(
    coo: &mut SymCoo,
    space: &DGSpace,
    blocks: &[(usize, DMatrix<f64>)],
    nu: &Matrix3<f64>,
) {
    let weighted: Vec<DMatrix<f64>> = blocks.iter().map(|(_, b)| weight_rows(nu, b)).collect();
    for (s_row, b_row) in blocks {
        let off_r = space.cell_offset(*s_row);
        for (j, (s_col, _)) in blocks.iter().enumerate() {
            // Skip strictly-lower block pairs: the transposed pair produces
            // the same logical entries.
            if s_col < s_row {
                continue;
            }
            let t = b_row.tr_mul(&weighted[j]);
            let off_c = space.cell_offset(*s_col);
            for a in 0..t.nrows() {
                for b in 0..t.ncols() {
                    let (r, c) = (off_r + a, off_c + b);
                    if r <= c {
                        coo.push(r, c, t[(a, b)]);
                    }
                }
            }
        }
    }
}

/// Assembles the lifted curl stiffness `(C(u), C(v))_nu`.
pub fn assemble_curl_stiffness(
    space: &DGSpace,
    dc: &DiscreteCurl,
    nu: &[Matrix3<f64>],
) -> SymCsc {
    let mut coo = SymCoo::new(space.total_dofs());
    for cell in 0..space.n_cells {
        // The cell row of C: lifting blocks plus the elementwise curl on the
        // cell's own dofs.
        let mut blocks: Vec<(usize, DMatrix<f64>)> = dc.lifting.cells[cell].sources.clone();
        let mut found = false;
        for (source, block) in blocks.iter_mut() {
            if *source == cell {
                *block += &dc.curl_blocks[cell];
                found = true;
            }
        }
        assert!(found, "every cell is a source of its own lifting row");
        scatter_gram(&mut coo, space, &blocks, &nu[cell]);
    }
    coo.to_csc()
}

/// Assembles the lifting Gram matrix `(L(u), L(v))_nu`.
pub fn assemble_lift_gram(
    space: &DGSpace,
    dc: &DiscreteCurl,
    nu: &[Matrix3<f64>],
) -> SymCsc {
    let mut coo = SymCoo::new(space.total_dofs());
    for cell in 0..space.n_cells {
        scatter_gram(&mut coo, space, &dc.lifting.cells[cell].sources, &nu[cell]);
    }
    coo.to_csc()
}

/// Assembles the tangential jump penalty
/// `sum_F (nu_F / h_F) ([[u]], [[v]])_F` over all faces, boundary included.
pub fn assemble_jump_penalty(
    mesh: &Mesh,
    space: &DGSpace,
    material: &MaterialModel,
) -> Result<SymCsc, AssemblyError> {
    let rule = quadrature(Domain::Triangle, 2 * space.k)?;
    let mut coo = SymCoo::new(space.total_dofs());
    for face in 0..mesh.n_faces() {
        let ft = face_trace(mesh, face, &rule);
        let coef = material.nu_tilde_face(mesh, face) / mesh.faces[face].diameter;
        let ptan = tangential_projector(&mesh.faces[face].normal);
        let traces: Vec<DMatrix<f64>> = ft
            .sides
            .iter()
            .map(|(cell, pts)| trace_values(mesh, *cell, space.k, pts))
            .collect();
        for (si, (cs, _)) in ft.sides.iter().enumerate() {
            for (sj, (ct, _)) in ft.sides.iter().enumerate() {
                let sign = if si == sj { 1.0 } else { -1.0 };
                // Scalar face Gram between the two sides.
                let mut gram = DMatrix::<f64>::zeros(space.dim_k, space.dim_k);
                for q in 0..ft.phys.len() {
                    let w = ft.weights[q];
                    for m in 0..space.dim_k {
                        let tm = w * traces[si][(m, q)];
                        for mp in 0..space.dim_k {
                            gram[(m, mp)] += tm * traces[sj][(mp, q)];
                        }
                    }
                }
                let off_r = space.cell_offset(*cs);
                let off_c = space.cell_offset(*ct);
                for m in 0..space.dim_k {
                    for mp in 0..space.dim_k {
                        let g = coef * sign * gram[(m, mp)];
                        for d in 0..3 {
                            for dp in 0..3 {
                                let (r, c) = (off_r + 3 * m + d, off_c + 3 * mp + dp);
                                if r <= c {
                                    coo.push(r, c, g * ptan[(d, dp)]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(coo.to_csc())
}

/// Physical trace values and gradients of a cell's scalar basis at
/// pulled-back face points.
fn trace_values_and_gradients(
    mesh: &Mesh,
    cell: usize,
    degree: usize,
    points: &[Point],
) -> (DMatrix<f64>, Vec<Vector3<f64>>) {
    let basis = ReferenceBasis {
        degree,
        dim: crate::femspace::scalar_dim(degree),
    };
    let tab = basis.tabulate(points);
    let scale = crate::femspace::cell_scale(mesh, cell);
    let jinv_t = mesh.cell_geometry[cell].jacobian_inv.transpose();
    let vals = tab.val.map(|v| v * scale);
    let mut grads = Vec::with_capacity(basis.dim * points.len());
    for m in 0..basis.dim {
        for q in 0..points.len() {
            let gref = Vector3::new(tab.gx[(m, q)], tab.gy[(m, q)], tab.gz[(m, q)]);
            grads.push(scale * (jinv_t * gref));
        }
    }
    (vals, grads)
}

/// Assembles the classical interior-penalty form directly:
/// `-omega^2 (u, v)_eps + (curl_h u, curl_h v)_nu + eta s_h(u, v)` plus the
/// symmetric consistency terms
/// `sum_F [({nu curl_h u}, [[v]])_F + ([[u]], {nu curl_h v})_F]`.
///
/// This is the reference implementation used to validate the lifted
/// reformulation; the production path assembles
/// [`AssembledForms::b_sharp`] instead, which agrees with this matrix on the
/// primal space whenever `ell >= k - 1`.
pub fn assemble_bh(
    mesh: &Mesh,
    space: &DGSpace,
    material: &MaterialModel,
    omega: f64,
    eta: f64,
) -> Result<SymCsc, AssemblyError> {
    let n = space.total_dofs();
    let mass = assemble_mass(space, &material.eps);
    let penalty = assemble_jump_penalty(mesh, space, material)?;

    // Elementwise curl-curl stiffness by cell quadrature.
    let cell_rule = quadrature(Domain::Tetrahedron, 2 * space.k)?;
    let basis = ReferenceBasis {
        degree: space.k,
        dim: space.dim_k,
    };
    let tab = basis.tabulate(&cell_rule.points);
    let mut curl_coo = SymCoo::new(n);
    for cell in 0..space.n_cells {
        let jinv_t = mesh.cell_geometry[cell].jacobian_inv.transpose();
        let nu = &material.nu[cell];
        let off = space.cell_offset(cell);
        // Physical curls of all cell basis fields at each point; the basis
        // scales cancel the volume element.
        let mut local = DMatrix::<f64>::zeros(3 * space.dim_k, 3 * space.dim_k);
        for (q, &w) in cell_rule.weights.iter().enumerate() {
            let mut curls = Vec::with_capacity(3 * space.dim_k);
            for m in 0..space.dim_k {
                let gref = Vector3::new(tab.gx[(m, q)], tab.gy[(m, q)], tab.gz[(m, q)]);
                let grad = jinv_t * gref;
                for d in 0..3 {
                    let mut ed = Vector3::zeros();
                    ed[d] = 1.0;
                    curls.push(grad.cross(&ed));
                }
            }
            for a in 0..curls.len() {
                let nca = nu * curls[a];
                for b in a..curls.len() {
                    local[(a, b)] += w * nca.dot(&curls[b]);
                }
            }
        }
        for a in 0..3 * space.dim_k {
            for b in a..3 * space.dim_k {
                curl_coo.push(off + a, off + b, local[(a, b)]);
            }
        }
    }
    let curl_curl = curl_coo.to_csc();

    // Symmetric consistency terms. For each ordered (average side, jump side)
    // pair the contribution is sigma sign_t int_F (nu_s curl phi_a) .
    // (phi_b x n); pushing it once into the symmetric structure realizes
    // Con + Con^T (the diagonal needs the factor two).
    let face_rule = quadrature(Domain::Triangle, 2 * space.k)?;
    let mut con_coo = SymCoo::new(n);
    for face in 0..mesh.n_faces() {
        let ft = face_trace(mesh, face, &face_rule);
        let normal = mesh.faces[face].normal;
        let cross = tangential_cross_matrix(&normal);
        let sigma = if ft.sides.len() == 2 { 0.5 } else { 1.0 };
        let data: Vec<(DMatrix<f64>, Vec<Vector3<f64>>)> = ft
            .sides
            .iter()
            .map(|(cell, pts)| trace_values_and_gradients(mesh, *cell, space.k, pts))
            .collect();
        let nq = ft.phys.len();
        for (si, (cell_s, _)) in ft.sides.iter().enumerate() {
            let nu_s = &material.nu[*cell_s];
            let off_s = space.cell_offset(*cell_s);
            for (ti, (cell_t, _)) in ft.sides.iter().enumerate() {
                let sign_t = if ti == 0 { 1.0 } else { -1.0 };
                let off_t = space.cell_offset(*cell_t);
                for m in 0..space.dim_k {
                    for d in 0..3 {
                        let a = off_s + 3 * m + d;
                        let mut ed = Vector3::zeros();
                        ed[d] = 1.0;
                        for mp in 0..space.dim_k {
                            for dp in 0..3 {
                                let b = off_t + 3 * mp + dp;
                                // (e_dp x n) is column dp of the cross matrix.
                                let w_dir =
                                    Vector3::new(cross[(0, dp)], cross[(1, dp)], cross[(2, dp)]);
                                let mut val = 0.0;
                                for q in 0..nq {
                                    let curl_a = data[si].1[m * nq + q].cross(&ed);
                                    val += ft.weights[q]
                                        * (nu_s * curl_a).dot(&w_dir)
                                        * data[ti].0[(mp, q)];
                                }
                                val *= sigma * sign_t;
                                if a == b {
                                    con_coo.push(a, a, 2.0 * val);
                                } else {
                                    con_coo.push(a, b, val);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let consistency = con_coo.to_csc();

    Ok(SymCsc::lin_comb(&[
        (-omega * omega, &mass),
        (1.0, &curl_curl),
        (eta, &penalty),
        (1.0, &consistency),
    ]))
}

/// Moment vector of a cell-aware field against the orthonormal broken basis
/// of the given degree: `out[(cell, m, d)] = (f, phi_m e_d)_K`. Because the
/// basis is orthonormal these are also the coefficients of the unweighted L2
/// projection of `f`.
pub fn broken_moments<F>(
    mesh: &Mesh,
    degree: usize,
    quad_exactness: usize,
    f: F,
) -> Result<Vec<f64>, FemError>
where
    F: Fn(usize, &Point) -> Vector3<f64>,
{
    let rule = quadrature(Domain::Tetrahedron, quad_exactness)?;
    let dim = crate::femspace::scalar_dim(degree);
    let basis = ReferenceBasis { degree, dim };
    let tab = basis.tabulate(&rule.points);
    let mut out = vec![0.0; 3 * dim * mesh.n_cells()];
    for cell in 0..mesh.n_cells() {
        let vol_factor = (6.0 * mesh.cell_geometry[cell].volume).sqrt();
        let off = 3 * dim * cell;
        for (q, (p, &wq)) in rule.points.iter().zip(&rule.weights).enumerate() {
            let x = mesh.ref_to_phys(cell, p);
            let fx = f(cell, &x);
            for m in 0..dim {
                let phi = vol_factor * wq * tab.val[(m, q)];
                for d in 0..3 {
                    out[off + 3 * m + d] += fx[d] * phi;
                }
            }
        }
    }
    Ok(out)
}

/// Moment vector of a source field against the primal basis:
/// `rhs[(m, d)] = (f, phi_m e_d)_K`.
pub fn assemble_rhs<F>(
    mesh: &Mesh,
    space: &DGSpace,
    quad_exactness: usize,
    f: F,
) -> Result<Vec<f64>, FemError>
where
    F: Fn(&Point) -> Vector3<f64>,
{
    broken_moments(mesh, space.k, quad_exactness, |_, p| f(p))
}

/// The assembled symmetric pieces of the discretization for one mesh, space,
/// and material, together with the discrete curl that produced them.
pub struct AssembledForms {
    pub space: DGSpace,
    pub omega: f64,
    pub eta: f64,
    pub mass: SymCsc,
    pub curl_stiffness: SymCsc,
    pub jump_penalty: SymCsc,
    pub lift_gram: SymCsc,
    pub discrete_curl: DiscreteCurl,
}

impl AssembledForms {
    pub fn new(
        mesh: &Mesh,
        space: &DGSpace,
        material: &MaterialModel,
        omega: f64,
        eta: f64,
    ) -> Result<Self, AssemblyError> {
        let dc = build_discrete_curl(mesh, space)?;
        let mass = assemble_mass(space, &material.eps);
        let curl_stiffness = assemble_curl_stiffness(space, &dc, &material.nu);
        let jump_penalty = assemble_jump_penalty(mesh, space, material)?;
        let lift_gram = assemble_lift_gram(space, &dc, &material.nu);
        Ok(AssembledForms {
            space: *space,
            omega,
            eta,
            mass,
            curl_stiffness,
            jump_penalty,
            lift_gram,
            discrete_curl: dc,
        })
    }

    /// The reduced stabilization `eta s_h - (L ., L .)_nu`.
    pub fn s_sharp(&self) -> SymCsc {
        SymCsc::lin_comb(&[(self.eta, &self.jump_penalty), (-1.0, &self.lift_gram)])
    }

    /// The lifted primal form
    /// `-omega^2 M + (C ., C .)_nu + eta s_h - (L ., L .)_nu`.
    pub fn b_sharp(&self) -> SymCsc {
        SymCsc::lin_comb(&[
            (-self.omega * self.omega, &self.mass),
            (1.0, &self.curl_stiffness),
            (self.eta, &self.jump_penalty),
            (-1.0, &self.lift_gram),
        ])
    }

    /// The positive companion form with the sign of the mass term flipped:
    /// `+omega^2 M + (C ., C .)_nu + eta s_h - (L ., L .)_nu`. Positive
    /// definite whenever the stabilization is calibrated.
    pub fn b_sharp_plus(&self) -> SymCsc {
        SymCsc::lin_comb(&[
            (self.omega * self.omega, &self.mass),
            (1.0, &self.curl_stiffness),
            (self.eta, &self.jump_penalty),
            (-1.0, &self.lift_gram),
        ])
    }

    /// The discrete energy seminorm squared of a coefficient vector under the
    /// reduced stabilization; nonnegative once `eta >= eta_min`.
    pub fn stabilization_seminorm_sq(&self, x: &[f64]) -> f64 {
        self.s_sharp().quad(x)
    }
}

/// Result of the stabilization calibration.
#[derive(Clone, Copy, Debug)]
pub struct EtaCalibration {
    /// The smallest weight for which `eta s_h - (L ., L .)_nu` is positive
    /// semidefinite.
    pub eta_min: f64,
    /// The recommended production weight, `1.25 eta_min`.
    pub eta_rec: f64,
}

/// Calibrates the stabilization weight, choosing the dense eigenvalue path
/// for small systems and sparse bisection otherwise.
pub fn calibrate_eta(s_h: &SymCsc, s_lift: &SymCsc) -> Result<EtaCalibration, AssemblyError> {
    if s_h.n <= DENSE_CALIBRATION_LIMIT {
        calibrate_eta_dense(s_h, s_lift)
    } else {
        calibrate_eta_bisection(s_h, s_lift)
    }
}

/// Dense calibration: `eta_min` is the largest eigenvalue of the lifting
/// Gram matrix restricted to the range of the penalty, in the metric of the
/// penalty. Also verifies that the penalty kernel is contained in the lifting
/// kernel, without which no finite weight works.
pub fn calibrate_eta_dense(
    s_h: &SymCsc,
    s_lift: &SymCsc,
) -> Result<EtaCalibration, AssemblyError> {
    let n = s_h.n;
    if s_lift.max_abs() == 0.0 {
        return Ok(EtaCalibration {
            eta_min: 0.0,
            eta_rec: 0.0,
        });
    }
    let dense = s_h.to_dense();
    let eig = dense
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| AssemblyError::Calibration(format!("penalty eigensolve failed: {e:?}")))?;
    let vals = eig.S().column_vector();
    let lmax = vals[n - 1];
    if lmax <= 0.0 {
        return Err(AssemblyError::Calibration(
            "jump penalty is identically zero but the lifting is not".into(),
        ));
    }
    let tol = 1e-10 * lmax;
    let range: Vec<usize> = (0..n).filter(|&i| vals[i] > tol).collect();
    // Kernel containment: on penalty-null vectors the lifting must vanish.
    let lift_scale = s_lift.max_abs();
    for i in 0..n {
        if vals[i] > tol {
            continue;
        }
        let v: Vec<f64> = (0..n).map(|r| eig.U()[(r, i)]).collect();
        let q = s_lift.quad(&v);
        if q > 1e-8 * lift_scale {
            return Err(AssemblyError::Calibration(format!(
                "penalty kernel vector carries lifting energy {q:.3e}"
            )));
        }
    }
    // Whitened pencil: W = U_range diag(lambda^{-1/2}), eta_min =
    // lambda_max(W^T G W).
    let mut w = Mat::<f64>::zeros(n, range.len());
    for (j, &i) in range.iter().enumerate() {
        let scale = 1.0 / vals[i].sqrt();
        for r in 0..n {
            w[(r, j)] = eig.U()[(r, i)] * scale;
        }
    }
    let gw = {
        let g = s_lift.to_dense();
        &g * &w
    };
    let a = w.transpose() * &gw;
    let evs = a
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| AssemblyError::Calibration(format!("pencil eigensolve failed: {e:?}")))?;
    let eta_min = evs.last().copied().unwrap_or(0.0).max(0.0);
    Ok(EtaCalibration {
        eta_min,
        eta_rec: 1.25 * eta_min,
    })
}

/// Union sparsity pattern of two symmetric matrices plus a full diagonal,
/// with aligned value vectors, so that shifted combinations can be
/// refactorized against a fixed symbolic structure.
struct CombinationPattern {
    n: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    a: Vec<f64>,
    b: Vec<f64>,
    diag: Vec<bool>,
}

impl CombinationPattern {
    fn new(a: &SymCsc, b: &SymCsc) -> Self {
        use std::collections::BTreeMap;
        let n = a.n;
        let mut map: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
        for c in 0..n {
            for idx in a.col_ptr[c]..a.col_ptr[c + 1] {
                map.entry((c, a.row_idx[idx])).or_insert((0.0, 0.0)).0 += a.values[idx];
            }
            for idx in b.col_ptr[c]..b.col_ptr[c + 1] {
                map.entry((c, b.row_idx[idx])).or_insert((0.0, 0.0)).1 += b.values[idx];
            }
            map.entry((c, c)).or_insert((0.0, 0.0));
        }
        let mut rows = Vec::with_capacity(map.len());
        let mut cols = Vec::with_capacity(map.len());
        let mut av = Vec::with_capacity(map.len());
        let mut bv = Vec::with_capacity(map.len());
        let mut diag = Vec::with_capacity(map.len());
        for ((c, r), (va, vb)) in map {
            rows.push(r);
            cols.push(c);
            av.push(va);
            bv.push(vb);
            diag.push(r == c);
        }
        CombinationPattern {
            n,
            rows,
            cols,
            a: av,
            b: bv,
            diag,
        }
    }

    fn matrix(&self, coeff_a: f64, coeff_b: f64, shift: f64) -> faer::sparse::SparseColMat<usize, f64> {
        let triplets: Vec<faer::sparse::Triplet<usize, usize, f64>> = (0..self.rows.len())
            .map(|i| {
                let mut v = coeff_a * self.a[i] + coeff_b * self.b[i];
                if self.diag[i] {
                    v += shift;
                }
                faer::sparse::Triplet::new(self.rows[i], self.cols[i], v)
            })
            .collect();
        faer::sparse::SparseColMat::try_new_from_triplets(self.n, self.n, &triplets)
            .expect("pattern triplets are valid")
    }
}

/// Bisection calibration for systems too large for the dense eigensolver.
/// Feasibility of a weight is probed by a shifted sparse Cholesky
/// factorization; the bracket doubles upward from 1 and bisects to a relative
/// width of 1e-4.
pub fn calibrate_eta_bisection(
    s_h: &SymCsc,
    s_lift: &SymCsc,
) -> Result<EtaCalibration, AssemblyError> {
    if s_lift.max_abs() == 0.0 {
        return Ok(EtaCalibration {
            eta_min: 0.0,
            eta_rec: 0.0,
        });
    }
    let pattern = CombinationPattern::new(s_h, s_lift);
    let scale = s_h.max_abs().max(s_lift.max_abs());
    let probe_mat = pattern.matrix(1.0, -1.0, 1e-10 * scale);
    let symbolic = factorize_symbolic_cholesky(
        probe_mat.symbolic(),
        Side::Upper,
        SymmetricOrdering::Amd,
        CholeskySymbolicParams {
            supernodal_flop_ratio_threshold: SupernodalThreshold::FORCE_SIMPLICIAL,
            ..Default::default()
        },
    )
    .map_err(|e| AssemblyError::Calibration(format!("symbolic factorization failed: {e:?}")))?;
    let mut l_values = vec![0.0f64; symbolic.len_val()];
    let mut buffer = MemBuffer::new(
        symbolic.factorize_numeric_llt_scratch::<f64>(Par::Seq, Default::default()),
    );
    let mut probe = |eta: f64| -> bool {
        // Positive shift absorbs roundoff: the probe accepts exactly when
        // eta s_h - s_lift has no eigenvalue below -shift.
        let shift = 1e-10 * scale * (1.0 + eta);
        let mat = pattern.matrix(eta, -1.0, shift);
        symbolic
            .factorize_numeric_llt(
                &mut l_values,
                mat.as_ref(),
                Side::Upper,
                Default::default(),
                Par::Seq,
                MemStack::new(&mut buffer),
                Default::default(),
            )
            .is_ok()
    };
    let mut hi = 1.0f64;
    let mut lo = 0.0f64;
    while !probe(hi) {
        lo = hi;
        hi *= 2.0;
        if hi > 1e9 {
            return Err(AssemblyError::Calibration(
                "no feasible stabilization weight below 1e9".into(),
            ));
        }
    }
    // A passing weight of one may still be far from the edge; tighten the
    // lower bracket downward first.
    if lo == 0.0 {
        let mut cand = hi / 2.0;
        while cand > 1e-12 && probe(cand) {
            hi = cand;
            cand /= 2.0;
        }
        lo = if cand > 1e-12 { cand } else { 0.0 };
    }
    while hi - lo > 1e-4 * hi {
        let mid = 0.5 * (hi + lo);
        if probe(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(EtaCalibration {
        eta_min: hi,
        eta_rec: 1.25 * hi,
    })
}
