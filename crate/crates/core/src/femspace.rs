//! Reference-simplex polynomial bases, quadrature, and broken vector fields.
//!
//! The scalar basis on the reference tetrahedron `{x,y,z >= 0, x+y+z <= 1}` is
//! the modal Koornwinder-Dubiner family, L2-orthonormalized. Vector spaces use
//! three Cartesian copies of the scalar basis; with the per-cell scaling
//! applied in [`evaluate`]/[`project_l2`], the unweighted physical mass matrix
//! of every cell is exactly the identity, which makes lifting solves and L2
//! projections explicit.

use crate::mesh::{Mesh, Point};
use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

/// Highest supported scalar basis degree.
pub const MAX_BASIS_DEGREE: usize = 6;
/// Highest supported quadrature exactness degree.
pub const MAX_QUAD_EXACTNESS: usize = 30;
/// Highest supported primal degree `k` of a [`DGSpace`].
pub const MAX_PRIMAL_DEGREE: usize = 4;

#[derive(Debug, Error)]
pub enum FemError {
    #[error("unsupported basis degree {degree} (supported: 0..={MAX_BASIS_DEGREE})")]
    UnsupportedDegree { degree: usize },
    #[error("unsupported quadrature exactness {degree} (supported: 0..={MAX_QUAD_EXACTNESS})")]
    UnsupportedQuadrature { degree: usize },
    #[error("unsupported primal degree k={k} (supported: 1..={MAX_PRIMAL_DEGREE})")]
    UnsupportedPrimalDegree { k: usize },
    #[error("unsupported lifting degree ell={ell} for k={k} (supported: k-1 and k)")]
    UnsupportedLiftingDegree { k: usize, ell: usize },
    #[error("field length {len} does not match {n_cells} cells of degree {degree}")]
    FieldShape {
        len: usize,
        n_cells: usize,
        degree: usize,
    },
}

/// Dimension of the scalar polynomial space of total degree <= `degree` on a
/// tetrahedron.
pub fn scalar_dim(degree: usize) -> usize {
    (degree + 1) * (degree + 2) * (degree + 3) / 6
}

/// The `(i, j, k)` mode triples of the scalar basis, in tabulation order.
/// Mode `(i, j, k)` has total polynomial degree `i + j + k`, so the basis is
/// hierarchical: the triples of a lower degree are a subset of those of a
/// higher degree (in a different enumeration order).
pub fn mode_triples(degree: usize) -> Vec<(usize, usize, usize)> {
    let mut triples = Vec::with_capacity(scalar_dim(degree));
    for i in 0..=degree {
        for j in 0..=(degree - i) {
            for k in 0..=(degree - i - j) {
                triples.push((i, j, k));
            }
        }
    }
    triples
}

/// Evaluates the homogenized Jacobi polynomials
/// `Q_n(u, w) = P_n^{(alpha,0)}((2u - w)/w) * w^n` for `n = 0..=nmax`, together
/// with the partial derivatives with respect to `u` and `w`. Each `Q_n` is a
/// polynomial in `(u, w)`, so the evaluation below never divides by `w`; this
/// keeps the collapsed-coordinate basis exact on the degenerate edges of the
/// reference simplex.
fn jacobi_homogenized(alpha: usize, nmax: usize, u: f64, w: f64) -> Vec<(f64, f64, f64)> {
    let a = alpha as f64;
    let mut out = Vec::with_capacity(nmax + 1);
    out.push((1.0, 0.0, 0.0));
    if nmax == 0 {
        return out;
    }
    let q1 = 0.5 * ((a + 2.0) * (2.0 * u - w) + a * w);
    out.push((q1, a + 2.0, -1.0));
    for n in 1..nmax {
        let nn = n as f64;
        let c0 = 2.0 * (nn + 1.0) * (nn + a + 1.0) * (2.0 * nn + a);
        let c1 = 2.0 * nn + a + 1.0;
        let c2 = (2.0 * nn + a) * (2.0 * nn + a + 2.0);
        let c3 = 2.0 * (nn + a) * nn * (2.0 * nn + a + 2.0);
        let t = c2 * (2.0 * u - w) + a * a * w;
        let (qn, qnu, qnw) = out[n];
        let (qm, qmu, qmw) = out[n - 1];
        let q = (c1 * t * qn - c3 * w * w * qm) / c0;
        let qu = (c1 * (2.0 * c2 * qn + t * qnu) - c3 * w * w * qmu) / c0;
        let qw = (c1 * ((a * a - c2) * qn + t * qnw) - c3 * (2.0 * w * qm + w * w * qmw)) / c0;
        out.push((q, qu, qw));
    }
    out
}

/// The orthonormal scalar basis of total degree <= `degree` on the reference
/// tetrahedron.
pub struct ReferenceBasis {
    pub degree: usize,
    pub dim: usize,
}

/// Values and reference gradients of all basis functions at a point set.
/// Layout: row = basis function, column = point.
pub struct BasisTable {
    pub val: DMatrix<f64>,
    pub gx: DMatrix<f64>,
    pub gy: DMatrix<f64>,
    pub gz: DMatrix<f64>,
}

/// Returns the orthonormal scalar basis of the requested degree.
pub fn reference_basis(degree: usize) -> Result<ReferenceBasis, FemError> {
    if degree > MAX_BASIS_DEGREE {
        return Err(FemError::UnsupportedDegree { degree });
    }
    Ok(ReferenceBasis {
        degree,
        dim: scalar_dim(degree),
    })
}

impl ReferenceBasis {
    /// Tabulates values and gradients at reference points.
    pub fn tabulate(&self, points: &[Point]) -> BasisTable {
        let dim = self.dim;
        let npts = points.len();
        let mut val = DMatrix::zeros(dim, npts);
        let mut gx = DMatrix::zeros(dim, npts);
        let mut gy = DMatrix::zeros(dim, npts);
        let mut gz = DMatrix::zeros(dim, npts);
        let deg = self.degree;
        for (q, p) in points.iter().enumerate() {
            let (x, y, z) = (p.x, p.y, p.z);
            let s = 1.0 - y - z;
            let t = 1.0 - z;
            let a_fam = jacobi_homogenized(0, deg, x, s);
            let mut m = 0;
            for i in 0..=deg {
                let b_fam = jacobi_homogenized(2 * i + 1, deg - i, y, t);
                let (ai, aiu, aiw) = a_fam[i];
                for j in 0..=(deg - i) {
                    let c_fam = jacobi_homogenized(2 * i + 2 * j + 2, deg - i - j, z, 1.0);
                    let (bj, bju, bjw) = b_fam[j];
                    for (k, &(ck, cku, _)) in c_fam.iter().enumerate().take(deg - i - j + 1) {
                        let norm = (2.0
                            * (2 * i + 1) as f64
                            * (i + j + 1) as f64
                            * (2 * i + 2 * j + 2 * k + 3) as f64)
                            .sqrt();
                        val[(m, q)] = norm * ai * bj * ck;
                        gx[(m, q)] = norm * aiu * bj * ck;
                        // s = 1 - y - z and t = 1 - z carry the chain-rule signs.
                        gy[(m, q)] = norm * (-aiw * bj + ai * bju) * ck;
                        gz[(m, q)] = norm * ((-aiw * bj - ai * bjw) * ck + ai * bj * cku);
                        m += 1;
                    }
                }
            }
            debug_assert_eq!(m, dim);
        }
        BasisTable { val, gx, gy, gz }
    }
}

/// Integration domain of a quadrature rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Tetrahedron,
    Triangle,
}

/// A quadrature rule on the reference tetrahedron (volume 1/6) or reference
/// triangle (area 1/2; points carry `z = 0`).
pub struct QuadratureRule {
    pub domain: Domain,
    pub exactness: usize,
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

/// Gauss-Jacobi nodes and weights for the weight `(1-x)^alpha` on `[-1, 1]`
/// (Golub-Welsch on the symmetric recurrence matrix).
fn gauss_jacobi(n: usize, alpha: usize) -> (Vec<f64>, Vec<f64>) {
    let a = alpha as f64;
    let mu0 = 2.0f64.powi(alpha as i32 + 1) / (a + 1.0);
    if n == 1 {
        return (vec![-a / (a + 2.0)], vec![mu0]);
    }
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for r in 0..n {
        let rr = r as f64;
        let diag = if r == 0 {
            -a / (a + 2.0)
        } else {
            -(a * a) / ((2.0 * rr + a) * (2.0 * rr + a + 2.0))
        };
        jac[(r, r)] = diag;
        if r + 1 < n {
            let m = rr + 1.0;
            let off = (4.0 * m * (m + a) * m * (m + a)
                / ((2.0 * m + a) * (2.0 * m + a) * (2.0 * m + a + 1.0) * (2.0 * m + a - 1.0)))
                .sqrt();
            jac[(r, r + 1)] = off;
            jac[(r + 1, r)] = off;
        }
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let w = mu0 * eig.eigenvectors[(0, i)] * eig.eigenvectors[(0, i)];
            (node, w)
        })
        .collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1).collect(),
    )
}

/// Builds a rule exact for all polynomials of total degree <= `exactness`,
/// via the collapsed (Duffy) tensor construction with Gauss-Jacobi weights
/// absorbing the coordinate-transform Jacobian.
pub fn quadrature(domain: Domain, exactness: usize) -> Result<QuadratureRule, FemError> {
    if exactness > MAX_QUAD_EXACTNESS {
        return Err(FemError::UnsupportedQuadrature { degree: exactness });
    }
    let n = exactness / 2 + 1;
    let (na, wa) = gauss_jacobi(n, 0);
    let (nb, wb) = gauss_jacobi(n, 1);
    let mut points = Vec::new();
    let mut weights = Vec::new();
    match domain {
        Domain::Triangle => {
            for (ib, &b) in nb.iter().enumerate() {
                for (ia, &a) in na.iter().enumerate() {
                    let x = (1.0 + a) * (1.0 - b) / 4.0;
                    let y = (1.0 + b) / 2.0;
                    points.push(Point::new(x, y, 0.0));
                    weights.push(wa[ia] * wb[ib] / 8.0);
                }
            }
        }
        Domain::Tetrahedron => {
            let (nc, wc) = gauss_jacobi(n, 2);
            for (ic, &c) in nc.iter().enumerate() {
                for (ib, &b) in nb.iter().enumerate() {
                    for (ia, &a) in na.iter().enumerate() {
                        let x = (1.0 + a) * (1.0 - b) * (1.0 - c) / 8.0;
                        let y = (1.0 + b) * (1.0 - c) / 4.0;
                        let z = (1.0 + c) / 2.0;
                        points.push(Point::new(x, y, z));
                        weights.push(wa[ia] * wb[ib] * wc[ic] / 64.0);
                    }
                }
            }
        }
    }
    Ok(QuadratureRule {
        domain,
        exactness,
        points,
        weights,
    })
}

/// The broken vector polynomial space: three Cartesian copies of the scalar
/// space of degree `k` on each cell, plus the lifting target space of degree
/// `ell`. Cell dof layout: `3 m + d` for scalar mode `m` and component `d`.
#[derive(Clone, Copy, Debug)]
pub struct DGSpace {
    pub k: usize,
    pub ell: usize,
    pub dim_k: usize,
    pub dim_ell: usize,
    pub n_cells: usize,
}

impl DGSpace {
    pub fn new(mesh: &Mesh, k: usize, ell: usize) -> Result<Self, FemError> {
        if !(1..=MAX_PRIMAL_DEGREE).contains(&k) {
            return Err(FemError::UnsupportedPrimalDegree { k });
        }
        if ell + 1 != k && ell != k {
            return Err(FemError::UnsupportedLiftingDegree { k, ell });
        }
        Ok(DGSpace {
            k,
            ell,
            dim_k: scalar_dim(k),
            dim_ell: scalar_dim(ell),
            n_cells: mesh.n_cells(),
        })
    }

    pub fn dofs_per_cell(&self) -> usize {
        3 * self.dim_k
    }

    pub fn total_dofs(&self) -> usize {
        self.n_cells * self.dofs_per_cell()
    }

    pub fn cell_offset(&self, cell: usize) -> usize {
        cell * self.dofs_per_cell()
    }

    pub fn ell_dofs_per_cell(&self) -> usize {
        3 * self.dim_ell
    }

    pub fn total_ell_dofs(&self) -> usize {
        self.n_cells * self.ell_dofs_per_cell()
    }

    pub fn ell_offset(&self, cell: usize) -> usize {
        cell * self.ell_dofs_per_cell()
    }
}

/// Coefficients of a vector field in a broken polynomial space. The cellwise
/// restriction is a vector polynomial of total degree <= `degree` expressed in
/// the orthonormal per-cell basis.
#[derive(Clone, Debug)]
pub struct BrokenField {
    pub degree: usize,
    pub dim_scalar: usize,
    pub n_cells: usize,
    pub coeffs: Vec<f64>,
}

impl BrokenField {
    pub fn zero(degree: usize, n_cells: usize) -> Self {
        let dim_scalar = scalar_dim(degree);
        BrokenField {
            degree,
            dim_scalar,
            n_cells,
            coeffs: vec![0.0; 3 * dim_scalar * n_cells],
        }
    }

    /// A zero field in the primal space of degree `k`.
    pub fn zero_primal(space: &DGSpace) -> Self {
        Self::zero(space.k, space.n_cells)
    }

    /// A zero field in the lifting target space of degree `ell`.
    pub fn zero_lifting(space: &DGSpace) -> Self {
        Self::zero(space.ell, space.n_cells)
    }

    pub fn from_coeffs(degree: usize, n_cells: usize, coeffs: Vec<f64>) -> Result<Self, FemError> {
        let dim_scalar = scalar_dim(degree);
        if coeffs.len() != 3 * dim_scalar * n_cells {
            return Err(FemError::FieldShape {
                len: coeffs.len(),
                n_cells,
                degree,
            });
        }
        Ok(BrokenField {
            degree,
            dim_scalar,
            n_cells,
            coeffs,
        })
    }

    pub fn dofs_per_cell(&self) -> usize {
        3 * self.dim_scalar
    }

    pub fn cell(&self, cell: usize) -> &[f64] {
        let n = self.dofs_per_cell();
        &self.coeffs[cell * n..(cell + 1) * n]
    }

    pub fn cell_mut(&mut self, cell: usize) -> &mut [f64] {
        let n = self.dofs_per_cell();
        &mut self.coeffs[cell * n..(cell + 1) * n]
    }
}

/// Per-cell scaling that makes the physical basis orthonormal: the physical
/// basis is `psi_m(F_K^{-1}(X)) / sqrt(6 V_K)`.
pub fn cell_scale(mesh: &Mesh, cell: usize) -> f64 {
    1.0 / (6.0 * mesh.cell_geometry[cell].volume).sqrt()
}

/// Evaluates a broken field on one cell at reference points (points in the
/// cell's reference preimage).
pub fn evaluate(mesh: &Mesh, field: &BrokenField, cell: usize, points: &[Point]) -> Vec<Vector3<f64>> {
    let basis = ReferenceBasis {
        degree: field.degree,
        dim: field.dim_scalar,
    };
    let tab = basis.tabulate(points);
    let scale = cell_scale(mesh, cell);
    let coeffs = field.cell(cell);
    points
        .iter()
        .enumerate()
        .map(|(q, _)| {
            let mut v = Vector3::zeros();
            for m in 0..field.dim_scalar {
                let phi = scale * tab.val[(m, q)];
                for d in 0..3 {
                    v[d] += coeffs[3 * m + d] * phi;
                }
            }
            v
        })
        .collect()
}

/// Evaluates the cellwise (broken) curl of a broken field at reference points.
pub fn evaluate_curl(
    mesh: &Mesh,
    field: &BrokenField,
    cell: usize,
    points: &[Point],
) -> Vec<Vector3<f64>> {
    let basis = ReferenceBasis {
        degree: field.degree,
        dim: field.dim_scalar,
    };
    let tab = basis.tabulate(points);
    let scale = cell_scale(mesh, cell);
    let jinv_t = mesh.cell_geometry[cell].jacobian_inv.transpose();
    let coeffs = field.cell(cell);
    points
        .iter()
        .enumerate()
        .map(|(q, _)| {
            let mut curl = Vector3::zeros();
            for m in 0..field.dim_scalar {
                let gref = Vector3::new(tab.gx[(m, q)], tab.gy[(m, q)], tab.gz[(m, q)]);
                let grad = scale * (jinv_t * gref);
                for d in 0..3 {
                    let mut ed = Vector3::zeros();
                    ed[d] = 1.0;
                    curl += coeffs[3 * m + d] * grad.cross(&ed);
                }
            }
            curl
        })
        .collect()
}

/// Evaluates the cellwise divergence of a broken field at reference points.
pub fn evaluate_div(
    mesh: &Mesh,
    field: &BrokenField,
    cell: usize,
    points: &[Point],
) -> Vec<f64> {
    let basis = ReferenceBasis {
        degree: field.degree,
        dim: field.dim_scalar,
    };
    let tab = basis.tabulate(points);
    let scale = cell_scale(mesh, cell);
    let jinv_t = mesh.cell_geometry[cell].jacobian_inv.transpose();
    let coeffs = field.cell(cell);
    points
        .iter()
        .enumerate()
        .map(|(q, _)| {
            let mut div = 0.0;
            for m in 0..field.dim_scalar {
                let gref = Vector3::new(tab.gx[(m, q)], tab.gy[(m, q)], tab.gz[(m, q)]);
                let grad = scale * (jinv_t * gref);
                for d in 0..3 {
                    div += coeffs[3 * m + d] * grad[d];
                }
            }
            div
        })
        .collect()
}

/// Cellwise weighted L2 projection of a callable vector field onto the broken
/// space of the given degree. With a per-cell SPD `weight` W, the projection
/// minimizes the W-weighted L2 distance on each cell; the residual is
/// W-orthogonal to the space. Without a weight, coefficients are plain moments
/// against the orthonormal basis.
pub fn project_l2<F>(
    mesh: &Mesh,
    degree: usize,
    quad_exactness: usize,
    f: F,
    weight: Option<&[Matrix3<f64>]>,
) -> Result<BrokenField, FemError>
where
    F: Fn(&Point) -> Vector3<f64>,
{
    let basis = reference_basis(degree)?;
    let rule = quadrature(Domain::Tetrahedron, quad_exactness)?;
    let tab = basis.tabulate(&rule.points);
    let mut field = BrokenField::zero(degree, mesh.n_cells());
    for cell in 0..mesh.n_cells() {
        let vol_factor = (6.0 * mesh.cell_geometry[cell].volume).sqrt();
        let w_inv = weight.map(|w| {
            w[cell]
                .cholesky()
                .expect("projection weight must be SPD")
                .inverse()
        });
        let coeffs = field.cell_mut(cell);
        for (q, (p, &wq)) in rule.points.iter().zip(&rule.weights).enumerate() {
            let x = mesh.ref_to_phys(cell, p);
            let mut fx = f(&x);
            if let Some(w) = weight {
                fx = w[cell] * fx;
            }
            for m in 0..basis.dim {
                let phi = vol_factor * wq * tab.val[(m, q)];
                for d in 0..3 {
                    coeffs[3 * m + d] += fx[d] * phi;
                }
            }
        }
        if let Some(wi) = w_inv {
            for m in 0..basis.dim {
                let b = Vector3::new(coeffs[3 * m], coeffs[3 * m + 1], coeffs[3 * m + 2]);
                let c = wi * b;
                for d in 0..3 {
                    coeffs[3 * m + d] = c[d];
                }
            }
        }
    }
    Ok(field)
}

/// Cellwise L2 error between a broken field and a callable, integrated with a
/// rule of the given exactness. Returns the global L2 norm of the difference.
pub fn l2_error<F>(mesh: &Mesh, field: &BrokenField, quad_exactness: usize, f: F) -> f64
where
    F: Fn(&Point) -> Vector3<f64>,
{
    let rule = quadrature(Domain::Tetrahedron, quad_exactness).expect("supported quadrature");
    let mut total = 0.0;
    for cell in 0..mesh.n_cells() {
        let vals = evaluate(mesh, field, cell, &rule.points);
        let jac = 6.0 * mesh.cell_geometry[cell].volume;
        for (q, (p, &wq)) in rule.points.iter().zip(&rule.weights).enumerate() {
            let x = mesh.ref_to_phys(cell, p);
            total += wq * jac * (vals[q] - f(&x)).norm_squared();
        }
    }
    total.sqrt()
}
