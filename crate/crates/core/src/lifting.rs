//! Tangential jump lifting and the lifted discrete curl.
//!
//! The tangential jump of a broken field across an oriented face F is
//! `[[v]] = v_l x n_F - v_r x n_F` on interior faces and `v_l x n_F` on
//! boundary faces. The lifting `L(v)` is the broken polynomial field of
//! degree `ell` defined against every broken test field `phi` of degree
//! `ell` by
//!
//! ```text
//! (L(v), phi)_Omega = sum_F ([[v]], {phi})_F,
//! ```
//!
//! where `{phi}` is the two-sided average on interior faces and the one-sided
//! trace on boundary faces. The sum runs over all faces, so boundary
//! tangential traces are lifted as well. Because the per-cell basis is
//! L2-orthonormal, the defining system is the identity and the lifting
//! coefficients are the face moments themselves, assembled here as per-cell
//! blocks acting on the primal dofs of the cell and its face neighbors.
//!
//! The lifted discrete curl is `C(v) = curl_h v + L(v)`; it coincides with
//! the elementwise curl on fields whose tangential trace is continuous and
//! vanishes on the boundary.

use crate::femspace::{
    quadrature, BrokenField, DGSpace, Domain, FemError, QuadratureRule, ReferenceBasis,
};
use crate::mesh::{Mesh, Point};
use nalgebra::{DMatrix, Matrix3, Vector3};
use std::collections::BTreeMap;

/// The matrix C with `C[e][d] = (e_d x n) . e_e`, i.e. the coordinates of the
/// tangential rotation `v -> v x n`.
pub fn tangential_cross_matrix(n: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, n.z, -n.y, //
        -n.z, 0.0, n.x, //
        n.y, -n.x, 0.0,
    )
}

/// The orthogonal projector onto the tangent plane of a unit normal,
/// `P = I - n n^T`. Satisfies `(u x n) . (v x n) = u . P v`.
pub fn tangential_projector(n: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::identity() - n * n.transpose()
}

/// A face quadrature rule mapped to physical space, with the points pulled
/// back to the reference coordinates of every adjacent cell.
pub struct FaceTrace {
    /// Physical quadrature points on the face.
    pub phys: Vec<Point>,
    /// Physical quadrature weights; they sum to the face area.
    pub weights: Vec<f64>,
    /// Adjacent cells with the pulled-back points, the left cell first.
    pub sides: Vec<(usize, Vec<Point>)>,
}

/// Maps a reference-triangle rule onto a mesh face.
pub fn face_trace(mesh: &Mesh, face: usize, rule: &QuadratureRule) -> FaceTrace {
    debug_assert_eq!(rule.domain, Domain::Triangle);
    let f = &mesh.faces[face];
    let v0 = mesh.vertices[f.vertices[0]];
    let e1 = mesh.vertices[f.vertices[1]] - v0;
    let e2 = mesh.vertices[f.vertices[2]] - v0;
    let phys: Vec<Point> = rule
        .points
        .iter()
        .map(|p| v0 + p.x * e1 + p.y * e2)
        .collect();
    // The reference triangle has area 1/2, so the area element is 2 |F|.
    let weights: Vec<f64> = rule.weights.iter().map(|w| w * 2.0 * f.area).collect();
    let mut sides = Vec::with_capacity(2);
    let left_ref = phys.iter().map(|x| mesh.phys_to_ref(f.left, x)).collect();
    sides.push((f.left, left_ref));
    if let Some(right) = f.right {
        let right_ref = phys.iter().map(|x| mesh.phys_to_ref(right, x)).collect();
        sides.push((right, right_ref));
    }
    FaceTrace {
        phys,
        weights,
        sides,
    }
}

/// Values of the physical (orthonormal) scalar basis of one cell at given
/// reference points. Rows are modes, columns points.
pub fn trace_values(mesh: &Mesh, cell: usize, degree: usize, points: &[Point]) -> DMatrix<f64> {
    let basis = ReferenceBasis {
        degree,
        dim: crate::femspace::scalar_dim(degree),
    };
    let tab = basis.tabulate(points);
    let scale = crate::femspace::cell_scale(mesh, cell);
    tab.val.map(|v| v * scale)
}

/// Evaluates the tangential jump of a broken field at the points of a face
/// rule: left trace minus right trace, crossed with the face normal; the
/// one-sided trace crossed with the outward normal on boundary faces.
pub fn tangential_jump(
    mesh: &Mesh,
    field: &BrokenField,
    face: usize,
    rule: &QuadratureRule,
) -> Vec<Vector3<f64>> {
    let ft = face_trace(mesh, face, rule);
    let n = mesh.faces[face].normal;
    let (left, left_pts) = &ft.sides[0];
    let mut vals = crate::femspace::evaluate(mesh, field, *left, left_pts);
    if let Some((right, right_pts)) = ft.sides.get(1) {
        let rvals = crate::femspace::evaluate(mesh, field, *right, right_pts);
        for (v, r) in vals.iter_mut().zip(rvals) {
            *v -= r;
        }
    }
    vals.into_iter().map(|v| v.cross(&n)).collect()
}

/// One cell's row of the lifting operator: dense blocks acting on the primal
/// dofs of the source cells (the cell itself and its face neighbors).
pub struct CellLift {
    /// `(source cell, block)` pairs sorted by source cell; each block is
    /// `(3 dim_ell) x (3 dim_k)`.
    pub sources: Vec<(usize, DMatrix<f64>)>,
}

/// The jump-lifting operator from the primal broken space of degree `k` into
/// the broken space of degree `ell`.
pub struct LiftingOperator {
    pub space: DGSpace,
    pub cells: Vec<CellLift>,
}

/// Builds the lifting operator by accumulating face moments.
pub fn build_lifting(mesh: &Mesh, space: &DGSpace) -> Result<LiftingOperator, FemError> {
    let rule = quadrature(Domain::Triangle, 2 * space.k)?;
    let mut acc: Vec<BTreeMap<usize, DMatrix<f64>>> =
        (0..mesh.n_cells()).map(|_| BTreeMap::new()).collect();
    let rows = 3 * space.dim_ell;
    let cols = 3 * space.dim_k;
    for face in 0..mesh.n_faces() {
        let ft = face_trace(mesh, face, &rule);
        let normal = mesh.faces[face].normal;
        let cross = tangential_cross_matrix(&normal);
        // Average weight: one half on interior faces, one on the boundary.
        let sigma = if ft.sides.len() == 2 { 0.5 } else { 1.0 };
        // Physical traces of both spaces on every adjacent cell.
        let traces_ell: Vec<DMatrix<f64>> = ft
            .sides
            .iter()
            .map(|(cell, pts)| trace_values(mesh, *cell, space.ell, pts))
            .collect();
        let traces_k: Vec<DMatrix<f64>> = ft
            .sides
            .iter()
            .map(|(cell, pts)| trace_values(mesh, *cell, space.k, pts))
            .collect();
        for (ti, (target, _)) in ft.sides.iter().enumerate() {
            for (si, (source, _)) in ft.sides.iter().enumerate() {
                // The jump subtracts the right trace.
                let sign = if si == 0 { 1.0 } else { -1.0 };
                // Scalar face moments: G[n, m] = int_F phi^ell_n phi^k_m dS.
                let mut gram = DMatrix::<f64>::zeros(space.dim_ell, space.dim_k);
                for q in 0..ft.phys.len() {
                    let w = ft.weights[q];
                    for n in 0..space.dim_ell {
                        let tn = w * traces_ell[ti][(n, q)];
                        for m in 0..space.dim_k {
                            gram[(n, m)] += tn * traces_k[si][(m, q)];
                        }
                    }
                }
                let block = acc[*target]
                    .entry(*source)
                    .or_insert_with(|| DMatrix::zeros(rows, cols));
                let factor = sigma * sign;
                for n in 0..space.dim_ell {
                    for m in 0..space.dim_k {
                        let g = factor * gram[(n, m)];
                        if g == 0.0 {
                            continue;
                        }
                        for e in 0..3 {
                            for d in 0..3 {
                                block[(3 * n + e, 3 * m + d)] += g * cross[(e, d)];
                            }
                        }
                    }
                }
            }
        }
    }
    let cells = acc
        .into_iter()
        .map(|map| CellLift {
            sources: map.into_iter().collect(),
        })
        .collect();
    Ok(LiftingOperator {
        space: *space,
        cells,
    })
}

impl LiftingOperator {
    /// Applies the lifting to a primal broken field.
    pub fn apply(&self, v: &BrokenField) -> BrokenField {
        assert_eq!(v.degree, self.space.k);
        assert_eq!(v.n_cells, self.space.n_cells);
        let mut out = BrokenField::zero_lifting(&self.space);
        for (cell, lift) in self.cells.iter().enumerate() {
            let target = out.cell_mut(cell);
            for (source, block) in &lift.sources {
                let vs = v.cell(*source);
                for (r, row) in block.row_iter().enumerate() {
                    let mut sum = 0.0;
                    for (c, val) in row.iter().enumerate() {
                        sum += val * vs[c];
                    }
                    target[r] += sum;
                }
            }
        }
        out
    }
}

/// Applies a prebuilt lifting operator to a field.
pub fn apply_lifting(op: &LiftingOperator, v: &BrokenField) -> BrokenField {
    op.apply(v)
}

/// Per-cell matrices of the elementwise curl from the primal space into the
/// lifting space: `R[(3n+e), (3m+d)] = int_K (grad phi_m x e_d) . e_e phi_n`.
pub fn build_curl_blocks(mesh: &Mesh, space: &DGSpace) -> Result<Vec<DMatrix<f64>>, FemError> {
    let rule = quadrature(Domain::Tetrahedron, 2 * space.k)?;
    let basis_k = ReferenceBasis {
        degree: space.k,
        dim: space.dim_k,
    };
    let basis_ell = ReferenceBasis {
        degree: space.ell,
        dim: space.dim_ell,
    };
    let tab_k = basis_k.tabulate(&rule.points);
    let tab_ell = basis_ell.tabulate(&rule.points);
    let mut blocks = Vec::with_capacity(mesh.n_cells());
    for cell in 0..mesh.n_cells() {
        let jinv_t = mesh.cell_geometry[cell].jacobian_inv.transpose();
        let mut block = DMatrix::zeros(3 * space.dim_ell, 3 * space.dim_k);
        // The two 1/sqrt(6V) basis scales cancel the 6V volume element, so
        // reference weights apply directly.
        for (q, &w) in rule.weights.iter().enumerate() {
            for m in 0..space.dim_k {
                let gref = Vector3::new(tab_k.gx[(m, q)], tab_k.gy[(m, q)], tab_k.gz[(m, q)]);
                let grad = jinv_t * gref;
                for d in 0..3 {
                    let mut ed = Vector3::zeros();
                    ed[d] = 1.0;
                    let curl_md = grad.cross(&ed);
                    for n in 0..space.dim_ell {
                        let pn = w * tab_ell.val[(n, q)];
                        for e in 0..3 {
                            block[(3 * n + e, 3 * m + d)] += pn * curl_md[e];
                        }
                    }
                }
            }
        }
        blocks.push(block);
    }
    Ok(blocks)
}

/// The lifted discrete curl `C(v) = curl_h v + L(v)`, stored as the per-cell
/// elementwise-curl blocks plus the lifting operator.
pub struct DiscreteCurl {
    pub space: DGSpace,
    pub curl_blocks: Vec<DMatrix<f64>>,
    pub lifting: LiftingOperator,
}

/// Builds the discrete curl.
pub fn build_discrete_curl(mesh: &Mesh, space: &DGSpace) -> Result<DiscreteCurl, FemError> {
    Ok(DiscreteCurl {
        space: *space,
        curl_blocks: build_curl_blocks(mesh, space)?,
        lifting: build_lifting(mesh, space)?,
    })
}

impl DiscreteCurl {
    /// Coefficients of the elementwise curl in the lifting space (exact,
    /// since `ell >= k - 1`).
    pub fn broken_curl(&self, v: &BrokenField) -> BrokenField {
        assert_eq!(v.degree, self.space.k);
        let mut out = BrokenField::zero_lifting(&self.space);
        for cell in 0..self.space.n_cells {
            let vc = v.cell(cell);
            let target = out.cell_mut(cell);
            let block = &self.curl_blocks[cell];
            for r in 0..block.nrows() {
                let mut sum = 0.0;
                for c in 0..block.ncols() {
                    sum += block[(r, c)] * vc[c];
                }
                target[r] = sum;
            }
        }
        out
    }

    /// Applies the full discrete curl `C(v)`.
    pub fn apply(&self, v: &BrokenField) -> BrokenField {
        let mut out = self.broken_curl(v);
        let lifted = self.lifting.apply(v);
        for (o, l) in out.coeffs.iter_mut().zip(&lifted.coeffs) {
            *o += l;
        }
        out
    }
}
