//! Residual a posteriori error estimation for the lifted interior-penalty
//! discretization: cellwise indicators, the error measures they control,
//! data oscillation, and the weak-consistency pairing behind the duality
//! argument.
//!
//! The indicator splits into three families. The divergence family measures
//! the charge-conservation residual `div(J + omega^2 eps E_h)` together with
//! normal jumps of `eps E_h`; the curl family measures the strong residual
//! `J + omega^2 eps E_h - curl(nu C(E_h))` together with tangential jumps of
//! the numerical flux `nu C(E_h)`; the nonconformity family measures the
//! tangential jumps of `E_h` itself. Face residuals of the first two
//! families skip the domain boundary, while the nonconformity family keeps
//! boundary faces: the perfect-conductor condition is enforced weakly, so
//! the boundary trace is part of the nonconformity.
//!
//! Patch weights follow the localization of the efficiency bounds: material
//! extrema of the div and curl families range over the threefold vertex
//! closure of the cell, the nonconformity weight over the edge patch, and
//! oscillation over the face patch with the patch wavespeed.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::assembly::{AssembledForms, MaterialModel};
use crate::femspace::{
    evaluate, evaluate_curl, evaluate_div, project_l2, quadrature, BrokenField, Domain, FemError,
};
use crate::lifting::{face_trace, DiscreteCurl, FaceTrace};
use crate::mesh::{Mesh, PatchTable, Point};

/// Averaging constant of the nonconformity weight. The efficiency bounds
/// leave it as a free shape-regularity constant; it is pinned to one so
/// reported indicator values are reproducible.
pub const AVERAGING_CONSTANT: f64 = 1.0;

/// Relative floor under which effectivity ratios are refused: below it the
/// error is quadrature noise and the ratio would be noise over noise.
pub const EFFECTIVITY_FLOOR: f64 = 1e-14;

/// The discrete flux entering the curl-residual family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum FluxMode {
    /// The jump-lifted discrete curl, the flux the error analysis controls.
    DiscreteCurl,
    /// The plain elementwise curl, kept as a diagnostic variant.
    BrokenCurl,
}

/// The source current together with its exact divergence. The divergence
/// must be analytic: a numerical derivative here would bury the
/// charge-conservation residual in differentiation error.
pub struct SourceTerm<'a> {
    /// Current density `J`.
    pub j: &'a dyn Fn(&Point) -> Vector3<f64>,
    /// Exact divergence of `J`.
    pub div_j: &'a dyn Fn(&Point) -> f64,
}

/// One cell's indicator values; every entry is the square root of the
/// localized squared family.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CellIndicators {
    /// Charge-conservation residual.
    pub eta_div: f64,
    /// Strong curl residual with the flux jumps.
    pub eta_curl: f64,
    /// Tangential jumps of the discrete field over the full cell boundary.
    pub eta_nc: f64,
    /// Combined indicator, the root of the sum of the three squares.
    pub eta: f64,
    /// Data oscillation of the surrounding face patch; zero until attached.
    pub osc: f64,
}

/// The estimator output: cellwise indicators and their global
/// root-sum-square aggregates.
#[derive(Clone, Debug, Serialize)]
pub struct EstimatorReport {
    /// Flux variant the curl family was computed with.
    pub flux_mode: FluxMode,
    /// Per-cell indicators in cell order.
    pub cells: Vec<CellIndicators>,
    /// Global divergence family.
    pub eta_div: f64,
    /// Global curl family.
    pub eta_curl: f64,
    /// Global nonconformity family.
    pub eta_nc: f64,
    /// Total estimator.
    pub eta: f64,
    /// Global data oscillation; zero until oscillation is attached.
    pub osc: f64,
}

/// Global estimator values without the per-cell lists.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EstimatorSummary {
    pub n_cells: usize,
    pub eta_div: f64,
    pub eta_curl: f64,
    pub eta_nc: f64,
    pub eta: f64,
    pub osc: f64,
}

impl EstimatorReport {
    fn from_cells(cells: Vec<CellIndicators>, flux_mode: FluxMode) -> Self {
        let rss = |pick: fn(&CellIndicators) -> f64| -> f64 {
            cells
                .iter()
                .map(|c| {
                    let v = pick(c);
                    v * v
                })
                .sum::<f64>()
                .sqrt()
        };
        EstimatorReport {
            flux_mode,
            eta_div: rss(|c| c.eta_div),
            eta_curl: rss(|c| c.eta_curl),
            eta_nc: rss(|c| c.eta_nc),
            eta: rss(|c| c.eta),
            osc: rss(|c| c.osc),
            cells,
        }
    }

    /// Attaches per-cell oscillation values and refreshes the global
    /// aggregate.
    pub fn with_oscillation(mut self, osc: &[f64]) -> Self {
        assert_eq!(osc.len(), self.cells.len());
        for (c, &o) in self.cells.iter_mut().zip(osc) {
            c.osc = o;
        }
        self.osc = osc.iter().map(|o| o * o).sum::<f64>().sqrt();
        self
    }

    /// One row per cell: `id,eta_div,eta_curl,eta_nc,eta,osc`. Floats are
    /// printed with full precision so repeated runs are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,eta_div,eta_curl,eta_nc,eta,osc\n");
        for (i, c) in self.cells.iter().enumerate() {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                i, c.eta_div, c.eta_curl, c.eta_nc, c.eta, c.osc
            )
            .expect("string writes cannot fail");
        }
        out
    }

    /// The global values alone.
    pub fn summary(&self) -> EstimatorSummary {
        EstimatorSummary {
            n_cells: self.cells.len(),
            eta_div: self.eta_div,
            eta_curl: self.eta_curl,
            eta_nc: self.eta_nc,
            eta: self.eta,
            osc: self.osc,
        }
    }
}

/// Error measures of `e = E - E_h` against a curl-conforming exact field.
///
/// Valid when the exact field has a vanishing tangential boundary trace: the
/// jumps of the error then equal the negated jumps of `E_h` on every face,
/// so the jump-based seminorms are evaluated on the discrete field alone.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ErrorMeasures {
    /// Weighted norm `||e||_eps`.
    pub l2_eps: f64,
    /// Lifted-curl seminorm `||C(e)||_nu`.
    pub curl_seminorm: f64,
    /// Stabilization seminorm `|e|_s` at the calibrated penalty.
    pub stab_seminorm: f64,
    /// Energy norm: `omega^2 ||e||_eps^2 + ||C(e)||_nu^2`, rooted.
    pub energy: f64,
    /// Energy norm augmented by the stabilization seminorm.
    pub energy_sharp: f64,
    /// Energy norm augmented by the nonconformity jump seminorm.
    pub energy_dagger: f64,
}

/// Applies a constant cellwise 3x3 weight to a broken field. Because the
/// weight is constant on each cell, the weighted field stays in the same
/// broken space with per-mode coefficients `W_K c_m`.
fn weighted_field(field: &BrokenField, weights: &[Matrix3<f64>]) -> BrokenField {
    let mut out = field.clone();
    for cell in 0..field.n_cells {
        let w = &weights[cell];
        let coeffs = out.cell_mut(cell);
        for m in 0..field.dim_scalar {
            let c = Vector3::new(coeffs[3 * m], coeffs[3 * m + 1], coeffs[3 * m + 2]);
            let wc = w * c;
            for d in 0..3 {
                coeffs[3 * m + d] = wc[d];
            }
        }
    }
    out
}

/// Left-minus-right trace difference of a broken field at mapped face
/// points; the one-sided trace on boundary faces.
fn jump_values(mesh: &Mesh, field: &BrokenField, ft: &FaceTrace) -> Vec<Vector3<f64>> {
    let (left, left_pts) = &ft.sides[0];
    let mut vals = evaluate(mesh, field, *left, left_pts);
    if let Some((right, right_pts)) = ft.sides.get(1) {
        let rvals = evaluate(mesh, field, *right, right_pts);
        for (v, r) in vals.iter_mut().zip(rvals) {
            *v -= r;
        }
    }
    vals
}

/// Minimum of a per-cell scalar over a patch.
fn patch_min(patch: &[usize], values: &[f64]) -> f64 {
    patch.iter().map(|&c| values[c]).fold(f64::INFINITY, f64::min)
}

/// Maximum of a per-cell scalar over a patch.
fn patch_max(patch: &[usize], values: &[f64]) -> f64 {
    patch.iter().map(|&c| values[c]).fold(0.0f64, f64::max)
}

/// Computes the three indicator families for a discrete field.
///
/// `quad_exactness` controls the volume rules, which see the source term;
/// the face integrands are squares of polynomial traces and use exact rules.
/// The returned report has zero oscillation columns; attach them with
/// [`EstimatorReport::with_oscillation`].
pub fn compute_indicators(
    mesh: &Mesh,
    patches: &PatchTable,
    dc: &DiscreteCurl,
    material: &MaterialModel,
    omega: f64,
    e_h: &BrokenField,
    source: &SourceTerm,
    mode: FluxMode,
    quad_exactness: usize,
) -> Result<EstimatorReport, FemError> {
    assert_eq!(e_h.degree, dc.space.k);
    let kf = e_h.degree as f64;
    let omega2 = omega * omega;
    let c_field = match mode {
        FluxMode::DiscreteCurl => dc.apply(e_h),
        FluxMode::BrokenCurl => dc.broken_curl(e_h),
    };
    let eps_field = weighted_field(e_h, &material.eps);
    let flux_field = weighted_field(&c_field, &material.nu);

    let face_rule = quadrature(Domain::Triangle, 2 * e_h.degree.max(c_field.degree))?;
    let vol_rule = quadrature(Domain::Tetrahedron, quad_exactness)?;

    // Squared face-jump integrals, computed once per face and summed per
    // cell afterwards. Entries for the div and curl families stay zero on
    // boundary faces.
    let n_faces = mesh.n_faces();
    let mut njump_sq = vec![0.0; n_faces];
    let mut fjump_sq = vec![0.0; n_faces];
    let mut tjump_sq = vec![0.0; n_faces];
    for face in 0..n_faces {
        let ft = face_trace(mesh, face, &face_rule);
        let n = mesh.faces[face].normal;
        let ej = jump_values(mesh, e_h, &ft);
        tjump_sq[face] = ft
            .weights
            .iter()
            .zip(&ej)
            .map(|(w, v)| w * v.cross(&n).norm_squared())
            .sum();
        if mesh.faces[face].right.is_some() {
            let dj = jump_values(mesh, &eps_field, &ft);
            njump_sq[face] = ft
                .weights
                .iter()
                .zip(&dj)
                .map(|(w, v)| {
                    let d = v.dot(&n);
                    w * d * d
                })
                .sum();
            let fj = jump_values(mesh, &flux_field, &ft);
            fjump_sq[face] = ft
                .weights
                .iter()
                .zip(&fj)
                .map(|(w, v)| w * v.cross(&n).norm_squared())
                .sum();
        }
    }

    let mut cells = Vec::with_capacity(mesh.n_cells());
    for cell in 0..mesh.n_cells() {
        let geo = &mesh.cell_geometry[cell];
        let h = geo.diameter;
        let jac = 6.0 * geo.volume;
        let e_vals = evaluate(mesh, e_h, cell, &vol_rule.points);
        let div_eps = evaluate_div(mesh, &eps_field, cell, &vol_rule.points);
        let curl_flux = evaluate_curl(mesh, &flux_field, cell, &vol_rule.points);
        let mut div_vol = 0.0;
        let mut curl_vol = 0.0;
        for (q, (p, &wq)) in vol_rule.points.iter().zip(&vol_rule.weights).enumerate() {
            let x = mesh.ref_to_phys(cell, p);
            let r_div = (source.div_j)(&x) + omega2 * div_eps[q];
            let r_curl = (source.j)(&x) + omega2 * (material.eps[cell] * e_vals[q]) - curl_flux[q];
            div_vol += wq * jac * r_div * r_div;
            curl_vol += wq * jac * r_curl.norm_squared();
        }
        let mut div_face = 0.0;
        let mut curl_face = 0.0;
        let mut nc_face = 0.0;
        for &face in &mesh.cell_faces[cell] {
            nc_face += tjump_sq[face];
            div_face += njump_sq[face];
            curl_face += fjump_sq[face];
        }
        let eps_min = patch_min(&patches.vertex_patch3[cell], &material.eps_min);
        let nu_min = patch_min(&patches.vertex_patch3[cell], &material.nu_min);
        let nu_max_edge = patch_max(&patches.edge_patch[cell], &material.nu_max);
        let div_sq =
            (div_vol * h * h / (omega2 * kf * kf) + div_face * omega2 * h / kf) / eps_min;
        let curl_sq = (curl_vol * h * h / (kf * kf) + curl_face * h / kf) / nu_min;
        let nc_sq = AVERAGING_CONSTANT * nu_max_edge * kf * kf / h * nc_face;
        cells.push(CellIndicators {
            eta_div: div_sq.sqrt(),
            eta_curl: curl_sq.sqrt(),
            eta_nc: nc_sq.sqrt(),
            eta: (div_sq + curl_sq + nc_sq).sqrt(),
            osc: 0.0,
        });
    }
    Ok(EstimatorReport::from_cells(cells, mode))
}

/// Data oscillation per cell: the unresolved part of the source over the
/// face patch, with the best discrete surrogate realized componentwise by
/// the plain L2 projection onto the primal broken space.
pub fn compute_oscillation(
    mesh: &Mesh,
    patches: &PatchTable,
    degree: usize,
    material: &MaterialModel,
    omega: f64,
    source: &SourceTerm,
    quad_exactness: usize,
) -> Result<Vec<f64>, FemError> {
    let omega2 = omega * omega;
    let kf = degree as f64;
    let j_h = project_l2(mesh, degree, quad_exactness, |p| (source.j)(p), None)?;
    let rule = quadrature(Domain::Tetrahedron, quad_exactness)?;
    // Raw per-cell deviations; patch weights are applied per receiving cell.
    let n_cells = mesh.n_cells();
    let mut dev_sq = vec![0.0; n_cells];
    let mut div_dev_sq = vec![0.0; n_cells];
    for cell in 0..n_cells {
        let jac = 6.0 * mesh.cell_geometry[cell].volume;
        let jh_vals = evaluate(mesh, &j_h, cell, &rule.points);
        let div_jh = evaluate_div(mesh, &j_h, cell, &rule.points);
        for (q, (p, &wq)) in rule.points.iter().zip(&rule.weights).enumerate() {
            let x = mesh.ref_to_phys(cell, p);
            dev_sq[cell] += wq * jac * ((source.j)(&x) - jh_vals[q]).norm_squared();
            let dd = (source.div_j)(&x) - div_jh[q];
            div_dev_sq[cell] += wq * jac * dd * dd;
        }
    }
    let mut osc = Vec::with_capacity(n_cells);
    for cell in 0..n_cells {
        let patch = &patches.face_patch[cell];
        let eps_min = patch_min(patch, &material.eps_min);
        let eps_max = patch_max(patch, &material.eps_max);
        let nu_min = patch_min(patch, &material.nu_min);
        let vel_sq = nu_min / eps_max;
        let mut sum = 0.0;
        for &c in patch {
            let h = mesh.cell_geometry[c].diameter;
            let h2k2 = h * h / (kf * kf);
            sum += omega2 * h2k2 / vel_sq * dev_sq[c] + h2k2 * div_dev_sq[c];
        }
        osc.push((sum / (omega2 * eps_min)).sqrt());
    }
    Ok(osc)
}

/// Error measures of the discrete field against a conforming exact field
/// with vanishing tangential boundary trace. See [`ErrorMeasures`] for the
/// validity constraint.
pub fn compute_error_measures<F, G>(
    mesh: &Mesh,
    patches: &PatchTable,
    forms: &AssembledForms,
    material: &MaterialModel,
    e_h: &BrokenField,
    exact: F,
    exact_curl: G,
    quad_exactness: usize,
) -> Result<ErrorMeasures, FemError>
where
    F: Fn(&Point) -> Vector3<f64>,
    G: Fn(&Point) -> Vector3<f64>,
{
    let omega2 = forms.omega * forms.omega;
    let kf = e_h.degree as f64;
    let c_field = forms.discrete_curl.apply(e_h);
    let rule = quadrature(Domain::Tetrahedron, quad_exactness)?;
    let mut mass_sq = 0.0;
    let mut curl_sq = 0.0;
    for cell in 0..mesh.n_cells() {
        let jac = 6.0 * mesh.cell_geometry[cell].volume;
        let e_vals = evaluate(mesh, e_h, cell, &rule.points);
        let c_vals = evaluate(mesh, &c_field, cell, &rule.points);
        for (q, (p, &wq)) in rule.points.iter().zip(&rule.weights).enumerate() {
            let x = mesh.ref_to_phys(cell, p);
            let e = exact(&x) - e_vals[q];
            let ce = exact_curl(&x) - c_vals[q];
            mass_sq += wq * jac * (material.eps[cell] * e).dot(&e);
            curl_sq += wq * jac * (material.nu[cell] * ce).dot(&ce);
        }
    }
    // The exact field has no jumps and no lifting, so both jump-based
    // seminorms of the error coincide with those of the discrete field.
    // Face-by-face quadrature keeps the penalty part a sum of nonnegative
    // terms: the assembled quadratic form cancels catastrophically when the
    // field is conforming to roundoff. The lifting norm is exact through
    // the orthonormal coefficients. The form is positive semidefinite at a
    // calibrated penalty; the clamp removes roundoff-scale negatives.
    let face_rule = quadrature(Domain::Triangle, 2 * e_h.degree)?;
    let mut penalty_sq = 0.0;
    for face in 0..mesh.n_faces() {
        let ft = face_trace(mesh, face, &face_rule);
        let n = mesh.faces[face].normal;
        let coef = material.nu_tilde_face(mesh, face) / mesh.faces[face].diameter;
        let tj = jump_values(mesh, e_h, &ft);
        penalty_sq += coef
            * ft.weights
                .iter()
                .zip(&tj)
                .map(|(w, v)| w * v.cross(&n).norm_squared())
                .sum::<f64>();
    }
    let lift = forms.discrete_curl.lifting.apply(e_h);
    let mut lift_sq = 0.0;
    for cell in 0..mesh.n_cells() {
        let lc = lift.cell(cell);
        for m in 0..lift.dim_scalar {
            let c = Vector3::new(lc[3 * m], lc[3 * m + 1], lc[3 * m + 2]);
            lift_sq += (material.nu[cell] * c).dot(&c);
        }
    }
    let stab_sq = (forms.eta * penalty_sq - lift_sq).max(0.0);
    let mut jump_sq = 0.0;
    for cell in 0..mesh.n_cells() {
        let h = mesh.cell_geometry[cell].diameter;
        let nu_max_edge = patch_max(&patches.edge_patch[cell], &material.nu_max);
        let mut boundary = 0.0;
        for &face in &mesh.cell_faces[cell] {
            let ft = face_trace(mesh, face, &face_rule);
            let n = mesh.faces[face].normal;
            let tj = jump_values(mesh, e_h, &ft);
            boundary += ft
                .weights
                .iter()
                .zip(&tj)
                .map(|(w, v)| w * v.cross(&n).norm_squared())
                .sum::<f64>();
        }
        jump_sq += AVERAGING_CONSTANT * nu_max_edge * kf * kf / h * boundary;
    }
    let energy_sq = omega2 * mass_sq + curl_sq;
    Ok(ErrorMeasures {
        l2_eps: mass_sq.sqrt(),
        curl_seminorm: curl_sq.sqrt(),
        stab_seminorm: stab_sq.sqrt(),
        energy: energy_sq.sqrt(),
        energy_sharp: (energy_sq + stab_sq).sqrt(),
        energy_dagger: (energy_sq + jump_sq).sqrt(),
    })
}

/// The weak-consistency defect `delta(v_h, Psi) =
/// (v_h, curl(nu curl Psi)) - (nu C(v_h), curl Psi)`.
///
/// It vanishes for conforming `v_h` with vanishing tangential boundary
/// trace, and its negative is the consistency error of the primal form
/// against the exact solution.
pub fn weak_consistency_delta<F, G>(
    mesh: &Mesh,
    dc: &DiscreteCurl,
    material: &MaterialModel,
    v_h: &BrokenField,
    curl_psi: F,
    curl_nu_curl_psi: G,
    quad_exactness: usize,
) -> Result<f64, FemError>
where
    F: Fn(&Point) -> Vector3<f64>,
    G: Fn(&Point) -> Vector3<f64>,
{
    let c_field = dc.apply(v_h);
    let rule = quadrature(Domain::Tetrahedron, quad_exactness)?;
    let mut delta = 0.0;
    for cell in 0..mesh.n_cells() {
        let jac = 6.0 * mesh.cell_geometry[cell].volume;
        let v_vals = evaluate(mesh, v_h, cell, &rule.points);
        let c_vals = evaluate(mesh, &c_field, cell, &rule.points);
        for (q, (p, &wq)) in rule.points.iter().zip(&rule.weights).enumerate() {
            let x = mesh.ref_to_phys(cell, p);
            let first = v_vals[q].dot(&curl_nu_curl_psi(&x));
            let second = (material.nu[cell] * c_vals[q]).dot(&curl_psi(&x));
            delta += wq * jac * (first - second);
        }
    }
    Ok(delta)
}

/// Effectivity of the estimator: total indicator over the augmented error.
/// `None` when the error sits below [`EFFECTIVITY_FLOOR`] times the
/// reference scale.
pub fn effectivity(
    report: &EstimatorReport,
    measures: &ErrorMeasures,
    reference_scale: f64,
) -> Option<f64> {
    if measures.energy_dagger <= EFFECTIVITY_FLOOR * reference_scale {
        None
    } else {
        Some(report.eta / measures.energy_dagger)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{broken_moments, calibrate_eta};
    use crate::femspace::{l2_error, DGSpace};
    use crate::lifting::build_discrete_curl;
    use crate::mesh::{build_structured_mesh, compute_patches};
    use crate::solver::{conforming_pairing, solve_primal};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn quartic(p: &Point) -> Vector3<f64> {
        let g = |t: f64| t * (1.0 - t);
        Vector3::new(g(p.y) * g(p.z), 0.0, 0.0)
    }

    fn quartic_curl(p: &Point) -> Vector3<f64> {
        let g = |t: f64| t * (1.0 - t);
        let dg = |t: f64| 1.0 - 2.0 * t;
        Vector3::new(0.0, g(p.y) * dg(p.z), -dg(p.y) * g(p.z))
    }

    /// curl curl of the quartic field; its divergence vanishes.
    fn quartic_curl_curl(p: &Point) -> Vector3<f64> {
        let g = |t: f64| t * (1.0 - t);
        Vector3::new(2.0 * (g(p.y) + g(p.z)), 0.0, 0.0)
    }

    fn sine(p: &Point) -> Vector3<f64> {
        Vector3::new(
            (PI * p.y).sin() * (PI * p.z).sin(),
            (PI * p.z).sin() * (PI * p.x).sin(),
            (PI * p.x).sin() * (PI * p.y).sin(),
        )
    }

    fn sine_curl(p: &Point) -> Vector3<f64> {
        let (sx, cx) = ((PI * p.x).sin(), (PI * p.x).cos());
        let (sy, cy) = ((PI * p.y).sin(), (PI * p.y).cos());
        let (sz, cz) = ((PI * p.z).sin(), (PI * p.z).cos());
        PI * Vector3::new(sx * (cy - cz), sy * (cz - cx), sz * (cx - cy))
    }

    fn forms_for(
        mesh: &Mesh,
        k: usize,
        ell: usize,
        omega: f64,
    ) -> (AssembledForms, MaterialModel, DGSpace) {
        let space = DGSpace::new(mesh, k, ell).unwrap();
        let material = MaterialModel::vacuum(mesh);
        let dc = build_discrete_curl(mesh, &space).unwrap();
        let penalty = crate::assembly::assemble_jump_penalty(mesh, &space, &material).unwrap();
        let lift = crate::assembly::assemble_lift_gram(&space, &dc, &material.nu);
        let eta = calibrate_eta(&penalty, &lift).unwrap().eta_rec;
        let forms = AssembledForms::new(mesh, &space, &material, omega, eta).unwrap();
        (forms, material, space)
    }

    #[test]
    fn exact_discrete_solution_has_vanishing_indicators() {
        let mesh = build_structured_mesh(1, 1.0);
        let patches = compute_patches(&mesh);
        let space = DGSpace::new(&mesh, 4, 4).unwrap();
        let material = MaterialModel::vacuum(&mesh);
        let dc = build_discrete_curl(&mesh, &space).unwrap();
        let omega = 1.0;
        let e_h = project_l2(&mesh, 4, 10, quartic, None).unwrap();
        let j = |p: &Point| quartic_curl_curl(p) - omega * omega * quartic(p);
        let div_j = |_: &Point| 0.0;
        let source = SourceTerm {
            j: &j,
            div_j: &div_j,
        };
        let report = compute_indicators(
            &mesh,
            &patches,
            &dc,
            &material,
            omega,
            &e_h,
            &source,
            FluxMode::DiscreteCurl,
            10,
        )
        .unwrap();
        let j_norm = l2_error(&mesh, &BrokenField::zero(1, mesh.n_cells()), 10, j);
        assert!(j_norm > 0.1);
        assert!(report.eta <= 1e-7 * j_norm, "eta = {}", report.eta);
        assert!(report.eta_div <= 1e-7 * j_norm);
        assert!(report.eta_curl <= 1e-7 * j_norm);
        assert!(report.eta_nc <= 1e-7 * j_norm);
    }

    #[test]
    fn conforming_linear_field_with_matching_source() {
        // E = (z, x, y) is globally conforming with constant curl, so with
        // the elementwise flux only the weakly imposed boundary trace is
        // charged: both residual families vanish, the nonconformity stays.
        let mesh = build_structured_mesh(2, 1.0);
        let patches = compute_patches(&mesh);
        let space = DGSpace::new(&mesh, 1, 0).unwrap();
        let material = MaterialModel::vacuum(&mesh);
        let dc = build_discrete_curl(&mesh, &space).unwrap();
        let omega = 1.3;
        let field = |p: &Point| Vector3::new(p.z, p.x, p.y);
        let e_h = project_l2(&mesh, 1, 4, field, None).unwrap();
        let j = move |p: &Point| -omega * omega * field(p);
        let div_j = |_: &Point| 0.0;
        let source = SourceTerm {
            j: &j,
            div_j: &div_j,
        };
        let report = compute_indicators(
            &mesh,
            &patches,
            &dc,
            &material,
            omega,
            &e_h,
            &source,
            FluxMode::BrokenCurl,
            6,
        )
        .unwrap();
        assert!(report.eta_div <= 1e-11, "eta_div = {}", report.eta_div);
        assert!(report.eta_curl <= 1e-11, "eta_curl = {}", report.eta_curl);
        assert!(report.eta_nc > 0.1, "eta_nc = {}", report.eta_nc);
    }

    #[test]
    fn indicators_match_hand_quadrature_on_two_cells() {
        // Piecewise-constant field and anisotropic materials: every term of
        // every family is a closed-form product of areas, volumes, and
        // constant jumps, recomputed here from raw mesh geometry.
        let vertices = vec![
            Point::new(0.0, 0.0, 0.0),
            Point::new(1.0, 0.0, 0.0),
            Point::new(0.0, 1.0, 0.0),
            Point::new(0.0, 0.0, 1.0),
            Point::new(1.0, 1.0, 1.0),
        ];
        let mesh = Mesh::from_raw(vertices, vec![[0, 1, 2, 3], [1, 2, 3, 4]]).unwrap();
        let patches = compute_patches(&mesh);
        let eps = vec![
            Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0)),
            Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 2.0)),
        ];
        let nu = vec![
            Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)),
            Matrix3::from_diagonal(&Vector3::new(2.0, 2.0, 5.0)),
        ];
        let material = MaterialModel::from_cells(&mesh, eps.clone(), nu.clone()).unwrap();
        let space = DGSpace::new(&mesh, 1, 0).unwrap();
        let dc = build_discrete_curl(&mesh, &space).unwrap();
        let omega = 1.3;
        let consts = [Vector3::new(0.3, -0.2, 0.5), Vector3::new(-0.1, 0.4, 0.2)];
        let coeffs = broken_moments(&mesh, 1, 4, |cell, _| consts[cell]).unwrap();
        let e_h = BrokenField::from_coeffs(1, 2, coeffs).unwrap();
        let j = |_: &Point| Vector3::zeros();
        let div_j = |_: &Point| 0.0;
        let source = SourceTerm {
            j: &j,
            div_j: &div_j,
        };
        let report = compute_indicators(
            &mesh,
            &patches,
            &dc,
            &material,
            omega,
            &e_h,
            &source,
            FluxMode::BrokenCurl,
            4,
        )
        .unwrap();

        // Patch extrema: both patches span both cells.
        let eps_min = 1.0;
        let nu_min = 1.0;
        let nu_max = 9.0;
        let omega2 = omega * omega;
        for cell in 0..2 {
            let geo = &mesh.cell_geometry[cell];
            let h = geo.diameter;
            // Volume curl residual: J + omega^2 eps E_h - 0, constant.
            let r = omega2 * (eps[cell] * consts[cell]);
            let curl_sq = h * h * r.norm_squared() * geo.volume / nu_min;
            let mut div_face = 0.0;
            let mut nc_face = 0.0;
            for &face in &mesh.cell_faces[cell] {
                let f = &mesh.faces[face];
                let jump = if f.right.is_some() {
                    let d = (eps[0] * consts[0] - eps[1] * consts[1]).dot(&f.normal);
                    div_face += f.area * d * d;
                    consts[0] - consts[1]
                } else {
                    consts[f.left]
                };
                nc_face += f.area * jump.cross(&f.normal).norm_squared();
            }
            let div_sq = omega2 * h * div_face / eps_min;
            let nc_sq = nu_max / h * nc_face;
            assert_relative_eq!(report.cells[cell].eta_div, div_sq.sqrt(), max_relative = 1e-12);
            assert_relative_eq!(
                report.cells[cell].eta_curl,
                curl_sq.sqrt(),
                max_relative = 1e-12
            );
            assert_relative_eq!(report.cells[cell].eta_nc, nc_sq.sqrt(), max_relative = 1e-12);
            let total = (div_sq + curl_sq + nc_sq).sqrt();
            assert_relative_eq!(report.cells[cell].eta, total, max_relative = 1e-12);
        }
        let global = (report.cells[0].eta * report.cells[0].eta
            + report.cells[1].eta * report.cells[1].eta)
            .sqrt();
        assert_relative_eq!(report.eta, global, max_relative = 1e-13);
    }

    #[test]
    fn oscillation_vanishes_for_resolved_sources() {
        let mesh = build_structured_mesh(2, 1.0);
        let patches = compute_patches(&mesh);
        let material = MaterialModel::vacuum(&mesh);
        let zero = |_: &Point| Vector3::zeros();
        let zero_div = |_: &Point| 0.0;
        let osc = compute_oscillation(
            &mesh,
            &patches,
            2,
            &material,
            1.0,
            &SourceTerm {
                j: &zero,
                div_j: &zero_div,
            },
            6,
        )
        .unwrap();
        assert!(osc.iter().all(|&o| o == 0.0));

        // A quadratic source is resolved exactly at k = 2.
        let j = |p: &Point| Vector3::new(p.x * p.x, p.y * p.z, p.x + p.y);
        let div_j = |p: &Point| 2.0 * p.x + p.z;
        let j_norm = l2_error(&mesh, &BrokenField::zero(1, mesh.n_cells()), 6, j);
        let osc = compute_oscillation(
            &mesh,
            &patches,
            2,
            &material,
            1.0,
            &SourceTerm {
                j: &j,
                div_j: &div_j,
            },
            6,
        )
        .unwrap();
        let global = osc.iter().map(|o| o * o).sum::<f64>().sqrt();
        assert!(global <= 1e-10 * j_norm, "osc = {global}");
    }

    #[test]
    fn oscillation_decays_under_refinement() {
        let material_of = |mesh: &Mesh| MaterialModel::vacuum(mesh);
        let j = |p: &Point| sine(p);
        let div_j = |_: &Point| 0.0;
        let mut values = Vec::new();
        for n in [1usize, 2] {
            let mesh = build_structured_mesh(n, 1.0);
            let patches = compute_patches(&mesh);
            let osc = compute_oscillation(
                &mesh,
                &patches,
                1,
                &material_of(&mesh),
                1.0,
                &SourceTerm {
                    j: &j,
                    div_j: &div_j,
                },
                8,
            )
            .unwrap();
            values.push(osc.iter().map(|o| o * o).sum::<f64>().sqrt());
        }
        // One halving step: the oscillation carries at least two orders in h
        // beyond the projection error, so a factor of four is conservative.
        assert!(
            values[0] > 4.0 * values[1],
            "osc did not decay: {values:?}"
        );
    }

    #[test]
    fn flux_variants_stay_within_bounded_ratio() {
        let mesh = build_structured_mesh(2, 1.0);
        let patches = compute_patches(&mesh);
        let omega = 1.0;
        let (forms, material, _space) = forms_for(&mesh, 1, 1, omega);
        let omega2 = omega * omega;
        let j = move |p: &Point| (2.0 * PI * PI - omega2) * sine(p);
        let div_j = |_: &Point| 0.0;
        let rhs = crate::assembly::assemble_rhs(&mesh, &forms.space, 8, j).unwrap();
        let solution = solve_primal(&forms, &rhs).unwrap();
        let source = SourceTerm {
            j: &j,
            div_j: &div_j,
        };
        let lifted = compute_indicators(
            &mesh,
            &patches,
            &forms.discrete_curl,
            &material,
            omega,
            &solution.field,
            &source,
            FluxMode::DiscreteCurl,
            8,
        )
        .unwrap();
        let broken = compute_indicators(
            &mesh,
            &patches,
            &forms.discrete_curl,
            &material,
            omega,
            &solution.field,
            &source,
            FluxMode::BrokenCurl,
            8,
        )
        .unwrap();
        let ratio = lifted.eta_curl / broken.eta_curl;
        assert!((0.1..=10.0).contains(&ratio), "curl ratio {ratio}");
        let total = lifted.eta / broken.eta;
        assert!((0.1..=10.0).contains(&total), "total ratio {total}");
        // The two variants share the div and nonconformity families.
        assert_relative_eq!(lifted.eta_div, broken.eta_div, max_relative = 1e-14);
        assert_relative_eq!(lifted.eta_nc, broken.eta_nc, max_relative = 1e-14);
    }

    #[test]
    fn measures_match_matrix_quadratic_forms() {
        // The quartic field lies in the discrete space, so every measure of
        // the error against a perturbed discrete field has a second, purely
        // algebraic evaluation through the assembled forms.
        let mesh = build_structured_mesh(1, 1.0);
        let patches = compute_patches(&mesh);
        let (forms, material, space) = forms_for(&mesh, 4, 4, 1.1);
        let exact_coeffs = project_l2(&mesh, 4, 10, quartic, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut e_h = exact_coeffs.clone();
        for c in e_h.coeffs.iter_mut() {
            *c += 0.05 * rng.random_range(-1.0..1.0);
        }
        let measures = compute_error_measures(
            &mesh,
            &patches,
            &forms,
            &material,
            &e_h,
            quartic,
            quartic_curl,
            12,
        )
        .unwrap();
        let x: Vec<f64> = exact_coeffs
            .coeffs
            .iter()
            .zip(&e_h.coeffs)
            .map(|(a, b)| a - b)
            .collect();
        let mass_sq = forms.mass.quad(&x);
        let curl_sq = forms.curl_stiffness.quad(&x);
        let stab_sq = forms.stabilization_seminorm_sq(&x);
        let omega2 = forms.omega * forms.omega;
        assert_relative_eq!(measures.l2_eps, mass_sq.sqrt(), max_relative = 1e-8);
        assert_relative_eq!(measures.curl_seminorm, curl_sq.sqrt(), max_relative = 1e-8);
        assert_relative_eq!(measures.stab_seminorm, stab_sq.sqrt(), max_relative = 1e-8);
        assert_relative_eq!(
            measures.energy,
            (omega2 * mass_sq + curl_sq).sqrt(),
            max_relative = 1e-8
        );
        assert!(measures.energy_sharp >= measures.energy);
        assert!(measures.energy_dagger >= measures.energy);
        // The dagger augmentation is exactly the nonconformity family.
        let j = |_: &Point| Vector3::zeros();
        let div_j = |_: &Point| 0.0;
        let report = compute_indicators(
            &mesh,
            &patches,
            &forms.discrete_curl,
            &material,
            forms.omega,
            &e_h,
            &SourceTerm {
                j: &j,
                div_j: &div_j,
            },
            FluxMode::DiscreteCurl,
            10,
        )
        .unwrap();
        let dagger_sq = measures.energy * measures.energy + report.eta_nc * report.eta_nc;
        assert_relative_eq!(
            measures.energy_dagger,
            dagger_sq.sqrt(),
            max_relative = 1e-10
        );
        let _ = space;
    }

    #[test]
    fn delta_vanishes_for_conforming_zero_trace_fields() {
        // A conforming field with zero tangential boundary trace makes the
        // consistency defect an exact integration-by-parts identity; only
        // quadrature error of the transcendental factors remains.
        let mesh = build_structured_mesh(2, 1.0);
        let space = DGSpace::new(&mesh, 4, 4).unwrap();
        let material = MaterialModel::vacuum(&mesh);
        let dc = build_discrete_curl(&mesh, &space).unwrap();
        let v_h = project_l2(&mesh, 4, 10, quartic, None).unwrap();
        let curl_psi = sine_curl;
        let curl_nu_curl_psi = |p: &Point| 2.0 * PI * PI * sine(p);
        let delta = weak_consistency_delta(
            &mesh,
            &dc,
            &material,
            &v_h,
            curl_psi,
            curl_nu_curl_psi,
            14,
        )
        .unwrap();
        assert!(delta.abs() <= 1e-9, "delta = {delta}");
    }

    #[test]
    fn goal_oriented_identity_for_the_discrete_solution() {
        // b(E - E_h, w) = -delta(w, E) for every discrete w: the left side
        // pairs the conforming solution through its moments, the right side
        // is the consistency defect.
        let mesh = build_structured_mesh(1, 1.0);
        let patches = compute_patches(&mesh);
        let omega = 1.0;
        let (forms, material, space) = forms_for(&mesh, 1, 1, omega);
        let omega2 = omega * omega;
        let j = move |p: &Point| (2.0 * PI * PI - omega2) * sine(p);
        let rhs = crate::assembly::assemble_rhs(&mesh, &space, 12, j).unwrap();
        let solution = solve_primal(&forms, &rhs).unwrap();
        let pairing =
            conforming_pairing(&mesh, &forms, &material, sine, sine_curl, 12, -1.0).unwrap();
        let b = forms.b_sharp();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let w: Vec<f64> = (0..space.total_dofs())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let w_field = BrokenField::from_coeffs(space.k, space.n_cells, w.clone()).unwrap();
            let lhs = pairing.iter().zip(&w).map(|(r, x)| r * x).sum::<f64>()
                - b.bilinear(&solution.field.coeffs, &w);
            let delta = weak_consistency_delta(
                &mesh,
                &forms.discrete_curl,
                &material,
                &w_field,
                sine_curl,
                |p: &Point| 2.0 * PI * PI * sine(p),
                12,
            )
            .unwrap();
            let scale = lhs.abs().max(delta.abs()).max(1e-3);
            assert!(
                (lhs + delta).abs() <= 1e-8 * scale,
                "lhs = {lhs}, -delta = {}",
                -delta
            );
        }
        let _ = patches;
    }

    #[test]
    fn report_export_is_deterministic() {
        let mesh = build_structured_mesh(1, 1.0);
        let patches = compute_patches(&mesh);
        let space = DGSpace::new(&mesh, 1, 1).unwrap();
        let material = MaterialModel::vacuum(&mesh);
        let dc = build_discrete_curl(&mesh, &space).unwrap();
        let e_h = project_l2(&mesh, 1, 4, |p| Vector3::new(p.z, p.x * p.y, p.y), None).unwrap();
        let j = |p: &Point| Vector3::new(p.x, 0.0, -p.z);
        let div_j = |_: &Point| 0.0;
        let source = SourceTerm {
            j: &j,
            div_j: &div_j,
        };
        let run = || {
            let report = compute_indicators(
                &mesh,
                &patches,
                &dc,
                &material,
                1.0,
                &e_h,
                &source,
                FluxMode::DiscreteCurl,
                6,
            )
            .unwrap();
            let osc =
                compute_oscillation(&mesh, &patches, 1, &material, 1.0, &source, 6).unwrap();
            report.with_oscillation(&osc)
        };
        let a = run();
        let b = run();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(
            serde_json::to_string(&a.summary()).unwrap(),
            serde_json::to_string(&b.summary()).unwrap()
        );
        let csv = a.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("id,eta_div,eta_curl,eta_nc,eta,osc"));
        assert_eq!(csv.lines().count(), mesh.n_cells() + 1);
        assert!(a.osc > 0.0);
        // Effectivity guards against a vanishing denominator.
        let zero_measures = ErrorMeasures {
            l2_eps: 0.0,
            curl_seminorm: 0.0,
            stab_seminorm: 0.0,
            energy: 0.0,
            energy_sharp: 0.0,
            energy_dagger: 0.0,
        };
        assert!(effectivity(&a, &zero_measures, 1.0).is_none());
        let finite = ErrorMeasures {
            energy_dagger: 2.0,
            ..zero_measures
        };
        assert_eq!(effectivity(&a, &finite, 1.0), Some(a.eta / 2.0));
    }
}
