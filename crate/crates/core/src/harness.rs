//! Manufactured-solution catalog, refinement studies, and report
//! serialization.
//!
//! A manufactured case packages an exact field on the unit cube together
//! with its curl and the matching source, and refuses to exist unless it
//! passes two self-checks: the tangential trace vanishes on the boundary,
//! and the source reproduces the weak form against random conforming
//! polynomial test fields. A convergence study runs the full pipeline per
//! refinement level (calibrate on the coarsest mesh, assemble, solve,
//! measure, estimate) and reports observed rates, effectivities,
//! best-approximation ratios, and optional inf-sup constants.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{
    assemble_jump_penalty, assemble_lift_gram, assemble_rhs, calibrate_eta, AssembledForms,
    AssemblyError, MaterialModel,
};
use crate::estimator::{
    compute_error_measures, compute_indicators, compute_oscillation, effectivity, ErrorMeasures,
    EstimatorReport, FluxMode, SourceTerm,
};
use crate::femspace::{quadrature, BrokenField, DGSpace, Domain, FemError};
use crate::lifting::{build_discrete_curl, face_trace};
use crate::mesh::{build_structured_mesh, compute_patches, Mesh, Point};
use crate::poly::{Poly3, VecPoly3};
use crate::solver::{best_approximation, infsup_constant, solve_primal, DgSolution, SolverError};

/// Report schema identifier embedded in every JSON export.
pub const REPORT_SCHEMA: &str = "maxwell-ipdg-report/1";

/// Largest structured-mesh resolution per primal degree k = 1..4 that stays
/// at desk scale; studies beyond it require an explicit override.
pub const DESK_CAPS: [usize; 4] = [8, 4, 3, 2];

/// Relative threshold under which a level is flagged exact: the discrete
/// solution reproduces the manufactured field up to solver roundoff.
const EXACTNESS_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(
        "omega^2 = {omega_sq:.6} is within 1% of the cavity eigenvalue 2 pi^2 = {cavity:.6}; \
         the sine-case source degenerates there"
    )]
    ResonantFrequency { omega_sq: f64, cavity: f64 },
    #[error("unknown manufactured case '{0}' (available: sine, quartic)")]
    UnknownCase(String),
    #[error("polynomial degree k = {0} is outside the supported range 1 to 4")]
    UnsupportedDegree(usize),
    #[error("mesh levels must be nondecreasing, got {0:?}")]
    LevelsNotSorted(Vec<usize>),
    #[error(
        "n = {n} exceeds the desk-scale cap n <= {cap} for degree k = {k}; \
         set allow_large to run anyway"
    )]
    DeskCap { k: usize, n: usize, cap: usize },
    #[error("manufactured case '{name}' failed its self-check: {detail}")]
    SelfCheck { name: String, detail: String },
    #[error("level n = {n}: {source}")]
    Level { n: usize, source: SolverError },
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("report parse failure: {0}")]
    Parse(#[from] serde_json::Error),
}

/// A manufactured solution of the time-harmonic system on the unit cube
/// with vacuum coefficients. The stored source satisfies
/// `J = -omega^2 E + curl(curl E)` and the tangential trace of `E` vanishes
/// on the boundary; both facts are verified at construction.
pub struct ManufacturedCase {
    /// Case name used in configs and reports.
    pub name: &'static str,
    /// Frequency the source was built for.
    pub omega: f64,
    /// Exact field.
    pub e: Box<dyn Fn(&Point) -> Vector3<f64>>,
    /// Exact curl of the field.
    pub curl_e: Box<dyn Fn(&Point) -> Vector3<f64>>,
    /// `curl(curl E)`; enters the consistency defect.
    pub curl_curl_e: Box<dyn Fn(&Point) -> Vector3<f64>>,
    /// Source `J = -omega^2 E + curl(curl E)`.
    pub j: Box<dyn Fn(&Point) -> Vector3<f64>>,
    /// Exact divergence of the source.
    pub div_j: Box<dyn Fn(&Point) -> f64>,
    /// Total polynomial degree when the field is a polynomial; a solve at
    /// that degree reproduces it exactly.
    pub polynomial_degree: Option<usize>,
}

impl ManufacturedCase {
    /// The source and its divergence in the form the estimator consumes.
    pub fn source(&self) -> SourceTerm<'_> {
        SourceTerm {
            j: self.j.as_ref(),
            div_j: self.div_j.as_ref(),
        }
    }
}

/// The cavity field `E = (sin pi y sin pi z, sin pi z sin pi x,
/// sin pi x sin pi y)` with `curl curl E = 2 pi^2 E` and a divergence-free
/// source `J = (2 pi^2 - omega^2) E`. Rejects frequencies within 1% of the
/// cavity eigenvalue, where the source degenerates.
pub fn case_sine(omega: f64) -> Result<ManufacturedCase, HarnessError> {
    let cavity = 2.0 * PI * PI;
    let omega_sq = omega * omega;
    if (omega_sq - cavity).abs() < 0.01 * cavity {
        return Err(HarnessError::ResonantFrequency { omega_sq, cavity });
    }
    let e = |p: &Point| {
        Vector3::new(
            (PI * p.y).sin() * (PI * p.z).sin(),
            (PI * p.z).sin() * (PI * p.x).sin(),
            (PI * p.x).sin() * (PI * p.y).sin(),
        )
    };
    let curl_e = |p: &Point| {
        let (sx, cx) = ((PI * p.x).sin(), (PI * p.x).cos());
        let (sy, cy) = ((PI * p.y).sin(), (PI * p.y).cos());
        let (sz, cz) = ((PI * p.z).sin(), (PI * p.z).cos());
        PI * Vector3::new(sx * (cy - cz), sy * (cz - cx), sz * (cx - cy))
    };
    let factor = cavity - omega_sq;
    let case = ManufacturedCase {
        name: "sine",
        omega,
        e: Box::new(e),
        curl_e: Box::new(curl_e),
        curl_curl_e: Box::new(move |p| cavity * e(p)),
        j: Box::new(move |p| factor * e(p)),
        div_j: Box::new(|_| 0.0),
        polynomial_degree: None,
    };
    verify_case(&case)?;
    Ok(case)
}

/// The polynomial patch-test field `E = (y(1-y) z(1-z), 0, 0)` of total
/// degree four, conforming with zero tangential boundary trace.
pub fn case_quartic(omega: f64) -> Result<ManufacturedCase, HarnessError> {
    let g = |t: f64| t * (1.0 - t);
    let dg = |t: f64| 1.0 - 2.0 * t;
    let e = move |p: &Point| Vector3::new(g(p.y) * g(p.z), 0.0, 0.0);
    let curl_e = move |p: &Point| Vector3::new(0.0, g(p.y) * dg(p.z), -dg(p.y) * g(p.z));
    let curl_curl_e = move |p: &Point| Vector3::new(2.0 * (g(p.y) + g(p.z)), 0.0, 0.0);
    let omega_sq = omega * omega;
    let case = ManufacturedCase {
        name: "quartic",
        omega,
        e: Box::new(e),
        curl_e: Box::new(curl_e),
        curl_curl_e: Box::new(curl_curl_e),
        j: Box::new(move |p| curl_curl_e(p) - omega_sq * e(p)),
        div_j: Box::new(|_| 0.0),
        polynomial_degree: Some(4),
    };
    verify_case(&case)?;
    Ok(case)
}

/// Builds a case by name.
pub fn case_by_name(name: &str, omega: f64) -> Result<ManufacturedCase, HarnessError> {
    match name {
        "sine" => case_sine(omega),
        "quartic" => case_quartic(omega),
        other => Err(HarnessError::UnknownCase(other.to_string())),
    }
}

/// Integral of a scalar callable over the unit cube through the tetrahedral
/// quadrature of a structured mesh.
fn integrate_cube<F>(mesh: &Mesh, exactness: usize, f: F) -> Result<f64, FemError>
where
    F: Fn(&Point) -> f64,
{
    let rule = quadrature(Domain::Tetrahedron, exactness)?;
    let mut total = 0.0;
    for cell in 0..mesh.n_cells() {
        let jac = 6.0 * mesh.cell_geometry[cell].volume;
        for (p, &wq) in rule.points.iter().zip(&rule.weights) {
            let x = mesh.ref_to_phys(cell, p);
            total += wq * jac * f(&x);
        }
    }
    Ok(total)
}

/// A random polynomial of total degree <= 2 with coefficients in [-1, 1].
fn random_quadratic(rng: &mut ChaCha8Rng) -> Poly3 {
    let mut poly = Poly3::zero();
    for a in 0..=2u32 {
        for b in 0..=2u32 - a {
            for c in 0..=2u32 - a - b {
                poly = poly.add(&Poly3::monomial(a, b, c, rng.random_range(-1.0..1.0)));
            }
        }
    }
    poly
}

/// Construction-time checks: zero tangential boundary trace, and the weak
/// form against ten random conforming polynomial test fields.
fn verify_case(case: &ManufacturedCase) -> Result<(), HarnessError> {
    let fail = |detail: String| HarnessError::SelfCheck {
        name: case.name.to_string(),
        detail,
    };
    let mesh = build_structured_mesh(2, 1.0);

    // Tangential trace on every boundary face.
    let face_rule = quadrature(Domain::Triangle, 8)?;
    for face in 0..mesh.n_faces() {
        if mesh.faces[face].right.is_some() {
            continue;
        }
        let ft = face_trace(&mesh, face, &face_rule);
        let n = mesh.faces[face].normal;
        for x in &ft.phys {
            let trace = (case.e)(x).cross(&n).norm();
            if trace > 1e-12 {
                return Err(fail(format!(
                    "tangential boundary trace {trace:.3e} at ({}, {}, {})",
                    x.x, x.y, x.z
                )));
            }
        }
    }

    // Weak form (J, v) = -omega^2 (E, v) + (curl E, curl v) against
    // conforming test fields v: bubble factors force v x n = 0 on the
    // boundary, so no face terms appear.
    let bubble = |axis: usize| {
        let t = Poly3::var(axis);
        t.mul(&Poly3::constant(1.0).sub(&t))
    };
    let (bx, by, bz) = (bubble(0), bubble(1), bubble(2));
    let mut rng = ChaCha8Rng::seed_from_u64(20_260_817);
    let omega_sq = case.omega * case.omega;
    for trial in 0..10 {
        let v = VecPoly3::new(
            by.mul(&bz).mul(&random_quadratic(&mut rng)),
            bx.mul(&bz).mul(&random_quadratic(&mut rng)),
            bx.mul(&by).mul(&random_quadratic(&mut rng)),
        );
        let curl_v = v.curl();
        let lhs = integrate_cube(&mesh, 16, |x| (case.j)(x).dot(&v.eval(x)))?;
        let rhs = integrate_cube(&mesh, 16, |x| {
            (case.curl_e)(x).dot(&curl_v.eval(x)) - omega_sq * (case.e)(x).dot(&v.eval(x))
        })?;
        let scale = lhs.abs().max(rhs.abs()).max(1.0);
        if (lhs - rhs).abs() > 1e-9 * scale {
            return Err(fail(format!(
                "weak form mismatch at trial {trial}: (J, v) = {lhs:.12e} vs {rhs:.12e}"
            )));
        }
    }
    Ok(())
}

/// Penalty selection for a study.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EtaMode {
    /// Calibrate on the coarsest mesh and reuse across levels.
    Auto,
    /// Fixed value, for under-penalization studies.
    Fixed(f64),
}

/// Knobs of a convergence study.
#[derive(Clone, Copy, Debug)]
pub struct StudyOptions {
    /// Penalty selection.
    pub eta: EtaMode,
    /// Added to every quadrature exactness; zero keeps the defaults.
    pub quadrature_boost: usize,
    /// Compute the inf-sup constant per level (eigensolve-priced).
    pub with_infsup: bool,
    /// Lifts the desk-scale caps.
    pub allow_large: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            eta: EtaMode::Auto,
            quadrature_boost: 0,
            with_infsup: false,
            allow_large: false,
        }
    }
}

/// One refinement level of a study.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LevelRecord {
    /// Structured resolution; zero for imported meshes.
    pub n: usize,
    /// Largest cell diameter.
    pub h: f64,
    /// Primal degrees of freedom.
    pub dofs: usize,
    /// Energy error |||e|||.
    pub energy: f64,
    /// Stabilization-augmented error.
    pub energy_sharp: f64,
    /// Jump-augmented error the estimator controls.
    pub energy_dagger: f64,
    /// Weighted L2 error.
    pub l2_eps: f64,
    /// Total estimator.
    pub eta: f64,
    /// Global data oscillation.
    pub osc: f64,
    /// Estimator over augmented error; absent when the error is roundoff.
    pub effectivity: Option<f64>,
    /// Discrete error over the best-approximation error; at least one up to
    /// solver roundoff.
    pub best_ratio: f64,
    /// Discrete inf-sup constant when requested.
    pub infsup: Option<f64>,
    /// Whether the solve reproduced the exact field to roundoff.
    pub exact: bool,
}

/// Observed rate between two consecutive levels: `log(e_c/e_f)` over
/// `log(h_c/h_f)`, the base-two rate for halving.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RateRecord {
    pub from_n: usize,
    pub to_n: usize,
    pub energy: f64,
    pub energy_sharp: f64,
    pub energy_dagger: f64,
    pub l2_eps: f64,
    pub eta: f64,
}

/// Full output of a convergence study.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Schema identifier, [`REPORT_SCHEMA`].
    pub schema: String,
    pub case: String,
    pub k: usize,
    pub ell: usize,
    pub omega: f64,
    /// Penalty value the study ran with.
    pub eta_stab: f64,
    pub levels: Vec<LevelRecord>,
    pub rates: Vec<RateRecord>,
}

/// Everything a single level produces, for callers that need more than the
/// condensed record.
pub struct LevelRun {
    pub record: LevelRecord,
    pub report: EstimatorReport,
    pub measures: ErrorMeasures,
    pub solution: DgSolution,
}

/// Enforces the degree range and the desk-scale cap for a structured
/// resolution.
pub fn check_desk_cap(k: usize, n: usize, allow_large: bool) -> Result<(), HarnessError> {
    if k == 0 || k > DESK_CAPS.len() {
        return Err(HarnessError::UnsupportedDegree(k));
    }
    let cap = DESK_CAPS[k - 1];
    if n > cap && !allow_large {
        return Err(HarnessError::DeskCap { k, n, cap });
    }
    Ok(())
}

/// Calibrates the penalty on a mesh, or passes a fixed value through.
pub fn resolve_eta(
    mesh: &Mesh,
    space: &DGSpace,
    material: &MaterialModel,
    mode: EtaMode,
) -> Result<f64, HarnessError> {
    match mode {
        EtaMode::Fixed(value) => Ok(value),
        EtaMode::Auto => {
            let dc = build_discrete_curl(mesh, space)?;
            let penalty = assemble_jump_penalty(mesh, space, material)?;
            let lift = assemble_lift_gram(space, &dc, &material.nu);
            Ok(calibrate_eta(&penalty, &lift)?.eta_rec)
        }
    }
}

/// Runs the full pipeline on one mesh: assemble, solve, measure, estimate.
pub fn run_level(
    case: &ManufacturedCase,
    mesh: &Mesh,
    k: usize,
    ell: usize,
    eta: f64,
    options: &StudyOptions,
    n_label: usize,
) -> Result<LevelRun, HarnessError> {
    let boost = options.quadrature_boost;
    let space = DGSpace::new(mesh, k, ell)?;
    let material = MaterialModel::vacuum(mesh);
    let patches = compute_patches(mesh);
    let forms = AssembledForms::new(mesh, &space, &material, case.omega, eta)?;

    let rhs = assemble_rhs(mesh, &space, 2 * k + 4 + boost, |p| (case.j)(p))?;
    let solution = solve_primal(&forms, &rhs).map_err(|source| HarnessError::Level {
        n: n_label,
        source,
    })?;

    let measures_exactness = 2 * k + 6 + boost;
    let measures = compute_error_measures(
        mesh,
        &patches,
        &forms,
        &material,
        &solution.field,
        |p| (case.e)(p),
        |p| (case.curl_e)(p),
        measures_exactness,
    )?;
    // Norm of the exact solution, through the same quadrature: the measures
    // of the zero field carry no jump or stabilization parts.
    let reference = compute_error_measures(
        mesh,
        &patches,
        &forms,
        &material,
        &BrokenField::zero(k, mesh.n_cells()),
        |p| (case.e)(p),
        |p| (case.curl_e)(p),
        measures_exactness,
    )?;
    let scale = reference.energy;

    let source = case.source();
    let report = compute_indicators(
        mesh,
        &patches,
        &forms.discrete_curl,
        &material,
        case.omega,
        &solution.field,
        &source,
        FluxMode::DiscreteCurl,
        2 * k + 4 + boost,
    )?;
    let osc = compute_oscillation(
        mesh,
        &patches,
        k,
        &material,
        case.omega,
        &source,
        2 * k + 4 + boost,
    )?;
    let report = report.with_oscillation(&osc);

    let best = best_approximation(
        mesh,
        &forms,
        &material,
        |p| (case.e)(p),
        |p| (case.curl_e)(p),
        measures_exactness,
    )
    .map_err(|source| HarnessError::Level {
        n: n_label,
        source,
    })?;
    let best_measures = compute_error_measures(
        mesh,
        &patches,
        &forms,
        &material,
        &best,
        |p| (case.e)(p),
        |p| (case.curl_e)(p),
        measures_exactness,
    )?;
    // A quotient of two roundoff-level errors is noise; exact levels pin the
    // ratio at its ideal value.
    let best_ratio = if best_measures.energy_sharp <= EXACTNESS_THRESHOLD * scale {
        1.0
    } else {
        measures.energy_sharp / best_measures.energy_sharp
    };

    let infsup = if options.with_infsup {
        Some(infsup_constant(&forms)?)
    } else {
        None
    };

    let h = mesh
        .cell_geometry
        .iter()
        .map(|g| g.diameter)
        .fold(0.0f64, f64::max);
    // An effectivity quotient of two roundoff-level numbers carries no
    // information; exact levels report none.
    let exact = measures.energy_sharp <= EXACTNESS_THRESHOLD * scale;
    let record = LevelRecord {
        n: n_label,
        h,
        dofs: space.total_dofs(),
        energy: measures.energy,
        energy_sharp: measures.energy_sharp,
        energy_dagger: measures.energy_dagger,
        l2_eps: measures.l2_eps,
        eta: report.eta,
        osc: report.osc,
        effectivity: if exact {
            None
        } else {
            effectivity(&report, &measures, scale)
        },
        best_ratio,
        infsup,
        exact,
    };
    Ok(LevelRun {
        record,
        report,
        measures,
        solution,
    })
}

/// Runs a refinement study over structured meshes. The penalty is resolved
/// on the coarsest level and reused: calibration is stable under affine
/// refinement.
pub fn run_convergence(
    case: &ManufacturedCase,
    k: usize,
    ell: usize,
    levels: &[usize],
    options: &StudyOptions,
) -> Result<ConvergenceReport, HarnessError> {
    if levels.windows(2).any(|w| w[0] > w[1]) {
        return Err(HarnessError::LevelsNotSorted(levels.to_vec()));
    }
    for &n in levels {
        check_desk_cap(k, n, options.allow_large)?;
    }
    let mut eta_stab = match options.eta {
        EtaMode::Fixed(value) => value,
        EtaMode::Auto => f64::NAN,
    };
    let mut records = Vec::with_capacity(levels.len());
    for &n in levels {
        let mesh = build_structured_mesh(n, 1.0);
        if eta_stab.is_nan() {
            let space = DGSpace::new(&mesh, k, ell)?;
            let material = MaterialModel::vacuum(&mesh);
            eta_stab = resolve_eta(&mesh, &space, &material, EtaMode::Auto)?;
        }
        let run = run_level(case, &mesh, k, ell, eta_stab, options, n)?;
        records.push(run.record);
    }
    let rates = records
        .windows(2)
        .map(|w| {
            let (c, f) = (&w[0], &w[1]);
            let denom = (c.h / f.h).ln();
            let rate = |a: f64, b: f64| (a / b).ln() / denom;
            RateRecord {
                from_n: c.n,
                to_n: f.n,
                energy: rate(c.energy, f.energy),
                energy_sharp: rate(c.energy_sharp, f.energy_sharp),
                energy_dagger: rate(c.energy_dagger, f.energy_dagger),
                l2_eps: rate(c.l2_eps, f.l2_eps),
                eta: rate(c.eta, f.eta),
            }
        })
        .collect();
    Ok(ConvergenceReport {
        schema: REPORT_SCHEMA.to_string(),
        case: case.name.to_string(),
        k,
        ell,
        omega: case.omega,
        eta_stab,
        levels: records,
        rates,
    })
}

/// Export encodings of a convergence report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    /// Schema-versioned JSON, byte-deterministic and lossless.
    Json,
    /// One row per level; floats carry 17 significant digits.
    Csv,
}

/// Renders a report to a string.
pub fn render_report(report: &ConvergenceReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut out =
                serde_json::to_string_pretty(report).expect("report serialization cannot fail");
            out.push('\n');
            out
        }
        ReportFormat::Csv => {
            let mut out = String::from(
                "n,h,dofs,energy,energy_sharp,energy_dagger,l2_eps,eta,osc,\
                 effectivity,best_ratio,infsup,exact\n",
            );
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.16e}"));
            for l in &report.levels {
                writeln!(
                    out,
                    "{},{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{:.16e},{},{}",
                    l.n,
                    l.h,
                    l.dofs,
                    l.energy,
                    l.energy_sharp,
                    l.energy_dagger,
                    l.l2_eps,
                    l.eta,
                    l.osc,
                    opt(l.effectivity),
                    l.best_ratio,
                    opt(l.infsup),
                    l.exact
                )
                .expect("string writes cannot fail");
            }
            out
        }
    }
}

/// Writes a report to a file in the given format.
pub fn export_report(
    report: &ConvergenceReport,
    format: ReportFormat,
    path: &Path,
) -> Result<(), HarnessError> {
    std::fs::write(path, render_report(report, format))?;
    Ok(())
}

/// Reads a JSON report back; floats round-trip bit-exactly.
pub fn import_report(path: &Path) -> Result<ConvergenceReport, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
