//! Command-line driver for manufactured-solution studies.
//!
//! Every subcommand reads one JSON configuration file; the long help
//! documents the full key set. Exit codes: 0 on success, 2 on validation
//! failures, 3 when the discrete system is resonant, 1 on i/o or internal
//! failures.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use maxwell_ipdg::assembly::{
    assemble_jump_penalty, assemble_lift_gram, calibrate_eta, AssembledForms, MaterialModel,
};
use maxwell_ipdg::femspace::DGSpace;
use maxwell_ipdg::harness::{
    case_by_name, check_desk_cap, render_report, resolve_eta, run_convergence, run_level,
    ConvergenceReport, EtaMode, HarnessError, ReportFormat, StudyOptions, REPORT_SCHEMA,
};
use maxwell_ipdg::lifting::build_discrete_curl;
use maxwell_ipdg::mesh::{build_structured_mesh, Mesh, Point};
use maxwell_ipdg::solver::{infsup_constant, SolverError};

const CONFIG_DOC: &str = "\
CONFIGURATION FILE

Every subcommand reads a JSON object from --config. Unknown keys are
rejected, as are keys the subcommand does not use. Keys:

  case        string   Manufactured case, \"sine\" or \"quartic\" (default
                       \"sine\"). Used by solve, convergence, estimate.
  k           int      Primal polynomial degree, 1 to 4. Required.
  ell         int      Lifting degree, k-1 or k (default k).
  eta         number or \"auto\" or \"fixed:<value>\"
                       Stabilization weight. \"auto\" (the default)
                       calibrates on the mesh, or on the coarsest level
                       of a study, and reuses the value. Not used by
                       calibrate-eta, which computes it.
  omega       number   Frequency (default 1.0). Not used by
                       calibrate-eta.
  levels      [int]    Structured resolutions of a study, nondecreasing.
                       Required by convergence, unused elsewhere.
  mesh        object   Single-mesh selection: {\"structured\": n} for the
                       n-refined unit-cube mesh (6 n^3 cells), or
                       {\"import\": path} for a JSON mesh of the form
                       {\"vertices\": [[x,y,z],..], \"cells\":
                       [[a,b,c,d],..]}. Default {\"structured\": 2}.
                       Used by solve, estimate, infsup, calibrate-eta;
                       imported meshes must triangulate the unit cube
                       for manufactured-case error measures to mean
                       anything.
  material    object   {\"eps\": 3x3 rows, \"nu\": 3x3 rows}: uniform
                       symmetric positive definite tensors. infsup and
                       calibrate-eta only; manufactured cases fix
                       eps = nu = I.
  output      path     Write the JSON result there (default: stdout).
  csv         path     Also write the CSV table: per-level rows for
                       solve and convergence, per-cell indicator rows
                       for estimate. Unused by infsup and calibrate-eta.
  quadrature_boost
              int      Added to every quadrature exactness (default 0).
                       solve, convergence, estimate.
  infsup      bool     Also compute the inf-sup constant per level
                       (default false). solve and convergence.
  allow_large bool     Lift the desk-scale caps n <= 8, 4, 3, 2 for
                       k = 1, 2, 3, 4 (default false).

EXIT CODES

  0  success
  2  validation failure (config, unknown case, desk caps, resonant
     manufactured frequency)
  3  resonant or near-singular discrete system
  1  i/o or internal failure";

/// Interior-penalty DG solver for time-harmonic Maxwell problems.
#[derive(Parser)]
#[command(name = "maxwell-ipdg", version, after_long_help = CONFIG_DOC)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one manufactured case on a single mesh and report the error
    /// measures, estimator totals, and best-approximation ratio.
    #[command(after_long_help = CONFIG_DOC)]
    Solve(TunableArgs),
    /// Run a refinement study over structured meshes and report observed
    /// rates, effectivities, and ratios per level.
    #[command(after_long_help = CONFIG_DOC)]
    Convergence(TunableArgs),
    /// Solve one manufactured case and export the per-cell a posteriori
    /// indicators with a global summary.
    #[command(after_long_help = CONFIG_DOC)]
    Estimate(TunableArgs),
    /// Compute the discrete inf-sup constant of the stabilized form on one
    /// mesh.
    #[command(after_long_help = CONFIG_DOC)]
    Infsup(TunableArgs),
    /// Calibrate the stabilization weight on one mesh and report the
    /// threshold and recommended values.
    #[command(name = "calibrate-eta", after_long_help = CONFIG_DOC)]
    CalibrateEta(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to the JSON configuration file.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TunableArgs {
    /// Path to the JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's stabilization weight: "auto", "fixed:<value>",
    /// or a bare number.
    #[arg(long)]
    eta: Option<String>,
}

/// The JSON configuration; the long help documents every key.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    case: Option<String>,
    k: usize,
    ell: Option<usize>,
    eta: Option<EtaConfig>,
    omega: Option<f64>,
    levels: Option<Vec<usize>>,
    mesh: Option<MeshConfig>,
    material: Option<MaterialConfig>,
    output: Option<PathBuf>,
    csv: Option<PathBuf>,
    quadrature_boost: Option<usize>,
    infsup: Option<bool>,
    allow_large: Option<bool>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EtaConfig {
    Value(f64),
    Mode(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MeshConfig {
    structured: Option<usize>,
    import: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MaterialConfig {
    eps: [[f64; 3]; 3],
    nu: [[f64; 3]; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MeshFile {
    vertices: Vec<[f64; 3]>,
    cells: Vec<[usize; 4]>,
}

#[derive(Serialize)]
struct InfsupRecord {
    n: usize,
    k: usize,
    ell: usize,
    dofs: usize,
    omega: f64,
    eta: f64,
    sigma: f64,
}

#[derive(Serialize)]
struct CalibrationRecord {
    n: usize,
    k: usize,
    ell: usize,
    dofs: usize,
    eta_min: f64,
    eta_rec: f64,
}

enum CliError {
    Validation(String),
    Harness(HarnessError),
    Io(std::io::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(msg) => write!(f, "{msg}"),
            CliError::Harness(err) => write!(f, "{err}"),
            CliError::Io(err) => write!(f, "{err}"),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(err: HarnessError) -> Self {
        CliError::Harness(err)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 1,
            CliError::Harness(err) => match err {
                HarnessError::Level {
                    source: SolverError::Resonance { .. },
                    ..
                }
                | HarnessError::Solver(SolverError::Resonance { .. }) => 3,
                HarnessError::Level { .. }
                | HarnessError::Solver(_)
                | HarnessError::SelfCheck { .. }
                | HarnessError::Io(_) => 1,
                _ => 2,
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(args) => cmd_solve(&args),
        Command::Convergence(args) => cmd_convergence(&args),
        Command::Estimate(args) => cmd_estimate(&args),
        Command::Infsup(args) => cmd_infsup(&args),
        Command::CalibrateEta(args) => cmd_calibrate_eta(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn load_config(path: &Path) -> Result<Config, CliError> {
    let text = std::fs::read_to_string(path).map_err(|err| {
        CliError::Validation(format!("cannot read config {}: {err}", path.display()))
    })?;
    serde_json::from_str(&text)
        .map_err(|err| CliError::Validation(format!("config {}: {err}", path.display())))
}

/// Rejects config keys a subcommand does not consume: silently ignored
/// options hide typos in studies people rely on.
fn reject_keys(pairs: &[(&str, bool)], command: &str) -> Result<(), CliError> {
    for (key, present) in pairs {
        if *present {
            return Err(CliError::Validation(format!(
                "config key '{key}' is not used by '{command}'"
            )));
        }
    }
    Ok(())
}

fn parse_eta_text(text: &str) -> Result<EtaMode, CliError> {
    let invalid = || {
        CliError::Validation(format!(
            "eta must be \"auto\", \"fixed:<value>\", or a positive number, got '{text}'"
        ))
    };
    if text == "auto" {
        return Ok(EtaMode::Auto);
    }
    let number = text.strip_prefix("fixed:").unwrap_or(text);
    let value: f64 = number.parse().map_err(|_| invalid())?;
    eta_fixed(value)
}

fn eta_fixed(value: f64) -> Result<EtaMode, CliError> {
    if value.is_finite() && value > 0.0 {
        Ok(EtaMode::Fixed(value))
    } else {
        Err(CliError::Validation(format!(
            "eta must be a positive finite number, got {value}"
        )))
    }
}

/// Penalty mode from the command-line flag (which wins) or the config.
fn eta_mode(config: &Config, flag: Option<&str>) -> Result<EtaMode, CliError> {
    if let Some(text) = flag {
        return parse_eta_text(text);
    }
    match &config.eta {
        None => Ok(EtaMode::Auto),
        Some(EtaConfig::Value(value)) => eta_fixed(*value),
        Some(EtaConfig::Mode(text)) => parse_eta_text(text),
    }
}

fn import_mesh(path: &Path) -> Result<Mesh, CliError> {
    let text = std::fs::read_to_string(path).map_err(|err| {
        CliError::Validation(format!("cannot read mesh {}: {err}", path.display()))
    })?;
    let file: MeshFile = serde_json::from_str(&text)
        .map_err(|err| CliError::Validation(format!("mesh {}: {err}", path.display())))?;
    let vertices = file
        .vertices
        .iter()
        .map(|v| Point::new(v[0], v[1], v[2]))
        .collect();
    Mesh::from_raw(vertices, file.cells)
        .map_err(|err| CliError::Validation(format!("mesh {}: {err}", path.display())))
}

/// Builds the configured single mesh. The label is the structured
/// resolution, zero for imports.
fn build_mesh(config: &Config, k: usize, allow_large: bool) -> Result<(Mesh, usize), CliError> {
    let default = MeshConfig {
        structured: Some(2),
        import: None,
    };
    let mc = config.mesh.as_ref().unwrap_or(&default);
    match (mc.structured, &mc.import) {
        (Some(n), None) => {
            if n == 0 {
                return Err(CliError::Validation(
                    "mesh.structured must be at least 1".to_string(),
                ));
            }
            check_desk_cap(k, n, allow_large)?;
            Ok((build_structured_mesh(n, 1.0), n))
        }
        (None, Some(path)) => Ok((import_mesh(path)?, 0)),
        _ => Err(CliError::Validation(
            "mesh requires exactly one of 'structured' or 'import'".to_string(),
        )),
    }
}

fn material_from(config: &MaterialConfig, mesh: &Mesh) -> Result<MaterialModel, CliError> {
    let to_matrix = |m: &[[f64; 3]; 3]| Matrix3::from_fn(|r, c| m[r][c]);
    MaterialModel::uniform(mesh, to_matrix(&config.eps), to_matrix(&config.nu))
        .map_err(|err| CliError::Harness(HarnessError::Assembly(err)))
}

fn write_output(path: Option<&Path>, content: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, content).map_err(CliError::Io),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn json_line<T: Serialize>(value: &T) -> String {
    let mut out = serde_json::to_string_pretty(value).expect("serialization cannot fail");
    out.push('\n');
    out
}

/// Shared front half of the case-driven commands: config checks, case
/// construction, mesh, and penalty resolution.
struct CasePlan {
    config: Config,
    case: maxwell_ipdg::harness::ManufacturedCase,
    k: usize,
    ell: usize,
    mesh: Mesh,
    n_label: usize,
    eta: f64,
    options: StudyOptions,
}

fn plan_single_mesh(args: &TunableArgs, command: &str) -> Result<CasePlan, CliError> {
    let config = load_config(&args.config)?;
    reject_keys(
        &[
            ("levels", config.levels.is_some()),
            ("material", config.material.is_some()),
        ],
        command,
    )?;
    let k = config.k;
    let ell = config.ell.unwrap_or(k);
    let omega = config.omega.unwrap_or(1.0);
    let case = case_by_name(config.case.as_deref().unwrap_or("sine"), omega)?;
    let allow_large = config.allow_large.unwrap_or(false);
    let (mesh, n_label) = build_mesh(&config, k, allow_large)?;
    let space = DGSpace::new(&mesh, k, ell).map_err(HarnessError::from)?;
    let material = MaterialModel::vacuum(&mesh);
    let mode = eta_mode(&config, args.eta.as_deref())?;
    let eta = resolve_eta(&mesh, &space, &material, mode)?;
    let options = StudyOptions {
        eta: mode,
        quadrature_boost: config.quadrature_boost.unwrap_or(0),
        with_infsup: config.infsup.unwrap_or(false),
        allow_large,
    };
    Ok(CasePlan {
        config,
        case,
        k,
        ell,
        mesh,
        n_label,
        eta,
        options,
    })
}

fn cmd_solve(args: &TunableArgs) -> Result<(), CliError> {
    let plan = plan_single_mesh(args, "solve")?;
    let run = run_level(
        &plan.case,
        &plan.mesh,
        plan.k,
        plan.ell,
        plan.eta,
        &plan.options,
        plan.n_label,
    )?;
    let report = ConvergenceReport {
        schema: REPORT_SCHEMA.to_string(),
        case: plan.case.name.to_string(),
        k: plan.k,
        ell: plan.ell,
        omega: plan.case.omega,
        eta_stab: plan.eta,
        levels: vec![run.record],
        rates: vec![],
    };
    write_output(
        plan.config.output.as_deref(),
        &render_report(&report, ReportFormat::Json),
    )?;
    if let Some(csv) = &plan.config.csv {
        std::fs::write(csv, render_report(&report, ReportFormat::Csv)).map_err(CliError::Io)?;
    }
    Ok(())
}

fn cmd_convergence(args: &TunableArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    reject_keys(
        &[
            ("material", config.material.is_some()),
            ("mesh", config.mesh.is_some()),
        ],
        "convergence",
    )?;
    let levels = config
        .levels
        .clone()
        .filter(|l| !l.is_empty())
        .ok_or_else(|| {
            CliError::Validation("convergence requires a nonempty 'levels' list".to_string())
        })?;
    let k = config.k;
    let ell = config.ell.unwrap_or(k);
    let omega = config.omega.unwrap_or(1.0);
    let case = case_by_name(config.case.as_deref().unwrap_or("sine"), omega)?;
    let options = StudyOptions {
        eta: eta_mode(&config, args.eta.as_deref())?,
        quadrature_boost: config.quadrature_boost.unwrap_or(0),
        with_infsup: config.infsup.unwrap_or(false),
        allow_large: config.allow_large.unwrap_or(false),
    };
    let report = run_convergence(&case, k, ell, &levels, &options)?;
    write_output(
        config.output.as_deref(),
        &render_report(&report, ReportFormat::Json),
    )?;
    if let Some(csv) = &config.csv {
        std::fs::write(csv, render_report(&report, ReportFormat::Csv)).map_err(CliError::Io)?;
    }
    Ok(())
}

fn cmd_estimate(args: &TunableArgs) -> Result<(), CliError> {
    let plan = plan_single_mesh(args, "estimate")?;
    if plan.options.with_infsup {
        return Err(CliError::Validation(
            "config key 'infsup' is not used by 'estimate'".to_string(),
        ));
    }
    let run = run_level(
        &plan.case,
        &plan.mesh,
        plan.k,
        plan.ell,
        plan.eta,
        &plan.options,
        plan.n_label,
    )?;
    write_output(
        plan.config.output.as_deref(),
        &json_line(&run.report.summary()),
    )?;
    if let Some(csv) = &plan.config.csv {
        std::fs::write(csv, run.report.to_csv()).map_err(CliError::Io)?;
    }
    Ok(())
}

fn cmd_infsup(args: &TunableArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    reject_keys(
        &[
            ("case", config.case.is_some()),
            ("levels", config.levels.is_some()),
            ("csv", config.csv.is_some()),
            ("quadrature_boost", config.quadrature_boost.is_some()),
            ("infsup", config.infsup.is_some()),
        ],
        "infsup",
    )?;
    let k = config.k;
    let ell = config.ell.unwrap_or(k);
    let omega = config.omega.unwrap_or(1.0);
    let allow_large = config.allow_large.unwrap_or(false);
    let (mesh, n) = build_mesh(&config, k, allow_large)?;
    let space = DGSpace::new(&mesh, k, ell).map_err(HarnessError::from)?;
    let material = match &config.material {
        None => MaterialModel::vacuum(&mesh),
        Some(mc) => material_from(mc, &mesh)?,
    };
    let mode = eta_mode(&config, args.eta.as_deref())?;
    let eta = resolve_eta(&mesh, &space, &material, mode)?;
    let forms =
        AssembledForms::new(&mesh, &space, &material, omega, eta).map_err(HarnessError::from)?;
    let sigma = infsup_constant(&forms).map_err(HarnessError::from)?;
    let record = InfsupRecord {
        n,
        k,
        ell,
        dofs: space.total_dofs(),
        omega,
        eta,
        sigma,
    };
    write_output(config.output.as_deref(), &json_line(&record))
}

fn cmd_calibrate_eta(args: &ConfigArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    reject_keys(
        &[
            ("case", config.case.is_some()),
            ("eta", config.eta.is_some()),
            ("omega", config.omega.is_some()),
            ("levels", config.levels.is_some()),
            ("csv", config.csv.is_some()),
            ("quadrature_boost", config.quadrature_boost.is_some()),
            ("infsup", config.infsup.is_some()),
        ],
        "calibrate-eta",
    )?;
    let k = config.k;
    let ell = config.ell.unwrap_or(k);
    let allow_large = config.allow_large.unwrap_or(false);
    let (mesh, n) = build_mesh(&config, k, allow_large)?;
    let space = DGSpace::new(&mesh, k, ell).map_err(HarnessError::from)?;
    let material = match &config.material {
        None => MaterialModel::vacuum(&mesh),
        Some(mc) => material_from(mc, &mesh)?,
    };
    let dc = build_discrete_curl(&mesh, &space).map_err(HarnessError::from)?;
    let penalty = assemble_jump_penalty(&mesh, &space, &material).map_err(HarnessError::from)?;
    let lift = assemble_lift_gram(&space, &dc, &material.nu);
    let calibration = calibrate_eta(&penalty, &lift).map_err(HarnessError::from)?;
    let record = CalibrationRecord {
        n,
        k,
        ell,
        dofs: space.total_dofs(),
        eta_min: calibration.eta_min,
        eta_rec: calibration.eta_rec,
    };
    write_output(config.output.as_deref(), &json_line(&record))
}
