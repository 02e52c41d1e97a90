//! The subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use koopman_core::acceptance::{self, Mode};
use koopman_core::cases::{compare_to_analytic, CaseStudy};
use koopman_core::dynamics::decompose;
use koopman_core::edmd::{match_principal, MonomialBasisSpec, SnapshotSet};
use koopman_core::path_integral::{evaluate_grid, EigenfunctionSample, Method};
use koopman_core::pipeline::{self, control_curve, edmd_eigenfunction_grid, fitted_boundary, select_pair};
use koopman_core::spectral::{classify_equilibrium, left_eigenpairs, spectral_condition, spectrum};
use koopman_core::transform::TransformedSystem;
use koopman_core::{Error, C64};
use serde::Serialize;

use crate::config::{method_name, ConfigError, MethodKind, RunConfig};
use crate::output::{self, config_sha256, sidecar_path, write_json, Sidecar};

/// Fraction of failed nodes or rows above which a run exits with code 3.
pub const MAX_FAILED_FRACTION: f64 = 0.10;

#[derive(Debug)]
pub enum CliError {
    /// Exit code 2.
    Config(String),
    /// Exit code 3.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(m) => write!(f, "configuration error: {m}"),
            Self::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.0)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NoMatchingEigenvalue { .. } | Error::InvalidInput(_) | Error::DimensionMismatch { .. } => {
                Self::Config(e.to_string())
            }
            other => Self::Numerical(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(format!("writing {}: {e}", path.display()))
}

fn fmt_c(z: C64) -> String {
    if z.im == 0.0 {
        format!("{:.6}", z.re)
    } else {
        format!("{:.6}{:+.6}i", z.re, z.im)
    }
}

pub fn spectrum_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let case = cfg.system.load()?;
    let dec = decompose(&case.field)?;
    let pairs = left_eigenpairs(dec.a())?;
    let spec = spectrum(dec.a());
    let class = classify_equilibrium(dec.a());
    println!("system: {} (dimension {})", case.name, case.dim());
    println!("equilibrium: {} (margin {:.3e})", class.kind, class.margin);
    println!("{:<4}{:<26}{:<48}spectral condition", "#", "eigenvalue", "left eigenvector");
    for (i, p) in pairs.iter().enumerate() {
        let w: Vec<String> = p.w.iter().map(|&c| fmt_c(c)).collect();
        let verdict = match spectral_condition(p.lambda, &spec) {
            Ok(v) => v.to_string(),
            Err(_) => "n/a (A not Hurwitz)".into(),
        };
        println!("{:<4}{:<26}{:<48}{verdict}", i + 1, fmt_c(p.lambda), format!("[{}]", w.join(", ")));
    }
    Ok(())
}

#[derive(Serialize, Default)]
struct EigfunSummary {
    lambda: [f64; 2],
    w: Vec<[f64; 2]>,
    nodes: usize,
    failed: usize,
    status_counts: BTreeMap<String, usize>,
    max_error_bound: Option<f64>,
    eps_s: Option<f64>,
    lambda_fit: Option<[f64; 2]>,
    edmd_rank: Option<usize>,
    snapshot_pairs: Option<usize>,
    assumption_clean: Option<bool>,
    max_abs_error: Option<f64>,
    max_rel_error: Option<f64>,
    mean_rel_error: Option<f64>,
}

fn cplx(z: C64) -> [f64; 2] {
    [z.re, z.im]
}

fn output_path(cfg: &RunConfig, default: &str) -> PathBuf {
    cfg.output.as_ref().map_or_else(|| PathBuf::from(default), |o| o.path.clone())
}

fn check_csv_format(cfg: &RunConfig) -> Result<(), CliError> {
    match cfg.output.as_ref().map(|o| o.format.as_str()) {
        None | Some("csv") => Ok(()),
        Some(other) => Err(CliError::Config(format!("output.format: only `csv` is supported, got `{other}`"))),
    }
}

fn fail_if_mostly_failed(failed: usize, total: usize, what: &str) -> Result<(), CliError> {
    if total > 0 && failed as f64 > MAX_FAILED_FRACTION * total as f64 {
        return Err(CliError::Numerical(format!("{failed} of {total} {what} failed (partial results written)")));
    }
    Ok(())
}

pub fn eigfun_cmd(cfg: &mut RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    cfg.resolve_for_eigfun()?;
    check_csv_format(cfg)?;
    let case = cfg.system.load()?;
    let grid = cfg.grid_spec(case.dim())?;
    let dec = decompose(&case.field)?;
    let pair = select_pair(dec.a(), cfg.target()?)?;
    let settings = cfg.integrator.path_integral();
    let mut summary = EigfunSummary { lambda: cplx(pair.lambda), w: pair.w.iter().map(|&c| cplx(c)).collect(), ..Default::default() };
    let method = cfg.method()?;
    if method == MethodKind::Infinite && !settings.force {
        match spectral_condition(pair.lambda, &spectrum(dec.a())) {
            Ok(true) => {}
            Ok(false) => {
                return Err(CliError::Config(format!(
                    "the spectral condition fails for λ = {}; set integrator.force = true to integrate anyway",
                    fmt_c(pair.lambda)
                )))
            }
            Err(e) => {
                return Err(CliError::Config(format!(
                    "{e}: the infinite horizon needs a stable equilibrium, use finite_edmd or finite_transform"
                )))
            }
        }
    }
    let samples: Vec<EigenfunctionSample> = match method {
        MethodKind::Infinite => evaluate_grid(&dec, &pair, &grid, &Method::Infinite, &settings)?,
        MethodKind::FiniteEdmd => {
            let ecfg = cfg.edmd.clone().expect("resolved");
            let (snaps, model) = ecfg.fit(&case.field, &settings.integrator)?;
            let fb = fitted_boundary(&case.field, &snaps, &model, &pair, &ecfg, &settings.integrator)?;
            summary.eps_s = Some(fb.eps_s);
            summary.lambda_fit = Some(cplx(fb.matched.lambda_fit));
            summary.edmd_rank = Some(model.rank);
            summary.snapshot_pairs = Some(snaps.len());
            edmd_eigenfunction_grid(&case.field, &pair, &fb, &grid, &settings)?
        }
        MethodKind::FiniteTransform => {
            let params = cfg.transform.expect("resolved");
            let sys = TransformedSystem::new(&case.field, params)?;
            let scan = pipeline::ControlConfig::default();
            let report = sys.check_assumption1(scan.scan_radius.max(params.big_r()), scan.scan_points);
            summary.assumption_clean = Some(report.is_clean());
            let bc = sys.boundary(&pair);
            summary.eps_s = bc.eps_s();
            evaluate_grid(sys.decomposition(), &pair, &grid, &Method::finite_for(&pair, bc), &settings)?
        }
    };
    summary.nodes = samples.len();
    summary.failed = samples.iter().filter(|s| !s.is_ok()).count();
    for s in &samples {
        *summary.status_counts.entry(s.status.to_string()).or_default() += 1;
    }
    summary.max_error_bound = samples.iter().filter_map(|s| s.error_bound).reduce(f64::max);
    if let Some(truth) = case.analytic_for(pair.lambda) {
        let e = compare_to_analytic(&samples, truth, &pair);
        summary.max_abs_error = Some(e.max_abs);
        summary.max_rel_error = Some(e.max_rel);
        summary.mean_rel_error = Some(e.mean_rel);
    }

    let path = output_path(cfg, "eigfun.csv");
    output::write_eigfun_csv(&path, case.dim(), &samples).map_err(|e| io_err(&path, e))?;
    println!(
        "{}: λ = {} by {} on {} nodes, {} failed",
        case.name,
        fmt_c(pair.lambda),
        method_name(method),
        summary.nodes,
        summary.failed
    );
    if let (Some(m), Some(r)) = (summary.max_abs_error, summary.max_rel_error) {
        println!("max abs error {m:.3e}, max relative error {r:.3e} against the analytic eigenfunction");
    }
    if let Some(e) = summary.eps_s {
        println!("boundary error estimate ε_S = {e:.3e}");
    }
    let failed = summary.failed;
    let nodes = summary.nodes;
    write_sidecar(&path, "eigfun", cfg, start, summary)?;
    println!("wrote {} and {}", path.display(), sidecar_path(&path).display());
    fail_if_mostly_failed(failed, nodes, "grid nodes")
}

fn write_sidecar<S: Serialize>(path: &Path, command: &str, cfg: &RunConfig, start: Instant, summary: S) -> Result<(), CliError> {
    let seed = cfg.edmd.as_ref().map(|e| e.seed);
    let meta = Sidecar {
        command,
        config: cfg,
        config_sha256: config_sha256(cfg),
        seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        summary,
    };
    let side = sidecar_path(path);
    write_json(&side, &meta).map_err(|e| io_err(&side, e))
}

#[derive(Serialize)]
struct ControlSummary {
    lambda: [f64; 2],
    points: usize,
    failed: usize,
    max_abs_error: Option<f64>,
    eps_s: f64,
    assumption_clean: bool,
    flagged_equilibria: Vec<Vec<f64>>,
}

pub fn control_cmd(cfg: &mut RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    cfg.resolve_for_control()?;
    check_csv_format(cfg)?;
    let case: CaseStudy = cfg.system.load()?;
    let x1 = cfg.control_x1()?;
    let section = cfg.control.clone().expect("resolved");
    let out = control_curve(&case, &x1, &section.settings, &cfg.integrator.path_integral())?;
    let analytic = case.analytic_controller.is_some();
    let path = output_path(cfg, "control.csv");
    output::write_control_csv(&path, &out.rows, analytic).map_err(|e| io_err(&path, e))?;
    let summary = ControlSummary {
        lambda: cplx(out.pair.lambda),
        points: out.rows.len(),
        failed: out.failures(),
        max_abs_error: out.max_abs_err(),
        eps_s: out.eps_s,
        assumption_clean: out.assumption.is_clean(),
        flagged_equilibria: out.assumption.flagged.clone(),
    };
    println!(
        "{}: zero level set of the λ = {} eigenfunction at {} points, {} failed",
        case.name,
        fmt_c(out.pair.lambda),
        summary.points,
        summary.failed
    );
    if let Some(e) = summary.max_abs_error {
        println!("max |u − u_analytic| = {e:.3e}");
    }
    if !summary.assumption_clean {
        println!("warning: the spurious-equilibrium scan flagged {} points", summary.flagged_equilibria.len());
    }
    let (failed, points) = (summary.failed, summary.points);
    write_sidecar(&path, "control", cfg, start, summary)?;
    println!("wrote {} and {}", path.display(), sidecar_path(&path).display());
    fail_if_mostly_failed(failed, points, "level-set points")
}

#[derive(Serialize)]
struct MatchedOut {
    lambda: [f64; 2],
    lambda_fit: [f64; 2],
    mu: [f64; 2],
    gauge_residual: f64,
    eps_s: Option<f64>,
    error: Option<String>,
    /// `φ̂(x) = Σ c_k x^{e_k}`, coefficients as `[re, im]` in basis order.
    coefficients: Vec<[f64; 2]>,
}

#[derive(Serialize)]
struct EdmdFitOut<'a> {
    command: &'a str,
    config: &'a RunConfig,
    config_sha256: String,
    seed: Option<u64>,
    wall_time_s: f64,
    snapshot_pairs: usize,
    basis: MonomialBasisSpec,
    exponents: Vec<Vec<usize>>,
    tau: f64,
    rank: usize,
    max_eigen_residual: f64,
    continuous_eigenvalues: Vec<[f64; 2]>,
    principal: Vec<MatchedOut>,
}

pub fn edmd_fit_cmd(cfg: &mut RunConfig, snapshots: Option<&Path>, save_snapshots: Option<&Path>) -> Result<(), CliError> {
    let start = Instant::now();
    cfg.resolve_for_edmd_fit()?;
    let case = cfg.system.load()?;
    let ecfg = cfg.edmd.clone().expect("resolved");
    let integ = cfg.integrator.integrator();
    let snaps = match snapshots {
        Some(p) => SnapshotSet::read(p)?,
        None => ecfg.sample(&case.field, &integ)?,
    };
    if snaps.dim() != case.dim() {
        return Err(CliError::Config(format!("snapshots have dimension {}, system has {}", snaps.dim(), case.dim())));
    }
    if let Some(p) = save_snapshots {
        snaps.write(p)?;
        println!("wrote {} and {}", p.display(), SnapshotSet::sidecar_path(p).display());
    }
    let model = koopman_core::edmd::edmd_fit_with(&snaps, &ecfg.basis(case.dim()), &ecfg.options())?;
    let dec = decompose(&case.field)?;
    println!(
        "{}: {} snapshot pairs, {} basis functions, rank {}, τ = {}",
        case.name,
        snaps.len(),
        model.basis.len(),
        model.rank,
        model.tau
    );
    let mut principal = Vec::new();
    for pair in left_eigenpairs(dec.a())? {
        let entry = match match_principal(&model, &pair) {
            Ok(m) => {
                let eps = pipeline::fitted_boundary(&case.field, &snaps, &model, &pair, &ecfg, &integ).map(|f| f.eps_s);
                println!(
                    "λ = {}: fitted {}, gauge residual {:.2e}, ε_S {}",
                    fmt_c(pair.lambda),
                    fmt_c(m.lambda_fit),
                    m.gauge_residual,
                    eps.as_ref().map_or_else(|e| format!("unavailable ({e})"), |v| format!("{v:.3e}"))
                );
                MatchedOut {
                    lambda: cplx(pair.lambda),
                    lambda_fit: cplx(m.lambda_fit),
                    mu: cplx(m.mu),
                    gauge_residual: m.gauge_residual,
                    eps_s: eps.ok(),
                    error: None,
                    coefficients: m.coeffs.iter().map(|&c| cplx(c)).collect(),
                }
            }
            Err(e) => {
                println!("λ = {}: {e}", fmt_c(pair.lambda));
                MatchedOut {
                    lambda: cplx(pair.lambda),
                    lambda_fit: [f64::NAN; 2],
                    mu: [f64::NAN; 2],
                    gauge_residual: f64::NAN,
                    eps_s: None,
                    error: Some(e.to_string()),
                    coefficients: Vec::new(),
                }
            }
        };
        principal.push(entry);
    }
    let mut eigs = model.continuous_eigenvalues();
    eigs.sort_by(|a, b| b.re.total_cmp(&a.re).then(a.im.total_cmp(&b.im)));
    let path = output_path(cfg, "edmd_model.json");
    let out = EdmdFitOut {
        command: "edmd-fit",
        config: cfg,
        config_sha256: config_sha256(cfg),
        seed: snaps.seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        snapshot_pairs: snaps.len(),
        basis: MonomialBasisSpec { dim: model.basis.dim(), max_degree: model.basis.max_degree() },
        exponents: model.basis.exponents().to_vec(),
        tau: model.tau,
        rank: model.rank,
        max_eigen_residual: model.max_eigen_residual(),
        continuous_eigenvalues: eigs.into_iter().map(cplx).collect(),
        principal,
    };
    write_json(&path, &out).map_err(|e| io_err(&path, e))?;
    println!("wrote {}", path.display());
    if out.principal.iter().any(|m| m.error.is_some()) {
        return Err(CliError::Numerical("some principal eigenvalues have no EDMD counterpart".into()));
    }
    Ok(())
}

pub fn verify_cmd(full: bool) -> Result<(), CliError> {
    if let Err(e) = acceptance::check_registry() {
        println!("FAIL registry: {e}");
        return Err(CliError::Numerical(e));
    }
    let (outcomes, info) = acceptance::run(if full { Mode::Full } else { Mode::Fast });
    for o in &outcomes {
        println!("{o}");
    }
    for line in &info {
        println!("info: {line}");
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("criteria failed: {}", failed.join(", "))))
    }
}
