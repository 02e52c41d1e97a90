//! End-to-end runs shared by the acceptance suite and the command line:
//! eigenfunction grids with an EDMD-fitted boundary, and the optimal-control
//! curve of a saddle system through the blended field.

use log::info;
use serde::{Deserialize, Serialize};

use crate::cases::{optimal_control, zero_level_curve, CaseStudy, GAMMA_BRACKET};
use crate::dynamics::{decompose, IntegratorSettings, VectorField};
use crate::edmd::{
    edmd_fit_with, estimate_eps_s, match_principal, sample_annulus, EdmdModel, EdmdOptions, EpsEstimator,
    MatchedEigenfunction, MonomialBasis, SnapshotSet, DEFAULT_SVD_TOL,
};
use crate::error::{Error, Result};
use crate::path_integral::{
    evaluate_grid, BoundaryCondition, EigenfunctionSample, GridSpec, Method, PathIntegralSettings,
};
use crate::spectral::{classify_equilibrium, left_eigenpairs, EquilibriumKind, PrincipalEigenpair};
use crate::transform::{Assumption1Report, TransformParams, TransformedSystem};
use crate::C64;

/// How far a requested eigenvalue may sit from the nearest eigenvalue of `A`.
pub const SELECT_TOL: f64 = 1e-6;

/// The left eigenpair of `A` whose eigenvalue equals `target` up to
/// `SELECT_TOL·(1 + |target|)`.
pub fn select_pair(a: &nalgebra::DMatrix<f64>, target: C64) -> Result<PrincipalEigenpair> {
    let pairs = left_eigenpairs(a)?;
    let best = crate::spectral::nearest_pair(&pairs, target).cloned();
    match best {
        Some(p) if (p.lambda - target).norm() <= SELECT_TOL * (1.0 + target.norm()) => Ok(p),
        Some(p) => Err(Error::NoMatchingEigenvalue { target, closest: p.lambda }),
        None => Err(Error::NoMatchingEigenvalue { target, closest: C64::new(f64::NAN, f64::NAN) }),
    }
}

/// Snapshot generation, fit and boundary-error settings for the EDMD boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdmdConfig {
    pub center_radius: f64,
    pub width: f64,
    pub n_traj: usize,
    pub traj_len: usize,
    pub tau: f64,
    pub max_degree: usize,
    pub svd_tol: f64,
    pub seed: u64,
    pub equilibrate: bool,
    pub eps_estimator: EpsEstimator,
    /// Sphere carrying the fitted boundary values; defaults to `center_radius`.
    pub boundary_radius: Option<f64>,
}

impl Default for EdmdConfig {
    fn default() -> Self {
        Self {
            center_radius: 3.0,
            width: 0.4,
            n_traj: 800,
            traj_len: 10,
            tau: 0.1,
            max_degree: 10,
            svd_tol: DEFAULT_SVD_TOL,
            seed: 1,
            equilibrate: true,
            eps_estimator: EpsEstimator::default(),
            boundary_radius: None,
        }
    }
}

impl EdmdConfig {
    pub fn radius(&self) -> f64 {
        self.boundary_radius.unwrap_or(self.center_radius)
    }

    pub fn options(&self) -> EdmdOptions {
        EdmdOptions { svd_tol: self.svd_tol, equilibrate: self.equilibrate }
    }

    pub fn basis(&self, dim: usize) -> MonomialBasis {
        MonomialBasis::new(dim, self.max_degree)
    }

    pub fn sample(&self, f: &VectorField, integrator: &IntegratorSettings) -> Result<SnapshotSet> {
        sample_annulus(f, self.center_radius, self.width, self.n_traj, self.traj_len, self.tau, self.seed, integrator)
    }

    /// A quarter-size independent draw, used by the residual-quantile estimator.
    fn held_out(&self, f: &VectorField, integrator: &IntegratorSettings) -> Result<SnapshotSet> {
        let n = (self.n_traj / 4).max(1);
        sample_annulus(f, self.center_radius, self.width, n, self.traj_len, self.tau, self.seed ^ 0x9E37_79B9, integrator)
    }

    pub fn fit(&self, f: &VectorField, integrator: &IntegratorSettings) -> Result<(SnapshotSet, EdmdModel)> {
        let snaps = self.sample(f, integrator)?;
        let model = edmd_fit_with(&snaps, &self.basis(f.dim()), &self.options())?;
        info!("EDMD fit: {} pairs, N = {}, rank {}", snaps.len(), model.basis.len(), model.rank);
        Ok((snaps, model))
    }
}

/// A fitted eigenfunction turned into a boundary condition.
#[derive(Clone)]
pub struct FittedBoundary {
    pub matched: MatchedEigenfunction,
    pub eps_s: f64,
    pub boundary: BoundaryCondition,
}

pub fn fitted_boundary(
    f: &VectorField,
    snaps: &SnapshotSet,
    model: &EdmdModel,
    pair: &PrincipalEigenpair,
    cfg: &EdmdConfig,
    integrator: &IntegratorSettings,
) -> Result<FittedBoundary> {
    let matched = match_principal(model, pair)?;
    let held_out = match cfg.eps_estimator {
        EpsEstimator::ResidualQuantile { .. } => Some(cfg.held_out(f, integrator)?),
        _ => None,
    };
    let eps_s = estimate_eps_s(&cfg.eps_estimator, &matched, snaps, held_out.as_ref(), &cfg.options(), cfg.radius(), cfg.seed)?;
    info!("λ = {}: fitted eigenvalue {}, ε_S = {eps_s:.3e}", pair.lambda, matched.lambda_fit);
    let boundary = matched.boundary(cfg.radius(), Some(eps_s));
    Ok(FittedBoundary { matched, eps_s, boundary })
}

/// Eigenfunction of `f` for `pair` on `grid`, integrating to the fitted sphere.
pub fn edmd_eigenfunction_grid(
    f: &VectorField,
    pair: &PrincipalEigenpair,
    fitted: &FittedBoundary,
    grid: &GridSpec,
    settings: &PathIntegralSettings,
) -> Result<Vec<EigenfunctionSample>> {
    let dec = decompose(f)?;
    evaluate_grid(&dec, pair, grid, &Method::finite_for(pair, fitted.boundary.clone()), settings)
}

/// Settings for the saddle control curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub transform: TransformParams,
    pub bisection_tol: f64,
    pub bracket: (f64, f64),
    /// Half-width of the square scanned for spurious equilibria.
    pub scan_radius: f64,
    pub scan_points: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            transform: TransformParams::default(),
            bisection_tol: 1e-8,
            bracket: GAMMA_BRACKET,
            scan_radius: 8.0,
            scan_points: 201,
        }
    }
}

/// One row of the control table. `None` marks a failed level-set solve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControlRow {
    pub x1: f64,
    pub gamma: Option<f64>,
    pub u: Option<f64>,
    pub u_analytic: Option<f64>,
    pub abs_err: Option<f64>,
    pub status: String,
}

impl ControlRow {
    pub fn is_ok(&self) -> bool {
        self.gamma.is_some()
    }
}

pub struct ControlOutcome {
    pub pair: PrincipalEigenpair,
    pub eps_s: f64,
    pub assumption: Assumption1Report,
    pub rows: Vec<ControlRow>,
}

impl ControlOutcome {
    pub fn max_abs_err(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.abs_err).reduce(f64::max)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_ok()).count()
    }
}

/// The eigenpair with the largest positive real part of a 2-D saddle.
pub fn unstable_pair(f: &VectorField) -> Result<PrincipalEigenpair> {
    let dec = decompose(f)?;
    let class = classify_equilibrium(dec.a());
    if dec.dim() != 2 || class.kind != EquilibriumKind::Saddle {
        return Err(Error::InvalidInput(format!(
            "control needs a planar saddle, got dimension {} ({})",
            dec.dim(),
            class.kind
        )));
    }
    left_eigenpairs(dec.a())?
        .into_iter()
        .find(|p| p.lambda.re > 0.0)
        .ok_or_else(|| Error::InvalidInput("saddle without an unstable eigenvalue".into()))
}

/// Zero level set `x2 = γ(x1)` of the unstable eigenfunction of the blended
/// field, and the controller `u = −γ/2` along it.
pub fn control_curve(
    case: &CaseStudy,
    x1: &[f64],
    cfg: &ControlConfig,
    settings: &PathIntegralSettings,
) -> Result<ControlOutcome> {
    let pair = unstable_pair(&case.field)?;
    let sys = TransformedSystem::new(&case.field, cfg.transform)?;
    let assumption = sys.check_assumption1(cfg.scan_radius, cfg.scan_points);
    if !assumption.is_clean() {
        log::warn!("possible spurious equilibria of the blended field: {:?}", assumption.flagged);
    }
    let bc = sys.boundary(&pair);
    let eps_s = bc.eps_s().unwrap_or(0.0);
    let phi = |a: f64, b: f64| -> Result<f64> {
        let s = sys.eigenfunction(&pair, &[a, b], &bc, settings)?;
        Ok(s.phi.re)
    };
    let level = zero_level_curve(&phi, x1, cfg.bracket, cfg.bisection_tol);
    let rows = level
        .into_iter()
        .map(|p| match p.gamma {
            Ok(g) => {
                let u = optimal_control(&[(p.x1, g)])[0].1;
                let ua = case.analytic_controller.as_ref().map(|c| c(p.x1));
                ControlRow {
                    x1: p.x1,
                    gamma: Some(g),
                    u: Some(u),
                    u_analytic: ua,
                    abs_err: ua.map(|v| (u - v).abs()),
                    status: "ok".into(),
                }
            }
            Err(e) => ControlRow {
                x1: p.x1,
                gamma: None,
                u: None,
                u_analytic: case.analytic_controller.as_ref().map(|c| c(p.x1)),
                abs_err: None,
                status: match e {
                    Error::NoSignChange { .. } => "no_sign_change".into(),
                    other => format!("failed: {other}"),
                },
            },
        })
        .collect();
    Ok(ControlOutcome { pair, eps_s, assumption, rows })
}

/// Eigenfunction of the blended field on `grid` with the zero boundary.
pub fn transform_eigenfunction_grid(
    f: &VectorField,
    pair: &PrincipalEigenpair,
    params: &TransformParams,
    grid: &GridSpec,
    settings: &PathIntegralSettings,
) -> Result<Vec<EigenfunctionSample>> {
    let sys = TransformedSystem::new(f, *params)?;
    let bc = sys.boundary(pair);
    evaluate_grid(sys.decomposition(), pair, grid, &Method::finite_for(pair, bc), settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;

    #[test]
    fn selects_nearest_pair_within_tolerance() {
        let a = nalgebra::DMatrix::from_row_slice(2, 2, &[0.0, -0.5, -2.0, 0.0]);
        let p = select_pair(&a, C64::new(1.0, 0.0)).unwrap();
        assert!((p.lambda.re - 1.0).abs() < 1e-12);
        match select_pair(&a, C64::new(0.5, 0.0)) {
            Err(Error::NoMatchingEigenvalue { closest, .. }) => assert!((closest.re.abs() - 1.0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unstable_pair_needs_a_saddle() {
        let p = unstable_pair(&cases::example_b().field).unwrap();
        assert!((p.lambda.re - 1.0).abs() < 1e-9);
        assert!(matches!(unstable_pair(&cases::test_system_c().field), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn config_defaults_round_trip() {
        let cfg = EdmdConfig::default();
        let back: EdmdConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.radius(), 3.0);
        let partial: ControlConfig = serde_json::from_str(r#"{"bisection_tol": 1e-6}"#).unwrap();
        assert_eq!(partial.scan_points, 201);
        assert_eq!(partial.bisection_tol, 1e-6);
    }
}
