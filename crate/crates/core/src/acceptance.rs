//! Acceptance suite: end-to-end checks of the three methods against closed
//! forms and independent oracles. Used by `tests/acceptance.rs` and the
//! `verify` command.

use std::fmt;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cases::{self, CaseStudy};
use crate::dynamics::{decompose, flow, IntegratorSettings, VectorField};
use crate::edmd::{edmd_fit, MonomialBasis, SnapshotSet};
use crate::error::Result;
use crate::path_integral::{
    evaluate_grid, pde_residual, pde_residuals, EigenfunctionSample, GridSpec, Method, PathIntegralSettings,
};
use crate::pipeline::{self, ControlConfig, EdmdConfig};
use crate::spectral::{classify_equilibrium, spectral_condition, PrincipalEigenpair};
use crate::transform::{self, TransformParams, TransformedSystem};
use crate::C64;

/// PDE residual tolerance factor and required pass fraction.
pub const PDE_TOL: f64 = 5e-2;
pub const PDE_PASS_FRACTION: f64 = 0.98;
/// Fraction of nodes at which the reported error bound must hold.
pub const BOUND_PASS_FRACTION: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// AC2 and AC4–AC7.
    Fast,
    /// Every criterion.
    Full,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub id: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}  ({:.1} s)  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.seconds,
            self.detail
        )
    }
}

/// An eigenfunction grid produced along the way, kept for the PDE check.
struct Produced {
    label: String,
    field: VectorField,
    lambda: C64,
    grid: GridSpec,
    samples: Vec<EigenfunctionSample>,
    /// Pointwise evaluator, used to re-check failing nodes with a fine stencil.
    eval: Option<PointEval>,
}

type PointEval = Box<dyn Fn(&[f64]) -> Result<C64>>;

/// Example A, EDMD boundary on `‖x‖ = 3`, for one eigenvalue.
struct FittedRun {
    eps_s: f64,
    pair: PrincipalEigenpair,
    samples: Vec<EigenfunctionSample>,
}

struct Suite {
    integrator: IntegratorSettings,
    settings: PathIntegralSettings,
    produced: Vec<Produced>,
    example_a: Option<(SnapshotSet, crate::edmd::EdmdModel)>,
    fitted: Vec<FittedRun>,
    info: Vec<String>,
}

fn timed(id: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Outcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    Outcome { id, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

fn failed(samples: &[EigenfunctionSample]) -> usize {
    samples.iter().filter(|s| !s.is_ok()).count()
}

fn example_a_grid() -> GridSpec {
    GridSpec::square(2, -2.0, 2.0, 41)
}

impl Suite {
    fn new() -> Self {
        Self {
            integrator: IntegratorSettings::default(),
            settings: PathIntegralSettings::default(),
            produced: Vec::new(),
            example_a: None,
            fitted: Vec::new(),
            info: Vec::new(),
        }
    }

    /// Runs (once per eigenvalue) the EDMD-boundary pipeline on Example A.
    fn fitted_example_a(&mut self, lambda: f64) -> Result<&FittedRun> {
        if let Some(i) = self.fitted.iter().position(|r| (r.pair.lambda.re - lambda).abs() < pipeline::SELECT_TOL) {
            return Ok(&self.fitted[i]);
        }
        let case = cases::example_a();
        let cfg = EdmdConfig::default();
        if self.example_a.is_none() {
            self.example_a = Some(cfg.fit(&case.field, &self.integrator)?);
        }
        let (snaps, model) = self.example_a.as_ref().unwrap();
        let dec = decompose(&case.field)?;
        let pair = pipeline::select_pair(dec.a(), C64::new(lambda, 0.0))?;
        let fitted = pipeline::fitted_boundary(&case.field, snaps, model, &pair, &cfg, &self.integrator)?;
        let grid = example_a_grid();
        let samples = pipeline::edmd_eigenfunction_grid(&case.field, &pair, &fitted, &grid, &self.settings)?;
        self.produced.push(Produced {
            label: format!("example-a λ={lambda} (EDMD boundary)"),
            field: case.field.clone(),
            lambda: pair.lambda,
            grid,
            samples: samples.clone(),
            eval: None,
        });
        self.fitted.push(FittedRun { eps_s: fitted.eps_s, pair, samples });
        Ok(self.fitted.last().unwrap())
    }

    fn ac1(&mut self) -> Result<(bool, String)> {
        let case = cases::example_a();
        let mut passed = true;
        let mut parts = Vec::new();
        for (lambda, limit) in [(-1.0, 0.10), (2.5, 0.08)] {
            let run = self.fitted_example_a(lambda)?;
            let truth = case.analytic_for(run.pair.lambda).expect("analytic pair");
            let summary = cases::compare_to_analytic(&run.samples, truth, &run.pair);
            let bad = failed(&run.samples);
            let ok = summary.max_rel <= limit && bad == 0;
            passed &= ok;
            parts.push(format!(
                "λ={lambda}: max rel {:.3e} (≤ {limit}), failed nodes {bad}/{}",
                summary.max_rel,
                run.samples.len()
            ));
        }
        Ok((passed, parts.join("; ")))
    }

    fn ac2(&mut self) -> Result<(bool, String)> {
        let case = cases::test_system_c();
        let dec = decompose(&case.field)?;
        let pair = pipeline::select_pair(dec.a(), C64::new(-1.0, 0.0))?;
        let grid = GridSpec::square(2, -1.0, 1.0, 21);
        let samples = evaluate_grid(&dec, &pair, &grid, &Method::Infinite, &self.settings)?;
        let truth = case.analytic_for(pair.lambda).expect("analytic pair");
        let summary = cases::compare_to_analytic(&samples, truth, &pair);
        let bad = failed(&samples);
        self.produced.push(Produced {
            label: "test-c λ=-1 (infinite horizon)".into(),
            field: case.field.clone(),
            lambda: pair.lambda,
            grid,
            samples,
            eval: None,
        });
        Ok((
            summary.max_abs <= 1e-6 && bad == 0,
            format!("max abs error {:.3e} (≤ 1e-6), failed nodes {bad}", summary.max_abs),
        ))
    }

    fn ac3(&mut self) -> Result<(bool, String)> {
        let case = cases::example_b();
        let cfg = ControlConfig::default();
        let x1: Vec<f64> = crate::path_integral::Axis::new(-2.0, 2.0, 81).values();
        let out = pipeline::control_curve(&case, &x1, &cfg, &self.settings)?;
        let worst = out.max_abs_err().unwrap_or(f64::INFINITY);
        let failures = out.failures();

        // The same eigenfunction on a grid, for the PDE check against the original field.
        let grid = example_a_grid();
        let samples = pipeline::transform_eigenfunction_grid(&case.field, &out.pair, &cfg.transform, &grid, &self.settings)?;
        let sys = TransformedSystem::new(&case.field, cfg.transform)?;
        let (pair, settings) = (out.pair.clone(), self.settings);
        let bc = sys.boundary(&pair);
        self.produced.push(Produced {
            label: "example-b λ=1 (blended field, zero boundary)".into(),
            field: case.field.clone(),
            lambda: out.pair.lambda,
            grid,
            samples,
            eval: Some(Box::new(move |x: &[f64]| Ok(sys.eigenfunction(&pair, x, &bc, &settings)?.phi))),
        });
        Ok((
            worst <= 0.05 && failures == 0,
            format!(
                "max |u − u*| {worst:.3e} (≤ 0.05) over {} points, level-set failures {failures}, ε_S {:.3e}, scan clean: {}",
                out.rows.len(),
                out.eps_s,
                out.assumption.is_clean()
            ),
        ))
    }

    fn ac4(&mut self) -> Result<(bool, String)> {
        if self.produced.is_empty() {
            return Ok((false, "no eigenfunction grids were produced".into()));
        }
        let mut passed = true;
        let mut parts = Vec::new();
        for p in &self.produced {
            let report = pde_residual(&p.field, p.lambda, &p.grid, &p.samples, PDE_TOL);
            let frac = report.pass_fraction();
            passed &= frac >= PDE_PASS_FRACTION;
            parts.push(format!(
                "{}: {}/{} ({:.1}%)",
                p.label,
                report.passed,
                report.checked,
                100.0 * frac
            ));
            if let (Some(eval), true) = (&p.eval, report.passed < report.checked) {
                let fine = failing_nodes(p)
                    .iter()
                    .map(|x| fine_residual(eval, &p.field, p.lambda, x, 1e-3))
                    .collect::<Result<Vec<f64>>>()?
                    .into_iter()
                    .fold(0.0, f64::max);
                self.info.push(format!(
                    "{}: at the {} nodes failing with spacing 0.1, the residual with spacing 1e-3 is at most {fine:.2e}",
                    p.label,
                    report.checked - report.passed
                ));
            }
        }
        Ok((passed, parts.join("; ")))
    }

    fn ac6(&mut self) -> Result<(bool, String)> {
        let case = cases::example_a();
        let run = self.fitted_example_a(2.5)?;
        let truth = case.analytic_for(run.pair.lambda).expect("analytic pair");
        let c = truth.gauge_to(&run.pair);
        let mut held = 0;
        let mut total = 0;
        let mut worst_ratio: f64 = 0.0;
        for s in run.samples.iter().filter(|s| s.is_ok()) {
            let Some(bound) = s.error_bound else { continue };
            total += 1;
            let err = (s.phi - c * truth.eval(&s.point)).norm();
            if err <= bound {
                held += 1;
            }
            if bound > 0.0 {
                worst_ratio = worst_ratio.max(err / bound);
            }
        }
        let frac = if total == 0 { 0.0 } else { held as f64 / total as f64 };
        Ok((
            frac >= BOUND_PASS_FRACTION && total == run.samples.len(),
            format!(
                "bound held at {held}/{total} nodes ({:.1}%), ε_S {:.3e}, worst err/bound {worst_ratio:.3}",
                100.0 * frac,
                run.eps_s
            ),
        ))
    }

    /// Informational: the local fit evaluated directly on the grid, without
    /// path integrals.
    fn global_edmd_comparison(&mut self) {
        let Some((_, model)) = self.example_a.as_ref() else { return };
        let case = cases::example_a();
        for run in &self.fitted {
            let Ok(matched) = crate::edmd::match_principal(model, &run.pair) else { continue };
            let truth = case.analytic_for(run.pair.lambda).expect("analytic pair");
            let direct: Vec<EigenfunctionSample> = run
                .samples
                .iter()
                .map(|s| EigenfunctionSample { phi: matched.phi_hat(&s.point), ..s.clone() })
                .collect();
            let fit_only = cases::compare_to_analytic(&direct, truth, &run.pair).max_rel;
            let with_paths = cases::compare_to_analytic(&run.samples, truth, &run.pair).max_rel;
            self.info.push(format!(
                "example-a λ={:.3}: max rel error of the annulus fit used directly {fit_only:.3e}, with path integrals {with_paths:.3e}",
                run.pair.lambda.re
            ));
        }
    }
}

/// Interior nodes failing the PDE check.
fn failing_nodes(p: &Produced) -> Vec<Vec<f64>> {
    pde_residuals(&p.field, p.lambda, &p.grid, &p.samples)
        .into_iter()
        .filter(|(_, r)| r.is_none_or(|r| r > PDE_TOL))
        .map(|(flat, _)| p.grid.node(flat))
        .collect()
}

/// Scaled PDE residual at `x` with a centered stencil of half-width `h`.
fn fine_residual(eval: &PointEval, field: &VectorField, lambda: C64, x: &[f64], h: f64) -> Result<f64> {
    let phi = eval(x)?;
    let fx = field.eval(x);
    let mut lie = C64::new(0.0, 0.0);
    for k in 0..x.len() {
        let (mut up, mut dn) = (x.to_vec(), x.to_vec());
        up[k] += h;
        dn[k] -= h;
        lie += (eval(&up)? - eval(&dn)?) / (2.0 * h) * fx[k];
    }
    Ok((lie - lambda * phi).norm() / (1.0 + phi.norm()))
}

/// Independent least-squares oracle: `θ(Y)·θ(X)⁺` with the pseudo-inverse of
/// the data matrix itself rather than of its Gramian.
fn oracle_k(basis: &MonomialBasis, set: &SnapshotSet) -> DMatrix<f64> {
    let tx = basis.eval_matrix(&set.x);
    let ty = basis.eval_matrix(&set.y);
    let pinv = tx.pseudo_inverse(1e-13).expect("svd converges");
    ty * pinv
}

fn ac5() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (dim, degree) = if rng.random_bool(0.5) { (1, rng.random_range(1..=4)) } else { (2, 1) };
        let basis = MonomialBasis::new(dim, degree);
        let m = rng.random_range(basis.len() + 3..=20);
        let shift: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.3..0.3)).collect();
        let x: Vec<Vec<f64>> = (0..m).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<Vec<f64>> = x
            .iter()
            .map(|p| p.iter().zip(&shift).map(|(v, s)| 0.8 * v + s + 0.2 * (2.0 * v).sin()).collect())
            .collect();
        let set = SnapshotSet::new(x, y, 0.1, None)?;
        let k = edmd_fit(&set, &basis, crate::edmd::DEFAULT_SVD_TOL)?.k;
        let oracle = oracle_k(&basis, &set);
        worst = worst.max((k - &oracle).norm() / oracle.norm());
    }

    // Linear system: the degree-1 block is the flow map exp(Aτ).
    let a = DMatrix::from_row_slice(2, 2, &[-0.5, 1.0, -0.3, -0.8]);
    let tau = 0.1;
    let f = VectorField::linear(a.clone());
    let tight = IntegratorSettings::with_tol(1e-13);
    let mut rng = ChaCha8Rng::seed_from_u64(0xE3);
    let x: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let y = x
        .iter()
        .map(|p| flow(&f, p, tau, &tight).map(|t| t.final_state().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let basis = MonomialBasis::new(2, 2);
    let model = edmd_fit(&SnapshotSet::new(x, y, tau, None)?, &basis, crate::edmd::DEFAULT_SVD_TOL)?;
    let expm = (&a * tau).exp();
    let (i, j) = (basis.linear_index(0), basis.linear_index(1));
    let block = DMatrix::from_fn(2, 2, |r, c| model.k[([i, j][r], [i, j][c])]);
    let block_err = (block - &expm).norm() / expm.norm();
    Ok((
        worst <= 1e-9 && block_err <= 1e-8,
        format!("20 instances: worst Frobenius rel {worst:.2e} (≤ 1e-9); linear block vs exp(Aτ) {block_err:.2e} (≤ 1e-8)"),
    ))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + b.abs())
}

fn ac7() -> Result<(bool, String)> {
    let c = |v: f64| C64::new(v, 0.0);
    let mut misses: Vec<String> = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            misses.push(what.to_string());
        }
    };

    check(spectral_condition(c(-1.8), &[c(-1.0), c(-1.8)])?, "condition {−1,−1.8}, λ=−1.8");
    check(!spectral_condition(c(-2.0), &[c(-1.0), c(-2.0)])?, "condition {−1,−2}, λ=−2");
    check(!spectral_condition(c(-2.5), &[c(-1.0), c(-2.5)])?, "condition {−1,−2.5}, λ=−2.5");

    check(transform::sigma(0.0, 10.0) == 0.5, "σ(0) = 1/2");
    for z in [-3.0, -0.7, 0.01, 0.4, 2.0] {
        check(close(transform::sigma(-z, 10.0), 1.0 - transform::sigma(z, 10.0)), "σ(−z) = 1 − σ(z)");
    }
    // ½(1 + tanh(10)) is the logistic 1/(1 + e^{−20}).
    check(close(1.0 - transform::sigma(1.0, 10.0), 1.0 / (1.0 + 20f64.exp())), "1 − σ(1; a=10)");

    let case_b = cases::example_b();
    let a = crate::dynamics::jacobian_at_origin(&case_b.field)?;
    let params = TransformParams::default();
    let ft = transform::transform_field(&case_b.field, &a, &params);
    check(ft.eval(&[0.0, 0.0]).iter().all(|v| v.abs() <= 1e-15), "f̃(0) = 0");
    for theta in [0.3, 1.9, 4.0] {
        let x = [params.r * f64::cos(theta), params.r * f64::sin(theta)];
        let (fx, ax, fb) = (case_b.field.eval(&x), &a * nalgebra::DVector::from_column_slice(&x), ft.eval(&x));
        check((0..2).all(|k| close(fb[k], 0.5 * (fx[k] + ax[k]))), "f̃ = (f + Ax)/2 on ‖x‖ = r");
        for d in [0.5, 1.0, 2.0] {
            let s = (params.r + d) / params.r;
            let y = [x[0] * s, x[1] * s];
            let (fy, ay, fby) = (case_b.field.eval(&y), &a * nalgebra::DVector::from_column_slice(&y), ft.eval(&y));
            let decay = 1.0 / (1.0 + (2.0 * params.a * d).exp());
            check((0..2).all(|k| close(fby[k] - ay[k], decay * (fy[k] - ay[k]))), "f̃ − Ax decays like 1 − σ");
        }
    }

    check(close(transform::choose_a_inner(0.1, 0.5, 2.0)?, 1.05 * 19f64.ln()), "choose_a_inner(0.1, 0.5, 2)");
    check(transform::choose_a_inner(1.0, 0.5, 2.0)? == transform::A_MIN, "choose_a_inner floor");
    check(
        close(transform::choose_a_inner(0.1, 1.0, 2.0)?, 0.5 * transform::choose_a_inner(0.1, 0.5, 2.0)?),
        "choose_a_inner halves when ε₂ doubles",
    );

    let pair_b = pipeline::unstable_pair(&case_b.field)?;
    let sharp = TransformParams { a: 200.0, ..params };
    check(
        transform::boundary_residual_bound(&case_b.field, &pair_b, &sharp, transform::DEFAULT_SAMPLES) <= 1e-9,
        "bound → 0 as a → ∞",
    );
    // Linear field: sup ‖Ax‖ on the sphere is R·σ_max(A).
    let lin = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, -1.0]);
    let smax = lin.singular_values().max();
    let pair_lin = pipeline::select_pair(&lin, c(1.0))?;
    let r_big = params.big_r();
    let expected = 0.5 * (1.0 - (params.a * params.eps2).tanh()) * pair_lin.w.norm() * (r_big + r_big * smax);
    check(close(transform::residual_bound_from_sup(&params, &pair_lin, r_big * smax), expected), "linear-field bound");
    let sampled_sup = transform::sampled_sphere_sup(&VectorField::linear(lin), r_big, transform::DEFAULT_SAMPLES, transform::DEFAULT_SEED);
    check(sampled_sup <= r_big * smax * (1.0 + 1e-12) && sampled_sup >= r_big * smax * (1.0 - 1e-3), "sampled sphere sup of a linear map");

    let bound_b = transform::boundary_residual_bound(&case_b.field, &pair_b, &params, transform::DEFAULT_SAMPLES);
    let sup_b = transform::sampled_sphere_sup(&case_b.field, r_big, transform::DEFAULT_SAMPLES, transform::DEFAULT_SEED);
    let expected_b = 0.5 * (1.0 - 5f64.tanh()) * pair_b.w.norm() * (pair_b.lambda.norm() * r_big + transform::SUP_SAFETY * sup_b);
    check(bound_b > 0.0 && close(bound_b, expected_b), "Example B bound");

    check(
        classify_equilibrium(&a).kind == crate::spectral::EquilibriumKind::Saddle,
        "Example B is a saddle",
    );
    let n_missed = misses.len();
    Ok((
        n_missed == 0,
        if n_missed == 0 {
            format!("all algebra checks reproduced; Example B boundary bound {bound_b:.4e} (sphere sup ‖f‖ {sup_b:.3})")
        } else {
            format!("mismatched: {}", misses.join(", "))
        },
    ))
}

/// Runs the suite and returns one outcome per criterion in `AC1..AC7` order,
/// followed by informational lines.
pub fn run(mode: Mode) -> (Vec<Outcome>, Vec<String>) {
    let mut suite = Suite::new();
    let mut out = Vec::new();
    if mode == Mode::Full {
        out.push(timed("AC1", || suite.ac1()));
    }
    out.push(timed("AC2", || suite.ac2()));
    if mode == Mode::Full {
        out.push(timed("AC3", || suite.ac3()));
    }
    out.push(timed("AC5", ac5));
    out.push(timed("AC6", || suite.ac6()));
    out.push(timed("AC7", ac7));
    out.push(timed("AC4", || suite.ac4()));
    out.sort_by_key(|o| o.id);
    suite.global_edmd_comparison();
    (out, suite.info)
}

/// Case-study registry check run before the suite; names a missing case.
pub fn check_registry() -> std::result::Result<(), String> {
    check_cases(&cases::CASE_NAMES)
}

fn check_cases(names: &[&str]) -> std::result::Result<(), String> {
    for name in names {
        let case: CaseStudy = cases::by_name(name).map_err(|e| format!("case study {name}: {e}"))?;
        if case.analytic_eigenpairs.is_empty() && case.analytic_controller.is_none() {
            return Err(format!("case study {name} has no analytic reference"));
        }
    }
    Ok(())
}
