//! Extended dynamic mode decomposition on a monomial dictionary.
//!
//! `K = θ_XY θ_XX†` is fitted from snapshot pairs `(x_i, y_i = s_τ(x_i))`.
//! Left eigenvectors `ν` of `K` give approximate eigenfunctions `νᵀθ(x)`,
//! which are matched to a principal eigenpair of the linearization and turned
//! into the boundary estimate `ĥ` used by the finite-horizon path integral.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{flow, norm, IntegratorSettings, VectorField};
use crate::error::{Error, Result};
use crate::linalg::{self, C64};
use crate::path_integral::BoundaryCondition;
use crate::spectral::PrincipalEigenpair;

/// Default relative singular-value cutoff for `θ_XX†`.
pub const DEFAULT_SVD_TOL: f64 = 1e-10;

/// Monomials `x^α` with `|α| ≤ max_degree` in graded lexicographic order:
/// `1, x1, …, xn, x1², x1x2, …`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MonomialBasis {
    dim: usize,
    max_degree: usize,
    exponents: Vec<Vec<usize>>,
}

fn push_compositions(dim: usize, deg: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() + 1 == dim {
        prefix.push(deg);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in (0..=deg).rev() {
        prefix.push(first);
        push_compositions(dim, deg - first, prefix, out);
        prefix.pop();
    }
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

impl MonomialBasis {
    pub fn new(dim: usize, max_degree: usize) -> Self {
        assert!(dim >= 1, "basis dimension must be positive");
        let mut exponents = Vec::with_capacity(binomial(dim + max_degree, max_degree));
        for deg in 0..=max_degree {
            push_compositions(dim, deg, &mut Vec::with_capacity(dim), &mut exponents);
        }
        Self { dim, max_degree, exponents }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[Vec<usize>] {
        &self.exponents
    }

    /// Index of the monomial `x_i` (degree one).
    pub fn linear_index(&self, i: usize) -> usize {
        1 + i
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        let d = self.max_degree;
        let mut pows = vec![1.0; self.dim * (d + 1)];
        for (i, &xi) in x.iter().enumerate() {
            for k in 1..=d {
                pows[i * (d + 1) + k] = pows[i * (d + 1) + k - 1] * xi;
            }
        }
        for (o, alpha) in out.iter_mut().zip(&self.exponents) {
            *o = alpha
                .iter()
                .enumerate()
                .map(|(i, &e)| pows[i * (d + 1) + e])
                .product();
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out);
        out
    }

    /// `θ(X)` as an `N × M` matrix, one column per point.
    pub fn eval_matrix(&self, points: &[Vec<f64>]) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, points.len());
        for (j, p) in points.iter().enumerate() {
            self.eval_into(p, m.column_mut(j).as_mut_slice());
        }
        m
    }
}

/// Serializable description of a [`MonomialBasis`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonomialBasisSpec {
    pub dim: usize,
    pub max_degree: usize,
}

impl From<&MonomialBasis> for MonomialBasisSpec {
    fn from(b: &MonomialBasis) -> Self {
        Self { dim: b.dim, max_degree: b.max_degree }
    }
}

impl From<MonomialBasisSpec> for MonomialBasis {
    fn from(s: MonomialBasisSpec) -> Self {
        MonomialBasis::new(s.dim, s.max_degree)
    }
}

/// Snapshot pairs `y_i = s_τ(x_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSet {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub tau: f64,
    pub seed: Option<u64>,
}

/// Sidecar record stored next to a snapshot CSV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub tau: f64,
    pub seed: Option<u64>,
    pub dim: usize,
    pub pairs: usize,
}

impl SnapshotSet {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, tau: f64, seed: Option<u64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
        }
        let dim = x.first().map_or(0, Vec::len);
        if let Some(bad) = x.iter().chain(&y).find(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: bad.len() });
        }
        Ok(Self { x, y, tau, seed })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn meta(&self) -> SnapshotMeta {
        SnapshotMeta { tau: self.tau, seed: self.seed, dim: self.dim(), pairs: self.len() }
    }

    /// Path of the JSON sidecar belonging to a CSV path.
    pub fn sidecar_path(csv: &Path) -> PathBuf {
        csv.with_extension("json")
    }

    /// Writes `x1..xn,y1..yn` rows to `path` and the sidecar next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let n = self.dim();
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        let header: Vec<String> = (1..=n).map(|i| format!("x{i}")).chain((1..=n).map(|i| format!("y{i}"))).collect();
        w.write_record(&header)?;
        for (x, y) in self.x.iter().zip(&self.y) {
            w.write_record(x.iter().chain(y).map(|v| format!("{v:.16e}")))?;
        }
        w.flush()?;
        let meta = BufWriter::new(File::create(Self::sidecar_path(path))?);
        serde_json::to_writer_pretty(meta, &self.meta())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let meta: SnapshotMeta = serde_json::from_reader(BufReader::new(File::open(Self::sidecar_path(path))?))?;
        let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
        let n = meta.dim;
        let expected: Vec<String> = (1..=n).map(|i| format!("x{i}")).chain((1..=n).map(|i| format!("y{i}"))).collect();
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header != expected {
            return Err(Error::InvalidInput(format!("snapshot header {header:?}, expected {expected:?}")));
        }
        let (mut xs, mut ys) = (Vec::with_capacity(meta.pairs), Vec::with_capacity(meta.pairs));
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::InvalidInput(format!("snapshot row {}: {e}", line + 2)))?;
            if vals.len() != 2 * n {
                return Err(Error::DimensionMismatch { expected: 2 * n, got: vals.len() });
            }
            xs.push(vals[..n].to_vec());
            ys.push(vals[n..].to_vec());
        }
        Self::new(xs, ys, meta.tau, meta.seed)
    }
}

/// Random initial points uniform in `{x : |‖x‖ − center_radius| ≤ width}`, each
/// followed for `traj_len − 1` steps of length `tau`.
///
/// Initial points are drawn serially from a seeded generator; trajectories are
/// integrated in parallel with order preserved, so output is deterministic.
#[allow(clippy::too_many_arguments)]
pub fn sample_annulus(
    f: &VectorField,
    center_radius: f64,
    width: f64,
    n_traj: usize,
    traj_len: usize,
    tau: f64,
    seed: u64,
    settings: &IntegratorSettings,
) -> Result<SnapshotSet> {
    if !(width > 0.0) || !(center_radius >= 0.0) || !(tau > 0.0) || traj_len < 2 || n_traj == 0 {
        return Err(Error::InvalidInput(format!(
            "annulus sampling needs width > 0, tau > 0, traj_len >= 2, n_traj >= 1 (got width={width}, tau={tau}, traj_len={traj_len}, n_traj={n_traj})"
        )));
    }
    let n = f.dim();
    let outer = center_radius + width;
    let inner = (center_radius - width).max(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = Vec::with_capacity(n_traj);
    let mut attempts = 0u64;
    while starts.len() < n_traj {
        attempts += 1;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-outer..=outer)).collect();
        let r = norm(&x);
        if r >= inner && r <= outer {
            starts.push(x);
        } else if attempts >= 10_000 && (starts.len() as f64) < 1e-4 * attempts as f64 {
            return Err(Error::RejectionStall { rate: starts.len() as f64 / attempts as f64 });
        }
    }
    let trajectories = starts
        .par_iter()
        .map(|x0| {
            let mut states = Vec::with_capacity(traj_len);
            states.push(x0.clone());
            for _ in 1..traj_len {
                let next = flow(f, states.last().unwrap(), tau, settings)?.final_state().to_vec();
                states.push(next);
            }
            Ok(states)
        })
        .collect::<Result<Vec<Vec<Vec<f64>>>>>()?;
    let mut xs = Vec::with_capacity(n_traj * (traj_len - 1));
    let mut ys = Vec::with_capacity(n_traj * (traj_len - 1));
    for states in trajectories {
        for w in states.windows(2) {
            xs.push(w[0].clone());
            ys.push(w[1].clone());
        }
    }
    SnapshotSet::new(xs, ys, tau, Some(seed))
}

/// Largest deviation `‖y_i − s_τ(x_i)‖` over a seeded random subsample
/// (`fraction` of the pairs, at least one) re-integrated with `settings`.
pub fn snapshot_consistency(
    f: &VectorField,
    set: &SnapshotSet,
    fraction: f64,
    seed: u64,
    settings: &IntegratorSettings,
) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let count = ((set.len() as f64 * fraction).ceil() as usize).clamp(1, set.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = rand::seq::index::sample(&mut rng, set.len(), count).into_vec();
    picks
        .par_iter()
        .map(|&i| {
            let y = flow(f, &set.x[i], set.tau, settings)?;
            let d: Vec<f64> = y.final_state().iter().zip(&set.y[i]).map(|(a, b)| a - b).collect();
            Ok(norm(&d))
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))
}

/// Fitted Koopman matrix with its left eigenpairs `νᵀK = μνᵀ`.
#[derive(Clone, Debug)]
pub struct EdmdModel {
    pub basis: MonomialBasis,
    pub k: DMatrix<f64>,
    pub tau: f64,
    pub svd_tol: f64,
    /// Singular values of the Gramian kept by the truncation.
    pub rank: usize,
    pub eigenpairs: Vec<(C64, DVector<C64>)>,
}

/// Options for [`edmd_fit_with`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdmdOptions {
    pub svd_tol: f64,
    /// Scale every dictionary function to unit RMS over the samples before the
    /// pseudo-inverse. High-degree monomials span many orders of magnitude and
    /// the truncation otherwise discards most of them.
    pub equilibrate: bool,
}

impl Default for EdmdOptions {
    fn default() -> Self {
        Self { svd_tol: DEFAULT_SVD_TOL, equilibrate: true }
    }
}

/// Moore-Penrose inverse by SVD, dropping singular values below `tol·σ_max`.
fn truncated_pinv(m: &DMatrix<f64>, tol: f64) -> (DMatrix<f64>, usize) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let s = &svd.singular_values;
    let smax = s.iter().copied().fold(0.0, f64::max);
    let cut = tol * smax;
    let mut pinv = DMatrix::zeros(m.ncols(), m.nrows());
    let mut rank = 0;
    for (i, &si) in s.iter().enumerate() {
        if si > cut && si > 0.0 {
            rank += 1;
            pinv += v_t.row(i).transpose() * (u.column(i).transpose() / si);
        }
    }
    (pinv, rank)
}

/// `K = θ_XY θ_XX†` with default options.
pub fn edmd_fit(snapshots: &SnapshotSet, basis: &MonomialBasis, svd_tol: f64) -> Result<EdmdModel> {
    edmd_fit_with(snapshots, basis, &EdmdOptions { svd_tol, ..Default::default() })
}

pub fn edmd_fit_with(snapshots: &SnapshotSet, basis: &MonomialBasis, opts: &EdmdOptions) -> Result<EdmdModel> {
    if snapshots.dim() != basis.dim() {
        return Err(Error::DimensionMismatch { expected: basis.dim(), got: snapshots.dim() });
    }
    if snapshots.is_empty() {
        return Err(Error::InvalidInput("no snapshot pairs".into()));
    }
    if !(opts.svd_tol >= 0.0) {
        return Err(Error::InvalidInput(format!("svd_tol must be non-negative, got {}", opts.svd_tol)));
    }
    let n = basis.len();
    if snapshots.len() < n {
        warn!("{} snapshot pairs for a dictionary of {n} functions", snapshots.len());
    }
    let mut tx = basis.eval_matrix(&snapshots.x);
    let mut ty = basis.eval_matrix(&snapshots.y);
    let d: Vec<f64> = if opts.equilibrate {
        tx.row_iter()
            .map(|r| {
                let rms = (r.norm_squared() / r.len() as f64).sqrt();
                if rms > 0.0 && rms.is_finite() { 1.0 / rms } else { 1.0 }
            })
            .collect()
    } else {
        vec![1.0; n]
    };
    for (i, &di) in d.iter().enumerate() {
        tx.row_mut(i).scale_mut(di);
        ty.row_mut(i).scale_mut(di);
    }
    let gxx = &tx * tx.transpose();
    let gxy = &ty * tx.transpose();
    let (pinv, rank) = truncated_pinv(&gxx, opts.svd_tol);
    let k_scaled = gxy * pinv;
    if 2 * rank < n {
        warn!("EDMD Gramian rank {rank} of {n}: fit is rank deficient");
    }
    let k = DMatrix::from_fn(n, n, |i, j| k_scaled[(i, j)] * d[j] / d[i]);
    // Eigenvectors of the scaled matrix are better conditioned; map back by ν = Dν̃.
    let eigenpairs = linalg::left_eigen_loose(&k_scaled)
        .into_iter()
        .map(|(mu, nt)| {
            let mut nu = DVector::from_fn(n, |i, _| nt[i] * d[i]);
            linalg::canonicalize(&mut nu);
            (mu, nu)
        })
        .collect();
    Ok(EdmdModel { basis: basis.clone(), k, tau: snapshots.tau, svd_tol: opts.svd_tol, rank, eigenpairs })
}

impl EdmdModel {
    /// Model from a given matrix (eigenpairs computed here).
    pub fn from_matrix(basis: MonomialBasis, k: DMatrix<f64>, tau: f64) -> Result<Self> {
        if k.nrows() != basis.len() || k.ncols() != basis.len() {
            return Err(Error::DimensionMismatch { expected: basis.len(), got: k.nrows() });
        }
        let eigenpairs = linalg::left_eigen_loose(&k);
        Ok(Self { rank: basis.len(), basis, k, tau, svd_tol: 0.0, eigenpairs })
    }

    /// Continuous-time eigenvalues `log(μ)/τ`; zero `μ` map to `-∞`.
    pub fn continuous_eigenvalues(&self) -> Vec<C64> {
        self.eigenpairs
            .iter()
            .map(|(mu, _)| continuous_eigenvalue(*mu, self.tau).unwrap_or(C64::new(f64::NEG_INFINITY, 0.0)))
            .collect()
    }

    /// `max ‖νᵀK − μνᵀ‖ / ‖K‖` over the stored pairs.
    pub fn max_eigen_residual(&self) -> f64 {
        let scale = self.k.norm().max(f64::MIN_POSITIVE);
        self.eigenpairs
            .iter()
            .map(|(mu, nu)| linalg::left_residual(&self.k, *mu, nu) / (scale * nu.norm()))
            .fold(0.0, f64::max)
    }
}

/// `log(μ)/τ` on the principal branch.
pub fn continuous_eigenvalue(mu: C64, tau: f64) -> Result<C64> {
    if mu.norm() == 0.0 {
        return Err(Error::ZeroEigenvalue);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("tau must be positive, got {tau}")));
    }
    Ok(mu.ln() / tau)
}

/// EDMD eigenfunction `c·νᵀθ` gauge-aligned with a principal eigenpair.
#[derive(Clone, Debug)]
pub struct MatchedEigenfunction {
    pub basis: MonomialBasis,
    /// `c·ν`: coefficients of the fitted eigenfunction in the basis.
    pub coeffs: DVector<C64>,
    pub target: PrincipalEigenpair,
    /// Matched discrete eigenvalue and its continuous counterpart.
    pub mu: C64,
    pub lambda_fit: C64,
    pub gauge: C64,
    /// `‖c·ν_lin − w‖`.
    pub gauge_residual: f64,
}

impl MatchedEigenfunction {
    /// `φ̂(x) = c·νᵀθ(x)`.
    pub fn phi_hat(&self, x: &[f64]) -> C64 {
        self.basis.eval(x).iter().zip(self.coeffs.iter()).map(|(t, c)| c * t).sum()
    }

    /// `ĥ(x) = φ̂(x) − wᵀx`.
    pub fn h_hat(&self, x: &[f64]) -> C64 {
        self.phi_hat(x) - self.target.project(x)
    }

    /// Fitted boundary condition on the sphere of radius `radius`.
    pub fn boundary(&self, radius: f64, eps_s: Option<f64>) -> BoundaryCondition {
        let me = Arc::new(self.clone());
        BoundaryCondition::fitted(radius, move |x| me.h_hat(x), eps_s)
    }
}

/// Picks the eigenpair with `log(μ)/τ` closest to the target eigenvalue and
/// aligns its degree-one coefficients with `w` by a complex least-squares scale.
pub fn match_principal(model: &EdmdModel, target: &PrincipalEigenpair) -> Result<MatchedEigenfunction> {
    let n = model.basis.dim();
    if target.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: target.dim() });
    }
    if model.basis.max_degree() < 1 {
        return Err(Error::InvalidInput("basis must contain the linear monomials".into()));
    }
    let gate = 0.1 * (1.0 + target.lambda.norm());
    let mut best: Option<(f64, usize, C64)> = None;
    for (idx, (mu, _)) in model.eigenpairs.iter().enumerate() {
        let Ok(lam) = continuous_eigenvalue(*mu, model.tau) else { continue };
        let dist = (lam - target.lambda).norm();
        if best.is_none_or(|(d, _, _)| dist < d) {
            best = Some((dist, idx, lam));
        }
    }
    let (dist, idx, lambda_fit) = best.ok_or(Error::NoMatchingEigenvalue { target: target.lambda, closest: C64::new(f64::NAN, f64::NAN) })?;
    if !(dist < gate) {
        return Err(Error::NoMatchingEigenvalue { target: target.lambda, closest: lambda_fit });
    }
    let (mu, nu) = &model.eigenpairs[idx];
    let nu_lin = DVector::from_fn(n, |i, _| nu[model.basis.linear_index(i)]);
    let denom = nu_lin.dotc(&nu_lin);
    if denom.norm() == 0.0 {
        return Err(Error::InvalidInput("matched eigenvector has no linear component".into()));
    }
    let gauge = nu_lin.dotc(&target.w) / denom;
    let gauge_residual = (&nu_lin * gauge - &target.w).norm();
    Ok(MatchedEigenfunction {
        basis: model.basis.clone(),
        coeffs: nu * gauge,
        target: target.clone(),
        mu: *mu,
        lambda_fit,
        gauge,
        gauge_residual,
    })
}

/// Uniform random points on the sphere `‖x‖ = radius` from a seeded generator.
pub fn sphere_points(dim: usize, radius: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let r = norm(&v);
        if r > 1e-12 {
            out.push(v.iter().map(|c| c * radius / r).collect());
        }
    }
    out
}

/// Ways of estimating the boundary error `ε_S = sup_S |ĥ − h|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EpsEstimator {
    /// A fixed, user-supplied value.
    Fixed { value: f64 },
    /// Quantile of the one-step eigenfunction defect `|φ̂(y) − e^{λτ}φ̂(x)|/|e^{λτ}|`
    /// over held-out pairs.
    ResidualQuantile { quantile: f64 },
    /// `max |ĥ_d − ĥ_k|` over random points of the sphere and over the fits
    /// `ĥ_k` of degree `k = d − 1, d − 2` on the same data. Two lower degrees
    /// because a function of definite parity gains nothing from every other
    /// degree, which makes a single comparison blind.
    DegreeComparison { points: usize },
}

impl Default for EpsEstimator {
    fn default() -> Self {
        Self::DegreeComparison { points: 2000 }
    }
}

/// Estimates `ε_S` for `matched` on the sphere of radius `radius`.
///
/// `data` is the training set (needed by degree comparison); `held_out` is
/// needed by the residual quantile.
pub fn estimate_eps_s(
    estimator: &EpsEstimator,
    matched: &MatchedEigenfunction,
    data: &SnapshotSet,
    held_out: Option<&SnapshotSet>,
    opts: &EdmdOptions,
    radius: f64,
    seed: u64,
) -> Result<f64> {
    match *estimator {
        EpsEstimator::Fixed { value } => Ok(value),
        EpsEstimator::ResidualQuantile { quantile } => {
            let set = held_out.ok_or_else(|| Error::InvalidInput("residual quantile needs held-out pairs".into()))?;
            residual_quantile(matched, set, quantile)
        }
        EpsEstimator::DegreeComparison { points } => {
            let d = matched.basis.max_degree();
            if d < 2 {
                return Err(Error::InvalidInput("degree comparison needs max_degree >= 2".into()));
            }
            let pts = sphere_points(matched.basis.dim(), radius, points, seed);
            let mut eps: f64 = 0.0;
            for k in (d.saturating_sub(2).max(1)..d).rev() {
                let lower = edmd_fit_with(data, &MonomialBasis::new(matched.basis.dim(), k), opts)?;
                let coarse = match_principal(&lower, &matched.target)?;
                let diff = pts
                    .par_iter()
                    .map(|p| (matched.h_hat(p) - coarse.h_hat(p)).norm())
                    .reduce(|| 0.0, f64::max);
                eps = eps.max(diff);
            }
            Ok(eps)
        }
    }
}

fn residual_quantile(matched: &MatchedEigenfunction, set: &SnapshotSet, quantile: f64) -> Result<f64> {
    if set.is_empty() || !(0.0..=1.0).contains(&quantile) {
        return Err(Error::InvalidInput("residual quantile needs pairs and a quantile in [0, 1]".into()));
    }
    let growth = (matched.target.lambda * set.tau).exp();
    let mut defects: Vec<f64> = set
        .x
        .par_iter()
        .zip(&set.y)
        .map(|(x, y)| ((matched.phi_hat(y) - growth * matched.phi_hat(x)) / growth).norm())
        .collect();
    defects.sort_by(f64::total_cmp);
    let pos = ((defects.len() - 1) as f64 * quantile).round() as usize;
    Ok(defects[pos])
}

/// Median over pairs of `|φ̂(y) − e^{λτ}φ̂(x)| / (1 + |φ̂(x)|)`.
pub fn median_eigen_defect(matched: &MatchedEigenfunction, set: &SnapshotSet) -> f64 {
    let growth = (matched.target.lambda * set.tau).exp();
    let mut d: Vec<f64> = set
        .x
        .iter()
        .zip(&set.y)
        .map(|(x, y)| {
            let px = matched.phi_hat(x);
            (matched.phi_hat(y) - growth * px).norm() / (1.0 + px.norm())
        })
        .collect();
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grlex_order_and_size() {
        let b = MonomialBasis::new(2, 2);
        assert_eq!(
            b.exponents(),
            &[vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]
        );
        assert_eq!(MonomialBasis::new(2, 10).len(), 66);
        assert_eq!(MonomialBasis::new(3, 4).len(), 35);
        assert_eq!(MonomialBasis::new(3, 1).exponents()[3], vec![0, 0, 1]);
        let v = b.eval(&[2.0, 3.0]);
        assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn continuous_eigenvalue_examples() {
        let c = |re: f64| C64::new(re, 0.0);
        assert_eq!(continuous_eigenvalue(c(1.0), 0.5).unwrap(), c(0.0));
        assert!((continuous_eigenvalue(c((-0.1f64).exp()), 0.1).unwrap() - c(-1.0)).norm() < 1e-14);
        assert!((continuous_eigenvalue(c(0.25f64.exp()), 0.1).unwrap() - c(2.5)).norm() < 1e-14);
        assert!(matches!(continuous_eigenvalue(c(0.0), 0.1), Err(Error::ZeroEigenvalue)));
    }

    fn linear_set(a: &DMatrix<f64>, tau: f64, pts: &[Vec<f64>]) -> SnapshotSet {
        let f = VectorField::linear(a.clone());
        let s = IntegratorSettings { rel_tol: 1e-13, abs_tol: 1e-15, ..Default::default() };
        let ys = pts.iter().map(|p| flow(&f, p, tau, &s).unwrap().final_state().to_vec()).collect();
        SnapshotSet::new(pts.to_vec(), ys, tau, None).unwrap()
    }

    #[test]
    fn scalar_decay_gives_diagonal_operator() {
        let pts: Vec<Vec<f64>> = (0..21).map(|i| vec![-1.0 + 0.1 * i as f64]).collect();
        let set = linear_set(&DMatrix::from_element(1, 1, -1.0), 0.1, &pts);
        let m = edmd_fit(&set, &MonomialBasis::new(1, 1), DEFAULT_SVD_TOL).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, (-0.1f64).exp()]);
        assert!((&m.k - &expected).amax() < 1e-8, "{}", m.k);
        assert!((m.k[(1, 1)] - 0.904837).abs() < 1e-6);
    }

    /// Matrix exponential by scaling and squaring of a Taylor series.
    fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let s = 10;
        let b = a / 2f64.powi(s);
        let mut term = DMatrix::identity(n, n);
        let mut sum = term.clone();
        for k in 1..20 {
            term = &term * &b / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn linear_block_is_matrix_exponential() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.5, 1.0, -0.3, -1.2]);
        let tau = 0.2;
        let mut pts = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                pts.push(vec![-1.0 + 0.4 * i as f64, -1.0 + 0.37 * j as f64]);
            }
        }
        let m = edmd_fit(&linear_set(&a, tau, &pts), &MonomialBasis::new(2, 1), DEFAULT_SVD_TOL).unwrap();
        // θ(s_τ x) = K θ(x) with θ = (1, x1, x2) puts exp(Aτ) in the linear block.
        let block = m.k.view((1, 1), (2, 2)).into_owned();
        assert!((&block - expm(&(a * tau))).amax() < 1e-8, "{block}");
    }

    #[test]
    fn identity_dynamics_give_identity() {
        let pts: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.91).cos()]).collect();
        let set = SnapshotSet::new(pts.clone(), pts, 0.1, None).unwrap();
        let m = edmd_fit(&set, &MonomialBasis::new(2, 2), DEFAULT_SVD_TOL).unwrap();
        assert!((&m.k - DMatrix::identity(6, 6)).amax() < 1e-8);
    }

    #[test]
    fn linear_target_gives_zero_h_hat() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
        let pts: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()]).collect();
        let m = edmd_fit(&linear_set(&a, 0.1, &pts), &MonomialBasis::new(2, 1), DEFAULT_SVD_TOL).unwrap();
        let target = PrincipalEigenpair::real(-1.0, &[1.0, 0.0]);
        let mm = match_principal(&m, &target).unwrap();
        assert!((mm.lambda_fit - target.lambda).norm() < 1e-8);
        for p in &pts {
            assert!(mm.h_hat(p).norm() < 1e-8);
        }
        assert!(mm.gauge_residual < 1e-8);
    }

    #[test]
    fn basis_restriction_example() {
        // On x1⁴ + x2⁴ = 1 the eigenfunction x1⁴ + 2x1² + x1x2 − x2 + x2⁴ equals the
        // degree-two polynomial 2x1² + x1x2 − x2 + 1. A K built to have that
        // polynomial as an eigenfunction must reproduce ĥ = 2x1² + x1x2 + 1.
        let basis = MonomialBasis::new(2, 2);
        let lam = 0.7f64;
        let tau = 0.1;
        let mu = (lam * tau).exp();
        // Rows of V are left eigenvectors; the first is the target.
        let psi = [1.0, 0.0, -1.0, 2.0, 1.0, 0.0];
        let mut v = DMatrix::zeros(6, 6);
        for (j, c) in psi.iter().enumerate() {
            v[(0, j)] = *c;
        }
        // Unit rows completing an invertible V.
        for (k, i) in [1usize, 3, 4, 5, 0].iter().enumerate() {
            v[(k + 1, *i)] = 1.0;
        }
        let lams = DMatrix::from_diagonal(&DVector::from_vec(vec![mu, 0.5, 0.4, 0.3, 0.2, 0.1]));
        let k = v.clone().try_inverse().unwrap() * lams * &v;
        let model = EdmdModel::from_matrix(basis, k, tau).unwrap();
        let mm = match_principal(&model, &PrincipalEigenpair::real(lam, &[0.0, -1.0])).unwrap();
        for &(x1, x2) in &[(0.3f64, 0.2f64), (-1.0, 0.5), (0.8, -0.9)] {
            let expected = 2.0 * x1 * x1 + x1 * x2 + 1.0;
            assert!((mm.h_hat(&[x1, x2]) - C64::new(expected, 0.0)).norm() < 1e-8);
        }
    }

    #[test]
    fn mismatched_target_is_rejected() {
        let model = EdmdModel::from_matrix(MonomialBasis::new(1, 1), DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5])), 0.1).unwrap();
        let err = match_principal(&model, &PrincipalEigenpair::real(3.0, &[1.0])).unwrap_err();
        assert!(matches!(err, Error::NoMatchingEigenvalue { .. }));
    }

    #[test]
    fn snapshot_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.csv");
        let set = SnapshotSet::new(vec![vec![0.1, 1.0 / 3.0]], vec![vec![-2.5e-17, 7.0]], 0.25, Some(9)).unwrap();
        set.write(&path).unwrap();
        let head = std::fs::read_to_string(&path).unwrap();
        assert!(head.starts_with("x1,x2,y1,y2\n"));
        assert_eq!(SnapshotSet::read(&path).unwrap(), set);
    }

    #[test]
    fn annulus_sampling_contract() {
        let f = VectorField::new(2, |x, o| {
            o[0] = -x[0];
            o[1] = -2.0 * x[1] + x[0] * x[0];
        });
        let s = IntegratorSettings::default();
        let a = sample_annulus(&f, 3.0, 0.4, 30, 10, 0.1, 5, &s).unwrap();
        assert_eq!(a.len(), 30 * 9);
        for (i, x) in a.x.iter().enumerate().step_by(9) {
            let r = norm(x);
            assert!((2.6..=3.4).contains(&r), "start {i} at radius {r}");
        }
        // consecutive pairs chain
        assert_eq!(a.y[0], a.x[1]);
        let b = sample_annulus(&f, 3.0, 0.4, 30, 10, 0.1, 5, &s).unwrap();
        assert_eq!(a, b);
        assert!(snapshot_consistency(&f, &a, 0.01, 1, &s).unwrap() < 1e-6);
    }

    #[test]
    fn rejection_stall_detected() {
        let f = VectorField::new(3, |x, o| o.copy_from_slice(x));
        // A paper-thin shell has negligible acceptance.
        let err = sample_annulus(&f, 1.0, 1e-9, 5, 2, 0.1, 0, &IntegratorSettings::default()).unwrap_err();
        assert!(matches!(err, Error::RejectionStall { .. }));
    }

    #[test]
    fn sphere_points_lie_on_sphere() {
        for p in sphere_points(3, 4.5, 50, 1) {
            assert!((norm(&p) - 4.5).abs() < 1e-12);
        }
        assert_eq!(sphere_points(2, 1.0, 5, 3), sphere_points(2, 1.0, 5, 3));
    }

    fn random_instance() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
        (1usize..=2, 1usize..=2).prop_flat_map(|(dim, deg)| {
            let n = MonomialBasis::new(dim, deg).len();
            (Just(dim), Just(deg), n..=20usize).prop_flat_map(move |(dim, deg, m)| {
                (
                    Just(dim),
                    Just(deg),
                    proptest::collection::vec(-1.5f64..1.5, m * dim),
                    proptest::collection::vec(-1.5f64..1.5, m * dim),
                )
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn least_squares_optimality((dim, deg, xs, ys) in random_instance(), seed in 0u64..1000) {
            let basis = MonomialBasis::new(dim, deg);
            let xs: Vec<Vec<f64>> = xs.chunks(dim).map(<[f64]>::to_vec).collect();
            let ys: Vec<Vec<f64>> = ys.chunks(dim).map(<[f64]>::to_vec).collect();
            let set = SnapshotSet::new(xs.clone(), ys.clone(), 0.1, None).unwrap();
            let m = edmd_fit(&set, &basis, DEFAULT_SVD_TOL).unwrap();
            let tx = basis.eval_matrix(&xs);
            let ty = basis.eval_matrix(&ys);
            let best = (&ty - &m.k * &tx).norm();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = basis.len();
            for _ in 0..100 {
                let g = &m.k + DMatrix::from_fn(n, n, |_, _| rand::Rng::random_range(&mut rng, -0.1..0.1));
                prop_assert!(best <= (&ty - g * &tx).norm() + 1e-9);
            }
        }

        #[test]
        fn gramian_consistency((dim, deg, xs, ys) in random_instance()) {
            let basis = MonomialBasis::new(dim, deg);
            let xs: Vec<Vec<f64>> = xs.chunks(dim).map(<[f64]>::to_vec).collect();
            let ys: Vec<Vec<f64>> = ys.chunks(dim).map(<[f64]>::to_vec).collect();
            let tx = basis.eval_matrix(&xs);
            let ty = basis.eval_matrix(&ys);
            let gxx = &tx * tx.transpose();
            let sv = gxx.singular_values();
            let cond = sv.max() / sv.min();
            prop_assume!(cond < 1e6);
            let m = edmd_fit(&SnapshotSet::new(xs, ys, 0.1, None).unwrap(), &basis, DEFAULT_SVD_TOL).unwrap();
            let gxy = &ty * tx.transpose();
            prop_assert!((&m.k * &gxx - &gxy).norm() <= 1e-8 * gxy.norm().max(1.0));
            prop_assert!(m.max_eigen_residual() <= 1e-8);
        }
    }
}
