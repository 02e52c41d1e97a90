//! Principal eigenvalues and left eigenvectors of the linearization, equilibrium
//! classification and the spectral-distribution condition.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, C64};

/// Real parts within this distance of zero count as on the imaginary axis.
pub const HYPERBOLIC_MARGIN: f64 = 1e-8;

/// Eigenvalue `λ` of `A` together with a left eigenvector `w` (`wᵀA = λwᵀ`).
///
/// The principal eigenfunction is `φ(x) = wᵀx + h(x)`; `w` fixes its gauge.
#[derive(Clone, Debug, PartialEq)]
pub struct PrincipalEigenpair {
    pub lambda: C64,
    pub w: DVector<C64>,
}

impl PrincipalEigenpair {
    pub fn new(lambda: C64, w: DVector<C64>) -> Self {
        Self { lambda, w }
    }

    /// Real eigenpair from plain slices.
    pub fn real(lambda: f64, w: &[f64]) -> Self {
        Self {
            lambda: C64::new(lambda, 0.0),
            w: DVector::from_iterator(w.len(), w.iter().map(|&v| C64::new(v, 0.0))),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn is_real(&self) -> bool {
        self.lambda.im == 0.0 && self.w.iter().all(|c| c.im == 0.0)
    }

    /// `wᵀx` (no conjugation).
    #[inline]
    pub fn project(&self, x: &[f64]) -> C64 {
        self.w.iter().zip(x).map(|(w, v)| w * v).sum()
    }

    /// `(λ, c·w)`.
    pub fn scaled(&self, c: C64) -> Self {
        Self {
            lambda: self.lambda,
            w: &self.w * c,
        }
    }

    /// The pair of the reversed field: `(-λ, w)`.
    pub fn negated(&self) -> Self {
        Self {
            lambda: -self.lambda,
            w: self.w.clone(),
        }
    }

    pub fn residual(&self, a: &DMatrix<f64>) -> f64 {
        linalg::left_residual(a, self.lambda, &self.w)
    }
}

/// Left eigenpairs of `A`, one per eigenvalue with multiplicity.
///
/// Vectors are canonically scaled (unit norm, leading component real positive).
/// Ordered by real part descending; conjugate pairs are adjacent.
pub fn left_eigenpairs(a: &DMatrix<f64>) -> Result<Vec<PrincipalEigenpair>> {
    if !a.is_square() {
        return Err(Error::InvalidInput(format!("matrix must be square, got {}x{}", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    Ok(linalg::left_eigen_strict(a)?
        .into_iter()
        .map(|(lambda, w)| PrincipalEigenpair { lambda, w })
        .collect())
}

/// Eigenvalues of `A`, sorted like [`left_eigenpairs`].
pub fn spectrum(a: &DMatrix<f64>) -> Vec<C64> {
    linalg::eigenvalues(a)
}

/// The pair whose eigenvalue is closest to `target`.
pub fn nearest_pair(pairs: &[PrincipalEigenpair], target: C64) -> Option<&PrincipalEigenpair> {
    pairs.iter().min_by(|a, b| {
        (a.lambda - target)
            .norm()
            .partial_cmp(&(b.lambda - target).norm())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Sufficient condition for the infinite-horizon path integral to converge:
/// `-Re(λ) + 2 Re(λ_max) < 0`, `λ_max` the eigenvalue closest to the imaginary axis.
pub fn spectral_condition(lambda: C64, spectrum: &[C64]) -> Result<bool> {
    if let Some(bad) = spectrum.iter().find(|l| !(l.re < 0.0)) {
        return Err(Error::NotHurwitz { eigenvalue: *bad });
    }
    let re_max = spectrum
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(-lambda.re + 2.0 * re_max < 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquilibriumKind {
    Stable,
    AntiStable,
    Saddle,
    NonHyperbolic,
}

impl std::fmt::Display for EquilibriumKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Stable => "stable",
            Self::AntiStable => "anti_stable",
            Self::Saddle => "saddle",
            Self::NonHyperbolic => "non_hyperbolic",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumClass {
    pub kind: EquilibriumKind,
    /// `min |Re(λ_i)|`.
    pub margin: f64,
}

pub fn classify_equilibrium(a: &DMatrix<f64>) -> EquilibriumClass {
    classify_spectrum(&spectrum(a))
}

pub fn classify_spectrum(spec: &[C64]) -> EquilibriumClass {
    let margin = spec.iter().map(|l| l.re.abs()).fold(f64::INFINITY, f64::min);
    let kind = if !(margin >= HYPERBOLIC_MARGIN) {
        EquilibriumKind::NonHyperbolic
    } else if spec.iter().all(|l| l.re < -HYPERBOLIC_MARGIN) {
        EquilibriumKind::Stable
    } else if spec.iter().all(|l| l.re > HYPERBOLIC_MARGIN) {
        EquilibriumKind::AntiStable
    } else {
        EquilibriumKind::Saddle
    };
    EquilibriumClass { kind, margin }
}
