//! Vector fields, their linearization at the origin, and trajectory integration.
//!
//! Every system handled by this crate has its equilibrium at the origin. A
//! [`VectorField`] is split as `f(x) = A x + f_n(x)` with `A` the Jacobian at
//! the origin and `f_n` the purely nonlinear remainder.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

mod integrate;

pub(crate) use integrate::{integrate, outward_guard, StepControl, StopReason};
pub use integrate::{flow, flow_until, IntegratorSettings};

/// Central finite-difference step used when no analytic Jacobian is supplied.
pub const FD_STEP: f64 = 1e-6;

/// `|f(0)|` above which the origin is not accepted as an equilibrium.
pub const EQUILIBRIUM_TOL: f64 = 1e-6;

type FieldFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type JacobianFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// Autonomous vector field `x' = f(x)` on `R^dim`.
///
/// Cloning is cheap; the closures are shared and must be reentrant.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    eval: Arc<FieldFn>,
    jacobian: Option<Arc<JacobianFn>>,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("dim", &self.dim)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl VectorField {
    pub fn new<F>(dim: usize, eval: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        assert!(dim > 0, "vector field dimension must be positive");
        Self {
            dim,
            eval: Arc::new(eval),
            jacobian: None,
        }
    }

    pub fn with_jacobian<J>(mut self, jacobian: J) -> Self
    where
        J: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jacobian = Some(Arc::new(jacobian));
        self
    }

    /// The linear field `x ↦ M x`, with its Jacobian attached.
    pub fn linear(m: DMatrix<f64>) -> Self {
        assert!(m.is_square(), "linear field needs a square matrix");
        let dim = m.nrows();
        let jac = m.clone();
        Self::new(dim, move |x, out| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = (0..dim).map(|j| m[(i, j)] * x[j]).sum();
            }
        })
        .with_jacobian(move |_| jac.clone())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.eval)(x, out)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, &mut out);
        out
    }

    pub fn has_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    /// Analytic Jacobian at `x`, if one was supplied.
    pub fn analytic_jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        self.jacobian.as_ref().map(|j| j(x))
    }

    /// Central finite-difference Jacobian at `x` with step `step`.
    pub fn fd_jacobian(&self, x: &[f64], step: f64) -> DMatrix<f64> {
        let n = self.dim;
        let mut jac = DMatrix::zeros(n, n);
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for j in 0..n {
            xp[j] = x[j] + step;
            self.eval_into(&xp, &mut fp);
            xp[j] = x[j] - step;
            self.eval_into(&xp, &mut fm);
            xp[j] = x[j];
            for i in 0..n {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
            }
        }
        jac
    }

    /// Jacobian at `x`: analytic when available, finite differences otherwise.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        self.analytic_jacobian(x)
            .unwrap_or_else(|| self.fd_jacobian(x, FD_STEP))
    }

    /// The time-reversed field `x ↦ -f(x)`.
    pub fn reversed(&self) -> Self {
        let inner = self.eval.clone();
        let jacobian = self.jacobian.clone().map(|j| {
            Arc::new(move |x: &[f64]| -j(x)) as Arc<JacobianFn>
        });
        Self {
            dim: self.dim,
            eval: Arc::new(move |x, out| {
                inner(x, out);
                for o in out.iter_mut() {
                    *o = -*o;
                }
            }),
            jacobian,
        }
    }
}

/// Time reversal of `f`. An involution: `reverse(&reverse(&f))` evaluates like `f`.
pub fn reverse(f: &VectorField) -> VectorField {
    f.reversed()
}

/// Jacobian of `f` at the origin.
pub fn jacobian_at_origin(f: &VectorField) -> Result<DMatrix<f64>> {
    let zero = vec![0.0; f.dim()];
    let norm = f.eval(&zero).iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm <= EQUILIBRIUM_TOL) {
        return Err(Error::NonEquilibriumOrigin { norm });
    }
    Ok(f.jacobian(&zero))
}

/// Split of a field into its linearization at the origin and the nonlinear rest.
#[derive(Clone, Debug)]
pub struct LinearDecomposition {
    field: VectorField,
    a: DMatrix<f64>,
}

impl LinearDecomposition {
    pub fn field(&self) -> &VectorField {
        &self.field
    }

    /// Jacobian `A` at the origin.
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    /// `f_n(x) = f(x) - A x`.
    #[inline]
    pub fn nonlinear_part_into(&self, x: &[f64], out: &mut [f64]) {
        self.field.eval_into(x, out);
        let n = self.dim();
        for (i, o) in out.iter_mut().enumerate() {
            let mut ax = 0.0;
            for j in 0..n {
                ax += self.a[(i, j)] * x[j];
            }
            *o -= ax;
        }
    }

    pub fn nonlinear_part(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.nonlinear_part_into(x, &mut out);
        out
    }

    /// `A x`.
    pub fn linear_part(&self, x: &[f64]) -> Vec<f64> {
        (&self.a * DVector::from_column_slice(x)).as_slice().to_vec()
    }

    /// Decomposition of the reversed field, `-f = (-A) x + (-f_n)`.
    pub fn reversed(&self) -> Self {
        Self {
            field: self.field.reversed(),
            a: -&self.a,
        }
    }
}

pub fn decompose(f: &VectorField) -> Result<LinearDecomposition> {
    let a = jacobian_at_origin(f)?;
    Ok(LinearDecomposition {
        field: f.clone(),
        a,
    })
}

/// How an integration ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStatus {
    Completed,
    HitEvent,
    MaxTimeExceeded,
}

/// Sampled flow `s_t(x0)` at the integrator's accepted steps.
///
/// `times` are elapsed times, starting at 0 and strictly increasing, also for
/// flows integrated backward in time.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub exit_status: ExitStatus,
    pub exit_time: Option<f64>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory is never empty")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
