//! Run configuration: file formats, command-line overrides and validation.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use koopman_core::cases::{self, CaseStudy};
use koopman_core::dynamics::{IntegratorSettings, VectorField};
use koopman_core::path_integral::{Axis, GridSpec, PathIntegralSettings};
use koopman_core::pipeline::{ControlConfig, EdmdConfig};
use koopman_core::transform::TransformParams;
use koopman_core::C64;
use serde::{Deserialize, Serialize};

use crate::expr::Expr;

/// A failure that maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub type ConfigResult<T> = Result<T, ConfigError>;

fn bad<T>(msg: impl Into<String>) -> ConfigResult<T> {
    Err(ConfigError(msg.into()))
}

/// A shipped case study by name, or a field given as one expression per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemSpec {
    Named(String),
    External {
        #[serde(default)]
        name: Option<String>,
        equations: Vec<String>,
    },
}

impl Default for SystemSpec {
    fn default() -> Self {
        Self::Named("example-b".into())
    }
}

impl SystemSpec {
    pub fn load(&self) -> ConfigResult<CaseStudy> {
        match self {
            Self::Named(name) => cases::by_name(name).map_err(|e| ConfigError(format!("system: {e}"))),
            Self::External { name, equations } => {
                let dim = equations.len();
                if !(2..=4).contains(&dim) {
                    return bad(format!("system.equations: need 2 to 4 components, got {dim}"));
                }
                let exprs = equations
                    .iter()
                    .enumerate()
                    .map(|(i, src)| {
                        Expr::parse(src, dim).map_err(|e| ConfigError(format!("system.equations[{i}] `{src}`: {e}")))
                    })
                    .collect::<ConfigResult<Vec<Expr>>>()?;
                let exprs = Arc::new(exprs);
                let field = VectorField::new(dim, move |x, out| {
                    for (o, e) in out.iter_mut().zip(exprs.iter()) {
                        *o = e.eval(x);
                    }
                });
                Ok(CaseStudy {
                    name: name.clone().unwrap_or_else(|| "external".into()),
                    field,
                    analytic_eigenpairs: Vec::new(),
                    analytic_controller: None,
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum MethodKind {
    Infinite,
    FiniteEdmd,
    FiniteTransform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigenSelect {
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

impl EigenSelect {
    pub fn target(&self) -> C64 {
        C64::new(self.re, self.im)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub t_max: f64,
    pub norm_cap: f64,
    /// Trailing window and increment threshold of the infinite-horizon stop rule.
    pub window: f64,
    pub converge_tol: f64,
    /// Skip the spectral-condition precondition of the infinite horizon.
    pub force: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        let i = IntegratorSettings::default();
        let p = PathIntegralSettings::default();
        Self {
            rel_tol: i.rel_tol,
            abs_tol: i.abs_tol,
            t_max: p.t_max,
            norm_cap: i.norm_cap,
            window: p.window,
            converge_tol: p.converge_tol,
            force: p.force,
        }
    }
}

impl IntegratorConfig {
    pub fn integrator(&self) -> IntegratorSettings {
        IntegratorSettings {
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            norm_cap: self.norm_cap,
            ..IntegratorSettings::default()
        }
    }

    pub fn path_integral(&self) -> PathIntegralSettings {
        PathIntegralSettings {
            integrator: self.integrator(),
            t_max: self.t_max,
            window: self.window,
            converge_tol: self.converge_tol,
            force: self.force,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub path: PathBuf,
    #[serde(default = "OutputConfig::csv")]
    pub format: String,
}

impl OutputConfig {
    fn csv() -> String {
        "csv".into()
    }
}

/// The control command's extra settings on top of [`ControlConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    /// `lo:hi:count` for the controller abscissae.
    #[serde(default = "ControlSection::default_x1")]
    pub x1: String,
    #[serde(flatten)]
    pub settings: ControlConfig,
}

impl ControlSection {
    fn default_x1() -> String {
        "-2:2:81".into()
    }
}

impl Default for ControlSection {
    fn default() -> Self {
        Self { x1: Self::default_x1(), settings: ControlConfig::default() }
    }
}

/// Everything a run needs. Sections that do not apply to `method` must be absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub system: SystemSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<MethodKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigen_select: Option<EigenSelect>,
    /// Comma-separated `lo:hi:count` per axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edmd: Option<EdmdConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<TransformParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlSection>,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputConfig>,
}

/// A sidecar written by a previous run; its `config` replays the run.
#[derive(Deserialize)]
struct Sidecar {
    config: RunConfig,
}

impl RunConfig {
    /// Reads TOML (`.toml`) or JSON (anything else). A JSON sidecar from an
    /// earlier run is accepted and its recorded configuration used.
    pub fn from_file(path: &Path) -> ConfigResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let is_toml = path.extension().is_some_and(|e| e == "toml");
        Self::from_text(&text, is_toml).map_err(|ConfigError(m)| ConfigError(format!("{}: {m}", path.display())))
    }

    pub fn from_text(text: &str, is_toml: bool) -> ConfigResult<Self> {
        if is_toml {
            return toml::from_str(text).map_err(|e| ConfigError(e.to_string()));
        }
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        if value.get("config").is_some() && value.get("config_sha256").is_some() {
            let sidecar: Sidecar = serde_json::from_value(value).map_err(|e| ConfigError(format!("sidecar: {e}")))?;
            return Ok(sidecar.config);
        }
        serde_json::from_value(value).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn method(&self) -> ConfigResult<MethodKind> {
        self.method.ok_or_else(|| ConfigError("method: required (infinite, finite_edmd or finite_transform)".into()))
    }

    pub fn target(&self) -> ConfigResult<C64> {
        self.eigen_select
            .map(|e| e.target())
            .ok_or_else(|| ConfigError("eigen_select: required (target eigenvalue, e.g. --lambda 2.5)".into()))
    }

    pub fn grid_spec(&self, dim: usize) -> ConfigResult<GridSpec> {
        let grid: GridSpec = match &self.grid {
            Some(s) => s.parse().map_err(|e| ConfigError(format!("grid `{s}`: {e}")))?,
            None => GridSpec::square(dim, -2.0, 2.0, 41),
        };
        if grid.dim() != dim {
            return bad(format!("grid: {} axes given for a {dim}-dimensional system", grid.dim()));
        }
        Ok(grid)
    }

    pub fn control_x1(&self) -> ConfigResult<Vec<f64>> {
        let section = self.control.clone().unwrap_or_default();
        let axis: Axis = section.x1.parse().map_err(|e| ConfigError(format!("control.x1 `{}`: {e}", section.x1)))?;
        Ok(axis.values())
    }

    /// Fills in the section the method needs and rejects sections it ignores.
    pub fn resolve_for_eigfun(&mut self) -> ConfigResult<()> {
        let method = self.method()?;
        self.target()?;
        if self.control.is_some() {
            return bad("control: section only applies to the control command");
        }
        match method {
            MethodKind::Infinite => {
                reject(self.edmd.is_some(), "edmd", method)?;
                reject(self.transform.is_some(), "transform", method)?;
            }
            MethodKind::FiniteEdmd => {
                reject(self.transform.is_some(), "transform", method)?;
                self.edmd.get_or_insert_with(EdmdConfig::default);
            }
            MethodKind::FiniteTransform => {
                reject(self.edmd.is_some(), "edmd", method)?;
                let params = *self.transform.get_or_insert_with(TransformParams::default);
                params.validate().map_err(|e| ConfigError(format!("transform: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn resolve_for_control(&mut self) -> ConfigResult<()> {
        if self.method.is_some_and(|m| m != MethodKind::FiniteTransform) {
            return bad("method: the control command always uses finite_transform");
        }
        if self.edmd.is_some() {
            return bad("edmd: section does not apply to the control command");
        }
        self.method = Some(MethodKind::FiniteTransform);
        let mut section = self.control.take().unwrap_or_default();
        // A top-level [transform] section takes precedence.
        if let Some(t) = self.transform.take() {
            section.settings.transform = t;
        }
        section
            .settings
            .transform
            .validate()
            .map_err(|e| ConfigError(format!("transform: {e}")))?;
        self.control = Some(section);
        self.control_x1()?;
        Ok(())
    }

    pub fn resolve_for_edmd_fit(&mut self) -> ConfigResult<()> {
        if self.method.is_some_and(|m| m != MethodKind::FiniteEdmd) {
            return bad("method: the edmd-fit command always uses finite_edmd");
        }
        if self.transform.is_some() || self.control.is_some() {
            return bad("transform/control: sections do not apply to the edmd-fit command");
        }
        self.method = Some(MethodKind::FiniteEdmd);
        self.edmd.get_or_insert_with(EdmdConfig::default);
        Ok(())
    }
}

fn reject(present: bool, section: &str, method: MethodKind) -> ConfigResult<()> {
    if present {
        bad(format!("{section}: section given but method is {}", method_name(method)))
    } else {
        Ok(())
    }
}

pub fn method_name(m: MethodKind) -> &'static str {
    match m {
        MethodKind::Infinite => "infinite",
        MethodKind::FiniteEdmd => "finite_edmd",
        MethodKind::FiniteTransform => "finite_transform",
    }
}
