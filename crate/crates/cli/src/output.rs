//! CSV tables and JSON sidecars.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use koopman_core::path_integral::EigenfunctionSample;
use koopman_core::pipeline::ControlRow;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// 17 significant digits, enough to round-trip an `f64`.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    num(v.unwrap_or(f64::NAN))
}

fn create(path: &Path) -> std::io::Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    File::create(path)
}

/// One row per grid node; header `x1,..,xn,phi_re,phi_im,h_re,h_im,t_exit,status,err_bound`.
pub fn write_eigfun_csv(path: &Path, dim: usize, samples: &[EigenfunctionSample]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
    header.extend(["phi_re", "phi_im", "h_re", "h_im", "t_exit", "status", "err_bound"].map(String::from));
    w.write_record(&header)?;
    for s in samples {
        let mut row: Vec<String> = s.point.iter().map(|&v| num(v)).collect();
        row.extend([
            num(s.phi.re),
            num(s.phi.im),
            num(s.h.re),
            num(s.h.im),
            num(s.exit_time),
            s.status.to_string(),
            opt(s.error_bound),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Header `x1,gamma,u,u_analytic,abs_err,status`, or `x1,gamma,u,status`
/// without an analytic controller.
pub fn write_control_csv(path: &Path, rows: &[ControlRow], analytic: bool) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    if analytic {
        w.write_record(["x1", "gamma", "u", "u_analytic", "abs_err", "status"])?;
    } else {
        w.write_record(["x1", "gamma", "u", "status"])?;
    }
    for r in rows {
        let mut row = vec![num(r.x1), opt(r.gamma), opt(r.u)];
        if analytic {
            row.extend([opt(r.u_analytic), opt(r.abs_err)]);
        }
        row.push(r.status.clone());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn config_sha256(cfg: &RunConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("configuration serializes");
    Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Metadata written next to every result file.
#[derive(Serialize)]
pub struct Sidecar<'a, S: Serialize> {
    pub command: &'a str,
    pub config: &'a RunConfig,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub wall_time_s: f64,
    pub summary: S,
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    output.with_extension("json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")
}
