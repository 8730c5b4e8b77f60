//! Experiment orchestration: config in, artifacts and a verdict out.
//!
//! Artifacts are `<kind>_<seed>.csv`, `<kind>_<seed>.json` and the effective
//! `config.toml`. [`replay`] re-runs the stored config and compares every CSV
//! byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::builder::{audit_definition3, build_approx_solution, theta_nonexpansive_check, BuilderOptions};
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{Error, Result};
use crate::nagumo::{certify_boundary, galerkin_ladder};
use crate::tangency::{tangency_profile, write_profile_csv, ProfileOptions, ResidualOptions, Verdict};
use crate::viability::{closed_loop_viability, linear_equivalence_experiment, ViabilityOptions};

pub const CONFIG_FILE: &str = "config.toml";

/// Default tolerance on `sup E[d_K²]` for the viability experiment.
pub const VIABILITY_TOL: f64 = 1e-3;

/// Result of an experiment before anything touches the disk.
#[derive(Debug, Clone)]
pub struct Execution {
    pub kind: ExperimentKind,
    pub passed: bool,
    pub summary: String,
    /// `(file name, contents)`.
    pub files: Vec<(String, Vec<u8>)>,
}

impl Execution {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }

    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }
}

pub fn artifact_stem(config: &ExperimentConfig) -> String {
    format!("{}_{}", config.experiment.kind.as_str(), config.experiment.seed)
}

fn json_bytes(value: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("json serialises");
    s.push('\n');
    s.into_bytes()
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    write(&mut buf).expect("writing to memory cannot fail");
    buf
}

/// Runs the experiment described by `config` in memory.
pub fn execute(config: &ExperimentConfig) -> Result<Execution> {
    config.validate()?;
    let space = config.build_space()?;
    let model = config.build_model(&space)?;
    let k = config.build_constraint()?;
    let control = config.build_control()?;
    let e = &config.experiment;
    let stem = artifact_stem(config);
    let csv_name = format!("{stem}.csv");
    let json_name = format!("{stem}.json");
    if space.max_eigenvalue() > 0.0 {
        log::warn!("generator has a positive eigenvalue {}", space.max_eigenvalue());
    }
    let residual = ResidualOptions {
        eta: e.eta,
        ..ResidualOptions::default()
    };

    let (passed, summary, csv, report) = match e.kind {
        ExperimentKind::Tangency => {
            let xi = config.xi()?;
            let ladder = ExperimentConfig::require(&e.h_ladder, "h_ladder")?;
            let options = ProfileOptions {
                residual,
                refine: e.refine,
                tol_abs: e.tol_abs,
            };
            let profile = tangency_profile(&space, &model, &k, &xi, &ladder, e.lambda, &control, e.samples, e.seed, &options)?;
            let csv = csv_bytes(|b| write_profile_csv(b, &[&profile]));
            let passed = profile.verdict == Verdict::Tangent;
            let summary = format!("verdict {} (slope {:?})", profile.verdict.as_str(), profile.loglog_slope);
            (passed, summary, csv, json!({ "passed": passed, "profile": profile }))
        }
        ExperimentKind::Nagumo => {
            let cert = certify_boundary(&space, &model, &k, control.center(), e.nagumo_samples, e.seed)?;
            let n = space.dim();
            let csv = csv_bytes(|b| {
                use std::io::Write;
                let mut header = vec!["point".to_string()];
                header.extend((1..=n).map(|i| format!("x_{i}")));
                header.extend(["lhs_dn1", "dn2_norm", "pass_dn1", "pass_dn2"].map(String::from));
                writeln!(b, "{}", header.join(","))?;
                for (i, r) in cert.reports.iter().enumerate() {
                    let mut row = vec![i.to_string()];
                    row.extend(r.point.iter().map(|v| v.to_string()));
                    row.extend([r.lhs_dn1.to_string(), r.dn2_norm.to_string(), r.pass_dn1.to_string(), r.pass_dn2.to_string()]);
                    writeln!(b, "{}", row.join(","))?;
                }
                Ok(())
            });
            let summary = format!(
                "certificate {} (worst dn1 {:e}, worst dn2 {:e})",
                if cert.passed { "passed" } else { "failed" },
                cert.worst_dn1_margin,
                cert.worst_dn2_norm
            );
            (cert.passed, summary, csv, serde_json::to_value(&cert).expect("serialises"))
        }
        ExperimentKind::Approx => {
            let xi = config.xi()?;
            let eps = ExperimentConfig::require(&e.epsilon, "epsilon")?;
            let horizon = ExperimentConfig::require(&e.horizon, "T")?;
            let options = BuilderOptions { residual };
            match build_approx_solution(&space, &model, &k, &xi, eps, horizon, &control, e.paths, e.seed, &options) {
                Ok(sol) => {
                    let audit = audit_definition3(&sol);
                    let theta = theta_nonexpansive_check(&sol.theta);
                    let passed = audit.passed && theta;
                    let csv = csv_bytes(|b| sol.write_csv(b));
                    let summary = format!("{} steps, audit {}", sol.steps(), if passed { "passed" } else { "failed" });
                    let report = json!({
                        "passed": passed,
                        "audit": audit,
                        "theta_nonexpansive": theta,
                        "steps": sol.steps(),
                        "second_moment_sup": sol.second_moment_sup(),
                    });
                    (passed, summary, csv, report)
                }
                Err(Error::QuasiTangencyViolated {
                    node,
                    time,
                    residual,
                    threshold,
                    delta,
                }) => {
                    let summary = format!("quasi-tangency violated at node {node}: residual {residual:e} > {threshold:e}");
                    let mut csv = b"node,time,delta,residual,threshold\n".to_vec();
                    csv.extend(format!("{node},{time},{delta},{residual},{threshold}\n").into_bytes());
                    let report = json!({
                        "passed": false,
                        "failure": {
                            "clause": "quasi-tangency",
                            "node": node,
                            "time": time,
                            "delta": delta,
                            "residual": residual,
                            "threshold": threshold,
                        }
                    });
                    (false, summary, csv, report)
                }
                Err(other) => return Err(other),
            }
        }
        ExperimentKind::Viability => {
            let xi = config.xi()?;
            let horizon = ExperimentConfig::require(&e.horizon, "T")?;
            let dt = ExperimentConfig::require(&e.dt, "dt")?;
            let options = ViabilityOptions {
                feedback: e.feedback,
                residual,
                feedback_samples: e.feedback_samples,
            };
            let r = closed_loop_viability(&space, &model, &k, &xi, horizon, dt, &control, e.paths, e.seed, &options)?;
            let tol = e.tol.unwrap_or(VIABILITY_TOL);
            let passed = r.sup_value <= tol;
            let csv = csv_bytes(|b| r.write_csv(b));
            let summary = format!("sup E[d_K^2] = {:e} (tol {tol:e})", r.sup_value);
            let report = json!({
                "passed": passed,
                "sup_value": r.sup_value,
                "sup_std_err": r.sup_std_err(),
                "sup_time": r.times[r.sup_index],
                "strategy": r.strategy,
                "paths": r.paths,
                "tol": tol,
            });
            (passed, summary, csv, report)
        }
        ExperimentKind::Galerkin => {
            let xi = config.xi()?;
            let h = ExperimentConfig::require(&e.h, "h")?;
            let ls = ExperimentConfig::require(&e.l_values, "l_values")?;
            let ms = ExperimentConfig::require(&e.m_values, "m_values")?;
            if k.variant() != "ball" {
                return Err(Error::config("galerkin experiments run on constraint variant 'ball' (unit ball)"));
            }
            let table = galerkin_ladder(&space, &model, &ls, &ms, &xi, h, e.lambda, &control, e.samples, e.seed, &residual)?;
            let over = table.exceedances(3.0).len();
            let passed = over == 0;
            let csv = csv_bytes(|b| table.write_csv(b));
            let summary = format!("full total {:e}, {over} cells above it by more than 3 std err", table.full_total);
            let report = json!({
                "passed": passed,
                "full_total": table.full_total,
                "full_std_err": table.full_std_err,
                "exceedances": over,
                "cells": table.cells,
            });
            (passed, summary, csv, report)
        }
        ExperimentKind::LinearEquiv => {
            let xi = config.xi()?;
            let horizon = ExperimentConfig::require(&e.horizon, "T")?;
            let ladder = ExperimentConfig::require(&e.dt_ladder, "dt_ladder")?;
            let options = ViabilityOptions {
                feedback: e.feedback,
                residual,
                feedback_samples: e.feedback_samples,
            };
            let r = linear_equivalence_experiment(&space, &model, &k, &xi, horizon, &ladder, &control, e.paths, e.seed, e.tol, &options)?;
            let csv = csv_bytes(|b| r.write_csv(b));
            let summary = format!(
                "nonincreasing {}, finest {:e} vs tol {:e}",
                r.nonincreasing,
                r.entries.last().map_or(0.0, |x| x.sup_value),
                r.tol
            );
            (r.passed, summary, csv, serde_json::to_value(&r).expect("serialises"))
        }
    };

    let mut files = Vec::new();
    let formats = &config.output.formats;
    if formats.iter().any(|f| f == "csv") {
        files.push((csv_name, csv));
    }
    if formats.iter().any(|f| f == "json") {
        files.push((json_name, json_bytes(&report)));
    }
    files.push((CONFIG_FILE.to_string(), config.to_toml_string().into_bytes()));
    Ok(Execution {
        kind: e.kind,
        passed,
        summary,
        files,
    })
}

/// Runs `config` and writes its artifacts into `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<(Execution, Vec<PathBuf>)> {
    let execution = execute(config)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (name, bytes) in &execution.files {
        let path = out_dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok((execution, written))
}

/// First differing cell between two CSV texts as `(row, column, expected, found)`,
/// rows and columns counted from 1 with the header as row 1.
pub fn first_difference(expected: &str, found: &str) -> Option<(usize, usize, String, String)> {
    let mut a = expected.lines();
    let mut b = found.lines();
    let mut row = 0;
    loop {
        row += 1;
        match (a.next(), b.next()) {
            (None, None) => return None,
            (Some(x), None) => return Some((row, 1, x.to_string(), String::new())),
            (None, Some(y)) => return Some((row, 1, String::new(), y.to_string())),
            (Some(x), Some(y)) if x != y => {
                let xs: Vec<&str> = x.split(',').collect();
                let ys: Vec<&str> = y.split(',').collect();
                for col in 0..xs.len().max(ys.len()) {
                    let (p, q) = (xs.get(col).copied().unwrap_or(""), ys.get(col).copied().unwrap_or(""));
                    if p != q {
                        return Some((row, col + 1, p.to_string(), q.to_string()));
                    }
                }
                return Some((row, 1, x.to_string(), y.to_string()));
            }
            _ => {}
        }
    }
}

/// Re-runs the config stored in `dir` and checks that every CSV it produces
/// matches the stored file byte for byte.
pub fn replay(dir: &Path) -> Result<Execution> {
    let config_path = dir.join(CONFIG_FILE);
    if !config_path.is_file() {
        return Err(Error::config(format!("no {CONFIG_FILE} in {}", dir.display())));
    }
    let config = ExperimentConfig::from_path(&config_path)?;
    let execution = execute(&config)?;
    for (name, bytes) in execution.files.iter().filter(|(n, _)| n.ends_with(".csv")) {
        let stored_path = dir.join(name);
        let stored = fs::read(&stored_path).map_err(|e| Error::io(&stored_path, e))?;
        if &stored != bytes {
            let (row, column, expected, found) = first_difference(
                &String::from_utf8_lossy(&stored),
                &String::from_utf8_lossy(bytes),
            )
            .unwrap_or((0, 0, String::new(), String::new()));
            return Err(Error::ReplayMismatch {
                file: name.clone(),
                row,
                column,
                expected,
                found,
            });
        }
    }
    Ok(execution)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difference_locates_cells() {
        assert_eq!(first_difference("a,b\n1,2\n", "a,b\n1,2\n"), None);
        assert_eq!(
            first_difference("a,b\n1,2\n", "a,b\n1,3\n"),
            Some((2, 2, "2".into(), "3".into()))
        );
        assert_eq!(first_difference("a\n1\n", "a\n"), Some((2, 1, "1".into(), String::new())));
    }
}
