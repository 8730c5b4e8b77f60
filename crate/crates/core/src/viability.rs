//! Monte Carlo viability experiments on the true (non-frozen) dynamics.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraint::ConstraintSet;
use crate::error::{Error, Result};
use crate::model::{CoefficientModel, ControlSet, Family};
use crate::one_step::{check_blow_up, grid_steps, mild_step};
use crate::rng::{lane, RngStream};
use crate::spectral::SpectralSpace;
use crate::tangency::{is_singleton, minimize_residual, ResidualOptions};
use crate::Vector;

/// Where the feedback control is evaluated at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackMode {
    /// One control per step from the residual minimiser at the ensemble mean.
    #[default]
    EnsembleMean,
    /// A separate minimisation at every path's state.
    PerPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViabilityOptions {
    pub feedback: FeedbackMode,
    pub residual: ResidualOptions,
    /// Samples per feedback minimisation.
    pub feedback_samples: usize,
}

impl Default for ViabilityOptions {
    fn default() -> Self {
        ViabilityOptions {
            feedback: FeedbackMode::EnsembleMean,
            residual: ResidualOptions::balanced(),
            feedback_samples: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViabilityReport {
    pub times: Vec<f64>,
    pub mean_sq_distance: Vec<f64>,
    pub std_err: Vec<f64>,
    pub sup_value: f64,
    /// Index of the time attaining `sup_value`.
    pub sup_index: usize,
    pub strategy: String,
    pub paths: usize,
}

impl ViabilityReport {
    pub fn sup_std_err(&self) -> f64 {
        self.std_err[self.sup_index]
    }

    /// Supremum over every `stride`-th time.
    pub fn sup_on_subgrid(&self, stride: usize) -> f64 {
        self.mean_sq_distance.iter().step_by(stride.max(1)).copied().fold(0.0, f64::max)
    }

    /// CSV with columns `time, mean_sq_dist, std_err`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "time,mean_sq_dist,std_err")?;
        for i in 0..self.times.len() {
            writeln!(out, "{},{},{}", self.times[i], self.mean_sq_distance[i], self.std_err[i])?;
        }
        Ok(())
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn sq_distances(k: &ConstraintSet, xs: &[Vector]) -> Result<Vec<f64>> {
    xs.par_iter().map(|x| k.distance(x).map(|d| d * d)).collect()
}

/// Simulates `paths` trajectories of the true dynamics on `[0, horizon]`
/// under greedy tangency feedback and reports `E[d_K²(X(t))]` per node.
///
/// Path `p` at step `k` uses the normals of
/// `RngStream::new(seed).child(DYNAMICS).child(p).child(k)`; feedback
/// minimisations use the `FEEDBACK` lane.
#[allow(clippy::too_many_arguments)]
pub fn closed_loop_viability(
    space: &SpectralSpace,
    model: &CoefficientModel,
    k: &ConstraintSet,
    xi: &Vector,
    horizon: f64,
    dt: f64,
    control_set: &ControlSet,
    paths: usize,
    seed: u64,
    options: &ViabilityOptions,
) -> Result<ViabilityReport> {
    if paths == 0 {
        return Err(Error::invalid("at least one path is required"));
    }
    if dt > 0.05 * horizon * (1.0 + 1e-12) {
        return Err(Error::invalid(format!("dt = {dt} exceeds 0.05·T = {}", 0.05 * horizon)));
    }
    if xi.len() != space.dim() || k.dim() != space.dim() {
        return Err(Error::invalid("state, constraint and space dimensions disagree"));
    }
    if control_set.dim() != space.control_dim() {
        return Err(Error::invalid("control set and space control dimensions disagree"));
    }
    if !k.contains(xi) {
        return Err(Error::OutsideConstraint { distance: k.distance(xi)? });
    }
    let steps = grid_steps(horizon, dt)?;
    let n = space.dim();
    let dynamics = RngStream::new(seed).child(lane::DYNAMICS);
    let feedback = RngStream::new(seed).child(lane::FEEDBACK);
    let fixed = is_singleton(control_set).then(|| control_set.center().clone());
    let choose = |x: &Vector, stream: RngStream| -> Result<Vector> {
        match &fixed {
            Some(u) => Ok(u.clone()),
            None => minimize_residual(
                space,
                model,
                k,
                x,
                dt,
                0.0,
                control_set,
                options.feedback_samples,
                stream,
                &options.residual,
                false,
            )
            .map(|r| r.control),
        }
    };

    let mut xs = vec![xi.clone(); paths];
    let mut times = vec![0.0];
    let (m0, s0) = mean_and_se(&sq_distances(k, &xs)?);
    let mut mean_sq = vec![m0];
    let mut std_err = vec![s0];
    for step in 0..steps {
        let controls: Vec<Vector> = match options.feedback {
            FeedbackMode::EnsembleMean => {
                let mut rep = Vector::zeros(n);
                for x in &xs {
                    rep += x;
                }
                rep /= paths as f64;
                vec![choose(&rep, feedback.child(step as u64))?; paths]
            }
            FeedbackMode::PerPath => xs
                .par_iter()
                .enumerate()
                .map(|(p, x)| choose(x, feedback.child(step as u64).child(p as u64)))
                .collect::<Result<_>>()?,
        };
        xs = xs
            .par_iter()
            .zip(controls.par_iter())
            .enumerate()
            .map(|(p, (x, u))| {
                let z = Vector::from_vec(dynamics.child(p as u64).child(step as u64).normals(n));
                let next = mild_step(space, model, x, u, dt, &z)?;
                check_blow_up(step, &next)?;
                Ok(next)
            })
            .collect::<Result<_>>()?;
        let (m, s) = mean_and_se(&sq_distances(k, &xs)?);
        times.push((step + 1) as f64 * dt);
        mean_sq.push(m);
        std_err.push(s);
    }
    let (sup_index, sup_value) = mean_sq
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    Ok(ViabilityReport {
        times,
        mean_sq_distance: mean_sq,
        std_err,
        sup_value,
        sup_index,
        strategy: "tangency-greedy".into(),
        paths,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderEntry {
    pub dt: f64,
    pub sup_value: f64,
    pub sup_std_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearEquivalenceReport {
    pub entries: Vec<LadderEntry>,
    pub nonincreasing: bool,
    pub tol: f64,
    pub finest_within_tol: bool,
    pub passed: bool,
}

impl LinearEquivalenceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// CSV with columns `dt, sup_mean_sq_dist, std_err`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "dt,sup_mean_sq_dist,std_err")?;
        for e in &self.entries {
            writeln!(out, "{},{},{}", e.dt, e.sup_value, e.sup_std_err)?;
        }
        Ok(())
    }
}

/// `true` when each value exceeds its predecessor by at most three combined
/// standard errors.
pub fn nonincreasing_within(values: &[f64], std_errs: &[f64], sigmas: f64) -> bool {
    values
        .windows(2)
        .zip(std_errs.windows(2))
        .all(|(v, s)| v[1] <= v[0] + sigmas * (s[0] * s[0] + s[1] * s[1]).sqrt())
}

/// Closed-loop sup distance for each `dt` of a decreasing ladder on a linear
/// control system and a convex `K`. Passes when the sups are nonincreasing
/// within three standard errors and the finest one is at most `tol`
/// (default ten standard errors of the finest entry).
///
/// Ladder entry `i` runs on seed `RngStream::new(seed).child(i).key()`.
#[allow(clippy::too_many_arguments)]
pub fn linear_equivalence_experiment(
    space: &SpectralSpace,
    model: &CoefficientModel,
    k: &ConstraintSet,
    xi: &Vector,
    horizon: f64,
    dt_ladder: &[f64],
    control_set: &ControlSet,
    paths: usize,
    seed: u64,
    tol: Option<f64>,
    options: &ViabilityOptions,
) -> Result<LinearEquivalenceReport> {
    if !k.is_convex() {
        return Err(Error::invalid(format!("constraint set '{}' is not convex", k.variant())));
    }
    if !matches!(model.family(), Family::Linear(_)) {
        return Err(Error::invalid("linear-equivalence needs a model of the 'linear' family"));
    }
    if dt_ladder.is_empty() || dt_ladder.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::invalid("dt ladder must be non-empty and strictly decreasing"));
    }
    let entries = dt_ladder
        .iter()
        .enumerate()
        .map(|(i, &dt)| {
            let s = RngStream::new(seed).child(i as u64).key();
            let r = closed_loop_viability(space, model, k, xi, horizon, dt, control_set, paths, s, options)?;
            Ok(LadderEntry {
                dt,
                sup_value: r.sup_value,
                sup_std_err: r.sup_std_err(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = entries.iter().map(|e| e.sup_value).collect();
    let errs: Vec<f64> = entries.iter().map(|e| e.sup_std_err).collect();
    let nonincreasing = nonincreasing_within(&values, &errs, 3.0);
    let finest = entries.last().expect("ladder is non-empty");
    let tol = tol.unwrap_or(10.0 * finest.sup_std_err);
    let finest_within_tol = finest.sup_value <= tol;
    Ok(LinearEquivalenceReport {
        entries,
        nonincreasing,
        tol,
        finest_within_tol,
        passed: nonincreasing && finest_within_tol,
    })
}
