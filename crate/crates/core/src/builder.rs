//! Greedy construction of discretised ε-approximate mild solutions and their
//! audit.
//!
//! At node `t_k` every path holds a state `Y_p(t_k) ∈ K`. One control `u_k`
//! is chosen for all paths by minimising the pooled λ=0 residual over the
//! control grid; each path then draws `ζ_p` from the one-step law frozen at
//! its own state, and `Y_p(t_{k+1}) = η_p` is the `K`-valued correction.
//! The correction `q_p = η_p - ζ_p` is absorbed into the state and carried
//! by the semigroup from then on.

use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::constraint::ConstraintSet;
use crate::error::{Error, Result};
use crate::model::{CoefficientModel, ControlSet};
use crate::one_step::one_step_law;
use crate::rng::{lane, RngStream};
use crate::spectral::SpectralSpace;
use crate::tangency::{residual_from_samples, select_eta, ResidualOptions, TangencyResidual};
use crate::tolerances;
use crate::{Matrix, Vector};

/// Steps start at `ε/8` and are halved on failure down to `ε/64`.
pub const INITIAL_STEP_DIVISOR: f64 = 8.0;
pub const MIN_STEP_DIVISOR: f64 = 64.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BuilderOptions {
    pub residual: ResidualOptions,
}

impl Default for BuilderOptions {
    fn default() -> Self {
        BuilderOptions {
            residual: ResidualOptions::balanced(),
        }
    }
}

/// Offsets `θ(s) = s - origin` of one correction, sampled at the nodes after
/// the step it was made in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThetaTrack {
    pub origin: f64,
    pub samples: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct ApproxMildSolution {
    pub epsilon: f64,
    pub times: Vec<f64>,
    pub deltas: Vec<f64>,
    pub controls: Vec<Vector>,
    /// `states[k]` is `paths × n`: row `p` is `Y_p(t_k)`.
    pub states: Vec<Matrix>,
    /// `corrections[k]` is `paths × n`: row `p` is `q_p` of step `k`.
    pub corrections: Vec<Matrix>,
    /// `E[q] / √δ_k`.
    pub phi_record: Vec<Vector>,
    /// `E|q - E q|² / δ_k`.
    pub psi_energy: Vec<f64>,
    /// `E|q|²`.
    pub mean_corr_sq: Vec<f64>,
    /// λ=0 residual total of the chosen control on the step's samples.
    pub residual_total: Vec<f64>,
    /// `E|Y(t_k) - Y(t_k + δ_k/2)|²` from the half-step law.
    pub midstep_msd: Vec<f64>,
    pub theta: Vec<ThetaTrack>,
    pub constraint: ConstraintSet,
}

impl ApproxMildSolution {
    pub fn steps(&self) -> usize {
        self.deltas.len()
    }

    pub fn paths(&self) -> usize {
        self.states.first().map_or(0, |s| s.nrows())
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("times is never empty")
    }

    /// `σ(s)`: the last node at or before `s`.
    pub fn sigma(&self, s: f64) -> f64 {
        let idx = self.times.partition_point(|t| *t <= s);
        self.times[idx.saturating_sub(1)]
    }

    /// `max_k E|Y(t_k)|²`.
    pub fn second_moment_sup(&self) -> f64 {
        self.states
            .iter()
            .map(|m| m.row_iter().map(|r| r.norm_squared()).sum::<f64>() / m.nrows() as f64)
            .fold(0.0, f64::max)
    }

    /// CSV with columns `step, time, delta, u_1..u_d, phi_norm_sq, psi_energy, mean_corr_sq`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let d = self.controls.first().map_or(0, |u| u.len());
        let mut header = vec!["step".to_string(), "time".into(), "delta".into()];
        header.extend((1..=d).map(|k| format!("u_{k}")));
        header.extend(["phi_norm_sq".into(), "psi_energy".into(), "mean_corr_sq".into()]);
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.steps() {
            let mut row = vec![k.to_string(), self.times[k].to_string(), self.deltas[k].to_string()];
            row.extend(self.controls[k].iter().map(|v| v.to_string()));
            row.push(self.phi_record[k].norm_squared().to_string());
            row.push(self.psi_energy[k].to_string());
            row.push(self.mean_corr_sq[k].to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn rows(m: &Matrix) -> Vec<Vector> {
    m.row_iter().map(|r| r.transpose()).collect()
}

fn stack(rows: &[Vector], n: usize) -> Matrix {
    Matrix::from_fn(rows.len(), n, |i, j| rows[i][j])
}

/// `ζ_p` for every path at control `u`, row `p` of `z` driving path `p`.
fn draw(space: &SpectralSpace, model: &CoefficientModel, ys: &[Vector], u: &Vector, h: f64, z: &Matrix) -> Result<Vec<Vector>> {
    ys.par_iter()
        .enumerate()
        .map(|(p, y)| {
            let law = one_step_law(space, model, y, u, h)?;
            Ok(&law.mean + law.factor() * z.row(p).transpose())
        })
        .collect()
}

struct StepChoice {
    residual: TangencyResidual,
    zeta: Vec<Vector>,
    eta: Vec<Vector>,
}

#[allow(clippy::too_many_arguments)]
fn best_control(
    space: &SpectralSpace,
    model: &CoefficientModel,
    k: &ConstraintSet,
    ys: &[Vector],
    grid: &[Vector],
    h: f64,
    z: &Matrix,
    options: &BuilderOptions,
) -> Result<StepChoice> {
    let mut best: Option<StepChoice> = None;
    for u in grid {
        let zeta = draw(space, model, ys, u, h, z)?;
        let corrected = select_eta(k, zeta, h, 0.0, &options.residual);
        let residual = residual_from_samples(&corrected, h, 0.0, u);
        let better = match &best {
            None => true,
            Some(b) => match (residual.flagged, b.residual.flagged) {
                (false, true) => true,
                (true, false) => false,
                _ => residual.total < b.residual.total,
            },
        };
        if better {
            best = Some(StepChoice {
                residual,
                zeta: corrected.zeta,
                eta: corrected.eta,
            });
        }
    }
    Ok(best.expect("control grid is never empty"))
}

/// Builds an ε-approximate mild solution on `[0, horizon]` with `paths`
/// sample paths.
///
/// Fails with [`Error::QuasiTangencyViolated`] at the first node where the
/// pooled residual stays above `ε/8` down to the step `ε/64`.
#[allow(clippy::too_many_arguments)]
pub fn build_approx_solution(
    space: &SpectralSpace,
    model: &CoefficientModel,
    k: &ConstraintSet,
    xi: &Vector,
    epsilon: f64,
    horizon: f64,
    control_set: &ControlSet,
    paths: usize,
    seed: u64,
    options: &BuilderOptions,
) -> Result<ApproxMildSolution> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::invalid(format!("horizon must be > 0, got {horizon}")));
    }
    if paths == 0 {
        return Err(Error::invalid("at least one path is required"));
    }
    if k.dim() != space.dim() || xi.len() != space.dim() {
        return Err(Error::invalid("state, constraint and space dimensions disagree"));
    }
    if control_set.dim() != space.control_dim() {
        return Err(Error::invalid("control set and space control dimensions disagree"));
    }
    let start = if k.contains(xi) {
        xi.clone()
    } else {
        let d = k.distance(xi)?;
        if d > tolerances::PROJECTION {
            return Err(Error::OutsideConstraint { distance: d });
        }
        warn!("initial state is {d:e} outside K; projecting");
        k.project(xi)?.point
    };

    let n = space.dim();
    let threshold = epsilon / INITIAL_STEP_DIVISOR;
    let min_step = epsilon / MIN_STEP_DIVISOR;
    let grid = control_set.control_grid();
    let base = RngStream::new(seed).child(lane::BUILDER);

    let mut sol = ApproxMildSolution {
        epsilon,
        times: vec![0.0],
        deltas: Vec::new(),
        controls: Vec::new(),
        states: vec![stack(&vec![start; paths], n)],
        corrections: Vec::new(),
        phi_record: Vec::new(),
        psi_energy: Vec::new(),
        mean_corr_sq: Vec::new(),
        residual_total: Vec::new(),
        midstep_msd: Vec::new(),
        theta: Vec::new(),
        constraint: k.clone(),
    };

    let mut t = 0.0;
    let mut node = 0usize;
    while horizon - t > tolerances::GRID_DIVISIBILITY * horizon {
        let ys = rows(sol.states.last().expect("states is never empty"));
        let mut h = threshold.min(horizon - t);
        let mut attempt = 0u64;
        let choice = loop {
            let z = base.child(node as u64).child(attempt).normal_matrix(paths, n);
            let choice = best_control(space, model, k, &ys, &grid, h, &z, options)?;
            if !choice.residual.flagged && choice.residual.total <= threshold {
                break choice;
            }
            if h / 2.0 < min_step {
                if choice.residual.flagged {
                    return Err(Error::ProjectionNotConverged {
                        iterations: tolerances::PROJECTION_NEWTON_ITERS,
                        residual: choice.residual.total,
                    });
                }
                return Err(Error::QuasiTangencyViolated {
                    node,
                    time: t,
                    residual: choice.residual.total,
                    threshold,
                    delta: h,
                });
            }
            h /= 2.0;
            attempt += 1;
        };

        let u = choice.residual.control.clone();
        let q: Vec<Vector> = choice.eta.iter().zip(&choice.zeta).map(|(e, z)| e - z).collect();
        let mut mean = Vector::zeros(n);
        let mut sq = 0.0;
        for v in &q {
            mean += v;
            sq += v.norm_squared();
        }
        mean /= paths as f64;
        sq /= paths as f64;
        let fluct = sq - mean.norm_squared();

        let half: Vec<f64> = ys
            .par_iter()
            .map(|y| {
                let law = one_step_law(space, model, y, &u, h / 2.0)?;
                Ok((y - &law.mean).norm_squared() + law.covariance.trace())
            })
            .collect::<Result<_>>()?;
        let msd = half.iter().sum::<f64>() / paths as f64;

        let next = if horizon - (t + h) <= tolerances::GRID_DIVISIBILITY * horizon {
            horizon
        } else {
            t + h
        };
        sol.deltas.push(h);
        sol.controls.push(u);
        sol.states.push(stack(&choice.eta, n));
        sol.corrections.push(stack(&q, n));
        sol.phi_record.push(&mean / h.sqrt());
        sol.psi_energy.push(fluct.max(0.0) / h);
        sol.mean_corr_sq.push(sq);
        sol.residual_total.push(choice.residual.total);
        sol.midstep_msd.push(msd);
        sol.times.push(next);
        for track in &mut sol.theta {
            track.samples.push((next, next - track.origin));
        }
        sol.theta.push(ThetaTrack {
            origin: next,
            samples: vec![(next, 0.0)],
        });
        t = next;
        node += 1;
    }
    Ok(sol)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClauseResult {
    pub clause: &'static str,
    pub passed: bool,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`; negative when the clause fails.
    pub margin: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub passed: bool,
    pub epsilon: f64,
    pub clauses: Vec<ClauseResult>,
}

impl AuditReport {
    pub fn clause(&self, name: &str) -> Option<&ClauseResult> {
        self.clauses.iter().find(|c| c.clause == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("audit report serialises")
    }
}

fn clause(name: &'static str, lhs: f64, rhs: f64, detail: Option<String>) -> ClauseResult {
    ClauseResult {
        clause: name,
        passed: lhs <= rhs,
        lhs,
        rhs,
        margin: rhs - lhs,
        detail,
    }
}

/// Checks the delay bound (a), the drift budget (c), the noise budget (d)
/// and membership plus mid-step continuity (g).
pub fn audit_definition3(sol: &ApproxMildSolution) -> AuditReport {
    let eps = sol.epsilon;
    let span = sol.end() - sol.start();
    let budget = span * eps;

    let max_delta = sol.deltas.iter().copied().fold(0.0, f64::max);
    let a = clause("a", max_delta, eps, None);

    let drift: f64 = sol.deltas.iter().zip(&sol.phi_record).map(|(d, p)| d * p.norm_squared()).sum();
    let c = clause("c", drift, budget, None);

    let noise: f64 = sol.deltas.iter().zip(&sol.psi_energy).map(|(d, p)| d * p).sum();
    let d = clause("d", noise, budget, None);

    let mut worst = 0.0f64;
    let mut first_out: Option<(usize, usize, f64)> = None;
    for (node, m) in sol.states.iter().enumerate() {
        for (path, row) in m.row_iter().enumerate() {
            let dist = sol.constraint.distance(&row.transpose()).unwrap_or(f64::INFINITY);
            worst = worst.max(dist);
            if dist > tolerances::MEMBERSHIP && first_out.is_none() {
                first_out = Some((node, path, dist));
            }
        }
    }
    let msd = sol.midstep_msd.iter().copied().fold(0.0, f64::max);
    let mut g = clause("g", msd, eps, None);
    if let Some((node, path, dist)) = first_out {
        g.passed = false;
        g.detail = Some(format!("node {node} (path {path}) is {dist:e} outside K"));
    } else {
        g.detail = Some(format!("max node distance {worst:e}"));
    }

    let clauses = vec![a, c, d, g];
    AuditReport {
        passed: clauses.iter().all(|c| c.passed),
        epsilon: eps,
        clauses,
    }
}

/// `|θ(s) - θ(s')| ≤ |s - s'|` between consecutive samples of every track.
pub fn theta_nonexpansive_check(tracks: &[ThetaTrack]) -> bool {
    tracks.iter().all(|t| {
        t.samples
            .windows(2)
            .all(|w| (w[1].1 - w[0].1).abs() <= (w[1].0 - w[0].0).abs() * (1.0 + 1e-12) + 1e-15)
    })
}
