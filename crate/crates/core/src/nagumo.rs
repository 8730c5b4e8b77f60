//! First- and second-order boundary conditions for viability of smooth sets
//! and the Galerkin residual ladder on the unit ball.
//!
//! At a boundary point `x` of `K = {φ ≤ 0}` with control `u` fixed:
//!
//! ```text
//! dn1:  ⟨Dφ, Ax⟩ + ⟨Dφ, F(x)⟩ + ½ Σ_j ⟨D²φ G e_j, G e_j⟩ ≤ 0
//! dn2:  G(x)* Dφ(x) = 0
//! ```

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::constraint::ConstraintSet;
use crate::error::{Error, Result};
use crate::model::{CoefficientModel, ControlSet};
use crate::rng::{lane, RngStream};
use crate::spectral::SpectralSpace;
use crate::tangency::{minimize_residual, ResidualOptions};
use crate::tolerances;
use crate::Vector;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NagumoReport {
    pub point: Vec<f64>,
    pub lhs_dn1: f64,
    pub dn2_norm: f64,
    /// Scaled dn2 tolerance `1e-8 · |Dφ| · |G|_HS`.
    pub dn2_tol: f64,
    pub pass_dn1: bool,
    pub pass_dn2: bool,
}

impl NagumoReport {
    pub fn passed(&self) -> bool {
        self.pass_dn1 && self.pass_dn2
    }

    fn new(x: &Vector, lhs_dn1: f64, dn2_norm: f64, grad_norm: f64, g_norm: f64) -> Self {
        let dn2_tol = tolerances::DN2 * grad_norm * g_norm;
        NagumoReport {
            point: x.iter().copied().collect(),
            lhs_dn1,
            dn2_norm,
            dn2_tol,
            pass_dn1: lhs_dn1 <= tolerances::DN1,
            pass_dn2: dn2_norm <= dn2_tol,
        }
    }
}

fn check_dims(space: &SpectralSpace, model: &CoefficientModel, x: &Vector, u: &Vector) -> Result<()> {
    if x.len() != space.dim() || model.state_dim() != space.dim() {
        return Err(Error::invalid("point, model and space dimensions disagree"));
    }
    if u.len() != space.control_dim() {
        return Err(Error::invalid("control and space control dimensions disagree"));
    }
    Ok(())
}

/// Evaluates dn1/dn2 at `x` with `K` viewed as the level set of its
/// defining function (`½(|x-c|²-r²)` for a ball, `⟨a,x⟩-b` for a half-space).
pub fn check_smooth_point(
    space: &SpectralSpace,
    model: &CoefficientModel,
    k: &ConstraintSet,
    x: &Vector,
    u: &Vector,
) -> Result<NagumoReport> {
    check_dims(space, model, x, u)?;
    let phi = k.as_level_function();
    let value = phi.value(x);
    if value.abs() > tolerances::BOUNDARY {
        return Err(Error::OffBoundary { measured: value.abs() });
    }
    let grad = phi.gradient(x);
    let hess = phi.hessian(x);
    let f = model.eval_drift(x, u);
    let g = model.eval_noise(x, u);
    let g = g.matrix();
    let trace: f64 = (0..g.ncols())
        .map(|j| {
            let col = g.column(j);
            col.dot(&(&hess * col))
        })
        .sum();
    let lhs = grad.dot(&space.generator_apply(x)) + grad.dot(&f) + 0.5 * trace;
    let dn2 = (g.transpose() * &grad).norm();
    Ok(NagumoReport::new(x, lhs, dn2, grad.norm(), g.norm()))
}

/// The unit-ball form: `⟨x,Ax⟩ + ⟨x,F(x)⟩ + ½|G(x)|²_HS ≤ 0` and
/// `G(x)* x = 0`.
pub fn check_unit_ball_point(space: &SpectralSpace, model: &CoefficientModel, x: &Vector, u: &Vector) -> Result<NagumoReport> {
    check_dims(space, model, x, u)?;
    let off = (x.norm() - 1.0).abs();
    if off > tolerances::UNIT_SPHERE {
        return Err(Error::OffBoundary { measured: off });
    }
    let f = model.eval_drift(x, u);
    let g = model.eval_noise(x, u);
    let hs = g.hs_norm();
    let lhs = x.dot(&space.generator_apply(x)) + x.dot(&f) + 0.5 * hs * hs;
    let dn2 = g.adjoint_apply(x).norm();
    Ok(NagumoReport::new(x, lhs, dn2, x.norm(), hs))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateTolerances {
    pub dn1: f64,
    pub dn2_relative: f64,
    pub boundary: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryCertificate {
    pub passed: bool,
    /// Largest dn1 left-hand side over the samples.
    pub worst_dn1_margin: f64,
    pub worst_dn2_norm: f64,
    pub samples: usize,
    pub tolerances: CertificateTolerances,
    /// Indices of sampled points failing dn1 or dn2.
    pub failing: Vec<usize>,
    #[serde(skip)]
    pub reports: Vec<NagumoReport>,
}

impl BoundaryCertificate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serialises")
    }

    pub fn fails_dn2_everywhere(&self) -> bool {
        self.reports.iter().all(|r| !r.pass_dn2)
    }
}

/// Checks dn1/dn2 at `sample_count ≥ 16` boundary points of `K`; passes iff
/// every point passes both.
pub fn certify_boundary(
    space: &SpectralSpace,
    model: &CoefficientModel,
    k: &ConstraintSet,
    u: &Vector,
    sample_count: usize,
    seed: u64,
) -> Result<BoundaryCertificate> {
    if sample_count < 16 {
        return Err(Error::invalid(format!("certify_boundary needs at least 16 samples, got {sample_count}")));
    }
    let points = k.boundary_sample(sample_count, seed)?;
    let reports = points
        .par_iter()
        .map(|x| check_smooth_point(space, model, k, x, u))
        .collect::<Result<Vec<_>>>()?;
    let worst_dn1_margin = reports.iter().map(|r| r.lhs_dn1).fold(f64::NEG_INFINITY, f64::max);
    let worst_dn2_norm = reports.iter().map(|r| r.dn2_norm).fold(0.0, f64::max);
    let failing: Vec<usize> = reports.iter().enumerate().filter(|(_, r)| !r.passed()).map(|(i, _)| i).collect();
    Ok(BoundaryCertificate {
        passed: failing.is_empty(),
        worst_dn1_margin,
        worst_dn2_norm,
        samples: sample_count,
        tolerances: CertificateTolerances {
            dn1: tolerances::DN1,
            dn2_relative: tolerances::DN2,
            boundary: tolerances::BOUNDARY,
        },
        failing,
        reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GalerkinCell {
    pub l: usize,
    pub m: usize,
    pub total: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GalerkinTable {
    pub cells: Vec<GalerkinCell>,
    pub full_total: f64,
    pub full_std_err: f64,
}

impl GalerkinTable {
    /// Cells whose total exceeds the full-model total by more than
    /// `sigmas` combined standard errors.
    pub fn exceedances(&self, sigmas: f64) -> Vec<&GalerkinCell> {
        self.cells
            .iter()
            .filter(|c| c.total > self.full_total + sigmas * (c.std_err.powi(2) + self.full_std_err.powi(2)).sqrt())
            .collect()
    }

    /// CSV with columns `l, m, total, std_err`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "l,m,total,std_err")?;
        for c in &self.cells {
            writeln!(out, "{},{},{},{}", c.l, c.m, c.total, c.std_err)?;
        }
        Ok(())
    }
}

/// Minimised residual on `K = Ball(1, 0)` for the Galerkin restrictions
/// `(l, m′)` of `model` at `J_l ξ`, plus the full model at `ξ`. Every cell
/// shares the normals of `RngStream::new(seed).child(LADDER)`.
#[allow(clippy::too_many_arguments)]
pub fn galerkin_ladder(
    space: &SpectralSpace,
    model: &CoefficientModel,
    l_values: &[usize],
    m_values: &[usize],
    xi: &Vector,
    h: f64,
    lambda: f64,
    control_set: &ControlSet,
    count: usize,
    seed: u64,
    options: &ResidualOptions,
) -> Result<GalerkinTable> {
    let n = space.dim();
    if let Some(l) = l_values.iter().find(|l| **l == 0 || **l > n) {
        return Err(Error::invalid(format!("l = {l} is outside 1..={n}")));
    }
    if let Some(m) = m_values.iter().find(|m| **m == 0 || **m > space.noise_dim()) {
        return Err(Error::invalid(format!("m = {m} is outside 1..={}", space.noise_dim())));
    }
    let k = ConstraintSet::unit_ball(n);
    let stream = RngStream::new(seed).child(lane::LADDER);
    let full = minimize_residual(space, model, &k, xi, h, lambda, control_set, count, stream, options, false)?;
    let mut cells = Vec::with_capacity(l_values.len() * m_values.len());
    for &l in l_values {
        let xl = Vector::from_fn(n, |i, _| if i < l { xi[i] } else { 0.0 });
        for &m in m_values {
            let restricted = model.galerkin(l, m)?;
            let r = minimize_residual(space, &restricted, &k, &xl, h, lambda, control_set, count, stream, options, false)?;
            cells.push(GalerkinCell {
                l,
                m,
                total: r.total,
                std_err: r.std_err,
            });
        }
    }
    Ok(GalerkinTable {
        cells,
        full_total: full.total,
        full_std_err: full.std_err,
    })
}
