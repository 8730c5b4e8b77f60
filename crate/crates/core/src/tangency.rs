//! The quasi-tangency residual.
//!
//! For a step `h`, a control `u` and exponent `λ ∈ [0, ½)` the residual is
//!
//! ```text
//! E|ζ - η|² / h^(1-2λ)  +  |E[ζ - η]|² / h²
//! ```
//!
//! where `ζ` follows the frozen one-step law from `ξ` and `η` is a `K`-valued
//! correction of `ζ`. Every choice of `η` gives an upper bound of the
//! infimum over all `K`-valued random variables; the estimators here use
//! per-sample projections, optionally shifted by a deterministic vector that
//! balances the mean correction.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraint::ConstraintSet;
use crate::error::{Error, Result};
use crate::model::{CoefficientModel, ControlSet, ControlShape};
use crate::one_step::one_step_law;
use crate::rng::{lane, RngStream};
use crate::spectral::SpectralSpace;
use crate::{Matrix, Vector};

/// How the `K`-valued correction `η` is chosen from the samples `ζ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EtaRule {
    /// `η_i = Π_K(ζ_i)`: minimises the first term sample by sample.
    #[default]
    Projection,
    /// Best of `η_i = Π_K(ζ_i - s)` over the iterates
    /// `s_{k+1} = s_k - mean(ζ - η^{(k)})`, `s_0 = 0`; the shift drives the
    /// mean correction, and with it the second term, towards zero.
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualOptions {
    pub eta: EtaRule,
    pub balance_iterations: usize,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        ResidualOptions {
            eta: EtaRule::Projection,
            balance_iterations: 40,
        }
    }
}

impl ResidualOptions {
    pub fn balanced() -> Self {
        ResidualOptions {
            eta: EtaRule::Balanced,
            ..Self::default()
        }
    }
}

/// One evaluation of the residual at step `h`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TangencyResidual {
    pub h: f64,
    pub lambda: f64,
    pub term_gap: f64,
    pub term_cond: f64,
    pub total: f64,
    #[serde(serialize_with = "serialize_vector")]
    pub control: Vector,
    pub std_err: f64,
    pub sample_count: usize,
    /// A projection failed to converge on some sample; excluded from verdicts.
    pub flagged: bool,
}

fn serialize_vector<S: serde::Serializer>(v: &Vector, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

/// Samples `ζ` with the corrections `η` that produced a residual.
#[derive(Debug, Clone)]
pub struct CorrectedSamples {
    pub zeta: Vec<Vector>,
    pub eta: Vec<Vector>,
    pub shift: Vector,
    pub flagged: bool,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..0.5).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must lie in [0, 1/2), got {lambda}")));
    }
    Ok(())
}

fn check_h(h: f64) -> Result<()> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!("step h must be > 0, got {h}")));
    }
    Ok(())
}

fn project_all(k: &ConstraintSet, zeta: &[Vector], shift: &Vector) -> (Vec<Vector>, bool) {
    let results: Vec<(Vector, bool)> = zeta
        .par_iter()
        .map(|z| {
            let p = k.project_unchecked(&(z - shift));
            (p.point, p.converged)
        })
        .collect();
    let flagged = results.iter().any(|(_, ok)| !ok);
    (results.into_iter().map(|(p, _)| p).collect(), flagged)
}

/// `(E|ζ-η|², E[ζ-η])` with a sequential, index-ordered sum.
fn moments(zeta: &[Vector], eta: &[Vector]) -> (f64, Vector) {
    let n = zeta.first().map_or(0, |z| z.len());
    let mut sq = 0.0;
    let mut mean = Vector::zeros(n);
    for (z, e) in zeta.iter().zip(eta) {
        let q = z - e;
        sq += q.norm_squared();
        mean += q;
    }
    let count = zeta.len().max(1) as f64;
    (sq / count, mean / count)
}

fn delta_std_err(zeta: &[Vector], eta: &[Vector], h: f64, lambda: f64) -> f64 {
    let count = zeta.len() as f64;
    let n = zeta[0].len();
    let gap_scale = h.powf(1.0 - 2.0 * lambda);
    let h2 = h * h;
    let (_, mean) = moments(zeta, eta);
    let q: Vec<Vector> = zeta.iter().zip(eta).map(|(z, e)| z - e).collect();
    let influence: Vec<f64> = q
        .iter()
        .map(|q| q.norm_squared() / gap_scale + 2.0 * mean.dot(q) / h2)
        .collect();
    let avg = influence.iter().sum::<f64>() / count;
    let var = influence.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / (count - 1.0);
    let mut cov = Matrix::zeros(n, n);
    for v in &q {
        let c = v - &mean;
        cov += &c * c.transpose();
    }
    cov /= count - 1.0;
    let second = 2.0 * cov.norm_squared() / (count * count * h2 * h2);
    (var / count + second).sqrt()
}

fn terms(zeta: &[Vector], eta: &[Vector], h: f64, lambda: f64) -> (f64, f64) {
    let (sq, mean) = moments(zeta, eta);
    (sq / h.powf(1.0 - 2.0 * lambda), mean.norm_squared() / (h * h))
}

/// Chooses `η` for the samples `ζ` under `rule`, minimising the residual at
/// `(h, λ)` among the candidates the rule generates.
pub fn select_eta(
    k: &ConstraintSet,
    zeta: Vec<Vector>,
    h: f64,
    lambda: f64,
    options: &ResidualOptions,
) -> CorrectedSamples {
    let n = zeta.first().map_or(k.dim(), |z| z.len());
    let zero = Vector::zeros(n);
    let (eta, flagged) = project_all(k, &zeta, &zero);
    let mut best = CorrectedSamples {
        zeta,
        eta,
        shift: zero,
        flagged,
    };
    if options.eta == EtaRule::Projection {
        return best;
    }
    let (gap, cond) = terms(&best.zeta, &best.eta, h, lambda);
    let mut best_total = gap + cond;
    if best_total == 0.0 {
        return best;
    }
    let mut shift = best.shift.clone();
    let (_, mut drift) = moments(&best.zeta, &best.eta);
    for _ in 0..options.balance_iterations {
        if drift.norm() == 0.0 {
            break;
        }
        shift -= &drift;
        let (eta, flagged) = project_all(k, &best.zeta, &shift);
        let (sq, mean) = moments(&best.zeta, &eta);
        let total = sq / h.powf(1.0 - 2.0 * lambda) + mean.norm_squared() / (h * h);
        if total < best_total {
            best_total = total;
            best.eta = eta;
            best.shift = shift.clone();
            best.flagged = flagged;
        }
        drift = mean;
    }
    best
}

/// Residual of given samples. The standard error linearises the total in
/// the sample means of `|q|²` and `q = ζ - η`, and adds the second-order
/// variance `2‖Σ_q‖²_F / (N² h⁴)` of `|q̄|²/h²`, which dominates when
/// `E q ≈ 0`. It errs high in that regime (by at most about √3).
pub fn residual_from_samples(samples: &CorrectedSamples, h: f64, lambda: f64, control: &Vector) -> TangencyResidual {
    let count = samples.zeta.len();
    let (term_gap, term_cond) = terms(&samples.zeta, &samples.eta, h, lambda);
    let std_err = if count >= 2 {
        delta_std_err(&samples.zeta, &samples.eta, h, lambda)
    } else {
        0.0
    };
    TangencyResidual {
        h,
        lambda,
        term_gap,
        term_cond,
        total: term_gap + term_cond,
        control: control.clone(),
        std_err,
        sample_count: count,
        flagged: samples.flagged,
    }
}

/// Draws `ζ` for control `u` from the shared normals `z` and corrects it.
#[allow(clippy::too_many_arguments)]
fn corrected_for_control(
    space: &SpectralSpace,
    model: &CoefficientModel,
    k: &ConstraintSet,
    xi: &Vector,
    u: &Vector,
    h: f64,
    lambda: f64,
    z: &Matrix,
    options: &ResidualOptions,
) -> Result<CorrectedSamples> {
    let law = one_step_law(space, model, xi, u, h)?;
    Ok(select_eta(k, law.realize(z), h, lambda, options))
}

fn check_common(k: &ConstraintSet, space: &SpectralSpace, h: f64, lambda: f64, count: usize) -> Result<()> {
    check_h(h)?;
    check_lambda(lambda)?;
    if count < 100 {
        return Err(Error::invalid(format!("residual needs at least 100 samples, got {count}")));
    }
    if k.dim() != space.dim() {
        return Err(Error::invalid("constraint set and space dimensions disagree"));
    }
    Ok(())
}

/// Residual for the constant control `u`, with its samples.
#[allow(clippy::too_many_arguments)]
pub fn residual_with_samples(
    space: &SpectralSpace,
    model: &CoefficientModel,
    k: &ConstraintSet,
    xi: &Vector,
    u: &Vector,
    h: f64,
    lambda: f64,
    count: usize,
    stream: RngStream,
    options: &ResidualOptions,
) -> Result<(TangencyResidual, CorrectedSamples)> {
    check_common(k, space, h, lambda, count)?;
    let z = stream.normal_matrix(count, space.dim());
    let samples = corrected_for_control(space, model, k, xi, u, h, lambda, &z, options)?;
    Ok((residual_from_samples(&samples, h, lambda, u), samples))
}

/// Residual for the constant control `u`.
#[allow(clippy::too_many_arguments)]
pub fn residual_for_control(
    space: &SpectralSpace,
    model: &CoefficientModel,
    k: &ConstraintSet,
    xi: &Vector,
    u: &Vector,
    h: f64,
    lambda: f64,
    count: usize,
    stream: RngStream,
    options: &ResidualOptions,
) -> Result<TangencyResidual> {
    residual_with_samples(space, model, k, xi, u, h, lambda, count, stream, options).map(|(r, _)| r)
}

/// Picks the better residual: unflagged first, then smaller total; ties keep
/// the incumbent.
fn improves(candidate: &TangencyResidual, incumbent: &TangencyResidual) -> bool {
    match (candidate.flagged, incumbent.flagged) {
        (false, true) => true,
        (true, false) => false,
        _ => candidate.total < incumbent.total,
    }
}

/// Minimum of the residual over `control_set`'s grid with common random
/// numbers, optionally refined by coordinate descent (20 sweeps, halving
/// steps) from the best grid point.
#[allow(clippy::too_many_arguments)]
pub fn minimize_residual(
    space: &SpectralSpace,
    model: &CoefficientModel,
    k: &ConstraintSet,
    xi: &Vector,
    h: f64,
    lambda: f64,
    control_set: &ControlSet,
    count: usize,
    stream: RngStream,
    options: &ResidualOptions,
    refine: bool,
) -> Result<TangencyResidual> {
    check_common(k, space, h, lambda, count)?;
    if control_set.dim() != space.control_dim() {
        return Err(Error::invalid("control set and space control dimensions disagree"));
    }
    let z = stream.normal_matrix(count, space.dim());
    let eval = |u: &Vector| -> Result<TangencyResidual> {
        let s = corrected_for_control(space, model, k, xi, u, h, lambda, &z, options)?;
        Ok(residual_from_samples(&s, h, lambda, u))
    };
    let grid = control_set.control_grid();
    let mut best: Option<TangencyResidual> = None;
    for u in &grid {
        let r = eval(u)?;
        if best.as_ref().is_none_or(|b| improves(&r, b)) {
            best = Some(r);
        }
    }
    let mut best = best.expect("control grid is never empty");
    if refine && grid.len() > 1 && best.total > 0.0 {
        let mut steps: Vec<f64> = control_set.grid_spacing().iter().map(|s| s / 2.0).collect();
        for _ in 0..20 {
            let mut improved = false;
            for axis in 0..steps.len() {
                if steps[axis] == 0.0 {
                    continue;
                }
                for sign in [-1.0, 1.0] {
                    let mut u = best.control.clone();
                    u[axis] += sign * steps[axis];
                    let u = control_set.clamp(&u);
                    if u == best.control {
                        continue;
                    }
                    let r = eval(&u)?;
                    if improves(&r, &best) {
                        best = r;
                        improved = true;
                    }
                }
            }
            if !improved {
                steps.iter_mut().for_each(|s| *s /= 2.0);
            }
        }
    }
    Ok(best)
}

/// Finitely-atomic initial state: points with probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub point: Vector,
    pub weight: f64,
}

/// Residual for an initial state with finitely many atoms.
///
/// Conditional expectations given the initial σ-field are per-atom means,
/// and the control may differ per atom, so each atom is minimised on its
/// own stream (`stream.child(atom)`) and the results are weighted.
#[allow(clippy::too_many_arguments)]
pub fn minimize_residual_mixture(
    space: &SpectralSpace,
    model: &CoefficientModel,
    k: &ConstraintSet,
    atoms: &[Atom],
    h: f64,
    lambda: f64,
    control_set: &ControlSet,
    count: usize,
    stream: RngStream,
    options: &ResidualOptions,
) -> Result<(TangencyResidual, Vec<TangencyResidual>)> {
    if atoms.is_empty() {
        return Err(Error::invalid("mixture needs at least one atom"));
    }
    let total_weight: f64 = atoms.iter().map(|a| a.weight).sum();
    if atoms.iter().any(|a| !(a.weight > 0.0)) || (total_weight - 1.0).abs() > 1e-12 {
        return Err(Error::invalid("atom weights must be positive and sum to 1"));
    }
    let per_atom = atoms
        .iter()
        .enumerate()
        .map(|(i, a)| {
            minimize_residual(
                space,
                model,
                k,
                &a.point,
                h,
                lambda,
                control_set,
                count,
                stream.child(i as u64),
                options,
                false,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut combined = per_atom[0].clone();
    combined.term_gap = 0.0;
    combined.term_cond = 0.0;
    let mut var = 0.0;
    for (a, r) in atoms.iter().zip(&per_atom) {
        combined.term_gap += a.weight * r.term_gap;
        combined.term_cond += a.weight * r.term_cond;
        var += (a.weight * r.std_err).powi(2);
        combined.flagged |= r.flagged;
    }
    combined.total = combined.term_gap + combined.term_cond;
    combined.std_err = var.sqrt();
    combined.sample_count = count * atoms.len();
    Ok((combined, per_atom))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Tangent,
    NotTangent,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Tangent => "tangent",
            Verdict::NotTangent => "not-tangent",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    pub residual: ResidualOptions,
    pub refine: bool,
    /// Absolute tolerance on the finest residual; defaults to ten times the
    /// root-sum-square of the standard errors over the ladder.
    pub tol_abs: Option<f64>,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            residual: ResidualOptions::balanced(),
            refine: false,
            tol_abs: None,
        }
    }
}

/// Residuals over a decreasing ladder of steps with a decay verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TangencyProfile {
    pub ladder: Vec<f64>,
    pub residuals: Vec<TangencyResidual>,
    /// Least-squares slope of `ln total` against `ln h` over positive totals.
    pub loglog_slope: Option<f64>,
    pub tol_abs: f64,
    pub verdict: Verdict,
}

/// Least-squares slope of `ln y` against `ln x`, over points with `y > 0`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(_, y)| **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Verdict from the residual series of a ladder.
///
/// * tangent: the finest total is zero, or it is at most `tol_abs` and the
///   log-log slope is at least 0.5;
/// * not-tangent: slope at most 0.25 and finest total above `tol_abs`;
/// * inconclusive otherwise, or when any residual is flagged.
pub fn classify(residuals: &[TangencyResidual], slope: Option<f64>, tol_abs: f64) -> Verdict {
    if residuals.iter().any(|r| r.flagged) {
        return Verdict::Inconclusive;
    }
    let Some(finest) = residuals.last() else {
        return Verdict::Inconclusive;
    };
    if finest.total == 0.0 {
        return Verdict::Tangent;
    }
    match slope {
        Some(s) if finest.total <= tol_abs && s >= 0.5 => Verdict::Tangent,
        Some(s) if s <= 0.25 && finest.total > tol_abs => Verdict::NotTangent,
        _ => Verdict::Inconclusive,
    }
}

/// Residual profile over `ladder`; ladder entry `i` uses the stream
/// `RngStream::new(seed).child(LADDER).child(i)` for every control.
#[allow(clippy::too_many_arguments)]
pub fn tangency_profile(
    space: &SpectralSpace,
    model: &CoefficientModel,
    k: &ConstraintSet,
    xi: &Vector,
    ladder: &[f64],
    lambda: f64,
    control_set: &ControlSet,
    count: usize,
    seed: u64,
    options: &ProfileOptions,
) -> Result<TangencyProfile> {
    if ladder.len() < 4 {
        return Err(Error::invalid("ladder needs at least 4 steps"));
    }
    if ladder.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::invalid("ladder must be strictly decreasing"));
    }
    let base = RngStream::new(seed).child(lane::LADDER);
    let residuals = ladder
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            minimize_residual(
                space,
                model,
                k,
                xi,
                h,
                lambda,
                control_set,
                count,
                base.child(i as u64),
                &options.residual,
                options.refine,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let totals: Vec<f64> = residuals.iter().map(|r| r.total).collect();
    let slope = loglog_slope(ladder, &totals);
    let combined = residuals.iter().map(|r| r.std_err * r.std_err).sum::<f64>().sqrt();
    let tol_abs = options.tol_abs.unwrap_or(10.0 * combined);
    let verdict = classify(&residuals, slope, tol_abs);
    Ok(TangencyProfile {
        ladder: ladder.to_vec(),
        residuals,
        loglog_slope: slope,
        tol_abs,
        verdict,
    })
}

/// `h_0 · ratio^i` for `i < len`.
pub fn geometric_ladder(h0: f64, ratio: f64, len: usize) -> Vec<f64> {
    (0..len).map(|i| h0 * ratio.powi(i as i32)).collect()
}

/// The correction variable `p = h^(γ-½) (η - ζ)` with its criterion
/// `E|p|² + h^-(1+2γ) |E p|²`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionVariable {
    pub p: Vec<Vector>,
    pub criterion: f64,
}

pub fn correction_variable(zeta: &[Vector], eta: &[Vector], h: f64, gamma: f64) -> Result<CorrectionVariable> {
    check_h(h)?;
    if zeta.len() != eta.len() || zeta.is_empty() {
        return Err(Error::invalid("zeta and eta must be non-empty with matching lengths"));
    }
    if zeta.iter().zip(eta).any(|(z, e)| z.len() != e.len()) {
        return Err(Error::invalid("zeta and eta samples have mismatched dimensions"));
    }
    let scale = h.powf(gamma - 0.5);
    let p: Vec<Vector> = zeta.iter().zip(eta).map(|(z, e)| (e - z) * scale).collect();
    let n = p[0].len();
    let count = p.len() as f64;
    let mut sq = 0.0;
    let mut mean = Vector::zeros(n);
    for v in &p {
        sq += v.norm_squared();
        mean += v;
    }
    mean /= count;
    let criterion = sq / count + mean.norm_squared() / h.powf(1.0 + 2.0 * gamma);
    Ok(CorrectionVariable { p, criterion })
}

/// CSV with columns `h, lambda, term_gap, term_cond, total, std_err, u_1..u_d`.
pub fn write_profile_csv<W: Write>(out: &mut W, profiles: &[&TangencyProfile]) -> std::io::Result<()> {
    let d = profiles
        .first()
        .and_then(|p| p.residuals.first())
        .map_or(0, |r| r.control.len());
    let mut header: Vec<String> = ["h", "lambda", "term_gap", "term_cond", "total", "std_err"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=d).map(|k| format!("u_{k}")));
    writeln!(out, "{}", header.join(","))?;
    for p in profiles {
        for r in &p.residuals {
            let mut row = vec![
                r.h.to_string(),
                r.lambda.to_string(),
                r.term_gap.to_string(),
                r.term_cond.to_string(),
                r.total.to_string(),
                r.std_err.to_string(),
            ];
            row.extend(r.control.iter().map(|v| v.to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// A control set is trivially minimised when its grid is a single point.
pub(crate) fn is_singleton(set: &ControlSet) -> bool {
    match set.shape() {
        ControlShape::Ball { radius } => *radius == 0.0,
        ControlShape::Box { half_widths } => set.resolution() == 1 || half_widths.iter().all(|w| *w == 0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Family, LinearModel};
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    fn scalar(drift: f64, sigma: f64) -> (SpectralSpace, CoefficientModel) {
        let s = SpectralSpace::new(vec![0.0], 1, 1).unwrap();
        let m = CoefficientModel::new(
            &s,
            Family::Constant {
                drift: v(&[drift]),
                noise: Matrix::from_element(1, 1, sigma),
            },
            1.0,
            0.0,
        )
        .unwrap();
        (s, m)
    }

    fn lower_half_line() -> ConstraintSet {
        ConstraintSet::half_space(v(&[1.0]), 0.0).unwrap()
    }

    fn replicated_spread(drift: f64, h: f64, count: usize) -> (f64, f64) {
        let (s, m) = scalar(drift, 0.5);
        let k = lower_half_line();
        let opts = ResidualOptions::default();
        let reps: Vec<TangencyResidual> = (0..400)
            .map(|r| residual_for_control(&s, &m, &k, &v(&[0.0]), &v(&[0.0]), h, 0.0, count, RngStream::new(r), &opts).unwrap())
            .collect();
        let mean = reps.iter().map(|r| r.total).sum::<f64>() / reps.len() as f64;
        let sd = (reps.iter().map(|r| (r.total - mean).powi(2)).sum::<f64>() / (reps.len() - 1) as f64).sqrt();
        let se = reps.iter().map(|r| r.std_err).sum::<f64>() / reps.len() as f64;
        (sd, se)
    }

    #[test]
    fn std_err_tracks_replication_spread() {
        // Mean correction far from zero: first-order term dominates.
        let (sd, se) = replicated_spread(0.0, 0.01, 2000);
        assert!((se / sd - 1.0).abs() < 0.2, "sd {sd} se {se}");

        // q ~ N(0, h) with η = 0: |q̄|²/h² carries almost all the noise.
        let h: f64 = 1e-3;
        let reps: Vec<TangencyResidual> = (0..400u64)
            .map(|r| {
                let zeta: Vec<Vector> = RngStream::new(r).normals(400).into_iter().map(|z| v(&[z * h.sqrt()])).collect();
                let samples = CorrectedSamples {
                    eta: vec![v(&[0.0]); zeta.len()],
                    zeta,
                    shift: v(&[0.0]),
                    flagged: false,
                };
                residual_from_samples(&samples, h, 0.0, &v(&[0.0]))
            })
            .collect();
        let mean = reps.iter().map(|r| r.total).sum::<f64>() / 400.0;
        let sd = (reps.iter().map(|r| (r.total - mean).powi(2)).sum::<f64>() / 399.0).sqrt();
        let se = reps.iter().map(|r| r.std_err).sum::<f64>() / 400.0;
        // Conservative here: the plug-in q̄ adds about 4/(Nh)² to the true
        // variance 2/(Nh)², so the ratio sits near √3 at worst.
        assert!(se / sd >= 1.0 && se / sd <= 1.8, "sd {sd} se {se}");
    }

    /// Standard normal density and upper tail, used by the closed-form oracles.
    fn pdf(x: f64) -> f64 {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn inward_drift_has_zero_residual() {
        let (s, m) = scalar(-1.0, 0.0);
        let k = lower_half_line();
        for h in [0.5, 0.1, 0.01] {
            let r = residual_for_control(&s, &m, &k, &v(&[0.0]), &v(&[0.0]), h, 0.0, 100, RngStream::new(1), &ResidualOptions::default()).unwrap();
            assert_eq!(r.total, 0.0);
        }
    }

    #[test]
    fn preconditions_are_checked() {
        let (s, m) = scalar(0.0, 1.0);
        let k = lower_half_line();
        let opts = ResidualOptions::default();
        let call = |h, lambda, count| residual_for_control(&s, &m, &k, &v(&[0.0]), &v(&[0.0]), h, lambda, count, RngStream::new(1), &opts);
        assert!(call(0.0, 0.0, 100).is_err());
        assert!(call(0.1, 0.5, 100).is_err());
        assert!(call(0.1, 0.0, 99).is_err());
    }

    #[test]
    fn normal_noise_half_line_half_moments() {
        let (s, m) = scalar(0.0, 1.0);
        let k = lower_half_line();
        let h = 0.01;
        let count = 1_000_000;
        let r = residual_for_control(&s, &m, &k, &v(&[0.0]), &v(&[0.0]), h, 0.0, count, RngStream::new(9), &ResidualOptions::default()).unwrap();
        // ζ = √h Z, η = min(ζ, 0): E(ζ⁺)²/h = E(Z⁺)² = 1/2 and
        // (Eζ⁺)²/h² = φ(0)²/h = 1/(2πh).
        let se_gap = ((3.0f64 - 0.25) / count as f64).sqrt(); // sd of (Z⁺)²: E(Z⁺)^4 = 3/2
        assert!((r.term_gap - 0.5).abs() <= 3.0 * se_gap, "{}", r.term_gap);
        let exact_cond = pdf(0.0).powi(2) / h;
        assert_relative_eq!(exact_cond, 1.0 / (2.0 * std::f64::consts::PI * h), max_relative = 1e-14);
        let se_mean = (0.5 - pdf(0.0).powi(2)).sqrt() / (count as f64).sqrt();
        let se_cond = 2.0 * pdf(0.0) * se_mean / h;
        assert!((r.term_cond - exact_cond).abs() <= 3.0 * se_cond, "{}", r.term_cond);
        assert!((r.term_cond - 15.92).abs() < 0.1);
    }

    fn tangential_ball() -> (SpectralSpace, CoefficientModel, ConstraintSet) {
        let s = SpectralSpace::new(vec![0.0, 0.0], 1, 1).unwrap();
        let m = CoefficientModel::new(&s, Family::TangentialRotation { kappa: 1.0, sigma: 1.0 }, 1.0, 0.0).unwrap();
        (s, m, ConstraintSet::unit_ball(2))
    }

    #[test]
    fn tangential_ball_residual_shrinks_with_h() {
        let (s, m, k) = tangential_ball();
        let xi = v(&[1.0, 0.0]);
        let opts = ResidualOptions::balanced();
        let coarse = residual_for_control(&s, &m, &k, &xi, &v(&[0.0]), 2f64.powi(-4), 0.0, 20_000, RngStream::new(1), &opts).unwrap();
        let fine = residual_for_control(&s, &m, &k, &xi, &v(&[0.0]), 2f64.powi(-8), 0.0, 20_000, RngStream::new(2), &opts).unwrap();
        assert!(fine.total < coarse.total);
    }

    #[test]
    fn projection_alone_leaves_a_mean_plateau_on_the_ball() {
        // With plain projection the mean correction is of order h, so the
        // conditional term stays near (E[((Z²-2)⁺)/2])² ≈ 0.0166.
        let (s, m, k) = tangential_ball();
        let xi = v(&[1.0, 0.0]);
        let r = residual_for_control(&s, &m, &k, &xi, &v(&[0.0]), 2f64.powi(-10), 0.0, 200_000, RngStream::new(3), &ResidualOptions::default()).unwrap();
        let a = 2f64.sqrt();
        let tail = 0.5 * libm_erfc(a / 2f64.sqrt());
        let excess = a * pdf(a) - tail; // E[(Z²-2)⁺]/2
        assert!((r.term_cond - excess * excess).abs() < 0.003, "{} vs {}", r.term_cond, excess * excess);
        let b = residual_for_control(&s, &m, &k, &xi, &v(&[0.0]), 2f64.powi(-10), 0.0, 200_000, RngStream::new(3), &ResidualOptions::balanced()).unwrap();
        assert!(b.total < 0.05 * r.total);
    }

    /// Complementary error function via a continued-fraction-free series
    /// (Abramowitz–Stegun 7.1.26 is too coarse here, so integrate).
    fn libm_erfc(x: f64) -> f64 {
        let n = 200_000;
        let upper = x + 12.0;
        let h = (upper - x) / n as f64;
        let f = |t: f64| (-t * t).exp();
        let mut s = f(x) + f(upper);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x + i as f64 * h);
        }
        s * h / 3.0 * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn singleton_minimisation_equals_single_control() {
        let (s, m, k) = tangential_ball();
        let xi = v(&[0.6, 0.8]);
        let opts = ResidualOptions::balanced();
        let single = ControlSet::singleton(v(&[0.0]));
        let a = minimize_residual(&s, &m, &k, &xi, 0.05, 0.0, &single, 500, RngStream::new(4), &opts, true).unwrap();
        let b = residual_for_control(&s, &m, &k, &xi, &v(&[0.0]), 0.05, 0.0, 500, RngStream::new(4), &opts).unwrap();
        assert_eq!(a, b);
    }

    fn controlled_line(noise_gain: f64) -> (SpectralSpace, CoefficientModel) {
        // f(x,u) = u, g(x,u) = noise_gain·(u + 1).
        let s = SpectralSpace::new(vec![0.0], 1, 1).unwrap();
        let lin = LinearModel::new(
            Matrix::from_element(1, 1, 1.0),
            vec![Matrix::zeros(1, 1)],
            vec![Matrix::from_element(1, 1, noise_gain)],
        )
        .unwrap()
        .with_offsets(v(&[0.0]), Matrix::from_element(1, 1, noise_gain))
        .unwrap();
        let m = CoefficientModel::new(&s, Family::Linear(lin), 1.0, 0.0).unwrap();
        (s, m)
    }

    #[test]
    fn most_inward_drift_wins() {
        let (s, m) = controlled_line(0.0);
        let k = lower_half_line();
        let set = ControlSet::new(ControlShape::Box { half_widths: vec![1.0] }, v(&[0.0]), 3).unwrap();
        let r = minimize_residual(&s, &m, &k, &v(&[0.0]), 0.1, 0.0, &set, 100, RngStream::new(0), &ResidualOptions::default(), false).unwrap();
        assert_eq!(r.control, v(&[-1.0]));
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn control_that_kills_noise_wins() {
        let (s, m) = controlled_line(1.0);
        let k = lower_half_line();
        let h = 0.01;
        let set = ControlSet::new(ControlShape::Box { half_widths: vec![1.0] }, v(&[0.0]), 3).unwrap();
        let opts = ResidualOptions::default();
        let r = minimize_residual(&s, &m, &k, &v(&[0.0]), h, 0.0, &set, 50_000, RngStream::new(6), &opts, false).unwrap();
        assert_eq!(r.control, v(&[-1.0]));
        assert_eq!(r.total, 0.0);
        // Closed form per grid point: u = 0 gives ζ ~ N(0, h), term_gap = 1/2.
        let mid = residual_for_control(&s, &m, &k, &v(&[0.0]), &v(&[0.0]), h, 0.0, 50_000, RngStream::new(6), &opts).unwrap();
        assert!((mid.term_gap - 0.5).abs() < 0.03);
        // u = 1: drift h outward, noise N(0, 4h); residual far above zero.
        let up = residual_for_control(&s, &m, &k, &v(&[0.0]), &v(&[1.0]), h, 0.0, 50_000, RngStream::new(6), &opts).unwrap();
        assert!(up.total > mid.total);
    }

    #[test]
    fn adding_grid_points_never_hurts() {
        let (s, m) = controlled_line(0.5);
        let k = lower_half_line();
        let opts = ResidualOptions::balanced();
        let coarse = ControlSet::new(ControlShape::Box { half_widths: vec![1.0] }, v(&[0.0]), 3).unwrap();
        let fine = ControlSet::new(ControlShape::Box { half_widths: vec![1.0] }, v(&[0.0]), 5).unwrap();
        for (i, xi) in [0.0, -0.05, -0.2].iter().enumerate() {
            let a = minimize_residual(&s, &m, &k, &v(&[*xi]), 0.05, 0.0, &coarse, 1000, RngStream::new(i as u64), &opts, false).unwrap();
            let b = minimize_residual(&s, &m, &k, &v(&[*xi]), 0.05, 0.0, &fine, 1000, RngStream::new(i as u64), &opts, false).unwrap();
            assert!(b.total <= a.total);
        }
    }

    #[test]
    fn refinement_does_not_increase_total() {
        let (s, m) = controlled_line(0.5);
        let k = lower_half_line();
        let set = ControlSet::new(ControlShape::Box { half_widths: vec![1.0] }, v(&[0.3]), 2).unwrap();
        let opts = ResidualOptions::default();
        let a = minimize_residual(&s, &m, &k, &v(&[0.0]), 0.05, 0.0, &set, 1000, RngStream::new(2), &opts, false).unwrap();
        let b = minimize_residual(&s, &m, &k, &v(&[0.0]), 0.05, 0.0, &set, 1000, RngStream::new(2), &opts, true).unwrap();
        assert!(b.total <= a.total);
        assert!(set.contains(&b.control));
    }

    #[test]
    fn profile_verdicts() {
        let (s, m) = scalar(-1.0, 0.0);
        let k = lower_half_line();
        let ladder = geometric_ladder(0.1, 0.5, 5);
        let single = ControlSet::singleton(v(&[0.0]));
        let p = tangency_profile(&s, &m, &k, &v(&[0.0]), &ladder, 0.0, &single, 200, 1, &ProfileOptions::default()).unwrap();
        assert_eq!(p.verdict, Verdict::Tangent);
        assert!(p.residuals.iter().all(|r| r.total == 0.0));

        let (s, m) = scalar(0.0, 1.0);
        let p = tangency_profile(&s, &m, &k, &v(&[0.0]), &ladder, 0.0, &single, 20_000, 1, &ProfileOptions::default()).unwrap();
        assert_eq!(p.verdict, Verdict::NotTangent);
        assert!(p.residuals.iter().all(|r| r.term_gap >= 0.45));

        assert!(tangency_profile(&s, &m, &k, &v(&[0.0]), &ladder[..3], 0.0, &single, 200, 1, &ProfileOptions::default()).is_err());
        let bad = [0.1, 0.05, 0.05, 0.01];
        assert!(tangency_profile(&s, &m, &k, &v(&[0.0]), &bad, 0.0, &single, 200, 1, &ProfileOptions::default()).is_err());
    }

    #[test]
    fn tangential_ball_profile_is_tangent() {
        let (s, m, k) = tangential_ball();
        let ladder = geometric_ladder(2f64.powi(-4), 0.5, 7);
        let single = ControlSet::singleton(v(&[0.0]));
        let p = tangency_profile(&s, &m, &k, &v(&[1.0, 0.0]), &ladder, 0.0, &single, 20_000, 3, &ProfileOptions::default()).unwrap();
        assert!(p.loglog_slope.unwrap() >= 0.5, "{:?}", p.loglog_slope);
        assert_eq!(p.verdict, Verdict::Tangent);
    }

    #[test]
    fn correction_variable_examples() {
        let z = vec![v(&[0.3]); 4];
        let cv = correction_variable(&z, &z, 0.5, 0.0).unwrap();
        assert!(cv.p.iter().all(|p| p[0] == 0.0));
        assert_eq!(cv.criterion, 0.0);

        let zeta = vec![v(&[0.0]); 3];
        let eta = vec![v(&[0.1]); 3];
        let cv = correction_variable(&zeta, &eta, 0.25, 0.0).unwrap();
        assert!(cv.p.iter().all(|p| (p[0] - 0.2).abs() < 1e-15));
        assert_relative_eq!(cv.criterion, 0.2, max_relative = 1e-14);

        // Zero-mean q: criterion equals the sample E|q|²/h plus the small
        // squared sample mean term.
        let stream = RngStream::new(12);
        let q: Vec<f64> = stream.normals(10_000);
        let mean = q.iter().sum::<f64>() / q.len() as f64;
        let q: Vec<f64> = q.iter().map(|x| x - mean).collect();
        let zeta: Vec<Vector> = q.iter().map(|_| v(&[0.0])).collect();
        let eta: Vec<Vector> = q.iter().map(|x| v(&[*x])).collect();
        let h = 0.1;
        let cv = correction_variable(&zeta, &eta, h, 0.0).unwrap();
        let direct = q.iter().map(|x| x * x).sum::<f64>() / q.len() as f64 / h;
        assert_relative_eq!(cv.criterion, direct, max_relative = 1e-12);

        assert!(correction_variable(&zeta[..2], &eta[..3], h, 0.0).is_err());
        assert!(correction_variable(&zeta, &eta, 0.0, 0.0).is_err());
    }

    #[test]
    fn criterion_matches_residual_at_lambda_gamma() {
        let (s, m, k) = tangential_ball();
        for (i, gamma) in [0.0, 0.1, 0.3].iter().enumerate() {
            let (r, samples) = residual_with_samples(&s, &m, &k, &v(&[0.0, 1.0]), &v(&[0.0]), 0.03, *gamma, 500, RngStream::new(i as u64), &ResidualOptions::balanced()).unwrap();
            let cv = correction_variable(&samples.zeta, &samples.eta, 0.03, *gamma).unwrap();
            assert_relative_eq!(cv.criterion, r.total, max_relative = 1e-12);
        }
    }

    #[test]
    fn interior_points_never_exit_for_small_h() {
        let (s, m, k) = tangential_ball();
        let xi = v(&[0.5, 0.0]);
        for h in [1e-3, 1e-4] {
            let r = residual_for_control(&s, &m, &k, &xi, &v(&[0.0]), h, 0.0, 1000, RngStream::new(5), &ResidualOptions::default()).unwrap();
            assert_eq!(r.term_cond, 0.0);
            assert_eq!(r.total, 0.0);
        }
    }

    #[test]
    fn deterministic_gap_matches_classical_quasi_tangency() {
        // g ≡ 0: ζ = ξ + h v deterministic, so term_gap = d_K(ξ + h v)²/h.
        let (s, m) = scalar(2.0, 0.0);
        let k = lower_half_line();
        let h = 0.05;
        let r = residual_for_control(&s, &m, &k, &v(&[0.0]), &v(&[0.0]), h, 0.0, 100, RngStream::new(0), &ResidualOptions::default()).unwrap();
        let gap = 2.0 * h;
        assert_relative_eq!(r.term_gap, gap * gap / h, max_relative = 1e-14);
        assert_relative_eq!(r.term_cond, gap * gap / (h * h), max_relative = 1e-14);
    }

    #[test]
    fn mixture_combines_atoms() {
        let (s, m, k) = tangential_ball();
        let atoms = vec![
            Atom { point: v(&[0.2, 0.0]), weight: 0.5 },
            Atom { point: v(&[0.0, 1.0]), weight: 0.5 },
        ];
        let single = ControlSet::singleton(v(&[0.0]));
        let opts = ResidualOptions::balanced();
        let (all, per) = minimize_residual_mixture(&s, &m, &k, &atoms, 0.05, 0.0, &single, 1000, RngStream::new(8), &opts).unwrap();
        assert_eq!(per[0].total, 0.0);
        assert_relative_eq!(all.total, 0.5 * per[1].total, max_relative = 1e-14);
        let bad = vec![Atom { point: v(&[0.0, 0.0]), weight: 0.7 }];
        assert!(minimize_residual_mixture(&s, &m, &k, &bad, 0.05, 0.0, &single, 1000, RngStream::new(8), &opts).is_err());
    }

    #[test]
    fn slope_fit() {
        let xs = [1.0, 0.5, 0.25, 0.125];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        assert_relative_eq!(loglog_slope(&xs, &ys).unwrap(), 2.0, max_relative = 1e-12);
        assert_eq!(loglog_slope(&xs, &[0.0, 0.0, 0.0, 1.0]), None);
    }
}
