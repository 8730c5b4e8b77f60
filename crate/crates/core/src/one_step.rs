//! Exact one-step sampling and the exponential-Euler mild integrator.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::CoefficientModel;
use crate::rng::RngStream;
use crate::spectral::{sampling_factor, SpectralSpace};
use crate::tolerances;
use crate::{Matrix, Vector};

/// Gaussian law of `S(h)ξ + ∫S(h-s)f(ξ,u)ds + ∫S(h-s)g(ξ,u)dW_s` for a
/// constant control `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStepLaw {
    pub mean: Vector,
    pub covariance: Matrix,
    pub h: f64,
    pub control: Vector,
}

pub fn one_step_law(
    space: &SpectralSpace,
    model: &CoefficientModel,
    xi: &Vector,
    u: &Vector,
    h: f64,
) -> Result<OneStepLaw> {
    check_dims(space, model, xi, u)?;
    let drift = model.eval_drift(xi, u);
    let mean = space.semigroup_apply(h, xi)? + space.drift_convolution(h, &drift)?;
    let covariance = space.noise_covariance(h, &model.eval_noise(xi, u))?;
    Ok(OneStepLaw {
        mean,
        covariance,
        h,
        control: u.clone(),
    })
}

fn check_dims(space: &SpectralSpace, model: &CoefficientModel, xi: &Vector, u: &Vector) -> Result<()> {
    if model.state_dim() != space.dim() || model.noise_dim() != space.noise_dim() {
        return Err(Error::invalid("model and space dimensions disagree"));
    }
    if xi.len() != space.dim() {
        return Err(Error::invalid(format!(
            "initial state has length {}, expected {}",
            xi.len(),
            space.dim()
        )));
    }
    if u.len() != space.control_dim() {
        return Err(Error::invalid(format!(
            "control has length {}, expected {}",
            u.len(),
            space.control_dim()
        )));
    }
    if xi.iter().chain(u.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite state or control"));
    }
    Ok(())
}

impl OneStepLaw {
    /// `L` with `L Lᵀ ≈ covariance`.
    pub fn factor(&self) -> Matrix {
        sampling_factor(&self.covariance)
    }

    /// Samples `mean + L z_i` for the rows `z_i` of `normals` (`count × n`).
    pub fn realize(&self, normals: &Matrix) -> Vec<Vector> {
        let l = self.factor();
        (0..normals.nrows())
            .into_par_iter()
            .map(|i| &self.mean + &l * normals.row(i).transpose())
            .collect()
    }
}

/// `count` realisations of the law as a `count × n` matrix; row `i` uses the
/// normals of `stream.child(i)`, so equal streams give equal matrices.
pub fn sample_one_step(law: &OneStepLaw, count: usize, stream: RngStream) -> Result<Matrix> {
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let n = law.mean.len();
    let z = stream.normal_matrix(count, n);
    let rows = law.realize(&z);
    Ok(Matrix::from_fn(count, n, |i, j| rows[i][j]))
}

/// Feedback rule `u_k = strategy(t_k, X_k)`.
pub trait ControlStrategy: Sync {
    fn control(&self, t: f64, x: &Vector) -> Vector;
}

impl<F> ControlStrategy for F
where
    F: Fn(f64, &Vector) -> Vector + Sync,
{
    fn control(&self, t: f64, x: &Vector) -> Vector {
        self(t, x)
    }
}

/// Always applies the same control.
#[derive(Debug, Clone)]
pub struct ConstantControl(pub Vector);

impl ControlStrategy for ConstantControl {
    fn control(&self, _t: f64, _x: &Vector) -> Vector {
        self.0.clone()
    }
}

/// A sampled mild trajectory on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub path_id: u64,
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub controls: Vec<Vector>,
    pub stream_key: u64,
}

/// Number of steps of a uniform grid `0 = t_0 < … < t_N = horizon`.
pub fn grid_steps(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(horizon > 0.0) || !dt.is_finite() || !horizon.is_finite() {
        return Err(Error::invalid(format!("need dt > 0 and T > 0, got dt={dt}, T={horizon}")));
    }
    let steps = (horizon / dt).round();
    if steps < 1.0 || (steps * dt - horizon).abs() > tolerances::GRID_DIVISIBILITY * horizon.max(1.0) {
        return Err(Error::invalid(format!("dt = {dt} does not divide the horizon {horizon}")));
    }
    Ok(steps as usize)
}

/// One exponential-Euler step:
/// `S(Δ)x + Φ(Δ)f(x,u) + N`, `N = L z` with `L Lᵀ` the frozen covariance.
pub fn mild_step(
    space: &SpectralSpace,
    model: &CoefficientModel,
    x: &Vector,
    u: &Vector,
    dt: f64,
    z: &Vector,
) -> Result<Vector> {
    let law = one_step_law(space, model, x, u, dt)?;
    Ok(&law.mean + law.factor() * z)
}

/// Pathwise exponential-Euler step driven by a Brownian increment `dw`:
/// `S(Δ)(x + g(x,u) dw) + Φ(Δ)f(x,u)`.
pub fn mild_step_increment(
    space: &SpectralSpace,
    model: &CoefficientModel,
    x: &Vector,
    u: &Vector,
    dt: f64,
    dw: &Vector,
) -> Result<Vector> {
    let f = model.eval_drift(x, u);
    let g = model.eval_noise(x, u);
    let kicked = x + g.matrix() * dw;
    Ok(space.semigroup_apply(dt, &kicked)? + space.drift_convolution(dt, &f)?)
}

pub(crate) fn check_blow_up(step: usize, x: &Vector) -> Result<()> {
    let norm = x.norm();
    if !norm.is_finite() || norm > tolerances::BLOW_UP {
        return Err(Error::BlowUp { step, norm });
    }
    Ok(())
}

/// Exponential-Euler trajectory on `[0, horizon]`; step `k` draws its noise
/// from `stream.child(k)`.
pub fn integrate_mild(
    space: &SpectralSpace,
    model: &CoefficientModel,
    xi: &Vector,
    strategy: &dyn ControlStrategy,
    horizon: f64,
    dt: f64,
    stream: RngStream,
) -> Result<Trajectory> {
    let steps = grid_steps(horizon, dt)?;
    let n = space.dim();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps);
    let mut x = xi.clone();
    times.push(0.0);
    states.push(x.clone());
    for k in 0..steps {
        let t = k as f64 * dt;
        let u = strategy.control(t, &x);
        let z = Vector::from_vec(stream.child(k as u64).normals(n));
        x = mild_step(space, model, &x, &u, dt, &z)?;
        check_blow_up(k, &x)?;
        times.push((k + 1) as f64 * dt);
        states.push(x.clone());
        controls.push(u);
    }
    Ok(Trajectory {
        path_id: 0,
        times,
        states,
        controls,
        stream_key: stream.key(),
    })
}

/// Pathwise variant of [`integrate_mild`] driven by explicit Brownian
/// increments, one `m`-vector per step.
pub fn integrate_mild_driven(
    space: &SpectralSpace,
    model: &CoefficientModel,
    xi: &Vector,
    strategy: &dyn ControlStrategy,
    dt: f64,
    increments: &[Vector],
) -> Result<Trajectory> {
    let mut x = xi.clone();
    let mut times = vec![0.0];
    let mut states = vec![x.clone()];
    let mut controls = Vec::with_capacity(increments.len());
    for (k, dw) in increments.iter().enumerate() {
        let u = strategy.control(k as f64 * dt, &x);
        x = mild_step_increment(space, model, &x, &u, dt, dw)?;
        check_blow_up(k, &x)?;
        times.push((k + 1) as f64 * dt);
        states.push(x.clone());
        controls.push(u);
    }
    Ok(Trajectory {
        path_id: 0,
        times,
        states,
        controls,
        stream_key: 0,
    })
}

/// Independent paths; path `p` uses `RngStream::new(seed).child(DYNAMICS).child(p)`.
/// The result is sorted by path id.
#[allow(clippy::too_many_arguments)]
pub fn simulate_ensemble(
    space: &SpectralSpace,
    model: &CoefficientModel,
    xi: &Vector,
    strategy: &dyn ControlStrategy,
    horizon: f64,
    dt: f64,
    paths: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let base = RngStream::new(seed).child(crate::rng::lane::DYNAMICS);
    (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut tr = integrate_mild(space, model, xi, strategy, horizon, dt, base.child(p as u64))?;
            tr.path_id = p as u64;
            Ok(tr)
        })
        .collect()
}

/// CSV with columns `path_id, step, time, x_1..x_n, u_1..u_d`; the terminal
/// row leaves the control cells empty.
pub fn write_trajectories_csv<W: Write>(out: &mut W, trajectories: &[Trajectory]) -> std::io::Result<()> {
    let Some(first) = trajectories.first() else {
        return Ok(());
    };
    let n = first.states[0].len();
    let d = first.controls.first().map_or(0, |u| u.len());
    let mut header = vec!["path_id".to_string(), "step".into(), "time".into()];
    header.extend((1..=n).map(|k| format!("x_{k}")));
    header.extend((1..=d).map(|k| format!("u_{k}")));
    writeln!(out, "{}", header.join(","))?;
    for tr in trajectories {
        for (k, (t, x)) in tr.times.iter().zip(&tr.states).enumerate() {
            let mut row = vec![tr.path_id.to_string(), k.to_string(), t.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            match tr.controls.get(k) {
                Some(u) => row.extend(u.iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), d)),
            }
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Family, LinearModel};
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    fn scalar_model(mu: f64, drift: f64, sigma: f64) -> (SpectralSpace, CoefficientModel) {
        let space = SpectralSpace::new(vec![mu], 1, 1).unwrap();
        let model = CoefficientModel::new(
            &space,
            Family::Constant {
                drift: v(&[drift]),
                noise: Matrix::from_element(1, 1, sigma),
            },
            1.0,
            0.0,
        )
        .unwrap();
        (space, model)
    }

    #[test]
    fn law_examples() {
        let space = SpectralSpace::new(vec![-0.5, 0.3], 1, 1).unwrap();
        let zero = CoefficientModel::new(&space, Family::Zero, 1.0, 0.0).unwrap();
        let xi = v(&[1.0, 2.0]);
        let law = one_step_law(&space, &zero, &xi, &v(&[0.0]), 0.4).unwrap();
        assert_eq!(law.mean, space.semigroup_apply(0.4, &xi).unwrap());
        assert_eq!(law.covariance, Matrix::zeros(2, 2));

        let (s, m) = scalar_model(0.0, -1.0, 0.0);
        let law = one_step_law(&s, &m, &v(&[0.0]), &v(&[0.0]), 0.25).unwrap();
        assert_eq!(law.mean[0], -0.25);
        assert_eq!(law.covariance[(0, 0)], 0.0);

        let (s, m) = scalar_model(-1.0, 0.0, 1.0);
        let law = one_step_law(&s, &m, &v(&[1.0]), &v(&[0.0]), 1.0).unwrap();
        assert_relative_eq!(law.mean[0], (-1f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(law.covariance[(0, 0)], 0.5 * (1.0 - (-2f64).exp()), max_relative = 1e-14);
    }

    #[test]
    fn sampling_examples() {
        let (s, m) = scalar_model(0.0, 0.5, 0.0);
        let law = one_step_law(&s, &m, &v(&[1.0]), &v(&[0.0]), 0.5).unwrap();
        let z = sample_one_step(&law, 10, RngStream::new(1)).unwrap();
        assert!(z.iter().all(|x| *x == 1.25));

        let (s, m) = scalar_model(-1.0, 0.0, 1.0);
        let law = one_step_law(&s, &m, &v(&[0.0]), &v(&[0.0]), 1.0).unwrap();
        let count = 100_000;
        let a = sample_one_step(&law, count, RngStream::new(4)).unwrap();
        let b = sample_one_step(&law, count, RngStream::new(4)).unwrap();
        assert_eq!(a, b);
        let mean = a.mean();
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
        let target = 0.432_332_358_381_693_6;
        // Chi-square concentration: sd of the sample variance is sqrt(2/count)·σ².
        assert!((var - target).abs() <= 3.0 * (2.0 / count as f64).sqrt() * target);
        assert!(sample_one_step(&law, 0, RngStream::new(4)).is_err());
    }

    #[test]
    fn zero_model_follows_semigroup_flow() {
        let space = SpectralSpace::new(vec![-1.0, 0.5], 1, 1).unwrap();
        let zero = CoefficientModel::new(&space, Family::Zero, 1.0, 0.0).unwrap();
        let xi = v(&[1.0, -1.0]);
        let tr = integrate_mild(&space, &zero, &xi, &ConstantControl(v(&[0.0])), 1.0, 0.125, RngStream::new(0)).unwrap();
        assert_eq!(tr.states.len(), 9);
        for (t, x) in tr.times.iter().zip(&tr.states) {
            let exact = space.semigroup_apply(*t, &xi).unwrap();
            assert!((x - exact).norm() <= 1e-14);
        }
    }

    #[test]
    fn ornstein_uhlenbeck_moments() {
        let (s, m) = scalar_model(-1.0, 0.0, 1.0);
        let paths = 100_000;
        let ens = simulate_ensemble(&s, &m, &v(&[1.0]), &ConstantControl(v(&[0.0])), 1.0, 0.1, paths, 21).unwrap();
        let terminal: Vec<f64> = ens.iter().map(|t| t.states.last().unwrap()[0]).collect();
        let mean = terminal.iter().sum::<f64>() / paths as f64;
        let var = terminal.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (paths - 1) as f64;
        let exact_mean = (-1f64).exp();
        let exact_var = 0.5 * (1.0 - (-2f64).exp());
        let se_mean = (exact_var / paths as f64).sqrt();
        let se_var = exact_var * (2.0 / paths as f64).sqrt();
        assert!((mean - exact_mean).abs() <= 3.0 * se_mean, "{mean}");
        assert!((var - exact_var).abs() <= 3.0 * se_var, "{var}");
    }

    #[test]
    fn grid_must_divide_horizon() {
        assert_eq!(grid_steps(1.0, 0.25).unwrap(), 4);
        assert_eq!(grid_steps(1.0, 0.1).unwrap(), 10);
        assert!(grid_steps(1.0, 0.3).is_err());
        assert!(grid_steps(1.0, 0.0).is_err());
    }

    #[test]
    fn blow_up_reports_step() {
        let space = SpectralSpace::new(vec![40.0], 1, 1).unwrap();
        let zero = CoefficientModel::new(&space, Family::Zero, 1.0, 0.0).unwrap();
        let err = integrate_mild(&space, &zero, &v(&[1.0]), &ConstantControl(v(&[0.0])), 1.0, 0.1, RngStream::new(0)).unwrap_err();
        match err {
            Error::BlowUp { step, .. } => assert_eq!(step, 6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn frozen_law_consistency_on_linear_model() {
        let space = SpectralSpace::new(vec![-0.5, 0.2], 1, 1).unwrap();
        let lin = LinearModel::new(
            Matrix::from_column_slice(2, 1, &[1.0, -1.0]),
            vec![Matrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.2])],
            vec![Matrix::from_column_slice(2, 1, &[0.3, 0.1])],
        )
        .unwrap();
        let model = CoefficientModel::new(&space, Family::Linear(lin), 1.0, 0.0).unwrap();
        let xi = v(&[0.4, -0.3]);
        let u = v(&[0.5]);
        let h = 0.01;
        let law = one_step_law(&space, &model, &xi, &u, h).unwrap();
        let paths = 40_000;
        let ens = simulate_ensemble(&space, &model, &xi, &ConstantControl(u.clone()), h, h, paths, 5).unwrap();
        let terminal: Vec<Vector> = ens.iter().map(|t| t.states[1].clone()).collect();
        let mean = terminal.iter().fold(Vector::zeros(2), |a, x| a + x) / paths as f64;
        let se = (law.covariance.diagonal() / paths as f64).map(f64::sqrt);
        for k in 0..2 {
            assert!((mean[k] - law.mean[k]).abs() <= 4.0 * se[k] + h * h);
        }
    }

    #[test]
    fn csv_layout() {
        let (s, m) = scalar_model(0.0, 1.0, 0.0);
        let tr = integrate_mild(&s, &m, &v(&[0.0]), &ConstantControl(v(&[0.5])), 0.5, 0.25, RngStream::new(0)).unwrap();
        let mut buf = Vec::new();
        write_trajectories_csv(&mut buf, &[tr]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "path_id,step,time,x_1,u_1\n0,0,0,0,0.5\n0,1,0.25,0.25,0.5\n0,2,0.5,0.5,\n");
    }
}
