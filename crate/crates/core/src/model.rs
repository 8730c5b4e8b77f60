//! Coefficient families, control sets and assumption probes.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::spectral::{hs_norm, HSOperator, SpectralSpace};
use crate::{Matrix, Vector};

/// Extension hook for coefficient functions outside the built-in registry.
///
/// Implementations must be total on finite inputs and return an `n`-vector
/// from `drift` and an `n × m` operator from `noise`.
pub trait Coefficients: Send + Sync + fmt::Debug {
    fn drift(&self, x: &Vector, u: &Vector) -> Vector;
    fn noise(&self, x: &Vector, u: &Vector) -> HSOperator;
}

/// Linear control system coefficients: `f(x,u) = B u + b` and
/// `g(x,u) e_j = C_j x + D_j u + e_j` (offsets default to zero).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub b: Matrix,
    pub c: Vec<Matrix>,
    pub d: Vec<Matrix>,
    pub drift_offset: Vector,
    pub noise_offset: Matrix,
}

impl LinearModel {
    pub fn new(b: Matrix, c: Vec<Matrix>, d: Vec<Matrix>) -> Result<Self> {
        let n = b.nrows();
        let m = c.len();
        let model = LinearModel {
            drift_offset: Vector::zeros(n),
            noise_offset: Matrix::zeros(n, m),
            b,
            c,
            d,
        };
        model.check()?;
        Ok(model)
    }

    pub fn with_offsets(mut self, drift: Vector, noise: Matrix) -> Result<Self> {
        self.drift_offset = drift;
        self.noise_offset = noise;
        self.check()?;
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn noise_dim(&self) -> usize {
        self.c.len()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn check(&self) -> Result<()> {
        let (n, d) = self.b.shape();
        let m = self.c.len();
        if m == 0 {
            return Err(Error::invalid("linear model needs at least one noise matrix C_j"));
        }
        if self.d.len() != m {
            return Err(Error::invalid(format!(
                "linear model has {m} C matrices but {} D matrices",
                self.d.len()
            )));
        }
        for (j, cj) in self.c.iter().enumerate() {
            if cj.shape() != (n, n) {
                return Err(Error::invalid(format!("C[{j}] must be {n}x{n}")));
            }
        }
        for (j, dj) in self.d.iter().enumerate() {
            if dj.shape() != (n, d) {
                return Err(Error::invalid(format!("D[{j}] must be {n}x{d}")));
            }
        }
        if self.drift_offset.len() != n {
            return Err(Error::invalid(format!("drift offset must have length {n}")));
        }
        if self.noise_offset.shape() != (n, m) {
            return Err(Error::invalid(format!("noise offset must be {n}x{m}")));
        }
        Ok(())
    }

    fn drift(&self, u: &Vector) -> Vector {
        &self.b * u + &self.drift_offset
    }

    fn noise(&self, x: &Vector, u: &Vector) -> HSOperator {
        let n = self.state_dim();
        let mut g = self.noise_offset.clone();
        for j in 0..self.noise_dim() {
            let col = &self.c[j] * x + &self.d[j] * u;
            for i in 0..n {
                g[(i, j)] += col[i];
            }
        }
        HSOperator::new(g)
    }

    /// Lipschitz bound of `x ↦ g(x,u)` in HS norm, `sqrt(Σ_j |C_j|_F²)`.
    pub fn lipschitz_bound(&self) -> f64 {
        self.c
            .iter()
            .map(|cj| cj.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Built-in coefficient families.
#[derive(Debug, Clone)]
pub enum Family {
    /// `f ≡ 0`, `g ≡ 0`.
    Zero,
    /// `f ≡ drift`, `g ≡ noise`.
    Constant { drift: Vector, noise: Matrix },
    /// Linear control system with matrices `B`, `C_j`, `D_j`.
    Linear(LinearModel),
    /// `F(x) = -κ x`, `G ≡ σ` on the leading diagonal.
    RadialRestoring { kappa: f64, sigma: f64 },
    /// `F(x) = -κ x`, `G(x) e_j = σ R_j x` with `R_j` the rotation generator
    /// of coordinate plane `j mod ⌊n/2⌋`.
    TangentialRotation { kappa: f64, sigma: f64 },
    /// `F(x) = -(a + b|x_c|²) x_c` with `x_c` the radial clip of `x` to
    /// radius `R`; `G ≡ σ` on the leading diagonal.
    ClippedPolynomial {
        linear: f64,
        cubic: f64,
        radius: f64,
        sigma: f64,
    },
    /// Library-level extension.
    Custom(Arc<dyn Coefficients>),
}

impl Family {
    pub fn tag(&self) -> &'static str {
        match self {
            Family::Zero => "zero",
            Family::Constant { .. } => "constant",
            Family::Linear(_) => "linear",
            Family::RadialRestoring { .. } => "radial-restoring",
            Family::TangentialRotation { .. } => "tangential-rotation",
            Family::ClippedPolynomial { .. } => "clipped-polynomial",
            Family::Custom(_) => "custom",
        }
    }

    pub const REGISTRY: [&'static str; 6] = [
        "zero",
        "constant",
        "linear",
        "radial-restoring",
        "tangential-rotation",
        "clipped-polynomial",
    ];

    pub fn is_controlled(&self) -> bool {
        matches!(self, Family::Linear(_) | Family::Custom(_))
    }
}

fn diagonal_noise(n: usize, m: usize, sigma: f64) -> Matrix {
    let mut g = Matrix::zeros(n, m);
    for k in 0..n.min(m) {
        g[(k, k)] = sigma;
    }
    g
}

/// A coefficient model: registry family plus declared constants.
#[derive(Debug, Clone)]
pub struct CoefficientModel {
    family: Family,
    lipschitz: f64,
    gamma: f64,
    state_dim: usize,
    noise_dim: usize,
    control_dim: usize,
}

impl CoefficientModel {
    /// Validates dimensions against `space` and the declared constants:
    /// `c > 0` and `0 ≤ γ < 1/2`.
    pub fn new(space: &SpectralSpace, family: Family, lipschitz: f64, gamma: f64) -> Result<Self> {
        if !(lipschitz > 0.0) || !lipschitz.is_finite() {
            return Err(Error::config(format!(
                "declared Lipschitz/growth constant c must be positive, got {lipschitz}"
            )));
        }
        if !(0.0..0.5).contains(&gamma) {
            return Err(Error::config(format!(
                "gamma = {gamma} violates the singularity exponent bound 0 <= gamma < 1/2"
            )));
        }
        let (n, m, d) = (space.dim(), space.noise_dim(), space.control_dim());
        match &family {
            Family::Constant { drift, noise } => {
                if drift.len() != n || noise.shape() != (n, m) {
                    return Err(Error::config(format!(
                        "constant family needs a drift of length {n} and a {n}x{m} noise"
                    )));
                }
            }
            Family::Linear(lin) => {
                if lin.state_dim() != n || lin.noise_dim() != m || lin.control_dim() != d {
                    return Err(Error::config(format!(
                        "linear model is {}x{}x{}, space is n={n}, m={m}, d={d}",
                        lin.state_dim(),
                        lin.noise_dim(),
                        lin.control_dim()
                    )));
                }
            }
            Family::RadialRestoring { kappa, sigma } | Family::TangentialRotation { kappa, sigma } => {
                if !kappa.is_finite() || !sigma.is_finite() {
                    return Err(Error::config("kappa and sigma must be finite"));
                }
            }
            Family::ClippedPolynomial {
                linear,
                cubic,
                radius,
                sigma,
            } => {
                if !(*radius > 0.0) || !linear.is_finite() || !cubic.is_finite() || !sigma.is_finite() {
                    return Err(Error::config(
                        "clipped-polynomial needs finite coefficients and radius > 0",
                    ));
                }
            }
            Family::Zero | Family::Custom(_) => {}
        }
        Ok(CoefficientModel {
            family,
            lipschitz,
            gamma,
            state_dim: n,
            noise_dim: m,
            control_dim: d,
        })
    }

    /// Same as [`CoefficientModel::new`] with `c` set to
    /// [`natural_lipschitz`](Self::natural_lipschitz) and `γ = 0`.
    pub fn with_natural_constant(space: &SpectralSpace, family: Family) -> Result<Self> {
        let mut model = CoefficientModel::new(space, family, 1.0, 0.0)?;
        model.lipschitz = model.natural_lipschitz().max(f64::MIN_POSITIVE);
        Ok(model)
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// `f(x, u)`; uncontrolled families ignore `u`.
    pub fn eval_drift(&self, x: &Vector, u: &Vector) -> Vector {
        debug_assert_eq!(x.len(), self.state_dim);
        match &self.family {
            Family::Zero => Vector::zeros(self.state_dim),
            Family::Constant { drift, .. } => drift.clone(),
            Family::Linear(lin) => lin.drift(u),
            Family::RadialRestoring { kappa, .. } | Family::TangentialRotation { kappa, .. } => {
                x * (-kappa)
            }
            Family::ClippedPolynomial {
                linear,
                cubic,
                radius,
                ..
            } => {
                let norm = x.norm();
                let xc = if norm > *radius { x * (radius / norm) } else { x.clone() };
                let r2 = xc.norm_squared();
                xc * (-(linear + cubic * r2))
            }
            Family::Custom(c) => c.drift(x, u),
        }
    }

    /// `g(x, u)` as an `n × m` operator.
    pub fn eval_noise(&self, x: &Vector, u: &Vector) -> HSOperator {
        debug_assert_eq!(x.len(), self.state_dim);
        let (n, m) = (self.state_dim, self.noise_dim);
        match &self.family {
            Family::Zero => HSOperator::zeros(n, m),
            Family::Constant { noise, .. } => HSOperator::new(noise.clone()),
            Family::Linear(lin) => lin.noise(x, u),
            Family::RadialRestoring { sigma, .. } | Family::ClippedPolynomial { sigma, .. } => {
                HSOperator::new(diagonal_noise(n, m, *sigma))
            }
            Family::TangentialRotation { sigma, .. } => {
                let mut g = Matrix::zeros(n, m);
                let planes = n / 2;
                if planes > 0 {
                    for j in 0..m {
                        let p = j % planes;
                        let (a, b) = (2 * p, 2 * p + 1);
                        g[(a, j)] = sigma * x[b];
                        g[(b, j)] = -sigma * x[a];
                    }
                }
                HSOperator::new(g)
            }
            Family::Custom(c) => c.noise(x, u),
        }
    }

    /// Smallest constant for which the family satisfies the Lipschitz
    /// conditions on drift and noise (for linear models a Frobenius bound).
    pub fn natural_lipschitz(&self) -> f64 {
        match &self.family {
            Family::Zero | Family::Constant { .. } => 0.0,
            Family::Linear(lin) => lin.lipschitz_bound(),
            Family::RadialRestoring { kappa, .. } => kappa.abs(),
            Family::TangentialRotation { kappa, sigma } => {
                let planes = self.state_dim / 2;
                let multiplicity = if planes == 0 {
                    0.0
                } else {
                    self.noise_dim.div_ceil(planes) as f64
                };
                kappa.abs().max(sigma.abs() * multiplicity.sqrt())
            }
            Family::ClippedPolynomial {
                linear,
                cubic,
                radius,
                ..
            } => linear.abs() + 3.0 * cubic.abs() * radius * radius,
            Family::Custom(_) => self.lipschitz,
        }
    }

    /// Restriction to the first `modes` eigen-directions and the first
    /// `noise_dirs` noise directions: `J_l f`, `J_l g` with columns beyond
    /// `noise_dirs` dropped. The state dimension is kept; inactive modes are
    /// identically zero.
    pub fn galerkin(&self, modes: usize, noise_dirs: usize) -> Result<CoefficientModel> {
        if modes == 0 || modes > self.state_dim {
            return Err(Error::invalid(format!(
                "Galerkin modes must lie in 1..={}, got {modes}",
                self.state_dim
            )));
        }
        if noise_dirs == 0 || noise_dirs > self.noise_dim {
            return Err(Error::invalid(format!(
                "Galerkin noise directions must lie in 1..={}, got {noise_dirs}",
                self.noise_dim
            )));
        }
        let restricted = GalerkinRestriction {
            inner: self.clone(),
            modes,
            noise_dirs,
        };
        Ok(CoefficientModel {
            family: Family::Custom(Arc::new(restricted)),
            ..self.clone()
        })
    }

    /// Empirical Lipschitz ratios over random pairs in the ball of radius
    /// `domain_radius`, controls drawn from `[-1, 1]^d`.
    pub fn lipschitz_probe(&self, sample_count: usize, domain_radius: f64, seed: u64) -> Result<LipschitzProbe> {
        if sample_count < 2 {
            return Err(Error::invalid("lipschitz probe needs at least 2 samples"));
        }
        let (n, d) = (self.state_dim, self.control_dim);
        let base = RngStream::new(seed).child(crate::rng::lane::PROBE);
        let mut drift_ratio: f64 = 0.0;
        let mut noise_ratio: f64 = 0.0;
        for i in 0..sample_count {
            let mut rng = base.child(i as u64).rng();
            let x = random_in_ball(&mut rng, n, domain_radius);
            let y = random_in_ball(&mut rng, n, domain_radius);
            let u = Vector::from_fn(d, |_, _| rng.random_range(-1.0..=1.0));
            let dist = (&x - &y).norm();
            if dist == 0.0 {
                continue;
            }
            let df = (self.eval_drift(&x, &u) - self.eval_drift(&y, &u)).norm();
            let dg = hs_norm(&HSOperator::new(
                self.eval_noise(&x, &u).into_matrix() - self.eval_noise(&y, &u).into_matrix(),
            ));
            drift_ratio = drift_ratio.max(df / dist);
            noise_ratio = noise_ratio.max(dg / dist);
        }
        let limit = self.lipschitz * (1.0 + 1e-9);
        Ok(LipschitzProbe {
            drift_ratio,
            noise_ratio,
            declared: self.lipschitz,
            pass: drift_ratio <= limit && noise_ratio <= limit,
        })
    }
}

fn random_in_ball(rng: &mut impl Rng, n: usize, radius: f64) -> Vector {
    let dir = Vector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let norm = dir.norm().max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>().powf(1.0 / n as f64);
    dir * (r / norm)
}

#[derive(Debug)]
struct GalerkinRestriction {
    inner: CoefficientModel,
    modes: usize,
    noise_dirs: usize,
}

impl Coefficients for GalerkinRestriction {
    fn drift(&self, x: &Vector, u: &Vector) -> Vector {
        let mut f = self.inner.eval_drift(x, u);
        for k in self.modes..f.len() {
            f[k] = 0.0;
        }
        f
    }

    fn noise(&self, x: &Vector, u: &Vector) -> HSOperator {
        let mut g = self.inner.eval_noise(x, u).into_matrix();
        let (n, m) = g.shape();
        for i in 0..n {
            for j in 0..m {
                if i >= self.modes || j >= self.noise_dirs {
                    g[(i, j)] = 0.0;
                }
            }
        }
        HSOperator::new(g)
    }
}

/// Outcome of [`CoefficientModel::lipschitz_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzProbe {
    pub drift_ratio: f64,
    pub noise_ratio: f64,
    pub declared: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlShape {
    Box { half_widths: Vec<f64> },
    Ball { radius: f64 },
}

/// Closed, bounded, convex control set `U` with a grid discretisation.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet {
    shape: ControlShape,
    center: Vector,
    resolution: usize,
}

impl ControlSet {
    pub fn new(shape: ControlShape, center: Vector, resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::invalid("control grid resolution must be at least 1"));
        }
        if center.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("control set center must be finite"));
        }
        match &shape {
            ControlShape::Box { half_widths } => {
                if half_widths.len() != center.len() {
                    return Err(Error::invalid("box half-widths must match the control dimension"));
                }
                if half_widths.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
                    return Err(Error::invalid("box half-widths must be finite and >= 0"));
                }
            }
            ControlShape::Ball { radius } => {
                if !(*radius >= 0.0) || !radius.is_finite() {
                    return Err(Error::invalid("ball radius must be finite and >= 0"));
                }
            }
        }
        Ok(ControlSet {
            shape,
            center,
            resolution,
        })
    }

    /// The singleton `{u}`.
    pub fn singleton(u: Vector) -> Self {
        ControlSet {
            shape: ControlShape::Ball { radius: 0.0 },
            center: u,
            resolution: 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &Vector {
        &self.center
    }

    pub fn shape(&self) -> &ControlShape {
        &self.shape
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn contains(&self, u: &Vector) -> bool {
        let slack = 1e-12;
        match &self.shape {
            ControlShape::Box { half_widths } => u
                .iter()
                .zip(self.center.iter())
                .zip(half_widths)
                .all(|((v, c), w)| (v - c).abs() <= w * (1.0 + slack) + slack),
            ControlShape::Ball { radius } => (u - &self.center).norm() <= radius * (1.0 + slack) + slack,
        }
    }

    /// Nearest point of `U`.
    pub fn clamp(&self, u: &Vector) -> Vector {
        match &self.shape {
            ControlShape::Box { half_widths } => Vector::from_fn(u.len(), |k, _| {
                let (c, w) = (self.center[k], half_widths[k]);
                u[k].clamp(c - w, c + w)
            }),
            ControlShape::Ball { radius } => {
                let v = u - &self.center;
                let r = v.norm();
                if r <= *radius {
                    u.clone()
                } else {
                    &self.center + v * (radius / r)
                }
            }
        }
    }

    /// Half-spacing of the grid along each axis (zero for degenerate axes).
    pub fn grid_spacing(&self) -> Vec<f64> {
        let widths: Vec<f64> = match &self.shape {
            ControlShape::Box { half_widths } => half_widths.clone(),
            ControlShape::Ball { radius } => vec![*radius; self.dim()],
        };
        widths
            .iter()
            .map(|w| {
                if self.resolution > 1 {
                    2.0 * w / (self.resolution - 1) as f64
                } else {
                    *w
                }
            })
            .collect()
    }

    /// Deterministic grid of points of `U`, always containing the center.
    ///
    /// Box: `resolution` equispaced points per axis (last axis fastest).
    /// Ball: the grid of the bounding box filtered to the ball.
    pub fn control_grid(&self) -> Vec<Vector> {
        let d = self.dim();
        let widths: Vec<f64> = match &self.shape {
            ControlShape::Box { half_widths } => half_widths.clone(),
            ControlShape::Ball { radius } => {
                if *radius == 0.0 {
                    return vec![self.center.clone()];
                }
                vec![*radius; d]
            }
        };
        let r = self.resolution;
        let axis = |k: usize, i: usize| -> f64 {
            if r == 1 {
                self.center[k]
            } else {
                let t = -1.0 + 2.0 * i as f64 / (r - 1) as f64;
                self.center[k] + t * widths[k]
            }
        };
        let total = r.pow(d as u32);
        let mut points = Vec::with_capacity(total);
        let mut idx = vec![0usize; d];
        for _ in 0..total {
            let p = Vector::from_fn(d, |k, _| axis(k, idx[k]));
            if self.contains(&p) && !points.contains(&p) {
                points.push(p);
            }
            for k in (0..d).rev() {
                idx[k] += 1;
                if idx[k] < r {
                    break;
                }
                idx[k] = 0;
            }
        }
        if !points.contains(&self.center) {
            points.push(self.center.clone());
        }
        points
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn space(n: usize, m: usize, d: usize) -> SpectralSpace {
        SpectralSpace::new(vec![0.0; n], m, d).unwrap()
    }

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    #[test]
    fn drift_examples() {
        let s = space(2, 1, 2);
        let radial = CoefficientModel::new(&s, Family::RadialRestoring { kappa: 1.0, sigma: 0.0 }, 1.0, 0.0).unwrap();
        assert_eq!(radial.eval_drift(&v(&[1.0, 0.0]), &v(&[0.0, 0.0])), v(&[-1.0, 0.0]));

        let lin = LinearModel::new(Matrix::identity(2, 2), vec![Matrix::zeros(2, 2)], vec![Matrix::zeros(2, 2)]).unwrap();
        let linear = CoefficientModel::new(&s, Family::Linear(lin), 1.0, 0.0).unwrap();
        assert_eq!(linear.eval_drift(&v(&[5.0, -3.0]), &v(&[0.3, 0.4])), v(&[0.3, 0.4]));

        let zero = CoefficientModel::new(&s, Family::Zero, 1.0, 0.0).unwrap();
        assert_eq!(zero.eval_drift(&v(&[5.0, -3.0]), &v(&[1.0, 1.0])), v(&[0.0, 0.0]));
    }

    #[test]
    fn noise_examples() {
        let s = space(2, 1, 1);
        let tan = CoefficientModel::new(&s, Family::TangentialRotation { kappa: 1.0, sigma: 1.0 }, 1.0, 0.0).unwrap();
        let g = tan.eval_noise(&v(&[1.0, 0.0]), &v(&[0.0]));
        assert_eq!(g.column(0), v(&[0.0, -1.0]));

        let s1 = space(1, 1, 1);
        let constant = CoefficientModel::new(
            &s1,
            Family::Constant {
                drift: v(&[0.0]),
                noise: diagonal_noise(1, 1, 1.0),
            },
            1.0,
            0.0,
        )
        .unwrap();
        assert_eq!(constant.eval_noise(&v(&[42.0]), &v(&[0.0])).matrix()[(0, 0)], 1.0);

        let lin = LinearModel::new(Matrix::zeros(2, 1), vec![Matrix::identity(2, 2)], vec![Matrix::zeros(2, 1)]).unwrap();
        let linear = CoefficientModel::new(&s, Family::Linear(lin), 1.0, 0.0).unwrap();
        assert_eq!(linear.eval_noise(&v(&[0.2, 0.5]), &v(&[7.0])).column(0), v(&[0.2, 0.5]));
    }

    #[test]
    fn gamma_bound_is_enforced() {
        let s = space(1, 1, 1);
        let err = CoefficientModel::new(&s, Family::Zero, 1.0, 0.7).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("gamma < 1/2"));
        assert!(CoefficientModel::new(&s, Family::Zero, 1.0, 0.5).is_err());
        assert!(CoefficientModel::new(&s, Family::Zero, 1.0, 0.49).is_ok());
        assert!(CoefficientModel::new(&s, Family::Zero, 0.0, 0.0).is_err());
    }

    #[test]
    fn probe_examples() {
        let s = space(2, 1, 1);
        let zero = CoefficientModel::new(&s, Family::Zero, 1.0, 0.0).unwrap();
        let p = zero.lipschitz_probe(100, 10.0, 1).unwrap();
        assert_eq!((p.drift_ratio, p.noise_ratio, p.pass), (0.0, 0.0, true));

        let radial = Family::RadialRestoring { kappa: 1.0, sigma: 0.0 };
        let ok = CoefficientModel::new(&s, radial.clone(), 1.0, 0.0).unwrap();
        let p = ok.lipschitz_probe(100, 10.0, 1).unwrap();
        assert_relative_eq!(p.drift_ratio, 1.0, epsilon = 1e-9);
        assert!(p.pass);

        let tight = CoefficientModel::new(&s, radial, 0.5, 0.0).unwrap();
        assert!(!tight.lipschitz_probe(100, 10.0, 1).unwrap().pass);
        assert!(tight.lipschitz_probe(1, 10.0, 1).is_err());
    }

    fn registry(space: &SpectralSpace) -> Vec<CoefficientModel> {
        let (n, m, d) = (space.dim(), space.noise_dim(), space.control_dim());
        let mut rot = Matrix::zeros(n, n);
        rot[(0, 1)] = 1.0;
        rot[(1, 0)] = -1.0;
        let lin = LinearModel::new(
            Matrix::from_element(n, d, 0.5),
            (0..m).map(|j| rot.clone() * (j as f64 + 1.0)).collect(),
            (0..m).map(|_| Matrix::from_element(n, d, 0.1)).collect(),
        )
        .unwrap();
        let fams = vec![
            Family::Zero,
            Family::Constant {
                drift: Vector::from_element(n, 0.3),
                noise: diagonal_noise(n, m, 0.4),
            },
            Family::Linear(lin),
            Family::RadialRestoring { kappa: 2.0, sigma: 0.5 },
            Family::TangentialRotation { kappa: 1.0, sigma: 1.5 },
            Family::ClippedPolynomial {
                linear: 1.0,
                cubic: 0.5,
                radius: 2.0,
                sigma: 0.2,
            },
        ];
        fams.into_iter()
            .map(|f| CoefficientModel::with_natural_constant(space, f).unwrap())
            .collect()
    }

    #[test]
    fn registry_families_satisfy_declared_constants() {
        for (n, m) in [(2, 1), (3, 2), (4, 3)] {
            let s = space(n, m, 2);
            for model in registry(&s) {
                let p = model.lipschitz_probe(10_000, 10.0, 17).unwrap();
                assert!(p.pass, "{} fails its declared constant: {p:?}", model.family().tag());
            }
        }
    }

    #[test]
    fn linear_model_matches_matrix_products() {
        let s = space(3, 2, 2);
        let stream = RngStream::new(5);
        let mat = |k: u64, r: usize, c: usize| Matrix::from_vec(r, c, stream.child(k).normals(r * c));
        let lin = LinearModel::new(mat(0, 3, 2), vec![mat(1, 3, 3), mat(2, 3, 3)], vec![mat(3, 3, 2), mat(4, 3, 2)]).unwrap();
        let model = CoefficientModel::new(&s, Family::Linear(lin.clone()), 1.0, 0.0).unwrap();
        for i in 0..20 {
            let x = Vector::from_vec(stream.child(100 + i).normals(3));
            let u = Vector::from_vec(stream.child(200 + i).normals(2));
            let f = model.eval_drift(&x, &u);
            assert!((f - &lin.b * &u).abs().max() <= 1e-14);
            let g = model.eval_noise(&x, &u);
            for j in 0..2 {
                let direct = &lin.c[j] * &x + &lin.d[j] * &u;
                assert!((g.column(j) - direct).abs().max() <= 1e-14);
            }
        }
    }

    #[test]
    fn galerkin_restriction_zeroes_inactive_modes() {
        let s = space(4, 2, 1);
        let model = CoefficientModel::new(&s, Family::TangentialRotation { kappa: 1.0, sigma: 1.0 }, 1.0, 0.0).unwrap();
        let sub = model.galerkin(2, 1).unwrap();
        let x = v(&[0.1, 0.2, 0.3, 0.4]);
        let u = v(&[0.0]);
        assert_eq!(sub.eval_drift(&x, &u), v(&[-0.1, -0.2, 0.0, 0.0]));
        let g = sub.eval_noise(&x, &u);
        assert_eq!(g.column(0), v(&[0.2, -0.1, 0.0, 0.0]));
        assert_eq!(g.column(1), v(&[0.0, 0.0, 0.0, 0.0]));
        assert!(model.galerkin(0, 1).is_err());
        assert!(model.galerkin(2, 3).is_err());
    }

    #[test]
    fn control_grid_examples() {
        let single = ControlSet::new(ControlShape::Ball { radius: 0.0 }, v(&[0.3, -0.2]), 7).unwrap();
        assert_eq!(single.control_grid(), vec![v(&[0.3, -0.2])]);

        let bx = ControlSet::new(ControlShape::Box { half_widths: vec![1.0] }, v(&[0.0]), 3).unwrap();
        assert_eq!(bx.control_grid(), vec![v(&[-1.0]), v(&[0.0]), v(&[1.0])]);

        let ball = ControlSet::new(ControlShape::Ball { radius: 1.0 }, v(&[0.0, 0.0]), 5).unwrap();
        let grid = ball.control_grid();
        // Oracle: enumerate the 5x5 grid and keep points with norm <= 1.
        let mut expected = 0;
        for i in 0..5 {
            for j in 0..5 {
                let (a, b) = (-1.0 + 0.5 * i as f64, -1.0 + 0.5 * j as f64);
                if (a * a + b * b).sqrt() <= 1.0 {
                    expected += 1;
                }
            }
        }
        assert_eq!(grid.len(), expected);
        assert_eq!(grid.len(), 13);
        assert!(grid.iter().all(|p| p.norm() <= 1.0));
        assert_eq!(grid, ball.control_grid());
    }

    #[test]
    fn even_resolution_grid_keeps_center() {
        let bx = ControlSet::new(ControlShape::Box { half_widths: vec![1.0, 2.0] }, v(&[0.5, 0.0]), 2).unwrap();
        let grid = bx.control_grid();
        assert_eq!(grid.len(), 5);
        assert!(grid.contains(&v(&[0.5, 0.0])));
        assert!(grid.iter().all(|p| bx.contains(p)));
    }

    #[test]
    fn clamp_lands_in_set() {
        let ball = ControlSet::new(ControlShape::Ball { radius: 1.0 }, v(&[1.0, 1.0]), 3).unwrap();
        let c = ball.clamp(&v(&[4.0, 5.0]));
        assert!(ball.contains(&c));
        assert_relative_eq!((c - v(&[1.0, 1.0])).norm(), 1.0, epsilon = 1e-15);
    }
}
