//! Closed constraint sets `K` with distance, projection and boundary sampling.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tolerances;
use crate::{Matrix, Vector};

/// A `C²` function `φ` describing `K = {φ ≤ 0}`.
pub trait SmoothConstraint: Send + Sync + fmt::Debug {
    fn value(&self, x: &Vector) -> f64;
    fn gradient(&self, x: &Vector) -> Vector;
    fn hessian(&self, x: &Vector) -> Matrix;
    /// Whether `{φ ≤ 0}` is convex.
    fn is_convex(&self) -> bool {
        false
    }
}

/// Registry of level-set functions.
#[derive(Debug, Clone)]
pub enum SmoothFunction {
    /// `φ(x) = scale · (Σ_k w_k (x_k - c_k)² - r²)`.
    Ellipsoid {
        center: Vector,
        weights: Vector,
        radius: f64,
        scale: f64,
    },
    Custom(Arc<dyn SmoothConstraint>),
}

impl SmoothFunction {
    /// `scale · (|x - c|² - r²)`.
    pub fn sphere(center: Vector, radius: f64, scale: f64) -> Self {
        let n = center.len();
        SmoothFunction::Ellipsoid {
            center,
            weights: Vector::from_element(n, 1.0),
            radius,
            scale,
        }
    }

    pub fn value(&self, x: &Vector) -> f64 {
        match self {
            SmoothFunction::Ellipsoid {
                center,
                weights,
                radius,
                scale,
            } => {
                let s: f64 = (0..x.len()).map(|k| weights[k] * (x[k] - center[k]).powi(2)).sum();
                scale * (s - radius * radius)
            }
            SmoothFunction::Custom(f) => f.value(x),
        }
    }

    pub fn gradient(&self, x: &Vector) -> Vector {
        match self {
            SmoothFunction::Ellipsoid {
                center,
                weights,
                scale,
                ..
            } => Vector::from_fn(x.len(), |k, _| 2.0 * scale * weights[k] * (x[k] - center[k])),
            SmoothFunction::Custom(f) => f.gradient(x),
        }
    }

    pub fn hessian(&self, x: &Vector) -> Matrix {
        match self {
            SmoothFunction::Ellipsoid { weights, scale, .. } => {
                Matrix::from_diagonal(&weights.map(|w| 2.0 * scale * w))
            }
            SmoothFunction::Custom(f) => f.hessian(x),
        }
    }

    pub fn is_convex(&self) -> bool {
        match self {
            SmoothFunction::Ellipsoid { weights, scale, .. } => {
                *scale > 0.0 && weights.iter().all(|w| *w >= 0.0)
            }
            SmoothFunction::Custom(f) => f.is_convex(),
        }
    }
}

/// `K = {x : φ(x) ≤ 0}` with an interior anchor used by the boundary sampler.
#[derive(Debug, Clone)]
pub struct LevelSet {
    pub function: SmoothFunction,
    pub anchor: Vector,
}

#[derive(Debug, Clone)]
pub enum ConstraintSet {
    Ball { center: Vector, radius: f64 },
    /// `{x : ⟨a, x⟩ ≤ b}`.
    HalfSpace { normal: Vector, offset: f64 },
    LevelSet(LevelSet),
}

/// Output of [`ConstraintSet::project`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub point: Vector,
    pub distance: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl ConstraintSet {
    pub fn ball(center: Vector, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::invalid(format!("ball radius must be finite and >= 0, got {radius}")));
        }
        Ok(ConstraintSet::Ball { center, radius })
    }

    pub fn unit_ball(n: usize) -> Self {
        ConstraintSet::Ball {
            center: Vector::zeros(n),
            radius: 1.0,
        }
    }

    pub fn half_space(normal: Vector, offset: f64) -> Result<Self> {
        if normal.norm() == 0.0 || normal.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("half-space normal must be finite and nonzero"));
        }
        if !offset.is_finite() {
            return Err(Error::invalid("half-space offset must be finite"));
        }
        Ok(ConstraintSet::HalfSpace { normal, offset })
    }

    pub fn level_set(function: SmoothFunction, anchor: Vector) -> Result<Self> {
        let v = function.value(&anchor);
        if !(v < 0.0) {
            return Err(Error::invalid(format!(
                "level-set anchor must be interior (phi(anchor) < 0), got {v}"
            )));
        }
        Ok(ConstraintSet::LevelSet(LevelSet { function, anchor }))
    }

    pub fn dim(&self) -> usize {
        match self {
            ConstraintSet::Ball { center, .. } => center.len(),
            ConstraintSet::HalfSpace { normal, .. } => normal.len(),
            ConstraintSet::LevelSet(ls) => ls.anchor.len(),
        }
    }

    pub fn is_convex(&self) -> bool {
        match self {
            ConstraintSet::Ball { .. } | ConstraintSet::HalfSpace { .. } => true,
            ConstraintSet::LevelSet(ls) => ls.function.is_convex(),
        }
    }

    pub fn variant(&self) -> &'static str {
        match self {
            ConstraintSet::Ball { .. } => "ball",
            ConstraintSet::HalfSpace { .. } => "half-space",
            ConstraintSet::LevelSet(_) => "level-set",
        }
    }

    /// Smooth description `φ` of the set: `½(|x-c|² - r²)` for balls,
    /// `⟨a,x⟩ - b` for half-spaces.
    pub fn as_level_function(&self) -> LevelView<'_> {
        LevelView(self)
    }

    pub fn contains(&self, x: &Vector) -> bool {
        match self {
            ConstraintSet::LevelSet(ls) => ls.function.value(x) <= tolerances::MEMBERSHIP,
            _ => self.distance_convex(x) <= tolerances::MEMBERSHIP,
        }
    }

    fn distance_convex(&self, x: &Vector) -> f64 {
        match self {
            ConstraintSet::Ball { center, radius } => ((x - center).norm() - radius).max(0.0),
            ConstraintSet::HalfSpace { normal, offset } => ((normal.dot(x) - offset) / normal.norm()).max(0.0),
            ConstraintSet::LevelSet(_) => unreachable!("level sets are handled by the projection"),
        }
    }

    /// Euclidean projection `Π_K(x)`.
    ///
    /// Balls and half-spaces are exact. Level sets use damped Newton on the
    /// KKT system `y - x + λ∇φ(y) = 0, φ(y) = 0`, then a boundary-constrained
    /// gradient descent on `|y - x|²` when Newton stalls; `converged` is
    /// false when neither meets the tolerance.
    pub fn project(&self, x: &Vector) -> Result<ProjectionResult> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "point has length {}, constraint set lives in dimension {}",
                x.len(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cannot project a non-finite point"));
        }
        Ok(self.project_unchecked(x))
    }

    pub(crate) fn project_unchecked(&self, x: &Vector) -> ProjectionResult {
        match self {
            ConstraintSet::Ball { center, radius } => {
                let v = x - center;
                let r = v.norm();
                if r <= *radius {
                    exact(x.clone(), 0.0)
                } else {
                    exact(center + v * (radius / r), r - radius)
                }
            }
            ConstraintSet::HalfSpace { normal, offset } => {
                let excess = normal.dot(x) - offset;
                if excess <= 0.0 {
                    exact(x.clone(), 0.0)
                } else {
                    let nn = normal.norm_squared();
                    exact(x - normal * (excess / nn), excess / nn.sqrt())
                }
            }
            ConstraintSet::LevelSet(ls) => project_level_set(ls, x),
        }
    }

    pub fn distance(&self, x: &Vector) -> Result<f64> {
        Ok(self.project(x)?.distance)
    }

    /// `count` points on `∂K`, deterministic per `seed`.
    ///
    /// Balls normalise Gaussian directions, half-spaces project Gaussian
    /// points onto the hyperplane, level sets bisect along Gaussian rays
    /// from the anchor.
    pub fn boundary_sample(&self, count: usize, seed: u64) -> Result<Vec<Vector>> {
        if count == 0 {
            return Err(Error::invalid("boundary sample count must be at least 1"));
        }
        let n = self.dim();
        let base = RngStream::new(seed).child(crate::rng::lane::BOUNDARY);
        (0..count)
            .map(|i| {
                let z = Vector::from_vec(base.child(i as u64).normals(n));
                self.boundary_point(i, z)
            })
            .collect()
    }

    fn boundary_point(&self, ray: usize, z: Vector) -> Result<Vector> {
        match self {
            ConstraintSet::Ball { center, radius } => {
                let dir = unit(z);
                Ok(center + dir * *radius)
            }
            ConstraintSet::HalfSpace { normal, offset } => {
                let excess = normal.dot(&z) - offset;
                Ok(&z - normal * (excess / normal.norm_squared()))
            }
            ConstraintSet::LevelSet(ls) => {
                let dir = unit(z);
                ray_boundary(ls, &dir).ok_or_else(|| Error::BoundaryRootFailure {
                    ray,
                    direction: dir.iter().copied().collect(),
                })
            }
        }
    }
}

fn unit(mut z: Vector) -> Vector {
    let n = z.norm();
    if n == 0.0 {
        z[0] = 1.0;
        return z;
    }
    z / n
}

fn exact(point: Vector, distance: f64) -> ProjectionResult {
    ProjectionResult {
        point,
        distance,
        converged: true,
        iterations: 0,
    }
}

/// Borrowed smooth view of any constraint set.
#[derive(Debug, Clone, Copy)]
pub struct LevelView<'a>(&'a ConstraintSet);

impl LevelView<'_> {
    pub fn value(&self, x: &Vector) -> f64 {
        match self.0 {
            ConstraintSet::Ball { center, radius } => 0.5 * ((x - center).norm_squared() - radius * radius),
            ConstraintSet::HalfSpace { normal, offset } => normal.dot(x) - offset,
            ConstraintSet::LevelSet(ls) => ls.function.value(x),
        }
    }

    pub fn gradient(&self, x: &Vector) -> Vector {
        match self.0 {
            ConstraintSet::Ball { center, .. } => x - center,
            ConstraintSet::HalfSpace { normal, .. } => normal.clone(),
            ConstraintSet::LevelSet(ls) => ls.function.gradient(x),
        }
    }

    pub fn hessian(&self, x: &Vector) -> Matrix {
        let n = x.len();
        match self.0 {
            ConstraintSet::Ball { .. } => Matrix::identity(n, n),
            ConstraintSet::HalfSpace { .. } => Matrix::zeros(n, n),
            ConstraintSet::LevelSet(ls) => ls.function.hessian(x),
        }
    }
}

/// Bisection for `φ(anchor + t·dir) = 0`, `t > 0`.
fn ray_boundary(ls: &LevelSet, dir: &Vector) -> Option<Vector> {
    let f = |t: f64| ls.function.value(&(&ls.anchor + dir * t));
    let mut hi = 1.0;
    let mut doublings = 0;
    while !(f(hi) > 0.0) {
        hi *= 2.0;
        doublings += 1;
        if doublings > 60 {
            return None;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let t = if f(lo).abs() <= f(hi).abs() { lo } else { hi };
    let p = &ls.anchor + dir * t;
    (ls.function.value(&p).abs() <= tolerances::BOUNDARY_SAMPLE).then_some(p)
}

fn kkt_residual(ls: &LevelSet, x: &Vector, y: &Vector, lambda: f64) -> f64 {
    let station = y - x + ls.function.gradient(y) * lambda;
    (station.norm_squared() + ls.function.value(y).powi(2)).sqrt()
}

fn project_level_set(ls: &LevelSet, x: &Vector) -> ProjectionResult {
    let phi = &ls.function;
    if phi.value(x) <= 0.0 {
        return exact(x.clone(), 0.0);
    }
    let n = x.len();
    let scale = 1.0 + x.norm();
    let tol = tolerances::PROJECTION * scale;
    let mut y = x.clone();
    let mut lambda = 0.0;
    let mut res = kkt_residual(ls, x, &y, lambda);
    let mut iterations = 0;
    while iterations < tolerances::PROJECTION_NEWTON_ITERS {
        if res <= tol * 1e-4 && phi.value(&y).abs() <= tolerances::MEMBERSHIP * 1e-2 {
            break;
        }
        iterations += 1;
        let grad = phi.gradient(&y);
        let hess = phi.hessian(&y);
        let mut jac = Matrix::zeros(n + 1, n + 1);
        let top = Matrix::identity(n, n) + hess * lambda;
        jac.view_mut((0, 0), (n, n)).copy_from(&top);
        for k in 0..n {
            jac[(k, n)] = grad[k];
            jac[(n, k)] = grad[k];
        }
        let station = &y - x + &grad * lambda;
        let mut rhs = Vector::zeros(n + 1);
        for k in 0..n {
            rhs[k] = -station[k];
        }
        rhs[n] = -phi.value(&y);
        let Some(step) = jac.lu().solve(&rhs) else {
            break;
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand_y = &y + step.rows(0, n) * alpha;
            let cand_l = lambda + step[n] * alpha;
            let cand_res = kkt_residual(ls, x, &cand_y, cand_l);
            if cand_res.is_finite() && cand_res < res * (1.0 - 1e-4 * alpha) {
                y = cand_y;
                lambda = cand_l;
                res = cand_res;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if res <= tol && lambda >= 0.0 {
        finish(x, y, true, iterations)
    } else {
        let (y, ok, steps) = boundary_descent(ls, x);
        finish(x, y, ok, iterations + steps)
    }
}

fn finish(x: &Vector, mut y: Vector, converged: bool, iterations: usize) -> ProjectionResult {
    if !y.iter().all(|v| v.is_finite()) {
        y = x.clone();
    }
    ProjectionResult {
        distance: (x - &y).norm(),
        point: y,
        converged,
        iterations,
    }
}

/// Pulls `y` onto `{φ = 0}` along `∇φ`.
fn restore(ls: &LevelSet, mut y: Vector) -> Vector {
    for _ in 0..50 {
        let v = ls.function.value(&y);
        if v.abs() <= tolerances::MEMBERSHIP * 1e-2 {
            break;
        }
        let g = ls.function.gradient(&y);
        let gg = g.norm_squared();
        if gg == 0.0 {
            break;
        }
        y -= g * (v / gg);
    }
    y
}

/// Gradient descent of `|y - x|²` restricted to the zero level, started from
/// the boundary point on the segment anchor → x.
fn boundary_descent(ls: &LevelSet, x: &Vector) -> (Vector, bool, usize) {
    let dir = x - &ls.anchor;
    let len = dir.norm();
    let mut y = match ray_boundary(ls, &(&dir / len.max(f64::MIN_POSITIVE))) {
        Some(p) if (&p - &ls.anchor).norm() <= len => p,
        _ => restore(ls, x.clone()),
    };
    let tol = tolerances::PROJECTION * (1.0 + x.norm());
    let mut step = 0.5;
    for k in 0..tolerances::PROJECTION_FALLBACK_STEPS {
        let g = ls.function.gradient(&y);
        let gg = g.norm_squared();
        let r = &y - x;
        let tangential = if gg > 0.0 { &r - &g * (r.dot(&g) / gg) } else { r.clone() };
        if tangential.norm() <= tol && ls.function.value(&y).abs() <= tolerances::MEMBERSHIP {
            return (y, true, k);
        }
        let cand = restore(ls, &y - &tangential * step);
        if (&cand - x).norm() < r.norm() {
            y = cand;
            step = (step * 1.5).min(1.0);
        } else {
            step *= 0.5;
            if step < 1e-16 {
                break;
            }
        }
    }
    let g = ls.function.gradient(&y);
    let r = &y - x;
    let gg = g.norm_squared();
    let tangential = if gg > 0.0 { &r - &g * (r.dot(&g) / gg) } else { r };
    let ok = tangential.norm() <= tol && ls.function.value(&y).abs() <= tolerances::MEMBERSHIP;
    (y, ok, tolerances::PROJECTION_FALLBACK_STEPS)
}
