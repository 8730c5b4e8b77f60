//! Numerical tolerances shared by every module.

/// Membership predicate tolerance: `x ∈ K` when `d_K(x) ≤ MEMBERSHIP` (or
/// `φ(x) ≤ MEMBERSHIP` for level sets).
pub const MEMBERSHIP: f64 = 1e-10;

/// Stationarity tolerance of the level-set projection solver.
pub const PROJECTION: f64 = 1e-8;

/// Maximum damped-Newton iterations of the level-set projection.
pub const PROJECTION_NEWTON_ITERS: usize = 100;

/// Steps of the gradient-descent fallback of the level-set projection.
pub const PROJECTION_FALLBACK_STEPS: usize = 1000;

/// Below this `|mu·h|` the ratios `(e^z - 1)/z` switch to a Taylor series.
pub const SERIES_SWITCH: f64 = 1e-8;

/// Relative diagonal jitter (times the trace) added before Cholesky.
pub const COVARIANCE_JITTER: f64 = 1e-12;

/// State norm above which an integrator declares blow-up.
pub const BLOW_UP: f64 = 1e12;

/// `|φ(x)|` accepted for a point handed to the boundary checks.
pub const BOUNDARY: f64 = 1e-9;

/// `|φ(x)|` guaranteed by the boundary sampler.
pub const BOUNDARY_SAMPLE: f64 = 1e-10;

/// Sphere tolerance `| |x| - 1 |` of the unit-ball check.
pub const UNIT_SPHERE: f64 = 1e-10;

/// The drift/curvature condition passes when its left-hand side is `≤ DN1`.
pub const DN1: f64 = 1e-8;

/// The tangential-noise condition passes when `|G*(x)Dφ(x)| ≤ DN2·|Dφ|·|G|_HS`.
pub const DN2: f64 = 1e-8;

/// Accepted mismatch between `dt·N` and the horizon.
pub const GRID_DIVISIBILITY: f64 = 1e-12;

