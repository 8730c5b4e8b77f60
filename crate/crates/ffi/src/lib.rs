//! C ABI over `viab_qt`.
//!
//! Every entry point returns a [`VqStatus`]. On failure a message is stored
//! per thread and can be read with [`vq_last_error`]. Objects are opaque
//! handles created by `vq_*_new*` and released by the matching `vq_*_free`.
//! Matrices cross the boundary row-major.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use libc::size_t;
use viab_qt::config::ExperimentConfig;
use viab_qt::constraint::ConstraintSet;
use viab_qt::experiment;
use viab_qt::model::{CoefficientModel, Family};
use viab_qt::nagumo;
use viab_qt::rng::RngStream;
use viab_qt::spectral::{HSOperator, SpectralSpace};
use viab_qt::tangency::{self, EtaRule, ResidualOptions};
use viab_qt::{Error, Matrix, Vector};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    OutsideDomain = 5,
    Numerical = 6,
    QuasiTangencyViolated = 7,
    ReplayMismatch = 8,
    Panic = 9,
}

impl From<&Error> for VqStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) => VqStatus::InvalidArgument,
            Error::Config(_) => VqStatus::Config,
            Error::Io { .. } => VqStatus::Io,
            Error::OutsideConstraint { .. } | Error::OffBoundary { .. } => VqStatus::OutsideDomain,
            Error::QuasiTangencyViolated { .. } => VqStatus::QuasiTangencyViolated,
            Error::ReplayMismatch { .. } => VqStatus::ReplayMismatch,
            Error::DegenerateCovariance { .. }
            | Error::BlowUp { .. }
            | Error::ProjectionNotConverged { .. }
            | Error::BoundaryRootFailure { .. }
            | Error::Numerical { .. } => VqStatus::Numerical,
        }
    }
}

/// Truncated state space.
pub struct VqSpace(SpectralSpace);

/// Coefficient model bound to a space.
pub struct VqModel(CoefficientModel);

/// Closed constraint set.
pub struct VqConstraint(ConstraintSet);

/// Parsed experiment configuration.
pub struct VqConfig(ExperimentConfig);

/// Residual of one control at one step size.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct VqResidual {
    pub term_gap: f64,
    pub term_cond: f64,
    pub total: f64,
    pub std_err: f64,
    /// Nonzero if some projection failed to converge.
    pub flagged: c_int,
}

/// Boundary conditions at one point.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct VqNagumo {
    pub lhs_dn1: f64,
    pub dn2_norm: f64,
    pub dn2_tol: f64,
    pub pass_dn1: c_int,
    pub pass_dn2: c_int,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

struct Fail(VqStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(VqStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(VqStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(VqStatus::InvalidArgument, msg.into())
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> VqStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => VqStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            VqStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn vector(p: *const f64, n: usize, what: &str) -> Result<Vector, Fail> {
    Ok(Vector::from_column_slice(slice(p, n, what)?))
}

fn copy_out(dst: &mut [f64], src: impl Iterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s;
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vq_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `(e^z - 1)/z`, continuous at zero.
#[no_mangle]
pub extern "C" fn vq_phi1(z: f64) -> f64 {
    viab_qt::spectral::phi1(z)
}

/// # Safety
/// `mu` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vq_space_new(
    mu: *const f64,
    n: size_t,
    noise_dim: size_t,
    control_dim: size_t,
    out: *mut *mut VqSpace,
) -> VqStatus {
    guard(|| {
        let mu = slice(mu, n, "mu")?.to_vec();
        emit(out, VqSpace(SpectralSpace::new(mu, noise_dim, control_dim)?))
    })
}

/// # Safety
/// `space` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn vq_space_free(space: *mut VqSpace) {
    if !space.is_null() {
        drop(Box::from_raw(space));
    }
}

/// # Safety
/// `space` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vq_space_dim(space: *const VqSpace) -> size_t {
    space.as_ref().map_or(0, |s| s.0.dim())
}

/// `out = S(t) x`. Both buffers have length `n`.
///
/// # Safety
/// Buffers must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn vq_space_semigroup_apply(
    space: *const VqSpace,
    t: f64,
    x: *const f64,
    out: *mut f64,
) -> VqStatus {
    guard(|| {
        let s = &handle(space, "space")?.0;
        let y = s.semigroup_apply(t, &vector(x, s.dim(), "x")?)?;
        copy_out(slice_mut(out, s.dim(), "out")?, y.iter().copied());
        Ok(())
    })
}

/// `out = ∫₀ʰ S(r) v dr`.
///
/// # Safety
/// Buffers must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn vq_space_drift_convolution(
    space: *const VqSpace,
    h: f64,
    v: *const f64,
    out: *mut f64,
) -> VqStatus {
    guard(|| {
        let s = &handle(space, "space")?.0;
        let y = s.drift_convolution(h, &vector(v, s.dim(), "v")?)?;
        copy_out(slice_mut(out, s.dim(), "out")?, y.iter().copied());
        Ok(())
    })
}

/// Covariance of `∫₀ʰ S(h-s) g dW_s`. `g` is `n×m`, `out` is `n×n`.
///
/// # Safety
/// `g` must hold `n*m` doubles and `out` `n*n`.
#[no_mangle]
pub unsafe extern "C" fn vq_space_noise_covariance(
    space: *const VqSpace,
    h: f64,
    g: *const f64,
    out: *mut f64,
) -> VqStatus {
    guard(|| {
        let s = &handle(space, "space")?.0;
        let (n, m) = (s.dim(), s.noise_dim());
        let g = Matrix::from_row_slice(n, m, slice(g, n * m, "g")?);
        let c = s.noise_covariance(h, &HSOperator::new(g))?;
        let dst = slice_mut(out, n * n, "out")?;
        for i in 0..n {
            for j in 0..n {
                dst[i * n + j] = c[(i, j)];
            }
        }
        Ok(())
    })
}

fn finish_model(space: &SpectralSpace, family: Family, c: f64, gamma: f64) -> Result<CoefficientModel, Fail> {
    if c > 0.0 {
        return Ok(CoefficientModel::new(space, family, c, gamma)?);
    }
    let probe = CoefficientModel::new(space, family, 1.0, gamma)?;
    let natural = probe.natural_lipschitz();
    let c = if natural > 0.0 { natural } else { 1.0 };
    Ok(CoefficientModel::new(space, probe.family().clone(), c, gamma)?)
}

/// Registry family with scalar parameters:
/// `zero` (none), `radial-restoring` and `tangential-rotation`
/// (`kappa, sigma`), `clipped-polynomial` (`linear, cubic, radius, sigma`).
/// `c <= 0` selects the natural constant of the family.
///
/// # Safety
/// `family` must be NUL-terminated; `params` must hold `nparams` doubles.
#[no_mangle]
pub unsafe extern "C" fn vq_model_new(
    space: *const VqSpace,
    family: *const c_char,
    params: *const f64,
    nparams: size_t,
    c: f64,
    gamma: f64,
    out: *mut *mut VqModel,
) -> VqStatus {
    guard(|| {
        let s = &handle(space, "space")?.0;
        let name = text(family, "family")?;
        let p = slice(params, nparams, "params")?;
        let want = |k: usize| {
            if p.len() == k {
                Ok(())
            } else {
                Err(invalid(format!("family '{name}' takes {k} params, got {}", p.len())))
            }
        };
        let fam = match name {
            "zero" => want(0).map(|_| Family::Zero)?,
            "radial-restoring" => want(2).map(|_| Family::RadialRestoring { kappa: p[0], sigma: p[1] })?,
            "tangential-rotation" => want(2).map(|_| Family::TangentialRotation { kappa: p[0], sigma: p[1] })?,
            "clipped-polynomial" => want(4).map(|_| Family::ClippedPolynomial {
                linear: p[0],
                cubic: p[1],
                radius: p[2],
                sigma: p[3],
            })?,
            other => return Err(invalid(format!("family '{other}' has no scalar constructor"))),
        };
        emit(out, VqModel(finish_model(s, fam, c, gamma)?))
    })
}

/// Constant coefficients `f ≡ drift` (`n`), `g ≡ noise` (`n×m`).
///
/// # Safety
/// Buffers must hold `n` and `n*m` doubles.
#[no_mangle]
pub unsafe extern "C" fn vq_model_new_constant(
    space: *const VqSpace,
    drift: *const f64,
    noise: *const f64,
    c: f64,
    gamma: f64,
    out: *mut *mut VqModel,
) -> VqStatus {
    guard(|| {
        let s = &handle(space, "space")?.0;
        let (n, m) = (s.dim(), s.noise_dim());
        let fam = Family::Constant {
            drift: vector(drift, n, "drift")?,
            noise: Matrix::from_row_slice(n, m, slice(noise, n * m, "noise")?),
        };
        emit(out, VqModel(finish_model(s, fam, c, gamma)?))
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn vq_model_free(model: *mut VqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `center` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn vq_constraint_new_ball(
    center: *const f64,
    n: size_t,
    radius: f64,
    out: *mut *mut VqConstraint,
) -> VqStatus {
    guard(|| {
        let k = ConstraintSet::ball(vector(center, n, "center")?, radius)?;
        emit(out, VqConstraint(k))
    })
}

/// `{x : <normal, x> <= offset}`.
///
/// # Safety
/// `normal` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn vq_constraint_new_half_space(
    normal: *const f64,
    n: size_t,
    offset: f64,
    out: *mut *mut VqConstraint,
) -> VqStatus {
    guard(|| {
        let k = ConstraintSet::half_space(vector(normal, n, "normal")?, offset)?;
        emit(out, VqConstraint(k))
    })
}

/// # Safety
/// `k` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn vq_constraint_free(k: *mut VqConstraint) {
    if !k.is_null() {
        drop(Box::from_raw(k));
    }
}

/// Nearest point of K to `x`; `distance` may be null.
///
/// # Safety
/// `x` and `out` must hold `dim(K)` doubles.
#[no_mangle]
pub unsafe extern "C" fn vq_constraint_project(
    k: *const VqConstraint,
    x: *const f64,
    out: *mut f64,
    distance: *mut f64,
) -> VqStatus {
    guard(|| {
        let k = &handle(k, "constraint")?.0;
        let n = k.dim();
        let p = k.project(&vector(x, n, "x")?)?;
        if !p.converged {
            return Err(Error::ProjectionNotConverged {
                iterations: p.iterations,
                residual: p.distance,
            }
            .into());
        }
        copy_out(slice_mut(out, n, "out")?, p.point.iter().copied());
        if !distance.is_null() {
            *distance = p.distance;
        }
        Ok(())
    })
}

/// Residual of the constant control `u` at step `h` from `count` samples.
/// `balanced != 0` selects the balanced correction.
///
/// # Safety
/// `xi` must hold `n` doubles and `u` `d` doubles.
#[no_mangle]
pub unsafe extern "C" fn vq_residual(
    space: *const VqSpace,
    model: *const VqModel,
    k: *const VqConstraint,
    xi: *const f64,
    u: *const f64,
    h: f64,
    lambda: f64,
    count: size_t,
    seed: u64,
    balanced: c_int,
    out: *mut VqResidual,
) -> VqStatus {
    guard(|| {
        let s = &handle(space, "space")?.0;
        let m = &handle(model, "model")?.0;
        let k = &handle(k, "constraint")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let opts = if balanced != 0 {
            ResidualOptions::balanced()
        } else {
            ResidualOptions {
                eta: EtaRule::Projection,
                ..ResidualOptions::default()
            }
        };
        let r = tangency::residual_for_control(
            s,
            m,
            k,
            &vector(xi, s.dim(), "xi")?,
            &vector(u, s.control_dim(), "u")?,
            h,
            lambda,
            count,
            RngStream::new(seed),
            &opts,
        )?;
        *out = VqResidual {
            term_gap: r.term_gap,
            term_cond: r.term_cond,
            total: r.total,
            std_err: r.std_err,
            flagged: r.flagged as c_int,
        };
        Ok(())
    })
}

/// First/second-order boundary conditions at `x` on the unit sphere.
///
/// # Safety
/// `x` must hold `n` doubles and `u` `d` doubles.
#[no_mangle]
pub unsafe extern "C" fn vq_nagumo_unit_ball(
    space: *const VqSpace,
    model: *const VqModel,
    x: *const f64,
    u: *const f64,
    out: *mut VqNagumo,
) -> VqStatus {
    guard(|| {
        let s = &handle(space, "space")?.0;
        let m = &handle(model, "model")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = nagumo::check_unit_ball_point(
            s,
            m,
            &vector(x, s.dim(), "x")?,
            &vector(u, s.control_dim(), "u")?,
        )?;
        *out = VqNagumo {
            lhs_dn1: r.lhs_dn1,
            dn2_norm: r.dn2_norm,
            dn2_tol: r.dn2_tol,
            pass_dn1: r.pass_dn1 as c_int,
            pass_dn2: r.pass_dn2 as c_int,
        };
        Ok(())
    })
}

/// Parses and validates a TOML experiment configuration.
///
/// # Safety
/// `toml` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vq_config_from_toml(toml: *const c_char, out: *mut *mut VqConfig) -> VqStatus {
    guard(|| emit(out, VqConfig(ExperimentConfig::from_toml_str(text(toml, "toml")?)?)))
}

/// # Safety
/// `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vq_config_from_file(path: *const c_char, out: *mut *mut VqConfig) -> VqStatus {
    guard(|| {
        let path = Path::new(text(path, "path")?);
        emit(out, VqConfig(ExperimentConfig::from_path(path)?))
    })
}

/// # Safety
/// `config` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn vq_config_free(config: *mut VqConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vq_config_set_seed(config: *mut VqConfig, seed: u64) -> VqStatus {
    guard(|| {
        let c = config.as_mut().ok_or_else(|| null("config"))?;
        c.0.experiment.seed = seed;
        Ok(())
    })
}

/// Builds the space, model and constraint described by `config`. Any of
/// the out pointers may be null to skip that object.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vq_config_build(
    config: *const VqConfig,
    space: *mut *mut VqSpace,
    model: *mut *mut VqModel,
    constraint: *mut *mut VqConstraint,
) -> VqStatus {
    guard(|| {
        let c = &handle(config, "config")?.0;
        let s = c.build_space()?;
        let m = c.build_model(&s)?;
        let k = c.build_constraint()?;
        if !space.is_null() {
            emit(space, VqSpace(s))?;
        }
        if !model.is_null() {
            emit(model, VqModel(m))?;
        }
        if !constraint.is_null() {
            emit(constraint, VqConstraint(k))?;
        }
        Ok(())
    })
}

/// Runs the experiment and writes its artifacts to `out_dir`. `passed`
/// receives the verdict (1 pass, 0 fail) and may be null.
///
/// # Safety
/// `config` must be a live handle and `out_dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vq_config_run(config: *const VqConfig, out_dir: *const c_char, passed: *mut c_int) -> VqStatus {
    guard(|| {
        let c = &handle(config, "config")?.0;
        let dir = Path::new(text(out_dir, "out_dir")?);
        let (execution, _) = experiment::run(c, dir)?;
        if !passed.is_null() {
            *passed = execution.passed as c_int;
        }
        Ok(())
    })
}

/// Re-runs an artifact directory; fails with `ReplayMismatch` on any
/// differing CSV byte.
///
/// # Safety
/// `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vq_replay(dir: *const c_char) -> VqStatus {
    guard(|| {
        experiment::replay(Path::new(text(dir, "dir")?))?;
        Ok(())
    })
}
