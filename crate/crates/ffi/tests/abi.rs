use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use viab_qt_ffi::*;

fn last_error() -> String {
    let p = vq_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn space(mu: &[f64], m: usize, d: usize) -> *mut VqSpace {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { vq_space_new(mu.as_ptr(), mu.len(), m, d, &mut s) }, VqStatus::Ok);
    s
}

#[test]
fn semigroup_and_convolution_match_closed_forms() {
    let s = space(&[-1.0, 0.0, 2.0], 1, 1);
    let x = [1.0, 2.0, 3.0];
    let mut y = [0.0; 3];
    unsafe {
        assert_eq!(vq_space_dim(s), 3);
        assert_eq!(vq_space_semigroup_apply(s, 0.3, x.as_ptr(), y.as_mut_ptr()), VqStatus::Ok);
        assert!((y[0] - (-0.3f64).exp()).abs() < 1e-15);
        assert_eq!(y[1], 2.0);
        assert!((y[2] - 3.0 * 0.6f64.exp()).abs() < 1e-13);

        assert_eq!(vq_space_drift_convolution(s, 0.3, x.as_ptr(), y.as_mut_ptr()), VqStatus::Ok);
        assert!((y[1] - 0.6).abs() < 1e-15);
        assert!((y[0] - 0.3 * vq_phi1(-0.3)).abs() < 1e-15);
        vq_space_free(s);
    }
}

#[test]
fn covariance_is_row_major_and_symmetric() {
    let s = space(&[-1.0, -3.0], 2, 1);
    let g = [1.0, 0.5, 0.0, 2.0];
    let mut c = [0.0; 4];
    unsafe {
        assert_eq!(vq_space_noise_covariance(s, 0.1, g.as_ptr(), c.as_mut_ptr()), VqStatus::Ok);
        vq_space_free(s);
    }
    assert_eq!(c[1], c[2]);
    let expect01 = (0.5 * 2.0) * 0.1 * vq_phi1(-0.4);
    assert!((c[1] - expect01).abs() < 1e-15);
    assert!((c[0] - 1.25 * 0.1 * vq_phi1(-0.2)).abs() < 1e-15);
}

#[test]
fn errors_carry_status_and_message() {
    let mut s = ptr::null_mut();
    let status = unsafe { vq_space_new(ptr::null(), 0, 1, 1, &mut s) };
    assert_eq!(status, VqStatus::InvalidArgument);
    assert!(last_error().contains("dimension"));

    let status = unsafe { vq_space_new(ptr::null(), 2, 1, 1, &mut s) };
    assert_eq!(status, VqStatus::NullPointer);
    assert!(last_error().contains("mu"));

    let sp = space(&[0.0, 0.0], 1, 1);
    let mut m = ptr::null_mut();
    let name = CString::new("radial-restoring").unwrap();
    let p = [1.0, 0.1];
    let status = unsafe { vq_model_new(sp, name.as_ptr(), p.as_ptr(), 2, 1.0, 0.7, &mut m) };
    assert_eq!(status, VqStatus::Config);
    assert!(last_error().contains("gamma"));

    let name = CString::new("linear").unwrap();
    let status = unsafe { vq_model_new(sp, name.as_ptr(), p.as_ptr(), 2, 1.0, 0.0, &mut m) };
    assert_eq!(status, VqStatus::InvalidArgument);
    unsafe { vq_space_free(sp) };
}

#[test]
fn projection_onto_half_space() {
    let normal = [0.0, 1.0];
    let mut k = ptr::null_mut();
    let x = [3.0, 2.5];
    let mut p = [0.0; 2];
    let mut dist = 0.0;
    unsafe {
        assert_eq!(vq_constraint_new_half_space(normal.as_ptr(), 2, 1.0, &mut k), VqStatus::Ok);
        assert_eq!(vq_constraint_project(k, x.as_ptr(), p.as_mut_ptr(), &mut dist), VqStatus::Ok);
        vq_constraint_free(k);
    }
    assert_eq!(p, [3.0, 1.0]);
    assert!((dist - 1.5).abs() < 1e-15);
}

#[test]
fn residual_and_nagumo_through_the_abi() {
    let sp = space(&[0.0, 0.0], 1, 1);
    let mut model = ptr::null_mut();
    let mut ball = ptr::null_mut();
    let name = CString::new("tangential-rotation").unwrap();
    let p = [0.0, 0.5];
    let center = [0.0, 0.0];
    let xi = [0.6, 0.8];
    let u = [0.0];
    let mut r = VqResidual::default();
    let mut r2 = VqResidual::default();
    let mut n = VqNagumo::default();
    unsafe {
        assert_eq!(vq_model_new(sp, name.as_ptr(), p.as_ptr(), 2, 0.0, 0.0, &mut model), VqStatus::Ok);
        assert_eq!(vq_constraint_new_ball(center.as_ptr(), 2, 1.0, &mut ball), VqStatus::Ok);
        let st = vq_residual(sp, model, ball, xi.as_ptr(), u.as_ptr(), 0.01, 0.0, 2000, 9, 1, &mut r);
        assert_eq!(st, VqStatus::Ok);
        let st = vq_residual(sp, model, ball, xi.as_ptr(), u.as_ptr(), 0.01, 0.0, 2000, 9, 1, &mut r2);
        assert_eq!(st, VqStatus::Ok);
        assert_eq!(vq_nagumo_unit_ball(sp, model, xi.as_ptr(), u.as_ptr(), &mut n), VqStatus::Ok);
        let off = [0.5, 0.0];
        assert_eq!(vq_nagumo_unit_ball(sp, model, off.as_ptr(), u.as_ptr(), &mut n), VqStatus::OutsideDomain);
        vq_constraint_free(ball);
        vq_model_free(model);
        vq_space_free(sp);
    }
    assert_eq!(r.flagged, 0);
    assert!(r.total.is_finite() && r.total >= 0.0);
    assert_eq!(r.total.to_bits(), r2.total.to_bits());
    assert!((r.total - (r.term_gap + r.term_cond)).abs() <= 1e-12 * r.total.max(1.0));
}

const CONFIG: &str = r#"
[space]
mu = [0.0, 0.0]
m = 1
d = 1

[model]
family = "tangential-rotation"
params = { kappa = 1.0, sigma = 0.5 }

[constraint]
variant = "ball"
params = { radius = 1.0 }

[experiment]
kind = "nagumo"
seed = 3
nagumo_samples = 16
"#;

#[test]
fn config_build_run_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let toml = CString::new(CONFIG).unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut cfg = ptr::null_mut();
    let (mut s, mut m, mut k) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
    let mut passed = -1;
    unsafe {
        assert_eq!(vq_config_from_toml(toml.as_ptr(), &mut cfg), VqStatus::Ok, "{}", last_error());
        assert_eq!(vq_config_set_seed(cfg, 4), VqStatus::Ok);
        assert_eq!(vq_config_build(cfg, &mut s, &mut m, &mut k), VqStatus::Ok);
        assert_eq!(vq_space_dim(s), 2);
        assert_eq!(vq_config_run(cfg, out.as_ptr(), &mut passed), VqStatus::Ok, "{}", last_error());
        assert_eq!(vq_replay(out.as_ptr()), VqStatus::Ok, "{}", last_error());
        vq_space_free(s);
        vq_model_free(m);
        vq_constraint_free(k);
        vq_config_free(cfg);
    }
    assert_eq!(passed, 1);
    assert!(dir.path().join("nagumo_4.csv").exists());

    let bad = CString::new("[space]\nmu = [0.0]\nbogus = 1\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { vq_config_from_toml(bad.as_ptr(), &mut cfg) }, VqStatus::Config);
    assert!(cfg.is_null());
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/viab_qt.h")).unwrap();
    let src = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let mut count = 0;
    for line in src.lines() {
        if let Some(rest) = line.split("extern \"C\" fn ").nth(1) {
            let name = rest.split('(').next().unwrap();
            assert!(header.contains(&format!("{name}(")), "{name} missing from header");
            count += 1;
        }
    }
    assert!(count >= 20, "only {count} exports found");
}

#[test]
fn c_program_links_against_static_library() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test> -> target/<profile>
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libviab_qt_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let work = tempfile::tempdir().unwrap();
    let exe = work.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("a C compiler named `cc` is required for this test");
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "smoke exited {:?}: {}", out.status, String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
