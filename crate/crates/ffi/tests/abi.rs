use std::ffi::CStr;
use std::process::Command;
use std::ptr;

use attrsets_core::estimator::{Estimator, EstimatorConfig, Moments};
use attrsets_core::loss::clipped_log_loss;
use attrsets_core::math::{beta_coefficients, Prior};
use attrsets_core::sim::{generate_attribution_sets, sample_stream, SyntheticTask};
use attrsets_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let needed = unsafe { attrsets_last_error(buf.as_mut_ptr(), buf.len()) };
    if needed == 0 {
        return String::new();
    }
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn tail_matches_known_value() {
    let mut out = 0.0;
    let status = unsafe { attrsets_binomial_tail(12, 0.25, 4, &mut out) };
    assert_eq!(status, AttrsetsStatus::Ok);
    assert!((out - 0.35122138261795044).abs() < 1e-15);
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut out = 0.0;
    assert_eq!(unsafe { attrsets_binomial_tail(12, 1.5, 4, &mut out) }, AttrsetsStatus::Domain);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { attrsets_binomial_tail(12, 0.5, 4, ptr::null_mut()) }, AttrsetsStatus::NullPointer);
    assert!(last_error().contains("null"));
    // success clears the message
    assert_eq!(unsafe { attrsets_binomial_tail(12, 0.5, 4, &mut out) }, AttrsetsStatus::Ok);
    assert_eq!(unsafe { attrsets_last_error(ptr::null_mut(), 0) }, 0);
}

#[test]
fn truncated_error_buffer_is_terminated() {
    let mut out = 0.0;
    unsafe { attrsets_binomial_tail(3, -1.0, 1, &mut out) };
    let mut buf = [1 as std::ffi::c_char; 4];
    let needed = unsafe { attrsets_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(needed > 4);
    assert_eq!(buf[3], 0);
}

#[test]
fn beta_matches_core() {
    let mut out = AttrsetsBeta::default();
    let status = unsafe { attrsets_beta_coefficients(10, 0.5, 2, 2, 0.5, &mut out) };
    assert_eq!(status, AttrsetsStatus::Ok);
    let b = beta_coefficients(10, 0.5, 2, 2, 0.5).unwrap();
    assert_eq!((out.beta1, out.beta0, out.tail), (b.beta1, b.beta0, b.tail));
    let status = unsafe { attrsets_beta_coefficients(10, 0.5, 0, 2, 0.5, &mut out) };
    assert_eq!(status, AttrsetsStatus::Domain);
}

#[test]
fn prior_handles() {
    let mut prior = ptr::null_mut();
    let w = [0.25, 0.75];
    assert_eq!(unsafe { attrsets_prior_new(w.as_ptr(), 2, &mut prior) }, AttrsetsStatus::Ok);
    let (mut k, mut sigma) = (0usize, 0.0);
    unsafe {
        assert_eq!(attrsets_prior_k(prior, &mut k), AttrsetsStatus::Ok);
        assert_eq!(attrsets_prior_sigma(prior, &mut sigma), AttrsetsStatus::Ok);
        attrsets_prior_free(prior);
        attrsets_prior_free(ptr::null_mut());
    }
    assert_eq!(k, 2);
    assert!((sigma - 0.625).abs() < 1e-15);
    let bad = [0.5, 0.6];
    let mut prior = ptr::null_mut();
    assert_eq!(unsafe { attrsets_prior_new(bad.as_ptr(), 2, &mut prior) }, AttrsetsStatus::Config);
    assert!(prior.is_null());
    assert_eq!(unsafe { attrsets_prior_uniform(0, &mut prior) }, AttrsetsStatus::Domain);
}

#[test]
fn aggregate_matches_core() {
    let k = 4;
    let task = SyntheticTask::shifted_gaussians(3, 0.2, 2.0).unwrap();
    let stream = sample_stream(&task, 2000, 11);
    let core_prior = Prior::exponential(k);
    let sets = generate_attribution_sets(&stream, &core_prior, 5).sets;
    let h: Vec<f64> = (0..stream.n()).map(|i| stream.features.row(i)[0].tanh() * 0.4 + 0.5).collect();
    let loss = clipped_log_loss(0.01).unwrap();
    let est = Estimator::new(EstimatorConfig::new(2000, 0.2, core_prior).unwrap(), loss).unwrap();
    let moments = Moments::from_predictions(&h, &loss);
    let expected = est.aggregate_estimate(&sets, &h, moments).unwrap().value;

    let flat: Vec<usize> = sets.iter().flat_map(|s| s.indices.iter().copied()).collect();
    unsafe {
        let mut prior = ptr::null_mut();
        assert_eq!(attrsets_prior_exponential(k, &mut prior), AttrsetsStatus::Ok);
        let mut handle = ptr::null_mut();
        let status = attrsets_estimator_new(2000, 0.2, prior, ATTRSETS_LOSS_LOGLOSS, 0.01, 0, &mut handle);
        assert_eq!(status, AttrsetsStatus::Ok, "{}", last_error());
        attrsets_prior_free(prior);
        let (mut f1, mut f2) = (0.0, 0.0);
        assert_eq!(attrsets_estimator_moments(handle, h.as_ptr(), h.len(), &mut f1, &mut f2), AttrsetsStatus::Ok);
        assert_eq!((f1, f2), (moments.e_f1, moments.e_f2));
        let mut value = 0.0;
        let status = attrsets_estimator_aggregate(handle, flat.as_ptr(), sets.len(), h.as_ptr(), h.len(), f1, f2, &mut value);
        assert_eq!(status, AttrsetsStatus::Ok, "{}", last_error());
        assert_eq!(value, expected);
        let status = attrsets_estimator_aggregate(handle, flat.as_ptr(), sets.len(), h.as_ptr(), 10, f1, f2, &mut value);
        assert_eq!(status, AttrsetsStatus::Dimension);
        let mut broken = flat.clone();
        broken[0] = 5000;
        let status = attrsets_estimator_aggregate(handle, broken.as_ptr(), sets.len(), h.as_ptr(), h.len(), f1, f2, &mut value);
        assert_eq!(status, AttrsetsStatus::Domain);
        attrsets_estimator_free(handle);
    }
}

#[test]
fn estimator_rejects_bad_loss_and_cap() {
    unsafe {
        let mut prior = ptr::null_mut();
        attrsets_prior_uniform(2, &mut prior);
        let mut handle = ptr::null_mut();
        assert_eq!(attrsets_estimator_new(1000, 0.2, prior, 9, 0.0, 0, &mut handle), AttrsetsStatus::Config);
        assert_eq!(attrsets_estimator_new(1000, 0.2, prior, ATTRSETS_LOSS_SQUARE, 0.0, 999, &mut handle), AttrsetsStatus::Config);
        assert_eq!(attrsets_estimator_new(1000, 0.2, ptr::null(), ATTRSETS_LOSS_SQUARE, 0.0, 0, &mut handle), AttrsetsStatus::NullPointer);
        assert!(handle.is_null());
        attrsets_prior_free(prior);
    }
}

#[test]
fn version_is_cargo_version() {
    let v = unsafe { CStr::from_ptr(attrsets_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/attrsets.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in [
        "attrsets_binomial_tail",
        "attrsets_beta_coefficients",
        "attrsets_prior_new",
        "attrsets_estimator_new",
        "attrsets_estimator_aggregate",
        "attrsets_estimator_free",
        "attrsets_last_error",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"attrsets.h\"\nint main(void) { double t; AttrsetsPrior *p = 0;\n\
         AttrsetsStatus s = attrsets_binomial_tail(4, 0.5, 2, &t);\n\
         attrsets_prior_free(p); return s == ATTRSETS_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    for (compiler, extra) in [("cc", vec!["-std=c99"]), ("c++", vec!["-x", "c++"])] {
        let status = Command::new(compiler)
            .args(&extra)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-I", include])
            .arg(&src)
            .status();
        match status {
            Ok(s) => assert!(s.success(), "{compiler} rejected the header"),
            Err(_) => eprintln!("{compiler} not found; skipping"),
        }
    }
}
