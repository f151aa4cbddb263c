use std::ffi::{CStr, CString};
use std::ptr;

use pft_core::model::ModelConfig;
use pft_ffi::*;

const TINY: &str = r#"{"patch":{"height":16,"width":12,"channels":3,"patch":4,"stride":4,"dim":8},"depth":2,"heads":2,"mlp_ratio":2}"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pft_last_error()) }.to_string_lossy().into_owned()
}

fn tiny_model(seed: u64) -> *mut PftModel {
    let cfg = CString::new(TINY).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { pft_model_new(cfg.as_ptr(), 3, seed, &mut m) }, PftStatus::Ok);
    assert!(!m.is_null());
    m
}

fn images(n: usize, len: usize) -> Vec<f64> {
    (0..n * len).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()
}

#[test]
fn embedding_matches_the_rust_model() {
    let m = tiny_model(4);
    let dim = unsafe { pft_model_feature_dim(m) };
    let len = unsafe { pft_model_image_len(m) };
    assert_eq!((dim, len), (40, 3 * 16 * 12));
    let imgs = images(2, len);
    let mut out = vec![0.0; 2 * dim];
    assert_eq!(unsafe { pft_model_embed(m, imgs.as_ptr(), 2, out.as_mut_ptr(), out.len()) }, PftStatus::Ok);

    let cfg: ModelConfig = serde_json::from_str(TINY).unwrap();
    let reference = pft_core::model::PftModel::new(&cfg, 3, 4).unwrap();
    assert_eq!(unsafe { pft_model_param_count(m) }, reference.param_count());
    let batch = pft_core::Tensor::new(&[2, 3, 16, 12], imgs).unwrap();
    assert_eq!(reference.embed(&batch).unwrap().data(), &out[..]);
    unsafe { pft_model_free(m) };
}

#[test]
fn checkpoint_round_trip_through_the_c_api() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.pft").to_str().unwrap()).unwrap();
    let cfg = CString::new(TINY).unwrap();
    let m = tiny_model(9);
    assert_eq!(unsafe { pft_model_save(m, path.as_ptr()) }, PftStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { pft_model_load(path.as_ptr(), cfg.as_ptr(), &mut back) }, PftStatus::Ok);

    let len = unsafe { pft_model_image_len(m) };
    let imgs = images(1, len);
    let (mut a, mut b) = (vec![0.0; 40], vec![0.0; 40]);
    unsafe {
        pft_model_embed(m, imgs.as_ptr(), 1, a.as_mut_ptr(), 40);
        pft_model_embed(back, imgs.as_ptr(), 1, b.as_mut_ptr(), 40);
    }
    assert_eq!(a, b);
    unsafe {
        pft_model_free(m);
        pft_model_free(back);
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut m = ptr::null_mut();
    let bad = CString::new(r#"{"depth":0}"#).unwrap();
    assert_eq!(unsafe { pft_model_new(bad.as_ptr(), 3, 0, &mut m) }, PftStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("depth"), "{}", last_error());

    let typo = CString::new(r#"{"dpeth":2}"#).unwrap();
    assert_eq!(unsafe { pft_model_new(typo.as_ptr(), 3, 0, &mut m) }, PftStatus::Config);

    assert_eq!(unsafe { pft_model_new(ptr::null(), 3, 0, ptr::null_mut()) }, PftStatus::NullArgument);
    assert!(last_error().contains("out"));

    let missing = CString::new("/nonexistent/x.pft").unwrap();
    assert_eq!(unsafe { pft_model_load(missing.as_ptr(), ptr::null(), &mut m) }, PftStatus::Io);

    let model = tiny_model(0);
    let mut out = [0.0; 4];
    let imgs = images(1, 576);
    assert_eq!(
        unsafe { pft_model_embed(model, imgs.as_ptr(), 1, out.as_mut_ptr(), out.len()) },
        PftStatus::InvalidArgument
    );
    assert_eq!(unsafe { pft_model_embed(ptr::null(), imgs.as_ptr(), 1, out.as_mut_ptr(), 4) }, PftStatus::NullArgument);
    unsafe { pft_model_free(model) };

    assert_eq!(unsafe { pft_model_feature_dim(ptr::null()) }, 0);
    unsafe { pft_model_free(ptr::null_mut()) };
}

#[test]
fn dimension_mismatch_on_load_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.pft").to_str().unwrap()).unwrap();
    let m = tiny_model(1);
    unsafe { pft_model_save(m, path.as_ptr()) };
    unsafe { pft_model_free(m) };
    let wider = CString::new(TINY.replace(r#""dim":8"#, r#""dim":16"#)).unwrap();
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { pft_model_load(path.as_ptr(), wider.as_ptr(), &mut back) }, PftStatus::Checkpoint);
    let msg = last_error();
    assert!(msg.contains("16") && msg.contains('8'), "{msg}");
}

#[test]
fn evaluate_hand_case() {
    // one query, relevant gallery items at ranks 1 and 3
    let dist = [0.1, 0.2, 0.3, 0.4];
    let (q_ids, g_ids) = ([1usize], [1usize, 2, 1, 3]);
    let (q_cams, g_cams) = ([0usize], [1usize; 4]);
    let mut r = ptr::null_mut();
    let status = unsafe {
        pft_evaluate(dist.as_ptr(), 1, 4, q_ids.as_ptr(), g_ids.as_ptr(), q_cams.as_ptr(), g_cams.as_ptr(), 4, true, &mut r)
    };
    assert_eq!(status, PftStatus::Ok);
    assert!((unsafe { pft_report_map(r) } - 5.0 / 6.0).abs() < 1e-15);
    assert_eq!(unsafe { pft_report_cmc_len(r) }, 4);
    let mut cmc = [0.0; 4];
    assert_eq!(unsafe { pft_report_cmc(r, cmc.as_mut_ptr(), 4) }, PftStatus::Ok);
    assert_eq!(cmc, [1.0; 4]);
    assert_eq!(unsafe { pft_report_cmc(r, cmc.as_mut_ptr(), 2) }, PftStatus::InvalidArgument);
    assert_eq!(unsafe { pft_report_excluded(r) }, 0);
    unsafe { pft_report_free(r) };
    assert!(unsafe { pft_report_map(ptr::null()) }.is_nan());
}

#[test]
fn evaluate_without_valid_queries_is_a_data_error() {
    let mut r = ptr::null_mut();
    let status =
        unsafe { pft_evaluate([0.5].as_ptr(), 1, 1, [0usize].as_ptr(), [0].as_ptr(), [0].as_ptr(), [0].as_ptr(), 1, true, &mut r) };
    assert_eq!(status, PftStatus::Data);
    assert!(r.is_null());
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(pft_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/pft.h")).unwrap();
    for f in [
        "pft_last_error",
        "pft_version",
        "pft_model_new",
        "pft_model_load",
        "pft_model_save",
        "pft_model_free",
        "pft_model_feature_dim",
        "pft_model_image_len",
        "pft_model_param_count",
        "pft_model_embed",
        "pft_evaluate",
        "pft_report_map",
        "pft_report_cmc_len",
        "pft_report_cmc",
        "pft_report_excluded",
        "pft_report_free",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from pft.h");
    }
    assert!(header.contains("PFT_STATUS_CHECKPOINT = 6"));
    // syntax check with the system C compiler when one is installed
    let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", concat!(env!("CARGO_MANIFEST_DIR"), "/include/pft.h")])
        .output()
    else {
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
