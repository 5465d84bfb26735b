use std::ffi::{CStr, CString};
use std::ptr;

use ndarray::Array3;
use saunet::metrics::{evaluate_case, MetricsConfig};
use saunet::model::{predict_case, save_checkpoint, Model, ModelConfig};
use saunet::phantom::{generate, PhantomConfig};
use saunet::preprocessing::{CanonicalGrid, PipelineConfig};
use saunet::volume_io::{save_volume, LabelMask, Volume};
use saunet_ffi::*;

fn cpath(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = saunet_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_model() -> (Model<f32>, PipelineConfig) {
    let model = Model::<f32>::build(&ModelConfig {
        base_channels: 4,
        levels: 2,
        gn_groups: 2,
        aspp_rates: vec![[1, 1, 1], [2, 2, 1]],
        seed: 4,
        ..ModelConfig::default()
    })
    .unwrap();
    let pipeline = PipelineConfig {
        grid: CanonicalGrid { shape: [32, 32, 8], chunks: 2 },
        ..PipelineConfig::default()
    };
    (model, pipeline)
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(saunet_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_load_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut m: *mut SaunetModel = ptr::null_mut();
    unsafe {
        assert_eq!(saunet_model_load(ptr::null(), &mut m), SaunetStatus::NullArgument);
        assert_eq!(saunet_model_load(cpath(dir.path()).as_ptr(), ptr::null_mut()), SaunetStatus::NullArgument);

        let missing = cpath(&dir.path().join("missing.bin"));
        assert_eq!(saunet_model_load(missing.as_ptr(), &mut m), SaunetStatus::Io);
        assert!(m.is_null());
        assert!(last_error().contains("missing.bin"));

        let junk = dir.path().join("junk.bin");
        std::fs::write(&junk, b"definitely not a checkpoint").unwrap();
        assert_eq!(saunet_model_load(cpath(&junk).as_ptr(), &mut m), SaunetStatus::Checkpoint);
        assert!(m.is_null());
    }
}

#[test]
fn predict_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let (model, pipeline) = tiny_model();
    let path = dir.path().join("m.bin");
    save_checkpoint(&path, &model, &pipeline, 0).unwrap();
    let case = generate(&PhantomConfig {
        shape: [40, 28, 10],
        seed: 2,
        ..PhantomConfig::default()
    })
    .unwrap();
    let (want, _) = predict_case(&model, &pipeline, &case).unwrap();

    unsafe {
        let mut m: *mut SaunetModel = ptr::null_mut();
        assert_eq!(saunet_model_load(cpath(&path).as_ptr(), &mut m), SaunetStatus::Ok);
        assert!(saunet_last_error().is_null());
        let mut grid = [0usize; 3];
        assert_eq!(saunet_model_grid(m, grid.as_mut_ptr()), SaunetStatus::Ok);
        assert_eq!(grid, [32, 32, 8]);

        let image = case.image.data.as_standard_layout().to_owned();
        let shape = [40usize, 28, 10];
        let mut out = vec![7u8; 40 * 28 * 10];
        let status = saunet_predict(m, image.as_ptr(), shape.as_ptr(), case.image.spacing.as_ptr(), out.as_mut_ptr());
        assert_eq!(status, SaunetStatus::Ok, "{}", last_error());
        assert_eq!(out, want.data.iter().copied().collect::<Vec<_>>());

        let bad = [0usize, 28, 10];
        let status = saunet_predict(m, image.as_ptr(), bad.as_ptr(), case.image.spacing.as_ptr(), out.as_mut_ptr());
        assert_eq!(status, SaunetStatus::Shape);
        saunet_model_free(m);
        saunet_model_free(ptr::null_mut());
    }
}

#[test]
fn volume_handle_exposes_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = Array3::from_shape_fn((5, 4, 3), |(i, j, k)| (i * 100 + j * 10 + k) as f32);
    let path = dir.path().join("v.raw");
    save_volume(&Volume::new(data.clone(), [0.5, 0.75, 3.0]).unwrap(), &path).unwrap();
    unsafe {
        let mut v: *mut SaunetVolume = ptr::null_mut();
        assert_eq!(saunet_volume_load(cpath(&path).as_ptr(), &mut v), SaunetStatus::Ok);
        let (mut shape, mut spacing) = ([0usize; 3], [0f32; 3]);
        assert_eq!(saunet_volume_shape(v, shape.as_mut_ptr(), spacing.as_mut_ptr()), SaunetStatus::Ok);
        assert_eq!((shape, spacing), ([5, 4, 3], [0.5, 0.75, 3.0]));
        let flat = std::slice::from_raw_parts(saunet_volume_data(v), 60);
        assert_eq!(flat, data.as_slice().unwrap());
        saunet_volume_free(v);
        assert!(saunet_volume_data(ptr::null()).is_null());
    }
}

#[test]
fn evaluate_matches_core() {
    let shape = [6usize, 6, 4];
    let truth = Array3::from_shape_fn(shape, |(i, j, k)| ((i + 2 * j + k) % 5 == 0) as u8 * if i == 0 { 2 } else { 1 });
    let pred = Array3::from_shape_fn(shape, |(i, j, k)| ((i + j + k) % 4 == 0) as u8);
    let want = evaluate_case(
        "x",
        "y",
        &LabelMask::new(pred.clone()).unwrap(),
        &LabelMask::new(truth.clone()).unwrap(),
        &MetricsConfig::default(),
    )
    .unwrap();
    let mut got = SaunetMetrics::default();
    unsafe {
        let status = saunet_evaluate(pred.as_ptr(), truth.as_ptr(), shape.as_ptr(), 26, &mut got);
        assert_eq!(status, SaunetStatus::Ok);
        assert_eq!(got.dice, want.dice);
        assert_eq!(got.avd, want.avd.unwrap());
        assert_eq!(got.f1, want.f1);
        assert_eq!((got.n_truth, got.n_detected, got.n_false), (want.n_truth, want.n_detected, want.n_false));

        let empty = Array3::<u8>::zeros(shape);
        assert_eq!(saunet_evaluate(pred.as_ptr(), empty.as_ptr(), shape.as_ptr(), 6, &mut got), SaunetStatus::Ok);
        assert!(got.avd.is_nan());
        assert_eq!(got.f1, 0.0);

        assert_eq!(saunet_evaluate(pred.as_ptr(), truth.as_ptr(), shape.as_ptr(), 8, &mut got), SaunetStatus::InvalidArgument);
        let illegal = Array3::from_elem(shape, 3u8);
        assert_eq!(saunet_evaluate(illegal.as_ptr(), truth.as_ptr(), shape.as_ptr(), 26, &mut got), SaunetStatus::Format);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/saunet.h")).unwrap();
    for sym in [
        "typedef struct SaunetModel SaunetModel;",
        "typedef struct SaunetVolume SaunetVolume;",
        "SAUNET_STATUS_OK = 0",
        "SAUNET_STATUS_CHECKPOINT",
        "saunet_model_load(const char *path, SaunetModel **out)",
        "saunet_predict(",
        "saunet_evaluate(",
        "const char *saunet_last_error(void)",
    ] {
        assert!(header.contains(sym), "header lacks `{sym}`");
    }
}
