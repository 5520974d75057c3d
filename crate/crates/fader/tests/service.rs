//! In-process HTTP contract against an initialization checkpoint.

#[path = "support/contract.rs"]
mod contract;

use std::sync::OnceLock;

use axum::http::{Method, StatusCode};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use contract::Fixture;
use fader::service::LoadedModel;
use fader_core::checkpoint::Checkpoint;
use fader_core::dataset::{generate, DatasetParams};
use fader_core::imageio::{decode_image, encode_png, tensor_to_png, tensor_to_rgb};
use fader_core::training::train;
use fader_core::{ModelConfig, TrainConfig};
use image::imageops::{self, FilterType};
use proptest::prelude::*;
use serde_json::json;

struct Saved {
    _dir: tempfile::TempDir,
    checkpoint: std::path::PathBuf,
    png: Vec<u8>,
}

fn saved() -> &'static Saved {
    static S: OnceLock<Saved> = OnceLock::new();
    S.get_or_init(|| {
        let params = DatasetParams {
            train: 32,
            valid: 8,
            test: 8,
            ..DatasetParams::default()
        };
        let ds = generate(&params, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            total_steps: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        train(&ds, &ModelConfig::default(), &cfg, dir.path(), |_| {}).unwrap();
        let png = tensor_to_png(&ds.test.image(0)).unwrap();
        Saved {
            checkpoint: dir.path().to_path_buf(),
            _dir: dir,
            png,
        }
    })
}

fn loaded() -> LoadedModel {
    LoadedModel::from_checkpoint(Checkpoint::load(&saved().checkpoint).unwrap())
}

fn fixture() -> Fixture {
    Fixture::new(loaded(), &saved().png)
}

fn rt() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap()
}

fn check(result: contract::Check) {
    if let Err(e) = result {
        panic!("{e}");
    }
}

#[test]
fn not_ready_until_the_model_is_set() {
    check(rt().block_on(contract::readiness(loaded())));
}

#[test]
fn model_info_reflects_the_checkpoint() {
    let f = fixture();
    assert_eq!(f.info.attribute_names, vec!["color", "size"]);
    assert_eq!(f.info.n_attributes, 2);
    assert_eq!(f.info.image_size, 32);
    assert_eq!(f.info.code_range, [-1.0, 2.0]);
    assert_eq!(f.info.checkpoint_step, 3);
    check(rt().block_on(contract::model_info(&f)));
}

#[test]
fn healthz_when_ready() {
    let f = fixture();
    let (status, body) = rt().block_on(f.call(Method::GET, "/healthz", None));
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"ok");
}

#[test]
fn edit_is_deterministic() {
    check(rt().block_on(contract::edit_determinism(&fixture())));
}

#[test]
fn edit_is_the_model_decode() {
    check(rt().block_on(contract::edit_matches_model(&fixture())));
}

#[test]
fn documented_client_errors() {
    check(rt().block_on(contract::client_errors(&fixture())));
}

#[test]
fn strip_agrees_with_edit() {
    check(rt().block_on(contract::strip_consistency(&fixture())));
}

#[test]
fn cors_preflight_is_answered() {
    check(rt().block_on(contract::cors(&fixture())));
}

#[test]
fn other_image_sizes_are_cropped_and_resized() {
    let f = fixture();
    let side = f.info.image_size as u32;
    let src = decode_image(&saved().png, f.info.image_size).unwrap();
    let big = imageops::resize(&tensor_to_rgb(&src).unwrap(), 3 * side, 2 * side, FilterType::Nearest);
    let req = json!({"image": STANDARD.encode(encode_png(&big).unwrap()), "alphas": [0.0, 1.0]});
    let (status, body) = rt().block_on(f.post("/edit", &req));
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    let png = STANDARD.decode(v["image"].as_str().unwrap()).unwrap();
    let out = image::load_from_memory(&png).unwrap();
    assert_eq!((out.width(), out.height()), (side, side));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    // requests leave no trace: any interleaving of edits returns the same bytes
    #[test]
    fn edits_are_stateless(a in prop::collection::vec(-1.0f64..=2.0, 2), b in prop::collection::vec(-1.0f64..=2.0, 2)) {
        let f = fixture();
        let rt = rt();
        let req_a = json!({"image": f.image, "alphas": a});
        let req_b = json!({"image": f.image, "alphas": b});
        let first = rt.block_on(f.post("/edit", &req_a));
        prop_assert_eq!(first.0, StatusCode::OK);
        let _ = rt.block_on(f.post("/edit", &req_b));
        let (x, y) = rt.block_on(async { tokio::join!(f.post("/edit", &req_a), f.post("/edit", &req_b)) });
        prop_assert_eq!(&x, &first);
        let strip = json!({"image": f.image, "alphas": b, "strip": {"attr_index": 0, "alphas": [a[0]]}});
        let mut single = b.clone();
        single[0] = a[0];
        let s = rt.block_on(f.post("/strip", &strip));
        let e = rt.block_on(f.post("/edit", &json!({"image": f.image, "alphas": single})));
        let s: serde_json::Value = serde_json::from_slice(&s.1).unwrap();
        let e: serde_json::Value = serde_json::from_slice(&e.1).unwrap();
        prop_assert_eq!(&s["images"][0], &e["image"]);
        prop_assert_eq!(y.0, StatusCode::OK);
    }
}
