//! HTTP contract checks run in-process against the router.

#![allow(dead_code)]

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use fader::service::{router, ErrorBody, LoadedModel, ModelInfo, ServiceState};
use fader_core::evaluation::strip_from_codes;
use fader_core::imageio::{decode_image, tensor_to_png};
use fader_core::{AttributeCode, FaderModel};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

pub type Check = Result<(), String>;

pub const BODY_LIMIT: usize = 64 * 1024;

pub struct Fixture {
    pub router: Router,
    pub model: FaderModel<f32>,
    pub info: ModelInfo,
    /// Base64 PNG of a test image.
    pub image: String,
}

impl Fixture {
    pub fn new(loaded: LoadedModel, png: &[u8]) -> Self {
        let model = loaded.model.clone();
        let info = loaded.info.clone();
        let router = router(ServiceState::ready(loaded, BODY_LIMIT), "*");
        Self {
            router,
            model,
            info,
            image: STANDARD.encode(png),
        }
    }

    pub async fn call(&self, method: Method, uri: &str, body: Option<Vec<u8>>) -> (StatusCode, Vec<u8>) {
        send(&self.router, method, uri, body).await
    }

    pub async fn post(&self, uri: &str, body: &Value) -> (StatusCode, Vec<u8>) {
        self.call(Method::POST, uri, Some(serde_json::to_vec(body).unwrap())).await
    }

    /// 1, 0, 1, ... across the attributes.
    pub fn alternating(&self) -> Vec<f64> {
        (0..self.info.n_attributes).map(|k| f64::from(u8::from(k % 2 == 0))).collect()
    }
}

pub async fn send(router: &Router, method: Method, uri: &str, body: Option<Vec<u8>>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri).header(header::ORIGIN, "http://ui.example");
    if body.is_some() {
        req = req.header(header::CONTENT_TYPE, "application/json");
    }
    let req = req.body(body.map_or_else(Body::empty, Body::from)).unwrap();
    let resp = router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn error_body(bytes: &[u8]) -> Result<ErrorBody, String> {
    serde_json::from_slice(bytes).map_err(|e| format!("error body {:?} is not an envelope: {e}", text(bytes)))
}

fn expect_error(what: &str, got: (StatusCode, Vec<u8>), status: StatusCode, field: Option<&str>) -> Check {
    ensure(got.0 == status, || format!("{what}: expected {status}, got {} {}", got.0, text(&got.1)))?;
    let body = error_body(&got.1)?;
    ensure(!body.error.is_empty(), || format!("{what}: empty error message"))?;
    ensure(body.field.as_deref() == field, || {
        format!("{what}: field {:?}, expected {field:?}", body.field)
    })
}

fn images_of(bytes: &[u8], key: &str) -> Result<Vec<String>, String> {
    let v: Value = serde_json::from_slice(bytes).map_err(|e| format!("bad JSON {}: {e}", text(bytes)))?;
    match &v[key] {
        Value::String(s) => Ok(vec![s.clone()]),
        Value::Array(a) => Ok(a.iter().filter_map(|s| s.as_str().map(str::to_string)).collect()),
        _ => Err(format!("no {key} in {v}")),
    }
}

/// Before the model is published every route answers 503 with the error envelope.
pub async fn readiness(loaded: LoadedModel) -> Check {
    let state = ServiceState::pending(BODY_LIMIT);
    let app = router(state.clone(), "*");
    let body = serde_json::to_vec(&json!({"image": "", "alphas": [0.0, 0.0]})).unwrap();
    for (method, uri) in [
        (Method::GET, "/healthz"),
        (Method::GET, "/model/info"),
        (Method::POST, "/edit"),
        (Method::POST, "/strip"),
    ] {
        let b = (method == Method::POST).then(|| body.clone());
        expect_error(uri, send(&app, method, uri, b).await, StatusCode::SERVICE_UNAVAILABLE, None)?;
    }
    state.set_model(loaded);
    let (status, body) = send(&app, Method::GET, "/healthz", None).await;
    ensure(status == StatusCode::OK, || format!("healthz after load: {status} {}", text(&body)))
}

pub async fn model_info(f: &Fixture) -> Check {
    let first = f.call(Method::GET, "/model/info", None).await;
    ensure(first.0 == StatusCode::OK, || format!("info: {}", first.0))?;
    let info: ModelInfo = serde_json::from_slice(&first.1).map_err(|e| e.to_string())?;
    ensure(info == f.info, || format!("info {info:?} != {:?}", f.info))?;
    ensure(info.attribute_names.len() == info.n_attributes, || "names vs n".into())?;
    let again = f.call(Method::GET, "/model/info", None).await;
    ensure(again == first, || "repeated /model/info differs".into())
}

/// Identical requests, sequential and concurrent, give byte-identical bodies.
pub async fn edit_determinism(f: &Fixture) -> Check {
    let req = json!({"image": f.image, "alphas": f.alternating()});
    let a = f.post("/edit", &req).await;
    ensure(a.0 == StatusCode::OK, || format!("edit: {} {}", a.0, text(&a.1)))?;
    let b = f.post("/edit", &req).await;
    ensure(a.1 == b.1, || "sequential /edit responses differ".into())?;
    let (c, d) = tokio::join!(f.post("/edit", &req), f.post("/edit", &req));
    ensure(c.1 == a.1 && d.1 == a.1, || "concurrent /edit responses differ".into())
}

/// The response is the PNG of decode(encode(x), code) computed directly.
pub async fn edit_matches_model(f: &Fixture) -> Check {
    let alphas: Vec<f64> = (0..f.info.n_attributes).map(|k| 0.25 + 1.25 * k as f64).collect();
    let (status, body) = f.post("/edit", &json!({"image": f.image, "alphas": alphas})).await;
    ensure(status == StatusCode::OK, || format!("edit: {status} {}", text(&body)))?;
    let got = STANDARD.decode(&images_of(&body, "image")?[0]).map_err(|e| e.to_string())?;

    let side = f.info.image_size;
    let x = decode_image(&STANDARD.decode(&f.image).unwrap(), side).map_err(|e| e.to_string())?;
    let code = AttributeCode::from_alphas(&alphas, f.model.config.code_range()).map_err(|e| e.to_string())?;
    let out = strip_from_codes(&f.model, &x, &[code]).map_err(|e| e.to_string())?;
    let want = tensor_to_png(&out[0]).map_err(|e| e.to_string())?;
    ensure(got == want, || "edit output differs from the direct decode".into())?;
    let back = decode_image(&got, side).map_err(|e| e.to_string())?;
    ensure(back.shape() == [3, side, side], || format!("edit output shape {:?}", back.shape()))
}

/// Every documented client error.
pub async fn client_errors(f: &Fixture) -> Check {
    let n = f.info.n_attributes;
    let [lo, hi] = f.info.code_range;
    let edit = |alphas: Value, image: Value| json!({"image": image, "alphas": alphas});
    let img = Value::String(f.image.clone());

    let long = f.post("/edit", &edit(json!(vec![0.0; n + 1]), img.clone())).await;
    expect_error("alphas n+1", long.clone(), StatusCode::BAD_REQUEST, Some("alphas"))?;
    let msg = error_body(&long.1)?.error;
    ensure(msg == "alphas length mismatch", || format!("length message {msg:?}"))?;
    let short = f.post("/edit", &edit(json!(vec![0.0; n - 1]), img.clone())).await;
    expect_error("alphas n-1", short, StatusCode::BAD_REQUEST, Some("alphas"))?;

    for bad in [hi + 0.01, lo - 0.01, 1e9] {
        let mut a = vec![0.5; n];
        a[n - 1] = bad;
        let r = f.post("/edit", &edit(json!(a), img.clone())).await;
        expect_error(&format!("alpha {bad}"), r, StatusCode::BAD_REQUEST, Some("alphas"))?;
    }
    let mut at_edges = vec![lo; n];
    at_edges[0] = hi;
    let r = f.post("/edit", &edit(json!(at_edges), img.clone())).await;
    ensure(r.0 == StatusCode::OK, || format!("range endpoints rejected: {}", text(&r.1)))?;

    let not_b64 = f.post("/edit", &edit(json!(vec![0.5; n]), json!("%%% not base64 %%%"))).await;
    expect_error("bad base64", not_b64, StatusCode::UNSUPPORTED_MEDIA_TYPE, Some("image"))?;
    let not_image = STANDARD.encode(b"GIF89a but not really an image");
    let r = f.post("/edit", &edit(json!(vec![0.5; n]), json!(not_image))).await;
    expect_error("undecodable image", r, StatusCode::UNSUPPORTED_MEDIA_TYPE, Some("image"))?;

    let huge = "A".repeat(BODY_LIMIT + 1);
    let r = f.post("/edit", &edit(json!(vec![0.5; n]), json!(huge))).await;
    expect_error("oversized /edit", r, StatusCode::PAYLOAD_TOO_LARGE, None)?;
    let huge_strip = json!({"image": "A".repeat(BODY_LIMIT + 1), "alphas": vec![0.5; n], "strip": {"attr_index": 0, "alphas": [0.0]}});
    let r = f.post("/strip", &huge_strip).await;
    expect_error("oversized /strip", r, StatusCode::PAYLOAD_TOO_LARGE, None)?;

    let r = f.call(Method::POST, "/edit", Some(b"{\"image\": ".to_vec())).await;
    expect_error("malformed JSON", r, StatusCode::BAD_REQUEST, None)?;

    let strip = |attr: usize, alphas: Value| json!({"image": f.image, "alphas": vec![0.5; n], "strip": {"attr_index": attr, "alphas": alphas}});
    let r = f.post("/strip", &strip(0, json!([]))).await;
    expect_error("empty strip", r, StatusCode::BAD_REQUEST, Some("strip.alphas"))?;
    let r = f.post("/strip", &strip(n, json!([0.0]))).await;
    expect_error("strip attr_index", r, StatusCode::BAD_REQUEST, Some("strip.attr_index"))?;
    let r = f.post("/strip", &strip(0, json!([0.0, hi + 1.0]))).await;
    expect_error("strip alpha out of range", r, StatusCode::BAD_REQUEST, Some("strip.alphas"))?;
    let r = f.post("/strip", &json!({"image": f.image, "alphas": vec![0.5; n + 1], "strip": {"attr_index": 0, "alphas": [0.0]}})).await;
    expect_error("strip base alphas", r, StatusCode::BAD_REQUEST, Some("alphas"))
}

async fn edit_image(f: &Fixture, alphas: &[f64]) -> Result<String, String> {
    let (status, body) = f.post("/edit", &json!({"image": f.image, "alphas": alphas})).await;
    ensure(status == StatusCode::OK, || format!("edit {alphas:?}: {status} {}", text(&body)))?;
    Ok(images_of(&body, "image")?.remove(0))
}

/// Strip images come back in request order and equal /edit for each code.
pub async fn strip_consistency(f: &Fixture) -> Check {
    let base = f.alternating();
    for attr in 0..f.info.n_attributes {
        let sweep = [0.0, 1.0, -0.5, 0.5, 2.0];
        let req = json!({"image": f.image, "alphas": base, "strip": {"attr_index": attr, "alphas": sweep}});
        let (status, body) = f.post("/strip", &req).await;
        ensure(status == StatusCode::OK, || format!("strip: {status} {}", text(&body)))?;
        let images = images_of(&body, "images")?;
        ensure(images.len() == sweep.len(), || format!("{} images for {} alphas", images.len(), sweep.len()))?;
        for (img, &a) in images.iter().zip(&sweep) {
            let mut alphas = base.clone();
            alphas[attr] = a;
            ensure(*img == edit_image(f, &alphas).await?, || {
                format!("strip attr {attr} alpha {a} differs from /edit")
            })?;
        }
    }
    Ok(())
}

pub async fn cors(f: &Fixture) -> Check {
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/edit")
        .header(header::ORIGIN, "http://ui.example")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = f.router.clone().oneshot(req).await.unwrap();
    let allow = resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).cloned();
    ensure(allow.is_some(), || format!("no CORS header on preflight ({})", resp.status()))
}

/// Every check, by name.
pub async fn run_all(f: &Fixture, fresh: LoadedModel) -> Vec<(&'static str, Check)> {
    vec![
        ("readiness", readiness(fresh).await),
        ("model_info", model_info(f).await),
        ("edit_determinism", edit_determinism(f).await),
        ("edit_matches_model", edit_matches_model(f).await),
        ("client_errors", client_errors(f).await),
        ("strip_consistency", strip_consistency(f).await),
        ("cors", cors(f).await),
    ]
}
