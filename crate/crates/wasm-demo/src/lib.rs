//! Three operations for the static page in `www/`:
//! draw a random sprite, load a checkpoint, and edit the sprite through the
//! attribute sliders (one image, or a sweep along a single attribute).
//!
//! Pixels cross the boundary as RGBA bytes ready for `ImageData`.

use fader_core::checkpoint::Checkpoint;
use fader_core::evaluation::strip_from_codes;
use fader_core::imageio::{rgb_to_tensor, tensor_to_rgb};
use fader_core::synth::{render_sprite, sample_spec};
use fader_core::{AttributeCode, FaderModel, Tensor};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const SIDE: usize = 32;

pub fn to_rgba(t: &Tensor<f32>) -> Result<Vec<u8>, String> {
    let rgb = tensor_to_rgb(t).map_err(|e| e.to_string())?;
    Ok(rgb.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect())
}

pub fn from_rgba(rgba: &[u8], side: usize) -> Result<Tensor<f32>, String> {
    if rgba.len() != side * side * 4 {
        return Err(format!("expected {}x{side} RGBA pixels, got {} bytes", side, rgba.len()));
    }
    let rgb: Vec<u8> = rgba.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
    let img = RgbImage::from_raw(side as u32, side as u32, rgb).ok_or("bad pixel buffer")?;
    Ok(rgb_to_tensor(&img))
}

/// A `side`×`side` sprite with the given color and size bits; everything else comes from `seed`.
pub fn sprite(seed: u64, color: u8, size: u8, side: usize) -> Result<Vec<u8>, String> {
    if color > 1 || size > 1 {
        return Err("attribute bits must be 0 or 1".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = sample_spec(&mut rng, &[color, size], side);
    to_rgba(&render_sprite(&spec, side, side).map_err(|e| e.to_string())?)
}

#[wasm_bindgen]
pub fn draw_sprite(seed: u64, color: u8, size: u8) -> Result<Vec<u8>, JsError> {
    sprite(seed, color, size, SIDE).map_err(|e| JsError::new(&e))
}

pub struct Model {
    model: FaderModel<f32>,
    names: Vec<String>,
    step: u64,
}

impl Model {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let ck = Checkpoint::from_bytes(bytes).map_err(|e| e.to_string())?;
        Ok(Self {
            names: ck.header.attribute_names.clone(),
            step: ck.step(),
            model: ck.model,
        })
    }

    pub fn side(&self) -> usize {
        self.model.config.image_size
    }

    /// `{names, code_range, image_size, step}` as JSON.
    pub fn info(&self) -> String {
        let (lo, hi) = self.model.config.code_range();
        serde_json::json!({
            "names": self.names,
            "code_range": [lo, hi],
            "image_size": self.side(),
            "step": self.step,
        })
        .to_string()
    }

    /// One output per code, all from a single encoding of `rgba`.
    pub fn decode_many(&self, rgba: &[u8], codes: &[Vec<f64>]) -> Result<Vec<u8>, String> {
        let x = from_rgba(rgba, self.side())?;
        let range = self.model.config.code_range();
        let codes = codes
            .iter()
            .map(|a| AttributeCode::from_alphas(a, range).map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        let outs = strip_from_codes(&self.model, &x, &codes).map_err(|e| e.to_string())?;
        let mut bytes = Vec::with_capacity(outs.len() * rgba.len());
        for t in &outs {
            bytes.extend(to_rgba(t)?);
        }
        Ok(bytes)
    }

    pub fn edit(&self, rgba: &[u8], alphas: &[f64]) -> Result<Vec<u8>, String> {
        self.decode_many(rgba, &[alphas.to_vec()])
    }

    /// Images for each sweep value of attribute `attr`, stacked one after another.
    pub fn sweep(&self, rgba: &[u8], alphas: &[f64], attr: usize, values: &[f64]) -> Result<Vec<u8>, String> {
        if attr >= alphas.len() {
            return Err(format!("attribute {attr} out of range"));
        }
        let codes: Vec<Vec<f64>> = values
            .iter()
            .map(|&v| {
                let mut a = alphas.to_vec();
                a[attr] = v;
                a
            })
            .collect();
        self.decode_many(rgba, &codes)
    }
}

#[wasm_bindgen]
pub struct Demo(Model);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(checkpoint: &[u8]) -> Result<Demo, JsError> {
        Model::from_bytes(checkpoint).map(Demo).map_err(|e| JsError::new(&e))
    }

    pub fn info(&self) -> String {
        self.0.info()
    }

    pub fn edit(&self, rgba: &[u8], alphas: &[f64]) -> Result<Vec<u8>, JsError> {
        self.0.edit(rgba, alphas).map_err(|e| JsError::new(&e))
    }

    pub fn sweep(&self, rgba: &[u8], alphas: &[f64], attr: usize, values: &[f64]) -> Result<Vec<u8>, JsError> {
        self.0.sweep(rgba, alphas, attr, values).map_err(|e| JsError::new(&e))
    }
}
