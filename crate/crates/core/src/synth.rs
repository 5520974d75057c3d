//! Procedural sprites with exact counterfactuals.
//!
//! A sprite is one filled shape (circle, square or triangle) on a uniform gray
//! background. Attribute 0 is the fill color (blue/red), attribute 1 the size
//! (small/large). Position, rotation, shape kind and background shade are
//! nuisance factors drawn independently of the attributes, so flipping an
//! attribute bit in a [`SpriteSpec`] and re-rendering yields the ground-truth
//! counterfactual image.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FaderError, Result};
use crate::tensor::Tensor;

pub const ATTRIBUTE_NAMES: [&str; 2] = ["color", "size"];
pub const MAX_ATTRIBUTES: usize = ATTRIBUTE_NAMES.len();
pub const CHANNELS: usize = 3;

/// Area-equivalent radius of a small / large shape, as a fraction of the image side.
pub const SMALL_RADIUS: f64 = 0.11;
pub const LARGE_RADIUS: f64 = 0.19;

/// Background gray levels are drawn from `[-BG_RANGE, BG_RANGE]`.
pub const BG_RANGE: f64 = 0.8;

/// Sub-pixel samples per axis used for coverage.
pub const SUPERSAMPLE: usize = 4;

pub const BLUE: [f32; 3] = [-0.6, -0.6, 0.8];
pub const RED: [f32; 3] = [0.8, -0.6, -0.6];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    /// Circumradius over area-equivalent radius.
    pub fn extent_factor(self) -> f64 {
        match self {
            ShapeKind::Circle => 1.0,
            ShapeKind::Square => (PI / 2.0).sqrt(),
            ShapeKind::Triangle => (4.0 * PI / (3.0 * 3f64.sqrt())).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub shape_kind: ShapeKind,
    pub attr_color: u8,
    pub attr_size: u8,
    pub center_x: f64,
    pub center_y: f64,
    pub rotation: f64,
    pub bg_shade: f64,
}

impl SpriteSpec {
    /// Area-equivalent radius in pixels for an image of side `side`.
    pub fn radius(&self, side: usize) -> f64 {
        let frac = if self.attr_size == 0 { SMALL_RADIUS } else { LARGE_RADIUS };
        frac * side as f64
    }

    pub fn fill(&self) -> [f32; 3] {
        if self.attr_color == 0 {
            BLUE
        } else {
            RED
        }
    }

    /// The first `n` attribute bits, in [`ATTRIBUTE_NAMES`] order.
    pub fn attributes(&self, n: usize) -> Vec<u8> {
        [self.attr_color, self.attr_size][..n].to_vec()
    }

    fn attr_mut(&mut self, index: usize) -> &mut u8 {
        match index {
            0 => &mut self.attr_color,
            _ => &mut self.attr_size,
        }
    }

    /// Checks that the shape's bounding circle fits inside an `h × w` image for both sizes.
    pub fn check_bounds(&self, h: usize, w: usize) -> Result<()> {
        let side = h.min(w);
        let extent = LARGE_RADIUS * side as f64 * self.shape_kind.extent_factor();
        let fits = |c: f64, len: usize| c - extent >= 0.0 && c + extent <= len as f64;
        if !(fits(self.center_x, w) && fits(self.center_y, h)) {
            return Err(FaderError::OutOfBounds(format!(
                "{:?} at ({:.2}, {:.2}) with extent {extent:.2} leaves the {h}x{w} image",
                self.shape_kind, self.center_x, self.center_y
            )));
        }
        if !(-1.0..=1.0).contains(&self.bg_shade) || self.attr_color > 1 || self.attr_size > 1 {
            return Err(FaderError::OutOfBounds(format!(
                "invalid shade {} or attribute bits ({}, {})",
                self.bg_shade, self.attr_color, self.attr_size
            )));
        }
        Ok(())
    }

    /// Is the point `(x, y)` (pixel units, y down) inside the shape?
    pub fn contains(&self, x: f64, y: f64, side: usize) -> bool {
        let r = self.radius(side);
        let (s, c) = self.rotation.sin_cos();
        let dx = x - self.center_x;
        let dy = y - self.center_y;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        match self.shape_kind {
            ShapeKind::Circle => u * u + v * v <= r * r,
            ShapeKind::Square => {
                let half = r * PI.sqrt() / 2.0;
                u.abs() <= half && v.abs() <= half
            }
            ShapeKind::Triangle => {
                // outward edge normals at 90°, 210°, 330°; inradius is half the circumradius
                let inradius = r * ShapeKind::Triangle.extent_factor() / 2.0;
                [90.0f64, 210.0, 330.0].iter().all(|deg| {
                    let (ns, nc) = deg.to_radians().sin_cos();
                    u * nc + v * ns <= inradius
                })
            }
        }
    }
}

/// Fraction of each pixel covered by the shape, row-major `h × w`.
pub fn coverage(spec: &SpriteSpec, h: usize, w: usize) -> Vec<f32> {
    let side = h.min(w);
    let n = SUPERSAMPLE;
    let inv = 1.0 / (n * n) as f32;
    let extent = spec.radius(side) * spec.shape_kind.extent_factor() + 1.0;
    let y0 = ((spec.center_y - extent).floor().max(0.0)) as usize;
    let y1 = ((spec.center_y + extent).ceil().min(h as f64)) as usize;
    let x0 = ((spec.center_x - extent).floor().max(0.0)) as usize;
    let x1 = ((spec.center_x + extent).ceil().min(w as f64)) as usize;
    let mut cov = vec![0.0f32; h * w];
    for py in y0..y1 {
        for px in x0..x1 {
            let mut hits = 0;
            for sy in 0..n {
                for sx in 0..n {
                    let x = px as f64 + (sx as f64 + 0.5) / n as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / n as f64;
                    hits += usize::from(spec.contains(x, y, side));
                }
            }
            cov[py * w + px] = hits as f32 * inv;
        }
    }
    cov
}

/// Renders a `[3, h, w]` image in `[-1, 1]`.
pub fn render_sprite(spec: &SpriteSpec, h: usize, w: usize) -> Result<Tensor<f32>> {
    spec.check_bounds(h, w)?;
    let cov = coverage(spec, h, w);
    let fill = spec.fill();
    let bg = spec.bg_shade as f32;
    let mut data = vec![0.0f32; CHANNELS * h * w];
    for (ch, &f) in fill.iter().enumerate() {
        for (d, &a) in data[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&cov) {
            *d = bg * (1.0 - a) + f * a;
        }
    }
    Tensor::from_vec(&[CHANNELS, h, w], data)
}

/// Same spec with attribute `attr_index` flipped.
pub fn counterfactual(spec: &SpriteSpec, attr_index: usize, n_attributes: usize) -> Result<SpriteSpec> {
    if attr_index >= n_attributes || attr_index >= MAX_ATTRIBUTES {
        return Err(FaderError::Range(format!(
            "attribute index {attr_index} out of range for {n_attributes} attributes"
        )));
    }
    let mut out = spec.clone();
    let bit = out.attr_mut(attr_index);
    *bit ^= 1;
    Ok(out)
}

/// Center coordinates are drawn from this interval so that every shape kind
/// fits at either size.
pub fn center_range(side: usize) -> (f64, f64) {
    let margin = LARGE_RADIUS * side as f64 * ShapeKind::Triangle.extent_factor() + 0.5;
    (margin, side as f64 - margin)
}

/// Draws nuisance factors; `attributes` are copied as given, with a random size bit when `n = 1`.
pub fn sample_spec<R: Rng + ?Sized>(rng: &mut R, attributes: &[u8], side: usize) -> SpriteSpec {
    let shape_kind = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
    let (lo, hi) = center_range(side);
    let center_x = rng.random_range(lo..hi);
    let center_y = rng.random_range(lo..hi);
    let rotation = rng.random_range(0.0..2.0 * PI);
    let bg_shade = rng.random_range(-BG_RANGE..BG_RANGE);
    let nuisance_size = rng.random_range(0..2u8);
    SpriteSpec {
        shape_kind,
        attr_color: attributes[0],
        attr_size: attributes.get(1).copied().unwrap_or(nuisance_size),
        center_x,
        center_y,
        rotation,
        bg_shade,
    }
}
