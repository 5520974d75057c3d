//! PNG conversion, center-crop resizing and image grids.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageFormat, RgbImage};

use crate::dataset::{from_byte, to_byte};
use crate::error::{FaderError, Result};
use crate::tensor::Tensor;

/// `[3, H, W]` tensor in `[-1, 1]` to an RGB image.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let &[3, h, w] = t.shape() else {
        return Err(FaderError::Shape(format!("expected a [3, H, W] image, got {:?}", t.shape())));
    };
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb(std::array::from_fn(|c| to_byte(d[(c * h + y) * w + x])))
    }))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[(c * h + y) * w + x] = from_byte(p.0[c]);
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("rgb size")
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn tensor_to_png(t: &Tensor<f32>) -> Result<Vec<u8>> {
    encode_png(&tensor_to_rgb(t)?)
}

/// Largest centered square, resized to `side × side`.
pub fn center_crop_resize(img: &DynamicImage, side: usize) -> RgbImage {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let s = w.min(h);
    let cropped = imageops::crop_imm(&rgb, (w - s) / 2, (h - s) / 2, s, s).to_image();
    if s as usize == side {
        cropped
    } else {
        imageops::resize(&cropped, side as u32, side as u32, FilterType::Triangle)
    }
}

/// Decodes an encoded image and brings it to the model's input size.
pub fn decode_image(bytes: &[u8], side: usize) -> Result<Tensor<f32>> {
    let img = image::load_from_memory(bytes)?;
    if img.width() == 0 || img.height() == 0 {
        return Err(FaderError::Shape("empty image".into()));
    }
    Ok(rgb_to_tensor(&center_crop_resize(&img, side)))
}

/// Lays out `[3, H, W]` cells row-major with a `pad`-pixel gap.
pub fn grid(rows: &[Vec<Tensor<f32>>], pad: u32) -> Result<RgbImage> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| FaderError::Shape("empty grid".into()))?;
    let (h, w) = (first.shape()[1] as u32, first.shape()[2] as u32);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let n_rows = rows.len() as u32;
    let mut out = RgbImage::from_pixel(
        cols * w + (cols + 1) * pad,
        n_rows * h + (n_rows + 1) * pad,
        image::Rgb([255, 255, 255]),
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            if cell.shape()[1..] != first.shape()[1..] {
                return Err(FaderError::Shape("grid cells differ in size".into()));
            }
            let x = pad + c as u32 * (w + pad);
            let y = pad + r as u32 * (h + pad);
            imageops::replace(&mut out, &tensor_to_rgb(cell)?, i64::from(x), i64::from(y));
        }
    }
    Ok(out)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}
