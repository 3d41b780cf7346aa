//! Concept-token attention maps: per-token attention over the patch grid,
//! min-max normalized and bilinearly upsampled to the input size.

use std::io::Cursor;
use std::path::Path;

use image::imageops::{resize, FilterType};
use image::{ImageBuffer, ImageFormat, Luma};
use ndarray::{Array2, ArrayView1, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignError, AlignModel};
use crate::io::write_atomic;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub criterion_id: usize,
    pub criterion: String,
    /// Raw attention over the `M` patches, row-major over the grid.
    pub weights: Vec<f64>,
    /// Normalized heat in `[0, 1]` at input resolution `(H, W)`.
    pub heat: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSidecar {
    pub image_id: String,
    pub grid_shape: (usize, usize),
    pub image_shape: (usize, usize),
    pub tokens: Vec<TokenRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub criterion_id: usize,
    pub criterion: String,
    pub file: String,
    pub weights: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum InterpretError {
    #[error(transparent)]
    Model(#[from] AlignError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image encoding failed: {0}")]
    Encode(String),
}

/// Per-token min-max scaling to `[0, 1]`; a constant row maps to zeros.
pub fn min_max(row: ArrayView1<f64>) -> Vec<f64> {
    let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    row.iter().map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect()
}

/// Bilinear resize of a `(gh, gw)` grid to `(h, w)`.
pub fn upsample(grid: &[f64], grid_shape: (usize, usize), h: usize, w: usize) -> Array2<f64> {
    let (gh, gw) = grid_shape;
    let src: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_vec(gw as u32, gh as u32, grid.iter().map(|&v| v as f32).collect())
            .expect("grid length matches its shape");
    let out = resize(&src, w as u32, h as u32, FilterType::Triangle);
    Array2::from_shape_fn((h, w), |(y, x)| f64::from(out.get_pixel(x as u32, y as u32).0[0]).clamp(0.0, 1.0))
}

pub fn attention_maps(model: &AlignModel, image: ArrayView3<f64>) -> Result<Vec<AttentionMap>, AlignError> {
    let (h, w, _) = image.dim();
    let inf = model.infer(image)?;
    Ok(model
        .criteria()
        .criteria
        .iter()
        .zip(inf.attended.attn_weights.rows())
        .map(|(c, row)| AttentionMap {
            criterion_id: c.id,
            criterion: c.name.clone(),
            weights: row.to_vec(),
            heat: upsample(&min_max(row), inf.grid_shape, h, w),
        })
        .collect())
}

/// Attention mass on the patches that lie inside the pixel box
/// `[top, top+size) x [left, left+size)`.
pub fn mass_in_box(weights: &[f64], grid_shape: (usize, usize), patch_size: usize, top: usize, left: usize, size: usize) -> f64 {
    let (gh, gw) = grid_shape;
    let mut mass = 0.0;
    for gy in 0..gh {
        for gx in 0..gw {
            let (y, x) = (gy * patch_size, gx * patch_size);
            if y >= top && y + patch_size <= top + size && x >= left && x + patch_size <= left + size {
                mass += weights[gy * gw + gx];
            }
        }
    }
    mass
}

fn slug(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect()
}

fn png_bytes(heat: &Array2<f64>) -> Result<Vec<u8>, InterpretError> {
    let (h, w) = heat.dim();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([(heat[[y as usize, x as usize]] * 255.0).round() as u8]));
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| InterpretError::Encode(e.to_string()))?;
    Ok(buf.into_inner())
}

/// Writes one grayscale PNG per token plus `attention.json` with the raw
/// weights into `out_dir`.
pub fn export_attention(
    maps: &[AttentionMap],
    grid_shape: (usize, usize),
    image_id: &str,
    out_dir: &Path,
) -> Result<AttentionSidecar, InterpretError> {
    std::fs::create_dir_all(out_dir)?;
    let mut tokens = Vec::with_capacity(maps.len());
    for m in maps {
        let file = format!("token_{:02}_{}.png", m.criterion_id, slug(&m.criterion));
        write_atomic(&out_dir.join(&file), &png_bytes(&m.heat)?)?;
        tokens.push(TokenRecord {
            criterion_id: m.criterion_id,
            criterion: m.criterion.clone(),
            file,
            weights: m.weights.clone(),
        });
    }
    let image_shape = maps.first().map_or((0, 0), |m| m.heat.dim());
    let sidecar = AttentionSidecar { image_id: image_id.to_string(), grid_shape, image_shape, tokens };
    let mut json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    json.push('\n');
    write_atomic(&out_dir.join("attention.json"), json.as_bytes())?;
    Ok(sidecar)
}
