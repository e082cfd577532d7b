//! Image exports: per-head attention maps (argmax head per patch, colored)
//! and the PCA projection of patch embeddings rendered as RGB.

use crate::error::{Error, Result};
use crate::imageops::NormStats;
use crate::model::ModelParams;
use crate::nn::vit::{attention_head_map, forward_tokens, ViTConfig};
use crate::nn::Elem;
use ndarray::Array3;
use std::path::Path;

/// Distinct head colors (extends by cycling if a model has more heads).
const HEAD_PALETTE: [[u8; 3]; 8] = [
    [230, 57, 70],
    [46, 196, 182],
    [255, 183, 3],
    [58, 134, 255],
    [131, 56, 236],
    [6, 214, 160],
    [239, 71, 111],
    [141, 153, 174],
];

fn upscale_factor(grid: usize, target: usize) -> usize {
    (target / grid).max(1)
}

/// Renders the argmax-head map: each patch takes its strongest head's color,
/// modulated by that head's attention weight (normalized over the image).
pub fn render_attention<F: Elem>(
    map: &crate::nn::vit::AttentionHeadMap<F>,
    target_size: usize,
) -> image::RgbImage {
    let (heads, gh, gw) = map.per_head.dim();
    let mut max_attn = 0.0f64;
    for v in map.per_head.iter() {
        max_attn = max_attn.max(v.to_f());
    }
    let max_attn = max_attn.max(1e-12);
    let f = upscale_factor(gh.max(gw), target_size);
    let mut img = image::RgbImage::new((gw * f) as u32, (gh * f) as u32);
    for gy in 0..gh {
        for gx in 0..gw {
            let h = map.argmax_head[(gy, gx)];
            let strength = (map.per_head[(h, gy, gx)].to_f() / max_attn).clamp(0.0, 1.0);
            let color = HEAD_PALETTE[h % HEAD_PALETTE.len()];
            let shade = |c: u8| ((c as f64) * (0.35 + 0.65 * strength)).round() as u8;
            let px = image::Rgb([shade(color[0]), shade(color[1]), shade(color[2])]);
            for dy in 0..f {
                for dx in 0..f {
                    img.put_pixel((gx * f + dx) as u32, (gy * f + dy) as u32, px);
                }
            }
        }
    }
    let _ = heads;
    img
}

/// Renders a (gh, gw, 3) PCA grid in [0, 1] as an RGB image.
pub fn render_pca(grid: &Array3<f64>, target_size: usize) -> Result<image::RgbImage> {
    let (gh, gw, c) = grid.dim();
    if c < 3 {
        return Err(Error::config(format!(
            "pca rendering needs 3 components, got {c}"
        )));
    }
    let f = upscale_factor(gh.max(gw), target_size);
    let mut img = image::RgbImage::new((gw * f) as u32, (gh * f) as u32);
    for gy in 0..gh {
        for gx in 0..gw {
            let px = image::Rgb([
                (grid[(gy, gx, 0)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (grid[(gy, gx, 1)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (grid[(gy, gx, 2)].clamp(0.0, 1.0) * 255.0).round() as u8,
            ]);
            for dy in 0..f {
                for dx in 0..f {
                    img.put_pixel((gx * f + dx) as u32, (gy * f + dy) as u32, px);
                }
            }
        }
    }
    Ok(img)
}

/// Loads an image, runs the frozen model, and writes the attention-head map.
pub fn attention_to_file<F: Elem>(
    model: &ModelParams<F>,
    cfg: &ViTConfig,
    norm: &NormStats,
    image_path: &Path,
    out_path: &Path,
    input_size: usize,
) -> Result<()> {
    let raw = crate::data::load_image(image_path)?;
    let input = crate::eval::prepare_input::<F>(&raw, input_size, 1.0, norm)?;
    let map = attention_head_map(&model.vit, cfg, input.view())?;
    let img = render_attention(&map, input_size.max(256));
    img.save(out_path)
        .map_err(|e| Error::Image(format!("{}: {e}", out_path.display())))?;
    Ok(())
}

/// Loads an image, runs the frozen model, and writes the patch-embedding PCA.
pub fn pca_to_file<F: Elem>(
    model: &ModelParams<F>,
    cfg: &ViTConfig,
    norm: &NormStats,
    image_path: &Path,
    out_path: &Path,
    input_size: usize,
) -> Result<()> {
    let raw = crate::data::load_image(image_path)?;
    let input = crate::eval::prepare_input::<F>(&raw, input_size, 1.0, norm)?;
    let toks = forward_tokens(&model.vit, cfg, input.view(), false)?;
    let (grid, degenerate) =
        crate::eval::pca_patch_projection(&toks.patches, (toks.grid, toks.grid), 3)?;
    if degenerate {
        eprintln!(
            "warning: degenerate patch embeddings for {}; projection is all-zero",
            image_path.display()
        );
    }
    let img = render_pca(&grid, input_size.max(256))?;
    img.save(out_path)
        .map_err(|e| Error::Image(format!("{}: {e}", out_path.display())))?;
    Ok(())
}
