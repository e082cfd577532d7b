//! Image primitives for the augmentation and evaluation pipelines.
//!
//! Images are `(H, W, 3)` arrays with values in [0, 1] until normalization.
//! Geometry uses continuous pixel coordinates: pixel `(ix, iy)` covers the
//! unit square with center `(ix + 0.5, iy + 0.5)`. All resampling is bilinear
//! with clamped borders — one fixed, documented kernel so runs reproduce
//! across machines.

use crate::geometry::CropWindow;
use crate::nn::{fl, Elem};
use ndarray::{Array3, ArrayView3, Zip};

/// Per-channel normalization statistics, computed once from the training
/// split and carried in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    /// Identity stats; useful for tests and raw-pixel paths.
    pub fn identity() -> Self {
        NormStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Converts 8-bit pixels to float in [0, 1].
pub fn to_float<F: Elem>(img: ArrayView3<u8>) -> Array3<F> {
    img.map(|&v| fl::<F>(v as f64 / 255.0))
}

/// Converts [0, 1] floats back to 8-bit with rounding and clamping.
pub fn to_u8<F: Elem>(img: ArrayView3<F>) -> Array3<u8> {
    img.map(|&v| (v.to_f().clamp(0.0, 1.0) * 255.0).round() as u8)
}

#[inline]
fn bilinear_at<F: Elem>(src: ArrayView3<F>, u: f64, v: f64, c: usize) -> F {
    let (h, w, _) = src.dim();
    // Sample among the four nearest pixel centers, clamped at borders.
    let s = u - 0.5;
    let t = v - 0.5;
    let x0 = s.floor();
    let y0 = t.floor();
    let fx = s - x0;
    let fy = t - y0;
    let x0i = (x0 as i64).clamp(0, w as i64 - 1) as usize;
    let x1i = (x0 as i64 + 1).clamp(0, w as i64 - 1) as usize;
    let y0i = (y0 as i64).clamp(0, h as i64 - 1) as usize;
    let y1i = (y0 as i64 + 1).clamp(0, h as i64 - 1) as usize;
    let fx = fl::<F>(fx);
    let fy = fl::<F>(fy);
    let one = F::one();
    let p00 = src[(y0i, x0i, c)];
    let p01 = src[(y0i, x1i, c)];
    let p10 = src[(y1i, x0i, c)];
    let p11 = src[(y1i, x1i, c)];
    (p00 * (one - fx) + p01 * fx) * (one - fy) + (p10 * (one - fx) + p11 * fx) * fy
}

/// Resamples the continuous window `[x, x+w] x [y, y+h]` of `src` to an
/// `out_h x out_w` image.
pub fn resample_window<F: Elem>(
    src: ArrayView3<F>,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    out_h: usize,
    out_w: usize,
) -> Array3<F> {
    let mut out = Array3::<F>::zeros((out_h, out_w, 3));
    let sx = w / out_w as f64;
    let sy = h / out_h as f64;
    for i in 0..out_h {
        let v = y + (i as f64 + 0.5) * sy;
        for j in 0..out_w {
            let u = x + (j as f64 + 0.5) * sx;
            for c in 0..3 {
                out[(i, j, c)] = bilinear_at(src, u, v, c);
            }
        }
    }
    out
}

/// Crops `window` out of `src` and resizes it to `window.out_size` squared.
pub fn crop_resize<F: Elem>(src: ArrayView3<F>, window: &CropWindow) -> Array3<F> {
    resample_window(
        src,
        window.x,
        window.y,
        window.w,
        window.h,
        window.out_size,
        window.out_size,
    )
}

/// Whole-image resize to `out_h x out_w`.
pub fn resize<F: Elem>(src: ArrayView3<F>, out_h: usize, out_w: usize) -> Array3<F> {
    let (h, w, _) = src.dim();
    resample_window(src, 0.0, 0.0, w as f64, h as f64, out_h, out_w)
}

/// Horizontal flip.
pub fn hflip<F: Elem>(img: &mut Array3<F>) {
    let (_, w, _) = img.dim();
    for mut row in img.outer_iter_mut() {
        for j in 0..w / 2 {
            for c in 0..3 {
                let tmp = row[(j, c)];
                row[(j, c)] = row[(w - 1 - j, c)];
                row[(w - 1 - j, c)] = tmp;
            }
        }
    }
}

fn luma<F: Elem>(r: F, g: F, b: F) -> F {
    fl::<F>(0.299) * r + fl::<F>(0.587) * g + fl::<F>(0.114) * b
}

fn clamp01<F: Elem>(v: F) -> F {
    if v < F::zero() {
        F::zero()
    } else if v > F::one() {
        F::one()
    } else {
        v
    }
}

/// Multiplies pixel values by `factor`.
pub fn adjust_brightness<F: Elem>(img: &mut Array3<F>, factor: f64) {
    let f = fl::<F>(factor);
    img.mapv_inplace(|v| clamp01(v * f));
}

/// Blends with the mean gray level: factor 1 is identity, 0 a flat image.
pub fn adjust_contrast<F: Elem>(img: &mut Array3<F>, factor: f64) {
    let (h, w, _) = img.dim();
    let mut mean = F::zero();
    for i in 0..h {
        for j in 0..w {
            mean += luma(img[(i, j, 0)], img[(i, j, 1)], img[(i, j, 2)]);
        }
    }
    mean *= fl::<F>(1.0 / (h * w) as f64);
    let f = fl::<F>(factor);
    let one = F::one();
    img.mapv_inplace(|v| clamp01(v * f + mean * (one - f)));
}

/// Blends each pixel with its own gray value: factor 1 is identity.
pub fn adjust_saturation<F: Elem>(img: &mut Array3<F>, factor: f64) {
    let (h, w, _) = img.dim();
    let f = fl::<F>(factor);
    let one = F::one();
    for i in 0..h {
        for j in 0..w {
            let g = luma(img[(i, j, 0)], img[(i, j, 1)], img[(i, j, 2)]);
            for c in 0..3 {
                img[(i, j, c)] = clamp01(img[(i, j, c)] * f + g * (one - f));
            }
        }
    }
}

/// Rotates hue by `delta` in [-0.5, 0.5] turns via HSV.
pub fn adjust_hue<F: Elem>(img: &mut Array3<F>, delta: f64) {
    let (h, w, _) = img.dim();
    for i in 0..h {
        for j in 0..w {
            let r = img[(i, j, 0)].to_f();
            let g = img[(i, j, 1)].to_f();
            let b = img[(i, j, 2)].to_f();
            let (hh, s, v) = rgb_to_hsv(r, g, b);
            let hh = (hh + delta).rem_euclid(1.0);
            let (r, g, b) = hsv_to_rgb(hh, s, v);
            img[(i, j, 0)] = fl(r);
            img[(i, j, 1)] = fl(g);
            img[(i, j, 2)] = fl(b);
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Replaces all channels by the luma gray value.
pub fn to_grayscale<F: Elem>(img: &mut Array3<F>) {
    let (h, w, _) = img.dim();
    for i in 0..h {
        for j in 0..w {
            let g = luma(img[(i, j, 0)], img[(i, j, 1)], img[(i, j, 2)]);
            for c in 0..3 {
                img[(i, j, c)] = g;
            }
        }
    }
}

/// Separable Gaussian blur with clamped borders; the kernel radius is
/// `ceil(3 sigma)` and weights are normalized to sum to one.
pub fn gaussian_blur<F: Elem>(img: &Array3<F>, sigma: f64) -> Array3<F> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for k in -radius..=radius {
        let w = (-0.5 * (k as f64 / sigma).powi(2)).exp();
        kernel.push(w);
        sum += w;
    }
    for w in kernel.iter_mut() {
        *w /= sum;
    }
    let kernel: Vec<F> = kernel.into_iter().map(fl::<F>).collect();

    let (h, w, _) = img.dim();
    let mut tmp = Array3::<F>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let mut acc = F::zero();
                for (ki, &kw) in kernel.iter().enumerate() {
                    let jj = (j as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += kw * img[(i, jj, c)];
                }
                tmp[(i, j, c)] = acc;
            }
        }
    }
    let mut out = Array3::<F>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let mut acc = F::zero();
                for (ki, &kw) in kernel.iter().enumerate() {
                    let ii = (i as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += kw * tmp[(ii, j, c)];
                }
                out[(i, j, c)] = acc;
            }
        }
    }
    out
}

/// Inverts every value at or above `threshold`.
pub fn solarize<F: Elem>(img: &mut Array3<F>, threshold: f64) {
    let t = fl::<F>(threshold);
    let one = F::one();
    img.mapv_inplace(|v| if v >= t { one - v } else { v });
}

/// Standardizes channels in place with the dataset statistics.
pub fn normalize<F: Elem>(img: &mut Array3<F>, stats: &NormStats) {
    for c in 0..3 {
        let mean = fl::<F>(stats.mean[c]);
        let inv_std = fl::<F>(1.0 / stats.std[c]);
        Zip::from(img.index_axis_mut(ndarray::Axis(2), c)).for_each(|v| {
            *v = (*v - mean) * inv_std;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CropWindow;
    use crate::nn::stream_rng;
    use ndarray::Array3;
    use rand::Rng;

    fn random_img(h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = stream_rng(seed, 20, 0, 0);
        Array3::from_shape_fn((h, w, 3), |_| rng.random::<f64>())
    }

    #[test]
    fn identity_resize_is_bit_exact() {
        let img = random_img(17, 23, 1);
        let out = resize(img.view(), 17, 23);
        assert_eq!(img, out);
    }

    #[test]
    fn full_window_crop_identity() {
        let img = random_img(16, 16, 2);
        let w = CropWindow {
            x: 0.0,
            y: 0.0,
            w: 16.0,
            h: 16.0,
            out_size: 16,
            effective_gsd: 1.0,
        };
        assert_eq!(crop_resize(img.view(), &w), img);
    }

    #[test]
    fn constant_image_resamples_to_constant() {
        let img = Array3::<f64>::from_elem((20, 30, 3), 0.37);
        let out = resample_window(img.view(), 3.2, 4.7, 11.3, 9.9, 8, 8);
        assert!(out.iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn bilinear_midpoint_value() {
        // 2x1 image: sampling exactly between the two pixel centers
        // averages them.
        let mut img = Array3::<f64>::zeros((1, 2, 3));
        img[(0, 0, 0)] = 0.0;
        img[(0, 1, 0)] = 1.0;
        let out = resample_window(img.view(), 0.5, 0.0, 1.0, 1.0, 1, 1);
        assert!((out[(0, 0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hflip_is_involution() {
        let img = random_img(9, 14, 3);
        let mut flipped = img.clone();
        hflip(&mut flipped);
        assert_ne!(img, flipped);
        hflip(&mut flipped);
        assert_eq!(img, flipped);
    }

    #[test]
    fn brightness_identity_and_scale() {
        let img = random_img(4, 4, 4);
        let mut same = img.clone();
        adjust_brightness(&mut same, 1.0);
        assert_eq!(img, same);
        let mut dark = img.clone();
        adjust_brightness(&mut dark, 0.5);
        for (a, b) in img.iter().zip(dark.iter()) {
            assert!((a * 0.5 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn saturation_noop_on_gray() {
        let mut img = Array3::<f64>::from_elem((3, 3, 3), 0.42);
        let before = img.clone();
        adjust_saturation(&mut img, 0.2);
        for (a, b) in img.iter().zip(before.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hue_full_turn_is_identity() {
        let img = random_img(5, 5, 6);
        let mut shifted = img.clone();
        adjust_hue(&mut shifted, 0.25);
        adjust_hue(&mut shifted, -0.25);
        for (a, b) in img.iter().zip(shifted.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn grayscale_channels_match() {
        let mut img = random_img(6, 6, 7);
        to_grayscale(&mut img);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(img[(i, j, 0)], img[(i, j, 1)]);
                assert_eq!(img[(i, j, 1)], img[(i, j, 2)]);
            }
        }
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let img = Array3::<f64>::from_elem((12, 12, 3), 0.73);
        let out = gaussian_blur(&img, 1.3);
        assert!(out.iter().all(|&v| (v - 0.73).abs() < 1e-12));
    }

    #[test]
    fn blur_smooths_an_impulse() {
        let mut img = Array3::<f64>::zeros((9, 9, 3));
        img[(4, 4, 0)] = 1.0;
        let out = gaussian_blur(&img, 1.0);
        assert!(out[(4, 4, 0)] < 1.0);
        assert!(out[(4, 3, 0)] > 0.0);
        // mass is conserved away from borders
        let total: f64 = out.index_axis(ndarray::Axis(2), 0).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn solarize_inverts_above_threshold() {
        let mut img = Array3::<f64>::zeros((1, 2, 3));
        img[(0, 0, 0)] = 0.4;
        img[(0, 1, 0)] = 0.9;
        solarize(&mut img, 0.5);
        assert!((img[(0, 0, 0)] - 0.4).abs() < 1e-12);
        assert!((img[(0, 1, 0)] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn normalize_applies_channel_stats() {
        let mut img = Array3::<f64>::from_elem((2, 2, 3), 0.5);
        let stats = NormStats {
            mean: [0.5, 0.25, 0.0],
            std: [1.0, 0.5, 2.0],
        };
        normalize(&mut img, &stats);
        assert!((img[(0, 0, 0)] - 0.0).abs() < 1e-12);
        assert!((img[(0, 0, 1)] - 0.5).abs() < 1e-12);
        assert!((img[(0, 0, 2)] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn u8_round_trip() {
        let img = random_img(4, 4, 8);
        let bytes = to_u8(img.view());
        let back: Array3<f64> = to_float(bytes.view());
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
