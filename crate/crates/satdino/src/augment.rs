//! Photometric augmentation with scalable intensity, temporal source
//! selection, and assembly of the final multi-crop [`ViewBatch`].
//!
//! Every stochastic decision is drawn from the caller's seeded generator in a
//! fixed order (windows first, then one plan per view), so a `(sample,
//! config, seed)` triple reproduces a batch bit for bit.

use crate::config::AugLevel;
use crate::error::{Error, Result};
use crate::geometry::{effective_gsd, sample_view_windows, ViewSpecConfig};
use crate::imageops::{
    adjust_brightness, adjust_contrast, adjust_hue, adjust_saturation, crop_resize, gaussian_blur,
    hflip, normalize, solarize, to_grayscale, NormStats,
};
use crate::nn::Elem;
use ndarray::Array3;
use rand::Rng;

/// Augmentation probabilities. The defaults follow the multi-crop
/// self-distillation convention: flip 0.5, color jitter 0.8, grayscale 0.2,
/// blur 1.0 / 0.1 / 0.5 for global-1 / global-2 / locals, solarization 0.2 on
/// the second global view.
#[derive(Debug, Clone, PartialEq)]
pub struct AugProfile {
    pub level: AugLevel,
    pub flip_p: f64,
    pub jitter_p: f64,
    pub grayscale_p: f64,
    pub blur_p_global1: f64,
    pub blur_p_global2: f64,
    pub blur_p_local: f64,
    pub solarize_p_global2: f64,
    pub temporal: bool,
}

impl AugProfile {
    /// The full-strength (level = default) probability table.
    pub fn default_table(temporal: bool) -> Self {
        AugProfile {
            level: AugLevel::Default,
            flip_p: 0.5,
            jitter_p: 0.8,
            grayscale_p: 0.2,
            blur_p_global1: 1.0,
            blur_p_global2: 0.1,
            blur_p_local: 0.5,
            solarize_p_global2: 0.2,
            temporal,
        }
    }

    /// Profile for a named level, starting from the default table.
    pub fn for_level(level: AugLevel, temporal: bool) -> Result<Self> {
        scale_intensity(&AugProfile::default_table(temporal), level)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p_global1", self.blur_p_global1),
            ("blur_p_global2", self.blur_p_global2),
            ("blur_p_local", self.blur_p_local),
            ("solarize_p_global2", self.solarize_p_global2),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Scales the photometric probabilities of a default-level profile.
///
/// `soft` multiplies them by 0.25 and `mid` by 0.75; the horizontal flip is
/// exempt from scaling. `none` disables every stochastic op (flip included)
/// so that, with degenerate crop ranges, repeated views are bit-identical;
/// geometric cropping itself still applies.
pub fn scale_intensity(base: &AugProfile, level: AugLevel) -> Result<AugProfile> {
    if base.level != AugLevel::Default {
        return Err(Error::config(format!(
            "scale_intensity expects a default-level base profile, got {:?}",
            base.level
        )));
    }
    base.validate()?;
    let mut out = base.clone();
    out.level = level;
    match level {
        AugLevel::Default => {}
        AugLevel::None => {
            out.flip_p = 0.0;
            out.jitter_p = 0.0;
            out.grayscale_p = 0.0;
            out.blur_p_global1 = 0.0;
            out.blur_p_global2 = 0.0;
            out.blur_p_local = 0.0;
            out.solarize_p_global2 = 0.0;
        }
        AugLevel::Soft | AugLevel::Mid => {
            let f = level.factor();
            out.jitter_p *= f;
            out.grayscale_p *= f;
            out.blur_p_global1 *= f;
            out.blur_p_global2 *= f;
            out.blur_p_local *= f;
            out.solarize_p_global2 *= f;
        }
    }
    Ok(out)
}

/// Which slot of the multi-crop recipe a view fills; decides blur/solarize
/// probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewRole {
    Global1,
    Global2,
    Local,
}

impl ViewRole {
    pub fn of_index(view: usize) -> ViewRole {
        match view {
            0 => ViewRole::Global1,
            1 => ViewRole::Global2,
            _ => ViewRole::Local,
        }
    }
}

/// Color jitter factors drawn once per application.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

/// The resolved stochastic plan for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewAugPlan {
    pub flip: bool,
    pub jitter: Option<JitterParams>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
    pub solarize: bool,
}

const JITTER_BRIGHTNESS: f64 = 0.4;
const JITTER_CONTRAST: f64 = 0.4;
const JITTER_SATURATION: f64 = 0.2;
const JITTER_HUE: f64 = 0.1;
const BLUR_SIGMA_RANGE: (f64, f64) = (0.1, 2.0);
const SOLARIZE_THRESHOLD: f64 = 0.5;

fn coin<R: Rng>(rng: &mut R, p: f64) -> bool {
    if p <= 0.0 {
        return false;
    }
    if p >= 1.0 {
        return true;
    }
    rng.random::<f64>() < p
}

fn uniform_in<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

/// Draws the stochastic plan for one view. Draw order is fixed: flip, jitter
/// (plus its four factors when it fires), grayscale, blur (plus sigma),
/// solarize.
pub fn draw_view_plan<R: Rng>(profile: &AugProfile, role: ViewRole, rng: &mut R) -> ViewAugPlan {
    let flip = coin(rng, profile.flip_p);
    let jitter = coin(rng, profile.jitter_p).then(|| JitterParams {
        brightness: uniform_in(rng, 1.0 - JITTER_BRIGHTNESS, 1.0 + JITTER_BRIGHTNESS),
        contrast: uniform_in(rng, 1.0 - JITTER_CONTRAST, 1.0 + JITTER_CONTRAST),
        saturation: uniform_in(rng, 1.0 - JITTER_SATURATION, 1.0 + JITTER_SATURATION),
        hue: uniform_in(rng, -JITTER_HUE, JITTER_HUE),
    });
    let grayscale = coin(rng, profile.grayscale_p);
    let blur_p = match role {
        ViewRole::Global1 => profile.blur_p_global1,
        ViewRole::Global2 => profile.blur_p_global2,
        ViewRole::Local => profile.blur_p_local,
    };
    let blur_sigma =
        coin(rng, blur_p).then(|| uniform_in(rng, BLUR_SIGMA_RANGE.0, BLUR_SIGMA_RANGE.1));
    let solarize = role == ViewRole::Global2 && coin(rng, profile.solarize_p_global2);
    ViewAugPlan {
        flip,
        jitter,
        grayscale,
        blur_sigma,
        solarize,
    }
}

/// Applies a plan to a view in place (pixels in [0, 1], not yet normalized).
pub fn apply_view_plan<F: Elem>(img: &mut Array3<F>, plan: &ViewAugPlan) {
    if plan.flip {
        hflip(img);
    }
    if let Some(j) = plan.jitter {
        adjust_brightness(img, j.brightness);
        adjust_contrast(img, j.contrast);
        adjust_saturation(img, j.saturation);
        adjust_hue(img, j.hue);
    }
    if plan.grayscale {
        to_grayscale(img);
    }
    if let Some(sigma) = plan.blur_sigma {
        *img = gaussian_blur(img, sigma);
    }
    if plan.solarize {
        solarize(img, SOLARIZE_THRESHOLD);
    }
}

/// An image ready for the view pipeline: float pixels plus its ground sample
/// distance.
#[derive(Debug, Clone)]
pub struct SourceImage<F: Elem> {
    pub pixels: Array3<F>,
    pub gsd: f64,
}

/// Picks source images for (global-1, global-2, locals) out of a time series
/// of the same area.
///
/// Three or more images: three distinct samples, uniform without
/// replacement. Two: the globals get both (random order) and the local source
/// is one of them, uniform. One: everything uses it.
pub fn select_temporal_sources<T, R: Rng>(series: &[T], rng: &mut R) -> Result<(usize, usize, usize)> {
    match series.len() {
        0 => Err(Error::data("empty temporal series".to_string())),
        1 => Ok((0, 0, 0)),
        2 => {
            let swap = coin(rng, 0.5);
            let (g1, g2) = if swap { (1, 0) } else { (0, 1) };
            let local = usize::from(coin(rng, 0.5));
            Ok((g1, g2, local))
        }
        n => {
            // Partial Fisher-Yates over 0..n: three draws, no replacement.
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..3 {
                let j = i + (rng.random::<f64>() * (n - i) as f64) as usize;
                let j = j.min(n - 1);
                idx.swap(i, j);
            }
            Ok((idx[0], idx[1], idx[2]))
        }
    }
}

/// The augmented multi-crop views of one source sample.
#[derive(Debug, Clone)]
pub struct ViewBatch<F: Elem> {
    pub global_views: Vec<Array3<F>>,
    pub local_views: Vec<Array3<F>>,
    /// Effective GSD of every view (2 globals then locals), meters/pixel.
    pub gsd_targets: Vec<f64>,
    pub source_id: String,
}

impl<F: Elem> ViewBatch<F> {
    pub fn n_views(&self) -> usize {
        self.global_views.len() + self.local_views.len()
    }

    pub fn view(&self, i: usize) -> &Array3<F> {
        if i < self.global_views.len() {
            &self.global_views[i]
        } else {
            &self.local_views[i - self.global_views.len()]
        }
    }
}

/// Input to [`build_views`]: one image, or a time series of the same area.
pub enum ViewSource<'a, F: Elem> {
    Single(&'a SourceImage<F>),
    Series(&'a [SourceImage<F>]),
}

/// Builds the full augmented view batch for one sample: windows from the
/// geometry sampler, temporal source selection when enabled, crop + bilinear
/// resize, per-view photometric plans, and normalization. The per-view
/// effective GSD becomes the regression target.
pub fn build_views<F: Elem, R: Rng>(
    source: ViewSource<'_, F>,
    view_cfg: &ViewSpecConfig,
    aug: &AugProfile,
    norm: &NormStats,
    source_id: &str,
    rng: &mut R,
) -> Result<ViewBatch<F>> {
    aug.validate()?;
    let series: &[SourceImage<F>] = match &source {
        ViewSource::Single(s) => std::slice::from_ref(*s),
        ViewSource::Series(s) => s,
    };
    if series.is_empty() {
        return Err(Error::data(format!("sample {source_id}: empty series")));
    }
    let dims = series[0].pixels.dim();
    for s in series {
        if s.pixels.dim() != dims {
            return Err(Error::data(format!(
                "sample {source_id}: temporal series images must share dimensions"
            )));
        }
    }
    let (src_h, src_w, _) = dims;

    let windows = sample_view_windows(src_w, src_h, series[0].gsd, view_cfg, rng)?;

    let (g1, g2, local_src) = if aug.temporal {
        select_temporal_sources(series, rng)?
    } else {
        (0, 0, 0)
    };
    let source_of = |view: usize| -> &SourceImage<F> {
        match ViewRole::of_index(view) {
            ViewRole::Global1 => &series[g1],
            ViewRole::Global2 => &series[g2],
            ViewRole::Local => &series[local_src],
        }
    };

    let mut global_views = Vec::with_capacity(2);
    let mut local_views = Vec::with_capacity(view_cfg.n_local);
    let mut gsd_targets = Vec::with_capacity(windows.len());
    for (i, win) in windows.iter().enumerate() {
        let src = source_of(i);
        let mut img = crop_resize(src.pixels.view(), win);
        let plan = draw_view_plan(aug, ViewRole::of_index(i), rng);
        apply_view_plan(&mut img, &plan);
        normalize(&mut img, norm);
        // The target is the window's effective GSD under the actual source
        // of this view (temporal sources may declare different GSDs).
        let target = effective_gsd(src.gsd, win.w, win.h, win.out_size)?;
        gsd_targets.push(target);
        if i < 2 {
            global_views.push(img);
        } else {
            local_views.push(img);
        }
    }
    Ok(ViewBatch {
        global_views,
        local_views,
        gsd_targets,
        source_id: source_id.to_string(),
    })
}
