//! Crop-window geometry for global and local views.
//!
//! Windows are continuous rectangles in source pixel space, so sampled area
//! fractions and aspect ratios hit their target ranges exactly instead of
//! drifting through integer rounding. Cropping and resizing change the ground
//! sample distance of a view; [`effective_gsd`] is the single place that
//! conversion lives.

use crate::error::{Error, Result};
use rand::Rng;

/// Area-fraction range, as fractions of the source image area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleRange {
    pub lo: f64,
    pub hi: f64,
}

impl ScaleRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let r = ScaleRange { lo, hi };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo > 0.0 && self.lo <= self.hi && self.hi <= 1.0) {
            return Err(Error::config(format!(
                "scale range must satisfy 0 < lo <= hi <= 1, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// Width/height aspect-ratio range for sampled crops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AspectRange {
    pub lo: f64,
    pub hi: f64,
}

impl AspectRange {
    pub const SQUARE: AspectRange = AspectRange { lo: 1.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let r = AspectRange { lo, hi };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo > 0.0 && self.lo <= self.hi) {
            return Err(Error::config(format!(
                "aspect range must satisfy 0 < lo <= hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

impl Default for AspectRange {
    /// The default crop distortion range (3/4 to 4/3).
    fn default() -> Self {
        AspectRange {
            lo: 3.0 / 4.0,
            hi: 4.0 / 3.0,
        }
    }
}

/// A crop rectangle in source pixel coordinates plus the square output size
/// it will be resized to, and the ground sample distance the combination
/// induces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub out_size: usize,
    pub effective_gsd: f64,
}

impl CropWindow {
    pub fn area_fraction(&self, src_w: usize, src_h: usize) -> f64 {
        (self.w * self.h) / (src_w as f64 * src_h as f64)
    }

    pub fn aspect(&self) -> f64 {
        self.w / self.h
    }
}

/// How local views pick their area fractions and output sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingStrategy {
    /// Every local view draws from the full local range.
    Random,
    /// The local range is split into `n_local` equal sub-ranges; view `i`
    /// draws only from sub-range `i`, so the first local view is always the
    /// smallest and the last the largest.
    Uniform,
    /// Local views draw from the full range but are resized to per-view
    /// output sizes.
    VariableSize,
}

impl SamplingStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SamplingStrategy::Random),
            "uniform" => Ok(SamplingStrategy::Uniform),
            "variable-size" => Ok(SamplingStrategy::VariableSize),
            other => Err(Error::config(format!(
                "unknown sampling strategy {other:?} (expected random|uniform|variable-size)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SamplingStrategy::Random => "random",
            SamplingStrategy::Uniform => "uniform",
            SamplingStrategy::VariableSize => "variable-size",
        }
    }
}

/// The published per-view output sizes for the six-view variable-size setup.
pub const VARIABLE_SIZES_SIX: [usize; 6] = [192, 176, 144, 128, 112, 96];

/// Full view-sampling configuration: 2 global views plus `n_local` locals.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSpecConfig {
    pub n_local: usize,
    pub local_scale: ScaleRange,
    pub global_scale: ScaleRange,
    pub strategy: SamplingStrategy,
    pub aspect: AspectRange,
    pub global_out: usize,
    pub local_out: usize,
    /// Per-local-view output sizes; used only by the variable-size strategy.
    pub variable_sizes: Vec<usize>,
}

impl Default for ViewSpecConfig {
    fn default() -> Self {
        ViewSpecConfig {
            n_local: 8,
            local_scale: ScaleRange { lo: 0.05, hi: 0.25 },
            global_scale: ScaleRange { lo: 0.25, hi: 1.0 },
            strategy: SamplingStrategy::Random,
            aspect: AspectRange::default(),
            global_out: 224,
            local_out: 96,
            variable_sizes: Vec::new(),
        }
    }
}

impl ViewSpecConfig {
    pub fn n_views(&self) -> usize {
        2 + self.n_local
    }

    pub fn validate(&self) -> Result<()> {
        self.local_scale.validate()?;
        self.global_scale.validate()?;
        self.aspect.validate()?;
        if self.global_out == 0 || self.local_out == 0 {
            return Err(Error::config("view output sizes must be positive"));
        }
        if self.strategy == SamplingStrategy::VariableSize
            && self.variable_sizes.len() != self.n_local
        {
            return Err(Error::config(format!(
                "variable-size strategy needs one output size per local view: \
                 n_local = {}, variable_sizes has {}",
                self.n_local,
                self.variable_sizes.len()
            )));
        }
        if self.variable_sizes.iter().any(|&s| s == 0) {
            return Err(Error::config("variable sizes must be positive"));
        }
        Ok(())
    }

    /// Output size of view `i` in the canonical ordering (2 globals then locals).
    pub fn out_size_of(&self, view: usize) -> usize {
        if view < 2 {
            self.global_out
        } else if self.strategy == SamplingStrategy::VariableSize {
            self.variable_sizes[view - 2]
        } else {
            self.local_out
        }
    }
}

/// Ground sample distance of a crop of `crop_w` x `crop_h` source pixels
/// resized to `out_size` squared: `src_gsd * sqrt(w*h) / out_size`.
///
/// The geometric mean makes the value symmetric in both axes and reduces to
/// the exact per-axis scaling for square crops.
pub fn effective_gsd(src_gsd: f64, crop_w: f64, crop_h: f64, out_size: usize) -> Result<f64> {
    if !(src_gsd > 0.0 && crop_w > 0.0 && crop_h > 0.0 && out_size > 0) {
        return Err(Error::domain(format!(
            "effective_gsd needs positive inputs, got gsd={src_gsd}, w={crop_w}, h={crop_h}, out={out_size}"
        )));
    }
    Ok(src_gsd * (crop_w * crop_h).sqrt() / out_size as f64)
}

/// Samples one crop window with area fraction uniform in `scale` and aspect
/// ratio log-uniform in `aspect`. Ten rejection retries; if no feasible
/// rectangle is found, falls back to a centered maximal crop with the aspect
/// ratio clamped into range (never an error).
///
/// Draw order per attempt is fixed (area fraction, aspect, x, y) so a seeded
/// generator reproduces windows exactly.
pub fn sample_crop<R: Rng>(
    src_w: usize,
    src_h: usize,
    scale: ScaleRange,
    aspect: AspectRange,
    out_size: usize,
    src_gsd: f64,
    rng: &mut R,
) -> Result<CropWindow> {
    scale.validate()?;
    aspect.validate()?;
    if src_w < 8 || src_h < 8 {
        return Err(Error::config(format!(
            "source must be at least 8x8 pixels, got {src_w}x{src_h}"
        )));
    }
    if out_size == 0 {
        return Err(Error::config("out_size must be positive"));
    }
    if src_gsd <= 0.0 {
        return Err(Error::domain("source gsd must be positive".to_string()));
    }

    let (sw, sh) = (src_w as f64, src_h as f64);
    let src_area = sw * sh;

    for _ in 0..10 {
        let frac = draw_uniform(rng, scale.lo, scale.hi);
        let log_aspect = draw_uniform(rng, aspect.lo.ln(), aspect.hi.ln());
        let a = log_aspect.exp();
        let area = frac * src_area;
        let w = (area * a).sqrt();
        let h = (area / a).sqrt();
        if w >= 1.0 && h >= 1.0 && w <= sw && h <= sh {
            let x = draw_uniform(rng, 0.0, sw - w);
            let y = draw_uniform(rng, 0.0, sh - h);
            return Ok(CropWindow {
                x,
                y,
                w,
                h,
                out_size,
                effective_gsd: effective_gsd(src_gsd, w, h, out_size)?,
            });
        }
    }

    // Centered maximal fallback: clamp the source aspect into range, take the
    // largest rectangle with that aspect that fits, and center it.
    let a = (sw / sh).clamp(aspect.lo, aspect.hi);
    let (w, h) = if sh * a <= sw {
        (sh * a, sh)
    } else {
        (sw, sw / a)
    };
    Ok(CropWindow {
        x: (sw - w) / 2.0,
        y: (sh - h) / 2.0,
        w,
        h,
        out_size,
        effective_gsd: effective_gsd(src_gsd, w, h, out_size)?,
    })
}

fn draw_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    lo + rng.random::<f64>() * (hi - lo)
}

/// Splits `scale` into `n` equal-width contiguous sub-ranges, ascending.
pub fn uniform_subranges(scale: ScaleRange, n: usize) -> Result<Vec<ScaleRange>> {
    scale.validate()?;
    if n == 0 {
        return Err(Error::config(
            "uniform_subranges needs at least one sub-range".to_string(),
        ));
    }
    let width = scale.width() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut lo = scale.lo;
    for i in 0..n {
        // Anchor the last boundary at hi exactly so the union covers the range.
        let hi = if i + 1 == n {
            scale.hi
        } else {
            scale.lo + (i + 1) as f64 * width
        };
        out.push(ScaleRange { lo, hi });
        lo = hi;
    }
    Ok(out)
}

/// Samples all windows for one source image: 2 global views followed by
/// `n_local` local views, each drawn according to the configured strategy.
pub fn sample_view_windows<R: Rng>(
    src_w: usize,
    src_h: usize,
    src_gsd: f64,
    cfg: &ViewSpecConfig,
    rng: &mut R,
) -> Result<Vec<CropWindow>> {
    cfg.validate()?;
    let mut windows = Vec::with_capacity(cfg.n_views());
    for _ in 0..2 {
        windows.push(sample_crop(
            src_w,
            src_h,
            cfg.global_scale,
            cfg.aspect,
            cfg.global_out,
            src_gsd,
            rng,
        )?);
    }
    match cfg.strategy {
        SamplingStrategy::Random => {
            for _ in 0..cfg.n_local {
                windows.push(sample_crop(
                    src_w,
                    src_h,
                    cfg.local_scale,
                    cfg.aspect,
                    cfg.local_out,
                    src_gsd,
                    rng,
                )?);
            }
        }
        SamplingStrategy::Uniform => {
            let subs = uniform_subranges(cfg.local_scale, cfg.n_local.max(1))?;
            for sub in subs.iter().take(cfg.n_local) {
                windows.push(sample_crop(
                    src_w, src_h, *sub, cfg.aspect, cfg.local_out, src_gsd, rng,
                )?);
            }
        }
        SamplingStrategy::VariableSize => {
            for i in 0..cfg.n_local {
                windows.push(sample_crop(
                    src_w,
                    src_h,
                    cfg.local_scale,
                    cfg.aspect,
                    cfg.variable_sizes[i],
                    src_gsd,
                    rng,
                )?);
            }
        }
    }
    Ok(windows)
}
