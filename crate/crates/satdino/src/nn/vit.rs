//! Vision Transformer backbone with a class token, an optional GSD token,
//! positional-embedding interpolation for variable input resolutions, and
//! explicit backward passes for every layer.
//!
//! Token order is fixed: index 0 is [CLS], index 1 is [GSD] when enabled,
//! patch tokens follow in row-major grid order.

use crate::error::{Error, Result};
use crate::nn::{
    fl, gelu_bwd, gelu_fwd, layernorm_bwd, layernorm_fwd, linear_bwd, linear_fwd, matmul_tn,
    Elem, LayerNormCache,
};
use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;

/// Backbone hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub variant: String,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub use_gsd_token: bool,
    /// Side of the stored positional-embedding grid (the global-view grid).
    pub pos_grid: usize,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.patch_size == 0 || self.depth == 0 || self.pos_grid == 0 {
            return Err(Error::config(
                "patch_size, depth and pos_grid must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Number of non-patch tokens ([CLS], plus [GSD] when enabled).
    pub fn n_special(&self) -> usize {
        1 + self.use_gsd_token as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct VitBlockParams<F: Elem> {
    pub ln1_g: Array1<F>,
    pub ln1_b: Array1<F>,
    pub qkv_w: Array2<F>,
    pub qkv_b: Array1<F>,
    pub proj_w: Array2<F>,
    pub proj_b: Array1<F>,
    pub ln2_g: Array1<F>,
    pub ln2_b: Array1<F>,
    pub fc1_w: Array2<F>,
    pub fc1_b: Array1<F>,
    pub fc2_w: Array2<F>,
    pub fc2_b: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct VitParams<F: Elem> {
    pub patch_w: Array2<F>,
    pub patch_b: Array1<F>,
    pub cls_token: Array1<F>,
    pub gsd_token: Option<Array1<F>>,
    /// Positional entries for [CLS] (row 0) and [GSD] (row 1, when enabled).
    pub pos_special: Array2<F>,
    /// Positional entries for the stored patch grid, row-major.
    pub pos_grid: Array2<F>,
    pub blocks: Vec<VitBlockParams<F>>,
    pub norm_g: Array1<F>,
    pub norm_b: Array1<F>,
}

pub const INIT_STD: f64 = 0.02;

impl<F: Elem> VitParams<F> {
    pub fn init<R: Rng>(cfg: &ViTConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let pd = cfg.patch_size * cfg.patch_size * 3;
        let hidden = d * cfg.mlp_ratio;
        let tn = |shape: (usize, usize), rng: &mut R| {
            let mut a = Array2::<F>::zeros(shape);
            crate::nn::fill_trunc_normal(&mut a, INIT_STD, rng);
            a
        };
        let tn1 = |n: usize, rng: &mut R| {
            let mut a = Array1::<F>::zeros(n);
            crate::nn::fill_trunc_normal(&mut a, INIT_STD, rng);
            a
        };
        let patch_w = tn((pd, d), rng);
        let cls_token = tn1(d, rng);
        let gsd_token = cfg.use_gsd_token.then(|| tn1(d, rng));
        let pos_special = tn((cfg.n_special(), d), rng);
        let pos_grid = tn((cfg.pos_grid * cfg.pos_grid, d), rng);
        let blocks = (0..cfg.depth)
            .map(|_| VitBlockParams {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                qkv_w: tn((d, 3 * d), rng),
                qkv_b: Array1::zeros(3 * d),
                proj_w: tn((d, d), rng),
                proj_b: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                fc1_w: tn((d, hidden), rng),
                fc1_b: Array1::zeros(hidden),
                fc2_w: tn((hidden, d), rng),
                fc2_b: Array1::zeros(d),
            })
            .collect();
        VitParams {
            patch_w,
            patch_b: Array1::zeros(d),
            cls_token,
            gsd_token,
            pos_special,
            pos_grid,
            blocks,
            norm_g: Array1::ones(d),
            norm_b: Array1::zeros(d),
        }
    }
}

/// Cuts an (H, W, 3) image into non-overlapping patch rows. Each row is one
/// patch flattened in (py, px, channel) order.
pub fn patchify<F: Elem>(image: ArrayView3<F>, patch: usize) -> Result<Array2<F>> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * 3;
    let mut out = Array2::<F>::zeros((gh * gw, pd));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..3 {
                        row[k] = image[(gy * patch + py, gx * patch + px, ch)];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Cubic convolution kernel, a = -0.5.
fn cubic_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        A * (((t - 5.0) * t + 8.0) * t - 4.0)
    } else {
        0.0
    }
}

/// 1-D bicubic resampling taps from `src` cells to `dst` cells, with the
/// half-pixel-center mapping `s = (d + 0.5) * src/dst - 0.5` and clamped
/// border indices.
fn cubic_taps_1d(src: usize, dst: usize) -> Vec<[(usize, f64); 4]> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let sc = (d as f64 + 0.5) * scale - 0.5;
            let base = sc.floor();
            let mut taps = [(0usize, 0.0f64); 4];
            for (j, k) in (-1i64..=2).enumerate() {
                let idx = (base as i64 + k).clamp(0, src as i64 - 1) as usize;
                taps[j] = (idx, cubic_kernel(sc - (base + k as f64)));
            }
            taps
        })
        .collect()
}

/// Per-destination-cell sparse weights for a 2-D bicubic grid resample.
pub fn bicubic_grid_weights(src_g: usize, dst_h: usize, dst_w: usize) -> Vec<Vec<(usize, f64)>> {
    let ty = cubic_taps_1d(src_g, dst_h);
    let tx = cubic_taps_1d(src_g, dst_w);
    let mut out = Vec::with_capacity(dst_h * dst_w);
    for y in 0..dst_h {
        for x in 0..dst_w {
            let mut cell = Vec::with_capacity(16);
            for &(iy, wy) in &ty[y] {
                for &(ix, wx) in &tx[x] {
                    cell.push((iy * src_g + ix, wy * wx));
                }
            }
            out.push(cell);
        }
    }
    out
}

/// Bicubic 2-D interpolation of stored square-grid positional embeddings to a
/// target `dst_h x dst_w` grid. [CLS]/[GSD] positional entries are not part
/// of the grid and pass through the caller unchanged.
pub fn interpolate_pos_embed<F: Elem>(
    pos_grid: &Array2<F>,
    src_g: usize,
    dst_h: usize,
    dst_w: usize,
) -> Result<Array2<F>> {
    let (n, d) = pos_grid.dim();
    if n != src_g * src_g {
        return Err(Error::shape(format!(
            "stored grid has {n} rows, expected {src_g}^2"
        )));
    }
    if dst_h == 0 || dst_w == 0 {
        return Err(Error::shape("target grid must be non-empty".to_string()));
    }
    if dst_h == src_g && dst_w == src_g {
        return Ok(pos_grid.clone());
    }
    let weights = bicubic_grid_weights(src_g, dst_h, dst_w);
    let mut out = Array2::<F>::zeros((dst_h * dst_w, d));
    for (mut row, cell) in out.rows_mut().into_iter().zip(&weights) {
        for &(src_idx, w) in cell {
            let w = fl::<F>(w);
            Zip::from(&mut row)
                .and(pos_grid.row(src_idx))
                .for_each(|o, &v| *o += w * v);
        }
    }
    Ok(out)
}

struct BlockCache<F: Elem> {
    ln1: LayerNormCache<F>,
    n1: Array2<F>,
    qkv: Array2<F>,
    probs: Array4<F>,
    attn_cat: Array2<F>,
    ln2: LayerNormCache<F>,
    n2: Array2<F>,
    mlp_h: Array2<F>,
    mlp_a: Array2<F>,
}

/// Activation cache for one view group's forward pass.
pub struct GroupCache<F: Elem> {
    patch_rows: Array2<F>,
    blocks: Vec<BlockCache<F>>,
    lnf: LayerNormCache<F>,
    v: usize,
    t: usize,
    grid: usize,
}

/// Final-norm token outputs for a group of same-sized views.
pub struct GroupOutput<F: Elem> {
    /// (V*T, d) tokens after the final norm.
    pub tokens: Array2<F>,
    pub v: usize,
    pub t: usize,
    pub grid: usize,
    /// When requested: per layer, (V, heads, T, T) attention probabilities.
    pub attn: Option<Vec<Array4<F>>>,
}

impl<F: Elem> GroupOutput<F> {
    /// Class-token embedding of every view, (V, d).
    pub fn cls_rows(&self) -> Array2<F> {
        let d = self.tokens.ncols();
        let mut out = Array2::<F>::zeros((self.v, d));
        for i in 0..self.v {
            out.row_mut(i).assign(&self.tokens.row(i * self.t));
        }
        out
    }

    /// GSD-token embedding of every view, (V, d); only valid with a GSD token.
    pub fn gsd_rows(&self) -> Array2<F> {
        let d = self.tokens.ncols();
        let mut out = Array2::<F>::zeros((self.v, d));
        for i in 0..self.v {
            out.row_mut(i).assign(&self.tokens.row(i * self.t + 1));
        }
        out
    }

    /// Patch-token embeddings of view `i`, (grid*grid, d).
    pub fn patch_rows(&self, i: usize, n_special: usize) -> Array2<F> {
        self.tokens
            .slice(s![i * self.t + n_special..(i + 1) * self.t, ..])
            .to_owned()
    }
}

fn attention_fwd<F: Elem>(
    qkv: &Array2<F>,
    v_count: usize,
    t: usize,
    heads: usize,
    dh: usize,
    want_probs: bool,
) -> (Array2<F>, Array4<F>) {
    let d = heads * dh;
    let scale = fl::<F>(1.0 / (dh as f64).sqrt());
    let mut cat = Array2::<F>::zeros((v_count * t, d));
    let mut probs = Array4::<F>::zeros(if want_probs {
        (v_count, heads, t, t)
    } else {
        (0, 0, 0, 0)
    });
    // Each view owns a disjoint row-block of `cat`, so this parallel loop is
    // deterministic.
    let rows_iter = cat.axis_chunks_iter_mut(Axis(0), t).into_par_iter();
    if want_probs {
        rows_iter
            .zip(probs.outer_iter_mut().into_par_iter())
            .enumerate()
            .for_each(|(vi, (mut rows, mut pview))| {
                attention_view(qkv, vi, t, heads, dh, scale, &mut rows, Some(&mut pview));
            });
    } else {
        rows_iter.enumerate().for_each(|(vi, mut rows)| {
            attention_view(qkv, vi, t, heads, dh, scale, &mut rows, None);
        });
    }
    (cat, probs)
}

fn attention_view<F: Elem>(
    qkv: &Array2<F>,
    vi: usize,
    t: usize,
    heads: usize,
    dh: usize,
    scale: F,
    rows: &mut ndarray::ArrayViewMut2<F>,
    mut probs: Option<&mut ndarray::ArrayViewMut3<F>>,
) {
    let d = heads * dh;
    let r0 = vi * t;
    for h in 0..heads {
        let c = h * dh;
        let q = qkv.slice(s![r0..r0 + t, c..c + dh]).to_owned();
        let k = qkv.slice(s![r0..r0 + t, d + c..d + c + dh]).to_owned();
        let vv = qkv
            .slice(s![r0..r0 + t, 2 * d + c..2 * d + c + dh])
            .to_owned();
        let mut s_mat = q.dot(&k.t());
        s_mat.mapv_inplace(|x| x * scale);
        crate::nn::softmax_rows_inplace(&mut s_mat);
        let out = s_mat.dot(&vv);
        rows.slice_mut(s![.., c..c + dh]).assign(&out);
        if let Some(p) = probs.as_deref_mut() {
            p.index_axis_mut(Axis(0), h).assign(&s_mat);
        }
    }
}

fn attention_bwd<F: Elem>(
    qkv: &Array2<F>,
    probs: &Array4<F>,
    d_cat: &Array2<F>,
    t: usize,
    heads: usize,
    dh: usize,
) -> Array2<F> {
    let d = heads * dh;
    let v_count = probs.dim().0;
    let scale = fl::<F>(1.0 / (dh as f64).sqrt());
    let mut dqkv = Array2::<F>::zeros((v_count * t, 3 * d));
    dqkv.axis_chunks_iter_mut(Axis(0), t)
        .into_par_iter()
        .zip(probs.outer_iter().into_par_iter())
        .enumerate()
        .for_each(|(vi, (mut drows, pview))| {
            let r0 = vi * t;
            for h in 0..heads {
                let c = h * dh;
                let q = qkv.slice(s![r0..r0 + t, c..c + dh]).to_owned();
                let k = qkv.slice(s![r0..r0 + t, d + c..d + c + dh]).to_owned();
                let vv = qkv
                    .slice(s![r0..r0 + t, 2 * d + c..2 * d + c + dh])
                    .to_owned();
                let a = pview.index_axis(Axis(0), h);
                let d_out = d_cat.slice(s![r0..r0 + t, c..c + dh]);
                // dV = A^T dO
                let dv = a.t().dot(&d_out);
                // dA = dO V^T ; dS = A .* (dA - rowsum(dA .* A))
                let da = d_out.dot(&vv.t());
                let mut ds = Array2::<F>::zeros((t, t));
                for i in 0..t {
                    let mut dot = F::zero();
                    for j in 0..t {
                        dot += da[(i, j)] * a[(i, j)];
                    }
                    for j in 0..t {
                        ds[(i, j)] = a[(i, j)] * (da[(i, j)] - dot);
                    }
                }
                ds.mapv_inplace(|x| x * scale);
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                drows.slice_mut(s![.., c..c + dh]).assign(&dq);
                drows.slice_mut(s![.., d + c..d + c + dh]).assign(&dk);
                drows
                    .slice_mut(s![.., 2 * d + c..2 * d + c + dh])
                    .assign(&dv);
            }
        });
    dqkv
}

/// Runs the backbone over a group of same-sized views.
///
/// Returns final-norm tokens for all views plus (when `want_cache`) the
/// activation cache for [`backward_group`]. Inference passes skip the cache.
pub fn forward_group<F: Elem>(
    p: &VitParams<F>,
    cfg: &ViTConfig,
    views: &[ArrayView3<F>],
    want_cache: bool,
    want_attn: bool,
) -> Result<(GroupOutput<F>, Option<GroupCache<F>>)> {
    cfg.validate()?;
    let v_count = views.len();
    if v_count == 0 {
        return Err(Error::shape("empty view group".to_string()));
    }
    let (h, w, _) = views[0].dim();
    if h != w {
        return Err(Error::shape(format!("views must be square, got {h}x{w}")));
    }
    for view in views {
        if view.dim() != views[0].dim() {
            return Err(Error::shape("views in one group must share dims".to_string()));
        }
    }
    let patch = cfg.patch_size;
    let grid = h / patch;
    let ns = cfg.n_special();
    let tp = grid * grid;
    let t = tp + ns;
    let d = cfg.embed_dim;

    // Patch extraction + linear embedding over the whole group.
    let mut patch_rows = Array2::<F>::zeros((v_count * tp, patch * patch * 3));
    let row_results: Vec<Result<Array2<F>>> =
        views.par_iter().map(|view| patchify(*view, patch)).collect();
    for (vi, r) in row_results.into_iter().enumerate() {
        patch_rows
            .slice_mut(s![vi * tp..(vi + 1) * tp, ..])
            .assign(&r?);
    }
    let tok = linear_fwd(patch_rows.view(), &p.patch_w, &p.patch_b);

    // Positional entries for this grid.
    let pos_patch = interpolate_pos_embed(&p.pos_grid, cfg.pos_grid, grid, grid)?;

    // Assemble sequences: [CLS], [GSD]?, patches.
    let mut x = Array2::<F>::zeros((v_count * t, d));
    x.axis_chunks_iter_mut(Axis(0), t)
        .into_par_iter()
        .zip(tok.axis_chunks_iter(Axis(0), tp).into_par_iter())
        .for_each(|(mut seq, tok_rows)| {
            for j in 0..d {
                seq[(0, j)] = p.cls_token[j] + p.pos_special[(0, j)];
            }
            if let Some(g) = &p.gsd_token {
                for j in 0..d {
                    seq[(1, j)] = g[j] + p.pos_special[(1, j)];
                }
            }
            for i in 0..tp {
                for j in 0..d {
                    seq[(ns + i, j)] = tok_rows[(i, j)] + pos_patch[(i, j)];
                }
            }
        });

    let mut blocks_cache = Vec::with_capacity(if want_cache { cfg.depth } else { 0 });
    let mut attn_all = want_attn.then(Vec::new);
    for blk in &p.blocks {
        let (n1, ln1) = layernorm_fwd(x.view(), &blk.ln1_g, &blk.ln1_b);
        let qkv = linear_fwd(n1.view(), &blk.qkv_w, &blk.qkv_b);
        let keep_probs = want_cache || want_attn;
        let (attn_cat, probs) =
            attention_fwd(&qkv, v_count, t, cfg.heads, cfg.head_dim(), keep_probs);
        let proj = linear_fwd(attn_cat.view(), &blk.proj_w, &blk.proj_b);
        let x1 = &x + &proj;
        let (n2, ln2) = layernorm_fwd(x1.view(), &blk.ln2_g, &blk.ln2_b);
        let mlp_h = linear_fwd(n2.view(), &blk.fc1_w, &blk.fc1_b);
        let mlp_a = gelu_fwd(&mlp_h);
        let mlp_out = linear_fwd(mlp_a.view(), &blk.fc2_w, &blk.fc2_b);
        let x2 = &x1 + &mlp_out;
        if let Some(list) = attn_all.as_mut() {
            list.push(probs.clone());
        }
        if want_cache {
            blocks_cache.push(BlockCache {
                ln1,
                n1,
                qkv,
                probs,
                attn_cat,
                ln2,
                n2,
                mlp_h,
                mlp_a,
            });
        }
        x = x2;
    }
    let (y, lnf) = layernorm_fwd(x.view(), &p.norm_g, &p.norm_b);
    let out = GroupOutput {
        tokens: y,
        v: v_count,
        t,
        grid,
        attn: attn_all,
    };
    let cache = want_cache.then(|| GroupCache {
        patch_rows,
        blocks: blocks_cache,
        lnf,
        v: v_count,
        t,
        grid,
    });
    Ok((out, cache))
}

/// Backpropagates `d_tokens` (gradient at the final-norm output) through the
/// backbone, accumulating parameter gradients into `grads`.
pub fn backward_group<F: Elem>(
    p: &VitParams<F>,
    cfg: &ViTConfig,
    cache: &GroupCache<F>,
    d_tokens: ArrayView2<F>,
    grads: &mut VitParams<F>,
) {
    let (v_count, t, grid) = (cache.v, cache.t, cache.grid);
    let ns = cfg.n_special();
    let tp = grid * grid;
    let d = cfg.embed_dim;

    let (mut dx, dgf, dbf) = layernorm_bwd(&cache.lnf, &p.norm_g, d_tokens);
    grads.norm_g += &dgf;
    grads.norm_b += &dbf;

    for idx in (0..p.blocks.len()).rev() {
        let blk = &p.blocks[idx];
        let bc = &cache.blocks[idx];
        // MLP branch
        let (da, dw2, db2) = linear_bwd(bc.mlp_a.view(), &blk.fc2_w, dx.view());
        let dh = gelu_bwd(&bc.mlp_h, &da);
        let (dn2, dw1, db1) = linear_bwd(bc.n2.view(), &blk.fc1_w, dh.view());
        let (dx1_ln, dg2, db2ln) = layernorm_bwd(&bc.ln2, &blk.ln2_g, dn2.view());
        let dx1 = &dx + &dx1_ln;
        // Attention branch
        let (d_cat, dwp, dbp) = linear_bwd(bc.attn_cat.view(), &blk.proj_w, dx1.view());
        let dqkv = attention_bwd(&bc.qkv, &bc.probs, &d_cat, t, cfg.heads, cfg.head_dim());
        let (dn1, dwqkv, dbqkv) = linear_bwd(bc.n1.view(), &blk.qkv_w, dqkv.view());
        let (dx0_ln, dg1, db1ln) = layernorm_bwd(&bc.ln1, &blk.ln1_g, dn1.view());
        dx = &dx1 + &dx0_ln;

        let gb = &mut grads.blocks[idx];
        gb.fc2_w += &dw2;
        gb.fc2_b += &db2;
        gb.fc1_w += &dw1;
        gb.fc1_b += &db1;
        gb.ln2_g += &dg2;
        gb.ln2_b += &db2ln;
        gb.proj_w += &dwp;
        gb.proj_b += &dbp;
        gb.qkv_w += &dwqkv;
        gb.qkv_b += &dbqkv;
        gb.ln1_g += &dg1;
        gb.ln1_b += &db1ln;
    }

    // Split sequence grads into token/positional/patch parts.
    let mut d_tok = Array2::<F>::zeros((v_count * tp, d));
    let mut d_pos_patch = Array2::<F>::zeros((tp, d));
    for vi in 0..v_count {
        let r0 = vi * t;
        {
            let row = dx.row(r0);
            grads.cls_token += &row;
            let mut ps = grads.pos_special.row_mut(0);
            ps += &row;
        }
        if ns > 1 {
            let row = dx.row(r0 + 1);
            if let Some(g) = grads.gsd_token.as_mut() {
                *g += &row;
            }
            let mut ps = grads.pos_special.row_mut(1);
            ps += &row;
        }
        let patch_part = dx.slice(s![r0 + ns..r0 + t, ..]);
        d_tok
            .slice_mut(s![vi * tp..(vi + 1) * tp, ..])
            .assign(&patch_part);
        d_pos_patch += &patch_part;
    }

    // Positional grads flow back through the bicubic interpolation.
    if grid == cfg.pos_grid {
        grads.pos_grid += &d_pos_patch;
    } else {
        let weights = bicubic_grid_weights(cfg.pos_grid, grid, grid);
        for (dst, cell) in weights.iter().enumerate() {
            for &(src_idx, wgt) in cell {
                let wgt = fl::<F>(wgt);
                let src_row = d_pos_patch.row(dst);
                Zip::from(grads.pos_grid.row_mut(src_idx))
                    .and(src_row)
                    .for_each(|o, &v| *o += wgt * v);
            }
        }
    }

    // Patch embedding grads; image gradients are never needed.
    let dw = matmul_tn(cache.patch_rows.view(), d_tok.view());
    grads.patch_w += &dw;
    grads.patch_b += &d_tok.sum_axis(Axis(0));
}

/// Single-image token outputs.
pub struct TokenOutputs<F: Elem> {
    pub cls: Array1<F>,
    pub gsd: Option<Array1<F>>,
    /// (grid*grid, d) patch embeddings after the final norm.
    pub patches: Array2<F>,
    /// Per layer, (heads, T, T) attention probabilities when requested.
    pub attentions: Option<Vec<Array3<F>>>,
    pub grid: usize,
}

/// Inference forward for one image.
pub fn forward_tokens<F: Elem>(
    p: &VitParams<F>,
    cfg: &ViTConfig,
    image: ArrayView3<F>,
    want_attn: bool,
) -> Result<TokenOutputs<F>> {
    let (out, _) = forward_group(p, cfg, &[image], false, want_attn)?;
    let ns = cfg.n_special();
    let cls = out.tokens.row(0).to_owned();
    let gsd = cfg.use_gsd_token.then(|| out.tokens.row(1).to_owned());
    let patches = out.tokens.slice(s![ns.., ..]).to_owned();
    let attentions = out.attn.map(|layers| {
        layers
            .into_iter()
            .map(|a| a.index_axis(Axis(0), 0).to_owned())
            .collect()
    });
    Ok(TokenOutputs {
        cls,
        gsd,
        patches,
        attentions,
        grid: out.grid,
    })
}

/// Per-head class-token attention over the patch grid from the last layer,
/// plus the per-patch argmax head used for rendering.
pub struct AttentionHeadMap<F: Elem> {
    /// (heads, grid, grid): cls-row attention restricted to patch columns.
    pub per_head: Array3<F>,
    /// (grid, grid): head index with the highest attention per patch.
    pub argmax_head: Array2<usize>,
    /// Full cls-row sums per head (over all tokens), for sanity checks.
    pub row_sums: Vec<F>,
}

pub fn attention_head_map<F: Elem>(
    p: &VitParams<F>,
    cfg: &ViTConfig,
    image: ArrayView3<F>,
) -> Result<AttentionHeadMap<F>> {
    let out = forward_tokens(p, cfg, image, true)?;
    let layers = out.attentions.expect("attention was requested");
    let last = layers.last().expect("depth >= 1");
    let ns = cfg.n_special();
    let grid = out.grid;
    let heads = cfg.heads;
    let mut per_head = Array3::<F>::zeros((heads, grid, grid));
    let mut row_sums = Vec::with_capacity(heads);
    for h in 0..heads {
        let cls_row = last.slice(s![h, 0, ..]);
        row_sums.push(cls_row.sum());
        for gy in 0..grid {
            for gx in 0..grid {
                per_head[(h, gy, gx)] = cls_row[ns + gy * grid + gx];
            }
        }
    }
    let mut argmax_head = Array2::<usize>::zeros((grid, grid));
    for gy in 0..grid {
        for gx in 0..grid {
            let mut best = 0;
            for h in 1..heads {
                if per_head[(h, gy, gx)] > per_head[(best, gy, gx)] {
                    best = h;
                }
            }
            argmax_head[(gy, gx)] = best;
        }
    }
    Ok(AttentionHeadMap {
        per_head,
        argmax_head,
        row_sums,
    })
}
