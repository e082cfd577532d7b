//! Numeric kernels shared by the backbone, heads and probes.
//!
//! Everything is generic over [`Elem`] so the training path runs in f32 while
//! gradient checks instantiate the exact same code in f64. All parallel
//! kernels use fixed chunk decompositions, so results are bit-identical
//! regardless of thread count.

pub mod head;
pub mod optim;
pub mod vit;

use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scalar element for all tensors: f32 in the fast path, f64 in 64-bit mode.
pub trait Elem: ndarray::NdFloat {
    fn from_f(v: f64) -> Self;
    fn to_f(self) -> f64;
}

impl Elem for f32 {
    #[inline]
    fn from_f(v: f64) -> f32 {
        v as f32
    }
    #[inline]
    fn to_f(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    #[inline]
    fn from_f(v: f64) -> f64 {
        v
    }
    #[inline]
    fn to_f(self) -> f64 {
        self
    }
}

/// Shorthand constructor for generic scalars.
#[inline]
pub fn fl<F: Elem>(v: f64) -> F {
    F::from_f(v)
}

/// Rows per parallel GEMM chunk. Fixed so the output decomposition (and hence
/// every bit of the result) does not depend on the number of worker threads.
const GEMM_CHUNK: usize = 512;

/// `a @ b` with deterministic row-chunked parallelism.
pub fn matmul<F: Elem>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let (m, k) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(k, kb, "matmul inner dims: {m}x{k} @ {kb}x{n}");
    let mut out = Array2::<F>::zeros((m, n));
    if m <= GEMM_CHUNK {
        general_mat_mul(F::one(), &a, &b, F::zero(), &mut out.view_mut());
    } else {
        out.axis_chunks_iter_mut(Axis(0), GEMM_CHUNK)
            .into_par_iter()
            .zip(a.axis_chunks_iter(Axis(0), GEMM_CHUNK).into_par_iter())
            .for_each(|(mut oc, ac)| {
                general_mat_mul(F::one(), &ac, &b, F::zero(), &mut oc);
            });
    }
    out
}

/// `a^T @ b`, chunked over the output columns (the row count of a weight
/// gradient is small, so column chunks are what parallelize).
pub fn matmul_tn<F: Elem>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let (ka, m) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(ka, kb, "matmul_tn inner dims");
    let mut out = Array2::<F>::zeros((m, n));
    if n <= GEMM_CHUNK {
        general_mat_mul(F::one(), &a.t(), &b, F::zero(), &mut out.view_mut());
    } else {
        out.axis_chunks_iter_mut(Axis(1), GEMM_CHUNK)
            .into_par_iter()
            .zip(b.axis_chunks_iter(Axis(1), GEMM_CHUNK).into_par_iter())
            .for_each(|(mut oc, bc)| {
                general_mat_mul(F::one(), &a.t(), &bc, F::zero(), &mut oc);
            });
    }
    out
}

/// Linear layer `y = x @ w + b`.
pub fn linear_fwd<F: Elem>(x: ArrayView2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut y = matmul(x, w.view());
    y.axis_chunks_iter_mut(Axis(0), GEMM_CHUNK)
        .into_par_iter()
        .for_each(|mut rows| {
            for mut r in rows.rows_mut() {
                r += b;
            }
        });
    y
}

/// Gradients of a linear layer. `dx = dy @ w^T`, `dw = x^T @ dy`,
/// `db = column sums of dy` (summed in fixed row order).
pub fn linear_bwd<F: Elem>(
    x: ArrayView2<F>,
    w: &Array2<F>,
    dy: ArrayView2<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let dx = matmul(dy, w.t());
    let dw = matmul_tn(x, dy);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

pub struct LayerNormCache<F: Elem> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Row-wise layer norm: `y = xhat * g + b` with `xhat = (x - mean) * rstd`.
pub fn layernorm_fwd<F: Elem>(
    x: ArrayView2<F>,
    g: &Array1<F>,
    b: &Array1<F>,
) -> (Array2<F>, LayerNormCache<F>) {
    let (n, d) = x.dim();
    let mut y = Array2::<F>::zeros((n, d));
    let mut xhat = Array2::<F>::zeros((n, d));
    let mut rstd = Array1::<F>::zeros(n);
    let inv_d = fl::<F>(1.0 / d as f64);
    let eps = fl::<F>(LAYER_NORM_EPS);
    Zip::from(y.rows_mut())
        .and(xhat.rows_mut())
        .and(&mut rstd)
        .and(x.rows())
        .par_for_each(|mut yr, mut hr, rs, xr| {
            let mut mean = F::zero();
            for &v in xr.iter() {
                mean += v;
            }
            mean *= inv_d;
            let mut var = F::zero();
            for &v in xr.iter() {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let r = F::one() / (var + eps).sqrt();
            *rs = r;
            for j in 0..d {
                let h = (xr[j] - mean) * r;
                hr[j] = h;
                yr[j] = h * g[j] + b[j];
            }
        });
    (y, LayerNormCache { xhat, rstd })
}

/// Layer norm backward. Returns `(dx, dg, db)`.
pub fn layernorm_bwd<F: Elem>(
    cache: &LayerNormCache<F>,
    g: &Array1<F>,
    dy: ArrayView2<F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let (n, d) = cache.xhat.dim();
    let mut dx = Array2::<F>::zeros((n, d));
    let inv_d = fl::<F>(1.0 / d as f64);
    Zip::from(dx.rows_mut())
        .and(dy.rows())
        .and(cache.xhat.rows())
        .and(&cache.rstd)
        .par_for_each(|mut dxr, dyr, hr, &rs| {
            let mut s1 = F::zero(); // mean of dxhat
            let mut s2 = F::zero(); // mean of dxhat * xhat
            for j in 0..d {
                let dh = dyr[j] * g[j];
                s1 += dh;
                s2 += dh * hr[j];
            }
            s1 *= inv_d;
            s2 *= inv_d;
            for j in 0..d {
                let dh = dyr[j] * g[j];
                dxr[j] = rs * (dh - s1 - hr[j] * s2);
            }
        });
    // Parameter grads reduce over rows in fixed order.
    let mut dg = Array1::<F>::zeros(d);
    let mut db = Array1::<F>::zeros(d);
    for (dyr, hr) in dy.rows().into_iter().zip(cache.xhat.rows()) {
        for j in 0..d {
            dg[j] += dyr[j] * hr[j];
            db[j] += dyr[j];
        }
    }
    (dx, dg, db)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-form GELU.
pub fn gelu_fwd<F: Elem>(x: &Array2<F>) -> Array2<F> {
    let c = fl::<F>(GELU_C);
    let a = fl::<F>(GELU_A);
    let half = fl::<F>(0.5);
    let mut y = x.clone();
    y.par_mapv_inplace(|v| {
        let t = (c * (v + a * v * v * v)).tanh();
        half * v * (F::one() + t)
    });
    y
}

/// GELU backward given the forward input.
pub fn gelu_bwd<F: Elem>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let c = fl::<F>(GELU_C);
    let a = fl::<F>(GELU_A);
    let three_a = fl::<F>(3.0 * GELU_A);
    let half = fl::<F>(0.5);
    let mut dx = Array2::<F>::zeros(x.raw_dim());
    Zip::from(&mut dx).and(x).and(dy).par_for_each(|o, &v, &d| {
        let u = c * (v + a * v * v * v);
        let t = u.tanh();
        let sech2 = F::one() - t * t;
        let du = c * (F::one() + three_a * v * v);
        *o = d * (half * (F::one() + t) + half * v * sech2 * du);
    });
    dx
}

/// In-place row softmax with max subtraction.
pub fn softmax_rows_inplace<F: Elem>(x: &mut Array2<F>) {
    Zip::from(x.rows_mut()).par_for_each(|mut r| {
        let mut mx = r[0];
        for &v in r.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for v in r.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = F::one() / sum;
        for v in r.iter_mut() {
            *v *= inv;
        }
    });
}

/// Row log-softmax.
pub fn log_softmax_rows<F: Elem>(x: ArrayView2<F>) -> Array2<F> {
    let mut out = x.to_owned();
    Zip::from(out.rows_mut()).par_for_each(|mut r| {
        let mut mx = r[0];
        for &v in r.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for &v in r.iter() {
            sum += (v - mx).exp();
        }
        let lse = mx + sum.ln();
        for v in r.iter_mut() {
            *v -= lse;
        }
    });
    out
}

/// Mean Shannon entropy (nats) of probability rows.
pub fn mean_row_entropy<F: Elem>(p: ArrayView2<F>) -> f64 {
    let n = p.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for r in p.rows() {
        let mut h = 0.0;
        for &v in r.iter() {
            let v = v.to_f();
            if v > 0.0 {
                h -= v * v.ln();
            }
        }
        total += h;
    }
    total / n as f64
}

/// Deterministic stream derivation: mixes a global seed with a role tag and
/// two indices (epoch/sample, etc.) into an independent ChaCha stream.
pub fn stream_rng(global_seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut s = splitmix64(global_seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(tag + 1));
    s = splitmix64(s ^ a.wrapping_mul(0xff51_afd7_ed55_8ccd));
    s = splitmix64(s ^ b.wrapping_mul(0xc4ce_b9fe_1a85_ec53));
    ChaCha8Rng::seed_from_u64(s)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard normal draw via Box-Muller, always computed in f64 so f32 and
/// f64 builds consume identical random streams.
pub fn draw_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.random();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.random();
        return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

/// Normal(0, std) truncated to two standard deviations, the usual transformer
/// weight init.
pub fn draw_trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let v = draw_normal(rng);
        if v.abs() <= 2.0 {
            return v * std;
        }
    }
}

/// Fills an array with truncated-normal values.
pub fn fill_trunc_normal<F: Elem, R: Rng, D: ndarray::Dimension>(
    arr: &mut ndarray::Array<F, D>,
    std: f64,
    rng: &mut R,
) {
    for v in arr.iter_mut() {
        *v = fl(draw_trunc_normal(rng, std));
    }
}

#[cfg(test)]
mod tests {
    use approx::AbsDiffEq;
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_matches_dot_small_and_chunked() {
        let mut rng = stream_rng(1, 0, 0, 0);
        for &(m, k, n) in &[(3usize, 4usize, 5usize), (700, 16, 9), (1100, 8, 600)] {
            let a = Array2::<f64>::from_shape_fn((m, k), |_| draw_normal(&mut rng));
            let b = Array2::<f64>::from_shape_fn((k, n), |_| draw_normal(&mut rng));
            let got = matmul(a.view(), b.view());
            let want = a.dot(&b);
            assert!(got.abs_diff_eq(&want, 1e-12));
            let got_tn = matmul_tn(a.t().to_owned().view(), b.view());
            assert!(got_tn.abs_diff_eq(&want, 1e-12));
        }
    }

    #[test]
    fn layernorm_normalizes_rows() {
        let mut rng = stream_rng(2, 0, 0, 0);
        let x = Array2::<f64>::from_shape_fn((17, 32), |_| 3.0 * draw_normal(&mut rng) + 1.5);
        let g = Array1::<f64>::ones(32);
        let b = Array1::<f64>::zeros(32);
        let (y, _) = layernorm_fwd(x.view(), &g, &b);
        for r in y.rows() {
            let mean: f64 = r.sum() / 32.0;
            let var: f64 = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4, "row variance {var}");
        }
    }

    #[test]
    fn layernorm_constant_rows_are_zeroed() {
        let x = Array2::<f64>::from_elem((4, 16), 7.25);
        let g = Array1::<f64>::ones(16);
        let b = Array1::<f64>::zeros(16);
        let (y, _) = layernorm_fwd(x.view(), &g, &b);
        assert!(y.iter().all(|v| v.is_finite() && v.abs() < 1e-9));
    }

    #[test]
    fn layernorm_gradient_matches_finite_differences() {
        let mut rng = stream_rng(3, 0, 0, 0);
        let x = Array2::<f64>::from_shape_fn((3, 8), |_| draw_normal(&mut rng));
        let g = Array1::<f64>::from_shape_fn(8, |_| 1.0 + 0.1 * draw_normal(&mut rng));
        let b = Array1::<f64>::from_shape_fn(8, |_| 0.1 * draw_normal(&mut rng));
        // loss = sum(y * w) for a fixed random weighting w
        let w = Array2::<f64>::from_shape_fn((3, 8), |_| draw_normal(&mut rng));
        let loss = |x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>| {
            let (y, _) = layernorm_fwd(x.view(), g, b);
            (&y * &w).sum()
        };
        let (_, cache) = layernorm_fwd(x.view(), &g, &b);
        let (dx, dg, db) = layernorm_bwd(&cache, &g, w.view());
        let h = 1e-6;
        for idx in [(0usize, 0usize), (1, 3), (2, 7)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp, &g, &b) - loss(&xm, &g, &b)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "dx at {idx:?}: {fd} vs {}", dx[idx]);
        }
        for j in [0usize, 5] {
            let mut gp = g.clone();
            gp[j] += h;
            let mut gm = g.clone();
            gm[j] -= h;
            let fd = (loss(&x, &gp, &b) - loss(&x, &gm, &b)) / (2.0 * h);
            assert!((fd - dg[j]).abs() < 1e-6);
            let mut bp = b.clone();
            bp[j] += h;
            let mut bm = b.clone();
            bm[j] -= h;
            let fd = (loss(&x, &g, &bp) - loss(&x, &g, &bm)) / (2.0 * h);
            assert!((fd - db[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        let x = array![[-2.0, -0.5, 0.0, 0.3, 1.7]];
        let dy = Array2::<f64>::ones((1, 5));
        let dx = gelu_bwd(&x, &dy);
        let h = 1e-6;
        for j in 0..5 {
            let mut xp = x.clone();
            xp[(0, j)] += h;
            let mut xm = x.clone();
            xm[(0, j)] -= h;
            let fd = (gelu_fwd(&xp).sum() - gelu_fwd(&xm).sum()) / (2.0 * h);
            assert!((fd - dx[(0, j)]).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = stream_rng(4, 0, 0, 0);
        let mut x = Array2::<f64>::from_shape_fn((5, 11), |_| 4.0 * draw_normal(&mut rng));
        softmax_rows_inplace(&mut x);
        for r in x.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
            assert!(r.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn log_softmax_consistent_with_softmax() {
        let x: Array2<f64> = array![[1.0, 2.0, -0.5], [0.0, 0.0, 0.0]];
        let ls = log_softmax_rows(x.view());
        let mut sm = x.clone();
        softmax_rows_inplace(&mut sm);
        for (&a, &b) in ls.iter().zip(sm.iter()) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stream_rng_is_stable_and_distinct() {
        let a: f64 = stream_rng(7, 1, 2, 3).random();
        let b: f64 = stream_rng(7, 1, 2, 3).random();
        let c: f64 = stream_rng(7, 1, 2, 4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn trunc_normal_respects_bounds() {
        let mut rng = stream_rng(5, 0, 0, 0);
        for _ in 0..10_000 {
            let v = draw_trunc_normal(&mut rng, 0.02);
            assert!(v.abs() <= 0.04 + 1e-12);
        }
    }
}
