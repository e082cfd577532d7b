//! Projection heads: the prototype head that produces distillation logits
//! from the class token, and the linear regression head on the GSD token.

use crate::error::{Error, Result};
use crate::nn::{fl, gelu_bwd, gelu_fwd, linear_bwd, linear_fwd, matmul, matmul_tn, Elem};
use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand::Rng;

/// Head and distillation hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DinoHeadConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    /// Number of prototypes K (output logits).
    pub prototypes: usize,
    pub tau_s: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub tau_t_warmup_epochs: f64,
    pub center_momentum: f64,
    /// Prototype layer receives no gradient for this many epochs.
    pub freeze_proto_epochs: f64,
}

impl DinoHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prototypes < 2 {
            return Err(Error::config("need at least 2 prototypes".to_string()));
        }
        if !(self.tau_s > 0.0) {
            return Err(Error::config(format!(
                "student temperature must be positive, got {}",
                self.tau_s
            )));
        }
        if !(self.tau_t_start > 0.0 && self.tau_t_start <= self.tau_t_end) {
            return Err(Error::config(format!(
                "teacher temperature schedule needs 0 < start <= end, got [{}, {}]",
                self.tau_t_start, self.tau_t_end
            )));
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return Err(Error::config(format!(
                "center momentum must be in [0, 1), got {}",
                self.center_momentum
            )));
        }
        Ok(())
    }
}

const NORM_EPS: f64 = 1e-12;

/// MLP -> unit-normalized bottleneck -> row-normalized prototype layer.
#[derive(Debug, Clone)]
pub struct DinoHeadParams<F: Elem> {
    pub l1_w: Array2<F>,
    pub l1_b: Array1<F>,
    pub l2_w: Array2<F>,
    pub l2_b: Array1<F>,
    pub l3_w: Array2<F>,
    pub l3_b: Array1<F>,
    /// Prototype directions, (K, bottleneck); rows are normalized on use.
    pub proto: Array2<F>,
}

impl<F: Elem> DinoHeadParams<F> {
    pub fn init<R: Rng>(cfg: &DinoHeadConfig, rng: &mut R) -> Self {
        let tn = |shape: (usize, usize), rng: &mut R| {
            let mut a = Array2::<F>::zeros(shape);
            crate::nn::fill_trunc_normal(&mut a, super::vit::INIT_STD, rng);
            a
        };
        DinoHeadParams {
            l1_w: tn((cfg.in_dim, cfg.hidden_dim), rng),
            l1_b: Array1::zeros(cfg.hidden_dim),
            l2_w: tn((cfg.hidden_dim, cfg.hidden_dim), rng),
            l2_b: Array1::zeros(cfg.hidden_dim),
            l3_w: tn((cfg.hidden_dim, cfg.bottleneck_dim), rng),
            l3_b: Array1::zeros(cfg.bottleneck_dim),
            proto: tn((cfg.prototypes, cfg.bottleneck_dim), rng),
        }
    }
}

pub struct DinoHeadCache<F: Elem> {
    x: Array2<F>,
    h1: Array2<F>,
    a1: Array2<F>,
    h2: Array2<F>,
    a2: Array2<F>,
    zn: Array2<F>,
    z_norms: Array1<F>,
    proto_n: Array2<F>,
    proto_norms: Array1<F>,
}

fn normalize_rows<F: Elem>(x: &Array2<F>) -> (Array2<F>, Array1<F>) {
    let mut out = x.clone();
    let mut norms = Array1::<F>::zeros(x.nrows());
    let eps = fl::<F>(NORM_EPS);
    Zip::from(out.rows_mut())
        .and(&mut norms)
        .par_for_each(|mut r, n| {
            let mut s = F::zero();
            for &v in r.iter() {
                s += v * v;
            }
            let norm = s.sqrt();
            *n = norm;
            let inv = F::one() / (norm + eps);
            for v in r.iter_mut() {
                *v *= inv;
            }
        });
    (out, norms)
}

/// Gradient of `y = x / (|x| + eps)` given `dy`, per row.
fn normalize_rows_bwd<F: Elem>(
    xn: &Array2<F>,
    norms: &Array1<F>,
    dy: &Array2<F>,
) -> Array2<F> {
    let eps = fl::<F>(NORM_EPS);
    let mut dx = Array2::<F>::zeros(xn.raw_dim());
    Zip::from(dx.rows_mut())
        .and(xn.rows())
        .and(dy.rows())
        .and(norms)
        .par_for_each(|mut dxr, xnr, dyr, &n| {
            let denom = n + eps;
            // x = xn * denom; d(x/denom)/dx = (I - xn xn^T * n/denom) / denom
            let mut dot = F::zero();
            for (a, b) in xnr.iter().zip(dyr.iter()) {
                dot += *a * *b;
            }
            let coef = dot * n / denom;
            for j in 0..dxr.len() {
                dxr[j] = (dyr[j] - xnr[j] * coef) / denom;
            }
        });
    dx
}

/// Projects embeddings to K prototype logits.
///
/// The bottleneck vector is L2-normalized and compared against row-normalized
/// prototypes, so logits are cosine similarities in [-1, 1].
pub fn project<F: Elem>(
    p: &DinoHeadParams<F>,
    x: ArrayView2<F>,
) -> (Array2<F>, DinoHeadCache<F>) {
    let h1 = linear_fwd(x, &p.l1_w, &p.l1_b);
    let a1 = gelu_fwd(&h1);
    let h2 = linear_fwd(a1.view(), &p.l2_w, &p.l2_b);
    let a2 = gelu_fwd(&h2);
    let z = linear_fwd(a2.view(), &p.l3_w, &p.l3_b);
    let (zn, z_norms) = normalize_rows(&z);
    let (proto_n, proto_norms) = normalize_rows(&p.proto);
    let logits = matmul(zn.view(), proto_n.t());
    (
        logits,
        DinoHeadCache {
            x: x.to_owned(),
            h1,
            a1,
            h2,
            a2,
            zn,
            z_norms,
            proto_n,
            proto_norms,
        },
    )
}

/// Backward through the projection head. Returns the input gradient and
/// accumulates parameter gradients into `grads`.
pub fn project_bwd<F: Elem>(
    p: &DinoHeadParams<F>,
    cache: &DinoHeadCache<F>,
    d_logits: ArrayView2<F>,
    grads: &mut DinoHeadParams<F>,
) -> Array2<F> {
    // logits = zn @ proto_n^T
    let dzn = matmul(d_logits, cache.proto_n.view());
    let dproto_n = matmul_tn(d_logits, cache.zn.view()); // (K, bottleneck)
    let dproto = normalize_rows_bwd(&cache.proto_n, &cache.proto_norms, &dproto_n);
    grads.proto += &dproto;

    let dz = normalize_rows_bwd(&cache.zn, &cache.z_norms, &dzn);
    let (da2, dw3, db3) = linear_bwd(cache.a2.view(), &p.l3_w, dz.view());
    grads.l3_w += &dw3;
    grads.l3_b += &db3;
    let dh2 = gelu_bwd(&cache.h2, &da2);
    let (da1, dw2, db2) = linear_bwd(cache.a1.view(), &p.l2_w, dh2.view());
    grads.l2_w += &dw2;
    grads.l2_b += &db2;
    let dh1 = gelu_bwd(&cache.h1, &da1);
    let (dx, dw1, db1) = linear_bwd(cache.x.view(), &p.l1_w, dh1.view());
    grads.l1_w += &dw1;
    grads.l1_b += &db1;
    dx
}

/// Unit-norm bottleneck vectors from the cache (diagnostics/tests).
pub fn bottleneck_of<F: Elem>(cache: &DinoHeadCache<F>) -> &Array2<F> {
    &cache.zn
}

/// Linear regression head on the GSD token: one scalar per view.
#[derive(Debug, Clone)]
pub struct GsdHeadParams<F: Elem> {
    pub w: Array1<F>,
    pub b: F,
}

impl<F: Elem> GsdHeadParams<F> {
    /// Zero-initialized: predictions start at 0 and the head learns from the
    /// regression loss alone.
    pub fn init(in_dim: usize) -> Self {
        GsdHeadParams {
            w: Array1::zeros(in_dim),
            b: F::zero(),
        }
    }
}

pub fn gsd_head_fwd<F: Elem>(p: &GsdHeadParams<F>, x: ArrayView2<F>) -> Array1<F> {
    let mut out = Array1::<F>::zeros(x.nrows());
    Zip::from(&mut out).and(x.rows()).for_each(|o, r| {
        let mut s = p.b;
        for (a, b) in r.iter().zip(p.w.iter()) {
            s += *a * *b;
        }
        *o = s;
    });
    out
}

pub fn gsd_head_bwd<F: Elem>(
    p: &GsdHeadParams<F>,
    x: ArrayView2<F>,
    d_out: &Array1<F>,
    grads: &mut GsdHeadParams<F>,
) -> Array2<F> {
    let mut dx = Array2::<F>::zeros(x.raw_dim());
    for (i, d) in d_out.iter().enumerate() {
        grads.b += *d;
        Zip::from(&mut grads.w).and(x.row(i)).for_each(|g, &v| {
            *g += *d * v;
        });
        Zip::from(dx.row_mut(i)).and(&p.w).for_each(|o, &w| {
            *o = *d * w;
        });
    }
    dx
}

#[cfg(test)]
mod tests {
    use approx::AbsDiffEq;
    use super::*;
    use crate::nn::stream_rng;

    fn cfg() -> DinoHeadConfig {
        DinoHeadConfig {
            in_dim: 96,
            hidden_dim: 32,
            bottleneck_dim: 16,
            prototypes: 512,
            tau_s: 0.1,
            tau_t_start: 0.04,
            tau_t_end: 0.07,
            tau_t_warmup_epochs: 30.0,
            center_momentum: 0.9,
            freeze_proto_epochs: 1.0,
        }
    }

    #[test]
    fn project_shapes() {
        let c = cfg();
        let mut rng = stream_rng(0, 1, 0, 0);
        let p = DinoHeadParams::<f64>::init(&c, &mut rng);
        let x = Array2::<f64>::from_shape_fn((3, 96), |_| crate::nn::draw_normal(&mut rng));
        let (logits, cache) = project(&p, x.view());
        assert_eq!(logits.dim(), (3, 512));
        for r in bottleneck_of(&cache).rows() {
            let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "bottleneck norm {n}");
        }
    }

    #[test]
    fn project_scale_invariance_of_bottleneck() {
        let c = cfg();
        let mut rng = stream_rng(1, 1, 0, 0);
        let p = DinoHeadParams::<f64>::init(&c, &mut rng);
        let x = Array2::<f64>::from_shape_fn((2, 96), |_| crate::nn::draw_normal(&mut rng));
        let (l1, _) = project(&p, x.view());
        // Scaling the head input by 10 scales the bottleneck input by 10 only
        // if the MLP were linear; the invariance the head guarantees is that
        // scaling the pre-normalization bottleneck leaves logits unchanged.
        let mut p_scaled = p.clone();
        p_scaled.l3_w.mapv_inplace(|v| v * 10.0);
        p_scaled.l3_b.mapv_inplace(|v| v * 10.0);
        let (l2, _) = project(&p_scaled, x.view());
        let max_diff = l1
            .iter()
            .zip(l2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-5, "logits changed by {max_diff}");
    }

    #[test]
    fn project_zero_weights_zero_logits() {
        let c = cfg();
        let mut rng = stream_rng(2, 1, 0, 0);
        let mut p = DinoHeadParams::<f64>::init(&c, &mut rng);
        p.l1_w.fill(0.0);
        p.l2_w.fill(0.0);
        p.l3_w.fill(0.0);
        p.proto.fill(0.0);
        let x = Array2::<f64>::from_shape_fn((2, 96), |_| crate::nn::draw_normal(&mut rng));
        let (logits, _) = project(&p, x.view());
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let c = DinoHeadConfig {
            in_dim: 6,
            hidden_dim: 5,
            bottleneck_dim: 4,
            prototypes: 3,
            ..cfg()
        };
        let mut rng = stream_rng(3, 1, 0, 0);
        let p = DinoHeadParams::<f64>::init(&c, &mut rng);
        let x = Array2::<f64>::from_shape_fn((2, 6), |_| crate::nn::draw_normal(&mut rng));
        let w = Array2::<f64>::from_shape_fn((2, 3), |_| crate::nn::draw_normal(&mut rng));
        let loss = |p: &DinoHeadParams<f64>, x: &Array2<f64>| {
            let (l, _) = project(p, x.view());
            (&l * &w).sum()
        };
        let (_, cache) = project(&p, x.view());
        let mut grads = p.clone();
        grads.l1_w.fill(0.0);
        grads.l1_b.fill(0.0);
        grads.l2_w.fill(0.0);
        grads.l2_b.fill(0.0);
        grads.l3_w.fill(0.0);
        grads.l3_b.fill(0.0);
        grads.proto.fill(0.0);
        let dx = project_bwd(&p, &cache, w.view(), &mut grads);
        let h = 1e-6;
        // input gradient
        for idx in [(0usize, 0usize), (1, 5)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6);
        }
        // parameter gradients, including through both normalizations
        for (get, set, g) in [
            (
                p.l3_w[(2, 1)],
                (2usize, 1usize, "l3"),
                grads.l3_w[(2, 1)],
            ),
            (p.proto[(1, 2)], (1, 2, "proto"), grads.proto[(1, 2)]),
        ] {
            let (i, j, which) = set;
            let mut pp = p.clone();
            let mut pm = p.clone();
            match which {
                "l3" => {
                    pp.l3_w[(i, j)] = get + h;
                    pm.l3_w[(i, j)] = get - h;
                }
                _ => {
                    pp.proto[(i, j)] = get + h;
                    pm.proto[(i, j)] = get - h;
                }
            }
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert!(
                (fd - g).abs() < 1e-6,
                "{which}[{i},{j}]: fd {fd} vs analytic {g}"
            );
        }
    }

    #[test]
    fn gsd_head_zero_init_predicts_zero_and_learns_gradients() {
        let p = GsdHeadParams::<f64>::init(8);
        let mut rng = stream_rng(4, 1, 0, 0);
        let x = Array2::<f64>::from_shape_fn((3, 8), |_| crate::nn::draw_normal(&mut rng));
        let out = gsd_head_fwd(&p, x.view());
        assert!(out.iter().all(|&v| v == 0.0));

        let d = Array1::<f64>::from_vec(vec![1.0, -0.5, 0.25]);
        let mut grads = GsdHeadParams::<f64>::init(8);
        let dx = gsd_head_bwd(&p, x.view(), &d, &mut grads);
        // dw = sum_i d_i x_i ; db = sum d ; dx_i = d_i w = 0 here
        let mut want_w = Array1::<f64>::zeros(8);
        for i in 0..3 {
            for j in 0..8 {
                want_w[j] += d[i] * x[(i, j)];
            }
        }
        assert!(grads.w.abs_diff_eq(&want_w, 1e-12));
        assert!((grads.b - 0.75).abs() < 1e-12);
        assert!(dx.iter().all(|&v| v == 0.0));
    }
}
