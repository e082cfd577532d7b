//! Parameter-set plumbing and the AdamW optimizer.
//!
//! A [`ParamSet`] exposes every learnable tensor as a named flat slice in a
//! fixed order, which is what the optimizer, EMA updates, checkpoints and
//! gradient checks all iterate over.

use crate::nn::{fl, Elem};
use std::marker::PhantomData;

/// Name, shape and weight-decay eligibility of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldMeta {
    pub name: String,
    pub shape: Vec<usize>,
    /// Weight decay applies to weight matrices only, not biases, norms,
    /// tokens or positional tables.
    pub decay: bool,
}

pub trait ParamSet<F: Elem>: Clone {
    /// Field metadata, aligned with [`ParamSet::slices`].
    fn meta(&self) -> Vec<FieldMeta>;
    fn slices(&self) -> Vec<&[F]>;
    fn slices_mut(&mut self) -> Vec<&mut [F]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            for v in s {
                *v = F::zero();
            }
        }
        z
    }

    fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// `self += other * scale`, elementwise across every tensor.
    fn add_scaled(&mut self, other: &Self, scale: F) {
        let mut mine = self.slices_mut();
        let theirs = other.slices();
        assert_eq!(mine.len(), theirs.len(), "mismatched param sets");
        for (a, b) in mine.iter_mut().zip(theirs) {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y * scale;
            }
        }
    }

    fn scale_all(&mut self, by: F) {
        for s in self.slices_mut() {
            for v in s {
                *v *= by;
            }
        }
    }

    /// Largest absolute entry, for non-finite checks and diagnostics.
    fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for s in self.slices() {
            for v in s {
                m = m.max(v.to_f().abs());
            }
        }
        m
    }
}

/// AdamW with decoupled weight decay and bias correction.
///
/// The moment buffers mirror the optimized parameter set; the teacher network
/// never appears here by construction.
#[derive(Debug, Clone)]
pub struct AdamW<F: Elem, P: ParamSet<F>> {
    pub m: P,
    pub v: P,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    decay_mask: Vec<bool>,
    _f: PhantomData<F>,
}

impl<F: Elem, P: ParamSet<F>> AdamW<F, P> {
    pub fn new(params: &P) -> Self {
        let decay_mask = params.meta().iter().map(|m| m.decay).collect();
        AdamW {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_mask,
            _f: PhantomData,
        }
    }

    /// Number of parameter tensors the optimizer tracks.
    pub fn tensor_count(&self) -> usize {
        self.decay_mask.len()
    }

    pub fn step(&mut self, params: &mut P, grads: &P, lr: f64, weight_decay: f64) {
        self.t += 1;
        let b1 = fl::<F>(self.beta1);
        let b2 = fl::<F>(self.beta2);
        let one_m_b1 = fl::<F>(1.0 - self.beta1);
        let one_m_b2 = fl::<F>(1.0 - self.beta2);
        let bc1 = fl::<F>(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = fl::<F>(1.0 - self.beta2.powi(self.t as i32));
        let eps = fl::<F>(self.eps);
        let lr_f = fl::<F>(lr);
        let wd = fl::<F>(weight_decay);

        let mut p_slices = params.slices_mut();
        let g_slices = grads.slices();
        let mut m_slices = self.m.slices_mut();
        let mut v_slices = self.v.slices_mut();
        assert_eq!(p_slices.len(), g_slices.len());
        for i in 0..p_slices.len() {
            let decay = self.decay_mask[i];
            let p = &mut p_slices[i];
            let g = g_slices[i];
            let m = &mut m_slices[i];
            let v = &mut v_slices[i];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + one_m_b1 * gj;
                v[j] = b2 * v[j] + one_m_b2 * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut upd = mhat / (vhat.sqrt() + eps);
                if decay {
                    upd += wd * p[j];
                }
                p[j] -= lr_f * upd;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct Pair {
        a: ndarray::Array1<f64>,
        b: ndarray::Array2<f64>,
    }

    impl ParamSet<f64> for Pair {
        fn meta(&self) -> Vec<FieldMeta> {
            vec![
                FieldMeta {
                    name: "a".into(),
                    shape: vec![self.a.len()],
                    decay: false,
                },
                FieldMeta {
                    name: "b".into(),
                    shape: self.b.shape().to_vec(),
                    decay: true,
                },
            ]
        }
        fn slices(&self) -> Vec<&[f64]> {
            vec![self.a.as_slice().unwrap(), self.b.as_slice().unwrap()]
        }
        fn slices_mut(&mut self) -> Vec<&mut [f64]> {
            vec![
                self.a.as_slice_mut().unwrap(),
                self.b.as_slice_mut().unwrap(),
            ]
        }
    }

    #[test]
    fn adamw_first_step_moves_against_gradient() {
        let mut p = Pair {
            a: ndarray::Array1::zeros(3),
            b: ndarray::Array2::ones((2, 2)),
        };
        let mut g = p.zeros_like();
        g.a[0] = 1.0;
        g.b[(0, 0)] = -2.0;
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &g, 0.1, 0.0);
        // With bias correction the first step is -lr * sign(g).
        assert!((p.a[0] + 0.1).abs() < 1e-6);
        assert!((p.b[(0, 0)] - 1.1).abs() < 1e-6);
        assert_eq!(p.a[1], 0.0);
    }

    #[test]
    fn adamw_weight_decay_only_touches_decay_fields() {
        let mut p = Pair {
            a: ndarray::Array1::ones(2),
            b: ndarray::Array2::ones((1, 1)),
        };
        let g = p.zeros_like();
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &g, 0.5, 0.1);
        assert_eq!(p.a[0], 1.0); // no decay on `a`, zero grad
        assert!((p.b[(0, 0)] - (1.0 - 0.5 * 0.1)).abs() < 1e-9);
    }

    #[test]
    fn add_scaled_and_zeros_like() {
        let p = Pair {
            a: ndarray::Array1::from_vec(vec![1.0, 2.0]),
            b: ndarray::Array2::ones((2, 3)),
        };
        let mut z = p.zeros_like();
        assert_eq!(z.param_count(), 8);
        z.add_scaled(&p, 2.0);
        assert_eq!(z.a[1], 4.0);
        assert_eq!(z.b[(1, 2)], 2.0);
    }
}
