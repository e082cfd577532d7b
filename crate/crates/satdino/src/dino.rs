//! Self-distillation machinery: the cross-entropy alignment loss over
//! (teacher global, student view) pairs with centering and sharpening, the
//! GSD regression loss, the combined objective, the EMA teacher update, and
//! the training-time schedules.

use crate::error::{Error, Result};
use crate::nn::optim::ParamSet;
use crate::nn::{fl, log_softmax_rows, mean_row_entropy, softmax_rows_inplace, Elem};
use ndarray::{Array1, Array2, ArrayView1, Axis};

/// The combined objective `total = l_dino + gamma * l_gsd`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<F: Elem> {
    pub l_dino: F,
    pub l_gsd: F,
    pub gamma: F,
    pub total: F,
}

/// Weighted sum of the two losses. `gamma = 0` disables the GSD term (and the
/// trainer skips its gradient entirely in that case).
pub fn total_loss<F: Elem>(l_dino: F, l_gsd: F, gamma: f64) -> Result<LossBreakdown<F>> {
    if gamma < 0.0 {
        return Err(Error::config(format!(
            "gsd loss weight must be non-negative, got {gamma}"
        )));
    }
    let g = fl::<F>(gamma);
    Ok(LossBreakdown {
        l_dino,
        l_gsd,
        gamma: g,
        total: l_dino + g * l_gsd,
    })
}

/// Teacher distribution: `softmax((logits - center) / tau_t)` per row.
pub fn teacher_probs<F: Elem>(
    logits: &Array2<F>,
    center: &Array1<F>,
    tau_t: f64,
) -> Result<Array2<F>> {
    if tau_t <= 0.0 {
        return Err(Error::config(format!(
            "teacher temperature must be positive, got {tau_t}"
        )));
    }
    let inv = fl::<F>(1.0 / tau_t);
    let mut p = Array2::<F>::zeros(logits.raw_dim());
    for (mut row, lrow) in p.rows_mut().into_iter().zip(logits.rows()) {
        for (o, (&l, &c)) in row.iter_mut().zip(lrow.iter().zip(center.iter())) {
            *o = (l - c) * inv;
        }
    }
    softmax_rows_inplace(&mut p);
    Ok(p)
}

/// Single-sample distillation loss, matching the training-batch semantics:
/// `student_logits[v]` holds every view (the first entries are the global
/// views), `teacher_logits[g]` holds the teacher's global views, and the loss
/// is the mean of `H(P_t(g), softmax(student(v)/tau_s))` over ordered pairs
/// with `v != g`. The teacher side is a constant.
pub fn dino_loss<F: Elem>(
    student_logits: &[ArrayView1<F>],
    teacher_logits: &[ArrayView1<F>],
    center: &Array1<F>,
    tau_s: f64,
    tau_t: f64,
) -> Result<F> {
    if tau_s <= 0.0 || tau_t <= 0.0 {
        return Err(Error::config(format!(
            "temperatures must be positive, got tau_s={tau_s}, tau_t={tau_t}"
        )));
    }
    let k = center.len();
    let to_mat = |rows: &[ArrayView1<F>]| -> Result<Array2<F>> {
        let mut m = Array2::<F>::zeros((rows.len(), k));
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(Error::shape(format!(
                    "logit row has {} entries, expected {k}",
                    r.len()
                )));
            }
            m.row_mut(i).assign(r);
        }
        Ok(m)
    };
    let s = to_mat(student_logits)?;
    let t = to_mat(teacher_logits)?;
    let p = teacher_probs(&t, center, tau_t)?;
    let inv_tau_s = fl::<F>(1.0 / tau_s);
    let logq = log_softmax_rows(s.mapv(|v| v * inv_tau_s).view());

    let mut loss = F::zero();
    let mut pairs = 0usize;
    for g in 0..teacher_logits.len() {
        for v in 0..student_logits.len() {
            if v == g {
                continue;
            }
            let mut h = F::zero();
            for j in 0..k {
                h -= p[(g, j)] * logq[(v, j)];
            }
            loss += h;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::config(
            "no (teacher, student) pairs with v != g".to_string(),
        ));
    }
    Ok(loss / fl::<F>(pairs as f64))
}

/// Batch distillation loss with student-logit gradients.
///
/// Layouts: `student[v]` and `teacher[g]` are `(B, K)`; outputs follow the
/// same view-major layout. The gradient of the mean loss with respect to
/// `student[v]` is `sum_{g != v} (softmax(s_v/tau_s) - P_t(g)) / (tau_s *
/// n_pairs * B)`.
pub struct DinoBatchLoss<F: Elem> {
    pub loss: F,
    pub d_student: Vec<Array2<F>>,
    pub teacher_probs: Vec<Array2<F>>,
    /// Mean per-prediction entropy of the teacher distributions, nats.
    pub teacher_entropy: f64,
}

pub fn dino_loss_batch<F: Elem>(
    student: &[Array2<F>],
    teacher: &[Array2<F>],
    center: &Array1<F>,
    tau_s: f64,
    tau_t: f64,
) -> Result<DinoBatchLoss<F>> {
    if tau_s <= 0.0 {
        return Err(Error::config(format!(
            "student temperature must be positive, got {tau_s}"
        )));
    }
    let n_views = student.len();
    let n_globals = teacher.len();
    if n_globals == 0 || n_views <= 1 {
        return Err(Error::config(
            "need at least one teacher view and two student views".to_string(),
        ));
    }
    let (b, k) = student[0].dim();
    let inv_tau_s = fl::<F>(1.0 / tau_s);

    let probs: Vec<Array2<F>> = teacher
        .iter()
        .map(|t| teacher_probs(t, center, tau_t))
        .collect::<Result<_>>()?;
    let entropy = {
        let mut h = 0.0;
        for p in &probs {
            h += mean_row_entropy(p.view());
        }
        h / n_globals as f64
    };

    // Sum of teacher distributions over globals, and per-view pair counts.
    let mut probs_sum = Array2::<F>::zeros((b, k));
    for p in &probs {
        probs_sum += p;
    }

    let n_pairs = n_globals * (n_views - 1);
    let denom = fl::<F>(1.0 / (n_pairs as f64 * b as f64));

    let mut loss = F::zero();
    let mut d_student = Vec::with_capacity(n_views);
    for (v, s) in student.iter().enumerate() {
        let logq = log_softmax_rows(s.mapv(|x| x * inv_tau_s).view());
        let mut sm = logq.mapv(|x| x.exp());
        // Cross-entropy against every teacher global except itself.
        let mut pair_p = probs_sum.clone();
        let mut n_g = n_globals;
        if v < n_globals {
            pair_p -= &probs[v];
            n_g -= 1;
        }
        if n_g > 0 {
            for i in 0..b {
                let mut h = F::zero();
                for j in 0..k {
                    h -= pair_p[(i, j)] * logq[(i, j)];
                }
                loss += h;
            }
        }
        // d/ds of the summed pair losses: (n_g * softmax - pair_p) / tau_s
        let ng = fl::<F>(n_g as f64);
        ndarray::Zip::from(&mut sm).and(&pair_p).for_each(|a, &p| {
            *a = (*a * ng - p) * inv_tau_s * denom;
        });
        d_student.push(sm);
    }
    loss *= denom;
    Ok(DinoBatchLoss {
        loss,
        d_student,
        teacher_probs: probs,
        teacher_entropy: entropy,
    })
}

/// Single-sample GSD regression loss: mean squared error over views.
pub fn gsd_loss<F: Elem>(pred: &[F], target: &[F]) -> Result<F> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "gsd prediction/target length mismatch: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::shape("empty gsd prediction".to_string()));
    }
    let mut s = F::zero();
    for (&p, &t) in pred.iter().zip(target.iter()) {
        let d = p - t;
        s += d * d;
    }
    Ok(s / fl::<F>(pred.len() as f64))
}

/// Batch GSD loss with prediction gradients. `preds[v]` and `targets[v]` are
/// per-view vectors of length B; the mean runs over every (view, sample).
/// Only student predictions ever reach this function.
pub fn gsd_loss_batch<F: Elem>(
    preds: &[Array1<F>],
    targets: &[Array1<F>],
) -> Result<(F, Vec<Array1<F>>)> {
    if preds.len() != targets.len() {
        return Err(Error::shape(format!(
            "gsd views mismatch: {} vs {}",
            preds.len(),
            targets.len()
        )));
    }
    let total: usize = preds.iter().map(|p| p.len()).sum();
    if total == 0 {
        return Err(Error::shape("empty gsd batch".to_string()));
    }
    let inv = fl::<F>(1.0 / total as f64);
    let two = fl::<F>(2.0);
    let mut loss = F::zero();
    let mut grads = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(targets.iter()) {
        if p.len() != t.len() {
            return Err(Error::shape("gsd per-view length mismatch".to_string()));
        }
        let mut g = Array1::<F>::zeros(p.len());
        for i in 0..p.len() {
            let d = p[i] - t[i];
            loss += d * d;
            g[i] = two * d * inv;
        }
        grads.push(g);
    }
    Ok((loss * inv, grads))
}

/// EMA update of the running center from raw teacher logits (all global
/// views stacked row-wise): `center' = m_c * center + (1 - m_c) * mean`.
pub fn update_center<F: Elem>(
    center: &mut Array1<F>,
    teacher_logits: &[Array2<F>],
    m_c: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&m_c) {
        return Err(Error::config(format!(
            "center momentum must be in [0, 1), got {m_c}"
        )));
    }
    let k = center.len();
    let mut mean = Array1::<F>::zeros(k);
    let mut rows = 0usize;
    for t in teacher_logits {
        mean += &t.sum_axis(Axis(0));
        rows += t.nrows();
    }
    if rows == 0 {
        return Err(Error::shape("no teacher logits to center".to_string()));
    }
    mean.mapv_inplace(|v| v / fl::<F>(rows as f64));
    let m = fl::<F>(m_c);
    let om = F::one() - m;
    ndarray::Zip::from(center).and(&mean).for_each(|c, &v| {
        *c = m * *c + om * v;
    });
    Ok(())
}

/// Elementwise EMA of the teacher toward the student:
/// `t' = m * t + (1 - m) * s`.
pub fn ema_update<F: Elem, P: ParamSet<F>>(teacher: &mut P, student: &P, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::config(format!(
            "ema momentum must be in [0, 1], got {m}"
        )));
    }
    let mf = fl::<F>(m);
    let om = F::one() - mf;
    let mut t_slices = teacher.slices_mut();
    let s_slices = student.slices();
    if t_slices.len() != s_slices.len() {
        return Err(Error::shape(
            "teacher/student parameter sets differ in structure".to_string(),
        ));
    }
    for (t, s) in t_slices.iter_mut().zip(s_slices) {
        if t.len() != s.len() {
            return Err(Error::shape(
                "teacher/student tensor shapes differ".to_string(),
            ));
        }
        for (tv, &sv) in t.iter_mut().zip(s.iter()) {
            *tv = mf * *tv + om * sv;
        }
    }
    Ok(())
}

/// Inputs to the per-step schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub tau_t_warmup_epochs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub lr: f64,
    pub ema_m: f64,
    pub tau_t: f64,
}

/// Learning rate: linear warmup from 0 to the peak, then cosine decay to the
/// floor. EMA momentum: cosine from start to end over the whole run. Teacher
/// temperature: linear warmup to its end value, then constant.
pub fn schedules(step: u64, steps_per_epoch: usize, cfg: &ScheduleConfig) -> ScheduleValues {
    let spe = steps_per_epoch.max(1) as f64;
    let step_f = step as f64;
    let total_steps = (cfg.total_epochs * spe).max(1.0);
    let warmup_steps = cfg.warmup_epochs * spe;

    let lr = if step_f < warmup_steps {
        cfg.lr_peak * step_f / warmup_steps
    } else {
        let span = (total_steps - warmup_steps).max(1.0);
        let prog = ((step_f - warmup_steps) / span).clamp(0.0, 1.0);
        cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * prog).cos())
    };

    let prog = (step_f / total_steps).clamp(0.0, 1.0);
    let ema_m = cfg.ema_end
        - (cfg.ema_end - cfg.ema_start) * 0.5 * (1.0 + (std::f64::consts::PI * prog).cos());

    let tau_warm = cfg.tau_t_warmup_epochs * spe;
    let tau_t = if tau_warm <= 0.0 || step_f >= tau_warm {
        cfg.tau_t_end
    } else {
        cfg.tau_t_start + (cfg.tau_t_end - cfg.tau_t_start) * step_f / tau_warm
    };

    ScheduleValues { lr, ema_m, tau_t }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dino_loss_uniform_uniform_is_ln2() {
        let z = Array1::<f64>::zeros(2);
        let center = Array1::<f64>::zeros(2);
        let student = [z.view(), z.view(), z.view()];
        let teacher = [z.view(), z.view()];
        let loss = dino_loss(&student, &teacher, &center, 0.1, 0.04).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn dino_loss_hand_computed_single_pair() {
        // teacher (1,0), center 0, tau_t 1 -> p = (0.7311, 0.2689);
        // student (1,0), tau_s 1 -> q = p; H(p, q) = 0.5822.
        let t = array![1.0, 0.0];
        let s_skip = array![9.9, -3.0]; // view 0 is the teacher's own view
        let s = array![1.0, 0.0];
        let center = Array1::<f64>::zeros(2);
        let loss = dino_loss(
            &[s_skip.view(), s.view()],
            &[t.view()],
            &center,
            1.0,
            1.0,
        )
        .unwrap();
        assert!((loss - 0.5822).abs() < 1e-4, "loss {loss}");
        let p = 1.0 / (1.0 + (-1.0f64).exp());
        let expected = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn dino_loss_full_centering_gives_ln_k() {
        let k = 16;
        let t = Array1::<f64>::from_shape_fn(k, |i| (i as f64 * 0.37).sin() * 3.0);
        let center = t.clone();
        let student = Array1::<f64>::zeros(k);
        let dummy = Array1::<f64>::ones(k);
        let loss = dino_loss(
            &[dummy.view(), student.view()],
            &[t.view()],
            &center,
            0.5,
            0.07,
        )
        .unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn dino_loss_rejects_bad_temperatures() {
        let z = Array1::<f64>::zeros(2);
        let center = Array1::<f64>::zeros(2);
        assert!(dino_loss(&[z.view(), z.view()], &[z.view()], &center, 0.0, 0.1).is_err());
        assert!(dino_loss(&[z.view(), z.view()], &[z.view()], &center, 0.1, -1.0).is_err());
    }

    #[test]
    fn centering_invariance() {
        let k = 8;
        let t = Array1::<f64>::from_shape_fn(k, |i| (i as f64).cos());
        let center = Array1::<f64>::from_shape_fn(k, |i| 0.1 * i as f64);
        let tm = t.clone().insert_axis(Axis(0));
        let p1 = teacher_probs(&tm, &center, 0.04).unwrap();
        let shift = 3.7;
        let tm2 = tm.mapv(|v| v + shift);
        let center2 = center.mapv(|v| v + shift);
        let p2 = teacher_probs(&tm2, &center2, 0.04).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn teacher_probs_rows_sum_to_one() {
        let t = Array2::<f64>::from_shape_fn((5, 32), |(i, j)| ((i * 31 + j) as f64 * 0.7).sin());
        let center = Array1::<f64>::zeros(32);
        let p = teacher_probs(&t, &center, 0.04).unwrap();
        for r in p.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-6);
            assert!(r.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn batch_loss_matches_single_sample_route() {
        // B=1: the batch implementation must agree with the per-sample op.
        let k = 8;
        let mk = |seed: u64| {
            let mut rng = crate::nn::stream_rng(seed, 40, 0, 0);
            Array1::<f64>::from_shape_fn(k, |_| crate::nn::draw_normal(&mut rng))
        };
        let s: Vec<Array1<f64>> = (0..4).map(|i| mk(i)).collect();
        let t: Vec<Array1<f64>> = (10..12).map(|i| mk(i)).collect();
        let center = mk(99);
        let single = dino_loss(
            &s.iter().map(|a| a.view()).collect::<Vec<_>>(),
            &t.iter().map(|a| a.view()).collect::<Vec<_>>(),
            &center,
            0.1,
            0.05,
        )
        .unwrap();
        let sb: Vec<Array2<f64>> = s
            .iter()
            .map(|a| a.clone().insert_axis(Axis(0)))
            .collect();
        let tb: Vec<Array2<f64>> = t
            .iter()
            .map(|a| a.clone().insert_axis(Axis(0)))
            .collect();
        let batch = dino_loss_batch(&sb, &tb, &center, 0.1, 0.05).unwrap();
        assert!((single - batch.loss).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_gradients_match_finite_differences() {
        let k = 6;
        let b = 2;
        let mut rng = crate::nn::stream_rng(3, 41, 0, 0);
        let mut draw = |sh: (usize, usize)| {
            Array2::<f64>::from_shape_fn(sh, |_| crate::nn::draw_normal(&mut rng))
        };
        let student: Vec<Array2<f64>> = (0..3).map(|_| draw((b, k))).collect();
        let teacher: Vec<Array2<f64>> = (0..2).map(|_| draw((b, k))).collect();
        let center = Array1::<f64>::zeros(k);
        let out = dino_loss_batch(&student, &teacher, &center, 0.1, 0.07).unwrap();
        let h = 1e-6;
        for v in 0..3 {
            for idx in [(0usize, 0usize), (1, 5)] {
                let mut sp = student.to_vec();
                sp[v] = student[v].clone();
                sp[v][idx] += h;
                let lp = dino_loss_batch(&sp, &teacher, &center, 0.1, 0.07)
                    .unwrap()
                    .loss;
                let mut sm = student.to_vec();
                sm[v] = student[v].clone();
                sm[v][idx] -= h;
                let lm = dino_loss_batch(&sm, &teacher, &center, 0.1, 0.07)
                    .unwrap()
                    .loss;
                let fd = (lp - lm) / (2.0 * h);
                let an = out.d_student[v][idx];
                assert!(
                    (fd - an).abs() < 1e-6,
                    "view {v} idx {idx:?}: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn gsd_loss_examples() {
        assert_eq!(gsd_loss(&[0.5f64], &[0.5]).unwrap(), 0.0);
        assert!((gsd_loss(&[1.0f64], &[0.5]).unwrap() - 0.25).abs() < 1e-12);
        assert!((gsd_loss(&[1.0f64, 0.0], &[0.5, 0.5]).unwrap() - 0.25).abs() < 1e-12);
        assert!(gsd_loss(&[1.0f64], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn gsd_batch_gradients() {
        let preds: Vec<Array1<f64>> = vec![array![1.0, 0.0], array![0.5, 0.5]];
        let targets: Vec<Array1<f64>> = vec![array![0.5, 0.5], array![0.5, 0.5]];
        let (loss, grads) = gsd_loss_batch(&preds, &targets).unwrap();
        assert!((loss - (0.25 + 0.25) / 4.0).abs() < 1e-12);
        assert!((grads[0][0] - 2.0 * 0.5 / 4.0).abs() < 1e-12);
        assert_eq!(grads[1][0], 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let lb = total_loss(0.7f64, 0.25, 0.1).unwrap();
        assert!((lb.total - 0.725).abs() < 1e-12);
        assert_eq!(lb.total, lb.l_dino + lb.gamma * lb.l_gsd);
        let lb0 = total_loss(1.23f64, 9.9, 0.0).unwrap();
        assert_eq!(lb0.total, 1.23);
        assert!(total_loss(0.1f64, 0.1, -0.01).is_err());
    }

    #[test]
    fn update_center_examples() {
        let mut c = array![0.0f64];
        update_center(&mut c, &[array![[1.0]]], 0.9).unwrap();
        assert!((c[0] - 0.1).abs() < 1e-12);

        // fixed point
        let mut c = array![0.4f64];
        update_center(&mut c, &[array![[0.4]]], 0.7).unwrap();
        assert!((c[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn update_center_geometric_convergence() {
        // Closed form: c_k = mu + (c_0 - mu) m^k for a constant batch mean.
        let mu = 2.5f64;
        let m = 0.9;
        let c0 = -1.0;
        let mut c = array![c0];
        let batch = [Array2::from_elem((4, 1), mu)];
        for k in 1..=40 {
            update_center(&mut c, &batch, m).unwrap();
            let want = mu + (c0 - mu) * m.powi(k);
            assert!((c[0] - want).abs() < 1e-12, "step {k}: {} vs {want}", c[0]);
        }
    }

    #[test]
    fn update_center_rejects_bad_momentum() {
        let mut c = array![0.0f64];
        assert!(update_center(&mut c, &[array![[1.0]]], 1.0).is_err());
        assert!(update_center(&mut c, &[array![[1.0]]], -0.1).is_err());
    }

    #[derive(Clone)]
    struct OneTensor(Array1<f64>);

    impl ParamSet<f64> for OneTensor {
        fn meta(&self) -> Vec<crate::nn::optim::FieldMeta> {
            vec![crate::nn::optim::FieldMeta {
                name: "t".into(),
                shape: vec![self.0.len()],
                decay: false,
            }]
        }
        fn slices(&self) -> Vec<&[f64]> {
            vec![self.0.as_slice().unwrap()]
        }
        fn slices_mut(&mut self) -> Vec<&mut [f64]> {
            vec![self.0.as_slice_mut().unwrap()]
        }
    }

    #[test]
    fn ema_update_closed_forms() {
        let student = OneTensor(array![0.0, 2.0]);
        // m = 1: teacher unchanged
        let mut t = OneTensor(array![1.0, -1.0]);
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t.0, array![1.0, -1.0]);
        // m = 0: teacher = student
        let mut t = OneTensor(array![1.0, -1.0]);
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t.0, student.0);
        // scalar case t=1, s=0, m=0.996
        let mut t = OneTensor(array![1.0]);
        ema_update(&mut t, &OneTensor(array![0.0]), 0.996).unwrap();
        assert!((t.0[0] - 0.996).abs() < 1e-12);
        // out-of-range momentum rejected
        let mut t = OneTensor(array![1.0]);
        assert!(ema_update(&mut t, &OneTensor(array![0.0]), 1.5).is_err());
    }

    #[test]
    fn schedule_shapes() {
        let cfg = ScheduleConfig {
            lr_peak: 0.001,
            lr_min: 1e-6,
            warmup_epochs: 10.0,
            total_epochs: 100.0,
            ema_start: 0.996,
            ema_end: 1.0,
            tau_t_start: 0.04,
            tau_t_end: 0.07,
            tau_t_warmup_epochs: 30.0,
        };
        let spe = 100;
        let s0 = schedules(0, spe, &cfg);
        assert_eq!(s0.lr, 0.0);
        assert!((s0.ema_m - 0.996).abs() < 1e-12);
        assert!((s0.tau_t - 0.04).abs() < 1e-12);

        // warmup end: exactly the peak lr
        let sw = schedules(10 * spe as u64, spe, &cfg);
        assert!((sw.lr - 0.001).abs() < 1e-15);

        // tau plateau at/after its warmup
        let st = schedules(30 * spe as u64, spe, &cfg);
        assert_eq!(st.tau_t, 0.07);
        let st2 = schedules(90 * spe as u64, spe, &cfg);
        assert_eq!(st2.tau_t, 0.07);

        // end of training: lr at floor, ema at end value
        let se = schedules(100 * spe as u64, spe, &cfg);
        assert!((se.lr - 1e-6).abs() < 1e-12);
        assert!((se.ema_m - 1.0).abs() < 1e-12);

        // lr is monotone nonincreasing after warmup
        let mut prev = f64::INFINITY;
        for step in (10 * spe as u64)..(100 * spe as u64) {
            let s = schedules(step, spe, &cfg);
            assert!(s.lr <= prev + 1e-15);
            prev = s.lr;
        }
    }

    #[test]
    fn tau_warmup_zero_means_end_immediately() {
        let cfg = ScheduleConfig {
            lr_peak: 0.001,
            lr_min: 0.0,
            warmup_epochs: 0.0,
            total_epochs: 10.0,
            ema_start: 0.996,
            ema_end: 1.0,
            tau_t_start: 0.04,
            tau_t_end: 0.04,
            tau_t_warmup_epochs: 0.0,
        };
        assert_eq!(schedules(0, 10, &cfg).tau_t, 0.04);
        // zero warmup epochs: lr starts at the top of the cosine
        assert!((schedules(0, 10, &cfg).lr - 0.001).abs() < 1e-15);
    }
}
