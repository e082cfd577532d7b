//! The pretraining loop: teacher/student forward over grouped views, the
//! combined objective, AdamW on the student, then center and EMA-teacher
//! updates with scheduled coefficients.
//!
//! One logical writer owns the [`TrainState`]; parallelism lives inside the
//! batch (view building, group forwards) with fixed reduction orders, so a
//! run is bit-reproducible for a given seed.

use crate::augment::{build_views, AugProfile, SourceImage, ViewBatch, ViewSource};
use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::data::{compute_norm_stats, group_series, load_split, DatasetManifest, Sample, Split};
use crate::dino::{
    dino_loss_batch, ema_update, gsd_loss_batch, schedules, total_loss, update_center,
    ScheduleConfig, ScheduleValues,
};
use crate::error::{Error, Result};
use crate::imageops::{to_float, NormStats};
use crate::model::{ModelConfig, ModelParams};
use crate::nn::head::{gsd_head_bwd, gsd_head_fwd, project, project_bwd};
use crate::nn::optim::{AdamW, ParamSet};
use crate::nn::vit::{backward_group, forward_group};
use crate::nn::{fl, stream_rng, Elem};
use crate::rundir::{checkpoints_dir, init_run_dir, MetricsLogger};
use ndarray::{s, Array1, Array2, ArrayView3};
use rayon::prelude::*;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Everything a training step mutates, plus the configuration it runs under.
#[derive(Debug, Clone)]
pub struct TrainState<F: Elem> {
    pub run_cfg: RunConfig,
    pub model_cfg: ModelConfig,
    pub student: ModelParams<F>,
    pub teacher: ModelParams<F>,
    /// Running center of raw teacher logits, length K.
    pub center: Array1<F>,
    pub opt: AdamW<F, ModelParams<F>>,
    pub step: u64,
    pub epoch: u64,
    pub norm: NormStats,
}

impl<F: Elem> TrainState<F> {
    /// Fresh state: the teacher starts as an identical copy of the student,
    /// the center at zero, and the optimizer tracks the student only.
    pub fn init(run_cfg: &RunConfig, norm: NormStats) -> Result<TrainState<F>> {
        run_cfg.validate()?;
        let model_cfg = ModelConfig::from_run_config(run_cfg)?;
        let mut rng = stream_rng(run_cfg.seed, 1, 0, 0);
        let student = ModelParams::init(&model_cfg, &mut rng);
        let teacher = student.clone();
        let opt = AdamW::new(&student);
        let center = Array1::zeros(model_cfg.head.prototypes);
        Ok(TrainState {
            run_cfg: run_cfg.clone(),
            model_cfg,
            center,
            student,
            teacher,
            opt,
            step: 0,
            epoch: 0,
            norm,
        })
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            lr_peak: self.run_cfg.optim.lr,
            lr_min: self.run_cfg.optim.min_lr,
            warmup_epochs: self.run_cfg.optim.warmup_epochs,
            total_epochs: self.run_cfg.optim.epochs as f64,
            ema_start: self.run_cfg.optim.ema_start,
            ema_end: self.run_cfg.optim.ema_end,
            tau_t_start: self.run_cfg.head.tau_t_start,
            tau_t_end: self.run_cfg.head.tau_t_end,
            tau_t_warmup_epochs: self.run_cfg.head.tau_t_warmup_epochs,
        }
    }
}


/// One metrics line per training step.
#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub l_dino: f64,
    pub l_gsd: f64,
    pub total: f64,
    pub lr: f64,
    pub ema_m: f64,
    pub tau_t: f64,
    pub entropy: f64,
}

/// Views of one batch grouped by output resolution, in first-occurrence
/// view order (globals first).
struct ViewGroups {
    /// (out_size, view indices sharing it)
    groups: Vec<(usize, Vec<usize>)>,
}

fn group_views_by_size(batch: &[ViewBatch<impl Elem>]) -> ViewGroups {
    let n_views = batch[0].n_views();
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for v in 0..n_views {
        let size = batch[0].view(v).dim().0;
        match groups.iter_mut().find(|(s, _)| *s == size) {
            Some((_, list)) => list.push(v),
            None => groups.push((size, vec![v])),
        }
    }
    ViewGroups { groups }
}

/// Runs one optimization step over a batch of view batches.
pub fn train_step<F: Elem>(
    state: &mut TrainState<F>,
    batch: &[ViewBatch<F>],
    steps_per_epoch: usize,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::data("empty batch".to_string()));
    }
    let b = batch.len();
    let n_views = batch[0].n_views();
    for vb in batch {
        if vb.n_views() != n_views {
            return Err(Error::shape(
                "all samples in a batch must share the view layout".to_string(),
            ));
        }
    }
    let sched: ScheduleValues = schedules(state.step, steps_per_epoch, &state.schedule_config());
    let vit_cfg = state.model_cfg.vit.clone();
    let head_cfg = state.model_cfg.head.clone();
    let k = head_cfg.prototypes;
    let gamma = state.run_cfg.loss.gamma;
    let use_gsd = vit_cfg.use_gsd_token;

    // ---- teacher forward: global views only, no cache, no gradients ----
    let teacher_views: Vec<ArrayView3<F>> = (0..2)
        .flat_map(|g| batch.iter().map(move |vb| vb.view(g).view()))
        .collect();
    let (t_out, _) = forward_group(&state.teacher.vit, &vit_cfg, &teacher_views, false, false)?;
    let t_cls = t_out.cls_rows();
    let (t_logits_all, _t_cache) = project(&state.teacher.dino, t_cls.view());
    let teacher_logits: Vec<Array2<F>> = (0..2)
        .map(|g| t_logits_all.slice(s![g * b..(g + 1) * b, ..]).to_owned())
        .collect();

    // ---- student forward per resolution group, caches kept ----
    let groups = group_views_by_size(batch);
    let mut student_logits: Vec<Array2<F>> = vec![Array2::zeros((b, k)); n_views];
    let mut gsd_preds: Vec<Array1<F>> = vec![Array1::zeros(b); n_views];
    struct GroupRun<F: Elem> {
        views: Vec<usize>,
        vit_cache: crate::nn::vit::GroupCache<F>,
        head_cache: crate::nn::head::DinoHeadCache<F>,
        cls: Array2<F>,
        gsd_rows: Option<Array2<F>>,
        t: usize,
        d: usize,
        n_rows: usize,
    }
    let mut runs: Vec<GroupRun<F>> = Vec::with_capacity(groups.groups.len());
    for (_, views) in &groups.groups {
        let group_views: Vec<ArrayView3<F>> = views
            .iter()
            .flat_map(|&v| batch.iter().map(move |vb| vb.view(v).view()))
            .collect();
        let (out, cache) = forward_group(&state.student.vit, &vit_cfg, &group_views, true, false)?;
        let cache = cache.expect("cache requested");
        let cls = out.cls_rows();
        let (logits, head_cache) = project(&state.student.dino, cls.view());
        for (pos, &v) in views.iter().enumerate() {
            student_logits[v].assign(&logits.slice(s![pos * b..(pos + 1) * b, ..]));
        }
        let gsd_rows = if use_gsd {
            let rows = out.gsd_rows();
            if let Some(head) = &state.student.gsd {
                let preds = gsd_head_fwd(head, rows.view());
                for (pos, &v) in views.iter().enumerate() {
                    gsd_preds[v].assign(&preds.slice(s![pos * b..(pos + 1) * b]));
                }
            }
            Some(rows)
        } else {
            None
        };
        runs.push(GroupRun {
            views: views.clone(),
            vit_cache: cache,
            head_cache,
            cls,
            gsd_rows,
            t: out.t,
            d: vit_cfg.embed_dim,
            n_rows: out.tokens.nrows(),
        });
    }

    // ---- losses ----
    let dino = dino_loss_batch(
        &student_logits,
        &teacher_logits,
        &state.center,
        head_cfg.tau_s,
        sched.tau_t,
    )?;
    let targets: Vec<Array1<F>> = (0..n_views)
        .map(|v| Array1::from_iter(batch.iter().map(|vb| fl::<F>(vb.gsd_targets[v]))))
        .collect();
    let (l_gsd, d_gsd_preds) = if use_gsd {
        gsd_loss_batch(&gsd_preds, &targets)?
    } else {
        (F::zero(), Vec::new())
    };
    let breakdown = total_loss(dino.loss, l_gsd, gamma)?;
    if !breakdown.total.to_f().is_finite() {
        let ids: Vec<&str> = batch.iter().map(|vb| vb.source_id.as_str()).collect();
        return Err(Error::NonFinite {
            step: state.step,
            batch: ids.join(","),
            detail: format!(
                "l_dino={}, l_gsd={}, center_max={}",
                dino.loss.to_f(),
                l_gsd.to_f(),
                state.center.iter().fold(0.0f64, |m, v| m.max(v.to_f().abs()))
            ),
        });
    }

    // ---- backward through heads and backbone, fixed group order ----
    let mut grads = state.student.zeros_like();
    let apply_gsd_grads = use_gsd && gamma > 0.0;
    for run in &runs {
        let nv = run.views.len();
        let mut d_logits = Array2::<F>::zeros((nv * b, k));
        for (pos, &v) in run.views.iter().enumerate() {
            d_logits
                .slice_mut(s![pos * b..(pos + 1) * b, ..])
                .assign(&dino.d_student[v]);
        }
        let d_cls = project_bwd(
            &state.student.dino,
            &run.head_cache,
            d_logits.view(),
            &mut grads.dino,
        );
        let mut d_tokens = Array2::<F>::zeros((run.n_rows, run.d));
        for i in 0..nv * b {
            d_tokens.row_mut(i * run.t).assign(&d_cls.row(i));
        }
        if apply_gsd_grads {
            let gsd_rows = run.gsd_rows.as_ref().expect("gsd rows cached");
            let head = state.student.gsd.as_ref().expect("gsd head present");
            let ghead = grads.gsd.as_mut().expect("gsd grads present");
            let gamma_f = fl::<F>(gamma);
            let mut d_preds = Array1::<F>::zeros(nv * b);
            for (pos, &v) in run.views.iter().enumerate() {
                for i in 0..b {
                    d_preds[pos * b + i] = d_gsd_preds[v][i] * gamma_f;
                }
            }
            let d_gsd_rows = gsd_head_bwd(head, gsd_rows.view(), &d_preds, ghead);
            for i in 0..nv * b {
                d_tokens.row_mut(i * run.t + 1).assign(&d_gsd_rows.row(i));
            }
        }
        let _ = &run.cls;
        backward_group(
            &state.student.vit,
            &vit_cfg,
            &run.vit_cache,
            d_tokens.view(),
            &mut grads.vit,
        );
    }

    // Prototype freeze for the configured number of leading epochs.
    if (state.epoch as f64) < head_cfg.freeze_proto_epochs {
        grads.dino.proto.fill(F::zero());
    }

    state.opt.step(
        &mut state.student,
        &grads,
        sched.lr,
        state.run_cfg.optim.weight_decay,
    );
    update_center(&mut state.center, &teacher_logits, head_cfg.center_momentum)?;
    ema_update(&mut state.teacher, &state.student, sched.ema_m)?;
    state.step += 1;

    Ok(StepMetrics {
        step: state.step,
        epoch: state.epoch,
        l_dino: dino.loss.to_f(),
        l_gsd: l_gsd.to_f(),
        total: breakdown.total.to_f(),
        lr: sched.lr,
        ema_m: sched.ema_m,
        tau_t: sched.tau_t,
        entropy: dino.teacher_entropy,
    })
}

/// A training unit: one sample, or one temporal series.
enum Unit {
    Single(usize),
    Series(Vec<usize>),
}

impl Unit {
    fn identity(&self, samples: &[Sample]) -> u64 {
        match self {
            Unit::Single(i) => samples[*i].index as u64,
            Unit::Series(v) => samples[v[0]].index as u64,
        }
    }
}

/// Builds the augmented views for one unit with its own derived stream.
fn build_unit_views<F: Elem>(
    unit: &Unit,
    samples: &[Sample],
    spec: &crate::geometry::ViewSpecConfig,
    aug: &AugProfile,
    norm: &NormStats,
    seed: u64,
    epoch: u64,
) -> Result<ViewBatch<F>> {
    let mut rng = stream_rng(seed, 52, epoch, unit.identity(samples));
    match unit {
        Unit::Single(i) => {
            let sm = &samples[*i];
            let src = SourceImage {
                pixels: to_float::<F>(sm.image.view()),
                gsd: sm.gsd,
            };
            build_views(
                ViewSource::Single(&src),
                spec,
                aug,
                norm,
                &sm.path.to_string_lossy(),
                &mut rng,
            )
        }
        Unit::Series(members) => {
            let series: Vec<SourceImage<F>> = members
                .iter()
                .map(|&i| SourceImage {
                    pixels: to_float::<F>(samples[i].image.view()),
                    gsd: samples[i].gsd,
                })
                .collect();
            let id = samples[members[0]]
                .series_id
                .clone()
                .unwrap_or_else(|| samples[members[0]].path.to_string_lossy().to_string());
            build_views(ViewSource::Series(&series), spec, aug, norm, &id, &mut rng)
        }
    }
}

/// Output of a full pretraining run.
pub struct PretrainOutput {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: Vec<StepMetrics>,
    pub norm: NormStats,
}

/// Full pretraining: loads the train split, computes normalization stats,
/// iterates epochs of seeded shuffled batches, logs metrics, and writes the
/// final checkpoint into the run directory.
pub fn pretrain<F: Elem>(cfg: &RunConfig, data_dir: &Path, run_dir: &Path) -> Result<PretrainOutput> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(data_dir)?;
    let samples = load_split(&manifest, Split::Train)?;
    if samples.is_empty() {
        return Err(Error::data(
            "train split is empty; run `split` first".to_string(),
        ));
    }
    let norm = compute_norm_stats(&samples);
    let spec = cfg.view_spec()?;
    let aug = AugProfile::for_level(cfg.aug_level()?, cfg.aug.temporal)?;

    let units: Vec<Unit> = if cfg.aug.temporal {
        group_series(&samples)
            .into_iter()
            .map(Unit::Series)
            .collect()
    } else {
        (0..samples.len()).map(Unit::Single).collect()
    };

    let batch_size = cfg.optim.batch_size.min(units.len()).max(1);
    let steps_per_epoch = (units.len() / batch_size).max(1);

    init_run_dir(run_dir, cfg)?;
    let mut logger = MetricsLogger::create(run_dir)?;
    let mut state = TrainState::<F>::init(cfg, norm)?;
    let mut metrics = Vec::with_capacity(steps_per_epoch * cfg.optim.epochs);

    for epoch in 0..cfg.optim.epochs as u64 {
        state.epoch = epoch;
        // Seeded epoch shuffle of unit order.
        let mut order: Vec<usize> = (0..units.len()).collect();
        let mut shuffle_rng = stream_rng(cfg.seed, 51, epoch, 0);
        for i in (1..order.len()).rev() {
            let j = (rand::Rng::random::<f64>(&mut shuffle_rng) * (i + 1) as f64) as usize;
            order.swap(i, j.min(i));
        }
        for step_in_epoch in 0..steps_per_epoch {
            let chunk = &order[step_in_epoch * batch_size..(step_in_epoch + 1) * batch_size];
            let batch: Vec<ViewBatch<F>> = chunk
                .par_iter()
                .map(|&u| build_unit_views(&units[u], &samples, &spec, &aug, &norm, cfg.seed, epoch))
                .collect::<Result<_>>()?;
            let m = train_step(&mut state, &batch, steps_per_epoch)?;
            logger.log(&m)?;
            metrics.push(m);
        }
    }
    logger.flush()?;

    let ckpt = checkpoints_dir(run_dir).join("final.ckpt");
    save_checkpoint(&state, &ckpt)?;
    Ok(PretrainOutput {
        run_dir: run_dir.to_path_buf(),
        checkpoint: ckpt,
        metrics,
        norm,
    })
}
