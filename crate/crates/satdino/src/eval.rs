//! Frozen-feature evaluation: class-token extraction, weighted kNN, the
//! multi-scale robustness protocol, linear probing, fine-tuning, and the PCA
//! patch projection used for visualization.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::imageops::{normalize, resize, to_float, NormStats};
use crate::model::ModelParams;
use crate::nn::head::gsd_head_fwd;
use crate::nn::optim::{AdamW, FieldMeta, ParamSet};
use crate::nn::vit::{backward_group, forward_group, ViTConfig, VitParams};
use crate::nn::{fl, linear_fwd, log_softmax_rows, matmul_tn, stream_rng, Elem};
use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const DEFAULT_KNN_K: usize = 20;
pub const DEFAULT_KNN_TAU: f64 = 0.07;
pub const DEFAULT_SCALES: [f64; 4] = [1.0, 0.5, 0.25, 0.125];
pub const PROBE_EPOCHS: usize = 25;
pub const PROBE_LR: f64 = 0.001;
pub const FINETUNE_LR: f64 = 1e-5;

/// Class-token features of a sample set, rows aligned with the input order.
#[derive(Debug, Clone)]
pub struct FeatureMatrix<F: Elem> {
    pub rows: Array2<F>,
    pub labels: Vec<u32>,
    pub scale_tag: f64,
    pub source: String,
}

impl<F: Elem> FeatureMatrix<F> {
    pub fn validate(&self) -> Result<()> {
        if self.rows.nrows() != self.labels.len() {
            return Err(Error::shape(format!(
                "feature rows ({}) and labels ({}) disagree",
                self.rows.nrows(),
                self.labels.len()
            )));
        }
        if self.rows.iter().any(|v| !v.to_f().is_finite()) {
            return Err(Error::Data("non-finite feature entries".to_string()));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"SDFM";
const FEATURE_VERSION: u32 = 1;

/// Writes the documented little-endian binary: magic, version, n, d, then
/// n*d 32-bit floats (row-major), then n u32 labels.
pub fn save_features<F: Elem>(fm: &FeatureMatrix<F>, path: &Path) -> Result<()> {
    fm.validate()?;
    let file = std::fs::File::create(path).map_err(|e| Error::io_at(path.to_path_buf(), e))?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(fm.rows.nrows() as u32).to_le_bytes())?;
    w.write_all(&(fm.rows.ncols() as u32).to_le_bytes())?;
    for v in fm.rows.iter() {
        w.write_all(&(v.to_f() as f32).to_le_bytes())?;
    }
    for &l in &fm.labels {
        w.write_all(&l.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_features<F: Elem>(path: &Path) -> Result<FeatureMatrix<F>> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io_at(path.to_path_buf(), e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let need = |n: usize, at: usize| -> Result<()> {
        if buf.len() < at + n {
            Err(Error::checkpoint("truncated feature file".to_string()))
        } else {
            Ok(())
        }
    };
    need(16, 0)?;
    if &buf[0..4] != FEATURE_MAGIC {
        return Err(Error::checkpoint("not a feature file (bad magic)".to_string()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported feature file version {version}"
        )));
    }
    let n = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    let data_bytes = n * d * 4;
    need(data_bytes + n * 4, 16)?;
    let mut rows = Array2::<F>::zeros((n, d));
    for (i, chunk) in buf[16..16 + data_bytes].chunks_exact(4).enumerate() {
        rows[(i / d.max(1), i % d.max(1))] =
            fl::<F>(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let labels = buf[16 + data_bytes..16 + data_bytes + 4 * n]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureMatrix {
        rows,
        labels,
        scale_tag: 1.0,
        source: path.display().to_string(),
    })
}

/// Prepares one image for the model: optional resolution degradation
/// (downsample to `scale` of the original, simulating information loss),
/// then resize to the square model input and normalize.
pub fn prepare_input<F: Elem>(
    image: &Array3<u8>,
    input_size: usize,
    scale: f64,
    norm: &NormStats,
) -> Result<Array3<F>> {
    if scale <= 0.0 || scale > 1.0 {
        return Err(Error::config(format!(
            "scale must be in (0, 1], got {scale}"
        )));
    }
    let float: Array3<F> = to_float(image.view());
    let (h, w, _) = float.dim();
    let mut out = if scale == 1.0 {
        // identity path: no degradation stage at all
        resize(float.view(), input_size, input_size)
    } else {
        let dh = ((h as f64 * scale).round() as usize).max(1);
        let dw = ((w as f64 * scale).round() as usize).max(1);
        let degraded = resize(float.view(), dh, dw);
        resize(degraded.view(), input_size, input_size)
    };
    normalize(&mut out, norm);
    Ok(out)
}

/// Extracts class-token features for every sample with a frozen model.
pub fn extract_features<F: Elem>(
    model: &ModelParams<F>,
    cfg: &ViTConfig,
    norm: &NormStats,
    samples: &[Sample],
    input_size: usize,
    scale_tag: f64,
    source: &str,
) -> Result<FeatureMatrix<F>> {
    let d = cfg.embed_dim;
    let mut rows = Array2::<F>::zeros((samples.len(), d));
    let chunk = 32usize;
    let mut r0 = 0usize;
    for group in samples.chunks(chunk) {
        let imgs: Vec<Array3<F>> = group
            .iter()
            .map(|sm| prepare_input(&sm.image, input_size, scale_tag, norm))
            .collect::<Result<_>>()?;
        let views: Vec<ArrayView3<F>> = imgs.iter().map(|i| i.view()).collect();
        let (out, _) = forward_group(&model.vit, cfg, &views, false, false)?;
        let cls = out.cls_rows();
        rows.slice_mut(s![r0..r0 + group.len(), ..]).assign(&cls);
        r0 += group.len();
    }
    let fm = FeatureMatrix {
        rows,
        labels: samples.iter().map(|s| s.label).collect(),
        scale_tag,
        source: source.to_string(),
    };
    fm.validate()?;
    Ok(fm)
}

/// GSD-token regression predictions for every sample at full scale.
pub fn predict_gsd<F: Elem>(
    model: &ModelParams<F>,
    cfg: &ViTConfig,
    norm: &NormStats,
    images: &[Array3<F>],
) -> Result<Array1<F>> {
    let _ = norm;
    if !cfg.use_gsd_token {
        return Err(Error::config("model has no gsd token".to_string()));
    }
    let head = model
        .gsd
        .as_ref()
        .ok_or_else(|| Error::config("model has no gsd head".to_string()))?;
    let mut preds = Array1::<F>::zeros(images.len());
    let chunk = 64usize;
    let mut r0 = 0usize;
    for group in images.chunks(chunk) {
        let views: Vec<ArrayView3<F>> = group.iter().map(|i| i.view()).collect();
        let (out, _) = forward_group(&model.vit, cfg, &views, false, false)?;
        let rows = out.gsd_rows();
        let p = gsd_head_fwd(head, rows.view());
        preds.slice_mut(s![r0..r0 + group.len()]).assign(&p);
        r0 += group.len();
    }
    Ok(preds)
}

#[derive(Debug, Clone)]
pub struct KnnResult {
    pub predictions: Vec<u32>,
    pub top1: f64,
    pub top5: f64,
    pub top5_degenerate: bool,
}

fn l2_normalized_f64<F: Elem>(rows: ArrayView2<F>) -> Array2<f64> {
    let (n, d) = rows.dim();
    let mut out = Array2::<f64>::zeros((n, d));
    for (mut o, r) in out.rows_mut().into_iter().zip(rows.rows()) {
        let mut s = 0.0;
        for v in r.iter() {
            let v = v.to_f();
            s += v * v;
        }
        let inv = 1.0 / s.sqrt().max(1e-12);
        for (ov, v) in o.iter_mut().zip(r.iter()) {
            *ov = v.to_f() * inv;
        }
    }
    out
}

/// Weighted kNN over cosine similarity: each of the k nearest neighbors votes
/// for its class with weight `exp(similarity / tau)`.
///
/// Tie rules are part of the contract: neighbors order by (similarity desc,
/// train index asc); class scores break ties toward the smaller class id.
pub fn knn_classify<F: Elem>(
    train: &FeatureMatrix<F>,
    test: &FeatureMatrix<F>,
    k: usize,
    tau: f64,
) -> Result<KnnResult> {
    train.validate()?;
    test.validate()?;
    if k == 0 || train.rows.nrows() == 0 {
        return Err(Error::config(
            "knn needs k >= 1 and a non-empty train set".to_string(),
        ));
    }
    if k > train.rows.nrows() {
        return Err(Error::config(format!(
            "k = {k} exceeds the train set size {}",
            train.rows.nrows()
        )));
    }
    if train.rows.ncols() != test.rows.ncols() {
        return Err(Error::shape("train/test feature dims differ".to_string()));
    }
    let n_classes = train
        .n_classes()
        .max(test.n_classes())
        .max(1);
    let tr = l2_normalized_f64(train.rows.view());
    let te = l2_normalized_f64(test.rows.view());
    let sims = te.dot(&tr.t()); // (n_test, n_train) cosine similarities

    let n_test = te.nrows();
    let mut predictions = Vec::with_capacity(n_test);
    let mut top1_hits = 0usize;
    let mut top5_hits = 0usize;
    for i in 0..n_test {
        let row = sims.row(i);
        let mut order: Vec<usize> = (0..tr.nrows()).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut scores = vec![0.0f64; n_classes];
        for &j in order.iter().take(k) {
            scores[train.labels[j] as usize] += (row[j] / tau).exp();
        }
        let mut ranked: Vec<usize> = (0..n_classes).collect();
        ranked.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let pred = ranked[0] as u32;
        predictions.push(pred);
        let truth = test.labels[i] as usize;
        if ranked[0] == truth {
            top1_hits += 1;
        }
        if ranked.iter().take(5).any(|&c| c == truth) {
            top5_hits += 1;
        }
    }
    let top5_degenerate = n_classes < 5;
    Ok(KnnResult {
        predictions,
        top1: top1_hits as f64 / n_test.max(1) as f64,
        top5: if top5_degenerate {
            1.0
        } else {
            top5_hits as f64 / n_test.max(1) as f64
        },
        top5_degenerate,
    })
}

/// Evaluation report: per-scale accuracies plus their arithmetic mean, with
/// the producing configuration recorded in `provenance`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub protocol: String,
    pub k: Option<usize>,
    pub per_scale: Vec<(f64, f64)>,
    pub average: f64,
    pub top1: f64,
    pub top5: f64,
    pub top5_degenerate: bool,
    pub provenance: String,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if !self.per_scale.is_empty() {
            let mean =
                self.per_scale.iter().map(|(_, a)| a).sum::<f64>() / self.per_scale.len() as f64;
            if (mean - self.average).abs() > 1e-12 {
                return Err(Error::Data(format!(
                    "report average {} disagrees with recomputed mean {mean}",
                    self.average
                )));
            }
        }
        for &(s, a) in &self.per_scale {
            if !(s > 0.0 && s <= 1.0) || !(0.0..=1.0).contains(&a) {
                return Err(Error::Data(format!("bad per-scale entry ({s}, {a})")));
            }
        }
        Ok(())
    }

    /// Human-readable block, one line per scale.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("protocol: {}\n", self.protocol));
        if let Some(k) = self.k {
            s.push_str(&format!("k: {k}\n"));
        }
        s.push_str(&format!("provenance: {}\n", self.provenance));
        for (scale, acc) in &self.per_scale {
            s.push_str(&format!("scale {scale:>7.4}: top-1 {acc:.4}\n"));
        }
        s.push_str(&format!("average: {:.6}\n", self.average));
        s.push_str(&format!("top1: {:.6}\n", self.top1));
        if self.top5_degenerate {
            s.push_str(&format!("top5: {:.6} (degenerate: fewer than 5 classes)\n", self.top5));
        } else {
            s.push_str(&format!("top5: {:.6}\n", self.top5));
        }
        s
    }

    /// Machine-readable rows: `protocol,k,scale,top1,top5`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("protocol,k,scale,top1,top5\n");
        let k = self.k.map(|k| k.to_string()).unwrap_or_default();
        for (scale, acc) in &self.per_scale {
            s.push_str(&format!("{},{k},{scale},{acc},\n", self.protocol));
        }
        s.push_str(&format!(
            "{},{k},average,{},{}\n",
            self.protocol, self.average, self.top5
        ));
        s
    }

    /// Writes `<stem>.txt` and `<stem>.csv` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir.to_path_buf(), e))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io_at(txt, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io_at(csv, e))?;
        Ok(())
    }
}

/// Multi-scale kNN: for every scale, degrade both train and val images, fit
/// the neighbor index on that scale's train features, and report per-scale
/// top-1 plus the arithmetic average.
#[allow(clippy::too_many_arguments)]
pub fn multiscale_eval<F: Elem>(
    model: &ModelParams<F>,
    cfg: &ViTConfig,
    norm: &NormStats,
    train: &[Sample],
    val: &[Sample],
    input_size: usize,
    scales: &[f64],
    k: usize,
    tau: f64,
    provenance: &str,
) -> Result<EvalReport> {
    if scales.is_empty() {
        return Err(Error::config("need at least one scale".to_string()));
    }
    for &s in scales {
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::config(format!("scale {s} outside (0, 1]")));
        }
    }
    let mut per_scale = Vec::with_capacity(scales.len());
    let mut first: Option<KnnResult> = None;
    for &scale in scales {
        let ftr = extract_features(model, cfg, norm, train, input_size, scale, provenance)?;
        let fva = extract_features(model, cfg, norm, val, input_size, scale, provenance)?;
        let res = knn_classify(&ftr, &fva, k, tau)?;
        per_scale.push((scale, res.top1));
        if first.is_none() {
            first = Some(res);
        }
    }
    let average = per_scale.iter().map(|(_, a)| a).sum::<f64>() / per_scale.len() as f64;
    let first = first.unwrap();
    let report = EvalReport {
        protocol: if scales.len() == 1 {
            "knn".to_string()
        } else {
            "knn-multiscale".to_string()
        },
        k: Some(k),
        per_scale,
        average,
        top1: first.top1,
        top5: first.top5,
        top5_degenerate: first.top5_degenerate,
        provenance: provenance.to_string(),
    };
    report.validate()?;
    Ok(report)
}

/// Linear classifier parameters (probe head / fine-tune head).
#[derive(Debug, Clone)]
pub struct LinearClassifier<F: Elem> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Elem> LinearClassifier<F> {
    fn init<R: Rng>(d: usize, classes: usize, rng: &mut R) -> Self {
        let mut w = Array2::<F>::zeros((d, classes));
        crate::nn::fill_trunc_normal(&mut w, 0.01, rng);
        LinearClassifier {
            w,
            b: Array1::zeros(classes),
        }
    }
}

impl<F: Elem> ParamSet<F> for LinearClassifier<F> {
    fn meta(&self) -> Vec<FieldMeta> {
        vec![
            FieldMeta {
                name: "fc.w".into(),
                shape: self.w.shape().to_vec(),
                decay: true,
            },
            FieldMeta {
                name: "fc.b".into(),
                shape: vec![self.b.len()],
                decay: false,
            },
        ]
    }
    fn slices(&self) -> Vec<&[F]> {
        vec![self.w.as_slice().unwrap(), self.b.as_slice().unwrap()]
    }
    fn slices_mut(&mut self) -> Vec<&mut [F]> {
        vec![
            self.w.as_slice_mut().unwrap(),
            self.b.as_slice_mut().unwrap(),
        ]
    }
}

/// Softmax cross-entropy over logits; returns (mean loss, dlogits).
fn cross_entropy_grads<F: Elem>(
    logits: &Array2<F>,
    labels: &[u32],
) -> (f64, Array2<F>) {
    let (n, _) = logits.dim();
    let logq = log_softmax_rows(logits.view());
    let mut loss = 0.0f64;
    let mut d = logq.mapv(|v| v.exp());
    let inv_n = fl::<F>(1.0 / n as f64);
    for i in 0..n {
        loss -= logq[(i, labels[i] as usize)].to_f();
        d[(i, labels[i] as usize)] -= F::one();
    }
    d.mapv_inplace(|v| v * inv_n);
    (loss / n as f64, d)
}

fn accuracy_topk<F: Elem>(logits: &Array2<F>, labels: &[u32], k: usize) -> f64 {
    let n = logits.nrows();
    let mut hits = 0usize;
    for i in 0..n {
        let row = logits.row(i);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        if order.iter().take(k).any(|&c| c == labels[i] as usize) {
            hits += 1;
        }
    }
    hits as f64 / n.max(1) as f64
}

/// Linear probe: the backbone is frozen, features are extracted once and a
/// single linear layer is trained with cross-entropy and AdamW.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe<F: Elem>(
    model: &ModelParams<F>,
    cfg: &ViTConfig,
    norm: &NormStats,
    train: &[Sample],
    val: &[Sample],
    input_size: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
    provenance: &str,
) -> Result<EvalReport> {
    let ftr = extract_features(model, cfg, norm, train, input_size, 1.0, provenance)?;
    let fva = extract_features(model, cfg, norm, val, input_size, 1.0, provenance)?;
    let n_classes = ftr.n_classes().max(fva.n_classes());
    if n_classes < 2 {
        return Err(Error::config(
            "linear probe needs at least two classes".to_string(),
        ));
    }
    let d = cfg.embed_dim;
    let mut rng = stream_rng(seed, 70, 0, 0);
    let mut clf = LinearClassifier::<F>::init(d, n_classes, &mut rng);
    let mut opt = AdamW::new(&clf);
    let batch = 64usize.min(ftr.rows.nrows()).max(1);
    let n = ftr.rows.nrows();
    let steps_per_epoch = (n / batch).max(1);

    for epoch in 0..epochs as u64 {
        let mut order: Vec<usize> = (0..n).collect();
        let mut sh = stream_rng(seed, 71, epoch, 0);
        for i in (1..n).rev() {
            let j = (sh.random::<f64>() * (i + 1) as f64) as usize;
            order.swap(i, j.min(i));
        }
        for step in 0..steps_per_epoch {
            let idx = &order[step * batch..((step + 1) * batch).min(n)];
            let mut x = Array2::<F>::zeros((idx.len(), d));
            let mut y = Vec::with_capacity(idx.len());
            for (r, &i) in idx.iter().enumerate() {
                x.row_mut(r).assign(&ftr.rows.row(i));
                y.push(ftr.labels[i]);
            }
            let logits = linear_fwd(x.view(), &clf.w, &clf.b);
            let (_, dlogits) = cross_entropy_grads(&logits, &y);
            let mut grads = clf.zeros_like();
            grads.w = matmul_tn(x.view(), dlogits.view());
            grads.b = dlogits.sum_axis(Axis(0));
            opt.step(&mut clf, &grads, lr, 0.0);
        }
    }

    let val_logits = linear_fwd(fva.rows.view(), &clf.w, &clf.b);
    let top1 = accuracy_topk(&val_logits, &fva.labels, 1);
    let top5_degenerate = n_classes < 5;
    let top5 = if top5_degenerate {
        1.0
    } else {
        accuracy_topk(&val_logits, &fva.labels, 5)
    };
    let report = EvalReport {
        protocol: "linear-probe".to_string(),
        k: None,
        per_scale: vec![(1.0, top1)],
        average: top1,
        top1,
        top5,
        top5_degenerate,
        provenance: provenance.to_string(),
    };
    report.validate()?;
    Ok(report)
}

/// Backbone plus classifier, optimized jointly during fine-tuning.
#[derive(Clone)]
struct FtParams<F: Elem> {
    vit: VitParams<F>,
    fc: LinearClassifier<F>,
}

impl<F: Elem> ParamSet<F> for FtParams<F> {
    fn meta(&self) -> Vec<FieldMeta> {
        let mut m = self.vit.meta();
        m.extend(self.fc.meta());
        m
    }
    fn slices(&self) -> Vec<&[F]> {
        let mut s = self.vit.slices();
        s.extend(self.fc.slices());
        s
    }
    fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut s = self.vit.slices_mut();
        s.extend(self.fc.slices_mut());
        s
    }
}

/// Fine-tuning: all backbone parameters and the classifier train together
/// with cross-entropy at a small learning rate.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune<F: Elem>(
    model: &ModelParams<F>,
    cfg: &ViTConfig,
    norm: &NormStats,
    train: &[Sample],
    val: &[Sample],
    input_size: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
    provenance: &str,
) -> Result<EvalReport> {
    let n_classes = train
        .iter()
        .chain(val.iter())
        .map(|s| s.label as usize + 1)
        .max()
        .unwrap_or(0);
    if n_classes < 2 {
        return Err(Error::config(
            "fine-tuning needs at least two classes".to_string(),
        ));
    }
    let d = cfg.embed_dim;
    let mut rng = stream_rng(seed, 72, 0, 0);
    let mut params = FtParams {
        vit: model.vit.clone(),
        fc: LinearClassifier::<F>::init(d, n_classes, &mut rng),
    };
    let mut opt = AdamW::new(&params);
    let n = train.len();
    let batch = 32usize.min(n).max(1);
    let steps_per_epoch = (n / batch).max(1);

    // Inputs are deterministic, so prepare them once.
    let inputs: Vec<Array3<F>> = train
        .iter()
        .map(|sm| prepare_input(&sm.image, input_size, 1.0, norm))
        .collect::<Result<_>>()?;

    for epoch in 0..epochs as u64 {
        let mut order: Vec<usize> = (0..n).collect();
        let mut sh = stream_rng(seed, 73, epoch, 0);
        for i in (1..n).rev() {
            let j = (sh.random::<f64>() * (i + 1) as f64) as usize;
            order.swap(i, j.min(i));
        }
        for step in 0..steps_per_epoch {
            let idx = &order[step * batch..((step + 1) * batch).min(n)];
            let views: Vec<ArrayView3<F>> = idx.iter().map(|&i| inputs[i].view()).collect();
            let labels: Vec<u32> = idx.iter().map(|&i| train[i].label).collect();
            let (out, cache) = forward_group(&params.vit, cfg, &views, true, false)?;
            let cache = cache.expect("cache requested");
            let cls = out.cls_rows();
            let logits = linear_fwd(cls.view(), &params.fc.w, &params.fc.b);
            let (_, dlogits) = cross_entropy_grads(&logits, &labels);
            let mut grads = params.zeros_like();
            grads.fc.w = matmul_tn(cls.view(), dlogits.view());
            grads.fc.b = dlogits.sum_axis(Axis(0));
            let d_cls = crate::nn::matmul(dlogits.view(), params.fc.w.t());
            let mut d_tokens = Array2::<F>::zeros((out.tokens.nrows(), d));
            for (r, _) in idx.iter().enumerate() {
                d_tokens.row_mut(r * out.t).assign(&d_cls.row(r));
            }
            backward_group(&params.vit, cfg, &cache, d_tokens.view(), &mut grads.vit);
            opt.step(&mut params, &grads, lr, 0.0);
        }
    }

    // Validation with the tuned backbone.
    let tuned = ModelParams {
        vit: params.vit.clone(),
        dino: model.dino.clone(),
        gsd: model.gsd.clone(),
    };
    let fva = extract_features(&tuned, cfg, norm, val, input_size, 1.0, provenance)?;
    let val_logits = linear_fwd(fva.rows.view(), &params.fc.w, &params.fc.b);
    let top1 = accuracy_topk(&val_logits, &fva.labels, 1);
    let top5_degenerate = n_classes < 5;
    let top5 = if top5_degenerate {
        1.0
    } else {
        accuracy_topk(&val_logits, &fva.labels, 5)
    };
    let report = EvalReport {
        protocol: "fine-tune".to_string(),
        k: None,
        per_scale: vec![(1.0, top1)],
        average: top1,
        top1,
        top5,
        top5_degenerate,
        provenance: provenance.to_string(),
    };
    report.validate()?;
    Ok(report)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues (descending) and the matching eigenvectors as columns.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m[(i, p)];
                    let miq = m[(i, q)];
                    m[(i, p)] = c * mip - s * miq;
                    m[(i, q)] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[(p, j)];
                    let mqj = m[(q, j)];
                    m[(p, j)] = c * mpj - s * mqj;
                    m[(q, j)] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap());
    let mut vals = Array1::<f64>::zeros(n);
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (k, &i) in order.iter().enumerate() {
        vals[k] = m[(i, i)];
        vecs.column_mut(k).assign(&v.column(i));
    }
    (vals, vecs)
}

/// PCA of one image's patch embeddings, projected onto the top components
/// and min-max scaled to [0, 1] per channel for image export. Degenerate
/// (all-equal) embeddings yield an all-zero projection and a warning flag.
pub fn pca_patch_projection<F: Elem>(
    patches: &Array2<F>,
    grid: (usize, usize),
    n_components: usize,
) -> Result<(Array3<f64>, bool)> {
    let (n, d) = patches.dim();
    if n < n_components {
        return Err(Error::config(format!(
            "need at least {n_components} patches, got {n}"
        )));
    }
    if grid.0 * grid.1 != n {
        return Err(Error::shape(format!(
            "grid {}x{} does not cover {n} patches",
            grid.0, grid.1
        )));
    }
    let x: Array2<f64> = patches.mapv(|v| v.to_f());
    let mean = x.sum_axis(Axis(0)) / n as f64;
    let centered = &x - &mean.broadcast((n, d)).unwrap();
    let total_var: f64 = centered.iter().map(|v| v * v).sum();
    let mut out = Array3::<f64>::zeros((grid.0, grid.1, n_components));
    if total_var < 1e-18 {
        return Ok((out, true));
    }
    let cov = centered.t().dot(&centered) / n as f64;
    let (_, vecs) = symmetric_eigen(&cov);
    let proj = centered.dot(&vecs.slice(s![.., 0..n_components]));
    for c in 0..n_components {
        let col = proj.column(c);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in col.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = (hi - lo).max(1e-12);
        for i in 0..n {
            out[(i / grid.1, i % grid.1, c)] = (col[i] - lo) / span;
        }
    }
    Ok((out, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::draw_normal;

    fn fm(rows: Array2<f64>, labels: Vec<u32>) -> FeatureMatrix<f64> {
        FeatureMatrix {
            rows,
            labels,
            scale_tag: 1.0,
            source: "test".to_string(),
        }
    }

    /// Exhaustive-scan reference with the same documented tie rules,
    /// written independently of the production code path.
    fn knn_reference(
        train: &FeatureMatrix<f64>,
        test: &FeatureMatrix<f64>,
        k: usize,
        tau: f64,
        n_classes: usize,
    ) -> Vec<u32> {
        let norm_rows = |m: &Array2<f64>| -> Vec<Vec<f64>> {
            m.rows()
                .into_iter()
                .map(|r| {
                    let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    r.iter().map(|v| v / n).collect()
                })
                .collect()
        };
        let tr = norm_rows(&train.rows);
        let te = norm_rows(&test.rows);
        te.iter()
            .map(|q| {
                let mut sims: Vec<(f64, usize)> = tr
                    .iter()
                    .enumerate()
                    .map(|(j, t)| (q.iter().zip(t).map(|(a, b)| a * b).sum::<f64>(), j))
                    .collect();
                sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                let mut scores = vec![0.0f64; n_classes];
                for &(s, j) in sims.iter().take(k) {
                    scores[train.labels[j] as usize] += (s / tau).exp();
                }
                let mut best = 0usize;
                for c in 1..n_classes {
                    if scores[c] > scores[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect()
    }

    #[test]
    fn knn_identity_neighbor() {
        let train = fm(
            ndarray::array![[1.0, 0.0], [0.0, 1.0], [0.7, 0.7]],
            vec![0, 1, 2],
        );
        let test = fm(ndarray::array![[0.0, 1.0]], vec![1]);
        let res = knn_classify(&train, &test, 1, DEFAULT_KNN_TAU).unwrap();
        assert_eq!(res.predictions, vec![1]);
        assert_eq!(res.top1, 1.0);
    }

    #[test]
    fn knn_antipodal_classes_are_separable() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = stream_rng(5, 80, 0, 0);
        for i in 0..60 {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let jitter: f64 = 0.05 * draw_normal(&mut rng);
            rows.push([sign + jitter, 0.3 * draw_normal(&mut rng)]);
            labels.push((i % 2) as u32);
        }
        let train_rows =
            Array2::from_shape_fn((40, 2), |(i, j)| rows[i][j]);
        let test_rows = Array2::from_shape_fn((20, 2), |(i, j)| rows[40 + i][j]);
        let train = fm(train_rows, labels[..40].to_vec());
        let test = fm(test_rows, labels[40..].to_vec());
        let res = knn_classify(&train, &test, 20, DEFAULT_KNN_TAU).unwrap();
        assert_eq!(res.top1, 1.0);
        assert!(res.top5_degenerate);
        assert_eq!(res.top5, 1.0);
    }

    #[test]
    fn knn_matches_exhaustive_reference_on_fuzzed_instances() {
        for case in 0..30u64 {
            let mut rng = stream_rng(case, 81, 0, 0);
            let n_train = 20 + (rng.random::<f64>() * 180.0) as usize;
            let n_test = 10 + (rng.random::<f64>() * 40.0) as usize;
            let d = 2 + (rng.random::<f64>() * 30.0) as usize;
            let classes = 2 + (rng.random::<f64>() * 6.0) as usize;
            let k = 1 + (rng.random::<f64>() * 19.0) as usize;
            let k = k.min(n_train);
            let mk = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
                Array2::from_shape_fn((n, d), |_| draw_normal(rng))
            };
            let train_rows = mk(n_train, &mut rng);
            let test_rows = mk(n_test, &mut rng);
            let tl: Vec<u32> = (0..n_train)
                .map(|_| (rng.random::<f64>() * classes as f64) as u32)
                .collect();
            let vl: Vec<u32> = (0..n_test)
                .map(|_| (rng.random::<f64>() * classes as f64) as u32)
                .collect();
            let train = fm(train_rows, tl);
            let test = fm(test_rows, vl);
            let res = knn_classify(&train, &test, k, DEFAULT_KNN_TAU).unwrap();
            let want = knn_reference(&train, &test, k, DEFAULT_KNN_TAU, classes.max(res.predictions.iter().map(|&p| p as usize + 1).max().unwrap_or(1)));
            assert_eq!(res.predictions, want, "case {case}");
        }
    }

    #[test]
    fn knn_rejects_bad_arguments() {
        let train = fm(Array2::zeros((3, 4)), vec![0, 1, 0]);
        let test = fm(Array2::zeros((1, 4)), vec![0]);
        assert!(knn_classify(&train, &test, 0, 0.07).is_err());
        assert!(knn_classify(&train, &test, 4, 0.07).is_err());
    }

    #[test]
    fn report_average_is_exact_mean() {
        let report = EvalReport {
            protocol: "knn-multiscale".into(),
            k: Some(20),
            per_scale: vec![(1.0, 0.8), (0.5, 0.6), (0.25, 0.4), (0.125, 0.2)],
            average: 0.5,
            top1: 0.8,
            top5: 1.0,
            top5_degenerate: false,
            provenance: "test".into(),
        };
        report.validate().unwrap();
        let mut bad = report.clone();
        bad.average = 0.5001;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn feature_binary_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("f.bin");
        let mut rng = stream_rng(7, 82, 0, 0);
        let rows = Array2::<f64>::from_shape_fn((5, 3), |_| {
            (draw_normal(&mut rng) as f32) as f64 // f32-exact values
        });
        let m = fm(rows, vec![0, 1, 2, 1, 0]);
        save_features(&m, &path).unwrap();
        let back = load_features::<f64>(&path).unwrap();
        assert_eq!(back.rows, m.rows);
        assert_eq!(back.labels, m.labels);
        // truncation is a clean error
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_features::<f64>(&path).is_err());
    }

    #[test]
    fn eigen_matches_power_iteration_oracle() {
        // Independent oracle: power iteration with deflation.
        let mut rng = stream_rng(9, 83, 0, 0);
        let d = 8;
        let a0 = Array2::<f64>::from_shape_fn((d, d), |_| draw_normal(&mut rng));
        let sym = &a0.t().dot(&a0);
        let (vals, vecs) = symmetric_eigen(sym);
        let mut deflated = sym.clone();
        for k in 0..3 {
            let mut v = Array1::<f64>::from_shape_fn(d, |_| draw_normal(&mut rng));
            for _ in 0..10_000 {
                let nv = deflated.dot(&v);
                let n = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
                v = nv / n;
            }
            let lambda = v.dot(&deflated.dot(&v));
            assert!(
                (lambda - vals[k]).abs() < 1e-6 * lambda.abs().max(1.0),
                "eigenvalue {k}: {lambda} vs {}",
                vals[k]
            );
            let dot = v.dot(&vecs.column(k)).abs();
            assert!(dot > 1.0 - 1e-6, "eigenvector {k} misaligned: |dot|={dot}");
            let outer = Array2::from_shape_fn((d, d), |(i, j)| v[i] * v[j] * lambda);
            deflated = &deflated - &outer;
        }
    }

    #[test]
    fn pca_shapes_and_known_subspace() {
        let mut rng = stream_rng(11, 84, 0, 0);
        let n = 196;
        let d = 32;
        // embeddings in an exact 3-d subspace
        let basis = Array2::<f64>::from_shape_fn((3, d), |_| draw_normal(&mut rng));
        let coefs = Array2::<f64>::from_shape_fn((n, 3), |_| draw_normal(&mut rng));
        let x = coefs.dot(&basis);
        let (grid, degenerate) = pca_patch_projection(&x, (14, 14), 3).unwrap();
        assert!(!degenerate);
        assert_eq!(grid.dim(), (14, 14, 3));
        assert!(grid.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // reconstruction from the top 3 components is exact
        let mean = x.sum_axis(Axis(0)) / n as f64;
        let centered = &x - &mean.broadcast((n, d)).unwrap();
        let cov = centered.t().dot(&centered) / n as f64;
        let (vals, _) = symmetric_eigen(&cov);
        let residual: f64 = vals.iter().skip(3).map(|v| v.abs()).sum();
        assert!(residual < 1e-9 * vals[0].max(1.0), "residual {residual}");
    }

    #[test]
    fn pca_degenerate_embeddings_flagged() {
        let x = Array2::<f64>::from_elem((16, 8), 0.37);
        let (grid, degenerate) = pca_patch_projection(&x, (4, 4), 3).unwrap();
        assert!(degenerate);
        assert!(grid.iter().all(|&v| v == 0.0));
    }
}
