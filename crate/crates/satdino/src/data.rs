//! Dataset ingestion: the `manifest.csv` contract, deterministic stratified
//! splits, image loading, and per-channel normalization statistics.
//!
//! Manifest format (UTF-8, header required):
//! `path,gsd,label,series_id,split` — `path` relative to the dataset root,
//! `gsd` in meters/pixel, `label` a category name, `series_id` optionally
//! grouping images of the same area over time, `split` one of
//! `train`/`val`/empty.

use crate::error::{Error, Result};
use crate::imageops::NormStats;
use crate::nn::stream_rng;
use ndarray::Array3;
use rand::Rng;
use rayon::prelude::*;
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Unassigned,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "" => Ok(Split::Unassigned),
            other => Err(Error::data(format!(
                "unknown split token {other:?} (expected train, val or empty)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Unassigned => "",
        }
    }
}

/// One manifest row with its resolved category id.
#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub gsd: f64,
    pub label: u32,
    pub label_name: String,
    pub series_id: Option<String>,
    pub split: Split,
}

/// A validated dataset manifest.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    /// Category names, sorted; record labels index into this list.
    pub categories: Vec<String>,
}

impl DatasetManifest {
    pub fn manifest_path(root: &Path) -> PathBuf {
        root.join("manifest.csv")
    }

    /// Loads and validates `<root>/manifest.csv`. All row problems are
    /// reported together in one itemized error.
    pub fn load(root: &Path) -> Result<DatasetManifest> {
        let path = Self::manifest_path(root);
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(&path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::data(format!("bad manifest header: {e}")))?
            .clone();
        let expected = ["path", "gsd", "label", "series_id", "split"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(Error::data(format!(
                "manifest header must be {expected:?}, got {got:?}"
            )));
        }

        struct RawRow {
            path: String,
            gsd: f64,
            label_name: String,
            series_id: Option<String>,
            split: Split,
        }

        let mut problems: Vec<String> = Vec::new();
        let mut rows: Vec<RawRow> = Vec::new();
        let mut seen_paths: HashSet<String> = HashSet::new();
        for (i, rec) in reader.records().enumerate() {
            let lineno = i + 2; // header is line 1
            let rec = match rec {
                Ok(r) => r,
                Err(e) => {
                    problems.push(format!("line {lineno}: {e}"));
                    continue;
                }
            };
            if rec.len() != 5 {
                problems.push(format!("line {lineno}: expected 5 fields, got {}", rec.len()));
                continue;
            }
            let path_s = rec[0].trim().to_string();
            if path_s.is_empty() {
                problems.push(format!("line {lineno}: empty path"));
                continue;
            }
            if !seen_paths.insert(path_s.clone()) {
                problems.push(format!("line {lineno}: duplicate path {path_s:?}"));
                continue;
            }
            let gsd = match rec[1].trim().parse::<f64>() {
                Ok(v) if v > 0.0 => v,
                Ok(v) => {
                    problems.push(format!("line {lineno}: non-positive gsd {v}"));
                    continue;
                }
                Err(e) => {
                    problems.push(format!("line {lineno}: bad gsd: {e}"));
                    continue;
                }
            };
            let label_name = rec[2].trim().to_string();
            if label_name.is_empty() {
                problems.push(format!("line {lineno}: empty label"));
                continue;
            }
            let series_id = {
                let s = rec[3].trim();
                (!s.is_empty()).then(|| s.to_string())
            };
            let split = match Split::parse(rec[4].trim()) {
                Ok(s) => s,
                Err(e) => {
                    problems.push(format!("line {lineno}: {e}"));
                    continue;
                }
            };
            if !root.join(&path_s).is_file() {
                problems.push(format!("line {lineno}: missing file {path_s:?}"));
                continue;
            }
            rows.push(RawRow {
                path: path_s,
                gsd,
                label_name,
                series_id,
                split,
            });
        }
        if !problems.is_empty() {
            return Err(Error::data(format!(
                "manifest {} has {} invalid rows:\n  {}",
                path.display(),
                problems.len(),
                problems.join("\n  ")
            )));
        }
        if rows.is_empty() {
            return Err(Error::data(format!("manifest {} is empty", path.display())));
        }

        // Categories are inferred from label names, sorted.
        let mut categories: Vec<String> = rows
            .iter()
            .map(|r| r.label_name.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        categories.sort();
        let index: BTreeMap<&str, u32> = categories
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i as u32))
            .collect();
        let records = rows
            .into_iter()
            .map(|r| ManifestRecord {
                label: index[r.label_name.as_str()],
                path: PathBuf::from(r.path),
                gsd: r.gsd,
                label_name: r.label_name,
                series_id: r.series_id,
                split: r.split,
            })
            .collect();
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            records,
            categories,
        })
    }

    /// Writes the manifest back to `<root>/manifest.csv`.
    pub fn save(&self) -> Result<()> {
        let path = Self::manifest_path(&self.root);
        let mut writer = csv::Writer::from_path(&path)
            .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
        writer
            .write_record(["path", "gsd", "label", "series_id", "split"])
            .map_err(|e| Error::data(e.to_string()))?;
        for r in &self.records {
            writer
                .write_record([
                    r.path.to_string_lossy().as_ref(),
                    &format!("{}", r.gsd),
                    &r.label_name,
                    r.series_id.as_deref().unwrap_or(""),
                    r.split.as_str(),
                ])
                .map_err(|e| Error::data(e.to_string()))?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn n_classes(&self) -> usize {
        self.categories.len()
    }
}

/// Deterministic, per-class stratified train/val assignment.
///
/// `fractions` are (train, val) and must sum to 1. Every class is shuffled
/// with its own seed-derived stream and cut at `round(train * n)`, clamped so
/// that both splits receive at least one sample whenever their fraction is
/// positive. The result is persisted back to `manifest.csv`.
pub fn split_dataset(
    manifest: &mut DatasetManifest,
    fractions: (f64, f64),
    seed: u64,
) -> Result<()> {
    let (ft, fv) = fractions;
    if !(0.0..=1.0).contains(&ft) || !(0.0..=1.0).contains(&fv) || (ft + fv - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions must be non-negative and sum to 1, got ({ft}, {fv})"
        )));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_class.entry(r.label).or_default().push(i);
    }
    for (class, mut idx) in by_class {
        let n = idx.len();
        if ft > 0.0 && fv > 0.0 && n < 2 {
            return Err(Error::data(format!(
                "class {:?} has {n} sample(s); both splits need at least one",
                manifest.categories[class as usize]
            )));
        }
        let mut rng = stream_rng(seed, 50, class as u64, 0);
        // Fisher-Yates with the class's own stream.
        for i in (1..n).rev() {
            let j = (rng.random::<f64>() * (i + 1) as f64) as usize;
            idx.swap(i, j.min(i));
        }
        let mut n_train = (ft * n as f64).round() as usize;
        if ft > 0.0 {
            n_train = n_train.max(1);
        }
        if fv > 0.0 {
            n_train = n_train.min(n - 1);
        }
        if ft == 0.0 {
            n_train = 0;
        }
        for (pos, &rec_idx) in idx.iter().enumerate() {
            manifest.records[rec_idx].split = if pos < n_train {
                Split::Train
            } else {
                Split::Val
            };
        }
    }
    manifest.save()
}

/// A fully loaded sample. `index` is the manifest row, the stable identity
/// used to derive per-sample augmentation streams.
#[derive(Debug, Clone)]
pub struct Sample {
    pub index: usize,
    pub path: PathBuf,
    pub gsd: f64,
    pub label: u32,
    pub series_id: Option<String>,
    pub image: Array3<u8>,
}

/// Reads one RGB image into an (H, W, 3) array.
pub fn load_image(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Loads every record of `split` (or all records for `Unassigned`), in
/// manifest order. Missing or unreadable files are reported with their paths.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample>> {
    let selected: Vec<(usize, &ManifestRecord)> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| split == Split::Unassigned || r.split == split)
        .collect();
    let loaded: Vec<Result<Sample>> = selected
        .par_iter()
        .map(|(i, r)| {
            let image = load_image(&manifest.root.join(&r.path))?;
            Ok(Sample {
                index: *i,
                path: r.path.clone(),
                gsd: r.gsd,
                label: r.label,
                series_id: r.series_id.clone(),
                image,
            })
        })
        .collect();
    let mut out = Vec::with_capacity(loaded.len());
    let mut missing = Vec::new();
    for s in loaded {
        match s {
            Ok(s) => out.push(s),
            Err(e) => missing.push(e.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::data(format!(
            "failed to load {} image(s):\n  {}",
            missing.len(),
            missing.join("\n  ")
        )));
    }
    Ok(out)
}

/// Per-channel mean/std over a sample set, for input normalization. The std
/// is floored to keep degenerate channels usable.
pub fn compute_norm_stats(samples: &[Sample]) -> NormStats {
    let mut sum = [0.0f64; 3];
    let mut sum_sq = [0.0f64; 3];
    let mut count = 0usize;
    for s in samples {
        let (h, w, _) = s.image.dim();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = s.image[(y, x, c)] as f64 / 255.0;
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
        }
        count += h * w;
    }
    let mut mean = [0.0f64; 3];
    let mut std = [1.0f64; 3];
    if count > 0 {
        for c in 0..3 {
            mean[c] = sum[c] / count as f64;
            let var = (sum_sq[c] / count as f64 - mean[c] * mean[c]).max(0.0);
            std[c] = var.sqrt().max(1e-6);
        }
    }
    NormStats { mean, std }
}

/// Groups sample indices by `series_id`, preserving first-appearance order;
/// samples without a series form singleton groups.
pub fn group_series(samples: &[Sample]) -> Vec<Vec<usize>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut singletons: Vec<Vec<usize>> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match &s.series_id {
            Some(id) => {
                if !groups.contains_key(id) {
                    order.push(id.clone());
                }
                groups.entry(id.clone()).or_default().push(i);
            }
            None => singletons.push(vec![i]),
        }
    }
    let mut out: Vec<Vec<usize>> = order.into_iter().map(|id| groups[&id].clone()).collect();
    out.extend(singletons);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_png(path: &Path, side: u32, value: u8) {
        let img = image::RgbImage::from_pixel(side, side, image::Rgb([value, value, value]));
        img.save(path).unwrap();
    }

    fn make_dataset(dir: &Path, per_class: &[(&str, usize)], gsd: f64) -> PathBuf {
        fs::create_dir_all(dir.join("images")).unwrap();
        let mut lines = vec!["path,gsd,label,series_id,split".to_string()];
        let mut n = 0usize;
        for (label, count) in per_class {
            for _ in 0..*count {
                let rel = format!("images/{n:04}.png");
                write_png(&dir.join(&rel), 8, (n % 251) as u8);
                lines.push(format!("{rel},{gsd},{label},,"));
                n += 1;
            }
        }
        fs::write(dir.join("manifest.csv"), lines.join("\n") + "\n").unwrap();
        dir.to_path_buf()
    }

    #[test]
    fn load_counts_and_categories() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), &[("b_class", 3), ("a_class", 2)], 0.5);
        let m = DatasetManifest::load(tmp.path()).unwrap();
        assert_eq!(m.records.len(), 5);
        assert_eq!(m.categories, vec!["a_class", "b_class"]);
        // labels resolve against the sorted category list
        assert_eq!(m.records[0].label_name, "b_class");
        assert_eq!(m.records[0].label, 1);
    }

    #[test]
    fn load_rejects_bad_rows_with_itemized_errors() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), &[("c", 2)], 0.5);
        let manifest = tmp.path().join("manifest.csv");
        let mut text = fs::read_to_string(&manifest).unwrap();
        text.push_str("images/0000.png,0.5,c,,\n"); // duplicate path
        text.push_str("missing.png,0.5,c,,\n"); // missing file
        text.push_str("other_a.png,0,c,,\n"); // bad gsd
        text.push_str("other_b.png,0.5,c,,bogus\n"); // unknown split
        fs::write(&manifest, text).unwrap();
        let err = DatasetManifest::load(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("duplicate path"), "{err}");
        assert!(err.contains("missing file"), "{err}");
        assert!(err.contains("non-positive gsd"), "{err}");
        assert!(err.contains("unknown split"), "{err}");
    }

    #[test]
    fn load_accepts_fmow_range_gsd() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        fs::create_dir_all(dir.join("images")).unwrap();
        write_png(&dir.join("images/a.png"), 8, 10);
        write_png(&dir.join("images/b.png"), 8, 20);
        fs::write(
            dir.join("manifest.csv"),
            "path,gsd,label,series_id,split\nimages/a.png,0.307,x,,\nimages/b.png,1.705,x,,\n",
        )
        .unwrap();
        let m = DatasetManifest::load(dir).unwrap();
        assert_eq!(m.records[0].gsd, 0.307);
        assert_eq!(m.records[1].gsd, 1.705);
    }

    #[test]
    fn split_is_deterministic_and_80_20() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), &[("a", 50), ("b", 50)], 0.5);
        let mut m = DatasetManifest::load(tmp.path()).unwrap();
        split_dataset(&mut m, (0.8, 0.2), 7).unwrap();
        assert_eq!(m.count(Split::Train), 80);
        assert_eq!(m.count(Split::Val), 20);

        // stable across re-runs, including through the persisted file
        let reloaded = DatasetManifest::load(tmp.path()).unwrap();
        let mut m2 = reloaded.clone();
        split_dataset(&mut m2, (0.8, 0.2), 7).unwrap();
        for (a, b) in reloaded.records.iter().zip(&m2.records) {
            assert_eq!(a.split, b.split);
        }
    }

    #[test]
    fn split_all_train_degenerate() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), &[("a", 5)], 0.5);
        let mut m = DatasetManifest::load(tmp.path()).unwrap();
        split_dataset(&mut m, (1.0, 0.0), 1).unwrap();
        assert_eq!(m.count(Split::Train), 5);
        assert_eq!(m.count(Split::Val), 0);
    }

    #[test]
    fn split_rejects_single_sample_class() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), &[("a", 1), ("b", 10)], 0.5);
        let mut m = DatasetManifest::load(tmp.path()).unwrap();
        assert!(split_dataset(&mut m, (0.8, 0.2), 1).is_err());
    }

    #[test]
    fn stratified_rounding_deviates_at_most_one_per_class() {
        // Enumerate class sizes: per-class train counts stay within one
        // sample of the exact 80/20 cut.
        let tmp = tempfile::tempdir().unwrap();
        let sizes = [2usize, 3, 5, 7, 10, 13, 29, 50];
        let classes: Vec<(String, usize)> = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| (format!("c{i:02}"), n))
            .collect();
        let spec: Vec<(&str, usize)> = classes.iter().map(|(n, c)| (n.as_str(), *c)).collect();
        make_dataset(tmp.path(), &spec, 0.5);
        let mut m = DatasetManifest::load(tmp.path()).unwrap();
        split_dataset(&mut m, (0.8, 0.2), 3).unwrap();
        for (ci, &n) in sizes.iter().enumerate() {
            let train = m
                .records
                .iter()
                .filter(|r| r.label_name == format!("c{ci:02}") && r.split == Split::Train)
                .count();
            let exact = 0.8 * n as f64;
            assert!(
                (train as f64 - exact).abs() <= 1.0,
                "class size {n}: train {train} vs exact {exact}"
            );
            let val = n - train;
            assert!(train >= 1 && val >= 1);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), &[("a", 3), ("b", 2)], 0.75);
        let mut m = DatasetManifest::load(tmp.path()).unwrap();
        m.records[0].series_id = Some("s1".to_string());
        split_dataset(&mut m, (0.8, 0.2), 9).unwrap(); // saves
        let m2 = DatasetManifest::load(tmp.path()).unwrap();
        assert_eq!(m.records.len(), m2.records.len());
        for (a, b) in m.records.iter().zip(&m2.records) {
            assert_eq!(a.path, b.path);
            assert_eq!(a.gsd, b.gsd);
            assert_eq!(a.label, b.label);
            assert_eq!(a.series_id, b.series_id);
            assert_eq!(a.split, b.split);
        }
    }

    #[test]
    fn load_split_reads_images_in_manifest_order() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), &[("a", 4)], 0.5);
        let mut m = DatasetManifest::load(tmp.path()).unwrap();
        split_dataset(&mut m, (0.8, 0.2), 1).unwrap();
        let all = load_split(&m, Split::Unassigned).unwrap();
        assert_eq!(all.len(), 4);
        assert!(all.windows(2).all(|w| w[0].index < w[1].index));
        assert_eq!(all[0].image.dim(), (8, 8, 3));
    }

    #[test]
    fn norm_stats_on_constant_images() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), &[("a", 2)], 0.5);
        let m = DatasetManifest::load(tmp.path()).unwrap();
        let samples = load_split(&m, Split::Unassigned).unwrap();
        let stats = compute_norm_stats(&samples);
        for c in 0..3 {
            assert!(stats.mean[c] >= 0.0 && stats.mean[c] <= 1.0);
            assert!(stats.std[c] >= 1e-6);
        }
    }

    #[test]
    fn series_grouping() {
        let tmp = tempfile::tempdir().unwrap();
        make_dataset(tmp.path(), &[("a", 5)], 0.5);
        let m = DatasetManifest::load(tmp.path()).unwrap();
        let mut samples = load_split(&m, Split::Unassigned).unwrap();
        samples[0].series_id = Some("s1".into());
        samples[2].series_id = Some("s1".into());
        samples[1].series_id = Some("s2".into());
        let groups = group_series(&samples);
        assert_eq!(groups.len(), 4);
        assert_eq!(groups[0], vec![0, 2]);
        assert_eq!(groups[1], vec![1]);
    }
}
