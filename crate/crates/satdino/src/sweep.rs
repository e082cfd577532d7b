//! Ablation sweeps: a grid file lists config axes, the runner executes the
//! cartesian product (one run directory per cell) and writes one summary row
//! per cell.
//!
//! Grid format: one dotted config key per line, alternatives separated by
//! `|` (config values may themselves contain commas):
//!
//! ```text
//! # gsd loss weight axis
//! loss.gamma = 0 | 0.0001 | 0.001 | 0.01 | 0.1
//! views.n_local = 8
//! ```

use crate::config::RunConfig;
use crate::data::{load_split, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::eval::{multiscale_eval, DEFAULT_KNN_TAU};
use crate::model::ModelConfig;
use crate::nn::Elem;
use crate::trainer::pretrain;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    /// (key, alternatives) in file order.
    pub axes: Vec<(String, Vec<String>)>,
}

impl SweepGrid {
    pub fn parse(text: &str) -> Result<SweepGrid> {
        let mut axes = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, values) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("grid line {}: expected `key = v1 | v2`", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let values: Vec<String> = values
                .split('|')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            if values.is_empty() {
                return Err(Error::config(format!(
                    "grid line {}: no values for {key}",
                    lineno + 1
                )));
            }
            // Validate each value against a scratch config now, so bad grids
            // fail before any run starts.
            let mut scratch = RunConfig::default();
            for v in &values {
                scratch.set(&key, v)?;
            }
            axes.push((key, values));
        }
        if axes.is_empty() {
            return Err(Error::config("empty sweep grid".to_string()));
        }
        Ok(SweepGrid { axes })
    }

    pub fn from_file(path: &Path) -> Result<SweepGrid> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path.to_path_buf(), e))?;
        SweepGrid::parse(&text)
    }

    pub fn n_cells(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    /// Override assignments of cell `i`, in axis order (row-major over axes).
    pub fn cell(&self, mut i: usize) -> Vec<(String, String)> {
        let mut out = Vec::with_capacity(self.axes.len());
        for (key, values) in self.axes.iter().rev() {
            let v = i % values.len();
            i /= values.len();
            out.push((key.clone(), values[v].clone()));
        }
        out.reverse();
        out
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub cell: usize,
    pub overrides: Vec<(String, String)>,
    pub final_l_dino: f64,
    pub knn_top1: f64,
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub summary_csv: std::path::PathBuf,
}

/// Runs every cell of a grid: pretrain into `out/cell_NNN/`, evaluate teacher
/// kNN on the val split, and write `out/summary.csv` with one row per cell.
pub fn run_sweep<F: Elem>(
    base: &RunConfig,
    grid: &SweepGrid,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<SweepSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io_at(out_dir.to_path_buf(), e))?;
    let manifest = DatasetManifest::load(data_dir)?;
    let train = load_split(&manifest, Split::Train)?;
    let val = load_split(&manifest, Split::Val)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::data(
            "sweep needs non-empty train and val splits".to_string(),
        ));
    }

    let mut rows = Vec::with_capacity(grid.n_cells());
    for cell in 0..grid.n_cells() {
        let overrides = grid.cell(cell);
        let mut cfg = base.clone();
        for (k, v) in &overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        let run_dir = out_dir.join(format!("cell_{cell:03}"));
        let output = pretrain::<F>(&cfg, data_dir, &run_dir)?;
        let final_l_dino = output.metrics.last().map(|m| m.l_dino).unwrap_or(f64::NAN);

        let state = crate::checkpoint::load_checkpoint::<F>(&output.checkpoint, None, false)?;
        let model_cfg = ModelConfig::from_run_config(&state.run_cfg)?;
        let k = crate::eval::DEFAULT_KNN_K.min(train.len());
        let report = multiscale_eval(
            &state.teacher,
            &model_cfg.vit,
            &state.norm,
            &train,
            &val,
            cfg.views.global_out,
            &[1.0],
            k,
            DEFAULT_KNN_TAU,
            &format!("sweep cell {cell}"),
        )?;
        report.write(&crate::rundir::reports_dir(&run_dir), "knn")?;
        rows.push(SweepRow {
            cell,
            overrides,
            final_l_dino,
            knn_top1: report.top1,
        });
    }

    // Summary: one row per cell; override columns follow the axis order.
    let summary_csv = out_dir.join("summary.csv");
    let mut text = String::from("cell");
    for (key, _) in &grid.axes {
        text.push(',');
        text.push_str(key);
    }
    text.push_str(",final_l_dino,knn_top1\n");
    for row in &rows {
        text.push_str(&row.cell.to_string());
        for (_, v) in &row.overrides {
            text.push(',');
            // values may contain commas; quote them CSV-style
            if v.contains(',') {
                text.push('"');
                text.push_str(v);
                text.push('"');
            } else {
                text.push_str(v);
            }
        }
        text.push_str(&format!(",{},{}\n", row.final_l_dino, row.knn_top1));
    }
    std::fs::write(&summary_csv, text).map_err(|e| Error::io_at(summary_csv.clone(), e))?;
    Ok(SweepSummary { rows, summary_csv })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parse_and_cells() {
        let g = SweepGrid::parse(
            "loss.gamma = 0 | 0.0001 | 0.001 | 0.01 | 0.1\nviews.n_local = 4\n",
        )
        .unwrap();
        assert_eq!(g.n_cells(), 5);
        let c0 = g.cell(0);
        assert_eq!(c0[0], ("loss.gamma".to_string(), "0".to_string()));
        assert_eq!(c0[1], ("views.n_local".to_string(), "4".to_string()));
        let c4 = g.cell(4);
        assert_eq!(c4[0].1, "0.1");
    }

    #[test]
    fn grid_cartesian_product_order() {
        let g = SweepGrid::parse("aug.level = none | mid\naug.temporal = false | true\n").unwrap();
        assert_eq!(g.n_cells(), 4);
        let cells: Vec<Vec<(String, String)>> = (0..4).map(|i| g.cell(i)).collect();
        assert_eq!(cells[0][0].1, "none");
        assert_eq!(cells[0][1].1, "false");
        assert_eq!(cells[1][0].1, "none");
        assert_eq!(cells[1][1].1, "true");
        assert_eq!(cells[3][0].1, "mid");
        assert_eq!(cells[3][1].1, "true");
    }

    #[test]
    fn grid_values_with_commas() {
        let g = SweepGrid::parse(
            "views.local_scale = 0.05, 0.25 | 0.05, 0.5 | 0.25, 0.5\n",
        )
        .unwrap();
        assert_eq!(g.n_cells(), 3);
        assert_eq!(g.cell(1)[0].1, "0.05, 0.5");
    }

    #[test]
    fn grid_rejects_unknown_keys_and_bad_values() {
        assert!(SweepGrid::parse("bogus.key = 1 | 2\n").is_err());
        assert!(SweepGrid::parse("loss.gamma = abc\n").is_err());
        assert!(SweepGrid::parse("").is_err());
    }
}
