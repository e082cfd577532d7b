//! Run directory layout and the metrics stream.
//!
//! A run directory is self-contained:
//!
//! ```text
//! <run>/config.txt      canonical config snapshot
//! <run>/metrics.jsonl   one JSON object per training step
//! <run>/checkpoints/    binary checkpoints (final.ckpt at the end)
//! <run>/reports/        evaluation reports (text + csv)
//! <run>/viz/            attention / PCA image exports
//! ```
//!
//! Metric lines carry no timestamps, so two runs of the same seed produce
//! byte-identical logs.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use std::io::Write;
use std::path::{Path, PathBuf};

pub fn checkpoints_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}

pub fn reports_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("reports")
}

pub fn viz_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("viz")
}

pub fn metrics_path(run_dir: &Path) -> PathBuf {
    run_dir.join("metrics.jsonl")
}

pub fn config_path(run_dir: &Path) -> PathBuf {
    run_dir.join("config.txt")
}

/// Creates the run directory tree and writes the config snapshot.
pub fn init_run_dir(run_dir: &Path, cfg: &RunConfig) -> Result<()> {
    for dir in [
        run_dir.to_path_buf(),
        checkpoints_dir(run_dir),
        reports_dir(run_dir),
        viz_dir(run_dir),
    ] {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io_at(dir.clone(), e))?;
    }
    let cp = config_path(run_dir);
    std::fs::write(&cp, cfg.to_text()).map_err(|e| Error::io_at(cp, e))?;
    Ok(())
}

/// Line-delimited JSON metrics writer.
pub struct MetricsLogger {
    writer: std::io::BufWriter<std::fs::File>,
}

impl MetricsLogger {
    pub fn create(run_dir: &Path) -> Result<MetricsLogger> {
        let path = metrics_path(run_dir);
        let file =
            std::fs::File::create(&path).map_err(|e| Error::io_at(path.to_path_buf(), e))?;
        Ok(MetricsLogger {
            writer: std::io::BufWriter::new(file),
        })
    }

    pub fn log<T: serde::Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Data(format!("metrics serialization: {e}")))?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}
