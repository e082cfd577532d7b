//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes  "SDCK"
//! version          u32      currently 1
//! config digest    32 bytes sha256 of the canonical config text
//! step             u64
//! epoch            u64
//! optimizer step   u64
//! norm mean        3 x f64
//! norm std         3 x f64
//! config text      u32 length + utf-8 bytes (canonical RunConfig)
//! array count      u32
//! per array:       name (u32 length + utf-8), ndim (u8), dims (u64 each),
//!                  data (f32 little-endian, row-major)
//! ```
//!
//! Arrays are the student, teacher, center and AdamW moment tensors, in the
//! model's canonical parameter order. Saving converts to f32; a save/load/
//! save cycle is byte-identical.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imageops::NormStats;
use crate::model::{ModelConfig, ModelParams};
use crate::nn::optim::{AdamW, ParamSet};
use crate::nn::{fl, Elem};
use crate::trainer::TrainState;
use ndarray::Array1;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SDCK";
const VERSION: u32 = 1;

fn digest_bytes(cfg: &RunConfig) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(cfg.to_text().as_bytes());
    hasher.finalize().into()
}

struct ArrayWriter<'a, W: Write> {
    w: &'a mut W,
}

impl<'a, W: Write> ArrayWriter<'a, W> {
    fn write_array<F: Elem>(&mut self, name: &str, shape: &[usize], data: &[F]) -> Result<()> {
        self.w.write_all(&(name.len() as u32).to_le_bytes())?;
        self.w.write_all(name.as_bytes())?;
        self.w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            self.w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in data {
            self.w.write_all(&(v.to_f() as f32).to_le_bytes())?;
        }
        Ok(())
    }

    fn write_param_set<F: Elem, P: ParamSet<F>>(&mut self, prefix: &str, p: &P) -> Result<()> {
        let meta = p.meta();
        for (m, s) in meta.iter().zip(p.slices()) {
            self.write_array(&format!("{prefix}.{}", m.name), &m.shape, s)?;
        }
        Ok(())
    }
}

/// Serializes the full training state.
pub fn save_checkpoint<F: Elem>(state: &TrainState<F>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io_at(parent.to_path_buf(), e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io_at(path.to_path_buf(), e))?;
    let mut w = BufWriter::new(file);

    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&digest_bytes(&state.run_cfg))?;
    w.write_all(&state.step.to_le_bytes())?;
    w.write_all(&state.epoch.to_le_bytes())?;
    w.write_all(&state.opt.t.to_le_bytes())?;
    for c in 0..3 {
        w.write_all(&state.norm.mean[c].to_le_bytes())?;
    }
    for c in 0..3 {
        w.write_all(&state.norm.std[c].to_le_bytes())?;
    }
    let cfg_text = state.run_cfg.to_text();
    w.write_all(&(cfg_text.len() as u32).to_le_bytes())?;
    w.write_all(cfg_text.as_bytes())?;

    let n_arrays = state.student.meta().len() * 4 + 1;
    w.write_all(&(n_arrays as u32).to_le_bytes())?;
    let mut aw = ArrayWriter { w: &mut w };
    aw.write_param_set("student", &state.student)?;
    aw.write_param_set("teacher", &state.teacher)?;
    aw.write_array(
        "center",
        &[state.center.len()],
        state.center.as_slice().unwrap(),
    )?;
    aw.write_param_set("opt.m", &state.opt.m)?;
    aw.write_param_set("opt.v", &state.opt.v)?;
    w.flush()?;
    Ok(())
}

struct Reader<R: Read> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn bytes_exact(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| Error::checkpoint(format!("truncated file while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.bytes_exact(4, what)?.try_into().unwrap(),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.bytes_exact(8, what)?.try_into().unwrap(),
        ))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.bytes_exact(8, what)?.try_into().unwrap(),
        ))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        if len > 1 << 24 {
            return Err(Error::checkpoint(format!(
                "implausible string length {len} for {what}"
            )));
        }
        String::from_utf8(self.bytes_exact(len, what)?)
            .map_err(|_| Error::checkpoint(format!("invalid utf-8 in {what}")))
    }

    fn array<F: Elem>(&mut self, expect_name: &str, expect_shape: &[usize]) -> Result<Vec<F>> {
        let name = self.string("array name")?;
        if name != expect_name {
            return Err(Error::checkpoint(format!(
                "array order mismatch: expected {expect_name:?}, found {name:?}"
            )));
        }
        let ndim = self.bytes_exact(1, "array ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64("array dim")? as usize);
        }
        if shape != expect_shape {
            return Err(Error::checkpoint(format!(
                "array {name:?} has shape {shape:?}, expected {expect_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = self.bytes_exact(4 * n, "array data")?;
        let mut out = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(4) {
            out.push(fl::<F>(
                f32::from_le_bytes(chunk.try_into().unwrap()) as f64
            ));
        }
        Ok(out)
    }

    fn read_param_set<F: Elem, P: ParamSet<F>>(&mut self, prefix: &str, p: &mut P) -> Result<()> {
        let meta = p.meta();
        let mut slices = p.slices_mut();
        for (m, s) in meta.iter().zip(slices.iter_mut()) {
            let data = self.array::<F>(&format!("{prefix}.{}", m.name), &m.shape)?;
            s.copy_from_slice(&data);
        }
        Ok(())
    }
}

/// Loads a checkpoint. When `expected` is given, its config digest must match
/// the stored digest unless `force` is set.
pub fn load_checkpoint<F: Elem>(
    path: &Path,
    expected: Option<&RunConfig>,
    force: bool,
) -> Result<TrainState<F>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io_at(path.to_path_buf(), e))?;
    let mut r = Reader {
        r: BufReader::new(file),
    };
    let magic = r.bytes_exact(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }
    let digest: [u8; 32] = r.bytes_exact(32, "digest")?.try_into().unwrap();
    let step = r.u64("step")?;
    let epoch = r.u64("epoch")?;
    let opt_t = r.u64("optimizer step")?;
    let mut norm = NormStats::identity();
    for c in 0..3 {
        norm.mean[c] = r.f64("norm mean")?;
    }
    for c in 0..3 {
        norm.std[c] = r.f64("norm std")?;
    }
    let cfg_text = r.string("config")?;
    let run_cfg = RunConfig::parse(&cfg_text)?;
    if digest != digest_bytes(&run_cfg) {
        return Err(Error::checkpoint(
            "stored config digest does not match stored config text".to_string(),
        ));
    }
    if let Some(exp) = expected {
        if digest_bytes(exp) != digest && !force {
            return Err(Error::checkpoint(format!(
                "config digest mismatch: checkpoint was written with {}..., caller expects {}... \
                 (pass --force to override)",
                hex_prefix(&digest),
                hex_prefix(&digest_bytes(exp)),
            )));
        }
    }

    let model_cfg = ModelConfig::from_run_config(&run_cfg)?;
    let mut rng = crate::nn::stream_rng(run_cfg.seed, 1, 0, 0);
    let template = ModelParams::<F>::init(&model_cfg, &mut rng);

    let n_arrays = r.u32("array count")? as usize;
    let expect = template.meta().len() * 4 + 1;
    if n_arrays != expect {
        return Err(Error::checkpoint(format!(
            "checkpoint holds {n_arrays} arrays, model expects {expect}"
        )));
    }
    let mut student = template.clone();
    let mut teacher = template.clone();
    r.read_param_set("student", &mut student)?;
    r.read_param_set("teacher", &mut teacher)?;
    let center_data = r.array::<F>("center", &[run_cfg.head.prototypes])?;
    let center = Array1::from_vec(center_data);
    let mut opt = AdamW::new(&student);
    r.read_param_set("opt.m", &mut opt.m)?;
    r.read_param_set("opt.v", &mut opt.v)?;
    opt.t = opt_t;

    let mut trailing = [0u8; 1];
    if r.r.read(&mut trailing)? != 0 {
        return Err(Error::checkpoint(
            "trailing bytes after the last array".to_string(),
        ));
    }

    Ok(TrainState {
        run_cfg,
        model_cfg,
        student,
        teacher,
        center,
        opt,
        step,
        epoch,
        norm,
    })
}

fn hex_prefix(d: &[u8; 32]) -> String {
    d.iter().take(4).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainState;

    fn small_run_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.embed_dim = 16;
        cfg.model.depth = 1;
        cfg.model.heads = 2;
        cfg.head.prototypes = 8;
        cfg.head.hidden_dim = 12;
        cfg.head.bottleneck_dim = 6;
        cfg.views.global_out = 16;
        cfg.views.local_out = 8;
        cfg.seed = 3;
        cfg
    }

    fn make_state() -> TrainState<f32> {
        let cfg = small_run_cfg();
        let norm = NormStats {
            mean: [0.4, 0.5, 0.6],
            std: [0.2, 0.25, 0.3],
        };
        let mut st = TrainState::init(&cfg, norm).unwrap();
        st.step = 41;
        st.epoch = 3;
        st.opt.t = 41;
        st.center.fill(0.125);
        st
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let p1 = tmp.path().join("a.ckpt");
        let p2 = tmp.path().join("b.ckpt");
        let st = make_state();
        save_checkpoint(&st, &p1).unwrap();
        let loaded = load_checkpoint::<f32>(&p1, None, false).unwrap();
        assert_eq!(loaded.step, 41);
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.norm, st.norm);
        save_checkpoint(&loaded, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn loaded_params_match_saved() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("c.ckpt");
        let st = make_state();
        save_checkpoint(&st, &p).unwrap();
        let loaded = load_checkpoint::<f32>(&p, None, false).unwrap();
        for (a, b) in st.student.slices().iter().zip(loaded.student.slices()) {
            assert_eq!(a, &b);
        }
        for (a, b) in st.opt.m.slices().iter().zip(loaded.opt.m.slices()) {
            assert_eq!(a, &b);
        }
        assert_eq!(st.center, loaded.center);
    }

    #[test]
    fn truncation_is_a_clean_error() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("d.ckpt");
        let st = make_state();
        save_checkpoint(&st, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        for cut in [3usize, 40, 100, bytes.len() / 2, bytes.len() - 1] {
            let trunc = tmp.path().join(format!("cut{cut}.ckpt"));
            std::fs::write(&trunc, &bytes[..cut]).unwrap();
            let err = load_checkpoint::<f32>(&trunc, None, false);
            assert!(err.is_err(), "cut at {cut} should fail");
            let msg = err.unwrap_err().to_string();
            assert!(
                msg.contains("truncated") || msg.contains("checkpoint"),
                "unexpected message {msg}"
            );
        }
    }

    #[test]
    fn digest_guard_refuses_changed_config_without_force() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("e.ckpt");
        let st = make_state();
        save_checkpoint(&st, &p).unwrap();
        let mut other = small_run_cfg();
        other.loss.gamma = 0.001;
        let err = load_checkpoint::<f32>(&p, Some(&other), false);
        assert!(err.is_err());
        assert!(err.unwrap_err().to_string().contains("digest mismatch"));
        // force overrides
        assert!(load_checkpoint::<f32>(&p, Some(&other), true).is_ok());
        // matching config needs no force
        assert!(load_checkpoint::<f32>(&p, Some(&small_run_cfg()), false).is_ok());
    }

    #[test]
    fn bad_magic_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("f.ckpt");
        std::fs::write(&p, b"NOPEnope").unwrap();
        let err = load_checkpoint::<f32>(&p, None, false).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }
}
