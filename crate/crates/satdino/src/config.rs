//! Run configuration: a flat dotted-key text format (`key = value`, `#`
//! comments) covering every ablation axis, plus a canonical serialization
//! used for config digests and checkpoint guards.

use crate::error::{Error, Result};
use crate::geometry::{AspectRange, SamplingStrategy, ScaleRange, ViewSpecConfig};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugLevel {
    None,
    Soft,
    Mid,
    Default,
}

impl AugLevel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugLevel::None),
            "soft" => Ok(AugLevel::Soft),
            "mid" => Ok(AugLevel::Mid),
            "default" => Ok(AugLevel::Default),
            other => Err(Error::config(format!(
                "unknown augmentation level {other:?} (expected none|soft|mid|default)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AugLevel::None => "none",
            AugLevel::Soft => "soft",
            AugLevel::Mid => "mid",
            AugLevel::Default => "default",
        }
    }

    /// Scale factor applied to photometric probabilities.
    pub fn factor(&self) -> f64 {
        match self {
            AugLevel::None => 0.0,
            AugLevel::Soft => 0.25,
            AugLevel::Mid => 0.75,
            AugLevel::Default => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCfg {
    pub variant: String,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub use_gsd_token: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewsCfg {
    pub n_local: usize,
    pub local_scale: (f64, f64),
    pub global_scale: (f64, f64),
    pub strategy: String,
    pub aspect: (f64, f64),
    pub global_out: usize,
    pub local_out: usize,
    pub variable_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugCfg {
    pub level: String,
    pub temporal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCfg {
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCfg {
    pub prototypes: usize,
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub tau_s: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub tau_t_warmup_epochs: f64,
    pub center_momentum: f64,
    pub freeze_proto_epochs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimCfg {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub ema_start: f64,
    pub ema_end: f64,
}

/// Everything one pretraining run needs. Defaults are the desk-scale "tiny"
/// setup; the paper-scale values live in the documented config keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelCfg,
    pub views: ViewsCfg,
    pub aug: AugCfg,
    pub loss: LossCfg,
    pub head: HeadCfg,
    pub optim: OptimCfg,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelCfg {
                variant: "tiny".to_string(),
                patch_size: 8,
                embed_dim: 96,
                depth: 4,
                heads: 4,
                mlp_ratio: 4,
                use_gsd_token: true,
            },
            views: ViewsCfg {
                n_local: 8,
                local_scale: (0.05, 0.25),
                global_scale: (0.25, 1.0),
                strategy: "uniform".to_string(),
                aspect: (0.75, 4.0 / 3.0),
                global_out: 64,
                local_out: 32,
                variable_sizes: Vec::new(),
            },
            aug: AugCfg {
                level: "default".to_string(),
                temporal: false,
            },
            loss: LossCfg { gamma: 0.1 },
            head: HeadCfg {
                prototypes: 512,
                hidden_dim: 256,
                bottleneck_dim: 64,
                tau_s: 0.1,
                tau_t_start: 0.04,
                tau_t_end: 0.04,
                tau_t_warmup_epochs: 0.0,
                center_momentum: 0.9,
                freeze_proto_epochs: 1.0,
            },
            optim: OptimCfg {
                lr: 0.001,
                min_lr: 1e-6,
                warmup_epochs: 2.0,
                epochs: 20,
                batch_size: 64,
                weight_decay: 0.04,
                ema_start: 0.996,
                ema_end: 1.0,
            },
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn aug_level(&self) -> Result<AugLevel> {
        AugLevel::parse(&self.aug.level)
    }

    pub fn strategy(&self) -> Result<SamplingStrategy> {
        SamplingStrategy::parse(&self.views.strategy)
    }

    pub fn view_spec(&self) -> Result<ViewSpecConfig> {
        let spec = ViewSpecConfig {
            n_local: self.views.n_local,
            local_scale: ScaleRange {
                lo: self.views.local_scale.0,
                hi: self.views.local_scale.1,
            },
            global_scale: ScaleRange {
                lo: self.views.global_scale.0,
                hi: self.views.global_scale.1,
            },
            strategy: self.strategy()?,
            aspect: AspectRange {
                lo: self.views.aspect.0,
                hi: self.views.aspect.1,
            },
            global_out: self.views.global_out,
            local_out: self.views.local_out,
            variable_sizes: self.views.variable_sizes.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.embed_dim == 0 || self.model.embed_dim % self.model.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} must be positive and divisible by heads {}",
                self.model.embed_dim, self.model.heads
            )));
        }
        if self.model.patch_size == 0 || self.model.depth == 0 || self.model.mlp_ratio == 0 {
            return Err(Error::config(
                "patch_size, depth and mlp_ratio must be positive".to_string(),
            ));
        }
        if self.views.global_out % self.model.patch_size != 0
            || self.views.local_out % self.model.patch_size != 0
        {
            return Err(Error::config(format!(
                "view output sizes ({}, {}) must be divisible by patch size {}",
                self.views.global_out, self.views.local_out, self.model.patch_size
            )));
        }
        for &s in &self.views.variable_sizes {
            if s % self.model.patch_size != 0 {
                return Err(Error::config(format!(
                    "variable size {s} not divisible by patch size {}",
                    self.model.patch_size
                )));
            }
        }
        self.view_spec()?;
        self.aug_level()?;
        if self.loss.gamma < 0.0 {
            return Err(Error::config(format!(
                "gsd loss weight must be non-negative, got {}",
                self.loss.gamma
            )));
        }
        let h = &self.head;
        if h.prototypes < 2 {
            return Err(Error::config("head needs at least 2 prototypes".to_string()));
        }
        if !(h.tau_s > 0.0 && h.tau_t_start > 0.0 && h.tau_t_start <= h.tau_t_end) {
            return Err(Error::config(format!(
                "temperatures must satisfy tau_s > 0 and 0 < tau_t_start <= tau_t_end, \
                 got tau_s={}, tau_t=[{}, {}]",
                h.tau_s, h.tau_t_start, h.tau_t_end
            )));
        }
        if !(0.0..1.0).contains(&h.center_momentum) {
            return Err(Error::config(format!(
                "center momentum must be in [0, 1), got {}",
                h.center_momentum
            )));
        }
        let o = &self.optim;
        if o.batch_size == 0 || o.epochs == 0 {
            return Err(Error::config(
                "batch_size and epochs must be positive".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&o.ema_start) || !(0.0..=1.0).contains(&o.ema_end) {
            return Err(Error::config("ema momenta must be in [0, 1]".to_string()));
        }
        Ok(())
    }

    /// Canonical serialization: one dotted key per line, fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv(&mut s, "model.variant", self.model.variant.clone());
        kv(&mut s, "model.patch_size", self.model.patch_size.to_string());
        kv(&mut s, "model.embed_dim", self.model.embed_dim.to_string());
        kv(&mut s, "model.depth", self.model.depth.to_string());
        kv(&mut s, "model.heads", self.model.heads.to_string());
        kv(&mut s, "model.mlp_ratio", self.model.mlp_ratio.to_string());
        kv(
            &mut s,
            "model.use_gsd_token",
            self.model.use_gsd_token.to_string(),
        );
        kv(&mut s, "views.n_local", self.views.n_local.to_string());
        kv(
            &mut s,
            "views.local_scale",
            format!("{}, {}", self.views.local_scale.0, self.views.local_scale.1),
        );
        kv(
            &mut s,
            "views.global_scale",
            format!(
                "{}, {}",
                self.views.global_scale.0, self.views.global_scale.1
            ),
        );
        kv(&mut s, "views.strategy", self.views.strategy.clone());
        kv(
            &mut s,
            "views.aspect",
            format!("{}, {}", self.views.aspect.0, self.views.aspect.1),
        );
        kv(&mut s, "views.global_out", self.views.global_out.to_string());
        kv(&mut s, "views.local_out", self.views.local_out.to_string());
        kv(
            &mut s,
            "views.variable_sizes",
            self.views
                .variable_sizes
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(", "),
        );
        kv(&mut s, "aug.level", self.aug.level.clone());
        kv(&mut s, "aug.temporal", self.aug.temporal.to_string());
        kv(&mut s, "loss.gamma", fmt_f64(self.loss.gamma));
        kv(&mut s, "head.prototypes", self.head.prototypes.to_string());
        kv(&mut s, "head.hidden_dim", self.head.hidden_dim.to_string());
        kv(
            &mut s,
            "head.bottleneck_dim",
            self.head.bottleneck_dim.to_string(),
        );
        kv(&mut s, "head.tau_s", fmt_f64(self.head.tau_s));
        kv(&mut s, "head.tau_t_start", fmt_f64(self.head.tau_t_start));
        kv(&mut s, "head.tau_t_end", fmt_f64(self.head.tau_t_end));
        kv(
            &mut s,
            "head.tau_t_warmup_epochs",
            fmt_f64(self.head.tau_t_warmup_epochs),
        );
        kv(
            &mut s,
            "head.center_momentum",
            fmt_f64(self.head.center_momentum),
        );
        kv(
            &mut s,
            "head.freeze_proto_epochs",
            fmt_f64(self.head.freeze_proto_epochs),
        );
        kv(&mut s, "optim.lr", fmt_f64(self.optim.lr));
        kv(&mut s, "optim.min_lr", fmt_f64(self.optim.min_lr));
        kv(
            &mut s,
            "optim.warmup_epochs",
            fmt_f64(self.optim.warmup_epochs),
        );
        kv(&mut s, "optim.epochs", self.optim.epochs.to_string());
        kv(&mut s, "optim.batch_size", self.optim.batch_size.to_string());
        kv(
            &mut s,
            "optim.weight_decay",
            fmt_f64(self.optim.weight_decay),
        );
        kv(&mut s, "optim.ema_start", fmt_f64(self.optim.ema_start));
        kv(&mut s, "optim.ema_end", fmt_f64(self.optim.ema_end));
        kv(&mut s, "seed", self.seed.to_string());
        s
    }

    /// Parses config text, starting from defaults; unknown keys are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io_at(path.to_path_buf(), e))?;
        RunConfig::parse(&text)
    }

    /// Applies a single dotted-key override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.variant" => self.model.variant = value.to_string(),
            "model.patch_size" => self.model.patch_size = parse_num(key, value)?,
            "model.embed_dim" => self.model.embed_dim = parse_num(key, value)?,
            "model.depth" => self.model.depth = parse_num(key, value)?,
            "model.heads" => self.model.heads = parse_num(key, value)?,
            "model.mlp_ratio" => self.model.mlp_ratio = parse_num(key, value)?,
            "model.use_gsd_token" => self.model.use_gsd_token = parse_bool(key, value)?,
            "views.n_local" => self.views.n_local = parse_num(key, value)?,
            "views.local_scale" => self.views.local_scale = parse_pair(key, value)?,
            "views.global_scale" => self.views.global_scale = parse_pair(key, value)?,
            "views.strategy" => {
                SamplingStrategy::parse(value)?;
                self.views.strategy = value.to_string();
            }
            "views.aspect" => self.views.aspect = parse_pair(key, value)?,
            "views.global_out" => self.views.global_out = parse_num(key, value)?,
            "views.local_out" => self.views.local_out = parse_num(key, value)?,
            "views.variable_sizes" => {
                self.views.variable_sizes = parse_list(key, value)?;
            }
            "aug.level" => {
                AugLevel::parse(value)?;
                self.aug.level = value.to_string();
            }
            "aug.temporal" => self.aug.temporal = parse_bool(key, value)?,
            "loss.gamma" => self.loss.gamma = parse_f64(key, value)?,
            "head.prototypes" => self.head.prototypes = parse_num(key, value)?,
            "head.hidden_dim" => self.head.hidden_dim = parse_num(key, value)?,
            "head.bottleneck_dim" => self.head.bottleneck_dim = parse_num(key, value)?,
            "head.tau_s" => self.head.tau_s = parse_f64(key, value)?,
            "head.tau_t_start" => self.head.tau_t_start = parse_f64(key, value)?,
            "head.tau_t_end" => self.head.tau_t_end = parse_f64(key, value)?,
            "head.tau_t_warmup_epochs" => self.head.tau_t_warmup_epochs = parse_f64(key, value)?,
            "head.center_momentum" => self.head.center_momentum = parse_f64(key, value)?,
            "head.freeze_proto_epochs" => self.head.freeze_proto_epochs = parse_f64(key, value)?,
            "optim.lr" => self.optim.lr = parse_f64(key, value)?,
            "optim.min_lr" => self.optim.min_lr = parse_f64(key, value)?,
            "optim.warmup_epochs" => self.optim.warmup_epochs = parse_f64(key, value)?,
            "optim.epochs" => self.optim.epochs = parse_num(key, value)?,
            "optim.batch_size" => self.optim.batch_size = parse_num(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_f64(key, value)?,
            "optim.ema_start" => self.optim.ema_start = parse_f64(key, value)?,
            "optim.ema_end" => self.optim.ema_end = parse_f64(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_text().as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest round-trippable form; Rust's float Display guarantees this.
    format!("{v}")
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    parse_num::<f64>(key, value)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(Error::config(format!(
            "{key} expects two comma-separated numbers, got {value:?}"
        )));
    }
    Ok((parse_f64(key, parts[0])?, parse_f64(key, parts[1])?))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(str::trim)
        .map(|p| parse_num::<usize>(key, p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trip_through_text() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn digest_changes_with_any_field() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.loss.gamma = 0.01;
        assert_ne!(a.digest(), b.digest());
        let c = RunConfig::parse(&a.to_text()).unwrap();
        assert_eq!(a.digest(), c.digest());
    }

    #[test]
    fn parser_handles_comments_and_blanks() {
        let text = "
# gsd loss weight sweep cell
loss.gamma = 0.001  # inline comment

views.n_local = 10
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.loss.gamma, 0.001);
        assert_eq!(cfg.views.n_local, 10);
    }

    #[test]
    fn unknown_key_is_config_error() {
        assert!(RunConfig::parse("nonsense.key = 3").is_err());
    }

    #[test]
    fn every_ablation_cell_is_expressible() {
        let mut cfg = RunConfig::default();
        for level in ["none", "soft", "mid", "default"] {
            cfg.set("aug.level", level).unwrap();
            cfg.validate().unwrap();
        }
        for strategy in ["random", "uniform", "variable-size"] {
            cfg.set("views.strategy", strategy).unwrap();
        }
        cfg.set("views.strategy", "uniform").unwrap();
        for n in [2usize, 4, 6, 8, 10, 12] {
            cfg.set("views.n_local", &n.to_string()).unwrap();
            cfg.validate().unwrap();
        }
        // scale-range rows expressed as area fractions
        for (l, g) in [
            ("0.05, 0.25", "0.25, 1.0"),
            ("0.05, 0.50", "0.50, 1.0"),
            ("0.25, 0.50", "0.50, 1.0"),
            ("0.05, 0.50", "0.25, 1.0"),
            ("0.05, 0.75", "0.25, 1.0"),
            ("0.05, 1.00", "0.25, 1.0"),
        ] {
            cfg.set("views.local_scale", l).unwrap();
            cfg.set("views.global_scale", g).unwrap();
            cfg.validate().unwrap();
        }
        for a in ["0.75, 1.3333333333333333", "1, 1", "0.5, 1.5", "0.5, 2"] {
            cfg.set("views.aspect", a).unwrap();
            cfg.validate().unwrap();
        }
        for g in ["0", "0.0001", "0.001", "0.01", "0.1"] {
            cfg.set("loss.gamma", g).unwrap();
            cfg.validate().unwrap();
        }
        for t in ["true", "false"] {
            cfg.set("aug.temporal", t).unwrap();
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn negative_gamma_rejected() {
        let mut cfg = RunConfig::default();
        cfg.loss.gamma = -0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn view_spec_conversion() {
        let mut cfg = RunConfig::default();
        cfg.set("views.strategy", "variable-size").unwrap();
        cfg.set("views.n_local", "4").unwrap();
        cfg.set("views.variable_sizes", "64, 56, 48, 50").unwrap();
        // 50 is not divisible by patch 8
        assert!(cfg.validate().is_err());
        cfg.set("views.variable_sizes", "64, 56, 48, 40").unwrap();
        let spec = cfg.view_spec().unwrap();
        assert_eq!(spec.variable_sizes, vec![64, 56, 48, 40]);
    }
}
