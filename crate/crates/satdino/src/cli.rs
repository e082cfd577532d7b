//! Command-line surface. The binary is a thin wrapper; everything here
//! delegates to the library. Training and evaluation run in f32.
//!
//! `SATDINO_THREADS` caps worker-thread parallelism; results are identical
//! for any thread count.

use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::data::{load_split, split_dataset, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::eval::{
    extract_features, fine_tune, linear_probe, multiscale_eval, save_features, DEFAULT_KNN_TAU,
    FINETUNE_LR, PROBE_EPOCHS, PROBE_LR,
};
use crate::model::ModelConfig;
use crate::sweep::{run_sweep, SweepGrid};
use crate::synth::{generate_synthetic, SynthSpec};
use crate::trainer::{pretrain, TrainState};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "satdino",
    version,
    about = "Self-distillation pretraining for satellite imagery with GSD-aware sampling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural multi-GSD dataset.
    Synth(SynthArgs),
    /// Assign deterministic stratified train/val splits in a manifest.
    Split(SplitArgs),
    /// Run self-distillation pretraining.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint's frozen teacher.
    Eval {
        #[command(subcommand)]
        protocol: EvalCommand,
    },
    /// Run the cartesian product of a config grid, one run per cell.
    Sweep(SweepArgs),
    /// Export model visualizations for one image.
    Viz {
        #[command(subcommand)]
        what: VizCommand,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.307)]
    gsd_min: f64,
    #[arg(long, default_value_t = 1.705)]
    gsd_max: f64,
    /// Scenes per class.
    #[arg(long, default_value_t = 32)]
    per_class: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Images per scene (time-series length).
    #[arg(long, default_value_t = 1)]
    series_size: usize,
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset directory containing manifest.csv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.2)]
    val_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    /// Config file (dotted keys); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Weighted kNN over frozen class-token features, optionally multi-scale.
    Knn(KnnArgs),
    /// Linear probe on frozen features.
    Probe(ProbeArgs),
    /// Full fine-tuning from the teacher initialization.
    Finetune(FinetuneArgs),
}

#[derive(Args)]
struct EvalCommon {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for report files (defaults to the run's reports/).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config to check the checkpoint digest against.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Load even when the config digest does not match.
    #[arg(long, default_value_t = false)]
    force: bool,
}

#[derive(Args)]
struct KnnArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long, default_value_t = crate::eval::DEFAULT_KNN_K)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_KNN_TAU)]
    tau: f64,
    /// Comma-separated resolution scales.
    #[arg(long, default_value = "1.0,0.5,0.25,0.125")]
    scales: String,
    /// Export val-split features (scale 1.0) as the documented binary.
    #[arg(long)]
    export_features: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long, default_value_t = PROBE_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = PROBE_LR)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long, default_value_t = PROBE_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = FINETUNE_LR)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    /// Grid file: `key = v1 | v2 | ...` per line.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Base config the grid overrides.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum VizCommand {
    /// Argmax-head attention map of the class token.
    Attention(VizArgs),
    /// PCA projection of patch embeddings.
    Pca(VizArgs),
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    force: bool,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_thread_pool();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("SATDINO_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                // Ignore the error if a pool already exists (e.g. in tests).
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Split(a) => cmd_split(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Eval { protocol } => match protocol {
            EvalCommand::Knn(a) => cmd_eval_knn(a),
            EvalCommand::Probe(a) => cmd_eval_probe(a),
            EvalCommand::Finetune(a) => cmd_eval_finetune(a),
        },
        Command::Sweep(a) => cmd_sweep(a),
        Command::Viz { what } => match what {
            VizCommand::Attention(a) => cmd_viz(a, true),
            VizCommand::Pca(a) => cmd_viz(a, false),
        },
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_classes: a.classes,
        image_size: a.size,
        gsd_range: (a.gsd_min, a.gsd_max),
        per_class: a.per_class,
        seed: a.seed,
        series_size: a.series_size,
    };
    let manifest = generate_synthetic(&spec, &a.out)?;
    println!(
        "wrote {} images over {} classes to {}",
        manifest.records.len(),
        manifest.n_classes(),
        a.out.display()
    );
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let mut manifest = DatasetManifest::load(&a.data)?;
    split_dataset(&mut manifest, (a.train_frac, a.val_frac), a.seed)?;
    println!(
        "split {}: {} train / {} val",
        a.data.display(),
        manifest.count(Split::Train),
        manifest.count(Split::Val)
    );
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let output = pretrain::<f32>(&cfg, &a.data, &a.out)?;
    let last = output.metrics.last();
    println!(
        "pretrained {} steps; final l_dino {:.4}, l_gsd {:.5}; checkpoint {}",
        output.metrics.len(),
        last.map(|m| m.l_dino).unwrap_or(f64::NAN),
        last.map(|m| m.l_gsd).unwrap_or(f64::NAN),
        output.checkpoint.display()
    );
    Ok(())
}

fn load_eval_state(common: &EvalCommon) -> Result<(TrainState<f32>, ModelConfig)> {
    let expected = match &common.config {
        Some(p) => Some(RunConfig::from_file(p)?),
        None => None,
    };
    let state = load_checkpoint::<f32>(&common.checkpoint, expected.as_ref(), common.force)?;
    let model_cfg = ModelConfig::from_run_config(&state.run_cfg)?;
    Ok((state, model_cfg))
}

/// Reports default into `<run>/reports` when the checkpoint sits in the
/// conventional `<run>/checkpoints/` location.
fn reports_dir_for(common: &EvalCommon) -> PathBuf {
    if let Some(out) = &common.out {
        return out.clone();
    }
    if let Some(parent) = common.checkpoint.parent() {
        if parent.file_name().map(|n| n == "checkpoints").unwrap_or(false) {
            if let Some(run) = parent.parent() {
                return crate::rundir::reports_dir(run);
            }
        }
    }
    PathBuf::from("reports")
}

fn parse_scales(s: &str) -> Result<Vec<f64>> {
    let scales: Vec<f64> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad scale {p:?}")))
        })
        .collect::<Result<_>>()?;
    if scales.is_empty() {
        return Err(Error::config("empty scale list".to_string()));
    }
    Ok(scales)
}

fn cmd_eval_knn(a: KnnArgs) -> Result<()> {
    let (state, model_cfg) = load_eval_state(&a.common)?;
    let scales = parse_scales(&a.scales)?;
    let manifest = DatasetManifest::load(&a.common.data)?;
    let train = load_split(&manifest, Split::Train)?;
    let val = load_split(&manifest, Split::Val)?;
    let provenance = format!(
        "checkpoint={} data={} digest={}",
        a.common.checkpoint.display(),
        a.common.data.display(),
        state.run_cfg.digest()
    );
    let report = multiscale_eval(
        &state.teacher,
        &model_cfg.vit,
        &state.norm,
        &train,
        &val,
        state.run_cfg.views.global_out,
        &scales,
        a.k,
        a.tau,
        &provenance,
    )?;
    print!("{}", report.to_text());
    report.write(&reports_dir_for(&a.common), "knn")?;
    if let Some(path) = &a.export_features {
        let features = extract_features(
            &state.teacher,
            &model_cfg.vit,
            &state.norm,
            &val,
            state.run_cfg.views.global_out,
            1.0,
            &provenance,
        )?;
        save_features(&features, path)?;
        println!("features -> {}", path.display());
    }
    Ok(())
}

fn cmd_eval_probe(a: ProbeArgs) -> Result<()> {
    let (state, model_cfg) = load_eval_state(&a.common)?;
    let manifest = DatasetManifest::load(&a.common.data)?;
    let train = load_split(&manifest, Split::Train)?;
    let val = load_split(&manifest, Split::Val)?;
    let provenance = format!(
        "checkpoint={} data={}",
        a.common.checkpoint.display(),
        a.common.data.display()
    );
    let report = linear_probe(
        &state.teacher,
        &model_cfg.vit,
        &state.norm,
        &train,
        &val,
        state.run_cfg.views.global_out,
        a.epochs,
        a.lr,
        a.seed,
        &provenance,
    )?;
    print!("{}", report.to_text());
    report.write(&reports_dir_for(&a.common), "probe")?;
    Ok(())
}

fn cmd_eval_finetune(a: FinetuneArgs) -> Result<()> {
    let (state, model_cfg) = load_eval_state(&a.common)?;
    let manifest = DatasetManifest::load(&a.common.data)?;
    let train = load_split(&manifest, Split::Train)?;
    let val = load_split(&manifest, Split::Val)?;
    let provenance = format!(
        "checkpoint={} data={}",
        a.common.checkpoint.display(),
        a.common.data.display()
    );
    let report = fine_tune(
        &state.teacher,
        &model_cfg.vit,
        &state.norm,
        &train,
        &val,
        state.run_cfg.views.global_out,
        a.epochs,
        a.lr,
        a.seed,
        &provenance,
    )?;
    print!("{}", report.to_text());
    report.write(&reports_dir_for(&a.common), "finetune")?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let grid = SweepGrid::from_file(&a.grid)?;
    let summary = run_sweep::<f32>(&base, &grid, &a.data, &a.out)?;
    println!(
        "{} cells -> {}",
        summary.rows.len(),
        summary.summary_csv.display()
    );
    for row in &summary.rows {
        let overrides: Vec<String> = row
            .overrides
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        println!(
            "cell {:03} [{}] l_dino {:.4} knn {:.4}",
            row.cell,
            overrides.join(" "),
            row.final_l_dino,
            row.knn_top1
        );
    }
    Ok(())
}

fn cmd_viz(a: VizArgs, attention: bool) -> Result<()> {
    let common = EvalCommon {
        checkpoint: a.checkpoint,
        data: PathBuf::new(),
        out: None,
        config: a.config,
        force: a.force,
    };
    let (state, model_cfg) = load_eval_state(&common)?;
    let input_size = state.run_cfg.views.global_out;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io_at(parent.to_path_buf(), e))?;
        }
    }
    if attention {
        crate::viz::attention_to_file(
            &state.teacher,
            &model_cfg.vit,
            &state.norm,
            &a.image,
            &a.out,
            input_size,
        )?;
    } else {
        crate::viz::pca_to_file(
            &state.teacher,
            &model_cfg.vit,
            &state.norm,
            &a.image,
            &a.out,
            input_size,
        )?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

