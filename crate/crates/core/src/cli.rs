//! `ocunet` command line: train, eval, predict, gradcheck and synth-data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    self, default_batch_size, load_manifest, load_sample, read_rgb, synth_dataset, MaskEncoding,
    SampleManifest, Split, SynthSpec,
};
use crate::error::{Error, Result};
use crate::loss::{HybridLossConfig, LossConfig};
use crate::metrics::{default_class_names, MetricReport};
use crate::model::{Model, ModelConfig};
use crate::predict::{export, predict_image};
use crate::selfcheck::{render, run_suite, SuiteOptions};
use crate::train::{
    evaluate, label_classes, load_checkpoint, train_observed, Dataset, RunFiles, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "ocunet", version, about = "Histopathology segmentation with OCU-Net")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a manifest's train split.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Write label masks, probability heatmaps and overlays.
    Predict(PredictArgs),
    /// Finite-difference check of every differentiable unit.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset and its manifest.
    SynthData(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// TOML file with `[model]` and `[train]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from these weights instead of a fresh initialization.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "runs/ocunet")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 8, or 4 above 512×512 patches]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 3e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the cross-entropy term in the binary hybrid loss.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Output channels: 1 (sigmoid) or 2 for binary masks, 3 for three-class.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Square patch side; also the model input size.
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn matches(self, s: Split) -> bool {
        match self {
            SplitArg::Train => s == Split::Train,
            SplitArg::Val => s == Split::Val,
            SplitArg::Test => s == Split::Test,
            SplitArg::All => true,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
            SplitArg::All => "any",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Directory for `metrics.txt` and `metrics.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Expected output channels; must match the checkpoint.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Images to segment.
    pub images: Vec<PathBuf>,
    /// Also segment the images of this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    #[arg(long, default_value = "predictions")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Coordinates probed per unit.
    #[arg(long, default_value_t = 60)]
    pub probes: usize,
    /// Negate the backward pass of one primitive.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, short = 'n', default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub patch_size: usize,
    /// 1 or 2 for binary masks, 3 for three-class.
    #[arg(long, default_value_t = 1)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trailing share of samples placed in the test split.
    #[arg(long, default_value_t = 0.0)]
    pub test_fraction: f64,
}

/// Everything a training run is configured by.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Defaults overlaid with the file's tables; also returns the file's own
/// table so callers can tell which keys it set.
pub fn load_run_config(path: Option<&Path>) -> Result<(RunConfig, toml::Table)> {
    let Some(path) = path else {
        return Ok((RunConfig::default(), toml::Table::new()));
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for key in file.keys() {
        if key != "model" && key != "train" {
            return Err(Error::Config(format!(
                "{}: unknown section `{key}` (expected `model` or `train`)",
                path.display()
            )));
        }
    }
    let mut merged = toml::Table::try_from(RunConfig::default())
        .map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut merged, file.clone());
    let cfg = merged
        .try_into()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((cfg, file))
}

fn sets(file: &toml::Table, section: &str, key: &str) -> bool {
    file.get(section)
        .and_then(toml::Value::as_table)
        .is_some_and(|t| t.contains_key(key))
}

/// Loads and validates a manifest, naming the path when it is missing.
pub fn open_manifest(path: &Path) -> Result<SampleManifest> {
    if !path.is_file() {
        return Err(Error::data(path, "manifest not found"));
    }
    load_manifest(path)
}

/// Output channels a mask scheme is trained with by default.
pub fn default_channels(encoding: MaskEncoding) -> usize {
    match encoding {
        MaskEncoding::Binary => 1,
        MaskEncoding::Orca3 => 3,
    }
}

pub fn check_classes(channels: usize, encoding: MaskEncoding) -> Result<()> {
    if label_classes(channels) != encoding.num_classes() {
        return Err(Error::Config(format!(
            "class-count mismatch: the model predicts {} classes but {:?} masks have {}",
            label_classes(channels),
            encoding,
            encoding.num_classes()
        )));
    }
    Ok(())
}

/// Applies flags over the file/default configuration; fields neither sets
/// follow the manifest.
pub fn resolve_train_config(
    args: &TrainArgs,
    manifest: &SampleManifest,
) -> Result<RunConfig> {
    let (mut cfg, file) = load_run_config(args.config.as_deref())?;
    if let Some(c) = args.classes {
        cfg.model.num_classes = c;
    } else if !sets(&file, "model", "num_classes") {
        cfg.model.num_classes = default_channels(manifest.encoding);
    }
    check_classes(cfg.model.num_classes, manifest.encoding)?;
    if let Some(p) = args.patch_size {
        cfg.model.input_size = [p, p];
    } else if !sets(&file, "model", "input_size") {
        cfg.model.input_size = manifest.patch_size;
    }
    if let Some(b) = args.base_channels {
        cfg.model.base_channels = b;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = Some(b);
    }
    if let Some(lr) = args.lr {
        cfg.train.adam.lr = lr;
    }
    if let Some(alpha) = args.alpha {
        match &mut cfg.train.loss {
            Some(LossConfig::Hybrid { config, .. }) => config.alpha = alpha,
            None if cfg.model.num_classes == 1 => {
                cfg.train.loss = Some(LossConfig::Hybrid {
                    config: HybridLossConfig::with_alpha(alpha)?,
                    weights: None,
                })
            }
            _ => {
                return Err(Error::Config(
                    "--alpha applies to the hybrid loss of a single-channel head".into(),
                ))
            }
        }
    }
    if cfg.train.loss.is_none() {
        cfg.train.loss = Some(LossConfig::for_classes(cfg.model.num_classes));
    }
    let [h, w] = cfg.model.input_size;
    cfg.train.batch_size.get_or_insert(default_batch_size(h, w));
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn write_report(report: &MetricReport, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (ext, body) in [("txt", report.to_table()), ("json", report.to_json())] {
        let path = dir.join(format!("{stem}.{ext}"));
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<ExitCode> {
    let mut manifest = open_manifest(&args.manifest)?;
    let cfg = resolve_train_config(args, &manifest)?;
    let text = cfg.to_toml();
    println!("# effective configuration\n{text}");
    let files = RunFiles::in_dir(&args.out)?;
    let cfg_path = args.out.join("config.toml");
    fs::write(&cfg_path, &text).map_err(|e| Error::io(&cfg_path, e))?;

    manifest.patch_size = cfg.model.input_size;
    let data = Dataset::from_manifest(&manifest, cfg.train.val_fraction, cfg.train.seed)?;
    if data.val_is_train {
        eprintln!("warning: no held-out images; validating on the training set");
    }
    let mut model = match &args.checkpoint {
        Some(p) => load_checkpoint(p)?.restore(Some(&cfg.model))?.0,
        None => Model::new(&cfg.model, cfg.train.seed)?,
    };
    println!(
        "{} train / {} val patches, {} parameters",
        data.train.len(),
        data.val.len(),
        model.param_count()
    );
    let report = train_observed(&mut model, &data, &cfg.train, Some(&files), &mut |r| {
        println!(
            "epoch {:>4}  loss {:.5}  val dice {:.4}  val mIoU {:.4}  lr {:.3e}",
            r.epoch, r.train_loss, r.val_dice, r.val_miou, r.lr
        );
    })?;
    if report.stopped_early {
        println!("early stop after {} epochs", report.history.len());
    }
    let k = label_classes(cfg.model.num_classes);
    let final_report = report.final_report.with_class_names(default_class_names(k))?;
    println!("\nfinal validation metrics");
    print!("{}", final_report.to_table());
    println!(
        "final val dice {:.4}; best {:.4} at epoch {} -> {}",
        final_report.headline_dice(),
        report.best_dice,
        report.best_epoch,
        files.best_checkpoint.display()
    );
    write_report(&final_report, &args.out, "val_metrics")?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: &EvalArgs) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let manifest = open_manifest(&args.manifest)?;
    let channels = ckpt.config.num_classes;
    if let Some(c) = args.classes {
        if label_classes(c) != label_classes(channels) {
            return Err(Error::Config(format!(
                "class-count mismatch: --classes {c} but the checkpoint predicts {} classes",
                label_classes(channels)
            )));
        }
    }
    check_classes(channels, manifest.encoding)?;
    let (model, _) = ckpt.restore::<f32>(None)?;
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| args.split.matches(e.split))
        .collect();
    if entries.is_empty() {
        return Err(Error::data(
            &args.manifest,
            format!("manifest has no {} entries", args.split.name()),
        ));
    }
    let size = model.config().input_size;
    let per_image: Vec<Vec<_>> = entries
        .par_iter()
        .map(|e| data::to_patches(&load_sample(&manifest, e)?, size))
        .collect::<Result<_>>()?;
    let samples: Vec<_> = per_image.into_iter().flatten().collect();
    let bs = args
        .batch_size
        .unwrap_or_else(|| default_batch_size(size[0], size[1]));
    let report = evaluate(&model, &samples, bs)?
        .with_class_names(default_class_names(label_classes(channels)))?;
    println!(
        "{} images ({} patches) from the {} split",
        entries.len(),
        samples.len(),
        args.split.name()
    );
    print!("{}", report.to_table());
    if let Some(dir) = &args.out {
        write_report(&report, dir, "metrics")?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(args: &PredictArgs) -> Result<ExitCode> {
    let (model, _) = load_checkpoint(&args.checkpoint)?.restore::<f32>(None)?;
    let mut inputs = args.images.clone();
    if let Some(path) = &args.manifest {
        let manifest = open_manifest(path)?;
        inputs.extend(
            manifest
                .entries
                .iter()
                .filter(|e| args.split.matches(e.split))
                .map(|e| manifest.resolve(&e.image_path)),
        );
    }
    if inputs.is_empty() {
        return Err(Error::invalid("no input images given"));
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut written = 0usize;
    for path in &inputs {
        let img = match read_rgb(path) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("warning: skipping {e}");
                continue;
            }
        };
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("image{written}"));
        let pred = predict_image(&model, &img)?;
        let files = export(&img, &pred, &args.out, &stem)?;
        println!("{} -> {}", path.display(), files.mask.display());
        written += 1;
    }
    if written == 0 {
        eprintln!("error: none of the {} input images could be read", inputs.len());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let results = run_suite(&SuiteOptions {
        probes: args.probes,
        seed: args.seed,
        fault: args.inject_fault.clone(),
    });
    print!("{}", render(&results));
    Ok(if results.iter().all(|r| r.passed()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_synth(args: &SynthArgs) -> Result<ExitCode> {
    let spec = SynthSpec {
        test_fraction: args.test_fraction,
        ..SynthSpec::new(args.count, args.patch_size, args.classes, args.seed)
    };
    let (_, path) = synth_dataset(&args.out, &spec)?;
    println!("{}", path.display());
    Ok(ExitCode::SUCCESS)
}

pub fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::SynthData(a) => cmd_synth(a),
    }
}

/// Parses `std::env::args`, runs the command and maps errors to exit 1.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
