//! Command-line driver: train the three phases, evaluate, grade single
//! images, score confusion matrices, and generate synthetic data.

use clap::{Args, Parser, Subcommand};
use msedense::data::{
    cap_class, load_dataset, load_image, resize_normalize, save_dataset, split, synth_generate,
    Dataset,
};
use msedense::metrics::{report, ConfusionMatrix};
use msedense::nn::{build_fusion_mlp, build_sedensenet, HeadKind};
use msedense::pipeline::{
    evaluate, load_backbone, load_fusion, predict, train_fusion_phase, train_multitask,
    train_phase, EpochRecord, FusionModel, PhaseName, PipelineConfig, PipelineError, Profile,
    CONFIG_KEYS,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "msedense",
    version,
    about = "Multitask squeeze-excitation DenseNet for five-stage severity grading"
)]
struct Cli {
    /// Key=value config file layered over the profile defaults
    /// (run `msedense config-keys` for the full key list).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for weights, splits, shuffles, and augmentation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Built-in defaults: `desk` (32x32, minutes on a CPU) or `paper`
    /// (299x299 full scale).
    #[arg(long, global = true, default_value = "desk")]
    profile: Profile,
    /// Run all work on one thread so results are identical everywhere.
    #[arg(long, global = true)]
    strict_determinism: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classification backbone (phase 1).
    TrainCls(TrainArgs),
    /// Train the regression backbone (phase 2).
    TrainReg(TrainArgs),
    /// Train the fusion MLP over two frozen backbone checkpoints (phase 3).
    TrainFusion(TrainFusionArgs),
    /// Run all three phases and evaluate the fused model.
    TrainAll(TrainArgs),
    /// Evaluate a trained model directory on a whole dataset.
    Evaluate(EvaluateArgs),
    /// Grade one image with a trained model directory.
    Predict(PredictArgs),
    /// Score a confusion-matrix CSV (rows = actual) and print the report.
    Metrics(MetricsArgs),
    /// Write the synthetic ordinal dataset to disk as labels.csv + PNGs.
    SynthData(SynthArgs),
    /// List every config key with its meaning.
    ConfigKeys,
}

/// Where samples come from: a labeled image directory or the synthetic
/// generator.
#[derive(Args)]
struct DataArgs {
    /// Image directory; requires --labels.
    #[arg(long, requires = "labels")]
    data: Option<PathBuf>,
    /// Labels CSV with header `id_code,diagnosis`.
    #[arg(long, requires = "data")]
    labels: Option<PathBuf>,
    /// Generate this many synthetic samples per class instead of loading.
    #[arg(long, value_name = "N", conflicts_with_all = ["data", "labels"])]
    synth: Option<usize>,
    /// Cap one class before splitting, e.g. `--cap-class 0:10000`.
    #[arg(long, value_name = "CLASS:CAP")]
    cap_class: Vec<CapClass>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainFusionArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Trained classification backbone checkpoint.
    #[arg(long)]
    cls: PathBuf,
    /// Trained regression backbone checkpoint.
    #[arg(long)]
    reg: PathBuf,
    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Directory holding cls.ckpt, reg.ckpt, and fusion.ckpt.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory holding cls.ckpt, reg.ckpt, and fusion.ckpt.
    #[arg(long)]
    model: PathBuf,
    /// 8-bit RGB image (PNG or PPM) at any size.
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    /// N x N integer CSV of counts, rows = actual class.
    #[arg(long)]
    cm: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Samples per class.
    #[arg(long, default_value_t = 40)]
    per_class: usize,
}

/// `class:cap` pair for `--cap-class`.
#[derive(Clone, Debug)]
struct CapClass {
    class: usize,
    cap: usize,
}

impl FromStr for CapClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (class, cap) = s
            .split_once(':')
            .ok_or_else(|| format!("expected CLASS:CAP, got `{s}`"))?;
        Ok(Self {
            class: class
                .trim()
                .parse()
                .map_err(|_| format!("bad class in `{s}`"))?,
            cap: cap.trim().parse().map_err(|_| format!("bad cap in `{s}`"))?,
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    if cli.strict_determinism {
        msedense::parallel::set_sequential(true);
    }
    let mut cfg = match cli.profile {
        Profile::Desk => PipelineConfig::desk(),
        Profile::Paper => PipelineConfig::paper(),
    };
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        cfg.apply(&text)?;
    }
    cfg.validate()?;
    let seed = cli.seed;

    match &cli.command {
        Command::TrainCls(args) => train_backbone(&cfg, args, seed, PhaseName::Classification),
        Command::TrainReg(args) => train_backbone(&cfg, args, seed, PhaseName::Regression),
        Command::TrainFusion(args) => train_fusion(&cfg, args, seed),
        Command::TrainAll(args) => train_all(&cfg, args, seed),
        Command::Evaluate(args) => run_evaluate(&cfg, args, seed),
        Command::Predict(args) => run_predict(args),
        Command::Metrics(args) => run_metrics(args),
        Command::SynthData(args) => run_synth(&cfg, args, seed),
        Command::ConfigKeys => {
            for (key, doc) in CONFIG_KEYS {
                println!("{key:<22} {doc}");
            }
            Ok(())
        }
    }
}

/// Load or generate the dataset, cap requested classes, and resize real
/// images to the configured input size.
fn load_full(args: &DataArgs, cfg: &PipelineConfig, seed: u64) -> Result<Dataset, Box<dyn std::error::Error>> {
    let mut full = match (&args.synth, &args.data, &args.labels) {
        (Some(n), _, _) => synth_generate(*n, cfg.image_size, seed)?,
        (None, Some(dir), Some(labels)) => {
            let raw = load_dataset(dir, labels)?;
            let resized = raw
                .samples
                .iter()
                .map(|s| resize_normalize(s, (cfg.image_size, cfg.image_size)))
                .collect::<Result<Vec<_>, _>>()?;
            Dataset::new(resized)
        }
        _ => return Err("provide either --synth N or both --data and --labels".into()),
    };
    for c in &args.cap_class {
        full = cap_class(full, c.class, c.cap, seed);
    }
    Ok(full)
}

fn load_split(
    args: &DataArgs,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(Dataset, Dataset), Box<dyn std::error::Error>> {
    let full = load_full(args, cfg, seed)?;
    Ok(split(full, cfg.train_fraction, seed)?)
}

/// Per-epoch progress line on stderr; stdout stays machine-readable.
fn progress(phase: PhaseName, r: &EpochRecord) {
    let mark = if r.improved { " *" } else { "" };
    eprintln!(
        "[{}] epoch {:>3}  lr {:<8}  train_loss {:<9.4} val_loss {:<9.4} val_metric {:.4}{mark}",
        phase.as_str(),
        r.epoch,
        r.lr,
        r.train_loss,
        r.val_loss,
        r.val_metric
    );
}

fn train_backbone(
    cfg: &PipelineConfig,
    args: &TrainArgs,
    seed: u64,
    name: PhaseName,
) -> Result<(), Box<dyn std::error::Error>> {
    let (train, val) = load_split(&args.data, cfg, seed)?;
    let (head, file) = match name {
        PhaseName::Classification => (HeadKind::Classification, "cls.ckpt"),
        PhaseName::Regression => (HeadKind::Regression, "reg.ckpt"),
        PhaseName::Fusion => unreachable!("fusion has its own entry point"),
    };
    let mut net = build_sedensenet::<f32>(&cfg.spec(head), seed)?;
    let phase = cfg.phase(name, seed);
    std::fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join(file);
    let history = train_phase(
        &mut net,
        &train,
        &val,
        &phase,
        seed,
        Some(&ckpt),
        &mut progress,
    )?;
    println!(
        "{} done: best val_metric {:.4} at epoch {} -> {}",
        name.as_str(),
        history.best_metric,
        history.best_epoch,
        ckpt.display()
    );
    Ok(())
}

fn train_fusion(
    cfg: &PipelineConfig,
    args: &TrainFusionArgs,
    seed: u64,
) -> Result<(), Box<dyn std::error::Error>> {
    let (train, val) = load_split(&args.data, cfg, seed)?;
    let (cls, _, _) = load_backbone(&args.cls)?;
    let (reg, _, _) = load_backbone(&args.reg)?;
    let mut fusion = build_fusion_mlp::<f32>(
        cls.spec.feature_dim(),
        reg.spec.feature_dim(),
        cfg.num_classes,
        seed,
    );
    let phase = cfg.phase(PhaseName::Fusion, seed);
    std::fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("fusion.ckpt");
    let history = train_fusion_phase(
        &mut fusion,
        &cls,
        &reg,
        &train,
        &val,
        &phase,
        seed,
        Some(&ckpt),
        &mut progress,
    )?;
    println!(
        "fusion done: best val_metric {:.4} at epoch {} -> {}",
        history.best_metric,
        history.best_epoch,
        ckpt.display()
    );
    Ok(())
}

fn train_all(
    cfg: &PipelineConfig,
    args: &TrainArgs,
    seed: u64,
) -> Result<(), Box<dyn std::error::Error>> {
    let (train, val) = load_split(&args.data, cfg, seed)?;
    std::fs::create_dir_all(&args.out)?;
    let outcome = train_multitask(cfg, &train, &val, seed, Some(&args.out), &mut progress)?;
    println!(
        "phases done: cls {:.4} (epoch {}), reg mse {:.4} (epoch {}), fusion {:.4} (epoch {})",
        outcome.cls.best_metric,
        outcome.cls.best_epoch,
        outcome.reg.best_metric,
        outcome.reg.best_epoch,
        outcome.fusion.best_metric,
        outcome.fusion.best_epoch
    );
    print_confusion(&outcome.confusion);
    println!("{}", outcome.report);
    println!("{}", outcome.report.to_json_lines());
    Ok(())
}

fn load_model(dir: &Path) -> Result<FusionModel, PipelineError> {
    let (cls, _, _) = load_backbone(&dir.join("cls.ckpt"))?;
    let (reg, _, _) = load_backbone(&dir.join("reg.ckpt"))?;
    let (fusion, _, _) = load_fusion(&dir.join("fusion.ckpt"))?;
    let model = FusionModel { cls, reg, fusion };
    model.validate()?;
    Ok(model)
}

fn run_evaluate(
    cfg: &PipelineConfig,
    args: &EvaluateArgs,
    seed: u64,
) -> Result<(), Box<dyn std::error::Error>> {
    let model = load_model(&args.model)?;
    let data = load_full(&args.data, cfg, seed)?;
    let (cm, rep) = evaluate(&model, &data, cfg.batch_size)?;
    print_confusion(&cm);
    println!("{rep}");
    println!("{}", rep.to_json_lines());
    Ok(())
}

fn run_predict(args: &PredictArgs) -> Result<(), Box<dyn std::error::Error>> {
    let model = load_model(&args.model)?;
    let (h, w, _) = model.cls.spec.input;
    let raw = load_image(&args.image)?;
    let sample = msedense::data::LabeledSample {
        id: args.image.display().to_string(),
        image: raw,
        stage: 0,
    };
    let canonical = resize_normalize(&sample, (h, w))?;
    let p = predict(&model, &canonical.image)?;
    println!("stage {}  severity {:.4}", p.stage, p.severity);
    let probs: Vec<String> = p.probs.iter().map(|v| format!("{v:.4}")).collect();
    println!("probs {}", probs.join(" "));
    println!(
        "{}",
        serde_json::json!({
            "stage": p.stage,
            "severity": p.severity,
            "probs": p.probs,
        })
    );
    Ok(())
}

fn run_metrics(args: &MetricsArgs) -> Result<(), Box<dyn std::error::Error>> {
    let cm = ConfusionMatrix::from_csv_path(&args.cm)?;
    let rep = report(&cm)?;
    print_confusion(&cm);
    println!("{rep}");
    println!("{}", rep.to_json_lines());
    Ok(())
}

fn run_synth(
    cfg: &PipelineConfig,
    args: &SynthArgs,
    seed: u64,
) -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_generate(args.per_class, cfg.image_size, seed)?;
    save_dataset(&data, &args.out)?;
    println!(
        "wrote {} samples ({} per class, {}x{}) to {}",
        data.len(),
        args.per_class,
        cfg.image_size,
        cfg.image_size,
        args.out.display()
    );
    Ok(())
}

fn print_confusion(cm: &ConfusionMatrix) {
    let k = cm.num_classes();
    print!("{:>12}", "actual\\pred");
    for j in 0..k {
        print!("{j:>8}");
    }
    println!();
    for i in 0..k {
        print!("{i:>12}");
        for j in 0..k {
            print!("{:>8}", cm.count(i, j));
        }
        println!();
    }
}
