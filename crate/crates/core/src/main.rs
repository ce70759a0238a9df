//! Command-line surface: dataset synthesis, training, evaluation,
//! prediction, and the gradient verification suite.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cunet::data;
use cunet::gradcheck;
use cunet::metrics::UndefinedPolicy;
use cunet::model::CuNet;
use cunet::tensor::ParamSet;
use cunet::train::{self, FileConfig};
use cunet::{Error, Result};

#[derive(Parser)]
#[command(name = "cunet", version, about = "Cascaded U-Net segmentation with loss-weighted sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset split into train/val/test.
    Synth(SynthArgs),
    /// Train a model on a synthesized dataset directory.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint over one dataset split and write reports.
    Eval(EvalArgs),
    /// Predict one case file and render the segmentation overlay.
    Predict(PredictArgs),
    /// Run the finite-difference gradient verification suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<FileConfig> {
        match &self.config {
            Some(path) => FileConfig::load(path),
            None => Ok(FileConfig::default()),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output dataset directory (train/, val/, test/ are created inside).
    #[arg(long)]
    out: PathBuf,
    /// Number of cases to generate.
    #[arg(long)]
    count: Option<usize>,
    /// Square slice size in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Probability that a case carries a tumor.
    #[arg(long)]
    q_tumor: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, history, and effective config.
    #[arg(long)]
    out: PathBuf,

    // Model overrides.
    #[arg(long)]
    in_channels: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    /// Weight initialization seed.
    #[arg(long)]
    model_seed: Option<u64>,

    // Training overrides.
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lr_floor: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    lr_period: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    omega0: Option<f64>,
    #[arg(long)]
    omega_floor: Option<f64>,
    #[arg(long)]
    omega_decay: Option<f64>,
    #[arg(long)]
    omega_period: Option<usize>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    contour_width: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Shuffle/augmentation/sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Move the L2 term into the loss instead of the optimizer.
    #[arg(long)]
    l2_in_loss: bool,

    // Per-stage sampling probability overrides.
    #[arg(long)]
    unet1_p1: Option<f64>,
    #[arg(long)]
    unet1_p2: Option<f64>,
    #[arg(long)]
    unet1_p3: Option<f64>,
    #[arg(long)]
    unet1_p4: Option<f64>,
    #[arg(long)]
    unet2_p1: Option<f64>,
    #[arg(long)]
    unet2_p2: Option<f64>,
    #[arg(long)]
    unet2_p3: Option<f64>,
    #[arg(long)]
    unet2_p4: Option<f64>,
}

impl TrainArgs {
    fn effective_config(&self) -> Result<FileConfig> {
        let mut cfg = self.config.load()?;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(cfg.model.in_channels, self.in_channels);
        set!(cfg.model.base_channels, self.base_channels);
        set!(cfg.model.depth, self.depth);
        set!(cfg.model.seed, self.model_seed);
        set!(cfg.train.lr0, self.lr0);
        set!(cfg.train.lr_floor, self.lr_floor);
        set!(cfg.train.lr_decay, self.lr_decay);
        set!(cfg.train.lr_period, self.lr_period);
        set!(cfg.train.momentum, self.momentum);
        set!(cfg.train.weight_decay, self.weight_decay);
        set!(cfg.train.omega0, self.omega0);
        set!(cfg.train.omega_floor, self.omega_floor);
        set!(cfg.train.omega_decay, self.omega_decay);
        set!(cfg.train.omega_period, self.omega_period);
        set!(cfg.train.alpha1, self.alpha1);
        set!(cfg.train.alpha2, self.alpha2);
        set!(cfg.train.beta, self.beta);
        set!(cfg.train.contour_width, self.contour_width);
        set!(cfg.train.batch_size, self.batch_size);
        set!(cfg.train.max_epochs, self.max_epochs);
        set!(cfg.train.patience, self.patience);
        set!(cfg.train.seed, self.seed);
        if self.l2_in_loss {
            cfg.train.l2_in_loss = true;
        }
        for (dst, src) in [
            (&mut cfg.train.unet1_probs.p1, self.unet1_p1),
            (&mut cfg.train.unet1_probs.p2, self.unet1_p2),
            (&mut cfg.train.unet1_probs.p3, self.unet1_p3),
            (&mut cfg.train.unet1_probs.p4, self.unet1_p4),
            (&mut cfg.train.unet2_probs.p1, self.unet2_p1),
            (&mut cfg.train.unet2_probs.p2, self.unet2_p2),
            (&mut cfg.train.unet2_probs.p3, self.unet2_p3),
            (&mut cfg.train.unet2_probs.p4, self.unet2_p4),
        ] {
            if src.is_some() {
                *dst = src;
            }
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Report path prefix; writes PREFIX.csv and PREFIX.json.
    #[arg(long)]
    report: PathBuf,
    /// Which split directory to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
    /// Score undefined per-case metrics as zero instead of excluding them
    /// from means.
    #[arg(long)]
    undefined_as_zero: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// One `.cuns` case file.
    #[arg(long)]
    case: PathBuf,
    /// Output overlay image (binary PPM).
    #[arg(long)]
    out: PathBuf,
    /// Optional raw label map output (binary PGM, labels as pixel values).
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random seeds per case.
    #[arg(long, default_value_t = 50)]
    seeds: usize,
}

fn load_model(config: &FileConfig, checkpoint: &Path) -> Result<CuNet> {
    let mut model = CuNet::new(config.model.clone())?;
    let params = ParamSet::load(checkpoint)?;
    model.set_params(params)?;
    Ok(model)
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(v) = args.count {
        cfg.data.count = v;
    }
    if let Some(v) = args.size {
        cfg.data.size = v;
    }
    if let Some(v) = args.seed {
        cfg.data.seed = v;
    }
    if let Some(v) = args.q_tumor {
        cfg.data.q_tumor = v;
    }
    let split = data::synthesize_to_dir(&args.out, cfg.data.count, cfg.data.size, cfg.data.seed, cfg.data.q_tumor)?;
    println!(
        "wrote {} cases to {} (train {}, val {}, test {})",
        cfg.data.count,
        args.out.display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.effective_config()?;
    let train_set = data::read_dataset(args.data.join("train"))?;
    let val_dir = args.data.join("val");
    let val_set = if val_dir.is_dir() { data::read_dataset(&val_dir)? } else { Vec::new() };

    let mut model = CuNet::new(cfg.model.clone())?;
    let outcome = train::train(&mut model, &train_set, &val_set, &cfg.train)?;

    std::fs::create_dir_all(&args.out)?;
    model.params().save(args.out.join("model.cun1"))?;
    std::fs::write(
        args.out.join("history.json"),
        serde_json::to_string_pretty(&outcome).expect("outcome serializes"),
    )?;
    std::fs::write(args.out.join("config.toml"), cfg.to_toml())?;

    let best = &outcome.state;
    println!(
        "trained {} epochs ({} steps); best val loss {:.5} at epoch {}{}",
        best.history.len(),
        outcome.steps,
        best.best_val_loss,
        best.best_epoch,
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    println!("checkpoint: {}", args.out.join("model.cun1").display());
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let model = load_model(&cfg, &args.checkpoint)?;
    let split_dir = args.data.join(&args.split);
    let samples = data::read_dataset(&split_dir)?;
    let policy = if args.undefined_as_zero { UndefinedPolicy::CountAsZero } else { UndefinedPolicy::Exclude };
    let report = train::evaluate(&model, &samples, policy)?;

    let csv_path = args.report.with_extension("csv");
    let json_path = args.report.with_extension("json");
    report.write_csv(&csv_path)?;
    report.write_json(&json_path)?;
    println!("evaluated {} cases from {}", report.cases.len(), split_dir.display());
    for region in cunet::metrics::REGION_NAMES {
        let fmt = |m: Option<f64>| m.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undef".into());
        println!(
            "  {}: dice {} sens {} spec {}",
            region,
            fmt(report.mean(region, "dice")),
            fmt(report.mean(region, "sens")),
            fmt(report.mean(region, "spec"))
        );
    }
    println!("reports: {} {}", csv_path.display(), json_path.display());
    Ok(())
}

fn run_predict(args: &PredictArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let model = load_model(&cfg, &args.checkpoint)?;
    let buf = std::fs::read(&args.case)?;
    let sample = data::sample_from_bytes(&buf)?;
    let labels = train::predict(&model, &sample)?;
    train::render_overlay(&sample, &labels, &args.out)?;
    if let Some(path) = &args.labels_out {
        let mut pgm = format!("P5\n{} {}\n255\n", sample.width, sample.height).into_bytes();
        pgm.extend_from_slice(labels.data());
        std::fs::write(path, pgm)?;
    }
    let tumor = labels.tumor_mask().count();
    println!("predicted {}: {} tumor pixels; overlay {}", sample.id, tumor, args.out.display());
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let reports = gradcheck::run_suite(args.seeds)?;
    let mut ok = true;
    for r in &reports {
        println!(
            "{:28} seeds {:4} max rel err {:.3e}  {}",
            r.name,
            r.seeds,
            r.max_rel_err,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        ok &= r.passed();
    }
    let phantom_err = gradcheck::run_suite_on_phantom(0)?;
    let phantom_ok = phantom_err <= gradcheck::FD_TOLERANCE;
    println!(
        "{:28} seeds    1 max rel err {:.3e}  {}",
        "phantom_loss/input",
        phantom_err,
        if phantom_ok { "PASS" } else { "FAIL" }
    );
    ok &= phantom_ok;
    if !ok {
        return Err(Error::Numeric("gradient suite exceeded tolerance".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Predict(args) => run_predict(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
