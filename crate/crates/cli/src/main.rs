use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mutr_core::analyzer::{render_report, CostReport, ReportFormat};
use mutr_core::data::{gen_synthetic, load_image, save_mask, threshold_logits, Dataset, DatasetMeta, MetricsReport};
use mutr_core::gradcheck::{block_suite, model_gradcheck, GradcheckOptions, Stencil, SuiteRow};
use mutr_core::model::{build_model, load_checkpoint, Checkpoint, LoadOptions, ModelConfig};
use mutr_core::train::{evaluate, train, AdamWParams, ScheduleSpec, TrainOptions};
use mutr_core::Error;

/// Exit status 2: bad flags, config or format. Exit status 1: anything that fails while running.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::ConfigMismatch { .. } | Error::UnknownFormat(_) | Error::Argument { .. } => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "mutr", version, about = "MobileUNETR toolkit: cost analysis, synthetic data, training, evaluation")]
#[command(after_help = "MUTR_THREADS caps the worker threads (default: all cores).")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameter and multiply-accumulate report
    Analyze(AnalyzeArgs),
    /// Write a synthetic lesion dataset (images/NNNN.ppm, masks/NNNN.pgm, meta.json)
    GenData(GenDataArgs),
    /// Train with AdamW and linear warmup + cosine decay
    Train(TrainArgs),
    /// Segmentation metrics of a checkpoint on a dataset
    Eval(EvalArgs),
    /// Predict binary masks (.pgm) for .ppm images
    Infer(InferArgs),
    /// Compare analytic gradients with finite differences
    Gradcheck(GradcheckArgs),
}

const CONFIG_HELP: &str = "Model config: a JSON file, or `reference` / `tiny` for the bundled ones";

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, default_value = "reference", help = CONFIG_HELP)]
    config: String,
    /// Square input side [default: the config's image_size]
    #[arg(long)]
    resolution: Option<usize>,
    /// Report at 256 and 512 and pick the one nearest 1.3 GMACs
    #[arg(long, conflicts_with = "resolution")]
    calibrate: bool,
    /// table, json or csv
    #[arg(long, default_value = "table", value_parser = parse_format)]
    format: ReportFormat,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Draw hair-like strokes over the images
    #[arg(long)]
    hair: bool,
    /// Config the size is checked against (warning only)
    #[arg(long, default_value = "reference")]
    config: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, help = CONFIG_HELP)]
    config: String,
    /// Dataset directory written by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Receives train_log.jsonl, train_meta.json and checkpoints
    #[arg(long)]
    out: PathBuf,
    /// Seeds initialization, shuffling and augmentation
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total epochs, warmup included
    #[arg(long, default_value_t = 440)]
    epochs: usize,
    /// Warmup epochs [default: 40, or the 40/440 share of --epochs]
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long, default_value_t = 4e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    min_lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// Leading share of samples used for training; the rest validate
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Numbered checkpoint every N epochs (0 disables)
    #[arg(long, default_value_t = 50)]
    checkpoint_every: usize,
    /// Disable random flips
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct LoadArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Expected config; a checkpoint saved with a different one is rejected
    #[arg(long)]
    config: Option<String>,
    /// Accept a differing stored config when every tensor fits --config
    #[arg(long, requires = "config")]
    allow_config_override: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    load: LoadArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, value_enum, default_value = "table")]
    format: MetricsFormat,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    load: LoadArgs,
    /// A .ppm image or a directory of them
    #[arg(long)]
    input: PathBuf,
    /// Masks are written here as <name>.pgm
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "block")]
    scope: Scope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Config for --scope model
    #[arg(long, default_value = "tiny")]
    config: String,
    /// Input side for --scope model
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Batch for --scope model
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Components sampled for --scope model (0 checks all)
    #[arg(long, default_value_t = 200)]
    components: usize,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-3)]
    h: f64,
    #[arg(long, value_enum, default_value = "five-point")]
    stencil: StencilArg,
    #[arg(long, hide = true)]
    inject_sign_flip: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricsFormat {
    Table,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Block,
    Model,
}

#[derive(Clone, Copy, ValueEnum)]
enum StencilArg {
    ThreePoint,
    FivePoint,
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(spec: &str) -> Result<ModelConfig, Failure> {
    match spec {
        "reference" => Ok(ModelConfig::reference()),
        "tiny" => Ok(ModelConfig::tiny()),
        path => ModelConfig::load(Path::new(path)).map_err(|e| Failure::Usage(e.to_string())),
    }
}

fn load_model(args: &LoadArgs) -> Result<Checkpoint, Failure> {
    let expected = args.config.as_deref().map(load_config).transpose()?;
    let opts = LoadOptions {
        expected: expected.as_ref(),
        allow_config_override: args.allow_config_override,
    };
    Ok(load_checkpoint(&args.checkpoint, &opts)?)
}

fn write_output(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Runtime(format!("writing {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn analyze(a: AnalyzeArgs) -> Outcome {
    let cfg = load_config(&a.config)?;
    let model = build_model(&cfg, 0)?;
    if !a.calibrate {
        let report = model.cost_report(a.resolution.unwrap_or(cfg.image_size))?;
        return write_output(a.out.as_deref(), &render_report(&report, a.format));
    }
    let reports = [256, 512]
        .into_iter()
        .map(|r| model.cost_report(r))
        .collect::<Result<Vec<CostReport>, _>>()?;
    let calib = reports
        .iter()
        .min_by(|x, y| (x.gmacs() - 1.3).abs().total_cmp(&(y.gmacs() - 1.3).abs()))
        .expect("two reports");
    let text = match a.format {
        ReportFormat::Json => {
            let v = serde_json::json!({ "calibration_resolution": calib.resolution, "reports": reports });
            serde_json::to_string_pretty(&v).expect("report serializes") + "\n"
        }
        ReportFormat::Csv => return Err(Failure::Usage("--calibrate supports table and json output".into())),
        ReportFormat::Table => {
            let mut s = String::new();
            for r in &reports {
                s += &render_report(r, ReportFormat::Table);
                s.push('\n');
            }
            s + &format!(
                "calibration resolution {} ({:.3} GMACs, nearest 1.3)\n",
                calib.resolution,
                calib.gmacs()
            )
        }
    };
    write_output(a.out.as_deref(), &text)
}

fn gen_data(a: GenDataArgs) -> Outcome {
    if a.count == 0 || a.size == 0 {
        return Err(Failure::Usage("--count and --size must be positive".into()));
    }
    let cfg = load_config(&a.config)?;
    if let Err(e) = cfg.check_resolution(a.size) {
        eprintln!("warning: size {} does not fit config `{}`: {e}", a.size, a.config);
    }
    let data = gen_synthetic(a.count, a.size, a.seed, a.hair);
    let meta = DatasetMeta {
        count: a.count,
        size: a.size,
        seed: a.seed,
        hair_artifacts: a.hair,
    };
    data.write_dir(&a.out, &meta)?;
    println!("wrote {} samples of {s}x{s} to {}", a.count, a.out.display(), s = a.size);
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let cfg = load_config(&a.config)?;
    let schedule = ScheduleSpec {
        base_lr: a.lr,
        min_lr: a.min_lr,
        warmup_epochs: a.warmup.unwrap_or(ScheduleSpec::scaled_to(a.epochs).warmup_epochs),
        total_epochs: a.epochs as f64,
    };
    schedule.validate()?;
    if !(0.0..=1.0).contains(&a.train_fraction) {
        return Err(Failure::Usage("--train-fraction must lie in [0, 1]".into()));
    }
    let (data, _) = Dataset::load_dir(&a.data)?;
    let (train_set, val) = data.split(a.train_fraction);
    let mut model = build_model(&cfg, a.seed)?;
    let opts = TrainOptions {
        schedule,
        batch_size: a.batch_size,
        seed: a.seed,
        adamw: AdamWParams {
            weight_decay: a.weight_decay,
            base_lr: a.lr,
            ..AdamWParams::default()
        },
        augment: !a.no_augment,
        checkpoint_every: a.checkpoint_every,
        out_dir: Some(a.out.clone()),
    };
    eprintln!(
        "training {} params on {} samples, validating on {}",
        model.num_parameters(),
        train_set.len(),
        if val.is_empty() { "the training set".to_string() } else { format!("{} samples", val.len()) }
    );
    let outcome = train(&mut model, &train_set, &val, &opts, |e| {
        eprintln!(
            "epoch {:4}/{} lr {:.3e} loss {:.4} val IoU {:.4} Dice {:.4} ({:.1}s)",
            e.epoch, a.epochs, e.lr, e.train_loss, e.val_iou, e.val_dice, e.seconds
        );
    })?;
    println!(
        "best val Dice {:.4} at epoch {}; log and checkpoints in {}",
        outcome.best_dice,
        outcome.best_epoch,
        a.out.display()
    );
    Ok(())
}

fn print_metrics(m: &MetricsReport, format: MetricsFormat) {
    match format {
        MetricsFormat::Json => println!("{}", serde_json::to_string_pretty(m).expect("metrics serialize")),
        MetricsFormat::Table => {
            for (name, v) in [("SE", m.se), ("SP", m.sp), ("ACC", m.acc), ("IoU", m.iou), ("Dice", m.dice)] {
                println!("{name:<5} {v:.4}  ({:.2}%)", 100.0 * v);
            }
            let c = &m.confusion;
            println!("TP {}  FP {}  TN {}  FN {}", c.tp, c.fp, c.tn, c.fn_);
        }
    }
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let ck = load_model(&a.load)?;
    let (data, _) = Dataset::load_dir(&a.data)?;
    if data.is_empty() {
        return Err(Failure::Usage(format!("dataset {} is empty", a.data.display())));
    }
    let m = evaluate(&ck.model, &data, a.batch_size)?;
    print_metrics(&m, a.format);
    Ok(())
}

fn infer_cmd(a: InferArgs) -> Outcome {
    let ck = load_model(&a.load)?;
    if ck.model.config().out_channels != 1 {
        return Err(Failure::Usage("infer needs a model with a single output channel".into()));
    }
    let inputs: Vec<PathBuf> = if a.input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&a.input)
            .map_err(|e| Failure::Runtime(format!("reading {}: {e}", a.input.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        v.sort();
        v
    } else {
        vec![a.input.clone()]
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(format!("creating {}: {e}", a.out.display())))?;
    for path in inputs {
        let image = load_image(&path)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let x = image.reshape(&[1, 3, h, w])?;
        let mask = threshold_logits(&ck.model.predict(&x)?).reshape(&[1, h, w])?;
        let name = path.file_stem().map_or("mask".into(), |s| s.to_string_lossy().into_owned());
        let dst = a.out.join(format!("{name}.pgm"));
        save_mask(&mask, &dst)?;
        println!("{}", dst.display());
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Outcome {
    let opts = GradcheckOptions {
        h: a.h,
        stencil: match a.stencil {
            StencilArg::ThreePoint => Stencil::ThreePoint,
            StencilArg::FivePoint => Stencil::FivePoint,
        },
        max_components: None,
        seed: a.seed,
        inject_sign_flip: a.inject_sign_flip,
    };
    let rows: Vec<SuiteRow> = match a.scope {
        Scope::Block => block_suite(a.seed, &opts)?,
        Scope::Model => {
            let cfg = load_config(&a.config)?;
            cfg.check_resolution(a.size).map_err(|e| Failure::Usage(e.to_string()))?;
            let opts = GradcheckOptions {
                max_components: (a.components > 0).then_some(a.components),
                ..opts
            };
            vec![model_gradcheck(&cfg, a.size, a.batch, a.seed, &opts)?]
        }
    };
    println!("{:<12} {:<6} {:>11} {:>10}  result", "block", "norm", "max_rel_err", "tolerance");
    for r in &rows {
        println!(
            "{:<12} {:<6} {:>11.3e} {:>10.0e}  {}",
            r.name,
            if r.training { "batch" } else { "eval" },
            r.report.max_rel_err,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    match rows.iter().filter(|r| !r.passed()).count() {
        0 => Ok(()),
        n => Err(Failure::Runtime(format!("{n} of {} gradient checks failed", rows.len()))),
    }
}

fn run(cli: Cli) -> Outcome {
    if let Ok(v) = std::env::var("MUTR_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Usage(format!("MUTR_THREADS must be a positive integer, got `{v}`")))?;
        mutr_core::set_threads(n)?;
    }
    match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
