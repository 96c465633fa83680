//! `chanloc` command-line tool: train, evaluate, gradient-check and inspect
//! the plane / ALL-CNN / ResNet models with optional channel attention.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use chanloc::attention::ShapeRule;
use chanloc::checkpoint;
use chanloc::data::{load_cifar10, synthetic, AugmentConfig};
use chanloc::gradcheck::{format_report_table, run_suite, CheckOp, DEFAULT_TOL};
use chanloc::model::{build_model, ArchName, ArchSpec, AttentionKind};
use chanloc::train::{evaluate, train, L2Scope, RunRecorder, TrainConfig};
use chanloc::{Batch, Error, Network};
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;
const EXIT_NON_FINITE: u8 = 4;
const EXIT_INTERRUPTED: u8 = 130;

/// Synthetic test sets get this seed offset so they never repeat the training draw.
const SYNTHETIC_TEST_OFFSET: u64 = 0x7e57;

#[derive(Parser, Debug)]
#[command(name = "chanloc", version, about = "Channel-attention CNNs on CIFAR-10")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics.csv plus best.clkb.
    Train(TrainArgs),
    /// Report test accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Print the layer table and parameter counts.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Arch {
    Plane,
    Allcnn,
    Resnet,
}

impl From<Arch> for ArchName {
    fn from(a: Arch) -> Self {
        match a {
            Arch::Plane => ArchName::Plane,
            Arch::Allcnn => ArchName::AllCnn,
            Arch::Resnet => ArchName::ResNet,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Attn {
    None,
    Se,
    Clocal,
}

impl From<Attn> for AttentionKind {
    fn from(a: Attn) -> Self {
        match a {
            Attn::None => AttentionKind::None,
            Attn::Se => AttentionKind::Se,
            Attn::Clocal => AttentionKind::CLocal,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scope {
    Conv,
    ConvDense,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct DataSource {
    /// Directory with the CIFAR-10 binary batches.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Use N seeded synthetic images instead of CIFAR-10.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, value_enum)]
    arch: Arch,
    #[arg(long, value_enum)]
    attn: Attn,
    /// C-Local strand length is C / R.
    #[arg(long, default_value_t = 8)]
    strand_ratio: usize,
}

impl ModelArgs {
    fn spec(&self) -> ArchSpec {
        ArchSpec::new(self.arch.into(), self.attn.into()).with_shape_rule(ShapeRule::with_strand_ratio(self.strand_ratio))
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataSource,
    #[arg(long, default_value_t = 150)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.94)]
    decay: f64,
    #[arg(long, default_value_t = 2)]
    decay_every: usize,
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    /// Weights that receive the L2 penalty.
    #[arg(long, value_enum, default_value_t = Scope::Conv)]
    l2_scope: Scope,
    /// Disable flip and shift augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Output directory for metrics.csv and best.clkb.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataSource,
    /// Seed of the synthetic test draw (matches `train --seed`).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Operation name or `all`.
    #[arg(long, default_value = "all")]
    op: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to check, starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    model: ModelArgs,
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteLoss { .. } => EXIT_NON_FINITE,
            Error::Config(_) | Error::InvalidSpec(_) | Error::ChannelsNotDivisible { .. } => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var("CHANLOC_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| usage(format!("CHANLOC_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("thread pool: {e}")))
}

/// `(train, test)` for the chosen source.
fn load_data(src: &DataSource, seed: u64) -> Result<(Batch, Batch), Failure> {
    match (&src.data_dir, src.synthetic) {
        (Some(dir), _) => Ok(load_cifar10(dir)?),
        (None, Some(n)) => {
            if n == 0 {
                return Err(usage("--synthetic needs at least one image"));
            }
            let test_n = (n / 5).max(1);
            Ok((synthetic(n, seed)?, synthetic(test_n, seed.wrapping_add(SYNTHETIC_TEST_OFFSET))?))
        }
        (None, None) => Err(usage("one of --data-dir or --synthetic is required")),
    }
}

fn data_label(src: &DataSource) -> String {
    match (&src.data_dir, src.synthetic) {
        (Some(dir), _) => format!("data_dir={}", dir.display()),
        (None, Some(n)) => format!("synthetic={n}"),
        (None, None) => "data=none".into(),
    }
}

fn run_train(args: &TrainArgs) -> Outcome {
    let spec = args.model.spec();
    spec.validate()?;
    let cfg = TrainConfig {
        lr0: args.lr,
        decay: args.decay,
        decay_every: args.decay_every,
        epochs: args.epochs,
        l2: args.l2,
        l2_scope: match args.l2_scope {
            Scope::Conv => L2Scope::ConvWeights,
            Scope::ConvDense => L2Scope::ConvAndDense,
        },
        batch_size: args.batch_size,
        seed: args.seed,
        augment: if args.no_augment {
            AugmentConfig::off()
        } else {
            AugmentConfig::default()
        },
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let context = format!(
        "arch={} attn={} strand_ratio={} {} threads={}",
        spec.arch,
        spec.attention,
        spec.shape_rule.strand_ratio,
        data_label(&args.data),
        rayon::current_num_threads()
    );
    println!("config: {context} {cfg} out={}", args.out.display());

    let (train_set, test_set) = load_data(&args.data, args.seed)?;
    println!("data: {} train, {} test", train_set.len(), test_set.len());
    let mut model: Network = build_model(&spec, args.seed)?;

    fs::create_dir_all(&args.out).map_err(Error::from)?;
    let best = args.out.join("best.clkb");
    let csv = fs::File::create(args.out.join("metrics.csv")).map_err(Error::from)?;
    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = Arc::clone(&stop);
        // a second handler cannot be installed in the same process; training still works without one
        let _ = ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst));
    }
    let mut recorder = RunRecorder::new(csv, &cfg, &context, Some(&best))?.with_stop_flag(Arc::clone(&stop));

    let outcome = train(&mut model, &train_set, &test_set, &cfg, &mut ProgressRecorder(&mut recorder))?;
    if outcome.interrupted {
        let last = args.out.join("last.clkb");
        checkpoint::save(&model, &last)?;
        eprintln!("interrupted; saved {}", last.display());
        return Err(Failure {
            code: EXIT_INTERRUPTED,
            message: "training interrupted".into(),
        });
    }
    match recorder.best_accuracy() {
        Some(acc) => println!("best test accuracy {acc:.4}; checkpoint {}", best.display()),
        None => println!("no epochs run; no checkpoint written"),
    }
    Ok(())
}

/// Echoes each epoch to stdout before handing it to the recorder.
struct ProgressRecorder<'a, W: std::io::Write>(&'a mut RunRecorder<W>);

impl<W: std::io::Write> chanloc::train::TrainObserver<f32> for ProgressRecorder<'_, W> {
    fn on_epoch(&mut self, m: &chanloc::train::EpochMetrics, model: &Network) -> chanloc::Result<()> {
        println!(
            "epoch {:>3}  lr {:.6}  loss {:.4} (+l2 {:.4})  acc {:.4}  test loss {:.4}  test acc {:.4}  {:.1}s",
            m.epoch, m.lr, m.train_loss, m.l2_penalty, m.train_acc, m.test_loss, m.test_acc, m.seconds
        );
        self.0.on_epoch(m, model)
    }

    fn should_stop(&self) -> bool {
        chanloc::train::TrainObserver::<f32>::should_stop(&*self.0)
    }
}

/// Every architecture a checkpoint could have been written for.
fn candidate_specs() -> impl Iterator<Item = ArchSpec> {
    ArchName::ALL.into_iter().flat_map(|arch| {
        AttentionKind::ALL.into_iter().flat_map(move |attn| {
            (1..=16).map(move |r| ArchSpec::new(arch, attn).with_shape_rule(ShapeRule::with_strand_ratio(r)))
        })
    })
}

fn spec_for_checkpoint(path: &Path) -> Result<ArchSpec, Failure> {
    let fp = checkpoint::read_fingerprint(path)?;
    candidate_specs()
        .find(|s| s.validate().is_ok() && s.fingerprint() == fp)
        .ok_or_else(|| Failure {
            code: EXIT_DATA,
            message: format!("{}: fingerprint {fp:#018x} matches no known architecture", path.display()),
        })
}

fn run_eval(args: &EvalArgs) -> Outcome {
    let spec = spec_for_checkpoint(&args.checkpoint)?;
    println!(
        "config: checkpoint={} arch={} attn={} strand_ratio={} {} seed={} batch_size={}",
        args.checkpoint.display(),
        spec.arch,
        spec.attention,
        spec.shape_rule.strand_ratio,
        data_label(&args.data),
        args.seed,
        args.batch_size
    );
    if args.batch_size == 0 {
        return Err(usage("--batch-size must be at least 1"));
    }
    let mut model: Network = build_model(&spec, 0)?;
    checkpoint::load(&mut model, &args.checkpoint)?;
    let test_set = match (&args.data.data_dir, args.data.synthetic) {
        (None, Some(n)) if n > 0 => synthetic(n, args.seed.wrapping_add(SYNTHETIC_TEST_OFFSET))?,
        _ => load_data(&args.data, args.seed)?.1,
    };
    let (loss, acc) = evaluate(&model, &test_set, args.batch_size)?;
    println!("test loss {loss:.4}");
    println!("test accuracy {acc:.4} ({} images)", test_set.len());
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Outcome {
    println!("config: op={} seed={} seeds={} tol={:e}", args.op, args.seed, args.seeds, args.tol);
    let ops: Vec<CheckOp> = if args.op == "all" {
        CheckOp::ALL.to_vec()
    } else {
        let op = CheckOp::from_name(&args.op).ok_or_else(|| {
            let names: Vec<&str> = CheckOp::ALL.iter().map(|o| o.name()).collect();
            usage(format!("unknown op {:?}; expected all or one of {}", args.op, names.join(", ")))
        })?;
        vec![op]
    };
    if args.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let seeds: Vec<u64> = (0..args.seeds).map(|i| args.seed.wrapping_add(i)).collect();
    let reports = run_suite(&ops, &seeds, args.tol);
    print!("{}", format_report_table(&reports));
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure {
            code: EXIT_GRADCHECK,
            message: format!("{failed} of {} gradient checks failed", reports.len()),
        });
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

fn run_inspect(args: &InspectArgs) -> Outcome {
    let spec = args.model.spec();
    println!(
        "config: arch={} attn={} strand_ratio={}",
        spec.arch, spec.attention, spec.shape_rule.strand_ratio
    );
    print!("{}", spec.summary()?);
    let model: Network = build_model(&spec, 0)?;
    let baseline: Network = build_model(&ArchSpec::new(spec.arch, AttentionKind::None), 0)?;
    println!("parameters: {}", model.count_params());
    println!("baseline parameters: {}", baseline.count_params());
    println!("attention overhead: {} params", model.count_params() - baseline.count_params());
    println!("fingerprint: {:#018x}", spec.fingerprint());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Inspect(a) => run_inspect(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
