use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use rapo::config::{require_file, with_threads, RunConfig, THREADS_ENV};
use rapo::embio::NumericWidth;
use rapo::mapping::Activation;
use rapo::pipeline::{cmd_eval, cmd_induce, cmd_procrustes, cmd_train, LoadedModel};
use rapo::synth::{generate, Distortion, SynthSpec};
use rapo::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "rapo", version, about = "Bilingual lexicon induction")]
struct Cli {
    /// Worker threads.
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,

    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, history and report.
    Train(TrainArgs),
    /// Precision@k of a checkpoint on a test dictionary.
    Eval(EvalArgs),
    /// Write the top translations of source words.
    Induce(InduceArgs),
    /// Generate a rotated synthetic language pair.
    Synth(SynthArgs),
    /// Fit and evaluate the closed-form orthogonal baseline.
    Procrustes(ProcrustesArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    src_vec: Option<PathBuf>,
    #[arg(long)]
    tgt_vec: Option<PathBuf>,
    #[arg(long)]
    train_dict: Option<PathBuf>,
    #[arg(long)]
    test_dict: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    max_vocab: Option<usize>,
    #[arg(long)]
    width: Option<Width>,
    /// Single-threaded, with wall-clock times left out of the history.
    #[arg(long)]
    reproducible: bool,

    #[arg(long)]
    k_hard: Option<usize>,
    #[arg(long)]
    k_rand: Option<usize>,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    tau_src: Option<f64>,
    #[arg(long)]
    tau_tgt: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    csls_k: Option<usize>,
    #[arg(long)]
    augment_pool: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    rng_seed: Option<u64>,
    #[arg(long, action = clap::ArgAction::Set)]
    self_learning: Option<bool>,
    #[arg(long)]
    n_reflectors: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    hard_pool: Option<usize>,
    #[arg(long)]
    max_neighbors: Option<usize>,
    #[arg(long, action = clap::ArgAction::Set)]
    freeze_target: Option<bool>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Width {
    Single,
    Double,
}

impl From<Width> for NumericWidth {
    fn from(w: Width) -> Self {
        match w {
            Width::Single => NumericWidth::Single,
            Width::Double => NumericWidth::Double,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    src_vec: PathBuf,
    #[arg(long)]
    tgt_vec: PathBuf,
    #[arg(long, value_enum, default_value = "double")]
    width: Width,
    #[arg(long, default_value_t = 10)]
    csls_k: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    test_dict: PathBuf,
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
}

#[derive(Args)]
struct InduceArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Translations per source word.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Only the first N source words.
    #[arg(long)]
    limit: Option<usize>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 200)]
    seed_pairs: usize,
    #[arg(long, default_value_t = 200)]
    test_pairs: usize,
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
    /// none or per-word-jitter
    #[arg(long, default_value = "none")]
    distortion: Distortion,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ProcrustesArgs {
    #[arg(long)]
    src_vec: PathBuf,
    #[arg(long)]
    tgt_vec: PathBuf,
    #[arg(long)]
    train_dict: PathBuf,
    #[arg(long)]
    test_dict: PathBuf,
    #[arg(long, default_value_t = 200_000)]
    max_vocab: usize,
    #[arg(long, default_value_t = 10)]
    csls_k: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => train(args, cli.threads),
        Command::Eval(args) => with_threads(cli.threads, || eval(args))?,
        Command::Induce(args) => with_threads(cli.threads, || induce(args))?,
        Command::Synth(args) => synth(args),
        Command::Procrustes(args) => with_threads(cli.threads, || procrustes(args))?,
    }
}

fn train(args: TrainArgs, threads: Option<usize>) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field { cfg.$field = Some(v); })*
        };
    }
    macro_rules! set_train {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field { cfg.train.$field = v; })*
        };
    }
    macro_rules! set_train_opt {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field { cfg.train.$field = Some(v); })*
        };
    }
    set!(src_vec, tgt_vec, train_dict, test_dict, out_dir);
    set_train!(
        k_hard, k_rand, activation, learning_rate, tau_src, tau_tgt, lambda1, lambda2, iterations,
        epochs, patience, csls_k, augment_pool, batch_size, rng_seed, self_learning, val_fraction,
        freeze_target
    );
    set_train_opt!(n_reflectors, hard_pool, max_neighbors);
    if let Some(v) = args.max_vocab {
        cfg.max_vocab = v;
    }
    if let Some(w) = args.width {
        cfg.width = w.into();
    }
    if threads.is_some() {
        cfg.threads = threads;
    }
    cfg.reproducible |= args.reproducible;

    let run = cmd_train(&cfg)?;
    let a = &run.artifacts;
    info!("checkpoint written to {}", a.checkpoint.display());
    info!("history written to {}", a.history.display());
    info!("final lexicon of {} pairs written to {}", run.outcome.lexicon.len(), a.lexicon.display());
    if let Some(report) = run.report {
        println!("{report}");
    } else {
        warn!("no --test-dict given; skipping evaluation");
    }
    Ok(())
}

fn load_model(args: &ModelArgs) -> Result<LoadedModel> {
    require_file("--checkpoint", Some(&args.checkpoint))?;
    require_file("--src-vec", Some(&args.src_vec))?;
    require_file("--tgt-vec", Some(&args.tgt_vec))?;
    LoadedModel::load(&args.checkpoint, &args.src_vec, &args.tgt_vec, args.width.into())
}

fn eval(args: EvalArgs) -> Result<()> {
    require_file("--test-dict", Some(&args.test_dict))?;
    let loaded = load_model(&args.model)?;
    let report = cmd_eval(&loaded, &args.test_dict, &args.k, args.model.csls_k)?;
    println!("{report}");
    Ok(())
}

fn induce(args: InduceArgs) -> Result<()> {
    let loaded = load_model(&args.model)?;
    match &args.out {
        Some(path) => {
            let file = File::create(path).map_err(|e| io_error(path, e))?;
            let mut w = BufWriter::new(file);
            cmd_induce(&loaded, args.k, args.limit, args.model.csls_k, &mut w)?;
            w.flush().map_err(|e| io_error(path, e))
        }
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            cmd_induce(&loaded, args.k, args.limit, args.model.csls_k, &mut w)?;
            w.flush().map_err(|e| io_error(Path::new("<stdout>"), e))
        }
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n: args.n,
        d: args.d,
        noise_sigma: args.noise_sigma,
        seed_pairs: args.seed_pairs,
        test_pairs: args.test_pairs,
        rng_seed: args.rng_seed,
        distortion: args.distortion,
    };
    let files = generate(&spec)?.write(&args.out_dir)?;
    for p in [&files.src_vec, &files.tgt_vec, &files.train_dict, &files.test_dict] {
        println!("{}", p.display());
    }
    Ok(())
}

fn procrustes(args: ProcrustesArgs) -> Result<()> {
    for (flag, p) in [
        ("--src-vec", &args.src_vec),
        ("--tgt-vec", &args.tgt_vec),
        ("--train-dict", &args.train_dict),
        ("--test-dict", &args.test_dict),
    ] {
        require_file(flag, Some(p))?;
    }
    let (fit, report) = cmd_procrustes(
        &args.src_vec,
        &args.tgt_vec,
        &args.train_dict,
        &args.test_dict,
        args.max_vocab,
        args.csls_k,
    )?;
    println!("{report}");
    println!("rank={}", fit.rank);
    Ok(())
}

fn io_error(path: &Path, source: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
