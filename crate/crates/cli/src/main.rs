use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use cellnas_core::data::{gen_synthetic, load_cifar10, Split};
use cellnas_core::eval::train_eval_network;
use cellnas_core::metrics::write_csv;
use cellnas_core::space::sample_check;
use cellnas_core::{
    count_madds, count_params, Dataset, EvalConfig, EvalNetwork, Genotype, OpKind, SearchConfig, SearchData, Searcher,
    StemKind, SyntheticSpec, SyntheticVariant,
};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Cell search with Gumbel sampling, importance counters and gradual pruning.
#[derive(Parser)]
#[command(name = "cellnas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search a cell; writes genotype, metrics and a checkpoint per epoch.
    Search(SearchArgs),
    /// Decode the genotype held by a checkpoint.
    Decode(DecodeArgs),
    /// Train a network built from a genotype and report test accuracy.
    Eval(EvalArgs),
    /// Print the parameter count of a genotype network.
    CountParams(CountArgs),
    /// Print the multiply-add count of a genotype network.
    CountMadds(CountArgs),
    /// Write a genotype as a Graphviz digraph.
    ExportDot(DotArgs),
    /// Compare hard Gumbel draws against softmax(alpha).
    SampleCheck(SampleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Cifar10,
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Texture,
    Intensity,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    dataset: DatasetKind,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Keep a seeded random subset of this many training images.
    #[arg(long)]
    limit: Option<usize>,
    /// Synthetic dataset size.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    image_size: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, value_enum, default_value = "texture")]
    variant: Variant,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "search-out")]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this epoch, leaving a checkpoint to resume from.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "genotype.json")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    genotype: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "eval-out")]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long)]
    genotype: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Input side length; above 64 the ImageNet stem is used.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct DotArgs {
    #[arg(long)]
    genotype: PathBuf,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Comma-separated logits, one per operation.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    alpha: Vec<f64>,
    #[arg(long, default_value_t = 200_000)]
    draws: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.005)]
    tolerance: f64,
}

/// Bad input detected by the command line layer.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<Invalid>()
            || c.downcast_ref::<cellnas_core::Error>()
                .is_some_and(|e| e.is_validation())
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Search(a) => search(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::CountParams(a) => count(a, false),
        Command::CountMadds(a) => count(a, true),
        Command::ExportDot(a) => export_dot(a),
        Command::SampleCheck(a) => sample(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_genotype(path: &Path) -> Result<Genotype> {
    Genotype::from_json(&read_text(path)?).with_context(|| format!("loading {}", path.display()))
}

/// Training split (and test split for CIFAR-10).
fn load_data(args: &DataArgs, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    match args.dataset {
        DatasetKind::Cifar10 => {
            let dir = args
                .data
                .as_deref()
                .ok_or_else(|| invalid("--dataset cifar10 needs --data DIR"))?;
            let train = load_cifar10(dir, Split::Train, args.limit, seed)?;
            let test = load_cifar10(dir, Split::Test, None, seed)?;
            Ok((train, Some(test)))
        }
        DatasetKind::Synthetic => {
            let spec = SyntheticSpec {
                variant: match args.variant {
                    Variant::Texture => SyntheticVariant::Texture,
                    Variant::Intensity => SyntheticVariant::Intensity,
                },
                classes: args.classes,
                samples: args.limit.unwrap_or(args.samples),
                channels: 3,
                size: args.image_size,
                noise: args.noise,
            };
            Ok((gen_synthetic(&spec, seed)?, None))
        }
    }
}

fn search(a: SearchArgs) -> Result<()> {
    let file_config = a
        .config
        .as_deref()
        .map(|p| SearchConfig::from_toml(&read_text(p)?).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let mut searcher = match &a.resume {
        Some(path) => {
            let s = Searcher::load_checkpoint(path).with_context(|| format!("resuming from {}", path.display()))?;
            if let Some(c) = &file_config {
                if c != &s.config {
                    return Err(invalid(
                        "--config differs from the configuration stored in the checkpoint",
                    ));
                }
            }
            if a.seed.is_some_and(|seed| seed != s.config.seed) {
                return Err(invalid("--seed differs from the seed stored in the checkpoint"));
            }
            s
        }
        None => {
            let mut c = file_config.unwrap_or_default();
            if let Some(seed) = a.seed {
                c.seed = seed;
            }
            c.validate()?;
            let (train, _) = load_data(&a.data, c.seed)?;
            Searcher::for_data(c, &SearchData::from_halves(&train))?
        }
    };
    let config = searcher.config.clone();
    let (all, _) = load_data(&a.data, config.seed)?;
    let data = SearchData::from_halves(&all);
    if data.train.shape[0] != searcher.net.config.in_channels || data.train.classes != searcher.net.config.classes {
        return Err(invalid("dataset shape does not match the checkpointed network"));
    }

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_text(&a.out.join("config.toml"), &config.to_toml())?;
    let checkpoint = a.out.join("checkpoint.json");
    let write_logs = |s: &Searcher| -> cellnas_core::Result<()> {
        write_csv(&a.out.join("metrics.csv"), &s.metrics)?;
        write_csv(&a.out.join("snapshots.csv"), &s.snapshots)?;
        write_csv(&a.out.join("prune_log.csv"), &s.prune_log)
    };
    let last = a.stop_after.unwrap_or(config.epochs);
    searcher.run_until(&data, last, |s| {
        let row = s.metrics.last().expect("epoch ran");
        eprintln!(
            "epoch {:>4}  T {:.3}  train loss {:.4} acc {:.3}  val acc {}  pruned {}",
            row.epoch,
            row.temperature,
            row.train_loss,
            row.train_acc,
            row.val_acc.map_or("-".into(), |v| format!("{v:.3}")),
            row.pruned
        );
        s.save_checkpoint(&checkpoint)?;
        write_logs(s)
    })?;
    if !searcher.is_finished() {
        eprintln!(
            "stopped after epoch {}; resume with --resume {}",
            searcher.epoch,
            checkpoint.display()
        );
        return Ok(());
    }
    let outcome = searcher.finish();
    write_logs(&searcher)?;
    let outcome = outcome?;
    outcome.genotype.save(&a.out.join("genotype.json"))?;
    write_text(
        &a.out.join("indicator.json"),
        &serde_json::to_string_pretty(&outcome.indicator)?,
    )?;
    println!("{}", a.out.join("genotype.json").display());
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let mut s =
        Searcher::load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let outcome = s.finish()?;
    outcome.genotype.save(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let genotype = load_genotype(&a.genotype)?;
    let mut config = match &a.config {
        Some(p) => EvalConfig::from_toml(&read_text(p)?).with_context(|| format!("loading {}", p.display()))?,
        None => EvalConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let (train, test) = load_data(&a.data, config.seed)?;
    let (train, test) = match test {
        Some(test) => (train, test),
        None => train.split_halves(),
    };
    // the network follows the dataset's input shape and class count
    config.in_channels = train.shape[0];
    config.resolution = train.shape[1];
    config.classes = train.classes;
    config.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = EvalNetwork::<f32>::new(&genotype, config, &mut rng)?;
    eprintln!("{} parameters", net.count_params());
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let report = train_eval_network(&mut net, &train, &test, |r| {
        eprintln!(
            "epoch {:>4}  lr {:.4}  train loss {:.4} acc {:.3}  test acc {:.3}",
            r.epoch, r.lr, r.train_loss, r.train_acc, r.test_acc
        );
    })?;
    write_csv(&a.out.join("eval_metrics.csv"), &report.history)?;
    write_text(&a.out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    println!("test accuracy {:.4}", report.test_acc);
    Ok(())
}

fn count(a: CountArgs, madds: bool) -> Result<()> {
    let genotype = load_genotype(&a.genotype)?;
    let mut config = match &a.config {
        Some(p) => EvalConfig::from_toml(&read_text(p)?).with_context(|| format!("loading {}", p.display()))?,
        None => EvalConfig::default(),
    };
    if let Some(v) = a.cells {
        config.cells = v;
    }
    if let Some(v) = a.channels {
        config.init_channels = v;
    }
    if let Some(v) = a.classes {
        config.classes = v;
    }
    if let Some(v) = a.resolution {
        config.resolution = v;
        if a.config.is_none() {
            config.stem = StemKind::for_resolution(v);
        }
    }
    config.validate()?;
    let n = if madds {
        count_madds(&genotype, &config)?
    } else {
        count_params(&genotype, &config)?
    };
    println!("{n}");
    Ok(())
}

fn export_dot(a: DotArgs) -> Result<()> {
    let dot = load_genotype(&a.genotype)?.to_dot();
    match a.out {
        Some(path) => write_text(&path, &dot),
        None => {
            print!("{dot}");
            Ok(())
        }
    }
}

fn sample(a: SampleArgs) -> Result<()> {
    if a.draws == 0 {
        return Err(invalid("--draws must be positive"));
    }
    if a.temperature.is_nan() || a.temperature <= 0.0 {
        return Err(invalid("--temperature must be positive"));
    }
    let r = sample_check(&a.alpha, a.temperature, a.draws, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let label = |i: usize| {
        if a.alpha.len() == OpKind::ALL.len() {
            OpKind::ALL[i].name().to_string()
        } else {
            format!("op{i}")
        }
    };
    println!("{:<14} {:>10} {:>10}", "op", "expected", "empirical");
    for i in 0..a.alpha.len() {
        println!("{:<14} {:>10.5} {:>10.5}", label(i), r.expected[i], r.empirical[i]);
    }
    println!("max abs deviation {:.5} over {} draws", r.linf, a.draws);
    if r.linf >= a.tolerance {
        anyhow::bail!("deviation {:.5} exceeds tolerance {}", r.linf, a.tolerance);
    }
    Ok(())
}
