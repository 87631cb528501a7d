//! `metaner` command-line front end.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
//! failure.

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metaner::checkpoint::load_model;
use metaner::episode_io::load_corpus;
use metaner::pipeline::{check_compatible, dump_embeddings, eval_command, train_span_command, train_typing_command};
use metaner::synthetic::{document_episodes, SyntheticConfig};
use metaner::{
    load_episodes, sample_episodes, save_episodes, EpisodeSet, EpisodeShape, Error, ExitKind, LoadOptions, Result,
    RunConfig, SplitTag, TrainMode, TyperParams,
};

#[derive(Parser)]
#[command(name = "metaner", version, about = "Few-shot NER with decomposed meta-learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample N-way K-shot episodes from a corpus or from synthetic documents.
    Sample(SampleArgs),
    /// Meta-train the span detector.
    TrainSpan(TrainArgs),
    /// Meta-train the entity typer.
    TrainTyping(TrainArgs),
    /// Meta-test both checkpoints on test episodes.
    Eval(EvalArgs),
    /// Write typer span vectors for external projection.
    DumpEmbeddings(DumpArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for SplitTag {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitTag::Train,
            SplitArg::Dev => SplitTag::Dev,
            SplitArg::Test => SplitTag::Test,
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    /// Corpus with one `token tag` pair per line and blank lines between sentences.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    corpus: Option<PathBuf>,
    /// Generate episodes from synthetic documents, one per document.
    #[arg(long)]
    synthetic: bool,
    /// Synthetic type indices as `start..end`.
    #[arg(long, default_value = "0..8", value_parser = parse_range)]
    types: Range<usize>,
    /// First synthetic document id; use disjoint ranges for different splits.
    #[arg(long, default_value_t = 0)]
    first_doc: usize,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    /// Per-type span target of the query set.
    #[arg(long, default_value_t = 1)]
    query_shots: usize,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Episode file format: fewnerd, crossdataset or canonical.
    #[arg(long)]
    format: Option<String>,
    /// Abort on invalid episodes instead of skipping them.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    strict: Option<bool>,
}

#[derive(Args)]
struct StageOverrides {
    /// Train with plain supervised updates instead of MAML.
    #[arg(long)]
    conventional: bool,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable meta-gradient clipping.
    #[arg(long)]
    no_clip: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    stage: StageOverrides,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Max-loss coefficient for inner updates and fine-tuning.
    #[arg(long)]
    lambda_train: Option<f64>,
    /// Max-loss coefficient for the meta-update query loss.
    #[arg(long)]
    lambda_eval: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    detector: PathBuf,
    #[arg(long)]
    typer: PathBuf,
    /// Test episodes; defaults to `data.test` of the configuration.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Comma-separated evaluation seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    detector_finetune_steps: Option<usize>,
    /// 0 gives plain prototype classification without support updates.
    #[arg(long)]
    typer_finetune_steps: Option<usize>,
    #[arg(long)]
    lambda_train: Option<f64>,
    /// Directory for report.json and predictions.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    typer: PathBuf,
    #[arg(long)]
    episodes: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Support updates before embedding; defaults to the configured typer fine-tune steps.
    #[arg(long)]
    finetune_steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_range(s: &str) -> std::result::Result<Range<usize>, String> {
    let (a, b) = s.split_once("..").ok_or("expected start..end")?;
    let a: usize = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("{e}"))?;
    if a >= b {
        return Err("empty range".into());
    }
    Ok(a..b)
}

fn load_config(args: &DataArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(f) = &args.format {
        cfg.data.format = f.clone();
    }
    if let Some(s) = args.strict {
        cfg.data.strict = s;
    }
    Ok(cfg)
}

fn load_split(cfg: &RunConfig, path: &Path, split: SplitTag) -> Result<EpisodeSet> {
    let opts = LoadOptions {
        format: cfg.data.format.parse()?,
        strict: cfg.data.strict,
        split_tag: split,
    };
    load_episodes(path, &opts)
}

fn apply_stage(meta: &mut metaner::MetaConfig, o: &StageOverrides) {
    if o.conventional {
        meta.mode = TrainMode::Conventional;
    }
    if let Some(n) = o.max_steps {
        meta.max_steps = n;
    }
    if let Some(s) = o.seed {
        meta.seed = s;
    }
    if o.no_clip {
        meta.clip_norm = 0.0;
    }
}

fn sample(args: SampleArgs) -> Result<()> {
    let shape = EpisodeShape {
        n_way: args.n_way,
        k_shot: args.k_shot,
        query_shots: args.query_shots,
    };
    let split = SplitTag::from(args.split);
    let set = match &args.corpus {
        Some(path) => sample_episodes(&load_corpus(path)?, shape, args.episodes, args.seed, split)?,
        None => {
            let syn = SyntheticConfig::default();
            if args.types.end > syn.n_types {
                return Err(Error::Config(format!("synthetic types must lie in 0..{}", syn.n_types)));
            }
            let types: Vec<usize> = args.types.clone().collect();
            document_episodes(&syn, &types, shape, args.first_doc, args.episodes, args.seed, split)?
        }
    };
    save_episodes(&set, &args.out)?;
    println!("wrote {} episodes to {}", set.len(), args.out.display());
    Ok(())
}

fn train_config(args: &TrainArgs, typer: bool) -> Result<RunConfig> {
    let mut cfg = load_config(&args.data)?;
    if let Some(p) = &args.train {
        cfg.data.train = Some(p.clone());
    }
    if let Some(p) = &args.dev {
        cfg.data.dev = Some(p.clone());
    }
    if let Some(l) = args.lambda_train {
        cfg.detector.lambda_train = l;
    }
    if let Some(l) = args.lambda_eval {
        cfg.detector.lambda_query = l;
    }
    let meta = if typer {
        &mut cfg.typer.meta
    } else {
        &mut cfg.detector.meta
    };
    apply_stage(meta, &args.stage);
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: TrainArgs, typer: bool) -> Result<()> {
    let cfg = train_config(&args, typer)?;
    let artifacts = if typer {
        train_typing_command(&cfg, &args.out)?
    } else {
        train_span_command(&cfg, &args.out)?
    };
    let best_f1 = artifacts
        .history
        .iter()
        .find(|h| h.step == artifacts.best_step)
        .and_then(|h| h.dev_f1);
    match best_f1 {
        Some(f1) => println!("best step {} (dev F1 {f1:.4})", artifacts.best_step),
        None => println!("best step {}", artifacts.best_step),
    }
    println!("checkpoint: {}", artifacts.checkpoint.display());
    println!("metrics log: {}", artifacts.metrics_log.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<bool> {
    let mut cfg = load_config(&args.data)?;
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(n) = args.detector_finetune_steps {
        cfg.detector.finetune.steps = n;
    }
    if let Some(n) = args.typer_finetune_steps {
        cfg.typer.finetune.steps = n;
    }
    if let Some(l) = args.lambda_train {
        cfg.detector.lambda_train = l;
    }
    cfg.validate()?;
    let path = args
        .test
        .clone()
        .or_else(|| cfg.data.test.clone())
        .ok_or_else(|| Error::Config("no test episodes given (--test or data.test)".into()))?;
    let test = load_split(&cfg, &path, SplitTag::Test)?;
    let report = eval_command(&cfg, &args.detector, &args.typer, &test, args.out.as_deref())?;
    if report.is_empty() {
        eprintln!("no test episodes in {}", path.display());
        return Ok(false);
    }
    print!("{}", report.summary());
    Ok(true)
}

fn dump(args: DumpArgs) -> Result<()> {
    let cfg = load_config(&args.data)?;
    cfg.validate()?;
    let set = load_split(&cfg, &args.episodes, SplitTag::Test)?;
    let (typer, vocab): (TyperParams, _) = load_model(&args.typer)?;
    check_compatible(&cfg, "typer", typer.encoder.config, vocab)?;
    let steps = args.finetune_steps.unwrap_or(cfg.typer.finetune.steps);
    let lines = dump_embeddings(&typer, &set, &cfg, args.seed, steps, &args.out)?;
    println!("wrote {lines} span vectors to {}", args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Sample(a) => sample(a)?,
        Command::TrainSpan(a) => train(a, false)?,
        Command::TrainTyping(a) => train(a, true)?,
        Command::Eval(a) => {
            if !eval(a)? {
                return Ok(ExitCode::from(ExitKind::Data as u8));
            }
        }
        Command::DumpEmbeddings(a) => dump(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(ExitKind::Config as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_kind() as u8)
        }
    }
}
