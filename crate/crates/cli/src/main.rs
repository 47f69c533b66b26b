//! `circuits`: data generation, training, evaluation, sampling and
//! consistency audits.

mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use circuits_core::bifurcation::{gen_bifurcation, oracle_njnll_standardized};
use circuits_core::checkpoint::Checkpoint;
use circuits_core::consistency::consistency_check;
use circuits_core::data::{load_jsonl, split, write_jsonl, ChannelStats, SeriesInstance};
use circuits_core::metrics::{config_digest, evaluate, MetricSummary};
use circuits_core::model::{parse_channel_order, Model};
use circuits_core::train::{train, EpochLog};
use circuits_core::CoreError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use config::{Manifest, RunConfig};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("consistency violation: {0}")]
    Violation(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(
                CoreError::Config(_)
                | CoreError::InvalidDropSet(_)
                | CoreError::InvalidRecord { .. }
                | CoreError::Parse { .. }
                | CoreError::EmptyQuerySet
                | CoreError::EmptyTrainingSet
                | CoreError::TooFewInstances { .. },
            ) => 2,
            CliError::Violation(_) => 3,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Parser)]
#[command(name = "circuits", version, about = "Marginalization-consistent probabilistic circuits for irregular time series")]
struct Cli {
    /// Worker threads (1 keeps runs bit-stable across machines).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic bifurcation dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a CSV log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Draw joint samples for every instance of a split.
    Sample(SampleArgs),
    /// Audit marginalization consistency of a checkpoint.
    CheckConsistency(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    #[value(name = "no_spn")]
    NoSpn,
    #[value(name = "no_dsf")]
    NoDsf,
    #[value(name = "no_gc")]
    NoGc,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn file(self) -> &'static str {
        match self {
            SplitArg::Train => "train.jsonl",
            SplitArg::Val => "val.jsonl",
            SplitArg::Test => "test.jsonl",
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_series: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    ablation: Vec<AblationArg>,
    /// Comma-separated 1-based channel permutation, e.g. "2,1,3".
    #[arg(long)]
    channel_order: Option<String>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Stop after the first epoch that ends past this many seconds.
    #[arg(long)]
    max_seconds: Option<f64>,
    /// Test fixture: root weights depend on the query count.
    #[arg(long, hide = true)]
    fixture_query_dependent_root: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    channel_order: Option<String>,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Map values back to the original channel scales.
    #[arg(long)]
    denormalize: bool,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(CoreError::from)?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn emit_json(out: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    match out {
        Some(path) => write_json(path, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value).map_err(CoreError::from)?);
            Ok(())
        }
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }
    if let Some(n) = args.n_series {
        cfg.data.n_series = n;
    }
    cfg.data.validate()?;
    let all = gen_bifurcation(&cfg.data)?;
    let (tr, va, te) = split(all, cfg.splits, cfg.data.seed)?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    for (name, part) in [("train.jsonl", &tr), ("val.jsonl", &va), ("test.jsonl", &te)] {
        write_jsonl(args.out.join(name), part)?;
    }
    let data_json = serde_json::to_value(&cfg.data).map_err(CoreError::from)?;
    let manifest = Manifest {
        kind: "bifurcation".into(),
        channels: cfg.data.n_channels,
        counts: [tr.len(), va.len(), te.len()],
        config_digest: config_digest(&data_json),
        bifurcation: Some(cfg.data.clone()),
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    log::info!("wrote {}/{}/{} instances to {}", tr.len(), va.len(), te.len(), args.out.display());
    Ok(())
}

fn load_split(dir: &Path, split: SplitArg) -> Result<Vec<SeriesInstance>> {
    Ok(load_jsonl(dir.join(split.file()))?)
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let manifest = Manifest::load(&args.data)?;
    if !cfg.model_channels_explicit {
        cfg.model.channels = manifest.channels;
    } else if cfg.model.channels != manifest.channels {
        return Err(CliError::Config(format!(
            "config has {} channels, dataset has {}",
            cfg.model.channels, manifest.channels
        )));
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
        cfg.model.init_seed = seed;
    }
    for a in &args.ablation {
        match a {
            AblationArg::NoSpn => cfg.model.ablation.no_spn = true,
            AblationArg::NoDsf => cfg.model.ablation.no_dsf = true,
            AblationArg::NoGc => cfg.model.ablation.no_gc = true,
        }
    }
    if let Some(order) = &args.channel_order {
        cfg.model.channel_order = parse_channel_order(order, cfg.model.channels)?;
    }
    if let Some(v) = args.max_epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = args.components {
        cfg.model.components = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if args.max_seconds.is_some() {
        cfg.train.max_seconds = args.max_seconds;
    }
    cfg.model.fixture_query_dependent_root |= args.fixture_query_dependent_root;
    if cfg.model.ablation.no_spn {
        cfg.model.components = 1;
    }
    cfg.train.validate()?;
    let model = Model::new(cfg.model.clone())?;

    let raw_train = load_split(&args.data, SplitArg::Train)?;
    let raw_val = load_split(&args.data, SplitArg::Val)?;
    for inst in raw_train.iter().chain(&raw_val) {
        if inst.channels != cfg.model.channels {
            return Err(CliError::Config(format!(
                "instance {} has {} channels, model expects {}",
                inst.series_id, inst.channels, cfg.model.channels
            )));
        }
    }
    let stats = ChannelStats::fit(&raw_train)?;
    let tr: Vec<SeriesInstance> = raw_train.iter().map(|i| stats.apply(i)).collect();
    let va: Vec<SeriesInstance> = raw_val.iter().map(|i| stats.apply(i)).collect();

    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let effective = cfg.effective_json()?;
    let digest = config_digest(&effective);
    write_json(
        &args.out.join("run_config.json"),
        &json!({"config": effective, "config_digest": digest}),
    )?;
    let log_path = args.out.join("train_log.csv");
    let file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log_file = BufWriter::new(file);
    writeln!(log_file, "{}", EpochLog::CSV_HEADER).map_err(io_err(&log_path))?;
    let mut write_failure = None;
    let outcome = train(model, &cfg.train, &tr, &va, |e| {
        let res = writeln!(log_file, "{}", e.csv_row()).and_then(|_| log_file.flush());
        if let Err(err) = res {
            write_failure.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_failure {
        return Err(io_err(&log_path)(err));
    }
    let ckpt = Checkpoint {
        model: outcome.model,
        train: cfg.train.clone(),
        stats: Some(stats),
        best_val_njnll: outcome.best_val_njnll,
        epoch: outcome.best_epoch,
    };
    let ckpt_path = args.out.join("checkpoint.ckpt");
    ckpt.save(&ckpt_path)?;
    println!(
        "{}",
        json!({
            "checkpoint": ckpt_path,
            "epochs": outcome.history.len(),
            "best_epoch": outcome.best_epoch,
            "best_val_njnll": outcome.best_val_njnll,
            "skipped_steps": outcome.skipped_steps,
            "config_digest": digest,
        })
    );
    Ok(())
}

struct Loaded {
    ckpt: Checkpoint,
    stats: ChannelStats,
    manifest: Manifest,
    raw: Vec<SeriesInstance>,
    data: Vec<SeriesInstance>,
    digest: String,
}

fn load_for_eval(checkpoint: &Path, data_dir: &Path, split: SplitArg, order: Option<&str>) -> Result<Loaded> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let manifest = Manifest::load(data_dir)?;
    let model_cfg = &ckpt.model.cfg;
    if manifest.channels != model_cfg.channels {
        return Err(CliError::Config(format!(
            "checkpoint has {} channels, dataset manifest has {}",
            model_cfg.channels, manifest.channels
        )));
    }
    if let Some(order) = order {
        if parse_channel_order(order, model_cfg.channels)? != model_cfg.order() {
            return Err(CliError::Config(format!(
                "channel order {order:?} disagrees with the checkpoint order {:?}",
                model_cfg.order().iter().map(|c| c + 1).collect::<Vec<_>>()
            )));
        }
    }
    let stats = ckpt
        .stats
        .clone()
        .ok_or_else(|| CliError::Config("checkpoint has no normalization statistics".into()))?;
    let raw = load_split(data_dir, split)?;
    if let Some(bad) = raw.iter().find(|i| i.channels != model_cfg.channels) {
        return Err(CliError::Config(format!(
            "instance {} has {} channels, checkpoint expects {}",
            bad.series_id, bad.channels, model_cfg.channels
        )));
    }
    let data = raw.iter().map(|i| stats.apply(i)).collect();
    let header = json!({"model": model_cfg, "train": ckpt.train});
    let digest = config_digest(&header);
    Ok(Loaded {
        ckpt,
        stats,
        manifest,
        raw,
        data,
        digest,
    })
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let l = load_for_eval(&args.checkpoint, &args.data, args.split, args.channel_order.as_deref())?;
    let mut report = evaluate(&l.ckpt.model, &l.data, args.samples, args.seed, l.digest.clone())?;
    if let Some(bcfg) = &l.manifest.bifurcation {
        let oracle = l
            .raw
            .iter()
            .filter(|i| !i.queries.is_empty())
            .map(|i| oracle_njnll_standardized(i, &l.stats, bcfg))
            .collect();
        report.oracle_njnll = Some(MetricSummary::new(oracle));
    }
    emit_json(args.out.as_deref(), &report)
}

fn sample_cmd(args: SampleArgs) -> Result<()> {
    let l = load_for_eval(&args.checkpoint, &args.data, args.split, None)?;
    let file = fs::File::create(&args.out).map_err(io_err(&args.out))?;
    let mut w = BufWriter::new(file);
    let header = json!({"header": {
        "samples": args.samples,
        "seed": args.seed,
        "denormalized": args.denormalize,
        "instances": l.data.len(),
        "config_digest": l.digest,
    }});
    writeln!(w, "{header}").map_err(io_err(&args.out))?;
    for (index, inst) in l.data.iter().enumerate() {
        if inst.queries.is_empty() || args.samples == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        rng.set_stream(index as u64);
        let draws = l.ckpt.model.prepare(inst)?.sample(&mut rng, args.samples)?;
        for (s, mut values) in draws.into_iter().enumerate() {
            if args.denormalize {
                for (v, q) in values.iter_mut().zip(&inst.queries) {
                    *v = l.stats.denormalize_value(q.c, *v);
                }
            }
            let row = json!({"series_id": inst.series_id, "sample_index": s, "values": values});
            writeln!(w, "{row}").map_err(io_err(&args.out))?;
        }
    }
    w.flush().map_err(io_err(&args.out))
}

fn check_cmd(args: CheckArgs) -> Result<()> {
    let l = load_for_eval(&args.checkpoint, &args.data, args.split, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let report = consistency_check(&l.ckpt.model, &l.data, args.trials, &mut rng)?;
    emit_json(args.out.as_deref(), &report)?;
    if report.passed {
        Ok(())
    } else {
        let detail = match (&report.violation, &report.quadrature) {
            (Some(v), _) => format!("{} dropping {:?}: gap {:e}", v.series_id, v.drop, v.discrepancy),
            (None, Some(q)) => format!("quadrature on {}: relative error {:e}", q.series_id, q.relative_error),
            (None, None) => "unknown".into(),
        };
        Err(CliError::Violation(detail))
    }
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::CheckConsistency(a) => check_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
