//! `dkge` command-line runner.
//!
//! Every tunable can come from a flag, from a `--config` file of
//! `key = value` lines, or from the built-in default, in that order.
//! Exit status is 0 on success, 2 for usage or config errors and 1 for
//! anything that fails while running.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use dkge::baselines::{BaselineConfig, Norm};
use dkge::planted::PlantedConfig;
use dkge::quantize::ScoreMode;
use dkge::{EvalConfig, Exec, TrainConfig};

use config::{
    BaselineRun, EvalRun, ExecOpt, KeyValues, KindOpt, Method, ModeOpt, NormOpt, PlantedRun, PrepareRun, QuantizeRun,
    ScheduleOpt, SideList, SplitList, TiesOpt, TrainRun, UsageError,
};

#[derive(Parser, Debug)]
#[command(name = "dkge", version, about = "Binary knowledge graph embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Index three triple files into a dataset bundle.
    Prepare(PrepareArgs),
    /// Generate a synthetic dataset from random ground-truth codes.
    Planted(PlantedArgs),
    /// Learn binary codes by discrete coordinate descent.
    Train(TrainArgs),
    /// Train a continuous TransE or DistMult baseline.
    TrainBaseline(BaselineArgs),
    /// Hash a continuous embedding into binary codes.
    Quantize(QuantizeArgs),
    /// Filtered link prediction on a split.
    Eval(EvalArgs),
    /// Collect metrics from several eval runs into one CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
struct PrepareArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct PlantedArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    entities: Option<usize>,
    #[arg(long)]
    relations: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    valid: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    mutual: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset bundle, or a directory with train.txt, valid.txt and test.txt.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output prefix.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    /// Defaults to the code length.
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    filter_negatives: Option<bool>,
    /// `fixed` or `per-epoch`.
    #[arg(long)]
    negative_schedule: Option<ScheduleOpt>,
    #[arg(long)]
    guard: Option<bool>,
    /// `sequential` or `parallel`.
    #[arg(long)]
    exec: Option<ExecOpt>,
}

#[derive(Args, Debug, Default)]
struct BaselineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `transe` or `distmult`.
    #[arg(long)]
    model: Option<KindOpt>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// `l1` or `l2`.
    #[arg(long)]
    norm: Option<NormOpt>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct QuantizeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `sign`, `equal` or `lloyd`.
    #[arg(long)]
    method: Option<Method>,
    /// Bits per value for `equal` and `lloyd`.
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    norm: Option<NormOpt>,
}

#[derive(Args, Debug, Default)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Embedding file, or the prefix of a binary or quantized model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Splits used for filtering, comma separated, or `none`.
    #[arg(long)]
    filter: Option<SplitList>,
    /// `midrank`, `optimistic` or `pessimistic`.
    #[arg(long)]
    ties: Option<TiesOpt>,
    /// `binary` or `reconstruct`, for quantized models.
    #[arg(long)]
    score_mode: Option<ModeOpt>,
    /// `head`, `tail` or `head,tail`.
    #[arg(long)]
    directions: Option<SideList>,
    /// Split to rank.
    #[arg(long)]
    split: Option<String>,
    /// Distance norm for TransE embedding files.
    #[arg(long)]
    norm: Option<NormOpt>,
    #[arg(long)]
    exec: Option<ExecOpt>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Eval output directories.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn resolve_prepare(a: PrepareArgs, mut kv: KeyValues) -> Result<PrepareRun> {
    let run = PrepareRun {
        train: kv.require("train", a.train)?,
        valid: kv.require("valid", a.valid)?,
        test: kv.require("test", a.test)?,
        out: kv.require("out", a.out)?,
    };
    kv.finish()?;
    Ok(run)
}

fn resolve_planted(a: PlantedArgs, mut kv: KeyValues) -> Result<PlantedRun> {
    let d = PlantedConfig::default();
    let run = PlantedRun {
        entities: kv.pick("entities", a.entities, d.entities)?,
        relations: kv.pick("relations", a.relations, d.relations)?,
        dim: kv.pick("dim", a.dim, d.k)?,
        train: kv.pick("train", a.train, d.train)?,
        valid: kv.pick("valid", a.valid, d.valid)?,
        test: kv.pick("test", a.test, d.test)?,
        mutual: kv.pick("mutual", a.mutual, d.mutual)?,
        seed: kv.pick("seed", a.seed, d.seed)?,
        out: kv.require("out", a.out)?,
    };
    kv.finish()?;
    Ok(run)
}

fn resolve_train(a: TrainArgs, mut kv: KeyValues) -> Result<TrainRun> {
    let data = kv.require("data", a.data)?;
    let out = kv.require("out", a.out)?;
    let dim = kv.pick("dim", a.dim, TrainConfig::default().k)?;
    let d = TrainConfig::with_k(dim);
    let run = TrainRun {
        data,
        out,
        dim,
        margin: kv.pick("margin", a.margin, d.gamma)?,
        alpha: kv.pick("alpha", a.alpha, d.alpha)?,
        beta: kv.pick("beta", a.beta, d.beta)?,
        negatives: kv.pick("negatives", a.negatives, d.negatives_per_positive)?,
        epochs: kv.pick("epochs", a.epochs, d.max_epochs)?,
        seed: kv.pick("seed", a.seed, d.seed)?,
        tol: kv.pick("tol", a.tol, d.convergence_tol)?,
        filter_negatives: kv.pick("filter-negatives", a.filter_negatives, d.filter_false_negatives)?,
        negative_schedule: kv.pick("negative-schedule", a.negative_schedule, ScheduleOpt(d.negative_schedule))?,
        guard: kv.pick("guard", a.guard, d.monotone_guard)?,
        exec: kv.pick("exec", a.exec, ExecOpt(d.exec))?,
    };
    kv.finish()?;
    run.train_config().validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(run)
}

fn resolve_baseline(a: BaselineArgs, mut kv: KeyValues) -> Result<BaselineRun> {
    let d = BaselineConfig::default();
    let run = BaselineRun {
        data: kv.require("data", a.data)?,
        out: kv.require("out", a.out)?,
        model: kv.pick("model", a.model, KindOpt(d.kind))?,
        dim: kv.pick("dim", a.dim, d.dim)?,
        margin: kv.pick("margin", a.margin, d.margin)?,
        lr: kv.pick("lr", a.lr, d.learning_rate)?,
        epochs: kv.pick("epochs", a.epochs, d.epochs)?,
        norm: kv.pick("norm", a.norm, NormOpt(d.norm))?,
        negatives: kv.pick("negatives", a.negatives, d.negatives_per_positive)?,
        seed: kv.pick("seed", a.seed, d.seed)?,
    };
    kv.finish()?;
    run.baseline_config().validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(run)
}

fn resolve_quantize(a: QuantizeArgs, mut kv: KeyValues) -> Result<QuantizeRun> {
    let run = QuantizeRun {
        input: kv.require("in", a.input)?,
        out: kv.require("out", a.out)?,
        method: kv.pick("method", a.method, Method::Sign)?,
        bits: kv.pick("bits", a.bits, 8)?,
        norm: kv.pick("norm", a.norm, NormOpt(Norm::L1))?,
    };
    kv.finish()?;
    if run.method != Method::Sign && !(1..=16).contains(&run.bits) {
        return Err(UsageError(format!("bits must be in 1..=16, got {}", run.bits)).into());
    }
    Ok(run)
}

fn resolve_eval(a: EvalArgs, mut kv: KeyValues) -> Result<EvalRun> {
    let d = EvalConfig::default();
    let run = EvalRun {
        data: kv.require("data", a.data)?,
        model: kv.require("model", a.model)?,
        out: kv.require("out", a.out)?,
        filter: kv.pick("filter", a.filter, SplitList(d.filter_splits.clone()))?,
        ties: kv.pick("ties", a.ties, TiesOpt(d.tie_policy))?,
        score_mode: kv.pick("score-mode", a.score_mode, ModeOpt(ScoreMode::Binary))?,
        directions: kv.pick("directions", a.directions, SideList(d.directions.clone()))?,
        split: kv.pick("split", a.split, "test".to_owned())?,
        norm: kv.pick("norm", a.norm, NormOpt(Norm::L1))?,
        exec: kv.pick("exec", a.exec, ExecOpt(Exec::default()))?,
    };
    kv.finish()?;
    if dkge::Split::parse(&run.split).is_none() {
        return Err(UsageError(format!("unknown split `{}`", run.split)).into());
    }
    Ok(run)
}

fn load_kv(path: &Option<PathBuf>) -> Result<KeyValues> {
    KeyValues::load(path.as_deref())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => {
            let kv = load_kv(&a.config)?;
            commands::prepare(&resolve_prepare(a, kv)?)
        }
        Command::Planted(a) => {
            let kv = load_kv(&a.config)?;
            commands::planted(&resolve_planted(a, kv)?)
        }
        Command::Train(a) => {
            let kv = load_kv(&a.config)?;
            commands::train(&resolve_train(a, kv)?)
        }
        Command::TrainBaseline(a) => {
            let kv = load_kv(&a.config)?;
            commands::train_baseline_cmd(&resolve_baseline(a, kv)?)
        }
        Command::Quantize(a) => {
            let kv = load_kv(&a.config)?;
            commands::quantize(&resolve_quantize(a, kv)?)
        }
        Command::Eval(a) => {
            let kv = load_kv(&a.config)?;
            commands::eval(&resolve_eval(a, kv)?).map(|_| ())
        }
        Command::Report(a) => commands::report(&a.runs, &a.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
