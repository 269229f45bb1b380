//! Flat `key = value` config files and per-command resolution.
//!
//! Every tunable is looked up as command-line flag, then config-file key,
//! then default. Keys use the long flag names with dashes (`negative-schedule`).
//! A resolved config renders back to the same format; the manifest of each
//! run starts with it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use dkge::baselines::{ModelKind, Norm};
use dkge::data::{Side, Split};
use dkge::eval::TiePolicy;
use dkge::learner::NegativeSchedule;
use dkge::quantize::ScoreMode;
use dkge::Exec;

/// Marks the end of the config echo inside a manifest.
pub const SECTION_END: &str = "[history]";

/// Raised for bad flags, keys or values, as opposed to failures while running.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

/// Parsed config file. Keys are removed as they are resolved; anything left
/// over is unknown to the command.
#[derive(Debug, Default, Clone)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    source: String,
}

impl KeyValues {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line == SECTION_END {
                break;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{source}:{}: expected `key = value`, got `{line}`", no + 1)))?;
            let key = k.trim().to_owned();
            if entries.insert(key.clone(), v.trim().to_owned()).is_some() {
                return Err(usage(format!("{source}:{}: key `{key}` given twice", no + 1)));
            }
        }
        Ok(Self {
            entries,
            source: source.to_owned(),
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("{}: `{key} = {v}` has the wrong type", self.source))),
        }
    }

    /// Flag, else file, else `default`.
    pub fn pick<T: FromStr>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let file = self.take(key)?;
        Ok(flag.or(file).unwrap_or(default))
    }

    pub fn pick_opt<T: FromStr>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let file = self.take(key)?;
        Ok(flag.or(file))
    }

    pub fn require<T: FromStr>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.pick_opt(key, flag)?
            .ok_or_else(|| usage(format!("missing required --{key}")))
    }

    pub fn finish(self) -> Result<()> {
        if let Some(k) = self.entries.keys().next() {
            bail!(UsageError(format!("{}: unknown key `{k}`", self.source)));
        }
        Ok(())
    }
}

/// Text forms of enum-valued options.
macro_rules! text_option {
    ($name:ident, $inner:ty, $parse:expr, $show:expr, $what:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq)]
        pub struct $name(pub $inner);

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                ($parse)(s).map($name).ok_or_else(|| format!(concat!("unknown ", $what, " `{}`"), s))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(($show)(self.0))
            }
        }
    };
}

text_option!(KindOpt, ModelKind, ModelKind::parse, ModelKind::name, "model");
text_option!(NormOpt, Norm, Norm::parse, Norm::name, "norm");
text_option!(TiesOpt, TiePolicy, TiePolicy::parse, TiePolicy::name, "tie policy");
text_option!(ModeOpt, ScoreMode, ScoreMode::parse, ScoreMode::name, "score mode");
text_option!(ScheduleOpt, NegativeSchedule, NegativeSchedule::parse, NegativeSchedule::name, "negative schedule");
text_option!(
    ExecOpt,
    Exec,
    |s: &str| match s {
        "sequential" => Some(Exec::Sequential),
        "parallel" => Some(Exec::Parallel),
        _ => None,
    },
    |e: Exec| if e == Exec::Sequential { "sequential" } else { "parallel" },
    "exec mode"
);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sign,
    Equal,
    Lloyd,
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sign" => Ok(Method::Sign),
            "equal" => Ok(Method::Equal),
            "lloyd" => Ok(Method::Lloyd),
            _ => Err(format!("unknown method `{s}`")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Sign => "sign",
            Method::Equal => "equal",
            Method::Lloyd => "lloyd",
        })
    }
}

/// Comma-separated split names, or `none`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitList(pub Vec<Split>);

impl FromStr for SplitList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s.trim() == "none" {
            return Ok(SplitList(Vec::new()));
        }
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim) {
            let split = Split::parse(part).ok_or_else(|| format!("unknown split `{part}`"))?;
            if !out.contains(&split) {
                out.push(split);
            }
        }
        Ok(SplitList(out))
    }
}

impl fmt::Display for SplitList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<&str> = self.0.iter().map(|s| s.name()).collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SideList(pub Vec<Side>);

impl FromStr for SideList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim) {
            let side = match part {
                "head" => Side::Head,
                "tail" => Side::Tail,
                _ => return Err(format!("unknown direction `{part}`")),
            };
            if !out.contains(&side) {
                out.push(side);
            }
        }
        if out.is_empty() {
            return Err("at least one direction is required".into());
        }
        Ok(SideList(out))
    }
}

impl fmt::Display for SideList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|s| s.name()).collect();
        f.write_str(&names.join(","))
    }
}

/// Renders `(key, value)` pairs as config text.
pub fn render(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareRun {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub out: PathBuf,
}

impl PrepareRun {
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("train", path_str(&self.train)),
            ("valid", path_str(&self.valid)),
            ("test", path_str(&self.test)),
            ("out", path_str(&self.out)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedRun {
    pub entities: usize,
    pub relations: usize,
    pub dim: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub mutual: bool,
    pub seed: u64,
    pub out: PathBuf,
}

impl PlantedRun {
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("entities", self.entities.to_string()),
            ("relations", self.relations.to_string()),
            ("dim", self.dim.to_string()),
            ("train", self.train.to_string()),
            ("valid", self.valid.to_string()),
            ("test", self.test.to_string()),
            ("mutual", self.mutual.to_string()),
            ("seed", self.seed.to_string()),
            ("out", path_str(&self.out)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub data: PathBuf,
    pub out: PathBuf,
    pub dim: usize,
    pub margin: f64,
    pub alpha: f64,
    pub beta: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub seed: u64,
    pub tol: f64,
    pub filter_negatives: bool,
    pub negative_schedule: ScheduleOpt,
    pub guard: bool,
    pub exec: ExecOpt,
}

impl TrainRun {
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("data", path_str(&self.data)),
            ("out", path_str(&self.out)),
            ("dim", self.dim.to_string()),
            ("margin", format!("{:?}", self.margin)),
            ("alpha", format!("{:?}", self.alpha)),
            ("beta", format!("{:?}", self.beta)),
            ("negatives", self.negatives.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("tol", format!("{:?}", self.tol)),
            ("filter-negatives", self.filter_negatives.to_string()),
            ("negative-schedule", self.negative_schedule.to_string()),
            ("guard", self.guard.to_string()),
            ("exec", self.exec.to_string()),
        ]
    }

    pub fn train_config(&self) -> dkge::TrainConfig {
        dkge::TrainConfig {
            k: self.dim,
            gamma: self.margin,
            alpha: self.alpha,
            beta: self.beta,
            negatives_per_positive: self.negatives,
            max_epochs: self.epochs,
            seed: self.seed,
            convergence_tol: self.tol,
            filter_false_negatives: self.filter_negatives,
            negative_schedule: self.negative_schedule.0,
            monotone_guard: self.guard,
            exec: self.exec.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRun {
    pub data: PathBuf,
    pub out: PathBuf,
    pub model: KindOpt,
    pub dim: usize,
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub norm: NormOpt,
    pub negatives: usize,
    pub seed: u64,
}

impl BaselineRun {
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("data", path_str(&self.data)),
            ("out", path_str(&self.out)),
            ("model", self.model.to_string()),
            ("dim", self.dim.to_string()),
            ("margin", format!("{:?}", self.margin)),
            ("lr", format!("{:?}", self.lr)),
            ("epochs", self.epochs.to_string()),
            ("norm", self.norm.to_string()),
            ("negatives", self.negatives.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn baseline_config(&self) -> dkge::baselines::BaselineConfig {
        dkge::baselines::BaselineConfig {
            kind: self.model.0,
            dim: self.dim,
            margin: self.margin,
            learning_rate: self.lr,
            epochs: self.epochs,
            norm: self.norm.0,
            negatives_per_positive: self.negatives,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeRun {
    pub input: PathBuf,
    pub out: PathBuf,
    pub method: Method,
    pub bits: usize,
    pub norm: NormOpt,
}

impl QuantizeRun {
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("in", path_str(&self.input)),
            ("out", path_str(&self.out)),
            ("method", self.method.to_string()),
            ("bits", self.bits.to_string()),
            ("norm", self.norm.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub data: PathBuf,
    pub model: PathBuf,
    pub out: PathBuf,
    pub filter: SplitList,
    pub ties: TiesOpt,
    pub score_mode: ModeOpt,
    pub directions: SideList,
    pub split: String,
    pub norm: NormOpt,
    pub exec: ExecOpt,
}

impl EvalRun {
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("data", path_str(&self.data)),
            ("model", path_str(&self.model)),
            ("out", path_str(&self.out)),
            ("filter", self.filter.to_string()),
            ("ties", self.ties.to_string()),
            ("score-mode", self.score_mode.to_string()),
            ("directions", self.directions.to_string()),
            ("split", self.split.clone()),
            ("norm", self.norm.to_string()),
            ("exec", self.exec.to_string()),
        ]
    }

    pub fn eval_config(&self) -> dkge::EvalConfig {
        dkge::EvalConfig {
            filter_splits: self.filter.0.clone(),
            tie_policy: self.ties.0,
            directions: self.directions.0.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        let kv = KeyValues::parse("# c\n\ndim = 128\nmargin=4.5\n[history]\ngarbage\n", "cfg").unwrap();
        let mut kv2 = kv.clone();
        assert_eq!(kv2.pick("dim", Some(256usize), 64).unwrap(), 256);
        assert_eq!(kv2.pick("margin", None, 1.0f64).unwrap(), 4.5);
        assert!(kv2.finish().is_ok());

        let mut kv3 = kv;
        assert_eq!(kv3.pick("dim", None, 64usize).unwrap(), 128);
        let err = kv3.finish().unwrap_err();
        assert!(err.to_string().contains("unknown key `margin`"));

        assert!(KeyValues::parse("novalue\n", "cfg").is_err());
        assert!(KeyValues::parse("a = 1\na = 2\n", "cfg").is_err());
        let mut kv = KeyValues::parse("dim = big\n", "cfg").unwrap();
        assert!(kv.pick("dim", None, 1usize).unwrap_err().downcast_ref::<UsageError>().is_some());
        let mut kv = KeyValues::default();
        assert!(kv.require::<PathBuf>("data", None).unwrap_err().to_string().contains("--data"));
    }

    #[test]
    fn option_text_round_trips() {
        for s in ["train", "train,test", "none", "valid,train"] {
            assert_eq!(s.parse::<SplitList>().unwrap().to_string(), s);
        }
        assert!("train,bogus".parse::<SplitList>().is_err());
        assert_eq!("tail".parse::<SideList>().unwrap().0, vec![Side::Tail]);
        assert!("".parse::<SideList>().is_err());
        for s in ["midrank", "optimistic", "pessimistic"] {
            assert_eq!(s.parse::<TiesOpt>().unwrap().to_string(), s);
        }
        for s in ["sequential", "parallel"] {
            assert_eq!(s.parse::<ExecOpt>().unwrap().to_string(), s);
        }
        assert!("fast".parse::<ExecOpt>().is_err());
    }
}
