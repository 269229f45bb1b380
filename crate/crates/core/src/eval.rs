//! Filtered link-prediction ranking and memory accounting.
//!
//! Every test triple is ranked against all `n` substitutions of its head
//! (and/or tail). Candidates that form a known triple are dropped, except the
//! true entity itself. Ties are resolved by a configurable policy; with
//! discrete scores in `[−k, k]` they are frequent, so the policy is written
//! into every report.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use thiserror::Error;

use crate::baselines::{ContinuousEmbedding, ModelKind};
use crate::bitpack::score_all_candidates_into;
use crate::data::{FilterIndex, Side, Split, Triple};
use crate::fileio::write_atomic;
use crate::learner::ModelParams;
use crate::par::{self, Exec};
use crate::quantize::{transe_binary_unchecked, QuantizedModel, ScoreMode};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("direction {0} is not enabled")]
    DirectionDisabled(&'static str),
    #[error("no test triples to evaluate")]
    EmptyTest,
    #[error("triple {0} is outside the scorer's vocabulary")]
    OutOfRange(Triple),
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad metrics file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TiePolicy {
    #[default]
    Midrank,
    Optimistic,
    Pessimistic,
}

impl TiePolicy {
    pub const ALL: [TiePolicy; 3] = [TiePolicy::Midrank, TiePolicy::Optimistic, TiePolicy::Pessimistic];

    pub fn name(self) -> &'static str {
        match self {
            TiePolicy::Midrank => "midrank",
            TiePolicy::Optimistic => "optimistic",
            TiePolicy::Pessimistic => "pessimistic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    fn adjust(self, equal: usize) -> f64 {
        match self {
            TiePolicy::Midrank => equal as f64 / 2.0,
            TiePolicy::Optimistic => 0.0,
            TiePolicy::Pessimistic => equal as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalConfig {
    pub filter_splits: Vec<Split>,
    pub tie_policy: TiePolicy,
    /// Ranked directions, in output order.
    pub directions: Vec<Side>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            filter_splits: Split::ALL.to_vec(),
            tie_policy: TiePolicy::Midrank,
            directions: vec![Side::Head, Side::Tail],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.directions.is_empty() {
            return Err(EvalError::Config("at least one direction is required".into()));
        }
        Ok(())
    }

    fn filter_label(&self) -> String {
        if self.filter_splits.is_empty() {
            "none".to_owned()
        } else {
            self.filter_splits.iter().map(|s| s.name()).collect::<Vec<_>>().join(",")
        }
    }
}

/// Higher scores mean more plausible triples.
pub trait Scorer: Sync {
    fn num_entities(&self) -> usize;

    fn num_relations(&self) -> usize;

    fn score(&self, t: Triple) -> f64;

    /// Scores of `t` with the entity at `side` replaced by each of
    /// `0..num_entities()`.
    fn score_candidates(&self, t: Triple, side: Side, out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.num_entities() as u32).map(|e| self.score(t.with_entity(side, e))));
    }

    fn memory_bits(&self) -> u64;
}

impl Scorer for ModelParams {
    fn num_entities(&self) -> usize {
        self.entities.count()
    }

    fn num_relations(&self) -> usize {
        self.relations.count()
    }

    fn score(&self, t: Triple) -> f64 {
        f64::from(ModelParams::score(self, t))
    }

    fn score_candidates(&self, t: Triple, side: Side, out: &mut Vec<f64>) {
        let mut ints = vec![0i32; self.entities.count()];
        score_all_candidates_into(
            self.entities.code(t.entity(side.other()) as usize),
            self.relations.code(t.relation as usize),
            &self.entities,
            side,
            Exec::Sequential,
            &mut ints,
        )
        .expect("entity and relation codes share k");
        out.clear();
        out.extend(ints.into_iter().map(f64::from));
    }

    fn memory_bits(&self) -> u64 {
        self.entities.memory_bits() + self.relations.memory_bits()
    }
}

impl Scorer for ContinuousEmbedding {
    fn num_entities(&self) -> usize {
        ContinuousEmbedding::num_entities(self)
    }

    fn num_relations(&self) -> usize {
        ContinuousEmbedding::num_relations(self)
    }

    fn score(&self, t: Triple) -> f64 {
        ContinuousEmbedding::score(self, t)
    }

    fn memory_bits(&self) -> u64 {
        ContinuousEmbedding::memory_bits(self)
    }
}

/// A quantized model scored in one of the two modes. Reconstruct mode
/// decodes the codes once up front.
pub struct QuantizedScorer<'a> {
    model: &'a QuantizedModel,
    reconstructed: Option<ContinuousEmbedding>,
}

impl<'a> QuantizedScorer<'a> {
    pub fn new(model: &'a QuantizedModel, mode: ScoreMode) -> Self {
        let reconstructed = (mode == ScoreMode::Reconstruct).then(|| model.reconstruct());
        Self { model, reconstructed }
    }
}

impl Scorer for QuantizedScorer<'_> {
    fn num_entities(&self) -> usize {
        self.model.entities.count()
    }

    fn num_relations(&self) -> usize {
        self.model.relations.count()
    }

    fn score(&self, t: Triple) -> f64 {
        if let Some(rec) = &self.reconstructed {
            return rec.score(t);
        }
        let m = self.model;
        let (h, r, tt) = (
            m.entities.code(t.head as usize).words(),
            m.relations.code(t.relation as usize).words(),
            m.entities.code(t.tail as usize).words(),
        );
        match m.kind {
            ModelKind::TransE => transe_binary_unchecked(m.k(), h, r, tt),
            ModelKind::DistMult => f64::from(crate::bitpack::score_unchecked(m.k(), h, r, tt)),
        }
    }

    fn memory_bits(&self) -> u64 {
        self.model.memory_bits()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankRecord {
    pub triple: Triple,
    pub direction: Side,
    /// Filtered rank; fractional under midrank.
    pub rank: f64,
    /// Rank with no filtering.
    pub raw_rank: f64,
    /// Candidates left after filtering, the true entity included.
    pub candidates: usize,
}

fn counts(scores: &[f64], truth: u32, skip: impl Fn(u32) -> bool) -> (usize, usize, usize) {
    let target = scores[truth as usize];
    let (mut higher, mut equal, mut kept) = (0, 0, 1);
    for (e, &s) in scores.iter().enumerate() {
        let e = e as u32;
        if e == truth || skip(e) {
            continue;
        }
        kept += 1;
        if s > target {
            higher += 1;
        } else if s == target {
            equal += 1;
        }
    }
    (higher, equal, kept)
}

fn rank_from_scores(
    t: Triple,
    side: Side,
    scores: &[f64],
    filter: &FilterIndex,
    policy: TiePolicy,
) -> RankRecord {
    let truth = t.entity(side);
    let known: &[u32] = match side {
        Side::Head => filter.heads_of(t.relation, t.tail),
        Side::Tail => filter.tails_of(t.head, t.relation),
    };
    let (h, eq, kept) = counts(scores, truth, |e| known.binary_search(&e).is_ok());
    let (rh, req, _) = counts(scores, truth, |_| false);
    RankRecord {
        triple: t,
        direction: side,
        rank: 1.0 + h as f64 + policy.adjust(eq),
        raw_rank: 1.0 + rh as f64 + policy.adjust(req),
        candidates: kept,
    }
}

pub fn rank_entity(
    t: Triple,
    side: Side,
    scorer: &dyn Scorer,
    filter: &FilterIndex,
    config: &EvalConfig,
) -> Result<RankRecord, EvalError> {
    if !config.directions.contains(&side) {
        return Err(EvalError::DirectionDisabled(side.name()));
    }
    check_triple(t, scorer)?;
    let mut scores = Vec::new();
    scorer.score_candidates(t, side, &mut scores);
    Ok(rank_from_scores(t, side, &scores, filter, config.tie_policy))
}

fn check_triple(t: Triple, scorer: &dyn Scorer) -> Result<(), EvalError> {
    let n = scorer.num_entities() as u32;
    if t.head >= n || t.tail >= n || t.relation >= scorer.num_relations() as u32 {
        return Err(EvalError::OutOfRange(t));
    }
    Ok(())
}

pub const HITS_AT: [usize; 3] = [1, 3, 10];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub count: usize,
    pub mr: f64,
    pub mrr: f64,
    pub hits: BTreeMap<usize, f64>,
    pub raw_mr: f64,
    pub raw_mrr: f64,
    pub memory_bits: u64,
    pub tie_policy: TiePolicy,
    pub filter: String,
}

impl MetricsReport {
    /// Aggregates in record order.
    pub fn from_records(records: &[RankRecord], memory_bits: u64, config: &EvalConfig) -> Result<Self, EvalError> {
        if records.is_empty() {
            return Err(EvalError::EmptyTest);
        }
        let n = records.len() as f64;
        let (mut sr, mut srr, mut raw, mut raw_rr) = (0.0, 0.0, 0.0, 0.0);
        let mut hits = [0usize; HITS_AT.len()];
        for r in records {
            sr += r.rank;
            srr += 1.0 / r.rank;
            raw += r.raw_rank;
            raw_rr += 1.0 / r.raw_rank;
            for (h, &at) in hits.iter_mut().zip(&HITS_AT) {
                *h += usize::from(r.rank <= at as f64);
            }
        }
        Ok(Self {
            count: records.len(),
            mr: sr / n,
            mrr: srr / n,
            hits: HITS_AT.iter().zip(hits).map(|(&at, c)| (at, c as f64 / n)).collect(),
            raw_mr: raw / n,
            raw_mrr: raw_rr / n,
            memory_bits,
            tie_policy: config.tie_policy,
            filter: config.filter_label(),
        })
    }

    pub fn hits_at(&self, n: usize) -> f64 {
        self.hits.get(&n).copied().unwrap_or(f64::NAN)
    }

    /// Flat `key = value` text. `#` lines record the protocol.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# filtered ranking, filter splits: {}", self.filter);
        let _ = writeln!(s, "# tie policy: {}", self.tie_policy.name());
        let _ = writeln!(s, "filter = {}", self.filter);
        let _ = writeln!(s, "tie_policy = {}", self.tie_policy.name());
        let _ = writeln!(s, "count = {}", self.count);
        let _ = writeln!(s, "mr = {:?}", self.mr);
        let _ = writeln!(s, "mrr = {:?}", self.mrr);
        for (at, v) in &self.hits {
            let _ = writeln!(s, "hits@{at} = {v:?}");
        }
        let _ = writeln!(s, "raw_mr = {:?}", self.raw_mr);
        let _ = writeln!(s, "raw_mrr = {:?}", self.raw_mrr);
        let _ = writeln!(s, "memory_bits = {}", self.memory_bits);
        s
    }

    pub fn from_text(text: &str) -> Result<Self, EvalError> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| EvalError::Parse(format!("not key = value: {line}")))?;
            map.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        let get = |k: &str| map.get(k).ok_or_else(|| EvalError::Parse(format!("missing {k}")));
        let num = |k: &str| -> Result<f64, EvalError> {
            get(k)?.parse().map_err(|_| EvalError::Parse(format!("{k} is not a number")))
        };
        let int = |k: &str| -> Result<u64, EvalError> {
            get(k)?.parse().map_err(|_| EvalError::Parse(format!("{k} is not an integer")))
        };
        let mut hits = BTreeMap::new();
        for at in HITS_AT {
            hits.insert(at, num(&format!("hits@{at}"))?);
        }
        Ok(Self {
            count: int("count")? as usize,
            mr: num("mr")?,
            mrr: num("mrr")?,
            hits,
            raw_mr: num("raw_mr")?,
            raw_mrr: num("raw_mrr")?,
            memory_bits: int("memory_bits")?,
            tie_policy: TiePolicy::parse(get("tie_policy")?)
                .ok_or_else(|| EvalError::Parse("unknown tie_policy".into()))?,
            filter: get("filter")?.clone(),
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "MR {:.2}  MRR {:.4}  Hits@1 {:.4}  Hits@3 {:.4}  Hits@10 {:.4}  ({} ranks, {} ties, {} bits)",
            self.mr,
            self.mrr,
            self.hits_at(1),
            self.hits_at(3),
            self.hits_at(10),
            self.count,
            self.tie_policy.name(),
            self.memory_bits
        )
    }
}

/// Ranks every triple in every enabled direction. Records come back in test
/// order, head before tail when both are enabled, whatever `exec` is.
pub fn evaluate(
    test: &[Triple],
    scorer: &dyn Scorer,
    filter: &FilterIndex,
    config: &EvalConfig,
    exec: Exec,
) -> Result<(MetricsReport, Vec<RankRecord>), EvalError> {
    config.validate()?;
    if test.is_empty() {
        return Err(EvalError::EmptyTest);
    }
    for &t in test {
        check_triple(t, scorer)?;
    }
    let per_triple = par::map_indices(exec, test.len(), |i| {
        let t = test[i];
        let mut scores = Vec::with_capacity(scorer.num_entities());
        config
            .directions
            .iter()
            .map(|&side| {
                scorer.score_candidates(t, side, &mut scores);
                rank_from_scores(t, side, &scores, filter, config.tie_policy)
            })
            .collect::<Vec<_>>()
    });
    let records: Vec<RankRecord> = per_triple.into_iter().flatten().collect();
    let report = MetricsReport::from_records(&records, scorer.memory_bits(), config)?;
    Ok((report, records))
}

/// What a stored model costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelDescriptor {
    /// `k` bits per entity and relation.
    Binary { k: usize, n: usize, m: usize },
    /// `d` values of `value_bits` each.
    Continuous { d: usize, n: usize, m: usize, value_bits: usize },
}

pub fn memory_footprint(desc: ModelDescriptor) -> u64 {
    match desc {
        ModelDescriptor::Binary { k, n, m } => (k as u64) * (n + m) as u64,
        ModelDescriptor::Continuous { d, n, m, value_bits } => (value_bits as u64) * (d as u64) * (n + m) as u64,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), EvalError> {
    write_atomic(path, text.as_bytes()).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_metrics(report: &MetricsReport, path: &Path) -> Result<(), EvalError> {
    write_text(path, &report.to_text())
}

pub fn ranks_csv(records: &[RankRecord]) -> String {
    let mut s = String::from("head,relation,tail,direction,rank,raw_rank,candidates\n");
    for r in records {
        let t = r.triple;
        let _ = writeln!(
            s,
            "{},{},{},{},{:?},{:?},{}",
            t.head,
            t.relation,
            t.tail,
            r.direction.name(),
            r.rank,
            r.raw_rank,
            r.candidates
        );
    }
    s
}

pub fn write_ranks(records: &[RankRecord], path: &Path) -> Result<(), EvalError> {
    write_text(path, &ranks_csv(records))
}

/// One row per run for memory-versus-accuracy plots.
pub fn curves_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut s = String::from("run,memory_bits,mrr,hits@10,tie_policy\n");
    for (label, r) in rows {
        let _ = writeln!(s, "{label},{},{:?},{:?},{}", r.memory_bits, r.mrr, r.hits_at(10), r.tie_policy.name());
    }
    s
}

pub fn write_curves(rows: &[(String, MetricsReport)], path: &Path) -> Result<(), EvalError> {
    write_text(path, &curves_csv(rows))
}
