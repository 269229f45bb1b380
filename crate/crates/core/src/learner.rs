//! The discrete learner.
//!
//! Minimises, over `E ∈ {±1}^{k×n}`, `R ∈ {±1}^{k×m}` and real `X`, `Y`,
//!
//! ```text
//! Σ_pairs max(0, γ − s(pos) + s(neg)) − 2α·tr(EᵀX) − 2β·tr(RᵀY)
//! ```
//!
//! with `s(h, r, t) = (h ∘ r)ᵀ t` and `X`, `Y` constrained to
//! `{X1 = 0, XXᵀ = nI}` (resp. `m`). One epoch updates every entity code bit
//! by bit, then every relation code, then `X` and `Y` in closed form.
//!
//! A code bit only appears linearly in the scores of the pairs that mention
//! it, so with the set of margin-violating pairs frozen the best value of bit
//! `j` of entity `i` is the sign of
//!
//! ```text
//! ê_ij = Σ_{pos} e'_j r_j − Σ_{neg} e'_j r_j + 2α·x_ij
//! ```
//!
//! where `e'` is the other entity of each triple mentioning `i`. A zero
//! coefficient keeps the current bit.

use std::collections::HashSet;
use std::fmt;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bitpack::{self, BinaryCodeMatrix};
use crate::data::{remove_self_loops, Dataset, FilterIndex, Side, Triple};
use crate::linalg::{solve_orthogonal_auxiliary, AuxOptions, DenseMatrix, LinalgError};
use crate::par::Exec;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("pair {pair} does not mention {what} {index}")]
    PairMismatch {
        pair: usize,
        what: &'static str,
        index: usize,
    },
    #[error("no training triples left after removing self-loops")]
    EmptyTrain,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// When corrupted triples are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeSchedule {
    /// Drawn once before the first epoch and kept for the whole run.
    Fixed,
    /// Fresh corruptions every epoch.
    PerEpoch,
}

impl NegativeSchedule {
    pub fn name(self) -> &'static str {
        match self {
            NegativeSchedule::Fixed => "fixed",
            NegativeSchedule::PerEpoch => "per-epoch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fixed" => Some(NegativeSchedule::Fixed),
            "per-epoch" => Some(NegativeSchedule::PerEpoch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Code length in bits.
    pub k: usize,
    /// Hinge margin, in score units (scores live in `[−k, k]`).
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub negatives_per_positive: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Stop when the relative change of the epoch objective drops below this.
    pub convergence_tol: f64,
    pub filter_false_negatives: bool,
    pub negative_schedule: NegativeSchedule,
    /// Reject a sign-rule flip when it would raise the exact hinge objective
    /// of the frozen batch (inactive pairs crossing the margin).
    pub monotone_guard: bool,
    pub exec: Exec,
}

impl TrainConfig {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            gamma: k as f64,
            alpha: 1e-7,
            beta: 1e-7,
            negatives_per_positive: 1,
            max_epochs: 30,
            seed: 0,
            convergence_tol: 1e-4,
            filter_false_negatives: false,
            negative_schedule: NegativeSchedule::Fixed,
            monotone_guard: true,
            exec: Exec::default(),
        }
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: &str| Err(LearnError::Config(m.to_owned()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return bad("gamma must be positive");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return bad("alpha and beta must be non-negative");
        }
        if self.negatives_per_positive == 0 {
            return bad("negatives_per_positive must be at least 1");
        }
        if !(self.convergence_tol >= 0.0) {
            return bad("convergence_tol must be non-negative");
        }
        Ok(())
    }

    fn aux_options(&self, which: u64) -> AuxOptions {
        AuxOptions {
            rank_tol: None,
            seed: self.seed ^ (0x5eed_0000 + which),
            exec: self.exec,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_k(64)
    }
}

/// Entity and relation codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelParams {
    pub entities: BinaryCodeMatrix,
    pub relations: BinaryCodeMatrix,
}

impl ModelParams {
    pub fn k(&self) -> usize {
        self.entities.k()
    }

    pub fn score(&self, t: Triple) -> i32 {
        let e = &self.entities;
        bitpack::score_unchecked(
            e.k(),
            e.code(t.head as usize).words(),
            self.relations.code(t.relation as usize).words(),
            e.code(t.tail as usize).words(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryParams {
    /// `k × n`.
    pub x: DenseMatrix,
    /// `k × m`.
    pub y: DenseMatrix,
}

/// One positive triple with one corruption of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub positive: Triple,
    pub negative: Triple,
    pub side: Side,
    pub active: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.active).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    ZeroFlips,
    Converged,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max-epochs",
            StopReason::ZeroFlips => "zero-flips",
            StopReason::Converged => "converged",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    /// Objective of the batch before the first epoch.
    pub initial_objective: Option<f64>,
    /// Objective after each epoch, on that epoch's pair batch.
    pub objective_history: Vec<f64>,
    pub entity_flips: Vec<usize>,
    pub relation_flips: Vec<usize>,
    pub stop_reason: Option<StopReason>,
    batch: Option<PairBatch>,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Self {
            epoch: 0,
            initial_objective: None,
            objective_history: Vec::new(),
            entity_flips: Vec::new(),
            relation_flips: Vec::new(),
            stop_reason: None,
            batch: None,
            rng,
        }
    }

    /// The batch used by the most recent epoch.
    pub fn batch(&self) -> Option<&PairBatch> {
        self.batch.as_ref()
    }
}

/// Codes as a real `k × count` matrix of ±1.
pub fn codes_as_matrix(codes: &BinaryCodeMatrix) -> DenseMatrix {
    let (k, count) = (codes.k(), codes.count());
    let mut out = DenseMatrix::zeros(k, count);
    for i in 0..count {
        let code = codes.code(i);
        for j in 0..k {
            out[(j, i)] = f64::from(code.get(j));
        }
    }
    out
}

/// `tr(CᵀZ)` for a code matrix `C` and a real matrix `Z` of the same shape.
pub fn code_trace(codes: &BinaryCodeMatrix, z: &DenseMatrix) -> f64 {
    let mut total = 0.0;
    for j in 0..codes.k() {
        let row = z.row(j);
        for (i, &v) in row.iter().enumerate() {
            if codes.get(i, j) > 0 {
                total += v;
            } else {
                total -= v;
            }
        }
    }
    total
}

/// Seeded uniform ±1 codes and the matching optimal auxiliary matrices.
pub fn init_params(n: usize, m: usize, config: &TrainConfig) -> Result<(ModelParams, AuxiliaryParams), LearnError> {
    config.validate()?;
    if n == 0 || m == 0 {
        return Err(LearnError::Config("need at least one entity and one relation".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let entities = BinaryCodeMatrix::random(config.k, n, &mut rng);
    let relations = BinaryCodeMatrix::random(config.k, m, &mut rng);
    let model = ModelParams { entities, relations };
    let aux = update_auxiliary(&model, config)?;
    Ok((model, aux))
}

/// Solves both auxiliary subproblems for the current codes.
///
/// A single code (`count == 1`) has no centred direction; its auxiliary
/// matrix is zero.
pub fn update_auxiliary(model: &ModelParams, config: &TrainConfig) -> Result<AuxiliaryParams, LearnError> {
    let solve = |codes: &BinaryCodeMatrix, which: u64| -> Result<DenseMatrix, LearnError> {
        if codes.count() < 2 {
            return Ok(DenseMatrix::zeros(codes.k(), codes.count()));
        }
        let a = codes_as_matrix(codes);
        Ok(solve_orthogonal_auxiliary(&a, &config.aux_options(which))?.x)
    };
    Ok(AuxiliaryParams {
        x: solve(&model.entities, 0)?,
        y: solve(&model.relations, 1)?,
    })
}

const SAMPLE_RETRIES: usize = 16;

/// Uniform entity in `0..n` avoiding `excluded` (at most two values).
fn draw_excluding<R: Rng + ?Sized>(rng: &mut R, n: u32, excluded: &[u32]) -> Option<u32> {
    let mut ex: Vec<u32> = excluded.iter().copied().filter(|&e| e < n).collect();
    ex.sort_unstable();
    ex.dedup();
    let avail = n.checked_sub(ex.len() as u32)?;
    if avail == 0 {
        return None;
    }
    let mut v = rng.random_range(0..avail);
    for &e in &ex {
        if v >= e {
            v += 1;
        }
    }
    Some(v)
}

fn corrupt<R: Rng + ?Sized>(
    rng: &mut R,
    pos: Triple,
    side: Side,
    n: u32,
    filter: Option<&FilterIndex>,
) -> Option<Triple> {
    let excluded = [pos.entity(side), pos.entity(side.other())];
    let tries = if filter.is_some() { SAMPLE_RETRIES } else { 1 };
    for _ in 0..tries {
        let e = draw_excluding(rng, n, &excluded)?;
        let neg = pos.with_entity(side, e);
        if filter.is_none_or(|f| !f.contains(&neg)) {
            return Some(neg);
        }
    }
    None
}

/// Draws `c` corruptions per positive. The side is a fair coin; the new
/// entity is uniform over entities other than the original one, and avoids
/// creating a self-loop when the universe allows it. With a filter, draws
/// that hit a known triple are retried, then the other side is tried.
pub fn sample_negatives<R: Rng + ?Sized>(
    triples: &[Triple],
    n_entities: usize,
    c: usize,
    rng: &mut R,
    filter: Option<&FilterIndex>,
) -> PairBatch {
    let n = n_entities as u32;
    let mut pairs = Vec::with_capacity(triples.len() * c);
    for &pos in triples {
        for _ in 0..c {
            let side = if rng.random::<bool>() { Side::Head } else { Side::Tail };
            let found = corrupt(rng, pos, side, n, filter)
                .map(|neg| (neg, side))
                .or_else(|| corrupt(rng, pos, side.other(), n, filter).map(|neg| (neg, side.other())))
                .or_else(|| {
                    // Nothing clean is left: accept a self-loop or a known triple.
                    draw_excluding(rng, n, &[pos.entity(side)]).map(|e| (pos.with_entity(side, e), side))
                });
            if let Some((negative, side)) = found {
                pairs.push(Pair {
                    positive: pos,
                    negative,
                    side,
                    active: true,
                });
            }
        }
    }
    PairBatch { pairs }
}

fn hinge_sum(model: &ModelParams, batch: &PairBatch, gamma: f64) -> f64 {
    batch
        .pairs
        .iter()
        .map(|p| {
            let g = gamma - f64::from(model.score(p.positive)) + f64::from(model.score(p.negative));
            g.max(0.0)
        })
        .sum()
}

/// The trace-penalised objective on a pair batch.
pub fn hinge_objective(model: &ModelParams, aux: &AuxiliaryParams, batch: &PairBatch, config: &TrainConfig) -> f64 {
    hinge_sum(model, batch, config.gamma)
        - 2.0 * config.alpha * code_trace(&model.entities, &aux.x)
        - 2.0 * config.beta * code_trace(&model.relations, &aux.y)
}

/// The distance-penalised form: hinge `+ α‖E − X‖²_F + β‖R − Y‖²_F`. For
/// feasible `X`, `Y` it exceeds [`hinge_objective`] by `2αkn + 2βkm`.
pub fn relaxed_objective(model: &ModelParams, aux: &AuxiliaryParams, batch: &PairBatch, config: &TrainConfig) -> f64 {
    let sq_dist = |codes: &BinaryCodeMatrix, z: &DenseMatrix| -> f64 {
        let mut total = 0.0;
        for i in 0..codes.count() {
            for j in 0..codes.k() {
                let d = codes.value(i, j) - z[(j, i)];
                total += d * d;
            }
        }
        total
    };
    hinge_sum(model, batch, config.gamma)
        + config.alpha * sq_dist(&model.entities, &aux.x)
        + config.beta * sq_dist(&model.relations, &aux.y)
}

/// Marks each pair active iff it violates the margin. Returns the active count.
pub fn active_pairs(model: &ModelParams, batch: &mut PairBatch, gamma: f64) -> usize {
    let mut count = 0;
    for p in &mut batch.pairs {
        let g = gamma - f64::from(model.score(p.positive)) + f64::from(model.score(p.negative));
        p.active = g > 0.0;
        count += usize::from(p.active);
    }
    count
}

/// What a code bit multiplies in one triple: the elementwise product of the
/// other two codes, as packed bits (set ↔ +1).
fn partner_words(a: &[u64], b: &[u64], k: usize, out: &mut Vec<u64>) {
    out.clear();
    out.extend(a.iter().zip(b).map(|(x, y)| !(x ^ y)));
    if let Some(last) = out.last_mut() {
        if !k.is_multiple_of(64) {
            *last &= (1u64 << (k % 64)) - 1;
        }
    }
}

/// One triple's dependence on the code being updated.
struct Term {
    /// +1 for the positive triple, −1 for the corruption.
    sign: i32,
    partner: Vec<u64>,
}

/// The terms a pair contributes for the variable being updated. Self-loop
/// triples contribute none when updating entities (their score does not
/// depend on the entity) and are skipped for relations as well.
fn pair_terms(model: &ModelParams, p: &Pair, target: Target) -> Vec<Term> {
    let k = model.k();
    let e = &model.entities;
    let r = &model.relations;
    let mut terms = Vec::with_capacity(2);
    for (sign, t) in [(1, p.positive), (-1, p.negative)] {
        if t.is_self_loop() {
            continue;
        }
        let mut partner = Vec::new();
        match target {
            Target::Entity(i) => {
                let rel = r.code(t.relation as usize).words();
                if t.head as usize == i {
                    partner_words(rel, e.code(t.tail as usize).words(), k, &mut partner);
                } else if t.tail as usize == i {
                    partner_words(rel, e.code(t.head as usize).words(), k, &mut partner);
                } else {
                    continue;
                }
            }
            Target::Relation(i) => {
                if t.relation as usize != i {
                    continue;
                }
                partner_words(
                    e.code(t.head as usize).words(),
                    e.code(t.tail as usize).words(),
                    k,
                    &mut partner,
                );
            }
        }
        terms.push(Term { sign, partner });
    }
    terms
}

#[derive(Debug, Clone, Copy)]
enum Target {
    Entity(usize),
    Relation(usize),
}

impl Target {
    fn describe(self) -> (&'static str, usize) {
        match self {
            Target::Entity(i) => ("entity", i),
            Target::Relation(i) => ("relation", i),
        }
    }

    fn mentioned_by(self, t: &Triple) -> bool {
        match self {
            Target::Entity(i) => t.head as usize == i || t.tail as usize == i,
            Target::Relation(i) => t.relation as usize == i,
        }
    }
}

fn check_pairs(pairs: &[Pair], target: Target) -> Result<(), LearnError> {
    for (idx, p) in pairs.iter().enumerate() {
        if !target.mentioned_by(&p.positive) && !target.mentioned_by(&p.negative) {
            let (what, index) = target.describe();
            return Err(LearnError::PairMismatch { pair: idx, what, index });
        }
    }
    Ok(())
}

/// Per-bit coefficients `Σ_pos partner − Σ_neg partner + 2·weight·z` over the
/// active pairs.
fn coefficients(model: &ModelParams, pairs: &[Pair], target: Target, weight: f64, z: &[f64]) -> Vec<f64> {
    let k = model.k();
    let mut counts = vec![0i64; k];
    for p in pairs.iter().filter(|p| p.active) {
        for term in pair_terms(model, p, target) {
            for (j, c) in counts.iter_mut().enumerate() {
                let bit = term.partner[j / 64] >> (j % 64) & 1;
                let v = if bit == 1 { 1 } else { -1 };
                *c += i64::from(term.sign * v);
            }
        }
    }
    counts
        .iter()
        .zip(z)
        .map(|(&c, &zj)| c as f64 + 2.0 * weight * zj)
        .collect()
}

fn column(m: &DenseMatrix, i: usize) -> Vec<f64> {
    if m.cols() == 0 {
        return vec![0.0; m.rows()];
    }
    m.column(i)
}

/// Coefficients `ê_i` for entity `i` (before any update).
pub fn entity_coefficients(
    i: usize,
    model: &ModelParams,
    aux: &AuxiliaryParams,
    pairs: &[Pair],
    alpha: f64,
) -> Result<Vec<f64>, LearnError> {
    let target = Target::Entity(i);
    check_pairs(pairs, target)?;
    Ok(coefficients(model, pairs, target, alpha, &column(&aux.x, i)))
}

/// Coefficients `r̂_i` for relation `i` (before any update).
pub fn relation_coefficients(
    i: usize,
    model: &ModelParams,
    aux: &AuxiliaryParams,
    pairs: &[Pair],
    beta: f64,
) -> Result<Vec<f64>, LearnError> {
    let target = Target::Relation(i);
    check_pairs(pairs, target)?;
    Ok(coefficients(model, pairs, target, beta, &column(&aux.y, i)))
}

/// Coefficients this close to zero count as ties. The count part is an
/// integer, so anything smaller is rounding in the penalty part.
const TIE_EPS: f64 = 1e-9;

fn apply_signs(codes: &mut BinaryCodeMatrix, i: usize, coeffs: &[f64]) -> usize {
    let mut flips = 0;
    for (j, &c) in coeffs.iter().enumerate() {
        if c.abs() <= TIE_EPS {
            continue;
        }
        let want = c > 0.0;
        if (codes.get(i, j) > 0) != want {
            codes.set(i, j, want);
            flips += 1;
        }
    }
    flips
}

/// Sign-rule update of every bit of entity `i` against the active pairs in
/// `pairs`. Returns the number of bits that changed.
pub fn dcd_update_entity(
    i: usize,
    model: &mut ModelParams,
    aux: &AuxiliaryParams,
    pairs: &[Pair],
    alpha: f64,
) -> Result<usize, LearnError> {
    let coeffs = entity_coefficients(i, model, aux, pairs, alpha)?;
    Ok(apply_signs(&mut model.entities, i, &coeffs))
}

/// Sign-rule update of every bit of relation `i`.
pub fn dcd_update_relation(
    i: usize,
    model: &mut ModelParams,
    aux: &AuxiliaryParams,
    pairs: &[Pair],
    beta: f64,
) -> Result<usize, LearnError> {
    let coeffs = relation_coefficients(i, model, aux, pairs, beta)?;
    Ok(apply_signs(&mut model.relations, i, &coeffs))
}

/// Sign-rule update that only keeps a flip if the exact objective over
/// `pairs` (all pairs touching the target, active or not) strictly drops.
/// Bits are visited in order and later bits see earlier flips.
fn guarded_update(
    target: Target,
    model: &mut ModelParams,
    z: &[f64],
    pairs: &[Pair],
    weight: f64,
    gamma: f64,
) -> usize {
    let k = model.k();
    let active: Vec<Pair> = pairs.iter().filter(|p| p.active).copied().collect();
    let coeffs = coefficients(model, &active, target, weight, z);
    // Margin slack g = γ − s_pos + s_neg of each pair and its terms.
    let mut slack: Vec<f64> = pairs
        .iter()
        .map(|p| gamma - f64::from(model.score(p.positive)) + f64::from(model.score(p.negative)))
        .collect();
    let terms: Vec<Vec<Term>> = pairs.iter().map(|p| pair_terms(model, p, target)).collect();
    // Self-loop relation terms are left out of the sign rule but still move
    // the exact objective.
    let loop_signs: Vec<i32> = match target {
        Target::Relation(i) => pairs
            .iter()
            .map(|p| {
                let mut s = 0;
                if p.positive.is_self_loop() && p.positive.relation as usize == i {
                    s -= 1;
                }
                if p.negative.is_self_loop() && p.negative.relation as usize == i {
                    s += 1;
                }
                s
            })
            .collect(),
        Target::Entity(_) => vec![0; pairs.len()],
    };
    let (codes, idx) = match target {
        Target::Entity(i) => (&mut model.entities, i),
        Target::Relation(i) => (&mut model.relations, i),
    };
    let mut flips = 0;
    for j in 0..k {
        let c = coeffs[j];
        if c.abs() <= TIE_EPS {
            continue;
        }
        let current = i32::from(codes.get(idx, j));
        let want = if c > 0.0 { 1 } else { -1 };
        if current == want {
            continue;
        }
        // Flipping bit j from `current` to `want` moves each score by
        // 2·want·partner_j; the slack moves by −Δs_pos + Δs_neg.
        let mut delta = -2.0 * weight * z[j] * f64::from(want - current);
        let mut moved = Vec::with_capacity(pairs.len());
        for (pi, ts) in terms.iter().enumerate() {
            let mut d = 0i32;
            for t in ts {
                let pj = if t.partner[j / 64] >> (j % 64) & 1 == 1 { 1 } else { -1 };
                d -= t.sign * 2 * want * pj;
            }
            d += loop_signs[pi] * 2 * want;
            if d != 0 {
                let old = slack[pi];
                let new = old + f64::from(d);
                delta += new.max(0.0) - old.max(0.0);
                moved.push((pi, new));
            }
        }
        if delta < -TIE_EPS {
            codes.set(idx, j, want > 0);
            for (pi, new) in moved {
                slack[pi] = new;
            }
            flips += 1;
        }
    }
    flips
}

/// Per-entity and per-relation lists of the pairs that mention them.
struct Incidence {
    by_entity: Vec<Vec<u32>>,
    by_relation: Vec<Vec<u32>>,
}

impl Incidence {
    fn build(batch: &PairBatch, n: usize, m: usize) -> Self {
        let mut by_entity = vec![Vec::new(); n];
        let mut by_relation = vec![Vec::new(); m];
        for (idx, p) in batch.pairs.iter().enumerate() {
            let idx = idx as u32;
            let mut ents = [
                p.positive.head,
                p.positive.tail,
                p.negative.head,
                p.negative.tail,
            ];
            ents.sort_unstable();
            let mut last = None;
            for e in ents {
                if last != Some(e) {
                    by_entity[e as usize].push(idx);
                    last = Some(e);
                }
            }
            by_relation[p.positive.relation as usize].push(idx);
        }
        Self {
            by_entity,
            by_relation,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EpochStats {
    pub entity_flips: usize,
    pub relation_flips: usize,
    pub active_before_entities: usize,
    pub active_before_relations: usize,
}

/// Runs the entity sweep, relation sweep and auxiliary update on a fixed
/// batch. The batch's active flags are recomputed before each sweep.
pub fn sweep(
    model: &mut ModelParams,
    aux: &mut AuxiliaryParams,
    batch: &mut PairBatch,
    config: &TrainConfig,
) -> Result<EpochStats, LearnError> {
    sweep_with(model, aux, batch, config, &mut |_, _| {})
}

/// [`sweep`], calling `on_step` after every entity update, every relation
/// update and the auxiliary update.
pub fn sweep_with(
    model: &mut ModelParams,
    aux: &mut AuxiliaryParams,
    batch: &mut PairBatch,
    config: &TrainConfig,
    on_step: &mut dyn FnMut(&ModelParams, &AuxiliaryParams),
) -> Result<EpochStats, LearnError> {
    let n = model.entities.count();
    let m = model.relations.count();
    let inc = Incidence::build(batch, n, m);
    let mut stats = EpochStats {
        active_before_entities: active_pairs(model, batch, config.gamma),
        ..EpochStats::default()
    };
    let mut scratch: Vec<Pair> = Vec::new();
    for i in 0..n {
        gather(&batch.pairs, &inc.by_entity[i], config.monotone_guard, &mut scratch);
        if scratch.is_empty() && config.alpha == 0.0 {
            continue;
        }
        stats.entity_flips += if config.monotone_guard {
            let z = column(&aux.x, i);
            guarded_update(Target::Entity(i), model, &z, &scratch, config.alpha, config.gamma)
        } else {
            dcd_update_entity(i, model, aux, &scratch, config.alpha)?
        };
        on_step(model, aux);
    }
    stats.active_before_relations = active_pairs(model, batch, config.gamma);
    for i in 0..m {
        gather(&batch.pairs, &inc.by_relation[i], config.monotone_guard, &mut scratch);
        if scratch.is_empty() && config.beta == 0.0 {
            continue;
        }
        stats.relation_flips += if config.monotone_guard {
            let z = column(&aux.y, i);
            guarded_update(Target::Relation(i), model, &z, &scratch, config.beta, config.gamma)
        } else {
            dcd_update_relation(i, model, aux, &scratch, config.beta)?
        };
        on_step(model, aux);
    }
    *aux = update_auxiliary(model, config)?;
    on_step(model, aux);
    Ok(stats)
}

fn gather(pairs: &[Pair], idx: &[u32], all: bool, out: &mut Vec<Pair>) {
    out.clear();
    out.extend(
        idx.iter()
            .map(|&p| pairs[p as usize])
            .filter(|p| all || p.active),
    );
}

/// One full round: draw (or reuse) the pair batch, sweep, record the
/// objective on that batch.
pub fn train_epoch(
    train: &[Triple],
    n_entities: usize,
    model: &mut ModelParams,
    aux: &mut AuxiliaryParams,
    state: &mut TrainState,
    config: &TrainConfig,
    filter: Option<&FilterIndex>,
) -> Result<EpochStats, LearnError> {
    let resample = state.batch.is_none() || config.negative_schedule == NegativeSchedule::PerEpoch;
    if resample {
        state.batch = Some(sample_negatives(
            train,
            n_entities,
            config.negatives_per_positive,
            &mut state.rng,
            filter,
        ));
    }
    let batch = state.batch.as_mut().unwrap();
    if state.initial_objective.is_none() {
        state.initial_objective = Some(hinge_objective(model, aux, batch, config));
    }
    let stats = sweep(model, aux, batch, config)?;
    let objective = hinge_objective(model, aux, batch, config);
    state.epoch += 1;
    state.objective_history.push(objective);
    state.entity_flips.push(stats.entity_flips);
    state.relation_flips.push(stats.relation_flips);
    debug!(
        "epoch {}: objective {objective:.6}, flips {}/{}, active {}/{}",
        state.epoch,
        stats.entity_flips,
        stats.relation_flips,
        stats.active_before_entities,
        batch.len()
    );
    Ok(stats)
}

/// Outcome of [`fit`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: ModelParams,
    pub aux: AuxiliaryParams,
    pub state: TrainState,
    pub self_loops_removed: usize,
}

/// Trains on `dataset.train` until a round flips no bit, the objective
/// settles, or `max_epochs` is reached.
pub fn fit(dataset: &Dataset, config: &TrainConfig) -> Result<FitResult, LearnError> {
    config.validate()?;
    let (train, self_loops_removed) = remove_self_loops(&dataset.train);
    if train.is_empty() {
        return Err(LearnError::EmptyTrain);
    }
    let n = dataset.num_entities();
    let m = dataset.num_relations();
    let (mut model, mut aux) = init_params(n, m, config)?;
    let mut state = TrainState::new(config);
    let filter = config
        .filter_false_negatives
        .then(|| FilterIndex::from_triples(train.iter()));

    state.stop_reason = Some(StopReason::MaxEpochs);
    for _ in 0..config.max_epochs {
        let stats = train_epoch(
            &train.triples,
            n,
            &mut model,
            &mut aux,
            &mut state,
            config,
            filter.as_ref(),
        )?;
        if stats.entity_flips + stats.relation_flips == 0 {
            state.stop_reason = Some(StopReason::ZeroFlips);
            break;
        }
        let cur = *state.objective_history.last().unwrap();
        let prev = match state.objective_history.len() {
            1 => state.initial_objective.unwrap(),
            len => state.objective_history[len - 2],
        };
        if (prev - cur).abs() <= config.convergence_tol * prev.abs().max(f64::MIN_POSITIVE) {
            state.stop_reason = Some(StopReason::Converged);
            break;
        }
    }
    info!(
        "trained {} epochs ({}), final objective {:?}",
        state.epoch,
        state.stop_reason.unwrap(),
        state.objective_history.last()
    );
    Ok(FitResult {
        model,
        aux,
        state,
        self_loops_removed,
    })
}

/// Distinct entities appearing in a batch, for diagnostics.
pub fn batch_entities(batch: &PairBatch) -> HashSet<u32> {
    batch
        .pairs
        .iter()
        .flat_map(|p| [p.positive.head, p.positive.tail, p.negative.head, p.negative.tail])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TripleSet;
    use rand::Rng;
    use crate::linalg::DenseMatrix;
    use proptest::prelude::*;

    fn random_instance(seed: u64, n: usize, m: usize, k: usize, triples: usize) -> (Vec<Triple>, TrainConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        while out.len() < triples {
            let h = rng.random_range(0..n as u32);
            let t = rng.random_range(0..n as u32);
            if h != t {
                out.push(Triple::new(h, rng.random_range(0..m as u32), t));
            }
        }
        let mut cfg = TrainConfig::with_k(k);
        cfg.seed = seed;
        cfg.alpha = 0.3;
        cfg.beta = 0.2;
        (out, cfg)
    }

    fn naive_score(model: &ModelParams, t: Triple) -> i64 {
        let h = model.entities.signs(t.head as usize);
        let r = model.relations.signs(t.relation as usize);
        let tt = model.entities.signs(t.tail as usize);
        (0..h.len()).map(|j| i64::from(h[j]) * i64::from(r[j]) * i64::from(tt[j])).sum()
    }

    /// Frozen surrogate restricted to what depends on `target`: hinge terms of
    /// active pairs (self-loop triples dropped) minus the trace penalty.
    fn surrogate(model: &ModelParams, aux: &AuxiliaryParams, pairs: &[Pair], target: Target, w: f64) -> f64 {
        let mut total = 0.0;
        for p in pairs.iter().filter(|p| p.active) {
            for (sign, t) in [(-1.0, p.positive), (1.0, p.negative)] {
                if !t.is_self_loop() && target.mentioned_by(&t) {
                    total += sign * naive_score(model, t) as f64;
                }
            }
        }
        let (codes, z, i) = match target {
            Target::Entity(i) => (&model.entities, &aux.x, i),
            Target::Relation(i) => (&model.relations, &aux.y, i),
        };
        let trace: f64 = (0..codes.k()).map(|j| codes.value(i, j) * z[(j, i)]).sum();
        total - 2.0 * w * trace
    }

    fn brute_force(model: &ModelParams, aux: &AuxiliaryParams, pairs: &[Pair], target: Target, w: f64) -> Vec<i8> {
        let mut m = model.clone();
        for j in 0..m.k() {
            let set = |m: &mut ModelParams, v: bool| match target {
                Target::Entity(i) => m.entities.set(i, j, v),
                Target::Relation(i) => m.relations.set(i, j, v),
            };
            let cur = match target {
                Target::Entity(i) => m.entities.get(i, j) > 0,
                Target::Relation(i) => m.relations.get(i, j) > 0,
            };
            set(&mut m, true);
            let plus = surrogate(&m, aux, pairs, target, w);
            set(&mut m, false);
            let minus = surrogate(&m, aux, pairs, target, w);
            set(&mut m, if plus < minus - 1e-9 { true } else if minus < plus - 1e-9 { false } else { cur });
        }
        match target {
            Target::Entity(i) => m.entities.signs(i),
            Target::Relation(i) => m.relations.signs(i),
        }
    }

    fn touching(batch: &PairBatch, target: Target) -> Vec<Pair> {
        batch
            .pairs
            .iter()
            .filter(|p| target.mentioned_by(&p.positive) || target.mentioned_by(&p.negative))
            .copied()
            .collect()
    }

    #[test]
    fn saturated_margin_contributes_nothing() {
        let k = 8;
        let entities = BinaryCodeMatrix::from_sign_rows(k, &[vec![1i8; 8], vec![1; 8], vec![-1; 8]]).unwrap();
        let relations = BinaryCodeMatrix::from_sign_rows(k, &[vec![1i8; 8]]).unwrap();
        let model = ModelParams { entities, relations };
        let pos = Triple::new(0, 0, 1);
        let neg = Triple::new(0, 0, 2);
        assert_eq!((model.score(pos), model.score(neg)), (8, -8));
        let mut batch = PairBatch {
            pairs: vec![Pair { positive: pos, negative: neg, side: Side::Tail, active: true }],
        };
        let mut cfg = TrainConfig::with_k(k);
        cfg.alpha = 0.0;
        cfg.beta = 0.0;
        let aux = AuxiliaryParams { x: DenseMatrix::zeros(k, 3), y: DenseMatrix::zeros(k, 1) };
        assert_eq!(hinge_objective(&model, &aux, &batch, &cfg), 0.0);
        assert_eq!(active_pairs(&model, &mut batch, cfg.gamma), 0);
        assert_eq!(active_pairs(&model, &mut batch, 17.0), 1);
    }

    #[test]
    fn equal_scores_are_active() {
        let (train, cfg) = random_instance(1, 10, 2, 8, 20);
        let (model, _) = init_params(10, 2, &cfg).unwrap();
        let mut batch = PairBatch {
            pairs: vec![Pair { positive: train[0], negative: train[0], side: Side::Head, active: false }],
        };
        assert_eq!(active_pairs(&model, &mut batch, 0.5), 1);
    }

    #[test]
    fn negatives_change_exactly_one_side() {
        let (train, _) = random_instance(3, 25, 3, 8, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = sample_negatives(&train, 25, 3, &mut rng, None);
        assert_eq!(batch.len(), 600);
        for (p, chunk) in train.iter().zip(batch.pairs.chunks(3)) {
            for q in chunk {
                assert_eq!(q.positive, *p);
                assert_ne!(q.negative, *p);
                assert!(!q.negative.is_self_loop());
                assert_eq!(q.negative.entity(q.side.other()), p.entity(q.side.other()));
                assert_eq!(q.negative.relation, p.relation);
            }
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(batch, sample_negatives(&train, 25, 3, &mut rng2, None));
    }

    #[test]
    fn two_entities_still_yield_a_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos = Triple::new(0, 0, 1);
        let batch = sample_negatives(&[pos], 2, 5, &mut rng, None);
        assert_eq!(batch.len(), 5);
        for p in &batch.pairs {
            assert_ne!(p.negative, pos);
        }
        assert!(sample_negatives(&[Triple::new(0, 0, 0)], 1, 1, &mut rng, None).is_empty());
    }

    #[test]
    fn exhausted_side_switches_under_filtering() {
        // Every clean tail corruption of (0, r0, ·) is a known triple.
        let known: Vec<Triple> = (1..6).map(|t| Triple::new(0, 0, t)).collect();
        let filter = FilterIndex::from_triples(known.iter());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = sample_negatives(&known[..1], 6, 50, &mut rng, Some(&filter));
        for p in &batch.pairs {
            assert_eq!(p.side, Side::Head);
            assert!(!filter.contains(&p.negative));
        }
    }

    #[test]
    fn relaxed_and_trace_forms_differ_by_constant() {
        for seed in 0..10 {
            let (train, cfg) = random_instance(seed, 12, 4, 3, 40);
            let (model, aux) = init_params(12, 4, &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = sample_negatives(&train, 12, 2, &mut rng, None);
            let gap = relaxed_objective(&model, &aux, &batch, &cfg) - hinge_objective(&model, &aux, &batch, &cfg);
            let want = 2.0 * cfg.alpha * 3.0 * 12.0 + 2.0 * cfg.beta * 3.0 * 4.0;
            assert!((gap - want).abs() <= 1e-9 * want, "{gap} vs {want}");
        }
    }

    #[test]
    fn sign_rule_matches_per_bit_brute_force() {
        for seed in 0..20 {
            let (train, cfg) = random_instance(seed, 15, 4, 13, 60);
            let (mut model, aux) = init_params(15, 4, &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            let mut batch = sample_negatives(&train, 15, 2, &mut rng, None);
            active_pairs(&model, &mut batch, 5.0);
            for i in 0..15 {
                let pairs = touching(&batch, Target::Entity(i));
                let want = brute_force(&model, &aux, &pairs, Target::Entity(i), cfg.alpha);
                dcd_update_entity(i, &mut model, &aux, &pairs, cfg.alpha).unwrap();
                assert_eq!(model.entities.signs(i), want, "seed {seed} entity {i}");
            }
            active_pairs(&model, &mut batch, 5.0);
            for i in 0..4 {
                let pairs = touching(&batch, Target::Relation(i));
                let want = brute_force(&model, &aux, &pairs, Target::Relation(i), cfg.beta);
                dcd_update_relation(i, &mut model, &aux, &pairs, cfg.beta).unwrap();
                assert_eq!(model.relations.signs(i), want, "seed {seed} relation {i}");
            }
        }
    }

    #[test]
    fn unguarded_sweep_is_the_sign_rule_in_order() {
        let (train, mut cfg) = random_instance(11, 12, 3, 9, 50);
        cfg.monotone_guard = false;
        cfg.gamma = 4.0;
        let (model, aux) = init_params(12, 3, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_negatives(&train, 12, 1, &mut rng, None);

        let (mut a, mut aux_a, mut batch_a) = (model.clone(), aux.clone(), batch.clone());
        sweep(&mut a, &mut aux_a, &mut batch_a, &cfg).unwrap();

        let (mut b, mut batch_b) = (model, batch);
        active_pairs(&b, &mut batch_b, cfg.gamma);
        for i in 0..12 {
            let pairs: Vec<Pair> = touching(&batch_b, Target::Entity(i)).into_iter().filter(|p| p.active).collect();
            dcd_update_entity(i, &mut b, &aux, &pairs, cfg.alpha).unwrap();
        }
        active_pairs(&b, &mut batch_b, cfg.gamma);
        for i in 0..3 {
            let pairs: Vec<Pair> = touching(&batch_b, Target::Relation(i)).into_iter().filter(|p| p.active).collect();
            dcd_update_relation(i, &mut b, &aux, &pairs, cfg.beta).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn zero_coefficient_keeps_the_bit() {
        let k = 4;
        let entities = BinaryCodeMatrix::from_sign_rows(k, &[vec![1i8, -1, 1, -1], vec![1; 4], vec![1; 4]]).unwrap();
        let relations = BinaryCodeMatrix::from_sign_rows(k, &[vec![1i8; 4]]).unwrap();
        let mut model = ModelParams { entities, relations };
        let aux = AuxiliaryParams { x: DenseMatrix::zeros(k, 3), y: DenseMatrix::zeros(k, 1) };
        // Positive and negative share the partner code, so every coefficient is 0.
        let pair = Pair {
            positive: Triple::new(0, 0, 1),
            negative: Triple::new(0, 0, 2),
            side: Side::Tail,
            active: true,
        };
        assert_eq!(dcd_update_entity(0, &mut model, &aux, &[pair], 0.0).unwrap(), 0);
        assert_eq!(model.entities.signs(0), vec![1, -1, 1, -1]);
    }

    #[test]
    fn pairs_must_mention_the_target() {
        let (_, cfg) = random_instance(0, 5, 2, 4, 1);
        let (mut model, aux) = init_params(5, 2, &cfg).unwrap();
        let pair = Pair {
            positive: Triple::new(1, 0, 2),
            negative: Triple::new(1, 0, 3),
            side: Side::Tail,
            active: true,
        };
        assert!(matches!(
            dcd_update_entity(4, &mut model, &aux, &[pair], 0.1),
            Err(LearnError::PairMismatch { what: "entity", index: 4, .. })
        ));
        assert!(matches!(
            dcd_update_relation(1, &mut model, &aux, &[pair], 0.1),
            Err(LearnError::PairMismatch { what: "relation", .. })
        ));
    }

    #[test]
    fn negating_x_mirrors_the_penalty_part() {
        let (train, cfg) = random_instance(5, 10, 2, 7, 30);
        let (model, aux) = init_params(10, 2, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_negatives(&train, 10, 1, &mut rng, None);
        let neg_aux = AuxiliaryParams { x: DenseMatrix::from_fn(7, 10, |r, c| -aux.x[(r, c)]), y: aux.y.clone() };
        for i in 0..10 {
            let pairs = touching(&batch, Target::Entity(i));
            let a = entity_coefficients(i, &model, &aux, &pairs, cfg.alpha).unwrap();
            let b = entity_coefficients(i, &model, &neg_aux, &pairs, cfg.alpha).unwrap();
            let none = entity_coefficients(i, &model, &aux, &pairs, 0.0).unwrap();
            for j in 0..7 {
                assert!((a[j] + b[j] - 2.0 * none[j]).abs() < 1e-12);
                assert!((a[j] - b[j] - 4.0 * cfg.alpha * aux.x[(j, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn auxiliary_update_does_not_lower_the_trace() {
        let (train, mut cfg) = random_instance(8, 20, 3, 6, 80);
        cfg.gamma = 3.0;
        let (mut model, mut aux) = init_params(20, 3, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut batch = sample_negatives(&train, 20, 1, &mut rng, None);
        for _ in 0..3 {
            let before = aux.clone();
            sweep(&mut model, &mut aux, &mut batch, &cfg).unwrap();
            let old = code_trace(&model.entities, &before.x);
            assert!(code_trace(&model.entities, &aux.x) >= old - 1e-6 * (6.0 * 20.0));
        }
    }

    #[test]
    fn fit_with_zero_epochs_returns_the_initialisation() {
        let (train, mut cfg) = random_instance(2, 10, 2, 8, 20);
        cfg.max_epochs = 0;
        let d = Dataset {
            vocab: crate::data::Vocabulary::from_names(
                (0..10).map(|i| format!("e{i}")).collect(),
                vec!["a".into(), "b".into()],
            )
            .unwrap(),
            train: TripleSet::new(train),
            valid: TripleSet::default(),
            test: TripleSet::default(),
        };
        let fit0 = fit(&d, &cfg).unwrap();
        let (model, _) = init_params(10, 2, &cfg).unwrap();
        assert_eq!(fit0.model, model);
        assert!(fit0.state.objective_history.is_empty());
    }

    #[test]
    fn fit_drops_self_loops_and_rejects_empty_train() {
        let d = Dataset {
            vocab: crate::data::Vocabulary::from_names(vec!["a".into(), "b".into()], vec!["r".into()]).unwrap(),
            train: TripleSet::new(vec![Triple::new(0, 0, 0)]),
            valid: TripleSet::default(),
            test: TripleSet::default(),
        };
        assert!(matches!(fit(&d, &TrainConfig::with_k(4)), Err(LearnError::EmptyTrain)));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::with_k(8);
        assert!(c.validate().is_ok());
        c.gamma = 0.0;
        assert!(c.validate().is_err());
        let c = TrainConfig { k: 0, ..TrainConfig::with_k(8) };
        assert!(c.validate().is_err());
        let c = TrainConfig { negatives_per_positive: 0, ..TrainConfig::with_k(8) };
        assert!(c.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn guarded_epochs_never_raise_the_batch_objective(
            seed in 0u64..1000,
            n in 4usize..25,
            m in 1usize..5,
            k in 1usize..17,
            gamma_frac in 0.05f64..1.5,
        ) {
            let (train, mut cfg) = random_instance(seed, n, m, k, 3 * n);
            cfg.gamma = (gamma_frac * k as f64).max(0.5);
            let (mut model, mut aux) = init_params(n, m, &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
            let mut batch = sample_negatives(&train, n, 2, &mut rng, None);
            let mut prev = hinge_objective(&model, &aux, &batch, &cfg);
            for _ in 0..4 {
                sweep(&mut model, &mut aux, &mut batch, &cfg).unwrap();
                let cur = hinge_objective(&model, &aux, &batch, &cfg);
                prop_assert!(cur <= prev + 1e-6, "{} > {}", cur, prev);
                prop_assert!(model.entities.check_pads().is_ok());
                prop_assert!(model.relations.check_pads().is_ok());
                prev = cur;
            }
        }

        #[test]
        fn fit_is_deterministic(seed in 0u64..100) {
            let (train, mut cfg) = random_instance(seed, 12, 3, 10, 40);
            cfg.max_epochs = 5;
            cfg.exec = Exec::Sequential;
            let d = Dataset {
                vocab: crate::data::Vocabulary::from_names(
                    (0..12).map(|i| format!("e{i}")).collect(),
                    (0..3).map(|i| format!("r{i}")).collect(),
                )
                .unwrap(),
                train: TripleSet::new(train),
                valid: TripleSet::default(),
                test: TripleSet::default(),
            };
            let a = fit(&d, &cfg).unwrap();
            let b = fit(&d, &cfg).unwrap();
            prop_assert_eq!(&a.model, &b.model);
            prop_assert_eq!(&a.state.objective_history, &b.state.objective_history);
            prop_assert!(a.state.objective_history.len() <= 5);
        }
    }
}
