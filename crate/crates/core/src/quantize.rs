//! Post-hoc hashing of continuous embeddings into binary codes.
//!
//! One scalar quantizer is fit on the pooled entity and relation values.
//! Each value becomes `bits_per_value` code bits holding its level index in
//! natural binary, most significant bit first (bit 0 ↔ −1). The sign method
//! uses one bit per value, `+1` iff the value is `≥ 0`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::baselines::{distmult_unchecked, transe_unchecked, ContinuousEmbedding, ModelKind, Norm};
use crate::bitpack::{self, BinaryCodeMatrix, BitpackError, PackedCode};
use crate::data::Triple;
use crate::fileio::write_atomic;

#[derive(Debug, Error)]
pub enum QuantizeError {
    #[error("need at least 2 levels, got {0}")]
    TooFewLevels(usize),
    #[error("values span a degenerate range")]
    DegenerateRange,
    #[error("only {distinct} distinct values for {levels} levels")]
    TooFewDistinct { distinct: usize, levels: usize },
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("reconstruct mode needs the fitted quantizer")]
    MissingQuantizer,
    #[error("codes have {got} bits, expected {want}")]
    CodeLength { got: usize, want: usize },
    #[error("bad quantizer sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Bitpack(#[from] BitpackError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn bits_for_levels(levels: usize) -> usize {
    (usize::BITS - (levels - 1).leading_zeros()) as usize
}

/// Equal-width cells over `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformQuantizer {
    pub lo: f64,
    pub hi: f64,
    pub levels: usize,
}

impl UniformQuantizer {
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.levels as f64
    }

    pub fn bits_per_value(&self) -> usize {
        bits_for_levels(self.levels)
    }

    /// `floor((v − lo) / width)`, clamped into `0..L`.
    pub fn index(&self, v: f64) -> usize {
        let i = ((v - self.lo) / self.width()).floor();
        if i <= 0.0 {
            0
        } else {
            (i as usize).min(self.levels - 1)
        }
    }

    /// Cell midpoint.
    pub fn decode(&self, index: usize) -> f64 {
        self.lo + (index as f64 + 0.5) * self.width()
    }
}

pub fn fit_uniform(values: &[f64], levels: usize) -> Result<UniformQuantizer, QuantizeError> {
    if levels < 2 {
        return Err(QuantizeError::TooFewLevels(levels));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(QuantizeError::NonFinite);
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo < hi) {
        return Err(QuantizeError::DegenerateRange);
    }
    Ok(UniformQuantizer { lo, hi, levels })
}

/// Lloyd-Max levels and the midpoint thresholds between them.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydQuantizer {
    pub levels: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Mean squared reconstruction error after each iteration.
    pub mse_history: Vec<f64>,
}

impl LloydQuantizer {
    pub fn bits_per_value(&self) -> usize {
        bits_for_levels(self.levels.len())
    }

    /// Cell `i` holds `thresholds[i−1] ≤ v < thresholds[i]`.
    pub fn index(&self, v: f64) -> usize {
        self.thresholds.partition_point(|&t| t <= v)
    }

    pub fn decode(&self, index: usize) -> f64 {
        self.levels[index]
    }
}

fn midpoints(levels: &[f64]) -> Vec<f64> {
    levels.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Per-cell `[start, end)` ranges of `sorted` under `thresholds`.
fn cells(sorted: &[f64], thresholds: &[f64]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(thresholds.len() + 1);
    let mut start = 0;
    for &t in thresholds {
        let end = start + sorted[start..].partition_point(|&v| v < t);
        out.push((start, end));
        start = end;
    }
    out.push((start, sorted.len()));
    out
}

fn mse(sorted: &[f64], cells: &[(usize, usize)], levels: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&(a, b), &l) in cells.iter().zip(levels) {
        total += sorted[a..b].iter().map(|v| (v - l) * (v - l)).sum::<f64>();
    }
    total / sorted.len() as f64
}

/// Alternates midpoint thresholds and cell means until no level moves by
/// `tol` or more, or `max_iter` iterations have run.
pub fn fit_lloyd(values: &[f64], levels: usize, tol: f64, max_iter: usize) -> Result<LloydQuantizer, QuantizeError> {
    if levels < 2 {
        return Err(QuantizeError::TooFewLevels(levels));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(QuantizeError::NonFinite);
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < levels {
        return Err(QuantizeError::TooFewDistinct {
            distinct: distinct.len(),
            levels,
        });
    }
    let n = sorted.len();
    let quantile = |src: &[f64], i: usize| src[(((i as f64 + 0.5) / levels as f64) * src.len() as f64) as usize];
    let mut lv: Vec<f64> = (0..levels).map(|i| quantile(&sorted, i)).collect();
    if lv.windows(2).any(|w| w[0] >= w[1]) {
        lv = (0..levels).map(|i| quantile(&distinct, i)).collect();
    }
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for &v in &sorted {
        acc += v;
        prefix.push(acc);
    }
    let (lo, hi) = (sorted[0], sorted[n - 1]);

    let mut history = Vec::new();
    for _ in 0..max_iter {
        let th = midpoints(&lv);
        let cs = cells(&sorted, &th);
        let mut next = Vec::with_capacity(levels);
        for (i, &(a, b)) in cs.iter().enumerate() {
            if b > a {
                next.push((prefix[b] - prefix[a]) / (b - a) as f64);
            } else {
                let left = if i == 0 { lo } else { th[i - 1] };
                let right = if i == levels - 1 { hi } else { th[i] };
                next.push(0.5 * (left + right));
            }
        }
        history.push(mse(&sorted, &cs, &next));
        let moved = lv.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        lv = next;
        if moved < tol {
            break;
        }
    }
    Ok(LloydQuantizer {
        thresholds: midpoints(&lv),
        levels: lv,
        mse_history: history,
    })
}

/// A fitted scalar quantizer.
#[derive(Debug, Clone, PartialEq)]
pub enum Quantizer {
    Sign,
    Uniform(UniformQuantizer),
    Lloyd(LloydQuantizer),
}

impl Quantizer {
    pub fn method_name(&self) -> &'static str {
        match self {
            Quantizer::Sign => "sign",
            Quantizer::Uniform(_) => "equal",
            Quantizer::Lloyd(_) => "lloyd",
        }
    }

    pub fn num_levels(&self) -> usize {
        match self {
            Quantizer::Sign => 2,
            Quantizer::Uniform(q) => q.levels,
            Quantizer::Lloyd(q) => q.levels.len(),
        }
    }

    pub fn bits_per_value(&self) -> usize {
        match self {
            Quantizer::Sign => 1,
            Quantizer::Uniform(q) => q.bits_per_value(),
            Quantizer::Lloyd(q) => q.bits_per_value(),
        }
    }

    pub fn index(&self, v: f64) -> usize {
        match self {
            Quantizer::Sign => usize::from(v >= 0.0),
            Quantizer::Uniform(q) => q.index(v),
            Quantizer::Lloyd(q) => q.index(v),
        }
    }

    /// Representative value of a level; `±1` for sign.
    pub fn decode(&self, index: usize) -> f64 {
        match self {
            Quantizer::Sign => {
                if index == 1 {
                    1.0
                } else {
                    -1.0
                }
            }
            Quantizer::Uniform(q) => q.decode(index),
            Quantizer::Lloyd(q) => q.decode(index),
        }
    }

    /// Sign bits (`+1` ↔ true) of one value, most significant first.
    pub fn encode_value(&self, v: f64) -> Vec<bool> {
        let bits = self.bits_per_value();
        let idx = self.index(v);
        (0..bits).rev().map(|b| idx >> b & 1 == 1).collect()
    }

    fn decode_bits(&self, code: PackedCode<'_>, value: usize) -> f64 {
        let bits = self.bits_per_value();
        let mut idx = 0usize;
        for b in 0..bits {
            idx = idx << 1 | usize::from(code.get(value * bits + b) > 0);
        }
        self.decode(idx.min(self.num_levels() - 1))
    }

    /// Reconstructed real vector of a code.
    pub fn decode_code(&self, code: PackedCode<'_>) -> Vec<f64> {
        let dim = code.k() / self.bits_per_value();
        (0..dim).map(|v| self.decode_bits(code, v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMethod {
    Sign,
    /// Equal-width cells with the given number of levels.
    Uniform(usize),
    Lloyd(usize),
}

pub const LLOYD_TOL: f64 = 1e-7;
pub const LLOYD_MAX_ITER: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Score the ±1 codes with the source model's function.
    Binary,
    /// Decode to level values and score those.
    Reconstruct,
}

impl ScoreMode {
    pub fn name(self) -> &'static str {
        match self {
            ScoreMode::Binary => "binary",
            ScoreMode::Reconstruct => "reconstruct",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "binary" => Some(ScoreMode::Binary),
            "reconstruct" => Some(ScoreMode::Reconstruct),
            _ => None,
        }
    }
}

/// Codes produced by a quantizer from a continuous model.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub kind: ModelKind,
    pub norm: Norm,
    pub dim: usize,
    pub quantizer: Quantizer,
    pub entities: BinaryCodeMatrix,
    pub relations: BinaryCodeMatrix,
}

fn encode_rows(q: &Quantizer, values: &[f64], dim: usize) -> BinaryCodeMatrix {
    let bits = q.bits_per_value();
    let count = values.len() / dim;
    let mut codes = BinaryCodeMatrix::new(bits * dim, count);
    for (i, row) in values.chunks(dim).enumerate() {
        for (v, &x) in row.iter().enumerate() {
            for (b, bit) in q.encode_value(x).into_iter().enumerate() {
                if bit {
                    codes.set(i, v * bits + b, true);
                }
            }
        }
    }
    codes
}

pub fn quantize_embedding(cont: &ContinuousEmbedding, method: QuantMethod) -> Result<QuantizedModel, QuantizeError> {
    let pooled: Vec<f64> = cont.entities.iter().chain(&cont.relations).copied().collect();
    let quantizer = match method {
        QuantMethod::Sign => Quantizer::Sign,
        QuantMethod::Uniform(l) => Quantizer::Uniform(fit_uniform(&pooled, l)?),
        QuantMethod::Lloyd(l) => Quantizer::Lloyd(fit_lloyd(&pooled, l, LLOYD_TOL, LLOYD_MAX_ITER)?),
    };
    Ok(QuantizedModel {
        kind: cont.kind,
        norm: cont.norm,
        dim: cont.dim,
        entities: encode_rows(&quantizer, &cont.entities, cont.dim),
        relations: encode_rows(&quantizer, &cont.relations, cont.dim),
        quantizer,
    })
}

/// `−‖h + r − t‖₁` over ±1 codes. Each coordinate contributes 3 when
/// `h = r = −t` and 1 otherwise.
pub(crate) fn transe_binary_unchecked(k: usize, h: &[u64], r: &[u64], t: &[u64]) -> f64 {
    let threes: u32 = h
        .iter()
        .zip(r)
        .zip(t)
        .map(|((h, r), t)| (!(h ^ r) & (h ^ t)).count_ones())
        .sum();
    -((k as u64 + 2 * u64::from(threes)) as f64)
}

/// Scores one triple of quantized codes.
pub fn quantized_score(
    kind: ModelKind,
    norm: Norm,
    h: PackedCode<'_>,
    r: PackedCode<'_>,
    t: PackedCode<'_>,
    mode: ScoreMode,
    quantizer: Option<&Quantizer>,
) -> Result<f64, QuantizeError> {
    let k = h.k();
    for c in [r, t] {
        if c.k() != k {
            return Err(QuantizeError::CodeLength { got: c.k(), want: k });
        }
    }
    match mode {
        ScoreMode::Binary => Ok(match kind {
            ModelKind::TransE => transe_binary_unchecked(k, h.words(), r.words(), t.words()),
            ModelKind::DistMult => f64::from(bitpack::score_unchecked(k, h.words(), r.words(), t.words())),
        }),
        ScoreMode::Reconstruct => {
            let q = quantizer.ok_or(QuantizeError::MissingQuantizer)?;
            if !k.is_multiple_of(q.bits_per_value()) {
                return Err(QuantizeError::CodeLength { got: k, want: q.bits_per_value() });
            }
            let (h, r, t) = (q.decode_code(h), q.decode_code(r), q.decode_code(t));
            Ok(match kind {
                ModelKind::TransE => transe_unchecked(&h, &r, &t, norm),
                ModelKind::DistMult => distmult_unchecked(&h, &r, &t),
            })
        }
    }
}

impl QuantizedModel {
    pub fn k(&self) -> usize {
        self.entities.k()
    }

    pub fn memory_bits(&self) -> u64 {
        self.entities.memory_bits() + self.relations.memory_bits()
    }

    pub fn score(&self, t: Triple, mode: ScoreMode) -> f64 {
        let (h, r, tt) = (
            self.entities.code(t.head as usize),
            self.relations.code(t.relation as usize),
            self.entities.code(t.tail as usize),
        );
        quantized_score(self.kind, self.norm, h, r, tt, mode, Some(&self.quantizer)).expect("codes share one length")
    }

    /// Real-valued model with every value replaced by its level.
    pub fn reconstruct(&self) -> ContinuousEmbedding {
        let decode = |codes: &BinaryCodeMatrix| -> Vec<f64> {
            (0..codes.count()).flat_map(|i| self.quantizer.decode_code(codes.code(i))).collect()
        };
        ContinuousEmbedding {
            kind: self.kind,
            dim: self.dim,
            norm: self.norm,
            entities: decode(&self.entities),
            relations: decode(&self.relations),
            loss_history: Vec::new(),
        }
    }

    /// Plain-text description of the quantizer.
    pub fn sidecar(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "method = {}", self.quantizer.method_name());
        let _ = writeln!(s, "model = {}", self.kind.name());
        let _ = writeln!(s, "norm = {}", self.norm.name());
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "levels_count = {}", self.quantizer.num_levels());
        let _ = writeln!(s, "bits_per_value = {}", self.quantizer.bits_per_value());
        match &self.quantizer {
            Quantizer::Sign => {}
            Quantizer::Uniform(q) => {
                let _ = writeln!(s, "lo = {:?}", q.lo);
                let _ = writeln!(s, "hi = {:?}", q.hi);
                let _ = writeln!(s, "levels = {}", list(&(0..q.levels).map(|i| q.decode(i)).collect::<Vec<_>>()));
            }
            Quantizer::Lloyd(q) => {
                let _ = writeln!(s, "levels = {}", list(&q.levels));
                let _ = writeln!(s, "thresholds = {}", list(&q.thresholds));
                let _ = writeln!(s, "iterations = {}", q.mse_history.len());
            }
        }
        s
    }

    /// Writes `{prefix}.entities.dkgb`, `{prefix}.relations.dkgb` and
    /// `{prefix}.quant.txt`.
    pub fn write(&self, prefix: &Path) -> Result<(), QuantizeError> {
        bitpack::write_codes(&self.entities, &with_suffix(prefix, ".entities.dkgb"))?;
        bitpack::write_codes(&self.relations, &with_suffix(prefix, ".relations.dkgb"))?;
        let path = with_suffix(prefix, ".quant.txt");
        write_atomic(&path, self.sidecar().as_bytes()).map_err(|source| QuantizeError::Io { path, source })
    }

    pub fn read(prefix: &Path) -> Result<Self, QuantizeError> {
        let path = with_suffix(prefix, ".quant.txt");
        let text = fs::read_to_string(&path).map_err(|source| QuantizeError::Io { path, source })?;
        let entities = bitpack::read_codes(&with_suffix(prefix, ".entities.dkgb"))?;
        let relations = bitpack::read_codes(&with_suffix(prefix, ".relations.dkgb"))?;
        Self::from_sidecar(&text, entities, relations)
    }

    pub fn from_sidecar(
        text: &str,
        entities: BinaryCodeMatrix,
        relations: BinaryCodeMatrix,
    ) -> Result<Self, QuantizeError> {
        let bad = |m: String| QuantizeError::Sidecar(m);
        let mut map = std::collections::HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("not key = value: {line}")))?;
            map.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        let get = |k: &str| map.get(k).ok_or_else(|| bad(format!("missing key {k}")));
        let num = |k: &str| -> Result<f64, QuantizeError> {
            get(k)?.parse().map_err(|_| bad(format!("{k} is not a number")))
        };
        let list = |k: &str| -> Result<Vec<f64>, QuantizeError> {
            get(k)?
                .split(',')
                .map(|x| x.trim().parse().map_err(|_| bad(format!("{k} holds a non-number"))))
                .collect()
        };
        let kind = ModelKind::parse(get("model")?).ok_or_else(|| bad("unknown model".into()))?;
        let norm = Norm::parse(get("norm")?).ok_or_else(|| bad("unknown norm".into()))?;
        let dim: usize = get("dim")?.parse().map_err(|_| bad("dim is not an integer".into()))?;
        let levels: usize = get("levels_count")?.parse().map_err(|_| bad("levels_count is not an integer".into()))?;
        let quantizer = match get("method")?.as_str() {
            "sign" => Quantizer::Sign,
            "equal" => Quantizer::Uniform(UniformQuantizer { lo: num("lo")?, hi: num("hi")?, levels }),
            "lloyd" => Quantizer::Lloyd(LloydQuantizer {
                levels: list("levels")?,
                thresholds: list("thresholds")?,
                mse_history: Vec::new(),
            }),
            other => return Err(bad(format!("unknown method {other}"))),
        };
        let want = quantizer.bits_per_value() * dim;
        for c in [&entities, &relations] {
            if c.k() != want {
                return Err(QuantizeError::CodeLength { got: c.k(), want });
            }
        }
        Ok(Self {
            kind,
            norm,
            dim,
            quantizer,
            entities,
            relations,
        })
    }
}

pub(crate) fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
