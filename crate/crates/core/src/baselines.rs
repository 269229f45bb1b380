//! Continuous TransE and DistMult, trained with margin-ranking SGD. They
//! exist to feed the post-hoc quantizers.

use std::fs;
use std::path::{Path, PathBuf};

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{Dataset, Side, Triple};
use crate::fileio::{write_atomic, ByteReader, Truncated};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("vector lengths differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("not a continuous embedding file (bad magic)")]
    BadMagic,
    #[error("unsupported embedding file version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown model kind byte {0}")]
    UnknownKind(u8),
    #[error("embedding file is truncated")]
    Truncated,
    #[error("embedding file has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("embedding file contains a non-finite value")]
    NonFinite,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<Truncated> for BaselineError {
    fn from(_: Truncated) -> Self {
        BaselineError::Truncated
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    TransE,
    DistMult,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TransE => "transe",
            ModelKind::DistMult => "distmult",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "transe" => Some(ModelKind::TransE),
            "distmult" => Some(ModelKind::DistMult),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn name(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "l1" => Some(Norm::L1),
            "l2" => Some(Norm::L2),
            _ => None,
        }
    }
}

/// `−‖h + r − t‖`. Higher is better.
pub fn transe_score(h: &[f64], r: &[f64], t: &[f64], norm: Norm) -> Result<f64, BaselineError> {
    check_dims(h, r, t)?;
    Ok(transe_unchecked(h, r, t, norm))
}

/// `Σ h_j r_j t_j`.
pub fn distmult_score(h: &[f64], r: &[f64], t: &[f64]) -> Result<f64, BaselineError> {
    check_dims(h, r, t)?;
    Ok(distmult_unchecked(h, r, t))
}

fn check_dims(h: &[f64], r: &[f64], t: &[f64]) -> Result<(), BaselineError> {
    if h.len() != r.len() {
        return Err(BaselineError::DimMismatch(h.len(), r.len()));
    }
    if h.len() != t.len() {
        return Err(BaselineError::DimMismatch(h.len(), t.len()));
    }
    Ok(())
}

pub(crate) fn transe_unchecked(h: &[f64], r: &[f64], t: &[f64], norm: Norm) -> f64 {
    let diffs = h.iter().zip(r).zip(t).map(|((h, r), t)| h + r - t);
    match norm {
        Norm::L1 => -diffs.map(f64::abs).sum::<f64>(),
        Norm::L2 => -diffs.map(|d| d * d).sum::<f64>().sqrt(),
    }
}

pub(crate) fn distmult_unchecked(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    h.iter().zip(r).zip(t).map(|((h, r), t)| h * r * t).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub kind: ModelKind,
    pub dim: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub norm: Norm,
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::TransE,
            dim: 64,
            margin: 1.0,
            learning_rate: 0.01,
            epochs: 100,
            norm: Norm::L1,
            negatives_per_positive: 1,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        let bad = |m: &str| Err(BaselineError::Config(m.to_owned()));
        if self.dim == 0 {
            return bad("dim must be at least 1");
        }
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return bad("margin must be positive");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.negatives_per_positive == 0 {
            return bad("negatives_per_positive must be at least 1");
        }
        Ok(())
    }
}

/// Entity and relation vectors, each stored contiguously (column-major
/// `d × n` and `d × m`).
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousEmbedding {
    pub kind: ModelKind,
    pub dim: usize,
    pub norm: Norm,
    pub entities: Vec<f64>,
    pub relations: Vec<f64>,
    /// Hinge loss summed over each epoch.
    pub loss_history: Vec<f64>,
}

const EMB_MAGIC: &[u8; 4] = b"DKGC";
const EMB_VERSION: u16 = 1;

impl ContinuousEmbedding {
    pub fn num_entities(&self) -> usize {
        self.entities.len() / self.dim
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len() / self.dim
    }

    pub fn entity(&self, i: usize) -> &[f64] {
        &self.entities[i * self.dim..(i + 1) * self.dim]
    }

    pub fn relation(&self, i: usize) -> &[f64] {
        &self.relations[i * self.dim..(i + 1) * self.dim]
    }

    pub fn score(&self, t: Triple) -> f64 {
        let (h, r, tt) = (
            self.entity(t.head as usize),
            self.relation(t.relation as usize),
            self.entity(t.tail as usize),
        );
        match self.kind {
            ModelKind::TransE => transe_unchecked(h, r, tt, self.norm),
            ModelKind::DistMult => distmult_unchecked(h, r, tt),
        }
    }

    pub fn memory_bits(&self) -> u64 {
        32 * (self.entities.len() + self.relations.len()) as u64
    }

    /// The on-disk form. The norm is not stored; readers get L1 unless told
    /// otherwise.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(27 + 8 * (self.entities.len() + self.relations.len()));
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&EMB_VERSION.to_le_bytes());
        out.push(match self.kind {
            ModelKind::TransE => 0,
            ModelKind::DistMult => 1,
        });
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_entities() as u64).to_le_bytes());
        out.extend_from_slice(&(self.num_relations() as u64).to_le_bytes());
        for v in self.entities.iter().chain(&self.relations) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BaselineError> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != EMB_MAGIC {
            return Err(BaselineError::BadMagic);
        }
        let version = r.u16()?;
        if version != EMB_VERSION {
            return Err(BaselineError::UnsupportedVersion(version));
        }
        let kind = match r.u8()? {
            0 => ModelKind::TransE,
            1 => ModelKind::DistMult,
            b => return Err(BaselineError::UnknownKind(b)),
        };
        let dim = r.u32()? as usize;
        let n = r.u64()? as usize;
        let m = r.u64()? as usize;
        let mut read = |count: usize| -> Result<Vec<f64>, BaselineError> {
            let total = dim.checked_mul(count).ok_or(BaselineError::Truncated)?;
            if r.remaining() / 8 < total {
                return Err(BaselineError::Truncated);
            }
            let v = (0..total).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            if v.iter().all(|x| x.is_finite()) {
                Ok(v)
            } else {
                Err(BaselineError::NonFinite)
            }
        };
        let entities = read(n)?;
        let relations = read(m)?;
        if r.remaining() != 0 {
            return Err(BaselineError::TrailingBytes(r.remaining()));
        }
        if dim == 0 {
            return Err(BaselineError::Config("dim must be at least 1".into()));
        }
        Ok(Self {
            kind,
            dim,
            norm: Norm::L1,
            entities,
            relations,
            loss_history: Vec::new(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), BaselineError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| BaselineError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, BaselineError> {
        let bytes = fs::read(path).map_err(|source| BaselineError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// `∂s/∂(h, r, t)` for one triple, written into `gh`, `gr`, `gt`.
fn score_grad(
    kind: ModelKind,
    norm: Norm,
    h: &[f64],
    r: &[f64],
    t: &[f64],
    gh: &mut [f64],
    gr: &mut [f64],
    gt: &mut [f64],
) {
    match kind {
        ModelKind::TransE => {
            let len = match norm {
                Norm::L1 => 1.0,
                Norm::L2 => h
                    .iter()
                    .zip(r)
                    .zip(t)
                    .map(|((h, r), t)| (h + r - t).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    .max(1e-12),
            };
            for j in 0..h.len() {
                let d = h[j] + r[j] - t[j];
                let g = match norm {
                    Norm::L1 => {
                        if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                    Norm::L2 => d / len,
                };
                // s = −‖d‖, so ∂s/∂h = −g, ∂s/∂t = +g.
                gh[j] = -g;
                gr[j] = -g;
                gt[j] = g;
            }
        }
        ModelKind::DistMult => {
            for j in 0..h.len() {
                gh[j] = r[j] * t[j];
                gr[j] = h[j] * t[j];
                gt[j] = h[j] * r[j];
            }
        }
    }
}

fn corrupt<R: Rng + ?Sized>(rng: &mut R, pos: Triple, n: u32) -> Triple {
    let side = if rng.random::<bool>() { Side::Head } else { Side::Tail };
    let orig = pos.entity(side);
    let mut e = rng.random_range(0..n - 1);
    if e >= orig {
        e += 1;
    }
    pos.with_entity(side, e)
}

/// Seeded uniform initialisation in `±6/√d`, with TransE entities scaled to
/// unit length.
pub fn init_baseline(n: usize, m: usize, config: &BaselineConfig) -> ContinuousEmbedding {
    let d = config.dim;
    let bound = 6.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draw = |count: usize| -> Vec<f64> { (0..count * d).map(|_| rng.random_range(-bound..=bound)).collect() };
    let mut entities = draw(n);
    let relations = draw(m);
    if config.kind == ModelKind::TransE {
        entities.chunks_mut(d).for_each(normalize);
    }
    ContinuousEmbedding {
        kind: config.kind,
        dim: d,
        norm: config.norm,
        entities,
        relations,
        loss_history: Vec::new(),
    }
}

/// Margin-ranking SGD over `dataset.train` (self-loops included).
pub fn train_baseline(dataset: &Dataset, config: &BaselineConfig) -> Result<ContinuousEmbedding, BaselineError> {
    config.validate()?;
    let n = dataset.num_entities();
    let m = dataset.num_relations();
    let mut emb = init_baseline(n, m, config);
    if dataset.train.is_empty() || n < 2 {
        return Ok(emb);
    }
    let d = config.dim;
    let lr = config.learning_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<Triple> = dataset.train.iter().copied().collect();
    let (mut gh, mut gr, mut gt) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let (mut nh, mut nr, mut nt) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for &pos in &order {
            for _ in 0..config.negatives_per_positive {
                let neg = corrupt(&mut rng, pos, n as u32);
                let l = config.margin - emb.score(pos) + emb.score(neg);
                if l <= 0.0 {
                    continue;
                }
                loss += l;
                {
                    let (h, r, t) = (
                        emb.entity(pos.head as usize),
                        emb.relation(pos.relation as usize),
                        emb.entity(pos.tail as usize),
                    );
                    score_grad(config.kind, config.norm, h, r, t, &mut gh, &mut gr, &mut gt);
                    let (h, r, t) = (
                        emb.entity(neg.head as usize),
                        emb.relation(neg.relation as usize),
                        emb.entity(neg.tail as usize),
                    );
                    score_grad(config.kind, config.norm, h, r, t, &mut nh, &mut nr, &mut nt);
                }
                // Loss = margin − s_pos + s_neg: ascend s_pos, descend s_neg.
                let step = |vecs: &mut Vec<f64>, idx: u32, g: &[f64], sign: f64| {
                    let v = &mut vecs[idx as usize * d..(idx as usize + 1) * d];
                    v.iter_mut().zip(g).for_each(|(x, g)| *x += sign * lr * g);
                };
                step(&mut emb.entities, pos.head, &gh, 1.0);
                step(&mut emb.relations, pos.relation, &gr, 1.0);
                step(&mut emb.entities, pos.tail, &gt, 1.0);
                step(&mut emb.entities, neg.head, &nh, -1.0);
                step(&mut emb.relations, neg.relation, &nr, -1.0);
                step(&mut emb.entities, neg.tail, &nt, -1.0);
                if config.kind == ModelKind::TransE {
                    for e in [pos.head, pos.tail, neg.head, neg.tail] {
                        normalize(&mut emb.entities[e as usize * d..(e as usize + 1) * d]);
                    }
                }
            }
        }
        debug!("{} epoch {}: loss {loss:.6}", config.kind.name(), epoch + 1);
        emb.loss_history.push(loss);
    }
    Ok(emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitpack::{pack, triple_score};
    use crate::data::{TripleSet, Vocabulary};

    fn chain() -> Dataset {
        Dataset {
            vocab: Vocabulary::from_names(vec!["a".into(), "b".into(), "c".into()], vec!["next".into()]).unwrap(),
            train: TripleSet::new(vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2)]),
            valid: TripleSet::default(),
            test: TripleSet::default(),
        }
    }

    fn naive_transe(h: &[f64], r: &[f64], t: &[f64], norm: Norm) -> f64 {
        let mut acc = 0.0;
        for j in 0..h.len() {
            let d = h[j] + r[j] - t[j];
            acc += match norm {
                Norm::L1 => d.abs(),
                Norm::L2 => d * d,
            };
        }
        match norm {
            Norm::L1 => -acc,
            Norm::L2 => -acc.sqrt(),
        }
    }

    #[test]
    fn score_examples() {
        let h = [0.5, -1.0, 2.0];
        let r = [0.25, 0.5, -1.0];
        let t: Vec<f64> = h.iter().zip(&r).map(|(a, b)| a + b).collect();
        assert_eq!(transe_score(&h, &r, &t, Norm::L1).unwrap(), 0.0);
        assert_eq!(transe_score(&[0.0; 3], &[0.0; 3], &[0.0, 1.0, 0.0], Norm::L2).unwrap(), -1.0);
        assert_eq!(distmult_score(&[1.0; 4], &[1.0; 4], &[1.0; 4]).unwrap(), 4.0);
        assert!(matches!(
            distmult_score(&[1.0; 4], &[1.0; 3], &[1.0; 4]),
            Err(BaselineError::DimMismatch(4, 3))
        ));
        assert!(transe_score(&[1.0; 2], &[1.0; 2], &[1.0; 5], Norm::L1).is_err());
    }

    #[test]
    fn scores_match_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let d = rng.random_range(1..40);
            let mut v = || (0..d).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>();
            let (h, r, t) = (v(), v(), v());
            for norm in [Norm::L1, Norm::L2] {
                let got = transe_score(&h, &r, &t, norm).unwrap();
                assert!((got - naive_transe(&h, &r, &t, norm)).abs() <= 1e-12 * (1.0 + got.abs()));
            }
            let dm: f64 = (0..d).map(|j| h[j] * r[j] * t[j]).sum();
            assert!((distmult_score(&h, &r, &t).unwrap() - dm).abs() <= 1e-12 * (1.0 + dm.abs()));
        }
    }

    #[test]
    fn distmult_on_signs_is_the_binary_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [1, 7, 64, 65, 130] {
            let mut v = || (0..k).map(|_| if rng.random() { 1i8 } else { -1 }).collect::<Vec<i8>>();
            let (h, r, t) = (v(), v(), v());
            let f = |x: &[i8]| x.iter().map(|&s| f64::from(s)).collect::<Vec<f64>>();
            let real = distmult_score(&f(&h), &f(&r), &f(&t)).unwrap();
            let (ph, pr, pt) = (pack(&h).unwrap(), pack(&r).unwrap(), pack(&t).unwrap());
            let bin = triple_score(ph.as_code(), pr.as_code(), pt.as_code()).unwrap();
            assert_eq!(real, f64::from(bin));
        }
    }

    // DistMult is symmetric in head and tail, so it cannot rank both
    // directions of a chain; only TransE is checked.
    #[test]
    fn chain_is_learned() {
        let d = chain();
        let cfg = BaselineConfig {
            dim: 8,
            epochs: 200,
            ..BaselineConfig::default()
        };
        let emb = train_baseline(&d, &cfg).unwrap();
        // Filtered: only the true entity of each query is known.
        for &t in d.train.iter() {
            let s = emb.score(t);
            for e in 0..3u32 {
                if e != t.tail {
                    assert!(emb.score(Triple::new(t.head, 0, e)) < s, "tail {t}");
                }
                if e != t.head {
                    assert!(emb.score(Triple::new(e, 0, t.tail)) < s, "head {t}");
                }
            }
        }
    }

    #[test]
    fn zero_epochs_is_the_seeded_init_and_training_is_deterministic() {
        let d = chain();
        let cfg = BaselineConfig {
            dim: 6,
            epochs: 0,
            ..BaselineConfig::default()
        };
        let emb = train_baseline(&d, &cfg).unwrap();
        assert_eq!(emb, init_baseline(3, 1, &cfg));
        for e in emb.entities.chunks(6) {
            let norm: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        let cfg = BaselineConfig { epochs: 20, ..cfg };
        assert_eq!(train_baseline(&d, &cfg).unwrap(), train_baseline(&d, &cfg).unwrap());
    }

    #[test]
    fn file_round_trip_and_errors() {
        let cfg = BaselineConfig {
            kind: ModelKind::DistMult,
            dim: 5,
            epochs: 3,
            ..BaselineConfig::default()
        };
        let mut emb = train_baseline(&chain(), &cfg).unwrap();
        emb.loss_history.clear();
        let bytes = emb.to_bytes();
        assert_eq!(&bytes[..4], b"DKGC");
        assert_eq!(bytes[6], 1);
        assert_eq!(ContinuousEmbedding::from_bytes(&bytes).unwrap(), emb);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.dkgc");
        emb.write(&path).unwrap();
        assert_eq!(ContinuousEmbedding::read(&path).unwrap(), emb);

        assert!(matches!(ContinuousEmbedding::from_bytes(&bytes[..bytes.len() - 1]), Err(BaselineError::Truncated)));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(ContinuousEmbedding::from_bytes(&extra), Err(BaselineError::TrailingBytes(1))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ContinuousEmbedding::from_bytes(&bad), Err(BaselineError::BadMagic)));
        let mut bad = bytes.clone();
        bad[6] = 9;
        assert!(matches!(ContinuousEmbedding::from_bytes(&bad), Err(BaselineError::UnknownKind(9))));
        let mut bad = bytes;
        bad[27..35].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(ContinuousEmbedding::from_bytes(&bad), Err(BaselineError::NonFinite)));
    }
}
