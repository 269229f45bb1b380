//! Synthetic datasets generated from ground-truth codes.
//!
//! Random ±1 codes are drawn for every entity and relation, and a fact
//! `(h, r, t*)` is emitted only when `t*` is the unique best tail for
//! `(h, r)` under the binary score. With `mutual` set, `h` must also be the
//! unique best head for `(r, t*)`, so the ground-truth codes rank every test
//! triple first in both directions.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bitpack::BinaryCodeMatrix;
use crate::data::{Dataset, Triple, TripleSet, Vocabulary};
use crate::fileio::write_atomic;
use crate::learner::ModelParams;

#[derive(Debug, Error)]
pub enum PlantedError {
    #[error("only {available} facts have a unique best entity, {requested} requested")]
    NotEnoughFacts { available: usize, requested: usize },
    #[error("need at least 3 entities, 1 relation and k >= 1")]
    TooSmall,
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedConfig {
    pub entities: usize,
    pub relations: usize,
    pub k: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub mutual: bool,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            entities: 100,
            relations: 40,
            k: 32,
            train: 1000,
            valid: 0,
            test: 200,
            mutual: true,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Planted {
    pub dataset: Dataset,
    pub truth: ModelParams,
    /// Facts that met the uniqueness rule, before the split was drawn.
    pub available: usize,
}

fn unique_best(scores: impl Iterator<Item = (u32, i32)>) -> Option<u32> {
    let mut best = None;
    let mut best_score = i32::MIN;
    let mut tied = false;
    for (e, s) in scores {
        if s > best_score {
            best = Some(e);
            best_score = s;
            tied = false;
        } else if s == best_score {
            tied = true;
        }
    }
    if tied {
        None
    } else {
        best
    }
}

pub fn generate(config: &PlantedConfig) -> Result<Planted, PlantedError> {
    if config.entities < 3 || config.relations == 0 || config.k == 0 {
        return Err(PlantedError::TooSmall);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(7);
    let entities = BinaryCodeMatrix::random(config.k, config.entities, &mut rng);
    let relations = BinaryCodeMatrix::random(config.k, config.relations, &mut rng);
    let truth = ModelParams { entities, relations };
    let n = config.entities as u32;

    let mut facts = Vec::new();
    for r in 0..config.relations as u32 {
        for h in 0..n {
            // Self-loop candidates take part in the contest but are never emitted.
            let tail = unique_best((0..n).map(|t| (t, truth.score(Triple::new(h, r, t)))));
            let Some(t) = tail.filter(|&t| t != h) else { continue };
            if config.mutual {
                let head = unique_best((0..n).map(|x| (x, truth.score(Triple::new(x, r, t)))));
                if head != Some(h) {
                    continue;
                }
            }
            facts.push(Triple::new(h, r, t));
        }
    }
    let available = facts.len();
    let requested = config.train + config.valid + config.test;
    if available < requested {
        return Err(PlantedError::NotEnoughFacts { available, requested });
    }
    facts.shuffle(&mut rng);
    facts.truncate(requested);
    let test = facts.split_off(config.train + config.valid);
    let valid = facts.split_off(config.train);

    let vocab = Vocabulary::from_names(
        (0..config.entities).map(|i| format!("e{i}")).collect(),
        (0..config.relations).map(|i| format!("r{i}")).collect(),
    )
    .expect("generated names are distinct");
    Ok(Planted {
        dataset: Dataset {
            vocab,
            train: TripleSet::new(facts),
            valid: TripleSet::new(valid),
            test: TripleSet::new(test),
        },
        truth,
        available,
    })
}

fn tsv(dataset: &Dataset, triples: &TripleSet) -> String {
    let mut out = String::new();
    for &t in triples.iter() {
        let (h, r, t) = dataset.decode(t).expect("planted ids are in range");
        let _ = writeln!(out, "{h}\t{r}\t{t}");
    }
    out
}

impl Planted {
    /// Writes `train.txt`, `valid.txt`, `test.txt`, the truth codes
    /// (`truth.entities.dkgb`, `truth.relations.dkgb`) and a `dataset.dkgd`
    /// bundle into `dir`. Re-indexing the text files assigns ids in order of
    /// appearance, so only the bundle lines up with the truth codes.
    pub fn write_dir(&self, dir: &Path) -> Result<(), PlantedError> {
        let io_err = |path: &Path| {
            let path = path.display().to_string();
            move |source| PlantedError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let d = &self.dataset;
        for (name, split) in [("train.txt", &d.train), ("valid.txt", &d.valid), ("test.txt", &d.test)] {
            let path = dir.join(name);
            write_atomic(&path, tsv(d, split).as_bytes()).map_err(io_err(&path))?;
        }
        let bundle = dir.join("dataset.dkgd");
        write_atomic(&bundle, &d.to_bytes()).map_err(io_err(&bundle))?;
        for (name, codes) in [
            ("truth.entities.dkgb", &self.truth.entities),
            ("truth.relations.dkgb", &self.truth.relations),
        ] {
            let path = dir.join(name);
            write_atomic(&path, &codes.to_bytes()).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitpack;

    #[test]
    fn facts_are_unique_best_tails() {
        let p = generate(&PlantedConfig::default()).unwrap();
        let d = &p.dataset;
        assert_eq!((d.train.len(), d.test.len()), (1000, 200));
        let n = d.num_entities() as u32;
        for &t in d.train.iter().chain(d.test.iter()) {
            let s = p.truth.score(t);
            for other in (0..n).filter(|&x| x != t.tail) {
                assert!(p.truth.score(Triple::new(t.head, t.relation, other)) < s);
            }
            for other in (0..n).filter(|&x| x != t.head) {
                assert!(p.truth.score(Triple::new(other, t.relation, t.tail)) < s);
            }
        }
        let mut all: Vec<Triple> = d.train.iter().chain(d.test.iter()).copied().collect();
        all.sort_unstable_by_key(|t| (t.head, t.relation, t.tail));
        all.dedup();
        assert_eq!(all.len(), 1200);
    }

    #[test]
    fn too_many_requested_is_an_error() {
        let cfg = PlantedConfig {
            relations: 1,
            ..PlantedConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(PlantedError::NotEnoughFacts { .. })));
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&PlantedConfig::default()).unwrap();
        let b = generate(&PlantedConfig::default()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(bitpack::unpack(a.truth.entities.code(3)), bitpack::unpack(b.truth.entities.code(3)));
    }
}
