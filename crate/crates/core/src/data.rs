//! Triple files, vocabularies and the filter index used by filtered ranking.
//!
//! Input files hold one `head<TAB>relation<TAB>tail` triple per line. The
//! vocabulary is built over the union of train, valid and test in
//! first-appearance order (train first), so every split is fully indexed and
//! repeated loads of the same files give the same indices.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use log::{info, warn};
use thiserror::Error;

use crate::fileio::{write_atomic, ByteReader, Truncated};

const BUNDLE_MAGIC: &[u8; 4] = b"DKGD";
const BUNDLE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{source_name}:{line}: expected 3 tab-separated fields, found {found}")]
    Parse {
        source_name: String,
        line: usize,
        found: usize,
    },
    #[error("{source_name}:{line}: invalid UTF-8")]
    Utf8 { source_name: String, line: usize },
    #[error("training split is empty")]
    EmptyTrain,
    #[error("dataset bundle: bad magic")]
    BadMagic,
    #[error("dataset bundle: unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("dataset bundle: truncated")]
    Truncated,
    #[error("dataset bundle: {0}")]
    Corrupt(String),
}

impl From<Truncated> for DataError {
    fn from(_: Truncated) -> Self {
        DataError::Truncated
    }
}

/// An index-space triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: u32,
    pub relation: u32,
    pub tail: u32,
}

impl Triple {
    pub const fn new(head: u32, relation: u32, tail: u32) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }

    pub fn is_self_loop(&self) -> bool {
        self.head == self.tail
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripleSet {
    pub triples: Vec<Triple>,
}

impl TripleSet {
    pub fn new(triples: Vec<Triple>) -> Self {
        Self { triples }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Triple> {
        self.triples.iter()
    }
}

impl FromIterator<Triple> for TripleSet {
    fn from_iter<I: IntoIterator<Item = Triple>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// Which end of a triple is being replaced or predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Head,
    Tail,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Head => "head",
            Side::Tail => "tail",
        }
    }

    pub fn other(self) -> Side {
        match self {
            Side::Head => Side::Tail,
            Side::Tail => Side::Head,
        }
    }
}

impl Triple {
    /// The entity at `side`.
    pub fn entity(&self, side: Side) -> u32 {
        match side {
            Side::Head => self.head,
            Side::Tail => self.tail,
        }
    }

    /// A copy with the entity at `side` replaced.
    pub fn with_entity(&self, side: Side, entity: u32) -> Triple {
        match side {
            Side::Head => Triple::new(entity, self.relation, self.tail),
            Side::Tail => Triple::new(self.head, self.relation, entity),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s.trim() {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Dense name ↔ index maps for entities and relations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    entity_names: Vec<String>,
    relation_names: Vec<String>,
    entity_index: HashMap<String, u32>,
    relation_index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary from ordered name lists; duplicates are rejected.
    pub fn from_names(entities: Vec<String>, relations: Vec<String>) -> Result<Self, DataError> {
        let mut v = Self::new();
        for e in entities {
            if v.entity_index.contains_key(&e) {
                return Err(DataError::Corrupt(format!("duplicate entity name {e:?}")));
            }
            v.intern_entity(&e);
        }
        for r in relations {
            if v.relation_index.contains_key(&r) {
                return Err(DataError::Corrupt(format!("duplicate relation name {r:?}")));
            }
            v.intern_relation(&r);
        }
        Ok(v)
    }

    pub fn intern_entity(&mut self, name: &str) -> u32 {
        intern(&mut self.entity_names, &mut self.entity_index, name)
    }

    pub fn intern_relation(&mut self, name: &str) -> u32 {
        intern(&mut self.relation_names, &mut self.relation_index, name)
    }

    pub fn num_entities(&self) -> usize {
        self.entity_names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<u32> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<u32> {
        self.relation_index.get(name).copied()
    }

    pub fn entity_name(&self, id: u32) -> Option<&str> {
        self.entity_names.get(id as usize).map(String::as_str)
    }

    pub fn relation_name(&self, id: u32) -> Option<&str> {
        self.relation_names.get(id as usize).map(String::as_str)
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }
}

fn intern(names: &mut Vec<String>, index: &mut HashMap<String, u32>, name: &str) -> u32 {
    if let Some(&id) = index.get(name) {
        return id;
    }
    let id = names.len() as u32;
    names.push(name.to_owned());
    index.insert(name.to_owned(), id);
    id
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: TripleSet,
    pub valid: TripleSet,
    pub test: TripleSet,
}

impl Dataset {
    pub fn num_entities(&self) -> usize {
        self.vocab.num_entities()
    }

    pub fn num_relations(&self) -> usize {
        self.vocab.num_relations()
    }

    pub fn split(&self, split: Split) -> &TripleSet {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Maps an index-space triple back to its names.
    pub fn decode(&self, t: Triple) -> Option<(&str, &str, &str)> {
        Some((
            self.vocab.entity_name(t.head)?,
            self.vocab.relation_name(t.relation)?,
            self.vocab.entity_name(t.tail)?,
        ))
    }

    /// Checks that every split only references indices inside the vocabulary.
    pub fn validate(&self) -> Result<(), DataError> {
        let (n, m) = (self.num_entities() as u32, self.num_relations() as u32);
        for split in Split::ALL {
            for t in self.split(split).iter() {
                if t.head >= n || t.tail >= n || t.relation >= m {
                    return Err(DataError::Corrupt(format!(
                        "{} triple {t} out of vocabulary bounds (n={n}, m={m})",
                        split.name()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        for names in [self.vocab.entity_names(), self.vocab.relation_names()] {
            out.extend_from_slice(&(names.len() as u64).to_le_bytes());
            for name in names {
                out.extend_from_slice(&(name.len() as u32).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
            }
        }
        for split in Split::ALL {
            let ts = self.split(split);
            out.extend_from_slice(&(ts.len() as u64).to_le_bytes());
            for t in ts.iter() {
                out.extend_from_slice(&t.head.to_le_bytes());
                out.extend_from_slice(&t.relation.to_le_bytes());
                out.extend_from_slice(&t.tail.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != BUNDLE_MAGIC {
            return Err(DataError::BadMagic);
        }
        let version = r.u16()?;
        if version != BUNDLE_VERSION {
            return Err(DataError::UnsupportedVersion(version));
        }
        let read_names = |r: &mut ByteReader| -> Result<Vec<String>, DataError> {
            let count = r.u64()? as usize;
            let mut names = Vec::with_capacity(count.min(r.remaining() / 4));
            for _ in 0..count {
                let len = r.u32()? as usize;
                let raw = r.take(len)?;
                let name = std::str::from_utf8(raw)
                    .map_err(|_| DataError::Corrupt("non-UTF-8 name".into()))?;
                names.push(name.to_owned());
            }
            Ok(names)
        };
        let entities = read_names(&mut r)?;
        let relations = read_names(&mut r)?;
        let vocab = Vocabulary::from_names(entities, relations)?;
        let mut splits = Vec::with_capacity(3);
        for _ in 0..3 {
            let count = r.u64()? as usize;
            let mut ts = Vec::with_capacity(count.min(r.remaining() / 12));
            for _ in 0..count {
                ts.push(Triple::new(r.u32()?, r.u32()?, r.u32()?));
            }
            splits.push(TripleSet::new(ts));
        }
        if r.remaining() != 0 {
            return Err(DataError::Corrupt("trailing bytes".into()));
        }
        let test = splits.pop().unwrap();
        let valid = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        let ds = Dataset {
            vocab,
            train,
            valid,
            test,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn write_bundle(&self, path: &Path) -> Result<(), DataError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| DataError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn read_bundle(path: &Path) -> Result<Self, DataError> {
        let bytes = fs::read(path).map_err(|source| DataError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// One parsed line before indexing.
type NamedTriple = (String, String, String);

/// Reads tab-separated triples. Blank lines are skipped; a trailing `\r` is
/// tolerated.
pub fn parse_triples<R: Read>(reader: R, source_name: &str) -> Result<Vec<NamedTriple>, DataError> {
    let mut out = Vec::new();
    let mut reader = BufReader::new(reader);
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let read = reader
            .read_until(b'\n', &mut buf)
            .map_err(|source| DataError::Io {
                path: PathBuf::from(source_name),
                source,
            })?;
        if read == 0 {
            break;
        }
        line_no += 1;
        let line = std::str::from_utf8(&buf).map_err(|_| DataError::Utf8 {
            source_name: source_name.to_owned(),
            line: line_no,
        })?;
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(DataError::Parse {
                source_name: source_name.to_owned(),
                line: line_no,
                found: fields.iter().filter(|f| !f.is_empty()).count(),
            });
        }
        out.push((
            fields[0].to_owned(),
            fields[1].to_owned(),
            fields[2].to_owned(),
        ));
    }
    Ok(out)
}

/// Indexes three parsed splits into a dataset, dropping duplicates within a
/// split.
pub fn build_dataset(
    train: Vec<NamedTriple>,
    valid: Vec<NamedTriple>,
    test: Vec<NamedTriple>,
) -> Result<Dataset, DataError> {
    if train.is_empty() {
        return Err(DataError::EmptyTrain);
    }
    let mut vocab = Vocabulary::new();
    let mut index_split = |split: Split, rows: Vec<NamedTriple>| -> TripleSet {
        let mut seen = HashSet::with_capacity(rows.len());
        let mut triples = Vec::with_capacity(rows.len());
        let mut dupes = 0usize;
        for (h, r, t) in rows {
            let h = vocab.intern_entity(&h);
            let r = vocab.intern_relation(&r);
            let t = vocab.intern_entity(&t);
            let triple = Triple::new(h, r, t);
            if seen.insert(triple) {
                triples.push(triple);
            } else {
                dupes += 1;
            }
        }
        if dupes > 0 {
            warn!("{}: dropped {dupes} duplicate triples", split.name());
        }
        TripleSet::new(triples)
    };
    let train = index_split(Split::Train, train);
    let valid = index_split(Split::Valid, valid);
    let test = index_split(Split::Test, test);
    info!(
        "dataset: {} entities, {} relations, train/valid/test = {}/{}/{}",
        vocab.num_entities(),
        vocab.num_relations(),
        train.len(),
        valid.len(),
        test.len()
    );
    Ok(Dataset {
        vocab,
        train,
        valid,
        test,
    })
}

pub fn load_dataset(train: &Path, valid: &Path, test: &Path) -> Result<Dataset, DataError> {
    let read = |p: &Path| -> Result<Vec<NamedTriple>, DataError> {
        let f = fs::File::open(p).map_err(|source| DataError::Io {
            path: p.to_owned(),
            source,
        })?;
        parse_triples(f, &p.display().to_string())
    };
    build_dataset(read(train)?, read(valid)?, read(test)?)
}

/// Drops `h == t` triples. Returns the kept set and the number removed.
pub fn remove_self_loops(ts: &TripleSet) -> (TripleSet, usize) {
    let kept: TripleSet = ts.iter().filter(|t| !t.is_self_loop()).copied().collect();
    let removed = ts.len() - kept.len();
    if removed > 0 {
        info!("removed {removed} self-loop triples");
    }
    (kept, removed)
}

/// Known-true lookups for filtered ranking. Immutable once built.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    tails_of: HashMap<(u32, u32), Vec<u32>>,
    heads_of: HashMap<(u32, u32), Vec<u32>>,
}

impl FilterIndex {
    pub fn from_triples<'a, I: IntoIterator<Item = &'a Triple>>(triples: I) -> Self {
        let mut tails_of: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        let mut heads_of: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        for t in triples {
            tails_of.entry((t.head, t.relation)).or_default().push(t.tail);
            heads_of.entry((t.relation, t.tail)).or_default().push(t.head);
        }
        for v in tails_of.values_mut().chain(heads_of.values_mut()) {
            v.sort_unstable();
            v.dedup();
        }
        Self { tails_of, heads_of }
    }

    pub fn build(dataset: &Dataset, splits: &[Split]) -> Self {
        Self::from_triples(splits.iter().flat_map(|&s| dataset.split(s).iter()))
    }

    /// Sorted tails known for `(h, r)`.
    pub fn tails_of(&self, head: u32, relation: u32) -> &[u32] {
        self.tails_of
            .get(&(head, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Sorted heads known for `(r, t)`.
    pub fn heads_of(&self, relation: u32, tail: u32) -> &[u32] {
        self.heads_of
            .get(&(relation, tail))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.tails_of(t.head, t.relation).binary_search(&t.tail).is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn named(rows: &[(&str, &str, &str)]) -> Vec<NamedTriple> {
        rows.iter()
            .map(|(h, r, t)| (h.to_string(), r.to_string(), t.to_string()))
            .collect()
    }

    #[test]
    fn two_line_file() {
        let rows = parse_triples("a\tr1\tb\nb\tr1\tc\n".as_bytes(), "toy").unwrap();
        let ds = build_dataset(rows, vec![], vec![]).unwrap();
        assert_eq!(ds.num_entities(), 3);
        assert_eq!(ds.num_relations(), 1);
        assert_eq!(ds.train.len(), 2);
        assert_eq!(ds.decode(ds.train.triples[1]), Some(("b", "r1", "c")));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_triples("a\tr\tb\na\tb\n".as_bytes(), "f").unwrap_err();
        match err {
            DataError::Parse { line, found, .. } => {
                assert_eq!(line, 2);
                assert_eq!(found, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_triples("a\tr\tb\tc\n".as_bytes(), "f").is_err());
    }

    #[test]
    fn empty_train_is_an_error() {
        let valid = named(&[("a", "r", "b")]);
        assert!(matches!(
            build_dataset(vec![], valid, vec![]),
            Err(DataError::EmptyTrain)
        ));
    }

    #[test]
    fn duplicates_dropped_and_vocab_spans_all_splits() {
        let ds = build_dataset(
            named(&[("a", "r", "b"), ("a", "r", "b")]),
            named(&[("c", "s", "a")]),
            named(&[("d", "r", "e")]),
        )
        .unwrap();
        assert_eq!(ds.train.len(), 1);
        assert_eq!(ds.num_entities(), 5);
        assert_eq!(ds.num_relations(), 2);
        assert_eq!(ds.vocab.entity_id("d"), Some(3));
        ds.validate().unwrap();
    }

    #[test]
    fn self_loops_removed() {
        let ts = TripleSet::new(vec![Triple::new(0, 0, 0), Triple::new(0, 0, 1)]);
        let (kept, removed) = remove_self_loops(&ts);
        assert_eq!(kept.triples, vec![Triple::new(0, 0, 1)]);
        assert_eq!(removed, 1);
        let (same, none) = remove_self_loops(&kept);
        assert_eq!(same, kept);
        assert_eq!(none, 0);
    }

    #[test]
    fn filter_index_basic() {
        let ds = Dataset {
            vocab: Vocabulary::from_names(
                vec!["a".into(), "b".into()],
                vec!["r".into()],
            )
            .unwrap(),
            train: TripleSet::new(vec![Triple::new(0, 0, 1)]),
            valid: TripleSet::default(),
            test: TripleSet::new(vec![Triple::new(0, 0, 1)]),
        };
        let f = FilterIndex::build(&ds, &[Split::Train]);
        assert_eq!(f.tails_of(0, 0), &[1]);
        let f = FilterIndex::build(&ds, &[Split::Train, Split::Test]);
        assert_eq!(f.tails_of(0, 0), &[1]);
        assert_eq!(f.heads_of(0, 1), &[0]);
    }

    #[test]
    fn filter_index_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let triples: Vec<Triple> = (0..1000)
            .map(|_| Triple::new(rng.random_range(0..40), rng.random_range(0..4), rng.random_range(0..40)))
            .collect();
        let f = FilterIndex::from_triples(&triples);
        for t in &triples {
            assert!(f.tails_of(t.head, t.relation).contains(&t.tail));
            assert!(f.heads_of(t.relation, t.tail).contains(&t.head));
        }
        for _ in 0..2000 {
            let q = Triple::new(rng.random_range(0..40), rng.random_range(0..4), rng.random_range(0..40));
            let scan = triples.contains(&q);
            assert_eq!(f.contains(&q), scan);
            assert_eq!(f.heads_of(q.relation, q.tail).contains(&q.head), scan);
        }
    }

    #[test]
    fn bundle_round_trip_and_errors() {
        let ds = build_dataset(
            named(&[("a", "r", "b"), ("b", "r", "c")]),
            named(&[("c", "s", "a")]),
            named(&[("ä", "r", "b")]),
        )
        .unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);

        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(matches!(Dataset::from_bytes(&bad), Err(DataError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Dataset::from_bytes(&bad),
            Err(DataError::UnsupportedVersion(9))
        ));
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 1]),
            Err(DataError::Truncated)
        ));
    }
}
