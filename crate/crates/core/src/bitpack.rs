//! Bit-packed ±1 codes and the popcount scoring kernels.
//!
//! Coordinate `i` of a code lives in bit `i % 64` of word `i / 64`
//! (LSB-first). A set bit means `+1`, a clear bit `−1`. Bits past `k` in the
//! last word are always zero, so kernels can XOR and popcount whole words
//! without masking.
//!
//! For ±1 vectors the triple product satisfies
//! `Σᵢ hᵢ rᵢ tᵢ = 2·popcount(h ⊕ r ⊕ t) − k`: a coordinate contributes `+1`
//! exactly when an even number of its three factors are `−1`, i.e. an odd
//! number of its three bits are set, which is when their XOR is set. The
//! Hamming distance between `h ∘ r` and `t` is then `k − popcount(h ⊕ r ⊕ t)`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::data::Side;
use crate::fileio::{write_atomic, ByteReader, Truncated};
use crate::par::{self, Exec};

const CODES_MAGIC: &[u8; 4] = b"DKGB";
const CODES_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum BitpackError {
    #[error("code length mismatch: expected {expected} bits, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("element {index} is {value}, expected +1 or -1")]
    NotASign { index: usize, value: i64 },
    #[error("code file: bad magic")]
    BadMagic,
    #[error("code file: unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("code file: truncated")]
    Truncated,
    #[error("code file: trailing bytes after {count} codes")]
    TrailingBytes { count: usize },
    #[error("code file: nonzero pad bits in code {code}")]
    NonzeroPadBits { code: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl From<Truncated> for BitpackError {
    fn from(_: Truncated) -> Self {
        BitpackError::Truncated
    }
}

#[inline]
pub fn words_for(k: usize) -> usize {
    k.div_ceil(64)
}

/// Mask of valid bits in the last word of a `k`-bit code.
#[inline]
fn last_word_mask(k: usize) -> u64 {
    match k % 64 {
        0 => u64::MAX,
        rem => (1u64 << rem) - 1,
    }
}

/// A borrowed `k`-bit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackedCode<'a> {
    k: usize,
    words: &'a [u64],
}

impl<'a> PackedCode<'a> {
    /// Wraps raw words. `words.len()` must be `ceil(k/64)` with zero pads.
    pub fn new(k: usize, words: &'a [u64]) -> Result<Self, BitpackError> {
        if words.len() != words_for(k) {
            return Err(BitpackError::LengthMismatch {
                expected: words_for(k) * 64,
                found: words.len() * 64,
            });
        }
        if let Some(&last) = words.last() {
            if last & !last_word_mask(k) != 0 {
                return Err(BitpackError::NonzeroPadBits { code: 0 });
            }
        }
        Ok(Self { k, words })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn words(&self) -> &'a [u64] {
        self.words
    }

    pub fn get(&self, i: usize) -> i8 {
        debug_assert!(i < self.k);
        if self.words[i / 64] >> (i % 64) & 1 == 1 {
            1
        } else {
            -1
        }
    }
}

/// An owned single code, as produced by [`pack`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeBuf {
    k: usize,
    words: Vec<u64>,
}

impl CodeBuf {
    pub fn as_code(&self) -> PackedCode<'_> {
        PackedCode {
            k: self.k,
            words: &self.words,
        }
    }
}

/// Packs a ±1 sequence.
pub fn pack<T: Copy + Into<i64>>(signs: &[T]) -> Result<CodeBuf, BitpackError> {
    let k = signs.len();
    let mut words = vec![0u64; words_for(k)];
    for (i, &s) in signs.iter().enumerate() {
        match s.into() {
            1 => words[i / 64] |= 1 << (i % 64),
            -1 => {}
            value => return Err(BitpackError::NotASign { index: i, value }),
        }
    }
    Ok(CodeBuf { k, words })
}

pub fn unpack(code: PackedCode<'_>) -> Vec<i8> {
    (0..code.k).map(|i| code.get(i)).collect()
}

/// `count` codes of `k` bits each, stored contiguously.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryCodeMatrix {
    k: usize,
    count: usize,
    words_per_code: usize,
    words: Vec<u64>,
}

impl BinaryCodeMatrix {
    /// All codes initialised to `−1` everywhere.
    pub fn new(k: usize, count: usize) -> Self {
        let words_per_code = words_for(k);
        Self {
            k,
            count,
            words_per_code,
            words: vec![0; words_per_code * count],
        }
    }

    /// I.i.d. uniform ±1 codes.
    pub fn random<R: Rng + ?Sized>(k: usize, count: usize, rng: &mut R) -> Self {
        let mut m = Self::new(k, count);
        let mask = last_word_mask(k);
        let wpc = m.words_per_code;
        for code in m.words.chunks_mut(wpc.max(1)).take(count) {
            for w in code.iter_mut() {
                *w = rng.random::<u64>();
            }
            if let Some(last) = code.last_mut() {
                *last &= mask;
            }
        }
        m
    }

    pub fn from_sign_rows<T, R>(k: usize, rows: &[R]) -> Result<Self, BitpackError>
    where
        T: Copy + Into<i64>,
        R: AsRef<[T]>,
    {
        let mut m = Self::new(k, rows.len());
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != k {
                return Err(BitpackError::LengthMismatch {
                    expected: k,
                    found: row.len(),
                });
            }
            let packed = pack(row)?;
            m.code_words_mut(i).copy_from_slice(&packed.words);
        }
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn words_per_code(&self) -> usize {
        self.words_per_code
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn code(&self, i: usize) -> PackedCode<'_> {
        let w = self.words_per_code;
        PackedCode {
            k: self.k,
            words: &self.words[i * w..(i + 1) * w],
        }
    }

    pub(crate) fn code_words_mut(&mut self, i: usize) -> &mut [u64] {
        let w = self.words_per_code;
        &mut self.words[i * w..(i + 1) * w]
    }

    pub fn get(&self, i: usize, bit: usize) -> i8 {
        self.code(i).get(bit)
    }

    pub fn set(&mut self, i: usize, bit: usize, positive: bool) {
        debug_assert!(bit < self.k);
        let w = &mut self.code_words_mut(i)[bit / 64];
        if positive {
            *w |= 1 << (bit % 64);
        } else {
            *w &= !(1 << (bit % 64));
        }
    }

    pub fn signs(&self, i: usize) -> Vec<i8> {
        unpack(self.code(i))
    }

    /// Value `±1` at `(bit, i)` as `f64`, i.e. the matrix viewed as `k × count`.
    pub fn value(&self, i: usize, bit: usize) -> f64 {
        f64::from(self.get(i, bit))
    }

    /// Checks the zero-pad invariant; returns the first offending code.
    pub fn check_pads(&self) -> Result<(), BitpackError> {
        if self.words_per_code == 0 {
            return Ok(());
        }
        let mask = !last_word_mask(self.k);
        for i in 0..self.count {
            if self.code(i).words.last().unwrap() & mask != 0 {
                return Err(BitpackError::NonzeroPadBits { code: i });
            }
        }
        Ok(())
    }

    pub fn memory_bits(&self) -> u64 {
        (self.k as u64) * (self.count as u64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.words.len() * 8);
        out.extend_from_slice(CODES_MAGIC);
        out.extend_from_slice(&CODES_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.count as u64).to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BitpackError> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CODES_MAGIC {
            return Err(BitpackError::BadMagic);
        }
        let version = r.u16()?;
        if version != CODES_VERSION {
            return Err(BitpackError::UnsupportedVersion(version));
        }
        let k = r.u32()? as usize;
        let count = r.u64()? as usize;
        let wpc = words_for(k);
        let total = wpc.checked_mul(count).ok_or(BitpackError::Truncated)?;
        if r.remaining() / 8 < total {
            return Err(BitpackError::Truncated);
        }
        let mut words = Vec::with_capacity(total);
        for _ in 0..total {
            words.push(r.u64()?);
        }
        if r.remaining() != 0 {
            return Err(BitpackError::TrailingBytes { count });
        }
        let m = Self {
            k,
            count,
            words_per_code: wpc,
            words,
        };
        m.check_pads()?;
        Ok(m)
    }
}

pub fn write_codes(matrix: &BinaryCodeMatrix, path: &Path) -> Result<(), BitpackError> {
    write_atomic(path, &matrix.to_bytes()).map_err(|source| BitpackError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn read_codes(path: &Path) -> Result<BinaryCodeMatrix, BitpackError> {
    let bytes = fs::read(path).map_err(|source| BitpackError::Io {
        path: path.to_owned(),
        source,
    })?;
    BinaryCodeMatrix::from_bytes(&bytes)
}

fn check_k(expected: usize, found: usize) -> Result<(), BitpackError> {
    if expected == found {
        Ok(())
    } else {
        Err(BitpackError::LengthMismatch { expected, found })
    }
}

#[inline]
pub(crate) fn xor3_popcount(h: &[u64], r: &[u64], t: &[u64]) -> u32 {
    h.iter()
        .zip(r)
        .zip(t)
        .map(|((a, b), c)| (a ^ b ^ c).count_ones())
        .sum()
}

/// `Σᵢ hᵢ rᵢ tᵢ` without length checks.
#[inline]
pub(crate) fn score_unchecked(k: usize, h: &[u64], r: &[u64], t: &[u64]) -> i32 {
    2 * xor3_popcount(h, r, t) as i32 - k as i32
}

/// `(h ∘ r)ᵀ t`, in `[−k, k]` with the parity of `k`.
pub fn triple_score(
    h: PackedCode<'_>,
    r: PackedCode<'_>,
    t: PackedCode<'_>,
) -> Result<i32, BitpackError> {
    check_k(h.k, r.k)?;
    check_k(h.k, t.k)?;
    Ok(score_unchecked(h.k, h.words, r.words, t.words))
}

/// Hamming distance between `h ∘ r` and `t`.
pub fn hamming_translation_distance(
    h: PackedCode<'_>,
    r: PackedCode<'_>,
    t: PackedCode<'_>,
) -> Result<u32, BitpackError> {
    check_k(h.k, r.k)?;
    check_k(h.k, t.k)?;
    Ok(h.k as u32 - xor3_popcount(h.words, r.words, t.words))
}

/// Scores every code in `candidates` substituted at `position`, with `fixed`
/// at the other end. The score is symmetric in head and tail, so `position`
/// only documents intent.
pub fn score_all_candidates(
    fixed: PackedCode<'_>,
    r: PackedCode<'_>,
    candidates: &BinaryCodeMatrix,
    position: Side,
    exec: Exec,
) -> Result<Vec<i32>, BitpackError> {
    let mut out = vec![0i32; candidates.count()];
    score_all_candidates_into(fixed, r, candidates, position, exec, &mut out)?;
    Ok(out)
}

pub fn score_all_candidates_into(
    fixed: PackedCode<'_>,
    r: PackedCode<'_>,
    candidates: &BinaryCodeMatrix,
    _position: Side,
    exec: Exec,
    out: &mut [i32],
) -> Result<(), BitpackError> {
    check_k(fixed.k, r.k)?;
    check_k(fixed.k, candidates.k)?;
    check_k(candidates.count, out.len())?;
    let k = fixed.k;
    let wpc = candidates.words_per_code;
    let key: Vec<u64> = fixed.words.iter().zip(r.words).map(|(a, b)| a ^ b).collect();
    let words = &candidates.words;
    let score_range = |start: usize, slice: &mut [i32]| {
        for (o, s) in slice.iter_mut().enumerate() {
            let i = start + o;
            let c = &words[i * wpc..(i + 1) * wpc];
            let pop: u32 = key.iter().zip(c).map(|(a, b)| (a ^ b).count_ones()).sum();
            *s = 2 * pop as i32 - k as i32;
        }
    };
    // Small universes are not worth the fork/join.
    let exec = if candidates.count < 4096 {
        Exec::Sequential
    } else {
        exec
    };
    par::fill_chunks(exec, out, 2048, score_range);
    Ok(())
}
