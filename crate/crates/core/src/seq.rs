//! Token vocabularies and short token sequences.
//!
//! Token ids are `0..vocab.size()`; the end-of-segment symbol is a distinct
//! id equal to `vocab.size()` and never appears inside a [`Seq`]. Logit rows
//! therefore have `vocab.size() + 1` entries, one per content token plus one
//! for end-of-segment.

use std::fmt;
use thiserror::Error;

/// Everything stays exactly enumerable under these limits; constructors treat
/// violations as configuration errors.
pub const MAX_VOCAB: usize = 8;
pub const MAX_TRACE_CAP: usize = 4;
pub const MAX_ANSWER_CAP: usize = 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SeqError {
    #[error("vocab size {0} outside 2..={MAX_VOCAB}")]
    VocabSize(usize),
    #[error("token id `{0}` is not a decimal id")]
    BadToken(String),
    #[error("token id {got} out of range for vocab of size {size}")]
    TokenOutOfRange { got: usize, size: usize },
}

/// A content-token alphabet of at least two ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self, SeqError> {
        if !(2..=MAX_VOCAB).contains(&size) {
            return Err(SeqError::VocabSize(size));
        }
        Ok(Vocab { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Id of the end-of-segment symbol.
    pub fn end(&self) -> usize {
        self.size
    }

    /// Length of a logit row: one slot per content token plus end-of-segment.
    pub fn width(&self) -> usize {
        self.size + 1
    }

    pub fn contains(&self, token: u8) -> bool {
        (token as usize) < self.size
    }
}

/// Per-role length caps for trace and answer segments. Posterior segments
/// share the trace cap since they range over the same objects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentCaps {
    pub trace: usize,
    pub answer: usize,
}

/// A segment of content tokens. End-of-segment is implied, not stored, so the
/// empty sequence is valid (a segment that ends immediately).
#[derive(Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Seq(Vec<u8>);

impl Seq {
    pub fn new(ids: Vec<u8>) -> Self {
        Seq(ids)
    }

    pub fn empty() -> Self {
        Seq(Vec::new())
    }

    pub fn ids(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn push(&mut self, id: u8) {
        self.0.push(id);
    }

    /// First `n` tokens as a new sequence.
    pub fn prefix(&self, n: usize) -> Seq {
        Seq(self.0[..n].to_vec())
    }

    /// Comma-separated decimal ids; the empty sequence renders as "".
    pub fn to_csv(&self) -> String {
        self.0
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Parses the [`Seq::to_csv`] form. "" parses to the empty sequence.
    pub fn from_csv(s: &str) -> Result<Self, SeqError> {
        if s.is_empty() {
            return Ok(Seq::empty());
        }
        let mut ids = Vec::new();
        for part in s.split(',') {
            let id: u8 = part
                .parse()
                .map_err(|_| SeqError::BadToken(part.to_string()))?;
            ids.push(id);
        }
        Ok(Seq(ids))
    }

    /// Errors unless every token is a content id of `vocab`.
    pub fn check_vocab(&self, vocab: Vocab) -> Result<(), SeqError> {
        for &t in &self.0 {
            if !vocab.contains(t) {
                return Err(SeqError::TokenOutOfRange {
                    got: t as usize,
                    size: vocab.size(),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Seq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.to_csv())
    }
}

/// All sequences over `vocab` with length `0..=max_len`, ordered by length
/// then lexicographically. This is the canonical enumeration order used by
/// the oracle; reductions over it are deterministic.
pub fn all_segments(vocab: Vocab, max_len: usize) -> Vec<Seq> {
    let mut out = vec![Seq::empty()];
    let mut frontier = vec![Seq::empty()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(frontier.len() * vocab.size());
        for s in &frontier {
            for t in 0..vocab.size() as u8 {
                let mut extended = s.clone();
                extended.push(t);
                next.push(extended);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Number of sequences [`all_segments`] would return: `sum_{l<=max_len} V^l`.
pub fn segment_count(vocab: Vocab, max_len: usize) -> u64 {
    let v = vocab.size() as u64;
    let mut total = 0u64;
    let mut layer = 1u64;
    for _ in 0..=max_len {
        total += layer;
        layer *= v;
    }
    total
}

impl From<&[u8]> for Seq {
    fn from(ids: &[u8]) -> Self {
        Seq(ids.to_vec())
    }
}

impl<const N: usize> From<[u8; N]> for Seq {
    fn from(ids: [u8; N]) -> Self {
        Seq(ids.to_vec())
    }
}
