//! Unified text + audio vocabulary and the frame-major, quantizer-minor
//! interleaving of a [`TokenGrid`] into one flat decoder sequence.
//!
//! Id layout: text ids `[0, text_size)`, then `<audio>` and `</audio>`, then
//! one contiguous block of `K` ids per quantizer level in level order.

mod stream;

pub use stream::{decode_stream, encode_stream, read_stream, write_stream, TokenStream, STREAM_VERSION};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::codec::TokenGrid;
use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedVocab {
    pub text_size: u32,
    pub levels: u32,
    pub codebook_size: u32,
}

/// What a global id denotes under a [`UnifiedVocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Text(u32),
    AudioOpen,
    AudioClose,
    /// `level` is 0-based.
    Audio { level: usize, code: u16 },
    OutOfVocab,
}

impl UnifiedVocab {
    pub fn new(text_size: u32, levels: u32, codebook_size: u32) -> Result<Self> {
        if levels == 0 {
            return Err(Error::config("levels", "must be >= 1"));
        }
        if codebook_size < 2 || codebook_size > u16::MAX as u32 + 1 {
            return Err(Error::config("codebook_size", "must be in 2..=65536"));
        }
        Ok(UnifiedVocab {
            text_size,
            levels,
            codebook_size,
        })
    }

    pub fn total_size(&self) -> u32 {
        self.text_size + 2 + self.levels * self.codebook_size
    }

    pub fn audio_open(&self) -> TokenId {
        self.text_size
    }

    pub fn audio_close(&self) -> TokenId {
        self.text_size + 1
    }

    pub fn q(&self) -> usize {
        self.levels as usize
    }

    /// Global id of code `code` at 0-based `level`.
    pub fn audio_id(&self, level: usize, code: u16) -> TokenId {
        debug_assert!(level < self.levels as usize && (code as u32) < self.codebook_size);
        self.text_size + 2 + level as u32 * self.codebook_size + code as u32
    }

    pub fn level_block(&self, level: usize) -> Range<TokenId> {
        let start = self.text_size + 2 + level as u32 * self.codebook_size;
        start..start + self.codebook_size
    }

    pub fn kind(&self, id: TokenId) -> TokenKind {
        if id < self.text_size {
            TokenKind::Text(id)
        } else if id == self.audio_open() {
            TokenKind::AudioOpen
        } else if id == self.audio_close() {
            TokenKind::AudioClose
        } else if id < self.total_size() {
            let rel = id - self.text_size - 2;
            TokenKind::Audio {
                level: (rel / self.codebook_size) as usize,
                code: (rel % self.codebook_size) as u16,
            }
        } else {
            TokenKind::OutOfVocab
        }
    }

    /// 0-based level of an audio id, if it is one.
    pub fn level_of(&self, id: TokenId) -> Option<usize> {
        match self.kind(id) {
            TokenKind::Audio { level, .. } => Some(level),
            _ => None,
        }
    }

    pub fn is_semantic(&self, id: TokenId) -> bool {
        self.level_of(id) == Some(0)
    }
}

/// Flattens a grid: `<audio>`, then frame by frame the Q level tokens, then
/// `</audio>`. Length is `Q·T′ + 2`.
pub fn interleave(vocab: &UnifiedVocab, grid: &TokenGrid) -> Result<Vec<TokenId>> {
    let mut ids = interleave_open(vocab, grid)?;
    ids.push(vocab.audio_close());
    Ok(ids)
}

/// Same as [`interleave`] without the closing delimiter, for use as a
/// generation prompt.
pub fn interleave_open(vocab: &UnifiedVocab, grid: &TokenGrid) -> Result<Vec<TokenId>> {
    if grid.levels() != vocab.q() {
        return Err(Error::Dimension {
            what: "grid levels vs vocabulary Q".into(),
            expected: vocab.q(),
            got: grid.levels(),
        });
    }
    if let Some(max) = grid.max_code() {
        if max as u32 >= vocab.codebook_size {
            return Err(Error::range(
                "code",
                format!("{max} >= codebook size {}", vocab.codebook_size),
            ));
        }
    }
    let mut ids = Vec::with_capacity(grid.levels() * grid.frames() + 2);
    ids.push(vocab.audio_open());
    for t in 0..grid.frames() {
        for q in 0..grid.levels() {
            ids.push(vocab.audio_id(q, grid.code(q, t)));
        }
    }
    Ok(ids)
}

fn describe(kind: TokenKind, id: TokenId) -> String {
    match kind {
        TokenKind::Text(_) => format!("text token {id}"),
        TokenKind::AudioOpen => "<audio>".into(),
        TokenKind::AudioClose => "</audio>".into(),
        TokenKind::Audio { level, code } => format!("level {} code {code}", level + 1),
        TokenKind::OutOfVocab => format!("out-of-vocabulary id {id}"),
    }
}

/// Exact inverse of [`interleave`]; validates delimiters, level order and
/// rectangularity.
pub fn deinterleave(vocab: &UnifiedVocab, ids: &[TokenId]) -> Result<TokenGrid> {
    if ids.first() != Some(&vocab.audio_open()) {
        return Err(Error::Sequence("missing leading <audio>".into()));
    }
    if ids.len() < 2 || ids.last() != Some(&vocab.audio_close()) {
        return Err(Error::Sequence("missing trailing </audio>".into()));
    }
    let interior = &ids[1..ids.len() - 1];
    let q = vocab.q();
    for (i, &id) in interior.iter().enumerate() {
        let expected = i % q;
        match vocab.kind(id) {
            TokenKind::Audio { level, .. } if level == expected => {}
            TokenKind::Text(_) => {
                return Err(Error::Sequence(format!(
                    "text token {id} inside audio span at interior index {i}"
                )))
            }
            kind => {
                return Err(Error::OrderViolation {
                    index: i,
                    expected: expected + 1,
                    found: describe(kind, id),
                })
            }
        }
    }
    if !interior.len().is_multiple_of(q) {
        return Err(Error::Sequence(format!(
            "interior length {} not divisible by Q={q}",
            interior.len()
        )));
    }
    let frames = interior.len() / q;
    let mut grid = TokenGrid::zeros(q, frames);
    for (i, &id) in interior.iter().enumerate() {
        if let TokenKind::Audio { level, code } = vocab.kind(id) {
            grid.set(level, i / q, code);
        }
    }
    Ok(grid)
}

/// Result of scanning a sequence against the cyclic level layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderReport {
    pub well_formed: bool,
    pub violation_count: usize,
    /// Interior index of the first violation.
    pub first_violation: Option<usize>,
    /// Interior positions scanned.
    pub scanned: usize,
    pub closed: bool,
}

/// Per-interior-position violation flags. Scanning stops at `</audio>`; a
/// closing delimiter that arrives mid-frame is itself flagged.
pub fn violation_flags(vocab: &UnifiedVocab, ids: &[TokenId]) -> (Vec<bool>, bool) {
    let start = usize::from(ids.first() == Some(&vocab.audio_open()));
    let q = vocab.q();
    let mut flags = Vec::new();
    let mut closed = false;
    for &id in &ids[start..] {
        let i = flags.len();
        match vocab.kind(id) {
            TokenKind::AudioClose => {
                if i % q != 0 {
                    flags.push(true);
                }
                closed = true;
                break;
            }
            TokenKind::Audio { level, .. } => flags.push(level != i % q),
            _ => flags.push(true),
        }
    }
    (flags, closed)
}

/// Counts positions whose level breaks the expected cycle 1..Q. Never fails.
pub fn validate_order(vocab: &UnifiedVocab, ids: &[TokenId]) -> OrderReport {
    let (flags, closed) = violation_flags(vocab, ids);
    let violation_count = flags.iter().filter(|&&v| v).count();
    let first_violation = flags.iter().position(|&v| v);
    let opened = ids.first() == Some(&vocab.audio_open());
    // with no violations the close sat on a frame boundary; it must also be
    // the final id
    let well_formed = opened && closed && violation_count == 0 && ids.len() == flags.len() + 2;
    OrderReport {
        well_formed,
        violation_count,
        first_violation,
        scanned: flags.len(),
        closed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> UnifiedVocab {
        UnifiedVocab::new(256, 2, 64).unwrap()
    }

    #[test]
    fn layout_example() {
        let v = vocab();
        let grid = TokenGrid::from_rows(&[vec![5, 7], vec![3, 9]]).unwrap();
        let ids = interleave(&v, &grid).unwrap();
        // <audio>=256; level-1 code c -> 258 + c; level-2 code c -> 258 + 64 + c
        assert_eq!(ids, vec![256, 263, 325, 265, 331, 257]);
        assert_eq!(deinterleave(&v, &ids).unwrap(), grid);
        assert_eq!(v.total_size(), 256 + 2 + 128);
    }

    #[test]
    fn empty_grid_round_trips() {
        let v = vocab();
        let ids = interleave(&v, &TokenGrid::zeros(2, 0)).unwrap();
        assert_eq!(ids, vec![256, 257]);
        let g = deinterleave(&v, &[256, 257]).unwrap();
        assert_eq!(g.frames(), 0);
        assert_eq!(g.levels(), 2);
    }

    #[test]
    fn level_two_first_is_order_violation_at_zero() {
        let v = vocab();
        match deinterleave(&v, &[256, 325, 263, 257]) {
            Err(Error::OrderViolation { index, expected, .. }) => {
                assert_eq!(index, 0);
                assert_eq!(expected, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn deinterleave_rejects_malformed() {
        let v = vocab();
        assert!(matches!(deinterleave(&v, &[263, 325, 257]), Err(Error::Sequence(_))));
        assert!(matches!(deinterleave(&v, &[256, 263, 325]), Err(Error::Sequence(_))));
        assert!(matches!(deinterleave(&v, &[256, 263, 257]), Err(Error::Sequence(_))));
        let err = deinterleave(&v, &[256, 263, 12, 257]).unwrap_err();
        assert!(err.to_string().contains("text token"), "{err}");
    }

    #[test]
    fn interleave_checks_shape() {
        let v = vocab();
        assert!(interleave(&v, &TokenGrid::zeros(3, 4)).is_err());
        let g = TokenGrid::from_rows(&[vec![64], vec![0]]).unwrap();
        assert!(interleave(&v, &g).is_err());
    }

    #[test]
    fn validate_order_cases() {
        let v = vocab();
        // two level-1 tokens in a row: cycle is 1,2 so index 1 is wrong
        let r = validate_order(&v, &[256, 263, 263]);
        assert_eq!(r.violation_count, 1);
        assert_eq!(r.first_violation, Some(1));
        assert!(!r.closed);
        assert!(!r.well_formed);

        let ok = validate_order(&v, &[256, 263, 325, 257]);
        assert!(ok.well_formed);
        assert_eq!(ok.violation_count, 0);

        // prefix without closing delimiter is still scanned
        let open = validate_order(&v, &[256, 263, 325, 263]);
        assert!(!open.well_formed);
        assert_eq!(open.violation_count, 0);
        assert_eq!(open.scanned, 3);

        // closing mid-frame is a violation
        let mid = validate_order(&v, &[256, 263, 257]);
        assert_eq!(mid.violation_count, 1);
        assert!(!mid.well_formed);

        // garbage never panics
        let junk = validate_order(&v, &[9999, 3, 257, 256]);
        assert!(!junk.well_formed);
    }

    #[test]
    fn kinds_partition_the_id_space() {
        let v = UnifiedVocab::new(10, 3, 4).unwrap();
        let mut seen = std::collections::HashSet::new();
        for q in 0..3 {
            for c in 0..4u16 {
                let id = v.audio_id(q, c);
                assert!(id >= 12 && id < v.total_size());
                assert!(seen.insert(id));
                assert_eq!(v.kind(id), TokenKind::Audio { level: q, code: c });
            }
        }
        assert_eq!(v.kind(9), TokenKind::Text(9));
        assert_eq!(v.kind(10), TokenKind::AudioOpen);
        assert_eq!(v.kind(11), TokenKind::AudioClose);
        assert_eq!(v.kind(v.total_size()), TokenKind::OutOfVocab);
    }

    fn grid_strategy() -> impl Strategy<Value = (UnifiedVocab, TokenGrid)> {
        (prop_oneof![Just(1u32), Just(2), Just(4), Just(8)], 2u32..80, 0usize..40).prop_flat_map(
            |(q, k, t)| {
                proptest::collection::vec(0..k as u16, q as usize * t).prop_map(move |codes| {
                    (
                        UnifiedVocab::new(100, q, k).unwrap(),
                        TokenGrid::new(q as usize, t, codes).unwrap(),
                    )
                })
            },
        )
    }

    proptest! {
        #[test]
        fn interleave_is_a_bijection((v, g) in grid_strategy()) {
            let ids = interleave(&v, &g).unwrap();
            prop_assert_eq!(ids.len(), g.levels() * g.frames() + 2);
            let report = validate_order(&v, &ids);
            prop_assert!(report.well_formed);
            prop_assert_eq!(report.violation_count, 0);
            prop_assert_eq!(deinterleave(&v, &ids).unwrap(), g);
        }
    }
}
