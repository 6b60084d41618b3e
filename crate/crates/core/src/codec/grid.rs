use crate::error::{Error, Result};

/// Q×T′ integer codes, one row per quantizer level.
///
/// Stored level-major: `codes[level * frames + t]`. Levels are 0-based here;
/// level 0 is the semantic level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    levels: usize,
    frames: usize,
    codes: Vec<u16>,
}

impl TokenGrid {
    pub fn new(levels: usize, frames: usize, codes: Vec<u16>) -> Result<Self> {
        if levels == 0 {
            return Err(Error::config("levels", "a token grid needs at least one level"));
        }
        if codes.len() != levels * frames {
            return Err(Error::Dimension {
                what: "token grid codes".into(),
                expected: levels * frames,
                got: codes.len(),
            });
        }
        Ok(TokenGrid { levels, frames, codes })
    }

    pub fn zeros(levels: usize, frames: usize) -> Self {
        assert!(levels > 0, "token grid needs at least one level");
        TokenGrid {
            levels,
            frames,
            codes: vec![0; levels * frames],
        }
    }

    /// Builds a grid from per-level rows.
    pub fn from_rows(rows: &[Vec<u16>]) -> Result<Self> {
        let levels = rows.len();
        let frames = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != frames) {
            return Err(Error::Sequence("ragged token grid rows".into()));
        }
        TokenGrid::new(levels, frames, rows.concat())
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn code(&self, level: usize, t: usize) -> u16 {
        self.codes[level * self.frames + t]
    }

    pub fn set(&mut self, level: usize, t: usize, code: u16) {
        self.codes[level * self.frames + t] = code;
    }

    pub fn row(&self, level: usize) -> &[u16] {
        &self.codes[level * self.frames..(level + 1) * self.frames]
    }

    pub fn rows(&self) -> Vec<Vec<u16>> {
        (0..self.levels).map(|q| self.row(q).to_vec()).collect()
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    /// Keeps only the first `levels` quantizer rows (coarse view).
    pub fn truncate_levels(&self, levels: usize) -> Result<Self> {
        if levels == 0 || levels > self.levels {
            return Err(Error::range(
                "levels",
                format!("{levels} not in 1..={}", self.levels),
            ));
        }
        TokenGrid::new(levels, self.frames, self.codes[..levels * self.frames].to_vec())
    }

    /// Keeps frames `start..end`.
    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.frames);
        let mut codes = Vec::with_capacity(self.levels * (end - start));
        for q in 0..self.levels {
            codes.extend_from_slice(&self.row(q)[start..end]);
        }
        TokenGrid {
            levels: self.levels,
            frames: end - start,
            codes,
        }
    }

    pub fn max_code(&self) -> Option<u16> {
        self.codes.iter().copied().max()
    }
}
