use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Where TS-tokens sit in the sequence and who may see them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VisibilityMode {
    /// `[patches ‖ ts-tokens]`. Patches attend causally to patches and to
    /// every TS-token; TS-tokens attend to each other only.
    #[default]
    SuffixGlobal,
    /// `[ts-tokens ‖ patches]` under a plain causal mask.
    Prefix,
}

impl VisibilityMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "suffix-global" => Ok(Self::SuffixGlobal),
            "prefix" => Ok(Self::Prefix),
            _ => Err(Error::Config(format!(
                "unknown visibility mode `{s}` (expected suffix-global or prefix)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SuffixGlobal => "suffix-global",
            Self::Prefix => "prefix",
        }
    }
}

/// Row layout of a sequence holding `n_patches` patch rows and `n_ts`
/// TS-token rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub mode: VisibilityMode,
    pub n_patches: usize,
    pub n_ts: usize,
}

impl SequenceLayout {
    pub fn new(mode: VisibilityMode, n_patches: usize, n_ts: usize) -> Self {
        Self {
            mode,
            n_patches,
            n_ts,
        }
    }

    pub fn len(&self) -> usize {
        self.n_patches + self.n_ts
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_rows(&self) -> Range<usize> {
        match self.mode {
            VisibilityMode::SuffixGlobal => 0..self.n_patches,
            VisibilityMode::Prefix => self.n_ts..self.len(),
        }
    }

    pub fn ts_rows(&self) -> Range<usize> {
        match self.mode {
            VisibilityMode::SuffixGlobal => self.n_patches..self.len(),
            VisibilityMode::Prefix => 0..self.n_ts,
        }
    }

    pub fn mask(&self) -> AttentionMask {
        match self.mode {
            VisibilityMode::Prefix => AttentionMask::causal(self.len()),
            VisibilityMode::SuffixGlobal => {
                let n = self.len();
                let p = self.n_patches;
                AttentionMask::from_fn(n, |i, j| {
                    if i < p {
                        j <= i || j >= p
                    } else {
                        j >= p
                    }
                })
            }
        }
    }
}

/// Additive attention mask with entries `0` (visible) or `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    additive: Tensor,
}

impl AttentionMask {
    /// Row `i` may attend to column `j` when `visible(i, j)`.
    pub fn from_fn(n: usize, visible: impl Fn(usize, usize) -> bool) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if !visible(i, j) {
                    t.data_mut()[i * n + j] = f64::NEG_INFINITY;
                }
            }
        }
        Self { additive: t }
    }

    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, |i, j| j <= i)
    }

    pub fn len(&self) -> usize {
        self.additive.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.additive.get(i, j) == 0.0
    }

    pub fn tensor(&self) -> &Tensor {
        &self.additive
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffix_global_blocks() {
        let m = SequenceLayout::new(VisibilityMode::SuffixGlobal, 3, 2).mask();
        // patches: causal over patches, all ts-tokens visible
        assert!(m.is_visible(0, 0) && !m.is_visible(0, 1) && m.is_visible(0, 3) && m.is_visible(0, 4));
        assert!(m.is_visible(2, 1));
        // ts-tokens never see patches
        for j in 0..3 {
            assert!(!m.is_visible(3, j) && !m.is_visible(4, j));
        }
        assert!(m.is_visible(3, 4) && m.is_visible(4, 3));
    }

    #[test]
    fn prefix_is_plain_causal() {
        let layout = SequenceLayout::new(VisibilityMode::Prefix, 3, 2);
        assert_eq!(layout.mask(), AttentionMask::causal(5));
        assert_eq!(layout.ts_rows(), 0..2);
        assert_eq!(layout.patch_rows(), 2..5);
    }
}
