use super::revin::RevinStats;
use super::time::WindowSpan;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Patch count for a window of `t` steps: `⌊(t − len)/stride⌋ + 2`.
pub fn patch_count(t: usize, len: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("patch stride must be at least 1".into()));
    }
    if len == 0 || len > t {
        return Err(Error::Config(format!(
            "patch length {len} does not fit a window of {t} steps"
        )));
    }
    Ok((t - len) / stride + 2)
}

/// A normalised univariate window cut into patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    /// P × L_p.
    pub patches: Tensor,
    pub len: usize,
    pub stride: usize,
    pub span: Option<WindowSpan>,
    pub stats: Option<RevinStats>,
}

impl PatchSequence {
    pub fn count(&self) -> usize {
        self.patches.rows()
    }

    /// Offset (in window steps) of patch `p`'s first value.
    pub fn offset(&self, p: usize) -> usize {
        p * self.stride
    }
}

/// Cuts a normalised window into `patch_count(T, len, stride)` patches.
///
/// The window is right-padded by repeating its final `stride` values before
/// slicing, so the last patch always reaches past the observed data and the
/// patch count follows the `+2` formula.
pub fn patchify(window: &[f64], len: usize, stride: usize) -> Result<PatchSequence> {
    let p = patch_count(window.len(), len, stride)?;
    let t = window.len();
    if stride > t {
        return Err(Error::Config(format!(
            "patch stride {stride} exceeds the window length {t}"
        )));
    }
    let mut padded = Vec::with_capacity(t + stride);
    padded.extend_from_slice(window);
    padded.extend_from_slice(&window[t - stride..]);
    let mut data = Vec::with_capacity(p * len);
    for k in 0..p {
        let off = k * stride;
        data.extend_from_slice(&padded[off..off + len]);
    }
    Ok(PatchSequence {
        patches: Tensor::matrix(p, len, data)?,
        len,
        stride,
        span: None,
        stats: None,
    })
}
