//! Network hyperparameters and the structural switches used by ablations.

use serde::{Deserialize, Serialize};

use crate::model::ModelError;
use crate::radiometry::GlaVariant;

/// Which attention logits the fusion stage uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    /// Asymmetric: logits (Q+K)K^T / sqrt(D), queries from the reference
    /// branch, keys and values from the non-reference branch.
    #[default]
    Asymmetric,
    /// Plain cross-attention: logits QK^T / sqrt(D).
    Plain,
}

/// Hyperparameters of the fusion network. Defaults are desk scale; the
/// published configuration uses 64 base channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EafnetConfig {
    /// Feature channels per branch at every scale.
    pub base_channels: usize,
    /// Number of fusion scales; scale s runs at 1/2^(s-1) resolution.
    pub scales: usize,
    /// Side length of the square attention tokens, in feature pixels.
    pub patch_size: usize,
    /// The exposure embedding has `modulation_ratio * base_channels` dims.
    pub modulation_ratio: usize,
    pub gla_variant: GlaVariant,
    pub attention: AttentionKind,
    /// Feed luminance-aligned planes to the network (off = ablation).
    pub use_gla: bool,
    /// Exposure-guided channel modulation (off = ablation).
    pub use_efsm: bool,
    /// Wavelet-subband restoration (off = plain residual restoration).
    pub use_dwt: bool,
    /// Weight of the dilated edge loss next to the L1 term.
    pub lambda_dasl: f64,
    /// Mu-law compression strength used by the loss.
    pub mu: f64,
    pub gamma: f64,
    /// Scale applied to the log2 exposure ratio before embedding.
    pub exposure_scale: f64,
    pub dasl_dilations: Vec<usize>,
}

impl Default for EafnetConfig {
    fn default() -> Self {
        EafnetConfig {
            base_channels: 8,
            scales: 2,
            patch_size: 4,
            modulation_ratio: 2,
            gla_variant: GlaVariant::AsWritten,
            attention: AttentionKind::Asymmetric,
            use_gla: true,
            use_efsm: true,
            use_dwt: true,
            lambda_dasl: 0.25,
            mu: 5000.0,
            gamma: 2.2,
            exposure_scale: 0.1,
            dasl_dilations: vec![1, 2, 3],
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

impl EafnetConfig {
    /// Smallest configuration that still exercises every code path; used by
    /// gradient checks where cost scales with parameter count.
    pub fn tiny() -> Self {
        EafnetConfig { base_channels: 4, patch_size: 2, ..EafnetConfig::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |why: String| Err(ModelError::Config(why));
        if self.scales == 0 {
            return bad("at least one fusion scale is required".into());
        }
        if self.base_channels == 0 || self.patch_size == 0 || self.modulation_ratio == 0 {
            return bad("channels, patch size, and modulation ratio must be positive".into());
        }
        if self.scales >= 2 && self.base_channels % 4 != 0 {
            return bad(format!(
                "cross-scale guidance pixel-shuffles channels by 4, so base_channels must be \
                 divisible by 4 when scales >= 2; got {}",
                self.base_channels
            ));
        }
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return bad(format!("mu must be positive, got {}", self.mu));
        }
        if !(self.gamma.is_finite() && self.gamma > 1.0) {
            return bad(format!("gamma must exceed 1, got {}", self.gamma));
        }
        if !(self.lambda_dasl.is_finite() && self.lambda_dasl >= 0.0) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda_dasl));
        }
        if !self.exposure_scale.is_finite() {
            return bad("exposure scale must be finite".into());
        }
        if self.dasl_dilations.is_empty() || self.dasl_dilations.contains(&0) {
            return bad("edge-loss dilation list must be nonempty and positive".into());
        }
        Ok(())
    }

    /// Attention token dimensionality.
    pub fn token_dim(&self) -> usize {
        self.base_channels * self.patch_size * self.patch_size
    }

    /// Spatial extents are padded to a multiple of this: the coarsest scale
    /// must still split into whole patches, and the restoration pyramid
    /// needs three halvings worth of evenness.
    pub fn pad_multiple(&self) -> usize {
        let a = self.patch_size << (self.scales - 1);
        let b = 8;
        a / gcd(a, b) * b
    }

    pub fn padded_extent(&self, n: usize) -> usize {
        n.div_ceil(self.pad_multiple()) * self.pad_multiple()
    }

    pub fn alignment(&self) -> Option<GlaVariant> {
        self.use_gla.then_some(self.gla_variant)
    }
}
