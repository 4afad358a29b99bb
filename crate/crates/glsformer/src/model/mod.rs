//! The gated long/short two-stream transformer: patch embedding, L blocks
//! of gated temporal attention followed by shared spatial attention and an
//! MLP, then a classification head reading the cls token.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    forward, forward_logits, gate_qkv, ForwardStats, GateRecord, Pass, SupportRecord, TapedParams,
    TokenCoord,
};
pub use params::ModelParams;

use crate::sampler::StreamConfig;
use crate::{GlsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatingMode {
    /// Long stream absent entirely; single-stream divided space-time model.
    OnlyShortTerm,
    /// Plain averaging of individual and joint stream features (g = 0.5).
    NoGating,
    /// Learnable input-independent gate logits.
    FixedParam,
    /// Gate logits predicted from pooled stream features.
    Feature,
}

impl GatingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "onlyshortterm" | "only_short_term" | "short" => Ok(GatingMode::OnlyShortTerm),
            "nogating" | "no_gating" | "none" => Ok(GatingMode::NoGating),
            "fixedparam" | "fixed_param" | "fixed" => Ok(GatingMode::FixedParam),
            "feature" => Ok(GatingMode::Feature),
            other => Err(GlsError::config(format!("unknown gating mode '{}'", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GatingMode::OnlyShortTerm => "onlyshortterm",
            GatingMode::NoGating => "nogating",
            GatingMode::FixedParam => "fixedparam",
            GatingMode::Feature => "feature",
        }
    }

    pub fn uses_long_stream(&self) -> bool {
        !matches!(self, GatingMode::OnlyShortTerm)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// patch side in pixels
    pub patch: usize,
    /// embedding dimension
    pub embed_dim: usize,
    /// attention heads
    pub heads: usize,
    /// encoder block count
    pub blocks: usize,
    pub n_st: usize,
    pub n_lt: usize,
    pub s: usize,
    pub num_classes: usize,
    pub gating_mode: GatingMode,
}

impl ModelConfig {
    /// Desk-scale default: 32x32 frames, 8x8 patches, K=64, 4 heads,
    /// 2 blocks, 4+4 frames at stride 4, 6 classes, feature gating.
    pub fn desk_default() -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
            embed_dim: 64,
            heads: 4,
            blocks: 2,
            n_st: 4,
            n_lt: 4,
            s: 4,
            num_classes: 6,
            gating_mode: GatingMode::Feature,
        }
    }

    /// Tiny config used by gradient checks.
    pub fn gradcheck_toy() -> Self {
        ModelConfig {
            height: 16,
            width: 16,
            channels: 3,
            patch: 8,
            embed_dim: 32,
            heads: 4,
            blocks: 2,
            n_st: 2,
            n_lt: 2,
            s: 2,
            num_classes: 4,
            gating_mode: GatingMode::Feature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(GlsError::config(format!(
                "patch side {} must divide frame {}x{}",
                self.patch, self.height, self.width
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(GlsError::config(format!(
                "heads {} must divide embed dim {}",
                self.heads, self.embed_dim
            )));
        }
        if self.blocks == 0 || self.num_classes < 2 {
            return Err(GlsError::config(
                "need at least one block and two classes",
            ));
        }
        self.stream_config().validate()
    }

    /// N, patches per frame.
    pub fn patches_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// flattened patch length, channels * patch^2
    pub fn patch_len(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// short-stream token count including the cls token
    pub fn tokens_st(&self) -> usize {
        self.patches_per_frame() * self.n_st + 1
    }

    /// long-stream token count (zero when the long stream is absent)
    pub fn tokens_lt(&self) -> usize {
        if self.gating_mode.uses_long_stream() {
            self.patches_per_frame() * self.n_lt
        } else {
            0
        }
    }

    pub fn tokens_total(&self) -> usize {
        self.tokens_lt() + self.tokens_st()
    }

    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            n_st: self.n_st,
            n_lt: self.n_lt,
            s: self.s,
        }
    }

    /// Attention logits per block under divided attention, matching what the
    /// forward pass actually computes.
    pub fn divided_logits_per_block(&self) -> usize {
        let n = self.patches_per_frame();
        let (n_lt, frames_lt) = if self.gating_mode.uses_long_stream() {
            (self.n_lt, self.n_lt)
        } else {
            (0, 0)
        };
        let temporal_keys = 1 + n_lt + self.n_st;
        let patch_rows = n * (n_lt + self.n_st);
        let temporal = self.heads
            * (patch_rows * temporal_keys + (1 + n * n_lt + n * self.n_st));
        let spatial =
            self.heads * ((frames_lt + self.n_st) * n * (1 + n) + (1 + n));
        temporal + spatial
    }

    /// Logit count a joint (non-divided) attention over all tokens would need.
    pub fn joint_logits_per_block(&self) -> usize {
        let t = self.tokens_total();
        self.heads * t * t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_count_matches_formula() {
        let cfg = ModelConfig {
            height: 32,
            width: 32,
            patch: 8,
            ..ModelConfig::desk_default()
        };
        assert_eq!(cfg.patches_per_frame(), 16);
    }

    #[test]
    fn invalid_patch_side_rejected() {
        let cfg = ModelConfig {
            patch: 5,
            ..ModelConfig::desk_default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn divided_attention_beats_joint_for_shipped_configs() {
        for cfg in [ModelConfig::desk_default(), ModelConfig::gradcheck_toy()] {
            assert!(cfg.divided_logits_per_block() < cfg.joint_logits_per_block());
        }
    }
}
