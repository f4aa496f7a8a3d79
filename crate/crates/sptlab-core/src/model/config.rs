//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positional-encoding variant. Absolute sinusoidal encodings are added to
/// the input once; ALiBi subtracts a slope-scaled distance from every
/// attention score; RoPE rotates queries and keys position-dependently. The
/// combined variants stack two mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeVariant {
    #[serde(rename = "abs-sin")]
    AbsSin,
    #[serde(rename = "alibi")]
    Alibi,
    #[serde(rename = "rope")]
    Rope,
    #[serde(rename = "abs+alibi")]
    AbsAlibi,
    #[serde(rename = "rope+alibi")]
    RopeAlibi,
    #[serde(rename = "none")]
    None,
}

impl PeVariant {
    pub fn has_abs(self) -> bool {
        matches!(self, PeVariant::AbsSin | PeVariant::AbsAlibi)
    }

    pub fn has_alibi(self) -> bool {
        matches!(
            self,
            PeVariant::Alibi | PeVariant::AbsAlibi | PeVariant::RopeAlibi
        )
    }

    pub fn has_rope(self) -> bool {
        matches!(self, PeVariant::Rope | PeVariant::RopeAlibi)
    }

    pub const ALL: [PeVariant; 6] = [
        PeVariant::AbsSin,
        PeVariant::Alibi,
        PeVariant::Rope,
        PeVariant::AbsAlibi,
        PeVariant::RopeAlibi,
        PeVariant::None,
    ];
}

/// What the encoder consumes: continuous vectors of a fixed dimension, or
/// integer token ids below a vocabulary size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    Continuous { dim: usize },
    Token { vocab: usize },
}

impl InputKind {
    /// Dimension of the reconstruction target: the input dimension for
    /// continuous data, the vocabulary size (logits) for tokens.
    pub fn recon_dim(self) -> usize {
        match self {
            InputKind::Continuous { dim } => dim,
            InputKind::Token { vocab } => vocab,
        }
    }
}

/// Full architecture description. `toy_mode` selects the stripped single
/// attention layer used for the synthetic task: no biases, no MLP, no
/// LayerNorm, no residuals, no dropout — exactly encoder, positional
/// encoding, one attention layer, mean-pool, linear heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of residual blocks T (toy: 1).
    pub depth: usize,
    /// Model width D.
    pub width: usize,
    /// Attention heads H (must divide `width`; toy: 1).
    pub heads: usize,
    /// MLP hidden width (ignored in toy mode).
    pub mlp_hidden: usize,
    pub num_classes: usize,
    pub pe_variant: PeVariant,
    pub dropout_rate: f64,
    pub toy_mode: bool,
    pub input_kind: InputKind,
    /// How masked positions are presented to the encoder. Only one scheme is
    /// implemented; the field is recorded so artifacts are explicit about it.
    #[serde(default)]
    pub mask_scheme: MaskScheme,
}

/// Masked-position presentation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskScheme {
    /// Replace the raw input element with zero, then add a learned
    /// mask embedding after encoding.
    #[default]
    ZeroPlusEmbed,
}

impl ModelConfig {
    /// The toy single-head attention-only model for the synthetic task.
    pub fn toy(width: usize) -> Self {
        ModelConfig {
            depth: 1,
            width,
            heads: 1,
            mlp_hidden: 0,
            num_classes: 2,
            pe_variant: PeVariant::AbsSin,
            dropout_rate: 0.0,
            toy_mode: true,
            input_kind: InputKind::Continuous { dim: 2 },
            mask_scheme: MaskScheme::ZeroPlusEmbed,
        }
    }

    /// Per-head width.
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Dropout active only for full models in train mode.
    pub fn effective_dropout(&self) -> f64 {
        if self.toy_mode {
            0.0
        } else {
            self.dropout_rate
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.heads == 0 {
            return Err(Error::Config(
                "depth, width, and heads must be positive".into(),
            ));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.toy_mode && (self.depth != 1 || self.heads != 1) {
            return Err(Error::Config(
                "toy_mode requires depth=1 and heads=1".into(),
            ));
        }
        if !self.toy_mode && self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.pe_variant.has_abs() && self.width % 2 != 0 {
            return Err(Error::Config(format!(
                "absolute sinusoidal encoding requires even width, got {}",
                self.width
            )));
        }
        if self.pe_variant.has_rope() && self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary encoding requires even head dim, got {}",
                self.head_dim()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        match self.input_kind {
            InputKind::Continuous { dim } if dim == 0 => {
                return Err(Error::Config("input dim must be positive".into()))
            }
            InputKind::Token { vocab } if vocab == 0 => {
                return Err(Error::Config("vocab must be positive".into()))
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid() {
        ModelConfig::toy(32).validate().unwrap();
    }

    #[test]
    fn width_head_divisibility_enforced() {
        let mut cfg = ModelConfig::toy(32);
        cfg.toy_mode = false;
        cfg.mlp_hidden = 16;
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toy_mode_restricts_depth_and_heads() {
        let mut cfg = ModelConfig::toy(32);
        cfg.depth = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rope_needs_even_head_dim() {
        let mut cfg = ModelConfig::toy(32);
        cfg.toy_mode = false;
        cfg.mlp_hidden = 8;
        cfg.depth = 1;
        cfg.heads = 1;
        cfg.width = 7;
        cfg.pe_variant = PeVariant::Rope;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pe_variant_serialization_names() {
        let names: Vec<String> = PeVariant::ALL
            .iter()
            .map(|v| serde_json::to_string(v).unwrap())
            .collect();
        assert_eq!(
            names,
            vec![
                "\"abs-sin\"",
                "\"alibi\"",
                "\"rope\"",
                "\"abs+alibi\"",
                "\"rope+alibi\"",
                "\"none\""
            ]
        );
    }
}
