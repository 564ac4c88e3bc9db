use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Shapes of every sub-network.
///
/// [`ModelConfig::toy`] is what gets trained. [`ModelConfig::full_size`]
/// records workstation-scale shapes for documentation; it validates but is
/// never instantiated here.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Square image side `H = W`.
    pub image_size: usize,
    pub in_channels: usize,
    /// Output widths of the stride-2 blocks of the registration CNN.
    pub reg_channels: Vec<usize>,
    /// Output widths of the stride-2 blocks of the image encoder; the last
    /// entry is the token width `C`.
    pub enc_channels: Vec<usize>,
    /// Shared embedding width `D`.
    pub embed_dim: usize,
    pub projector_heads: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    /// Hidden width of transformer MLPs as a multiple of `D`.
    pub ffn_mult: usize,
    pub max_question_len: usize,
    pub max_answer_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            in_channels: 1,
            reg_channels: vec![8, 16],
            enc_channels: vec![16, 32, 64, 128],
            embed_dim: 128,
            projector_heads: 4,
            text_layers: 1,
            text_heads: 4,
            decoder_layers: 2,
            decoder_heads: 4,
            ffn_mult: 2,
            max_question_len: 12,
            max_answer_len: 14,
        }
    }

    /// Full-size shapes: 224x224 RGB input, 7x7x2048 token grid (N = 49,
    /// C = 2048), an 8-head projector, six 12-head text-encoder layers and a
    /// 12-layer 12-head decoder of width 768.
    pub fn full_size() -> Self {
        Self {
            image_size: 224,
            in_channels: 3,
            reg_channels: vec![16, 32],
            enc_channels: vec![64, 256, 512, 1024, 2048],
            embed_dim: 768,
            projector_heads: 8,
            text_layers: 6,
            text_heads: 12,
            decoder_layers: 12,
            decoder_heads: 12,
            ffn_mult: 4,
            max_question_len: 32,
            max_answer_len: 32,
        }
    }

    pub fn channels(&self) -> usize {
        *self.enc_channels.last().unwrap_or(&0)
    }

    /// Side of the encoder's final feature map (3x3 kernels, pad 1, stride 2).
    pub fn feature_side(&self) -> usize {
        self.enc_channels
            .iter()
            .fold(self.image_size, |s, _| (s + 2 - 3) / 2 + 1)
    }

    /// Image tokens per image, `N = h * w` of the final feature map.
    pub fn tokens_per_image(&self) -> usize {
        self.feature_side().pow(2)
    }

    /// Longest decoder input: two image markers, both token grids, question
    /// marker and tokens, answer marker and answer tokens.
    pub fn max_sequence_len(&self) -> usize {
        4 + 2 * self.tokens_per_image() + self.max_question_len + self.max_answer_len
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.in_channels,
            self.embed_dim,
            self.projector_heads,
            self.text_heads,
            self.decoder_heads,
            self.decoder_layers,
            self.ffn_mult,
            self.max_question_len,
            self.max_answer_len,
        ];
        if positive.iter().any(|&v| v == 0)
            || self.enc_channels.is_empty()
            || self.enc_channels.iter().chain(&self.reg_channels).any(|&c| c == 0)
        {
            return Err(Error::invalid("model_config", "all dimensions must be positive"));
        }
        for h in [self.projector_heads, self.text_heads, self.decoder_heads] {
            if self.embed_dim % h != 0 {
                return Err(Error::invalid("model_config", "embed_dim must be divisible by every head count"));
            }
        }
        if self.image_size < 32 {
            return Err(Error::invalid("model_config", "image_size must be >= 32"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_token_grid() {
        let c = ModelConfig::toy();
        assert_eq!(c.feature_side(), 4);
        assert_eq!(c.tokens_per_image(), 16);
        assert_eq!(c.channels(), 128);
        c.validate().unwrap();
    }

    #[test]
    fn full_size_shapes() {
        let c = ModelConfig::full_size();
        c.validate().unwrap();
        assert_eq!(c.tokens_per_image(), 49);
        assert_eq!(c.channels(), 2048);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = ModelConfig::toy();
        c.decoder_heads = 3;
        assert!(c.validate().is_err());
    }
}
