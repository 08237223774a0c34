//! Multimodal conditioning: frozen toy encoders, the image projection MLP,
//! image cross-attention, γ-weighted fusion and the conditioned ε-predictor.

mod adapter;
mod denoiser;
mod encoders;

use serde::{Deserialize, Serialize};

pub use adapter::{attention, attention_var, fuse, fuse_var, icam, icam_var, ipm, ipm_var, AdapterParams, AdapterVars};
pub use denoiser::{
    denoise, denoise_text_only, denoise_var, freeze_reference, patch_permutation, timestep_embedding, BlockVars,
    Conditioning, DenoiserParams, DenoiserVars,
};
pub use encoders::{encode_image, encode_text, ImageEmbedding, ImageEncoder, TextEmbedding, TextEncoder};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

/// Frozen toy encoder settings. Recording the seeds makes embeddings
/// reproducible across machines.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub vocab: usize,
    pub text_dim: usize,
    pub clip_dim: usize,
    pub patch: usize,
    pub text_seed: u64,
    pub image_seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            vocab: 10,
            text_dim: 16,
            clip_dim: 16,
            patch: 2,
            text_seed: 1001,
            image_seed: 2002,
        }
    }
}

impl EncoderSpec {
    pub fn text_encoder(&self) -> TextEncoder {
        TextEncoder::new(self.vocab, self.text_dim, self.text_seed)
    }

    pub fn image_encoder(&self, channels: usize) -> ImageEncoder {
        ImageEncoder::new(self.patch, channels, self.clip_dim, self.image_seed)
    }
}

/// Shapes of the denoiser and adapter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub attn_dim: usize,
    /// Width of text tokens and projected image tokens.
    pub ctx_dim: usize,
    /// Width of raw image-encoder tokens fed to the projection MLP.
    pub clip_dim: usize,
    pub ipm_hidden: usize,
    pub ipm_activation: Activation,
    pub blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 16,
            patch: 2,
            hidden: 64,
            mlp_hidden: 128,
            attn_dim: 16,
            ctx_dim: 16,
            clip_dim: 16,
            ipm_hidden: 16,
            ipm_activation: Activation::Gelu,
            blocks: 2,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            height: 4,
            width: 4,
            channels: 2,
            patch: 2,
            hidden: 6,
            mlp_hidden: 8,
            attn_dim: 4,
            ctx_dim: 3,
            clip_dim: 5,
            ipm_hidden: 4,
            ipm_activation: Activation::Gelu,
            blocks: 2,
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.height,
            self.width,
            self.channels,
            self.patch,
            self.hidden,
            self.mlp_hidden,
            self.attn_dim,
            self.ctx_dim,
            self.clip_dim,
            self.ipm_hidden,
            self.blocks,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        Ok(())
    }
}
