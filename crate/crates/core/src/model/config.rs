use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Shape of a Vision Transformer: the encoder, the optional lightweight
/// decoder used by the student, and the projection head onto the teacher's
/// embedding width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default)]
    pub drop_path_rate: f64,
    #[serde(default = "default_true")]
    pub use_decoder: bool,
    #[serde(default)]
    pub decoder_dim: usize,
    #[serde(default)]
    pub decoder_depth: usize,
    #[serde(default)]
    pub decoder_heads: usize,
    /// Width of the student's output; equals the teacher target width.
    #[serde(default)]
    pub projection_dim: usize,
}

fn default_channels() -> usize {
    3
}
fn default_mlp_ratio() -> f64 {
    4.0
}
fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Encoder-only shape with the desk-scale decoder defaults filled in
    /// (half width, half the heads, two blocks) and a square projection.
    pub fn new(image_size: usize, patch_size: usize, embed_dim: usize, depth: usize, num_heads: usize) -> Self {
        Self {
            image_size,
            patch_size,
            in_channels: 3,
            embed_dim,
            depth,
            num_heads,
            mlp_ratio: 4.0,
            drop_path_rate: 0.0,
            use_decoder: true,
            decoder_dim: embed_dim / 2,
            decoder_depth: 2,
            decoder_heads: (num_heads / 2).max(1),
            projection_dim: embed_dim,
        }
    }

    /// The tiny model used for desk-scale runs: 32×32 inputs, 8-pixel patches,
    /// four blocks of width 96.
    pub fn desk() -> Self {
        Self {
            drop_path_rate: 0.1,
            ..Self::new(32, 8, 96, 4, 4)
        }
    }

    /// ViT-B/16 with the MAE decoder (full-scale reference shape).
    pub fn vit_base() -> Self {
        Self {
            drop_path_rate: 0.2,
            decoder_dim: 512,
            decoder_depth: 8,
            decoder_heads: 16,
            ..Self::new(224, 16, 768, 12, 12)
        }
    }

    /// Replace zero decoder/projection fields with their defaults.
    pub fn with_defaults(mut self) -> Self {
        if self.decoder_dim == 0 {
            self.decoder_dim = self.embed_dim / 2;
        }
        if self.decoder_heads == 0 {
            self.decoder_heads = (self.num_heads / 2).max(1);
        }
        if self.decoder_depth == 0 && self.use_decoder {
            self.decoder_depth = 2;
        }
        if self.projection_dim == 0 {
            self.projection_dim = self.embed_dim;
        }
        self
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn n_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn decoder_hidden_dim(&self) -> usize {
        (self.decoder_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Width of the features entering the projection head.
    pub fn head_input_dim(&self) -> usize {
        if self.use_decoder {
            self.decoder_dim
        } else {
            self.embed_dim
        }
    }

    /// Stochastic-depth rate of encoder block `layer`, linear from 0 to
    /// `drop_path_rate` across the stack.
    pub fn drop_path_at(&self, layer: usize) -> f64 {
        if self.depth <= 1 {
            self.drop_path_rate
        } else {
            self.drop_path_rate * layer as f64 / (self.depth - 1) as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.embed_dim % 4 != 0 {
            return bad(format!("embed_dim {} must be a multiple of 4 for 2-D sin-cos positions", self.embed_dim));
        }
        if self.depth == 0 {
            return bad("depth must be positive".into());
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return bad(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        if !(0.0..=1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop_path_rate {} outside [0, 1]", self.drop_path_rate));
        }
        if self.projection_dim == 0 {
            return bad("projection_dim must be positive".into());
        }
        if self.use_decoder {
            if self.decoder_dim == 0 || self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
                return bad(format!(
                    "decoder_dim {} not divisible by decoder_heads {}",
                    self.decoder_dim, self.decoder_heads
                ));
            }
            if self.decoder_dim % 4 != 0 {
                return bad(format!("decoder_dim {} must be a multiple of 4", self.decoder_dim));
            }
            if self.decoder_depth == 0 {
                return bad("decoder_depth must be positive when use_decoder is set".into());
            }
        }
        Ok(())
    }

    /// Short stable hash of the configuration, stored alongside parameters.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::params::hex(&Sha256::digest(json)[..8])
    }
}
