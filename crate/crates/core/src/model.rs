use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::PathSet;
use crate::encoder::{encode_batch, AttentionParams, EncoderParams};
use crate::error::{Error, Result};
use crate::predictor::{argmax, ClassifierParams};
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub n_classes: usize,
    pub residual: bool,
    /// Cross-attention reuses the encoder's projections when true.
    pub share_cam_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: crate::data::DEFAULT_DIM,
            heads: 4,
            ffn_dim: 600,
            n_classes: 2,
            residual: false,
            share_cam_weights: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("dim and ffn_dim must be positive".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("heads ({}) must divide dim ({})", self.heads, self.dim)));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!("n_classes must be at least 2, got {}", self.n_classes)));
        }
        Ok(())
    }
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    /// Separate cross-attention projections, present only when not shared.
    pub cam: Option<AttentionParams>,
    pub classifier: ClassifierParams,
}

impl ModelParams {
    /// Xavier-uniform weights and zero biases from a seeded generator.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&mut rng, config.dim, config.heads, config.ffn_dim, config.residual)?;
        let classifier = ClassifierParams::init(&mut rng, config.dim, config.n_classes)?;
        let cam = if config.share_cam_weights {
            None
        } else {
            Some(AttentionParams::init(&mut rng, config.dim, config.heads)?)
        };
        Ok(ModelParams {
            config,
            encoder,
            cam,
            classifier,
        })
    }

    /// Named parameters in a fixed order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = self.encoder.named();
        if let Some(cam) = &self.cam {
            out.extend(cam.named("cam"));
        }
        out.extend(self.classifier.named());
        out
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.named() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rumor vectors for a set of path sets, without recording a graph.
    pub fn embed(&self, pathsets: &[&PathSet]) -> Result<Vec<Vec<f64>>> {
        if pathsets.is_empty() {
            return Ok(Vec::new());
        }
        no_grad(|| {
            let f = encode_batch(pathsets, &self.encoder)?.features;
            Ok((0..f.rows()).map(|i| f.row(i)).collect())
        })
    }

    /// Class probabilities per path set.
    pub fn predict(&self, pathsets: &[&PathSet]) -> Result<Vec<Vec<f64>>> {
        if pathsets.is_empty() {
            return Ok(Vec::new());
        }
        no_grad(|| {
            let f = encode_batch(pathsets, &self.encoder)?.features;
            let p = self.classifier.predict_batch(&f)?;
            Ok((0..p.rows()).map(|i| p.row(i)).collect())
        })
    }

    pub fn infer_labels(&self, pathsets: &[&PathSet]) -> Result<Vec<usize>> {
        Ok(self.predict(pathsets)?.iter().map(|p| argmax(p)).collect())
    }
}

/// Parameter group of a tensor name: the head index suffix is dropped.
pub fn param_group(name: &str) -> String {
    match name.rsplit_once('.') {
        Some((prefix, last)) if last.chars().all(|c| c.is_ascii_digit()) => prefix.to_string(),
        _ => name.to_string(),
    }
}
