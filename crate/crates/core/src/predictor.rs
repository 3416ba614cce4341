//! Linear softmax classifier, source cross-entropy and the weighted total objective.

use rand::Rng;

use crate::contrastive::check_simplex;
use crate::encoder::xavier;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ClassifierParams {
    /// `d×N_c`
    pub w: Tensor,
    pub b: Tensor,
}

impl ClassifierParams {
    pub fn init(rng: &mut impl Rng, dim: usize, n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {n_classes}")));
        }
        Ok(ClassifierParams {
            w: xavier(rng, dim, n_classes),
            b: Tensor::param(&[n_classes], vec![0.0; n_classes])?,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.b.numel()
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        vec![("cls.w".into(), self.w.clone()), ("cls.b".into(), self.b.clone())]
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        features.matmul(&self.w)?.add_row(&self.b)
    }

    /// Row-wise class probabilities for `B×d` features.
    pub fn predict_batch(&self, features: &Tensor) -> Result<Tensor> {
        self.logits(features)?.softmax_rows()
    }

    /// Class probabilities for one embedding.
    pub fn predict(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::new(&[1, embedding.len()], embedding.to_vec())?;
        Ok(self.predict_batch(&x)?.to_vec())
    }

    pub fn infer_label(&self, embedding: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict(embedding)?))
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean negative log-probability of the true class, probabilities floored.
pub fn cross_entropy_source(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = (probs.rows(), probs.cols());
    if probs.shape().len() != 2 || labels.len() != b || b == 0 {
        return Err(Error::Contract(format!(
            "cross-entropy: {} labels for probabilities of shape {:?}",
            labels.len(),
            probs.shape()
        )));
    }
    let mut onehot = vec![0.0; b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Contract(format!("label {y} outside [0, {k})")));
        }
        onehot[i * k + y] = 1.0;
    }
    let onehot = Tensor::new(&[b, k], onehot)?;
    Ok(probs.clamp_min(PROB_FLOOR).log().mul(&onehot)?.sum().scale(-1.0 / b as f64))
}

/// `γ` weights of the supervised, contrastive and consistency terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub contrastive: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 0.8,
            contrastive: 0.1,
            consistency: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(ce: f64, contrastive: f64, consistency: f64) -> Self {
        LossWeights {
            ce,
            contrastive,
            consistency,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_simplex("gamma", &[self.ce, self.contrastive, self.consistency])
    }
}

/// `γ₁·ce + γ₂·contrastive + γ₃·consistency`; a `None` component counts as zero.
pub fn total_loss(ce: &Tensor, contrastive: Option<&Tensor>, consistency: Option<&Tensor>, w: &LossWeights) -> Result<Tensor> {
    let mut total = ce.scale(w.ce);
    if let Some(cl) = contrastive {
        total = total.add(&cl.scale(w.contrastive))?;
    }
    if let Some(ca) = consistency {
        total = total.add(&ca.scale(w.consistency))?;
    }
    Ok(total)
}
