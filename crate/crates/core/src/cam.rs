//! Cross-attention consistency: same-label source/target pairs, source queries
//! attending over target keys and values, and a KL penalty between the
//! classifier's predictions on the cross- and self-attention encodings.

use rand::Rng;

use crate::data::PathSet;
use crate::encoder::{cross_attention_batch, AttentionParams, EncodedBatch, EncoderParams};
use crate::error::{Error, Result};
use crate::predictor::{ClassifierParams, PROB_FLOOR};
use crate::tensor::Tensor;

/// A source rumor paired with a target rumor of the same (pseudo) label.
#[derive(Debug, Clone)]
pub struct CrossPair<'a> {
    pub source: &'a PathSet,
    pub target: &'a PathSet,
    pub label: usize,
}

/// For each source sample, one uniformly drawn target sample whose pseudo
/// label matches. Sources without a match are skipped. Returns
/// `(source index, target index)` pairs in source order.
pub fn make_pairs(source_labels: &[usize], target_labels: &[usize], rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, &y) in source_labels.iter().enumerate() {
        let candidates: Vec<usize> = target_labels
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == y)
            .map(|(j, _)| j)
            .collect();
        if candidates.is_empty() {
            continue;
        }
        pairs.push((i, candidates[rng.gen_range(0..candidates.len())]));
    }
    pairs
}

/// `Σ_pairs Σ_classes p_cross · (log p_cross − log p)` with both distributions
/// floored before the log. Inputs are `P×N_c` probability rows.
pub fn kl_consistency(p_cross: &Tensor, p_self: &Tensor) -> Result<Tensor> {
    if p_cross.shape() != p_self.shape() {
        return Err(Error::shape("kl_consistency", p_cross.shape(), p_self.shape()));
    }
    let log_ratio = p_cross.clamp_min(PROB_FLOOR).log().sub(&p_self.clamp_min(PROB_FLOOR).log())?;
    Ok(p_cross.mul(&log_ratio)?.sum())
}

#[derive(Debug, Clone)]
pub struct CamOutput {
    pub loss: Tensor,
    pub pairs: usize,
}

/// Consistency loss over already-encoded batches. `source_probs` are the
/// self-attention predictions for every source row. With `stop_grad` the
/// self-attention side is treated as a constant target. An empty pair list
/// yields a zero loss.
pub fn cam_loss(
    source: &EncodedBatch,
    target: &EncodedBatch,
    source_probs: &Tensor,
    pairs: &[(usize, usize)],
    encoder: &EncoderParams,
    cam: Option<&AttentionParams>,
    classifier: &ClassifierParams,
    stop_grad: bool,
) -> Result<CamOutput> {
    if pairs.is_empty() {
        return Ok(CamOutput {
            loss: Tensor::scalar(0.0),
            pairs: 0,
        });
    }
    let cross = cross_attention_batch(source, target, pairs, encoder, cam)?;
    let p_cross = classifier.predict_batch(&cross)?;
    let rows: Vec<usize> = pairs.iter().map(|&(s, _)| s).collect();
    let mut p_self = source_probs.select_rows(&rows)?;
    if stop_grad {
        p_self = p_self.detach();
    }
    Ok(CamOutput {
        loss: kl_consistency(&p_cross, &p_self)?,
        pairs: pairs.len(),
    })
}
