//! Instance-wise and prototype-wise contrastive objectives over cosine
//! similarities scaled by a temperature.
//!
//! All losses are normalised by the anchor count (not the positive-pair count)
//! and anchors without a positive contribute zero.

use crate::error::{Error, Result};
use crate::pseudo::PrototypeSet;
use crate::tensor::Tensor;

/// Tolerance on the sum-to-one constraints of the mixture weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    /// Source / target weights of the in-domain loss.
    pub alpha: [f64; 2],
    /// In-domain / cross-domain weights of the total contrastive loss.
    pub beta: [f64; 2],
    /// Keep anchor self-pairs in numerators and denominators.
    pub include_self: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.1,
            alpha: [0.9, 0.1],
            beta: [0.7, 0.3],
            include_self: false,
        }
    }
}

pub(crate) fn check_simplex(name: &str, weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Config(format!("{name} weights must be finite and nonnegative, got {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Config(format!(
            "{name} weights {weights:?} sum to {sum}, expected 1 (tolerance {WEIGHT_SUM_TOL:e})"
        )));
    }
    Ok(())
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        check_simplex("alpha", &self.alpha)?;
        check_simplex("beta", &self.beta)
    }
}

/// `cos(a_i, b_j)` for all row pairs.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.normalize_rows()?.matmul_t(&b.normalize_rows()?)
}

/// `-(1/n) Σ_{i,j} positive[i][j] · log p_ij` where `p_ij` is the softmax of
/// `sim/τ` over the entries selected by `denominator`.
fn masked_contrast(sim: &Tensor, tau: f64, denominator: &[bool], positive: &[bool], n_anchors: f64) -> Result<Tensor> {
    let log_p = sim.scale(1.0 / tau).masked_log_softmax_rows(denominator)?;
    let pos: Vec<f64> = positive.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    let pos = Tensor::new(sim.shape(), pos)?;
    Ok(log_p.mul(&pos)?.sum().scale(-1.0 / n_anchors))
}

fn check_labels(features: &Tensor, labels: &[usize], what: &str) -> Result<()> {
    if features.shape().len() != 2 || features.rows() != labels.len() {
        return Err(Error::Contract(format!(
            "{what}: {} labels for features of shape {:?}",
            labels.len(),
            features.shape()
        )));
    }
    Ok(())
}

/// Supervised contrastive loss within one batch.
pub fn supcon_in_domain(features: &Tensor, labels: &[usize], cfg: &ContrastiveConfig) -> Result<Tensor> {
    check_labels(features, labels, "supcon")?;
    let b = labels.len();
    if b < 2 {
        return Err(Error::Contract(format!("supervised contrastive loss needs a batch of at least 2, got {b}")));
    }
    let sim = cosine_matrix(features, features)?;
    let mut denom = vec![true; b * b];
    let mut pos = vec![false; b * b];
    for i in 0..b {
        for j in 0..b {
            let is_self = i == j;
            if is_self && !cfg.include_self {
                denom[i * b + j] = false;
                continue;
            }
            pos[i * b + j] = labels[i] == labels[j];
        }
    }
    masked_contrast(&sim, cfg.tau, &denom, &pos, b as f64)
}

/// `α₁·L_src + α₂·L_tgt`.
pub fn in_domain_loss(
    source: &Tensor,
    source_labels: &[usize],
    target: &Tensor,
    pseudo_labels: &[usize],
    cfg: &ContrastiveConfig,
) -> Result<Tensor> {
    let ls = supcon_in_domain(source, source_labels, cfg)?;
    let lt = supcon_in_domain(target, pseudo_labels, cfg)?;
    ls.scale(cfg.alpha[0]).add(&lt.scale(cfg.alpha[1]))
}

/// Anchors from one domain contrasted against every sample of the other.
pub fn cross_domain_instance(
    anchors: &Tensor,
    anchor_labels: &[usize],
    contrast: &Tensor,
    contrast_labels: &[usize],
    cfg: &ContrastiveConfig,
) -> Result<Tensor> {
    check_labels(anchors, anchor_labels, "cross-domain anchors")?;
    check_labels(contrast, contrast_labels, "cross-domain contrast")?;
    let (na, nc) = (anchor_labels.len(), contrast_labels.len());
    if na == 0 || nc == 0 {
        return Err(Error::Contract("cross-domain contrast needs nonempty batches".into()));
    }
    let sim = cosine_matrix(anchors, contrast)?;
    let denom = vec![true; na * nc];
    let pos: Vec<bool> = anchor_labels
        .iter()
        .flat_map(|&a| contrast_labels.iter().map(move |&c| a == c))
        .collect();
    if !pos.iter().any(|&p| p) {
        log::warn!("cross-domain contrast: no anchor has a same-class contrast sample; loss is zero");
    }
    masked_contrast(&sim, cfg.tau, &denom, &pos, na as f64)
}

/// Target samples pulled toward the source prototype of their pseudo class.
/// Samples whose class has no valid prototype are skipped and excluded from
/// the normaliser.
pub fn prototype_loss(
    target: &Tensor,
    pseudo_labels: &[usize],
    prototypes: &PrototypeSet,
    cfg: &ContrastiveConfig,
) -> Result<Tensor> {
    check_labels(target, pseudo_labels, "prototype loss")?;
    if prototypes.valid_count() == 0 {
        return Err(Error::Contract("prototype loss needs at least one valid prototype".into()));
    }
    let (n, k) = (pseudo_labels.len(), prototypes.n_classes());
    let sim = cosine_matrix(target, &prototypes.centers)?;
    let valid: Vec<bool> = (0..k).map(|m| prototypes.is_valid(m)).collect();
    let denom: Vec<bool> = (0..n).flat_map(|_| valid.iter().copied()).collect();
    let mut pos = vec![false; n * k];
    let mut used = 0usize;
    for (i, &y) in pseudo_labels.iter().enumerate() {
        if prototypes.is_valid(y) {
            pos[i * k + y] = true;
            used += 1;
        }
    }
    masked_contrast(&sim, cfg.tau, &denom, &pos, used.max(1) as f64)
}

/// Every term of the contrastive objective, kept separately for reporting.
#[derive(Debug, Clone)]
pub struct ClmLosses {
    pub source_scl: Tensor,
    pub target_scl: Tensor,
    pub in_domain: Tensor,
    pub target_to_source: Tensor,
    pub source_to_target: Tensor,
    pub prototype: Tensor,
    pub cross_domain: Tensor,
    pub total: Tensor,
}

/// In-domain, cross-domain (both instance directions plus the target→source
/// prototype term, unweighted) and their `β` mixture.
pub fn clm_loss(
    source: &Tensor,
    source_labels: &[usize],
    target: &Tensor,
    pseudo_labels: &[usize],
    prototypes: &PrototypeSet,
    cfg: &ContrastiveConfig,
) -> Result<ClmLosses> {
    let source_scl = supcon_in_domain(source, source_labels, cfg)?;
    let target_scl = supcon_in_domain(target, pseudo_labels, cfg)?;
    let in_domain = source_scl.scale(cfg.alpha[0]).add(&target_scl.scale(cfg.alpha[1]))?;
    let target_to_source = cross_domain_instance(target, pseudo_labels, source, source_labels, cfg)?;
    let source_to_target = cross_domain_instance(source, source_labels, target, pseudo_labels, cfg)?;
    let prototype = prototype_loss(target, pseudo_labels, prototypes, cfg)?;
    let cross_domain = target_to_source.add(&source_to_target)?.add(&prototype)?;
    let total = in_domain.scale(cfg.beta[0]).add(&cross_domain.scale(cfg.beta[1]))?;
    Ok(ClmLosses {
        source_scl,
        target_scl,
        in_domain,
        target_to_source,
        source_to_target,
        prototype,
        cross_domain,
        total,
    })
}
