//! Central finite-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cam::{cam_loss, make_pairs};
use crate::config::RunConfig;
use crate::contrastive::clm_loss;
use crate::data::PathSet;
use crate::encoder::encode_batch;
use crate::error::{Error, Result};
use crate::experiment::synthetic_data;
use crate::model::{param_group, ModelParams};
use crate::predictor::{cross_entropy_source, total_loss};
use crate::pseudo::{kmeans_assign, source_prototypes};
use crate::tensor::{no_grad, Tensor};
use crate::trainer::Sample;

/// Entries where both the analytic and numeric gradient fall below this are skipped.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// `|a - n| / max(|a|, |n|)`, or `None` when both are below [`MAGNITUDE_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> Option<f64> {
    let scale = analytic.abs().max(numeric.abs());
    (scale >= MAGNITUDE_FLOOR).then(|| (analytic - numeric).abs() / scale)
}

/// Central-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`
    ThreePoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, fourth-order accurate.
    FivePoint,
}

/// Compares autodiff gradients of `loss` against central differences with step `h`
/// for every entry of every named parameter.
pub fn check_gradients<F>(params: &[(String, Tensor)], h: f64, loss: F) -> Result<Vec<ParamCheck>>
where
    F: Fn() -> Result<Tensor>,
{
    check_gradients_with(params, h, Stencil::ThreePoint, loss)
}

pub fn check_gradients_with<F>(params: &[(String, Tensor)], h: f64, stencil: Stencil, loss: F) -> Result<Vec<ParamCheck>>
where
    F: Fn() -> Result<Tensor>,
{
    for (_, p) in params {
        p.zero_grad();
    }
    loss()?.backward()?;

    let mut reports = Vec::with_capacity(params.len());
    for (name, p) in params {
        // a parameter the loss never touched has a zero gradient
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let mut report = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let original = p.data()[i];
            let at = |offset: f64| -> Result<f64> {
                p.update_data(|d| d[i] = original + offset);
                let v = no_grad(&loss)?.item();
                p.update_data(|d| d[i] = original);
                Ok(v)
            };
            let numeric = match stencil {
                Stencil::ThreePoint => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h),
            };
            match relative_error(a, numeric) {
                Some(e) => {
                    report.checked += 1;
                    report.max_rel_error = report.max_rel_error.max(e);
                }
                None => report.skipped += 1,
            }
        }
        reports.push(report);
    }
    for (_, p) in params {
        p.zero_grad();
    }
    Ok(reports)
}

/// Folds per-tensor reports into groups keyed by `group_of(name)`, keeping the
/// worst error and summing counts. Group order follows first appearance.
pub fn group_reports(reports: &[ParamCheck], group_of: impl Fn(&str) -> String) -> Vec<ParamCheck> {
    let mut groups: Vec<ParamCheck> = Vec::new();
    for r in reports {
        let key = group_of(&r.name);
        match groups.iter_mut().find(|g| g.name == key) {
            Some(g) => {
                g.max_rel_error = g.max_rel_error.max(r.max_rel_error);
                g.checked += r.checked;
                g.skipped += r.skipped;
            }
            None => groups.push(ParamCheck { name: key, ..r.clone() }),
        }
    }
    groups
}

/// Step of the five-point stencil used by the model-level suite. Attention
/// projections have gradient entries near 1e-7; a three-point difference at
/// small steps cannot resolve those to 1e-4 in double precision.
pub const FD_STEP: f64 = 1e-3;
/// Tolerance for the combined training objective.
pub const TOTAL_TOL: f64 = 1e-3;
/// Tolerance for each loss term checked on its own.
pub const COMPONENT_TOL: f64 = 1e-4;

/// Loss terms checked by [`model_suite`], the combined objective first.
pub const SUITE_LOSSES: [&str; 8] = [
    "total",
    "ce",
    "source_scl",
    "target_scl",
    "target_to_source",
    "source_to_target",
    "prototype",
    "consistency",
];

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub loss: String,
    pub group: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// The base configuration shrunk to a micro model: d=12, two heads, four
/// source and four target rumors with small trees.
pub fn micro_config(base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone();
    cfg.train.model.dim = 12;
    cfg.train.model.heads = 2;
    cfg.train.model.ffn_dim = 16;
    cfg.embeddings = None;
    cfg.synth.samples = 16;
    cfg.synth.n_classes = cfg.train.model.n_classes;
    cfg.synth.priors = Vec::new();
    cfg.synth.min_nodes = 2;
    cfg.synth.max_nodes = 5;
    cfg.synth.max_depth = 2;
    // Rich posts, so no two paths of a rumor pool to the same vector; exact
    // ties make the max-pools non-differentiable.
    cfg.synth.stance_vocab = 8;
    cfg.synth.topic_vocab = 16;
    cfg.synth.stance_tokens = 1;
    cfg.synth.topic_tokens = 2;
    cfg
}

/// Path vectors of the micro batches are scaled up to unit magnitude. With
/// ±0.1 word vectors the attention-logit gradients are around 1e-7, where
/// central-difference rounding noise alone reaches a relative error of 1e-4.
pub const MICRO_INPUT_SCALE: f64 = 10.0;

/// Four source samples covering at least two classes, and four targets.
fn micro_batches(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut data = synthetic_data(cfg)?;
    for s in data.source.iter_mut().chain(data.target.iter_mut()) {
        s.pathset = s.pathset.scaled(MICRO_INPUT_SCALE);
    }
    let mut source: Vec<Sample> = Vec::new();
    for class in 0..cfg.train.model.n_classes.min(2) {
        source.extend(data.source.iter().filter(|s| s.label == Some(class)).take(2).cloned());
    }
    for s in &data.source {
        if source.len() >= 4 {
            break;
        }
        if !source.iter().any(|t| t.id == s.id) {
            source.push(s.clone());
        }
    }
    let target: Vec<Sample> = data.target.into_iter().take(4).collect();
    if source.len() < 4 || target.len() < 4 {
        return Err(Error::Config("micro batch needs at least 4 source and 4 target samples".into()));
    }
    Ok((source, target))
}

/// Finite-difference check of every loss term and of the combined objective
/// on a micro model, reported per parameter group. Pseudo labels and
/// cross-domain pairs are fixed at the unperturbed parameters so every loss
/// is a smooth function of the weights.
pub fn model_suite(base: &RunConfig) -> Result<Vec<SuiteEntry>> {
    let cfg = micro_config(base);
    cfg.validate()?;
    let tc = &cfg.train;
    let (source, target) = micro_batches(&cfg)?;
    let params = ModelParams::init(tc.model, tc.seed)?;
    let labels: Vec<usize> = source.iter().map(|s| s.label.unwrap_or(0)).collect();
    let src: Vec<&PathSet> = source.iter().map(|s| &s.pathset).collect();
    let tgt: Vec<&PathSet> = target.iter().map(|s| &s.pathset).collect();

    let (pseudo, pairs) = no_grad(|| -> Result<_> {
        let sb = encode_batch(&src, &params.encoder)?;
        let tb = encode_batch(&tgt, &params.encoder)?;
        let protos = source_prototypes(&sb.features, &labels, tc.model.n_classes)?;
        let rows: Vec<Vec<f64>> = (0..tb.features.rows()).map(|i| tb.features.row(i)).collect();
        let pseudo = kmeans_assign(&rows, &protos.initial_centers(), &tc.kmeans)?.labels;
        let pairs = make_pairs(&labels, &pseudo, &mut ChaCha8Rng::seed_from_u64(tc.seed));
        Ok((pseudo, pairs))
    })?;

    let compute = |which: &str| -> Result<Tensor> {
        let sb = encode_batch(&src, &params.encoder)?;
        let tb = encode_batch(&tgt, &params.encoder)?;
        let probs = params.classifier.predict_batch(&sb.features)?;
        let ce = cross_entropy_source(&probs, &labels)?;
        let protos = source_prototypes(&sb.features, &labels, tc.model.n_classes)?;
        let cl = clm_loss(&sb.features, &labels, &tb.features, &pseudo, &protos, &tc.contrastive)?;
        let ca = cam_loss(&sb, &tb, &probs, &pairs, &params.encoder, params.cam.as_ref(), &params.classifier, tc.stop_grad_kl)?.loss;
        Ok(match which {
            "ce" => ce,
            "source_scl" => cl.source_scl,
            "target_scl" => cl.target_scl,
            "target_to_source" => cl.target_to_source,
            "source_to_target" => cl.source_to_target,
            "prototype" => cl.prototype,
            "consistency" => ca,
            _ => total_loss(&ce, Some(&cl.total), Some(&ca), &tc.weights)?,
        })
    };

    let named = params.named();
    let mut out = Vec::new();
    for loss in SUITE_LOSSES {
        let tolerance = if loss == "total" { TOTAL_TOL } else { COMPONENT_TOL };
        let reports = check_gradients_with(&named, FD_STEP, Stencil::FivePoint, || compute(loss))?;
        for g in group_reports(&reports, param_group) {
            out.push(SuiteEntry {
                loss: loss.to_string(),
                group: g.name,
                max_rel_error: g.max_rel_error,
                checked: g.checked,
                tolerance,
            });
        }
    }
    Ok(out)
}
