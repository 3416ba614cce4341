//! Generate a synthetic domain pair, train on it, score the target domain.

use crate::config::RunConfig;
use crate::data::{Domain, PropagationTree};
use crate::error::Result;
use crate::predictor::LossWeights;
use crate::synth::generate;
use crate::trainer::{embedding_table, evaluate, prepare_samples, train, EvalReport, Sample, TrainObserver, TrainState};

pub struct SyntheticData {
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
}

pub fn synthetic_data(cfg: &RunConfig) -> Result<SyntheticData> {
    let (src, tgt) = generate(&cfg.synth)?;
    let to_trees = |records: Vec<_>, domain| -> Result<Vec<PropagationTree>> {
        records.into_iter().map(|r| PropagationTree::from_record(r, domain)).collect()
    };
    let src = to_trees(src, Domain::Source)?;
    let tgt = to_trees(tgt, Domain::Target)?;
    let all: Vec<&PropagationTree> = src.iter().chain(tgt.iter()).collect();
    let table = embedding_table(cfg, &all)?;
    Ok(SyntheticData {
        source: prepare_samples(&src, &table, cfg.train.max_paths)?,
        target: prepare_samples(&tgt, &table, cfg.train.max_paths)?,
    })
}

/// Trains on source plus unlabeled target and evaluates on the target's
/// held-out labels.
pub fn run_synthetic(cfg: &RunConfig, observer: &mut dyn TrainObserver) -> Result<(EvalReport, TrainState)> {
    let data = synthetic_data(cfg)?;
    let state = train(&data.source, &data.target, &cfg.train, TrainState::new(&cfg.train)?, observer)?;
    let report = evaluate(&state.params, &data.target)?;
    Ok((report, state))
}

/// The three models compared in the ablation: cross-entropy only, plus
/// contrastive learning, and the full objective. Dropped terms have their
/// weight removed and the remaining weights rescaled to sum to one, which
/// keeps their ratio.
pub fn ablation_variants(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let w = base.train.weights;
    let with = |ce: f64, cl: f64, ca: f64| {
        let mut cfg = base.clone();
        let s = ce + cl + ca;
        cfg.train.weights = LossWeights::new(ce / s, cl / s, ca / s);
        cfg
    };
    vec![
        ("ce", with(1.0, 0.0, 0.0)),
        ("ce+cl", with(w.ce, w.contrastive, 0.0)),
        ("full", base.clone()),
    ]
}
