//! Joint training loop over a labeled source set and an unlabeled target set.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cam::{cam_loss, make_pairs};
use crate::config::{PseudoRefresh, RunConfig, TrainConfig};
use crate::contrastive::clm_loss;
use crate::data::{build_pathset, EmbeddingTable, PathSet, PropagationTree};
use crate::encoder::encode_batch;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::optim::Optimizer;
use crate::predictor::{argmax, cross_entropy_source, total_loss};
use crate::pseudo::{kmeans_assign, pseudo_accuracy, source_prototypes};
use crate::tensor::{no_grad, Tensor};

const SHUFFLE_SALT: u64 = 0x5eed_0001;
const PAIR_SALT: u64 = 0x5eed_0002;

/// One rumor ready for the encoder.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub pathset: PathSet,
    /// Ground truth for source samples; held-out truth (if any) for target samples.
    pub label: Option<usize>,
}

pub fn prepare_samples(trees: &[PropagationTree], table: &EmbeddingTable, max_paths: usize) -> Result<Vec<Sample>> {
    trees
        .iter()
        .map(|t| {
            Ok(Sample {
                id: t.id.clone(),
                pathset: build_pathset(t, table, max_paths)?,
                label: t.label,
            })
        })
        .collect()
}

/// Word vectors from the configured file, or seeded random vectors for the
/// words of the given trees.
pub fn embedding_table(cfg: &RunConfig, trees: &[&PropagationTree]) -> Result<EmbeddingTable> {
    let dim = cfg.train.model.dim;
    match &cfg.embeddings {
        Some(path) => EmbeddingTable::load(path, dim),
        None => {
            let words = trees.iter().flat_map(|t| t.nodes.iter()).flat_map(|n| n.tokens.iter().map(String::as_str));
            Ok(EmbeddingTable::random(words, dim, cfg.embedding_seed))
        }
    }
}

/// Every loss component of one step, plus diagnostics. Written as one JSON
/// line per step to the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub epoch: usize,
    pub ce: f64,
    pub source_scl: f64,
    pub target_scl: f64,
    pub in_domain: f64,
    pub target_to_source: f64,
    pub source_to_target: f64,
    pub prototype: f64,
    pub cross_domain: f64,
    pub contrastive: f64,
    pub consistency: f64,
    pub total: f64,
    pub pairs: usize,
    pub pseudo_acc: Option<f64>,
    pub grad_norm: f64,
}

impl StepReport {
    fn components(&self) -> String {
        format!(
            "ce={} source_scl={} target_scl={} in_domain={} target_to_source={} source_to_target={} prototype={} contrastive={} consistency={} total={} grad_norm={}",
            self.ce,
            self.source_scl,
            self.target_scl,
            self.in_domain,
            self.target_to_source,
            self.source_to_target,
            self.prototype,
            self.contrastive,
            self.consistency,
            self.total,
            self.grad_norm
        )
    }

    fn all_finite(&self) -> bool {
        [
            self.ce,
            self.source_scl,
            self.target_scl,
            self.in_domain,
            self.target_to_source,
            self.source_to_target,
            self.prototype,
            self.cross_domain,
            self.contrastive,
            self.consistency,
            self.total,
            self.grad_norm,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// How often the expensive subsystems ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub pseudo_label_calls: u64,
    pub cam_calls: u64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: Optimizer,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<StepReport>,
    pub counters: Counters,
    pub best_loss: f64,
    pub stale_epochs: usize,
    pub stopped_early: bool,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(cfg.model, cfg.seed)?;
        let optimizer = Optimizer::new(cfg.optimizer, &params.named());
        Ok(TrainState {
            params,
            optimizer,
            step: 0,
            epoch: 0,
            history: Vec::new(),
            counters: Counters::default(),
            best_loss: f64::INFINITY,
            stale_epochs: 0,
            stopped_early: false,
        })
    }
}

fn value(t: &Tensor) -> f64 {
    t.item()
}

fn grad_norm(params: &[(String, Tensor)]) -> f64 {
    params
        .iter()
        .filter_map(|(_, p)| p.grad())
        .flat_map(|g| g.into_iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

fn pair_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PAIR_SALT);
    rng.set_stream(step);
    rng
}

/// One optimizer step on a source batch and a target batch. `pseudo` supplies
/// precomputed target pseudo labels; otherwise they are clustered from this
/// batch. The target batch is ignored when the loss weights do not need it.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    source: &[&Sample],
    target: &[&Sample],
    pseudo: Option<Vec<usize>>,
) -> Result<StepReport> {
    if source.is_empty() {
        return Err(Error::Contract("train_step needs a nonempty source batch".into()));
    }
    let labels: Vec<usize> = source
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::Contract(format!("source sample {} has no label", s.id)))
        })
        .collect::<Result<_>>()?;
    let params = &state.params;
    let named = params.named();
    params.zero_grad();

    // Overflow inside an op surfaces as a numeric error; report it like any
    // other non-finite step.
    let step_no = state.step + 1;
    let nf = |e: Error| match e {
        Error::Numeric { op, detail } => Error::NonFinite {
            step: step_no,
            components: format!("{op}: {detail}"),
        },
        e => e,
    };
    let src_sets: Vec<&PathSet> = source.iter().map(|s| &s.pathset).collect();
    let sb = encode_batch(&src_sets, &params.encoder).map_err(nf)?;
    let probs = params.classifier.predict_batch(&sb.features).map_err(nf)?;
    let ce = cross_entropy_source(&probs, &labels).map_err(nf)?;

    let mut report = StepReport {
        step: state.step + 1,
        epoch: state.epoch,
        ce: value(&ce),
        source_scl: 0.0,
        target_scl: 0.0,
        in_domain: 0.0,
        target_to_source: 0.0,
        source_to_target: 0.0,
        prototype: 0.0,
        cross_domain: 0.0,
        contrastive: 0.0,
        consistency: 0.0,
        total: 0.0,
        pairs: 0,
        pseudo_acc: None,
        grad_norm: 0.0,
    };

    let mut cl = None;
    let mut ca = None;
    if cfg.uses_target() && !target.is_empty() {
        let tgt_sets: Vec<&PathSet> = target.iter().map(|s| &s.pathset).collect();
        let tb = encode_batch(&tgt_sets, &params.encoder).map_err(nf)?;
        let prototypes = source_prototypes(&sb.features, &labels, cfg.model.n_classes).map_err(nf)?;
        let pseudo = match pseudo {
            Some(p) => p,
            None => {
                state.counters.pseudo_label_calls += 1;
                let rows: Vec<Vec<f64>> = (0..tb.features.rows()).map(|i| tb.features.row(i)).collect();
                kmeans_assign(&rows, &prototypes.initial_centers(), &cfg.kmeans).map_err(nf)?.labels
            }
        };
        let truth: Vec<Option<usize>> = target.iter().map(|s| s.label).collect();
        report.pseudo_acc = pseudo_accuracy(&pseudo, &truth);

        if cfg.weights.contrastive > 0.0 {
            if source.len() < 2 || target.len() < 2 {
                log::warn!("step {}: batch smaller than 2, contrastive term skipped", report.step);
            } else {
                let l = clm_loss(&sb.features, &labels, &tb.features, &pseudo, &prototypes, &cfg.contrastive).map_err(nf)?;
                report.source_scl = value(&l.source_scl);
                report.target_scl = value(&l.target_scl);
                report.in_domain = value(&l.in_domain);
                report.target_to_source = value(&l.target_to_source);
                report.source_to_target = value(&l.source_to_target);
                report.prototype = value(&l.prototype);
                report.cross_domain = value(&l.cross_domain);
                report.contrastive = value(&l.total);
                cl = Some(l.total);
            }
        }
        if cfg.weights.consistency > 0.0 {
            state.counters.cam_calls += 1;
            let pairs = make_pairs(&labels, &pseudo, &mut pair_rng(cfg.seed, report.step));
            let out = cam_loss(
                &sb,
                &tb,
                &probs,
                &pairs,
                &params.encoder,
                params.cam.as_ref(),
                &params.classifier,
                cfg.stop_grad_kl,
            ).map_err(nf)?;
            report.pairs = out.pairs;
            report.consistency = value(&out.loss);
            ca = Some(out.loss);
        }
    }

    let total = total_loss(&ce, cl.as_ref(), ca.as_ref(), &cfg.weights)?;
    report.total = value(&total);
    if !report.all_finite() {
        return Err(Error::NonFinite {
            step: report.step,
            components: report.components(),
        });
    }
    total.backward()?;
    report.grad_norm = grad_norm(&named);
    if !report.all_finite() {
        return Err(Error::NonFinite {
            step: report.step,
            components: report.components(),
        });
    }
    state.optimizer.step(&named)?;
    state.step += 1;
    Ok(report)
}

/// Receives progress from [`train`].
pub trait TrainObserver {
    fn on_step(&mut self, _report: &StepReport) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Appends every step report to `metrics.jsonl` and writes periodic checkpoints.
pub struct FileLogger {
    pub dir: PathBuf,
    pub config: RunConfig,
    metrics: std::fs::File,
}

impl FileLogger {
    pub fn create(dir: &Path, config: RunConfig, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.jsonl");
        let metrics = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(FileLogger {
            dir: dir.to_path_buf(),
            config,
            metrics,
        })
    }
}

impl TrainObserver for FileLogger {
    fn on_step(&mut self, report: &StepReport) -> Result<()> {
        let line = serde_json::to_string(report).expect("report serializes");
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(self.dir.join("metrics.jsonl"), e))
    }

    fn on_epoch_end(&mut self, state: &TrainState) -> Result<()> {
        let every = self.config.train.checkpoint_every;
        if every > 0 && state.epoch.is_multiple_of(every) {
            let path = self.dir.join(format!("checkpoint-epoch{}.txt", state.epoch));
            crate::checkpoint::save(&path, &self.config, state)?;
        }
        Ok(())
    }
}

/// Positions of batch `k` within a shuffled order of `n` items. Batches wrap
/// around, so a set smaller than the step count is cycled.
fn batch_positions(k: usize, n: usize, batch: usize) -> impl Iterator<Item = usize> {
    let b = batch.min(n);
    (0..b).map(move |i| (k * b + i) % n)
}

fn batches_per_epoch(n: usize, batch: usize) -> usize {
    if n == 0 {
        0
    } else {
        n.div_ceil(batch.min(n))
    }
}

fn epoch_orders(seed: u64, epoch: usize, ns: usize, nt: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    rng.set_stream(epoch as u64);
    let mut s: Vec<usize> = (0..ns).collect();
    let mut t: Vec<usize> = (0..nt).collect();
    s.shuffle(&mut rng);
    t.shuffle(&mut rng);
    (s, t)
}

/// Pseudo labels for the whole target set from full-source prototypes.
fn full_set_pseudo(state: &mut TrainState, cfg: &TrainConfig, source: &[Sample], target: &[Sample]) -> Result<Vec<usize>> {
    state.counters.pseudo_label_calls += 1;
    let params = &state.params;
    no_grad(|| {
        let src: Vec<&PathSet> = source.iter().map(|s| &s.pathset).collect();
        let tgt: Vec<&PathSet> = target.iter().map(|s| &s.pathset).collect();
        let labels: Vec<usize> = source.iter().map(|s| s.label.unwrap_or(0)).collect();
        let sf = encode_batch(&src, &params.encoder)?.features;
        let protos = source_prototypes(&sf, &labels, cfg.model.n_classes)?;
        let tf = encode_batch(&tgt, &params.encoder)?.features;
        let rows: Vec<Vec<f64>> = (0..tf.rows()).map(|i| tf.row(i)).collect();
        Ok(kmeans_assign(&rows, &protos.initial_centers(), &cfg.kmeans)?.labels)
    })
}

/// Steps taken per epoch: enough batches to cover the larger of the two sets.
pub fn steps_per_epoch(cfg: &TrainConfig, n_source: usize, n_target: usize) -> usize {
    batches_per_epoch(n_source, cfg.batch_size_source).max(batches_per_epoch(n_target, cfg.batch_size_target))
}

/// Runs epochs `state.epoch..cfg.epochs`. Both sets are reshuffled every epoch
/// from the seed, so a state restored from an epoch-boundary checkpoint
/// continues exactly like an uninterrupted run.
pub fn train(
    source: &[Sample],
    target: &[Sample],
    cfg: &TrainConfig,
    mut state: TrainState,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Contract("training needs at least one source sample".into()));
    }
    let steps = steps_per_epoch(cfg, source.len(), target.len());
    while state.epoch < cfg.epochs && !state.stopped_early {
        let (s_order, t_order) = epoch_orders(cfg.seed, state.epoch, source.len(), target.len());
        let epoch_pseudo = if cfg.uses_target() && !target.is_empty() && cfg.pseudo_refresh == PseudoRefresh::Epoch {
            Some(full_set_pseudo(&mut state, cfg, source, target)?)
        } else {
            None
        };
        let mut loss_sum = 0.0;
        for k in 0..steps {
            let s_idx: Vec<usize> = batch_positions(k, source.len(), cfg.batch_size_source).map(|p| s_order[p]).collect();
            let t_idx: Vec<usize> = batch_positions(k, target.len(), cfg.batch_size_target).map(|p| t_order[p]).collect();
            let sb: Vec<&Sample> = s_idx.iter().map(|&i| &source[i]).collect();
            let tb: Vec<&Sample> = t_idx.iter().map(|&i| &target[i]).collect();
            let pseudo = epoch_pseudo.as_ref().map(|p| t_idx.iter().map(|&i| p[i]).collect());
            let report = train_step(&mut state, cfg, &sb, &tb, pseudo)?;
            loss_sum += report.total;
            observer.on_step(&report)?;
            state.history.push(report);
        }
        state.epoch += 1;
        let mean = loss_sum / steps as f64;
        log::info!("epoch {} mean loss {mean:.6}", state.epoch);
        if mean < state.best_loss {
            state.best_loss = mean;
            state.stale_epochs = 0;
        } else {
            state.stale_epochs += 1;
            if cfg.patience > 0 && state.stale_epochs >= cfg.patience {
                log::info!("no improvement for {} epochs, stopping", cfg.patience);
                state.stopped_early = true;
            }
        }
        observer.on_epoch_end(&state)?;
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: usize,
    pub probs: Vec<f64>,
}

/// Accuracy and per-class F1, both in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub f1: Vec<f64>,
    /// Samples with a known label.
    pub labeled: usize,
    pub predictions: Vec<Prediction>,
}

/// Confusion-matrix accuracy and per-class F1 in percent. A class with no
/// predicted and no actual members gets F1 = 0.
pub fn classification_metrics(predicted: &[usize], truth: &[usize], n_classes: usize) -> (f64, Vec<f64>) {
    let n = truth.len();
    if n == 0 {
        return (0.0, vec![0.0; n_classes]);
    }
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    let f1 = (0..n_classes)
        .map(|c| {
            let tp = predicted.iter().zip(truth).filter(|(&p, &t)| p == c && t == c).count() as f64;
            let fp = predicted.iter().zip(truth).filter(|(&p, &t)| p == c && t != c).count() as f64;
            let fn_ = predicted.iter().zip(truth).filter(|(&p, &t)| p != c && t == c).count() as f64;
            let denom = 2.0 * tp + fp + fn_;
            if denom == 0.0 {
                0.0
            } else {
                100.0 * 2.0 * tp / denom
            }
        })
        .collect();
    (100.0 * correct as f64 / n as f64, f1)
}

const EVAL_CHUNK: usize = 256;

pub fn evaluate(params: &ModelParams, samples: &[Sample]) -> Result<EvalReport> {
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let sets: Vec<&PathSet> = chunk.iter().map(|s| &s.pathset).collect();
        for (s, probs) in chunk.iter().zip(params.predict(&sets)?) {
            predictions.push(Prediction {
                id: s.id.clone(),
                label: argmax(&probs),
                probs,
            });
        }
    }
    let (pred, truth): (Vec<usize>, Vec<usize>) = predictions
        .iter()
        .zip(samples)
        .filter_map(|(p, s)| s.label.map(|t| (p.label, t)))
        .unzip();
    let (accuracy, f1) = classification_metrics(&pred, &truth, params.config.n_classes);
    Ok(EvalReport {
        accuracy,
        f1,
        labeled: truth.len(),
        predictions,
    })
}
