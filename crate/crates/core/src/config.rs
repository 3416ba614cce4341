//! Flat `key = value` run configuration.
//!
//! One file holds every model, training and generator setting. Lines starting
//! with `#` are comments. Command-line overrides use the same `key=value`
//! syntax and are applied after the file. Unknown keys are rejected, and the
//! α/β/γ sum-to-one constraints are checked once everything is loaded.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::contrastive::ContrastiveConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::predictor::LossWeights;
use crate::pseudo::{KMeansConfig, KMeansMetric};
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoRefresh {
    /// Re-cluster each target batch against the same step's source prototypes.
    Step,
    /// Cluster the whole target set once per epoch against full-source prototypes.
    Epoch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size_source: usize,
    pub batch_size_target: usize,
    pub optimizer: OptimizerConfig,
    pub contrastive: ContrastiveConfig,
    pub weights: LossWeights,
    pub kmeans: KMeansConfig,
    pub pseudo_refresh: PseudoRefresh,
    pub model: ModelConfig,
    pub stop_grad_kl: bool,
    pub max_paths: usize,
    /// Epochs without improvement of the mean training loss before stopping; 0 disables.
    pub patience: usize,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 300,
            batch_size_source: 32,
            batch_size_target: 32,
            optimizer: OptimizerConfig::default(),
            contrastive: ContrastiveConfig::default(),
            weights: LossWeights::default(),
            kmeans: KMeansConfig::default(),
            pseudo_refresh: PseudoRefresh::Step,
            model: ModelConfig::default(),
            stop_grad_kl: false,
            max_paths: crate::data::DEFAULT_MAX_PATHS,
            patience: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.contrastive.validate()?;
        self.weights.validate()?;
        self.model.validate()?;
        if self.batch_size_source == 0 || self.batch_size_target == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.max_paths == 0 {
            return Err(Error::Config("max_paths must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.optimizer.lr)));
        }
        if self.kmeans.tol.is_nan() || self.kmeans.tol < 0.0 {
            return Err(Error::Config("kmeans_tol must be nonnegative".into()));
        }
        Ok(())
    }

    /// True when any loss term needs target features.
    pub fn uses_target(&self) -> bool {
        self.weights.contrastive > 0.0 || self.weights.consistency > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Word-vector file; seeded random vectors when absent.
    pub embeddings: Option<PathBuf>,
    pub embedding_seed: u64,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key. Does not re-validate cross-field constraints.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "seed" => t.seed = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size_source" => t.batch_size_source = parse(key, value)?,
            "batch_size_target" => t.batch_size_target = parse(key, value)?,
            "optimizer" => t.optimizer.kind = value.parse::<OptimizerKind>()?,
            "lr" => t.optimizer.lr = parse(key, value)?,
            "adam_beta1" => t.optimizer.beta1 = parse(key, value)?,
            "adam_beta2" => t.optimizer.beta2 = parse(key, value)?,
            "adam_eps" => t.optimizer.eps = parse(key, value)?,
            "weight_decay" => t.optimizer.weight_decay = parse(key, value)?,
            "tau" => t.contrastive.tau = parse(key, value)?,
            "alpha1" => t.contrastive.alpha[0] = parse(key, value)?,
            "alpha2" => t.contrastive.alpha[1] = parse(key, value)?,
            "beta1" => t.contrastive.beta[0] = parse(key, value)?,
            "beta2" => t.contrastive.beta[1] = parse(key, value)?,
            "gamma1" => t.weights.ce = parse(key, value)?,
            "gamma2" => t.weights.contrastive = parse(key, value)?,
            "gamma3" => t.weights.consistency = parse(key, value)?,
            "include_self" => t.contrastive.include_self = parse_bool(key, value)?,
            "kmeans_max_iter" => t.kmeans.max_iter = parse(key, value)?,
            "kmeans_tol" => t.kmeans.tol = parse(key, value)?,
            "kmeans_metric" => {
                t.kmeans.metric = match value {
                    "euclidean" => KMeansMetric::Euclidean,
                    "cosine" => KMeansMetric::Cosine,
                    _ => return Err(Error::Config(format!("kmeans_metric must be euclidean or cosine, got {value:?}"))),
                }
            }
            "pseudo_refresh" => {
                t.pseudo_refresh = match value {
                    "step" => PseudoRefresh::Step,
                    "epoch" => PseudoRefresh::Epoch,
                    _ => return Err(Error::Config(format!("pseudo_refresh must be step or epoch, got {value:?}"))),
                }
            }
            "dim" => t.model.dim = parse(key, value)?,
            "heads" => t.model.heads = parse(key, value)?,
            "ffn_dim" => t.model.ffn_dim = parse(key, value)?,
            "n_classes" => t.model.n_classes = parse(key, value)?,
            "residual" => t.model.residual = parse_bool(key, value)?,
            "share_cam_weights" => t.model.share_cam_weights = parse_bool(key, value)?,
            "stop_grad_kl" => t.stop_grad_kl = parse_bool(key, value)?,
            "max_paths" => t.max_paths = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "embeddings" => {
                self.embeddings = (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
            }
            "embedding_seed" => self.embedding_seed = parse(key, value)?,
            "synth_samples" => s.samples = parse(key, value)?,
            "synth_classes" => s.n_classes = parse(key, value)?,
            "synth_priors" => s.priors = parse_list(key, value)?,
            "synth_shift" => s.shift = parse(key, value)?,
            "synth_stance_vocab" => s.stance_vocab = parse(key, value)?,
            "synth_topic_vocab" => s.topic_vocab = parse(key, value)?,
            "synth_stance_purity" => s.stance_purity = parse(key, value)?,
            "synth_topic_purity" => s.topic_purity = parse(key, value)?,
            "synth_min_nodes" => s.min_nodes = parse(key, value)?,
            "synth_max_nodes" => s.max_nodes = parse(key, value)?,
            "synth_max_depth" => s.max_depth = parse(key, value)?,
            "synth_stance_tokens" => s.stance_tokens = parse(key, value)?,
            "synth_topic_tokens" => s.topic_tokens = parse(key, value)?,
            "synth_seed" => s.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order. Floats use the
    /// shortest representation that parses back to the same bits.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let s = &self.synth;
        let f = |x: f64| format!("{x:?}");
        vec![
            ("seed", t.seed.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size_source", t.batch_size_source.to_string()),
            ("batch_size_target", t.batch_size_target.to_string()),
            ("optimizer", t.optimizer.kind.to_string()),
            ("lr", f(t.optimizer.lr)),
            ("adam_beta1", f(t.optimizer.beta1)),
            ("adam_beta2", f(t.optimizer.beta2)),
            ("adam_eps", f(t.optimizer.eps)),
            ("weight_decay", f(t.optimizer.weight_decay)),
            ("tau", f(t.contrastive.tau)),
            ("alpha1", f(t.contrastive.alpha[0])),
            ("alpha2", f(t.contrastive.alpha[1])),
            ("beta1", f(t.contrastive.beta[0])),
            ("beta2", f(t.contrastive.beta[1])),
            ("gamma1", f(t.weights.ce)),
            ("gamma2", f(t.weights.contrastive)),
            ("gamma3", f(t.weights.consistency)),
            ("include_self", t.contrastive.include_self.to_string()),
            ("kmeans_max_iter", t.kmeans.max_iter.to_string()),
            ("kmeans_tol", f(t.kmeans.tol)),
            (
                "kmeans_metric",
                match t.kmeans.metric {
                    KMeansMetric::Euclidean => "euclidean",
                    KMeansMetric::Cosine => "cosine",
                }
                .into(),
            ),
            (
                "pseudo_refresh",
                match t.pseudo_refresh {
                    PseudoRefresh::Step => "step",
                    PseudoRefresh::Epoch => "epoch",
                }
                .into(),
            ),
            ("dim", t.model.dim.to_string()),
            ("heads", t.model.heads.to_string()),
            ("ffn_dim", t.model.ffn_dim.to_string()),
            ("n_classes", t.model.n_classes.to_string()),
            ("residual", t.model.residual.to_string()),
            ("share_cam_weights", t.model.share_cam_weights.to_string()),
            ("stop_grad_kl", t.stop_grad_kl.to_string()),
            ("max_paths", t.max_paths.to_string()),
            ("patience", t.patience.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            (
                "embeddings",
                self.embeddings
                    .as_ref()
                    .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
            ),
            ("embedding_seed", self.embedding_seed.to_string()),
            ("synth_samples", s.samples.to_string()),
            ("synth_classes", s.n_classes.to_string()),
            ("synth_priors", fmt_list(&s.priors)),
            ("synth_shift", f(s.shift)),
            ("synth_stance_vocab", s.stance_vocab.to_string()),
            ("synth_topic_vocab", s.topic_vocab.to_string()),
            ("synth_stance_purity", f(s.stance_purity)),
            ("synth_topic_purity", f(s.topic_purity)),
            ("synth_min_nodes", s.min_nodes.to_string()),
            ("synth_max_nodes", s.max_nodes.to_string()),
            ("synth_max_depth", s.max_depth.to_string()),
            ("synth_stance_tokens", s.stance_tokens.to_string()),
            ("synth_topic_tokens", s.topic_tokens.to_string()),
            ("synth_seed", s.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the file (if any), then overrides; validated.
    pub fn load<S: AsRef<str>>(path: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(&e))))?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()
    }
}

fn strip_prefix(e: &Error) -> String {
    let s = e.to_string();
    s.strip_prefix("config error: ").map(str::to_string).unwrap_or(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("tau", "0.07").unwrap();
        cfg.set("synth_priors", "0.25,0.75").unwrap();
        cfg.set("embeddings", "/tmp/glove.txt").unwrap();
        let back = RunConfig::parse_str(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn defaults_follow_best_reported_setting() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.contrastive.alpha, [0.9, 0.1]);
        assert_eq!(cfg.train.contrastive.beta, [0.7, 0.3]);
        assert_eq!(cfg.train.weights, LossWeights::new(0.8, 0.1, 0.1));
        assert_eq!(cfg.train.contrastive.tau, 0.1);
        assert_eq!(cfg.train.epochs, 300);
        assert_eq!(cfg.train.model.dim, 300);
    }

    #[test]
    fn unknown_key_and_bad_sums_rejected() {
        assert!(matches!(RunConfig::parse_str("temperature = 0.1"), Err(Error::Config(_))));
        let err = RunConfig::parse_str("gamma1 = 0.9\n").unwrap_err().to_string();
        assert!(err.contains("gamma"), "{err}");
        assert!(RunConfig::parse_str("alpha1 = 0.5\nalpha2 = 0.5\n").is_ok());
        assert!(RunConfig::parse_str("beta1 = 0.7000021\n").is_err());
        assert!(RunConfig::parse_str("beta1 = 0.7000005\n").is_ok());
    }

    #[test]
    fn overrides_apply_last() {
        let cfg = RunConfig::load::<&str>(None, &["epochs=3", "gamma1=1", "gamma2=0", "gamma3=0"]).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert!(!cfg.train.uses_target());
        assert!(RunConfig::load::<&str>(None, &["epochs"]).is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse_str("# a comment\n\n  epochs = 7  \n").unwrap();
        assert_eq!(cfg.train.epochs, 7);
    }
}
