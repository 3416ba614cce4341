//! Paired source/target datasets with a controllable domain shift.
//!
//! Every post mixes two kinds of tokens:
//! - stance tokens, drawn from a vocabulary shared by both domains with the
//!   same class-conditional distribution everywhere. This is the signal that
//!   transfers.
//! - topic tokens, correlated with the class inside each domain. With
//!   probability `shift` a topic token comes from that domain's own
//!   vocabulary, otherwise from a topic vocabulary both domains share.
//!
//! At `shift = 0` both domains draw from identical distributions. At
//! `shift = 1` they share no topic words at all.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Domain, NodeRecord, TreeRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Rumors per domain.
    pub samples: usize,
    pub n_classes: usize,
    /// Class priors; empty means uniform.
    pub priors: Vec<f64>,
    /// Fraction of topic tokens taken from the domain's own vocabulary.
    pub shift: f64,
    /// Stance words per class.
    pub stance_vocab: usize,
    /// Topic words per class, in each topic vocabulary.
    pub topic_vocab: usize,
    /// Probability a stance token comes from the rumor's own class.
    pub stance_purity: f64,
    /// Probability a topic token comes from the rumor's own class.
    pub topic_purity: f64,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Maximum reply depth below the root.
    pub max_depth: usize,
    /// Stance tokens per post.
    pub stance_tokens: usize,
    /// Topic tokens per post.
    pub topic_tokens: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 400,
            n_classes: 2,
            priors: Vec::new(),
            shift: 0.8,
            stance_vocab: 8,
            topic_vocab: 4,
            stance_purity: 0.8,
            topic_purity: 0.9,
            min_nodes: 3,
            max_nodes: 10,
            max_depth: 2,
            stance_tokens: 1,
            topic_tokens: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.shift) {
            return bad(format!("synth_shift must lie in [0, 1], got {}", self.shift));
        }
        if self.n_classes < 2 {
            return bad(format!("synth_classes must be at least 2, got {}", self.n_classes));
        }
        if !self.priors.is_empty() {
            if self.priors.len() != self.n_classes {
                return bad(format!(
                    "synth_priors has {} entries for {} classes",
                    self.priors.len(),
                    self.n_classes
                ));
            }
            crate::contrastive::check_simplex("synth_priors", &self.priors)?;
        }
        for (name, p) in [("synth_stance_purity", self.stance_purity), ("synth_topic_purity", self.topic_purity)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.min_nodes == 0 || self.min_nodes > self.max_nodes {
            return bad(format!(
                "need 1 <= synth_min_nodes <= synth_max_nodes, got {}..{}",
                self.min_nodes, self.max_nodes
            ));
        }
        if self.stance_vocab == 0 || self.topic_vocab == 0 {
            return bad("vocabulary sizes must be positive".into());
        }
        if self.stance_tokens + self.topic_tokens == 0 {
            return bad("posts need at least one token".into());
        }
        Ok(())
    }

    pub fn class_priors(&self) -> Vec<f64> {
        if self.priors.is_empty() {
            vec![1.0 / self.n_classes as f64; self.n_classes]
        } else {
            self.priors.clone()
        }
    }
}

pub fn stance_word(class: usize, k: usize) -> String {
    format!("stance{class}_{k}")
}

pub fn is_stance_word(w: &str) -> bool {
    w.starts_with("stance")
}

fn topic_word(domain: Option<Domain>, class: usize, k: usize) -> String {
    match domain {
        None => format!("topic{class}_{k}"),
        Some(Domain::Source) => format!("srctopic{class}_{k}"),
        Some(Domain::Target) => format!("tgttopic{class}_{k}"),
    }
}

fn draw_class(rng: &mut ChaCha8Rng, own: usize, n_classes: usize, purity: f64) -> usize {
    if rng.gen_bool(purity) {
        own
    } else {
        let other = rng.gen_range(0..n_classes - 1);
        if other >= own {
            other + 1
        } else {
            other
        }
    }
}

fn generate_domain(cfg: &SynthConfig, domain: Domain) -> Vec<TreeRecord> {
    let stream = match domain {
        Domain::Source => 0,
        Domain::Target => 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let priors = WeightedIndex::new(cfg.class_priors()).expect("validated priors");
    let prefix = match domain {
        Domain::Source => "s",
        Domain::Target => "t",
    };

    (0..cfg.samples)
        .map(|idx| {
            let label = priors.sample(&mut rng);
            let n_nodes = rng.gen_range(cfg.min_nodes..=cfg.max_nodes);
            let mut depth = vec![0usize];
            let mut nodes = Vec::with_capacity(n_nodes);
            for k in 0..n_nodes {
                let parent = if k == 0 {
                    None
                } else {
                    let open: Vec<usize> = (0..k).filter(|&i| depth[i] < cfg.max_depth).collect();
                    let p = open[rng.gen_range(0..open.len())];
                    depth.push(depth[p] + 1);
                    Some(p)
                };
                let mut words = Vec::with_capacity(cfg.stance_tokens + cfg.topic_tokens);
                for _ in 0..cfg.stance_tokens {
                    let c = draw_class(&mut rng, label, cfg.n_classes, cfg.stance_purity);
                    words.push(stance_word(c, rng.gen_range(0..cfg.stance_vocab)));
                }
                for _ in 0..cfg.topic_tokens {
                    let c = draw_class(&mut rng, label, cfg.n_classes, cfg.topic_purity);
                    let own_vocab = rng.gen_bool(cfg.shift);
                    let k = rng.gen_range(0..cfg.topic_vocab);
                    words.push(topic_word(own_vocab.then_some(domain), c, k));
                }
                nodes.push(NodeRecord {
                    text: words.join(" "),
                    parent,
                });
            }
            TreeRecord {
                id: format!("{prefix}{idx}"),
                label: Some(label),
                nodes,
            }
        })
        .collect()
}

/// Source and target records. Target labels are included for held-out
/// evaluation only.
pub fn generate(cfg: &SynthConfig) -> Result<(Vec<TreeRecord>, Vec<TreeRecord>)> {
    cfg.validate()?;
    Ok((generate_domain(cfg, Domain::Source), generate_domain(cfg, Domain::Target)))
}

type Bag = BTreeMap<String, f64>;

fn bag(record: &TreeRecord, keep: impl Fn(&str) -> bool) -> Bag {
    let mut bag = Bag::new();
    let mut total = 0.0;
    for n in &record.nodes {
        for w in n.text.split_whitespace().filter(|w| keep(w)) {
            *bag.entry(w.to_string()).or_insert(0.0) += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        bag.values_mut().for_each(|v| *v /= total);
    }
    bag
}

fn sq_dist(a: &Bag, b: &Bag) -> f64 {
    let mut d = 0.0;
    for (k, va) in a {
        let vb = b.get(k).copied().unwrap_or(0.0);
        d += (va - vb) * (va - vb);
    }
    for (k, vb) in b {
        if !a.contains_key(k) {
            d += vb * vb;
        }
    }
    d
}

/// Fits class centroids of normalised token counts on `train` and reports the
/// accuracy of nearest-centroid prediction on `test`.
pub fn nearest_centroid_accuracy(
    train: &[TreeRecord],
    test: &[TreeRecord],
    n_classes: usize,
    keep: impl Fn(&str) -> bool + Copy,
) -> f64 {
    let mut centroids = vec![Bag::new(); n_classes];
    let mut counts = vec![0.0; n_classes];
    for r in train {
        let Some(y) = r.label else { continue };
        for (k, v) in bag(r, keep) {
            *centroids[y].entry(k).or_insert(0.0) += v;
        }
        counts[y] += 1.0;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        if *n > 0.0 {
            c.values_mut().for_each(|v| *v /= n);
        }
    }
    let labeled: Vec<&TreeRecord> = test.iter().filter(|r| r.label.is_some()).collect();
    if labeled.is_empty() {
        return 0.0;
    }
    let correct = labeled
        .iter()
        .filter(|r| {
            let b = bag(r, keep);
            let mut best = (0, f64::INFINITY);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(&b, centroid);
                if d < best.1 {
                    best = (c, d);
                }
            }
            Some(best.0) == r.label
        })
        .count();
    correct as f64 / labeled.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTest {
    /// Stance-only nearest-centroid accuracy, fit on source, scored on source.
    pub stance_source: f64,
    /// Same centroids scored on the target domain.
    pub stance_target: f64,
    /// All-token nearest-centroid accuracy, fit on source, scored on target.
    pub full_target: f64,
}

pub fn self_test(cfg: &SynthConfig, source: &[TreeRecord], target: &[TreeRecord]) -> SelfTest {
    SelfTest {
        stance_source: nearest_centroid_accuracy(source, source, cfg.n_classes, is_stance_word),
        stance_target: nearest_centroid_accuracy(source, target, cfg.n_classes, is_stance_word),
        full_target: nearest_centroid_accuracy(source, target, cfg.n_classes, |_| true),
    }
}

/// Generator settings plus per-domain class counts, one `key = value` per line.
pub fn manifest(cfg: &SynthConfig, source: &[TreeRecord], target: &[TreeRecord]) -> String {
    let run = crate::config::RunConfig {
        synth: cfg.clone(),
        ..Default::default()
    };
    let mut out: String = run
        .entries()
        .into_iter()
        .filter(|(k, _)| k.starts_with("synth_"))
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    for (name, records) in [("source", source), ("target", target)] {
        let mut counts = vec![0usize; cfg.n_classes];
        for r in records {
            if let Some(y) = r.label {
                counts[y] += 1;
            }
        }
        let counts: Vec<String> = counts.iter().map(usize::to_string).collect();
        out.push_str(&format!("{name}_class_counts = {}\n", counts.join(",")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PropagationTree;

    fn words(records: &[TreeRecord]) -> Vec<String> {
        records
            .iter()
            .flat_map(|r| r.nodes.iter())
            .flat_map(|n| n.text.split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn shift_extremes() {
        let cfg = SynthConfig {
            samples: 50,
            shift: 0.0,
            ..SynthConfig::default()
        };
        let (s, t) = generate(&cfg).unwrap();
        assert!(words(&s).iter().chain(words(&t).iter()).all(|w| !w.contains("srctopic") && !w.contains("tgttopic")));

        let cfg = SynthConfig { shift: 1.0, ..cfg };
        let (s, t) = generate(&cfg).unwrap();
        let sw = words(&s);
        let tw = words(&t);
        assert!(sw.iter().filter(|w| !is_stance_word(w)).all(|w| w.starts_with("srctopic")));
        assert!(tw.iter().filter(|w| !is_stance_word(w)).all(|w| w.starts_with("tgttopic")));
    }

    #[test]
    fn records_are_valid_trees() {
        let cfg = SynthConfig {
            samples: 60,
            ..SynthConfig::default()
        };
        let (s, t) = generate(&cfg).unwrap();
        for r in s {
            let tree = PropagationTree::from_record(r, Domain::Source).unwrap();
            assert!(tree.nodes.len() >= cfg.min_nodes && tree.nodes.len() <= cfg.max_nodes);
        }
        for r in t {
            PropagationTree::from_record(r, Domain::Target).unwrap();
        }
    }

    #[test]
    fn seeded() {
        let cfg = SynthConfig {
            samples: 20,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { shift: 1.5, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig {
            priors: vec![0.3, 0.3],
            ..SynthConfig::default()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            min_nodes: 5,
            max_nodes: 4,
            ..SynthConfig::default()
        }
        .validate()
        .is_err());
    }
}
