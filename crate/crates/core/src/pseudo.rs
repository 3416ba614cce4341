//! Target pseudo-labels from k-means seeded with source class prototypes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KMeansMetric {
    Euclidean,
    /// Features and centers are L2-normalised before Euclidean Lloyd iterations.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub metric: KMeansMetric,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iter: 100,
            tol: 1e-4,
            metric: KMeansMetric::Euclidean,
        }
    }
}

/// Per-class mean feature of a labeled batch. Classes absent from the batch
/// have a zero row and are marked invalid.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    /// `N_c×d`; carries the graph of the features it was averaged from.
    pub centers: Tensor,
    pub counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn is_valid(&self, class: usize) -> bool {
        self.counts.get(class).is_some_and(|&c| c > 0)
    }

    pub fn valid_count(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Center values, `None` for invalid classes.
    pub fn initial_centers(&self) -> Vec<Option<Vec<f64>>> {
        (0..self.n_classes())
            .map(|m| self.is_valid(m).then(|| self.centers.row(m)))
            .collect()
    }
}

/// Class means of `features` (`B×d`), differentiable with respect to the features.
pub fn source_prototypes(features: &Tensor, labels: &[usize], n_classes: usize) -> Result<PrototypeSet> {
    let b = features.rows();
    if features.shape().len() != 2 || b == 0 || labels.is_empty() {
        return Err(Error::Contract("prototypes need a nonempty labeled batch".into()));
    }
    if labels.len() != b {
        return Err(Error::Contract(format!("{} labels for {b} feature rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Contract(format!("label {bad} outside [0, {n_classes})")));
    }
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        counts[y] += 1;
    }
    let mut avg = vec![0.0; n_classes * b];
    for (i, &y) in labels.iter().enumerate() {
        avg[y * b + i] = 1.0 / counts[y] as f64;
    }
    let centers = Tensor::new(&[n_classes, b], avg)?.matmul(features)?;
    Ok(PrototypeSet { centers, counts })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledBatch {
    pub labels: Vec<usize>,
    /// Euclidean distance of each sample to the center it was assigned to.
    pub distances: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::tensor::NORM_EPS);
    v.iter().map(|x| x / n).collect()
}

/// Nearest valid center, lowest class index on ties.
fn nearest(x: &[f64], centers: &[Option<Vec<f64>>]) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (m, c) in centers.iter().enumerate() {
        if let Some(c) = c {
            let d = sq_dist(x, c);
            if d < best.1 {
                best = (m, d);
            }
        }
    }
    best
}

/// Lloyd iterations from the given initial centers (`None` = invalid class,
/// never assigned). Each iteration assigns every point, then moves centers to
/// their cluster means; iteration stops once no center moves by `tol` or more.
/// A cluster that empties keeps its previous center.
pub fn kmeans_assign(features: &[Vec<f64>], init: &[Option<Vec<f64>>], cfg: &KMeansConfig) -> Result<PseudoLabeledBatch> {
    if init.iter().all(Option::is_none) {
        return Err(Error::Contract("k-means needs at least one valid center".into()));
    }
    let (points, mut centers): (Vec<Vec<f64>>, Vec<Option<Vec<f64>>>) = match cfg.metric {
        KMeansMetric::Euclidean => (features.to_vec(), init.to_vec()),
        KMeansMetric::Cosine => (
            features.iter().map(|f| normalized(f)).collect(),
            init.iter().map(|c| c.as_ref().map(|c| normalized(c))).collect(),
        ),
    };
    let assign = |centers: &[Option<Vec<f64>>]| -> (Vec<usize>, Vec<f64>) {
        points.iter().map(|p| nearest(p, centers)).unzip()
    };

    let (mut labels, mut sq) = assign(&centers);
    let mut objective = vec![sq.iter().sum()];
    let mut iterations = 0;
    let mut converged = false;
    if points.is_empty() {
        converged = true;
    }
    while !converged && iterations < cfg.max_iter {
        if iterations > 0 {
            (labels, sq) = assign(&centers);
            objective.push(sq.iter().sum());
        }
        iterations += 1;
        let mut shift: f64 = 0.0;
        for (m, center) in centers.iter_mut().enumerate() {
            let Some(center) = center else { continue };
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == m).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; center.len()];
            for p in &members {
                mean.iter_mut().zip(p.iter()).for_each(|(a, b)| *a += b);
            }
            mean.iter_mut().for_each(|a| *a /= members.len() as f64);
            shift = shift.max(sq_dist(&mean, center).sqrt());
            *center = mean;
        }
        if shift < cfg.tol {
            converged = true;
        }
    }
    if points.is_empty() {
        objective.clear();
    }
    Ok(PseudoLabeledBatch {
        labels,
        distances: sq.into_iter().map(f64::sqrt).collect(),
        iterations,
        converged,
        objective,
    })
}

/// Fraction of pseudo labels agreeing with held-out labels, or `None` if none are known.
pub fn pseudo_accuracy(pseudo: &[usize], truth: &[Option<usize>]) -> Option<f64> {
    let known: Vec<(usize, usize)> = pseudo
        .iter()
        .zip(truth)
        .filter_map(|(&p, t)| t.map(|t| (p, t)))
        .collect();
    if known.is_empty() {
        return None;
    }
    Some(known.iter().filter(|(p, t)| p == t).count() as f64 / known.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_prototypes() {
        let f = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0], vec![10.0, 10.0]]).unwrap();
        let p = source_prototypes(&f, &[0, 0, 1], 2).unwrap();
        assert_eq!(p.centers.to_vec(), vec![1.0, 1.0, 10.0, 10.0]);
        assert_eq!(p.counts, vec![2, 1]);
    }

    #[test]
    fn absent_class_is_invalid() {
        let f = Tensor::from_rows(&[vec![3.0, 4.0], vec![3.0, 4.0]]).unwrap();
        let p = source_prototypes(&f, &[1, 1], 3).unwrap();
        assert_eq!(p.initial_centers(), vec![None, Some(vec![3.0, 4.0]), None]);
        assert_eq!(p.valid_count(), 1);
    }

    #[test]
    fn empty_batch_is_contract_error() {
        let f = Tensor::zeros(&[0, 2]);
        assert!(matches!(source_prototypes(&f, &[], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn hand_run_lloyd() {
        let targets = vec![vec![0.9, 0.9], vec![9.0, 9.0], vec![1.2, 0.8]];
        let init = vec![Some(vec![1.0, 1.0]), Some(vec![10.0, 10.0])];
        let r = kmeans_assign(&targets, &init, &KMeansConfig::default()).unwrap();
        assert_eq!(r.labels, vec![0, 1, 0]);
    }

    #[test]
    fn targets_at_centers_converge_immediately() {
        let init = vec![Some(vec![1.0, 2.0]), Some(vec![-3.0, 0.5])];
        let targets = vec![vec![-3.0, 0.5], vec![1.0, 2.0]];
        let r = kmeans_assign(&targets, &init, &KMeansConfig::default()).unwrap();
        assert_eq!(r.labels, vec![1, 0]);
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
        assert_eq!(r.distances, vec![0.0, 0.0]);
    }

    #[test]
    fn equidistant_goes_to_lower_class() {
        let init = vec![Some(vec![1.0, 1.0]), Some(vec![9.0, 9.0])];
        let r = kmeans_assign(&[vec![5.0, 5.0]], &init, &KMeansConfig::default()).unwrap();
        assert_eq!(r.labels, vec![0]);
    }

    #[test]
    fn invalid_centers_never_assigned() {
        let init = vec![None, Some(vec![0.0, 0.0])];
        let r = kmeans_assign(&[vec![100.0, 0.0], vec![-1.0, 0.0]], &init, &KMeansConfig::default()).unwrap();
        assert_eq!(r.labels, vec![1, 1]);
        assert!(kmeans_assign(&[vec![1.0]], &[None, None], &KMeansConfig::default()).is_err());
    }

    #[test]
    fn cosine_metric_ignores_scale() {
        let init = vec![Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0])];
        let cfg = KMeansConfig {
            metric: KMeansMetric::Cosine,
            ..KMeansConfig::default()
        };
        let r = kmeans_assign(&[vec![100.0, 1.0], vec![0.01, 0.5]], &init, &cfg).unwrap();
        assert_eq!(r.labels, vec![0, 1]);
    }

    #[test]
    fn accuracy_against_held_out() {
        assert_eq!(pseudo_accuracy(&[0, 1, 1], &[Some(0), Some(0), None]), Some(0.5));
        assert_eq!(pseudo_accuracy(&[0], &[None]), None);
    }
}
