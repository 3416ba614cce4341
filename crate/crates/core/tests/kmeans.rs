mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use rumor_adapt::pseudo::{kmeans_assign, pseudo_accuracy, source_prototypes, KMeansConfig, KMeansMetric};
use rumor_adapt::Tensor;

fn brute_nearest(x: &[f64], centers: &[Option<Vec<f64>>]) -> usize {
    let mut best = None;
    for (m, c) in centers.iter().enumerate() {
        let Some(c) = c else { continue };
        let d: f64 = x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((m, d));
        }
    }
    best.unwrap().0
}

fn random_instance(seed: u64) -> (Vec<Vec<f64>>, Vec<Option<Vec<f64>>>) {
    let mut r = rng(seed);
    let k = r.gen_range(2..5);
    let d = r.gen_range(1..6);
    let n = r.gen_range(1..30);
    let init = (0..k).map(|_| Some(uniform(&mut r, d, -2.0, 2.0))).collect();
    (matrix(&mut r, n, d), init)
}

#[test]
fn objective_never_increases() {
    for seed in 0..1000 {
        let (x, init) = random_instance(seed);
        let out = kmeans_assign(&x, &init, &KMeansConfig { tol: 0.0, ..Default::default() }).unwrap();
        for w in out.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "seed {seed}: {:?}", out.objective);
        }
        assert!(out.labels.iter().all(|&l| l < init.len()));
    }
}

#[test]
fn infinite_tolerance_is_nearest_prototype() {
    for seed in 0..200 {
        let (x, init) = random_instance(seed);
        let out = kmeans_assign(&x, &init, &KMeansConfig { tol: f64::INFINITY, ..Default::default() }).unwrap();
        assert_eq!(out.iterations, 1);
        let expect: Vec<usize> = x.iter().map(|p| brute_nearest(p, &init)).collect();
        assert_eq!(out.labels, expect);
    }
}

#[test]
fn points_on_prototypes_keep_their_class() {
    let mut r = rng(7);
    let centers: Vec<Option<Vec<f64>>> = (0..3).map(|_| Some(uniform(&mut r, 4, -5.0, 5.0))).collect();
    let x: Vec<Vec<f64>> = (0..9).map(|i| centers[i % 3].clone().unwrap()).collect();
    let out = kmeans_assign(&x, &centers, &KMeansConfig::default()).unwrap();
    assert_eq!(out.labels, (0..9).map(|i| i % 3).collect::<Vec<_>>());
    assert_eq!(out.iterations, 1);
    assert!(out.converged);
    assert!(out.distances.iter().all(|&d| d == 0.0));
}

#[test]
fn rotation_does_not_change_labels() {
    for seed in 0..50 {
        let mut r = rng(500 + seed);
        let theta: f64 = r.gen_range(0.0..std::f64::consts::TAU);
        let (c, s) = (theta.cos(), theta.sin());
        let rot = |p: &Vec<f64>| vec![c * p[0] - s * p[1], s * p[0] + c * p[1]];
        let x = matrix(&mut r, 20, 2);
        let init = vec![Some(vec![-0.5, 0.1]), Some(vec![0.6, -0.2])];
        let a = kmeans_assign(&x, &init, &KMeansConfig::default()).unwrap();
        let xr: Vec<Vec<f64>> = x.iter().map(rot).collect();
        let ir: Vec<Option<Vec<f64>>> = init.iter().map(|v| v.as_ref().map(rot)).collect();
        let b = kmeans_assign(&xr, &ir, &KMeansConfig::default()).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_close_slice(&a.distances, &b.distances, 1e-9);
    }
}

#[test]
fn ties_go_to_lower_class() {
    let init = vec![Some(vec![-1.0, 0.0]), Some(vec![1.0, 0.0])];
    let out = kmeans_assign(&[vec![0.0, 3.0]], &init, &KMeansConfig { tol: f64::INFINITY, ..Default::default() }).unwrap();
    assert_eq!(out.labels, vec![0]);
}

#[test]
fn invalid_classes_are_never_assigned() {
    let init = vec![None, Some(vec![5.0]), Some(vec![-5.0])];
    let x = vec![vec![0.1], vec![4.0], vec![-3.0], vec![-0.1]];
    let out = kmeans_assign(&x, &init, &KMeansConfig::default()).unwrap();
    assert!(out.labels.iter().all(|&l| l != 0));
    assert!(kmeans_assign(&x, &[None, None], &KMeansConfig::default()).is_err());
}

#[test]
fn toy_two_clusters() {
    let x = vec![vec![0.0, 0.1], vec![0.2, 0.0], vec![5.0, 5.1], vec![4.9, 5.0], vec![5.2, 4.8]];
    let init = vec![Some(vec![1.0, 1.0]), Some(vec![3.0, 3.0])];
    let out = kmeans_assign(&x, &init, &KMeansConfig::default()).unwrap();
    assert_eq!(out.labels, vec![0, 0, 1, 1, 1]);
    assert!(out.converged);
    assert_eq!(pseudo_accuracy(&out.labels, &[Some(0), Some(0), Some(1), None, Some(0)]), Some(0.75));
    assert_eq!(pseudo_accuracy(&out.labels, &[None; 5]), None);
}

#[test]
fn cosine_metric_ignores_norm() {
    let x = vec![vec![10.0, 0.5], vec![0.01, 0.0], vec![0.0, 7.0], vec![0.1, 0.002]];
    let init = vec![Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0])];
    let out = kmeans_assign(&x, &init, &KMeansConfig { metric: KMeansMetric::Cosine, ..Default::default() }).unwrap();
    assert_eq!(out.labels, vec![0, 0, 1, 0]);
}

#[test]
fn empty_target_batch() {
    let out = kmeans_assign(&[], &[Some(vec![1.0])], &KMeansConfig::default()).unwrap();
    assert!(out.labels.is_empty() && out.converged);
}

#[test]
fn prototypes_are_class_means() {
    let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0], vec![0.0, 4.0]]).unwrap();
    let p = source_prototypes(&f, &[0, 0, 1], 3).unwrap();
    assert_eq!(p.centers.row(0), vec![2.0, 1.0]);
    assert_eq!(p.centers.row(1), vec![0.0, 4.0]);
    assert_eq!(p.counts, vec![2, 1, 0]);
    assert_eq!(p.valid_count(), 2);
    assert_eq!(p.initial_centers()[2], None);
    assert!(source_prototypes(&f, &[0, 3, 1], 3).is_err());
    assert!(source_prototypes(&f, &[0, 1], 3).is_err());
}

proptest! {
    #[test]
    fn converged_labels_are_stable(seed in 0u64..10_000) {
        let (x, init) = random_instance(seed);
        let cfg = KMeansConfig { tol: 1e-12, max_iter: 500, ..Default::default() };
        let out = kmeans_assign(&x, &init, &cfg).unwrap();
        prop_assume!(out.converged);
        // rerunning from the converged labels' means reproduces them
        let means: Vec<Option<Vec<f64>>> = (0..init.len()).map(|m| {
            let members: Vec<&Vec<f64>> = x.iter().zip(&out.labels).filter(|(_, &l)| l == m).map(|(p, _)| p).collect();
            if members.is_empty() { return init[m].clone(); }
            let mut c = vec![0.0; x[0].len()];
            for p in &members { for (a, b) in c.iter_mut().zip(p.iter()) { *a += b; } }
            Some(c.iter().map(|v| v / members.len() as f64).collect())
        }).collect();
        let again = kmeans_assign(&x, &means, &KMeansConfig { tol: f64::INFINITY, ..Default::default() }).unwrap();
        prop_assert_eq!(again.labels, out.labels);
    }
}
