#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rumor_adapt::gradcheck::check_gradients;
use rumor_adapt::contrastive::ContrastiveConfig;
use rumor_adapt::{Result, Tensor};

use oracles::M;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, so kinks at 0 are never straddled.
pub fn away_from_zero(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub fn matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| uniform(rng, cols, -1.0, 1.0)).collect()
}

pub fn param(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, uniform(rng, n, -1.0, 1.0)).unwrap()
}

/// `Σ t ⊙ w` for a fixed random `w`, so every output entry matters.
pub fn weighted_sum(t: &Tensor, w: &[f64]) -> Result<Tensor> {
    let w = Tensor::new(t.shape(), w.to_vec())?;
    Ok(t.mul(&w)?.sum())
}

pub fn named(ts: &[&Tensor]) -> Vec<(String, Tensor)> {
    ts.iter().enumerate().map(|(i, t)| (format!("in{i}"), (*t).clone())).collect()
}

/// Largest relative error between autodiff and a three-point central
/// difference with step 1e-5.
pub fn max_grad_error(params: &[(String, Tensor)], loss: impl Fn() -> Result<Tensor>) -> f64 {
    check_gradients(params, 1e-5, loss)
        .unwrap()
        .iter()
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max)
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn assert_close_slice(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y} (tol {tol})");
    }
}

pub fn probs(r: &mut impl Rng, n: usize, k: usize) -> M {
    (0..n)
        .map(|_| {
            let raw = uniform(r, k, 0.0, 1.0);
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn t(m: &M) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

/// A random source/target feature batch with labels and loss settings.
pub struct Batch {
    pub nc: usize,
    pub src: M,
    pub ys: Vec<usize>,
    pub tgt: M,
    pub yt: Vec<usize>,
    pub cfg: ContrastiveConfig,
}

pub fn batch(seed: u64) -> Batch {
    let mut r = rng(seed);
    let nc = r.gen_range(2..4);
    let d = r.gen_range(2..7);
    let (bs, bt) = (r.gen_range(2..9), r.gen_range(2..9));
    let a1 = r.gen_range(0.0..1.0);
    let b1 = r.gen_range(0.0..1.0);
    let cfg = ContrastiveConfig {
        tau: [0.1, 0.5, 1.0][r.gen_range(0..3)],
        alpha: [a1, 1.0 - a1],
        beta: [b1, 1.0 - b1],
        include_self: r.gen_bool(0.3),
    };
    Batch {
        nc,
        src: matrix(&mut r, bs, d),
        ys: (0..bs).map(|_| r.gen_range(0..nc)).collect(),
        tgt: matrix(&mut r, bt, d),
        yt: (0..bt).map(|_| r.gen_range(0..nc)).collect(),
        cfg,
    }
}
