mod common;

use common::oracles::*;
use common::*;
use rand::Rng;
use rumor_adapt::cam::kl_consistency;
use rumor_adapt::contrastive::{
    clm_loss, cross_domain_instance, in_domain_loss, prototype_loss, supcon_in_domain, ContrastiveConfig,
};
use rumor_adapt::gradcheck::{check_gradients_with, Stencil};
use rumor_adapt::predictor::{cross_entropy_source, total_loss, LossWeights};
use rumor_adapt::pseudo::source_prototypes;
use rumor_adapt::Tensor;

const TOL: f64 = 1e-9;

#[test]
fn contrastive_losses_match_loops_on_100_batches() {
    for seed in 0..100 {
        let b = batch(seed);
        let c = &b.cfg;
        let (s, tt) = (t(&b.src), t(&b.tgt));

        let scl_s = supcon_oracle(&b.src, &b.ys, c.tau, c.include_self);
        let scl_t = supcon_oracle(&b.tgt, &b.yt, c.tau, c.include_self);
        assert!(close(supcon_in_domain(&s, &b.ys, c).unwrap().item(), scl_s, TOL), "seed {seed}");

        let icl = c.alpha[0] * scl_s + c.alpha[1] * scl_t;
        assert!(close(in_domain_loss(&s, &b.ys, &tt, &b.yt, c).unwrap().item(), icl, TOL));

        let ts = cross_oracle(&b.tgt, &b.yt, &b.src, &b.ys, c.tau);
        let st = cross_oracle(&b.src, &b.ys, &b.tgt, &b.yt, c.tau);
        assert!(close(cross_domain_instance(&tt, &b.yt, &s, &b.ys, c).unwrap().item(), ts, TOL));
        assert!(close(cross_domain_instance(&s, &b.ys, &tt, &b.yt, c).unwrap().item(), st, TOL));

        let centers = centers_oracle(&b.src, &b.ys, b.nc);
        let protos = source_prototypes(&s, &b.ys, b.nc).unwrap();
        let pro = proto_oracle(&b.tgt, &b.yt, &centers, c.tau);
        assert!(close(prototype_loss(&tt, &b.yt, &protos, c).unwrap().item(), pro, TOL), "seed {seed}");

        let ccl = ts + st + pro;
        let cl = c.beta[0] * icl + c.beta[1] * ccl;
        let got = clm_loss(&s, &b.ys, &tt, &b.yt, &protos, c).unwrap();
        assert!(close(got.cross_domain.item(), ccl, TOL));
        assert!(close(got.total.item(), cl, TOL));
    }
}

#[test]
fn prediction_losses_match_loops_on_100_batches() {
    for seed in 0..100 {
        let mut r = rng(1000 + seed);
        let (n, k) = (r.gen_range(1..9), r.gen_range(2..4));
        let pc = probs(&mut r, n, k);
        let p = probs(&mut r, n, k);
        let y: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let kl = kl_oracle(&pc, &p);
        assert!(close(kl_consistency(&t(&pc), &t(&p)).unwrap().item(), kl, TOL));
        let ce = ce_oracle(&p, &y);
        assert!(close(cross_entropy_source(&t(&p), &y).unwrap().item(), ce, TOL));

        let g1 = r.gen_range(0.0..1.0);
        let g2 = r.gen_range(0.0..(1.0 - g1));
        let w = LossWeights::new(g1, g2, 1.0 - g1 - g2);
        let cl = r.gen_range(0.0..5.0);
        let got = total_loss(&Tensor::scalar(ce), Some(&Tensor::scalar(cl)), Some(&Tensor::scalar(kl)), &w).unwrap();
        assert!(close(got.item(), w.ce * ce + w.contrastive * cl + w.consistency * kl, TOL));
    }
}

#[test]
fn contrastive_losses_are_scale_invariant() {
    for seed in 0..30 {
        let b = batch(seed);
        let c = &b.cfg;
        let eval = |k: f64| -> Vec<f64> {
            let scale = |m: &M| -> Tensor { t(&m.iter().map(|r| r.iter().map(|v| v * k).collect()).collect()) };
            let (s, tt) = (scale(&b.src), scale(&b.tgt));
            let protos = source_prototypes(&s, &b.ys, b.nc).unwrap();
            let l = clm_loss(&s, &b.ys, &tt, &b.yt, &protos, c).unwrap();
            [l.source_scl, l.target_scl, l.target_to_source, l.source_to_target, l.prototype, l.total]
                .iter()
                .map(|x| x.item())
                .collect()
        };
        let base = eval(1.0);
        for k in [10.0, 0.1] {
            assert_close_slice(&eval(k), &base, 1e-9);
        }
    }
}

#[test]
fn contrastive_losses_are_nonnegative_and_finite() {
    for seed in 0..50 {
        let b = batch(seed);
        let (s, tt) = (t(&b.src), t(&b.tgt));
        let protos = source_prototypes(&s, &b.ys, b.nc).unwrap();
        let l = clm_loss(&s, &b.ys, &tt, &b.yt, &protos, &b.cfg).unwrap();
        for v in [l.source_scl, l.target_scl, l.target_to_source, l.source_to_target, l.prototype, l.total] {
            let v = v.item();
            assert!(v.is_finite() && v >= 0.0, "seed {seed}: {v}");
        }
    }
}

#[test]
fn lower_temperature_sharpens_separable_batches() {
    // positives at cosine ≥ 0.9, negatives at cosine ≤ 0.2
    let f = vec![vec![1.0, 0.05], vec![1.0, -0.1], vec![0.1, 1.0], vec![-0.05, 1.0]];
    let y = [0, 0, 1, 1];
    let mut prev = f64::INFINITY;
    for tau in [1.0, 0.5, 0.1] {
        let cfg = ContrastiveConfig { tau, ..ContrastiveConfig::default() };
        let v = supcon_in_domain(&t(&f), &y, &cfg).unwrap().item();
        assert!(v < prev, "tau {tau}: {v} !< {prev}");
        prev = v;
    }
}

#[test]
fn weight_edge_cases() {
    let b = batch(3);
    let (s, tt) = (t(&b.src), t(&b.tgt));
    let only_src = ContrastiveConfig { alpha: [1.0, 0.0], ..b.cfg };
    assert_eq!(
        in_domain_loss(&s, &b.ys, &tt, &b.yt, &only_src).unwrap().item(),
        supcon_in_domain(&s, &b.ys, &only_src).unwrap().item()
    );
    let half = ContrastiveConfig { alpha: [0.5, 0.5], ..b.cfg };
    let same = in_domain_loss(&s, &b.ys, &s, &b.ys, &half).unwrap().item();
    assert!(close(same, supcon_in_domain(&s, &b.ys, &half).unwrap().item(), 1e-15));

    let protos = source_prototypes(&s, &b.ys, b.nc).unwrap();
    let in_only = ContrastiveConfig { beta: [1.0, 0.0], ..b.cfg };
    let l = clm_loss(&s, &b.ys, &tt, &b.yt, &protos, &in_only).unwrap();
    assert_eq!(l.total.item(), l.in_domain.item());

    // identical batches: both cross-domain directions agree
    let st = cross_domain_instance(&s, &b.ys, &s.scale(1.0), &b.ys, &b.cfg).unwrap().item();
    let ts = cross_domain_instance(&s.scale(1.0), &b.ys, &s, &b.ys, &b.cfg).unwrap().item();
    assert_eq!(st, ts);

    let w = LossWeights::new(0.5, 0.3, 0.2);
    let v = total_loss(&Tensor::scalar(1.0), Some(&Tensor::scalar(2.0)), Some(&Tensor::scalar(3.0)), &w).unwrap();
    assert!(close(v.item(), 1.7, 1e-15));
    let ce_only = LossWeights::new(1.0, 0.0, 0.0);
    let v = total_loss(&Tensor::scalar(0.4), Some(&Tensor::scalar(9.0)), Some(&Tensor::scalar(9.0)), &ce_only).unwrap();
    assert_eq!(v.item(), 0.4);
    let zero = total_loss(&Tensor::scalar(0.0), Some(&Tensor::scalar(0.0)), None, &w).unwrap();
    assert_eq!(zero.item(), 0.0);
}

#[test]
fn total_loss_is_linear_in_each_component() {
    let w = LossWeights::default();
    let base = [0.7, 2.3, 0.4];
    let f = |c: [f64; 3]| {
        total_loss(&Tensor::scalar(c[0]), Some(&Tensor::scalar(c[1])), Some(&Tensor::scalar(c[2])), &w)
            .unwrap()
            .item()
    };
    let gammas = [w.ce, w.contrastive, w.consistency];
    for k in 0..3 {
        let mut c = base;
        c[k] += 0.25;
        assert!(close(f(c) - f(base), 0.25 * gammas[k], 1e-12));
    }
}

#[test]
fn loss_gradients_wrt_features() {
    for seed in 0..10 {
        let b = batch(seed);
        let c = b.cfg;
        let s = Tensor::param(&[b.src.len(), b.src[0].len()], b.src.concat()).unwrap();
        let tt = Tensor::param(&[b.tgt.len(), b.tgt[0].len()], b.tgt.concat()).unwrap();
        let params = named(&[&s, &tt]);
        let worst = |f: &dyn Fn() -> rumor_adapt::Result<Tensor>| {
            check_gradients_with(&params, 1e-3, Stencil::FivePoint, f).unwrap().iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
        };
        assert!(worst(&|| supcon_in_domain(&s, &b.ys, &c)) < 1e-5, "seed {seed}");
        assert!(worst(&|| cross_domain_instance(&tt, &b.yt, &s, &b.ys, &c)) < 1e-5);
        let w = worst(&|| prototype_loss(&tt, &b.yt, &source_prototypes(&s, &b.ys, b.nc)?, &c));
        assert!(w < 1e-5, "seed {seed}: {w}");
    }
}
