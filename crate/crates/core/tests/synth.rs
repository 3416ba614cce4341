use rumor_adapt::data::{load_dataset, write_dataset, Domain};
use rumor_adapt::synth::{generate, manifest, self_test, SynthConfig};

fn class_counts(records: &[rumor_adapt::data::TreeRecord], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for r in records {
        c[r.label.unwrap()] += 1;
    }
    c
}

#[test]
fn class_balance_within_three_sigma() {
    for (priors, seed) in [(vec![], 0), (vec![0.3, 0.7], 1), (vec![0.2, 0.5, 0.3], 2)] {
        let k = priors.len().max(2);
        let cfg = SynthConfig { samples: 2000, n_classes: k, priors, seed, ..Default::default() };
        let (src, tgt) = generate(&cfg).unwrap();
        assert_eq!(src.len(), 2000);
        assert_eq!(tgt.len(), 2000);
        for recs in [&src, &tgt] {
            for (c, (&n, p)) in class_counts(recs, k).iter().zip(cfg.class_priors()).enumerate() {
                let mean = 2000.0 * p;
                let sigma = (2000.0 * p * (1.0 - p)).sqrt();
                assert!((n as f64 - mean).abs() <= 3.0 * sigma, "class {c}: {n} vs {mean}");
            }
        }
    }
}

#[test]
fn stance_words_carry_the_label_in_both_domains() {
    let cfg = SynthConfig::default();
    let (src, tgt) = generate(&cfg).unwrap();
    let st = self_test(&cfg, &src, &tgt);
    assert!(st.stance_source > 0.9, "{st:?}");
    assert!(st.stance_target > 0.9, "{st:?}");
}

#[test]
fn full_token_transfer_degrades_with_shift() {
    let mean_full = |shift: f64| -> f64 {
        (0..5)
            .map(|seed| {
                let cfg = SynthConfig { shift, seed, ..Default::default() };
                let (src, tgt) = generate(&cfg).unwrap();
                self_test(&cfg, &src, &tgt).full_target
            })
            .sum::<f64>()
            / 5.0
    };
    let (none, half, full) = (mean_full(0.0), mean_full(0.5), mean_full(1.0));
    assert!(none > half && half > full, "{none} {half} {full}");
}

#[test]
fn records_round_trip_through_the_loader() {
    let cfg = SynthConfig { samples: 50, ..Default::default() };
    let (src, tgt) = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, recs, domain) in [("s", &src, Domain::Source), ("t", &tgt, Domain::Target)] {
        let path = dir.path().join(name);
        write_dataset(&path, recs).unwrap();
        let trees = load_dataset(&path, domain).unwrap();
        assert_eq!(trees.len(), 50);
        for (t, r) in trees.iter().zip(recs.iter()) {
            assert_eq!(&t.to_record(), r);
            let depth = |mut i: usize| {
                let mut d = 0;
                while let Some(p) = t.nodes[i].parent {
                    i = p;
                    d += 1;
                }
                d
            };
            assert!((0..t.nodes.len()).all(|i| depth(i) <= cfg.max_depth));
            assert!((cfg.min_nodes..=cfg.max_nodes).contains(&t.nodes.len()));
        }
    }
}

#[test]
fn same_seed_same_corpus() {
    let cfg = SynthConfig { samples: 30, seed: 9, ..Default::default() };
    let a = generate(&cfg).unwrap();
    let b = generate(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(manifest(&cfg, &a.0, &a.1), manifest(&cfg, &b.0, &b.1));
    let c = generate(&SynthConfig { seed: 10, ..cfg.clone() }).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn empty_and_invalid_configs() {
    let (src, tgt) = generate(&SynthConfig { samples: 0, ..Default::default() }).unwrap();
    assert!(src.is_empty() && tgt.is_empty());
    for bad in [
        SynthConfig { shift: 1.5, ..Default::default() },
        SynthConfig { n_classes: 1, ..Default::default() },
        SynthConfig { priors: vec![0.5, 0.6], ..Default::default() },
        SynthConfig { priors: vec![1.0], ..Default::default() },
        SynthConfig { min_nodes: 5, max_nodes: 4, ..Default::default() },
        SynthConfig { stance_purity: -0.1, ..Default::default() },
    ] {
        assert!(generate(&bad).is_err(), "{bad:?}");
    }
}
