mod common;

use std::collections::BTreeSet;

use nfa_core::cascade::{adapter_forward, build_cascade, Adapter, AdapterKind, CascadeSpec};
use nfa_core::cell::{cell_forward, CellMode, NfaCell, PathWeights};
use nfa_core::diffcore::{BindMode, Graph, Tensor};
use nfa_core::harness::data::{generate_synthetic, Domain, SyntheticParams};
use nfa_core::objective::{penalty_value, PenaltyConfig, PfrPolicy};
use nfa_core::search::split_dataset;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn simplex(raw: Vec<f64>) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn toy_cells(adapters: &[AdapterKind]) -> Vec<NfaCell> {
    let c = build_cascade(&CascadeSpec::toy(), 0).unwrap();
    c.modules.iter().enumerate().map(|(i, m)| NfaCell::new(i, m, CellMode::Nfa, adapters, 0).unwrap()).collect()
}

fn policy() -> impl Strategy<Value = PfrPolicy> {
    prop_oneof![Just(PfrPolicy::Zero), Just(PfrPolicy::HalfFineTune), (0usize..5000).prop_map(PfrPolicy::Constant)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn per_cell_penalty_lies_within_count_bounds(
        raw in prop::collection::vec(0.001f64..1.0, 4),
        cell in 0usize..6,
        pol in policy(),
    ) {
        let cells = toy_cells(&[AdapterKind::Bottleneck, AdapterKind::Gated]);
        let one = &cells[cell..=cell];
        let w = simplex(raw);
        let cfg = PenaltyConfig { pfr_policy: pol, ..Default::default() };
        let p = one[0].path_param_counts(pol);
        let total: usize = p.iter().sum();
        let lo = *p.iter().min().unwrap() as f64 / total as f64;
        let hi = *p.iter().max().unwrap() as f64 / total as f64;
        let v = penalty_value(one, &[w], &cfg).unwrap();
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12 && (0.0..=1.0).contains(&lo) && hi <= 1.0);
    }

    #[test]
    fn moving_mass_to_largest_count_increases_penalty(
        raw in prop::collection::vec(0.01f64..1.0, 3),
        eps in 0.001f64..0.5,
        pol in policy(),
    ) {
        let cells = toy_cells(&[AdapterKind::Bottleneck]);
        let one = &cells[0..1];
        let cfg = PenaltyConfig { pfr_policy: pol, ..Default::default() };
        let p = one[0].path_param_counts(pol);
        let big = (0..3).max_by_key(|&k| (p[k], k)).unwrap();
        let w = simplex(raw);
        // Take mass from a path with strictly smaller count.
        let Some(small) = (0..3).filter(|&k| p[k] < p[big]).max_by(|&a, &b| w[a].total_cmp(&w[b])) else {
            return Ok(());
        };
        let d = eps * w[small];
        let mut moved = w.clone();
        moved[small] -= d;
        moved[big] += d;
        let before = penalty_value(one, &[w], &cfg).unwrap();
        let after = penalty_value(one, &[moved], &cfg).unwrap();
        prop_assert!(after > before, "{before} -> {after}");
    }

    #[test]
    fn total_penalty_lies_in_zero_to_cell_count(raws in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 6)) {
        let cells = toy_cells(&[AdapterKind::Bottleneck]);
        let ws: Vec<Vec<f64>> = raws.into_iter().map(|r| simplex(r.into_iter().map(|v| v + 1e-3).collect())).collect();
        let v = penalty_value(&cells, &ws, &PenaltyConfig::default()).unwrap();
        prop_assert!((0.0..=6.0).contains(&v));
    }

    #[test]
    fn cell_output_is_linear_in_path_weights(raw in prop::collection::vec(0.01f64..1.0, 4), seed in 0u64..1000) {
        let cell = common::random_cell(seed, CellMode::Nfa, &[AdapterKind::Bottleneck, AdapterKind::Gated]);
        let x = Tensor::randn(&mut ChaCha8Rng::seed_from_u64(seed), &[3, 5], 1.0);
        let run = |w: &[f64]| {
            let mut g = Graph::new();
            let xi = g.constant(x.clone()).unwrap();
            let wn = g.constant(Tensor::vector(w.to_vec())).unwrap();
            let out = cell_forward(&mut g, &cell, xi, wn, BindMode::Frozen).unwrap();
            g.value(out).clone()
        };
        let w = simplex(raw);
        let mixed = run(&w);
        let mut sum = vec![0.0; mixed.numel()];
        for (k, wk) in w.iter().enumerate() {
            let one = run(&PathWeights::one_hot(k, 4).weights);
            for (s, v) in sum.iter_mut().zip(one.data()) {
                *s += wk * v;
            }
        }
        for (a, b) in mixed.data().iter().zip(&sum) {
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn adapters_preserve_shape(dim in 1usize..24, batch in 1usize..6, gated in any::<bool>(), seed in any::<u64>()) {
        let kind = if gated { AdapterKind::Gated } else { AdapterKind::Bottleneck };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ad = Adapter::new(kind, dim, "p", &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&mut rng, &[batch, dim], 1.0)).unwrap();
        let y = adapter_forward(&mut g, &ad, x, BindMode::Trainable).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[batch, dim]);
        prop_assert_eq!(ad.param_count(), kind.param_count(dim));
    }

    #[test]
    fn split_is_a_disjoint_cover(n in 2usize..300, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let p = SyntheticParams { n_samples: n, domain: Domain::Target, ..Default::default() };
        let d = generate_synthetic(&p, 1).unwrap();
        let (a, b) = split_dataset(&d, ratio, seed).unwrap();
        let ids = |d: &nfa_core::harness::data::Dataset| d.samples.iter().map(|s| s.id).collect::<BTreeSet<_>>();
        prop_assert!(ids(&a).is_disjoint(&ids(&b)));
        prop_assert_eq!(a.len() + b.len(), n);
        prop_assert_eq!(a.len(), (ratio * n as f64 + 0.5).floor() as usize);
    }
}
