use std::collections::HashSet;

use fairfl::data::{partition_fixed, ClientDataset, Sample};
use fairfl::fairness::{ddp_hard, kde_ddp_penalty_and_grad, smoothed_rates};
use fairfl::model::{Architecture, ModelParams};
use fairfl::numerics::{normal_cdf, Rng};
use fairfl::oracle::{rule_disparity, DiscreteInstance, StochasticRule};
use fairfl::report::{summarize, MetricsRecord};
use proptest::prelude::*;

fn pool(n0: usize, n1: usize, d: usize, seed: u64) -> Vec<Sample> {
    let mut rng = Rng::derive(seed, 0);
    (0..n0 + n1)
        .map(|i| Sample {
            // The first coordinate is a unique tag so samples can be traced.
            x: std::iter::once(i as f64).chain((1..d).map(|_| rng.normal())).collect(),
            s: (i >= n0) as u8,
            y: rng.bernoulli(0.5) as u8,
        })
        .collect()
}

fn samples_strategy() -> impl Strategy<Value = Vec<Sample>> {
    prop::collection::vec(
        (prop::collection::vec(-3.0f64..3.0, 3), any::<bool>(), any::<bool>()),
        4..40,
    )
    .prop_map(|rows| {
        let mut out: Vec<Sample> = rows
            .into_iter()
            .map(|(x, s, y)| Sample { x, s: s as u8, y: y as u8 })
            .collect();
        // Both groups present.
        out[0].s = 0;
        out[1].s = 1;
        out
    })
}

fn linear(weights: &[f64]) -> ModelParams {
    ModelParams::from_weights(Architecture::Linear, weights.len() - 1, weights.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fixed_partitions_are_exact_and_disjoint(
        counts in prop::collection::vec((1usize..20, 1usize..20), 1..6),
        seed in any::<u64>(),
    ) {
        let counts: Vec<[usize; 2]> = counts.into_iter().map(|(a, b)| [a, b]).collect();
        let need0: usize = counts.iter().map(|c| c[0]).sum();
        let need1: usize = counts.iter().map(|c| c[1]).sum();
        let data = pool(need0 + 5, need1 + 5, 3, seed);
        let clients = partition_fixed(&data, &counts, &mut Rng::derive(seed, 1)).unwrap();
        let mut seen = HashSet::new();
        for (c, want) in clients.iter().zip(&counts) {
            prop_assert_eq!(c.group_counts(), *want);
            prop_assert!(c.require_both_groups().is_ok());
            for s in &c.samples {
                prop_assert!(seen.insert(s.x[0] as usize));
            }
        }
    }

    #[test]
    fn forward_is_pure(w in prop::collection::vec(-2.0f64..2.0, 4), x in prop::collection::vec(-2.0f64..2.0, 3)) {
        let m = linear(&w);
        prop_assert_eq!(m.forward(&x).unwrap().to_bits(), m.forward(&x).unwrap().to_bits());
        let mut rng = Rng::derive(1, 1);
        let mlp = ModelParams::init(Architecture::Mlp { hidden: vec![4] }, 3, &mut rng);
        prop_assert_eq!(mlp.forward(&x).unwrap().to_bits(), mlp.forward(&x).unwrap().to_bits());
    }

    #[test]
    fn penalty_ignores_order_within_groups(samples in samples_strategy(), w in prop::collection::vec(-2.0f64..2.0, 4), seed in any::<u64>()) {
        let m = linear(&w);
        let base = kde_ddp_penalty_and_grad(&m, &samples, 0.1).unwrap().penalty;
        let mut shuffled = samples.clone();
        Rng::derive(seed, 2).shuffle(&mut shuffled);
        let again = kde_ddp_penalty_and_grad(&m, &shuffled, 0.1).unwrap().penalty;
        prop_assert!((base - again).abs() < 1e-12);
    }

    #[test]
    fn constant_predictions_have_zero_ddp(n in 2usize..50, value in any::<bool>(), seed in any::<u64>()) {
        let mut rng = Rng::derive(seed, 3);
        let mut s: Vec<u8> = (0..n).map(|_| rng.bernoulli(0.5) as u8).collect();
        s[0] = 0;
        s[1] = 1;
        let preds = vec![value as u8; n];
        prop_assert_eq!(ddp_hard(&preds, &s).unwrap(), 0.0);
    }

    #[test]
    fn smoothed_rate_is_monotone_in_group_logits(samples in samples_strategy(), w in prop::collection::vec(-2.0f64..2.0, 4), idx in any::<prop::sample::Index>(), bump in 0.0f64..2.0) {
        // Raising one sample's logit through the bias-free path: move its
        // features along the weight direction.
        let m = linear(&w);
        let i = idx.index(samples.len());
        let before = smoothed_rates(&m, &samples, 0.1).unwrap();
        let mut moved = samples.clone();
        let wn: f64 = w[..3].iter().map(|v| v * v).sum();
        if wn > 1e-9 {
            for (x, wj) in moved[i].x.iter_mut().zip(&w[..3]) {
                *x += bump * wj / wn;
            }
        }
        let after = smoothed_rates(&m, &moved, 0.1).unwrap();
        let g = samples[i].s as usize;
        prop_assert!(after.rate[g] >= before.rate[g] - 1e-15);
        prop_assert_eq!(after.rate[1 - g], before.rate[1 - g]);
    }

    #[test]
    fn cdf_is_monotone(mut zs in prop::collection::vec(-40.0f64..40.0, 2..200)) {
        zs.sort_by(f64::total_cmp);
        for pair in zs.windows(2) {
            prop_assert!(normal_cdf(pair[0]) <= normal_cdf(pair[1]));
        }
    }

    #[test]
    fn summary_orderings(accs in prop::collection::vec((0.0f64..1.0, 0.0f64..2.0), 1..10)) {
        let records: Vec<MetricsRecord> = accs
            .iter()
            .enumerate()
            .map(|(i, &(acc, ddp))| MetricsRecord {
                client_id: i,
                acc,
                test_error: 1.0 - acc,
                ddp_sum: ddp,
                ddp_gap: ddp / 2.0,
                npr0: 0.5,
                npr1: 0.5,
                npr: 0.5,
                bce: 0.7,
            })
            .collect();
        let s = summarize(&records).unwrap();
        prop_assert!(s.worst_acc <= s.avg_acc + 1e-15);
        prop_assert!(s.worst_ddp >= s.avg_ddp - 1e-15);
    }

    #[test]
    fn constant_rules_are_exactly_fair(raw in prop::collection::vec(0.01f64..1.0, 8), v in 0.0f64..1.0) {
        let total: f64 = raw.iter().sum();
        let mut table: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let drift = 1.0 - table.iter().sum::<f64>();
        table[7] += drift;
        let inst = DiscreteInstance::new(2, table).unwrap();
        let d = rule_disparity(&inst, &StochasticRule::constant(2, v)).unwrap();
        prop_assert!(d.abs() < 1e-15);
    }
}

#[test]
fn every_partition_yields_valid_client_datasets() {
    let data = pool(50, 50, 2, 9);
    let clients = partition_fixed(&data, &[[10, 5], [5, 10], [3, 3]], &mut Rng::derive(9, 9)).unwrap();
    for c in &clients {
        assert!(ClientDataset::new(c.client_id, c.samples.clone()).is_ok());
    }
}
