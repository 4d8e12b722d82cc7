mod common;

use common::bounds::{BoundCheck, DecompositionCheck};
use macrid::model::{
    decode_scores, infer_posteriors, prototype_logits, sample_assignment, HyperParams, Mode,
    ModelParams, Similarity,
};
use macrid::numerics::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn elbo_stays_below_log_evidence() {
    for seed in 0..20 {
        let c = BoundCheck::run(seed, 20_000);
        assert!(
            c.holds(),
            "seed {seed}: elbo {:.5} evidence {:.5} slack {:.5}",
            c.elbo.value,
            c.evidence.value,
            c.slack()
        );
    }
}

#[test]
fn kl_splits_into_information_and_aggregate_terms() {
    for seed in 0..5 {
        let c = DecompositionCheck::run(seed, 100_000);
        assert!(
            c.holds(),
            "seed {seed}: E[KL] {:.5} = I {:.5} + KL(q(z)) {:.5}? gap {:.5} > {:.5}",
            c.mean_kl,
            c.information.value,
            c.aggregate_kl.value,
            c.gap(),
            c.slack()
        );
    }
}

#[test]
fn gumbel_argmax_frequencies_follow_softmax() {
    let logits = Tensor::<f64>::new(1, 4, vec![0.5, -1.0, 1.2, 0.0]).unwrap();
    let z: f64 = logits.data().iter().map(|x| x.exp()).sum();
    let expected: Vec<f64> = logits.data().iter().map(|x| x.exp() / z).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        let c = sample_assignment(&logits, 1.0, Mode::Train, &mut rng);
        counts[c.concepts()[0]] += 1;
    }
    for (k, &n) in counts.iter().enumerate() {
        let freq = n as f64 / draws as f64;
        assert!((freq - expected[k]).abs() < 0.01, "concept {k}: {freq} vs {}", expected[k]);
    }
}

fn near_one_hot_fraction(draws: usize, sample: &mut dyn FnMut() -> Vec<f64>) -> f64 {
    let hits = (0..draws)
        .filter(|_| {
            let w = sample();
            let top = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            1.0 - top < 1e-3
        })
        .count();
    hits as f64 / draws as f64
}

fn library_sampler<'a>(logits: &'a Tensor<f64>, rng: &'a mut ChaCha8Rng) -> impl FnMut() -> Vec<f64> + 'a {
    move || sample_assignment(logits, 0.01, Mode::Train, rng).weights.row(0).to_vec()
}

#[test]
fn cold_gumbel_softmax_is_nearly_one_hot() {
    let logits = Tensor::<f64>::new(1, 3, vec![4.0, 0.0, -1.5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frac = near_one_hot_fraction(10_000, &mut library_sampler(&logits, &mut rng));
    assert!(frac >= 0.99, "{frac}");
}

#[test]
fn cold_gumbel_softmax_at_unit_gap_matches_direct_sampling() {
    let raw = [1.0, 0.0, -1.5];
    let logits = Tensor::<f64>::new(1, 3, raw.to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lib = near_one_hot_fraction(100_000, &mut library_sampler(&logits, &mut rng));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut direct = || {
        let t: Vec<f64> = raw
            .iter()
            .map(|s| (s - (-rng.random_range(f64::MIN_POSITIVE..1.0f64).ln()).ln()) / 0.01)
            .collect();
        let top = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = t.iter().map(|x| (x - top).exp()).sum();
        t.iter().map(|x| (x - top).exp() / z).collect()
    };
    let oracle = near_one_hot_fraction(100_000, &mut direct);
    let se = (2.0 * oracle * (1.0 - oracle) / 100_000.0).sqrt();
    assert!((lib - oracle).abs() < 4.0 * se, "{lib} vs {oracle}");
    assert!(oracle < 0.99, "{oracle}");
}

fn random_model(seed: u64, m: usize, k: usize, d: usize) -> ModelParams<f64> {
    let hp = HyperParams {
        k,
        d,
        hidden_layers: 1,
        hidden_width: 5,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::init(m, &hp, Similarity::Cosine, &mut rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rescaling_one_vector_changes_nothing(
        seed in 0u64..1000,
        which in 0usize..2,
        scale in 0.2f64..20.0,
    ) {
        let p = random_model(seed, 8, 3, 4);
        let rows: Vec<&[u32]> = vec![&[0, 3, 5], &[1, 2]];
        let (c, post) = infer_posteriors(&p, &rows).unwrap();
        let cand: Vec<u32> = (0..8).collect();
        let before_logits = prototype_logits(&p);
        let before = decode_scores(&post[0], &c, &p, &cand).unwrap();

        let mut q = p.clone();
        let target = if which == 0 { &mut q.item_reps } else { &mut q.prototypes };
        let row = (seed as usize) % target.rows();
        target.row_mut(row).iter_mut().for_each(|x| *x *= scale);
        let (c2, post2) = infer_posteriors(&q, &rows).unwrap();
        let after_logits = prototype_logits(&q);
        let after = decode_scores(&post2[0], &c2, &q, &cand).unwrap();
        for (a, b) in before_logits.data().iter().zip(after_logits.data()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
        for (a, b) in before.iter().zip(&after) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn posteriors_are_unit_and_log_probabilities_nonpositive(
        seed in 0u64..1000,
        rows in prop::collection::vec(prop::collection::btree_set(0u32..12, 1..6), 1..5),
    ) {
        let p = random_model(seed, 12, 2, 3);
        let rows: Vec<Vec<u32>> = rows.into_iter().map(|r| r.into_iter().collect()).collect();
        let refs: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
        let (c, post) = infer_posteriors(&p, &refs).unwrap();
        let cand: Vec<u32> = (0..12).collect();
        for (u, post) in post.iter().enumerate() {
            for k in 0..2 {
                let touched = rows[u].iter().any(|&i| c.weights.get(i as usize, k) > 0.0);
                let norm = post.mu.row(k).iter().map(|x| x * x).sum::<f64>().sqrt();
                if touched || norm > 1e-3 {
                    prop_assert!((norm - 1.0).abs() < 1e-5, "norm {norm}");
                }
            }
            prop_assert!(post.sigma.data().iter().all(|&s| s > 0.0 && s.is_finite()));
            let logp = decode_scores(post, &c, &p, &cand).unwrap();
            prop_assert!(logp.iter().all(|&x| x <= 0.0));
        }
    }
}
