//! Sort-and-sum ranking metrics, independent of the library's top-k scan.

use macrid::metrics::{top_items, user_metrics};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct NaiveMetrics {
    pub ranked: Vec<u32>,
    pub ndcg100: f64,
    pub recall20: f64,
    pub recall50: f64,
}

pub fn naive_metrics(scores: &[f64], foldin: &[u32], heldout: &[u32]) -> NaiveMetrics {
    let mut order: Vec<u32> = (0..scores.len() as u32).filter(|i| !foldin.contains(i)).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    let hit = |i: &u32| heldout.contains(i);
    let mut dcg = 0.0;
    for (r, i) in order.iter().take(100).enumerate() {
        if hit(i) {
            dcg += 1.0 / ((r + 2) as f64).log2();
        }
    }
    let mut ideal = 0.0;
    for r in 0..heldout.len().min(100) {
        ideal += 1.0 / ((r + 2) as f64).log2();
    }
    let recall = |k: usize| {
        order.iter().take(k).filter(|i| hit(i)).count() as f64 / k.min(heldout.len()) as f64
    };
    NaiveMetrics {
        ndcg100: dcg / ideal,
        recall20: recall(20),
        recall50: recall(50),
        ranked: order.into_iter().take(100).collect(),
    }
}

fn random_case(seed: u64) -> (Vec<f64>, Vec<u32>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(5..400);
    let levels = rng.random_range(2..50);
    let scores: Vec<f64> = (0..m).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    let n = rng.random_range(2..=m.min(150));
    let mut picked: Vec<u32> = sample(&mut rng, m, n).into_iter().map(|i| i as u32).collect();
    let n_fold = rng.random_range(1..n);
    let mut foldin = picked.split_off(n - n_fold);
    picked.sort();
    foldin.sort();
    (scores, foldin, picked)
}

/// Compares the library against [`naive_metrics`] on `instances` random
/// score rows, requiring identical rankings and bit-identical metrics.
pub fn ranking_oracle(instances: u64) -> Result<(), String> {
    for seed in 0..instances {
        let (scores, foldin, heldout) = random_case(seed);
        let expected = naive_metrics(&scores, &foldin, &heldout);
        if top_items(&scores, &foldin, 100) != expected.ranked {
            return Err(format!("seed {seed}: rankings differ"));
        }
        let got = user_metrics(0, &scores, &foldin, &heldout);
        let pairs = [
            ("NDCG@100", got.ndcg100, expected.ndcg100),
            ("Recall@20", got.recall20, expected.recall20),
            ("Recall@50", got.recall50, expected.recall50),
        ];
        for (name, a, b) in pairs {
            if a != b {
                return Err(format!("seed {seed}: {name} {a} vs {b}"));
            }
        }
    }
    Ok(())
}
