//! Training runs behind the synthetic and ML-100k acceptance checks.

use macrid::corpus::{load_ratings, make_split, SplitPart, SplitSpec};
use macrid::metrics::{cluster_agreement, evaluate, independence, posterior_means, RepresentationScope};
use macrid::model::{prototype_logits, ConceptAssignment, HyperParams, ModelParams, Similarity};
use macrid::synthetic::{planted_concepts, PlantedCorpus, PlantedSpec};
use macrid::trainer::{train, TrainConfig};
use std::path::Path;

pub fn planted(seed: u64) -> PlantedCorpus {
    planted_concepts(&PlantedSpec {
        latent_factors: 2,
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn synthetic_config(seed: u64, similarity: Similarity, beta: f64) -> TrainConfig {
    TrainConfig {
        hp: HyperParams {
            k: 3,
            d: 16,
            beta,
            sigma0: 0.1,
            tau: 0.3,
            lr: 3e-3,
            dropout: 0.2,
            ..Default::default()
        },
        epochs: 100,
        batch_size: 64,
        seed,
        similarity,
        ..Default::default()
    }
}

fn all_users(n: usize) -> SplitSpec {
    SplitSpec {
        train_users: (0..n as u32).collect(),
        validation: Vec::new(),
        test: Vec::new(),
        foldin_fraction: 0.8,
        seed: 0,
    }
}

pub fn train_planted(c: &PlantedCorpus, cfg: &TrainConfig) -> ModelParams {
    train(&c.matrix, &all_users(c.matrix.n_users()), cfg).unwrap().0
}

fn hard(params: &ModelParams) -> ConceptAssignment {
    ConceptAssignment::hard_from_logits(&prototype_logits(params))
}

/// ARI between learned concepts and planted labels.
pub fn macro_ari(seed: u64) -> f64 {
    let c = planted(seed);
    let p = train_planted(&c, &synthetic_config(seed, Similarity::Cosine, 0.2));
    cluster_agreement(&hard(&p), &c.labels).unwrap()
}

/// Fraction of items in the most populated concept under inner-product
/// similarity.
pub fn inner_largest_share(seed: u64) -> f64 {
    let c = planted(seed);
    let p = train_planted(&c, &synthetic_config(seed, Similarity::Inner, 0.2));
    let counts = hard(&p).counts();
    *counts.iter().max().unwrap() as f64 / p.n_items() as f64
}

/// Independence of the concatenated posterior means of every user.
pub fn micro_independence(seed: u64, beta: f64) -> f64 {
    let c = planted(seed);
    let p = train_planted(&c, &synthetic_config(seed, Similarity::Cosine, beta));
    let rows: Vec<&[u32]> = c.matrix.rows().iter().map(Vec::as_slice).collect();
    let reps = posterior_means(&p, &rows, RepresentationScope::Concatenated).unwrap();
    independence(&reps).unwrap().value
}

pub struct Ml100k {
    pub ndcg100: f64,
    pub recall20: f64,
    pub recall50: f64,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
}

/// Preprocesses `path` (threshold 4, at least 5 items, 100 held-out users,
/// split seed 0), trains with `cfg` and evaluates on the test users.
pub fn ml100k(path: &Path, cfg: &TrainConfig) -> Ml100k {
    let m = load_ratings(path, 4.0, 5).unwrap();
    let split = make_split(&m, 100, 0.8, 0).unwrap();
    let (params, _) = train(&m, &split, cfg).unwrap();
    let r = evaluate(&params, &split, SplitPart::Test).unwrap();
    Ml100k {
        ndcg100: r.ndcg100.mean,
        recall20: r.recall20.mean,
        recall50: r.recall50.mean,
        users: m.n_users(),
        items: m.n_items(),
        interactions: m.n_interactions(),
    }
}
