//! Planted-concept corpora with known item labels, for checking that
//! training recovers the concepts.

use crate::corpus::InteractionMatrix;
use crate::Result;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedSpec {
    pub users: usize,
    pub items: usize,
    pub concepts: usize,
    /// Concepts each user draws from.
    pub concepts_per_user: usize,
    pub min_items: usize,
    pub max_items: usize,
    /// Latent item factors within each concept; for each of their concepts a
    /// user prefers items near a private point in that factor space. Zero
    /// draws items uniformly.
    pub latent_factors: usize,
    /// Zipf exponent of item popularity within each concept (0 = uniform).
    pub popularity: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            users: 600,
            items: 90,
            concepts: 3,
            concepts_per_user: 2,
            min_items: 10,
            max_items: 20,
            latent_factors: 0,
            popularity: 0.0,
            seed: 0,
        }
    }
}

/// Squared-distance scale of the taste kernel.
const TASTE_WIDTH: f64 = 0.05;

pub struct PlantedCorpus {
    pub matrix: InteractionMatrix,
    /// Ground-truth concept of every item.
    pub labels: Vec<usize>,
}

/// Items are split into equal contiguous concept blocks; each user picks
/// `concepts_per_user` distinct concepts and adopts between `min_items` and
/// `max_items` distinct items from their union, uniformly unless latent
/// factors or popularity skew are set.
pub fn planted_concepts(spec: &PlantedSpec) -> Result<PlantedCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels: Vec<usize> = (0..spec.items)
        .map(|i| i * spec.concepts / spec.items)
        .collect();
    let factors: Vec<Vec<f64>> = (0..spec.items)
        .map(|_| (0..spec.latent_factors).map(|_| rng.random::<f64>()).collect())
        .collect();
    let block_start = |c: usize| (0..spec.items).find(|&i| labels[i] == c).unwrap_or(0);
    let mut rows = Vec::with_capacity(spec.users);
    for _ in 0..spec.users {
        let chosen = sample(&mut rng, spec.concepts, spec.concepts_per_user).into_vec();
        let pool: Vec<usize> = (0..spec.items).filter(|&i| chosen.contains(&labels[i])).collect();
        let n = rng.random_range(spec.min_items..=spec.max_items).min(pool.len());
        let taste: Vec<Vec<f64>> = (0..spec.concepts)
            .map(|_| (0..spec.latent_factors).map(|_| rng.random()).collect())
            .collect();
        // Gumbel top-n: weighted sampling without replacement
        let mut keyed: Vec<(f64, usize)> = pool
            .iter()
            .map(|&i| {
                let dist: f64 = factors[i]
                    .iter()
                    .zip(&taste[labels[i]])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                let rank = (i - block_start(labels[i])) as f64;
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let log_w = -dist / TASTE_WIDTH - spec.popularity * (rank + 1.0).ln();
                (log_w - (-u.ln()).ln(), i)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut row: Vec<u32> = keyed.iter().take(n).map(|&(_, i)| i as u32).collect();
        row.sort_unstable();
        rows.push(row);
    }
    Ok(PlantedCorpus {
        matrix: InteractionMatrix::from_rows_anonymous(spec.items, rows)?,
        labels,
    })
}
