//! Monte-Carlo estimators for the variational bound and the KL
//! decomposition, over tiny models with a fixed hard assignment.

use macrid::model::{infer_posteriors, kl_gaussian, HyperParams, ModelParams, Similarity, UserPosterior};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

impl Estimate {
    fn of_mean(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            value: mean,
            std_err: (var / n).sqrt(),
        }
    }

    /// `ln mean exp(w)`, with a delta-method standard error.
    fn of_log_mean_exp(w: &[f64]) -> Self {
        let top = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scaled: Vec<f64> = w.iter().map(|x| (x - top).exp()).collect();
        let e = Self::of_mean(&scaled);
        Self {
            value: top + e.value.ln(),
            std_err: e.std_err / e.value,
        }
    }
}

pub struct Toy {
    pub params: ModelParams<f64>,
    pub rows: Vec<Vec<u32>>,
    /// Concept of every item.
    pub concept: Vec<usize>,
    pub posteriors: Vec<UserPosterior<f64>>,
}

impl Toy {
    pub fn new(seed: u64, items: usize, k: usize, d: usize, users: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hp = HyperParams {
            k,
            d,
            tau: rng.random_range(0.3..1.0),
            sigma0: rng.random_range(0.2..0.5),
            hidden_layers: rng.random_range(0..=1),
            hidden_width: 3,
            ..Default::default()
        };
        let mut params = ModelParams::<f64>::init(items, &hp, Similarity::Cosine, &mut rng).unwrap();
        for layer in &mut params.layers {
            layer.bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        let mut rows = Vec::new();
        while rows.len() < users {
            let n = rng.random_range(1..items);
            let mut r: Vec<u32> = rand::seq::index::sample(&mut rng, items, n)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            r.sort();
            if !rows.contains(&r) {
                rows.push(r);
            }
        }
        let refs: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
        let (assignment, posteriors) = infer_posteriors(&params, &refs).unwrap();
        Self {
            concept: assignment.concepts(),
            params,
            rows,
            posteriors,
        }
    }

    fn dims(&self) -> usize {
        self.params.k() * self.params.d()
    }

    /// `ln p(x_u | z)` for a flattened `K·d` code.
    pub fn log_likelihood(&self, user: usize, z: &[f64]) -> f64 {
        let d = self.params.d();
        let raw: Vec<f64> = (0..self.params.n_items())
            .map(|i| {
                let k = self.concept[i];
                cosine(&z[k * d..(k + 1) * d], self.params.item_reps.row(i)) / self.params.tau
            })
            .collect();
        let top = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm = top + raw.iter().map(|x| (x - top).exp()).sum::<f64>().ln();
        self.rows[user].iter().map(|&i| raw[i as usize] - norm).sum()
    }

    pub fn log_prior(&self, z: &[f64]) -> f64 {
        let s = self.params.sigma0;
        z.iter().map(|x| log_normal(*x, 0.0, s)).sum()
    }

    pub fn log_posterior(&self, user: usize, z: &[f64]) -> f64 {
        let p = &self.posteriors[user];
        z.iter()
            .zip(p.mu.data().iter().zip(p.sigma.data()))
            .map(|(x, (m, s))| log_normal(*x, *m, *s))
            .sum()
    }

    /// `ln ((1/U) Σ_u q(z | x_u))`
    pub fn log_aggregate(&self, z: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.rows.len()).map(|u| self.log_posterior(u, z)).collect();
        log_sum_exp(&terms) - (self.rows.len() as f64).ln()
    }

    pub fn sample_posterior(&self, user: usize, rng: &mut impl Rng) -> Vec<f64> {
        let p = &self.posteriors[user];
        p.mu.data()
            .iter()
            .zip(p.sigma.data())
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn sample_prior(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.dims())
            .map(|_| self.params.sigma0 * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// `E_q[ln p(x|z)] − KL(q ‖ p)` with the closed-form KL.
    pub fn elbo(&self, user: usize, samples: usize, rng: &mut impl Rng) -> Estimate {
        let ll: Vec<f64> = (0..samples)
            .map(|_| {
                let z = self.sample_posterior(user, rng);
                self.log_likelihood(user, &z)
            })
            .collect();
        let mut e = Estimate::of_mean(&ll);
        e.value -= kl_gaussian(&self.posteriors[user], self.params.sigma0);
        e
    }

    /// Importance-sampled `ln p(x_u)` with an even mixture of the posterior
    /// and the prior as proposal.
    pub fn log_evidence(&self, user: usize, samples: usize, rng: &mut impl Rng) -> Estimate {
        let half = 0.5f64.ln();
        let w: Vec<f64> = (0..samples)
            .map(|_| {
                let z = if rng.random_bool(0.5) {
                    self.sample_posterior(user, rng)
                } else {
                    self.sample_prior(rng)
                };
                let prior = self.log_prior(&z);
                let proposal = log_sum_exp(&[half + self.log_posterior(user, &z), half + prior]);
                self.log_likelihood(user, &z) + prior - proposal
            })
            .collect();
        Estimate::of_log_mean_exp(&w)
    }

    /// Average closed-form `KL(q(z|x_u) ‖ p(z))` over the rows.
    pub fn mean_kl(&self) -> f64 {
        let s0 = self.params.sigma0;
        self.posteriors.iter().map(|p| kl_gaussian(p, s0)).sum::<f64>() / self.rows.len() as f64
    }

    /// Mutual information between the row index and the code under `q`.
    pub fn mutual_information(&self, samples: usize, rng: &mut impl Rng) -> Estimate {
        let v: Vec<f64> = (0..samples)
            .map(|_| {
                let u = rng.random_range(0..self.rows.len());
                let z = self.sample_posterior(u, rng);
                self.log_posterior(u, &z) - self.log_aggregate(&z)
            })
            .collect();
        Estimate::of_mean(&v)
    }

    /// `KL(q(z) ‖ p(z))` for the aggregate posterior.
    pub fn aggregate_kl(&self, samples: usize, rng: &mut impl Rng) -> Estimate {
        let v: Vec<f64> = (0..samples)
            .map(|_| {
                let u = rng.random_range(0..self.rows.len());
                let z = self.sample_posterior(u, rng);
                self.log_aggregate(&z) - self.log_prior(&z)
            })
            .collect();
        Estimate::of_mean(&v)
    }
}

/// ELBO against the importance-sampled evidence for one random toy.
pub struct BoundCheck {
    pub elbo: Estimate,
    pub evidence: Estimate,
}

impl BoundCheck {
    pub fn run(seed: u64, samples: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE1B0);
        let items = rng.random_range(4..=8);
        let k = rng.random_range(1..=2);
        let d = rng.random_range(2..=3);
        let toy = Toy::new(seed, items, k, d, 1);
        Self {
            elbo: toy.elbo(0, samples, &mut rng),
            evidence: toy.log_evidence(0, samples, &mut rng),
        }
    }

    pub fn slack(&self) -> f64 {
        3.0 * self.elbo.std_err.hypot(self.evidence.std_err)
    }

    pub fn holds(&self) -> bool {
        self.elbo.value <= self.evidence.value + self.slack()
    }
}

/// Both sides of `E[KL(q(z|x)‖p)] = I_q(x;z) + KL(q(z)‖p)` on a 4-row toy.
pub struct DecompositionCheck {
    pub mean_kl: f64,
    pub information: Estimate,
    pub aggregate_kl: Estimate,
}

impl DecompositionCheck {
    pub fn run(seed: u64, samples: usize) -> Self {
        let toy = Toy::new(seed, 6, 2, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDEC0);
        Self {
            mean_kl: toy.mean_kl(),
            information: toy.mutual_information(samples, &mut rng),
            aggregate_kl: toy.aggregate_kl(samples, &mut rng),
        }
    }

    pub fn gap(&self) -> f64 {
        (self.mean_kl - self.information.value - self.aggregate_kl.value).abs()
    }

    pub fn slack(&self) -> f64 {
        3.0 * self.information.std_err.hypot(self.aggregate_kl.std_err)
    }

    pub fn holds(&self) -> bool {
        self.gap() <= self.slack()
    }
}

fn log_normal(x: f64, mean: f64, sd: f64) -> f64 {
    -0.5 * (2.0 * PI).ln() - sd.ln() - (x - mean).powi(2) / (2.0 * sd * sd)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let top = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + v.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / ((na + 1e-8) * (nb + 1e-8))
}
