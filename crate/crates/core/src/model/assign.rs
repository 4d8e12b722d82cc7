use super::{ModelParams, Similarity};
use crate::numerics::{Real, Tensor};
use crate::model::Mode;
use rand::Rng;
use rand_distr::{Distribution, Gumbel};

/// Per-item categorical weights over the K concepts (`M × K`).
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptAssignment<F: Real = f32> {
    pub weights: Tensor<F>,
    /// Rows are one-hot.
    pub hard: bool,
}

impl<F: Real> ConceptAssignment<F> {
    /// One-hot assignment at the row-wise argmax of `logits`, lowest index on
    /// ties.
    pub fn hard_from_logits(logits: &Tensor<F>) -> Self {
        let mut w = Tensor::zeros(logits.rows(), logits.cols());
        for i in 0..logits.rows() {
            w.set(i, argmax(logits.row(i)), F::one());
        }
        Self {
            weights: w,
            hard: true,
        }
    }

    /// Argmax concept of every item.
    pub fn concepts(&self) -> Vec<usize> {
        (0..self.weights.rows())
            .map(|i| argmax(self.weights.row(i)))
            .collect()
    }

    /// Items per concept under the argmax.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.weights.cols()];
        for k in self.concepts() {
            c[k] += 1;
        }
        c
    }

    pub fn n_items(&self) -> usize {
        self.weights.rows()
    }

    pub fn k(&self) -> usize {
        self.weights.cols()
    }
}

pub(crate) fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// `s[i,k] = cosine(h_i, m_k) / τ` (or the inner product over τ for the
/// ablation).
pub fn prototype_logits<F: Real>(params: &ModelParams<F>) -> Tensor<F> {
    let inv_tau = F::of(1.0 / params.tau);
    let raw = match params.similarity {
        Similarity::Cosine => params
            .item_reps
            .normalize_rows()
            .matmul_t(&params.prototypes.normalize_rows()),
        Similarity::Inner => params.item_reps.matmul_t(&params.prototypes),
    };
    raw.expect("validated parameter shapes").map(|v| v * inv_tau)
}

/// Standard Gumbel draws shaped like `logits`.
pub(crate) fn gumbel_noise<F: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<F> {
    let g = Gumbel::new(0.0, 1.0).expect("unit scale");
    Tensor::from_fn(rows, cols, |_, _| F::of(g.sample(rng)))
}

/// Gumbel-Softmax relaxed sample in train mode, one-hot mode otherwise.
pub fn sample_assignment<F: Real>(
    logits: &Tensor<F>,
    temperature: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> ConceptAssignment<F> {
    match mode {
        Mode::Infer => ConceptAssignment::hard_from_logits(logits),
        Mode::Train => {
            let noise = gumbel_noise::<F>(logits.rows(), logits.cols(), rng);
            let inv = F::of(1.0 / temperature);
            let mut w = Tensor::from_fn(logits.rows(), logits.cols(), |i, j| {
                (logits.get(i, j) + noise.get(i, j)) * inv
            });
            for i in 0..w.rows() {
                crate::numerics::softmax_rows_in_place(w.row_mut(i));
            }
            ConceptAssignment {
                weights: w,
                hard: false,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HyperParams, Linear};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(items: Vec<f64>, protos: Vec<f64>, d: usize) -> ModelParams<f64> {
        let m = items.len() / d;
        let k = protos.len() / d;
        ModelParams {
            prototypes: Tensor::new(k, d, protos).unwrap(),
            item_reps: Tensor::new(m, d, items).unwrap(),
            context_reps: Tensor::zeros(m, d),
            layers: vec![Linear {
                weight: Tensor::zeros(d, 2 * d),
                bias: Tensor::zeros(1, 2 * d),
            }],
            tau: 0.1,
            sigma0: 0.1,
            similarity: Similarity::Cosine,
        }
    }

    #[test]
    fn logits_for_identical_orthogonal_opposite() {
        let p = params(vec![1.0, 2.0, -2.0, 1.0, -1.0, -2.0], vec![1.0, 2.0], 2);
        let s = prototype_logits(&p);
        assert!((s.get(0, 0) - 10.0).abs() < 1e-6);
        assert!(s.get(1, 0).abs() < 1e-6);
        assert!((s.get(2, 0) + 10.0).abs() < 1e-6);
    }

    #[test]
    fn logits_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hp = HyperParams {
            k: 3,
            d: 4,
            ..Default::default()
        };
        let p: ModelParams<f64> = ModelParams::init(10, &hp, Similarity::Cosine, &mut rng).unwrap();
        let base = prototype_logits(&p);
        let mut q = p.clone();
        q.item_reps.row_mut(2).iter_mut().for_each(|v| *v *= 7.5);
        q.prototypes.row_mut(1).iter_mut().for_each(|v| *v *= 0.2);
        let s = prototype_logits(&q);
        for (a, b) in base.data().iter().zip(s.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        for v in s.data() {
            assert!(v.abs() <= 10.0 + 1e-9);
        }
    }

    #[test]
    fn zero_item_gives_zero_logit() {
        let p = params(vec![0.0, 0.0], vec![1.0, 1.0], 2);
        assert_eq!(prototype_logits(&p).get(0, 0), 0.0);
    }

    #[test]
    fn infer_mode_is_argmax() {
        let logits = Tensor::<f64>::new(2, 3, vec![10.0, 0.0, -10.0, 1.0, 1.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = sample_assignment(&logits, 1.0, Mode::Infer, &mut rng);
        assert!(c.hard);
        assert_eq!(c.weights.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(c.weights.row(1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn train_rows_sum_to_one() {
        let logits = Tensor::<f32>::from_fn(50, 4, |i, j| ((i * 7 + j * 3) % 11) as f32 - 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = sample_assignment(&logits, 0.5, Mode::Train, &mut rng);
        for i in 0..50 {
            let s: f32 = c.weights.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(c.weights.row(i).iter().all(|v| *v >= 0.0));
        }
    }
}
