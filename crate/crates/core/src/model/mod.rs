//! The disentangled VAE: parameters, hyper-parameters, concept assignment,
//! encoder, decoder and the beta-weighted objective.

mod assign;
mod checkpoint;
mod forward;

pub use assign::{prototype_logits, sample_assignment, ConceptAssignment};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    decode_scores, encode, infer_posteriors, kl_gaussian, loss, loss_with_noise, score_users,
    LossOutput, Mode, Noise, UserPosterior,
};

use crate::numerics::{Real, Tensor};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Number of items scored per user in the decoder softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NegSamples {
    /// Full softmax up to 20,000 items, otherwise 1,000 sampled negatives.
    #[default]
    Auto,
    Full,
    Sampled(usize),
}

impl NegSamples {
    pub const AUTO_FULL_LIMIT: usize = 20_000;
    pub const AUTO_SAMPLES: usize = 1_000;

    /// `None` means full softmax.
    pub fn resolve(self, n_items: usize) -> Option<usize> {
        match self {
            NegSamples::Full => None,
            NegSamples::Sampled(n) => Some(n),
            NegSamples::Auto if n_items <= Self::AUTO_FULL_LIMIT => None,
            NegSamples::Auto => Some(Self::AUTO_SAMPLES),
        }
    }
}

impl std::str::FromStr for NegSamples {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(NegSamples::Full),
            "auto" => Ok(NegSamples::Auto),
            n => n
                .parse()
                .map(NegSamples::Sampled)
                .map_err(|_| format!("expected full, auto or a count, got {n:?}")),
        }
    }
}

impl std::fmt::Display for NegSamples {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NegSamples::Auto => write!(f, "auto"),
            NegSamples::Full => write!(f, "full"),
            NegSamples::Sampled(n) => write!(f, "{n}"),
        }
    }
}

impl Serialize for NegSamples {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for NegSamples {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        match v {
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|n| NegSamples::Sampled(n as usize))
                .ok_or_else(|| serde::de::Error::custom("negative sample count")),
            serde_json::Value::String(s) => s.parse().map_err(serde::de::Error::custom),
            _ => Err(serde::de::Error::custom("expected string or number")),
        }
    }
}

/// Similarity used for prototype assignment and decoding. `Inner` exists
/// only to reproduce the mode-collapse contrast.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    Inner,
}

impl std::str::FromStr for Similarity {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "inner" => Ok(Similarity::Inner),
            _ => Err(format!("unknown similarity {s:?} (cosine|inner)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Number of concepts.
    pub k: usize,
    /// Per-concept representation size.
    pub d: usize,
    pub beta: f64,
    /// Prior standard deviation.
    pub sigma0: f64,
    pub tau: f64,
    /// Gumbel-Softmax temperature.
    pub gumbel_temp: f64,
    pub lr: f64,
    pub l2_reg: f64,
    /// Drop probability.
    pub dropout: f64,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub neg_samples: NegSamples,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            k: 7,
            d: 100,
            beta: 0.2,
            sigma0: 0.1,
            tau: 0.1,
            gumbel_temp: 1.0,
            lr: 1e-3,
            l2_reg: 0.0,
            dropout: 0.5,
            hidden_layers: 0,
            hidden_width: 600,
            neg_samples: NegSamples::Auto,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        if !(1..=20).contains(&self.k) {
            return bad(format!("K = {} outside 1..=20", self.k));
        }
        if self.d < 2 {
            return bad(format!("d = {} < 2", self.d));
        }
        if !(0.0..=100.0).contains(&self.beta) {
            return bad(format!("beta = {} outside [0, 100]", self.beta));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) || !(self.tau > 0.0) {
            return bad("sigma0 and tau must be positive".into());
        }
        if !(self.gumbel_temp > 0.0) {
            return bad("gumbel temperature must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout = {} outside [0, 1)", self.dropout));
        }
        if self.hidden_layers > 3 || (self.hidden_layers > 0 && self.hidden_width == 0) {
            return bad("hidden layers must be 0..=3 with positive width".into());
        }
        if !(self.lr > 0.0) || self.l2_reg < 0.0 {
            return bad("lr must be positive and l2 nonnegative".into());
        }
        Ok(())
    }

    /// Layer widths of the encoder MLP, input to output.
    pub fn mlp_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.d];
        dims.extend(std::iter::repeat(self.hidden_width).take(self.hidden_layers));
        dims.push(2 * self.d);
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F: Real = f32> {
    /// `in × out`
    pub weight: Tensor<F>,
    /// `1 × out`
    pub bias: Tensor<F>,
}

/// All trainable tensors plus the fixed scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F: Real = f32> {
    /// `K × d`
    pub prototypes: Tensor<F>,
    /// `M × d`, used by the decoder and for concept assignment.
    pub item_reps: Tensor<F>,
    /// `M × d`, used by the encoder.
    pub context_reps: Tensor<F>,
    pub layers: Vec<Linear<F>>,
    pub tau: f64,
    pub sigma0: f64,
    pub similarity: Similarity,
}

impl<F: Real> ModelParams<F> {
    /// Normal(0, 1/√d) embeddings and weights, zero biases, prototypes copied
    /// from `K` distinct random items.
    pub fn init(
        n_items: usize,
        hp: &HyperParams,
        similarity: Similarity,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        hp.validate()?;
        if n_items < hp.k {
            return Err(Error::Precondition(format!(
                "{n_items} items cannot seed {} prototypes",
                hp.k
            )));
        }
        let d = hp.d;
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid deviation");
        let mut draw = |r: usize, c: usize| -> Tensor<F> {
            Tensor::from_fn(r, c, |_, _| F::of(normal.sample(rng)))
        };
        let item_reps = draw(n_items, d);
        let context_reps = draw(n_items, d);
        let dims = hp.mlp_dims();
        let layers = dims
            .windows(2)
            .map(|w| Linear {
                weight: draw(w[0], w[1]),
                bias: Tensor::zeros(1, w[1]),
            })
            .collect();
        let seeds = rand::seq::index::sample(rng, n_items, hp.k).into_vec();
        let prototypes = item_reps.select_rows(&seeds);
        let p = Self {
            prototypes,
            item_reps,
            context_reps,
            layers,
            tau: hp.tau,
            sigma0: hp.sigma0,
            similarity,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn d(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn n_items(&self) -> usize {
        self.item_reps.rows()
    }

    /// Output widths of the hidden layers.
    pub fn hidden_sizes(&self) -> Vec<usize> {
        let n = self.layers.len();
        self.layers[..n.saturating_sub(1)]
            .iter()
            .map(|l| l.weight.cols())
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Tensors in checkpoint order: prototypes, item reps, context reps, then
    /// each layer's weight and bias.
    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut v = vec![&self.prototypes, &self.item_reps, &self.context_reps];
        for l in &self.layers {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut v = vec![
            &mut self.prototypes,
            &mut self.item_reps,
            &mut self.context_reps,
        ];
        for l in &mut self.layers {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v
    }

    /// Same layout with every entry zero.
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<F>| Tensor::zeros(t.rows(), t.cols());
        Self {
            prototypes: z(&self.prototypes),
            item_reps: z(&self.item_reps),
            context_reps: z(&self.context_reps),
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: z(&l.weight),
                    bias: z(&l.bias),
                })
                .collect(),
            tau: self.tau,
            sigma0: self.sigma0,
            similarity: self.similarity,
        }
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            prototypes: self.prototypes.cast(),
            item_reps: self.item_reps.cast(),
            context_reps: self.context_reps.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            tau: self.tau,
            sigma0: self.sigma0,
            similarity: self.similarity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (k, d, m) = (self.k(), self.d(), self.n_items());
        let bad = |msg: String| Err(Error::Precondition(msg));
        if k < 1 || d < 2 || m < k {
            return bad(format!("need K >= 1, d >= 2, M >= K; got K={k}, d={d}, M={m}"));
        }
        if !(self.tau > 0.0) || !(self.sigma0 > 0.0) {
            return bad("tau and sigma0 must be positive".into());
        }
        if self.item_reps.cols() != d || self.context_reps.shape() != [m, d] {
            return bad("embedding shapes disagree".into());
        }
        let mut width = d;
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.rows() != width || l.bias.shape() != [1, l.weight.cols()] {
                return bad(format!("layer {i} has inconsistent shape"));
            }
            width = l.weight.cols();
        }
        if self.layers.is_empty() || width != 2 * d {
            return bad("encoder MLP must map d to 2d".into());
        }
        if !self.tensors().iter().all(|t| t.is_finite()) {
            return bad("non-finite parameter".into());
        }
        Ok(())
    }

    /// Sum of squares of every trainable entry.
    pub fn sum_squares(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_squares()).sum()
    }

    /// Drops prototype `k`.
    pub fn remove_prototype(&mut self, k: usize) {
        let keep: Vec<usize> = (0..self.k()).filter(|&j| j != k).collect();
        self.prototypes = self.prototypes.select_rows(&keep);
    }
}
