//! Encoder, decoder and objective, built on the reverse-mode tape.

use super::assign::gumbel_noise;
use super::{ConceptAssignment, HyperParams, Linear, ModelParams, Similarity};
use crate::numerics::{Candidates, Graph, Real, Tensor, Var, DIV_EPS};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashSet;
use std::sync::Arc;

/// `−b/2` is kept within `[−40, 40]` before exponentiation.
const LOG_SIGMA_BOUND: f64 = 80.0;
const INFER_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Gumbel-Softmax assignment, dropout and sampled codes.
    Train,
    /// Mode of every distribution.
    Infer,
}

/// Per-user Gaussian posterior over the K concept components.
#[derive(Clone, Debug, PartialEq)]
pub struct UserPosterior<F: Real = f32> {
    /// `K × d`, unit-norm rows.
    pub mu: Tensor<F>,
    /// `K × d`, positive.
    pub sigma: Tensor<F>,
    /// `K × d` sampled code (equal to `mu` in infer mode).
    pub z: Tensor<F>,
}

/// Every random draw one forward pass consumes, sampled up front so that a
/// pass can be replayed exactly (gradient checks rely on this).
#[derive(Clone, Debug)]
pub struct Noise<F: Real> {
    pub mode: Mode,
    /// `M × K` standard Gumbel draws; `None` selects the one-hot mode.
    pub gumbel: Option<Tensor<F>>,
    /// Item bags entering the encoder numerator after item dropout.
    pub encoder_rows: Vec<Vec<u32>>,
    /// Inverted-dropout scale applied to the surviving items.
    pub input_scale: f64,
    /// Dropout mask for the input of each MLP layer (`None` = no dropout).
    /// The pooled input is thinned at the item level instead, so the first
    /// and last layers never carry a mask.
    pub layer_masks: Vec<Option<Tensor<F>>>,
    /// `(U·K) × d` standard normal draws; `None` sets `z = μ`.
    pub eps: Option<Tensor<F>>,
    pub candidates: Candidates,
}

impl<F: Real> Noise<F> {
    pub fn sample(
        rows: &[&[u32]],
        params: &ModelParams<F>,
        hp: &HyperParams,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Self {
        let (m, k, d) = (params.n_items(), params.k(), params.d());
        let u = rows.len();
        let neg = hp.neg_samples.resolve(m);
        if mode == Mode::Infer {
            let mut n = Self::deterministic(rows, params);
            n.candidates = sample_candidates(rows, m, neg, rng);
            return n;
        }
        let gumbel = Some(gumbel_noise(m, k, rng));
        let p = hp.dropout;
        let encoder_rows = if p > 0.0 {
            rows.iter()
                .map(|r| r.iter().copied().filter(|_| rng.random::<f64>() >= p).collect())
                .collect()
        } else {
            rows.iter().map(|r| r.to_vec()).collect()
        };
        let keep_scale = F::of(1.0 / (1.0 - p));
        let n_layers = params.layers.len();
        let layer_masks = params
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                (p > 0.0 && l >= 1 && l + 1 < n_layers).then(|| {
                    Tensor::from_fn(u * k, layer.weight.rows(), |_, _| {
                        if rng.random::<f64>() >= p {
                            keep_scale
                        } else {
                            F::zero()
                        }
                    })
                })
            })
            .collect();
        let eps = Some(Tensor::from_fn(u * k, d, |_, _| {
            F::of(StandardNormal.sample(rng))
        }));
        let candidates = sample_candidates(rows, m, neg, rng);
        Self {
            mode,
            gumbel,
            encoder_rows,
            input_scale: 1.0 / (1.0 - p),
            layer_masks,
            eps,
            candidates,
        }
    }

    /// Noise-free pass over all items.
    pub fn deterministic(rows: &[&[u32]], params: &ModelParams<F>) -> Self {
        Self {
            mode: Mode::Infer,
            gumbel: None,
            encoder_rows: rows.iter().map(|r| r.to_vec()).collect(),
            input_scale: 1.0,
            layer_masks: vec![None; params.layers.len()],
            eps: None,
            candidates: Candidates::All {
                users: rows.len(),
                items: params.n_items(),
            },
        }
    }
}

/// Positives first, then up to `neg` distinct uniformly drawn non-adopted
/// items per user.
fn sample_candidates(
    rows: &[&[u32]],
    n_items: usize,
    neg: Option<usize>,
    rng: &mut impl Rng,
) -> Candidates {
    let Some(n) = neg else {
        return Candidates::All {
            users: rows.len(),
            items: n_items,
        };
    };
    let lists: Vec<Vec<u32>> = rows
        .iter()
        .map(|row| {
            let mut list = row.to_vec();
            let free = n_items - row.len();
            if n >= free {
                list.extend((0..n_items as u32).filter(|i| row.binary_search(i).is_err()));
            } else {
                let mut taken = HashSet::with_capacity(n);
                while taken.len() < n {
                    let i = rng.random_range(0..n_items as u32);
                    if row.binary_search(&i).is_err() && taken.insert(i) {
                        list.push(i);
                    }
                }
            }
            list
        })
        .collect();
    let width = lists.iter().map(Vec::len).max().unwrap_or(0);
    let mut items = vec![0u32; lists.len() * width];
    let mut valid = Vec::with_capacity(lists.len());
    for (u, l) in lists.iter().enumerate() {
        items[u * width..u * width + l.len()].copy_from_slice(l);
        valid.push(l.len());
    }
    Candidates::Listed {
        width,
        items,
        valid,
    }
}

struct ParamVars {
    proto: Var,
    items: Var,
    items_unit: Var,
    context: Var,
    layers: Vec<(Var, Var)>,
}

fn register<F: Real>(g: &mut Graph<F>, p: &ModelParams<F>, trainable: bool) -> Result<ParamVars> {
    let leaf = |g: &mut Graph<F>, t: &Tensor<F>| {
        if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    };
    let proto = leaf(g, &p.prototypes)?;
    let items = leaf(g, &p.item_reps)?;
    let context = leaf(g, &p.context_reps)?;
    let layers = p
        .layers
        .iter()
        .map(|Linear { weight, bias }| Ok((leaf(g, weight)?, leaf(g, bias)?)))
        .collect::<Result<Vec<_>>>()?;
    let items_unit = g.normalize_rows(items)?;
    Ok(ParamVars {
        proto,
        items,
        items_unit,
        context,
        layers,
    })
}

/// Prototype logits and the (relaxed or one-hot) assignment.
fn assignment<F: Real>(
    g: &mut Graph<F>,
    pv: &ParamVars,
    p: &ModelParams<F>,
    temperature: f64,
    gumbel: Option<&Tensor<F>>,
) -> Result<(Var, Var)> {
    let raw = match p.similarity {
        Similarity::Cosine => {
            let pn = g.normalize_rows(pv.proto)?;
            g.matmul_t(pv.items_unit, pn)?
        }
        Similarity::Inner => g.matmul_t(pv.items, pv.proto)?,
    };
    let logits = g.scale(raw, F::of(1.0 / p.tau))?;
    let c = match gumbel {
        Some(noise) => {
            let nv = g.constant(noise.clone())?;
            let s = g.add(logits, nv)?;
            let s = g.scale(s, F::of(1.0 / temperature))?;
            g.softmax(s)?
        }
        None => {
            let hard = ConceptAssignment::hard_from_logits(g.value(logits));
            g.constant(hard.weights)?
        }
    };
    Ok((logits, c))
}

struct EncoderVars {
    mu: Var,
    sigma: Var,
    z: Var,
    log_ratio: Var,
}

fn encoder<F: Real>(
    g: &mut Graph<F>,
    pv: &ParamVars,
    c: Var,
    rows: &[&[u32]],
    noise: &Noise<F>,
    d: usize,
    sigma0: f64,
) -> Result<EncoderVars> {
    let m = g.value(pv.context).rows();
    let enc_rows = Arc::new(noise.encoder_rows.clone());
    let full_rows = Arc::new(rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
    let mut num = g.sparse_pool(enc_rows, c, pv.context)?;
    if noise.input_scale != 1.0 {
        num = g.scale(num, F::of(noise.input_scale))?;
    }
    let c2 = g.square(c)?;
    let ones = g.constant(Tensor::filled(m, 1, F::one()))?;
    let den = g.sparse_pool(full_rows, c2, ones)?;
    let den = g.add_scalar(den, F::of(DIV_EPS))?;
    let den = g.sqrt(den)?;
    let mut x = g.div(num, den)?;
    let n = pv.layers.len();
    for (l, &(w, b)) in pv.layers.iter().enumerate() {
        if let Some(mask) = &noise.layer_masks[l] {
            x = g.dropout(x, mask.clone())?;
        }
        x = g.matmul(x, w)?;
        x = g.add(x, b)?;
        if l + 1 < n {
            x = g.tanh(x)?;
        }
    }
    let a = g.slice_cols(x, 0, d)?;
    let b = g.slice_cols(x, d, 2 * d)?;
    let mu = g.normalize_rows(a)?;
    let b = g.clamp(b, F::of(-LOG_SIGMA_BOUND), F::of(LOG_SIGMA_BOUND))?;
    // ln(σ0/σ) = b/2
    let log_ratio = g.scale(b, F::of(0.5))?;
    let neg = g.scale(b, F::of(-0.5))?;
    let sigma = g.exp(neg)?;
    let sigma = g.scale(sigma, F::of(sigma0))?;
    let z = match &noise.eps {
        Some(eps) => {
            let e = g.constant(eps.clone())?;
            let spread = g.mul(e, sigma)?;
            g.add(mu, spread)?
        }
        None => mu,
    };
    Ok(EncoderVars {
        mu,
        sigma,
        z,
        log_ratio,
    })
}

/// Total `KL(N(μ, σ²) ‖ N(0, σ0²))` over all rows as a `1×1` node.
fn kl_node<F: Real>(g: &mut Graph<F>, enc: &EncoderVars, sigma0: f64) -> Result<Var> {
    let n = g.value(enc.mu).len() as f64;
    let lr = g.sum(enc.log_ratio)?;
    let s2 = g.square(enc.sigma)?;
    let s2 = g.sum(s2)?;
    let m2 = g.square(enc.mu)?;
    let m2 = g.sum(m2)?;
    let quad = g.add(s2, m2)?;
    let quad = g.scale(quad, F::of(1.0 / (2.0 * sigma0 * sigma0)))?;
    let kl = g.add(lr, quad)?;
    g.add_scalar(kl, F::of(-0.5 * n))
}

/// Log-probabilities over each user's candidates (`U × width`). The
/// inner-product ablation drops the normalisation of `z` and `h`.
fn decoder<F: Real>(
    g: &mut Graph<F>,
    pv: &ParamVars,
    z: Var,
    c: Var,
    cand: Arc<Candidates>,
    p: &ModelParams<F>,
) -> Result<Var> {
    let (k, tau) = (p.k(), p.tau);
    let (q, h) = match p.similarity {
        Similarity::Cosine => (g.normalize_rows(z)?, pv.items_unit),
        Similarity::Inner => (z, pv.items),
    };
    let scores = g.gather_dot(q, h, cand.clone(), k)?;
    let scores = g.scale(scores, F::of(1.0 / tau))?;
    let raw = g.mixture_lse(scores, c, cand.clone(), k)?;
    g.log_softmax(raw, Some(cand))
}

fn positive_picks(rows: &[&[u32]], cand: &Candidates) -> Vec<(usize, usize)> {
    let mut picks = Vec::new();
    for (u, row) in rows.iter().enumerate() {
        match cand {
            Candidates::All { .. } => picks.extend(row.iter().map(|&i| (u, i as usize))),
            Candidates::Listed { .. } => picks.extend((0..row.len()).map(|l| (u, l))),
        }
    }
    picks
}

#[derive(Clone, Debug)]
pub struct LossOutput<F: Real> {
    /// `mean_u(−Σ ln p + β·KL) + l2·‖θ‖²`
    pub loss: f64,
    /// Mean negative log-likelihood per user.
    pub nll: f64,
    /// Mean KL per user.
    pub kl: f64,
    pub grads: ModelParams<F>,
}

/// Minimisation loss and gradients for one minibatch of user rows.
pub fn loss<F: Real>(
    rows: &[&[u32]],
    params: &ModelParams<F>,
    hp: &HyperParams,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<LossOutput<F>> {
    let noise = Noise::sample(rows, params, hp, mode, rng);
    loss_with_noise(rows, params, hp, &noise)
}

/// [`loss`] with every random draw supplied.
pub fn loss_with_noise<F: Real>(
    rows: &[&[u32]],
    params: &ModelParams<F>,
    hp: &HyperParams,
    noise: &Noise<F>,
) -> Result<LossOutput<F>> {
    if rows.is_empty() || rows.iter().any(|r| r.is_empty()) {
        return Err(Error::Precondition("loss needs nonempty user rows".into()));
    }
    let d = params.d();
    let users = rows.len() as f64;
    let mut g = Graph::<F>::new();
    let pv = register(&mut g, params, true)?;
    let (_, c) = assignment(&mut g, &pv, params, hp.gumbel_temp, noise.gumbel.as_ref())?;
    let enc = encoder(&mut g, &pv, c, rows, noise, d, params.sigma0)?;
    let kl = kl_node(&mut g, &enc, params.sigma0)?;
    let cand = Arc::new(noise.candidates.clone());
    let logp = decoder(&mut g, &pv, enc.z, c, cand.clone(), params)?;
    let ll = g.pick_sum(logp, Arc::new(positive_picks(rows, &cand)))?;
    let nll = g.scale(ll, F::of(-1.0))?;
    let weighted_kl = g.scale(kl, F::of(hp.beta))?;
    let total = g.add(nll, weighted_kl)?;
    let mut total = g.scale(total, F::of(1.0 / users))?;
    if hp.l2_reg > 0.0 {
        let mut leaves = vec![pv.proto, pv.items, pv.context];
        leaves.extend(pv.layers.iter().flat_map(|&(w, b)| [w, b]));
        let mut acc: Option<Var> = None;
        for v in leaves {
            let sq = g.square(v)?;
            let s = g.sum(sq)?;
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
        let reg = g.scale(acc.expect("at least one tensor"), F::of(hp.l2_reg))?;
        total = g.add(total, reg)?;
    }
    g.backward(total)?;

    let mut grads = params.zeros_like();
    let mut leaves = vec![pv.proto, pv.items, pv.context];
    leaves.extend(pv.layers.iter().flat_map(|&(w, b)| [w, b]));
    for (dst, v) in grads.tensors_mut().into_iter().zip(leaves) {
        if let Some(gr) = g.grad(v) {
            *dst = gr.clone();
        }
    }
    Ok(LossOutput {
        loss: g.value(total).item().as_f64(),
        nll: g.value(nll).item().as_f64() / users,
        kl: g.value(kl).item().as_f64() / users,
        grads,
    })
}

fn split_rows<F: Real>(t: &Tensor<F>, users: usize, k: usize) -> Vec<Tensor<F>> {
    (0..users)
        .map(|u| Tensor::from_fn(k, t.cols(), |kk, j| t.get(u * k + kk, j)))
        .collect()
}

/// Posterior of each user given an assignment. In train mode dropout and
/// the reparameterised sample are drawn from `rng`.
pub fn encode<F: Real>(
    rows: &[&[u32]],
    assignment: &ConceptAssignment<F>,
    params: &ModelParams<F>,
    hp: &HyperParams,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Vec<UserPosterior<F>>> {
    if rows.iter().any(|r| r.is_empty()) {
        return Err(Error::Precondition("encode needs nonempty user rows".into()));
    }
    if assignment.weights.shape() != [params.n_items(), params.k()] {
        return Err(Error::Dimension("assignment does not match parameters".into()));
    }
    let noise = match mode {
        Mode::Train => Noise::sample(rows, params, hp, mode, rng),
        Mode::Infer => Noise::deterministic(rows, params),
    };
    let mut g = Graph::<F>::new();
    let pv = register(&mut g, params, false)?;
    let c = g.constant(assignment.weights.clone())?;
    let enc = encoder(&mut g, &pv, c, rows, &noise, params.d(), params.sigma0)?;
    let k = params.k();
    let mus = split_rows(g.value(enc.mu), rows.len(), k);
    let sigmas = split_rows(g.value(enc.sigma), rows.len(), k);
    let zs = split_rows(g.value(enc.z), rows.len(), k);
    Ok(mus
        .into_iter()
        .zip(sigmas)
        .zip(zs)
        .map(|((mu, sigma), z)| UserPosterior { mu, sigma, z })
        .collect())
}

/// Infer-mode assignment and posteriors for many users.
pub fn infer_posteriors<F: Real>(
    params: &ModelParams<F>,
    rows: &[&[u32]],
) -> Result<(ConceptAssignment<F>, Vec<UserPosterior<F>>)> {
    let c = ConceptAssignment::hard_from_logits(&super::prototype_logits(params));
    let hp = HyperParams::default();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(INFER_BATCH) {
        out.extend(encode(chunk, &c, params, &hp, Mode::Infer, &mut rng)?);
    }
    Ok((c, out))
}

/// Log-probabilities of `candidates` under the mixture decoder, normalised
/// over the candidate set.
pub fn decode_scores<F: Real>(
    post: &UserPosterior<F>,
    assignment: &ConceptAssignment<F>,
    params: &ModelParams<F>,
    candidates: &[u32],
) -> Result<Vec<F>> {
    if candidates.is_empty() {
        return Err(Error::Precondition("no candidate items".into()));
    }
    if let Some(&bad) = candidates.iter().find(|&&i| i as usize >= params.n_items()) {
        return Err(Error::Dimension(format!("candidate item {bad} out of range")));
    }
    let mut g = Graph::<F>::new();
    let pv = register(&mut g, params, false)?;
    let z = g.constant(post.z.clone())?;
    let c = g.constant(assignment.weights.clone())?;
    let cand = Arc::new(Candidates::Listed {
        width: candidates.len(),
        items: candidates.to_vec(),
        valid: vec![candidates.len()],
    });
    let logp = decoder(&mut g, &pv, z, c, cand, params)?;
    Ok(g.value(logp).row(0).to_vec())
}

/// Infer-mode log-probabilities over all items for each user bag (`U × M`).
pub fn score_users<F: Real>(params: &ModelParams<F>, rows: &[&[u32]]) -> Result<Tensor<F>> {
    let m = params.n_items();
    let mut data = Vec::with_capacity(rows.len() * m);
    for chunk in rows.chunks(INFER_BATCH) {
        if chunk.iter().any(|r| r.is_empty()) {
            return Err(Error::Precondition("cannot score an empty bag".into()));
        }
        let noise = Noise::deterministic(chunk, params);
        let mut g = Graph::<F>::new();
        let pv = register(&mut g, params, false)?;
        let (_, c) = assignment(&mut g, &pv, params, 1.0, None)?;
        let enc = encoder(&mut g, &pv, c, chunk, &noise, params.d(), params.sigma0)?;
        let cand = Arc::new(noise.candidates.clone());
        let logp = decoder(&mut g, &pv, enc.z, c, cand, params)?;
        data.extend_from_slice(g.value(logp).data());
    }
    Tensor::new(rows.len(), m, data)
}

/// `Σ_{k,j} [ln(σ0/σ) + (σ² + μ²)/(2σ0²) − 1/2]`
pub fn kl_gaussian<F: Real>(post: &UserPosterior<F>, sigma0: f64) -> f64 {
    post.mu
        .data()
        .iter()
        .zip(post.sigma.data())
        .map(|(m, s)| {
            let (m, s) = (m.as_f64(), s.as_f64());
            (sigma0 / s).ln() + (s * s + m * m) / (2.0 * sigma0 * sigma0) - 0.5
        })
        .sum()
}
