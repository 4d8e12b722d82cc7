//! Test-only oracles, written with plain loops and no shared code paths
//! with the library's tape.
#![allow(dead_code)]

pub mod beam;
pub mod bounds;
pub mod experiments;
pub mod ranking;

use macrid::model::{HyperParams, Mode, ModelParams, NegSamples, Noise, Similarity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use macrid::numerics::Candidates;

const EPS: f64 = 1e-8;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / ((norm(a) + EPS) * (norm(b) + EPS))
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Item-by-concept weights for the given noise.
pub fn naive_assignment(p: &ModelParams<f64>, hp: &HyperParams, noise: &Noise<f64>) -> Vec<Vec<f64>> {
    let (m, k) = (p.n_items(), p.k());
    (0..m)
        .map(|i| {
            let h = p.item_reps.row(i);
            let s: Vec<f64> = (0..k)
                .map(|c| {
                    let proto = p.prototypes.row(c);
                    let sim = match p.similarity {
                        Similarity::Cosine => cos(h, proto),
                        Similarity::Inner => dot(h, proto),
                    };
                    sim / p.tau
                })
                .collect();
            match &noise.gumbel {
                Some(g) => {
                    let t: Vec<f64> = (0..k).map(|c| (s[c] + g.get(i, c)) / hp.gumbel_temp).collect();
                    let z = lse(&t);
                    t.iter().map(|x| (x - z).exp()).collect()
                }
                None => {
                    let mut best = 0;
                    for c in 1..k {
                        if s[c] > s[best] {
                            best = c;
                        }
                    }
                    (0..k).map(|c| (c == best) as u8 as f64).collect()
                }
            }
        })
        .collect()
}

/// Batch loss computed directly from the definitions.
pub fn naive_loss(rows: &[&[u32]], p: &ModelParams<f64>, hp: &HyperParams, noise: &Noise<f64>) -> f64 {
    let (m, k, d) = (p.n_items(), p.k(), p.d());
    let c = naive_assignment(p, hp, noise);
    let mut total = 0.0;
    for (u, row) in rows.iter().enumerate() {
        let mut zs = Vec::with_capacity(k);
        let mut kl = 0.0;
        for kk in 0..k {
            let mut x = vec![0.0; d];
            for &i in &noise.encoder_rows[u] {
                for j in 0..d {
                    x[j] += c[i as usize][kk] * p.context_reps.get(i as usize, j) * noise.input_scale;
                }
            }
            let den = (row.iter().map(|&i| c[i as usize][kk].powi(2)).sum::<f64>() + EPS).sqrt();
            x.iter_mut().for_each(|v| *v /= den);
            let n_layers = p.layers.len();
            for (l, layer) in p.layers.iter().enumerate() {
                if let Some(mask) = &noise.layer_masks[l] {
                    for j in 0..x.len() {
                        x[j] *= mask.get(u * k + kk, j);
                    }
                }
                let out = layer.weight.cols();
                let mut y = vec![0.0; out];
                for o in 0..out {
                    y[o] = layer.bias.get(0, o);
                    for (j, xj) in x.iter().enumerate() {
                        y[o] += xj * layer.weight.get(j, o);
                    }
                    if l + 1 < n_layers {
                        y[o] = y[o].tanh();
                    }
                }
                x = y;
            }
            let a = &x[..d];
            let na = norm(a) + EPS;
            let mut z = vec![0.0; d];
            for j in 0..d {
                let mu = a[j] / na;
                let b = x[d + j].clamp(-80.0, 80.0);
                let sigma = p.sigma0 * (-b / 2.0).exp();
                kl += b / 2.0 + (sigma * sigma + mu * mu) / (2.0 * p.sigma0 * p.sigma0) - 0.5;
                z[j] = match &noise.eps {
                    Some(e) => mu + e.get(u * k + kk, j) * sigma,
                    None => mu,
                };
            }
            zs.push(z);
        }
        let cand: Vec<usize> = match &noise.candidates {
            Candidates::All { .. } => (0..m).collect(),
            listed => (0..listed.valid(u)).map(|l| listed.item(u, l)).collect(),
        };
        let raw: Vec<f64> = cand
            .iter()
            .map(|&i| {
                let terms: Vec<f64> = (0..k)
                    .filter(|&kk| c[i][kk] > 0.0)
                    .map(|kk| c[i][kk].ln() + match p.similarity {
                        Similarity::Cosine => cos(&zs[kk], p.item_reps.row(i)),
                        Similarity::Inner => dot(&zs[kk], p.item_reps.row(i)),
                    } / p.tau)
                    .collect();
                lse(&terms)
            })
            .collect();
        let z = lse(&raw);
        let positives: f64 = match &noise.candidates {
            Candidates::All { .. } => row.iter().map(|&i| raw[i as usize] - z).sum(),
            _ => (0..row.len()).map(|l| raw[l] - z).sum(),
        };
        total += -positives + hp.beta * kl;
    }
    total / rows.len() as f64 + hp.l2_reg * p.sum_squares()
}

/// Central difference of `naive_loss` along one parameter entry, using the
/// fourth-order five-point stencil with step `h`.
pub fn central_difference(
    rows: &[&[u32]],
    p: &ModelParams<f64>,
    hp: &HyperParams,
    noise: &Noise<f64>,
    tensor: usize,
    entry: usize,
    h: f64,
) -> f64 {
    let at = |offset: f64| {
        let mut q = p.clone();
        q.tensors_mut()[tensor].data_mut()[entry] += offset;
        naive_loss(rows, &q, hp, noise)
    };
    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
}

/// Largest relative disagreement between the analytic gradient and central
/// differences (step 1e-3) of `naive_loss`, over every parameter entry.
/// `floor` bounds the denominator away from zero for vanishing gradients.
pub fn max_gradient_error(
    rows: &[&[u32]],
    p: &ModelParams<f64>,
    hp: &HyperParams,
    noise: &Noise<f64>,
    floor: f64,
) -> f64 {
    let out = macrid::model::loss_with_noise(rows, p, hp, noise).expect("forward");
    let base = naive_loss(rows, p, hp, noise);
    assert!((out.loss - base).abs() <= 1e-9 * base.abs().max(1.0), "{} vs {}", out.loss, base);
    let mut worst: f64 = 0.0;
    for (t, grad) in out.grads.tensors().iter().enumerate() {
        for (e, &analytic) in grad.data().iter().enumerate() {
            let numeric = central_difference(rows, p, hp, noise, t, e, 1e-3);
            let scale = analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

/// Random small model, batch and noise draw for gradient checks.
pub fn gradient_case(seed: u64) -> (Vec<Vec<u32>>, ModelParams<f64>, HyperParams, Noise<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(4..=10);
    let k = rng.random_range(1..=3);
    let d = rng.random_range(2..=4);
    let hp = HyperParams {
        k,
        d,
        beta: rng.random_range(0.0..2.0),
        sigma0: rng.random_range(0.1..0.5),
        tau: rng.random_range(0.2..1.0),
        gumbel_temp: rng.random_range(0.5..2.0),
        l2_reg: if rng.random_bool(0.5) { 0.01 } else { 0.0 },
        dropout: if rng.random_bool(0.5) { 0.3 } else { 0.0 },
        hidden_layers: rng.random_range(0..=2),
        hidden_width: rng.random_range(2..=4),
        neg_samples: if rng.random_bool(0.3) { NegSamples::Sampled(2) } else { NegSamples::Full },
        ..Default::default()
    };
    let sim = if rng.random_bool(0.2) { Similarity::Inner } else { Similarity::Cosine };
    let mut p = ModelParams::<f64>::init(m, &hp, sim, &mut rng).unwrap();
    for layer in &mut p.layers {
        layer.bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    let users = rng.random_range(1..=3);
    let rows: Vec<Vec<u32>> = (0..users)
        .map(|_| {
            let n = rng.random_range(1..m);
            let mut r: Vec<u32> = rand::seq::index::sample(&mut rng, m, n)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            r.sort();
            r
        })
        .collect();
    let refs: Vec<&[u32]> = rows.iter().map(|r| r.as_slice()).collect();
    let noise = Noise::sample(&refs, &p, &hp, Mode::Train, &mut rng);
    (rows, p, hp, noise)
}

/// Worst relative gradient error over `configs` random cases.
pub fn gradient_sweep(configs: u64) -> f64 {
    (0..configs)
        .map(|seed| {
            let (rows, p, hp, noise) = gradient_case(seed);
            let refs: Vec<&[u32]> = rows.iter().map(|r| r.as_slice()).collect();
            max_gradient_error(&refs, &p, &hp, &noise, 1e-6)
        })
        .fold(0.0, f64::max)
}
