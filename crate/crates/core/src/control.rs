//! Controllable recommendation along one dimension of the item space: find
//! where a target dimension can move without leaving the anchor's concept,
//! cut that range into equal-count bins, and beam-search one item per bin.

use crate::model::ModelParams;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

pub const PROBE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlQuery {
    /// The vector being altered: an item representation or a user component.
    pub anchor: Vec<f32>,
    pub dim: usize,
    /// Trajectory length.
    pub b: usize,
    /// Weight of the pairwise coherence terms.
    pub gamma: f64,
    pub beam_width: usize,
    /// Temperature of the similarity terms; the model's τ when `None`.
    pub tau: Option<f64>,
}

impl ControlQuery {
    pub fn new(anchor: Vec<f32>, dim: usize) -> Self {
        Self {
            anchor,
            dim,
            b: 8,
            gamma: 1.0,
            beam_width: 8,
            tau: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlTrajectory {
    pub items: Vec<usize>,
    /// Target-dimension value of each returned item, non-decreasing.
    pub dim_values: Vec<f64>,
    /// `a_0..a_B`
    pub boundaries: Vec<f64>,
    pub objective: f64,
    pub concept: usize,
    /// Probed interval `(a, b)`.
    pub range: (f64, f64),
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / ((norm(a) + 1e-8) * (norm(b) + 1e-8))
}

fn row(t: &crate::numerics::Tensor, i: usize) -> Vec<f64> {
    t.row(i).iter().map(|&x| x as f64).collect()
}

/// Cosine-nearest prototype, lowest index on ties.
pub fn nearest_prototype(h: &[f64], params: &ModelParams) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for k in 0..params.k() {
        let s = cosine(h, &row(&params.prototypes, k));
        if s > best.1 {
            best = (k, s);
        }
    }
    best.0
}

/// Cosine-nearest prototype of every item.
pub fn item_concepts(params: &ModelParams) -> Vec<usize> {
    (0..params.n_items())
        .map(|i| nearest_prototype(&row(&params.item_reps, i), params))
        .collect()
}

/// Outer search bound for dimension `j`.
fn outer_bound(params: &ModelParams, h_star: &[f64], j: usize) -> f64 {
    let r = 10.0
        * (0..params.n_items())
            .map(|i| params.item_reps.get(i, j).abs() as f64)
            .fold(0.0, f64::max);
    let r = r.max(h_star[j].abs());
    if r == 0.0 {
        1.0
    } else {
        r
    }
}

/// The interval of values of `h_star[j]` (other coordinates fixed) over
/// which the nearest prototype stays the same, with that prototype.
pub fn probe_range(h_star: &[f64], j: usize, params: &ModelParams) -> Result<(f64, f64, usize)> {
    if h_star.len() != params.d() {
        return Err(Error::Dimension(format!(
            "anchor has {} entries, d = {}",
            h_star.len(),
            params.d()
        )));
    }
    if j >= params.d() {
        return Err(Error::Dimension(format!("dim {j} out of {}", params.d())));
    }
    let k_star = nearest_prototype(h_star, params);
    let r = outer_bound(params, h_star, j);
    let mut probe = h_star.to_vec();
    let mut stays = |t: f64| {
        probe[j] = t;
        nearest_prototype(&probe, params) == k_star
    };
    let mut endpoint = |outer: f64| {
        if stays(outer) {
            return outer;
        }
        let (mut inside, mut outside) = (h_star[j], outer);
        while (outside - inside).abs() > PROBE_TOLERANCE {
            let mid = 0.5 * (inside + outside);
            if stays(mid) {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        inside
    };
    let hi = endpoint(r);
    let lo = endpoint(-r);
    Ok((lo, hi, k_star))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    /// `a_0 = a, …, a_B = b`
    pub boundaries: Vec<f64>,
    /// Items of each bin, in ascending order of their target value.
    pub bins: Vec<Vec<usize>>,
}

/// Splits the concept items whose `h_{i,j}` lies strictly inside `(a, b)`
/// into `bins` groups of equal count (sizes differ by at most one).
pub fn partition(
    a: f64,
    b: f64,
    concept_items: &[usize],
    j: usize,
    bins: usize,
    params: &ModelParams,
) -> Result<Partition> {
    if bins == 0 {
        return Err(Error::Precondition("trajectory length must be positive".into()));
    }
    let value = |i: usize| params.item_reps.get(i, j) as f64;
    let mut eligible: Vec<usize> = concept_items
        .iter()
        .copied()
        .filter(|&i| a < value(i) && value(i) < b)
        .collect();
    if eligible.len() < bins {
        return Err(Error::InsufficientItems {
            eligible: eligible.len(),
            required: bins,
        });
    }
    eligible.sort_by(|&x, &y| value(x).total_cmp(&value(y)).then(x.cmp(&y)));
    let (n, base, extra) = (eligible.len(), eligible.len() / bins, eligible.len() % bins);
    let mut groups = Vec::with_capacity(bins);
    let mut start = 0;
    for t in 0..bins {
        let len = base + (t < extra) as usize;
        groups.push(eligible[start..start + len].to_vec());
        start += len;
    }
    debug_assert_eq!(start, n);
    let mut boundaries = vec![a];
    for t in 0..bins - 1 {
        let last = value(*groups[t].last().expect("nonempty bin"));
        let first = value(groups[t + 1][0]);
        boundaries.push(0.5 * (last + first));
    }
    boundaries.push(b);
    Ok(Partition {
        boundaries,
        bins: groups,
    })
}

/// Anchor and pairwise similarity terms of the trajectory objective.
pub struct Objective {
    anchor: Vec<f64>,
    pair: Vec<f64>,
    index: Vec<usize>,
    gamma: f64,
}

impl Objective {
    /// `candidates` are the only items that may appear in a trajectory.
    pub fn new(
        h_star: &[f64],
        j: usize,
        candidates: &[usize],
        params: &ModelParams,
        gamma: f64,
        tau: f64,
    ) -> Self {
        let drop_j = |v: Vec<f64>| -> Vec<f64> {
            v.into_iter()
                .enumerate()
                .filter(|&(c, _)| c != j)
                .map(|(_, x)| x)
                .collect()
        };
        let anchor_rest = drop_j(h_star.to_vec());
        let reps: Vec<Vec<f64>> = candidates
            .iter()
            .map(|&i| drop_j(row(&params.item_reps, i)))
            .collect();
        let n = candidates.len();
        let mut index = vec![usize::MAX; params.n_items()];
        for (p, &i) in candidates.iter().enumerate() {
            index[i] = p;
        }
        let anchor = reps
            .iter()
            .map(|h| (cosine(h, &anchor_rest) / tau).exp())
            .collect();
        let mut pair = vec![0.0; n * n];
        for x in 0..n {
            for y in x + 1..n {
                let s = (cosine(&reps[x], &reps[y]) / tau).exp();
                pair[x * n + y] = s;
                pair[y * n + x] = s;
            }
        }
        Self {
            anchor,
            pair,
            index,
            gamma,
        }
    }

    /// Objective gain of appending `item` to `chosen`.
    pub fn gain(&self, chosen: &[usize], item: usize) -> f64 {
        let n = self.anchor.len();
        let p = self.index[item];
        let pairs: f64 = chosen.iter().map(|&c| self.pair[p * n + self.index[c]]).sum();
        self.anchor[p] + self.gamma * pairs
    }

    pub fn value(&self, items: &[usize]) -> f64 {
        (0..items.len()).map(|t| self.gain(&items[..t], items[t])).sum()
    }
}

/// Keeps the `width` best partial trajectories after each bin; ties are
/// broken by the lexicographically smaller item sequence.
pub fn beam_search(bins: &[Vec<usize>], objective: &Objective, width: usize) -> (Vec<usize>, f64) {
    let mut beam: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for bin in bins {
        let mut next: Vec<(Vec<usize>, f64)> = Vec::with_capacity(beam.len() * bin.len());
        for (items, score) in &beam {
            for &i in bin {
                let s = score + objective.gain(items, i);
                let mut v = items.clone();
                v.push(i);
                next.push((v, s));
            }
        }
        next.sort_by(|x, y| {
            y.1.partial_cmp(&x.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| x.0.cmp(&y.0))
        });
        next.truncate(width.max(1));
        beam = next;
    }
    beam.into_iter().next().unwrap_or_default()
}

/// Probe, partition and beam search for one query.
pub fn select_trajectory(q: &ControlQuery, params: &ModelParams) -> Result<ControlTrajectory> {
    if q.b == 0 || q.beam_width == 0 || !(q.gamma >= 0.0) {
        return Err(Error::Precondition(
            "need b >= 1, beam width >= 1 and gamma >= 0".into(),
        ));
    }
    let tau = q.tau.unwrap_or(params.tau);
    if !(tau > 0.0) {
        return Err(Error::Precondition("tau must be positive".into()));
    }
    let h_star: Vec<f64> = q.anchor.iter().map(|&x| x as f64).collect();
    let (a, b, k_star) = probe_range(&h_star, q.dim, params)?;
    let concept_items: Vec<usize> = item_concepts(params)
        .into_iter()
        .enumerate()
        .filter(|&(_, k)| k == k_star)
        .map(|(i, _)| i)
        .collect();
    let part = partition(a, b, &concept_items, q.dim, q.b, params)?;
    let pool: Vec<usize> = part.bins.iter().flatten().copied().collect();
    let objective = Objective::new(&h_star, q.dim, &pool, params, q.gamma, tau);
    let (items, score) = beam_search(&part.bins, &objective, q.beam_width);
    let dim_values: Vec<f64> = items
        .iter()
        .map(|&i| params.item_reps.get(i, q.dim) as f64)
        .collect();
    debug_assert!(dim_values.windows(2).all(|w| w[0] <= w[1]));
    Ok(ControlTrajectory {
        items,
        dim_values,
        boundaries: part.boundaries,
        objective: score,
        concept: k_star,
        range: (a, b),
    })
}
