//! Exhaustive trajectory enumeration and a direct objective evaluation.

use macrid::control::{select_trajectory, ControlQuery, ControlTrajectory};
use macrid::Error;
use macrid::model::{HyperParams, ModelParams, Similarity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / ((na + 1e-8) * (nb + 1e-8))
}

fn without(v: &[f32], j: usize) -> Vec<f64> {
    v.iter()
        .enumerate()
        .filter(|&(c, _)| c != j)
        .map(|(_, &x)| x as f64)
        .collect()
}

/// Random cosine model with `items` items and an anchor copied from one
/// of them.
pub fn control_case(seed: u64, items: usize, k: usize, d: usize, b: usize) -> (ModelParams, ControlQuery) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hp = HyperParams {
        k,
        d,
        tau: rng.random_range(0.2..1.0),
        ..Default::default()
    };
    let params = ModelParams::init(items, &hp, Similarity::Cosine, &mut rng).unwrap();
    let anchor = params.item_reps.row(rng.random_range(0..items)).to_vec();
    let mut q = ControlQuery::new(anchor, rng.random_range(0..d));
    q.b = b;
    q.gamma = rng.random_range(0.0..2.0);
    (params, q)
}

/// Cosine-argmax concept of every item, lowest index on ties.
pub fn naive_concepts(params: &ModelParams) -> Vec<usize> {
    (0..params.n_items())
        .map(|i| {
            let h: Vec<f64> = params.item_reps.row(i).iter().map(|&x| x as f64).collect();
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for k in 0..params.k() {
                let m: Vec<f64> = params.prototypes.row(k).iter().map(|&x| x as f64).collect();
                let s = cosine(&h, &m);
                if s > best_sim {
                    best = k;
                    best_sim = s;
                }
            }
            best
        })
        .collect()
}

/// Items of the trajectory's concept falling in each subrange.
pub fn bins_from_boundaries(params: &ModelParams, traj: &ControlTrajectory, j: usize) -> Vec<Vec<usize>> {
    let concepts = naive_concepts(params);
    let a = &traj.boundaries;
    (0..a.len() - 1)
        .map(|t| {
            (0..params.n_items())
                .filter(|&i| concepts[i] == traj.concept)
                .filter(|&i| {
                    let v = params.item_reps.get(i, j) as f64;
                    let lower = if t == 0 { a[t] < v } else { a[t] <= v };
                    lower && v < a[t + 1]
                })
                .collect()
        })
        .collect()
}

pub fn naive_objective(params: &ModelParams, q: &ControlQuery, items: &[usize]) -> f64 {
    let tau = q.tau.unwrap_or(params.tau);
    let anchor = without(&q.anchor, q.dim);
    let reps: Vec<Vec<f64>> = items
        .iter()
        .map(|&i| without(params.item_reps.row(i), q.dim))
        .collect();
    let mut total = 0.0;
    for (t, h) in reps.iter().enumerate() {
        total += (cosine(h, &anchor) / tau).exp();
        for other in &reps[t + 1..] {
            total += q.gamma * (cosine(h, other) / tau).exp();
        }
    }
    total
}

/// Best tuple over the cartesian product of `bins`.
pub fn brute_force(params: &ModelParams, q: &ControlQuery, bins: &[Vec<usize>]) -> (Vec<usize>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut choice = vec![0usize; bins.len()];
    if bins.iter().any(Vec::is_empty) {
        return best;
    }
    loop {
        let items: Vec<usize> = choice.iter().zip(bins).map(|(&c, b)| b[c]).collect();
        let v = naive_objective(params, q, &items);
        if v > best.1 {
            best = (items, v);
        }
        let mut t = bins.len();
        loop {
            if t == 0 {
                return best;
            }
            t -= 1;
            choice[t] += 1;
            if choice[t] < bins[t].len() {
                break;
            }
            choice[t] = 0;
        }
    }
}

/// Default model temperature and default query settings (`B = 8`, `γ = 1`,
/// beam width 8) over a random catalogue small enough to enumerate.
pub fn default_query_case(seed: u64) -> (ModelParams, ControlQuery) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hp = HyperParams {
        k: 2,
        d: 4,
        ..Default::default()
    };
    let params = ModelParams::init(40, &hp, Similarity::Cosine, &mut rng).unwrap();
    let anchor = params.item_reps.row(rng.random_range(0..40)).to_vec();
    let q = ControlQuery::new(anchor, rng.random_range(0..4));
    (params, q)
}

/// Runs `instances` small queries (`M ≤ 30`, `B ≤ 3`) with a beam wide
/// enough to keep every partial tuple and checks the result against
/// enumeration. Returns how many instances had enough items to compare.
pub fn exhaustive_beam_agreement(instances: u64) -> Result<usize, String> {
    let mut checked = 0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(6..=30);
        let b = rng.random_range(1..=3);
        let (params, mut q) = control_case(seed, m, 2, 3, b);
        q.beam_width = m.pow(b as u32);
        let traj = match select_trajectory(&q, &params) {
            Ok(t) => t,
            Err(Error::InsufficientItems { .. }) => continue,
            Err(e) => return Err(format!("seed {seed}: {e}")),
        };
        let bins = bins_from_boundaries(&params, &traj, q.dim);
        let (best, value) = brute_force(&params, &q, &bins);
        if traj.items != best || (traj.objective - value).abs() > 1e-9 * value {
            return Err(format!(
                "seed {seed}: beam {:?} ({}) vs enumeration {best:?} ({value})",
                traj.items, traj.objective
            ));
        }
        checked += 1;
    }
    Ok(checked)
}

/// Ratio of the default beam's objective to the enumerated optimum over
/// `instances` default queries.
pub fn default_beam_ratios(instances: usize) -> Vec<f64> {
    let mut ratios = Vec::with_capacity(instances);
    let mut seed = 0;
    while ratios.len() < instances {
        seed += 1;
        let (params, q) = default_query_case(seed);
        let Ok(traj) = select_trajectory(&q, &params) else { continue };
        let bins = bins_from_boundaries(&params, &traj, q.dim);
        if bins.iter().map(Vec::len).product::<usize>() > 50_000 {
            continue;
        }
        let (_, best) = brute_force(&params, &q, &bins);
        let direct = naive_objective(&params, &q, &traj.items);
        assert!((direct - traj.objective).abs() < 1e-9 * best, "objective mismatch");
        ratios.push(traj.objective / best);
    }
    ratios
}
