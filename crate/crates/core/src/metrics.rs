//! Ranking metrics under the fold-in protocol, the independence score of
//! posterior dimensions, and cluster diagnostics for concept assignments.

use crate::corpus::{SplitPart, SplitSpec};
use crate::model::{infer_posteriors, score_users, ConceptAssignment, ModelParams, UserPosterior};
use crate::numerics::{Real, Tensor};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const NDCG_CUTOFF: usize = 100;
const SCORE_BATCH: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: u32,
    pub ndcg100: f64,
    pub recall20: f64,
    pub recall50: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation over users divided by √n.
    pub std_err: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Self { mean, std_err: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Self {
            mean,
            std_err: (var / n as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub per_user: Vec<UserMetrics>,
    pub ndcg100: Summary,
    pub recall20: Summary,
    pub recall50: Summary,
    /// Users skipped for an empty fold-in or held-out set.
    pub skipped: usize,
}

impl RankingResult {
    pub fn from_users(per_user: Vec<UserMetrics>, skipped: usize) -> Self {
        let col = |f: fn(&UserMetrics) -> f64| Summary::of(&per_user.iter().map(f).collect::<Vec<_>>());
        Self {
            ndcg100: col(|m| m.ndcg100),
            recall20: col(|m| m.recall20),
            recall50: col(|m| m.recall50),
            per_user,
            skipped,
        }
    }
}

/// Descending score, then ascending index.
fn rank_order<F: Real>(scores: &[F], a: u32, b: u32) -> Ordering {
    scores[b as usize]
        .partial_cmp(&scores[a as usize])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// The `top` best items by score, skipping `exclude` (sorted), ties broken by
/// ascending item index.
pub fn top_items<F: Real>(scores: &[F], exclude: &[u32], top: usize) -> Vec<u32> {
    let mut pool: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    let top = top.min(pool.len());
    if top == 0 {
        return Vec::new();
    }
    if top < pool.len() {
        pool.select_nth_unstable_by(top - 1, |&a, &b| rank_order(scores, a, b));
        pool.truncate(top);
    }
    pool.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    pool
}

/// Truncated NDCG with unit gains; `relevant` must be sorted.
pub fn ndcg_at(ranked: &[u32], relevant: &[u32], k: usize) -> f64 {
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.binary_search(i).is_ok())
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..relevant.len().min(k))
        .map(|r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

/// Hits in the top `k` over `min(k, |relevant|)`; `relevant` must be sorted.
pub fn recall_at(ranked: &[u32], relevant: &[u32], k: usize) -> f64 {
    let denom = k.min(relevant.len());
    if denom == 0 {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| relevant.binary_search(i).is_ok())
        .count();
    hits as f64 / denom as f64
}

/// Metrics for one user from a full score row.
pub fn user_metrics<F: Real>(user: u32, scores: &[F], foldin: &[u32], heldout: &[u32]) -> UserMetrics {
    let ranked = top_items(scores, foldin, NDCG_CUTOFF);
    assert!(
        ranked.iter().all(|i| foldin.binary_search(i).is_err()),
        "fold-in item ranked"
    );
    UserMetrics {
        user,
        ndcg100: ndcg_at(&ranked, heldout, NDCG_CUTOFF),
        recall20: recall_at(&ranked, heldout, 20),
        recall50: recall_at(&ranked, heldout, 50),
    }
}

/// Encodes each held-out user from the fold-in items (infer mode), ranks all
/// other items and scores the ranking against the held-out items.
pub fn evaluate(params: &ModelParams, split: &SplitSpec, which: SplitPart) -> Result<RankingResult> {
    let users = split.part(which);
    if users.is_empty() {
        return Err(Error::InvalidSplit(format!("no {which:?} users")));
    }
    let (kept, skipped): (Vec<_>, Vec<_>) = users
        .iter()
        .partition(|u| !u.foldin.is_empty() && !u.heldout.is_empty());
    if !skipped.is_empty() {
        log::warn!("skipping {} users with an empty fold-in or held-out set", skipped.len());
    }
    let mut per_user = Vec::with_capacity(kept.len());
    for chunk in kept.chunks(SCORE_BATCH) {
        let rows: Vec<&[u32]> = chunk.iter().map(|u| u.foldin.as_slice()).collect();
        let scores = score_users(params, &rows)?;
        per_user.par_extend(chunk.par_iter().enumerate().map(|(r, u)| {
            user_metrics(u.user, scores.row(r), &u.foldin, &u.heldout)
        }));
    }
    Ok(RankingResult::from_users(per_user, skipped.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndependenceScore {
    pub value: f64,
    pub dim: usize,
    /// Row-major `dim × dim` Pearson correlations.
    pub corr: Vec<f64>,
}

/// `1 − (2/(d(d−1))) Σ_{i<j} |corr_{i,j}|` over the columns of `reps`.
/// Constant columns are treated as uncorrelated with everything.
pub fn independence(reps: &Tensor<f64>) -> Result<IndependenceScore> {
    let (n, d) = reps.shape().into();
    if d < 2 {
        return Err(Error::Dimension(format!("independence needs d >= 2, got {d}")));
    }
    if n < 2 {
        return Err(Error::Precondition("independence needs at least two rows".into()));
    }
    let mut centred = vec![vec![0.0; n]; d];
    let mut norms = vec![0.0; d];
    for (j, col) in centred.iter_mut().enumerate() {
        let mean = (0..n).map(|i| reps.get(i, j)).sum::<f64>() / n as f64;
        for (i, c) in col.iter_mut().enumerate() {
            *c = reps.get(i, j) - mean;
        }
        norms[j] = col.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    let constant = norms.iter().filter(|&&s| s == 0.0).count();
    if constant > 0 {
        log::warn!("{constant} constant columns treated as uncorrelated");
    }
    let mut corr = vec![0.0; d * d];
    let mut total = 0.0;
    for i in 0..d {
        corr[i * d + i] = 1.0;
        for j in i + 1..d {
            let r = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let cov: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
                (cov / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            corr[i * d + j] = r;
            corr[j * d + i] = r;
            total += r.abs();
        }
    }
    Ok(IndependenceScore {
        value: 1.0 - 2.0 * total / (d * (d - 1)) as f64,
        dim: d,
        corr,
    })
}

/// Which posterior means enter the independence score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RepresentationScope {
    /// All `K·d` dimensions of μ_u.
    #[default]
    Concatenated,
    /// The `d` dimensions of one concept's component.
    Concept(usize),
}

/// Infer-mode posterior means of each bag as rows.
pub fn posterior_means(
    params: &ModelParams,
    rows: &[&[u32]],
    scope: RepresentationScope,
) -> Result<Tensor<f64>> {
    let (k, d) = (params.k(), params.d());
    let (_, post) = infer_posteriors(params, rows)?;
    Ok(match scope {
        RepresentationScope::Concatenated => Tensor::from_fn(post.len(), k * d, |u, j| {
            post[u].mu.get(j / d, j % d) as f64
        }),
        RepresentationScope::Concept(c) => {
            if c >= k {
                return Err(Error::Dimension(format!("concept {c} of {k}")));
            }
            Tensor::from_fn(post.len(), d, |u, j| post[u].mu.get(c, j) as f64)
        }
    })
}

fn choose2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between the argmax concepts and ground-truth labels.
pub fn cluster_agreement<F: Real>(assignment: &ConceptAssignment<F>, labels: &[usize]) -> Result<f64> {
    let pred = assignment.concepts();
    if pred.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} labels for {} items",
            labels.len(),
            pred.len()
        )));
    }
    Ok(adjusted_rand_index(&pred, labels))
}

pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0usize; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let index: f64 = table.iter().map(|&c| choose2(c)).sum();
    let rows: f64 = (0..ka).map(|x| choose2(table[x * kb..(x + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb)
        .map(|y| choose2((0..ka).map(|x| table[x * kb + y]).sum()))
        .sum();
    let expected = rows * cols / choose2(n).max(1.0);
    let max = (rows + cols) / 2.0;
    if max == expected {
        // both partitions trivial in the same way
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Per-concept confidence `Σ_{i ∈ row} c_{i,k}`.
pub fn confidences<F: Real>(assignment: &ConceptAssignment<F>, row: &[u32]) -> Vec<f64> {
    let mut out = vec![0.0; assignment.k()];
    for &i in row {
        for (k, c) in assignment.weights.row(i as usize).iter().enumerate() {
            out[k] += c.as_f64();
        }
    }
    out
}

/// A user's components for export.
pub struct ExportUser<'a> {
    pub id: &'a str,
    pub posterior: &'a UserPosterior,
    pub confidence: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingExport {
    /// `(id, concept, h_i)`
    pub items: Vec<(String, usize, Vec<f32>)>,
    /// `(id, k, confidence, μ_u^(k))`
    pub users: Vec<(String, usize, f64, Vec<f32>)>,
}

fn header(w: &mut impl Write, lead: &[&str], d: usize) -> std::io::Result<()> {
    let dims: Vec<String> = (0..d).map(|j| format!("dim{j}")).collect();
    writeln!(w, "{}\t{}", lead.join("\t"), dims.join("\t"))
}

fn values(v: &[f32]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("\t")
}

/// Tab-separated item rows (`item, concept, dims…`) followed by user
/// component rows (`user, concept, confidence, dims…`), each section led by
/// its own header line.
pub fn export_embeddings(
    path: &Path,
    params: &ModelParams,
    assignment: &ConceptAssignment,
    item_ids: &[String],
    users: &[ExportUser<'_>],
) -> Result<()> {
    if item_ids.len() != params.n_items() {
        return Err(Error::Dimension("item id count differs from M".into()));
    }
    let d = params.d();
    let mut w = BufWriter::new(File::create(path)?);
    header(&mut w, &["item", "concept"], d)?;
    for (i, c) in assignment.concepts().into_iter().enumerate() {
        writeln!(w, "{}\t{c}\t{}", item_ids[i], values(params.item_reps.row(i)))?;
    }
    if !users.is_empty() {
        header(&mut w, &["user", "concept", "confidence"], d)?;
        for u in users {
            for k in 0..params.k() {
                writeln!(
                    w,
                    "{}\t{k}\t{}\t{}",
                    u.id,
                    u.confidence[k],
                    values(u.posterior.mu.row(k))
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingExport> {
    let mut out = EmbeddingExport::default();
    let mut in_users = false;
    let bad = |line: usize, m: &str| Error::Parse {
        line,
        message: m.into(),
    };
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split('\t').collect();
        match f[0] {
            "item" if n == 0 => continue,
            "user" => {
                in_users = true;
                continue;
            }
            _ => {}
        }
        let num = |s: &str| s.parse::<f32>().map_err(|_| bad(n + 1, "bad number"));
        let concept = f
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(n + 1, "bad concept"))?;
        if in_users {
            let conf = f
                .get(2)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(n + 1, "bad confidence"))?;
            let v = f[3..].iter().map(|s| num(s)).collect::<Result<_>>()?;
            out.users.push((f[0].to_string(), concept, conf, v));
        } else {
            let v = f[2..].iter().map(|s| num(s)).collect::<Result<_>>()?;
            out.items.push((f[0].to_string(), concept, v));
        }
    }
    Ok(out)
}
