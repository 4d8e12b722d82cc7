//! Minibatch training with Adam, early stopping on validation NDCG@100,
//! optional shrinking of K, and random hyper-parameter search.

use crate::corpus::{minibatches, InteractionMatrix, SplitPart, SplitSpec};
use crate::metrics::evaluate;
use crate::model::{loss, HyperParams, Mode, ModelParams, NegSamples, Similarity};
use crate::numerics::{softmax_rows_in_place, AdamConfig, AdamState};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::time::Instant;

/// Stream offset separating training noise from other seeded draws.
const NOISE_STREAM: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hp: HyperParams,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub patience: usize,
    /// Where the best checkpoint is written after each improvement.
    pub checkpoint_dir: Option<PathBuf>,
    pub similarity: Similarity,
    /// JS-divergence threshold for shrinking K after each epoch.
    pub adaptive_k: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hp: HyperParams::default(),
            epochs: 200,
            batch_size: 256,
            seed: 0,
            patience: 20,
            checkpoint_dir: None,
            similarity: Similarity::Cosine,
            adaptive_k: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Precondition(
                "epochs, patience and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss.
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    /// `None` when the split has no validation users.
    pub val_ndcg: Option<f64>,
    pub k: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_ndcg: Option<f64>,
    pub n_params: usize,
    pub seconds: f64,
}

impl TrainReport {
    /// The report with every wall-clock field zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.seconds = 0.0;
        r.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        r
    }
}

/// `(parameter count, 2·M·d)`: the model is meant to stay near the budget.
pub fn parameter_budget(params: &ModelParams) -> (usize, usize) {
    (params.n_params(), 2 * params.n_items() * params.d())
}

/// Trains on the split's training users and returns the parameters with the
/// best validation NDCG@100 (the last epoch's without validation users).
pub fn train(
    corpus: &InteractionMatrix,
    split: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    train_with(corpus, split, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    corpus: &InteractionMatrix,
    split: &SplitSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if split.train_users.is_empty() {
        return Err(Error::InvalidSplit("no training users".into()));
    }
    let start = Instant::now();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(corpus.n_items(), &cfg.hp, cfg.similarity, &mut init_rng)?;
    let (n_params, budget) = parameter_budget(&params);
    log::info!("{n_params} parameters (2Md = {budget})");
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.hp.lr,
        ..Default::default()
    });
    let batches = minibatches(&split.train_users, cfg.batch_size, cfg.seed);
    let validate = !split.validation.is_empty();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut records = Vec::new();

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(NOISE_STREAM + epoch as u64);
        let (mut sum_loss, mut sum_nll, mut sum_kl, mut n) = (0.0, 0.0, 0.0, 0usize);
        for (step, batch) in batches.epoch(epoch as u64).iter().enumerate() {
            let rows: Vec<&[u32]> = batch.iter().map(|&u| corpus.row(u as usize)).collect();
            let wrap = |e: Error| Error::Training {
                epoch: epoch + 1,
                step: step + 1,
                source: Box::new(e),
            };
            let out = loss(&rows, &params, &cfg.hp, Mode::Train, &mut rng).map_err(wrap)?;
            let grads = out.grads.tensors();
            adam.update(&mut params.tensors_mut(), &grads).map_err(wrap)?;
            if !params.tensors().iter().all(|t| t.is_finite()) {
                return Err(wrap(Error::Numeric { node: 0, op: "adam" }));
            }
            sum_loss += out.loss * rows.len() as f64;
            sum_nll += out.nll * rows.len() as f64;
            sum_kl += out.kl * rows.len() as f64;
            n += rows.len();
        }
        if let Some(threshold) = cfg.adaptive_k {
            if params.k() >= 2 {
                let (shrunk, removed) = adaptive_k(&params, threshold)?;
                if let Some(k) = removed {
                    log::info!("epoch {}: removed concept {k}, K = {}", epoch + 1, shrunk.k());
                    params = shrunk;
                    adam.remove_row(0, k);
                }
            }
        }
        let val_ndcg = if validate {
            Some(evaluate(&params, split, SplitPart::Validation)?.ndcg100.mean)
        } else {
            None
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: sum_loss / n as f64,
            nll: sum_nll / n as f64,
            kl: sum_kl / n as f64,
            val_ndcg,
            k: params.k(),
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        records.push(record);
        let score = val_ndcg.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((s, _, _)) => !validate || score > *s,
        };
        if improved {
            best = Some((score, epoch + 1, params.clone()));
            if let Some(dir) = &cfg.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                let items: Vec<String> = corpus.item_vocab().to_vec();
                crate::model::save_checkpoint(&dir.join("best.mcrd"), &params, &items)?;
            }
        } else if validate {
            let since = epoch + 1 - best.as_ref().map_or(0, |b| b.1);
            if since >= cfg.patience {
                log::info!("early stop after epoch {}", epoch + 1);
                break;
            }
        }
    }
    let (score, best_epoch, params) = best.expect("at least one epoch");
    Ok((
        params,
        TrainReport {
            epochs: records,
            best_epoch,
            best_ndcg: validate.then_some(score),
            n_params,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Jensen–Shannon divergence in nats.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

/// Per-concept item distributions `p(i | k)` from the softmaxed prototype
/// logits, one row per concept.
pub fn concept_item_distributions(params: &ModelParams) -> Vec<Vec<f64>> {
    let logits = crate::model::prototype_logits(&params.cast::<f64>());
    let (m, k) = (logits.rows(), logits.cols());
    let mut cols = vec![vec![0.0; m]; k];
    for i in 0..m {
        let mut row = logits.row(i).to_vec();
        softmax_rows_in_place(&mut row);
        for (c, p) in row.into_iter().enumerate() {
            cols[c][i] = p;
        }
    }
    for col in &mut cols {
        let total: f64 = col.iter().sum();
        col.iter_mut().for_each(|p| *p /= total);
    }
    cols
}

/// Removes the higher-indexed prototype of the closest pair when their item
/// distributions are within `threshold` JS divergence. Returns the possibly
/// reduced parameters and the removed index.
pub fn adaptive_k(params: &ModelParams, threshold: f64) -> Result<(ModelParams, Option<usize>)> {
    if params.k() < 2 {
        return Err(Error::Precondition("adaptive K needs K >= 2".into()));
    }
    let dist = concept_item_distributions(params);
    let mut closest = (f64::INFINITY, 0, 0);
    for a in 0..dist.len() {
        for b in a + 1..dist.len() {
            let js = js_divergence(&dist[a], &dist[b]);
            if js < closest.0 {
                closest = (js, a, b);
            }
        }
    }
    let mut out = params.clone();
    if closest.0 < threshold {
        out.remove_prototype(closest.2);
        return Ok((out, Some(closest.2)));
    }
    Ok((out, None))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial: usize,
    pub config: TrainConfig,
    /// Best validation NDCG@100; `None` when training diverged.
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: TrainConfig,
    pub best_report: TrainReport,
    pub trials: Vec<Trial>,
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..=hi.ln()).exp()
}

/// Draws one configuration from the search ranges; `d`, epochs, batch size
/// and the like come from `base`.
pub fn sample_config(base: &TrainConfig, rng: &mut impl Rng) -> TrainConfig {
    let keep: f64 = rng.random_range(0.05..=1.0);
    let hp = HyperParams {
        sigma0: rng.random_range(0.075..=0.5),
        beta: rng.random_range(0.0..=100.0),
        k: rng.random_range(1..=20),
        lr: log_uniform(rng, 1e-8, 1.0),
        l2_reg: log_uniform(rng, 1e-12, 1.0),
        dropout: (1.0 - keep).clamp(0.0, 0.95),
        hidden_layers: rng.random_range(0..=3),
        hidden_width: 50 * rng.random_range(1..=14),
        ..base.hp.clone()
    };
    TrainConfig { hp, ..base.clone() }
}

/// Trains `n_trials` sampled configurations and keeps the one with the best
/// validation NDCG@100. Diverged trials are recorded and skipped.
pub fn random_search(
    corpus: &InteractionMatrix,
    split: &SplitSpec,
    base: &TrainConfig,
    n_trials: usize,
    seed: u64,
    mut on_trial: impl FnMut(&Trial),
) -> Result<SearchResult> {
    if n_trials == 0 {
        return Err(Error::Precondition("need at least one trial".into()));
    }
    if split.validation.is_empty() {
        return Err(Error::InvalidSplit("search needs validation users".into()));
    }
    let mut trials = Vec::with_capacity(n_trials);
    let mut best: Option<(f64, TrainConfig, TrainReport)> = None;
    for t in 0..n_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let mut cfg = sample_config(base, &mut rng);
        cfg.hp.k = cfg.hp.k.min(corpus.n_items());
        let trial = match train(corpus, split, &cfg) {
            Ok((_, report)) => {
                let score = report.best_ndcg.unwrap_or(f64::NEG_INFINITY);
                if best.as_ref().is_none_or(|b| score > b.0) {
                    best = Some((score, cfg.clone(), report));
                }
                Trial { trial: t, config: cfg, score: Some(score), error: None }
            }
            Err(e) if e.is_numeric() => Trial {
                trial: t,
                config: cfg,
                score: None,
                error: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        };
        on_trial(&trial);
        trials.push(trial);
    }
    let (_, best, best_report) = best.ok_or_else(|| Error::Numeric { node: 0, op: "search" })?;
    Ok(SearchResult { best, best_report, trials })
}

/// Number of negatives actually used for a catalogue of `m` items.
pub fn effective_negatives(neg: NegSamples, m: usize) -> String {
    match neg.resolve(m) {
        None => "full softmax".into(),
        Some(n) => format!("{n} sampled"),
    }
}
