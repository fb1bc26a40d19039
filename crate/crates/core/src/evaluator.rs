//! Ranking percentile, held-out dialog evaluation, the attribute-matching
//! baseline and the disclosure-mode comparison.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dialog_model::ModelParameters;
use crate::error::{Error, Result};
use crate::feedback_sim::DisclosureMode;
use crate::gallery::Gallery;
use crate::retriever::{l2_distance, FeatureMatrix};
use crate::rng::SeedStream;
use crate::trainer::{eval_episode_seeds, run_dialog, train, triplet_terms, Checkpoint, Policy, Rollout, TrainConfig, TrainError};

/// `100·(N − r)/(N − 1)` for a 1-based rank `r`.
pub fn percentile_from_rank(n: usize, rank: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::UndefinedMetric(n));
    }
    if rank == 0 || rank > n {
        return Err(Error::Index { index: rank, len: n });
    }
    Ok(100.0 * (n - rank) as f64 / (n - 1) as f64)
}

/// Percentile of `target` when the gallery is ranked by distance to
/// `query`. Records at exactly the target's distance rank above it.
pub fn ranking_percentile(query: &[f64], features: FeatureMatrix<'_>, target: usize) -> Result<f64> {
    let n = features.rows;
    if n < 2 {
        return Err(Error::UndefinedMetric(n));
    }
    if target >= n {
        return Err(Error::Index { index: target, len: n });
    }
    crate::error::check_len("query", features.dim, query.len())?;
    let dt = l2_distance(query, features.row(target));
    let ahead = (0..n)
        .filter(|&i| i != target && l2_distance(query, features.row(i)) <= dt)
        .count();
    percentile_from_rank(n, 1 + ahead)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: DisclosureMode,
    pub episodes: usize,
    pub seed: u64,
    /// Mean target percentile after each round; dialogs that already found
    /// the target count as 100.
    pub percentile_by_round: Vec<f64>,
    /// Mean per-round triplet term over dialogs that reached the round.
    pub loss_by_round: Vec<f64>,
    /// Dialogs that reached each round without a match.
    pub active_by_round: Vec<usize>,
    /// Fraction of dialogs in which the witness recognised a candidate.
    pub match_rate: f64,
    pub config: TrainConfig,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Test-time dialog number `episode`: greedy retrieval, seeded from `seed`.
pub fn eval_episode(p: &ModelParameters, test: &Gallery, cfg: &TrainConfig, seed: u64, episode: usize) -> Result<Rollout> {
    let policy = Policy::Greedy {
        exclude_shown: !cfg.allow_repeats,
    };
    run_dialog(p, test, &cfg.dialog(policy), eval_episode_seeds(seed, episode), None, true)
}

/// Run `episodes` greedy dialogs on `test` and average per round.
pub fn evaluate_params(p: &ModelParameters, test: &Gallery, cfg: &TrainConfig, episodes: usize, seed: u64) -> Result<EvalReport> {
    cfg.validate()?;
    if test.len() < 2 {
        return Err(Error::UndefinedMetric(test.len()));
    }
    let rounds = cfg.rounds;
    // Per episode: percentile and loss (None once matched) by round, and whether it matched.
    type EpisodeRow = (Vec<f64>, Vec<Option<f64>>, bool);
    let per_episode: Vec<Result<EpisodeRow>> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let r = eval_episode(p, test, cfg, seed, i)?;
            let s = r.trace.representations();
            let losses = triplet_terms(&s, &r.inputs.positive, &r.inputs.negatives, cfg.margin)?;
            let mut pct = Vec::with_capacity(rounds);
            let mut loss = Vec::with_capacity(rounds);
            for t in 0..rounds {
                match r.transcript.rounds.get(t) {
                    Some(round) if !round.matched => {
                        pct.push(round.percentile.expect("recorded"));
                        loss.push(losses.get(t).copied());
                    }
                    _ => {
                        pct.push(100.0);
                        loss.push(None);
                    }
                }
            }
            Ok((pct, loss, r.transcript.matched))
        })
        .collect();

    let mut pct_sum = vec![0.0; rounds];
    let mut loss_sum = vec![0.0; rounds];
    let mut active = vec![0usize; rounds];
    let mut matched = 0usize;
    for r in per_episode {
        let (pct, loss, m) = r?;
        for t in 0..rounds {
            pct_sum[t] += pct[t];
            if let Some(l) = loss[t] {
                loss_sum[t] += l;
                active[t] += 1;
            }
        }
        matched += usize::from(m);
    }
    let denom = episodes.max(1) as f64;
    Ok(EvalReport {
        mode: cfg.mode,
        episodes,
        seed,
        percentile_by_round: pct_sum.iter().map(|s| s / denom).collect(),
        loss_by_round: loss_sum
            .iter()
            .zip(&active)
            .map(|(s, &a)| if a == 0 { 0.0 } else { s / a as f64 })
            .collect(),
        active_by_round: active,
        match_rate: matched as f64 / denom,
        config: cfg.clone(),
    })
}

/// Evaluate a checkpoint, optionally under a different disclosure mode.
pub fn eval_rounds(
    ckpt: &Checkpoint,
    test: &Gallery,
    episodes: usize,
    mode: Option<DisclosureMode>,
    seed: u64,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Config("test gallery is empty".into()));
    }
    let mut cfg = ckpt.config.clone();
    if let Some(m) = mode {
        cfg.mode = m;
    }
    evaluate_params(&ckpt.params, test, &cfg, episodes, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineBounds {
    pub upper: f64,
    pub lower: f64,
    pub expectation: f64,
}

fn pack_signs(attrs: &[i8]) -> Vec<u64> {
    let mut out = vec![0u64; attrs.len().div_ceil(64)];
    for (i, &a) in attrs.iter().enumerate() {
        if a > 0 {
            out[i / 64] |= 1 << (i % 64);
        }
    }
    out
}

fn matches(a: &[u64], b: &[u64], attrs: usize) -> usize {
    let differ: u32 = a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum();
    attrs - differ as usize
}

/// Bounds from a tie block: `head` and `tail` are the best and worst 1-based
/// ranks the target could occupy.
pub fn bounds_from_block(n: usize, head: usize, tail: usize) -> Result<BaselineBounds> {
    let upper = percentile_from_rank(n, head)?;
    let lower = percentile_from_rank(n, tail)?;
    Ok(BaselineBounds {
        upper,
        lower,
        expectation: (upper + lower) / 2.0,
    })
}

fn noisy_signature(g: &Gallery, target: usize, flip_prob: f64, seed: SeedStream) -> Vec<i8> {
    let mut sig = g.attributes(target).to_vec();
    if flip_prob > 0.0 {
        let mut rng = seed.rng();
        for a in &mut sig {
            if rng.random::<f64>() < flip_prob {
                *a = -*a;
            }
        }
    }
    sig
}

fn check_flip(flip_prob: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::Config(format!("flip probability must lie in [0, 1], got {flip_prob}")));
    }
    Ok(())
}

fn bounds_with_packed(g: &Gallery, packed: &[Vec<u64>], target: usize, sig: &[i8]) -> Result<BaselineBounds> {
    let sig = pack_signs(sig);
    let attrs = g.attrs();
    let t = matches(&packed[target], &sig, attrs);
    let mut better = 0;
    let mut at_least = 0;
    for row in packed {
        let s = matches(row, &sig, attrs);
        better += usize::from(s > t);
        at_least += usize::from(s >= t);
    }
    bounds_from_block(g.len(), 1 + better, at_least)
}

/// Rank every record by how many attributes it shares with the target's
/// (optionally noise-flipped) signature.
pub fn baseline_bounds(g: &Gallery, target: usize, flip_prob: f64, seed: u64) -> Result<BaselineBounds> {
    check_flip(flip_prob)?;
    if g.len() < 2 {
        return Err(Error::UndefinedMetric(g.len()));
    }
    g.get(target)?;
    let packed: Vec<Vec<u64>> = (0..g.len()).map(|i| pack_signs(g.attributes(i))).collect();
    let sig = noisy_signature(g, target, flip_prob, SeedStream::new(seed).child("flip").index(target as u64));
    bounds_with_packed(g, &packed, target, &sig)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub targets: usize,
    pub flip_prob: f64,
    pub seed: u64,
    pub upper: f64,
    pub lower: f64,
    pub expectation: f64,
}

/// Mean bounds over every record (or the first `limit`) as target.
pub fn baseline_report(g: &Gallery, flip_prob: f64, seed: u64, limit: Option<usize>) -> Result<BaselineReport> {
    check_flip(flip_prob)?;
    if g.len() < 2 {
        return Err(Error::UndefinedMetric(g.len()));
    }
    let packed: Vec<Vec<u64>> = (0..g.len()).map(|i| pack_signs(g.attributes(i))).collect();
    let targets = limit.unwrap_or(g.len()).min(g.len());
    let root = SeedStream::new(seed).child("flip");
    let all: Vec<BaselineBounds> = (0..targets)
        .into_par_iter()
        .map(|t| {
            let sig = noisy_signature(g, t, flip_prob, root.index(t as u64));
            bounds_with_packed(g, &packed, t, &sig)
        })
        .collect::<Result<_>>()?;
    let avg = |f: fn(&BaselineBounds) -> f64| mean(&all.iter().map(f).collect::<Vec<_>>());
    Ok(BaselineReport {
        targets,
        flip_prob,
        seed,
        upper: avg(|b| b.upper),
        lower: avg(|b| b.lower),
        expectation: avg(|b| b.expectation),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: DisclosureMode,
    pub percentile_mean: Vec<f64>,
    pub percentile_std: Vec<f64>,
    pub loss_mean: Vec<f64>,
    pub loss_std: Vec<f64>,
    pub runs: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub seeds: Vec<u64>,
    pub modes: Vec<ModeSummary>,
}

impl ComparisonTable {
    pub fn mode(&self, mode: DisclosureMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

fn column_stats(runs: &[EvalReport], pick: fn(&EvalReport) -> &Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let rounds = runs.first().map_or(0, |r| pick(r).len());
    (0..rounds)
        .map(|t| {
            let col: Vec<f64> = runs.iter().map(|r| pick(r)[t]).collect();
            (mean(&col), std_dev(&col))
        })
        .unzip()
}

/// Train and evaluate every disclosure mode under each seed.
///
/// `cfg.seed` is replaced by each entry of `seeds`; evaluation dialogs use
/// the same seed across modes so their targets and starting candidates agree.
pub fn compare_modes(
    g: &Gallery,
    cfg: &TrainConfig,
    hidden: usize,
    seeds: &[u64],
    mut on_run: impl FnMut(DisclosureMode, u64, &EvalReport),
) -> Result<ComparisonTable, TrainError> {
    if seeds.len() < 2 {
        return Err(Error::Config("a comparison needs at least two seeds".into()).into());
    }
    if cfg.eval_episodes == 0 {
        return Err(Error::Config("a comparison needs evaluation episodes".into()).into());
    }
    let mut modes = Vec::with_capacity(DisclosureMode::ALL.len());
    for mode in DisclosureMode::ALL {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run_cfg = TrainConfig {
                mode,
                seed,
                eval_episodes: 0,
                ..cfg.clone()
            };
            let outcome = train(g, &run_cfg, hidden)?;
            let (_, test) = crate::gallery::split(g, cfg.train_fraction)?;
            let report = evaluate_params(&outcome.checkpoint.params, &test, &run_cfg, cfg.eval_episodes, seed)?;
            on_run(mode, seed, &report);
            runs.push(report);
        }
        let (percentile_mean, percentile_std) = column_stats(&runs, |r| &r.percentile_by_round);
        let (loss_mean, loss_std) = column_stats(&runs, |r| &r.loss_by_round);
        modes.push(ModeSummary {
            mode,
            percentile_mean,
            percentile_std,
            loss_mean,
            loss_std,
            runs,
        });
    }
    Ok(ComparisonTable {
        seeds: seeds.to_vec(),
        modes,
    })
}
