//! Episode rollout with the simulated witness, triplet loss, backpropagation
//! through the dialog, Adam updates and checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dialog_model::{episode_backward, step, EpisodeTrace, Gradients, ModelDims, ModelParameters, ParamBlock, RoundInput};
use crate::error::{check_len, Error, Result};
use crate::evaluator::{evaluate_params, ranking_percentile, EvalReport};
use crate::feedback_sim::{make_mask_plan_with, witness_round, DisclosureMode, DisclosureSchedule, MaskPlan, MaskStrategy, RelevanceVector};
use crate::gallery::{split, Gallery};
use crate::retriever::{greedy_candidate, initial_candidate, sample_candidate, scan_top_k, FeatureMatrix};
use crate::rng::SeedStream;
use crate::tensor_ops::{adam_step, AdamState, Tensor1};

pub const DEFAULT_ROUNDS: usize = 5;
pub const DEFAULT_MARGIN: f64 = 2.0;
pub const DEFAULT_LR: f64 = 0.001;
pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rounds: usize,
    pub margin: f64,
    pub lr: f64,
    pub k: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Episodes per epoch; `None` means one per training record.
    pub episodes_per_epoch: Option<usize>,
    pub seed: u64,
    pub mode: DisclosureMode,
    pub schedule: DisclosureSchedule,
    pub mask_strategy: MaskStrategy,
    pub train_fraction: f64,
    /// Held-out greedy dialogs run after every epoch (0 disables).
    pub eval_episodes: usize,
    /// Greedy dialogs may show the same candidate twice.
    pub allow_repeats: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: DEFAULT_ROUNDS,
            margin: DEFAULT_MARGIN,
            lr: DEFAULT_LR,
            k: crate::retriever::DEFAULT_K,
            batch_size: DEFAULT_BATCH,
            epochs: 20,
            episodes_per_epoch: None,
            seed: 0,
            mode: DisclosureMode::Progressive,
            schedule: DisclosureSchedule::default(),
            mask_strategy: MaskStrategy::Nested,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            eval_episodes: 500,
            allow_repeats: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be ≥ 0, got {}", self.margin)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be ≥ 0, got {}", self.lr)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.episodes_per_epoch == Some(0) {
            return Err(Error::Config("episodes per epoch must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction must lie strictly between 0 and 1, got {}",
                self.train_fraction
            )));
        }
        if self.mode.masks() && self.schedule.rounds() < self.rounds {
            return Err(Error::Config(format!(
                "schedule has {} entries but {} rounds are configured",
                self.schedule.rounds(),
                self.rounds
            )));
        }
        Ok(())
    }

    /// Schedule actually applied: the configured one when masking, none otherwise.
    pub fn effective_schedule(&self) -> DisclosureSchedule {
        if self.mode.masks() {
            DisclosureSchedule::new(self.schedule.proportions()[..self.rounds].to_vec())
                .expect("prefix of a valid schedule")
        } else {
            DisclosureSchedule::full(self.rounds)
        }
    }

    pub fn dialog(&self, policy: Policy) -> DialogConfig {
        DialogConfig {
            rounds: self.rounds,
            k: self.k,
            mode: self.mode,
            schedule: self.effective_schedule(),
            mask_strategy: self.mask_strategy,
            policy,
        }
    }
}

/// How the next candidate is picked from the top-K.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    /// Softmax sampling over the top-K (training).
    Sample,
    /// Nearest record (testing), optionally skipping candidates already shown.
    Greedy { exclude_shown: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogConfig {
    pub rounds: usize,
    pub k: usize,
    pub mode: DisclosureMode,
    pub schedule: DisclosureSchedule,
    pub mask_strategy: MaskStrategy,
    pub policy: Policy,
}

/// Per-episode random streams. A live session seeded with `value()`
/// reproduces the same initial candidate and mask plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSeeds(SeedStream);

impl EpisodeSeeds {
    pub fn new(root: SeedStream) -> Self {
        Self(root)
    }

    pub fn value(self) -> u64 {
        self.0.value()
    }

    pub fn target(self, n: usize) -> Result<usize> {
        initial_candidate(n, &mut self.0.rng_for("target"))
    }

    pub fn initial(self, n: usize) -> Result<usize> {
        initial_candidate(n, &mut self.0.rng_for("initial"))
    }

    pub fn mask(self) -> SeedStream {
        self.0.child("mask")
    }

    pub fn mask_plan(self, schedule: DisclosureSchedule, attrs: usize, strategy: MaskStrategy) -> Result<MaskPlan> {
        make_mask_plan_with(schedule, attrs, self.mask(), strategy)
    }

    fn negatives(self) -> SeedStream {
        self.0.child("negatives")
    }

    fn sampling(self) -> SeedStream {
        self.0.child("sampling")
    }
}

/// Seeds of training episode `episode` in `epoch`.
pub fn train_episode_seeds(seed: u64, epoch: usize, episode: usize) -> EpisodeSeeds {
    EpisodeSeeds::new(
        SeedStream::new(seed)
            .child("train")
            .index(epoch as u64)
            .index(episode as u64),
    )
}

/// Seeds of held-out evaluation episode `episode`.
pub fn eval_episode_seeds(seed: u64, episode: usize) -> EpisodeSeeds {
    EpisodeSeeds::new(SeedStream::new(seed).child("eval").index(episode as u64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRound {
    /// 1-based.
    pub round: usize,
    pub candidate: usize,
    pub candidate_id: String,
    pub relevance: RelevanceVector,
    pub matched: bool,
    /// Attributes on which candidate and target agree.
    pub matched_attributes: usize,
    /// Target percentile under `s_t`; absent on the matching round.
    pub percentile: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub target: usize,
    pub target_id: String,
    pub rounds: Vec<TranscriptRound>,
    pub matched: bool,
    /// Candidate retrieved after the last feedback round, if the dialog
    /// did not end in a match.
    pub final_candidate: Option<usize>,
}

impl Transcript {
    pub fn candidates(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.rounds.iter().map(|r| r.candidate).collect();
        c.extend(self.final_candidate);
        c
    }
}

/// The constant inputs of the per-episode loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossInputs {
    pub rounds: Vec<RoundInput>,
    pub positive: Tensor1,
    pub negatives: Vec<Tensor1>,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub inputs: LossInputs,
    pub trace: EpisodeTrace,
    pub transcript: Transcript,
}

fn to_f64(v: &[f32]) -> Tensor1 {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Run one dialog against the simulated witness.
///
/// The dialog ends when the witness recognises the shown candidate or after
/// `cfg.rounds` feedback rounds. Candidate selection is not differentiated.
pub fn run_dialog(
    p: &ModelParameters,
    g: &Gallery,
    cfg: &DialogConfig,
    seeds: EpisodeSeeds,
    target: Option<usize>,
    record_percentiles: bool,
) -> Result<Rollout> {
    let dims = p.dims();
    check_len("gallery attributes", dims.attrs, g.attrs())?;
    check_len("gallery features", dims.features, g.feat_dim())?;
    let n = g.len();
    let target = match target {
        Some(t) => g.get(t)?.index,
        None => seeds.target(n)?,
    };
    let plan = seeds.mask_plan(cfg.schedule.clone(), dims.attrs, cfg.mask_strategy)?;
    let features = FeatureMatrix::of(g);
    let target_rec = g.record(target);
    let positive = to_f64(target_rec.features);

    let mut neg_rng = seeds.negatives().rng();
    let mut pick_rng = seeds.sampling().rng();
    let mut candidate = seeds.initial(n)?;
    let mut shown = vec![candidate];
    let mut h = vec![0.0; dims.hidden];
    let mut inputs = LossInputs {
        rounds: Vec::with_capacity(cfg.rounds),
        positive,
        negatives: Vec::with_capacity(cfg.rounds),
    };
    let mut trace = EpisodeTrace {
        encode: Vec::with_capacity(cfg.rounds),
        aggregate: Vec::with_capacity(cfg.rounds),
    };
    let mut transcript = Transcript {
        target,
        target_id: target_rec.id.to_owned(),
        rounds: Vec::with_capacity(cfg.rounds),
        matched: false,
        final_candidate: None,
    };

    for t in 0..cfg.rounds {
        let cand = g.record(candidate);
        let feedback = witness_round(target_rec, cand, &plan, t, cfg.mode)?;
        let matched_attributes = cand
            .attributes
            .iter()
            .zip(target_rec.attributes)
            .filter(|(a, b)| a == b)
            .count();
        if feedback.matched {
            transcript.rounds.push(TranscriptRound {
                round: t + 1,
                candidate,
                candidate_id: cand.id.to_owned(),
                relevance: feedback.relevance,
                matched: true,
                matched_attributes,
                percentile: None,
            });
            transcript.matched = true;
            return Ok(Rollout {
                inputs,
                trace,
                transcript,
            });
        }

        let input = RoundInput {
            relevance: feedback.relevance.clone(),
            cand_attrs: cand.attributes.to_vec(),
            cand_features: cand.features.to_vec(),
        };
        let (enc, agg) = step(p, &input, &h, cfg.mode)?;
        h.clone_from(&agg.gru.h);

        // x⁻: uniform over the gallery minus the target.
        let mut neg = neg_rng.random_range(0..n - 1);
        if neg >= target {
            neg += 1;
        }
        inputs.negatives.push(to_f64(g.features(neg)));

        let percentile = if record_percentiles && n >= 2 {
            Some(ranking_percentile(&agg.s, features, target)?)
        } else {
            None
        };
        let excluded: &[usize] = match cfg.policy {
            Policy::Greedy { exclude_shown: true } => &shown,
            _ => &[],
        };
        let result = scan_top_k(features, &agg.s, cfg.k, excluded)?;
        let next = match cfg.policy {
            Policy::Sample => sample_candidate(&result, &mut pick_rng)?,
            Policy::Greedy { .. } => greedy_candidate(&result)?,
        };

        transcript.rounds.push(TranscriptRound {
            round: t + 1,
            candidate,
            candidate_id: cand.id.to_owned(),
            relevance: feedback.relevance,
            matched: false,
            matched_attributes,
            percentile,
        });
        inputs.rounds.push(input);
        trace.encode.push(enc);
        trace.aggregate.push(agg);
        candidate = next;
        shown.push(candidate);
    }
    transcript.final_candidate = Some(candidate);
    Ok(Rollout {
        inputs,
        trace,
        transcript,
    })
}

/// Training rollout: uniform target, softmax candidate sampling.
pub fn rollout_episode(p: &ModelParameters, train: &Gallery, cfg: &TrainConfig, seeds: EpisodeSeeds) -> Result<Rollout> {
    if train.is_empty() {
        return Err(Error::Config("training gallery is empty".into()));
    }
    run_dialog(p, train, &cfg.dialog(Policy::Sample), seeds, None, false)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Hinge terms `max(0, ‖s_t − x⁺‖ − ‖s_t − x⁻_t‖ + m)` per round.
pub fn triplet_terms(s: &[Tensor1], positive: &[f64], negatives: &[Tensor1], margin: f64) -> Result<Vec<f64>> {
    check_len("negatives", s.len(), negatives.len())?;
    let all_finite = s
        .iter()
        .chain(negatives)
        .flatten()
        .chain(positive)
        .all(|v| v.is_finite());
    if !all_finite || !margin.is_finite() {
        return Err(Error::Numeric("non-finite triplet loss input".into()));
    }
    s.iter()
        .zip(negatives)
        .map(|(st, neg)| {
            check_len("positive", st.len(), positive.len())?;
            check_len("negative", st.len(), neg.len())?;
            Ok((distance(st, positive) - distance(st, neg) + margin).max(0.0))
        })
        .collect()
}

/// Triplet loss of one episode: the hinge summed over realised rounds.
pub fn triplet_loss(s: &[Tensor1], positive: &[f64], negatives: &[Tensor1], margin: f64) -> Result<f64> {
    Ok(triplet_terms(s, positive, negatives, margin)?.iter().sum())
}

/// Loss and `∂L/∂s_t`. At zero distance the norm's subgradient is taken as 0.
pub fn triplet_loss_grad(
    s: &[Tensor1],
    positive: &[f64],
    negatives: &[Tensor1],
    margin: f64,
) -> Result<(f64, Vec<Tensor1>)> {
    let terms = triplet_terms(s, positive, negatives, margin)?;
    let grads = s
        .iter()
        .zip(negatives)
        .zip(&terms)
        .map(|((st, neg), &term)| {
            let mut g = vec![0.0; st.len()];
            if term > 0.0 {
                let dp = distance(st, positive);
                let dn = distance(st, neg);
                for i in 0..st.len() {
                    if dp > 0.0 {
                        g[i] += (st[i] - positive[i]) / dp;
                    }
                    if dn > 0.0 {
                        g[i] -= (st[i] - neg[i]) / dn;
                    }
                }
            }
            g
        })
        .collect();
    Ok((terms.iter().sum(), grads))
}

/// Loss of a frozen episode as a function of the parameters, with gradients
/// accumulated into `grads` scaled by `weight`.
pub fn episode_loss_and_grad(
    p: &ModelParameters,
    inputs: &LossInputs,
    mode: DisclosureMode,
    margin: f64,
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    if inputs.rounds.is_empty() {
        return Ok(0.0);
    }
    let trace = crate::dialog_model::episode_forward_traced(p, &inputs.rounds, mode)?;
    trace_loss_and_grad(p, &trace, inputs, margin, weight, grads)
}

fn trace_loss_and_grad(
    p: &ModelParameters,
    trace: &EpisodeTrace,
    inputs: &LossInputs,
    margin: f64,
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    if trace.is_empty() {
        return Ok(0.0);
    }
    let s = trace.representations();
    let (loss, mut grad_s) = triplet_loss_grad(&s, &inputs.positive, &inputs.negatives, margin)?;
    if weight != 1.0 {
        for g in grad_s.iter_mut().flatten() {
            *g *= weight;
        }
    }
    episode_backward(p, trace, &grad_s, grads)?;
    Ok(loss)
}

/// Loss of a frozen episode without gradients.
pub fn episode_loss(p: &ModelParameters, inputs: &LossInputs, mode: DisclosureMode, margin: f64) -> Result<f64> {
    if inputs.rounds.is_empty() {
        return Ok(0.0);
    }
    let s = crate::dialog_model::episode_forward(p, &inputs.rounds, mode)?;
    triplet_loss(&s, &inputs.positive, &inputs.negatives, margin)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParameters,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ShapeEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    dims: ModelDims,
    config: TrainConfig,
    epoch: usize,
    step: u64,
    adam_step: u64,
    shapes: Vec<ShapeEntry>,
}

fn shape_table(dims: &ModelDims) -> Vec<ShapeEntry> {
    ParamBlock::ALL
        .iter()
        .map(|b| {
            let (rows, cols) = b.shape(dims);
            ShapeEntry {
                name: b.name().to_owned(),
                rows,
                cols,
            }
        })
        .collect()
}

impl Checkpoint {
    pub fn fresh(config: TrainConfig, dims: ModelDims) -> Result<Self> {
        config.validate()?;
        dims.validate()?;
        let params = ModelParameters::init(dims, SeedStream::new(config.seed).child("init"));
        let adam = AdamState::new(params.len());
        Ok(Self {
            config,
            params,
            adam,
            epoch: 0,
            step: 0,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = CheckpointHeader {
            dims: self.params.dims(),
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            adam_step: self.adam.step,
            shapes: shape_table(&self.params.dims()),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for block in [self.params.as_slice(), &self.adam.m, &self.adam.v] {
            let mut buf = Vec::with_capacity(block.len() * 8);
            for v in block {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let corrupt = |what: &str| {
            let what = what.to_owned();
            move |e: std::io::Error| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::Corruption(format!("checkpoint truncated in {what}")),
                _ => Error::Io(e),
            }
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(corrupt("magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(corrupt("version"))?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(corrupt("header length"))?;
        let len = u64::from_le_bytes(b8) as usize;
        if len > 1 << 24 {
            return Err(Error::Corruption(format!("implausible header length {len}")));
        }
        let mut header = vec![0u8; len];
        r.read_exact(&mut header).map_err(corrupt("header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| Error::Corruption(format!("bad header: {e}")))?;
        header.dims.validate()?;
        if header.shapes != shape_table(&header.dims) {
            return Err(Error::Corruption("shape table does not match model dimensions".into()));
        }
        header.config.validate()?;
        let total: usize = header.shapes.iter().map(|s| s.rows * s.cols).sum();
        let mut read_block = |what: &str| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; total * 8];
            r.read_exact(&mut bytes).map_err(corrupt(what))?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let params = ModelParameters::from_flat(header.dims, read_block("parameters")?)?;
        let m = read_block("first moments")?;
        let v = read_block("second moments")?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Corruption(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            config: header.config,
            params,
            adam: AdamState {
                step: header.adam_step,
                m,
                v,
            },
            epoch: header.epoch,
            step: header.step,
        })
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    c.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::read_from(&mut BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub percentile_by_round: Vec<f64>,
    pub loss_by_round: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: u64,
        reason: String,
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Other(#[from] Error),
}

/// Owns the evolving checkpoint and the train/test partitions.
pub struct Trainer<'g> {
    train: &'g Gallery,
    test: &'g Gallery,
    state: Checkpoint,
}

impl<'g> Trainer<'g> {
    pub fn new(state: Checkpoint, train: &'g Gallery, test: &'g Gallery) -> Result<Self> {
        state.config.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training gallery is empty".into()));
        }
        let dims = state.params.dims();
        for g in [train, test] {
            if !g.is_empty() {
                check_len("gallery attributes", dims.attrs, g.attrs())?;
                check_len("gallery features", dims.features, g.feat_dim())?;
            }
        }
        Ok(Self { train, test, state })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    pub fn episodes_per_epoch(&self) -> usize {
        self.state.config.episodes_per_epoch.unwrap_or(self.train.len())
    }

    /// Mean triplet loss of one batch of fresh rollouts, accumulated into `grads`.
    fn batch(&self, epoch: usize, episodes: std::ops::Range<usize>, grads: &mut Gradients) -> Result<f64> {
        let cfg = &self.state.config;
        let p = &self.state.params;
        let weight = 1.0 / episodes.len() as f64;
        let per_episode: Vec<Result<(f64, Gradients)>> = episodes
            .into_par_iter()
            .map(|i| {
                let seeds = train_episode_seeds(cfg.seed, epoch, i);
                let rollout = rollout_episode(p, self.train, cfg, seeds)?;
                let mut g = Gradients::zeros(p.dims());
                let loss = trace_loss_and_grad(p, &rollout.trace, &rollout.inputs, cfg.margin, weight, &mut g)?;
                Ok((loss, g))
            })
            .collect();
        // Reduce in episode order so results do not depend on thread count.
        let mut total = 0.0;
        for r in per_episode {
            let (loss, g) = r?;
            total += loss;
            grads.add_assign(&g);
        }
        Ok(total * weight)
    }

    /// Run one epoch and the held-out evaluation that follows it.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics, TrainError> {
        let epoch = self.state.epoch;
        let total = self.episodes_per_epoch();
        let batch = self.state.config.batch_size;
        let mut grads = Gradients::zeros(self.state.params.dims());
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut start = 0;
        while start < total {
            let end = (start + batch).min(total);
            grads.fill(0.0);
            let loss = self.batch(epoch, start..end, &mut grads)?;
            let diverged = |reason: String, state: &Checkpoint| TrainError::Diverged {
                epoch,
                step: state.step,
                reason,
                last_good: Box::new(state.clone()),
            };
            if !loss.is_finite() {
                return Err(diverged(format!("batch loss is {loss}"), &self.state));
            }
            let lr = self.state.config.lr;
            let Checkpoint { params, adam, .. } = &mut self.state;
            if let Err(e) = adam_step(params.as_mut_slice(), grads.as_slice(), adam, lr) {
                return Err(diverged(e.to_string(), &self.state));
            }
            if !self.state.params.is_finite() {
                return Err(diverged("parameters became non-finite".into(), &self.state));
            }
            self.state.step += 1;
            loss_sum += loss;
            batches += 1;
            start = end;
        }
        self.state.epoch += 1;

        let (percentile_by_round, loss_by_round) = if self.state.config.eval_episodes > 0 && self.test.len() >= 2 {
            let report = self.evaluate(self.state.config.eval_episodes)?;
            (report.percentile_by_round, report.loss_by_round)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(EpochMetrics {
            epoch: self.state.epoch,
            loss: loss_sum / batches.max(1) as f64,
            percentile_by_round,
            loss_by_round,
        })
    }

    /// Greedy held-out evaluation with the current parameters.
    pub fn evaluate(&self, episodes: usize) -> Result<EvalReport> {
        evaluate_params(&self.state.params, self.test, &self.state.config, episodes, self.state.config.seed)
    }

    /// Run `epochs` more epochs, reporting each through `on_epoch`.
    pub fn run(&mut self, epochs: usize, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<Vec<EpochMetrics>, TrainError> {
        let mut out = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let m = self.run_epoch()?;
            on_epoch(&m);
            out.push(m);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Split `g`, initialise from `cfg.seed` and train for `cfg.epochs` epochs.
pub fn train(g: &Gallery, cfg: &TrainConfig, hidden: usize) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let (train_g, test_g) = split(g, cfg.train_fraction)?;
    let dims = ModelDims::new(g.attrs(), g.feat_dim(), hidden)?;
    let mut trainer = Trainer::new(Checkpoint::fresh(cfg.clone(), dims)?, &train_g, &test_g)?;
    let metrics = trainer.run(cfg.epochs, |m| {
        log::info!("epoch {} loss {:.5} percentile {:?}", m.epoch, m.loss, m.percentile_by_round);
    })?;
    Ok(TrainOutcome {
        checkpoint: trainer.into_checkpoint(),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::{gen_synthetic, SyntheticSpec};
    use crate::tensor_ops::grad_check;

    fn small_gallery(n: usize, seed: u64) -> Gallery {
        gen_synthetic(SyntheticSpec {
            n,
            attrs: 8,
            feat_dim: 16,
            noise: 0.1,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn triplet_examples() {
        let s = vec![vec![0.3, -0.2], vec![1.0, 1.0]];
        let pos = vec![0.5, 0.5];
        let negs = vec![pos.clone(), pos.clone()];
        assert!((triplet_loss(&s, &pos, &negs, 2.0).unwrap() - 4.0).abs() < 1e-12);

        let s = vec![vec![0.0, 0.0]];
        let loss = triplet_loss(&s, &[0.0, 0.0], &[vec![2.0, 0.0]], 2.0).unwrap();
        assert_eq!(loss, 0.0);

        let s = vec![vec![0.0], vec![1.0]];
        let loss = triplet_loss(&s, &[0.0], &[vec![3.0], vec![3.0]], 2.0).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);

        assert!(matches!(
            triplet_loss(&[vec![f64::NAN]], &[0.0], &[vec![1.0]], 1.0),
            Err(Error::Numeric(_))
        ));
        assert!(triplet_loss(&[vec![0.0]], &[0.0], &[], 1.0).is_err());
    }

    #[test]
    fn single_record_gallery_matches_immediately() {
        let g = small_gallery(1, 3);
        let p = ModelParameters::init(ModelDims::new(8, 16, 16).unwrap(), SeedStream::new(1));
        let r = rollout_episode(&p, &g, &TrainConfig::default(), train_episode_seeds(1, 0, 0)).unwrap();
        assert_eq!(r.transcript.rounds.len(), 1);
        assert!(r.transcript.matched);
        assert!(r.inputs.rounds.is_empty());
    }

    #[test]
    fn rollout_is_deterministic_and_negatives_avoid_target() {
        let g = small_gallery(20, 4);
        let p = ModelParameters::init(ModelDims::new(8, 16, 16).unwrap(), SeedStream::new(2));
        let cfg = TrainConfig::default();
        for ep in 0..50 {
            let seeds = train_episode_seeds(9, 0, ep);
            let a = rollout_episode(&p, &g, &cfg, seeds).unwrap();
            let b = rollout_episode(&p, &g, &cfg, seeds).unwrap();
            assert_eq!(a.transcript, b.transcript);
            let target = to_f64(g.features(a.transcript.target));
            assert!(a.inputs.negatives.iter().all(|n| *n != target));
            assert_eq!(a.inputs.negatives.len(), a.inputs.rounds.len());
        }
    }

    #[test]
    fn episode_gradient_matches_finite_differences() {
        let g = small_gallery(20, 5);
        let dims = ModelDims::new(8, 16, 16).unwrap();
        let p = ModelParameters::init(dims, SeedStream::new(6));
        let cfg = TrainConfig {
            rounds: 3,
            schedule: DisclosureSchedule::new(vec![0.5, 0.25, 0.0]).unwrap(),
            ..TrainConfig::default()
        };
        let r = (0..)
            .map(|i| rollout_episode(&p, &g, &cfg, train_episode_seeds(1, 0, i)).unwrap())
            .find(|r| r.inputs.rounds.len() == 3)
            .unwrap();
        let mut grads = Gradients::zeros(dims);
        episode_loss_and_grad(&p, &r.inputs, cfg.mode, cfg.margin, 1.0, &mut grads).unwrap();
        let report = grad_check(
            |theta| {
                let q = ModelParameters::from_flat(dims, theta.to_vec()).unwrap();
                episode_loss(&q, &r.inputs, cfg.mode, cfg.margin).unwrap()
            },
            p.as_slice(),
            grads.as_slice(),
            1e-4,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip_and_tamper() {
        let c = Checkpoint::fresh(TrainConfig::default(), ModelDims::new(4, 6, 5).unwrap()).unwrap();
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        assert_eq!(Checkpoint::read_from(&mut bytes.as_slice()).unwrap(), c);

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Format(_))));

        let text = String::from_utf8_lossy(&bytes).into_owned();
        let at = text.find("\"rows\":5").expect("shape entry");
        let mut bad = bytes.clone();
        bad[at + 7] = b'4';
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());

        assert!(matches!(
            Checkpoint::read_from(&mut &bytes[..bytes.len() - 9]),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { margin: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { rounds: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { rounds: 6, ..Default::default() }.validate().is_err());
        assert!(TrainConfig {
            rounds: 6,
            mode: DisclosureMode::Full,
            ..Default::default()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let g = small_gallery(40, 7);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            eval_episodes: 0,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let start = Checkpoint::fresh(cfg.clone(), ModelDims::new(8, 16, 16).unwrap()).unwrap();
        let out = train(&g, &cfg, 16).unwrap();
        assert_eq!(out.checkpoint.params, start.params);
        assert_eq!(out.checkpoint.step, 10);
    }
}
