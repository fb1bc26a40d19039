//! Simulated witness: relevance feedback and the progressive-disclosure mask.

use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::gallery::RecordRef;
use crate::rng::SeedStream;

/// Default number of binary facial attributes.
pub const DEFAULT_ATTRS: usize = 40;

/// Signed binary attribute signature, every entry -1 or +1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i8>", into = "Vec<i8>")]
pub struct AttributeVector(Vec<i8>);

impl AttributeVector {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|&v| v != 1 && v != -1) {
            return Err(Error::Contract(format!(
                "attributes must be ±1 (entry {pos} is {})",
                values[pos]
            )));
        }
        Ok(Self(values))
    }

    pub fn from_bools(values: &[bool]) -> Self {
        Self(values.iter().map(|&b| if b { 1 } else { -1 }).collect())
    }

    pub fn into_inner(self) -> Vec<i8> {
        self.0
    }
}

impl Deref for AttributeVector {
    type Target = [i8];
    fn deref(&self) -> &[i8] {
        &self.0
    }
}

impl TryFrom<Vec<i8>> for AttributeVector {
    type Error = Error;
    fn try_from(values: Vec<i8>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<AttributeVector> for Vec<i8> {
    fn from(v: AttributeVector) -> Self {
        v.0
    }
}

/// Per-attribute agreement between a candidate and the target: +1 same,
/// -1 different, 0 undisclosed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i8>", into = "Vec<i8>")]
pub struct RelevanceVector(Vec<i8>);

impl RelevanceVector {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !(-1..=1).contains(v)) {
            return Err(Error::Contract(format!(
                "relevance entries must be -1, 0 or 1 (entry {pos} is {})",
                values[pos]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0; len])
    }

    pub fn nonzero_count(&self) -> usize {
        self.0.iter().filter(|&&v| v != 0).count()
    }

    pub fn zero_indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == 0).then_some(i))
            .collect()
    }

    pub fn into_inner(self) -> Vec<i8> {
        self.0
    }
}

impl Deref for RelevanceVector {
    type Target = [i8];
    fn deref(&self) -> &[i8] {
        &self.0
    }
}

impl TryFrom<Vec<i8>> for RelevanceVector {
    type Error = Error;
    fn try_from(values: Vec<i8>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<RelevanceVector> for Vec<i8> {
    fn from(v: RelevanceVector) -> Self {
        v.0
    }
}

/// Fraction of relevance entries hidden at each round; non-increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DisclosureSchedule(Vec<f64>);

impl DisclosureSchedule {
    pub fn new(proportions: Vec<f64>) -> Result<Self> {
        if proportions.is_empty() {
            return Err(Error::Config("disclosure schedule is empty".into()));
        }
        if let Some(p) = proportions.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!(
                "schedule fraction {p} is outside [0, 1]"
            )));
        }
        if proportions.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config(
                "schedule fractions must be non-increasing".into(),
            ));
        }
        Ok(Self(proportions))
    }

    /// A schedule that never hides anything.
    pub fn full(rounds: usize) -> Self {
        Self(vec![0.0; rounds.max(1)])
    }

    pub fn rounds(&self) -> usize {
        self.0.len()
    }

    pub fn proportions(&self) -> &[f64] {
        &self.0
    }

    /// Number of hidden entries at `round`, rounded half-up.
    pub fn masked_count(&self, round: usize, attrs: usize) -> Result<usize> {
        let p = *self.0.get(round).ok_or(Error::Index {
            index: round,
            len: self.0.len(),
        })?;
        Ok(((p * attrs as f64) + 0.5).floor().min(attrs as f64) as usize)
    }

    /// Maximum number of nonzero entries a witness may submit at `round`.
    pub fn budget(&self, round: usize, attrs: usize) -> Result<usize> {
        Ok(attrs - self.masked_count(round, attrs)?)
    }
}

impl Default for DisclosureSchedule {
    fn default() -> Self {
        Self(vec![0.5, 0.3, 0.2, 0.1, 0.0])
    }
}

impl TryFrom<Vec<f64>> for DisclosureSchedule {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DisclosureSchedule> for Vec<f64> {
    fn from(s: DisclosureSchedule) -> Self {
        s.0
    }
}

impl FromStr for DisclosureSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let values = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad schedule fraction {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }
}

impl fmt::Display for DisclosureSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|p| p.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// What the witness tells the system each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisclosureMode {
    /// Relevance is masked according to the schedule.
    #[default]
    Progressive,
    /// Every relevance entry is disclosed.
    Full,
    /// Every relevance entry is disclosed but the candidate's attributes are
    /// withheld from the encoder.
    FullNoAttr,
}

impl DisclosureMode {
    pub const ALL: [DisclosureMode; 3] = [Self::Progressive, Self::Full, Self::FullNoAttr];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Progressive => "progressive",
            Self::Full => "full",
            Self::FullNoAttr => "full-no-attr",
        }
    }

    pub fn masks(self) -> bool {
        self == Self::Progressive
    }
}

impl fmt::Display for DisclosureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DisclosureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "progressive" => Ok(Self::Progressive),
            "full" => Ok(Self::Full),
            "full-no-attr" => Ok(Self::FullNoAttr),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected progressive, full or full-no-attr)"
            ))),
        }
    }
}

/// How masked positions relate across rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskStrategy {
    /// One permutation per episode; revealed sets grow monotonically.
    #[default]
    Nested,
    /// A fresh permutation every round.
    Resampled,
}

impl FromStr for MaskStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nested" => Ok(Self::Nested),
            "resampled" => Ok(Self::Resampled),
            other => Err(Error::Config(format!("unknown mask strategy {other:?}"))),
        }
    }
}

/// Which relevance entries stay hidden in each round of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    order: Vec<usize>,
    schedule: DisclosureSchedule,
    strategy: MaskStrategy,
    seed: SeedStream,
}

impl MaskPlan {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn schedule(&self) -> &DisclosureSchedule {
        &self.schedule
    }

    pub fn strategy(&self) -> MaskStrategy {
        self.strategy
    }

    pub fn attrs(&self) -> usize {
        self.order.len()
    }

    pub fn rounds(&self) -> usize {
        self.schedule.rounds()
    }

    /// Indices hidden at `round`.
    pub fn masked_indices(&self, round: usize) -> Result<Vec<usize>> {
        let count = self.schedule.masked_count(round, self.attrs())?;
        Ok(match self.strategy {
            MaskStrategy::Nested => self.order[self.attrs() - count..].to_vec(),
            MaskStrategy::Resampled => {
                let perm = permutation(self.attrs(), self.seed.index(round as u64));
                perm[perm.len() - count..].to_vec()
            }
        })
    }

    /// Indices disclosed at `round`.
    pub fn revealed_indices(&self, round: usize) -> Result<Vec<usize>> {
        let mut hidden = vec![false; self.attrs()];
        for i in self.masked_indices(round)? {
            hidden[i] = true;
        }
        Ok((0..self.attrs()).filter(|&i| !hidden[i]).collect())
    }
}

fn permutation(n: usize, seed: SeedStream) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed.rng());
    order
}

/// Elementwise agreement of two attribute signatures.
pub fn compute_relevance(candidate: &[i8], target: &[i8]) -> Result<RelevanceVector> {
    check_len("relevance", target.len(), candidate.len())?;
    Ok(RelevanceVector(
        candidate.iter().zip(target).map(|(c, t)| c * t).collect(),
    ))
}

pub fn make_mask_plan(
    schedule: DisclosureSchedule,
    attrs: usize,
    seed: SeedStream,
) -> Result<MaskPlan> {
    make_mask_plan_with(schedule, attrs, seed, MaskStrategy::Nested)
}

pub fn make_mask_plan_with(
    schedule: DisclosureSchedule,
    attrs: usize,
    seed: SeedStream,
    strategy: MaskStrategy,
) -> Result<MaskPlan> {
    if attrs == 0 {
        return Err(Error::Config("attribute count must be at least 1".into()));
    }
    if schedule.rounds() == 0 {
        return Err(Error::Config("disclosure schedule is empty".into()));
    }
    Ok(MaskPlan {
        order: permutation(attrs, seed),
        schedule,
        strategy,
        seed,
    })
}

/// Zero the entries the plan hides at `round`.
pub fn apply_mask(relevance: &RelevanceVector, plan: &MaskPlan, round: usize) -> Result<RelevanceVector> {
    check_len("mask", plan.attrs(), relevance.len())?;
    let mut out = relevance.0.clone();
    for i in plan.masked_indices(round)? {
        out[i] = 0;
    }
    Ok(RelevanceVector(out))
}

/// One round of feedback from the simulated witness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WitnessFeedback {
    pub relevance: RelevanceVector,
    pub matched: bool,
}

pub fn witness_round(
    target: RecordRef<'_>,
    candidate: RecordRef<'_>,
    plan: &MaskPlan,
    round: usize,
    mode: DisclosureMode,
) -> Result<WitnessFeedback> {
    let raw = compute_relevance(candidate.attributes, target.attributes)?;
    let relevance = if mode.masks() {
        apply_mask(&raw, plan, round)?
    } else {
        if round >= plan.rounds() {
            return Err(Error::Index {
                index: round,
                len: plan.rounds(),
            });
        }
        raw
    };
    Ok(WitnessFeedback {
        relevance,
        matched: candidate.id == target.id,
    })
}
