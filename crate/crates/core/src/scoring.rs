//! Closed-form OOD scores.
//!
//! Two score families share one numerically stable core. Both take the
//! image-to-text logits `v·t/τ` for ID classes and for negatives:
//!
//! * the NegLabel score, `P / (P + Σ_j exp(v·t⁻_j/τ))`, with all negatives in
//!   one denominator;
//! * the group-wise aggregation score, which splits the negatives into `G`
//!   groups and averages `P / (P + s·mean_{t⁻∈G_g} exp(v·t⁻/τ))`, where `s` is
//!   the class-scale factor (the ID class count by default).
//!
//! `P = Σ_i exp(v·t_i/τ)` is the positive activation. Every exponential is
//! taken after subtracting the largest logit of the call, so `τ = 0.01`
//! (logits up to ±100) cannot overflow.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::negatives::IdModel;
use crate::rng::Rng;
use crate::vector::{check_dims, EmbeddingVector};

/// Temperature and grouping parameters of the group-wise score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub tau: f64,
    pub groups: usize,
    /// Multiplier on each group's mean negative activation. `None` means the
    /// number of ID classes.
    pub class_scale: Option<f64>,
    /// Randomly permute negatives before grouping. When off, groups are
    /// contiguous runs of the static-then-bank order.
    pub shuffle: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            groups: 5,
            class_scale: None,
            shuffle: true,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.groups == 0 {
            return Err(Error::InvalidConfig("groups must be >= 1".into()));
        }
        if let Some(s) = self.class_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidConfig(format!("class_scale must be > 0, got {s}")));
            }
        }
        Ok(())
    }

    pub fn scale_for(&self, model: &IdModel) -> f64 {
        self.class_scale.unwrap_or(model.num_classes() as f64)
    }
}

/// ID or OOD, used both for detector decisions and ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Id,
    Ood,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Id => "id",
            Label::Ood => "ood",
        }
    }
}

/// Thresholded detector: ID iff `score ≥ gamma`.
pub fn classify(score: f64, gamma: f64) -> Label {
    if score >= gamma {
        Label::Id
    } else {
        Label::Ood
    }
}

/// A random partition of negatives into contiguous slices of a permutation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    permutation: Vec<usize>,
    bounds: Vec<Range<usize>>,
}

impl Grouping {
    /// Group `g` holds `permutation[bounds[g]]`. The first `n mod G` groups
    /// get one extra member.
    fn from_permutation(permutation: Vec<usize>, groups: usize) -> Result<Self> {
        let n = permutation.len();
        if groups == 0 || n < groups {
            return Err(Error::TooFewNegatives { negatives: n, groups });
        }
        let base = n / groups;
        let extra = n % groups;
        let mut bounds = Vec::with_capacity(groups);
        let mut start = 0;
        for g in 0..groups {
            let len = base + usize::from(g < extra);
            bounds.push(start..start + len);
            start += len;
        }
        Ok(Self { permutation, bounds })
    }

    /// Grouping over the identity order (no shuffle).
    pub fn contiguous(n: usize, groups: usize) -> Result<Self> {
        Self::from_permutation((0..n).collect(), groups)
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.bounds.len()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Negative indices of each group.
    pub fn groups(&self) -> impl Iterator<Item = &[usize]> + '_ {
        self.bounds.iter().map(|r| &self.permutation[r.clone()])
    }

    /// Checks that the grouping is a bijection over `0..n` with contiguous,
    /// near-equal slices.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.permutation.len() != n {
            return Err(Error::InvalidConfig(format!(
                "grouping covers {} negatives, {} supplied",
                self.permutation.len(),
                n
            )));
        }
        let mut seen = vec![false; n];
        for &i in &self.permutation {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidConfig("grouping is not a permutation".into()));
            }
        }
        let expected = Self::from_permutation(self.permutation.clone(), self.bounds.len())?;
        if expected.bounds != self.bounds {
            return Err(Error::InvalidConfig("grouping bounds are inconsistent".into()));
        }
        Ok(())
    }
}

/// Uniform random permutation of `0..n` cut into `groups` slices.
pub fn make_grouping(n_negatives: usize, groups: usize, rng: &mut Rng) -> Result<Grouping> {
    if groups == 0 || n_negatives < groups {
        return Err(Error::TooFewNegatives {
            negatives: n_negatives,
            groups,
        });
    }
    let mut permutation: Vec<usize> = (0..n_negatives).collect();
    rng.shuffle(&mut permutation);
    Grouping::from_permutation(permutation, groups)
}

fn logits<'a>(
    v: &EmbeddingVector,
    features: impl IntoIterator<Item = &'a EmbeddingVector>,
    tau: f64,
) -> Vec<f64> {
    features.into_iter().map(|t| v.dot(t) / tau).collect()
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Softmax over the class logits `v·t_{y_j}/τ`.
pub fn zero_shot_probabilities(v: &EmbeddingVector, model: &IdModel, tau: f64) -> Result<Vec<f64>> {
    model.check_dim(v)?;
    check_tau(tau)?;
    let z = logits(v, model.class_text(), tau);
    let m = max_of(&z);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / total).collect())
}

/// NegLabel score from logits.
pub fn neglabel_score_from_logits(id_logits: &[f64], neg_logits: &[f64]) -> f64 {
    let m = max_of(id_logits).max(max_of(neg_logits));
    let pos: f64 = id_logits.iter().map(|x| (x - m).exp()).sum();
    let neg: f64 = neg_logits.iter().map(|x| (x - m).exp()).sum();
    pos / (pos + neg)
}

/// Group-wise aggregation score from logits.
pub fn group_score_from_logits(
    id_logits: &[f64],
    neg_logits: &[f64],
    grouping: &Grouping,
    class_scale: f64,
) -> Result<f64> {
    if grouping.len() != neg_logits.len() {
        return Err(Error::InvalidConfig(format!(
            "grouping covers {} negatives, {} supplied",
            grouping.len(),
            neg_logits.len()
        )));
    }
    let m = max_of(id_logits).max(max_of(neg_logits));
    let pos: f64 = id_logits.iter().map(|x| (x - m).exp()).sum();
    let mut total = 0.0;
    for (g, members) in grouping.groups().enumerate() {
        if members.is_empty() {
            return Err(Error::EmptyGroup(g));
        }
        let mut members = members.to_vec();
        members.sort_unstable();
        let sum: f64 = members.iter().map(|&j| (neg_logits[j] - m).exp()).sum();
        let activation = class_scale * sum / members.len() as f64;
        total += pos / (pos + activation);
    }
    Ok(total / grouping.num_groups() as f64)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")))
    }
}

/// NegLabel score of `v` against the ID classes and `negatives`.
pub fn neglabel_score(
    v: &EmbeddingVector,
    model: &IdModel,
    negatives: &[EmbeddingVector],
    tau: f64,
) -> Result<f64> {
    model.check_dim(v)?;
    check_dims(model.dim(), negatives)?;
    check_tau(tau)?;
    let id = logits(v, model.class_text(), tau);
    let neg = logits(v, negatives, tau);
    Ok(neglabel_score_from_logits(&id, &neg))
}

/// Group-wise aggregation score of `v`.
pub fn group_score(
    v: &EmbeddingVector,
    model: &IdModel,
    negatives: &[EmbeddingVector],
    grouping: &Grouping,
    cfg: &ScoreConfig,
) -> Result<f64> {
    group_score_iter(v, model, negatives.iter(), grouping, cfg)
}

/// [`group_score`] over any ordered sequence of negatives (the engine passes
/// static negatives chained with the bank without copying).
pub fn group_score_iter<'a>(
    v: &EmbeddingVector,
    model: &IdModel,
    negatives: impl IntoIterator<Item = &'a EmbeddingVector>,
    grouping: &Grouping,
    cfg: &ScoreConfig,
) -> Result<f64> {
    model.check_dim(v)?;
    check_tau(cfg.tau)?;
    let mut neg = Vec::with_capacity(grouping.len());
    for t in negatives {
        check_dims(model.dim(), [t])?;
        neg.push(v.dot(t) / cfg.tau);
    }
    let id = logits(v, model.class_text(), cfg.tau);
    group_score_from_logits(&id, &neg, grouping, cfg.scale_for(model))
}
