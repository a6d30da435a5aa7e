//! Class prototypes and static negative-label mining.
//!
//! Each ID class gets an image prototype: the normalized mean of its N shot
//! embeddings. A vocabulary candidate's distance to the ID visual space is
//! its mean cosine distance to all prototypes, and the `L` farthest
//! candidates become the static negative set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{check_dims, cosine, normalize, EmbeddingVector};

/// ID class text features and class-wise image prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdModel {
    class_names: Vec<String>,
    class_text: Vec<EmbeddingVector>,
    prototypes: Vec<EmbeddingVector>,
}

impl IdModel {
    pub fn new(
        class_names: Vec<String>,
        class_text: Vec<EmbeddingVector>,
        prototypes: Vec<EmbeddingVector>,
    ) -> Result<Self> {
        if class_text.is_empty() {
            return Err(Error::EmptyClass("an ID model needs at least one class".into()));
        }
        if class_names.len() != class_text.len() || prototypes.len() != class_text.len() {
            return Err(Error::InvalidConfig(format!(
                "class count mismatch: {} names, {} text features, {} prototypes",
                class_names.len(),
                class_text.len(),
                prototypes.len()
            )));
        }
        let dim = class_text[0].dim();
        check_dims(dim, class_text.iter().chain(&prototypes))?;
        Ok(Self {
            class_names,
            class_text,
            prototypes,
        })
    }

    /// Builds prototypes from per-class shots, then the model.
    pub fn from_shots(
        class_names: Vec<String>,
        class_text: Vec<EmbeddingVector>,
        shots: &[Vec<EmbeddingVector>],
    ) -> Result<Self> {
        let prototypes = build_prototypes(shots)?;
        Self::new(class_names, class_text, prototypes)
    }

    pub fn num_classes(&self) -> usize {
        self.class_text.len()
    }

    pub fn dim(&self) -> usize {
        self.class_text[0].dim()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_text(&self) -> &[EmbeddingVector] {
        &self.class_text
    }

    pub fn prototypes(&self) -> &[EmbeddingVector] {
        &self.prototypes
    }

    pub(crate) fn check_dim(&self, v: &EmbeddingVector) -> Result<()> {
        check_dims(self.dim(), [v])
    }
}

/// `μ_c = normalize(mean of class c's shots)`.
pub fn build_prototypes(shots: &[Vec<EmbeddingVector>]) -> Result<Vec<EmbeddingVector>> {
    let dim = shots
        .iter()
        .flatten()
        .next()
        .map(EmbeddingVector::dim)
        .ok_or_else(|| Error::EmptyClass("no shots supplied".into()))?;
    shots
        .iter()
        .enumerate()
        .map(|(c, class_shots)| {
            if class_shots.is_empty() {
                return Err(Error::EmptyClass(format!("class {c} has no shots")));
            }
            check_dims(dim, class_shots)?;
            let mut mean = vec![0.0; dim];
            for shot in class_shots {
                for (m, x) in mean.iter_mut().zip(shot.as_slice()) {
                    *m += x;
                }
            }
            let n = class_shots.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            normalize(&mean)
        })
        .collect()
}

/// A corpus word with its pseudo-token embedding and encoded text feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabularyEntry {
    pub token_id: String,
    pub token_embedding: Vec<f64>,
    pub text_feature: EmbeddingVector,
}

/// A mined negative: the vocabulary entry, its index in the source
/// vocabulary, and its distance to the ID prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinedNegative {
    pub vocab_index: usize,
    pub distance: f64,
    pub entry: VocabularyEntry,
}

/// The top-`L` negatives, sorted by distance descending (ties by vocabulary
/// order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticNegatives {
    entries: Vec<MinedNegative>,
}

impl StaticNegatives {
    pub fn entries(&self) -> &[MinedNegative] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn features(&self) -> impl Iterator<Item = &EmbeddingVector> {
        self.entries.iter().map(|m| &m.entry.text_feature)
    }

    pub fn distances(&self) -> Vec<f64> {
        self.entries.iter().map(|m| m.distance).collect()
    }
}

/// `d(y⁻) = (1/C) Σ_c (1 − cos(t_{y⁻}, μ_c))`, in `[0, 2]`.
pub fn negative_distance(candidate: &EmbeddingVector, model: &IdModel) -> Result<f64> {
    let mut total = 0.0;
    for mu in model.prototypes() {
        total += 1.0 - cosine(candidate, mu)?;
    }
    Ok(total / model.num_classes() as f64)
}

pub fn mine_negatives(
    vocabulary: &[VocabularyEntry],
    model: &IdModel,
    count: usize,
) -> Result<StaticNegatives> {
    if count == 0 || vocabulary.len() < count {
        return Err(Error::VocabularyTooSmall {
            available: vocabulary.len(),
            requested: count,
        });
    }
    let mut scored = vocabulary
        .iter()
        .enumerate()
        .map(|(i, entry)| Ok((i, negative_distance(&entry.text_feature, model)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let entries = scored
        .into_iter()
        .take(count)
        .map(|(vocab_index, distance)| MinedNegative {
            vocab_index,
            distance,
            entry: vocabulary[vocab_index].clone(),
        })
        .collect();
    Ok(StaticNegatives { entries })
}
