//! The streaming detector.
//!
//! Each sample is scored against the ID classes, the static negatives and the
//! current dynamic bank. A sample scoring below `β` is a potential OOD: its
//! image feature is inverted into a negative text feature which, if it is
//! separated from every ID prototype, is offered to the bank. The sample is
//! then re-scored against the possibly updated bank.

use serde::{Deserialize, Serialize};

use crate::bank::{
    id_separated_criterion, update, BankEntry, BufferState, NegativeBank, UpdateCase,
};
use crate::error::{Error, Result};
use crate::inversion::{invert, InversionConfig, TextEncoder};
use crate::negatives::{mine_negatives, IdModel, StaticNegatives, VocabularyEntry};
use crate::rng::{Rng, RngState};
use crate::scoring::{group_score_iter, make_grouping, Grouping, Label, ScoreConfig};
use crate::vector::EmbeddingVector;

/// When the negative grouping is redrawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Repermute {
    /// After every change to the bank.
    #[default]
    OnBankChange,
    /// At the start of every batch, plus whenever the bank size changes
    /// (a grouping must cover every negative exactly once).
    PerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Potential-OOD threshold on the current group score.
    pub beta: f64,
    pub score: ScoreConfig,
    pub inversion: InversionConfig,
    /// Number of static negatives mined from the vocabulary (`L`).
    pub static_count: usize,
    /// Bank capacity (`M`); the buffer has the same capacity.
    pub capacity: usize,
    /// Fraction of the overflow pool merged back during a Flash.
    pub rho: f64,
    /// Keep displaced candidates in a buffer. When off, they are dropped.
    pub buffer: bool,
    pub batch_size: usize,
    pub repermute: Repermute,
}

impl Default for EngineConfig {
    /// Desk-scale defaults: `L = M = 50`.
    fn default() -> Self {
        Self {
            beta: 0.3,
            score: ScoreConfig::default(),
            inversion: InversionConfig::default(),
            static_count: 50,
            capacity: 50,
            rho: 0.5,
            buffer: true,
            batch_size: 256,
            repermute: Repermute::OnBankChange,
        }
    }
}

impl EngineConfig {
    /// Full-scale settings: `L = M = 2000`.
    pub fn paper() -> Self {
        Self {
            static_count: 2000,
            capacity: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!("beta must be in [0, 1], got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidRho(self.rho));
        }
        if self.capacity == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("capacity and batch_size must be >= 1".into()));
        }
        self.score.validate()?;
        self.inversion.validate()?;
        if self.static_count < self.score.groups {
            return Err(Error::TooFewNegatives {
                negatives: self.static_count,
                groups: self.score.groups,
            });
        }
        Ok(())
    }
}

/// One test sample. `truth`, `phase` and `class` are evaluation metadata and
/// never influence scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSample {
    pub id: String,
    pub embedding: EmbeddingVector,
    pub truth: Label,
    pub phase: usize,
    pub class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamResult {
    pub sample_id: String,
    pub phase: usize,
    pub truth: Label,
    pub initial_score: f64,
    /// Score after any bank update caused by this sample.
    pub final_score: f64,
    pub potential_ood: bool,
    /// Whether a learned negative from this sample was offered to the bank.
    pub accepted: bool,
    pub bank_size_after: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    pub processed: u64,
    pub potential_ood: u64,
    pub inversion_failures: u64,
    pub rejected: u64,
    pub accepted: u64,
    pub flashes: u64,
    pub regroupings: u64,
}

/// Resumable engine state, written between temporal-shift phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub bank: NegativeBank,
    pub buffer: Option<BufferState>,
    pub grouping: Grouping,
    pub rng: RngState,
    pub next_insertion: u64,
    pub stats: EngineStats,
}

#[derive(Clone, Debug)]
pub struct EngineState {
    config: EngineConfig,
    model: IdModel,
    static_negatives: StaticNegatives,
    bank: NegativeBank,
    buffer: Option<BufferState>,
    grouping: Grouping,
    rng: Rng,
    next_insertion: u64,
    stats: EngineStats,
}

impl EngineState {
    /// Builds prototypes, mines static negatives, and starts from an empty
    /// bank and buffer.
    pub fn setup(
        shots: &[Vec<EmbeddingVector>],
        class_names: Vec<String>,
        class_text: Vec<EmbeddingVector>,
        vocabulary: &[VocabularyEntry],
        config: EngineConfig,
        seed: u64,
    ) -> Result<Self> {
        let model = IdModel::from_shots(class_names, class_text, shots)?;
        Self::with_model(model, vocabulary, config, seed)
    }

    pub fn with_model(
        model: IdModel,
        vocabulary: &[VocabularyEntry],
        config: EngineConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let static_negatives = mine_negatives(vocabulary, &model, config.static_count)?;
        let mut rng = Rng::new(seed);
        let grouping = draw_grouping(static_negatives.len(), &config.score, &mut rng)?;
        let buffer = if config.buffer {
            Some(BufferState::new(config.capacity, config.rho)?)
        } else {
            None
        };
        Ok(Self {
            bank: NegativeBank::new(config.capacity)?,
            buffer,
            grouping,
            rng,
            next_insertion: 0,
            stats: EngineStats::default(),
            config,
            model,
            static_negatives,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn model(&self) -> &IdModel {
        &self.model
    }

    pub fn static_negatives(&self) -> &StaticNegatives {
        &self.static_negatives
    }

    pub fn bank(&self) -> &NegativeBank {
        &self.bank
    }

    pub fn buffer(&self) -> Option<&BufferState> {
        self.buffer.as_ref()
    }

    pub fn grouping(&self) -> &Grouping {
        &self.grouping
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    fn negative_count(&self) -> usize {
        self.static_negatives.len() + self.bank.len()
    }

    /// Group score of `v` against the static negatives followed by the bank.
    pub fn score(&self, v: &EmbeddingVector) -> Result<f64> {
        group_score_iter(
            v,
            &self.model,
            self.static_negatives.features().chain(self.bank.features()),
            &self.grouping,
            &self.config.score,
        )
    }

    fn regroup(&mut self) -> Result<()> {
        self.grouping = draw_grouping(self.negative_count(), &self.config.score, &mut self.rng)?;
        self.stats.regroupings += 1;
        Ok(())
    }

    /// Scores one sample, possibly learns a negative from it, and re-scores.
    pub fn process<E: TextEncoder + ?Sized>(
        &mut self,
        sample: &StreamSample,
        encoder: &E,
    ) -> Result<StreamResult> {
        if self.config.repermute == Repermute::PerBatch
            && self.stats.processed > 0
            && self.stats.processed.is_multiple_of(self.config.batch_size as u64)
        {
            self.regroup()?;
        }
        self.stats.processed += 1;

        let v = &sample.embedding;
        let initial_score = self.score(v)?;
        let potential_ood = initial_score < self.config.beta;
        let mut accepted = false;
        if potential_ood {
            self.stats.potential_ood += 1;
            accepted = self.learn(sample, encoder)?;
        }
        let final_score = self.score(v)?;
        Ok(StreamResult {
            sample_id: sample.id.clone(),
            phase: sample.phase,
            truth: sample.truth,
            initial_score,
            final_score,
            potential_ood,
            accepted,
            bank_size_after: self.bank.len(),
        })
    }

    /// Inverts `sample` and offers the result to the bank. Returns whether
    /// the candidate passed the separation criterion.
    fn learn<E: TextEncoder + ?Sized>(&mut self, sample: &StreamSample, encoder: &E) -> Result<bool> {
        let inversion = match invert(
            &sample.embedding,
            encoder,
            &self.model,
            &self.config.inversion,
            &self.static_negatives,
            &mut self.rng,
        ) {
            Ok(inv) => inv,
            Err(Error::NonFiniteLoss { .. } | Error::NonFinite | Error::ZeroVector) => {
                self.stats.inversion_failures += 1;
                return Ok(false);
            }
            Err(e) => return Err(e),
        };
        if !id_separated_criterion(&inversion.feature, &self.model)? {
            self.stats.rejected += 1;
            return Ok(false);
        }
        let entry = BankEntry::new(
            inversion.feature,
            &self.model,
            sample.id.clone(),
            self.next_insertion,
        )?;
        self.next_insertion += 1;
        self.stats.accepted += 1;
        let size_before = self.bank.len();
        let outcome = update(&mut self.bank, self.buffer.as_mut(), entry, &mut self.rng)?;
        if outcome.case == UpdateCase::Flash {
            self.stats.flashes += 1;
        }
        let must_regroup = match self.config.repermute {
            Repermute::OnBankChange => outcome.changed,
            Repermute::PerBatch => self.bank.len() != size_before,
        };
        if must_regroup {
            self.regroup()?;
        }
        Ok(true)
    }

    /// Processes `stream` strictly in order.
    pub fn run_stream<E: TextEncoder + ?Sized>(
        &mut self,
        stream: &[StreamSample],
        encoder: &E,
    ) -> Result<Vec<StreamResult>> {
        stream.iter().map(|s| self.process(s, encoder)).collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            bank: self.bank.clone(),
            buffer: self.buffer.clone(),
            grouping: self.grouping.clone(),
            rng: self.rng.state(),
            next_insertion: self.next_insertion,
            stats: self.stats,
        }
    }

    /// Resumes from `checkpoint`, which must match this engine's model and
    /// configuration.
    pub fn restore(&mut self, checkpoint: Checkpoint) -> Result<()> {
        let Checkpoint {
            bank,
            buffer,
            grouping,
            rng,
            next_insertion,
            stats,
        } = checkpoint;
        if bank.capacity() != self.config.capacity {
            return Err(Error::Invariant(format!(
                "checkpoint bank capacity {} does not match configured {}",
                bank.capacity(),
                self.config.capacity
            )));
        }
        let bank = NegativeBank::from_entries(bank.entries().to_vec(), bank.capacity())?;
        match (&buffer, self.config.buffer) {
            (Some(b), true) if b.capacity() == self.config.capacity => {
                BufferState::from_entries(b.entries().to_vec(), b.capacity(), b.rho())?;
            }
            (None, false) => {}
            _ => {
                return Err(Error::Invariant(
                    "checkpoint buffer does not match the buffer configuration".into(),
                ))
            }
        }
        for entry in bank.entries().iter().chain(buffer.iter().flat_map(|b| b.entries())) {
            let expect = crate::bank::delta(&entry.feature, &self.model)?;
            if (expect - entry.delta).abs() > 1e-9 {
                return Err(Error::Invariant(format!(
                    "stored delta {} of entry {} disagrees with the ID model ({expect})",
                    entry.delta, entry.insertion_index
                )));
            }
            if entry.insertion_index >= next_insertion {
                return Err(Error::Invariant("insertion counter is behind the bank".into()));
            }
        }
        if grouping.num_groups() != self.config.score.groups {
            return Err(Error::Invariant("checkpoint grouping has the wrong group count".into()));
        }
        grouping
            .validate(self.static_negatives.len() + bank.len())
            .map_err(|e| Error::Invariant(e.to_string()))?;
        self.bank = bank;
        self.buffer = buffer;
        self.grouping = grouping;
        self.rng = Rng::from_state(rng);
        self.next_insertion = next_insertion;
        self.stats = stats;
        Ok(())
    }
}

fn draw_grouping(n: usize, cfg: &ScoreConfig, rng: &mut Rng) -> Result<Grouping> {
    if cfg.shuffle {
        make_grouping(n, cfg.groups, rng)
    } else {
        Grouping::contiguous(n, cfg.groups)
    }
}
