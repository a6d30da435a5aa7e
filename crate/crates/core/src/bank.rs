//! The dynamic negative bank and its overflow buffer.
//!
//! Accepted negative features enter a bank of capacity `M`. Once the bank is
//! full, each new candidate competes on `Δ` (mean `1 + cos` to the ID
//! prototypes, lower is better); the loser goes to a buffer. When the buffer
//! is full too, a Flash merges the best part of the buffer back into the bank
//! and randomly resamples `M` entries.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::prototype_separation;
use crate::negatives::IdModel;
use crate::rng::Rng;
use crate::vector::{cosine, EmbeddingVector};

/// Slack added before flooring `ρ · |pool|` so that e.g. `0.5 · 4` is not
/// rounded down to 1 by representation error.
const TOP_FLOOR_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub feature: EmbeddingVector,
    pub delta: f64,
    pub origin: String,
    pub insertion_index: u64,
}

impl BankEntry {
    pub fn new(
        feature: EmbeddingVector,
        model: &IdModel,
        origin: impl Into<String>,
        insertion_index: u64,
    ) -> Result<Self> {
        Ok(Self {
            delta: delta(&feature, model)?,
            feature,
            origin: origin.into(),
            insertion_index,
        })
    }

    /// Orders by `Δ` ascending, then by insertion index ascending.
    fn rank(&self, other: &Self) -> Ordering {
        self.delta
            .total_cmp(&other.delta)
            .then(self.insertion_index.cmp(&other.insertion_index))
    }
}

/// `Δ = (1/C) Σ_c (1 + cos(t⁻, μ_c))`, in `[0, 2]`.
pub fn delta(t_neg: &EmbeddingVector, model: &IdModel) -> Result<f64> {
    prototype_separation(t_neg, model)
}

/// True iff `cos(t⁻, μ_c) < cos(t_c, μ_c)` for every class `c`: the learned
/// negative is less aligned with each prototype than that class's own text.
pub fn id_separated_criterion(t_neg: &EmbeddingVector, model: &IdModel) -> Result<bool> {
    for (mu, text) in model.prototypes().iter().zip(model.class_text()) {
        if cosine(t_neg, mu)? >= cosine(text, mu)? {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeBank {
    entries: Vec<BankEntry>,
    capacity: usize,
}

impl NegativeBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("bank capacity must be at least 1".into()));
        }
        Ok(Self {
            entries: Vec::new(),
            capacity,
        })
    }

    /// Rebuilds a bank from stored entries, checking capacity and order.
    pub fn from_entries(entries: Vec<BankEntry>, capacity: usize) -> Result<Self> {
        let mut bank = Self::new(capacity)?;
        if entries.len() > capacity {
            return Err(Error::Invariant(format!(
                "bank holds {} entries but capacity is {capacity}",
                entries.len()
            )));
        }
        if entries.windows(2).any(|w| w[0].insertion_index >= w[1].insertion_index) {
            return Err(Error::Invariant("bank entries are not in insertion order".into()));
        }
        bank.entries = entries;
        Ok(bank)
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn features(&self) -> impl Iterator<Item = &EmbeddingVector> {
        self.entries.iter().map(|e| &e.feature)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferState {
    entries: Vec<BankEntry>,
    capacity: usize,
    rho: f64,
}

impl BufferState {
    pub fn new(capacity: usize, rho: f64) -> Result<Self> {
        check_rho(rho)?;
        Ok(Self {
            entries: Vec::new(),
            capacity,
            rho,
        })
    }

    pub fn from_entries(entries: Vec<BankEntry>, capacity: usize, rho: f64) -> Result<Self> {
        let mut buffer = Self::new(capacity, rho)?;
        if entries.len() > capacity {
            return Err(Error::Invariant(format!(
                "buffer holds {} entries but capacity is {capacity}",
                entries.len()
            )));
        }
        buffer.entries = entries;
        Ok(buffer)
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rho) {
        Ok(())
    } else {
        Err(Error::InvalidRho(rho))
    }
}

/// Which branch of the update rule ran.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateCase {
    /// Bank below capacity: the candidate is appended.
    Fill,
    /// Bank full, buffer not: the `Δ`-worst entry moves to the buffer (or is
    /// dropped when the buffer is disabled).
    Overflow,
    /// Bank and buffer full: Flash merge, buffer cleared.
    Flash,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateOutcome {
    pub case: UpdateCase,
    /// Whether the set of bank entries changed.
    pub changed: bool,
    /// The entry left outside the top-`M` selection, if the bank was full.
    pub displaced: Option<BankEntry>,
}

/// Applies one accepted candidate to the bank and, if enabled, the buffer.
///
/// Flash merges the top slice of the buffer with the bank *after* the top-`M`
/// selection, so the new candidate is kept whenever it ranks into the bank
/// and the displaced entry can only re-enter through the buffer slice.
pub fn update(
    bank: &mut NegativeBank,
    buffer: Option<&mut BufferState>,
    candidate: BankEntry,
    rng: &mut Rng,
) -> Result<UpdateOutcome> {
    if bank.entries.len() < bank.capacity {
        bank.entries.push(candidate);
        return Ok(UpdateOutcome {
            case: UpdateCase::Fill,
            changed: true,
            displaced: None,
        });
    }

    let before: Vec<u64> = bank.entries.iter().map(|e| e.insertion_index).collect();
    let mut pool = std::mem::take(&mut bank.entries);
    pool.push(candidate);
    let worst = pool
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.rank(b))
        .map(|(i, _)| i)
        .expect("pool is non-empty");
    let displaced = pool.remove(worst);
    pool.sort_by_key(|e| e.insertion_index);
    bank.entries = pool;

    let case = match buffer {
        None => UpdateCase::Overflow,
        Some(buffer) if buffer.entries.len() < buffer.capacity => {
            buffer.entries.push(displaced.clone());
            UpdateCase::Overflow
        }
        Some(buffer) => {
            let mut overflow_pool = std::mem::take(&mut buffer.entries);
            overflow_pool.push(displaced.clone());
            *bank = flash(bank, overflow_pool, buffer.rho, rng)?;
            UpdateCase::Flash
        }
    };
    let after: Vec<u64> = bank.entries.iter().map(|e| e.insertion_index).collect();
    Ok(UpdateOutcome {
        case,
        changed: before != after,
        displaced: Some(displaced),
    })
}

/// Number of pool entries a Flash keeps: `⌊ρ · |pool|⌋`.
pub fn flash_keep_count(pool_len: usize, rho: f64) -> usize {
    ((rho * pool_len as f64 + TOP_FLOOR_SLACK).floor() as usize).min(pool_len)
}

/// Merges the `⌊ρ · |pool|⌋` lowest-`Δ` pool entries into `bank` and draws a
/// uniform `M`-subset of the union without replacement. The result is kept
/// in insertion order.
pub fn flash(
    bank: &NegativeBank,
    mut overflow_pool: Vec<BankEntry>,
    rho: f64,
    rng: &mut Rng,
) -> Result<NegativeBank> {
    check_rho(rho)?;
    overflow_pool.sort_by(BankEntry::rank);
    overflow_pool.truncate(flash_keep_count(overflow_pool.len(), rho));
    let mut merged = bank.entries.clone();
    merged.extend(overflow_pool);
    rng.sample_without_replacement(&mut merged, bank.capacity);
    merged.sort_by_key(|e| e.insertion_index);
    Ok(NegativeBank {
        entries: merged,
        capacity: bank.capacity,
    })
}

/// Bank features in insertion order.
pub fn snapshot_features(bank: &NegativeBank) -> Vec<EmbeddingVector> {
    bank.features().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::normalize;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn unit(v: &[f64]) -> EmbeddingVector {
        normalize(v).unwrap()
    }

    fn entry(delta: f64, idx: u64) -> BankEntry {
        BankEntry {
            feature: unit(&[1.0, idx as f64]),
            delta,
            origin: format!("s{idx}"),
            insertion_index: idx,
        }
    }

    fn indices(entries: &[BankEntry]) -> Vec<u64> {
        entries.iter().map(|e| e.insertion_index).collect()
    }

    fn axis_model() -> IdModel {
        let protos = vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0])];
        IdModel::new(vec!["a".into(), "b".into()], protos.clone(), protos).unwrap()
    }

    #[test]
    fn delta_examples() {
        let m = IdModel::new(
            vec!["a".into()],
            vec![unit(&[1.0, 0.0])],
            vec![unit(&[1.0, 0.0])],
        )
        .unwrap();
        assert_eq!(delta(&unit(&[-1.0, 0.0]), &m).unwrap(), 0.0);
        assert_eq!(delta(&unit(&[0.0, 1.0]), &m).unwrap(), 1.0);
        assert_eq!(delta(&unit(&[1.0, 0.0]), &m).unwrap(), 2.0);
    }

    #[test]
    fn criterion_examples() {
        let m = axis_model();
        // text equals prototype here, so the class text itself fails strictly
        assert!(!id_separated_criterion(&m.class_text()[0], &m).unwrap());
        assert!(id_separated_criterion(&unit(&[-1.0, -1.0, 0.0]), &m).unwrap());

        let mut rng = Rng::new(9);
        let d = 6;
        let rand_unit = |rng: &mut Rng| normalize(&rng.normal_vec(d, 1.0)).unwrap();
        let protos: Vec<_> = (0..4).map(|_| rand_unit(&mut rng)).collect();
        let text: Vec<_> = (0..4).map(|_| rand_unit(&mut rng)).collect();
        let m = IdModel::new((0..4).map(|i| i.to_string()).collect(), text.clone(), protos.clone())
            .unwrap();
        for _ in 0..200 {
            let t = rand_unit(&mut rng);
            let brute = (0..4).all(|c| t.dot(&protos[c]) < text[c].dot(&protos[c]));
            assert_eq!(id_separated_criterion(&t, &m).unwrap(), brute);
        }
    }

    #[test]
    fn fill_then_overflow() {
        let mut rng = Rng::new(1);
        let mut bank = NegativeBank::new(2).unwrap();
        let mut buf = BufferState::new(2, 0.5).unwrap();
        let out = update(&mut bank, Some(&mut buf), entry(0.5, 0), &mut rng).unwrap();
        assert_eq!(out.case, UpdateCase::Fill);
        assert_eq!(indices(bank.entries()), vec![0]);
        assert!(buf.is_empty());
    }

    #[test]
    fn worse_candidate_goes_straight_to_buffer() {
        let mut rng = Rng::new(1);
        let mut bank = NegativeBank::new(5).unwrap();
        let mut buf = BufferState::new(5, 0.5).unwrap();
        for (i, d) in [0.3, 0.1, 0.4, 0.2, 0.5].into_iter().enumerate() {
            update(&mut bank, Some(&mut buf), entry(d, i as u64), &mut rng).unwrap();
        }
        let before = bank.clone();
        let out = update(&mut bank, Some(&mut buf), entry(0.9, 5), &mut rng).unwrap();
        assert_eq!(out.case, UpdateCase::Overflow);
        assert!(!out.changed);
        assert_eq!(bank, before);
        assert_eq!(indices(buf.entries()), vec![5]);

        // a better candidate displaces the Δ = 0.5 member
        let out = update(&mut bank, Some(&mut buf), entry(0.0, 6), &mut rng).unwrap();
        assert!(out.changed);
        assert_eq!(out.displaced.unwrap().insertion_index, 4);
        assert_eq!(indices(bank.entries()), vec![0, 1, 2, 3, 6]);
        assert_eq!(indices(buf.entries()), vec![5, 4]);
    }

    #[test]
    fn delta_ties_keep_the_older_entry() {
        let mut rng = Rng::new(1);
        let mut bank = NegativeBank::new(2).unwrap();
        update(&mut bank, None, entry(0.5, 0), &mut rng).unwrap();
        update(&mut bank, None, entry(0.5, 1), &mut rng).unwrap();
        let out = update(&mut bank, None, entry(0.5, 2), &mut rng).unwrap();
        assert_eq!(out.displaced.unwrap().insertion_index, 2);
        assert_eq!(indices(bank.entries()), vec![0, 1]);
    }

    #[test]
    fn full_buffer_triggers_flash() {
        let mut rng = Rng::new(4);
        let mut bank = NegativeBank::new(2).unwrap();
        let mut buf = BufferState::new(2, 0.5).unwrap();
        let mut last = None;
        for i in 0..5u64 {
            last = Some(update(&mut bank, Some(&mut buf), entry(0.1 * i as f64, i), &mut rng).unwrap());
        }
        let out = last.unwrap();
        assert_eq!(out.case, UpdateCase::Flash);
        assert!(buf.is_empty());
        assert_eq!(bank.len(), 2);
    }

    #[test]
    fn disabled_buffer_drops_overflow() {
        let mut rng = Rng::new(4);
        let mut bank = NegativeBank::new(2).unwrap();
        for i in 0..10u64 {
            let out = update(&mut bank, None, entry(1.0 - 0.05 * i as f64, i), &mut rng).unwrap();
            assert_ne!(out.case, UpdateCase::Flash);
        }
        assert_eq!(indices(bank.entries()), vec![8, 9]);
    }

    #[test]
    fn flash_with_rho_zero_keeps_bank() {
        let mut rng = Rng::new(2);
        let bank = NegativeBank::from_entries((0..4).map(|i| entry(0.5, i)).collect(), 4).unwrap();
        let pool = (10..15).map(|i| entry(0.0, i)).collect();
        let out = flash(&bank, pool, 0.0, &mut rng).unwrap();
        assert_eq!(out, bank);
        assert!(matches!(
            flash(&bank, vec![], 1.5, &mut rng),
            Err(Error::InvalidRho(_))
        ));
    }

    #[test]
    fn flash_two_of_three_enumeration() {
        let bank = NegativeBank::from_entries(vec![entry(0.2, 0), entry(0.3, 1)], 2).unwrap();
        let pool = vec![entry(0.5, 10), entry(0.1, 11), entry(0.9, 12)];
        assert_eq!(flash_keep_count(3, 0.5), 1);
        let mut seen = std::collections::BTreeMap::new();
        for seed in 0..3000 {
            let out = flash(&bank, pool.clone(), 0.5, &mut Rng::new(seed)).unwrap();
            *seen.entry(indices(out.entries())).or_insert(0usize) += 1;
        }
        let outcomes: Vec<_> = seen.keys().cloned().collect();
        assert_eq!(outcomes, vec![vec![0, 1], vec![0, 11], vec![1, 11]]);
        for count in seen.values() {
            assert!((800..1200).contains(count), "{seen:?}");
        }
    }

    #[test]
    fn flash_full_merge_is_uniform() {
        let m = 4usize;
        let bank =
            NegativeBank::from_entries((0..m as u64).map(|i| entry(0.9, i)).collect(), m).unwrap();
        let pool: Vec<_> = (0..=m as u64).map(|i| entry(0.1, 100 + i)).collect();
        let trials = 10_000;
        let mut hits = vec![0usize; m + 1];
        for seed in 0..trials {
            let out = flash(&bank, pool.clone(), 1.0, &mut Rng::new(seed)).unwrap();
            for e in out.entries() {
                if e.insertion_index >= 100 {
                    hits[(e.insertion_index - 100) as usize] += 1;
                }
            }
        }
        // each of 2M+1 entries is kept with probability M/(2M+1)
        let p = m as f64 / (2 * m + 1) as f64;
        let mean = trials as f64 * p;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for h in hits {
            assert!((h as f64 - mean).abs() <= 3.0 * sd, "{h} vs {mean} ± {sd}");
        }
    }

    #[test]
    fn snapshot_follows_displacement() {
        let mut rng = Rng::new(0);
        let mut bank = NegativeBank::new(3).unwrap();
        assert!(snapshot_features(&bank).is_empty());
        for i in 0..3 {
            update(&mut bank, None, entry(0.5 - 0.1 * i as f64, i), &mut rng).unwrap();
        }
        let snap = snapshot_features(&bank);
        assert_eq!(snap.len(), 3);
        assert_eq!(snap[0], entry(0.0, 0).feature);
        update(&mut bank, None, entry(0.0, 3), &mut rng).unwrap();
        let snap = snapshot_features(&bank);
        assert!(!snap.contains(&entry(0.0, 0).feature));
        assert_eq!(snap.last(), Some(&entry(0.0, 3).feature));
    }

    #[test]
    fn from_entries_checks_shape() {
        assert!(NegativeBank::from_entries(vec![entry(0.1, 0), entry(0.2, 1)], 1).is_err());
        assert!(NegativeBank::from_entries(vec![entry(0.1, 1), entry(0.2, 0)], 2).is_err());
        assert!(NegativeBank::new(0).is_err());
    }

    proptest! {
        #[test]
        fn overflow_conserves_entries(
            deltas in prop::collection::vec(0.0f64..2.0, 2..40),
            cap in 1usize..8,
        ) {
            let mut rng = Rng::new(0);
            let mut bank = NegativeBank::new(cap).unwrap();
            let mut buf = BufferState::new(cap, 0.5).unwrap();
            for (i, d) in deltas.into_iter().enumerate() {
                let mut old: Vec<u64> = indices(bank.entries());
                let old_buf = buf.len();
                let out = update(&mut bank, Some(&mut buf), entry(d, i as u64), &mut rng).unwrap();
                prop_assert!(bank.len() <= cap && buf.len() <= cap);
                if !buf.is_empty() { prop_assert_eq!(bank.len(), cap); }
                if out.case == UpdateCase::Overflow {
                    let displaced = out.displaced.unwrap();
                    old.push(i as u64);
                    let mut now = indices(bank.entries());
                    now.push(displaced.insertion_index);
                    old.sort();
                    now.sort();
                    prop_assert_eq!(old, now);
                    prop_assert!(bank.entries().iter().all(|e| e.delta <= displaced.delta));
                    prop_assert_eq!(buf.len(), old_buf + 1);
                }
                if out.case == UpdateCase::Flash { prop_assert!(buf.is_empty()); }
            }
        }
    }
}
