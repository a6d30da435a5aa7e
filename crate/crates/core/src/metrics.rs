//! AUROC and FPR95 with ID as the positive class (higher score = more ID).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::StreamResult;
use crate::error::{Error, Result};
use crate::scoring::Label;

fn check_scores(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() {
        return Err(Error::EmptyClass("no ID scores".into()));
    }
    if ood.is_empty() {
        return Err(Error::EmptyClass("no OOD scores".into()));
    }
    if id.iter().chain(ood).any(|x| x.is_nan()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

/// Probability that a random ID score exceeds a random OOD score, ties
/// counting one half, via Mann–Whitney midranks.
///
/// Ranks are kept doubled as integers, so the result equals the pairwise
/// count divided by `n·m` exactly.
///
/// ```
/// use negstream::metrics::auroc;
/// assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
/// assert_eq!(auroc(&[0.5], &[0.5]).unwrap(), 0.5);
/// ```
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_scores(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of doubled midranks of the ID scores
    let mut id_rank2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j, doubled midrank = i + 1 + j
        let mid2 = (i + 1 + j) as u128;
        let ids = all[i..j].iter().filter(|x| x.1).count() as u128;
        id_rank2 += mid2 * ids;
        i = j;
    }
    let (n, m) = (id.len() as u128, ood.len() as u128);
    // 2U = 2R − n(n+1)
    let u2 = id_rank2 - n * (n + 1);
    Ok(u2 as f64 / (2 * n * m) as f64)
}

/// Fraction of OOD scores at or above the largest threshold that keeps at
/// least 95% of ID scores at or above it.
///
/// ```
/// use negstream::metrics::fpr95;
/// assert_eq!(fpr95(&[1.0; 20], &[0.0; 20]).unwrap(), 0.0);
/// ```
pub fn fpr95(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_scores(id, ood)?;
    Ok(fpr_at_threshold(ood, tpr95_threshold(id)))
}

/// The `k`-th largest ID score with `k = ⌈0.95 n⌉`.
pub fn tpr95_threshold(id: &[f64]) -> f64 {
    let mut sorted = id.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = (95 * sorted.len()).div_ceil(100);
    sorted[k.max(1) - 1]
}

fn fpr_at_threshold(ood: &[f64], gamma: f64) -> f64 {
    ood.iter().filter(|&&s| s >= gamma).count() as f64 / ood.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub fpr95: f64,
    pub n_id: usize,
    pub n_ood: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_phase: Option<Vec<PhaseReport>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: usize,
    pub report: MetricReport,
}

impl MetricReport {
    pub fn from_scores(id: &[f64], ood: &[f64]) -> Result<Self> {
        Ok(Self {
            auroc: auroc(id, ood)?,
            fpr95: fpr95(id, ood)?,
            n_id: id.len(),
            n_ood: ood.len(),
            per_phase: None,
        })
    }

    /// Metrics over the final scores of `results`. With `per_phase`, also
    /// reports each phase that contains both ID and OOD samples.
    pub fn from_results(results: &[StreamResult], per_phase: bool) -> Result<Self> {
        let (id, ood) = split(results.iter());
        let mut report = Self::from_scores(&id, &ood)?;
        if per_phase {
            let mut phases: BTreeMap<usize, Vec<&StreamResult>> = BTreeMap::new();
            for r in results {
                phases.entry(r.phase).or_default().push(r);
            }
            let mut out = Vec::new();
            for (phase, rs) in phases {
                let (id, ood) = split(rs.into_iter());
                if !id.is_empty() && !ood.is_empty() {
                    out.push(PhaseReport {
                        phase,
                        report: Self::from_scores(&id, &ood)?,
                    });
                }
            }
            report.per_phase = Some(out);
        }
        Ok(report)
    }
}

fn split<'a>(results: impl Iterator<Item = &'a StreamResult>) -> (Vec<f64>, Vec<f64>) {
    let mut id = Vec::new();
    let mut ood = Vec::new();
    for r in results {
        match r.truth {
            Label::Id => id.push(r.final_score),
            Label::Ood => ood.push(r.final_score),
        }
    }
    (id, ood)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn pairwise(id: &[f64], ood: &[f64]) -> f64 {
        let mut twice = 0u64;
        for &a in id {
            for &b in ood {
                twice += if a > b { 2 } else if a == b { 1 } else { 0 };
            }
        }
        twice as f64 / (2 * id.len() * ood.len()) as f64
    }

    fn exhaustive_fpr95(id: &[f64], ood: &[f64]) -> f64 {
        let n = id.len();
        let mut best = f64::NEG_INFINITY;
        for &g in id {
            let kept = id.iter().filter(|&&s| s >= g).count();
            if 100 * kept >= 95 * n && g > best {
                best = g;
            }
        }
        ood.iter().filter(|&&s| s >= best).count() as f64 / ood.len() as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9; 5], &[0.1; 7]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[0.3; 4]).unwrap(), 0.5);
        assert!(matches!(auroc(&[], &[0.1]), Err(Error::EmptyClass(_))));
        let mut rng = Rng::new(3);
        let id: Vec<f64> = (0..20).map(|_| rng.uniform()).collect();
        let ood: Vec<f64> = (0..20).map(|_| rng.uniform() * 0.8).collect();
        assert_eq!(auroc(&id, &ood).unwrap(), pairwise(&id, &ood));
    }

    #[test]
    fn fpr95_examples() {
        assert_eq!(fpr95(&[1.0; 10], &[0.0; 10]).unwrap(), 0.0);
        let shared: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        assert_eq!(fpr95(&shared, &shared).unwrap(), 0.95);
        let mut rng = Rng::new(5);
        let id: Vec<f64> = (0..100).map(|_| 0.5 + 0.5 * rng.uniform()).collect();
        let ood: Vec<f64> = (0..100).map(|_| 0.5 * rng.uniform()).collect();
        assert_eq!(fpr95(&id, &ood).unwrap(), 0.0);
        assert!(matches!(fpr95(&[0.1], &[]), Err(Error::EmptyClass(_))));
    }

    #[test]
    fn phase_reports() {
        let r = |phase, truth, s| StreamResult {
            sample_id: String::new(),
            phase,
            truth,
            initial_score: s,
            final_score: s,
            potential_ood: false,
            accepted: false,
            bank_size_after: 0,
        };
        let results = vec![
            r(0, Label::Id, 0.9),
            r(0, Label::Ood, 0.1),
            r(1, Label::Id, 0.2),
            r(1, Label::Ood, 0.8),
            r(2, Label::Id, 0.5),
        ];
        let rep = MetricReport::from_results(&results, true).unwrap();
        assert_eq!((rep.n_id, rep.n_ood), (3, 2));
        let phases = rep.per_phase.unwrap();
        assert_eq!(phases.len(), 2);
        assert_eq!(phases[0].report.auroc, 1.0);
        assert_eq!(phases[1].report.auroc, 0.0);
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        // coarse values so ties are common
        prop::collection::vec((0u32..30).prop_map(|x| x as f64 / 10.0), 1..60)
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise(id in scores(), ood in scores()) {
            prop_assert_eq!(auroc(&id, &ood).unwrap(), pairwise(&id, &ood));
            let sum = auroc(&id, &ood).unwrap() + auroc(&ood, &id).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn fpr95_matches_exhaustive(id in scores(), ood in scores()) {
            prop_assert_eq!(fpr95(&id, &ood).unwrap(), exhaustive_fpr95(&id, &ood));
        }

        #[test]
        fn monotone_transform_invariance(id in scores(), ood in scores()) {
            let f = |x: &f64| (3.0 * x).exp() + 1.0;
            let (id2, ood2): (Vec<f64>, Vec<f64>) = (id.iter().map(f).collect(), ood.iter().map(f).collect());
            prop_assert_eq!(auroc(&id, &ood).unwrap(), auroc(&id2, &ood2).unwrap());
            prop_assert_eq!(fpr95(&id, &ood).unwrap(), fpr95(&id2, &ood2).unwrap());
        }

        #[test]
        fn fpr95_drops_as_ood_scores_drop(id in scores(), ood in scores(), shift in 0.0f64..2.0) {
            let lower: Vec<f64> = ood.iter().map(|x| x - shift).collect();
            prop_assert!(fpr95(&id, &lower).unwrap() <= fpr95(&id, &ood).unwrap());
        }
    }
}
