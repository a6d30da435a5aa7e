//! Numerical verification of the balanced-grouping theorem.
//!
//! With a fixed positive activation `P` and a fixed total negative activation
//! spread over `G` groups, the group score `(1/G) Σ_g P/(P + A_g)` is Schur
//! convex in `A`: a more balanced activation vector (one majorized by another)
//! never scores higher. Randomly grouping negatives therefore pulls OOD scores
//! down. Everything here checks that claim numerically.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Slack on the score ordering; absorbs summation error only.
pub const ORDER_TOLERANCE: f64 = 1e-12;

/// Maximum relative disagreement between two totals considered equal.
pub const TOTAL_TOLERANCE: f64 = 1e-9;

/// Non-negative group activations `A_g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationVector(Vec<f64>);

impl ActivationVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyVector);
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        if values.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidConfig("activations must be non-negative".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    fn sorted_desc(&self) -> Vec<f64> {
        let mut v = self.0.clone();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }
}

/// True iff `a` majorizes `b`, i.e. `b` is at least as balanced: every
/// partial sum of `b` sorted descending is at most the matching one of `a`.
///
/// ```
/// use negstream::theorem::{majorizes, ActivationVector};
/// let a = ActivationVector::new(vec![2.0, 1.0, 0.0]).unwrap();
/// let b = ActivationVector::new(vec![1.5, 1.5, 0.0]).unwrap();
/// assert!(majorizes(&a, &b).unwrap());
/// assert!(!majorizes(&b, &a).unwrap());
/// ```
pub fn majorizes(a: &ActivationVector, b: &ActivationVector) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (ta, tb) = (a.total(), b.total());
    let scale = ta.abs().max(tb.abs()).max(1.0);
    if (ta - tb).abs() > TOTAL_TOLERANCE * scale {
        return Err(Error::TotalMismatch { left: ta, right: tb });
    }
    let (sa, sb) = (a.sorted_desc(), b.sorted_desc());
    let (mut pa, mut pb) = (0.0, 0.0);
    for m in 0..a.len() - 1 {
        pa += sa[m];
        pb += sb[m];
        if pb > pa + ORDER_TOLERANCE * scale {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `φ(a) = P / (P + a)`.
pub fn phi(p: f64, a: f64) -> f64 {
    p / (p + a)
}

/// `(1/G) Σ_g P / (P + A_g)`.
pub fn mean_score(p: f64, a: &ActivationVector) -> Result<f64> {
    if !(p.is_finite() && p > 0.0) {
        return Err(Error::NonPositiveP(p));
    }
    Ok(a.values().iter().map(|&x| phi(p, x)).sum::<f64>() / a.len() as f64)
}

/// Moves `delta` from entry `from` to entry `to`. A Robin Hood transfer
/// requires `values[from] ≥ values[to]` and `0 ≤ delta ≤ (values[from] −
/// values[to]) / 2`, which makes the result majorized by the input.
pub fn transfer(values: &mut [f64], from: usize, to: usize, delta: f64) {
    values[from] -= delta;
    values[to] += delta;
}

/// `D a` for a random doubly stochastic `D`, built as a convex mixture of
/// random permutation matrices; the result is majorized by `a`.
pub fn doubly_stochastic_mix(a: &[f64], permutations: usize, rng: &mut Rng) -> Vec<f64> {
    let weights: Vec<f64> = (0..permutations).map(|_| rng.exponential()).collect();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; a.len()];
    let mut perm: Vec<usize> = (0..a.len()).collect();
    for w in weights {
        rng.shuffle(&mut perm);
        for (o, &j) in out.iter_mut().zip(&perm) {
            *o += w / total * a[j];
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremConfig {
    /// Randomized pairs per group count.
    pub trials: usize,
    pub groups: Vec<usize>,
    /// Robin Hood transfers applied per trial.
    pub transfers: usize,
    /// Side length of the two-point lemma grid.
    pub grid: usize,
    /// Points sampled for the convexity check.
    pub convexity_points: usize,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self {
            trials: 20_000,
            groups: vec![2, 3, 5, 8, 10],
            transfers: 4,
            grid: 100,
            convexity_points: 1_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    /// A balancing transfer raised the score.
    Transfer,
    /// `a` majorizes `b` but `b` scored higher.
    Ordering,
    /// A pair built to be majorized was not recognized as such.
    Majorization,
    /// The two-point inequality failed (or an equalizing move was not strict).
    TwoPoint,
    /// A second difference of `φ` was not positive.
    Convexity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub p: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub score_a: f64,
    pub score_b: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub pairs_checked: usize,
    pub majorizing_random_pairs: usize,
    pub transfers_checked: usize,
    pub lemma_points: usize,
    pub convexity_points: usize,
    pub violation_count: usize,
    /// First violations found, with their inputs.
    pub violations: Vec<Violation>,
}

const MAX_DUMPED: usize = 20;

impl TheoremReport {
    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }

    fn record(&mut self, v: Violation) {
        self.violation_count += 1;
        if self.violations.len() < MAX_DUMPED {
            self.violations.push(v);
        }
    }
}

fn draw_p(rng: &mut Rng) -> f64 {
    10f64.powf(rng.uniform() * 6.0 - 3.0)
}

fn draw_activations(g: usize, p: f64, rng: &mut Rng) -> Vec<f64> {
    // activations on the scale of P, with exponential entries for heavy skew
    let scale = p * 10f64.powf(rng.uniform() * 4.0 - 2.0);
    (0..g).map(|_| rng.exponential() * scale).collect()
}

fn check_pair(
    report: &mut TheoremReport,
    kind: ViolationKind,
    p: f64,
    a: &ActivationVector,
    b: &ActivationVector,
) -> Result<()> {
    let (sa, sb) = (mean_score(p, a)?, mean_score(p, b)?);
    if sb > sa + ORDER_TOLERANCE {
        report.record(Violation {
            kind,
            p,
            a: a.values().to_vec(),
            b: b.values().to_vec(),
            score_a: sa,
            score_b: sb,
        });
    }
    Ok(())
}

/// Randomized search for counterexamples to the balanced-grouping ordering.
///
/// For each group count and trial: a chain of random Robin Hood transfers
/// must never raise the score; a doubly stochastic mix of the vector must be
/// recognized as majorized and must not score higher; and an independent
/// random vector rescaled to the same total is checked whenever majorization
/// happens to hold. Also checks the two-point lemma on a grid and the sign of
/// second differences of `φ`.
pub fn verify_theorem(cfg: &TheoremConfig, rng: &mut Rng) -> Result<TheoremReport> {
    if cfg.trials == 0 {
        return Err(Error::InvalidConfig("verify-theorem needs at least one trial".into()));
    }
    if cfg.groups.is_empty() || cfg.groups.contains(&0) {
        return Err(Error::InvalidConfig("group counts must be positive".into()));
    }
    let mut report = TheoremReport::default();
    for &g in &cfg.groups {
        for _ in 0..cfg.trials {
            let p = draw_p(rng);
            let start = draw_activations(g, p, rng);

            // Robin Hood chain
            let mut current = start.clone();
            for _ in 0..cfg.transfers {
                if g < 2 {
                    break;
                }
                let i = rng.below(g);
                let j = (i + 1 + rng.below(g - 1)) % g;
                let (from, to) = if current[i] >= current[j] { (i, j) } else { (j, i) };
                let delta = rng.uniform() * (current[from] - current[to]) / 2.0;
                let mut next = current.clone();
                transfer(&mut next, from, to, delta);
                let (a, b) = (ActivationVector::new(current)?, ActivationVector::new(next)?);
                check_pair(&mut report, ViolationKind::Transfer, p, &a, &b)?;
                report.transfers_checked += 1;
                current = b.0;
            }

            // doubly stochastic pair
            let a = ActivationVector::new(start)?;
            let b = ActivationVector::new(doubly_stochastic_mix(a.values(), 3, rng))?;
            if !majorizes(&a, &b)? {
                report.record(Violation {
                    kind: ViolationKind::Majorization,
                    p,
                    a: a.values().to_vec(),
                    b: b.values().to_vec(),
                    score_a: mean_score(p, &a)?,
                    score_b: mean_score(p, &b)?,
                });
            }
            check_pair(&mut report, ViolationKind::Ordering, p, &a, &b)?;
            report.pairs_checked += 1;

            // independent pair, same total
            let raw = draw_activations(g, p, rng);
            let raw_total: f64 = raw.iter().sum();
            if raw_total > 0.0 {
                let c = ActivationVector::new(
                    raw.iter().map(|x| x * a.total() / raw_total).collect(),
                )?;
                for (x, y) in [(&a, &c), (&c, &a)] {
                    if majorizes(x, y)? {
                        report.majorizing_random_pairs += 1;
                        check_pair(&mut report, ViolationKind::Ordering, p, x, y)?;
                    }
                }
                report.pairs_checked += 1;
            }
        }
    }
    check_two_point_lemma(cfg.grid, &mut report);
    check_convexity(cfg.convexity_points, rng, &mut report);
    Ok(report)
}

/// `φ(x−δ) + φ(y+δ) ≤ φ(x) + φ(y)` for `x ≥ y ≥ 0`, `0 ≤ δ ≤ (x−y)/2`,
/// with strict inequality for the equalizing move `δ = (x−y)/2` when `x > y`.
fn check_two_point_lemma(grid: usize, report: &mut TheoremReport) {
    let p = 1.0;
    let top = 10.0;
    let step = top / (grid.max(2) - 1) as f64;
    for xi in 0..grid {
        for yi in 0..grid {
            let (x, y) = (xi as f64 * step, yi as f64 * step);
            if x < y {
                continue;
            }
            for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let delta = frac * (x - y) / 2.0;
                let before = phi(p, x) + phi(p, y);
                let after = phi(p, x - delta) + phi(p, y + delta);
                let strict_needed = frac == 1.0 && xi > yi;
                let ok = if strict_needed {
                    after < before
                } else {
                    after <= before + ORDER_TOLERANCE
                };
                if !ok {
                    report.record(Violation {
                        kind: ViolationKind::TwoPoint,
                        p,
                        a: vec![x, y],
                        b: vec![x - delta, y + delta],
                        score_a: before,
                        score_b: after,
                    });
                }
                report.lemma_points += 1;
            }
        }
    }
}

/// Central second differences of `φ` against `φ''(a) = 2P/(P+a)³`.
fn check_convexity(points: usize, rng: &mut Rng, report: &mut TheoremReport) {
    for _ in 0..points {
        let p = draw_p(rng);
        let a = p * 100.0 * rng.uniform();
        let h = 1e-2 * (p + a);
        let a = a.max(h);
        let second = (phi(p, a + h) - 2.0 * phi(p, a) + phi(p, a - h)) / (h * h);
        let exact = 2.0 * p / (p + a).powi(3);
        if !(second > 0.0 && ((second - exact) / exact).abs() < 1e-3) {
            report.record(Violation {
                kind: ViolationKind::Convexity,
                p,
                a: vec![a, h],
                b: vec![],
                score_a: exact,
                score_b: second,
            });
        }
        report.convexity_points += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn av(v: &[f64]) -> ActivationVector {
        ActivationVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn majorization_examples() {
        assert!(majorizes(&av(&[2.0, 0.0]), &av(&[1.0, 1.0])).unwrap());
        assert!(majorizes(&av(&[0.3, 0.7]), &av(&[0.7, 0.3])).unwrap());
        assert!(majorizes(&av(&[2.0, 1.0, 0.0]), &av(&[1.5, 1.5, 0.0])).unwrap());
        assert!(!majorizes(&av(&[1.0, 1.0]), &av(&[2.0, 0.0])).unwrap());
        assert!(matches!(
            majorizes(&av(&[1.0, 1.0]), &av(&[1.0, 2.0])),
            Err(Error::TotalMismatch { .. })
        ));
        assert!(ActivationVector::new(vec![-1.0]).is_err());
    }

    #[test]
    fn mean_score_examples() {
        assert_eq!(mean_score(1.0, &av(&[0.0, 0.0, 0.0])).unwrap(), 1.0);
        assert!((mean_score(1.0, &av(&[2.0, 0.0])).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_score(1.0, &av(&[1.0, 1.0])).unwrap(), 0.5);
        assert!(matches!(mean_score(0.0, &av(&[1.0])), Err(Error::NonPositiveP(_))));
        let (p, a) = (0.7, [0.1, 2.5, 0.9]);
        let expect = (0.7 / 0.8 + 0.7 / 3.2 + 0.7 / 1.6) / 3.0;
        assert!((mean_score(p, &av(&a)).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn equalizing_transfer_strictly_lowers_score() {
        let mut v = vec![3.0, 1.0];
        let before = mean_score(1.0, &av(&v)).unwrap();
        transfer(&mut v, 0, 1, 1.0);
        assert!(mean_score(1.0, &av(&v)).unwrap() < before);

        let mut w = vec![3.0, 1.0];
        transfer(&mut w, 0, 1, 0.0);
        assert_eq!(mean_score(1.0, &av(&w)).unwrap(), before);
    }

    #[test]
    fn small_verification_run_is_clean() {
        let cfg = TheoremConfig {
            trials: 500,
            ..TheoremConfig::default()
        };
        let report = verify_theorem(&cfg, &mut Rng::new(11)).unwrap();
        assert!(report.passed(), "{:?}", report.violations);
        assert_eq!(report.lemma_points, 100 * 101 / 2 * 5);
        assert!(report.majorizing_random_pairs > 0);
    }

    proptest! {
        #[test]
        fn mixing_is_majorized(values in prop::collection::vec(0.0f64..10.0, 2..10), seed in 0u64..1000) {
            let mixed = doubly_stochastic_mix(&values, 4, &mut Rng::new(seed));
            prop_assert!(majorizes(&av(&values), &av(&mixed)).unwrap());
        }
    }
}
