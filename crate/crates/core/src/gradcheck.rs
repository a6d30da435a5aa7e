//! Finite-difference verification of the inversion gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::{loss_ours, objective_and_gradient, SyntheticEncoder, TextEncoder};
use crate::negatives::IdModel;
use crate::rng::Rng;
use crate::vector::{l2_norm, normalize, EmbeddingVector};

/// Central-difference gradient of `f` at `z` with step `h`.
pub fn numeric_gradient(
    f: impl Fn(&[f64]) -> Result<f64>,
    z: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = z.to_vec();
    let mut grad = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        probe[i] = z[i] + h;
        let up = f(&probe)?;
        probe[i] = z[i] - h;
        let down = f(&probe)?;
        probe[i] = z[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; falls back to the absolute difference when
/// both gradients are essentially zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = l2_norm(a).max(l2_norm(b));
    if scale < 1e-8 {
        l2_norm(&diff)
    } else {
        l2_norm(&diff) / scale
    }
}

/// Analytic and numeric gradients of the inversion objective at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub relative_error: f64,
}

/// Compares the encoder's pullback of the objective gradient against central
/// differences of the objective value itself.
pub fn check_point<E: TextEncoder + ?Sized>(
    encoder: &E,
    v: &EmbeddingVector,
    model: &IdModel,
    lambda: f64,
    token: &[f64],
    h: f64,
) -> Result<PointCheck> {
    let (_, analytic) = objective_and_gradient(encoder, token, v, model, lambda)?;
    let numeric = numeric_gradient(
        |z| loss_ours(&encoder.encode(z)?, v, model, lambda),
        token,
        h,
    )?;
    let relative_error = relative_error(&analytic, &numeric);
    Ok(PointCheck {
        analytic,
        numeric,
        relative_error,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub points: usize,
    pub step: f64,
    pub tolerance: f64,
    pub lambda: f64,
    pub feature_dim: usize,
    pub token_dim: usize,
    pub classes: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            points: 100,
            step: 1e-5,
            tolerance: 1e-4,
            lambda: 0.3,
            feature_dim: 64,
            token_dim: 64,
            classes: 10,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points == 0 || self.feature_dim == 0 || self.token_dim == 0 || self.classes == 0 {
            return Err(Error::InvalidConfig(
                "grad check needs positive points, dimensions and classes".into(),
            ));
        }
        if !(self.step > 0.0 && self.tolerance > 0.0 && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(
                "grad check step and tolerance must be > 0 and lambda >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckFailure {
    pub point: usize,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub points: usize,
    pub tolerance: f64,
    pub max_relative_error: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Random ID model with `classes` prototypes; the class text features are
/// the prototypes themselves.
pub fn random_model(classes: usize, dim: usize, rng: &mut Rng) -> Result<IdModel> {
    let protos = (0..classes)
        .map(|_| normalize(&rng.normal_vec(dim, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    IdModel::new(
        (0..classes).map(|c| format!("class-{c}")).collect(),
        protos.clone(),
        protos,
    )
}

/// Checks `encoder` at `cfg.points` random (image, token) pairs against a
/// random ID model.
pub fn run_with_encoder<E: TextEncoder + ?Sized>(
    encoder: &E,
    cfg: &GradCheckConfig,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let model = random_model(cfg.classes, encoder.feature_dim(), rng)?;
    let mut report = GradCheckReport {
        points: cfg.points,
        tolerance: cfg.tolerance,
        max_relative_error: 0.0,
        failures: Vec::new(),
    };
    for point in 0..cfg.points {
        let v = normalize(&rng.normal_vec(encoder.feature_dim(), 1.0))?;
        let token = rng.normal_vec(encoder.token_dim(), 1.0);
        let check = check_point(encoder, &v, &model, cfg.lambda, &token, cfg.step)?;
        report.max_relative_error = report.max_relative_error.max(check.relative_error);
        // NaN errors count as failures
        if check.relative_error.is_nan() || check.relative_error >= cfg.tolerance {
            report.failures.push(GradCheckFailure {
                point,
                relative_error: check.relative_error,
            });
        }
    }
    Ok(report)
}

/// Gradient check of a freshly drawn [`SyntheticEncoder`].
pub fn run(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let encoder = SyntheticEncoder::random(cfg.feature_dim, cfg.token_dim, seed)?;
    run_with_encoder(&encoder, cfg, &mut Rng::derive(seed, 1))
}
