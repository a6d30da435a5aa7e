//! Image-to-text modality inversion.
//!
//! A potential OOD image feature `v` is turned into a negative text feature
//! by optimizing a single pseudo-token embedding `z` that is fed, after a
//! frozen prompt prefix, through a frozen text encoder. The objective is
//!
//! ```text
//! L(t⁻, v) = 1 − cos(t⁻, v) + λ · (1/C) Σ_c (1 + cos(t⁻, μ_c))
//! ```
//!
//! which pulls `t⁻` toward the image while pushing it away from every ID
//! prototype `μ_c`. Only `z` is trained, with AdamW.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::negatives::{IdModel, StaticNegatives};
use crate::rng::Rng;
use crate::vector::{cosine, dot, l2_norm, normalize, EmbeddingVector, ZERO_NORM};

/// A frozen, differentiable map from a pseudo-token embedding to a unit-norm
/// text feature.
pub trait TextEncoder {
    /// Length of the pseudo-token embedding `z`.
    fn token_dim(&self) -> usize;

    /// Dimension of the produced text feature.
    fn feature_dim(&self) -> usize;

    fn encode(&self, token: &[f64]) -> Result<EmbeddingVector>;

    /// Pulls a gradient on the text feature back to a gradient on `token`
    /// (a vector-Jacobian product evaluated at `token`).
    fn pullback(&self, token: &[f64], feature_grad: &[f64]) -> Result<Vec<f64>>;
}

/// Reference encoder: `t = normalize(W z + b)`.
///
/// `W` is a fixed `d × k` projection stored row-major and `b` is the frozen
/// contribution of the prompt prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEncoder {
    feature_dim: usize,
    token_dim: usize,
    projection: Vec<f64>,
    prefix_offset: Vec<f64>,
}

impl SyntheticEncoder {
    pub fn new(
        feature_dim: usize,
        token_dim: usize,
        projection: Vec<f64>,
        prefix_offset: Vec<f64>,
    ) -> Result<Self> {
        if feature_dim == 0 || token_dim == 0 {
            return Err(Error::InvalidConfig("encoder dimensions must be positive".into()));
        }
        if projection.len() != feature_dim * token_dim {
            return Err(Error::DimensionMismatch {
                expected: feature_dim * token_dim,
                found: projection.len(),
            });
        }
        if prefix_offset.len() != feature_dim {
            return Err(Error::DimensionMismatch {
                expected: feature_dim,
                found: prefix_offset.len(),
            });
        }
        if projection.iter().chain(&prefix_offset).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            feature_dim,
            token_dim,
            projection,
            prefix_offset,
        })
    }

    /// Gaussian projection with entries `N(0, 1/k)` and a Gaussian prefix
    /// offset of roughly unit norm.
    pub fn random(feature_dim: usize, token_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let projection = rng.normal_vec(feature_dim * token_dim, 1.0 / (token_dim as f64).sqrt());
        let prefix_offset = rng.normal_vec(feature_dim, 1.0 / (feature_dim as f64).sqrt());
        Self::new(feature_dim, token_dim, projection, prefix_offset)
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn prefix_offset(&self) -> &[f64] {
        &self.prefix_offset
    }

    /// Pre-normalization output `W z + b`.
    fn raw(&self, token: &[f64]) -> Result<Vec<f64>> {
        if token.len() != self.token_dim {
            return Err(Error::DimensionMismatch {
                expected: self.token_dim,
                found: token.len(),
            });
        }
        Ok(self
            .projection
            .chunks_exact(self.token_dim)
            .zip(&self.prefix_offset)
            .map(|(row, b)| dot(row, token) + b)
            .collect())
    }
}

impl TextEncoder for SyntheticEncoder {
    fn token_dim(&self) -> usize {
        self.token_dim
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn encode(&self, token: &[f64]) -> Result<EmbeddingVector> {
        normalize(&self.raw(token)?)
    }

    fn pullback(&self, token: &[f64], feature_grad: &[f64]) -> Result<Vec<f64>> {
        if feature_grad.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                found: feature_grad.len(),
            });
        }
        let u = self.raw(token)?;
        let norm = l2_norm(&u);
        if norm < ZERO_NORM {
            return Err(Error::ZeroVector);
        }
        // d normalize(u) / du = (I − t tᵀ) / ‖u‖
        let t: Vec<f64> = u.iter().map(|x| x / norm).collect();
        let along = dot(&t, feature_grad);
        let grad_u: Vec<f64> = feature_grad
            .iter()
            .zip(&t)
            .map(|(g, ti)| (g - ti * along) / norm)
            .collect();
        let mut grad_z = vec![0.0; self.token_dim];
        for (row, gu) in self.projection.chunks_exact(self.token_dim).zip(&grad_u) {
            for (gz, w) in grad_z.iter_mut().zip(row) {
                *gz += w * gu;
            }
        }
        Ok(grad_z)
    }
}

/// How the pseudo-token embedding is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// `z ~ N(0, σ² I)`.
    Random { sigma: f64 },
    /// Token embedding of the static negative with the lowest objective.
    VocabularyPrior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub init: InitStrategy,
}

pub const DEFAULT_RANDOM_SIGMA: f64 = 0.02;

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            learning_rate: 2e-2,
            weight_decay: 1e-2,
            iterations: 30,
            init: InitStrategy::VocabularyPrior,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if let InitStrategy::Random { sigma } = self.init {
            if !(sigma.is_finite() && sigma > 0.0) {
                return Err(Error::InvalidSigma(sigma));
            }
        }
        Ok(())
    }
}

/// `1 − cos(t⁻, v)`.
pub fn loss_inv(t_neg: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    Ok(1.0 - cosine(t_neg, v)?)
}

/// Mean ID-prototype similarity term `(1/C) Σ_c (1 + cos(t⁻, μ_c))`, in `[0, 2]`.
pub fn prototype_separation(t_neg: &EmbeddingVector, model: &IdModel) -> Result<f64> {
    let mut total = 0.0;
    for mu in model.prototypes() {
        total += 1.0 + cosine(t_neg, mu)?;
    }
    Ok(total / model.num_classes() as f64)
}

/// `loss_inv + λ · prototype_separation`.
pub fn loss_ours(
    t_neg: &EmbeddingVector,
    v: &EmbeddingVector,
    model: &IdModel,
    lambda: f64,
) -> Result<f64> {
    Ok(loss_inv(t_neg, v)? + lambda * prototype_separation(t_neg, model)?)
}

/// Gradient of [`loss_ours`] with respect to a unit feature `t`, treating
/// cosines as dot products: `−v + (λ/C) Σ_c μ_c`.
pub fn feature_gradient(v: &EmbeddingVector, model: &IdModel, lambda: f64) -> Vec<f64> {
    let scale = lambda / model.num_classes() as f64;
    let mut grad: Vec<f64> = v.as_slice().iter().map(|x| -x).collect();
    for mu in model.prototypes() {
        for (g, m) in grad.iter_mut().zip(mu.as_slice()) {
            *g += scale * m;
        }
    }
    grad
}

/// Objective value and its gradient with respect to the pseudo-token.
pub fn objective_and_gradient<E: TextEncoder + ?Sized>(
    encoder: &E,
    token: &[f64],
    v: &EmbeddingVector,
    model: &IdModel,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let t = encoder.encode(token)?;
    let loss = loss_ours(&t, v, model, lambda)?;
    let grad = encoder.pullback(token, &feature_gradient(v, model, lambda))?;
    Ok((loss, grad))
}

/// Adaptive moment state for one pseudo-token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One AdamW step with decoupled weight decay:
/// `z ← z − lr·(m̂/(√v̂ + ε) + wd·z)`.
pub fn adamw_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) {
    assert_eq!(params.len(), grad.len(), "parameter/gradient length mismatch");
    assert_eq!(params.len(), state.first_moment.len(), "optimizer state length mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        let m = &mut state.first_moment[i];
        let s = &mut state.second_moment[i];
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *s = state.beta2 * *s + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bias1;
        let s_hat = *s / bias2;
        params[i] -= lr * (m_hat / (s_hat.sqrt() + state.epsilon) + weight_decay * params[i]);
    }
}

/// `k` i.i.d. draws from `N(0, σ²)`.
pub fn init_random(k: usize, sigma: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidSigma(sigma));
    }
    Ok(rng.normal_vec(k, sigma))
}

/// Index of the static negative whose precomputed text feature minimizes
/// [`loss_ours`] against `v` (ties go to the earlier entry).
pub fn vocabulary_prior_index(
    v: &EmbeddingVector,
    static_negs: &StaticNegatives,
    model: &IdModel,
    lambda: f64,
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, neg) in static_negs.entries().iter().enumerate() {
        let loss = loss_ours(&neg.entry.text_feature, v, model, lambda)?;
        if best.is_none_or(|(_, b)| loss < b) {
            best = Some((i, loss));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::EmptyNegatives)
}

pub fn init_vocabulary_prior(
    v: &EmbeddingVector,
    static_negs: &StaticNegatives,
    model: &IdModel,
    lambda: f64,
) -> Result<Vec<f64>> {
    let i = vocabulary_prior_index(v, static_negs, model, lambda)?;
    Ok(static_negs.entries()[i].entry.token_embedding.clone())
}

/// Result of one inversion.
#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub feature: EmbeddingVector,
    pub token: Vec<f64>,
    pub initial_loss: f64,
    pub loss: f64,
}

/// Runs `cfg.iterations` AdamW steps on the pseudo-token and returns the
/// encoded feature at the final token.
pub fn invert<E: TextEncoder + ?Sized>(
    v: &EmbeddingVector,
    encoder: &E,
    model: &IdModel,
    cfg: &InversionConfig,
    static_negs: &StaticNegatives,
    rng: &mut Rng,
) -> Result<Inversion> {
    cfg.validate()?;
    if encoder.feature_dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: encoder.feature_dim(),
        });
    }
    model.check_dim(v)?;
    let mut token = match cfg.init {
        InitStrategy::Random { sigma } => init_random(encoder.token_dim(), sigma, rng)?,
        InitStrategy::VocabularyPrior => init_vocabulary_prior(v, static_negs, model, cfg.lambda)?,
    };
    if token.len() != encoder.token_dim() {
        return Err(Error::DimensionMismatch {
            expected: encoder.token_dim(),
            found: token.len(),
        });
    }
    let initial_loss = loss_ours(&encoder.encode(&token)?, v, model, cfg.lambda)?;
    let mut state = OptimizerState::new(token.len());
    for iteration in 0..cfg.iterations {
        let (loss, grad) = objective_and_gradient(encoder, &token, v, model, cfg.lambda)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration });
        }
        adamw_step(&mut token, &grad, &mut state, cfg.learning_rate, cfg.weight_decay);
    }
    let feature = encoder.encode(&token).map_err(|e| match e {
        Error::NonFinite | Error::ZeroVector => Error::NonFiniteLoss {
            iteration: cfg.iterations,
        },
        other => other,
    })?;
    let loss = loss_ours(&feature, v, model, cfg.lambda)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: cfg.iterations,
        });
    }
    Ok(Inversion {
        feature,
        token,
        initial_loss,
        loss,
    })
}
