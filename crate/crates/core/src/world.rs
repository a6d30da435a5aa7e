//! Synthetic embedding worlds and test streams.
//!
//! A world stands in for a vision-language model plus datasets. Every concept
//! (ID class, OOD cluster, vocabulary word) is a unit direction in a low-rank
//! semantic subspace `S` of `R^d`. Text features live in `S`; an image is its
//! semantic content plus isotropic full-space noise, renormalized. The noise
//! plays the role of image detail that no caption describes: it lowers every
//! image–text cosine, and a negative inverted from one image can fit that
//! image's noise but not the noise of other images.
//!
//! Optional modality offsets (`image_gap`, `text_gap`) add a fixed direction
//! to all images or all texts. They default to zero: the text encoder can
//! grow its semantic component freely, so an inverted text feature escapes
//! the text offset and aligns with images far better than any class name.
//!
//! The text encoder maps a pseudo-token into `S` (plus the text offset), so
//! vocabulary entries and learned negatives share the class names' manifold.

use serde::{Deserialize, Serialize};

use crate::engine::StreamSample;
use crate::error::{Error, Result};
use crate::inversion::{SyntheticEncoder, TextEncoder};
use crate::negatives::VocabularyEntry;
use crate::rng::Rng;
use crate::scoring::Label;
use crate::vector::{dot, l2_norm, normalize, EmbeddingVector};

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    /// Embedding dimension `d`.
    pub dim: usize,
    /// Pseudo-token dimension `k`.
    pub token_dim: usize,
    /// Rank of the semantic subspace; at most `d − 2`.
    pub semantic_rank: usize,
    pub classes: usize,
    pub ood_clusters: usize,
    /// Angle (radians) between each OOD cluster mean and its nearest ID
    /// class mean.
    pub angular_margin: f64,
    /// Minimum pairwise angle between ID class means, and between OOD
    /// cluster means.
    pub min_class_angle: f64,
    /// Concentration of samples around their mean: the semantic
    /// perturbation is `N(0, I/κ)` before renormalization.
    pub noise_kappa: f64,
    /// Concentration of class text features around their class mean.
    pub text_kappa: f64,
    /// Fraction of ID test samples drawn between their class and the
    /// nearest OOD cluster.
    pub hard_id_fraction: f64,
    /// How far along the arc from class mean to OOD mean hard samples sit.
    pub hard_id_blend: f64,
    pub vocab_size: usize,
    /// Few-shot images per class used to build prototypes.
    pub shots: usize,
    pub id_samples: usize,
    pub ood_samples: usize,
    pub image_gap: f64,
    pub text_gap: f64,
    /// Norm scale of the isotropic full-space noise added to every image
    /// before normalizing.
    pub residual_noise: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            dim: 64,
            token_dim: 64,
            semantic_rank: 16,
            classes: 10,
            ood_clusters: 4,
            angular_margin: 1.4,
            min_class_angle: 1.0,
            noise_kappa: 40.0,
            text_kappa: 400.0,
            hard_id_fraction: 0.1,
            hard_id_blend: 0.5,
            vocab_size: 500,
            shots: 16,
            id_samples: 200,
            ood_samples: 200,
            image_gap: 0.0,
            text_gap: 0.0,
            residual_noise: 1.5,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.dim < 2 {
            return bad("dim must be >= 2");
        }
        if self.classes == 0 {
            return bad("classes must be >= 1");
        }
        if self.token_dim == 0 || self.semantic_rank == 0 {
            return bad("token_dim and semantic_rank must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.hard_id_fraction) {
            return bad("hard_id_fraction must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.hard_id_blend) {
            return bad("hard_id_blend must be in [0, 1]");
        }
        if !(self.noise_kappa > 0.0 && self.text_kappa > 0.0) {
            return bad("concentrations must be > 0");
        }
        if !(self.image_gap >= 0.0 && self.text_gap >= 0.0 && self.residual_noise >= 0.0) {
            return bad("gaps and residual noise must be >= 0");
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.angular_margin)
            || !(0.0..=std::f64::consts::PI).contains(&self.min_class_angle)
        {
            return bad("angles must be in [0, pi]");
        }
        if self.shots == 0 {
            return bad("shots must be >= 1");
        }
        if self.hard_id_fraction > 0.0 && self.ood_clusters == 0 {
            return bad("hard ID samples need at least one OOD cluster");
        }
        Ok(())
    }
}

/// One generated test image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSample {
    pub id: String,
    pub embedding: EmbeddingVector,
    pub truth: Label,
    /// ID class, for ID samples.
    pub class: Option<usize>,
    /// OOD cluster, for OOD samples.
    pub cluster: Option<usize>,
    pub hard: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplePools {
    pub id: Vec<PoolSample>,
    pub ood: Vec<PoolSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub class_names: Vec<String>,
    pub class_text: Vec<EmbeddingVector>,
    pub shots: Vec<Vec<EmbeddingVector>>,
    pub vocabulary: Vec<VocabularyEntry>,
    pub encoder: SyntheticEncoder,
    pub pools: SamplePools,
    /// Semantic directions of the ID classes (unit vectors in `S`).
    pub id_means: Vec<Vec<f64>>,
    /// Semantic directions of the OOD clusters.
    pub ood_means: Vec<Vec<f64>>,
}

/// Orthonormal vectors from Gram–Schmidt over Gaussian draws.
fn orthonormal_basis(dim: usize, count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = rng.normal_vec(dim, 1.0);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = l2_norm(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = l2_norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn add_scaled(target: &mut [f64], v: &[f64], s: f64) {
    target.iter_mut().zip(v).for_each(|(t, x)| *t += s * x);
}

/// Helper bundling the subspace geometry.
struct Geometry {
    e_img: Vec<f64>,
    e_txt: Vec<f64>,
    semantic: Vec<Vec<f64>>,
    dim: usize,
}

impl Geometry {
    /// Random unit direction in `S`.
    fn random_direction(&self, rng: &mut Rng) -> Vec<f64> {
        let coeffs = rng.normal_vec(self.semantic.len(), 1.0);
        let mut v = vec![0.0; self.dim];
        for (c, b) in coeffs.iter().zip(&self.semantic) {
            add_scaled(&mut v, b, *c);
        }
        unit(v)
    }

    /// `normalize(mean + ε)`, `ε ~ N(0, I/κ)` within `S`.
    fn perturb(&self, mean: &[f64], kappa: f64, rng: &mut Rng) -> Vec<f64> {
        let sd = 1.0 / kappa.sqrt();
        let mut v = mean.to_vec();
        for b in &self.semantic {
            add_scaled(&mut v, b, sd * rng.normal());
        }
        unit(v)
    }

    fn image(&self, content: &[f64], gap: f64, residual: f64, rng: &mut Rng) -> Result<EmbeddingVector> {
        let mut v = content.to_vec();
        add_scaled(&mut v, &self.e_img, gap);
        if residual > 0.0 {
            let noise = rng.normal_vec(self.dim, residual / (self.dim as f64).sqrt());
            add_scaled(&mut v, &noise, 1.0);
        }
        normalize(&v)
    }

    fn text(&self, content: &[f64], gap: f64) -> Result<EmbeddingVector> {
        let mut v = content.to_vec();
        add_scaled(&mut v, &self.e_txt, gap);
        normalize(&v)
    }
}

/// Spherical interpolation between unit vectors `a` and `b`.
fn slerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    let c = dot(a, b).clamp(-1.0, 1.0);
    let phi = c.acos();
    if phi < 1e-9 {
        return a.to_vec();
    }
    let (wa, wb) = (((1.0 - t) * phi).sin() / phi.sin(), (t * phi).sin() / phi.sin());
    unit(a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect())
}

fn place_separated(
    count: usize,
    min_angle: f64,
    what: &str,
    mut draw: impl FnMut(&mut Rng) -> Vec<f64>,
    accept: impl Fn(&[f64]) -> bool,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    let max_cos = min_angle.cos() + 1e-12;
    let mut placed: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ok = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cand = draw(rng);
            if accept(&cand) && placed.iter().all(|p| dot(p, &cand) <= max_cos) {
                ok = Some(cand);
                break;
            }
        }
        match ok {
            Some(c) => placed.push(c),
            None => {
                return Err(Error::InfeasibleGeometry(format!(
                    "could not place {count} {what} with pairwise angle >= {min_angle} rad"
                )))
            }
        }
    }
    Ok(placed)
}

/// Generates a world from `spec`. Identical specs give identical worlds.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    if spec.semantic_rank + 2 > spec.dim {
        return Err(Error::InfeasibleGeometry(format!(
            "dimension {} cannot hold two modality directions plus a rank-{} semantic subspace",
            spec.dim, spec.semantic_rank
        )));
    }
    let mut rng = Rng::derive(spec.seed, 0);
    let mut basis = orthonormal_basis(spec.dim, spec.semantic_rank + 2, &mut rng);
    let semantic = basis.split_off(2);
    let geo = Geometry {
        e_txt: basis.pop().expect("two offset directions"),
        e_img: basis.pop().expect("two offset directions"),
        semantic,
        dim: spec.dim,
    };

    let id_means = place_separated(
        spec.classes,
        spec.min_class_angle,
        "ID class means",
        |r| geo.random_direction(r),
        |_| true,
        &mut rng,
    )?;

    // each OOD mean sits exactly `margin` away from a random anchor class
    // and at least that far from every other class
    let margin_cos = spec.angular_margin.cos();
    let ood_means = place_separated(
        spec.ood_clusters,
        spec.min_class_angle,
        "OOD cluster means",
        |r| {
            let anchor = &id_means[r.below(id_means.len())];
            let mut u = geo.random_direction(r);
            let p = dot(&u, anchor);
            add_scaled(&mut u, anchor, -p);
            if l2_norm(&u) < 1e-9 {
                return vec![f64::NAN; spec.dim];
            }
            let u = unit(u);
            anchor
                .iter()
                .zip(&u)
                .map(|(a, b)| margin_cos * a + spec.angular_margin.sin() * b)
                .collect()
        },
        |cand| {
            cand.iter().all(|x| x.is_finite())
                && id_means.iter().all(|m| dot(m, cand) <= margin_cos + 1e-9)
        },
        &mut rng,
    )?;

    let class_names: Vec<String> = (0..spec.classes).map(|c| format!("class-{c:03}")).collect();
    let class_text = id_means
        .iter()
        .map(|m| geo.text(&geo.perturb(m, spec.text_kappa, &mut rng), spec.text_gap))
        .collect::<Result<Vec<_>>>()?;

    let image = |content: &[f64], rng: &mut Rng| {
        geo.image(content, spec.image_gap, spec.residual_noise, rng)
    };
    let shots = id_means
        .iter()
        .map(|m| {
            (0..spec.shots)
                .map(|_| {
                    let c = geo.perturb(m, spec.noise_kappa, &mut rng);
                    image(&c, &mut rng)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    // encoder: t = normalize(W z + g_txt e_txt), W = B_S G with G ~ N(0, 1/k)
    let encoder = {
        let r = spec.semantic_rank;
        let g = rng.normal_vec(r * spec.token_dim, 1.0 / (spec.token_dim as f64).sqrt());
        let mut projection = vec![0.0; spec.dim * spec.token_dim];
        for (row, out) in projection.chunks_exact_mut(spec.token_dim).enumerate() {
            for (s, b) in geo.semantic.iter().enumerate() {
                let w = b[row];
                add_scaled(out, &g[s * spec.token_dim..(s + 1) * spec.token_dim], w);
            }
        }
        let offset: Vec<f64> = geo.e_txt.iter().map(|x| x * spec.text_gap).collect();
        SyntheticEncoder::new(spec.dim, spec.token_dim, projection, offset)?
    };

    // tokens scaled so that ‖G z‖ is about one
    let token_sd = 1.0 / (spec.semantic_rank as f64).sqrt();
    let vocabulary = (0..spec.vocab_size)
        .map(|i| {
            let token = rng.normal_vec(spec.token_dim, token_sd);
            Ok(VocabularyEntry {
                token_id: format!("word-{i:05}"),
                text_feature: encoder.encode(&token)?,
                token_embedding: token,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut pools = SamplePools::default();
    for i in 0..spec.id_samples {
        let class = i % spec.classes;
        let hard = rng.uniform() < spec.hard_id_fraction;
        let mean = if hard {
            let nearest = ood_means
                .iter()
                .max_by(|a, b| dot(a, &id_means[class]).total_cmp(&dot(b, &id_means[class])))
                .expect("hard samples require OOD clusters");
            slerp(&id_means[class], nearest, spec.hard_id_blend)
        } else {
            id_means[class].clone()
        };
        let content = geo.perturb(&mean, spec.noise_kappa, &mut rng);
        pools.id.push(PoolSample {
            id: format!("id-{i:05}"),
            embedding: image(&content, &mut rng)?,
            truth: Label::Id,
            class: Some(class),
            cluster: None,
            hard,
        });
    }
    if spec.ood_clusters > 0 {
        for i in 0..spec.ood_samples {
            let cluster = i % spec.ood_clusters;
            let content = geo.perturb(&ood_means[cluster], spec.noise_kappa, &mut rng);
            pools.ood.push(PoolSample {
                id: format!("ood-{i:05}"),
                embedding: image(&content, &mut rng)?,
                truth: Label::Ood,
                class: None,
                cluster: Some(cluster),
                hard: false,
            });
        }
    }

    Ok(World {
        spec: spec.clone(),
        class_names,
        class_text,
        shots,
        vocabulary,
        encoder,
        pools,
        id_means,
        ood_means,
    })
}

/// Presentation order of a test stream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ordering {
    /// Seeded shuffle of all samples.
    #[default]
    Random,
    /// All ID samples, then all OOD samples.
    Forward,
    /// All OOD samples, then all ID samples.
    Reverse,
    /// Consecutive phases; phase `p` mixes a share of the ID pool with the
    /// OOD clusters listed in `phases[p]`.
    TemporalShift { phases: Vec<Vec<usize>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamPlan {
    pub ordering: Ordering,
    /// ID part of the ID:OOD ratio.
    pub id_ratio: usize,
    /// OOD part of the ID:OOD ratio.
    pub ood_ratio: usize,
}

impl Default for StreamPlan {
    fn default() -> Self {
        Self {
            ordering: Ordering::Random,
            id_ratio: 1,
            ood_ratio: 1,
        }
    }
}

impl StreamPlan {
    /// One phase per OOD cluster, in cluster order.
    pub fn temporal_shift(clusters: usize) -> Self {
        Self {
            ordering: Ordering::TemporalShift {
                phases: (0..clusters).map(|c| vec![c]).collect(),
            },
            ..Self::default()
        }
    }
}

fn to_stream(s: &PoolSample, phase: usize) -> StreamSample {
    StreamSample {
        id: s.id.clone(),
        embedding: s.embedding.clone(),
        truth: s.truth,
        phase,
        class: s.class,
    }
}

/// Largest `k` with `k·a ≤ n_id` and `k·b ≤ n_ood`.
fn ratio_units(n_id: usize, n_ood: usize, plan: &StreamPlan) -> Result<usize> {
    if plan.id_ratio == 0 && plan.ood_ratio == 0 {
        return Err(Error::InvalidConfig("ID:OOD ratio cannot be 0:0".into()));
    }
    let a = n_id.checked_div(plan.id_ratio).unwrap_or(usize::MAX);
    let b = n_ood.checked_div(plan.ood_ratio).unwrap_or(usize::MAX);
    let k = a.min(b);
    if k == 0 {
        return Err(Error::InsufficientSamples(format!(
            "{n_id} ID and {n_ood} OOD samples cannot form a {}:{} stream",
            plan.id_ratio, plan.ood_ratio
        )));
    }
    Ok(k)
}

/// Orders samples from `pools` according to `plan`. Within each block
/// (and within each temporal phase) samples are shuffled with `rng`.
pub fn build_stream(plan: &StreamPlan, pools: &SamplePools, rng: &mut Rng) -> Result<Vec<StreamSample>> {
    let mut id: Vec<&PoolSample> = pools.id.iter().collect();
    let mut ood: Vec<&PoolSample> = pools.ood.iter().collect();
    rng.shuffle(&mut id);
    rng.shuffle(&mut ood);

    let phases = match &plan.ordering {
        Ordering::TemporalShift { phases } => phases,
        ordering => {
            let k = ratio_units(id.len(), ood.len(), plan)?;
            id.truncate(k * plan.id_ratio);
            ood.truncate(k * plan.ood_ratio);
            let (id, ood): (Vec<_>, Vec<_>) = (
                id.into_iter().map(|s| to_stream(s, 0)).collect(),
                ood.into_iter().map(|s| to_stream(s, 0)).collect(),
            );
            return Ok(match ordering {
                Ordering::Forward => id.into_iter().chain(ood).collect(),
                Ordering::Reverse => ood.into_iter().chain(id).collect(),
                _ => {
                    let mut all: Vec<_> = id.into_iter().chain(ood).collect();
                    rng.shuffle(&mut all);
                    all
                }
            });
        }
    };

    if phases.is_empty() {
        return Err(Error::InvalidConfig("a temporal-shift plan needs at least one phase".into()));
    }
    let mut used = std::collections::BTreeSet::new();
    for &c in phases.iter().flatten() {
        if !used.insert(c) {
            return Err(Error::InvalidConfig(format!("OOD cluster {c} appears in two phases")));
        }
    }
    let mut stream = Vec::new();
    let share = id.len() / phases.len();
    for (p, clusters) in phases.iter().enumerate() {
        let id_part = &id[p * share..(p + 1) * share];
        let ood_part: Vec<&PoolSample> = ood
            .iter()
            .copied()
            .filter(|s| s.cluster.is_some_and(|c| clusters.contains(&c)))
            .collect();
        let k = ratio_units(id_part.len(), ood_part.len(), plan)?;
        let mut phase: Vec<StreamSample> = id_part[..k * plan.id_ratio]
            .iter()
            .chain(&ood_part[..k * plan.ood_ratio])
            .map(|s| to_stream(s, p))
            .collect();
        rng.shuffle(&mut phase);
        stream.extend(phase);
    }
    Ok(stream)
}
