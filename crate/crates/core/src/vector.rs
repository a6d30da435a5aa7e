//! Unit-norm embedding vectors and the cosine primitive.
//!
//! Image features, class text features, learned negative features and class
//! prototypes all live in one shared embedding space. Every vector stored in
//! an [`EmbeddingVector`] has unit L2 norm, so cosine similarity reduces to a
//! dot product.

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`normalize`].
pub const ZERO_NORM: f64 = 1e-12;

/// Tolerance on `|‖x‖ − 1|` accepted by [`EmbeddingVector::from_unit`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// A finite, unit-norm vector in the shared embedding space.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Scales `raw` to unit length.
    pub fn normalize(raw: &[f64]) -> Result<Self> {
        normalize(raw)
    }

    /// Wraps a vector that is already unit-norm (within [`UNIT_TOLERANCE`])
    /// without rescaling it, so stored vectors round-trip bit-exactly.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidConfig(format!(
                "expected a unit vector, norm is {norm}"
            )));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Dot product in index order. Panics on a dimension mismatch; use
    /// [`cosine`] for a checked variant.
    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        dot(&self.0, &other.0)
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> Result<f64> {
        cosine(self, other)
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(deserializer)?;
        EmbeddingVector::from_unit(values).map_err(serde::de::Error::custom)
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::EmptyVector);
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

pub fn l2_norm(values: &[f64]) -> f64 {
    dot(values, values).sqrt()
}

/// Plain dot product, summed in index order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L2-normalizes `raw`.
///
/// ```
/// use negstream::vector::normalize;
/// let v = normalize(&[3.0, 4.0]).unwrap();
/// assert_eq!(v.as_slice(), &[0.6, 0.8]);
/// ```
pub fn normalize(raw: &[f64]) -> Result<EmbeddingVector> {
    check_finite(raw)?;
    let norm = l2_norm(raw);
    if norm < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(EmbeddingVector(raw.iter().map(|x| x / norm).collect()))
}

/// Cosine of two unit vectors: their dot product clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(dot(&a.0, &b.0).clamp(-1.0, 1.0))
}

/// Checks that every vector in `vectors` has dimension `dim`.
pub(crate) fn check_dims<'a>(
    dim: usize,
    vectors: impl IntoIterator<Item = &'a EmbeddingVector>,
) -> Result<()> {
    for v in vectors {
        if v.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: v.dim(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let v = normalize(&[3.0, 4.0]).unwrap();
        assert!((v.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((v.as_slice()[1] - 0.8).abs() < 1e-15);
        assert_eq!(normalize(&[1.0, 0.0, 0.0]).unwrap().as_slice(), &[1.0, 0.0, 0.0]);
        assert!(matches!(normalize(&[0.0, 0.0]), Err(Error::ZeroVector)));
        assert!(matches!(normalize(&[1.0, f64::NAN]), Err(Error::NonFinite)));
        assert!(matches!(normalize(&[f64::INFINITY]), Err(Error::NonFinite)));
        assert!(matches!(normalize(&[]), Err(Error::EmptyVector)));
    }

    #[test]
    fn cosine_examples() {
        let u = normalize(&[0.3, -0.2, 0.9]).unwrap();
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        let x = normalize(&[1.0, 0.0]).unwrap();
        let y = normalize(&[0.0, 1.0]).unwrap();
        let nx = normalize(&[-1.0, 0.0]).unwrap();
        assert_eq!(cosine(&x, &y).unwrap(), 0.0);
        assert_eq!(cosine(&x, &nx).unwrap(), -1.0);
        let z = normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            cosine(&x, &z),
            Err(Error::DimensionMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn from_unit_keeps_bits() {
        let v = normalize(&[0.1, 0.7, -0.3]).unwrap();
        let w = EmbeddingVector::from_unit(v.as_slice().to_vec()).unwrap();
        assert_eq!(v, w);
        assert!(EmbeddingVector::from_unit(vec![0.5, 0.5]).is_err());
        let json = serde_json::to_string(&v).unwrap();
        let back: EmbeddingVector = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
    }

    fn raw_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 1..16)
            .prop_filter("nonzero", |v| l2_norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn normalize_is_scale_invariant(raw in raw_vec(), s in 1e-3f64..1e3) {
            let scaled: Vec<f64> = raw.iter().map(|x| x * s).collect();
            let a = normalize(&raw).unwrap();
            let b = normalize(&scaled).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!((l2_norm(a.as_slice()) - 1.0).abs() < 1e-6);
        }

        #[test]
        fn cosine_symmetric_and_bounded(
            pair in (1usize..12).prop_flat_map(|d| (
                prop::collection::vec(-5.0f64..5.0, d),
                prop::collection::vec(-5.0f64..5.0, d),
            )).prop_filter("nonzero", |(a, b)| l2_norm(a) > 1e-3 && l2_norm(b) > 1e-3)
        ) {
            let a = normalize(&pair.0).unwrap();
            let b = normalize(&pair.1).unwrap();
            let ab = cosine(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine(&b, &a).unwrap());
            prop_assert!(ab.abs() <= 1.0 + 1e-9);
        }
    }
}
