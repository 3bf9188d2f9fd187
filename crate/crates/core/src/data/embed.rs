//! Deterministic, training-free embedders for instructions and object
//! geometry. They sit behind [`EmbeddingProvider`] so learned encoders can be
//! swapped in.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};
use crate::geometry::ArticulatedObjectModel;

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn text_dim(&self) -> usize;
    fn object_dim(&self) -> usize;
    fn embed_text(&self, instruction: &str) -> Result<Vec<f64>>;
    fn embed_object(&self, model: &ArticulatedObjectModel) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StubEmbedder {
    pub text_dim: usize,
    pub object_dim: usize,
}

impl Default for StubEmbedder {
    fn default() -> Self {
        StubEmbedder {
            text_dim: 64,
            object_dim: 64,
        }
    }
}

const OBJECT_FEATURES: usize = 22;
const PROJECTION_SEED: u64 = 0x0b1e_c7f0;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn gaussian_vector(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

impl EmbeddingProvider for StubEmbedder {
    fn name(&self) -> &str {
        "stub"
    }

    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn object_dim(&self) -> usize {
        self.object_dim
    }

    /// Hashed bag of unigrams and bigrams, unit norm.
    fn embed_text(&self, instruction: &str) -> Result<Vec<f64>> {
        let tokens: Vec<String> = instruction
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        if tokens.is_empty() {
            return Err(CoreError::InvalidInput("empty instruction".into()));
        }
        let mut acc = vec![0.0; self.text_dim];
        let grams = tokens
            .iter()
            .cloned()
            .chain(tokens.windows(2).map(|w| format!("{} {}", w[0], w[1])));
        for g in grams {
            for (a, v) in acc.iter_mut().zip(gaussian_vector(fnv1a(g.as_bytes()), self.text_dim)) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(acc.into_iter().map(|v| v / norm).collect())
    }

    /// Fixed random projection of order-independent point-cloud statistics.
    fn embed_object(&self, model: &ArticulatedObjectModel) -> Vec<f64> {
        let feats = object_statistics(model);
        let proj = gaussian_vector(PROJECTION_SEED, self.object_dim * OBJECT_FEATURES);
        let scale = 1.0 / (OBJECT_FEATURES as f64).sqrt();
        proj.chunks_exact(OBJECT_FEATURES)
            .map(|row| row.iter().zip(&feats).map(|(w, f)| w * f).sum::<f64>() * scale)
            .collect()
    }
}

fn sorted_points(pts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut v = pts.to_vec();
    v.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    v
}

/// Centroid, covariance spectrum, per-part extents, part size ratio, joint
/// axis, pivot and limits. Feature scales are brought to O(1) for objects
/// around 10-50 cm.
fn object_statistics(model: &ArticulatedObjectModel) -> [f64; OBJECT_FEATURES] {
    let all: Vec<Vector3<f64>> =
        sorted_points(&model.part(0).iter().chain(model.part(1)).copied().collect::<Vec<_>>());
    let n = all.len() as f64;
    let centroid = all.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cov = all.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - centroid;
        a + d * d.transpose()
    }) / n;
    let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let mut f = [0.0; OBJECT_FEATURES];
    let mut k = 0;
    let mut push = |v: f64| {
        f[k] = v;
        k += 1;
    };
    for c in centroid.iter() {
        push(c * 10.0);
    }
    for e in &eig {
        push(e.max(0.0).sqrt() * 10.0);
    }
    for part in 0..2 {
        let b = model.part_box(part);
        for e in (b.max - b.min).iter() {
            push(e * 10.0);
        }
    }
    let n0 = model.part(0).len() as f64;
    push(n0 / n);
    push(1.0 - n0 / n);
    for a in model.axis().iter() {
        push(*a);
    }
    for p in model.pivot().iter() {
        push(p * 10.0);
    }
    let (lo, hi) = model.limits();
    push(lo);
    push(hi);
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(scale: f64) -> ArticulatedObjectModel {
        let base = (0..20)
            .map(|i| Vector3::new((i % 5) as f64, (i / 5) as f64, 0.0) * 0.05 * scale)
            .collect();
        let lid = (0..10)
            .map(|i| Vector3::new(i as f64 * 0.02, 0.1, 0.2) * scale)
            .collect();
        ArticulatedObjectModel::new("o", base, lid, Vector3::x(), Vector3::zeros(), (0.0, 1.0)).unwrap()
    }

    #[test]
    fn text_is_deterministic_and_unit() {
        let e = StubEmbedder::default();
        let a = e.embed_text("open the box").unwrap();
        assert_eq!(a, e.embed_text("open the box").unwrap());
        assert_eq!(a.len(), 64);
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn text_distinguishes_instructions() {
        let e = StubEmbedder::default();
        let a = e.embed_text("open the box").unwrap();
        let b = e.embed_text("close the box").unwrap();
        let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!(cos < 0.999, "cos = {cos}");
    }

    #[test]
    fn empty_text_is_error() {
        let e = StubEmbedder::default();
        assert!(e.embed_text("").is_err());
        assert!(e.embed_text("  ,. ").is_err());
    }

    #[test]
    fn object_embedding_ignores_point_order() {
        let e = StubEmbedder::default();
        let m = obj(1.0);
        let mut base = m.part(0).to_vec();
        base.reverse();
        base.swap(3, 11);
        let mut lid = m.part(1).to_vec();
        lid.rotate_left(4);
        let permuted =
            ArticulatedObjectModel::new("o", base, lid, m.axis(), m.pivot(), m.limits()).unwrap();
        assert_eq!(e.embed_object(&m), e.embed_object(&permuted));
        assert_eq!(e.embed_object(&m), e.embed_object(&m));
    }

    #[test]
    fn object_embedding_sees_extents() {
        let e = StubEmbedder::default();
        assert_ne!(e.embed_object(&obj(1.0)), e.embed_object(&obj(1.5)));
    }
}
