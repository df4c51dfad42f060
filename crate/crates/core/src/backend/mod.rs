//! Interfaces over the pre-trained networks the pipeline consumes, plus two
//! implementations: an analytic synthetic testbed and a model-server adapter.
//!
//! Differentiable roles expose vector-Jacobian products in working precision
//! (`f64`); backends without gradient support return
//! [`Error::GradientUnavailable`].

pub mod linalg;
pub mod server;
pub mod synthetic;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::derive_seed;
use crate::image::ImageTensor;
use crate::latent::{LatentCode, LATENT_COLS, LATENT_LEN};

pub use server::{ModelServerConfig, ModelSpec};
pub use synthetic::{SyntheticParams, SyntheticTestbed};

pub const FEATURE_DIM: usize = 512;
pub const EMBEDDING_DIM: usize = 512;

/// Unit-norm identity descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEmbedding(Vec<f64>);

impl IdentityEmbedding {
    /// Normalizes `raw`. A zero vector maps to the first basis vector so the
    /// output is always unit-norm.
    pub fn normalize(raw: Vec<f64>) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("identity embedding is not finite".into()));
        }
        let norm = linalg::norm(&raw);
        if norm < 1e-300 {
            let mut unit = vec![0.0; raw.len().max(1)];
            unit[0] = 1.0;
            return Ok(Self(unit));
        }
        Ok(Self(raw.into_iter().map(|v| v / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn cosine(&self, other: &IdentityEmbedding) -> f64 {
        linalg::dot(&self.0, &other.0).clamp(-1.0, 1.0)
    }
}

/// Class-token feature plus a square grid of patch-token features.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticFeatures {
    pub cls: Vec<f64>,
    /// `grid_side² × 512`, row-major.
    pub patches: Vec<f64>,
    pub grid_side: usize,
}

impl SemanticFeatures {
    pub fn new(cls: Vec<f64>, patches: Vec<f64>, grid_side: usize) -> Result<Self> {
        if cls.len() != FEATURE_DIM {
            return Err(Error::FeatureShapeMismatch(format!(
                "cls feature has {} values, expected {FEATURE_DIM}",
                cls.len()
            )));
        }
        if patches.len() != grid_side * grid_side * FEATURE_DIM {
            return Err(Error::FeatureShapeMismatch(format!(
                "patch grid {grid_side}x{grid_side} needs {} values, got {}",
                grid_side * grid_side * FEATURE_DIM,
                patches.len()
            )));
        }
        if cls.iter().chain(&patches).any(|v| !v.is_finite()) {
            return Err(Error::Validation("semantic features are not finite".into()));
        }
        Ok(Self {
            cls,
            patches,
            grid_side,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.grid_side * self.grid_side
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub found: bool,
    /// `[x0, y0, x1, y1]` in pixels.
    pub bbox: Option<[f64; 4]>,
    pub confidence: f64,
}

pub trait Generator: Send + Sync {
    /// Mapping stage: one base-space sample to one 512-wide style row.
    fn map_base(&self, z: &[f64]) -> Result<Vec<f64>>;

    /// Renders a working-precision 18×512 code.
    fn synthesize(&self, code: &[f64]) -> Result<ImageTensor>;

    /// Pulls an image-space cotangent back to code space.
    fn synthesize_vjp(&self, _code: &[f64], _grad_image: &[f64]) -> Result<Vec<f64>> {
        Err(Error::GradientUnavailable("generator".into()))
    }
}

pub trait Inverter: Send + Sync {
    fn invert(&self, image: &ImageTensor) -> Result<LatentCode>;
}

pub trait IdentityEncoder: Send + Sync {
    fn embed(&self, image: &ImageTensor) -> Result<IdentityEmbedding>;

    fn embed_vjp(&self, _image: &ImageTensor, _grad: &[f64]) -> Result<Vec<f64>> {
        Err(Error::GradientUnavailable("identity encoder".into()))
    }
}

pub trait SemanticEncoder: Send + Sync {
    fn encode(&self, image: &ImageTensor) -> Result<SemanticFeatures>;

    /// Vector-Jacobian product with respect to the flattened patch features.
    fn patch_vjp(&self, _image: &ImageTensor, _grad_patches: &[f64]) -> Result<Vec<f64>> {
        Err(Error::GradientUnavailable("semantic encoder".into()))
    }
}

pub trait FaceDetector: Send + Sync {
    fn detect(&self, image: &ImageTensor) -> Result<Detection>;
}

/// Feature extractor for Fréchet distance statistics.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

/// Pretrained multi-label attribute classifier used for pseudo-labelling.
pub trait AttributeClassifier: Send + Sync {
    fn attribute_names(&self) -> Vec<String>;
    fn predict(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Synthetic,
    Pretrained,
}

/// Every network handle a run needs, resolved up front.
#[derive(Clone)]
pub struct BackendBundle {
    pub kind: BackendKind,
    pub generator: Arc<dyn Generator>,
    pub inverter: Arc<dyn Inverter>,
    pub identity_encoder: Arc<dyn IdentityEncoder>,
    pub semantic_encoder: Arc<dyn SemanticEncoder>,
    pub face_detector: Arc<dyn FaceDetector>,
    /// Re-identification matchers, keyed by report column tag.
    pub reid_encoders: BTreeMap<String, Arc<dyn IdentityEncoder>>,
    pub fid_extractor: Arc<dyn FeatureExtractor>,
    pub attribute_classifier: Option<Arc<dyn AttributeClassifier>>,
    /// Role name to content hash of the weights behind it.
    pub model_fingerprints: BTreeMap<String, String>,
}

impl std::fmt::Debug for BackendBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendBundle")
            .field("kind", &self.kind)
            .field("model_fingerprints", &self.model_fingerprints)
            .finish_non_exhaustive()
    }
}

impl BackendBundle {
    pub fn synthetic(params: SyntheticParams) -> Result<Self> {
        Ok(Arc::new(SyntheticTestbed::new(params)?).bundle())
    }

    pub fn generate(&self, code: &LatentCode) -> Result<ImageTensor> {
        self.generator.synthesize(&code.to_f64())
    }

    pub fn invert(&self, image: &ImageTensor) -> Result<LatentCode> {
        self.inverter.invert(image)
    }

    pub fn embed_identity(&self, image: &ImageTensor) -> Result<IdentityEmbedding> {
        self.identity_encoder.embed(image)
    }

    pub fn embed_semantic(&self, image: &ImageTensor) -> Result<SemanticFeatures> {
        self.semantic_encoder.encode(image)
    }

    pub fn detect_face(&self, image: &ImageTensor) -> Result<Detection> {
        self.face_detector.detect(image)
    }

    /// One fingerprint covering every model in the bundle.
    pub fn fingerprint(&self) -> String {
        crate::hashing::canonical_hash(&self.model_fingerprints)
    }
}

/// Standard normal base sample for item `index` of a seeded stream.
pub fn sample_base(seed: u64, index: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("z/{index}")));
    (0..LATENT_COLS)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

/// Draws `z ~ N(0, I)`, maps it and broadcasts the style row to all 18 rows.
pub fn sample_latent(generator: &dyn Generator, seed: u64, index: usize) -> Result<LatentCode> {
    let row = generator.map_base(&sample_base(seed, index))?;
    let row: Vec<f32> = row.iter().map(|&v| v as f32).collect();
    LatentCode::broadcast(&row)
}

pub fn sample_latents(generator: &dyn Generator, n: usize, seed: u64) -> Result<Vec<LatentCode>> {
    (0..n).map(|i| sample_latent(generator, seed, i)).collect()
}

pub(crate) fn check_code(code: &[f64]) -> Result<()> {
    if code.len() != LATENT_LEN {
        return Err(Error::Validation(format!(
            "latent code must have {LATENT_LEN} values, got {}",
            code.len()
        )));
    }
    if code.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("latent code is not finite".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_embedding_is_still_unit() {
        let e = IdentityEmbedding::normalize(vec![0.0; 4]).unwrap();
        assert_eq!(e.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn semantic_shape_contract() {
        assert!(SemanticFeatures::new(vec![0.0; 512], vec![0.0; 4 * 512], 2).is_ok());
        assert!(matches!(
            SemanticFeatures::new(vec![0.0; 512], vec![0.0; 3 * 512], 2),
            Err(Error::FeatureShapeMismatch(_))
        ));
    }
}
