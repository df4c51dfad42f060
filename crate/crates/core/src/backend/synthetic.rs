//! Analytic stand-in for the pretrained networks.
//!
//! The generator is affine from the 18×512 code to a small RGB image, followed
//! by clamping to `[0, 1]`. Its range splits into two orthogonal pixel
//! subspaces:
//!
//! * an identity subspace driven only by rows 3–7,
//! * a context subspace driven only by rows 0–2 and 8–17.
//!
//! Both are orthogonal to the bias image and to the constant "face present"
//! direction read by the detector. The identity encoder projects onto the
//! identity subspace; the semantic encoder reads the context subspace plus the
//! identity subspace scaled by the coupling coefficient. With zero coupling
//! the two encoders see disjoint parts of the code, and the inverter is the
//! exact pseudo-inverse of the affine map.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{self, Matrix};
use super::{
    check_code, AttributeClassifier, BackendBundle, BackendKind, Detection, FaceDetector,
    FeatureExtractor, Generator, IdentityEmbedding, IdentityEncoder, Inverter, SemanticEncoder,
    SemanticFeatures, EMBEDDING_DIM, FEATURE_DIM,
};
use crate::error::{Error, Result};
use crate::evaluation::attributes::{AttributeSpec, Region};
use crate::hashing::{canonical_hash, derive_seed};
use crate::image::{ImageTensor, CHANNELS};
use crate::latent::{LatentCode, LATENT_COLS, LATENT_LEN};

/// Rows of the code that drive the identity subspace.
pub const IDENTITY_ROWS: std::ops::Range<usize> = 3..8;
const ID_LEN: usize = 5 * LATENT_COLS;
const CTX_LEN: usize = 13 * LATENT_COLS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    /// Seed for every fixed weight in the testbed.
    pub seed: u64,
    /// Weight of the identity subspace inside the semantic features.
    pub coupling: f64,
    pub image_side: usize,
    /// Mean intensity above which a face is reported.
    pub detection_threshold: f64,
    pub patch_grid_side: usize,
    pub identity_dim: usize,
    pub context_dim: usize,
    /// Standard deviation of each signal coordinate for a sampled code.
    pub signal_gain: f64,
    /// Scale of the mapping stage from base samples to style rows.
    pub mapping_gain: f64,
    /// Share of identity signal in inner-face attribute scores.
    pub inner_identity_weight: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            seed: 0,
            coupling: 0.05,
            image_side: 12,
            detection_threshold: 0.25,
            patch_grid_side: 2,
            identity_dim: 16,
            context_dim: 24,
            signal_gain: 0.25,
            mapping_gain: 4.0,
            inner_identity_weight: 0.2,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let pixels = CHANNELS * self.image_side * self.image_side;
        if !(self.coupling.is_finite() && self.coupling >= 0.0) {
            errs.push(format!("coupling must be a finite value >= 0, got {}", self.coupling));
        }
        if !(self.detection_threshold > 0.0 && self.detection_threshold < 1.0) {
            errs.push(format!(
                "detection_threshold must lie in (0, 1), got {}",
                self.detection_threshold
            ));
        }
        if self.patch_grid_side == 0 {
            errs.push("patch_grid_side must be >= 1".into());
        }
        if self.identity_dim == 0 || self.context_dim == 0 {
            errs.push("identity_dim and context_dim must be >= 1".into());
        }
        if self.identity_dim + self.context_dim + 2 > pixels {
            errs.push(format!(
                "image_side {} gives {pixels} pixels, too few for {} signal dimensions",
                self.image_side,
                self.identity_dim + self.context_dim + 2
            ));
        }
        if self.identity_dim + self.context_dim > FEATURE_DIM {
            errs.push(format!(
                "identity_dim + context_dim must be <= {FEATURE_DIM}"
            ));
        }
        if !(self.signal_gain > 0.0 && self.signal_gain.is_finite()) {
            errs.push("signal_gain must be > 0".into());
        }
        if !(self.mapping_gain > 0.0 && self.mapping_gain.is_finite()) {
            errs.push("mapping_gain must be > 0".into());
        }
        if !(self.inner_identity_weight >= 0.0 && self.inner_identity_weight.is_finite()) {
            errs.push("inner_identity_weight must be >= 0".into());
        }
        errs
    }
}

/// Linear ground-truth attribute scores over the two signal subspaces.
#[derive(Clone, Debug)]
pub struct AttributeModel {
    pub spec: AttributeSpec,
    context_dirs: Matrix,
    identity_dirs: Matrix,
}

impl AttributeModel {
    pub fn scores(&self, y_id: &[f64], y_ctx: &[f64]) -> Vec<f64> {
        let a = self.context_dirs.apply(y_ctx);
        let b = self.identity_dirs.apply(y_id);
        a.iter().zip(&b).map(|(x, y)| x + y).collect()
    }
}

pub struct SyntheticTestbed {
    params: SyntheticParams,
    pixels: usize,
    bias: Vec<f64>,
    face_dir: Vec<f64>,
    /// `identity_dim × pixels`, orthonormal rows.
    u_id: Matrix,
    /// `context_dim × pixels`, orthonormal rows.
    u_ctx: Matrix,
    /// `identity_dim × 2560`, orthonormal rows.
    q_id: Matrix,
    /// `context_dim × 6656`, orthonormal rows.
    q_ctx: Matrix,
    mapping: Matrix,
    id_proj: Matrix,
    alt_proj: Matrix,
    sem_patch: Matrix,
    sem_cls: Matrix,
    attributes: AttributeModel,
    fingerprint: String,
}

impl std::fmt::Debug for SyntheticTestbed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SyntheticTestbed")
            .field("params", &self.params)
            .field("fingerprint", &self.fingerprint)
            .finish_non_exhaustive()
    }
}

fn part_rng(seed: u64, part: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("synthetic/{part}")))
}

fn rows_of(m: &nalgebra::DMatrix<f64>, cols: std::ops::Range<usize>) -> Matrix {
    Matrix::from_dmatrix(&m.columns(cols.start, cols.len()).transpose())
}

fn ctx_slice(code: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(CTX_LEN);
    v.extend_from_slice(&code[..IDENTITY_ROWS.start * LATENT_COLS]);
    v.extend_from_slice(&code[IDENTITY_ROWS.end * LATENT_COLS..]);
    v
}

impl SyntheticTestbed {
    pub fn new(params: SyntheticParams) -> Result<Self> {
        let errs = params.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let p = &params;
        let side = p.image_side;
        let pixels = CHANNELS * side * side;
        let (kid, kctx) = (p.identity_dim, p.context_dim);

        let ones = vec![1.0; pixels];
        let basis =
            linalg::orthonormal_columns_with(&ones, 2 + kid + kctx, &mut part_rng(p.seed, "basis"));
        let face_dir: Vec<f64> = basis.column(0).iter().copied().collect();
        let pattern: Vec<f64> = basis.column(1).iter().copied().collect();
        let amp = 0.05 * (pixels as f64).sqrt();
        let bias = pattern.iter().map(|v| 0.5 + amp * v).collect();
        let u_id = rows_of(&basis, 2..2 + kid);
        let u_ctx = rows_of(&basis, 2 + kid..2 + kid + kctx);

        let q_id = Matrix::from_dmatrix(
            &linalg::orthonormal_columns(ID_LEN, kid, &mut part_rng(p.seed, "q_id")).transpose(),
        );
        let q_ctx = Matrix::from_dmatrix(
            &linalg::orthonormal_columns(CTX_LEN, kctx, &mut part_rng(p.seed, "q_ctx"))
                .transpose(),
        );
        let mut mapping = Matrix::from_dmatrix(&linalg::orthonormal_columns(
            LATENT_COLS,
            LATENT_COLS,
            &mut part_rng(p.seed, "mapping"),
        ));
        mapping.data.iter_mut().for_each(|v| *v *= p.mapping_gain);

        let id_proj = Matrix::from_dmatrix(&linalg::orthonormal_columns(
            EMBEDDING_DIM,
            kid,
            &mut part_rng(p.seed, "id_proj"),
        ));
        let alt_proj = Matrix::from_dmatrix(&linalg::orthonormal_columns(
            EMBEDDING_DIM,
            kid + kctx,
            &mut part_rng(p.seed, "alt_proj"),
        ));
        let sem_in = kctx + kid;
        let npatch = p.patch_grid_side * p.patch_grid_side;
        let sem_scale = 1.0 / (sem_in as f64).sqrt();
        // Orthonormal columns, so every semantic input direction has the same
        // gain and the coupling is exactly the identity-to-context gain ratio.
        let mut sem_patch = Matrix::from_dmatrix(&linalg::orthonormal_columns(
            npatch * FEATURE_DIM,
            sem_in,
            &mut part_rng(p.seed, "sem_patch"),
        ));
        let patch_gain = sem_scale * ((npatch * FEATURE_DIM) as f64).sqrt();
        sem_patch.data.iter_mut().for_each(|v| *v *= patch_gain);
        let sem_cls = Matrix::gaussian(FEATURE_DIM, sem_in, sem_scale, &mut part_rng(p.seed, "sem_cls"));

        let spec = AttributeSpec::celeba();
        let n_attr = spec.names.len();
        let mut arng = part_rng(p.seed, "attributes");
        // Directions are drawn independently, so there may be more attributes
        // than context dimensions.
        let mut context_dirs = Matrix::gaussian(n_attr, kctx, 1.0, &mut arng);
        let mut identity_dirs = Matrix::gaussian(n_attr, kid, 1.0, &mut arng);
        for j in 0..n_attr {
            let a = &mut context_dirs.data[j * kctx..(j + 1) * kctx];
            let na = linalg::norm(a);
            a.iter_mut().for_each(|v| *v /= na);
            let b = &mut identity_dirs.data[j * kid..(j + 1) * kid];
            let weight = match spec.region_of(j) {
                Region::Inner => p.inner_identity_weight,
                Region::Outer => 0.0,
            };
            let nb = linalg::norm(b);
            b.iter_mut().for_each(|v| *v *= weight / nb);
        }
        let attributes = AttributeModel {
            spec,
            context_dirs,
            identity_dirs,
        };

        let fingerprint = canonical_hash(&("synthetic-testbed/v1", &params));
        Ok(Self {
            params,
            pixels,
            bias,
            face_dir,
            u_id,
            u_ctx,
            q_id,
            q_ctx,
            mapping,
            id_proj,
            alt_proj,
            sem_patch,
            sem_cls,
            attributes,
            fingerprint,
        })
    }

    /// Gain from code coordinates to signal coordinates. Sampled style rows have
    /// standard deviation `mapping_gain`, so signals end up at `signal_gain`.
    pub fn code_gain(&self) -> f64 {
        self.params.signal_gain / self.params.mapping_gain
    }

    pub fn params(&self) -> &SyntheticParams {
        &self.params
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn attribute_model(&self) -> &AttributeModel {
        &self.attributes
    }

    pub fn bias_image(&self) -> &[f64] {
        &self.bias
    }

    pub fn bundle(self: Arc<Self>) -> BackendBundle {
        let mut reid: BTreeMap<String, Arc<dyn IdentityEncoder>> = BTreeMap::new();
        reid.insert("synthetic-id".into(), self.clone());
        reid.insert("synthetic-alt".into(), Arc::new(AltMatcher(self.clone())));
        let fp = |role: &str| canonical_hash(&(role, &self.fingerprint));
        let model_fingerprints = [
            "generator",
            "inverter",
            "identity_encoder",
            "semantic_encoder",
            "face_detector",
            "reid:synthetic-alt",
            "attribute_classifier",
        ]
        .iter()
        .map(|r| (r.to_string(), fp(r)))
        .collect();
        BackendBundle {
            kind: BackendKind::Synthetic,
            generator: self.clone(),
            inverter: self.clone(),
            identity_encoder: self.clone(),
            semantic_encoder: self.clone(),
            face_detector: self.clone(),
            reid_encoders: reid,
            fid_extractor: self.clone(),
            attribute_classifier: Some(self.clone()),
            model_fingerprints,
        }
    }

    /// Identity and context signal coordinates of a working-precision code.
    pub fn signal_from_code(&self, code: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let g = self.code_gain();
        let id = &code[IDENTITY_ROWS.start * LATENT_COLS..IDENTITY_ROWS.end * LATENT_COLS];
        let y_id = self.q_id.apply(id).into_iter().map(|v| g * v).collect();
        let y_ctx = self
            .q_ctx
            .apply(&ctx_slice(code))
            .into_iter()
            .map(|v| g * v)
            .collect();
        (y_id, y_ctx)
    }

    /// Signal coordinates read back from an image.
    pub fn signal_from_image(&self, image: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (self.u_id.apply(image), self.u_ctx.apply(image))
    }

    /// Pre-clamp generator output.
    pub fn raw_image(&self, code: &[f64]) -> Vec<f64> {
        let (y_id, y_ctx) = self.signal_from_code(code);
        let a = self.u_id.apply_t(&y_id);
        let b = self.u_ctx.apply_t(&y_ctx);
        self.bias
            .iter()
            .zip(a.iter().zip(&b))
            .map(|(c, (x, y))| c + x + y)
            .collect()
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        if image.height() != self.params.image_side || image.width() != self.params.image_side {
            return Err(Error::Validation(format!(
                "synthetic backend expects {s}x{s} images, got {}x{}",
                image.height(),
                image.width(),
                s = self.params.image_side
            )));
        }
        Ok(())
    }

    fn semantic_input(&self, image: &[f64]) -> Vec<f64> {
        let (y_id, y_ctx) = self.signal_from_image(image);
        let eps = self.params.coupling;
        y_ctx
            .into_iter()
            .chain(y_id.into_iter().map(|v| eps * v))
            .collect()
    }

    /// Ground-truth attribute labels from the code that produced an image.
    pub fn labels_for_code(&self, code: &[f64]) -> Vec<bool> {
        let (y_id, y_ctx) = self.signal_from_code(code);
        self.attributes
            .scores(&y_id, &y_ctx)
            .into_iter()
            .map(|s| s > 0.0)
            .collect()
    }

    /// A "real" face: every row drawn independently through the mapping stage.
    pub fn sample_real_code(&self, seed: u64, index: usize) -> Result<LatentCode> {
        let mut rows = Vec::with_capacity(LATENT_LEN);
        for r in 0..crate::latent::LATENT_ROWS {
            let z = super::sample_base(derive_seed(seed, &format!("real/{index}")), r);
            rows.extend(self.map_base(&z)?.into_iter().map(|v| v as f32));
        }
        LatentCode::from_vec(rows)
    }
}

impl Generator for SyntheticTestbed {
    fn map_base(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != LATENT_COLS {
            return Err(Error::Validation(format!(
                "base sample must have {LATENT_COLS} values, got {}",
                z.len()
            )));
        }
        Ok(self.mapping.apply(z))
    }

    fn synthesize(&self, code: &[f64]) -> Result<ImageTensor> {
        check_code(code)?;
        let side = self.params.image_side;
        ImageTensor::new(side, side, self.raw_image(code))
    }

    fn synthesize_vjp(&self, code: &[f64], grad_image: &[f64]) -> Result<Vec<f64>> {
        check_code(code)?;
        if grad_image.len() != self.pixels {
            return Err(Error::Validation("image cotangent has wrong length".into()));
        }
        let raw = self.raw_image(code);
        let masked: Vec<f64> = raw
            .iter()
            .zip(grad_image)
            .map(|(&r, &g)| if (0.0..=1.0).contains(&r) { g } else { 0.0 })
            .collect();
        let g = self.code_gain();
        let d_id = self.q_id.apply_t(&self.u_id.apply(&masked));
        let d_ctx = self.q_ctx.apply_t(&self.u_ctx.apply(&masked));
        let low = IDENTITY_ROWS.start * LATENT_COLS;
        let mut out = Vec::with_capacity(LATENT_LEN);
        out.extend(d_ctx[..low].iter().map(|v| g * v));
        out.extend(d_id.iter().map(|v| g * v));
        out.extend(d_ctx[low..].iter().map(|v| g * v));
        Ok(out)
    }
}

impl Inverter for SyntheticTestbed {
    fn invert(&self, image: &ImageTensor) -> Result<LatentCode> {
        self.check_image(image)?;
        let g = self.code_gain();
        let (y_id, y_ctx) = self.signal_from_image(image.as_slice());
        let id = self.q_id.apply_t(&y_id);
        let ctx = self.q_ctx.apply_t(&y_ctx);
        let low = IDENTITY_ROWS.start * LATENT_COLS;
        let code: Vec<f64> = ctx[..low]
            .iter()
            .chain(&id)
            .chain(&ctx[low..])
            .map(|v| v / g)
            .collect();
        LatentCode::from_f64(&code)
    }
}

impl IdentityEncoder for SyntheticTestbed {
    fn embed(&self, image: &ImageTensor) -> Result<IdentityEmbedding> {
        self.check_image(image)?;
        let y_id = self.u_id.apply(image.as_slice());
        IdentityEmbedding::normalize(self.id_proj.apply(&y_id))
    }

    fn embed_vjp(&self, image: &ImageTensor, grad: &[f64]) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let y_id = self.u_id.apply(image.as_slice());
        let u = self.id_proj.apply(&y_id);
        let du = normalize_vjp(&u, grad);
        Ok(self.u_id.apply_t(&self.id_proj.apply_t(&du)))
    }
}

/// Cotangent of `u ↦ u / |u|` at `u`.
pub(crate) fn normalize_vjp(u: &[f64], grad: &[f64]) -> Vec<f64> {
    let n = linalg::norm(u);
    if n < 1e-300 {
        return vec![0.0; u.len()];
    }
    let e: Vec<f64> = u.iter().map(|v| v / n).collect();
    let ge = linalg::dot(grad, &e);
    grad.iter().zip(&e).map(|(g, e)| (g - ge * e) / n).collect()
}

impl SemanticEncoder for SyntheticTestbed {
    fn encode(&self, image: &ImageTensor) -> Result<SemanticFeatures> {
        self.check_image(image)?;
        let s = self.semantic_input(image.as_slice());
        SemanticFeatures::new(
            self.sem_cls.apply(&s),
            self.sem_patch.apply(&s),
            self.params.patch_grid_side,
        )
    }

    fn patch_vjp(&self, image: &ImageTensor, grad_patches: &[f64]) -> Result<Vec<f64>> {
        self.check_image(image)?;
        if grad_patches.len() != self.sem_patch.rows {
            return Err(Error::FeatureShapeMismatch(
                "patch cotangent has wrong length".into(),
            ));
        }
        let ds = self.sem_patch.apply_t(grad_patches);
        let kctx = self.params.context_dim;
        let eps = self.params.coupling;
        let mut dx = self.u_ctx.apply_t(&ds[..kctx]);
        if eps != 0.0 {
            let did: Vec<f64> = ds[kctx..].iter().map(|v| eps * v).collect();
            for (o, v) in dx.iter_mut().zip(self.u_id.apply_t(&did)) {
                *o += v;
            }
        }
        Ok(dx)
    }
}

impl FaceDetector for SyntheticTestbed {
    fn detect(&self, image: &ImageTensor) -> Result<Detection> {
        self.check_image(image)?;
        // Projection onto the constant direction, rescaled to mean intensity.
        let confidence = linalg::dot(image.as_slice(), &self.face_dir) / (self.pixels as f64).sqrt();
        let found = confidence > self.params.detection_threshold;
        let side = self.params.image_side as f64;
        Ok(Detection {
            found,
            bbox: found.then_some([0.0, 0.0, side, side]),
            confidence,
        })
    }
}

impl FeatureExtractor for SyntheticTestbed {
    fn features(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.encode(image)?.cls)
    }
}

/// Closed-form linear probe: the testbed's own attribute directions, read
/// through the image-space projections.
impl AttributeClassifier for SyntheticTestbed {
    fn attribute_names(&self) -> Vec<String> {
        self.attributes.spec.names.clone()
    }

    fn predict(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let (y_id, y_ctx) = self.signal_from_image(image.as_slice());
        let temperature = 0.05 * self.params.signal_gain;
        Ok(self
            .attributes
            .scores(&y_id, &y_ctx)
            .into_iter()
            .map(|s| 1.0 / (1.0 + (-s / temperature).exp()))
            .collect())
    }
}

/// Second re-identification matcher: mostly identity, with a small share of
/// context signal.
pub struct AltMatcher(Arc<SyntheticTestbed>);

impl IdentityEncoder for AltMatcher {
    fn embed(&self, image: &ImageTensor) -> Result<IdentityEmbedding> {
        let t = &self.0;
        t.check_image(image)?;
        let (y_id, y_ctx) = t.signal_from_image(image.as_slice());
        let input: Vec<f64> = y_id
            .into_iter()
            .chain(y_ctx.into_iter().map(|v| 0.15 * v))
            .collect();
        IdentityEmbedding::normalize(t.alt_proj.apply(&input))
    }
}
