//! Per-image optimization of the trainable band of a spliced code under the
//! identity-margin and patch-feature L1 losses.

use serde::{Deserialize, Serialize};

use crate::backend::{BackendBundle, IdentityEmbedding, SemanticFeatures};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::pairing::SplicedCode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttNormalization {
    /// Plain L1 norm over all patch features.
    Sum,
    /// L1 norm divided by the number of features.
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub margin: f64,
    pub lambda_id: f64,
    pub lambda_att: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub att_normalization: AttNormalization,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            margin: 0.0,
            lambda_id: 1.0,
            lambda_att: 1.0,
            epochs: 50,
            steps_per_epoch: 1,
            learning_rate: 0.01,
            att_normalization: AttNormalization::Mean,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl HyperParams {
    /// All violations, not just the first. `allow_empty_schedule` admits a
    /// zero-step run.
    pub fn problems(&self, allow_empty_schedule: bool) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.margin) {
            out.push(format!("margin must be in [0, 1], got {}", self.margin));
        }
        if !(self.lambda_id >= 0.0 && self.lambda_id.is_finite()) {
            out.push(format!("lambda_id must be >= 0, got {}", self.lambda_id));
        }
        if !(self.lambda_att >= 0.0 && self.lambda_att.is_finite()) {
            out.push(format!("lambda_att must be >= 0, got {}", self.lambda_att));
        }
        if !allow_empty_schedule && self.epochs == 0 {
            out.push("epochs must be >= 1".into());
        }
        if !allow_empty_schedule && self.steps_per_epoch == 0 {
            out.push("steps_per_epoch must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            out.push("adam betas must be in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            out.push("adam_eps must be > 0".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems(false);
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_id: f64,
    pub l_att: f64,
    pub total: f64,
    pub cos_sim: f64,
}

impl StepRecord {
    fn is_finite(&self) -> bool {
        self.l_id.is_finite() && self.l_att.is_finite() && self.total.is_finite() && self.cos_sim.is_finite()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub steps: Vec<StepRecord>,
}

impl LossReport {
    pub fn last(&self) -> Option<&StepRecord> {
        self.steps.last()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityLoss {
    pub loss: f64,
    pub cos_sim: f64,
}

pub fn margin_loss(cos_sim: f64, margin: f64) -> f64 {
    (cos_sim - margin).abs()
}

pub fn identity_loss_embeddings(a: &IdentityEmbedding, r: &IdentityEmbedding, margin: f64) -> IdentityLoss {
    let cos_sim = a.cosine(r).clamp(-1.0, 1.0);
    IdentityLoss {
        loss: margin_loss(cos_sim, margin),
        cos_sim,
    }
}

pub fn identity_loss(
    backend: &BackendBundle,
    x_a: &ImageTensor,
    x_r: &ImageTensor,
    margin: f64,
) -> Result<IdentityLoss> {
    let a = backend.embed_identity(x_a)?;
    let r = backend.embed_identity(x_r)?;
    Ok(identity_loss_embeddings(&a, &r, margin))
}

/// L1 distance between flattened patch grids.
pub fn feature_l1(a: &SemanticFeatures, r: &SemanticFeatures, norm: AttNormalization) -> Result<f64> {
    if a.grid_side != r.grid_side || a.patches.len() != r.patches.len() {
        return Err(Error::FeatureShapeMismatch(format!(
            "patch grids {}x{} ({} values) and {}x{} ({} values)",
            a.grid_side,
            a.grid_side,
            a.patches.len(),
            r.grid_side,
            r.grid_side,
            r.patches.len()
        )));
    }
    let sum: f64 = a.patches.iter().zip(&r.patches).map(|(x, y)| (x - y).abs()).sum();
    Ok(match norm {
        AttNormalization::Sum => sum,
        AttNormalization::Mean => sum / a.patches.len().max(1) as f64,
    })
}

pub fn attribute_loss(
    backend: &BackendBundle,
    x_a: &ImageTensor,
    x_r: &ImageTensor,
    norm: AttNormalization,
) -> Result<f64> {
    let a = backend.embed_semantic(x_a)?;
    let r = backend.embed_semantic(x_r)?;
    feature_l1(&a, &r, norm)
}

pub fn combine(step: usize, id: IdentityLoss, l_att: f64, hp: &HyperParams) -> StepRecord {
    StepRecord {
        step,
        l_id: id.loss,
        l_att,
        total: hp.lambda_id * id.loss + hp.lambda_att * l_att,
        cos_sim: id.cos_sim,
    }
}

pub fn total_loss(backend: &BackendBundle, x_a: &ImageTensor, x_r: &ImageTensor, hp: &HyperParams) -> Result<StepRecord> {
    let id = identity_loss(backend, x_a, x_r, hp.margin)?;
    let att = attribute_loss(backend, x_a, x_r, hp.att_normalization)?;
    Ok(combine(0, id, att, hp))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The loss as a function of the trainable block alone. Frozen rows live in
/// `base` and are never written.
pub struct Objective<'a> {
    backend: &'a BackendBundle,
    base: Vec<f64>,
    range: std::ops::Range<usize>,
    target_id: IdentityEmbedding,
    target_feat: SemanticFeatures,
    hp: HyperParams,
}

impl<'a> Objective<'a> {
    pub fn new(
        backend: &'a BackendBundle,
        spliced: &SplicedCode,
        real_image: &ImageTensor,
        hp: &HyperParams,
    ) -> Result<Self> {
        Ok(Self {
            backend,
            base: spliced.assembled_f64(),
            range: spliced.split.flat_range(),
            target_id: backend.embed_identity(real_image)?,
            target_feat: backend.embed_semantic(real_image)?,
            hp: hp.clone(),
        })
    }

    pub fn block_len(&self) -> usize {
        self.range.len()
    }

    fn code_with(&self, block: &[f64]) -> Result<Vec<f64>> {
        if block.len() != self.range.len() {
            return Err(Error::Validation(format!(
                "block has {} values, expected {}",
                block.len(),
                self.range.len()
            )));
        }
        let mut code = self.base.clone();
        code[self.range.clone()].copy_from_slice(block);
        Ok(code)
    }

    pub fn render(&self, block: &[f64]) -> Result<ImageTensor> {
        let code = self.code_with(block)?;
        self.backend.generator.synthesize(&code)
    }

    pub fn evaluate(&self, block: &[f64], step: usize) -> Result<StepRecord> {
        let x = self.render(block)?;
        let id = identity_loss_embeddings(&self.backend.embed_identity(&x)?, &self.target_id, self.hp.margin);
        let att = feature_l1(&self.backend.embed_semantic(&x)?, &self.target_feat, self.hp.att_normalization)?;
        Ok(combine(step, id, att, &self.hp))
    }

    /// Loss and its gradient with respect to the block.
    pub fn evaluate_with_grad(&self, block: &[f64], step: usize) -> Result<(StepRecord, Vec<f64>)> {
        let code = self.code_with(block)?;
        let x = self.backend.generator.synthesize(&code)?;
        let e_a = self.backend.embed_identity(&x)?;
        let feats = self.backend.embed_semantic(&x)?;
        let id = identity_loss_embeddings(&e_a, &self.target_id, self.hp.margin);
        let att = feature_l1(&feats, &self.target_feat, self.hp.att_normalization)?;
        let record = combine(step, id, att, &self.hp);

        let mut grad_x = vec![0.0; x.len()];
        if self.hp.lambda_id != 0.0 {
            let s = self.hp.lambda_id * sign(id.cos_sim - self.hp.margin);
            let g_e: Vec<f64> = self.target_id.as_slice().iter().map(|v| s * v).collect();
            let g = self.backend.identity_encoder.embed_vjp(&x, &g_e)?;
            add_into(&mut grad_x, &g)?;
        }
        if self.hp.lambda_att != 0.0 {
            let scale = match self.hp.att_normalization {
                AttNormalization::Sum => self.hp.lambda_att,
                AttNormalization::Mean => self.hp.lambda_att / feats.patches.len().max(1) as f64,
            };
            let g_p: Vec<f64> = feats
                .patches
                .iter()
                .zip(&self.target_feat.patches)
                .map(|(a, r)| scale * sign(a - r))
                .collect();
            let g = self.backend.semantic_encoder.patch_vjp(&x, &g_p)?;
            add_into(&mut grad_x, &g)?;
        }
        let grad_code = self.backend.generator.synthesize_vjp(&code, &grad_x)?;
        if grad_code.len() != code.len() {
            return Err(Error::Backend(format!(
                "generator gradient has {} values, expected {}",
                grad_code.len(),
                code.len()
            )));
        }
        Ok((record, grad_code[self.range.clone()].to_vec()))
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) -> Result<()> {
    if g.len() != acc.len() {
        return Err(Error::Backend(format!(
            "image gradient has {} values, expected {}",
            g.len(),
            acc.len()
        )));
    }
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
    Ok(())
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, hp: &HyperParams) -> Self {
        Self::with_rates(len, hp.learning_rate, hp.beta1, hp.beta2, hp.adam_eps)
    }

    pub fn with_rates(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimized {
    pub code: SplicedCode,
    /// One record per gradient step plus a final record at the stored code.
    pub report: LossReport,
}

/// Minimizes the total loss over the trainable band. The last trajectory
/// record is evaluated at the storage-precision code actually returned.
pub fn optimize_latent(
    backend: &BackendBundle,
    real_id: &str,
    real_image: &ImageTensor,
    spliced: &SplicedCode,
    hp: &HyperParams,
) -> Result<Optimized> {
    if spliced.provenance.real_id != real_id {
        return Err(Error::Validation(format!(
            "spliced code belongs to `{}`, not `{real_id}`",
            spliced.provenance.real_id
        )));
    }
    let problems = hp.problems(true);
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let objective = Objective::new(backend, spliced, real_image, hp)?;
    let mut block: Vec<f64> = spliced.trainable.iter().map(|&v| v as f64).collect();
    let mut adam = Adam::new(block.len(), hp);
    let mut trajectory = Vec::with_capacity(hp.total_steps() + 1);
    for step in 0..hp.total_steps() {
        let (record, grad) = objective.evaluate_with_grad(&block, step)?;
        trajectory.push(record);
        if !record.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, trajectory });
        }
        adam.step(&mut block, &grad);
        if block.iter().any(|v| !v.is_finite() || !(*v as f32).is_finite()) {
            return Err(Error::Divergence {
                step: step + 1,
                trajectory,
            });
        }
    }
    let code = spliced.with_trainable(&block)?;
    let stored: Vec<f64> = code.trainable.iter().map(|&v| v as f64).collect();
    let last = objective.evaluate(&stored, hp.total_steps())?;
    trajectory.push(last);
    if !last.is_finite() {
        return Err(Error::Divergence {
            step: hp.total_steps(),
            trajectory,
        });
    }
    Ok(Optimized {
        code,
        report: LossReport { steps: trajectory },
    })
}
