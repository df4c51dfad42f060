//! Two-layer multi-label MLP trained full-batch with focal loss.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::focal::{focal_element, focal_element_grad_logit};
use crate::error::{Error, Result};
use crate::optimizer::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 300,
            learning_rate: 0.01,
            weight_decay: 1e-3,
            gamma: 2.0,
            alpha: 0.5,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.hidden == 0 {
            out.push("classifier.hidden must be >= 1".into());
        }
        if self.epochs == 0 {
            out.push("classifier.epochs must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            out.push(format!("classifier.learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            out.push("classifier.weight_decay must be >= 0".into());
        }
        if !(self.gamma >= 0.0) {
            out.push(format!("classifier.gamma must be >= 0, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            out.push(format!("classifier.alpha must be in [0, 1], got {}", self.alpha));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
    w1: DMatrix<f64>,
    b1: Vec<f64>,
    w2: DMatrix<f64>,
    b2: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct Shapes {
    d: usize,
    h: usize,
    a: usize,
}

impl Shapes {
    fn len(&self) -> usize {
        self.h * self.d + self.h + self.a * self.h + self.a
    }
}

fn unpack<'a>(theta: &'a [f64], s: &Shapes) -> (DMatrix<f64>, &'a [f64], DMatrix<f64>, &'a [f64]) {
    let (w1, rest) = theta.split_at(s.h * s.d);
    let (b1, rest) = rest.split_at(s.h);
    let (w2, b2) = rest.split_at(s.a * s.h);
    (
        DMatrix::from_row_slice(s.h, s.d, w1),
        b1,
        DMatrix::from_row_slice(s.a, s.h, w2),
        b2,
    )
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |r| (0..m.ncols()).map(move |c| m[(r, c)]))
}

/// Loss and flat gradient of the network on a standardized batch.
fn loss_and_grad(theta: &[f64], s: &Shapes, x: &DMatrix<f64>, y: &[Vec<bool>], cfg: &ClassifierConfig) -> (f64, Vec<f64>) {
    let n = x.nrows();
    let (w1, b1, w2, b2) = unpack(theta, s);
    let mut hid = x * w1.transpose();
    for r in 0..n {
        for c in 0..s.h {
            hid[(r, c)] = (hid[(r, c)] + b1[c]).tanh();
        }
    }
    let mut z = &hid * w2.transpose();
    let count = (n * s.a) as f64;
    let mut loss = 0.0;
    for r in 0..n {
        for c in 0..s.a {
            let p = sigmoid(z[(r, c)] + b2[c]);
            loss += focal_element(p, y[r][c], cfg.gamma, cfg.alpha);
            z[(r, c)] = focal_element_grad_logit(p, y[r][c], cfg.gamma, cfg.alpha) / count;
        }
    }
    loss /= count;
    let dz = z;
    let dw2 = dz.transpose() * &hid;
    let db2: Vec<f64> = (0..s.a).map(|c| dz.column(c).sum()).collect();
    let mut dh = &dz * &w2;
    for r in 0..n {
        for c in 0..s.h {
            let t = hid[(r, c)];
            dh[(r, c)] *= 1.0 - t * t;
        }
    }
    let dw1 = dh.transpose() * x;
    let db1: Vec<f64> = (0..s.h).map(|c| dh.column(c).sum()).collect();

    let wd = cfg.weight_decay;
    loss += 0.5 * wd * (w1.norm_squared() + w2.norm_squared());
    let mut grad = Vec::with_capacity(s.len());
    grad.extend(row_major(&dw1).zip(row_major(&w1)).map(|(g, w)| g + wd * w));
    grad.extend(db1);
    grad.extend(row_major(&dw2).zip(row_major(&w2)).map(|(g, w)| g + wd * w));
    grad.extend(db2);
    (loss, grad)
}

fn check_batch(x: &[Vec<f64>], y: &[Vec<bool>]) -> Result<(usize, usize)> {
    if x.is_empty() {
        return Err(Error::InsufficientData("no training samples".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Label(format!("{} samples but {} label rows", x.len(), y.len())));
    }
    let d = x[0].len();
    let a = y[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::FeatureShapeMismatch("ragged classifier inputs".into()));
    }
    if y.iter().any(|r| r.len() != a) {
        return Err(Error::Label("ragged label rows".into()));
    }
    Ok((d, a))
}

impl Mlp {
    pub fn train(x: &[Vec<f64>], y: &[Vec<bool>], cfg: &ClassifierConfig) -> Result<Self> {
        let problems = cfg.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let (d, a) = check_batch(x, y)?;
        let n = x.len() as f64;
        let mut input_mean = vec![0.0; d];
        for r in x {
            for (m, v) in input_mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut input_scale = vec![0.0; d];
        for r in x {
            for ((s, v), m) in input_scale.iter_mut().zip(r).zip(&input_mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut input_scale {
            *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 0.0 };
        }
        let shapes = Shapes { d, h: cfg.hidden, a };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n1 = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("finite std");
        let n2 = Normal::new(0.0, (1.0 / cfg.hidden as f64).sqrt()).expect("finite std");
        let mut theta = Vec::with_capacity(shapes.len());
        theta.extend((0..shapes.h * d).map(|_| n1.sample(&mut rng)));
        theta.extend(std::iter::repeat_n(0.0, shapes.h));
        theta.extend((0..a * shapes.h).map(|_| n2.sample(&mut rng)));
        theta.extend(std::iter::repeat_n(0.0, a));

        let mut model = Self {
            input_mean,
            input_scale,
            w1: DMatrix::zeros(0, 0),
            b1: vec![],
            w2: DMatrix::zeros(0, 0),
            b2: vec![],
        };
        let xs = model.standardize(x);
        let mut adam = Adam::with_rates(theta.len(), cfg.learning_rate, 0.9, 0.999, 1e-8);
        for epoch in 0..cfg.epochs {
            let (loss, grad) = loss_and_grad(&theta, &shapes, &xs, y, cfg);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: epoch,
                    trajectory: vec![],
                });
            }
            adam.step(&mut theta, &grad);
        }
        let (w1, b1, w2, b2) = unpack(&theta, &shapes);
        model.w1 = w1;
        model.b1 = b1.to_vec();
        model.w2 = w2;
        model.b2 = b2.to_vec();
        Ok(model)
    }

    fn standardize(&self, x: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(x.len(), self.input_mean.len(), |r, c| {
            (x[r][c] - self.input_mean[c]) * self.input_scale[c]
        })
    }

    pub fn predict_proba(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if let Some(r) = x.iter().find(|r| r.len() != self.input_mean.len()) {
            return Err(Error::FeatureShapeMismatch(format!(
                "classifier expects {} inputs, got {}",
                self.input_mean.len(),
                r.len()
            )));
        }
        if x.is_empty() {
            return Ok(vec![]);
        }
        let xs = self.standardize(x);
        let mut h = xs * self.w1.transpose();
        for r in 0..h.nrows() {
            for c in 0..h.ncols() {
                h[(r, c)] = (h[(r, c)] + self.b1[c]).tanh();
            }
        }
        let z = h * self.w2.transpose();
        Ok((0..z.nrows())
            .map(|r| (0..z.ncols()).map(|c| sigmoid(z[(r, c)] + self.b2[c])).collect())
            .collect())
    }
}
