//! Multi-label focal loss, averaged over every (sample, attribute) element.

pub const PROB_EPS: f64 = 1e-7;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Loss of a single element.
pub fn focal_element(p: f64, y: bool, gamma: f64, alpha: f64) -> f64 {
    let p = clamp_prob(p);
    if y {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Derivative of [`focal_element`] with respect to the logit behind `p`.
pub fn focal_element_grad_logit(p: f64, y: bool, gamma: f64, alpha: f64) -> f64 {
    let p = clamp_prob(p);
    let q = 1.0 - p;
    if y {
        alpha * (gamma * q.powf(gamma) * p * p.ln() - q.powf(gamma + 1.0))
    } else {
        (1.0 - alpha) * (-gamma * p.powf(gamma) * q * q.ln() + p.powf(gamma + 1.0))
    }
}

/// Mean focal loss. `probs` and `labels` are flattened in the same order.
pub fn focal_loss(probs: &[f64], labels: &[bool], gamma: f64, alpha: f64) -> f64 {
    assert_eq!(probs.len(), labels.len(), "probabilities and labels differ in length");
    if probs.is_empty() {
        return 0.0;
    }
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| focal_element(p, y, gamma, alpha))
        .sum();
    sum / probs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn sigmoid(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    #[test]
    fn half_bce_at_gamma_zero() {
        let l = focal_loss(&[0.5], &[true], 0.0, 0.5);
        assert!((l - 0.5 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_prediction_vanishes() {
        for g in [0.5, 1.0, 2.0, 5.0] {
            assert!(focal_loss(&[1.0 - 1e-7], &[true], g, 0.25) < 1e-9);
        }
    }

    #[test]
    fn extreme_probabilities_are_clamped() {
        let l = focal_loss(&[0.0, 1.0], &[true, false], 2.0, 0.5);
        assert!(l.is_finite() && l > 0.0);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let n = 64 * 40;
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let (gamma, alpha) = (2.0, 0.3);
        let mut acc = 0.0;
        for i in 0..n {
            let pt = if y[i] { p[i] } else { 1.0 - p[i] };
            let at = if y[i] { alpha } else { 1.0 - alpha };
            acc += -at * (1.0 - pt).powi(2) * pt.ln();
        }
        assert!((focal_loss(&p, &y, gamma, alpha) - acc / n as f64).abs() < 1e-7);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        for &(z, y) in &[(0.3, true), (-1.2, true), (2.0, false), (-0.4, false)] {
            for &(g, a) in &[(0.0, 0.5), (2.0, 0.25), (1.5, 0.8)] {
                let h = 1e-6;
                let fd = (focal_element(sigmoid(z + h), y, g, a) - focal_element(sigmoid(z - h), y, g, a)) / (2.0 * h);
                let an = focal_element_grad_logit(sigmoid(z), y, g, a);
                assert!((fd - an).abs() < 1e-7, "z={z} y={y} g={g}: {fd} vs {an}");
            }
        }
    }

    proptest! {
        #[test]
        fn gamma_zero_is_weighted_bce(p in 1e-6f64..(1.0 - 1e-6), y: bool, alpha in 0.01f64..0.99) {
            let bce = if y { -p.ln() } else { -(1.0 - p).ln() };
            let w = if y { alpha } else { 1.0 - alpha };
            prop_assert!((focal_element(p, y, 0.0, alpha) - w * bce).abs() < 1e-12);
        }

        #[test]
        fn loss_is_non_negative(p in 0.0f64..=1.0, y: bool, gamma in 0.0f64..5.0, alpha in 0.0f64..=1.0) {
            prop_assert!(focal_element(p, y, gamma, alpha) >= 0.0);
        }
    }
}
