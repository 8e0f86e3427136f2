//! Adam with bias correction and per-group step counters, so parameter
//! groups that update sparsely (latent codes outside the batch) keep
//! correct bias correction.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.0,
            beta2: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Number of updates applied to this group.
    pub step: u64,
}

impl<T: Real> AdamMoments<T> {
    pub fn zeros(len: usize) -> Self {
        AdamMoments {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One Adam update in place. With `beta1 = 0` the first moment equals the
/// current gradient exactly.
pub fn adam_update<T: Real>(
    values: &mut [T],
    gradient: &[T],
    moments: &mut AdamMoments<T>,
    lr: f64,
    config: AdamConfig,
) {
    assert_eq!(values.len(), gradient.len(), "gradient shape mismatch");
    assert_eq!(values.len(), moments.m.len(), "moment shape mismatch");
    moments.step += 1;
    let t = moments.step as i32;
    let b1 = T::from_f64(config.beta1);
    let b2 = T::from_f64(config.beta2);
    let eps = T::from_f64(config.epsilon);
    let lr = T::from_f64(lr);
    let c1 = T::one() - T::from_f64(config.beta1.powi(t));
    let c2 = T::one() - T::from_f64(config.beta2.powi(t));
    for i in 0..values.len() {
        let g = gradient[i];
        moments.m[i] = b1 * moments.m[i] + (T::one() - b1) * g;
        moments.v[i] = b2 * moments.v[i] + (T::one() - b2) * g * g;
        let m_hat = if config.beta1 == 0.0 {
            moments.m[i]
        } else {
            moments.m[i] / c1
        };
        let v_hat = moments.v[i] / c2;
        values[i] = values[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_values_unchanged() {
        let mut values = vec![0.5f64, -0.3, 1.2];
        let grad = vec![0.0; 3];
        let mut moments = AdamMoments::zeros(3);
        for _ in 0..5 {
            adam_update(&mut values, &grad, &mut moments, 1e-4, AdamConfig::default());
        }
        assert_eq!(values, vec![0.5, -0.3, 1.2]);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // hand evaluation of step 1 with g = 1, beta1 = 0, beta2 = 0.9:
        // m = 1, v = 0.1, v_hat = 0.1/(1-0.9) = 1, update = lr/(1 + eps)
        let mut values = vec![0.0f64];
        let mut moments = AdamMoments::zeros(1);
        adam_update(&mut values, &[1.0], &mut moments, 1e-4, AdamConfig::default());
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((values[0] - expected).abs() < 1e-18, "{}", values[0]);
    }

    #[test]
    fn zero_beta1_makes_first_moment_the_gradient() {
        let mut values = vec![0.0f64, 0.0];
        let mut moments = AdamMoments::zeros(2);
        let config = AdamConfig::default();
        adam_update(&mut values, &[0.3, -0.8], &mut moments, 1e-3, config);
        assert_eq!(moments.m, vec![0.3, -0.8]);
        adam_update(&mut values, &[1.5, 0.2], &mut moments, 1e-3, config);
        assert_eq!(moments.m, vec![1.5, 0.2]);
    }

    #[test]
    fn bias_correction_matches_reference_recurrence() {
        // compare against a direct transcription with nonzero beta1
        let config = AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let grads = [0.5f64, -0.2, 0.9, 0.1];
        let mut values = vec![1.0f64];
        let mut moments = AdamMoments::zeros(1);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for (t, g) in grads.iter().enumerate() {
            adam_update(&mut values, &[*g], &mut moments, 0.01, config);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((values[0] - x).abs() < 1e-15);
        }
    }

    #[test]
    fn moments_track_group_step_count() {
        let mut values = vec![0.0f64];
        let mut moments = AdamMoments::zeros(1);
        for expected in 1..=3 {
            adam_update(&mut values, &[1.0], &mut moments, 1e-4, AdamConfig::default());
            assert_eq!(moments.step, expected);
        }
    }
}
