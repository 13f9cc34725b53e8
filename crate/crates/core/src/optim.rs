//! Adam with bias correction.

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero moments for parameters of the given lengths.
    pub fn new(config: AdamConfig, param_lens: &[usize]) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update of every parameter in place. The whole step is rejected, with
    /// nothing modified, if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(shape_err!(
                "adam tracks {} parameters, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first_moment[i].len() || g.len() != p.len() {
                return Err(shape_err!("adam parameter {i} length mismatch"));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {i} at element {j} is {}",
                    g[j]
                )));
            }
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_closed_form() {
        let mut s = AdamState::new(AdamConfig::default(), &[1]);
        let mut w = [0.0];
        s.step(&mut [&mut w], &[&[1.0]]).unwrap();
        let expected = -3e-4 / (1.0 + 1e-8);
        assert!((w[0] - expected).abs() < 1e-18, "{}", w[0]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(AdamConfig::default(), &[3]);
        let mut w = [1.0, -2.0, 0.5];
        s.step(&mut [&mut w], &[&[0.0; 3]]).unwrap();
        assert_eq!(w, [1.0, -2.0, 0.5]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        // Independent scalar recursion of the update rule.
        let cfg = AdamConfig::default();
        let (mut m, mut v, mut w_ref) = (0.0f64, 0.0f64, 1.0f64);
        let mut s = AdamState::new(cfg, &[1]);
        let mut w = [1.0];
        let mut prev = 1.0f64;
        for t in 1..=10 {
            let g = 2.0 * w[0];
            s.step(&mut [&mut w], &[&[g]]).unwrap();
            let gr = 2.0 * w_ref;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w_ref -= 3e-4 * mh / (vh.sqrt() + 1e-8);
            assert!((w[0] - w_ref).abs() < 1e-15);
            assert!(w[0].abs() < prev);
            prev = w[0].abs();
        }
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let mut s = AdamState::new(AdamConfig::default(), &[2]);
        let mut w = [1.0, 1.0];
        assert!(matches!(
            s.step(&mut [&mut w], &[&[0.1, f64::NAN]]),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(w, [1.0, 1.0]);
        assert_eq!(s.step_count, 0);
    }
}
