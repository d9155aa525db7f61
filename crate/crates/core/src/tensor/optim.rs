use super::{cst, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay. Moments start at zero.
#[derive(Debug, Clone)]
pub struct AdamW<T = f32> {
    cfg: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", cfg.lr)));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        Ok(AdamW {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
        }
        self.cfg.lr = lr;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cst::<T>(self.cfg.beta1), cst::<T>(self.cfg.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr = cst::<T>(self.cfg.lr);
        let decay = T::one() - lr * cst::<T>(self.cfg.weight_decay);
        let eps = cst::<T>(self.cfg.eps);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.len() != p.numel() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("param {k} has {} values, grad {}", p.numel(), g.len()),
                ));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_betas_are_default() {
        let c = AdamWConfig::default();
        assert_eq!((c.beta1, c.beta2), (0.9, 0.95));
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let cfg = AdamWConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(AdamW::<f32>::new(cfg).is_err());
        let cfg = AdamWConfig {
            lr: -1.0,
            ..Default::default()
        };
        assert!(AdamW::<f32>::new(cfg).is_err());
    }

    #[test]
    fn zero_grad_no_decay_leaves_params() {
        let mut opt = AdamW::<f32>::new(AdamWConfig::default()).unwrap();
        let mut p = vec![Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        for _ in 0..3 {
            opt.step(&mut p, &[vec![0.0; 3]]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn one_step_on_square_descends() {
        let mut opt = AdamW::<f32>::new(AdamWConfig::default()).unwrap();
        let mut p = vec![Tensor::new(&[1], vec![1.0]).unwrap()];
        let grad = 2.0 * p[0].data()[0];
        opt.step(&mut p, &[vec![grad]]).unwrap();
        assert!(p[0].data()[0].abs() < 1.0);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::<f64>::new(cfg).unwrap();
        let mut p = vec![Tensor::new(&[1], vec![2.0]).unwrap()];
        opt.step(&mut p, &[vec![0.0]]).unwrap();
        assert!((p[0].data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }
}
