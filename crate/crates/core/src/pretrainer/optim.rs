use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(format!(
                "adam betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {} is negative", self.weight_decay)));
        }
        Ok(())
    }
}

/// Biases, norm parameters and learned tokens are not decayed.
pub fn decays(name: &str, var: &Var) -> bool {
    var.rank() > 1 && !name.contains("token")
}

#[derive(Debug, Clone)]
pub struct ParamState {
    pub name: String,
    pub m: Tensor,
    pub v: Tensor,
    pub decay: bool,
}

/// Decoupled-weight-decay Adam with first and second moments exposed for
/// checkpointing.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub t: u64,
    pub states: Vec<ParamState>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[(String, &Var)]) -> Result<Self> {
        config.validate()?;
        let states = params
            .iter()
            .map(|(name, var)| {
                Ok(ParamState {
                    name: name.clone(),
                    m: var.as_tensor().zeros_like()?,
                    v: var.as_tensor().zeros_like()?,
                    decay: decays(name, var),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdamW { config, t: 0, states })
    }

    fn check(&self, params: &[(String, &Var)]) -> Result<()> {
        if params.len() != self.states.len() || params.iter().zip(&self.states).any(|((n, _), s)| *n != s.name) {
            return Err(Error::Structure("optimizer state does not match the parameter list".into()));
        }
        Ok(())
    }

    /// Applies one update. `grads[i]` belongs to `params[i]`; parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, params: &[(String, &Var)], grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        self.check(params)?;
        if grads.len() != params.len() {
            return Err(Error::Structure(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((state, (_, var)), grad) in self.states.iter_mut().zip(params).zip(grads) {
            let Some(g) = grad else { continue };
            state.m = (state.m.affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?;
            state.v = (state.v.affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?;
            let m_hat = state.m.affine(1.0 / bc1, 0.0)?;
            let denom = (state.v.affine(1.0 / bc2, 0.0)?.sqrt()? + ADAM_EPS)?;
            let mut p = var.as_tensor().clone();
            if state.decay && weight_decay > 0.0 {
                p = p.affine(1.0 - lr * weight_decay, 0.0)?;
            }
            let p = (p - (m_hat / denom)?.affine(lr, 0.0)?)?;
            var.set(&p)?;
        }
        Ok(())
    }
}

/// Looks up each parameter's gradient, in parameter order.
pub fn collect_grads(store: &GradStore, params: &[(String, &Var)]) -> Vec<Option<Tensor>> {
    params.iter().map(|(_, v)| store.get(v.as_tensor()).cloned()).collect()
}

/// Running sum of gradients over micro-batches.
pub fn accumulate(acc: &mut Vec<Option<Tensor>>, grads: Vec<Option<Tensor>>) -> Result<()> {
    if acc.is_empty() {
        *acc = grads;
        return Ok(());
    }
    for (a, g) in acc.iter_mut().zip(grads) {
        *a = match (a.take(), g) {
            (Some(x), Some(y)) => Some((x + y)?),
            (x, y) => x.or(y),
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn single_step_matches_scalar_adamw() {
        let dev = Device::Cpu;
        let w = Var::new(&[[0.5f64, -1.0]], &dev).unwrap();
        let b = Var::new(&[0.25f64], &dev).unwrap();
        let params = vec![("w".to_string(), &w), ("b".to_string(), &b)];
        let mut opt = AdamW::new(AdamWConfig::default(), &params).unwrap();
        let grads = vec![
            Some(Tensor::new(&[[0.1f64, -0.2]], &dev).unwrap()),
            Some(Tensor::new(&[0.3f64], &dev).unwrap()),
        ];
        let lr = 0.01;
        opt.step(&params, &grads, lr).unwrap();
        // first step: m_hat = g, v_hat = g², update = g/(|g|+eps)
        let expect = |p: f64, g: f64, decay: bool| {
            let p = if decay { p * (1.0 - lr * 0.05) } else { p };
            p - lr * g / (g.abs() + ADAM_EPS)
        };
        let got: Vec<f64> = w.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        assert!((got[0] - expect(0.5, 0.1, true)).abs() < 1e-15);
        assert!((got[1] - expect(-1.0, -0.2, true)).abs() < 1e-15);
        let got: Vec<f64> = b.as_tensor().to_vec1().unwrap();
        assert!((got[0] - expect(0.25, 0.3, false)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let dev = Device::Cpu;
        let w = Var::new(&[[0.5f32, -1.0]], &dev).unwrap();
        let params = vec![("w".to_string(), &w)];
        let mut opt = AdamW::new(AdamWConfig::default(), &params).unwrap();
        let before: Vec<f32> = w.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        opt.step(&params, &[Some(Tensor::new(&[[1.0f32, 2.0]], &dev).unwrap())], 0.0)
            .unwrap();
        let after: Vec<f32> = w.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(before, after);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn decay_rules() {
        let dev = Device::Cpu;
        let mat = Var::new(&[[1.0f32]], &dev).unwrap();
        let vec = Var::new(&[1.0f32], &dev).unwrap();
        let tok = Var::new(&[[[1.0f32]]], &dev).unwrap();
        assert!(decays("encoder.blocks.0.attn.qkv.weight", &mat));
        assert!(!decays("encoder.blocks.0.attn.qkv.bias", &vec));
        assert!(!decays("pixel_decoder.mask_token", &tok));
    }

    #[test]
    fn betas_are_validated() {
        let cfg = AdamWConfig {
            beta1: 1.0,
            ..AdamWConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
