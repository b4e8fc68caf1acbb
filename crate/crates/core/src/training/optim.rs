use crate::error::{Error, Result};
use crate::planners::ModelParams;

/// RMSprop with per-element squared-gradient averages.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    /// Running average of squared gradients, one tensor per parameter.
    pub state: ModelParams,
}

impl RmsProp {
    pub fn new(params: &ModelParams, lr: f64, alpha: f64, eps: f64) -> Self {
        Self {
            lr,
            alpha,
            eps,
            state: params.zeros_like(),
        }
    }

    /// `s ← αs + (1−α)g²`, `p ← p − lr·g/(√s + ε)`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            let s = self
                .state
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("optimizer has no state for `{name}`")))?;
            g.expect_same_shape(p, "rmsprop")?;
            for ((pv, sv), &gv) in p.data_mut().iter_mut().zip(s.data_mut()).zip(g.data()) {
                *sv = self.alpha * *sv + (1.0 - self.alpha) * gv * gv;
                *pv -= self.lr * gv / (sv.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::from_vec(&[2], vec![v, v]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = one(0.3);
        let mut opt = RmsProp::new(&p, 1e-3, 0.99, 1e-8);
        opt.step(&mut p, &one(0.0)).unwrap();
        assert_eq!(p, one(0.3));
    }

    #[test]
    fn first_step_magnitude() {
        let mut p = one(0.0);
        let mut opt = RmsProp::new(&p, 1e-3, 0.99, 1e-8);
        opt.step(&mut p, &one(1.0)).unwrap();
        let s = opt.state.get("x").unwrap().data()[0];
        assert!((s - 0.01).abs() < 1e-15);
        let expected = -1e-3 / (0.01f64.sqrt() + 1e-8);
        let dp = p.get("x").unwrap().data()[0];
        assert!((dp - expected).abs() < 1e-15);
        assert!((dp + 9.99999e-3).abs() < 1e-8);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = one(0.5);
            let mut opt = RmsProp::new(&p, 1e-2, 0.9, 1e-8);
            for k in 0..5 {
                opt.step(&mut p, &one(0.1 * k as f64 - 0.2)).unwrap();
            }
            (p, opt)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = one(0.0);
        let mut opt = RmsProp::new(&p, 1e-3, 0.99, 1e-8);
        assert!(opt.step(&mut p, &ModelParams::new()).is_err());
    }
}
