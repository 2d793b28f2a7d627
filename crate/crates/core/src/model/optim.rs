use crate::error::{IbitError, Result};
use crate::linalg::Matrix;

use super::network::Param;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(params: &[Param], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Parameters whose gradient is `None`
    /// are left untouched.
    pub fn step(&mut self, params: &mut [Param], grads: &[Option<&Matrix>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(IbitError::State(format!(
                "optimizer tracks {} parameters, got {} values and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            if g.shape() != p.value.shape() {
                return Err(IbitError::dim("optimizer step", g.shape(), p.value.shape()));
            }
            let decay = if p.decays() { lr * self.weight_decay } else { 0.0 };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let w = p.value.as_mut_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (((w, m), v), &g) in w.iter_mut().zip(m).zip(v).zip(g.as_slice()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *w -= decay * *w + lr * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::network::ParamKind;

    fn param(v: f64, kind: ParamKind) -> Param {
        Param {
            name: "p".into(),
            value: Matrix::filled(1, 1, v),
            kind,
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias-corrected first step is lr · sign(g) when eps is negligible.
        let mut ps = vec![param(1.0, ParamKind::Bias), param(1.0, ParamKind::Bias)];
        let mut opt = AdamW::new(&ps, 0.9, 0.999, 1e-12, 0.0);
        let g0 = Matrix::filled(1, 1, 3.0);
        let g1 = Matrix::filled(1, 1, -0.5);
        opt.step(&mut ps, &[Some(&g0), Some(&g1)], 0.1).unwrap();
        assert!((ps[0].value.get(0, 0) - 0.9).abs() < 1e-12);
        assert!((ps[1].value.get(0, 0) - 1.1).abs() < 1e-12);
    }

    #[test]
    fn decay_is_decoupled_and_selective() {
        let mut ps = vec![param(2.0, ParamKind::Weight), param(2.0, ParamKind::Mask)];
        let mut opt = AdamW::new(&ps, 0.9, 0.999, 1e-8, 0.5);
        let zero = Matrix::zeros(1, 1);
        opt.step(&mut ps, &[Some(&zero), Some(&zero)], 0.1).unwrap();
        assert!((ps[0].value.get(0, 0) - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
        assert_eq!(ps[1].value.get(0, 0), 2.0);
    }

    #[test]
    fn skipped_and_mismatched_gradients() {
        let mut ps = vec![param(1.0, ParamKind::Weight)];
        let mut opt = AdamW::new(&ps, 0.9, 0.999, 1e-8, 0.1);
        opt.step(&mut ps, &[None], 0.1).unwrap();
        assert_eq!(ps[0].value.get(0, 0), 1.0);
        let wrong = Matrix::zeros(2, 1);
        assert!(opt.step(&mut ps, &[Some(&wrong)], 0.1).is_err());
        assert!(opt.step(&mut ps, &[], 0.1).is_err());
    }
}
