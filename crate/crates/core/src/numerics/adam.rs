use super::{Real, Tensor};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments mirror the parameter list passed to
/// the first [`AdamState::update`].
#[derive(Clone, Debug)]
pub struct AdamState<F: Real> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Drops row `row` of parameter `index` from the moment estimates, for
    /// a parameter that has just lost that row.
    pub fn remove_row(&mut self, index: usize, row: usize) {
        for moments in [&mut self.m, &mut self.v] {
            if let Some(t) = moments.get_mut(index) {
                let keep: Vec<usize> = (0..t.rows()).filter(|&r| r != row).collect();
                *t = t.select_rows(&keep);
            }
        }
    }

    /// One descent step on every parameter (minimises the loss).
    pub fn update(&mut self, params: &mut [&mut Tensor<F>], grads: &[&Tensor<F>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m.get(i).map(|m| m.shape()) != Some(p.shape()) {
                return Err(Error::Dimension(format!(
                    "parameter {i}: {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let step_size = F::of(c.lr / bc1);
        let sqrt_bc2 = F::of(bc2.sqrt());
        let eps = F::of(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + one_b1 * *gv;
                *vv = b2 * *vv + one_b2 * *gv * *gv;
                *pv -= step_size * *mv / (vv.sqrt() / sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::<f32>::filled(2, 2, 0.5);
        let g = Tensor::<f32>::zeros(2, 2);
        let mut st = AdamState::new(AdamConfig::default());
        st.update(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, Tensor::filled(2, 2, 0.5));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let lr = 0.01;
        let mut p = Tensor::<f64>::zeros(1, 3);
        let g = Tensor::<f64>::new(1, 3, vec![0.3, -2.0, 5.0]).unwrap();
        let mut st = AdamState::new(AdamConfig {
            lr,
            ..Default::default()
        });
        let mut prev = p.clone();
        for _ in 0..500 {
            st.update(&mut [&mut p], &[&g]).unwrap();
            for j in 0..3 {
                let step = (p.get(0, j) - prev.get(0, j)).abs();
                assert!((step - lr).abs() < 1e-6, "step {step}");
                assert!((p.get(0, j) - prev.get(0, j)).signum() == -g.get(0, j).signum());
            }
            prev = p.clone();
        }
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut p = Tensor::<f32>::from_fn(3, 3, |i, j| (i as f32) - (j as f32) * 0.3);
            let mut st = AdamState::new(AdamConfig::default());
            for s in 0..50 {
                let g = p.map(|v| v * 0.7 + s as f32 * 0.01);
                st.update(&mut [&mut p], &[&g]).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut p = Tensor::<f32>::zeros(2, 2);
        let g = Tensor::<f32>::zeros(1, 2);
        let mut st = AdamState::new(AdamConfig::default());
        assert!(st.update(&mut [&mut p], &[&g]).is_err());
    }
}
