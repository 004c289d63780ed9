//! Adam with bias correction. One `AdamState` owns one optimizer group.

use std::collections::HashMap;

use crate::error::{CromeError, Result};
use crate::numerics::matrix::Matrix;
use crate::params::{ParamId, Params};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    moments: HashMap<ParamId, (Matrix, Matrix)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// One update over the given parameters. `grads` must hold a gradient of
    /// matching shape for every id; ids without an entry are an error.
    pub fn step(
        &mut self,
        params: &mut Params,
        ids: &[ParamId],
        grads: &HashMap<ParamId, Matrix>,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for &id in ids {
            let g = grads.get(&id).ok_or_else(|| {
                CromeError::State(format!("missing gradient for parameter {}", params.name(id)))
            })?;
            let p = params.get(id);
            if g.shape() != p.shape() {
                return Err(CromeError::State(format!(
                    "gradient shape {:?} does not match parameter {} of shape {:?}",
                    g.shape(),
                    params.name(id),
                    p.shape()
                )));
            }
            let (m, v) = self.moments.entry(id).or_insert_with(|| {
                (Matrix::zeros(p.rows, p.cols), Matrix::zeros(p.rows, p.cols))
            });
            let pv = params.get_mut(id);
            for i in 0..pv.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                pv.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> &HashMap<ParamId, (Matrix, Matrix)> {
        &self.moments
    }

    pub fn restore_moments(&mut self, moments: HashMap<ParamId, (Matrix, Matrix)>) {
        self.moments = moments;
    }
}
