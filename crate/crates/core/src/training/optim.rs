use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.997;
pub const ADAM_EPS: f64 = 1e-9;

/// Adam moments, one pair per parameter tensor, plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update at learning rate `lr`.
    ///
    /// With `clip` set, gradients are rescaled so their global L2 norm does
    /// not exceed it. Non-finite gradients abort before anything is touched.
    pub fn update(
        &mut self,
        params: &mut [Tensor],
        names: &[String],
        grads: &[Tensor],
        lr: f64,
        clip: Option<f64>,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let mut sq = 0.0;
        for (i, (g, p)) in grads.iter().zip(params.iter()).enumerate() {
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} vs parameter {:?} for {}",
                    g.shape(),
                    p.shape(),
                    names.get(i).map(String::as_str).unwrap_or("?")
                )));
            }
            if !g.all_finite() {
                return Err(Error::Divergence {
                    step: self.step + 1,
                    detail: format!(
                        "non-finite gradient for {}",
                        names.get(i).map(String::as_str).unwrap_or("?")
                    ),
                });
            }
            sq += g.data().iter().map(|x| x * x).sum::<f64>();
        }
        let scale = match clip {
            Some(c) if sq.sqrt() > c => c / sq.sqrt(),
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi * scale;
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *x -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
