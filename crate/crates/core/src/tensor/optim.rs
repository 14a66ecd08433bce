use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// One parameter handed to [`AdamW::step`]. `slot` identifies the parameter
/// across steps; `grad` is `None` for parameters the loss did not reach.
pub struct ParamUpdate<'a, T> {
    pub slot: usize,
    pub name: &'a str,
    pub value: &'a mut Tensor<T>,
    pub grad: Option<&'a Tensor<T>>,
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    t: u64,
    moments: Vec<Option<MomentState<T>>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn moment(&self, slot: usize) -> Option<&MomentState<T>> {
        self.moments.get(slot).and_then(Option::as_ref)
    }

    /// Restores state saved from an earlier run.
    pub fn restore(&mut self, t: u64, moments: Vec<Option<MomentState<T>>>) {
        self.t = t;
        self.moments = moments;
    }

    /// Applies one update. All gradients are validated before any parameter
    /// changes, so a failed step leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut [ParamUpdate<'_, T>]) -> Result<()> {
        for p in params.iter() {
            if let Some(g) = p.grad {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape(
                        "adamw_step",
                        format!(
                            "gradient {:?} vs parameter {} {:?}",
                            g.shape(),
                            p.name,
                            p.value.shape()
                        ),
                    ));
                }
                if !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for parameter {}",
                        p.name
                    )));
                }
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, eps, decay) = (T::of(c.lr), T::of(c.eps), T::of(c.lr * c.weight_decay));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        for p in params.iter_mut() {
            let Some(g) = p.grad else { continue };
            if self.moments.len() <= p.slot {
                self.moments.resize_with(p.slot + 1, || None);
            }
            let n = g.numel();
            let state = self.moments[p.slot].get_or_insert_with(|| MomentState {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            if state.m.len() != n {
                return Err(Error::shape(
                    "adamw_step",
                    format!("moment size {} vs parameter {} size {n}", state.m.len(), p.name),
                ));
            }
            let data = p.value.data_mut();
            let moments = state.m.iter_mut().zip(state.v.iter_mut());
            for ((x, &gi), (m, v)) in data.iter_mut().zip(g.data()).zip(moments) {
                *m = b1 * *m + (T::one() - b1) * gi;
                *v = b2 * *v + (T::one() - b2) * gi * gi;
                let (mhat, vhat) = (*m / bc1, *v / bc2);
                *x = *x - lr * mhat / (vhat.sqrt() + eps) - decay * *x;
            }
        }
        Ok(())
    }
}
