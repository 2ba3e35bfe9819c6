//! First-order optimisers over lists of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Adam (L2-coupled weight decay, as in the common `weight_decay` option)
/// or plain SGD over a fixed list of parameter slots.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    steps: u64,
    slots: Vec<Option<Moments>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) || weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid lr {lr} or weight decay {weight_decay}")));
        }
        Ok(Optimizer {
            kind,
            lr,
            weight_decay,
            steps: 0,
            slots: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. `grads[i]` is the gradient of `params[i]` (`None` when
    /// the loss did not reach it); `decay[i]` selects weight decay.
    /// Parameters with no gradient are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>], decay: &[bool]) -> Result<()> {
        if params.len() != grads.len() || params.len() != decay.len() {
            return Err(Error::Shape(format!(
                "optimizer got {} params, {} grads, {} decay flags",
                params.len(),
                grads.len(),
                decay.len()
            )));
        }
        if self.slots.len() < params.len() {
            self.slots.resize(params.len(), None);
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            p.check_same_shape(g, "optimizer step")?;
            let mut g = g.clone();
            if decay[i] && self.weight_decay > 0.0 {
                g.add_scaled_assign(p, self.weight_decay)?;
            }
            match self.kind {
                OptimizerKind::Sgd => p.add_scaled_assign(&g, -self.lr)?,
                OptimizerKind::Adam => {
                    let slot = self.slots[i].get_or_insert_with(|| Moments {
                        m: Tensor::zeros(g.rows(), g.cols()),
                        v: Tensor::zeros(g.rows(), g.cols()),
                    });
                    let bc1 = 1.0 - ADAM_BETA1.powi(t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t);
                    let data = p.as_mut_slice();
                    let ms = slot.m.as_mut_slice();
                    let vs = slot.v.as_mut_slice();
                    for (k, &gk) in g.as_slice().iter().enumerate() {
                        ms[k] = ADAM_BETA1 * ms[k] + (1.0 - ADAM_BETA1) * gk;
                        vs[k] = ADAM_BETA2 * vs[k] + (1.0 - ADAM_BETA2) * gk * gk;
                        let m_hat = ms[k] / bc1;
                        let v_hat = vs[k] / bc2;
                        data[k] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
