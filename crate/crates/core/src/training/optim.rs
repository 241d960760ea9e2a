use serde::{Deserialize, Serialize};

use crate::error::{Result, XmicError};
use crate::nn::Module;
use crate::tensor::Tensor;

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

/// First and second moments per trainable tensor, plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure(&mut self, sizes: &[usize]) -> Result<()> {
        if self.m.is_empty() && self.t == 0 {
            self.m = sizes.iter().map(|&n| vec![0.0; n]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != sizes.len() || self.m.iter().zip(sizes).any(|(m, &n)| m.len() != n) {
            return Err(XmicError::ShapeMismatch("optimizer state does not match the parameters".into()));
        }
        Ok(())
    }
}

fn update(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamW) {
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..w.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        w[i] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * w[i]);
    }
}

/// One AdamW step over `params` with matching `grads`.
pub fn adamw_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut OptimizerState, cfg: &AdamW) -> Result<()> {
    if params.len() != grads.len() {
        return Err(XmicError::ShapeMismatch(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(XmicError::ShapeMismatch(format!(
                "gradient of length {} for parameter of shape {:?}",
                g.len(),
                p.shape()
            )));
        }
    }
    let sizes: Vec<usize> = params.iter().map(Tensor::len).collect();
    state.ensure(&sizes)?;
    state.t += 1;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        update(p.data_mut(), g, &mut state.m[i], &mut state.v[i], state.t, cfg);
    }
    Ok(())
}

/// AdamW over the trainable tensors of `module`, in visit order. Frozen
/// tensors are skipped and never touched.
pub fn adamw_step_module<M: Module>(
    module: &mut M,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    cfg: &AdamW,
) -> Result<()> {
    let mut sizes = Vec::new();
    module.visit("", &mut |_, t| {
        if t.requires_grad() {
            sizes.push(t.len());
        }
    });
    if sizes.len() != grads.len() || sizes.iter().zip(grads).any(|(&n, g)| n != g.len()) {
        return Err(XmicError::ShapeMismatch("gradients do not match the trainable parameters".into()));
    }
    state.ensure(&sizes)?;
    state.t += 1;
    let t = state.t;
    let mut i = 0;
    module.visit_mut("", &mut |_, p| {
        if p.requires_grad() {
            update(p.data_mut(), &grads[i], &mut state.m[i], &mut state.v[i], t, cfg);
            i += 1;
        }
    });
    Ok(())
}
