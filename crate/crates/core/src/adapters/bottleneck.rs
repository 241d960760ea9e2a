use rand::Rng;

use crate::error::{Result, XmicError};
use crate::graph::{Graph, Var};
use crate::nn::{join, Linear, Module};
use crate::tensor::Tensor;

/// Residual bottleneck `normalize(r x + (1 - r) Up(relu(Down x)))` with a
/// `D/4` hidden width.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckAdapter {
    pub down: Linear,
    pub up: Linear,
    pub ratio: f64,
}

pub const DEFAULT_RATIO: f64 = 0.2;

impl BottleneckAdapter {
    /// With `zero_up` the up-projection starts at zero and the adapter is the
    /// identity up to normalization.
    pub fn new<R: Rng + ?Sized>(dim: usize, ratio: f64, zero_up: bool, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(XmicError::Config(format!("blend ratio must lie in [0, 1], got {ratio}")));
        }
        let hidden = dim / 4;
        if hidden == 0 {
            return Err(XmicError::BadShape(format!("bottleneck needs dim >= 4, got {dim}")));
        }
        let down = Linear::new(dim, hidden, rng);
        let up = if zero_up {
            Linear::zeros(hidden, dim)
        } else {
            Linear::new(hidden, dim, rng)
        };
        Ok(Self { down, up, ratio })
    }

    pub fn dim(&self) -> usize {
        self.down.input_dim()
    }

    /// Applies the adapter to every row of a `[R, D]` matrix (a `[D]`
    /// vector is treated as one row).
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let x = if g.shape(x).len() == 1 {
            let d = g.value(x).len();
            g.reshape(x, &[1, d])?
        } else {
            x
        };
        if g.value(x).last_dim() != self.dim() {
            return Err(XmicError::DimMismatch(format!(
                "bottleneck of width {} applied to width {}",
                self.dim(),
                g.value(x).last_dim()
            )));
        }
        let h = self.down.forward(g, x)?;
        let h = g.relu(h);
        let u = self.up.forward(g, h)?;
        let keep = g.scale(x, self.ratio);
        let new = g.scale(u, 1.0 - self.ratio);
        let mixed = g.add(keep, new)?;
        g.l2_normalize(mixed)
    }
}

impl Module for BottleneckAdapter {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.down.visit(&join(prefix, "down"), f);
        self.up.visit(&join(prefix, "up"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.down.visit_mut(&join(prefix, "down"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
    }
}
