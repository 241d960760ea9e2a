//! Pre-norm transformer blocks and the classification head shared by every
//! adapter.

use rand::Rng;

use crate::error::{Result, XmicError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Attention heads in every block.
pub const HEADS: usize = 8;
/// Standard deviation for projection weights at initialization.
pub const INIT_STD: f64 = 0.02;
/// How far a row norm may drift from 1 before logits refuse it.
pub const UNIT_TOLERANCE: f64 = 1e-4;

/// Anything that owns named trainable tensors.
pub trait Module {
    /// Visits every parameter in a fixed order.
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Linear map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self::with_std(input, output, INIT_STD, rng)
    }

    pub fn with_std<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[input, output], std, rng).with_requires_grad(true),
            bias: Tensor::zeros(&[output]).with_requires_grad(true),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]).with_requires_grad(true),
            bias: Tensor::zeros(&[output]).with_requires_grad(true),
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut w = Tensor::zeros(&[d, d]);
        for i in 0..d {
            w.data_mut()[i * d + i] = 1.0;
        }
        Self {
            weight: w.with_requires_grad(true),
            bias: Tensor::zeros(&[d]).with_requires_grad(true),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn freeze(&mut self) {
        self.weight = self.weight.clone().with_requires_grad(false);
        self.bias = self.bias.clone().with_requires_grad(false);
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::ones(&[d]).with_requires_grad(true),
            bias: Tensor::zeros(&[d]).with_requires_grad(true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(&self.gain);
        let bias = g.param(&self.bias);
        g.layer_norm(x, gain, bias)
    }
}

impl Module for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Self-attention projections. Each `[D, D]` matrix holds all eight heads
/// side by side; head `h` owns columns `h*D/8 .. (h+1)*D/8`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    /// Attends within consecutive groups of `group` rows.
    pub fn forward(&self, g: &mut Graph, x: Var, group: usize) -> Result<Var> {
        let d = g.value(x).last_dim();
        if d % HEADS != 0 {
            return Err(XmicError::BadShape(format!(
                "width {d} is not divisible by {HEADS} heads"
            )));
        }
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let a = g.attention(q, k, v, HEADS, group)?;
        self.output.forward(g, a)
    }
}

impl Module for MultiHeadAttention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Two-layer MLP with a `D/4` QuickGELU bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.quick_gelu(h);
        self.fc2.forward(g, h)
    }
}

impl Module for Mlp {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// `x <- x + MHA(LN(x)); x <- x + MLP(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    /// Gaussian projections, unit gains, zero biases. With `zero_residual`
    /// the attention output projection and the second MLP layer start at
    /// zero so the block is the identity.
    pub fn new<R: Rng + ?Sized>(d: usize, zero_residual: bool, rng: &mut R) -> Result<Self> {
        Self::with_std(d, INIT_STD, zero_residual, rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        d: usize,
        std: f64,
        zero_residual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || d % HEADS != 0 {
            return Err(XmicError::BadShape(format!(
                "width {d} must be a positive multiple of {HEADS}"
            )));
        }
        let hidden = d / 4;
        let query = Linear::with_std(d, d, std, rng);
        let key = Linear::with_std(d, d, std, rng);
        let value = Linear::with_std(d, d, std, rng);
        let output = if zero_residual {
            Linear::zeros(d, d)
        } else {
            Linear::with_std(d, d, std, rng)
        };
        let fc1 = Linear::with_std(d, hidden, std, rng);
        let fc2 = if zero_residual {
            Linear::zeros(hidden, d)
        } else {
            Linear::with_std(hidden, d, std, rng)
        };
        Ok(Self {
            ln1: LayerNorm::new(d),
            attn: MultiHeadAttention {
                query,
                key,
                value,
                output,
            },
            ln2: LayerNorm::new(d),
            mlp: Mlp { fc1, fc2 },
        })
    }

    pub fn width(&self) -> usize {
        self.ln1.gain.len()
    }

    pub fn hidden(&self) -> usize {
        self.mlp.fc1.output_dim()
    }

    /// Applies the block to `[rows, D]`, attending within groups of `group`.
    pub fn forward(&self, g: &mut Graph, x: Var, group: usize) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, group)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }

    /// Marks every tensor as frozen.
    pub fn freeze(&mut self) {
        self.visit_mut("", &mut |_, t| {
            *t = t.clone().with_requires_grad(false);
        });
    }
}

impl Module for TransformerBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Checks that every row of `t` is unit norm within [`UNIT_TOLERANCE`].
pub fn check_unit_rows(t: &Tensor) -> Result<()> {
    for r in 0..t.rows() {
        let n = crate::tensor::norm(t.row(r));
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(XmicError::NotNormalized { row: r, norm: n });
        }
    }
    Ok(())
}

/// `[B, D] x [C, D] -> [B, C]` dot products divided by `temperature`.
pub fn cosine_logits(g: &mut Graph, queries: Var, classifier: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(XmicError::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    check_unit_rows(g.value(queries))?;
    check_unit_rows(g.value(classifier))?;
    let dots = g.matmul_t(queries, classifier)?;
    Ok(g.scale(dots, 1.0 / temperature))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_shape_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(TransformerBlock::new(12, false, &mut rng).is_err());
        let b = TransformerBlock::new(32, false, &mut rng).unwrap();
        assert_eq!(b.hidden(), 8);
        assert_eq!(b.width(), 32);
        let b = TransformerBlock::new(8, false, &mut rng).unwrap();
        assert_eq!(b.hidden(), 2);
    }

    #[test]
    fn zero_residual_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = TransformerBlock::new(16, true, &mut rng).unwrap();
        let x = Tensor::randn(&[5, 16], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = b.forward(&mut g, xv, 5).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn zero_value_projection_gives_zero_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = TransformerBlock::new(16, false, &mut rng).unwrap();
        b.attn.value = Linear::zeros(16, 16);
        b.attn.output.bias = Tensor::zeros(&[16]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[3, 16], 1.0, &mut rng));
        let y = b.attn.forward(&mut g, x, 3).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cosine_logits_examples() {
        let mut g = Graph::new();
        let k = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let q = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let l = cosine_logits(&mut g, q, k, 1.0).unwrap();
        assert_eq!(g.value(l).data(), &[1.0, 0.0]);
        let l = cosine_logits(&mut g, q, k, 0.5).unwrap();
        assert_abs_diff_eq!(g.value(l).data()[0], 2.0);
        let bad = g.constant(Tensor::from_rows(&[vec![2.0, 0.0]]));
        assert!(matches!(
            cosine_logits(&mut g, bad, k, 1.0),
            Err(XmicError::NotNormalized { .. })
        ));
        assert!(cosine_logits(&mut g, q, k, 0.0).is_err());
    }

    #[test]
    fn visit_names_are_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = TransformerBlock::new(8, false, &mut rng).unwrap();
        let mut names = Vec::new();
        b.visit("blk", &mut |n, _| names.push(n));
        assert_eq!(names.len(), 16);
        assert_eq!(names[0], "blk.ln1.gain");
        assert_eq!(names[2], "blk.attn.query.weight");
        assert_eq!(names.last().unwrap(), "blk.mlp.fc2.bias");
        // D*D*4 + D*4 (attn) + 4*D (ln) + D*D/4 + D/4 + D/4*D + D (mlp)
        assert_eq!(b.param_count(), 8 * 8 * 4 + 8 * 4 + 4 * 8 + 16 + 2 + 16 + 8);
    }
}
