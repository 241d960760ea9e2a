//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::Module;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Below this magnitude gradients are compared on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct Mismatch {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub worst: Option<Mismatch>,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    fn new(tolerance: f64) -> Self {
        Self {
            checked: 0,
            max_rel_error: 0.0,
            tolerance,
            worst: None,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }

    fn record(&mut self, input: &str, index: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
        let rel_error = (analytic - numeric).abs() / denom;
        let m = Mismatch {
            input: input.to_string(),
            index,
            analytic,
            numeric,
            rel_error,
        };
        self.checked += 1;
        // NaN never compares below the tolerance, so it must count as a failure.
        if !(rel_error < self.tolerance) {
            self.failures.push(m.clone());
        }
        if !(rel_error <= self.max_rel_error) {
            self.max_rel_error = if rel_error.is_nan() { f64::INFINITY } else { rel_error };
            self.worst = Some(m);
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.failures.extend(other.failures);
    }
}

fn scalar_of(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// Checks d f / d inputs for a scalar function of several tensors.
pub fn grad_check<F>(inputs: &[Tensor], f: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(scalar_of(&g, out))
    };

    let mut report = GradCheckReport::new(tolerance);
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(&format!("input{i}"), j, analytic[j], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks the gradient of `f` with respect to every trainable parameter of
/// `module`. `stride` > 1 checks every `stride`-th coordinate of each tensor.
pub fn grad_check_module<M, F>(module: &M, f: F, step: f64, tolerance: f64, stride: usize) -> Result<GradCheckReport>
where
    M: Module + Clone,
    F: Fn(&mut Graph, &M) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, module)?;
    let grads = g.backward(out)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    module.visit("", &mut |name, t| {
        if t.requires_grad() {
            let a = grads.of_param(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            analytic.push((name, a));
        }
    });

    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, m)?;
        Ok(scalar_of(&g, out))
    };

    let mut report = GradCheckReport::new(tolerance);
    let mut work = module.clone();
    let stride = stride.max(1);
    for (name, a) in &analytic {
        for j in (0..a.len()).step_by(stride) {
            let nudge = |m: &mut M, delta: f64| {
                m.visit_mut("", &mut |n, t| {
                    if &n == name {
                        t.data_mut()[j] += delta;
                    }
                });
            };
            nudge(&mut work, step);
            let plus = eval(&work)?;
            nudge(&mut work, -2.0 * step);
            let minus = eval(&work)?;
            nudge(&mut work, step);
            report.record(name, j, a[j], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Finite-difference step and tolerance used by [`suite`].
pub const SUITE_STEP: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Contracts a non-scalar output with a fixed random tensor so that every
/// output coordinate matters.
fn probe(g: &mut Graph, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = Tensor::randn(g.shape(y), 1.0, rng);
    let w = g.constant(w.reshape(g.shape(y).to_vec())?);
    g.dot(y, w)
}

fn check_op<F>(name: &str, inputs: Vec<Tensor>, seed: u64, f: F) -> Result<(String, GradCheckReport)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = grad_check(
        &inputs,
        |g, v| {
            let y = f(g, v)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if g.value(y).len() == 1 {
                Ok(y)
            } else {
                probe(g, y, &mut rng)
            }
        },
        SUITE_STEP,
        SUITE_TOLERANCE,
    )?;
    Ok((name.to_string(), report))
}

/// Inputs kept away from the ReLU kink.
fn off_kink(t: Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| if v.abs() < 0.05 { v + 0.1 } else { v }).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Gradient checks of every primitive, a transformer block, the composed
/// X-MIC pipeline (D=16, N=3, C=4, B=2) and the prompt baselines.
pub fn suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    use crate::adapters::{ClipVars, Model, ModelConfig, TextSide};
    use crate::data::{ClassVocabulary, Task};
    use crate::encoders::build_text_classifier;
    use crate::nn::{cosine_logits, TransformerBlock};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let mut out = Vec::new();
    out.push(check_op("add", vec![r(&[3, 4]), r(&[3, 4])], seed, |g, v| g.add(v[0], v[1]))?);
    out.push(check_op("sub", vec![r(&[3, 4]), r(&[3, 4])], seed, |g, v| g.sub(v[0], v[1]))?);
    out.push(check_op("mul", vec![r(&[3, 4]), r(&[3, 4])], seed, |g, v| g.mul(v[0], v[1]))?);
    out.push(check_op("scale", vec![r(&[5])], seed, |g, v| Ok(g.scale(v[0], -1.7)))?);
    out.push(check_op("add_row", vec![r(&[3, 4]), r(&[4])], seed, |g, v| g.add_row(v[0], v[1]))?);
    out.push(check_op("mul_row", vec![r(&[3, 4]), r(&[4])], seed, |g, v| g.mul_row(v[0], v[1]))?);
    out.push(check_op("matmul", vec![r(&[3, 4]), r(&[4, 2])], seed, |g, v| g.matmul(v[0], v[1]))?);
    out.push(check_op("matmul_t", vec![r(&[3, 4]), r(&[5, 4])], seed, |g, v| g.matmul_t(v[0], v[1]))?);
    out.push(check_op("quick_gelu", vec![r(&[2, 5])], seed, |g, v| Ok(g.quick_gelu(v[0])))?);
    out.push(check_op("relu", vec![off_kink(r(&[2, 5]))], seed, |g, v| Ok(g.relu(v[0])))?);
    out.push(check_op("layer_norm", vec![r(&[3, 8]), r(&[8]), r(&[8])], seed, |g, v| {
        g.layer_norm(v[0], v[1], v[2])
    })?);
    out.push(check_op("l2_normalize", vec![r(&[3, 6])], seed, |g, v| g.l2_normalize(v[0]))?);
    out.push(check_op("mean_pool", vec![r(&[4, 6])], seed, |g, v| Ok(g.mean_rows(v[0])))?);
    out.push(check_op("concat_select", vec![r(&[2, 3]), r(&[3, 3])], seed, |g, v| {
        let c = g.concat_rows(&[v[0], v[1]])?;
        g.select_rows(c, &[4, 0, 0, 2])
    })?);
    out.push(check_op("attention", vec![r(&[4, 16]), r(&[4, 16]), r(&[4, 16])], seed, |g, v| {
        g.attention(v[0], v[1], v[2], 8, 2)
    })?);
    out.push(check_op("cross_entropy", vec![r(&[3, 5])], seed, |g, v| g.cross_entropy(v[0], &[4, 0, 2]))?);
    out.push(check_op("cosine_logits", vec![r(&[2, 8]), r(&[3, 8])], seed, |g, v| {
        let q = g.l2_normalize(v[0])?;
        let c = g.l2_normalize(v[1])?;
        cosine_logits(g, q, c, 0.5)
    })?);

    let mut brng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let block = TransformerBlock::with_std(16, 0.3, false, &mut brng)?;
    let x = Tensor::randn(&[4, 16], 1.0, &mut brng);
    let mut block_report = grad_check(
        std::slice::from_ref(&x),
        |g, v| {
            let y = block.forward(g, v[0], 4)?;
            probe(g, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        SUITE_STEP,
        SUITE_TOLERANCE,
    )?;
    block_report.merge(grad_check_module(
        &block,
        |g, b| {
            let xv = g.constant(x.clone());
            let y = b.forward(g, xv, 2)?;
            probe(g, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        SUITE_STEP,
        SUITE_TOLERANCE,
        1,
    )?);
    out.push(("transformer_block".to_string(), block_report));

    // Composed pipelines: D=16, N=3, C=4, B=2.
    let (d, n, c, b) = (16, 3, 4, 2);
    let names: Vec<String> = (0..c).map(|i| format!("class {i}")).collect();
    let vocab = ClassVocabulary::new(Task::Noun, &names)?;
    let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let classifier = build_text_classifier(Tensor::randn(&[c, d], 1.0, &mut prng), vocab)?;
    let clips: Vec<[Tensor; 3]> = (0..b)
        .map(|_| {
            [
                Tensor::randn(&[n, d], 1.0, &mut prng),
                Tensor::randn(&[n, d], 1.0, &mut prng),
                Tensor::randn(&[n, d], 1.0, &mut prng),
            ]
        })
        .collect();
    let labels = [1usize, 3];
    for strategy in ["xmic", "early-uni+xmic", "early-cross+xmic", "xmic+tt+vv"] {
        let mut model = Model::new(ModelConfig {
            dim: d,
            strategy: strategy.parse()?,
            zero_init: false,
            prompt_len: 2,
            text_context: 4,
            seed,
            ..ModelConfig::default()
        })?;
        // Larger weights than the default init so every path carries signal.
        let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        model.visit_mut("", &mut |_, t| {
            let noise = Tensor::randn(t.shape(), 0.2, &mut wrng);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(w, e)| *w += e);
        });
        let text = TextSide::new(classifier.clone(), model.config.text_encoder()?)?;
        let report = grad_check_module(
            &model,
            |g, m| {
                let mut losses = Vec::new();
                for (clip, &label) in clips.iter().zip(&labels) {
                    let vars = ClipVars {
                        video: g.constant(clip[0].clone()),
                        frames2: g.constant(clip[1].clone()),
                        hands2: g.constant(clip[2].clone()),
                    };
                    let (logits, _) = m.clip_logits(g, &text, &vars, None, 0.1)?;
                    losses.push(g.cross_entropy(logits, &[label])?);
                }
                let total = g.add(losses[0], losses[1])?;
                Ok(g.scale(total, 0.5))
            },
            SUITE_STEP,
            SUITE_TOLERANCE,
            1,
        )?;
        out.push((format!("pipeline:{strategy}"), report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_passes() {
        let a = Tensor::from_rows(&[vec![2.0, 0.5, 0.0], vec![0.5, 1.0, -0.3], vec![0.0, -0.3, 3.0]]);
        let x = Tensor::from_rows(&[vec![0.7, -1.2, 0.4]]);
        let report = grad_check(
            &[x],
            |g, v| {
                let am = g.constant(a.clone());
                let ax = g.matmul_t(v[0], am)?;
                g.dot(ax, v[0])
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn corrupted_rule_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[4], 1.0, &mut rng);
        let report = grad_check(
            &[x],
            |g, v| {
                let s = g.broken_square(v[0]);
                Ok(g.sum(s))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!report.passed());
        assert!(!report.failures.is_empty());
    }

    #[test]
    fn nan_counts_as_failure() {
        let mut r = GradCheckReport::new(1e-6);
        r.record("x", 0, f64::NAN, 1.0);
        assert!(!r.passed());
    }

    #[test]
    fn full_suite_passes() {
        for (name, report) in suite(11).unwrap() {
            assert!(report.passed(), "{name}: {:?}", report.worst);
        }
    }
}
