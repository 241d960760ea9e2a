//! Straight-line reference implementations used as test oracles. Nothing
//! here touches the autodiff graph: every op is a plain loop over
//! `Vec<Vec<f64>>`.
#![allow(dead_code)]

use xmic::adapters::{NormFlags, SpatialMode, XmicAdapter};
use xmic::data::ClipSet;
use xmic::encoders::{synth_generate, SyntheticDataset, SyntheticSpec};
use xmic::nn::{LayerNorm, Linear, MultiHeadAttention, TransformerBlock};
use xmic::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn mean(rows: &Mat) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (j, v) in r.iter().enumerate() {
            m[j] += v / rows.len() as f64;
        }
    }
    m
}

pub fn linear(x: &Mat, l: &Linear) -> Mat {
    let (din, dout) = (l.input_dim(), l.output_dim());
    let w = l.weight.data();
    let b = l.bias.data();
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|j| {
                    let mut s = b[j];
                    for i in 0..din {
                        s += row[i] * w[i * dout + j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, ln: &LayerNorm) -> Mat {
    x.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mu = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * ln.gain.data()[j] + ln.bias.data()[j])
                .collect()
        })
        .collect()
}

pub fn quick_gelu(x: f64) -> f64 {
    x / (1.0 + (-1.702 * x).exp())
}

/// Eight-head attention, one head and one query row at a time, attending
/// only within the query's group of `group` consecutive rows.
pub fn mha(x: &Mat, attn: &MultiHeadAttention, group: usize) -> Mat {
    let heads = 8;
    let q = linear(x, &attn.query);
    let k = linear(x, &attn.key);
    let v = linear(x, &attn.value);
    let d = x[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; x.len()];
    for i in 0..x.len() {
        let start = i / group * group;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = (start..start + group)
                .map(|j| dot(&q[i][cols.clone()], &k[j][cols.clone()]) / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (jj, j) in (start..start + group).enumerate() {
                for c in cols.clone() {
                    out[i][c] += e[jj] / z * v[j][c];
                }
            }
        }
    }
    linear(&out, &attn.output)
}

pub fn block(x: &Mat, b: &TransformerBlock, group: usize) -> Mat {
    let a = mha(&layer_norm(x, &b.ln1), &b.attn, group);
    let x: Mat = x.iter().zip(&a).map(|(r, s)| r.iter().zip(s).map(|(p, q)| p + q).collect()).collect();
    let h: Mat = linear(&layer_norm(&x, &b.ln2), &b.mlp.fc1)
        .into_iter()
        .map(|r| r.into_iter().map(quick_gelu).collect())
        .collect();
    let m = linear(&h, &b.mlp.fc2);
    x.iter().zip(&m).map(|(r, s)| r.iter().zip(s).map(|(p, q)| p + q).collect()).collect()
}

/// `a_v` with the spatial block run on each `[x_i; h_i]` pair in its own
/// call, then the temporal stack, mean pooling and the output projection.
pub fn xmic_vector(adapter: &XmicAdapter, frames: &Mat, hands: &Mat) -> Vec<f64> {
    let o = &adapter.options;
    let (mut x, mut h) = match o.spatial {
        SpatialMode::FullHand => (frames.clone(), hands.clone()),
        SpatialMode::Full => (frames.clone(), frames.clone()),
        SpatialMode::Hand => (hands.clone(), hands.clone()),
    };
    if o.norm.n1 {
        x = x.iter().map(|r| unit(r)).collect();
        h = h.iter().map(|r| unit(r)).collect();
    }
    let mut seq = Vec::new();
    for i in 0..x.len() {
        let out = block(&vec![x[i].clone(), h[i].clone()], &adapter.spatial, 2);
        seq.push(out[0].iter().zip(&out[1]).map(|(a, b)| (a + b) / 2.0).collect::<Vec<_>>());
    }
    if o.temporal {
        for b in &adapter.temporal {
            let n = seq.len();
            seq = block(&seq, b, n);
        }
    }
    linear(&vec![mean(&seq)], &adapter.proj).remove(0)
}

/// `normalize(maybe_n3(e) + alpha * maybe_n2(a))` row by row.
pub fn condition(text: &Mat, a_v: &[f64], alpha: f64, norm: NormFlags) -> Mat {
    let a = if norm.n2 { unit(a_v) } else { a_v.to_vec() };
    text.iter()
        .map(|e| {
            let e = if norm.n3 { unit(e) } else { e.clone() };
            unit(&e.iter().zip(&a).map(|(x, y)| x + alpha * y).collect::<Vec<_>>())
        })
        .collect()
}

/// Lowest index among the maxima.
pub fn first_max(scores: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    best
}

/// Cosine scores of `ē_v = normalize(mean(normalize(frames)))` against the
/// adapted (or plain, when `adapter` is `None`) classifier.
pub fn predict(
    text: &Mat,
    video: &Mat,
    frames2: &Mat,
    hands2: &Mat,
    adapter: Option<&XmicAdapter>,
) -> (usize, Vec<f64>) {
    let ev = unit(&mean(&video.iter().map(|r| unit(r)).collect()));
    let rows = match adapter {
        Some(a) => {
            let av = xmic_vector(a, frames2, hands2);
            condition(text, &av, a.options.alpha, a.options.norm)
        }
        None => text.iter().map(|r| unit(r)).collect(),
    };
    let scores: Vec<f64> = rows.iter().map(|r| dot(r, &ev)).collect();
    (first_max(&scores), scores)
}

pub fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        classes: 6,
        dim: 16,
        clips_per_class: 4,
        frames_per_clip: 4,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn synth_set(spec: &SyntheticSpec) -> (SyntheticDataset, ClipSet) {
    let ds = synth_generate(spec).unwrap();
    let set = ClipSet::new(ds.records.clone(), None, &ds.vocab).unwrap();
    (ds, set)
}

pub fn rand_adapter_weights(adapter: &mut XmicAdapter, std: f64, seed: u64) {
    use rand::SeedableRng;
    use xmic::nn::Module;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    adapter.visit_mut("", &mut |_, t| {
        let noise = Tensor::randn(t.shape(), std, &mut rng);
        for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    });
}
