mod common;

use common::{block, mat, mha};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xmic::gradcheck::grad_check;
use xmic::nn::{cosine_logits, TransformerBlock};
use xmic::{Graph, Tensor, XmicError};

fn assert_close(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }
}

fn random_block(d: usize, seed: u64) -> TransformerBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = TransformerBlock::with_std(d, 0.3, false, &mut rng).unwrap();
    // Non-trivial layer-norm affine parameters.
    b.ln1.gain = Tensor::randn(&[d], 0.5, &mut rng);
    b.ln2.bias = Tensor::randn(&[d], 0.5, &mut rng);
    b
}

#[test]
fn attention_matches_per_head_loop() {
    for (rows, group, seed) in [(4, 4, 1), (6, 2, 2), (5, 1, 3), (6, 3, 4)] {
        let d = 16;
        let b = random_block(d, seed);
        let x = Tensor::randn(&[rows, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 100));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = b.attn.forward(&mut g, xv, group).unwrap();
        assert_close(&mat(g.value(y)), &mha(&mat(&x), &b.attn, group), 1e-12);
    }
}

#[test]
fn block_matches_reference() {
    let d = 24;
    let b = random_block(d, 9);
    let x = Tensor::randn(&[5, d], 1.0, &mut ChaCha8Rng::seed_from_u64(10));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = b.forward(&mut g, xv, 5).unwrap();
    assert_close(&mat(g.value(y)), &block(&mat(&x), &b, 5), 1e-11);
}

#[test]
fn zero_residual_block_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = TransformerBlock::new(16, true, &mut rng).unwrap();
    let x = Tensor::randn(&[3, 16], 1.0, &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = b.forward(&mut g, xv, 3).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn block_needs_width_divisible_by_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(TransformerBlock::new(12, true, &mut rng), Err(XmicError::BadShape(_))));
}

#[test]
fn zero_norm_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(g.l2_normalize(x), Err(XmicError::ZeroNorm { .. })));
}

#[test]
fn cosine_logits_reject_non_unit_rows() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
    let c = g.constant(Tensor::from_rows(&[vec![2.0, 0.0]]));
    assert!(matches!(cosine_logits(&mut g, q, c, 0.01), Err(XmicError::NotNormalized { .. })));
    let c = g.constant(Tensor::from_rows(&[vec![0.6, 0.8]]));
    let l = cosine_logits(&mut g, q, c, 0.5).unwrap();
    assert!((g.value(l).data()[0] - 1.2).abs() < 1e-12);
}

#[test]
fn cross_entropy_matches_log_softmax() {
    let logits = vec![vec![1.0, 2.0, 0.5], vec![-1.0, 0.0, 3.0]];
    let labels = [1, 0];
    let mut g = Graph::new();
    let l = g.constant(Tensor::from_rows(&logits));
    let ce = g.cross_entropy(l, &labels).unwrap();
    let mut want = 0.0;
    for (r, &y) in logits.iter().zip(&labels) {
        let z: f64 = r.iter().map(|v| v.exp()).sum();
        want += -(r[y].exp() / z).ln() / 2.0;
    }
    assert!((g.value(ce).data()[0] - want).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// A chain of the main primitives, checked by central differences on
    /// randomly shaped inputs.
    #[test]
    fn gradients_match_finite_differences(rows in 1usize..5, width in 1usize..4, classes in 2usize..5, seed in any::<u64>()) {
        let d = 8 * width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[rows, d], 1.0, &mut rng);
        let gain = Tensor::randn(&[d], 1.0, &mut rng);
        let w = Tensor::randn(&[d, classes], 0.5, &mut rng);
        let labels: Vec<usize> = (0..rows).map(|r| r % classes).collect();
        let report = grad_check(
            &[x, gain, w],
            |g, v| {
                let zero = g.constant(Tensor::zeros(&[d]));
                let h = g.layer_norm(v[0], v[1], zero)?;
                let h = g.quick_gelu(h);
                let h = g.l2_normalize(h)?;
                let logits = g.matmul(h, v[2])?;
                g.cross_entropy(logits, &labels)
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        prop_assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    /// Without positional encodings a full-attention block commutes with
    /// any reordering of its rows.
    #[test]
    fn block_is_permutation_equivariant(n in 2usize..6, seed in any::<u64>()) {
        let d = 16;
        let b = random_block(d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = mat(&Tensor::randn(&[n, d], 1.0, &mut rng));
        let perm: Vec<usize> = (0..n).rev().collect();
        let px: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
        let run = |rows: &Vec<Vec<f64>>| {
            let mut g = Graph::new();
            let v = g.constant(Tensor::from_rows(rows));
            let y = b.forward(&mut g, v, n).unwrap();
            mat(g.value(y))
        };
        let y = run(&x);
        let py = run(&px);
        for (k, &i) in perm.iter().enumerate() {
            for (a, c) in py[k].iter().zip(&y[i]) {
                prop_assert!((a - c).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn normalization_is_idempotent_and_scale_invariant(
        v in prop::collection::vec(-10.0f64..10.0, 1..20),
        c in 0.01f64..100.0,
    ) {
        prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(v.clone()));
        let once = g.l2_normalize(x).unwrap();
        let twice = g.l2_normalize(once).unwrap();
        let scaled = g.scale(x, c);
        let scaled = g.l2_normalize(scaled).unwrap();
        let (a, b, s) = (g.value(once).data(), g.value(twice).data(), g.value(scaled).data());
        for i in 0..v.len() {
            prop_assert!((a[i] - b[i]).abs() < 1e-12);
            prop_assert!((a[i] - s[i]).abs() < 1e-12);
        }
    }
}
