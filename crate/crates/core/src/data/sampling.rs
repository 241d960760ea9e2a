use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameSampling {
    /// `floor(i * F / N)` for `i = 0..N`.
    Uniform,
    /// Sorted random draws; without replacement when `N <= F`.
    Random { seed: u64 },
}

/// Picks `n` frame indices out of `total`, all within `[0, total)`.
pub fn sample_frames(total: usize, n: usize, mode: FrameSampling) -> Vec<usize> {
    let total = total.max(1);
    match mode {
        FrameSampling::Uniform => (0..n).map(|i| (i * total / n).min(total - 1)).collect(),
        FrameSampling::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx: Vec<usize> = if n <= total {
                index::sample(&mut rng, total, n).into_vec()
            } else {
                (0..n).map(|_| rng.gen_range(0..total)).collect()
            };
            idx.sort_unstable();
            idx
        }
    }
}
