//! Seed derivation for reproducible experiments.
//!
//! Every trial draws from its own ChaCha stream. The key is derived from the
//! master seed and an experiment tag, the stream id is the trial index, so a
//! trial's randomness never depends on how many trials ran before it or on
//! which thread ran it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Independent generator for trial `index` of experiment `tag`.
pub fn stream_rng(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = master ^ fnv1a(tag);
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

pub fn normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            std * z
        })
        .collect::<Vec<f64>>()
}

/// Matrix with i.i.d. `N(0, std²)` entries.
pub fn normal_matrix<R: rand::Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    std: f64,
) -> Tensor {
    Tensor::matrix(rows, cols, normal_vec(rng, rows * cols, std))
        .expect("extent product matches by construction")
}
