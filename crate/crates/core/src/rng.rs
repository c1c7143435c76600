//! Named random substreams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tensor};

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for stream `name` at coordinates `ids` (e.g. epoch, step, image).
pub fn derive_seed(master: u64, name: &str, ids: &[u64]) -> u64 {
    let mut h = splitmix(master);
    for b in name.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    for &i in ids {
        h = splitmix(h ^ splitmix(i.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    h
}

pub fn substream(master: u64, name: &str, ids: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, name, ids))
}

/// Normal(0, std) truncated to ±2 std by resampling.
pub fn trunc_normal<F: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break F::from_f64_lossy(x);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}
