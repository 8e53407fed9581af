//! Fixtures shared by the criterion benches.

use parasink_core::codec::Basket;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` baskets of `len` bytes where a `compressibility` fraction of each
/// basket is a short repeating pattern and the rest is random.
pub fn baskets(n: usize, len: usize, compressibility: f64, seed: u64) -> Vec<Basket> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cut = (len as f64 * compressibility) as usize;
    (0..n)
        .map(|i| {
            let raw = (0..len).map(|j| if j < cut { (j % 13) as u8 } else { rng.gen() }).collect();
            Basket::single(&format!("col{i}"), 0, raw)
        })
        .collect()
}
