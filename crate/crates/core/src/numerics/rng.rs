use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

pub type LabRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream derived from `seed` and a label, so that adding a
/// consumer never shifts another consumer's draws.
pub fn derived_rng(seed: u64, label: &str) -> LabRng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

pub fn gaussian_init<S: Scalar>(shape: &[usize], std: f64, rng: &mut LabRng) -> Tensor<S> {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape has no zero dims")
}

/// Exact position of a ChaCha stream, for checkpointing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string (u128 does not survive every JSON reader).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &LabRng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<LabRng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}
