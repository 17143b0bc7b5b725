//! Seeded synthetic classification data.

use crate::prng::{Prng, StreamKey};
use crate::tensor::{numel, Tensor};

/// Class-conditional Gaussian blobs: each class has a fixed prototype and
/// samples are prototype plus noise, so a small net can learn them.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Per-sample shape, batch axis excluded.
    pub sample_shape: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
    pub noise: f64,
    prototypes: Vec<Vec<f32>>,
}

impl SyntheticData {
    pub fn new(sample_shape: &[usize], classes: usize, seed: u64) -> SyntheticData {
        let n = numel(sample_shape);
        let mut prng = Prng::for_stream(StreamKey::new(seed, u64::MAX - 1, 0, 0));
        let prototypes = (0..classes)
            .map(|_| (0..n).map(|_| prng.normal() as f32).collect())
            .collect();
        SyntheticData {
            sample_shape: sample_shape.to_vec(),
            classes,
            seed,
            noise: 0.5,
            prototypes,
        }
    }

    /// Batch `index` of `size` samples: `(inputs [size, ..sample_shape], labels [size])`.
    pub fn batch(&self, index: u64, size: usize) -> (Tensor, Tensor) {
        let mut prng = Prng::for_stream(StreamKey::new(self.seed, index, u64::MAX, 0));
        let n = numel(&self.sample_shape);
        let mut xs = Vec::with_capacity(size * n);
        let mut ys = Vec::with_capacity(size);
        for _ in 0..size {
            let c = prng.below(self.classes as u64) as usize;
            ys.push(c as i64);
            xs.extend(
                self.prototypes[c]
                    .iter()
                    .map(|&p| p + (self.noise * prng.normal()) as f32),
            );
        }
        let mut shape = vec![size];
        shape.extend_from_slice(&self.sample_shape);
        (
            Tensor::from_f32(&shape, xs).expect("shape matches"),
            Tensor::from_i64(&[size], ys).expect("shape matches"),
        )
    }
}
