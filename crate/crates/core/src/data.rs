//! Synthetic class-conditional image batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Batch, Tensor};

/// Unit-variance Gaussian pixels; class `k` adds +1.0 to channel
/// `k % C` inside spatial quadrant `(k / C) % 4`. Labels are uniform.
pub fn synthetic_batch(n: usize, shape: [usize; 3], classes: usize, seed: u64) -> Result<Batch> {
    let [c, h, w] = shape;
    if n == 0 || classes == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Config(
            "synthetic batch needs positive size, class count and dims".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let mut data = Vec::with_capacity(n * c * h * w);
    for &label in &labels {
        let channel = label % c;
        let quadrant = (label / c) % 4;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let q = usize::from(y >= h / 2) * 2 + usize::from(x >= w / 2);
                    let shift = if ch == channel && q == quadrant { 1.0 } else { 0.0 };
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push(noise + shift);
                }
            }
        }
    }
    Batch::new(Tensor::new(vec![n, c, h, w], data)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_in_range_and_seeded() {
        let a = synthetic_batch(8, [3, 16, 16], 10, 7).unwrap();
        assert!(a.labels().iter().all(|&y| y < 10));
        assert_eq!(a.images().shape(), &[8, 3, 16, 16]);
        assert_eq!(a, synthetic_batch(8, [3, 16, 16], 10, 7).unwrap());
        assert_ne!(a, synthetic_batch(8, [3, 16, 16], 10, 8).unwrap());
    }

    #[test]
    fn class_shift_is_visible_in_means() {
        let b = synthetic_batch(400, [2, 4, 4], 2, 1).unwrap();
        let mut sums = [[0.0; 2]; 2];
        let mut counts = [0.0; 2];
        for i in 0..400 {
            let y = b.labels()[i];
            counts[y] += 1.0;
            let s = b.images().sample(i);
            // quadrant 0 of each channel: rows 0..2, cols 0..2
            for ch in 0..2 {
                let q: f64 = [0, 1, 4, 5].iter().map(|&p| s[ch * 16 + p]).sum::<f64>() / 4.0;
                sums[y][ch] += q;
            }
        }
        assert!(sums[0][0] / counts[0] > 0.8);
        assert!((sums[0][1] / counts[0]).abs() < 0.2);
        assert!(sums[1][1] / counts[1] > 0.8);
    }

    #[test]
    fn rejects_empty() {
        assert!(synthetic_batch(0, [3, 4, 4], 10, 1).is_err());
    }
}
