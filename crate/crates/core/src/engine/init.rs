use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{Scalar, Tensor};

/// Fan-in of a weight tensor: product of all extents after the first.
pub fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product::<usize>().max(1)
}

/// Zero-mean Gaussian with variance `2 / fan_in`.
pub fn msra<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    msra_with_fan_in(shape, fan_in(shape), rng)
}

pub fn msra_with_fan_in<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn msra_sample_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t: Tensor<f64> = msra_with_fan_in(&[100_000], 50, &mut rng);
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.04).abs() < 0.04 * 0.05, "variance {var}");
        assert!(mean.abs() < 3.0 * 0.2 / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn conv_fan_in_is_ci_kh_kw() {
        assert_eq!(fan_in(&[16, 4, 3, 3]), 36);
    }
}
