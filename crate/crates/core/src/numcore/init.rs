use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::Tensor;

/// Glorot/Xavier uniform initialization on `[-√(6/(rows+cols)), √(6/(rows+cols))]`.
pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng::stream;

    #[test]
    fn values_respect_bound() {
        let t = xavier_uniform(100, 100, &mut stream(1, 0));
        let bound = (6.0f64 / 200.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn deterministic_for_seed() {
        let a = xavier_uniform(7, 3, &mut stream(9, 2));
        let b = xavier_uniform(7, 3, &mut stream(9, 2));
        assert_eq!(a, b);
        assert_ne!(a, xavier_uniform(7, 3, &mut stream(9, 3)));
    }

    #[test]
    fn large_sample_is_centered() {
        let t = xavier_uniform(1000, 1000, &mut stream(3, 0));
        let mean = t.sum() / t.len() as f64;
        // bound/√3 standard deviation, 3σ/√n
        let sd = (6.0f64 / 2000.0).sqrt() / 3f64.sqrt();
        assert!(mean.abs() < 3.0 * sd / 1000.0);
        assert!(mean.abs() < 0.002);
    }
}
