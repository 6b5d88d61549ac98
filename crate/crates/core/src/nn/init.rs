//! Parameter initializers.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// How a freshly created parameter tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Initializer {
    /// Uniform on [-l, l] with l = sqrt(6 / (fan_in + fan_out)).
    GlorotUniform,
    Zeros,
    Ones,
}

impl Initializer {
    /// Fill a tensor of `shape`. Without an rng the random initializer
    /// degrades to zeros, which suits graphs that only ever import
    /// pretrained weights.
    pub fn materialize(&self, shape: &[usize], rng: Option<&mut ChaCha12Rng>) -> ArrayD<f32> {
        match self {
            Initializer::Zeros => ArrayD::zeros(IxDyn(shape)),
            Initializer::Ones => ArrayD::from_elem(IxDyn(shape), 1.0),
            Initializer::GlorotUniform => {
                let Some(rng) = rng else {
                    return ArrayD::zeros(IxDyn(shape));
                };
                let n = shape.len();
                // Convention: trailing two axes are (fan_in, fan_out),
                // earlier axes form the receptive field.
                let (fan_in, fan_out) = if n >= 2 {
                    let rf: usize = shape[..n - 2].iter().product();
                    (shape[n - 2] * rf, shape[n - 1] * rf)
                } else if n == 1 {
                    (shape[0], shape[0])
                } else {
                    (1, 1)
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-limit..limit))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn glorot_respects_fan_based_limit() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let shape = [3, 3, 8, 16];
        let t = Initializer::GlorotUniform.materialize(&shape, Some(&mut rng));
        let limit = (6.0f64 / ((9 * 8 + 9 * 16) as f64)).sqrt() as f32;
        assert!(t.iter().all(|v| v.abs() <= limit));
        // Values actually spread out instead of collapsing.
        let spread = t.iter().copied().fold(0.0f32, |a, v| a.max(v.abs()));
        assert!(spread > limit * 0.5);
    }

    #[test]
    fn same_seed_reproduces_the_same_tensor() {
        let a = Initializer::GlorotUniform
            .materialize(&[4, 4], Some(&mut ChaCha12Rng::seed_from_u64(9)));
        let b = Initializer::GlorotUniform
            .materialize(&[4, 4], Some(&mut ChaCha12Rng::seed_from_u64(9)));
        assert_eq!(a, b);
    }

    #[test]
    fn constant_fills_and_rng_free_fallback() {
        assert!(Initializer::Zeros
            .materialize(&[3], None)
            .iter()
            .all(|&v| v == 0.0));
        assert!(Initializer::Ones
            .materialize(&[3], None)
            .iter()
            .all(|&v| v == 1.0));
        assert!(Initializer::GlorotUniform
            .materialize(&[3, 3], None)
            .iter()
            .all(|&v| v == 0.0));
    }
}
