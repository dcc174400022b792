use rand::distr::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// I.i.d. samples from `U[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(TensorError::Argument(format!("fans must be positive, got {fan_in}/{fan_out}")));
    }
    let a = xavier_bound(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-a, a).map_err(|e| TensorError::Argument(e.to_string()))?;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}
