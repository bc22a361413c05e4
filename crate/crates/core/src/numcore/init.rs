use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;

/// Default standard deviation for weight initialization.
pub const INIT_STD: f64 = 0.02;

pub fn gaussian<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_parts_unchecked(dims.to_vec(), data)
}
