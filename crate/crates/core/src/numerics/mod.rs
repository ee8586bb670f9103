//! Array substrate: tensors, reverse-mode differentiation, seeded sampling,
//! optimisation and the explicit Euler update.

mod graph;
mod gradcheck;
mod optim;
mod params;
pub mod rng;
mod scalar;
mod tensor;

pub use graph::{AttnDims, Gradients, Graph, Var};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use optim::{AdamW, AdamWConfig};
pub use params::ParamStore;
pub(crate) use params::hex;
pub use rng::gaussian_sample;
pub use scalar::Scalar;
pub use tensor::{softmax_rows, Tensor};

use crate::error::{Error, Result};

/// One explicit Euler step `z + gamma · v · dt`.
pub fn euler_step<T: Scalar>(z: &Tensor<T>, v: &Tensor<T>, gamma: f64, dt: f64) -> Result<Tensor<T>> {
    if !(gamma > 0.0) || !(dt > 0.0) {
        return Err(Error::Config(format!("euler_step needs gamma > 0 and dt > 0 (got {gamma}, {dt})")));
    }
    let s = T::c(gamma * dt);
    z.zip_map(v, |a, b| a + s * b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euler_zero_velocity_is_identity() {
        let z = gaussian_sample::<f32>(&[4, 3], 1).unwrap();
        let v = Tensor::zeros(&[4, 3]).unwrap();
        assert_eq!(euler_step(&z, &v, 0.01, 1.0).unwrap(), z);
    }

    #[test]
    fn euler_small_gamma_step() {
        let z = Tensor::<f32>::zeros(&[2, 2]).unwrap();
        let v = Tensor::full(&[2, 2], 1.0).unwrap();
        let out = euler_step(&z, &v, 0.01, 1.0).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.01));
    }

    #[test]
    fn euler_half_steps_compose() {
        let z = gaussian_sample::<f64>(&[3, 3], 2).unwrap();
        let v = gaussian_sample::<f64>(&[3, 3], 3).unwrap();
        let two = euler_step(&euler_step(&z, &v, 0.01, 0.5).unwrap(), &v, 0.01, 0.5).unwrap();
        let one = euler_step(&z, &v, 0.01, 1.0).unwrap();
        for (a, b) in two.data().iter().zip(one.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_rejects_bad_arguments() {
        let z = Tensor::<f32>::zeros(&[2]).unwrap();
        let v = Tensor::<f32>::zeros(&[3]).unwrap();
        assert!(euler_step(&z, &v, 0.01, 1.0).is_err());
        assert!(euler_step(&z, &z, 0.0, 1.0).is_err());
        assert!(euler_step(&z, &z, 0.01, 0.0).is_err());
    }
}
