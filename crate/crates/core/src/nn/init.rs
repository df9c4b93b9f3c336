//! Parameter initialization: zero-mean uniform weights scaled by fan-in,
//! PReLU slopes at 0.25, zero biases.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamSet, Real};

use super::PRELU_INIT;

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` conv weights `[c_out, gw, 3, 3]`.
pub fn conv_weight<T: Real>(
    params: &mut ParamSet<T>,
    name: &str,
    c_out: usize,
    gw: usize,
    rng: &mut ChaCha8Rng,
) -> ParamId {
    let bound = 1.0 / ((gw * 9) as f64).sqrt();
    let w = ArrayD::from_shape_fn(IxDyn(&[c_out, gw, 3, 3]), |_| {
        T::from_f64(rng.gen_range(-bound..bound))
    });
    params.add(name, w)
}

/// Conv weights scaled down by an extra factor (warm starts).
pub fn conv_weight_scaled<T: Real>(
    params: &mut ParamSet<T>,
    name: &str,
    c_out: usize,
    gw: usize,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> ParamId {
    let bound = scale / ((gw * 9) as f64).sqrt();
    let w = ArrayD::from_shape_fn(IxDyn(&[c_out, gw, 3, 3]), |_| {
        T::from_f64(rng.gen_range(-bound..bound))
    });
    params.add(name, w)
}

pub fn bias<T: Real>(params: &mut ParamSet<T>, name: &str, c: usize, value: f64) -> ParamId {
    params.add(name, ArrayD::from_elem(IxDyn(&[c]), T::from_f64(value)))
}

pub fn prelu_slope<T: Real>(params: &mut ParamSet<T>, name: &str, c: usize) -> ParamId {
    params.add(name, ArrayD::from_elem(IxDyn(&[c]), T::from_f64(PRELU_INIT)))
}
