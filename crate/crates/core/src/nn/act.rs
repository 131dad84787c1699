//! Elementwise activations with explicit backward helpers.

use super::Float;
use ndarray::{ArrayD, ArrayViewD};

pub fn leaky_relu<F: Float>(x: &ArrayViewD<F>, slope: F) -> ArrayD<F> {
    x.mapv(|v| if v > F::zero() { v } else { v * slope })
}

/// dL/dx given dL/dy and the pre-activation input.
pub fn leaky_relu_grad<F: Float>(dy: &ArrayViewD<F>, x: &ArrayViewD<F>, slope: F) -> ArrayD<F> {
    let mut dx = dy.to_owned();
    dx.zip_mut_with(x, |d, &v| {
        if v <= F::zero() {
            *d = *d * slope;
        }
    });
    dx
}

pub fn relu<F: Float>(x: &ArrayViewD<F>) -> ArrayD<F> {
    x.mapv(|v| v.max(F::zero()))
}

pub fn relu_grad<F: Float>(dy: &ArrayViewD<F>, x: &ArrayViewD<F>) -> ArrayD<F> {
    let mut dx = dy.to_owned();
    dx.zip_mut_with(x, |d, &v| {
        if v <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

pub fn tanh<F: Float>(x: &ArrayViewD<F>) -> ArrayD<F> {
    x.mapv(|v| v.tanh())
}

/// Backward through tanh, expressed in the cached output y = tanh(x).
pub fn tanh_grad<F: Float>(dy: &ArrayViewD<F>, y: &ArrayViewD<F>) -> ArrayD<F> {
    let mut dx = dy.to_owned();
    dx.zip_mut_with(y, |d, &v| {
        *d = *d * (F::one() - v * v);
    });
    dx
}
