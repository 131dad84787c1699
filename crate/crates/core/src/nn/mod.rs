//! Minimal dense/convolutional layer stack with hand-written backprop.
//!
//! Everything is generic over [`Float`] so the same code runs in `f32` for
//! training throughput and in `f64` for finite-difference gradient checks.
//! Layers return explicit caches from their forward passes; backward passes
//! consume the cache, accumulate parameter gradients in place, and return the
//! gradient with respect to the layer input.

pub mod act;
pub mod adam;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod ops;
pub mod pool;

pub use act::{leaky_relu, leaky_relu_grad, relu, relu_grad, tanh, tanh_grad};
pub use adam::Adam;
pub use conv::{Conv2d, ConvTranspose2d};
pub use linear::Linear;
pub use norm::{BatchNorm1d, BatchNorm2d};
pub use pool::MaxPool2;

use ndarray::{ArrayD, ScalarOperand};
use rand::Rng;

/// Scalar type for all tensors in this crate.
pub trait Float:
    ndarray::NdFloat + num_traits::FromPrimitive + ScalarOperand + Send + Sync + 'static
{
    /// Tag used by the checkpoint container.
    const DTYPE_TAG: u8;

    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Little-endian byte encoding, for checkpoint serialization.
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    const BYTE_WIDTH: usize;
}

impl Float for f32 {
    const DTYPE_TAG: u8 = 1;
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
    const BYTE_WIDTH: usize = 4;
}

impl Float for f64 {
    const DTYPE_TAG: u8 = 2;
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
    const BYTE_WIDTH: usize = 8;
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Float> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad
            .iter()
            .map(|g| {
                let g = g.as_f64();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Draw from N(0, std) in f64, cast to F. All random draws in the crate go
/// through f64 so the consumed random stream is identical across precisions.
pub fn normal_init<F: Float, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<F> {
    use rand_distr::{Distribution, StandardNormal};
    ArrayD::from_shape_simple_fn(shape.to_vec(), || {
        let z: f64 = StandardNormal.sample(rng);
        F::of_f64(z * std)
    })
}

/// Central-difference gradient of `f` with respect to `x`, one coordinate at
/// a time. Used by gradient-fidelity tests against analytic backward passes.
pub fn finite_difference<D, Fn_>(
    x: &ndarray::Array<f64, D>,
    step: f64,
    mut f: Fn_,
) -> ndarray::Array<f64, D>
where
    D: ndarray::Dimension,
    Fn_: FnMut(&ndarray::Array<f64, D>) -> f64,
{
    let mut grad = ndarray::Array::zeros(x.raw_dim());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice_mut().expect("standard layout")[i];
        probe.as_slice_mut().unwrap()[i] = orig + step;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - step;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Largest relative error between an analytic gradient and a reference,
/// with an absolute floor to avoid blowing up near-zero entries.
pub fn max_relative_error<D: ndarray::Dimension>(
    analytic: &ndarray::Array<f64, D>,
    reference: &ndarray::Array<f64, D>,
) -> f64 {
    analytic
        .iter()
        .zip(reference.iter())
        .map(|(&a, &r)| (a - r).abs() / r.abs().max(a.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
