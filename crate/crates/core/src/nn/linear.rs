//! Fully connected layer.

use super::{normal_init, Float, Param};
use ndarray::{Array2, ArrayView2, Axis, Ix2};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub weight: Param<F>, // (out, in)
    pub bias: Param<F>,   // (out,)
    pub in_dim: usize,
    pub out_dim: usize,
}

pub struct LinearCache<F> {
    input: Array2<F>, // (n, in)
}

impl<F: Float> Linear<F> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, weight_std: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::new(normal_init(&[out_dim, in_dim], weight_std, rng)),
            bias: Param::new(ndarray::ArrayD::zeros(vec![out_dim])),
            in_dim,
            out_dim,
        }
    }

    fn w(&self) -> ArrayView2<'_, F> {
        self.weight.value.view().into_dimensionality::<Ix2>().unwrap()
    }

    /// y = x W^T + b, with the input cached for backward.
    pub fn forward(&self, x: &ArrayView2<F>) -> (Array2<F>, LinearCache<F>) {
        let y = self.forward_eval(x);
        (y, LinearCache { input: x.to_owned() })
    }

    pub fn forward_eval(&self, x: &ArrayView2<F>) -> Array2<F> {
        assert_eq!(x.ncols(), self.in_dim, "linear input width");
        let mut y = x.dot(&self.w().t());
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        y += &b;
        y
    }

    /// Accumulates dW, db; returns dx.
    pub fn backward(&mut self, cache: &LinearCache<F>, dy: &ArrayView2<F>) -> Array2<F> {
        let dw = dy.t().dot(&cache.input.view()); // (out, in)
        let db = dy.sum_axis(Axis(0));
        self.weight.grad += &dw;
        self.bias.grad += &db;
        dy.dot(&self.w())
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<F>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}
