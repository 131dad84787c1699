//! Batch normalization for dense and convolutional activations.
//!
//! Training mode normalizes by biased batch statistics and updates running
//! estimates (unbiased variance) with momentum; eval mode uses the running
//! estimates only, so inference is batch-independent.

use super::{Float, Param};
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis, Ix1};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm1d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub dim: usize,
}

pub struct BatchNorm1dCache<F> {
    x_hat: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Float> BatchNorm1d<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(ndarray::ArrayD::from_elem(vec![dim], F::one())),
            beta: Param::new(ndarray::ArrayD::zeros(vec![dim])),
            running_mean: Array1::zeros(dim),
            running_var: Array1::from_elem(dim, F::one()),
            dim,
        }
    }

    pub fn forward_train(&mut self, x: &ArrayView2<F>) -> (Array2<F>, BatchNorm1dCache<F>) {
        let n = x.nrows();
        assert!(n > 1, "batch norm needs more than one sample in train mode");
        let nf = F::from_usize(n).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        let mut var = Array1::<F>::zeros(self.dim);
        for row in x.rows() {
            for (v, (&xi, &mi)) in var.iter_mut().zip(row.iter().zip(mean.iter())) {
                let d = xi - mi;
                *v = *v + d * d;
            }
        }
        var.mapv_inplace(|v| v / nf); // biased
        let eps = F::of_f64(BN_EPS);
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());

        let mut x_hat = x.to_owned();
        for mut row in x_hat.rows_mut() {
            for ((v, &mi), &si) in row.iter_mut().zip(mean.iter()).zip(inv_std.iter()) {
                *v = (*v - mi) * si;
            }
        }
        let y = self.scale_shift(&x_hat);

        let mom = F::of_f64(BN_MOMENTUM);
        let unbias = nf / F::from_usize(n - 1).unwrap();
        for ((rm, rv), (&m, &v)) in self
            .running_mean
            .iter_mut()
            .zip(self.running_var.iter_mut())
            .zip(mean.iter().zip(var.iter()))
        {
            *rm = (F::one() - mom) * *rm + mom * m;
            *rv = (F::one() - mom) * *rv + mom * v * unbias;
        }
        (y, BatchNorm1dCache { x_hat, inv_std })
    }

    pub fn forward_eval(&self, x: &ArrayView2<F>) -> Array2<F> {
        let eps = F::of_f64(BN_EPS);
        let g = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let b = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x.to_owned();
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let inv = F::one() / (self.running_var[j] + eps).sqrt();
                *v = (*v - self.running_mean[j]) * inv * g[j] + b[j];
            }
        }
        y
    }

    fn scale_shift(&self, x_hat: &Array2<F>) -> Array2<F> {
        let g = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let b = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x_hat.clone();
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * g[j] + b[j];
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BatchNorm1dCache<F>, dy: &ArrayView2<F>) -> Array2<F> {
        let n = dy.nrows();
        let nf = F::from_usize(n).unwrap();
        let g = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();

        let dgamma = (dy * &cache.x_hat).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));

        // dx = inv_std/n * (n*dxhat - sum(dxhat) - x_hat*sum(dxhat*x_hat)), dxhat = dy*gamma
        let mut dxhat = dy.to_owned();
        for mut row in dxhat.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * g[j];
            }
        }
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.x_hat).sum_axis(Axis(0));
        let mut dx = dxhat;
        for (mut row, xh_row) in dx.rows_mut().into_iter().zip(cache.x_hat.rows()) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = cache.inv_std[j] / nf
                    * (nf * *v - sum_dxhat[j] - xh_row[j] * sum_dxhat_xhat[j]);
            }
        }
        self.gamma.grad += &dgamma;
        self.beta.grad += &dbeta;
        dx
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<F>)> {
        vec![("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }

    pub fn buffers(&self) -> Vec<(&'static str, &Array1<F>)> {
        vec![
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ]
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Array1<F>)> {
        vec![
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }
}

/// Channel-wise batch norm over (n, c, h, w), implemented by folding the
/// spatial dims into the batch axis and reusing the 1-d math.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<F> {
    pub inner: BatchNorm1d<F>,
}

pub struct BatchNorm2dCache<F> {
    cache: BatchNorm1dCache<F>,
    dims: (usize, usize, usize, usize),
}

impl<F: Float> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            inner: BatchNorm1d::new(channels),
        }
    }

    fn fold(x: &ArrayView4<F>) -> Array2<F> {
        // (n, c, h, w) -> (n*h*w, c)
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let mut out = Array2::<F>::zeros((n * hw, c));
        let x_std = x.as_standard_layout();
        let xs = x_std.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let plane = &xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                let base = ni * hw * c + ci;
                for (t, &v) in plane.iter().enumerate() {
                    os[base + t * c] = v;
                }
            }
        }
        out
    }

    fn unfold(m: &Array2<F>, dims: (usize, usize, usize, usize)) -> Array4<F> {
        let (n, c, h, w) = dims;
        let hw = h * w;
        let mut out = Array4::<F>::zeros(dims);
        let ms = m.as_slice().expect("standard layout");
        let os = out.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let plane = &mut os[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                let base = ni * hw * c + ci;
                for (t, v) in plane.iter_mut().enumerate() {
                    *v = ms[base + t * c];
                }
            }
        }
        out
    }

    pub fn forward_train(&mut self, x: &ArrayView4<F>) -> (Array4<F>, BatchNorm2dCache<F>) {
        let dims = x.dim();
        let folded = Self::fold(x);
        let (y, cache) = self.inner.forward_train(&folded.view());
        (Self::unfold(&y, dims), BatchNorm2dCache { cache, dims })
    }

    pub fn forward_eval(&self, x: &ArrayView4<F>) -> Array4<F> {
        let dims = x.dim();
        let y = self.inner.forward_eval(&Self::fold(x).view());
        Self::unfold(&y, dims)
    }

    pub fn backward(&mut self, cache: &BatchNorm2dCache<F>, dy: &ArrayView4<F>) -> Array4<F> {
        let folded = Self::fold(dy);
        let dx = self.inner.backward(&cache.cache, &folded.view());
        Self::unfold(&dx, cache.dims)
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<F>)> {
        self.inner.params_mut()
    }

    pub fn buffers(&self) -> Vec<(&'static str, &Array1<F>)> {
        self.inner.buffers()
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Array1<F>)> {
        self.inner.buffers_mut()
    }
}
