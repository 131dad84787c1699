//! Convolution and transposed convolution via im2col / col2im.
//!
//! Layout conventions: images are (n, c, h, w); the column matrix is
//! (c*k*k, n*oh*ow) with column index n*(oh*ow) + i*ow + j and row index
//! (c*k + ki)*k + kj. A single GEMM per batch does the heavy lifting.

use super::{normal_init, Float, Param};
use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Ix1, Ix4};
use rand::Rng;

pub(crate) fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

pub(crate) fn im2col<F: Float>(
    x: &ArrayView4<F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut cols = Array2::<F>::zeros((c * k * k, n * oh * ow));
    {
        let x_std = x.as_standard_layout();
        let x_slice = x_std.as_slice().unwrap();
        let cols_slice = cols.as_slice_mut().unwrap();
        let col_stride = n * oh * ow;
        for ni in 0..n {
            for ci in 0..c {
                let img = &x_slice[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (ci * k + ki) * k + kj;
                        let row_base = row * col_stride + ni * oh * ow;
                        for i in 0..oh {
                            let sy = (i * stride + ki) as isize - pad as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src_row = &img[sy as usize * w..(sy as usize + 1) * w];
                            let dst = row_base + i * ow;
                            for j in 0..ow {
                                let sx = (j * stride + kj) as isize - pad as isize;
                                if sx >= 0 && sx < w as isize {
                                    cols_slice[dst + j] = src_row[sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub(crate) fn col2im<F: Float>(
    cols: &ArrayView2<F>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    assert_eq!(cols.dim(), (c * k * k, n * oh * ow), "col2im shape");
    let mut x = Array4::<F>::zeros((n, c, h, w));
    {
        let cols_std = cols.as_standard_layout();
        let cols_slice = cols_std.as_slice().unwrap();
        let x_slice = x.as_slice_mut().unwrap();
        let col_stride = n * oh * ow;
        for ni in 0..n {
            for ci in 0..c {
                let img_base = (ni * c + ci) * h * w;
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (ci * k + ki) * k + kj;
                        let row_base = row * col_stride + ni * oh * ow;
                        for i in 0..oh {
                            let sy = (i * stride + ki) as isize - pad as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src = row_base + i * ow;
                            let dst_row = img_base + sy as usize * w;
                            for j in 0..ow {
                                let sx = (j * stride + kj) as isize - pad as isize;
                                if sx >= 0 && sx < w as isize {
                                    x_slice[dst_row + sx as usize] =
                                        x_slice[dst_row + sx as usize] + cols_slice[src + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// (n, c, h, w) -> (c, n*h*w) with column index n*(h*w) + i*w + j.
fn to_channel_major<F: Float>(x: &ArrayView4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let mut out = Array2::<F>::zeros((c, n * h * w));
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let src = (ni * c + ci) * h * w;
            let dst = ci * (n * h * w) + ni * h * w;
            os[dst..dst + h * w].copy_from_slice(&xs[src..src + h * w]);
        }
    }
    out
}

/// Inverse of [`to_channel_major`].
fn from_channel_major<F: Float>(m: &ArrayView2<F>, n: usize, h: usize, w: usize) -> Array4<F> {
    let c = m.nrows();
    assert_eq!(m.ncols(), n * h * w);
    let mut out = Array4::<F>::zeros((n, c, h, w));
    let ms = m.as_slice().expect("standard layout");
    let os = out.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let src = ci * (n * h * w) + ni * h * w;
            let dst = (ni * c + ci) * h * w;
            os[dst..dst + h * w].copy_from_slice(&ms[src..src + h * w]);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub weight: Param<F>, // (out_c, in_c, k, k)
    pub bias: Param<F>,   // (out_c,)
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCache<F> {
    cols: Array2<F>,
    input_hw: (usize, usize),
    n: usize,
}

impl<F: Float> Conv2d<F> {
    pub fn new<R: Rng>(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        weight_std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Param::new(normal_init(&[out_c, in_c, k, k], weight_std, rng)),
            bias: Param::new(ndarray::ArrayD::zeros(vec![out_c])),
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    fn w_mat(&self) -> Array2<F> {
        self.weight
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_shape((self.out_c, self.in_c * self.k * self.k))
            .unwrap()
            .to_owned()
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_dim(h, self.k, self.stride, self.pad),
            conv_out_dim(w, self.k, self.stride, self.pad),
        )
    }

    pub fn forward(&self, x: &ArrayView4<F>) -> (Array4<F>, Conv2dCache<F>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "conv input channels");
        let cols = im2col(x, self.k, self.stride, self.pad);
        let y = self.forward_from_cols(&cols.view(), n, h, w);
        (
            y,
            Conv2dCache {
                cols,
                input_hw: (h, w),
                n,
            },
        )
    }

    pub fn forward_eval(&self, x: &ArrayView4<F>) -> Array4<F> {
        let (n, _, h, w) = x.dim();
        let cols = im2col(x, self.k, self.stride, self.pad);
        self.forward_from_cols(&cols.view(), n, h, w)
    }

    fn forward_from_cols(&self, cols: &ArrayView2<F>, n: usize, h: usize, w: usize) -> Array4<F> {
        let (oh, ow) = self.out_hw(h, w);
        let y_mat = self.w_mat().dot(cols); // (out_c, n*oh*ow)
        let mut y = from_channel_major(&y_mat.view(), n, oh, ow);
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        for mut img in y.outer_iter_mut() {
            for (ci, mut plane) in img.outer_iter_mut().enumerate() {
                plane.mapv_inplace(|v| v + b[ci]);
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &Conv2dCache<F>, dy: &ArrayView4<F>) -> Array4<F> {
        let (h, w) = cache.input_hw;
        let dy_mat = to_channel_major(dy); // (out_c, n*oh*ow)
        let dw = dy_mat.dot(&cache.cols.t()); // (out_c, in_c*k*k)
        self.weight.grad += &dw
            .to_shape((self.out_c, self.in_c, self.k, self.k))
            .unwrap()
            .view()
            .into_dyn();
        let db = dy_mat.sum_axis(ndarray::Axis(1));
        self.bias.grad += &db;
        let dcols = self.w_mat().t().dot(&dy_mat);
        col2im(
            &dcols.view(),
            cache.n,
            self.in_c,
            h,
            w,
            self.k,
            self.stride,
            self.pad,
        )
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<F>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d<F> {
    pub weight: Param<F>, // (in_c, out_c, k, k)
    pub bias: Param<F>,   // (out_c,)
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvTranspose2dCache<F> {
    x_mat: Array2<F>, // (in_c, n*h*w)
    input_hw: (usize, usize),
    n: usize,
}

impl<F: Float> ConvTranspose2d<F> {
    pub fn new<R: Rng>(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        weight_std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Param::new(normal_init(&[in_c, out_c, k, k], weight_std, rng)),
            bias: Param::new(ndarray::ArrayD::zeros(vec![out_c])),
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    fn w_mat(&self) -> Array2<F> {
        self.weight
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_shape((self.in_c, self.out_c * self.k * self.k))
            .unwrap()
            .to_owned()
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.k - 2 * self.pad,
            (w - 1) * self.stride + self.k - 2 * self.pad,
        )
    }

    pub fn forward(&self, x: &ArrayView4<F>) -> (Array4<F>, ConvTranspose2dCache<F>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "conv-transpose input channels");
        let x_mat = to_channel_major(x);
        let y = self.forward_from_mat(&x_mat.view(), n, h, w);
        (
            y,
            ConvTranspose2dCache {
                x_mat,
                input_hw: (h, w),
                n,
            },
        )
    }

    pub fn forward_eval(&self, x: &ArrayView4<F>) -> Array4<F> {
        let (n, _, h, w) = x.dim();
        let x_mat = to_channel_major(x);
        self.forward_from_mat(&x_mat.view(), n, h, w)
    }

    fn forward_from_mat(&self, x_mat: &ArrayView2<F>, n: usize, h: usize, w: usize) -> Array4<F> {
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.w_mat().t().dot(x_mat); // (out_c*k*k, n*h*w)
        let mut y = col2im(
            &cols.view(),
            n,
            self.out_c,
            oh,
            ow,
            self.k,
            self.stride,
            self.pad,
        );
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        for mut img in y.outer_iter_mut() {
            for (ci, mut plane) in img.outer_iter_mut().enumerate() {
                plane.mapv_inplace(|v| v + b[ci]);
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &ConvTranspose2dCache<F>, dy: &ArrayView4<F>) -> Array4<F> {
        let (h, w) = cache.input_hw;
        // dcols has the same role as the forward's `cols`.
        let dcols = im2col(dy, self.k, self.stride, self.pad); // (out_c*k*k, n*h*w)
        let dw = cache.x_mat.dot(&dcols.t()); // (in_c, out_c*k*k)
        self.weight.grad += &dw
            .to_shape((self.in_c, self.out_c, self.k, self.k))
            .unwrap()
            .view()
            .into_dyn();
        let mut db = ndarray::Array1::<F>::zeros(self.out_c);
        for img in dy.outer_iter() {
            for (ci, plane) in img.outer_iter().enumerate() {
                db[ci] = db[ci] + plane.sum();
            }
        }
        self.bias.grad += &db;
        let dx_mat = self.w_mat().dot(&dcols); // (in_c, n*h*w)
        from_channel_major(&dx_mat.view(), cache.n, h, w)
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<F>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}
