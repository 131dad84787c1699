//! 2x2 stride-2 max pooling (used by the evaluation classifier).

use super::Float;
use ndarray::{Array4, ArrayView4};

pub struct MaxPool2;

pub struct MaxPool2Cache {
    argmax: Vec<u32>, // flat input index of each output element
    in_dims: (usize, usize, usize, usize),
}

impl MaxPool2 {
    pub fn forward<F: Float>(x: &ArrayView4<F>) -> (Array4<F>, MaxPool2Cache) {
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max pool expects even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array4::<F>::zeros((n, c, oh, ow));
        let mut argmax = vec![0u32; n * c * oh * ow];
        let x_std = x.as_standard_layout();
        let xs = x_std.as_slice().unwrap();
        let ys = y.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let img = (ni * c + ci) * h * w;
                let out = (ni * c + ci) * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best_idx = img + (2 * i) * w + 2 * j;
                        let mut best = xs[best_idx];
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = img + (2 * i + di) * w + 2 * j + dj;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                        ys[out + i * ow + j] = best;
                        argmax[out + i * ow + j] = best_idx as u32;
                    }
                }
            }
        }
        (
            y,
            MaxPool2Cache {
                argmax,
                in_dims: (n, c, h, w),
            },
        )
    }

    pub fn backward<F: Float>(cache: &MaxPool2Cache, dy: &ArrayView4<F>) -> Array4<F> {
        let mut dx = Array4::<F>::zeros(cache.in_dims);
        let dxs = dx.as_slice_mut().unwrap();
        for (&idx, &g) in cache.argmax.iter().zip(dy.iter()) {
            dxs[idx as usize] = dxs[idx as usize] + g;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn picks_maxima_and_routes_gradient() {
        let mut x = Array4::<f64>::zeros((1, 1, 4, 4));
        x[[0, 0, 0, 1]] = 3.0;
        x[[0, 0, 3, 3]] = 5.0;
        let (y, cache) = MaxPool2::forward(&x.view());
        assert_eq!(y[[0, 0, 0, 0]], 3.0);
        assert_eq!(y[[0, 0, 1, 1]], 5.0);
        let dy = Array4::from_elem((1, 1, 2, 2), 1.0);
        let dx = MaxPool2::backward(&cache, &dy.view());
        assert_eq!(dx[[0, 0, 0, 1]], 1.0);
        assert_eq!(dx[[0, 0, 3, 3]], 1.0);
        assert_eq!(dx.sum(), 4.0);
    }
}
