//! Identity-preserving augmentations.
//!
//! All transforms keep image shape and the [-1, 1] value range; geometric
//! resampling is bilinear with out-of-frame pixels filled with the
//! background value -1.

use crate::data::splits::DatasetKind;
use crate::error::Result;
use crate::nn::Float;
use ndarray::{Array3, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

const FILL: f64 = -1.0;

/// One identity-preserving transform with its parameter range; fresh
/// parameters are drawn per call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Rotate by an angle uniform in +-max_degrees about the image center.
    Rotation { max_degrees: f64 },
    /// Scale about the center by a factor uniform in 1 +- max_delta.
    Zoom { max_delta: f64 },
    /// Mirror left-right with probability 1/2.
    HorizontalFlip,
    /// Crop a centered-fraction window at a random offset, resize back.
    RandomCrop { keep_fraction: f64 },
    /// Gamma curve on the [0, 1] remap of the pixel values.
    GammaContrast { low: f64, high: f64 },
}

/// Ordered transform list for one dataset family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPipeline {
    pub transforms: Vec<Transform>,
}

impl AugmentationPipeline {
    /// The per-dataset recipes: rotation+zoom for digits; rotation, flips
    /// and crops for the rendered-object sets; flip+crop+gamma for faces.
    pub fn for_dataset(kind: DatasetKind) -> Self {
        let transforms = match kind {
            DatasetKind::Mnist => vec![
                Transform::Rotation { max_degrees: 10.0 },
                Transform::Zoom { max_delta: 0.1 },
            ],
            DatasetKind::Cars | DatasetKind::Chairs | DatasetKind::Shapenet => vec![
                Transform::Rotation { max_degrees: 10.0 },
                Transform::HorizontalFlip,
                Transform::RandomCrop {
                    keep_fraction: 0.975,
                },
            ],
            // Scale by 1.1x then crop back to the original side.
            DatasetKind::Ytf => vec![
                Transform::HorizontalFlip,
                Transform::RandomCrop {
                    keep_fraction: 1.0 / 1.1,
                },
                Transform::GammaContrast { low: 0.3, high: 4.0 },
            ],
        };
        Self { transforms }
    }
}

/// Bilinear inverse-map resampling: for each output pixel, sample the input
/// at an affine source location, filling out-of-frame reads with -1.
fn resample_affine<F: Float>(
    img: &ArrayView3<F>,
    src_of: impl Fn(f64, f64) -> (f64, f64),
) -> Array3<F> {
    let (c, h, w) = img.dim();
    let fill = F::of_f64(FILL);
    let one = F::one();
    let mut out = Array3::from_elem((c, h, w), fill);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src_of(y as f64, x as f64);
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = F::of_f64(sy - y0);
            let fx = F::of_f64(sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let fetch = |yy: isize, xx: isize, ch: usize| -> F {
                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                    img[[ch, yy as usize, xx as usize]]
                } else {
                    fill
                }
            };
            for ch in 0..c {
                let v = fetch(y0, x0, ch) * (one - fy) * (one - fx)
                    + fetch(y0, x0 + 1, ch) * (one - fy) * fx
                    + fetch(y0 + 1, x0, ch) * fy * (one - fx)
                    + fetch(y0 + 1, x0 + 1, ch) * fy * fx;
                out[[ch, y, x]] = v.clamp(F::of_f64(-1.0), F::of_f64(1.0));
            }
        }
    }
    out
}

fn rotate<F: Float>(img: &ArrayView3<F>, degrees: f64) -> Array3<F> {
    let (_, h, w) = img.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    resample_affine(img, |y, x| {
        let dy = y - cy;
        let dx = x - cx;
        (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
    })
}

fn zoom<F: Float>(img: &ArrayView3<F>, factor: f64) -> Array3<F> {
    let (_, h, w) = img.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    resample_affine(img, |y, x| (cy + (y - cy) / factor, cx + (x - cx) / factor))
}

fn hflip<F: Float>(img: &ArrayView3<F>) -> Array3<F> {
    let mut out = img.to_owned();
    out.invert_axis(ndarray::Axis(2));
    out
}

fn crop_resize<F: Float>(img: &ArrayView3<F>, keep: f64, oy: usize, ox: usize) -> Array3<F> {
    let (_, h, w) = img.dim();
    let ch = ((h as f64 * keep).round() as usize).clamp(1, h);
    let cw = ((w as f64 * keep).round() as usize).clamp(1, w);
    let scale_y = if h > 1 { (ch - 1) as f64 / (h - 1) as f64 } else { 0.0 };
    let scale_x = if w > 1 { (cw - 1) as f64 / (w - 1) as f64 } else { 0.0 };
    resample_affine(img, |y, x| (oy as f64 + y * scale_y, ox as f64 + x * scale_x))
}

fn gamma_contrast<F: Float>(img: &ArrayView3<F>, gamma: f64) -> Array3<F> {
    img.mapv(|v| {
        let u = ((v.as_f64() + 1.0) / 2.0).clamp(0.0, 1.0);
        F::of_f64(u.powf(gamma) * 2.0 - 1.0)
    })
}

/// Apply the pipeline's transforms in order, drawing fresh parameters from
/// `rng` for each. Input pixels are expected in [-1, 1].
pub fn augment<F: Float, R: Rng>(
    image: &ArrayView3<F>,
    pipeline: &AugmentationPipeline,
    rng: &mut R,
) -> Result<Array3<F>> {
    let mut img = image.to_owned();
    for t in &pipeline.transforms {
        img = match *t {
            Transform::Rotation { max_degrees } => {
                let a = rng.random_range(-max_degrees..=max_degrees);
                rotate(&img.view(), a)
            }
            Transform::Zoom { max_delta } => {
                let f = rng.random_range(1.0 - max_delta..=1.0 + max_delta);
                zoom(&img.view(), f)
            }
            Transform::HorizontalFlip => {
                if rng.random::<f64>() < 0.5 {
                    hflip(&img.view())
                } else {
                    img
                }
            }
            Transform::RandomCrop { keep_fraction } => {
                let (_, h, w) = img.dim();
                let ch = ((h as f64 * keep_fraction).round() as usize).clamp(1, h);
                let cw = ((w as f64 * keep_fraction).round() as usize).clamp(1, w);
                let oy = rng.random_range(0..=(h - ch));
                let ox = rng.random_range(0..=(w - cw));
                crop_resize(&img.view(), keep_fraction, oy, ox)
            }
            Transform::GammaContrast { low, high } => {
                let g = rng.random_range(low..high);
                gamma_contrast(&img.view(), g)
            }
        };
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((1, h, w), |(_, y, x)| {
            let dy = y as f64 - h as f64 / 2.0;
            let dx = x as f64 - w as f64 / 3.0;
            ((-(dy * dy + dx * dx) / 20.0).exp() * 2.0 - 1.0).clamp(-1.0, 1.0)
        })
    }

    #[test]
    fn identity_parameters_preserve_image() {
        let img = blob(28, 28);
        let r = rotate(&img.view(), 0.0);
        let z = zoom(&img.view(), 1.0);
        let c = crop_resize(&img.view(), 1.0, 0, 0);
        for (a, b) in img.iter().zip(r.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in img.iter().zip(z.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in img.iter().zip(c.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let img = blob(16, 16);
        let back = hflip(&hflip(&img.view()).view());
        assert_eq!(img, back);
    }

    #[test]
    fn rotation_round_trip_small_error() {
        let img = blob(28, 28);
        let there = rotate(&img.view(), 10.0);
        let back = rotate(&there.view(), -10.0);
        let mae: f64 =
            img.iter().zip(back.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / img.len() as f64;
        assert!(mae < 0.05, "round-trip MAE {mae}");
    }

    #[test]
    fn outputs_stay_in_range_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in DatasetKind::all() {
            let pipeline = AugmentationPipeline::for_dataset(kind);
            for _ in 0..50 {
                let img = blob(28, 28);
                let out = augment(&img.view(), &pipeline, &mut rng).unwrap();
                assert_eq!(out.dim(), img.dim());
                assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn gamma_preserves_range_endpoints() {
        let img = blob(8, 8);
        let out = gamma_contrast(&img.view(), 3.7);
        assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
        // Endpoints are fixed points of the gamma curve.
        let mut ends = Array3::<f64>::zeros((1, 1, 2));
        ends[[0, 0, 0]] = -1.0;
        ends[[0, 0, 1]] = 1.0;
        let mapped = gamma_contrast(&ends.view(), 0.4);
        assert!((mapped[[0, 0, 0]] + 1.0).abs() < 1e-6);
        assert!((mapped[[0, 0, 1]] - 1.0).abs() < 1e-6);
    }
}
