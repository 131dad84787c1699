//! Image-grid and interpolation-sheet emission.

use elastic_infogan::error::{Error, Result};
use elastic_infogan::latent::sample_noise;
use elastic_infogan::model::{Generator, NetworkConfig};
use elastic_infogan::nn::Float;
use image::{GrayImage, Luma};
use ndarray::{Array2, Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Sample a grid of images: row `code` holds `cols` draws from the sampler
/// for that latent category.
pub fn grid_images<S>(
    mut sample: S,
    k: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<Array3<f32>>>>
where
    S: FnMut(usize, &mut ChaCha8Rng) -> Result<Array3<f32>>,
{
    if k == 0 || cols == 0 {
        return Err(Error::InvalidArgument("grid needs k >= 1 and cols >= 1".into()));
    }
    let mut rows = Vec::with_capacity(k);
    for code in 0..k {
        let mut row = Vec::with_capacity(cols);
        for _ in 0..cols {
            row.push(sample(code, rng)?);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Pack grid cells into one grayscale image ([-1, 1] mapped to [0, 255]).
/// Multichannel cells are averaged to gray.
pub fn encode_grid(cells: &[Vec<Array3<f32>>]) -> Result<GrayImage> {
    let rows = cells.len();
    if rows == 0 || cells[0].is_empty() {
        return Err(Error::EmptyInput("grid cells".into()));
    }
    let cols = cells[0].len();
    let (c, h, w) = cells[0][0].dim();
    let mut img = GrayImage::new((cols * w) as u32, (rows * h) as u32);
    for (ri, row) in cells.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::ShapeMismatch("ragged grid".into()));
        }
        for (ci, cell) in row.iter().enumerate() {
            if cell.dim() != (c, h, w) {
                return Err(Error::ShapeMismatch("grid cell size mismatch".into()));
            }
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.0f32;
                    for ch in 0..c {
                        v += cell[[ch, y, x]];
                    }
                    v /= c as f32;
                    let px = (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8;
                    img.put_pixel((ci * w + x) as u32, (ri * h + y) as u32, Luma([px]));
                }
            }
        }
    }
    Ok(img)
}

fn single_image<F: Float>(images: &Array4<F>) -> Array3<f32> {
    images
        .index_axis(Axis(0), 0)
        .mapv(|v| v.as_f64() as f32)
        .to_owned()
}

/// One generation conditioned on a hard one-hot code: fresh noise, zeroed
/// continuous codes.
pub fn sample_conditioned<F: Float>(
    gen: &Generator<F>,
    net: &NetworkConfig,
    code: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f32>> {
    let mut input = Array2::<F>::zeros((1, net.gen_input_dim()));
    let z = sample_noise::<F, _>(net.noise_dim, rng);
    input.slice_mut(ndarray::s![0, ..net.noise_dim]).assign(&z);
    input[[0, net.noise_dim + code]] = F::one();
    let images = gen.forward_eval(&input.view())?;
    Ok(single_image(&images))
}

/// k x cols grid of one-hot-conditioned samples, written as a PNG.
pub fn emit_grid<F: Float>(
    gen: &Generator<F>,
    net: &NetworkConfig,
    cols: usize,
    rng: &mut ChaCha8Rng,
    path: &Path,
) -> Result<()> {
    let cells = grid_images(
        |code, rng| sample_conditioned(gen, net, code, rng),
        net.code_dim,
        cols,
        rng,
    )?;
    let img = encode_grid(&cells)?;
    img.save(path)
        .map_err(|e| Error::InvalidArgument(format!("failed to write {}: {e}", path.display())))?;
    Ok(())
}

/// Horizontal strip varying one continuous code over [-1, 1] with noise and
/// the categorical code fixed; `steps = 1` pins the code at -1.
pub fn emit_interpolation<F: Float>(
    gen: &Generator<F>,
    net: &NetworkConfig,
    code: usize,
    cont_dim: usize,
    steps: usize,
    rng: &mut ChaCha8Rng,
    path: &Path,
) -> Result<()> {
    if net.continuous_dim == 0 {
        return Err(Error::InvalidArgument(
            "checkpoint has no continuous codes (m = 0)".into(),
        ));
    }
    if cont_dim >= net.continuous_dim {
        return Err(Error::InvalidArgument(format!(
            "continuous dim {cont_dim} out of range (m = {})",
            net.continuous_dim
        )));
    }
    if code >= net.code_dim || steps == 0 {
        return Err(Error::InvalidArgument("bad code index or step count".into()));
    }
    let z = sample_noise::<F, _>(net.noise_dim, rng);
    let mut row = Vec::with_capacity(steps);
    for s in 0..steps {
        let r = if steps == 1 {
            -1.0
        } else {
            -1.0 + 2.0 * s as f64 / (steps - 1) as f64
        };
        let mut input = Array2::<F>::zeros((1, net.gen_input_dim()));
        input.slice_mut(ndarray::s![0, ..net.noise_dim]).assign(&z);
        input[[0, net.noise_dim + code]] = F::one();
        input[[0, net.noise_dim + net.code_dim + cont_dim]] = F::of_f64(r);
        let images = gen.forward_eval(&input.view())?;
        row.push(single_image(&images));
    }
    let img = encode_grid(&[row])?;
    img.save(path)
        .map_err(|e| Error::InvalidArgument(format!("failed to write {}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Stub generator that stamps the conditioning code into the pixels.
    fn stub(code: usize, _rng: &mut ChaCha8Rng) -> Result<Array3<f32>> {
        Ok(Array3::from_elem((1, 4, 4), code as f32 / 10.0))
    }

    #[test]
    fn grid_rows_use_their_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cells = grid_images(stub, 10, 3, &mut rng).unwrap();
        assert_eq!(cells.len(), 10);
        for (code, row) in cells.iter().enumerate() {
            assert_eq!(row.len(), 3);
            for cell in row {
                assert!(cell.iter().all(|&v| (v - code as f32 / 10.0).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn encoded_grid_has_expected_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cells = grid_images(
            |_, _| Ok(Array3::zeros((1, 28, 28))),
            10,
            10,
            &mut rng,
        )
        .unwrap();
        let img = encode_grid(&cells).unwrap();
        assert_eq!((img.width(), img.height()), (280, 280));
    }

    #[test]
    fn encoding_is_deterministic() {
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let cells = grid_images(stub, 4, 2, &mut rng).unwrap();
            let img = encode_grid(&cells).unwrap();
            let mut bytes = Vec::new();
            img.write_to(
                &mut std::io::Cursor::new(&mut bytes),
                image::ImageFormat::Png,
            )
            .unwrap();
            bytes
        };
        assert_eq!(make(), make());
    }
}
