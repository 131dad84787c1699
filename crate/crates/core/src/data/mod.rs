//! Dataset ingestion, imbalanced subsampling, augmentation, and the
//! contrastive batch layout.

pub mod augment;
pub mod idx;
pub mod splits;

pub use augment::{augment, AugmentationPipeline, Transform};
pub use splits::{
    expected_false_negative, format_split_file, generate_split, load_canonical_splits,
    parse_split_file, DatasetKind, ImbalancedSplit, SplitFile, SplitSource,
};

use crate::error::{Error, Result};
use ndarray::{Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::Path;

/// Labeled images in [-1, 1]; labels are consumed only by subsampling and
/// evaluation, never by the generative model.
#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    pub images: Array4<f32>, // (n, c, h, w)
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledImageSet {
    pub fn new(images: Array4<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.dim().0 != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} images vs {} labels",
                images.dim().0,
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::InvalidArgument(
                "label outside [0, num_classes)".into(),
            ));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.images.index_axis(Axis(0), i)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Select a subset by index list.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let (_, c, h, w) = self.images.dim();
        let mut images = Array4::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            images.index_axis_mut(Axis(0), row).assign(&self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            images,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Stratified 80/20 split per class (deterministic given the rng).
    pub fn split_80_20<R: Rng>(&self, rng: &mut R) -> (Self, Self) {
        let mut train_idx = Vec::new();
        let mut val_idx = Vec::new();
        for class in 0..self.num_classes {
            let mut idx: Vec<usize> = (0..self.len())
                .filter(|&i| self.labels[i] == class)
                .collect();
            idx.shuffle(rng);
            let n_train = (idx.len() * 4) / 5;
            train_idx.extend_from_slice(&idx[..n_train]);
            val_idx.extend_from_slice(&idx[n_train..]);
        }
        train_idx.shuffle(rng);
        val_idx.shuffle(rng);
        (self.subset(&train_idx), self.subset(&val_idx))
    }
}

/// Which half of the MNIST archives to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

/// Load the standard MNIST binary archives (plain or .gz) from a directory,
/// mapping pixels to [-1, 1].
pub fn load_mnist(dir: &Path, which: MnistSplit) -> Result<LabeledImageSet> {
    let (img_stem, lbl_stem) = match which {
        MnistSplit::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        MnistSplit::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    let imgs = idx::decode_idx_images(&idx::open_idx_file(dir, img_stem)?)?;
    let labels = idx::decode_idx_labels(&idx::open_idx_file(dir, lbl_stem)?)?;
    if imgs.n != labels.len() {
        return Err(Error::IdxFormat(format!(
            "{} images vs {} labels",
            imgs.n,
            labels.len()
        )));
    }
    let mut images = Array4::<f32>::zeros((imgs.n, 1, imgs.h, imgs.w));
    images
        .as_slice_mut()
        .unwrap()
        .iter_mut()
        .zip(imgs.data.iter())
        .for_each(|(dst, &src)| *dst = src as f32 / 127.5 - 1.0);
    let labels: Vec<usize> = labels.into_iter().map(|l| l as usize).collect();
    LabeledImageSet::new(images, labels, 10)
}

/// Label-stratified subsampling: class `i` contributes
/// `floor(proportions[i] * base_size)` instances drawn without replacement.
/// The result is shuffled with the same rng.
pub fn subsample<R: Rng>(
    dataset: &LabeledImageSet,
    split: &ImbalancedSplit,
    base_size: usize,
    rng: &mut R,
) -> Result<LabeledImageSet> {
    if split.k() != dataset.num_classes {
        return Err(Error::ShapeMismatch(format!(
            "split k = {} vs dataset classes = {}",
            split.k(),
            dataset.num_classes
        )));
    }
    let counts = dataset.class_counts();
    let mut chosen = Vec::new();
    for (class, &p) in split.proportions.iter().enumerate() {
        let want = (p * base_size as f64).floor() as usize;
        if want > counts[class] {
            return Err(Error::InsufficientData(format!(
                "class {class}: need {want} instances, have {}",
                counts[class]
            )));
        }
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        idx.shuffle(rng);
        chosen.extend_from_slice(&idx[..want]);
    }
    chosen.shuffle(rng);
    Ok(dataset.subset(&chosen))
}

/// Build the 2N contrastive layout: rows 0..N are the originals bit-exact,
/// rows N..2N their augmented views; `pair_index` links each row to its
/// positive partner.
pub fn make_contrastive_batch<F: crate::nn::Float, R: Rng>(
    images: &Array4<F>,
    pipeline: &AugmentationPipeline,
    rng: &mut R,
) -> Result<(Array4<F>, Vec<usize>)> {
    let (n, c, h, w) = images.dim();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive batch needs N >= 2, got {n}"
        )));
    }
    let mut out = Array4::zeros((2 * n, c, h, w));
    out.slice_mut(ndarray::s![..n, .., .., ..]).assign(images);
    for i in 0..n {
        let aug = augment(&images.index_axis(Axis(0), i), pipeline, rng)?;
        out.index_axis_mut(Axis(0), n + i).assign(&aug);
    }
    let pair_index: Vec<usize> = (0..2 * n)
        .map(|i| if i < n { i + n } else { i - n })
        .collect();
    Ok((out, pair_index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_set(per_class: &[usize]) -> LabeledImageSet {
        let n: usize = per_class.iter().sum();
        let mut labels = Vec::new();
        for (class, &cnt) in per_class.iter().enumerate() {
            labels.extend(std::iter::repeat(class).take(cnt));
        }
        let images = Array4::from_shape_fn((n, 1, 4, 4), |(i, _, y, x)| {
            ((i * 16 + y * 4 + x) as f32 * 0.001).sin()
        });
        LabeledImageSet::new(images, labels, per_class.len()).unwrap()
    }

    #[test]
    fn subsample_floor_counts() {
        let data = toy_set(&[200, 200]);
        let split =
            ImbalancedSplit::new(vec![0.8, 0.2], SplitSource::Generated { seed: 0 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sub = subsample(&data, &split, 100, &mut rng).unwrap();
        assert_eq!(sub.class_counts(), vec![80, 20]);

        let uniform =
            ImbalancedSplit::new(vec![0.5, 0.5], SplitSource::Generated { seed: 0 }).unwrap();
        let sub = subsample(&data, &uniform, 100, &mut rng).unwrap();
        assert_eq!(sub.class_counts(), vec![50, 50]);
    }

    #[test]
    fn subsample_rejects_insufficient_classes() {
        let data = toy_set(&[10, 200]);
        let split =
            ImbalancedSplit::new(vec![0.8, 0.2], SplitSource::Generated { seed: 0 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(subsample(&data, &split, 100, &mut rng).is_err());
    }

    #[test]
    fn subsample_deterministic_per_seed() {
        let data = toy_set(&[50, 50, 50]);
        let split =
            ImbalancedSplit::new(vec![0.5, 0.3, 0.2], SplitSource::Generated { seed: 0 }).unwrap();
        let a = subsample(&data, &split, 60, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = subsample(&data, &split, 60, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn contrastive_batch_layout() {
        let data = toy_set(&[2, 2]);
        let pipeline = AugmentationPipeline::for_dataset(DatasetKind::Mnist);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (batch, pairs) = make_contrastive_batch(&data.images, &pipeline, &mut rng).unwrap();
        assert_eq!(batch.dim().0, 8);
        assert_eq!(pairs, vec![4, 5, 6, 7, 0, 1, 2, 3]);
        // Originals occupy the first N rows bit-exactly.
        for i in 0..4 {
            assert_eq!(
                batch.index_axis(Axis(0), i),
                data.images.index_axis(Axis(0), i)
            );
        }
        // Involution without fixed points.
        for (i, &j) in pairs.iter().enumerate() {
            assert_ne!(i, j);
            assert_eq!(pairs[j], i);
        }

        let single = toy_set(&[1]);
        assert!(make_contrastive_batch(&single.images, &pipeline, &mut rng).is_err());
    }

    #[test]
    fn stratified_split_is_80_20_per_class() {
        let data = toy_set(&[50, 100]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (train, val) = data.split_80_20(&mut rng);
        assert_eq!(train.class_counts(), vec![40, 80]);
        assert_eq!(val.class_counts(), vec![10, 20]);
    }
}
