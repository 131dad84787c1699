//! Small convolutional classifier used only for measurement: two
//! convolution stages (ReLU + 2x2 max pool after each) and two FC layers.

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::nn::ops::{log_softmax_rows, softmax_rows};
use crate::nn::{relu, relu_grad, Adam, Conv2d, Linear, MaxPool2, Param};
use ndarray::{Array2, Array4, ArrayView4, Axis, Ix2, Ix4, s};
use rand::seq::SliceRandom;
use rand::Rng;

const CONV1_CH: usize = 16;
const CONV2_CH: usize = 32;
const FC_WIDTH: usize = 128;
const INIT_STD: f64 = 0.05;
const LR: f64 = 1e-3;
const BATCH: usize = 128;

/// Trained classifier parameters plus the recorded validation accuracy.
pub struct ClassifierState {
    conv1: Conv2d<f32>,
    conv2: Conv2d<f32>,
    fc1: Linear<f32>,
    fc2: Linear<f32>,
    pub classes: usize,
    pub validation_accuracy: f64,
    side: usize,
    channels: usize,
}

impl ClassifierState {
    fn new<R: Rng>(side: usize, channels: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if side % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "classifier needs a side divisible by 4, got {side}"
            )));
        }
        let quarter = side / 4;
        Ok(Self {
            conv1: Conv2d::new(channels, CONV1_CH, 3, 1, 1, INIT_STD, rng),
            conv2: Conv2d::new(CONV1_CH, CONV2_CH, 3, 1, 1, INIT_STD, rng),
            fc1: Linear::new(CONV2_CH * quarter * quarter, FC_WIDTH, INIT_STD, rng),
            fc2: Linear::new(FC_WIDTH, classes, INIT_STD, rng),
            classes,
            validation_accuracy: 0.0,
            side,
            channels,
        })
    }

    fn logits_eval(&self, images: &ArrayView4<f32>) -> Array2<f32> {
        let n = images.dim().0;
        let quarter = self.side / 4;
        let h1 = self.conv1.forward_eval(images);
        let a1 = relu(&h1.view().into_dyn()).into_dimensionality::<Ix4>().unwrap();
        let (p1, _) = MaxPool2::forward(&a1.view());
        let h2 = self.conv2.forward_eval(&p1.view());
        let a2 = relu(&h2.view().into_dyn()).into_dimensionality::<Ix4>().unwrap();
        let (p2, _) = MaxPool2::forward(&a2.view());
        let flat = p2
            .to_shape((n, CONV2_CH * quarter * quarter))
            .unwrap()
            .to_owned();
        let h3 = self.fc1.forward_eval(&flat.view());
        let a3 = relu(&h3.view().into_dyn()).into_dimensionality::<Ix2>().unwrap();
        self.fc2.forward_eval(&a3.view())
    }

    /// Argmax class per image.
    pub fn classify(&self, images: &ArrayView4<f32>) -> Vec<usize> {
        let logits = self.logits_eval(images);
        logits
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Softmax probabilities per image.
    pub fn posteriors(&self, images: &ArrayView4<f32>) -> Array2<f32> {
        softmax_rows(&self.logits_eval(images).view())
    }

    /// One SGD step on a batch; returns the batch cross-entropy.
    fn train_batch(&mut self, images: &ArrayView4<f32>, labels: &[usize], opt: &mut Adam<f32>) -> f64 {
        let n = images.dim().0;
        let quarter = self.side / 4;

        let (h1, c1) = self.conv1.forward(images);
        let a1 = relu(&h1.view().into_dyn()).into_dimensionality::<Ix4>().unwrap();
        let (p1, m1) = MaxPool2::forward(&a1.view());
        let (h2, c2) = self.conv2.forward(&p1.view());
        let a2 = relu(&h2.view().into_dyn()).into_dimensionality::<Ix4>().unwrap();
        let (p2, m2) = MaxPool2::forward(&a2.view());
        let flat = p2
            .to_shape((n, CONV2_CH * quarter * quarter))
            .unwrap()
            .to_owned();
        let (h3, c3) = self.fc1.forward(&flat.view());
        let a3 = relu(&h3.view().into_dyn()).into_dimensionality::<Ix2>().unwrap();
        let (logits, c4) = self.fc2.forward(&a3.view());

        let log_probs = log_softmax_rows(&logits.view());
        let mut loss = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            loss -= log_probs[[i, y]] as f64;
        }
        loss /= n as f64;

        // d cross-entropy / d logits = (softmax - onehot) / n
        let mut dlogits = softmax_rows(&logits.view());
        for (i, &y) in labels.iter().enumerate() {
            dlogits[[i, y]] -= 1.0;
        }
        dlogits.mapv_inplace(|v| v / n as f32);

        self.conv1.weight.zero_grad();
        self.conv1.bias.zero_grad();
        self.conv2.weight.zero_grad();
        self.conv2.bias.zero_grad();
        for (_, p) in self.fc1.params_mut() {
            p.zero_grad();
        }
        for (_, p) in self.fc2.params_mut() {
            p.zero_grad();
        }

        let da3 = self.fc2.backward(&c4, &dlogits.view());
        let dh3 = relu_grad(&da3.view().into_dyn(), &h3.view().into_dyn())
            .into_dimensionality::<Ix2>()
            .unwrap();
        let dflat = self.fc1.backward(&c3, &dh3.view());
        let dp2 = dflat
            .to_shape((n, CONV2_CH, quarter, quarter))
            .unwrap()
            .to_owned();
        let da2 = MaxPool2::backward(&m2, &dp2.view());
        let dh2 = relu_grad(&da2.view().into_dyn(), &h2.view().into_dyn())
            .into_dimensionality::<Ix4>()
            .unwrap();
        let dp1 = self.conv2.backward(&c2, &dh2.view());
        let da1 = MaxPool2::backward(&m1, &dp1.view());
        let dh1 = relu_grad(&da1.view().into_dyn(), &h1.view().into_dyn())
            .into_dimensionality::<Ix4>()
            .unwrap();
        self.conv1.backward(&c1, &dh1.view());

        let mut params: Vec<&mut Param<f32>> = Vec::new();
        params.push(&mut self.conv1.weight);
        params.push(&mut self.conv1.bias);
        params.push(&mut self.conv2.weight);
        params.push(&mut self.conv2.bias);
        params.push(&mut self.fc1.weight);
        params.push(&mut self.fc1.bias);
        params.push(&mut self.fc2.weight);
        params.push(&mut self.fc2.bias);
        opt.step(&mut params);
        loss
    }

    fn accuracy(&self, data: &LabeledImageSet) -> f64 {
        let mut correct = 0usize;
        for start in (0..data.len()).step_by(512) {
            let end = (start + 512).min(data.len());
            let batch = data.images.slice(s![start..end, .., .., ..]);
            let preds = self.classify(&batch);
            for (p, &y) in preds.iter().zip(&data.labels[start..end]) {
                if *p == y {
                    correct += 1;
                }
            }
        }
        correct as f64 / data.len() as f64
    }
}

/// Train on a stratified 80% split, record accuracy on the held-out 20%.
/// Errors if any class is absent.
pub fn train_eval_classifier<R: Rng>(
    dataset: &LabeledImageSet,
    epochs: usize,
    rng: &mut R,
) -> Result<ClassifierState> {
    let counts = dataset.class_counts();
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InsufficientData(format!(
            "class {missing} has no instances"
        )));
    }
    let (_, c, h, w) = dataset.images.dim();
    if h != w {
        return Err(Error::InvalidConfig("classifier expects square images".into()));
    }
    let (train, val) = dataset.split_80_20(rng);
    let mut clf = ClassifierState::new(h, c, dataset.num_classes, rng)?;
    let mut opt = Adam::new(LR, (0.9, 0.999), 1e-8);

    let n = train.len();
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for chunk in order.chunks(BATCH) {
            if chunk.len() < 2 {
                continue;
            }
            let (_, cc, hh, ww) = train.images.dim();
            let mut images = Array4::zeros((chunk.len(), cc, hh, ww));
            let mut labels = Vec::with_capacity(chunk.len());
            for (row, &i) in chunk.iter().enumerate() {
                images
                    .index_axis_mut(Axis(0), row)
                    .assign(&train.images.index_axis(Axis(0), i));
                labels.push(train.labels[i]);
            }
            clf.train_batch(&images.view(), &labels, &mut opt);
        }
    }
    clf.validation_accuracy = clf.accuracy(&val);
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two-class toy set: class 0 bright left half, class 1 bright right half.
    fn separable(n_per_class: usize) -> LabeledImageSet {
        let n = n_per_class * 2;
        let mut images = Array4::from_elem((n, 1, 8, 8), -1.0f32);
        let mut labels = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let col_range = if class == 0 { 0..4 } else { 4..8 };
            for y in 0..8 {
                for x in col_range.clone() {
                    images[[i, 0, y, x]] = 1.0 - 0.01 * ((i / 2) % 7) as f32;
                }
            }
            labels.push(class);
        }
        LabeledImageSet::new(images, labels, 2).unwrap()
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let data = separable(40);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clf = train_eval_classifier(&data, 20, &mut rng).unwrap();
        assert_eq!(clf.validation_accuracy, 1.0);
    }

    #[test]
    fn same_seed_same_accuracy() {
        let data = separable(20);
        let a = train_eval_classifier(&data, 5, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap()
            .validation_accuracy;
        let b = train_eval_classifier(&data, 5, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap()
            .validation_accuracy;
        assert_eq!(a, b);
    }

    #[test]
    fn missing_class_rejected() {
        let mut data = separable(10);
        data.num_classes = 3; // class 2 has no instances
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(train_eval_classifier(&data, 1, &mut rng).is_err());
    }
}
