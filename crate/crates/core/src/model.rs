//! Generator and the shared discriminator/recognition pair.
//!
//! The generator maps [noise | code | continuous] through two FC stages
//! into a spatial map and two stride-2 upconvolutions, tanh output. The
//! trunk (two stride-2 convolutions plus an FC stage, leaky ReLU 0.1) is
//! shared by a one-unit discriminator head and a recognition head whose
//! penultimate activation doubles as the contrastive feature space.

use crate::error::{Error, Result};
use crate::nn::ops::softmax_rows;
use crate::nn::{
    self, leaky_relu, leaky_relu_grad, relu, relu_grad, tanh, tanh_grad, BatchNorm1d, BatchNorm2d,
    Conv2d, ConvTranspose2d, Float, Linear, Param,
};
use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis, Ix2, Ix4};
use rand::Rng;
use serde::{Deserialize, Serialize};

const LEAKY_SLOPE: f64 = 0.1;
const WEIGHT_STD: f64 = 0.02;

/// Static shape description of the desk-scale networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub image_side: usize,
    pub image_channels: usize,
    /// Noise width d_z.
    pub noise_dim: usize,
    /// Number of latent categories k.
    pub code_dim: usize,
    /// Continuous code count m (0 disables the continuous head).
    pub continuous_dim: usize,
    /// Width of the recognition head's penultimate representation.
    pub feature_dim: usize,
    /// Generator first FC width.
    pub gen_fc: usize,
    /// Generator channels at the (side/4, side/2) stages.
    pub gen_channels: (usize, usize),
    /// Trunk channels after the first and second convolution.
    pub trunk_channels: (usize, usize),
    /// Trunk FC width (the representation both heads read).
    pub trunk_fc: usize,
}

impl NetworkConfig {
    /// 28x28 configuration with the reference widths.
    pub fn mnist() -> Self {
        Self {
            image_side: 28,
            image_channels: 1,
            noise_dim: 64,
            code_dim: 10,
            continuous_dim: 0,
            feature_dim: 128,
            gen_fc: 1024,
            gen_channels: (128, 64),
            trunk_channels: (64, 128),
            trunk_fc: 1024,
        }
    }

    /// Same topology at a quarter of the widths; used where wall-clock
    /// budget matters more than sample fidelity.
    pub fn mnist_desk() -> Self {
        Self {
            feature_dim: 64,
            gen_fc: 256,
            gen_channels: (32, 16),
            trunk_channels: (16, 32),
            trunk_fc: 256,
            ..Self::mnist()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side < 4 || self.image_side % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "image side must be a positive multiple of 4, got {}",
                self.image_side
            )));
        }
        let positive = [
            self.image_channels,
            self.noise_dim,
            self.feature_dim,
            self.gen_fc,
            self.gen_channels.0,
            self.gen_channels.1,
            self.trunk_channels.0,
            self.trunk_channels.1,
            self.trunk_fc,
        ];
        if positive.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("network widths must be positive".into()));
        }
        if self.code_dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "code_dim must be at least 2, got {}",
                self.code_dim
            )));
        }
        Ok(())
    }

    /// Generator input width: d_z + k + m.
    pub fn gen_input_dim(&self) -> usize {
        self.noise_dim + self.code_dim + self.continuous_dim
    }

    /// Recognition output width: k categorical logits plus (mean, logvar)
    /// per continuous code.
    pub fn q_output_dim(&self) -> usize {
        self.code_dim + 2 * self.continuous_dim
    }

    fn base_side(&self) -> usize {
        self.image_side / 4
    }
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Generator<F> {
    pub fc1: Linear<F>,
    pub bn1: BatchNorm1d<F>,
    pub fc2: Linear<F>,
    pub bn2: BatchNorm1d<F>,
    pub up1: ConvTranspose2d<F>,
    pub bn3: BatchNorm2d<F>,
    pub up2: ConvTranspose2d<F>,
    cfg: NetworkConfig,
}

pub struct GeneratorCache<F> {
    fc1: nn::linear::LinearCache<F>,
    bn1: nn::norm::BatchNorm1dCache<F>,
    pre1: Array2<F>,
    fc2: nn::linear::LinearCache<F>,
    bn2: nn::norm::BatchNorm1dCache<F>,
    pre2: Array2<F>,
    up1: nn::conv::ConvTranspose2dCache<F>,
    bn3: nn::norm::BatchNorm2dCache<F>,
    pre3: Array4<F>,
    up2: nn::conv::ConvTranspose2dCache<F>,
    out: Array4<F>,
}

impl<F: Float> Generator<F> {
    fn new<R: Rng>(cfg: &NetworkConfig, rng: &mut R) -> Self {
        let s = cfg.base_side();
        let (ch_low, ch_mid) = cfg.gen_channels;
        Self {
            fc1: Linear::new(cfg.gen_input_dim(), cfg.gen_fc, WEIGHT_STD, rng),
            bn1: BatchNorm1d::new(cfg.gen_fc),
            fc2: Linear::new(cfg.gen_fc, ch_low * s * s, WEIGHT_STD, rng),
            bn2: BatchNorm1d::new(ch_low * s * s),
            up1: ConvTranspose2d::new(ch_low, ch_mid, 4, 2, 1, WEIGHT_STD, rng),
            bn3: BatchNorm2d::new(ch_mid),
            up2: ConvTranspose2d::new(ch_mid, cfg.image_channels, 4, 2, 1, WEIGHT_STD, rng),
            cfg: cfg.clone(),
        }
    }

    fn check_input(&self, input: &ArrayView2<F>) -> Result<()> {
        if input.ncols() != self.cfg.gen_input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "generator input width {} vs expected {}",
                input.ncols(),
                self.cfg.gen_input_dim()
            )));
        }
        Ok(())
    }

    /// Training-mode forward (batch-norm batch statistics, running stats
    /// updated); returns images in [-1, 1] and the backward cache.
    pub fn forward_train(
        &mut self,
        input: &ArrayView2<F>,
    ) -> Result<(Array4<F>, GeneratorCache<F>)> {
        self.check_input(input)?;
        let s = self.cfg.base_side();
        let (ch_low, _) = self.cfg.gen_channels;
        let n = input.nrows();

        let (h1, fc1) = self.fc1.forward(input);
        let (h1n, bn1) = self.bn1.forward_train(&h1.view());
        let a1 = relu(&h1n.view().into_dyn())
            .into_dimensionality::<Ix2>()
            .unwrap();

        let (h2, fc2) = self.fc2.forward(&a1.view());
        let (h2n, bn2) = self.bn2.forward_train(&h2.view());
        let a2 = relu(&h2n.view().into_dyn())
            .into_dimensionality::<Ix2>()
            .unwrap();

        let spatial = a2.to_shape((n, ch_low, s, s)).unwrap().to_owned();
        let (h3, up1) = self.up1.forward(&spatial.view());
        let (h3n, bn3) = self.bn3.forward_train(&h3.view());
        let a3 = relu(&h3n.view().into_dyn())
            .into_dimensionality::<Ix4>()
            .unwrap();

        let (h4, up2) = self.up2.forward(&a3.view());
        let out = tanh(&h4.view().into_dyn())
            .into_dimensionality::<Ix4>()
            .unwrap();

        let cache = GeneratorCache {
            fc1,
            bn1,
            pre1: h1n,
            fc2,
            bn2,
            pre2: h2n,
            up1,
            bn3,
            pre3: h3n,
            up2,
            out: out.clone(),
        };
        Ok((out, cache))
    }

    /// Inference-mode forward using batch-norm running statistics; output
    /// is independent of batch composition.
    pub fn forward_eval(&self, input: &ArrayView2<F>) -> Result<Array4<F>> {
        self.check_input(input)?;
        let s = self.cfg.base_side();
        let (ch_low, _) = self.cfg.gen_channels;
        let n = input.nrows();

        let h1 = self.fc1.forward_eval(input);
        let a1 = relu(&self.bn1.forward_eval(&h1.view()).view().into_dyn());
        let h2 = self
            .fc2
            .forward_eval(&a1.view().into_dimensionality::<Ix2>().unwrap());
        let a2 = relu(&self.bn2.forward_eval(&h2.view()).view().into_dyn())
            .into_dimensionality::<Ix2>()
            .unwrap();
        let spatial = a2.to_shape((n, ch_low, s, s)).unwrap().to_owned();
        let h3 = self.up1.forward_eval(&spatial.view());
        let a3 = relu(&self.bn3.forward_eval(&h3.view()).view().into_dyn())
            .into_dimensionality::<Ix4>()
            .unwrap();
        let h4 = self.up2.forward_eval(&a3.view());
        Ok(tanh(&h4.view().into_dyn())
            .into_dimensionality::<Ix4>()
            .unwrap())
    }

    /// Backward through the training-mode graph; accumulates parameter
    /// gradients and returns dL/dinput (columns follow [noise|code|cont]).
    pub fn backward(&mut self, cache: &GeneratorCache<F>, dout: &ArrayView4<F>) -> Array2<F> {
        let n = dout.dim().0;
        let s = self.cfg.base_side();
        let (ch_low, _) = self.cfg.gen_channels;

        let dh4 = tanh_grad(&dout.view().into_dyn(), &cache.out.view().into_dyn())
            .into_dimensionality::<Ix4>()
            .unwrap();
        let da3 = self.up2.backward(&cache.up2, &dh4.view());
        let dh3n = relu_grad(&da3.view().into_dyn(), &cache.pre3.view().into_dyn())
            .into_dimensionality::<Ix4>()
            .unwrap();
        let dh3 = self.bn3.backward(&cache.bn3, &dh3n.view());
        let dspatial = self.up1.backward(&cache.up1, &dh3.view());

        let da2 = dspatial.to_shape((n, ch_low * s * s)).unwrap().to_owned();
        let dh2n = relu_grad(&da2.view().into_dyn(), &cache.pre2.view().into_dyn())
            .into_dimensionality::<Ix2>()
            .unwrap();
        let dh2 = self.bn2.backward(&cache.bn2, &dh2n.view());
        let da1 = self.fc2.backward(&cache.fc2, &dh2.view());

        let dh1n = relu_grad(&da1.view().into_dyn(), &cache.pre1.view().into_dyn())
            .into_dimensionality::<Ix2>()
            .unwrap();
        let dh1 = self.bn1.backward(&cache.bn1, &dh1n.view());
        self.fc1.backward(&cache.fc1, &dh1.view())
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        let mut out = Vec::new();
        for (name, p) in self.fc1.params_mut() {
            out.push((format!("fc1.{name}"), p));
        }
        for (name, p) in self.bn1.params_mut() {
            out.push((format!("bn1.{name}"), p));
        }
        for (name, p) in self.fc2.params_mut() {
            out.push((format!("fc2.{name}"), p));
        }
        for (name, p) in self.bn2.params_mut() {
            out.push((format!("bn2.{name}"), p));
        }
        for (name, p) in self.up1.params_mut() {
            out.push((format!("up1.{name}"), p));
        }
        for (name, p) in self.bn3.params_mut() {
            out.push((format!("bn3.{name}"), p));
        }
        for (name, p) in self.up2.params_mut() {
            out.push((format!("up2.{name}"), p));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Array1<F>)> {
        let mut out = Vec::new();
        for (name, b) in self.bn1.buffers_mut() {
            out.push((format!("bn1.{name}"), b));
        }
        for (name, b) in self.bn2.buffers_mut() {
            out.push((format!("bn2.{name}"), b));
        }
        for (name, b) in self.bn3.buffers_mut() {
            out.push((format!("bn3.{name}"), b));
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }
}

// ---------------------------------------------------------------------------
// Shared trunk
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Trunk<F> {
    pub conv1: Conv2d<F>,
    pub conv2: Conv2d<F>,
    pub bn2: BatchNorm2d<F>,
    pub fc: Linear<F>,
    pub bn3: BatchNorm1d<F>,
    cfg: NetworkConfig,
}

pub struct TrunkCache<F> {
    conv1: nn::conv::Conv2dCache<F>,
    pre1: Array4<F>,
    conv2: nn::conv::Conv2dCache<F>,
    bn2: nn::norm::BatchNorm2dCache<F>,
    pre2: Array4<F>,
    fc: nn::linear::LinearCache<F>,
    bn3: nn::norm::BatchNorm1dCache<F>,
    pre3: Array2<F>,
    n: usize,
}

impl<F: Float> Trunk<F> {
    fn new<R: Rng>(cfg: &NetworkConfig, rng: &mut R) -> Self {
        let (t1, t2) = cfg.trunk_channels;
        let s = cfg.base_side();
        Self {
            conv1: Conv2d::new(cfg.image_channels, t1, 4, 2, 1, WEIGHT_STD, rng),
            conv2: Conv2d::new(t1, t2, 4, 2, 1, WEIGHT_STD, rng),
            bn2: BatchNorm2d::new(t2),
            fc: Linear::new(t2 * s * s, cfg.trunk_fc, WEIGHT_STD, rng),
            bn3: BatchNorm1d::new(cfg.trunk_fc),
            cfg: cfg.clone(),
        }
    }

    fn check_input(&self, images: &ArrayView4<F>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if c != self.cfg.image_channels || h != self.cfg.image_side || w != self.cfg.image_side {
            return Err(Error::ShapeMismatch(format!(
                "trunk input ({c}, {h}, {w}) vs configured ({}, {}, {})",
                self.cfg.image_channels, self.cfg.image_side, self.cfg.image_side
            )));
        }
        Ok(())
    }

    pub fn forward_train(
        &mut self,
        images: &ArrayView4<F>,
    ) -> Result<(Array2<F>, TrunkCache<F>)> {
        self.check_input(images)?;
        let slope = F::of_f64(LEAKY_SLOPE);
        let n = images.dim().0;
        let s = self.cfg.base_side();
        let (_, t2) = self.cfg.trunk_channels;

        let (h1, conv1) = self.conv1.forward(images);
        let a1 = leaky_relu(&h1.view().into_dyn(), slope)
            .into_dimensionality::<Ix4>()
            .unwrap();
        let (h2, conv2) = self.conv2.forward(&a1.view());
        let (h2n, bn2) = self.bn2.forward_train(&h2.view());
        let a2 = leaky_relu(&h2n.view().into_dyn(), slope)
            .into_dimensionality::<Ix4>()
            .unwrap();
        let flat = a2.to_shape((n, t2 * s * s)).unwrap().to_owned();
        let (h3, fc) = self.fc.forward(&flat.view());
        let (h3n, bn3) = self.bn3.forward_train(&h3.view());
        let out = leaky_relu(&h3n.view().into_dyn(), slope)
            .into_dimensionality::<Ix2>()
            .unwrap();
        Ok((
            out,
            TrunkCache {
                conv1,
                pre1: h1,
                conv2,
                bn2,
                pre2: h2n,
                fc,
                bn3,
                pre3: h3n,
                n,
            },
        ))
    }

    pub fn forward_eval(&self, images: &ArrayView4<F>) -> Result<Array2<F>> {
        self.check_input(images)?;
        let slope = F::of_f64(LEAKY_SLOPE);
        let n = images.dim().0;
        let s = self.cfg.base_side();
        let (_, t2) = self.cfg.trunk_channels;

        let h1 = self.conv1.forward_eval(images);
        let a1 = leaky_relu(&h1.view().into_dyn(), slope)
            .into_dimensionality::<Ix4>()
            .unwrap();
        let h2 = self.conv2.forward_eval(&a1.view());
        let a2 = leaky_relu(&self.bn2.forward_eval(&h2.view()).view().into_dyn(), slope)
            .into_dimensionality::<Ix4>()
            .unwrap();
        let flat = a2.to_shape((n, t2 * s * s)).unwrap().to_owned();
        let h3 = self.fc.forward_eval(&flat.view());
        Ok(
            leaky_relu(&self.bn3.forward_eval(&h3.view()).view().into_dyn(), slope)
                .into_dimensionality::<Ix2>()
                .unwrap(),
        )
    }

    /// Backward from dL/d(trunk output); returns dL/dimages.
    pub fn backward(&mut self, cache: &TrunkCache<F>, dout: &ArrayView2<F>) -> Array4<F> {
        let slope = F::of_f64(LEAKY_SLOPE);
        let s = self.cfg.base_side();
        let (t1, t2) = self.cfg.trunk_channels;
        let half = self.cfg.image_side / 2;

        let dh3n = leaky_relu_grad(&dout.view().into_dyn(), &cache.pre3.view().into_dyn(), slope)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let dh3 = self.bn3.backward(&cache.bn3, &dh3n.view());
        let dflat = self.fc.backward(&cache.fc, &dh3.view());
        let da2 = dflat.to_shape((cache.n, t2, s, s)).unwrap().to_owned();
        let dh2n = leaky_relu_grad(&da2.view().into_dyn(), &cache.pre2.view().into_dyn(), slope)
            .into_dimensionality::<Ix4>()
            .unwrap();
        let dh2 = self.bn2.backward(&cache.bn2, &dh2n.view());
        let da1 = self.conv2.backward(&cache.conv2, &dh2.view());
        debug_assert_eq!(da1.dim(), (cache.n, t1, half, half));
        let dh1 = leaky_relu_grad(&da1.view().into_dyn(), &cache.pre1.view().into_dyn(), slope)
            .into_dimensionality::<Ix4>()
            .unwrap();
        self.conv1.backward(&cache.conv1, &dh1.view())
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        let mut out = Vec::new();
        for (name, p) in self.conv1.params_mut() {
            out.push((format!("conv1.{name}"), p));
        }
        for (name, p) in self.conv2.params_mut() {
            out.push((format!("conv2.{name}"), p));
        }
        for (name, p) in self.bn2.params_mut() {
            out.push((format!("bn2.{name}"), p));
        }
        for (name, p) in self.fc.params_mut() {
            out.push((format!("fc.{name}"), p));
        }
        for (name, p) in self.bn3.params_mut() {
            out.push((format!("bn3.{name}"), p));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Array1<F>)> {
        let mut out = Vec::new();
        for (name, b) in self.bn2.buffers_mut() {
            out.push((format!("bn2.{name}"), b));
        }
        for (name, b) in self.bn3.buffers_mut() {
            out.push((format!("bn3.{name}"), b));
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

/// Discriminator head: one real/fake score per image.
#[derive(Debug, Clone)]
pub struct DHead<F> {
    pub fc: Linear<F>,
}

pub struct DHeadCache<F>(nn::linear::LinearCache<F>);

impl<F: Float> DHead<F> {
    fn new<R: Rng>(cfg: &NetworkConfig, rng: &mut R) -> Self {
        Self {
            fc: Linear::new(cfg.trunk_fc, 1, WEIGHT_STD, rng),
        }
    }

    pub fn forward(&self, trunk_out: &ArrayView2<F>) -> (Array1<F>, DHeadCache<F>) {
        let (scores, cache) = self.fc.forward(trunk_out);
        (scores.column(0).to_owned(), DHeadCache(cache))
    }

    pub fn forward_eval(&self, trunk_out: &ArrayView2<F>) -> Array1<F> {
        self.fc.forward_eval(trunk_out).column(0).to_owned()
    }

    pub fn backward(&mut self, cache: &DHeadCache<F>, dscores: &ArrayView1<F>) -> Array2<F> {
        let dy = dscores.view().insert_axis(Axis(1)).to_owned();
        self.fc.backward(&cache.0, &dy.view())
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        self.fc
            .params_mut()
            .into_iter()
            .map(|(n, p)| (format!("fc.{n}"), p))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Recognition head output on a batch: categorical logits plus optional
/// factored-Gaussian parameters for the continuous codes.
pub struct QOutput<F> {
    pub logits: Array2<F>,
    pub cont_means: Option<Array2<F>>,
    pub cont_logvars: Option<Array2<F>>,
    /// Penultimate activation (after the leaky ReLU).
    pub features: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct QHead<F> {
    pub fc1: Linear<F>,
    pub bn: BatchNorm1d<F>,
    pub out: Linear<F>,
    code_dim: usize,
    continuous_dim: usize,
}

pub struct QHeadCache<F> {
    fc1: nn::linear::LinearCache<F>,
    bn: nn::norm::BatchNorm1dCache<F>,
    pre: Array2<F>,
    out: nn::linear::LinearCache<F>,
}

impl<F: Float> QHead<F> {
    fn new<R: Rng>(cfg: &NetworkConfig, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(cfg.trunk_fc, cfg.feature_dim, WEIGHT_STD, rng),
            bn: BatchNorm1d::new(cfg.feature_dim),
            out: Linear::new(cfg.feature_dim, cfg.q_output_dim(), WEIGHT_STD, rng),
            code_dim: cfg.code_dim,
            continuous_dim: cfg.continuous_dim,
        }
    }

    fn split_output(&self, raw: Array2<F>, features: Array2<F>) -> QOutput<F> {
        let k = self.code_dim;
        let m = self.continuous_dim;
        let logits = raw.slice(ndarray::s![.., ..k]).to_owned();
        let (cont_means, cont_logvars) = if m > 0 {
            (
                Some(raw.slice(ndarray::s![.., k..k + m]).to_owned()),
                Some(raw.slice(ndarray::s![.., k + m..k + 2 * m]).to_owned()),
            )
        } else {
            (None, None)
        };
        QOutput {
            logits,
            cont_means,
            cont_logvars,
            features,
        }
    }

    pub fn forward_train(
        &mut self,
        trunk_out: &ArrayView2<F>,
    ) -> (QOutput<F>, QHeadCache<F>) {
        let slope = F::of_f64(LEAKY_SLOPE);
        let (h, fc1) = self.fc1.forward(trunk_out);
        let (hn, bn) = self.bn.forward_train(&h.view());
        let features = leaky_relu(&hn.view().into_dyn(), slope)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let (raw, out) = self.out.forward(&features.view());
        (
            self.split_output(raw, features),
            QHeadCache {
                fc1,
                bn,
                pre: hn,
                out,
            },
        )
    }

    pub fn forward_eval(&self, trunk_out: &ArrayView2<F>) -> QOutput<F> {
        let slope = F::of_f64(LEAKY_SLOPE);
        let h = self.fc1.forward_eval(trunk_out);
        let features = leaky_relu(&self.bn.forward_eval(&h.view()).view().into_dyn(), slope)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let raw = self.out.forward_eval(&features.view());
        self.split_output(raw, features)
    }

    /// Backward with independent gradient seeds for the final-layer output
    /// (logits + continuous params, concatenated) and for the penultimate
    /// features; either may be absent. Returns dL/d(trunk output).
    pub fn backward(
        &mut self,
        cache: &QHeadCache<F>,
        d_raw: Option<&ArrayView2<F>>,
        d_features: Option<&ArrayView2<F>>,
    ) -> Array2<F> {
        let slope = F::of_f64(LEAKY_SLOPE);
        let n = cache.pre.nrows();
        let width = cache.pre.ncols();
        let mut dfeat = Array2::<F>::zeros((n, width));
        if let Some(dr) = d_raw {
            dfeat += &self.out.backward(&cache.out, dr);
        }
        if let Some(df) = d_features {
            dfeat += df;
        }
        let dhn = leaky_relu_grad(&dfeat.view().into_dyn(), &cache.pre.view().into_dyn(), slope)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let dh = self.bn.backward(&cache.bn, &dhn.view());
        self.fc1.backward(&cache.fc1, &dh.view())
    }

    /// Assemble the raw output gradient from logits / continuous parts.
    pub fn assemble_raw_grad(
        &self,
        dlogits: &ArrayView2<F>,
        dmeans: Option<&ArrayView2<F>>,
        dlogvars: Option<&ArrayView2<F>>,
    ) -> Array2<F> {
        let n = dlogits.nrows();
        let mut raw = Array2::<F>::zeros((n, self.code_dim + 2 * self.continuous_dim));
        raw.slice_mut(ndarray::s![.., ..self.code_dim]).assign(dlogits);
        if let Some(dm) = dmeans {
            raw.slice_mut(ndarray::s![.., self.code_dim..self.code_dim + self.continuous_dim])
                .assign(dm);
        }
        if let Some(dv) = dlogvars {
            raw.slice_mut(ndarray::s![
                ..,
                self.code_dim + self.continuous_dim..self.code_dim + 2 * self.continuous_dim
            ])
            .assign(dv);
        }
        raw
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        let mut p = Vec::new();
        for (name, param) in self.fc1.params_mut() {
            p.push((format!("fc1.{name}"), param));
        }
        for (name, param) in self.bn.params_mut() {
            p.push((format!("bn.{name}"), param));
        }
        for (name, param) in self.out.params_mut() {
            p.push((format!("out.{name}"), param));
        }
        p
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Array1<F>)> {
        self.bn
            .buffers_mut()
            .into_iter()
            .map(|(n, b)| (format!("bn.{n}"), b))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }
}

// ---------------------------------------------------------------------------
// Construction and the stateless convenience surface
// ---------------------------------------------------------------------------

/// Build all four networks with the documented initialization (weights
/// N(0, 0.02), zero biases, unit batch-norm gains), in a fixed draw order:
/// generator, trunk, discriminator head, recognition head.
pub fn build_networks<F: Float, R: Rng>(
    cfg: &NetworkConfig,
    rng: &mut R,
) -> Result<(Generator<F>, Trunk<F>, DHead<F>, QHead<F>)> {
    cfg.validate()?;
    let gen = Generator::new(cfg, rng);
    let trunk = Trunk::new(cfg, rng);
    let d_head = DHead::new(cfg, rng);
    let q_head = QHead::new(cfg, rng);
    Ok((gen, trunk, d_head, q_head))
}

/// Eval-mode generation from latent inputs.
pub fn generate<F: Float>(
    gen: &Generator<F>,
    input: &crate::latent::LatentBatch<F>,
) -> Result<Array4<F>> {
    gen.forward_eval(&input.generator_input().view())
}

/// Eval-mode real/fake scores.
pub fn discriminate<F: Float>(
    trunk: &Trunk<F>,
    d_head: &DHead<F>,
    images: &ArrayView4<F>,
) -> Result<Array1<F>> {
    Ok(d_head.forward_eval(&trunk.forward_eval(images)?.view()))
}

/// Eval-mode categorical posterior rows (softmax over recognition logits).
pub fn q_posterior<F: Float>(
    trunk: &Trunk<F>,
    q_head: &QHead<F>,
    images: &ArrayView4<F>,
) -> Result<Array2<F>> {
    let out = q_head.forward_eval(&trunk.forward_eval(images)?.view());
    Ok(softmax_rows(&out.logits.view()))
}

/// Eval-mode penultimate recognition features (post leaky ReLU).
pub fn q_features<F: Float>(
    trunk: &Trunk<F>,
    q_head: &QHead<F>,
    images: &ArrayView4<F>,
) -> Result<Array2<F>> {
    let out = q_head.forward_eval(&trunk.forward_eval(images)?.view());
    Ok(out.features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentBatch;
    use crate::nn::{finite_difference, max_relative_error};
    use ndarray::{Array2, Array4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig {
            image_side: 8,
            image_channels: 1,
            noise_dim: 3,
            code_dim: 2,
            continuous_dim: 0,
            feature_dim: 5,
            gen_fc: 6,
            gen_channels: (4, 3),
            trunk_channels: (3, 4),
            trunk_fc: 7,
        }
    }

    #[test]
    fn mnist_config_shapes() {
        let cfg = NetworkConfig::mnist();
        assert_eq!(cfg.gen_input_dim(), 74);
        assert_eq!(cfg.q_output_dim(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (gen, trunk, d_head, q_head) = build_networks::<f32, _>(&cfg, &mut rng).unwrap();
        let batch = LatentBatch {
            codes: Array2::from_elem((4, 10), 0.1f32),
            noise: Array2::zeros((4, 64)),
            continuous: None,
        };
        let imgs = generate(&gen, &batch).unwrap();
        assert_eq!(imgs.dim(), (4, 1, 28, 28));
        assert!(imgs.iter().all(|&v| (-1.0..=1.0).contains(&v)));

        let scores = discriminate(&trunk, &d_head, &imgs.view()).unwrap();
        assert_eq!(scores.len(), 4);
        assert!(scores.iter().all(|v| v.is_finite()));

        let post = q_posterior(&trunk, &q_head, &imgs.view()).unwrap();
        assert_eq!(post.dim(), (4, 10));
        for row in post.rows() {
            let s: f32 = row.sum();
            assert!((s - 1.0).abs() < 1e-6);
        }

        let feats = q_features(&trunk, &q_head, &imgs.view()).unwrap();
        assert_eq!(feats.dim(), (4, 128));
    }

    #[test]
    fn q_output_width_tracks_config() {
        let mut cfg = tiny_cfg();
        assert_eq!(cfg.q_output_dim(), 2);
        cfg.code_dim = 10;
        cfg.continuous_dim = 2;
        assert_eq!(cfg.q_output_dim(), 14);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, trunk, _, q_head) = build_networks::<f32, _>(&cfg, &mut rng).unwrap();
        let imgs = Array4::zeros((3, 1, 8, 8));
        let out = q_head.forward_eval(&trunk.forward_eval(&imgs.view()).unwrap().view());
        assert_eq!(out.logits.dim(), (3, 10));
        assert_eq!(out.cont_means.unwrap().dim(), (3, 2));
        assert_eq!(out.cont_logvars.unwrap().dim(), (3, 2));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = NetworkConfig::mnist();
        cfg.noise_dim = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::mnist();
        cfg.image_side = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::mnist();
        cfg.code_dim = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn generation_deterministic_in_eval_mode() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (gen, _, _, _) = build_networks::<f64, _>(&cfg, &mut rng).unwrap();
        let input = Array2::from_shape_fn((2, cfg.gen_input_dim()), |(i, j)| {
            ((i * 13 + j) as f64 * 0.21).sin()
        });
        let a = gen.forward_eval(&input.view()).unwrap();
        let b = gen.forward_eval(&input.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn heads_are_independent() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, trunk, mut d_head, q_head) = build_networks::<f64, _>(&cfg, &mut rng).unwrap();
        let imgs = Array4::from_shape_fn((3, 1, 8, 8), |(a, _, c, d)| {
            ((a * 64 + c * 8 + d) as f64 * 0.37).sin()
        });
        let before = q_posterior(&trunk, &q_head, &imgs.view()).unwrap();
        d_head.fc.weight.value.fill(3.33);
        let after = q_posterior(&trunk, &q_head, &imgs.view()).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn generator_gradient_wrt_code_matches_finite_differences() {
        // d(mean pixel)/d(code columns) through the training-mode graph.
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (gen, _, _, _) = build_networks::<f64, _>(&cfg, &mut rng).unwrap();
        let input = Array2::from_shape_fn((3, cfg.gen_input_dim()), |(i, j)| {
            ((i * 7 + j) as f64 * 0.13).cos() * 0.5
        });

        let mean_pixel = |g: &Generator<f64>, input: &Array2<f64>| -> f64 {
            let mut g = g.clone();
            let (imgs, _) = g.forward_train(&input.view()).unwrap();
            imgs.iter().sum::<f64>() / imgs.len() as f64
        };

        let mut g_run = gen.clone();
        let (imgs, cache) = g_run.forward_train(&input.view()).unwrap();
        let scale = 1.0 / imgs.len() as f64;
        let dout = Array4::from_elem(imgs.raw_dim(), scale);
        let dinput = g_run.backward(&cache, &dout.view());

        let numeric = finite_difference(&input, 1e-5, |x| mean_pixel(&gen, x));
        let err = max_relative_error(&dinput, &numeric);
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn trunk_and_heads_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (_, trunk, d_head, q_head) = build_networks::<f64, _>(&cfg, &mut rng).unwrap();
        let imgs = Array4::from_shape_fn((4, 1, 8, 8), |(a, _, c, d)| {
            ((a * 64 + c * 8 + d) as f64 * 0.29).sin() * 0.8
        });

        // Scalar objective mixing both heads and the feature path.
        let loss_of = |trunk: &Trunk<f64>,
                       d_head: &DHead<f64>,
                       q_head: &QHead<f64>,
                       imgs: &Array4<f64>|
         -> f64 {
            let mut t = trunk.clone();
            let mut q = q_head.clone();
            let (h, _) = t.forward_train(&imgs.view()).unwrap();
            let (scores, _) = d_head.forward(&h.view());
            let (qo, _) = q.forward_train(&h.view());
            scores.iter().map(|s| s * s).sum::<f64>()
                + qo.logits.iter().map(|v| v * v * 0.5).sum::<f64>()
                + qo.features.iter().map(|v| v * 0.1).sum::<f64>()
        };

        let mut t = trunk.clone();
        let mut d = d_head.clone();
        let mut q = q_head.clone();
        let (h, tcache) = t.forward_train(&imgs.view()).unwrap();
        let (scores, dcache) = d.forward(&h.view());
        let (qo, qcache) = q.forward_train(&h.view());

        let dscores = scores.mapv(|s| 2.0 * s);
        let dlogits = qo.logits.mapv(|v| v);
        let dfeat = Array2::from_elem(qo.features.raw_dim(), 0.1);

        let mut dh = d.backward(&dcache, &dscores.view());
        let draw = q.assemble_raw_grad(&dlogits.view(), None, None);
        dh += &q.backward(&qcache, Some(&draw.view()), Some(&dfeat.view()));
        let dimgs = t.backward(&tcache, &dh.view());

        let numeric = finite_difference(&imgs, 1e-5, |x| loss_of(&trunk, &d_head, &q_head, x));
        let err = max_relative_error(&dimgs, &numeric);
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn features_can_be_negative() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (_, trunk, _, q_head) = build_networks::<f64, _>(&cfg, &mut rng).unwrap();
        let imgs = Array4::from_shape_fn((8, 1, 8, 8), |(a, _, c, d)| {
            ((a * 64 + c * 8 + d) as f64 * 0.53).sin()
        });
        let feats = q_features(&trunk, &q_head, &imgs.view()).unwrap();
        assert!(feats.iter().any(|&v| v < 0.0), "leaky ReLU must pass negatives");
        assert!(feats.iter().all(|v| v.is_finite()));
    }
}

