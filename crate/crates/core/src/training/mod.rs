//! Two-phase alternating optimization.
//!
//! Phase 1 updates the shared trunk and the discriminator head on the
//! adversarial loss. Phase 2 re-evaluates the same fake batch through the
//! updated discriminator and takes a single optimizer step on the
//! generator, the recognition path (trunk + head), and — when the prior is
//! learnable — the class-probability logits, minimizing
//! g_adv + lambda_mi * MI + lambda_c * contrastive. The contrastive term is
//! computed on real images and their augmented views only.
//!
//! Variant flags reproduce the ablation grid: fixed uniform / fixed
//! ground-truth / learnable prior crossed with no / positive-only / full
//! contrastive loss.

pub mod checkpoint;

use crate::data::{make_contrastive_batch, AugmentationPipeline, ImbalancedSplit, LabeledImageSet};
use crate::error::{Error, Result};
use crate::latent::{sample_code_backward, sample_latent_batch, LatentBatch, PriorParams};
use crate::model::{build_networks, DHead, Generator, NetworkConfig, QHead, Trunk};
use crate::nn::ops::{softmax_backward_rows, softmax_rows, softplus};
use crate::nn::{Adam, Float};
use crate::objectives::{
    adversarial_losses, d_loss_grads, g_adv_loss_grad, mi_continuous_grads, mi_continuous_loss,
    mi_discrete_grads, mi_discrete_loss, ntxent_grad, ntxent_loss, pos_only_grads, pos_only_loss,
    total_minimization_objective, ContrastiveMode, HyperParams, LossReport,
};
use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Which categorical prior a run trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorVariant {
    /// Frozen uniform prior, hard one-hot samples.
    FixedUniform,
    /// Frozen prior matching the data's class proportions, hard samples.
    FixedGroundTruth,
    /// Gumbel-Softmax prior with trainable logits, soft samples.
    Learnable,
}

/// The ablation grid by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Uniform,
    GroundTruth,
    GroundTruthNtxent,
    Gumbel,
    GumbelPos,
    Elastic,
}

impl Baseline {
    pub fn all() -> [Baseline; 6] {
        [
            Baseline::Uniform,
            Baseline::GroundTruth,
            Baseline::GroundTruthNtxent,
            Baseline::Gumbel,
            Baseline::GumbelPos,
            Baseline::Elastic,
        ]
    }

    pub fn flags(self) -> (PriorVariant, ContrastiveMode) {
        match self {
            Baseline::Uniform => (PriorVariant::FixedUniform, ContrastiveMode::None),
            Baseline::GroundTruth => (PriorVariant::FixedGroundTruth, ContrastiveMode::None),
            Baseline::GroundTruthNtxent => (PriorVariant::FixedGroundTruth, ContrastiveMode::Full),
            Baseline::Gumbel => (PriorVariant::Learnable, ContrastiveMode::None),
            Baseline::GumbelPos => (PriorVariant::Learnable, ContrastiveMode::PosOnly),
            Baseline::Elastic => (PriorVariant::Learnable, ContrastiveMode::Full),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Uniform => "uniform",
            Baseline::GroundTruth => "ground_truth",
            Baseline::GroundTruthNtxent => "ground_truth_ntxent",
            Baseline::Gumbel => "gumbel",
            Baseline::GumbelPos => "gumbel_pos",
            Baseline::Elastic => "elastic",
        }
    }
}

impl std::str::FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Baseline::Uniform),
            "ground_truth" => Ok(Baseline::GroundTruth),
            "ground_truth_ntxent" => Ok(Baseline::GroundTruthNtxent),
            "gumbel" => Ok(Baseline::Gumbel),
            "gumbel_pos" => Ok(Baseline::GumbelPos),
            "elastic" => Ok(Baseline::Elastic),
            other => Err(Error::InvalidConfig(format!("unknown baseline '{other}'"))),
        }
    }
}

/// Full experiment descriptor for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub prior_variant: PriorVariant,
    pub contrastive_mode: ContrastiveMode,
    pub hyper: HyperParams,
    /// Gumbel-Softmax sampling temperature tau.
    pub gumbel_temperature: f64,
    pub learning_rate: f64,
    /// Optional separate learning rate for the prior logits.
    pub prior_learning_rate: Option<f64>,
    pub adam_betas: (f64, f64),
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub net: NetworkConfig,
    /// The split this run trains on; required for the fixed ground-truth
    /// prior and recorded for provenance otherwise.
    pub split: Option<ImbalancedSplit>,
    pub augmentation: AugmentationPipeline,
    /// Checkpoint every this many epochs (0 = final checkpoint only).
    pub checkpoint_interval_epochs: usize,
}

impl TrainConfig {
    /// Reference defaults at 28x28: lr 2e-4, betas (0.5, 0.999), tau 0.1,
    /// lambda_mi 1, lambda_contrastive 10, batch 64, 200 epochs.
    pub fn mnist_defaults(baseline: Baseline, seed: u64) -> Self {
        let (prior_variant, contrastive_mode) = baseline.flags();
        Self {
            prior_variant,
            contrastive_mode,
            hyper: HyperParams::default(),
            gumbel_temperature: 0.1,
            learning_rate: 2e-4,
            prior_learning_rate: None,
            adam_betas: (0.5, 0.999),
            batch_size: 64,
            epochs: 200,
            seed,
            net: NetworkConfig::mnist(),
            split: None,
            augmentation: AugmentationPipeline::for_dataset(crate::data::DatasetKind::Mnist),
            checkpoint_interval_epochs: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.hyper.validate()?;
        if !(self.gumbel_temperature > 0.0) {
            return Err(Error::InvalidConfig(
                "gumbel temperature must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch size must be at least 2 (batch statistics and pairing)".into(),
            ));
        }
        if self.prior_variant == PriorVariant::FixedGroundTruth {
            let split = self.split.as_ref().ok_or_else(|| {
                Error::InvalidConfig("fixed_ground_truth prior requires a split".into())
            })?;
            if split.k() != self.net.code_dim {
                return Err(Error::InvalidConfig(format!(
                    "split k = {} vs code_dim = {}",
                    split.k(),
                    self.net.code_dim
                )));
            }
        }
        Ok(())
    }
}

/// Everything that evolves during a run.
pub struct TrainState<F> {
    pub config: TrainConfig,
    pub gen: Generator<F>,
    pub trunk: Trunk<F>,
    pub d_head: DHead<F>,
    pub q_head: QHead<F>,
    pub prior: PriorParams<F>,
    pub prior_trainable: bool,
    pub opt_d: Adam<F>,
    pub opt_g: Adam<F>,
    pub opt_prior: Adam<F>,
    pub step: u64,
    pub epoch: u64,
    pub rng: ChaCha8Rng,
}

/// Per-epoch snapshots of the prior probabilities.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PriorTrajectory {
    /// snapshots[e] is the probability vector after epoch e+1.
    pub probabilities: Vec<Vec<f64>>,
}

impl PriorTrajectory {
    /// CSV with columns epoch, p_0..p_{k-1}; epochs are 1-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(first) = self.probabilities.first() {
            out.push_str("epoch");
            for i in 0..first.len() {
                out.push_str(&format!(",p_{i}"));
            }
            out.push('\n');
        }
        for (e, probs) in self.probabilities.iter().enumerate() {
            out.push_str(&format!("{}", e + 1));
            for p in probs {
                out.push_str(&format!(",{p}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Build the initial state: uniform prior logits (or frozen ground-truth
/// log-probabilities), documented weight initialization, fresh optimizer
/// moments, rng seeded from the config.
pub fn init_state<F: Float>(config: &TrainConfig) -> Result<TrainState<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (gen, trunk, d_head, q_head) = build_networks::<F, _>(&config.net, &mut rng)?;
    let (prior, prior_trainable) = match config.prior_variant {
        PriorVariant::FixedUniform => (
            PriorParams::uniform(config.net.code_dim, config.gumbel_temperature)?,
            false,
        ),
        PriorVariant::FixedGroundTruth => {
            let split = config.split.as_ref().expect("validated");
            // The published tables are rounded; renormalize exactly.
            let sum: f64 = split.proportions.iter().sum();
            let probs: Vec<f64> = split.proportions.iter().map(|p| p / sum).collect();
            (
                PriorParams::from_probabilities(&probs, config.gumbel_temperature)?,
                false,
            )
        }
        PriorVariant::Learnable => (
            PriorParams::uniform(config.net.code_dim, config.gumbel_temperature)?,
            true,
        ),
    };
    let betas = config.adam_betas;
    Ok(TrainState {
        config: config.clone(),
        gen,
        trunk,
        d_head,
        q_head,
        prior,
        prior_trainable,
        opt_d: Adam::new(config.learning_rate, betas, 1e-8),
        opt_g: Adam::new(config.learning_rate, betas, 1e-8),
        opt_prior: Adam::new(
            config.prior_learning_rate.unwrap_or(config.learning_rate),
            betas,
            1e-8,
        ),
        step: 0,
        epoch: 0,
        rng,
    })
}

/// Copy dataset rows into an F-typed batch.
pub fn batch_to<F: Float>(images: &Array4<f32>, indices: &[usize]) -> Array4<F> {
    let (_, c, h, w) = images.dim();
    let mut out = Array4::zeros((indices.len(), c, h, w));
    for (row, &i) in indices.iter().enumerate() {
        out.index_axis_mut(Axis(0), row)
            .zip_mut_with(&images.index_axis(Axis(0), i), |dst, &src| {
                *dst = F::of_f64(src as f64)
            });
    }
    out
}

/// One optimization step on a real batch: D phase then G/Q/prior phase.
/// Losses are checked for finiteness before the corresponding optimizer
/// update is applied.
pub fn train_step<F: Float>(
    state: &mut TrainState<F>,
    real_batch: &Array4<F>,
) -> Result<LossReport> {
    let n = real_batch.dim().0;
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "train_step needs a batch of at least 2, got {n}"
        )));
    }
    let cfg = state.config.clone();
    let dz = cfg.net.noise_dim;
    let k = cfg.net.code_dim;
    let m = cfg.net.continuous_dim;
    let lambda_mi = F::of_f64(cfg.hyper.lambda_mi);
    let lambda_c = F::of_f64(cfg.hyper.lambda_contrastive);

    // One latent batch per step, shared by both phases.
    let latents: LatentBatch<F> = sample_latent_batch(
        &state.prior,
        n,
        dz,
        m,
        state.prior_trainable,
        &mut state.rng,
    )?;
    let gen_input = latents.generator_input();

    // Fakes are generated once; phase 2 backpropagates through this graph.
    let (fakes, gen_cache) = state.gen.forward_train(&gen_input.view())?;

    // ---- Phase 1: discriminator update (trunk + D head).
    state.trunk.zero_grad();
    state.d_head.zero_grad();
    let (h_real, tc_real) = state.trunk.forward_train(&real_batch.view())?;
    let (s_real, dc_real) = state.d_head.forward(&h_real.view());
    let (h_fake, tc_fake) = state.trunk.forward_train(&fakes.view())?;
    let (s_fake, dc_fake) = state.d_head.forward(&h_fake.view());
    let (d_loss, _) = adversarial_losses(&s_real.view(), &s_fake.view())?;
    let d_loss_f64 = d_loss.as_f64();
    if !d_loss_f64.is_finite() {
        return Err(Error::NonFiniteStep { step: state.step });
    }
    let (d_sr, d_sf) = d_loss_grads(&s_real.view(), &s_fake.view());
    let dh_real = state.d_head.backward(&dc_real, &d_sr.view());
    let dh_fake = state.d_head.backward(&dc_fake, &d_sf.view());
    state.trunk.backward(&tc_real, &dh_real.view());
    state.trunk.backward(&tc_fake, &dh_fake.view());
    {
        let mut params = state.trunk.params_mut();
        params.extend(state.d_head.params_mut());
        let mut refs: Vec<_> = params.into_iter().map(|(_, p)| p).collect();
        state.opt_d.step(&mut refs);
    }

    // ---- Phase 2: generator + recognition (+ prior) update.
    state.gen.zero_grad();
    state.trunk.zero_grad();
    state.d_head.zero_grad();
    state.q_head.zero_grad();
    state.prior.logits.zero_grad();

    // Re-evaluate the fakes through the updated discriminator/recognition.
    let (h_fake2, tc_fake2) = state.trunk.forward_train(&fakes.view())?;
    let (s_fake2, dc_fake2) = state.d_head.forward(&h_fake2.view());
    let (q_out, qc_fake2) = state.q_head.forward_train(&h_fake2.view());

    let g_adv =
        s_fake2.iter().fold(F::zero(), |a, &s| a + softplus(-s)) / F::from_usize(n).unwrap();
    let mi_d = mi_discrete_loss(&latents.codes.view(), &q_out.logits.view())?;
    let mi_c = if m > 0 {
        let r = latents.continuous.as_ref().expect("m > 0");
        Some(mi_continuous_loss(
            &r.view(),
            &q_out.cont_means.as_ref().expect("m > 0").view(),
            &q_out.cont_logvars.as_ref().expect("m > 0").view(),
        )?)
    } else {
        None
    };

    // Contrastive term on real images and their augmented views. The
    // backward seeds are applied immediately (gradients accumulate).
    let mut contrastive_value = 0.0f64;
    if cfg.contrastive_mode != ContrastiveMode::None {
        let (views, pair_index) =
            make_contrastive_batch(real_batch, &cfg.augmentation, &mut state.rng)?;
        let (h_views, tc_views) = state.trunk.forward_train(&views.view())?;
        let (q_views, qc_views) = state.q_head.forward_train(&h_views.view());
        match cfg.contrastive_mode {
            ContrastiveMode::Full => {
                let value = ntxent_loss(
                    &q_views.features.view(),
                    &pair_index,
                    cfg.hyper.ntxent_temperature,
                )?;
                contrastive_value = value.as_f64();
                let mut dfeat = ntxent_grad(
                    &q_views.features.view(),
                    &pair_index,
                    cfg.hyper.ntxent_temperature,
                )?;
                dfeat.mapv_inplace(|v| v * lambda_c);
                let dh_views = state.q_head.backward(&qc_views, None, Some(&dfeat.view()));
                state.trunk.backward(&tc_views, &dh_views.view());
            }
            ContrastiveMode::PosOnly => {
                let posteriors = softmax_rows(&q_views.logits.view());
                let q_a = posteriors.slice(s![..n, ..]).to_owned();
                let q_b = posteriors.slice(s![n.., ..]).to_owned();
                let value = pos_only_loss(&q_a.view(), &q_b.view())?;
                contrastive_value = value.as_f64();
                let (mut da, mut db) = pos_only_grads(&q_a.view(), &q_b.view());
                da.mapv_inplace(|v| v * lambda_c);
                db.mapv_inplace(|v| v * lambda_c);
                let mut dlogits = Array2::<F>::zeros(posteriors.raw_dim());
                dlogits
                    .slice_mut(s![..n, ..])
                    .assign(&softmax_backward_rows(&q_a.view(), &da.view()));
                dlogits
                    .slice_mut(s![n.., ..])
                    .assign(&softmax_backward_rows(&q_b.view(), &db.view()));
                let draw = state.q_head.assemble_raw_grad(&dlogits.view(), None, None);
                let dh_views = state.q_head.backward(&qc_views, Some(&draw.view()), None);
                state.trunk.backward(&tc_views, &dh_views.view());
            }
            ContrastiveMode::None => unreachable!(),
        }
    }

    let report = LossReport {
        d_loss: d_loss_f64,
        g_adv_loss: g_adv.as_f64(),
        mi_discrete: mi_d.as_f64(),
        mi_continuous: mi_c.map(|v| v.as_f64()),
        ntxent: contrastive_value,
        total: total_minimization_objective(
            g_adv.as_f64(),
            mi_d.as_f64(),
            mi_c.map(|v| v.as_f64()),
            contrastive_value,
            &cfg.hyper,
            cfg.contrastive_mode,
        ),
    };
    if !report.is_finite() {
        return Err(Error::NonFiniteStep { step: state.step });
    }

    // Backward through the fake-image graph: adversarial + MI seeds.
    let ds_fake2 = g_adv_loss_grad(&s_fake2.view());
    let mut dh_fake2 = state.d_head.backward(&dc_fake2, &ds_fake2.view());
    let (mut dcodes, mut dq_logits) =
        mi_discrete_grads(&latents.codes.view(), &q_out.logits.view());
    dq_logits.mapv_inplace(|v| v * lambda_mi);
    dcodes.mapv_inplace(|v| v * lambda_mi);
    let draw = if m > 0 {
        let r = latents.continuous.as_ref().expect("m > 0");
        let (mut dmu, mut dlv) = mi_continuous_grads(
            &r.view(),
            &q_out.cont_means.as_ref().expect("m > 0").view(),
            &q_out.cont_logvars.as_ref().expect("m > 0").view(),
        );
        dmu.mapv_inplace(|v| v * lambda_mi);
        dlv.mapv_inplace(|v| v * lambda_mi);
        state
            .q_head
            .assemble_raw_grad(&dq_logits.view(), Some(&dmu.view()), Some(&dlv.view()))
    } else {
        state.q_head.assemble_raw_grad(&dq_logits.view(), None, None)
    };
    dh_fake2 += &state.q_head.backward(&qc_fake2, Some(&draw.view()), None);
    let dfakes = state.trunk.backward(&tc_fake2, &dh_fake2.view());
    let dgen_input = state.gen.backward(&gen_cache, &dfakes.view());

    // Prior gradient: generator-input path plus the MI target path.
    if state.prior_trainable {
        let dcodes_gen = dgen_input.slice(s![.., dz..dz + k]);
        for i in 0..n {
            let total_dcode = &dcodes_gen.row(i) + &dcodes.row(i);
            let dlogits =
                sample_code_backward(&state.prior, &latents.codes.row(i), &total_dcode.view());
            let mut grad = state
                .prior
                .logits
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            grad += &dlogits;
        }
    }

    {
        let mut params = state.gen.params_mut();
        params.extend(state.trunk.params_mut());
        params.extend(state.q_head.params_mut());
        let mut refs: Vec<_> = params.into_iter().map(|(_, p)| p).collect();
        state.opt_g.step(&mut refs);
    }
    if state.prior_trainable {
        state.opt_prior.step(&mut [&mut state.prior.logits]);
    }

    // Simplex preservation is structural (softmax of finite logits); assert
    // it anyway so a corrupted update cannot pass silently.
    let probs = state.prior.probabilities();
    let psum = probs.sum().as_f64();
    if !((psum - 1.0).abs() < 1e-6) || probs.iter().any(|p| !(p.as_f64() > 0.0)) {
        return Err(Error::NonFiniteStep { step: state.step });
    }

    state.step += 1;
    Ok(report)
}

/// Outputs of a full training run.
pub struct RunOutput<F> {
    pub state: TrainState<F>,
    pub trajectory: PriorTrajectory,
    pub losses: Vec<LossReport>,
}

/// Epochs x steps over the (already subsampled) dataset; shuffles each
/// epoch, drops trailing partial batches, snapshots the prior per epoch,
/// optionally writes losses.csv / prior.csv / checkpoints under `out_dir`.
pub fn run_training<F: Float>(
    config: &TrainConfig,
    dataset: &LabeledImageSet,
    out_dir: Option<&Path>,
) -> Result<RunOutput<F>> {
    let mut state = init_state::<F>(config)?;
    let mut trajectory = PriorTrajectory::default();
    let mut losses = Vec::new();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut loss_file = match out_dir {
        Some(dir) => {
            let mut f = std::fs::File::create(dir.join("losses.csv"))?;
            writeln!(f, "{}", LossReport::csv_header())?;
            Some(f)
        }
        None => None,
    };

    let n = dataset.len();
    let steps_per_epoch = n / config.batch_size;
    for epoch in 1..=config.epochs as u64 {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(config.batch_size).take(steps_per_epoch) {
            let batch = batch_to::<F>(&dataset.images, chunk);
            let report = match train_step(&mut state, &batch) {
                Ok(r) => r,
                Err(Error::NonFiniteStep { step }) => {
                    let diag = out_dir
                        .map(|d| d.join("diagnostic.ckpt"))
                        .unwrap_or_else(|| std::path::PathBuf::from("diagnostic.ckpt"));
                    checkpoint::checkpoint_save(&mut state, &diag)?;
                    return Err(Error::NonFiniteLoss {
                        step,
                        checkpoint: diag,
                    });
                }
                Err(e) => return Err(e),
            };
            if let Some(f) = loss_file.as_mut() {
                writeln!(f, "{}", report.csv_line(state.step - 1))?;
            }
            losses.push(report);
        }
        state.epoch = epoch;
        trajectory.probabilities.push(
            state
                .prior
                .probabilities()
                .iter()
                .map(|p| p.as_f64())
                .collect(),
        );
        if let Some(dir) = out_dir {
            let interval = config.checkpoint_interval_epochs;
            if interval > 0 && epoch % interval as u64 == 0 {
                checkpoint::checkpoint_save(&mut state, &dir.join(format!("epoch_{epoch}.ckpt")))?;
            }
        }
    }

    if let Some(dir) = out_dir {
        checkpoint::checkpoint_save(&mut state, &dir.join("checkpoint.ckpt"))?;
        std::fs::write(dir.join("prior.csv"), trajectory.to_csv())?;
    }
    Ok(RunOutput {
        state,
        trajectory,
        losses,
    })
}
