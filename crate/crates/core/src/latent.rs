//! Differentiable categorical latent prior.
//!
//! Class probabilities are kept as unconstrained logits; sampling goes
//! through the Gumbel-Softmax relaxation
//!
//! ```text
//! c_i = exp((log p_i + g_i) / tau) / sum_j exp((log p_j + g_j) / tau)
//! ```
//!
//! with `g ~ Gumbel(0, 1)`, so a gradient with respect to the sampled code
//! propagates all the way back to the logits. `log p` is always computed as
//! `logits - logsumexp(logits)`, never as the log of a softmax output.

use crate::error::{Error, Result};
use crate::nn::ops::{logsumexp, softmax};
use crate::nn::{Float, Param};
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Clamp bound for uniform draws feeding the Gumbel transform.
const UNIFORM_EPS: f64 = 1e-20;

/// Learnable categorical prior: `k` unconstrained logits plus a fixed
/// softmax temperature.
#[derive(Debug, Clone)]
pub struct PriorParams<F> {
    pub logits: Param<F>,
    pub temperature: F,
}

impl<F: Float> PriorParams<F> {
    /// Uniform prior (all logits zero).
    pub fn uniform(k: usize, temperature: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 latent categories, got {k}"
            )));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            logits: Param::new(ndarray::ArrayD::zeros(vec![k])),
            temperature: F::of_f64(temperature),
        })
    }

    /// Prior with fixed target probabilities (logits = log p).
    pub fn from_probabilities(probs: &[f64], temperature: f64) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidConfig("prior needs k >= 2".into()));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p > 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "probabilities must be positive and sum to 1 (sum = {sum})"
            )));
        }
        let mut prior = Self::uniform(probs.len(), temperature)?;
        for (l, &p) in prior.logits.value.iter_mut().zip(probs.iter()) {
            *l = F::of_f64(p.ln());
        }
        Ok(prior)
    }

    pub fn k(&self) -> usize {
        self.logits.value.len()
    }

    fn logits_view(&self) -> ArrayView1<'_, F> {
        self.logits
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
    }

    /// softmax(logits); differentiable and always on the open simplex.
    pub fn probabilities(&self) -> Array1<F> {
        softmax(&self.logits_view())
    }

    /// logits - logsumexp(logits).
    pub fn log_probabilities(&self) -> Array1<F> {
        let lse = logsumexp(&self.logits_view());
        self.logits_view().mapv(|l| l - lse)
    }
}

/// One standard-Gumbel draw per latent category.
#[derive(Debug, Clone)]
pub struct GumbelNoise<F> {
    pub values: Array1<F>,
}

/// -log(-log(u)) with u clamped away from {0, 1}.
pub fn gumbel_from_uniform<F: Float>(u: f64) -> F {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    F::of_f64(-(-u.ln()).ln())
}

/// Draw `k` Gumbel(0, 1) samples, resampling any u = 0 from the source.
pub fn sample_gumbel<F: Float, R: Rng>(k: usize, rng: &mut R) -> GumbelNoise<F> {
    let values = Array1::from_shape_simple_fn(k, || {
        let mut u: f64 = rng.random();
        while u == 0.0 {
            u = rng.random();
        }
        gumbel_from_uniform(u)
    });
    GumbelNoise { values }
}

/// Soft categorical sample on the (k-1)-simplex.
pub fn sample_code<F: Float>(prior: &PriorParams<F>, noise: &GumbelNoise<F>) -> Result<Array1<F>> {
    if noise.values.len() != prior.k() {
        return Err(Error::ShapeMismatch(format!(
            "noise length {} vs k = {}",
            noise.values.len(),
            prior.k()
        )));
    }
    let logp = prior.log_probabilities();
    let scaled = (&logp + &noise.values).mapv(|v| v / prior.temperature);
    Ok(softmax(&scaled.view()))
}

/// Pulls dL/dcode back to dL/dlogits: softmax backward at the sampled code,
/// a 1/tau scale, and the log-softmax Jacobian of the logits.
pub fn sample_code_backward<F: Float>(
    prior: &PriorParams<F>,
    code: &ArrayView1<F>,
    dcode: &ArrayView1<F>,
) -> Array1<F> {
    let k = prior.k();
    debug_assert_eq!(code.len(), k);
    debug_assert_eq!(dcode.len(), k);
    let inner: F = code
        .iter()
        .zip(dcode.iter())
        .fold(F::zero(), |acc, (&c, &d)| acc + c * d);
    let dy: Array1<F> = code
        .iter()
        .zip(dcode.iter())
        .map(|(&c, &d)| c * (d - inner) / prior.temperature)
        .collect();
    let p = prior.probabilities();
    let total = dy.sum();
    Array1::from_iter(dy.iter().zip(p.iter()).map(|(&g, &pi)| g - pi * total))
}

/// Hard categorical sample via the Gumbel-max trick (exact sampling from
/// the prior's probabilities, no temperature involved).
pub fn sample_onehot<F: Float, R: Rng>(prior: &PriorParams<F>, rng: &mut R) -> Array1<F> {
    let logp = prior.log_probabilities();
    let noise = sample_gumbel::<F, _>(prior.k(), rng);
    let perturbed = &logp + &noise.values;
    let idx = argmax(&perturbed.view());
    let mut one = Array1::zeros(prior.k());
    one[idx] = F::one();
    one
}

/// Argmax index of a simplex code; ties break toward the lowest index.
pub fn harden<F: Float>(code: &ArrayView1<F>) -> usize {
    argmax(code)
}

fn argmax<F: Float>(v: &ArrayView1<F>) -> usize {
    let mut best = 0;
    let mut best_val = v[0];
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > best_val {
            best_val = x;
            best = i;
        }
    }
    best
}

/// A single generator input: soft (or one-hot) code, Gaussian noise, and
/// optional continuous codes drawn from U(-1, 1).
#[derive(Debug, Clone)]
pub struct LatentInput<F> {
    pub code: Array1<F>,
    pub noise: Array1<F>,
    pub continuous: Option<Array1<F>>,
}

/// A batch of generator inputs in matrix form.
#[derive(Debug, Clone)]
pub struct LatentBatch<F> {
    pub codes: Array2<F>,              // (n, k)
    pub noise: Array2<F>,              // (n, dz)
    pub continuous: Option<Array2<F>>, // (n, m)
}

impl<F: Float> LatentBatch<F> {
    pub fn len(&self) -> usize {
        self.codes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenate [noise | code | continuous] into the generator input
    /// (standard row-major layout).
    pub fn generator_input(&self) -> Array2<F> {
        let n = self.len();
        let dz = self.noise.ncols();
        let k = self.codes.ncols();
        let m = self.continuous.as_ref().map_or(0, |r| r.ncols());
        let mut out = Array2::zeros((n, dz + k + m));
        out.slice_mut(ndarray::s![.., ..dz]).assign(&self.noise);
        out.slice_mut(ndarray::s![.., dz..dz + k]).assign(&self.codes);
        if let Some(r) = &self.continuous {
            out.slice_mut(ndarray::s![.., dz + k..]).assign(r);
        }
        out
    }
}

pub fn sample_noise<F: Float, R: Rng>(dz: usize, rng: &mut R) -> Array1<F> {
    Array1::from_shape_simple_fn(dz, || {
        let z: f64 = StandardNormal.sample(rng);
        F::of_f64(z)
    })
}

pub fn sample_continuous<F: Float, R: Rng>(m: usize, rng: &mut R) -> Array1<F> {
    Array1::from_shape_simple_fn(m, || F::of_f64(rng.random_range(-1.0..1.0)))
}

/// Draw a batch of latent inputs. `soft` selects Gumbel-Softmax codes
/// (learnable-prior path) versus hard Gumbel-max one-hots (fixed priors).
pub fn sample_latent_batch<F: Float, R: Rng>(
    prior: &PriorParams<F>,
    n: usize,
    dz: usize,
    m: usize,
    soft: bool,
    rng: &mut R,
) -> Result<LatentBatch<F>> {
    let k = prior.k();
    let mut codes = Array2::zeros((n, k));
    let mut noise = Array2::zeros((n, dz));
    let mut continuous = if m > 0 {
        Some(Array2::zeros((n, m)))
    } else {
        None
    };
    for i in 0..n {
        let code = if soft {
            let g = sample_gumbel::<F, _>(k, rng);
            sample_code(prior, &g)?
        } else {
            sample_onehot(prior, rng)
        };
        codes.row_mut(i).assign(&code);
        noise.row_mut(i).assign(&sample_noise(dz, rng));
        if let Some(r) = continuous.as_mut() {
            r.row_mut(i).assign(&sample_continuous(m, rng));
        }
    }
    Ok(LatentBatch {
        codes,
        noise,
        continuous,
    })
}
