//! Loss terms: non-saturating adversarial pair, the mutual-information
//! surrogate for discrete (and optional continuous) codes, the NT-Xent
//! contrastive loss over recognition features, and their composition into
//! the single minimization objective.
//!
//! Every loss comes with an explicit gradient function; the training loop
//! seeds backward passes with these, scaled by the loss weights.

use crate::error::{Error, Result};
use crate::nn::ops::{log_softmax_rows, normalize_rows, sigmoid, softmax_rows, softplus};
use crate::nn::Float;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

/// Loss weights and the contrastive softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Weight of the mutual-information term.
    pub lambda_mi: f64,
    /// Weight of the contrastive term.
    pub lambda_contrastive: f64,
    /// NT-Xent softmax temperature.
    pub ntxent_temperature: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda_mi: 1.0,
            lambda_contrastive: 10.0,
            ntxent_temperature: 0.5,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_mi < 0.0 || self.lambda_contrastive < 0.0 {
            return Err(Error::InvalidConfig(
                "loss weights must be non-negative".into(),
            ));
        }
        if !(self.ntxent_temperature > 0.0) {
            return Err(Error::InvalidConfig(
                "NT-Xent temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Which form of the contrastive term a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveMode {
    /// No contrastive term.
    None,
    /// Positive pairs only: mean squared error between the posteriors of
    /// the two augmented views.
    PosOnly,
    /// Full NT-Xent over features.
    Full,
}

/// Per-step scalar losses, kept in f64 for logging.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub d_loss: f64,
    pub g_adv_loss: f64,
    pub mi_discrete: f64,
    pub mi_continuous: Option<f64>,
    /// Value of the active contrastive term (0 when the mode is `None`).
    pub ntxent: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.d_loss.is_finite()
            && self.g_adv_loss.is_finite()
            && self.mi_discrete.is_finite()
            && self.mi_continuous.map_or(true, f64::is_finite)
            && self.ntxent.is_finite()
            && self.total.is_finite()
    }

    pub fn csv_header() -> &'static str {
        "step,d_loss,g_adv,mi,ntxent,total"
    }

    pub fn csv_line(&self, step: u64) -> String {
        let mi = self.mi_discrete + self.mi_continuous.unwrap_or(0.0);
        format!(
            "{},{},{},{},{},{}",
            step, self.d_loss, self.g_adv_loss, mi, self.ntxent, self.total
        )
    }
}

/// Two-sided non-saturating GAN losses on raw (pre-sigmoid) scores.
///
/// d = mean softplus(-real) + mean softplus(fake);
/// g = mean softplus(-fake).
pub fn adversarial_losses<F: Float>(
    real_scores: &ArrayView1<F>,
    fake_scores: &ArrayView1<F>,
) -> Result<(F, F)> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::EmptyInput("adversarial score batch".into()));
    }
    let nr = F::from_usize(real_scores.len()).unwrap();
    let nf = F::from_usize(fake_scores.len()).unwrap();
    let d = real_scores.fold(F::zero(), |a, &s| a + softplus(-s)) / nr
        + fake_scores.fold(F::zero(), |a, &s| a + softplus(s)) / nf;
    let g = fake_scores.fold(F::zero(), |a, &s| a + softplus(-s)) / nf;
    Ok((d, g))
}

/// Gradients of the discriminator loss with respect to both score batches.
pub fn d_loss_grads<F: Float>(
    real_scores: &ArrayView1<F>,
    fake_scores: &ArrayView1<F>,
) -> (Array1<F>, Array1<F>) {
    let nr = F::from_usize(real_scores.len()).unwrap();
    let nf = F::from_usize(fake_scores.len()).unwrap();
    let dreal = real_scores.mapv(|s| -sigmoid(-s) / nr);
    let dfake = fake_scores.mapv(|s| sigmoid(s) / nf);
    (dreal, dfake)
}

/// Gradient of the generator's adversarial loss with respect to fake scores.
pub fn g_adv_loss_grad<F: Float>(fake_scores: &ArrayView1<F>) -> Array1<F> {
    let nf = F::from_usize(fake_scores.len()).unwrap();
    fake_scores.mapv(|s| -sigmoid(-s) / nf)
}

/// Mutual-information surrogate for the discrete code: cross-entropy of the
/// recognition posterior against the soft sampled code,
/// mean_batch( -sum_i c_i log softmax(q)_i ).
///
/// The prior-entropy term of the original bound is treated as a constant and
/// excluded, so this value is bounded below by the entropy of each code.
pub fn mi_discrete_loss<F: Float>(
    sampled_codes: &ArrayView2<F>,
    q_logits: &ArrayView2<F>,
) -> Result<F> {
    check_same_shape(sampled_codes, q_logits, "codes vs q logits")?;
    if sampled_codes.nrows() == 0 {
        return Err(Error::EmptyInput("mi_discrete batch".into()));
    }
    let log_q = log_softmax_rows(q_logits);
    let n = F::from_usize(sampled_codes.nrows()).unwrap();
    let total = sampled_codes
        .iter()
        .zip(log_q.iter())
        .fold(F::zero(), |acc, (&c, &lq)| acc - c * lq);
    Ok(total / n)
}

/// Gradients of [`mi_discrete_loss`]: (d/d codes, d/d q_logits).
pub fn mi_discrete_grads<F: Float>(
    sampled_codes: &ArrayView2<F>,
    q_logits: &ArrayView2<F>,
) -> (Array2<F>, Array2<F>) {
    let n = F::from_usize(sampled_codes.nrows()).unwrap();
    let log_q = log_softmax_rows(q_logits);
    let q = softmax_rows(q_logits);
    let dcodes = log_q.mapv(|v| -v / n);
    // d/dq_logits of -sum_i c_i (q_i - lse(q)) = -c + softmax(q) * sum(c)
    let mut dq = q;
    for ((mut dq_row, c_row), _) in dq
        .rows_mut()
        .into_iter()
        .zip(sampled_codes.rows())
        .zip(0..)
    {
        let c_sum = c_row.sum();
        for (d, &c) in dq_row.iter_mut().zip(c_row.iter()) {
            *d = (*d * c_sum - c) / n;
        }
    }
    (dcodes, dq)
}

/// Gaussian negative log-likelihood of sampled continuous codes under the
/// recognition head's factored (mean, log-variance) output, averaged over
/// the batch.
pub fn mi_continuous_loss<F: Float>(
    sampled_r: &ArrayView2<F>,
    q_means: &ArrayView2<F>,
    q_logvars: &ArrayView2<F>,
) -> Result<F> {
    check_same_shape(sampled_r, q_means, "r vs q means")?;
    check_same_shape(sampled_r, q_logvars, "r vs q logvars")?;
    if sampled_r.nrows() == 0 {
        return Err(Error::EmptyInput("mi_continuous batch".into()));
    }
    let n = F::from_usize(sampled_r.nrows()).unwrap();
    let half = F::of_f64(0.5);
    let ln_2pi = F::of_f64((2.0 * std::f64::consts::PI).ln());
    let mut total = F::zero();
    for ((&r, &mu), &lv) in sampled_r
        .iter()
        .zip(q_means.iter())
        .zip(q_logvars.iter())
    {
        let d = r - mu;
        total = total + half * (ln_2pi + lv + d * d * (-lv).exp());
    }
    Ok(total / n)
}

/// Gradients of [`mi_continuous_loss`] with respect to (means, logvars).
pub fn mi_continuous_grads<F: Float>(
    sampled_r: &ArrayView2<F>,
    q_means: &ArrayView2<F>,
    q_logvars: &ArrayView2<F>,
) -> (Array2<F>, Array2<F>) {
    let n = F::from_usize(sampled_r.nrows()).unwrap();
    let half = F::of_f64(0.5);
    let mut dmu = Array2::zeros(q_means.raw_dim());
    let mut dlv = Array2::zeros(q_logvars.raw_dim());
    for i in 0..sampled_r.nrows() {
        for j in 0..sampled_r.ncols() {
            let d = sampled_r[[i, j]] - q_means[[i, j]];
            let inv_var = (-q_logvars[[i, j]]).exp();
            dmu[[i, j]] = -d * inv_var / n;
            dlv[[i, j]] = half * (F::one() - d * d * inv_var) / n;
        }
    }
    (dmu, dlv)
}

fn validate_pairing(len: usize, pair_index: &[usize]) -> Result<()> {
    if pair_index.len() != len {
        return Err(Error::ShapeMismatch(format!(
            "pair index length {} vs feature rows {len}",
            pair_index.len()
        )));
    }
    for (i, &j) in pair_index.iter().enumerate() {
        if j >= len || j == i || pair_index[j] != i {
            return Err(Error::InvalidArgument(format!(
                "pair_index must be a fixed-point-free involution; broken at {i} -> {j}"
            )));
        }
    }
    Ok(())
}

/// NT-Xent over `2N` feature rows with cosine similarity. Anchors are the
/// first `N` rows; each anchor's positive is `pair_index[i]` and the
/// denominator runs over every other row:
///
/// ```text
/// l_i = -log( exp(sim(f_i, f_j)/t) / sum_{k != i} exp(sim(f_i, f_k)/t) )
/// L   = sum_{i=0}^{N-1} l_i
/// ```
pub fn ntxent_loss<F: Float>(
    features: &ArrayView2<F>,
    pair_index: &[usize],
    temperature: f64,
) -> Result<F> {
    let (sim, _, n) = ntxent_prepare(features, pair_index, temperature)?;
    let t = F::of_f64(temperature);
    let mut loss = F::zero();
    for i in 0..n {
        let j = pair_index[i];
        let mut denom_terms = Vec::with_capacity(2 * n - 1);
        for k in 0..2 * n {
            if k != i {
                denom_terms.push(sim[[i, k]] / t);
            }
        }
        let lse = crate::nn::ops::logsumexp(&Array1::from(denom_terms).view());
        loss = loss + (lse - sim[[i, j]] / t);
    }
    Ok(loss)
}

/// Gradient of [`ntxent_loss`] with respect to the raw features.
pub fn ntxent_grad<F: Float>(
    features: &ArrayView2<F>,
    pair_index: &[usize],
    temperature: f64,
) -> Result<Array2<F>> {
    let (sim, unit, n) = ntxent_prepare(features, pair_index, temperature)?;
    let t = F::of_f64(temperature);
    let rows = 2 * n;

    // Coefficients g[i][k] = dL/d sim(i, k), nonzero only for anchor rows.
    let mut coeff = Array2::<F>::zeros((rows, rows));
    for i in 0..n {
        let j = pair_index[i];
        let mut max = F::neg_infinity();
        for k in 0..rows {
            if k != i && sim[[i, k]] / t > max {
                max = sim[[i, k]] / t;
            }
        }
        let mut denom = F::zero();
        for k in 0..rows {
            if k != i {
                denom = denom + (sim[[i, k]] / t - max).exp();
            }
        }
        for k in 0..rows {
            if k != i {
                let a = (sim[[i, k]] / t - max).exp() / denom;
                let delta = if k == j { F::one() } else { F::zero() };
                coeff[[i, k]] = (a - delta) / t;
            }
        }
    }

    // L = sum coeff[i,k] * (U U^T)[i,k]  =>  dL/dU = (coeff + coeff^T) U.
    let sym = &coeff + &coeff.t();
    let du = sym.dot(&unit);

    // Through the normalization u = f / |f|.
    let (_, norms) = normalize_rows(features);
    let mut df = Array2::<F>::zeros(features.raw_dim());
    for i in 0..rows {
        let u = unit.row(i);
        let g = du.row(i);
        let dot = u.iter().zip(g.iter()).fold(F::zero(), |a, (&x, &y)| a + x * y);
        for c in 0..features.ncols() {
            df[[i, c]] = (g[c] - dot * u[c]) / norms[i];
        }
    }
    Ok(df)
}

fn ntxent_prepare<F: Float>(
    features: &ArrayView2<F>,
    pair_index: &[usize],
    temperature: f64,
) -> Result<(Array2<F>, Array2<F>, usize)> {
    let rows = features.nrows();
    if rows < 4 || rows % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "NT-Xent needs an even batch of at least 4 rows (N >= 2), got {rows}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(
            "NT-Xent temperature must be positive".into(),
        ));
    }
    validate_pairing(rows, pair_index)?;
    let (unit, norms) = normalize_rows(features);
    if norms.iter().any(|&v| v == F::zero()) {
        return Err(Error::InvalidArgument(
            "NT-Xent features contain a zero-norm row; cosine similarity undefined".into(),
        ));
    }
    let sim = unit.dot(&unit.t());
    Ok((sim, unit, rows / 2))
}

/// Positive-pairs-only consistency loss: plain mean squared error between
/// the recognition posteriors of the two views.
pub fn pos_only_loss<F: Float>(
    posterior_a: &ArrayView2<F>,
    posterior_b: &ArrayView2<F>,
) -> Result<F> {
    check_same_shape(posterior_a, posterior_b, "view posteriors")?;
    if posterior_a.nrows() == 0 {
        return Err(Error::EmptyInput("pos_only batch".into()));
    }
    let count = F::from_usize(posterior_a.len()).unwrap();
    let total = posterior_a
        .iter()
        .zip(posterior_b.iter())
        .fold(F::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    Ok(total / count)
}

/// Gradients of [`pos_only_loss`] with respect to both posteriors.
pub fn pos_only_grads<F: Float>(
    posterior_a: &ArrayView2<F>,
    posterior_b: &ArrayView2<F>,
) -> (Array2<F>, Array2<F>) {
    let count = F::from_usize(posterior_a.len()).unwrap();
    let two = F::of_f64(2.0);
    let da = ndarray::Zip::from(posterior_a)
        .and(posterior_b)
        .map_collect(|&a, &b| two * (a - b) / count);
    let db = da.mapv(|v| -v);
    (da, db)
}

/// The minimization-phase objective:
/// g_adv + lambda_mi * (mi_discrete [+ mi_continuous]) + lambda_c * contrastive,
/// with the contrastive slot gated by `mode`.
pub fn total_minimization_objective(
    g_adv: f64,
    mi_discrete: f64,
    mi_continuous: Option<f64>,
    contrastive: f64,
    hp: &HyperParams,
    mode: ContrastiveMode,
) -> f64 {
    let mi = mi_discrete + mi_continuous.unwrap_or(0.0);
    let c = match mode {
        ContrastiveMode::None => 0.0,
        ContrastiveMode::PosOnly | ContrastiveMode::Full => contrastive,
    };
    g_adv + hp.lambda_mi * mi + hp.lambda_contrastive * c
}

fn check_same_shape<F: Float>(
    a: &ArrayView2<F>,
    b: &ArrayView2<F>,
    what: &str,
) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Mean entropy of a batch of simplex rows (used by invariant checks).
pub fn mean_row_entropy<F: Float>(rows: &ArrayView2<F>) -> F {
    let n = F::from_usize(rows.nrows()).unwrap();
    rows.axis_iter(Axis(0))
        .fold(F::zero(), |acc, row| acc + crate::nn::ops::entropy(&row))
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference, max_relative_error};
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force NT-Xent: literal per-anchor evaluation with scalar ops.
    /// Kept deliberately independent of the library implementation.
    fn ntxent_brute(features: &Array2<f64>, pair_index: &[usize], t: f64) -> f64 {
        let rows = features.nrows();
        let n = rows / 2;
        let cos = |a: usize, b: usize| -> f64 {
            let fa = features.row(a);
            let fb = features.row(b);
            let dot: f64 = fa.iter().zip(fb.iter()).map(|(x, y)| x * y).sum();
            let na: f64 = fa.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = fb.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut total = 0.0;
        for i in 0..n {
            let j = pair_index[i];
            let num = (cos(i, j) / t).exp();
            let mut den = 0.0;
            for k in 0..rows {
                if k != i {
                    den += (cos(i, k) / t).exp();
                }
            }
            total += -(num / den).ln();
        }
        total
    }

    #[test]
    fn adversarial_hand_values() {
        // Zero scores: sigmoid = 1/2 on both sides.
        let zeros = Array1::from_elem(8, 0.0f64);
        let (d, g) = adversarial_losses(&zeros.view(), &zeros.view()).unwrap();
        assert!((d - 2.0 * (2.0f64).ln()).abs() < 1e-12);
        assert!((g - (2.0f64).ln()).abs() < 1e-12);

        // Perfect discriminator limit.
        let real = Array1::from_elem(4, 100.0f64);
        let fake = Array1::from_elem(4, -100.0f64);
        let (d, _) = adversarial_losses(&real.view(), &fake.view()).unwrap();
        assert!(d < 1e-10);

        // Monotonicity of the generator loss in the fake score.
        let (_, g_low) =
            adversarial_losses(&zeros.view(), &Array1::from_elem(4, -1.0f64).view()).unwrap();
        let (_, g_high) =
            adversarial_losses(&zeros.view(), &Array1::from_elem(4, 1.0f64).view()).unwrap();
        assert!(g_high < g_low);

        assert!(adversarial_losses::<f64>(
            &Array1::zeros(0).view(),
            &zeros.view()
        )
        .is_err());
    }

    #[test]
    fn adversarial_grads_match_finite_differences() {
        let real = array![0.3f64, -0.7, 1.2];
        let fake = array![-0.2f64, 0.9, 0.1, -1.5];
        let (dr, df) = d_loss_grads(&real.view(), &fake.view());
        let num_dr = finite_difference(&real, 1e-6, |r| {
            adversarial_losses(&r.view(), &fake.view()).unwrap().0
        });
        let num_df = finite_difference(&fake, 1e-6, |f| {
            adversarial_losses(&real.view(), &f.view()).unwrap().0
        });
        assert!(max_relative_error(&dr, &num_dr) < 1e-6);
        assert!(max_relative_error(&df, &num_df) < 1e-6);

        let dg = g_adv_loss_grad(&fake.view());
        let num_dg = finite_difference(&fake, 1e-6, |f| {
            adversarial_losses(&real.view(), &f.view()).unwrap().1
        });
        assert!(max_relative_error(&dg, &num_dg) < 1e-6);
    }

    #[test]
    fn mi_discrete_uniform_posterior_gives_ln_k() {
        let codes = array![[0.7f64, 0.2, 0.1], [0.0, 1.0, 0.0]];
        let logits = Array2::<f64>::zeros((2, 3));
        let loss = mi_discrete_loss(&codes.view(), &logits.view()).unwrap();
        assert!((loss - (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mi_discrete_matched_onehot_approaches_zero() {
        let codes = array![[1.0f64, 0.0], [0.0, 1.0]];
        let logits = array![[60.0f64, -60.0], [-60.0, 60.0]];
        let loss = mi_discrete_loss(&codes.view(), &logits.view()).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn mi_discrete_hand_oracle() {
        // Scalar hand computation (see scripts in the test body):
        // codes [[0.7,0.2,0.1],[0.1,0.1,0.8]], logits [[1,0,-1],[0.5,0.5,-0.5]].
        let codes = array![[0.7f64, 0.2, 0.1], [0.1, 0.1, 0.8]];
        let logits = array![[1.0f64, 0.0, -1.0], [0.5, 0.5, -0.5]];
        // Row 1: lse = ln(e^1 + 1 + e^-1), terms -(0.7(1-lse) + 0.2(0-lse) + 0.1(-1-lse))
        let lse1 = (1.0f64.exp() + 1.0 + (-1.0f64).exp()).ln();
        let l1 = -(0.7 * (1.0 - lse1) + 0.2 * (0.0 - lse1) + 0.1 * (-1.0 - lse1));
        let lse2 = (0.5f64.exp() + 0.5f64.exp() + (-0.5f64).exp()).ln();
        let l2 = -(0.1 * (0.5 - lse2) + 0.1 * (0.5 - lse2) + 0.8 * (-0.5 - lse2));
        let expected = (l1 + l2) / 2.0;
        let loss = mi_discrete_loss(&codes.view(), &logits.view()).unwrap();
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
    }

    #[test]
    fn mi_discrete_bounded_below_by_code_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mut code = Array1::from_shape_simple_fn(5, || rng.random_range(0.01..1.0f64));
            let s = code.sum();
            code.mapv_inplace(|v| v / s);
            let logits =
                Array2::from_shape_simple_fn((1, 5), || rng.random_range(-3.0..3.0f64));
            let codes = code.clone().insert_axis(Axis(0));
            let loss = mi_discrete_loss(&codes.view(), &logits.view()).unwrap();
            let h = crate::nn::ops::entropy(&code.view());
            assert!(loss >= h - 1e-12, "cross-entropy {loss} < entropy {h}");
        }
    }

    #[test]
    fn mi_discrete_grads_match_finite_differences() {
        let codes = array![[0.6f64, 0.3, 0.1], [0.2, 0.2, 0.6]];
        let logits = array![[0.4f64, -0.3, 0.9], [1.1, 0.0, -0.7]];
        let (dc, dq) = mi_discrete_grads(&codes.view(), &logits.view());
        let num_dc = finite_difference(&codes, 1e-6, |c| {
            mi_discrete_loss(&c.view(), &logits.view()).unwrap()
        });
        let num_dq = finite_difference(&logits, 1e-6, |q| {
            mi_discrete_loss(&codes.view(), &q.view()).unwrap()
        });
        assert!(max_relative_error(&dc, &num_dc) < 1e-6);
        assert!(max_relative_error(&dq, &num_dq) < 1e-6);
    }

    #[test]
    fn mi_continuous_hand_values() {
        // r = mean, logvar = 0: NLL is 0.5 ln(2 pi) per dimension.
        let r = array![[0.3f64, -0.8]];
        let mu = r.clone();
        let lv = Array2::<f64>::zeros((1, 2));
        let nll = mi_continuous_loss(&r.view(), &mu.view(), &lv.view()).unwrap();
        let per_dim = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((nll - 2.0 * per_dim).abs() < 1e-12);

        // NLL decreases as the mean approaches r at fixed variance.
        let far = array![[1.3f64, 0.2]];
        let near = array![[0.4f64, -0.7]];
        let nll_far = mi_continuous_loss(&r.view(), &far.view(), &lv.view()).unwrap();
        let nll_near = mi_continuous_loss(&r.view(), &near.view(), &lv.view()).unwrap();
        assert!(nll_near < nll_far);

        // Two dims = sum of the per-dim NLLs.
        let single_a = mi_continuous_loss(
            &r.slice(ndarray::s![.., 0..1]),
            &far.slice(ndarray::s![.., 0..1]),
            &lv.slice(ndarray::s![.., 0..1]),
        )
        .unwrap();
        let single_b = mi_continuous_loss(
            &r.slice(ndarray::s![.., 1..2]),
            &far.slice(ndarray::s![.., 1..2]),
            &lv.slice(ndarray::s![.., 1..2]),
        )
        .unwrap();
        assert!((nll_far - (single_a + single_b)).abs() < 1e-12);
    }

    #[test]
    fn mi_continuous_grads_match_finite_differences() {
        let r = array![[0.3f64, -0.8], [0.1, 0.6]];
        let mu = array![[0.5f64, -0.5], [-0.2, 0.7]];
        let lv = array![[0.2f64, -0.4], [0.1, 0.3]];
        let (dmu, dlv) = mi_continuous_grads(&r.view(), &mu.view(), &lv.view());
        let num_dmu = finite_difference(&mu, 1e-6, |m| {
            mi_continuous_loss(&r.view(), &m.view(), &lv.view()).unwrap()
        });
        let num_dlv = finite_difference(&lv, 1e-6, |l| {
            mi_continuous_loss(&r.view(), &mu.view(), &l.view()).unwrap()
        });
        assert!(max_relative_error(&dmu, &num_dmu) < 1e-6);
        assert!(max_relative_error(&dlv, &num_dlv) < 1e-6);
    }

    #[test]
    fn ntxent_identical_features_hits_ln_2n_minus_1() {
        let features = Array2::from_elem((4, 3), 0.7f64);
        let pairs = vec![2, 3, 0, 1];
        let loss = ntxent_loss(&features.view(), &pairs, 0.5).unwrap();
        assert!((loss - 2.0 * (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ntxent_unit_vector_hand_oracle() {
        // e1, e1, e2, e2 with pairing (0<->1, 2<->3), temperature 1:
        // both anchors give ln(e + 2) - 1.
        let features = array![
            [1.0f64, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [0.0, 1.0]
        ];
        let pairs = vec![1, 0, 3, 2];
        let loss = ntxent_loss(&features.view(), &pairs, 1.0).unwrap();
        let expected = 2.0 * ((std::f64::consts::E + 2.0).ln() - 1.0);
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
        // And agrees with the brute-force evaluator.
        let brute = ntxent_brute(&features, &pairs, 1.0);
        assert!((loss - brute).abs() < 1e-12);
    }

    #[test]
    fn ntxent_matches_brute_force_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for &n in &[2usize, 4, 8] {
            for &d in &[3usize, 16] {
                let features =
                    Array2::from_shape_simple_fn((2 * n, d), || rng.random_range(-1.0..1.0f64));
                let pairs: Vec<usize> = (0..2 * n)
                    .map(|i| if i < n { i + n } else { i - n })
                    .collect();
                let loss = ntxent_loss(&features.view(), &pairs, 0.5).unwrap();
                let brute = ntxent_brute(&features, &pairs, 0.5);
                assert!((loss - brute).abs() < 1e-9, "n={n} d={d}");
            }
        }
    }

    #[test]
    fn ntxent_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let features = Array2::from_shape_simple_fn((8, 5), || rng.random_range(-1.0..1.0f64));
        let pairs: Vec<usize> = vec![4, 5, 6, 7, 0, 1, 2, 3];
        let grad = ntxent_grad(&features.view(), &pairs, 0.5).unwrap();
        let num = finite_difference(&features, 1e-6, |f| {
            ntxent_loss(&f.view(), &pairs, 0.5).unwrap()
        });
        let err = max_relative_error(&grad, &num);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn ntxent_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let features = Array2::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0f64));
        let pairs = vec![3, 4, 5, 0, 1, 2];
        let a = ntxent_loss(&features.view(), &pairs, 0.7).unwrap();
        let scaled = features.mapv(|v| v * 5.0);
        let b = ntxent_loss(&scaled.view(), &pairs, 0.7).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn ntxent_decreases_when_positive_similarity_rises() {
        // Anchor 0's positive is row 2. Bring row 2 closer to row 0 while
        // keeping every other vector fixed.
        let base = array![
            [1.0f64, 0.0],
            [0.0, 1.0],
            [0.5, 0.8660254037844386],  // 60 degrees from anchor 0
            [-0.3, 0.9539392014169457]
        ];
        let closer = array![
            [1.0f64, 0.0],
            [0.0, 1.0],
            [0.8660254037844386, 0.5],  // 30 degrees from anchor 0
            [-0.3, 0.9539392014169457]
        ];
        let pairs = vec![2, 3, 0, 1];
        // Only anchor 0/1 terms change; compare the anchor-0 contribution via
        // full losses with the anchor-1 parts identical... they are not, so
        // isolate by using the same row 1 and row 3 and checking the total.
        let a = ntxent_loss(&base.view(), &pairs, 0.5).unwrap();
        let b = ntxent_loss(&closer.view(), &pairs, 0.5).unwrap();
        assert!(b < a, "loss should drop when a positive pair aligns: {b} vs {a}");
    }

    #[test]
    fn ntxent_rejects_degenerate_inputs() {
        let two_rows = Array2::from_elem((2, 2), 1.0f64);
        assert!(ntxent_loss(&two_rows.view(), &[1, 0], 0.5).is_err());

        let mut with_zero = Array2::from_elem((4, 2), 1.0f64);
        with_zero.row_mut(1).fill(0.0);
        assert!(ntxent_loss(&with_zero.view(), &[2, 3, 0, 1], 0.5).is_err());

        let fine = Array2::from_elem((4, 2), 1.0f64);
        assert!(ntxent_loss(&fine.view(), &[2, 3, 0, 0], 0.5).is_err()); // not an involution
        assert!(ntxent_loss(&fine.view(), &[0, 1, 2, 3], 0.5).is_err()); // fixed points
    }

    #[test]
    fn ntxent_invariant_under_consistent_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let features = Array2::from_shape_simple_fn((8, 4), || rng.random_range(-1.0..1.0f64));
        let pairs: Vec<usize> = vec![4, 5, 6, 7, 0, 1, 2, 3];
        let base = ntxent_loss(&features.view(), &pairs, 0.5).unwrap();

        // Swap the two anchors (rows 0 and 1) and their positives (4 and 5):
        // the anchor set is preserved, so the loss is unchanged.
        let perm = [1usize, 0, 2, 3, 5, 4, 6, 7];
        let mut permuted = Array2::zeros(features.raw_dim());
        for (new_i, &old_i) in perm.iter().enumerate() {
            permuted.row_mut(new_i).assign(&features.row(old_i));
        }
        let mut inv = vec![0usize; 8];
        for (new_i, &old_i) in perm.iter().enumerate() {
            inv[old_i] = new_i;
        }
        let new_pairs: Vec<usize> = (0..8).map(|new_i| inv[pairs[perm[new_i]]]).collect();
        let permuted_loss = ntxent_loss(&permuted.view(), &new_pairs, 0.5).unwrap();
        assert!((base - permuted_loss).abs() < 1e-9);
    }

    #[test]
    fn pos_only_mse_and_grads() {
        let a = array![[0.6f64, 0.4], [0.1, 0.9]];
        let b = array![[0.5f64, 0.5], [0.3, 0.7]];
        let loss = pos_only_loss(&a.view(), &b.view()).unwrap();
        let expected = (0.01 + 0.01 + 0.04 + 0.04) / 4.0;
        assert!((loss - expected).abs() < 1e-12);
        let (da, db) = pos_only_grads(&a.view(), &b.view());
        let num_da = finite_difference(&a, 1e-6, |x| pos_only_loss(&x.view(), &b.view()).unwrap());
        let num_db = finite_difference(&b, 1e-6, |x| pos_only_loss(&a.view(), &x.view()).unwrap());
        assert!(max_relative_error(&da, &num_da) < 1e-6);
        assert!(max_relative_error(&db, &num_db) < 1e-6);
    }

    #[test]
    fn total_objective_linear_combination() {
        let hp = HyperParams {
            lambda_mi: 1.0,
            lambda_contrastive: 10.0,
            ntxent_temperature: 0.5,
        };
        let total =
            total_minimization_objective(1.0, 0.5, None, 0.2, &hp, ContrastiveMode::Full);
        assert!((total - 3.5).abs() < 1e-12);
        let none = total_minimization_objective(1.0, 0.5, None, 0.2, &hp, ContrastiveMode::None);
        let zero_weight = total_minimization_objective(
            1.0,
            0.5,
            None,
            0.2,
            &HyperParams {
                lambda_contrastive: 0.0,
                ..hp
            },
            ContrastiveMode::Full,
        );
        assert!((none - 1.5).abs() < 1e-12);
        assert!((none - zero_weight).abs() < 1e-12);
    }
}
