//! Measurement protocol: class-conditional generation into a confusion
//! matrix, normalized mutual information and average-entropy scores,
//! nearest-neighbor probes of the recognition features, and multi-run
//! aggregation.

pub mod classifier;
pub mod knn;

pub use classifier::{train_eval_classifier, ClassifierState};
pub use knn::knn_classify;

use crate::error::{Error, Result};
use crate::latent::{sample_continuous, sample_noise};
use crate::model::{Generator, NetworkConfig};
use crate::nn::Float;
use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Counts of (latent code used for generation) x (classifier-predicted
/// class). Rows index latent codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
    pub n_per_code: u64,
}

impl ConfusionMatrix {
    pub fn new(counts: Array2<u64>, n_per_code: u64) -> Result<Self> {
        if counts.nrows() == 0 || counts.ncols() == 0 {
            return Err(Error::EmptyInput("confusion matrix".into()));
        }
        for (i, row) in counts.rows().into_iter().enumerate() {
            let sum: u64 = row.sum();
            if sum != n_per_code {
                return Err(Error::InvalidArgument(format!(
                    "confusion row {i} sums to {sum}, expected {n_per_code}"
                )));
            }
        }
        Ok(Self { counts, n_per_code })
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }
}

/// Scores for one trained run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nmi: f64,
    pub ent_rows: f64,
    pub ent_cols: f64,
    pub ent: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub knn_accuracy: Option<f64>,
}

/// Generate `n_per_code` images per one-hot latent code with `sample`,
/// classify each, and accumulate counts. `sample(code, count, rng)` must
/// return `count` images for that code; the real-generator wrapper is
/// [`build_confusion`].
pub fn build_confusion_with<S>(
    mut sample: S,
    k_latent: usize,
    classifier: &ClassifierState,
    n_per_code: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConfusionMatrix>
where
    S: FnMut(usize, usize, &mut ChaCha8Rng) -> Result<Array4<f32>>,
{
    if n_per_code == 0 {
        return Err(Error::InvalidArgument("n_per_code must be at least 1".into()));
    }
    let mut counts = Array2::<u64>::zeros((k_latent, classifier.classes));
    const CHUNK: usize = 250;
    for code in 0..k_latent {
        let mut remaining = n_per_code;
        while remaining > 0 {
            let count = remaining.min(CHUNK);
            let images = sample(code, count, rng)?;
            if images.dim().0 != count {
                return Err(Error::ShapeMismatch(format!(
                    "sampler returned {} images, wanted {count}",
                    images.dim().0
                )));
            }
            for pred in classifier.classify(&images.view()) {
                counts[[code, pred]] += 1;
            }
            remaining -= count;
        }
    }
    ConfusionMatrix::new(counts, n_per_code as u64)
}

/// The paper protocol against a trained generator: for each latent
/// category, condition on the hard one-hot code with fresh noise (and fresh
/// continuous codes when enabled) and classify the generations.
pub fn build_confusion<F: Float>(
    gen: &Generator<F>,
    net: &NetworkConfig,
    classifier: &ClassifierState,
    n_per_code: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConfusionMatrix> {
    let k = net.code_dim;
    build_confusion_with(
        |code, count, rng| {
            let mut input = Array2::<F>::zeros((count, net.gen_input_dim()));
            for i in 0..count {
                let z = sample_noise::<F, _>(net.noise_dim, rng);
                input
                    .slice_mut(ndarray::s![i, ..net.noise_dim])
                    .assign(&z);
                input[[i, net.noise_dim + code]] = F::one();
                if net.continuous_dim > 0 {
                    let r = sample_continuous::<F, _>(net.continuous_dim, rng);
                    input
                        .slice_mut(ndarray::s![i, net.noise_dim + k..])
                        .assign(&r);
                }
            }
            let images = gen.forward_eval(&input.view())?;
            Ok(images.mapv(|v| v.as_f64() as f32))
        },
        k,
        classifier,
        n_per_code,
        rng,
    )
}

/// Natural-log entropy of a count vector's empirical distribution; zero
/// vectors get the stated worst case, ln(len).
fn count_entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return (counts.len() as f64).ln();
    }
    let total = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Average entropy across rows (does each code generate one class?) and
/// across columns (does each class map to one code?); `ent` is the mean of
/// the two averages.
pub fn entropy_metric(matrix: &ConfusionMatrix) -> Result<(f64, f64, f64)> {
    if matrix.total() == 0 {
        return Err(Error::EmptyInput("all-zero confusion matrix".into()));
    }
    let rows: Vec<f64> = matrix
        .counts
        .rows()
        .into_iter()
        .map(|r| count_entropy(r.as_slice().unwrap()))
        .collect();
    let cols: Vec<f64> = matrix
        .counts
        .columns()
        .into_iter()
        .map(|c| count_entropy(&c.to_vec()))
        .collect();
    let ent_rows = rows.iter().sum::<f64>() / rows.len() as f64;
    let ent_cols = cols.iter().sum::<f64>() / cols.len() as f64;
    Ok((ent_rows, ent_cols, (ent_rows + ent_cols) / 2.0))
}

/// Normalized mutual information between the latent-code clustering (rows)
/// and the classifier clustering (columns) of the generated population:
/// I(A;B) / sqrt(H(A) H(B)), 0 when either marginal entropy vanishes.
pub fn nmi_metric(matrix: &ConfusionMatrix) -> Result<f64> {
    let total = matrix.total();
    if total == 0 {
        return Err(Error::EmptyInput("all-zero confusion matrix".into()));
    }
    let n = total as f64;
    let row_sums: Vec<f64> = matrix
        .counts
        .rows()
        .into_iter()
        .map(|r| r.sum() as f64)
        .collect();
    let col_sums: Vec<f64> = matrix
        .counts
        .columns()
        .into_iter()
        .map(|c| c.sum() as f64)
        .collect();
    let h = |sums: &[f64]| -> f64 {
        sums.iter()
            .filter(|&&s| s > 0.0)
            .map(|&s| {
                let p = s / n;
                -p * p.ln()
            })
            .sum()
    };
    let h_rows = h(&row_sums);
    let h_cols = h(&col_sums);
    if h_rows == 0.0 || h_cols == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in matrix.counts.rows().into_iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let p_ij = c as f64 / n;
                mi += p_ij * (p_ij * n * n / (row_sums[i] * col_sums[j])).ln();
            }
        }
    }
    Ok((mi / (h_rows * h_cols).sqrt()).clamp(0.0, 1.0))
}

/// Combine entropy and NMI scores for one run.
pub fn metrics_report(matrix: &ConfusionMatrix, knn_accuracy: Option<f64>) -> Result<MetricsReport> {
    let (ent_rows, ent_cols, ent) = entropy_metric(matrix)?;
    Ok(MetricsReport {
        nmi: nmi_metric(matrix)?,
        ent_rows,
        ent_cols,
        ent,
        knn_accuracy,
    })
}

/// Mean and population standard deviation of each metric across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub runs: usize,
    pub nmi: (f64, f64),
    pub ent_rows: (f64, f64),
    pub ent_cols: (f64, f64),
    pub ent: (f64, f64),
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub knn_accuracy: Option<(f64, f64)>,
}

fn mean_pstd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<AggregateMetrics> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("no metric reports to aggregate".into()));
    }
    let collect = |f: fn(&MetricsReport) -> f64| -> Vec<f64> { reports.iter().map(f).collect() };
    let knn: Option<Vec<f64>> = reports
        .iter()
        .map(|r| r.knn_accuracy)
        .collect::<Option<Vec<f64>>>();
    Ok(AggregateMetrics {
        runs: reports.len(),
        nmi: mean_pstd(&collect(|r| r.nmi)),
        ent_rows: mean_pstd(&collect(|r| r.ent_rows)),
        ent_cols: mean_pstd(&collect(|r| r.ent_cols)),
        ent: mean_pstd(&collect(|r| r.ent)),
        knn_accuracy: knn.map(|v| mean_pstd(&v)),
    })
}
