//! Experiment orchestration: train/evaluate over the variant x seed grid,
//! emit per-run artifacts, and aggregate tables.

use crate::artifacts::emit_grid;
use crate::config::{config_hash, ExperimentConfig, SplitSelector};
use elastic_infogan::data::{
    generate_split, load_canonical_splits, load_mnist, subsample, AugmentationPipeline,
    DatasetKind, ImbalancedSplit, LabeledImageSet, MnistSplit,
};
use elastic_infogan::error::{Error, Result};
use elastic_infogan::evaluation::{
    aggregate_runs, build_confusion, knn_classify, metrics_report, train_eval_classifier,
    AggregateMetrics, ClassifierState, MetricsReport,
};
use elastic_infogan::model::q_features;
use elastic_infogan::training::{run_training, Baseline, TrainConfig};
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Environment variable that, when set, becomes the root under which the
/// experiment's `out.dir` is created.
pub const OUT_ROOT_ENV: &str = "ELASTIC_INFOGAN_OUT";

/// Fixed stream ids so every derived rng is decoupled from the others.
const CLASSIFIER_SEED: u64 = 0x45564c43; // "EVLC"
const EVAL_SEED_OFFSET: u64 = 0x9e3779b9;

/// One run's scores as serialized to metrics.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub variant: String,
    pub seed: u64,
    pub split: String,
    pub k: usize,
    pub classifier_validation_accuracy: f64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics_json: PathBuf,
    pub losses_csv: PathBuf,
    pub prior_csv: PathBuf,
    pub grid_png: PathBuf,
}

/// What `run` leaves behind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub split_label: String,
    pub runs: Vec<RunRecord>,
    pub table_csv: PathBuf,
    pub table_txt: PathBuf,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Resolve the experiment output directory, honoring the env override.
pub fn resolve_out_dir(config: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(&config.out_dir),
        None => config.out_dir.clone(),
    }
}

fn resolve_split(config: &ExperimentConfig) -> Result<(ImbalancedSplit, String)> {
    match &config.split {
        SplitSelector::Canonical(index) => {
            let table = load_canonical_splits(config.dataset_kind)?;
            let split = table.get(index - 1).cloned().ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "split.canonical = {index} out of range: {} splits for {}",
                    table.len(),
                    config.dataset_kind
                ))
            })?;
            Ok((split, format!("canonical-{index}")))
        }
        SplitSelector::Generated { seed, min_prop } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let split = generate_split(config.net.code_dim, &mut rng, *min_prop, *seed)?;
            Ok((split, format!("generated-{seed}")))
        }
    }
}

/// Load the dataset named by the config: the standard binary archives for
/// digits, a directory-per-class raster layout otherwise.
pub fn load_dataset(config: &ExperimentConfig) -> Result<LabeledImageSet> {
    match config.dataset_kind {
        DatasetKind::Mnist => load_mnist(&config.dataset_path, MnistSplit::Train),
        _ => load_image_directory(
            &config.dataset_path,
            config.net.image_side,
            config.net.image_channels,
        ),
    }
}

/// Directory-per-class ingestion of common raster images: subdirectories in
/// lexical order are the classes; every contained file must decode.
pub fn load_image_directory(dir: &Path, side: usize, channels: usize) -> Result<LabeledImageSet> {
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidConfig(format!(
            "raster ingestion supports 1 or 3 channels, got {channels}"
        )));
    }
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} has {} class directories; need at least 2",
            dir.display(),
            class_dirs.len()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (class, class_dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(class_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file).map_err(|e| {
                Error::InvalidArgument(format!("failed to decode {}: {e}", file.display()))
            })?;
            let img = img.resize_exact(side as u32, side as u32, image::imageops::FilterType::Triangle);
            let mut plane = vec![0f32; channels * side * side];
            if channels == 1 {
                let gray = img.to_luma8();
                for (i, p) in gray.pixels().enumerate() {
                    plane[i] = p.0[0] as f32 / 127.5 - 1.0;
                }
            } else {
                let rgb = img.to_rgb8();
                for (i, p) in rgb.pixels().enumerate() {
                    for ch in 0..3 {
                        plane[ch * side * side + i] = p.0[ch] as f32 / 127.5 - 1.0;
                    }
                }
            }
            images.push(plane);
            labels.push(class);
        }
    }
    let n = labels.len();
    let mut array = ndarray::Array4::<f32>::zeros((n, channels, side, side));
    for (i, plane) in images.iter().enumerate() {
        array
            .index_axis_mut(Axis(0), i)
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(plane);
    }
    LabeledImageSet::new(array, labels, class_dirs.len())
}

fn train_config_for(
    config: &ExperimentConfig,
    baseline: Baseline,
    seed: u64,
    split: &ImbalancedSplit,
) -> TrainConfig {
    let (prior_variant, contrastive_mode) = baseline.flags();
    TrainConfig {
        prior_variant,
        contrastive_mode,
        hyper: elastic_infogan::objectives::HyperParams {
            lambda_mi: config.lambda_mi,
            lambda_contrastive: config.lambda_contrastive,
            ntxent_temperature: config.ntxent_temperature,
        },
        gumbel_temperature: config.gumbel_temperature,
        learning_rate: config.learning_rate,
        prior_learning_rate: config.prior_learning_rate,
        adam_betas: config.adam_betas,
        batch_size: config.batch_size,
        epochs: config.epochs,
        seed,
        net: config.net.clone(),
        split: Some(split.clone()),
        augmentation: AugmentationPipeline::for_dataset(config.dataset_kind),
        checkpoint_interval_epochs: config.checkpoint_interval,
    }
}

/// Largest base size whose floor-rounded per-class demands fit the data.
fn auto_base_size(dataset: &LabeledImageSet, split: &ImbalancedSplit) -> usize {
    let counts = dataset.class_counts();
    split
        .proportions
        .iter()
        .zip(counts.iter())
        .map(|(&p, &avail)| (avail as f64 / p).floor() as usize)
        .min()
        .unwrap_or(0)
}

/// Score one trained run: confusion-matrix metrics plus the optional
/// nearest-neighbor probe over recognition features of real images.
fn evaluate_run(
    config: &ExperimentConfig,
    run_cfg: &TrainConfig,
    state: &elastic_infogan::training::TrainState<f32>,
    subsampled: &LabeledImageSet,
    classifier: &ClassifierState,
    seed: u64,
) -> Result<MetricsReport> {
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(EVAL_SEED_OFFSET));
    let confusion = build_confusion(
        &state.gen,
        &run_cfg.net,
        classifier,
        config.eval.n_per_code,
        &mut eval_rng,
    )?;
    let knn_accuracy = if config.eval.knn {
        let (train, test) = subsampled.split_80_20(&mut eval_rng);
        let feats_of = |set: &LabeledImageSet| -> Result<ndarray::Array2<f64>> {
            let mut out = ndarray::Array2::zeros((set.len(), run_cfg.net.feature_dim));
            for start in (0..set.len()).step_by(256) {
                let end = (start + 256).min(set.len());
                let batch = set.images.slice(ndarray::s![start..end, .., .., ..]);
                let f = q_features(&state.trunk, &state.q_head, &batch)?;
                out.slice_mut(ndarray::s![start..end, ..])
                    .assign(&f.mapv(|v| v as f64));
            }
            Ok(out)
        };
        let train_f = feats_of(&train)?;
        let test_f = feats_of(&test)?;
        Some(knn_classify(
            &train_f.view(),
            &train.labels,
            &test_f.view(),
            &test.labels,
            1,
            false,
        )?)
    } else {
        None
    };
    metrics_report(&confusion, knn_accuracy)
}

/// Execute the full experiment grid; every artifact path in the returned
/// manifest exists on disk.
pub fn run(config: &ExperimentConfig) -> Result<RunManifest> {
    let started_unix = now_unix();
    let out_dir = resolve_out_dir(config);
    std::fs::create_dir_all(&out_dir)?;

    let dataset = load_dataset(config)?;
    let (split, split_label) = resolve_split(config)?;
    if split.k() != dataset.num_classes {
        return Err(Error::InvalidConfig(format!(
            "split k = {} vs dataset classes = {}",
            split.k(),
            dataset.num_classes
        )));
    }

    let mut clf_rng = ChaCha8Rng::seed_from_u64(CLASSIFIER_SEED);
    let classifier = train_eval_classifier(&dataset, config.eval.classifier_epochs, &mut clf_rng)?;

    let mut runs = Vec::new();
    for &baseline in &config.variants {
        for &seed in &config.seeds {
            let run_dir = out_dir
                .join(baseline.name())
                .join(&split_label)
                .join(seed.to_string());
            std::fs::create_dir_all(&run_dir)?;

            let base = if config.base_size == 0 {
                auto_base_size(&dataset, &split)
            } else {
                config.base_size
            };
            let mut sub_rng = ChaCha8Rng::seed_from_u64(seed);
            let subsampled = subsample(&dataset, &split, base, &mut sub_rng)?;

            let run_cfg = train_config_for(config, baseline, seed, &split);
            let output = run_training::<f32>(&run_cfg, &subsampled, Some(&run_dir))?;

            let metrics = evaluate_run(
                config,
                &run_cfg,
                &output.state,
                &subsampled,
                &classifier,
                seed,
            )?;
            let run_metrics = RunMetrics {
                variant: baseline.name().to_string(),
                seed,
                split: split_label.clone(),
                k: run_cfg.net.code_dim,
                classifier_validation_accuracy: classifier.validation_accuracy,
                metrics,
            };
            let metrics_json = run_dir.join("metrics.json");
            std::fs::write(&metrics_json, serde_json::to_vec_pretty(&run_metrics)?)?;

            let grid_png = run_dir.join("grid.png");
            let mut grid_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            emit_grid(
                &output.state.gen,
                &run_cfg.net,
                config.net.code_dim,
                &mut grid_rng,
                &grid_png,
            )?;

            runs.push(RunRecord {
                variant: baseline.name().to_string(),
                seed,
                dir: run_dir.clone(),
                checkpoint: run_dir.join("checkpoint.ckpt"),
                metrics_json,
                losses_csv: run_dir.join("losses.csv"),
                prior_csv: run_dir.join("prior.csv"),
                grid_png,
            });
        }
    }

    let tables = report(&[out_dir.clone()])?;
    let table_csv = out_dir.join("table.csv");
    let table_txt = out_dir.join("table.txt");
    std::fs::write(&table_csv, &tables.csv)?;
    std::fs::write(&table_txt, &tables.text)?;

    let manifest = RunManifest {
        config: config.clone(),
        config_hash: config_hash(config),
        started_unix,
        finished_unix: now_unix(),
        split_label,
        runs,
        table_csv,
        table_txt,
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Aggregated per-variant tables.
pub struct ReportTables {
    pub csv: String,
    pub text: String,
    pub aggregates: Vec<(String, AggregateMetrics)>,
}

fn collect_metrics(dir: &Path, found: &mut Vec<RunMetrics>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_metrics(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == "metrics.json") {
            let bytes = std::fs::read(&path)?;
            found.push(serde_json::from_slice(&bytes)?);
        }
    }
    Ok(())
}

/// Pure function of the per-run metric files under the given directories.
pub fn report(dirs: &[PathBuf]) -> Result<ReportTables> {
    let mut all = Vec::new();
    for dir in dirs {
        collect_metrics(dir, &mut all)?;
    }
    if all.is_empty() {
        return Err(Error::EmptyInput("no metrics.json found".into()));
    }
    let k0 = all[0].k;
    if let Some(bad) = all.iter().find(|m| m.k != k0) {
        return Err(Error::InvalidArgument(format!(
            "mixed k across runs: {} vs {}",
            bad.k, k0
        )));
    }

    let mut by_variant: BTreeMap<String, Vec<MetricsReport>> = BTreeMap::new();
    for m in &all {
        by_variant
            .entry(m.variant.clone())
            .or_default()
            .push(m.metrics);
    }

    // Table-1 row order.
    let canonical_order = [
        "uniform",
        "gumbel",
        "gumbel_pos",
        "elastic",
        "ground_truth",
        "ground_truth_ntxent",
    ];
    let mut ordered: Vec<(String, Vec<MetricsReport>)> = Vec::new();
    for name in canonical_order {
        if let Some(v) = by_variant.remove(name) {
            ordered.push((name.to_string(), v));
        }
    }
    for (name, v) in by_variant {
        ordered.push((name, v));
    }

    let mut csv = String::from(
        "variant,runs,nmi_mean,nmi_std,ent_mean,ent_std,ent_rows_mean,ent_cols_mean,knn_mean,knn_std\n",
    );
    let mut text = format!(
        "{:<22} {:>4}  {:>16}  {:>16}\n",
        "variant", "runs", "NMI (mean+-std)", "ENT (mean+-std)"
    );
    let mut aggregates = Vec::new();
    for (name, reports) in ordered {
        let agg = aggregate_runs(&reports)?;
        let knn = agg
            .knn_accuracy
            .map(|(m, s)| (format!("{m:.6}"), format!("{s:.6}")))
            .unwrap_or_default();
        csv.push_str(&format!(
            "{name},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            agg.runs,
            agg.nmi.0,
            agg.nmi.1,
            agg.ent.0,
            agg.ent.1,
            agg.ent_rows.0,
            agg.ent_cols.0,
            knn.0,
            knn.1
        ));
        text.push_str(&format!(
            "{:<22} {:>4}  {:>7.4} +- {:>5.3}  {:>7.4} +- {:>5.3}\n",
            name, agg.runs, agg.nmi.0, agg.nmi.1, agg.ent.0, agg.ent.1
        ));
        aggregates.push((name, agg));
    }
    Ok(ReportTables {
        csv,
        text,
        aggregates,
    })
}
