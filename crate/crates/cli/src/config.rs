//! Flat key-value experiment configuration.
//!
//! One `key = value` per line, dotted section prefixes, `#` comments.
//! Unknown keys are errors; every diagnostic carries its 1-based line.

use elastic_infogan::data::DatasetKind;
use elastic_infogan::error::{Error, Result};
use elastic_infogan::model::NetworkConfig;
use elastic_infogan::training::Baseline;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

/// Which split a run trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSelector {
    /// 1-based index into the bundled table for the dataset kind.
    Canonical(usize),
    Generated { seed: u64, min_prop: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_per_code: usize,
    pub knn: bool,
    pub classifier_epochs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_per_code: 1000,
            knn: false,
            classifier_epochs: 3,
        }
    }
}

/// A full experiment: the training grid plus dataset binding, evaluation
/// options, and output location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset_kind: DatasetKind,
    pub dataset_path: PathBuf,
    pub split: SplitSelector,
    /// Subsample base size; 0 means the largest size the split allows.
    pub base_size: usize,
    pub variants: Vec<Baseline>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub prior_learning_rate: Option<f64>,
    pub lambda_mi: f64,
    pub lambda_contrastive: f64,
    pub gumbel_temperature: f64,
    pub ntxent_temperature: f64,
    pub adam_betas: (f64, f64),
    pub checkpoint_interval: usize,
    pub net: NetworkConfig,
    pub eval: EvalOptions,
    pub out_dir: PathBuf,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::SplitParse {
        line,
        message: message.into(),
    }
}

fn parse_list<T: FromStr>(line: usize, value: &str, what: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for piece in value.split(',') {
        let piece = piece.trim();
        if piece.is_empty() {
            continue;
        }
        out.push(
            piece
                .parse::<T>()
                .map_err(|_| parse_err(line, format!("bad {what} entry '{piece}'")))?,
        );
    }
    if out.is_empty() {
        return Err(parse_err(line, format!("empty {what} list")));
    }
    Ok(out)
}

fn parse_scalar<T: FromStr>(line: usize, value: &str, key: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| parse_err(line, format!("bad value for {key}: '{value}'")))
}

fn parse_pair(line: usize, value: &str, key: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(parse_err(line, format!("{key} needs two comma-separated values")));
    }
    Ok((
        parse_scalar(line, parts[0], key)?,
        parse_scalar(line, parts[1], key)?,
    ))
}

/// Parse the experiment file format.
pub fn parse_experiment_config(text: &str) -> Result<ExperimentConfig> {
    // Collect key -> (line, value); reject duplicates.
    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(line_no, "expected 'key = value'"))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(parse_err(line_no, "empty key"));
        }
        if entries.insert(key.clone(), (line_no, value)).is_some() {
            return Err(parse_err(line_no, format!("duplicate key '{key}'")));
        }
    }

    let mut take = |key: &str| entries.remove(key);

    let require = |slot: Option<(usize, String)>, key: &str| -> Result<(usize, String)> {
        slot.ok_or_else(|| parse_err(0, format!("missing required key '{key}'")))
    };

    let (nl, name) = require(take("experiment.name"), "experiment.name")?;
    if name.is_empty() {
        return Err(parse_err(nl, "experiment.name must not be empty"));
    }
    let (dl, dk) = require(take("dataset.kind"), "dataset.kind")?;
    let dataset_kind: DatasetKind = dk
        .parse()
        .map_err(|_| parse_err(dl, format!("unknown dataset kind '{dk}'")))?;
    let (_, dp) = require(take("dataset.path"), "dataset.path")?;
    let (_, od) = require(take("out.dir"), "out.dir")?;

    let (vl, vs) = require(take("variants"), "variants")?;
    let variants: Vec<Baseline> = parse_list(vl, &vs, "variant")?;
    let (sl, ss) = require(take("seeds"), "seeds")?;
    let seeds: Vec<u64> = parse_list(sl, &ss, "seed")?;

    // Split selector: exactly one of split.canonical / split.generated_seed.
    let canonical = take("split.canonical");
    let generated = take("split.generated_seed");
    let min_prop = take("split.min_prop");
    let split = match (canonical, generated) {
        (Some((l, v)), None) => {
            let idx: usize = parse_scalar(l, &v, "split.canonical")?;
            if idx == 0 {
                return Err(parse_err(l, "split.canonical is 1-based"));
            }
            SplitSelector::Canonical(idx)
        }
        (None, Some((l, v))) => SplitSelector::Generated {
            seed: parse_scalar(l, &v, "split.generated_seed")?,
            min_prop: match &min_prop {
                Some((ml, mv)) => parse_scalar(*ml, mv, "split.min_prop")?,
                None => 0.02,
            },
        },
        (Some((l, _)), Some(_)) => {
            return Err(parse_err(
                l,
                "split.canonical and split.generated_seed are mutually exclusive",
            ))
        }
        (None, None) => return Err(parse_err(0, "missing split.canonical or split.generated_seed")),
    };

    // Network: preset plus optional overrides.
    let mut net = match take("net.preset") {
        Some((l, v)) => match v.as_str() {
            "mnist" => NetworkConfig::mnist(),
            "mnist_desk" => NetworkConfig::mnist_desk(),
            other => return Err(parse_err(l, format!("unknown net.preset '{other}'"))),
        },
        None => NetworkConfig::mnist(),
    };
    if let Some((l, v)) = take("net.image_side") {
        net.image_side = parse_scalar(l, &v, "net.image_side")?;
    }
    if let Some((l, v)) = take("net.image_channels") {
        net.image_channels = parse_scalar(l, &v, "net.image_channels")?;
    }
    if let Some((l, v)) = take("net.noise_dim") {
        net.noise_dim = parse_scalar(l, &v, "net.noise_dim")?;
    }
    if let Some((l, v)) = take("net.code_dim") {
        net.code_dim = parse_scalar(l, &v, "net.code_dim")?;
    }
    if let Some((l, v)) = take("net.continuous_dim") {
        net.continuous_dim = parse_scalar(l, &v, "net.continuous_dim")?;
    }
    if let Some((l, v)) = take("net.feature_dim") {
        net.feature_dim = parse_scalar(l, &v, "net.feature_dim")?;
    }
    if let Some((l, v)) = take("net.gen_fc") {
        net.gen_fc = parse_scalar(l, &v, "net.gen_fc")?;
    }
    if let Some((l, v)) = take("net.gen_channels") {
        net.gen_channels = parse_pair(l, &v, "net.gen_channels")?;
    }
    if let Some((l, v)) = take("net.trunk_channels") {
        net.trunk_channels = parse_pair(l, &v, "net.trunk_channels")?;
    }
    if let Some((l, v)) = take("net.trunk_fc") {
        net.trunk_fc = parse_scalar(l, &v, "net.trunk_fc")?;
    }

    let mut eval = EvalOptions::default();
    if let Some((l, v)) = take("eval.n_per_code") {
        eval.n_per_code = parse_scalar(l, &v, "eval.n_per_code")?;
    }
    if let Some((l, v)) = take("eval.knn") {
        eval.knn = parse_scalar(l, &v, "eval.knn")?;
    }
    if let Some((l, v)) = take("eval.classifier_epochs") {
        eval.classifier_epochs = parse_scalar(l, &v, "eval.classifier_epochs")?;
    }

    let scalar_or = |slot: Option<(usize, String)>, key: &str, default: f64| -> Result<f64> {
        match slot {
            Some((l, v)) => parse_scalar(l, &v, key),
            None => Ok(default),
        }
    };
    let usize_or = |slot: Option<(usize, String)>, key: &str, default: usize| -> Result<usize> {
        match slot {
            Some((l, v)) => parse_scalar(l, &v, key),
            None => Ok(default),
        }
    };

    let epochs = usize_or(take("epochs"), "epochs", 200)?;
    let batch_size = usize_or(take("batch_size"), "batch_size", 64)?;
    let base_size = usize_or(take("subsample.base_size"), "subsample.base_size", 0)?;
    let checkpoint_interval = usize_or(take("checkpoint_interval"), "checkpoint_interval", 0)?;
    let learning_rate = scalar_or(take("learning_rate"), "learning_rate", 2e-4)?;
    let prior_learning_rate = match take("prior_learning_rate") {
        Some((l, v)) if !v.is_empty() => Some(parse_scalar(l, &v, "prior_learning_rate")?),
        _ => None,
    };
    let lambda_mi = scalar_or(take("lambda_mi"), "lambda_mi", 1.0)?;
    let lambda_contrastive = scalar_or(take("lambda_contrastive"), "lambda_contrastive", 10.0)?;
    let gumbel_temperature = scalar_or(take("gumbel_temperature"), "gumbel_temperature", 0.1)?;
    let ntxent_temperature = scalar_or(take("ntxent_temperature"), "ntxent_temperature", 0.5)?;
    let beta1 = scalar_or(take("adam_beta1"), "adam_beta1", 0.5)?;
    let beta2 = scalar_or(take("adam_beta2"), "adam_beta2", 0.999)?;

    if let Some((key, (line, _))) = entries.iter().next() {
        return Err(parse_err(*line, format!("unknown key '{key}'")));
    }

    let config = ExperimentConfig {
        name,
        dataset_kind,
        dataset_path: PathBuf::from(dp),
        split,
        base_size,
        variants,
        seeds,
        epochs,
        batch_size,
        learning_rate,
        prior_learning_rate,
        lambda_mi,
        lambda_contrastive,
        gumbel_temperature,
        ntxent_temperature,
        adam_betas: (beta1, beta2),
        checkpoint_interval,
        net,
        eval,
        out_dir: PathBuf::from(od),
    };
    net_sanity(&config)?;
    Ok(config)
}

fn net_sanity(config: &ExperimentConfig) -> Result<()> {
    config.net.validate()?;
    if config.eval.n_per_code == 0 {
        return Err(Error::InvalidConfig("eval.n_per_code must be at least 1".into()));
    }
    Ok(())
}

/// Canonical JSON serialization and its SHA-256 hex digest. The hash moves
/// exactly when a semantically meaningful field moves.
pub fn config_hash(config: &ExperimentConfig) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(&json);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
