//! Imbalanced class-proportion splits: the canonical published tables
//! (bundled verbatim as plain-text files) plus a seeded generator.
//!
//! Split file format: a `# dataset=<kind> k=<k>` header line followed by one
//! split per line, comma-separated decimal proportions.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

const MNIST_SPLITS: &str = include_str!("../../data/splits/mnist.splits");
const CARS_SPLITS: &str = include_str!("../../data/splits/cars.splits");
const CHAIRS_SPLITS: &str = include_str!("../../data/splits/chairs.splits");
const YTF_SPLITS: &str = include_str!("../../data/splits/ytf.splits");
const SHAPENET_SPLITS: &str = include_str!("../../data/splits/shapenet.splits");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cars,
    Chairs,
    Ytf,
    Shapenet,
}

impl DatasetKind {
    pub fn all() -> [DatasetKind; 5] {
        [
            DatasetKind::Mnist,
            DatasetKind::Cars,
            DatasetKind::Chairs,
            DatasetKind::Ytf,
            DatasetKind::Shapenet,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cars => "cars",
            DatasetKind::Chairs => "chairs",
            DatasetKind::Ytf => "ytf",
            DatasetKind::Shapenet => "shapenet",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cars" => Ok(DatasetKind::Cars),
            "chairs" => Ok(DatasetKind::Chairs),
            "ytf" => Ok(DatasetKind::Ytf),
            "shapenet" => Ok(DatasetKind::Shapenet),
            other => Err(Error::UnknownDatasetKind(other.to_string())),
        }
    }
}

/// Where a split came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSource {
    Canonical { dataset: DatasetKind, index: usize },
    Generated { seed: u64 },
    File,
}

/// Per-class proportions of a dataset subsampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalancedSplit {
    pub proportions: Vec<f64>,
    pub source: SplitSource,
}

/// Published tables are rounded per entry, so the admissible drift of the
/// sum grows with k: half an ulp of the third decimal per class, floored at
/// the nominal 1e-3.
pub fn simplex_tolerance(k: usize) -> f64 {
    (5e-4 * k as f64).max(1e-3)
}

impl ImbalancedSplit {
    /// Accepts proportions verbatim when they already lie on the simplex
    /// within [`simplex_tolerance`].
    pub fn new(proportions: Vec<f64>, source: SplitSource) -> Result<Self> {
        let k = proportions.len();
        if k < 2 {
            return Err(Error::InvalidArgument("split needs k >= 2".into()));
        }
        if proportions.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument(
                "split proportions must be positive and finite".into(),
            ));
        }
        let sum: f64 = proportions.iter().sum();
        if (sum - 1.0).abs() > simplex_tolerance(k) {
            return Err(Error::InvalidArgument(format!(
                "split proportions sum to {sum}, outside tolerance for k = {k}"
            )));
        }
        Ok(Self {
            proportions,
            source,
        })
    }

    /// Rescales arbitrary positive weights onto the simplex.
    pub fn normalized(weights: Vec<f64>, source: SplitSource) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::InvalidArgument("split needs k >= 2".into()));
        }
        if weights.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument(
                "split weights must be positive and finite".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        Ok(Self {
            proportions: weights.into_iter().map(|w| w / sum).collect(),
            source,
        })
    }

    pub fn k(&self) -> usize {
        self.proportions.len()
    }
}

/// Expected fraction of false-negative pairs under instance discrimination:
/// the probability two independent draws share a class, sum of p_i^2.
pub fn expected_false_negative(split: &ImbalancedSplit) -> f64 {
    split.proportions.iter().map(|p| p * p).sum()
}

/// Raw contents of a split file.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitFile {
    pub dataset: String,
    pub k: usize,
    pub splits: Vec<Vec<f64>>,
}

/// Parse the plain-text split format. Every error carries a 1-based line
/// number.
pub fn parse_split_file(text: &str) -> Result<SplitFile> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::SplitParse {
        line: 1,
        message: "empty file".into(),
    })?;
    let header = header.trim();
    let rest = header.strip_prefix('#').ok_or(Error::SplitParse {
        line: 1,
        message: "header must start with '#'".into(),
    })?;
    let mut dataset = None;
    let mut k = None;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("dataset=") {
            dataset = Some(v.to_string());
        } else if let Some(v) = tok.strip_prefix("k=") {
            k = Some(v.parse::<usize>().map_err(|e| Error::SplitParse {
                line: 1,
                message: format!("bad k: {e}"),
            })?);
        } else {
            return Err(Error::SplitParse {
                line: 1,
                message: format!("unexpected header token '{tok}'"),
            });
        }
    }
    let dataset = dataset.ok_or(Error::SplitParse {
        line: 1,
        message: "missing dataset= in header".into(),
    })?;
    let k = k.ok_or(Error::SplitParse {
        line: 1,
        message: "missing k= in header".into(),
    })?;
    if k < 2 || k > 100_000 {
        return Err(Error::SplitParse {
            line: 1,
            message: format!("k = {k} out of range"),
        });
    }

    let mut splits = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut values = Vec::with_capacity(k);
        for piece in line.split(',') {
            let v: f64 = piece.trim().parse().map_err(|e| Error::SplitParse {
                line: line_no,
                message: format!("bad proportion '{}': {e}", piece.trim()),
            })?;
            if !v.is_finite() || v <= 0.0 || v > 1.0 {
                return Err(Error::SplitParse {
                    line: line_no,
                    message: format!("proportion {v} outside (0, 1]"),
                });
            }
            values.push(v);
        }
        if values.len() != k {
            return Err(Error::SplitParse {
                line: line_no,
                message: format!("expected {k} proportions, found {}", values.len()),
            });
        }
        splits.push(values);
    }
    if splits.is_empty() {
        return Err(Error::SplitParse {
            line: 1,
            message: "no splits in file".into(),
        });
    }
    Ok(SplitFile { dataset, k, splits })
}

/// Render a split file in the bundled format.
pub fn format_split_file(dataset: &str, k: usize, splits: &[Vec<f64>]) -> String {
    let mut out = format!("# dataset={dataset} k={k}\n");
    for split in splits {
        let line: Vec<String> = split.iter().map(|p| format!("{p}")).collect();
        out.push_str(&line.join(", "));
        out.push('\n');
    }
    out
}

/// The published proportion tables, verbatim from the bundled files.
///
/// The cars/chairs tables as published are partial vectors that do not sum
/// to one, so those two are rescaled onto the simplex at load time; the
/// other kinds load verbatim.
pub fn load_canonical_splits(kind: DatasetKind) -> Result<Vec<ImbalancedSplit>> {
    let text = match kind {
        DatasetKind::Mnist => MNIST_SPLITS,
        DatasetKind::Cars => CARS_SPLITS,
        DatasetKind::Chairs => CHAIRS_SPLITS,
        DatasetKind::Ytf => YTF_SPLITS,
        DatasetKind::Shapenet => SHAPENET_SPLITS,
    };
    let file = parse_split_file(text)?;
    let needs_rescale = matches!(kind, DatasetKind::Cars | DatasetKind::Chairs);
    file.splits
        .into_iter()
        .enumerate()
        .map(|(i, props)| {
            let source = SplitSource::Canonical {
                dataset: kind,
                index: i + 1,
            };
            if needs_rescale {
                ImbalancedSplit::normalized(props, source)
            } else {
                ImbalancedSplit::new(props, source)
            }
        })
        .collect()
}

/// Draw one random split: raw weights uniform on [min_prop, 2/k], rescaled
/// to the simplex, resampled until every proportion lands in
/// [min_prop, 2.5/k].
pub fn generate_split<R: Rng>(k: usize, rng: &mut R, min_prop: f64, seed: u64) -> Result<ImbalancedSplit> {
    if k < 2 {
        return Err(Error::InvalidArgument("generate_split needs k >= 2".into()));
    }
    if !(min_prop > 0.0) || min_prop >= 1.0 / k as f64 {
        return Err(Error::InvalidArgument(format!(
            "min_prop must lie in (0, 1/k); got {min_prop} for k = {k}"
        )));
    }
    let hi = 2.0 / k as f64;
    let cap = 2.5 / k as f64;
    for _ in 0..10_000 {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(min_prop..hi)).collect();
        let sum: f64 = raw.iter().sum();
        let props: Vec<f64> = raw.iter().map(|w| w / sum).collect();
        if props.iter().all(|&p| p >= min_prop && p <= cap) {
            return ImbalancedSplit::new(props, SplitSource::Generated { seed });
        }
    }
    Err(Error::InvalidArgument(
        "generate_split failed to satisfy bounds after 10000 attempts".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn canonical_mnist_table() {
        let splits = load_canonical_splits(DatasetKind::Mnist).unwrap();
        // The bundled table carries the 47 splits present in the published
        // listing (the stated count is 50; three lines are missing from the
        // source text).
        assert_eq!(splits.len(), 47);
        assert_eq!(
            splits[0].proportions,
            vec![0.147, 0.037, 0.033, 0.143, 0.136, 0.114, 0.057, 0.112, 0.143, 0.078]
        );
        for s in &splits {
            assert_eq!(s.k(), 10);
            let sum: f64 = s.proportions.iter().sum();
            assert!((sum - 1.0).abs() <= simplex_tolerance(10));
        }
    }

    #[test]
    fn canonical_ytf_and_shapenet() {
        let ytf = load_canonical_splits(DatasetKind::Ytf).unwrap();
        assert_eq!(ytf.len(), 1);
        assert_eq!(ytf[0].k(), 40);
        assert_eq!(&ytf[0].proportions[..3], &[0.019, 0.013, 0.024]);

        let sn = load_canonical_splits(DatasetKind::Shapenet).unwrap();
        assert_eq!(sn.len(), 1);
        assert_eq!(
            sn[0].proportions,
            vec![0.1851, 0.1481, 0.1111, 0.2592, 0.2962]
        );
    }

    #[test]
    fn canonical_cars_chairs_rescaled() {
        for kind in [DatasetKind::Cars, DatasetKind::Chairs] {
            let splits = load_canonical_splits(kind).unwrap();
            assert_eq!(splits.len(), 5);
            for s in &splits {
                let sum: f64 = s.proportions.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expected_false_negative_examples() {
        let uniform = ImbalancedSplit::new(
            vec![0.1; 10],
            SplitSource::Generated { seed: 0 },
        )
        .unwrap();
        assert!((expected_false_negative(&uniform) - 0.1).abs() < 1e-12);

        let mnist = load_canonical_splits(DatasetKind::Mnist).unwrap();
        let efn1 = expected_false_negative(&mnist[0]);
        assert!((efn1 - 0.118334).abs() < 1e-9, "split 1 E(F.N.) = {efn1}");

        let ytf = load_canonical_splits(DatasetKind::Ytf).unwrap();
        let efn_ytf = expected_false_negative(&ytf[0]);
        assert!((efn_ytf - 0.036333).abs() < 1e-6, "ytf E(F.N.) = {efn_ytf}");
    }

    #[test]
    fn efn_bounds() {
        // Degenerate one-class split is disallowed by the positivity check,
        // but the bound is approached as one class dominates.
        let mut skew = vec![1e-6; 9];
        skew.push(1.0 - 9e-6);
        let split = ImbalancedSplit::normalized(skew, SplitSource::Generated { seed: 1 }).unwrap();
        let efn = expected_false_negative(&split);
        assert!(efn > 0.99 && efn <= 1.0);
        for kind in DatasetKind::all() {
            for s in load_canonical_splits(kind).unwrap() {
                let efn = expected_false_negative(&s);
                assert!(efn >= 1.0 / s.k() as f64 - 1e-9 && efn <= 1.0);
            }
        }
    }

    #[test]
    fn generated_splits_respect_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let split = generate_split(10, &mut rng, 0.02, 42).unwrap();
        let sum: f64 = split.proportions.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for &p in &split.proportions {
            assert!(p >= 0.02 && p <= 0.25, "proportion {p} out of range");
        }

        // Determinism: same seed, same split.
        let mut rng2 = ChaCha8Rng::seed_from_u64(42);
        let again = generate_split(10, &mut rng2, 0.02, 42).unwrap();
        assert_eq!(split.proportions, again.proportions);

        assert!(generate_split(10, &mut rng, 0.2, 0).is_err());
        assert!(generate_split(1, &mut rng, 0.01, 0).is_err());
    }

    #[test]
    fn generated_splits_efn_monte_carlo() {
        // Sanity band for the mean E(F.N.) of generated splits at k = 10.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut total = 0.0;
        let n = 1000;
        for i in 0..n {
            let split = generate_split(10, &mut rng, 0.02, i).unwrap();
            total += expected_false_negative(&split);
        }
        let mean = total / n as f64;
        assert!(
            (0.10..=0.14).contains(&mean),
            "mean E(F.N.) {mean} outside [0.10, 0.14]"
        );
    }

    #[test]
    fn parser_round_trip_and_diagnostics() {
        let text = format_split_file("mnist", 3, &[vec![0.5, 0.25, 0.25]]);
        let file = parse_split_file(&text).unwrap();
        assert_eq!(file.dataset, "mnist");
        assert_eq!(file.k, 3);
        assert_eq!(file.splits, vec![vec![0.5, 0.25, 0.25]]);

        let err = parse_split_file("no header\n0.5, 0.5\n").unwrap_err();
        assert!(matches!(err, Error::SplitParse { line: 1, .. }));

        let err = parse_split_file("# dataset=x k=2\n0.5, oops\n").unwrap_err();
        assert!(matches!(err, Error::SplitParse { line: 2, .. }));

        let err = parse_split_file("# dataset=x k=3\n0.5, 0.5\n").unwrap_err();
        assert!(matches!(err, Error::SplitParse { line: 2, .. }));

        assert!(parse_split_file("# dataset=x k=2\n").is_err());
    }
}
