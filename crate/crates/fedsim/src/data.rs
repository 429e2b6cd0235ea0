//! Synthetic non-IID imbalanced multi-client data, CSV ingestion, and
//! stratified splitting.
//!
//! The synthetic generator draws class-conditional Gaussians with a
//! per-client mean shift (covariate shift across clients) and binarizes the
//! last few features by thresholding. Labels: 0 = non-defaulting (majority),
//! 1 = defaulting (minority).

use crate::error::{Error, Result};
use crate::seeding::{self, DOMAIN_DATA};
use rand::seq::SliceRandom;

use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;
use std::path::Path;

/// Number of trailing features converted to binary indicators.
const BINARY_FEATURES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    num_rows: usize,
    num_features: usize,
    labels: Vec<u8>,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        num_features: usize,
        feature_names: Vec<String>,
        features: Vec<f64>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if feature_names.len() != num_features {
            return Err(Error::Contract(format!(
                "{} feature names for {} features",
                feature_names.len(),
                num_features
            )));
        }
        if num_features == 0 || features.len() % num_features != 0 {
            return Err(Error::Shape(format!(
                "feature buffer of {} values is not a multiple of {}",
                features.len(),
                num_features
            )));
        }
        let num_rows = features.len() / num_features;
        if labels.len() != num_rows {
            return Err(Error::Shape(format!(
                "{} labels for {num_rows} rows",
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::Contract("labels must be 0 or 1".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Dataset {
            features,
            num_rows,
            num_features,
            labels,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.num_rows
    }

    pub fn is_empty(&self) -> bool {
        self.num_rows == 0
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn class_count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&y| y == class).count()
    }

    /// Row indices with the given label.
    pub fn class_indices(&self, class: u8) -> Vec<usize> {
        (0..self.num_rows)
            .filter(|&i| self.labels[i] == class)
            .collect()
    }

    fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            num_rows: indices.len(),
            num_features: self.num_features,
            labels,
            feature_names: self.feature_names.clone(),
        }
    }

    /// Concatenate datasets with identical schemas.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero datasets".into()))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.num_features != first.num_features || p.feature_names != first.feature_names {
                return Err(Error::Contract("datasets have differing schemas".into()));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        Dataset::new(
            first.num_features,
            first.feature_names.clone(),
            features,
            labels,
        )
    }

    /// Mean of one feature column.
    pub fn feature_mean(&self, j: usize) -> f64 {
        (0..self.num_rows).map(|i| self.row(i)[j]).sum::<f64>() / self.num_rows as f64
    }
}

/// Specification for the synthetic multi-client benchmark.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_clients: usize,
    pub sizes: Vec<usize>,
    pub minority_rates: Vec<f64>,
    pub num_features: usize,
    /// Std of the per-client, per-feature mean shift (non-IID strength).
    pub shift_magnitude: f64,
    /// Scale of the class-conditional mean separation.
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        // Desk-scale sizes: the reference four-client corpus divided by 16,
        // same minority rates.
        SyntheticSpec {
            num_clients: 4,
            sizes: vec![1148, 1244, 1176, 840],
            minority_rates: vec![0.1175, 0.1245, 0.1404, 0.1352],
            num_features: 21,
            shift_magnitude: 1.0,
            class_separation: 1.0,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be positive".into()));
        }
        if self.sizes.len() != self.num_clients || self.minority_rates.len() != self.num_clients
        {
            return Err(Error::Config(format!(
                "sizes ({}) and minority_rates ({}) must both have num_clients ({}) entries",
                self.sizes.len(),
                self.minority_rates.len(),
                self.num_clients
            )));
        }
        if self.sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("client sizes must be positive".into()));
        }
        if self
            .minority_rates
            .iter()
            .any(|&r| !(r > 0.0 && r < 0.5))
        {
            return Err(Error::Config(
                "minority rates must lie strictly in (0, 0.5)".into(),
            ));
        }
        if self.num_features < BINARY_FEATURES + 1 {
            return Err(Error::Config(format!(
                "need at least {} features",
                BINARY_FEATURES + 1
            )));
        }
        if !(self.shift_magnitude >= 0.0) || !(self.class_separation >= 0.0) {
            return Err(Error::Config(
                "shift_magnitude and class_separation must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Minority sample count for client `k`: nearest integer, at least 1.
    pub fn minority_count(&self, k: usize) -> usize {
        ((self.minority_rates[k] * self.sizes[k] as f64).round() as usize).max(1)
    }
}

/// Default feature vocabulary for generated data: company attributes and
/// financial indicators typical of supply-chain credit scoring.
pub fn default_feature_names(d: usize) -> Vec<String> {
    const NAMES: [&str; 21] = [
        "credit rating",
        "guarantee type",
        "revolving credit facility",
        "years relationship with bank",
        "bank early warning",
        "small and micro enterprises",
        "repayment method",
        "platform type",
        "government platform finance",
        "prohibited industry",
        "registered capital",
        "enterprise scale",
        "industry category",
        "years in operation",
        "loan amount",
        "loan term",
        "interest rate",
        "collateral value ratio",
        "overdue history",
        "external guarantees",
        "supply chain role",
    ];
    (0..d)
        .map(|j| {
            if j < NAMES.len() {
                NAMES[j].to_string()
            } else {
                format!("feature {j}")
            }
        })
        .collect()
}

/// Generate per-client datasets plus a global test set.
///
/// Each client k receives exactly `sizes[k]` samples with exactly
/// `minority_count(k)` positives before a stratified 20% slice is removed
/// into the shared test set. Returns `(clients, test)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<Dataset>, Dataset)> {
    spec.validate()?;
    let d = spec.num_features;
    let names = default_feature_names(d);
    let mut rng = seeding::stream_rng(spec.seed, &[DOMAIN_DATA]);

    // Class-1 mean offset, shared across clients (same feature space).
    let offset_dist = Normal::new(0.0, 1.0).expect("valid normal");
    let class_offset: Vec<f64> = (0..d)
        .map(|_| spec.class_separation * offset_dist.sample(&mut rng))
        .collect();

    // Per-client covariate shift applied to both classes.
    let shifts: Vec<Vec<f64>> = (0..spec.num_clients)
        .map(|_| {
            (0..d)
                .map(|_| {
                    if spec.shift_magnitude > 0.0 {
                        spec.shift_magnitude * offset_dist.sample(&mut rng)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let mut clients = Vec::with_capacity(spec.num_clients);
    let mut test_parts = Vec::with_capacity(spec.num_clients);

    for k in 0..spec.num_clients {
        let size = spec.sizes[k];
        let minority = spec.minority_count(k);
        if minority + 1 >= size {
            return Err(Error::Contract(format!(
                "client {k}: minority count {minority} leaves no majority samples"
            )));
        }
        let mut features = Vec::with_capacity(size * d);
        let mut labels = Vec::with_capacity(size);
        for i in 0..size {
            let label = u8::from(i < minority);
            for j in 0..d {
                let mut mean = shifts[k][j];
                if label == 1 {
                    mean += class_offset[j];
                }
                let raw = mean + noise.sample(&mut rng);
                let value = if j >= d - BINARY_FEATURES {
                    f64::from(raw > 0.0)
                } else {
                    raw
                };
                features.push(value);
            }
            labels.push(label);
        }
        // Shuffle rows so downstream order-based splits see mixed classes.
        let mut order: Vec<usize> = (0..size).collect();
        order.shuffle(&mut rng);
        let ds = Dataset::new(d, names.clone(), features, labels)?.select(&order);

        let (keep, test_slice) = stratified_split(&ds, 0.8)?;
        clients.push(keep);
        test_parts.push(test_slice);
    }

    let test = Dataset::concat(&test_parts)?;
    Ok((clients, test))
}

/// Per-class split at `train_fraction`: each class contributes
/// `floor(fraction * count)` rows (in row order) to the first part, the rest
/// to the second. The two parts partition the input.
pub fn stratified_split(ds: &Dataset, train_fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Contract(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    for class in [0u8, 1] {
        if ds.class_count(class) < 2 {
            return Err(Error::Contract(format!(
                "class {class} has fewer than 2 samples"
            )));
        }
    }
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for class in [0u8, 1] {
        let idx = ds.class_indices(class);
        let take = (train_fraction * idx.len() as f64).floor() as usize;
        train_idx.extend_from_slice(&idx[..take]);
        val_idx.extend_from_slice(&idx[take..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((ds.select(&train_idx), ds.select(&val_idx)))
}

/// Serialize a dataset as CSV: header of feature names plus `label`, values
/// printed with round-trip-exact formatting.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for name in ds.feature_names() {
        write!(out, "{name},").expect("string write");
    }
    out.push_str("label\n");
    for i in 0..ds.len() {
        for v in ds.row(i) {
            write!(out, "{v},").expect("string write");
        }
        writeln!(out, "{}", ds.label(i)).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse a dataset written by [`write_csv`] (or any CSV with the same
/// schema: d feature columns then a `label` column of 0/1).
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let content = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let err = |row: usize, col: usize, msg: String| Error::Parse {
        path: display.clone(),
        row,
        col,
        msg,
    };

    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, 1, "empty file".into()))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 2 {
        return Err(err(1, 1, "header needs feature columns and 'label'".into()));
    }
    if *columns.last().unwrap() != "label" {
        return Err(err(
            1,
            columns.len(),
            format!("last column must be 'label', got '{}'", columns.last().unwrap()),
        ));
    }
    let d = columns.len() - 1;
    let names: Vec<String> = columns[..d].iter().map(|s| s.to_string()).collect();

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line_idx, line) in lines {
        let row_no = line_idx + 1;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d + 1 {
            return Err(err(
                row_no,
                cells.len(),
                format!("expected {} cells, got {}", d + 1, cells.len()),
            ));
        }
        for (j, cell) in cells[..d].iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|e| err(row_no, j + 1, format!("bad numeric cell '{cell}': {e}")))?;
            if !v.is_finite() {
                return Err(err(row_no, j + 1, format!("non-finite value '{cell}'")));
            }
            features.push(v);
        }
        let label_cell = cells[d].trim();
        let label: f64 = label_cell
            .parse()
            .map_err(|e| err(row_no, d + 1, format!("bad label '{label_cell}': {e}")))?;
        if label == 0.0 {
            labels.push(0);
        } else if label == 1.0 {
            labels.push(1);
        } else {
            return Err(err(
                row_no,
                d + 1,
                format!("label must be 0 or 1, got '{label_cell}'"),
            ));
        }
    }
    if labels.is_empty() {
        return Err(err(2, 1, "no data rows".into()));
    }
    Dataset::new(d, names, features, labels)
}
