//! File-based experiment runner behind the CLI: resolved configs, dataset
//! and config hashing, run manifests, and the four commands
//! (`generate-data`, `train`, `compare`, `explain`).
//!
//! Every run writes a `config.toml` (the fully resolved configuration,
//! sufficient to replay the run) and a `manifest.toml` (hashes, seed,
//! version). All randomness flows from the single top-level seed through
//! named substreams, so paired comparisons consume identical datasets.

use crate::data::{self, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::explain::{self, IgConfig};
use crate::federation::{
    round_log_csv, Federation, FederationConfig, RoundRecord,
    SelectionStrategy,
};
use crate::loss::{LossConfig, LossKind};
use crate::model::{self, ModelConfig, ModelParams};
use crate::seeding::{self, DOMAIN_EXPLAIN};
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Synthetic generation parameters (ignored when CSV paths are given).
    pub synthetic: SyntheticSpec,
    /// Pre-existing client CSV files; requires `test_csv`.
    pub client_csvs: Option<Vec<PathBuf>>,
    pub test_csv: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: SyntheticSpec::default(),
            client_csvs: None,
            test_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSection {
    pub steps: usize,
    pub target_class: usize,
    pub sample_cap: usize,
    /// Client whose local data feeds the per-class reports.
    pub client_index: usize,
    pub baseline: Option<Vec<f64>>,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            steps: 64,
            target_class: 1,
            sample_cap: 2000,
            client_index: 0,
            baseline: None,
        }
    }
}

impl ExplainSection {
    pub fn ig_config(&self) -> IgConfig {
        IgConfig {
            baseline: self.baseline.clone(),
            steps: self.steps,
            target_class: self.target_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub output_dir: PathBuf,
    /// Root seed; every substream (data, init, selection, training, crypto,
    /// explanation sampling) derives from it.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub federation: FederationConfig,
    pub explain: ExplainSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_name: "run".into(),
            output_dir: PathBuf::from("runs"),
            seed: 42,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            federation: FederationConfig::default(),
            explain: ExplainSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse and fully validate a TOML config file. Unknown keys are
    /// rejected; every section is checked before any computation starts.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.resolve();
        config.validate()?;
        Ok(config)
    }

    /// Propagate the root seed into the section-level seed fields.
    pub fn resolve(&mut self) {
        self.data.synthetic.seed = self.seed;
        self.federation.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_name.is_empty() {
            return Err(Error::Config("run_name must not be empty".into()));
        }
        if self.run_name.contains(std::path::is_separator) {
            return Err(Error::Config(format!(
                "run_name '{}' must not contain path separators",
                self.run_name
            )));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.federation.validate()?;
        match (&self.data.client_csvs, &self.data.test_csv) {
            (Some(paths), Some(_)) if paths.is_empty() => {
                return Err(Error::Config("client_csvs must not be empty".into()))
            }
            (Some(_), None) => {
                return Err(Error::Config(
                    "client_csvs requires test_csv to be set".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(Error::Config(
                    "test_csv requires client_csvs to be set".into(),
                ))
            }
            _ => self.data.synthetic.validate()?,
        }
        if self.explain.steps == 0 || self.explain.sample_cap == 0 {
            return Err(Error::Config(
                "explain.steps and explain.sample_cap must be positive".into(),
            ));
        }
        if self.explain.target_class > 1 {
            return Err(Error::Config("explain.target_class must be 0 or 1".into()));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Load (or generate) the client datasets and the shared test set.
pub fn load_data(config: &ExperimentConfig) -> Result<(Vec<Dataset>, Dataset)> {
    match (&config.data.client_csvs, &config.data.test_csv) {
        (Some(paths), Some(test_path)) => {
            let clients: Vec<Dataset> = paths
                .iter()
                .map(|p| data::load_csv(p))
                .collect::<Result<_>>()?;
            let test = data::load_csv(test_path)?;
            for c in &clients {
                if c.num_features() != test.num_features() {
                    return Err(Error::Config(
                        "client and test CSVs have differing feature counts".into(),
                    ));
                }
            }
            Ok((clients, test))
        }
        _ => data::generate_synthetic(&config.data.synthetic),
    }
}

/// SHA-256 over the exact bytes of every client dataset plus the test set.
pub fn dataset_hash(clients: &[Dataset], test: &Dataset) -> String {
    fn feed(hasher: &mut Sha256, ds: &Dataset) {
        hasher.update((ds.len() as u64).to_le_bytes());
        hasher.update((ds.num_features() as u64).to_le_bytes());
        for i in 0..ds.len() {
            for v in ds.row(i) {
                hasher.update(v.to_bits().to_le_bytes());
            }
            hasher.update([ds.label(i)]);
        }
    }
    let mut hasher = Sha256::new();
    hasher.update((clients.len() as u64).to_le_bytes());
    for c in clients {
        feed(&mut hasher, c);
    }
    feed(&mut hasher, test);
    hex_string(&hasher.finalize())
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config.to_toml().as_bytes());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(out, "{b:02x}").expect("string write");
    }
    out
}

fn write_manifest(
    dir: &Path,
    config: &ExperimentConfig,
    data_hash: &str,
    extra: &[(&str, String)],
) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "version = \"{}\"", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(out, "seed = {}", config.seed).unwrap();
    writeln!(out, "config_hash = \"{}\"", config_hash(config)).unwrap();
    writeln!(out, "dataset_hash = \"{data_hash}\"").unwrap();
    for (key, value) in extra {
        writeln!(out, "{key} = {value}").unwrap();
    }
    std::fs::write(dir.join("manifest.toml"), out)?;
    Ok(())
}

fn prepare_run_dir(config: &ExperimentConfig) -> Result<PathBuf> {
    let dir = config.run_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), config.to_toml())?;
    Ok(dir)
}

// ---- generate-data ----------------------------------------------------------

pub struct GenerateOutput {
    pub dir: PathBuf,
    pub client_files: Vec<PathBuf>,
    pub test_file: PathBuf,
}

/// Emit one CSV per client plus the test set and a manifest.
pub fn cmd_generate_data(config: &ExperimentConfig) -> Result<GenerateOutput> {
    config.validate()?;
    let (clients, test) = data::generate_synthetic(&config.data.synthetic)?;
    let dir = prepare_run_dir(config)?.join("data");
    std::fs::create_dir_all(&dir)?;
    let mut client_files = Vec::with_capacity(clients.len());
    for (k, ds) in clients.iter().enumerate() {
        let path = dir.join(format!("client_{k}.csv"));
        data::write_csv(ds, &path)?;
        client_files.push(path);
    }
    let test_file = dir.join("test.csv");
    data::write_csv(&test, &test_file)?;

    let hash = dataset_hash(&clients, &test);
    let rows: Vec<String> = clients.iter().map(|c| c.len().to_string()).collect();
    write_manifest(
        &dir,
        config,
        &hash,
        &[
            ("client_rows", format!("[{}]", rows.join(", "))),
            ("test_rows", test.len().to_string()),
        ],
    )?;
    Ok(GenerateOutput {
        dir,
        client_files,
        test_file,
    })
}

// ---- train -------------------------------------------------------------------

/// Table-style summary of one training run: per-metric maxima over rounds
/// and the round where the best F1 first appeared.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub federation_label: String,
    pub loss: LossKind,
    pub best_recall: f64,
    pub best_precision: f64,
    pub best_f1: f64,
    pub best_round: Option<usize>,
    pub dataset_hash: String,
}

pub fn summarize(
    label: &str,
    loss: LossKind,
    records: &[RoundRecord],
    best_round: Option<usize>,
    hash: &str,
) -> RunSummary {
    let fold = |f: fn(&RoundRecord) -> f64| {
        records.iter().map(f).fold(0.0, f64::max)
    };
    RunSummary {
        federation_label: label.to_string(),
        loss,
        best_recall: fold(|r| r.test_recall),
        best_precision: fold(|r| r.test_precision),
        best_f1: fold(|r| r.test_f1),
        best_round,
        dataset_hash: hash.to_string(),
    }
}

fn summary_csv_row(s: &RunSummary) -> String {
    format!(
        "{},{},{},{},{},{},{}\n",
        s.federation_label,
        s.loss,
        s.best_recall,
        s.best_precision,
        s.best_f1,
        s.best_round.map_or(String::from("none"), |r| r.to_string()),
        s.dataset_hash
    )
}

const SUMMARY_HEADER: &str =
    "federation,loss,best_recall,best_precision,best_f1,best_round,dataset_hash\n";

pub struct TrainOutput {
    pub run_dir: PathBuf,
    pub summary: RunSummary,
    pub records: Vec<RoundRecord>,
    pub checkpoint: PathBuf,
}

/// Full training run: round log CSV, best checkpoint, summary, manifest.
pub fn cmd_train(config: &ExperimentConfig) -> Result<TrainOutput> {
    config.validate()?;
    let (clients, test) = load_data(config)?;
    let hash = dataset_hash(&clients, &test);
    let dir = prepare_run_dir(config)?;

    let mut federation = Federation::new(
        config.model,
        config.loss,
        config.federation.clone(),
        &clients,
        test,
    )?;
    let run = federation.run_training()?;

    std::fs::write(dir.join("rounds.csv"), round_log_csv(&run.records))?;

    let checkpoint = dir.join("checkpoint.bin");
    let best = ModelParams::unflatten(config.model, &run.best_params)?;
    model::save_checkpoint(&checkpoint, &best, config.seed)?;

    let label = format!(
        "{}-{}",
        config.federation.selection_strategy, config.federation.mu_mode
    );
    let summary = summarize(&label, config.loss.kind, &run.records, run.best_round, &hash);
    let mut summary_text = String::from(SUMMARY_HEADER);
    summary_text.push_str(&summary_csv_row(&summary));
    std::fs::write(dir.join("summary.csv"), summary_text)?;

    write_manifest(
        &dir,
        config,
        &hash,
        &[("rounds", run.records.len().to_string())],
    )?;
    Ok(TrainOutput {
        run_dir: dir,
        summary,
        records: run.records,
        checkpoint,
    })
}

// ---- compare -------------------------------------------------------------------

/// The three federation arms of the comparison grid.
pub fn comparison_arms(base: &FederationConfig) -> Vec<(String, FederationConfig)> {
    let pbcs = FederationConfig {
        selection_strategy: SelectionStrategy::Pbcs,
        mu_mode: crate::federation::MuMode::Varying,
        ..base.clone()
    };
    let fedprox = FederationConfig {
        selection_strategy: SelectionStrategy::Random,
        mu_mode: crate::federation::MuMode::Fixed,
        ..base.clone()
    };
    let fedavg = FederationConfig {
        selection_strategy: SelectionStrategy::Random,
        mu_mode: crate::federation::MuMode::Varying,
        mu_step: 0.0,
        mu_cap: 0.0,
        ..base.clone()
    };
    vec![
        ("pbcs-varying-mu".into(), pbcs),
        ("fedprox-random".into(), fedprox),
        ("fedavg-random".into(), fedavg),
    ]
}

pub struct CompareOutput {
    pub run_dir: PathBuf,
    pub table: Vec<RunSummary>,
}

/// Run the 3 x 3 grid (federation arm x loss kind) on one shared dataset
/// with paired seeds; emits `comparison.csv`.
pub fn cmd_compare(config: &ExperimentConfig) -> Result<CompareOutput> {
    config.validate()?;
    let (clients, test) = load_data(config)?;
    let hash = dataset_hash(&clients, &test);
    let dir = prepare_run_dir(config)?;

    let losses = [LossKind::WeightedNll, LossKind::CrossEntropy, LossKind::Focal];
    let mut table = Vec::with_capacity(9);
    for (label, fed_config) in comparison_arms(&config.federation) {
        for kind in losses {
            let loss_config = LossConfig {
                kind,
                ..config.loss
            };
            let mut federation = Federation::new(
                config.model,
                loss_config,
                fed_config.clone(),
                &clients,
                test.clone(),
            )?;
            let run = federation.run_training()?;
            table.push(summarize(&label, kind, &run.records, run.best_round, &hash));
        }
    }

    let mut csv = String::from(SUMMARY_HEADER);
    for row in &table {
        csv.push_str(&summary_csv_row(row));
    }
    std::fs::write(dir.join("comparison.csv"), csv)?;
    write_manifest(&dir, config, &hash, &[("cells", table.len().to_string())])?;
    Ok(CompareOutput {
        run_dir: dir,
        table,
    })
}

// ---- explain -------------------------------------------------------------------

pub struct ExplainOutput {
    pub dir: PathBuf,
    pub attribution_files: Vec<PathBuf>,
    pub attention_files: Vec<PathBuf>,
}

/// Per-class attribution reports and averaged attention matrices
/// (raw + normalized) for a trained checkpoint.
pub fn cmd_explain(config: &ExperimentConfig, checkpoint: &Path) -> Result<ExplainOutput> {
    config.validate()?;
    let (params, _seed) = model::load_checkpoint(checkpoint)?;
    let model_config = params.config;
    let (clients, _test) = load_data(config)?;
    let client = clients
        .get(config.explain.client_index)
        .ok_or_else(|| {
            Error::Config(format!(
                "explain.client_index {} out of range ({} clients)",
                config.explain.client_index,
                clients.len()
            ))
        })?;
    if client.num_features() != model_config.num_features {
        return Err(Error::Config(format!(
            "checkpoint expects {} features, data has {}",
            model_config.num_features,
            client.num_features()
        )));
    }

    let dir = prepare_run_dir(config)?.join("explain");
    std::fs::create_dir_all(&dir)?;
    let ig = config.explain.ig_config();
    let mut attribution_files = Vec::new();
    let mut attention_files = Vec::new();

    for class in [0u8, 1] {
        let report = explain::class_attribution_summary(
            &model_config,
            &params,
            client,
            class,
            config.explain.sample_cap,
            &ig,
            config.seed,
        )?;
        let path = dir.join(format!("attributions_class{class}.toml"));
        explain::write_attribution_report(&path, &report)?;
        attribution_files.push(path);

        // same capped subset policy for the attention average
        let mut indices = client.class_indices(class);
        if indices.len() > config.explain.sample_cap {
            let mut rng =
                seeding::stream_rng(config.seed, &[DOMAIN_EXPLAIN, 100 + class as u64]);
            indices.shuffle(&mut rng);
            indices.truncate(config.explain.sample_cap);
            indices.sort_unstable();
        }
        let samples: Vec<Vec<f64>> =
            indices.iter().map(|&i| client.row(i).to_vec()).collect();
        for normalize in [false, true] {
            let matrix =
                model::average_attention(&model_config, &params, &samples, normalize)?;
            let suffix = if normalize { "normalized" } else { "raw" };
            let path = dir.join(format!("attention_class{class}_{suffix}.csv"));
            explain::write_attention_csv(&path, &matrix, client.feature_names())?;
            attention_files.push(path);
        }
    }
    Ok(ExplainOutput {
        dir,
        attribution_files,
        attention_files,
    })
}
