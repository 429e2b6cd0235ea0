//! The communication-round engine.
//!
//! Each round: (1) dispatch the global model to every client, (2) every
//! client reports the minority-class F1 of that model on its local
//! validation split and the server selects the participating subset,
//! (3) selected clients train locally against the FedProx objective,
//! (4) their parameter vectors are encrypted when encrypted mode is on,
//! (5) the server forms the sample-size weighted aggregate, (6) the global
//! model is replaced by the aggregate and evaluated on the held-out test
//! set.
//!
//! Client evaluation and local training are independent given the immutable
//! global snapshot and run in parallel; every random choice draws from a
//! named substream of the root seed, so results do not depend on thread
//! scheduling.

use crate::data::{stratified_split, Dataset};
use crate::error::{Error, Result};
use crate::loss::{self, LossConfig};
use crate::metrics;
use crate::model::{self, ModelConfig, ModelParams};
use crate::secure::{KeyPair, Scheme, SchemeParams};
use crate::seeding::{self, DOMAIN_CRYPTO, DOMAIN_LOCAL_TRAIN, DOMAIN_MODEL_INIT, DOMAIN_SELECTION};
use crate::tensor::{sgd_step, ParameterVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    Pbcs,
    Random,
}

impl std::fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionStrategy::Pbcs => "pbcs",
            SelectionStrategy::Random => "random",
        })
    }
}

impl std::str::FromStr for SelectionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pbcs" => Ok(SelectionStrategy::Pbcs),
            "random" => Ok(SelectionStrategy::Random),
            other => Err(Error::Config(format!("unknown selection strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    Plaintext,
    Encrypted,
}

impl std::fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AggregationMode::Plaintext => "plaintext",
            AggregationMode::Encrypted => "encrypted",
        })
    }
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plaintext" => Ok(AggregationMode::Plaintext),
            "encrypted" => Ok(AggregationMode::Encrypted),
            other => Err(Error::Config(format!("unknown aggregation mode '{other}'"))),
        }
    }
}

/// Shape of the proximal-coefficient schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MuMode {
    /// `mu_t = min(mu_step * t, mu_cap)`.
    Varying,
    /// `mu_t = mu_cap` for every round (classic constant-mu baseline).
    Fixed,
}

impl std::fmt::Display for MuMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MuMode::Varying => "varying-mu",
            MuMode::Fixed => "fixed-mu",
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    /// Fraction of clients selected per round, in (0, 1].
    pub selection_ratio: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-round increment of the proximal coefficient.
    pub mu_step: f64,
    /// Saturation value of the proximal coefficient.
    pub mu_cap: f64,
    pub mu_mode: MuMode,
    pub selection_strategy: SelectionStrategy,
    pub aggregation_mode: AggregationMode,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            selection_ratio: 0.5,
            rounds: 50,
            local_epochs: 5,
            batch_size: 64,
            learning_rate: 0.01,
            mu_step: 0.0002,
            mu_cap: 0.01,
            mu_mode: MuMode::Varying,
            selection_strategy: SelectionStrategy::Pbcs,
            aggregation_mode: AggregationMode::Plaintext,
            seed: 42,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.selection_ratio > 0.0 && self.selection_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "selection_ratio {} must lie in (0, 1]",
                self.selection_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if !(self.mu_step >= 0.0) || !(self.mu_cap >= 0.0) {
            return Err(Error::Config("mu_step and mu_cap must be >= 0".into()));
        }
        Ok(())
    }

    /// Number of clients selected out of `k`: `ceil(r * K)`, at least 1.
    pub fn selected_count(&self, k: usize) -> usize {
        ((self.selection_ratio * k as f64).ceil() as usize).clamp(1, k)
    }
}

/// Proximal coefficient for a round: `min(mu_step * t, mu_cap)` in varying
/// mode, `mu_cap` in fixed mode.
pub fn mu_schedule(round: usize, config: &FederationConfig) -> f64 {
    match config.mu_mode {
        MuMode::Varying => (config.mu_step * round as f64).min(config.mu_cap),
        MuMode::Fixed => config.mu_cap,
    }
}

/// One client's local data and bookkeeping.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub train: Dataset,
    pub val: Dataset,
    /// Local sample count N_k (train + validation), the aggregation weight
    /// basis.
    pub num_samples: usize,
    pub last_f1: Option<f64>,
}

impl ClientState {
    /// Split a client's local dataset into stratified 80% train / 20%
    /// validation parts.
    pub fn new(id: usize, local: &Dataset) -> Result<Self> {
        let (train, val) = stratified_split(local, 0.8)?;
        Ok(ClientState {
            id,
            num_samples: local.len(),
            train,
            val,
            last_f1: None,
        })
    }
}

/// Per-round log entry.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub mu: f64,
    pub strategy: SelectionStrategy,
    pub selected: Vec<usize>,
    pub gamma: Vec<f64>,
    /// F1 of the dispatched global model on each client's validation split,
    /// indexed by client id.
    pub client_f1: Vec<f64>,
    pub test_recall: f64,
    pub test_precision: f64,
    pub test_f1: f64,
    pub duration_ms: f64,
}

/// Minority-class F1 of `params` on a dataset.
pub fn evaluate_minority_f1(
    config: &ModelConfig,
    params: &ModelParams,
    dataset: &Dataset,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Contract("evaluation on an empty dataset".into()));
    }
    let (_, _, f1) = evaluate_metrics(config, params, dataset)?;
    Ok(f1)
}

/// `(precision, recall, f1)` of the minority class on a dataset.
pub fn evaluate_metrics(
    config: &ModelConfig,
    params: &ModelParams,
    dataset: &Dataset,
) -> Result<(f64, f64, f64)> {
    let rows: Vec<&[f64]> = (0..dataset.len()).map(|i| dataset.row(i)).collect();
    let log_probs = model::classify_batch(config, params, &rows)?;
    let predictions: Vec<u8> = log_probs.iter().map(model::predict_label).collect();
    let counts = metrics::confusion(&predictions, dataset.labels())?;
    Ok(metrics::precision_recall_f1(&counts))
}

/// Top-M clients by F1; ties broken by ascending client id.
pub fn select_clients_pbcs(f1_by_client: &[(usize, f64)], m: usize) -> Result<Vec<usize>> {
    if m > f1_by_client.len() {
        return Err(Error::Contract(format!(
            "cannot select {m} of {} clients",
            f1_by_client.len()
        )));
    }
    let mut ranked: Vec<(usize, f64)> = f1_by_client.to_vec();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("F1 scores are finite")
            .then(a.0.cmp(&b.0))
    });
    let mut selected: Vec<usize> = ranked[..m].iter().map(|(id, _)| *id).collect();
    selected.sort_unstable();
    Ok(selected)
}

/// Uniform sample of M distinct client ids out of K.
pub fn select_clients_random(k: usize, m: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if m > k {
        return Err(Error::Contract(format!("cannot select {m} of {k} clients")));
    }
    let mut ids: Vec<usize> = (0..k).collect();
    ids.shuffle(rng);
    let mut selected = ids[..m].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

/// Aggregation weights proportional to sample counts; they sum to 1.
pub fn compute_gamma(sample_sizes: &[usize]) -> Result<Vec<f64>> {
    if sample_sizes.is_empty() {
        return Err(Error::Contract("gamma of an empty selection".into()));
    }
    if sample_sizes.iter().any(|&n| n == 0) {
        return Err(Error::Contract("client sample counts must be positive".into()));
    }
    let total: f64 = sample_sizes.iter().map(|&n| n as f64).sum();
    Ok(sample_sizes.iter().map(|&n| n as f64 / total).collect())
}

/// E epochs of mini-batch SGD on the FedProx objective, starting from the
/// dispatched global parameters (which also anchor the proximal term).
#[allow(clippy::too_many_arguments)]
pub fn train_local(
    config: &ModelConfig,
    client: &ClientState,
    global: &ParameterVector,
    mu: f64,
    loss_config: &LossConfig,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<ParameterVector> {
    if client.train.is_empty() {
        return Err(Error::Contract(format!(
            "client {} has no training data",
            client.id
        )));
    }
    let anchor = ModelParams::unflatten(*config, global)?;
    let mut weights = global.clone();
    let mut order: Vec<usize> = (0..client.train.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for batch in order.chunks(batch_size) {
            let rows: Vec<&[f64]> = batch.iter().map(|&i| client.train.row(i)).collect();
            let labels: Vec<usize> =
                batch.iter().map(|&i| client.train.label(i) as usize).collect();
            let params = ModelParams::unflatten(*config, &weights)?;
            let mut objective = loss::batch_objective(
                config,
                &params,
                &anchor,
                mu,
                &rows,
                &labels,
                loss_config,
            )?;
            objective.graph.backward(objective.loss)?;
            let mut grads = Vec::with_capacity(weights.len());
            for &v in objective.params.vars() {
                grads.extend_from_slice(objective.graph.grad(v).data());
            }
            weights = sgd_step(&weights, &ParameterVector::new(grads), lr)?;
        }
    }
    Ok(weights)
}

/// Direct weighted sum of parameter vectors in the given order.
pub fn aggregate_plaintext(
    params: &[ParameterVector],
    gamma: &[f64],
) -> Result<ParameterVector> {
    if params.is_empty() || params.len() != gamma.len() {
        return Err(Error::Contract(format!(
            "{} parameter vectors with {} weights",
            params.len(),
            gamma.len()
        )));
    }
    let len = params[0].len();
    let mut out = vec![0.0; len];
    for (vector, &weight) in params.iter().zip(gamma) {
        if vector.len() != len {
            return Err(Error::Shape("parameter vectors of unequal length".into()));
        }
        for (acc, &v) in out.iter_mut().zip(vector.as_slice()) {
            *acc += weight * v;
        }
    }
    Ok(ParameterVector::new(out))
}

/// The full federated state across rounds.
pub struct Federation {
    pub model_config: ModelConfig,
    pub loss_config: LossConfig,
    pub config: FederationConfig,
    pub clients: Vec<ClientState>,
    pub test: Dataset,
    pub global: ParameterVector,
    pub round: usize,
    crypto: Option<(Scheme, KeyPair)>,
}

/// Result of a full training run.
pub struct TrainingRun {
    pub records: Vec<RoundRecord>,
    pub best_params: ParameterVector,
    /// Round index of the best test F1; `None` when no rounds ran.
    pub best_round: Option<usize>,
    pub best_test_f1: f64,
}

impl Federation {
    /// Build the engine: split every client's data, initialize the global
    /// model, and (in encrypted mode) generate the key pair that the server
    /// distributes to all participants.
    pub fn new(
        model_config: ModelConfig,
        loss_config: LossConfig,
        config: FederationConfig,
        client_data: &[Dataset],
        test: Dataset,
    ) -> Result<Self> {
        model_config.validate()?;
        loss_config.validate()?;
        config.validate()?;
        if client_data.is_empty() {
            return Err(Error::Contract("no clients".into()));
        }
        if test.is_empty() {
            return Err(Error::Contract("empty test set".into()));
        }
        let clients: Vec<ClientState> = client_data
            .iter()
            .enumerate()
            .map(|(id, ds)| ClientState::new(id, ds))
            .collect::<Result<_>>()?;
        let init = ModelParams::init(
            model_config,
            seeding::stream_seed(config.seed, &[DOMAIN_MODEL_INIT]),
        )?;
        let crypto = match config.aggregation_mode {
            AggregationMode::Plaintext => None,
            AggregationMode::Encrypted => {
                let scheme = Scheme::new(SchemeParams::default())?;
                let mut rng = seeding::stream_rng(config.seed, &[DOMAIN_CRYPTO]);
                let keys = scheme.keygen(&mut rng);
                Some((scheme, keys))
            }
        };
        Ok(Federation {
            model_config,
            loss_config,
            config,
            clients,
            test,
            global: init.flatten(),
            round: 0,
            crypto,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Execute one communication round and advance the round counter.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let started = Instant::now();
        let round = self.round;
        let mu = mu_schedule(round, &self.config);
        let k = self.clients.len();
        let m = self.config.selected_count(k);

        // (1) dispatch: immutable global snapshot for this round
        let dispatched = ModelParams::unflatten(self.model_config, &self.global)?;

        // (2) every client evaluates the dispatched model on its validation
        // split; the server ranks and selects
        let f1_by_client: Vec<(usize, f64)> = self
            .clients
            .par_iter()
            .map(|c| {
                evaluate_minority_f1(&self.model_config, &dispatched, &c.val)
                    .map(|f1| (c.id, f1))
            })
            .collect::<Result<_>>()?;
        let mut client_f1 = vec![0.0; k];
        for &(id, f1) in &f1_by_client {
            client_f1[id] = f1;
        }
        for c in self.clients.iter_mut() {
            c.last_f1 = Some(client_f1[c.id]);
        }
        let selected = match self.config.selection_strategy {
            SelectionStrategy::Pbcs => select_clients_pbcs(&f1_by_client, m)?,
            SelectionStrategy::Random => {
                let mut rng = seeding::stream_rng(
                    self.config.seed,
                    &[DOMAIN_SELECTION, round as u64],
                );
                select_clients_random(k, m, &mut rng)?
            }
        };

        // (3) selected clients train locally from the dispatched snapshot
        let trained: Vec<(usize, ParameterVector)> = selected
            .par_iter()
            .map(|&id| {
                let mut rng = seeding::stream_rng(
                    self.config.seed,
                    &[DOMAIN_LOCAL_TRAIN, round as u64, id as u64],
                );
                train_local(
                    &self.model_config,
                    &self.clients[id],
                    &self.global,
                    mu,
                    &self.loss_config,
                    self.config.local_epochs,
                    self.config.batch_size,
                    self.config.learning_rate,
                    &mut rng,
                )
                .map(|w| (id, w))
            })
            .collect::<Result<_>>()?;

        let gamma = compute_gamma(
            &selected
                .iter()
                .map(|&id| self.clients[id].num_samples)
                .collect::<Vec<_>>(),
        )?;

        // (4) + (5) encrypt if requested, then weighted aggregation
        let vectors: Vec<ParameterVector> =
            trained.into_iter().map(|(_, w)| w).collect();
        let aggregate = match &self.crypto {
            None => aggregate_plaintext(&vectors, &gamma)?,
            Some((scheme, keys)) => {
                let mut acc = None;
                for ((&id, vector), &weight) in
                    selected.iter().zip(&vectors).zip(&gamma)
                {
                    let mut rng = seeding::stream_rng(
                        self.config.seed,
                        &[DOMAIN_CRYPTO, round as u64, id as u64],
                    );
                    let ct = scheme.encrypt(&keys.public, vector.as_slice(), &mut rng)?;
                    let scaled = scheme.scale_by_plain(&ct, weight)?;
                    acc = Some(match acc {
                        None => scaled,
                        Some(prev) => scheme.add(&prev, &scaled)?,
                    });
                }
                let decrypted =
                    scheme.decrypt(&keys.secret, &acc.expect("nonempty selection"))?;
                ParameterVector::new(decrypted)
            }
        };

        // (6) global update and test evaluation
        self.global = aggregate;
        let updated = ModelParams::unflatten(self.model_config, &self.global)?;
        let (test_precision, test_recall, test_f1) =
            evaluate_metrics(&self.model_config, &updated, &self.test)?;

        self.round += 1;
        Ok(RoundRecord {
            round,
            mu,
            strategy: self.config.selection_strategy,
            selected,
            gamma,
            client_f1,
            test_recall,
            test_precision,
            test_f1,
            duration_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Run the configured number of rounds, tracking the global model with
    /// the highest minority-class test F1 (first occurrence wins ties).
    pub fn run_training(&mut self) -> Result<TrainingRun> {
        let mut records = Vec::with_capacity(self.config.rounds);
        let mut best_params = self.global.clone();
        let mut best_round = None;
        let mut best_f1 = f64::NEG_INFINITY;
        for _ in 0..self.config.rounds {
            let record = self.run_round()?;
            if record.test_f1 > best_f1 {
                best_f1 = record.test_f1;
                best_round = Some(record.round);
                best_params = self.global.clone();
            }
            records.push(record);
        }
        Ok(TrainingRun {
            records,
            best_params,
            best_round,
            best_test_f1: if best_f1.is_finite() { best_f1 } else { 0.0 },
        })
    }
}

/// Round log serialization: one CSV row per round. List-valued columns are
/// joined with ';'. The `duration_ms` column is wall-clock time and is the
/// only nondeterministic field.
pub fn round_log_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(
        "round,mu,strategy,selected_ids,gamma_values,test_recall,test_precision,test_f1,duration_ms\n",
    );
    for r in records {
        let ids = r
            .selected
            .iter()
            .map(|id| id.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let gammas = r
            .gamma
            .iter()
            .map(|g| g.to_string())
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.round,
            r.mu,
            r.strategy,
            ids,
            gammas,
            r.test_recall,
            r.test_precision,
            r.test_f1,
            r.duration_ms
        )
        .expect("string write");
    }
    out
}
