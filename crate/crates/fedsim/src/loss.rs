//! Class-weighted training objectives and the proximal penalty.
//!
//! The weighted negative log-likelihood over a log-softmax head coincides
//! analytically with class-weighted cross entropy; both names are accepted
//! in configuration and share one implementation. The focal variant
//! down-weights well-classified samples by `(1 - p)^gamma`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams, ParamVars};
use crate::tensor::{ParameterVector, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    WeightedNll,
    CrossEntropy,
    Focal,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LossKind::WeightedNll => "weighted-nll",
            LossKind::CrossEntropy => "cross-entropy",
            LossKind::Focal => "focal",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted-nll" | "nll" => Ok(LossKind::WeightedNll),
            "cross-entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "focal" => Ok(LossKind::Focal),
            other => Err(Error::Config(format!("unknown loss kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Per-class weights, index = class label. Majority class first.
    pub class_weights: [f64; 2],
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::WeightedNll,
            class_weights: [0.25, 0.75],
            focal_gamma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config(format!(
                "class weights must be positive, got {:?}",
                self.class_weights
            )));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config(format!(
                "focal gamma must be >= 0, got {}",
                self.focal_gamma
            )));
        }
        Ok(())
    }
}

fn validate_log_probs(log_probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if log_probs.rank() != 2 {
        return Err(Error::Shape(format!(
            "log-probabilities must be [N, C], got {:?}",
            log_probs.shape()
        )));
    }
    let (n, c) = (log_probs.shape()[0], log_probs.shape()[1]);
    if labels.len() != n {
        return Err(Error::Contract(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Contract(format!(
                "label {y} out of range at row {i} (C = {c})"
            )));
        }
    }
    for i in 0..n {
        let total: f64 = log_probs.row(i).iter().map(|v| v.exp()).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "row {i} of log-probabilities is not normalized (sums to {total})"
            )));
        }
    }
    Ok((n, c))
}

/// Weighted negative log-likelihood, summed over the batch:
/// `-sum_i w[y_i] * logp[i, y_i]`.
pub fn weighted_nll(log_probs: &Tensor, labels: &[usize], weights: &[f64]) -> Result<f64> {
    let (_, c) = validate_log_probs(log_probs, labels)?;
    if weights.len() != c {
        return Err(Error::Contract(format!(
            "{} class weights for {c} classes",
            weights.len()
        )));
    }
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -weights[y] * log_probs.at(i, y))
        .sum())
}

/// Focal loss, summed over the batch:
/// `-sum_i w[y_i] * (1 - p_i)^gamma * log p_i` with `p_i = exp(logp[i, y_i])`.
pub fn focal_loss(
    log_probs: &Tensor,
    labels: &[usize],
    weights: &[f64],
    gamma: f64,
) -> Result<f64> {
    let (_, c) = validate_log_probs(log_probs, labels)?;
    if weights.len() != c {
        return Err(Error::Contract(format!(
            "{} class weights for {c} classes",
            weights.len()
        )));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Contract(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let logp = log_probs.at(i, y);
            let p = logp.exp();
            -weights[y] * (1.0 - p).max(0.0).powf(gamma) * logp
        })
        .sum())
}

/// FedProx penalty `(mu / 2) * ||local - global||^2`.
pub fn proximal_penalty(
    local: &ParameterVector,
    global: &ParameterVector,
    mu: f64,
) -> Result<f64> {
    if !(mu >= 0.0) {
        return Err(Error::Contract(format!("mu must be >= 0, got {mu}")));
    }
    Ok(0.5 * mu * local.squared_distance(global)?)
}

/// A differentiable batch objective: mean data loss over the batch plus the
/// proximal penalty against a fixed global snapshot.
pub struct BatchObjective {
    pub graph: Graph,
    pub params: ParamVars,
    /// Scalar total objective (root for `backward`).
    pub loss: Var,
    /// Scalar mean data loss (no proximal part).
    pub data_loss: Var,
}

/// Build the objective graph for one mini-batch.
///
/// `global` supplies the proximal anchor; with `mu = 0` the penalty is
/// omitted entirely and the objective equals the plain data loss.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    config: &ModelConfig,
    params: &ModelParams,
    global: &ModelParams,
    mu: f64,
    rows: &[&[f64]],
    labels: &[usize],
    loss_config: &LossConfig,
) -> Result<BatchObjective> {
    if rows.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if rows.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} rows vs {} labels",
            rows.len(),
            labels.len()
        )));
    }
    loss_config.validate()?;
    if !(mu >= 0.0) {
        return Err(Error::Contract(format!("mu must be >= 0, got {mu}")));
    }

    let mut graph = Graph::with_capacity(rows.len() * 48 + 96);
    let bound = model::bind_params(&mut graph, params);

    let mut per_sample = Vec::with_capacity(rows.len());
    for x in rows {
        let (_, lp, _) = model::forward_sample(&mut graph, &bound, config, x)?;
        per_sample.push(lp);
    }
    let log_probs = graph.stack_rows(&per_sample)?;
    let picked = graph.pick_per_row(log_probs, labels)?;
    let weights = Tensor::vector(
        labels
            .iter()
            .map(|&y| loss_config.class_weights[y])
            .collect(),
    );
    let weights = graph.leaf(weights);

    let summed = match loss_config.kind {
        LossKind::WeightedNll | LossKind::CrossEntropy => {
            let weighted = graph.mul(picked, weights)?;
            graph.sum_all(weighted)?
        }
        LossKind::Focal => {
            let p = graph.exp(picked)?;
            let neg_p = graph.neg(p)?;
            let one_minus_p = graph.add_scalar(neg_p, 1.0)?;
            let focal = graph.pow_scalar(one_minus_p, loss_config.focal_gamma)?;
            let weighted = graph.mul(weights, focal)?;
            let weighted = graph.mul(weighted, picked)?;
            graph.sum_all(weighted)?
        }
    };
    let neg = graph.neg(summed)?;
    let data_loss = graph.mul_scalar(neg, 1.0 / rows.len() as f64)?;

    let loss = if mu > 0.0 {
        let mut prox: Option<Var> = None;
        for (bound_var, anchor) in bound.vars().iter().zip(global.tensors()) {
            let anchor_leaf = graph.leaf(anchor.clone());
            let diff = graph.sub(*bound_var, anchor_leaf)?;
            let sq = graph.mul(diff, diff)?;
            let sum = graph.sum_all(sq)?;
            prox = Some(match prox {
                None => sum,
                Some(acc) => graph.add(acc, sum)?,
            });
        }
        let prox = graph.mul_scalar(prox.expect("model has parameters"), 0.5 * mu)?;
        graph.add(data_loss, prox)?
    } else {
        data_loss
    };

    Ok(BatchObjective {
        graph,
        params: bound,
        loss,
        data_loss,
    })
}
