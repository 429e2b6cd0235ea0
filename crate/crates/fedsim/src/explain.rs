//! Integrated-gradients attributions with completeness auditing, plus
//! report assembly for per-class attribution and attention summaries.
//!
//! The attributed function F is the log-probability of a target class.
//! Attribution is computed purely from the local model and local data:
//! nothing in this module accepts another client's data or moves gradients
//! off the calling site.

use crate::error::{Error, Result};
use crate::model::{self, AttentionMatrix, ModelConfig, ModelParams};
use crate::seeding::{self, DOMAIN_EXPLAIN};
use rand::seq::SliceRandom;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IgConfig {
    /// Attribution baseline; `None` means the all-zero input.
    pub baseline: Option<Vec<f64>>,
    /// Number of Riemann steps along the path.
    pub steps: usize,
    /// Class whose log-probability is attributed.
    pub target_class: usize,
}

impl Default for IgConfig {
    fn default() -> Self {
        IgConfig {
            baseline: None,
            steps: 64,
            target_class: 1,
        }
    }
}

impl IgConfig {
    pub fn validate(&self, num_features: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Contract("integrated gradients need steps >= 1".into()));
        }
        if self.target_class > 1 {
            return Err(Error::Contract(format!(
                "target class {} out of range",
                self.target_class
            )));
        }
        if let Some(b) = &self.baseline {
            if b.len() != num_features {
                return Err(Error::Contract(format!(
                    "baseline has {} entries, model expects {num_features}",
                    b.len()
                )));
            }
        }
        Ok(())
    }

    pub fn baseline_kind(&self) -> &'static str {
        if self.baseline.is_some() {
            "custom"
        } else {
            "zero"
        }
    }

    fn resolve_baseline(&self, num_features: usize) -> Vec<f64> {
        self.baseline
            .clone()
            .unwrap_or_else(|| vec![0.0; num_features])
    }
}

/// Per-feature attribution scores plus the completeness audit.
#[derive(Debug, Clone)]
pub struct AttributionReport {
    pub attributions: Vec<f64>,
    pub feature_names: Vec<String>,
    /// Mean F(x) over the attributed samples.
    pub f_input: f64,
    /// Mean F(baseline).
    pub f_baseline: f64,
    /// Mean of |sum(attributions) - (F(x) - F(baseline))| over samples.
    pub completeness_gap: f64,
    pub sample_count: usize,
    /// Label of the sample group this report aggregates, when applicable.
    pub class_label: Option<u8>,
    pub steps: usize,
    pub baseline_kind: String,
    pub target_class: usize,
}

/// `|sum(attributions) - (F(x) - F(baseline))|` as recorded in the report.
pub fn completeness_gap(report: &AttributionReport) -> f64 {
    report.completeness_gap
}

/// F(x) and dF/dx for the target-class log-probability.
pub fn value_and_input_gradient(
    config: &ModelConfig,
    params: &ModelParams,
    x: &[f64],
    target_class: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut pass = model::forward(config, params, x)?;
    let picked = pass.graph.pick_per_row(pass.log_probs, &[target_class])?;
    let root = pass.graph.sum_all(picked)?;
    let value = pass.graph.value(root).item()?;
    pass.graph.backward(root)?;
    Ok((value, pass.graph.grad(pass.input).data().to_vec()))
}

/// Core right-endpoint path integral over an arbitrary differentiable
/// function: returns `(attributions, f(x), f(baseline))`.
pub fn path_attributions<F>(
    mut value_and_grad: F,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<(Vec<f64>, f64, f64)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if steps == 0 {
        return Err(Error::Contract("integrated gradients need steps >= 1".into()));
    }
    if x.len() != baseline.len() {
        return Err(Error::Contract(format!(
            "input has {} features, baseline {}",
            x.len(),
            baseline.len()
        )));
    }
    let d = x.len();
    let mut grad_sum = vec![0.0; d];
    let mut f_x = 0.0;
    for k in 1..=steps {
        let alpha = k as f64 / steps as f64;
        let point: Vec<f64> = baseline
            .iter()
            .zip(x)
            .map(|(b, v)| b + alpha * (v - b))
            .collect();
        let (value, grad) = value_and_grad(&point)?;
        for (acc, g) in grad_sum.iter_mut().zip(&grad) {
            *acc += g;
        }
        if k == steps {
            f_x = value;
        }
    }
    let (f_baseline, _) = value_and_grad(baseline)?;
    let attributions: Vec<f64> = (0..d)
        .map(|i| (x[i] - baseline[i]) * grad_sum[i] / steps as f64)
        .collect();
    Ok((attributions, f_x, f_baseline))
}

/// Integrated gradients of the target-class log-probability for one sample.
pub fn integrated_gradients(
    config: &ModelConfig,
    params: &ModelParams,
    x: &[f64],
    ig: &IgConfig,
) -> Result<AttributionReport> {
    ig.validate(config.num_features)?;
    if x.len() != config.num_features {
        return Err(Error::Contract(format!(
            "input has {} features, model expects {}",
            x.len(),
            config.num_features
        )));
    }
    let baseline = ig.resolve_baseline(config.num_features);
    let (attributions, f_x, f_b) = path_attributions(
        |point| value_and_input_gradient(config, params, point, ig.target_class),
        x,
        &baseline,
        ig.steps,
    )?;
    let total: f64 = attributions.iter().sum();
    let gap = (total - (f_x - f_b)).abs();
    Ok(AttributionReport {
        attributions,
        feature_names: crate::data::default_feature_names(config.num_features),
        f_input: f_x,
        f_baseline: f_b,
        completeness_gap: gap,
        sample_count: 1,
        class_label: None,
        steps: ig.steps,
        baseline_kind: ig.baseline_kind().to_string(),
        target_class: ig.target_class,
    })
}

/// Mean per-feature attribution over up to `sample_cap` randomly chosen
/// samples of one class. Deterministic for a given seed.
pub fn class_attribution_summary(
    config: &ModelConfig,
    params: &ModelParams,
    dataset: &crate::data::Dataset,
    class: u8,
    sample_cap: usize,
    ig: &IgConfig,
    seed: u64,
) -> Result<AttributionReport> {
    ig.validate(config.num_features)?;
    if sample_cap == 0 {
        return Err(Error::Contract("sample cap must be >= 1".into()));
    }
    let mut indices = dataset.class_indices(class);
    if indices.is_empty() {
        return Err(Error::Contract(format!(
            "dataset contains no samples of class {class}"
        )));
    }
    if indices.len() > sample_cap {
        let mut rng = seeding::stream_rng(seed, &[DOMAIN_EXPLAIN, class as u64]);
        indices.shuffle(&mut rng);
        indices.truncate(sample_cap);
        indices.sort_unstable();
    }

    let d = config.num_features;
    let mut mean_attr = vec![0.0; d];
    let mut mean_fx = 0.0;
    let mut mean_fb = 0.0;
    let mut mean_gap = 0.0;
    for &i in &indices {
        let report = integrated_gradients(config, params, dataset.row(i), ig)?;
        for (acc, a) in mean_attr.iter_mut().zip(&report.attributions) {
            *acc += a;
        }
        mean_fx += report.f_input;
        mean_fb += report.f_baseline;
        mean_gap += report.completeness_gap;
    }
    let n = indices.len() as f64;
    mean_attr.iter_mut().for_each(|a| *a /= n);
    Ok(AttributionReport {
        attributions: mean_attr,
        feature_names: dataset.feature_names().to_vec(),
        f_input: mean_fx / n,
        f_baseline: mean_fb / n,
        completeness_gap: mean_gap / n,
        sample_count: indices.len(),
        class_label: Some(class),
        steps: ig.steps,
        baseline_kind: ig.baseline_kind().to_string(),
        target_class: ig.target_class,
    })
}

/// Serialize a report as TOML: metadata keys plus one `[[feature]]` record
/// per input feature.
pub fn attribution_report_toml(report: &AttributionReport) -> String {
    let mut out = String::new();
    if let Some(class) = report.class_label {
        writeln!(out, "class = {class}").unwrap();
    }
    writeln!(out, "sample_count = {}", report.sample_count).unwrap();
    writeln!(out, "steps = {}", report.steps).unwrap();
    writeln!(out, "baseline = \"{}\"", report.baseline_kind).unwrap();
    writeln!(out, "target_class = {}", report.target_class).unwrap();
    writeln!(out, "attributed = \"log-probability of target class\"").unwrap();
    writeln!(out, "f_input_mean = {:?}", report.f_input).unwrap();
    writeln!(out, "f_baseline_mean = {:?}", report.f_baseline).unwrap();
    writeln!(out, "completeness_gap_mean = {:?}", report.completeness_gap).unwrap();
    for (name, value) in report.feature_names.iter().zip(&report.attributions) {
        writeln!(out, "\n[[feature]]").unwrap();
        writeln!(out, "name = \"{}\"", name.replace('"', "\\\"")).unwrap();
        writeln!(out, "attribution = {value:?}").unwrap();
    }
    out
}

pub fn write_attribution_report(path: &Path, report: &AttributionReport) -> Result<()> {
    std::fs::write(path, attribution_report_toml(report))?;
    Ok(())
}

/// Serialize an attention matrix as CSV with feature-name axes.
pub fn attention_csv(matrix: &AttentionMatrix, names: &[String]) -> String {
    let d = matrix.scores.shape()[0];
    let mut out = String::from("feature");
    for name in names {
        write!(out, ",{name}").unwrap();
    }
    writeln!(out, ",normalized").unwrap();
    for i in 0..d {
        write!(out, "{}", names[i]).unwrap();
        for v in matrix.scores.row(i) {
            write!(out, ",{v}").unwrap();
        }
        writeln!(out, ",{}", matrix.normalized).unwrap();
    }
    out
}

pub fn write_attention_csv(
    path: &Path,
    matrix: &AttentionMatrix,
    names: &[String],
) -> Result<()> {
    std::fs::write(path, attention_csv(matrix, names))?;
    Ok(())
}
