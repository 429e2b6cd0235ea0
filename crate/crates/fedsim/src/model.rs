//! The shared local/global classifier: one learned affine embedding per
//! feature, a single transformer encoder block (multi-head self-attention,
//! position-wise feed-forward, residual connections, layer norm), mean
//! pooling over the feature tokens, and a fully connected head emitting
//! log-probabilities over two classes.
//!
//! There is no positional encoding: tabular features form a set, and the
//! architecture is permutation-consistent by construction.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParameterVector, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use std::io::{Read, Write};
use std::path::Path;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_features: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ff_hidden: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_features: 21,
            embed_dim: 24,
            num_heads: 3,
            ff_hidden: 48,
            head_hidden: 32,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 2 {
            return Err(Error::Params(format!(
                "num_classes must be 2, got {}",
                self.num_classes
            )));
        }
        if self.num_features == 0
            || self.embed_dim == 0
            || self.num_heads == 0
            || self.ff_hidden == 0
            || self.head_hidden == 0
        {
            return Err(Error::Params("model dimensions must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Params(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Shapes of every parameter tensor, in flattening order.
    fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let (d, e, ff, hh, c) = (
            self.num_features,
            self.embed_dim,
            self.ff_hidden,
            self.head_hidden,
            self.num_classes,
        );
        vec![
            vec![d, e], // embed_w
            vec![d, e], // embed_b
            vec![e, e], // wq
            vec![e],    // bq
            vec![e, e], // wk
            vec![e],    // bk
            vec![e, e], // wv
            vec![e],    // bv
            vec![e, e], // wo
            vec![e],    // bo
            vec![e],    // ln1_gain
            vec![e],    // ln1_bias
            vec![e, ff], // ff_w1
            vec![ff],   // ff_b1
            vec![ff, e], // ff_w2
            vec![e],    // ff_b2
            vec![e],    // ln2_gain
            vec![e],    // ln2_bias
            vec![e, hh], // head_w1
            vec![hh],   // head_b1
            vec![hh, c], // head_w2
            vec![c],    // head_b2
        ]
    }

    /// Total parameter count, a pure function of the configuration.
    pub fn param_count(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// All learnable tensors of one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Seeded initialization: weights and biases uniform in
    /// `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`; layer-norm gains 1, biases 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = config.tensor_shapes();
        let mut tensors = Vec::with_capacity(shapes.len());
        for (idx, shape) in shapes.iter().enumerate() {
            let t = match idx {
                10 | 16 => Tensor::vector(vec![1.0; shape[0]]), // layer-norm gains
                11 | 17 => Tensor::vector(vec![0.0; shape[0]]), // layer-norm biases
                _ => {
                    let fan_in = fan_in_for(idx, shape, &config);
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let n: usize = shape.iter().product();
                    let data: Vec<f64> =
                        (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
                    Tensor::from_shape(shape.clone(), data)?
                }
            };
            tensors.push(t);
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn flatten(&self) -> ParameterVector {
        let mut out = Vec::with_capacity(self.config.param_count());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        ParameterVector::new(out)
    }

    pub fn unflatten(config: ModelConfig, flat: &ParameterVector) -> Result<Self> {
        config.validate()?;
        if flat.len() != config.param_count() {
            return Err(Error::Shape(format!(
                "parameter vector of length {} does not match model size {}",
                flat.len(),
                config.param_count()
            )));
        }
        let mut tensors = Vec::new();
        let mut cursor = 0;
        for shape in config.tensor_shapes() {
            let n: usize = shape.iter().product();
            let data = flat.as_slice()[cursor..cursor + n].to_vec();
            tensors.push(Tensor::from_shape(shape, data)?);
            cursor += n;
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Swap the embedding rows of features `i` and `j` (used to check
    /// permutation consistency).
    pub fn swap_feature_embeddings(&mut self, i: usize, j: usize) {
        for t_idx in [0usize, 1] {
            let cols = self.tensors[t_idx].cols();
            let data = self.tensors[t_idx].data_mut();
            for c in 0..cols {
                data.swap(i * cols + c, j * cols + c);
            }
        }
    }
}

fn fan_in_for(idx: usize, shape: &[usize], config: &ModelConfig) -> usize {
    match idx {
        0 | 1 => 1, // per-feature scalar input
        3 | 5 | 7 | 9 => config.embed_dim, // attention biases
        13 => config.embed_dim,            // ff_b1
        15 => config.ff_hidden,            // ff_b2
        19 => config.embed_dim,            // head_b1
        21 => config.head_hidden,          // head_b2
        _ => shape[0], // weight matrices: rows = input dim
    }
}

/// Graph handles for every parameter tensor, in flattening order.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

/// Insert every parameter tensor into `graph` as a leaf.
pub fn bind_params(graph: &mut Graph, params: &ModelParams) -> ParamVars {
    ParamVars {
        vars: params
            .tensors()
            .iter()
            .map(|t| graph.leaf(t.clone()))
            .collect(),
    }
}

/// Attention scores of one head (or an average), a `d x d` matrix whose raw
/// rows are softmax outputs and sum to 1.
#[derive(Debug, Clone)]
pub struct AttentionMatrix {
    pub scores: Tensor,
    /// `Some(h)` for a single head, `None` for an average over heads/samples.
    pub head: Option<usize>,
    pub normalized: bool,
}

/// One full forward construction over a single input sample.
pub struct ForwardPass {
    pub graph: Graph,
    pub input: Var,
    pub params: ParamVars,
    /// `[1, 2]` log-probabilities.
    pub log_probs: Var,
    /// Per-head `d x d` attention scores.
    pub attention: Vec<Var>,
}

/// Token embedding: token `i` is `x_i * w_i + b_i`, a learned per-feature
/// affine map into the embedding dimension.
pub fn embed_tokens(graph: &mut Graph, x: Var, params: &ParamVars) -> Result<Var> {
    let scaled = graph.scale_rows(params.get(0), x)?;
    graph.add(scaled, params.get(1))
}

/// The encoder block; returns the transformed tokens and per-head attention.
pub fn encoder_block(
    graph: &mut Graph,
    tokens: Var,
    params: &ParamVars,
    config: &ModelConfig,
) -> Result<(Var, Vec<Var>)> {
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let q = graph.matmul(tokens, params.get(2))?;
    let q = graph.add_row(q, params.get(3))?;
    let k = graph.matmul(tokens, params.get(4))?;
    let k = graph.add_row(k, params.get(5))?;
    let v = graph.matmul(tokens, params.get(6))?;
    let v = graph.add_row(v, params.get(7))?;

    let mut heads = Vec::with_capacity(config.num_heads);
    let mut attention = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let start = h * dh;
        let qh = graph.slice_cols(q, start, dh)?;
        let kh = graph.slice_cols(k, start, dh)?;
        let vh = graph.slice_cols(v, start, dh)?;
        let kt = graph.transpose(kh)?;
        let logits = graph.matmul(qh, kt)?;
        let scaled = graph.mul_scalar(logits, scale)?;
        let attn = graph.softmax(scaled, 1)?;
        let out = graph.matmul(attn, vh)?;
        heads.push(out);
        attention.push(attn);
    }

    let concat = graph.concat_cols(&heads)?;
    let projected = graph.matmul(concat, params.get(8))?;
    let projected = graph.add_row(projected, params.get(9))?;

    let res1 = graph.add(tokens, projected)?;
    let norm1 = graph.layer_norm(res1, params.get(10), params.get(11), LAYER_NORM_EPS)?;

    let ff1 = graph.matmul(norm1, params.get(12))?;
    let ff1 = graph.add_row(ff1, params.get(13))?;
    let ff1 = graph.relu(ff1)?;
    let ff2 = graph.matmul(ff1, params.get(14))?;
    let ff2 = graph.add_row(ff2, params.get(15))?;

    let res2 = graph.add(norm1, ff2)?;
    let norm2 = graph.layer_norm(res2, params.get(16), params.get(17), LAYER_NORM_EPS)?;

    Ok((norm2, attention))
}

/// Mean-pool tokens and apply the classifier head; returns `[1, 2]`
/// log-probabilities.
pub fn classifier_head(graph: &mut Graph, tokens: Var, params: &ParamVars) -> Result<Var> {
    let pooled = graph.mean_rows(tokens)?;
    let hidden = graph.matmul(pooled, params.get(18))?;
    let hidden = graph.add_row(hidden, params.get(19))?;
    let hidden = graph.relu(hidden)?;
    let logits = graph.matmul(hidden, params.get(20))?;
    let logits = graph.add_row(logits, params.get(21))?;
    graph.log_softmax(logits, 1)
}

/// Build the log-probability subgraph for one sample inside an existing
/// graph with already-bound parameters.
pub fn forward_sample(
    graph: &mut Graph,
    params: &ParamVars,
    config: &ModelConfig,
    x: &[f64],
) -> Result<(Var, Var, Vec<Var>)> {
    if x.len() != config.num_features {
        return Err(Error::Shape(format!(
            "input has {} features, model expects {}",
            x.len(),
            config.num_features
        )));
    }
    let input = graph.leaf(Tensor::vector(x.to_vec()));
    let tokens = embed_tokens(graph, input, params)?;
    let (encoded, attention) = encoder_block(graph, tokens, params, config)?;
    let log_probs = classifier_head(graph, encoded, params)?;
    Ok((input, log_probs, attention))
}

/// Full single-sample forward pass with its own graph.
pub fn forward(config: &ModelConfig, params: &ModelParams, x: &[f64]) -> Result<ForwardPass> {
    let mut graph = Graph::with_capacity(64);
    let bound = bind_params(&mut graph, params);
    let (input, log_probs, attention) = forward_sample(&mut graph, &bound, config, x)?;
    Ok(ForwardPass {
        graph,
        input,
        params: bound,
        log_probs,
        attention,
    })
}

/// Log-probabilities `[log p(class 0), log p(class 1)]` for one sample.
pub fn classify(config: &ModelConfig, params: &ModelParams, x: &[f64]) -> Result<[f64; 2]> {
    let pass = forward(config, params, x)?;
    let lp = pass.graph.value(pass.log_probs);
    Ok([lp.data()[0], lp.data()[1]])
}

/// Argmax prediction with ties broken toward class 0.
pub fn predict_label(log_probs: &[f64; 2]) -> u8 {
    if log_probs[1] > log_probs[0] {
        1
    } else {
        0
    }
}

/// Log-probabilities for every row of a feature matrix. Parameters are bound
/// once per chunk, which keeps evaluation cheap for large datasets.
pub fn classify_batch(
    config: &ModelConfig,
    params: &ModelParams,
    rows: &[&[f64]],
) -> Result<Vec<[f64; 2]>> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(CHUNK) {
        let mut graph = Graph::with_capacity(chunk.len() * 48 + 32);
        let bound = bind_params(&mut graph, params);
        for x in chunk {
            let (_, lp, _) = forward_sample(&mut graph, &bound, config, x)?;
            let v = graph.value(lp);
            out.push([v.data()[0], v.data()[1]]);
        }
    }
    Ok(out)
}

/// The token matrix produced by the per-feature embedding, as a value.
pub fn embed_features(
    config: &ModelConfig,
    params: &ModelParams,
    x: &[f64],
) -> Result<Tensor> {
    if x.len() != config.num_features {
        return Err(Error::Shape(format!(
            "input has {} features, model expects {}",
            x.len(),
            config.num_features
        )));
    }
    let mut graph = Graph::new();
    let bound = bind_params(&mut graph, params);
    let input = graph.leaf(Tensor::vector(x.to_vec()));
    let tokens = embed_tokens(&mut graph, input, &bound)?;
    Ok(graph.value(tokens).clone())
}

/// Run the encoder block on an explicit token matrix, returning the
/// transformed tokens and per-head attention matrices.
pub fn encoder_forward(
    config: &ModelConfig,
    params: &ModelParams,
    tokens: &Tensor,
) -> Result<(Tensor, Vec<AttentionMatrix>)> {
    if tokens.rank() != 2 || tokens.shape()[1] != config.embed_dim {
        return Err(Error::Shape(format!(
            "tokens shape {:?}, expected [*, {}]",
            tokens.shape(),
            config.embed_dim
        )));
    }
    let mut graph = Graph::new();
    let bound = bind_params(&mut graph, params);
    let tok = graph.leaf(tokens.clone());
    let (encoded, attention) = encoder_block(&mut graph, tok, &bound, config)?;
    let att = attention
        .iter()
        .enumerate()
        .map(|(h, &v)| AttentionMatrix {
            scores: graph.value(v).clone(),
            head: Some(h),
            normalized: false,
        })
        .collect();
    Ok((graph.value(encoded).clone(), att))
}

/// Mean attention over samples and heads; optionally min-max rescaled to
/// `[-1, 1]`. A constant matrix maps to all zeros under normalization.
pub fn average_attention(
    config: &ModelConfig,
    params: &ModelParams,
    samples: &[Vec<f64>],
    normalize: bool,
) -> Result<AttentionMatrix> {
    if samples.is_empty() {
        return Err(Error::Contract(
            "average_attention over an empty sample list".into(),
        ));
    }
    let d = config.num_features;
    let mut acc = vec![0.0; d * d];
    for x in samples {
        let pass = forward(config, params, x)?;
        for &att in &pass.attention {
            for (a, v) in acc.iter_mut().zip(pass.graph.value(att).data()) {
                *a += v;
            }
        }
    }
    let scale = 1.0 / (samples.len() * config.num_heads) as f64;
    for a in &mut acc {
        *a *= scale;
    }
    if normalize {
        min_max_normalize(&mut acc);
    }
    Ok(AttentionMatrix {
        scores: Tensor::matrix(d, d, acc)?,
        head: None,
        normalized: normalize,
    })
}

/// Affine rescale to `[-1, 1]`; constant input becomes all zeros.
pub fn min_max_normalize(values: &mut [f64]) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        for v in values.iter_mut() {
            *v = 2.0 * (*v - min) / (max - min) - 1.0;
        }
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
}

// ---- checkpoint format ----------------------------------------------------
//
// Binary layout, little-endian:
//   magic  b"FEDSIMCK"         8 bytes
//   version u16                (currently 1)
//   num_features, embed_dim, num_heads, ff_hidden, head_hidden, num_classes
//          u32 each
//   seed   u64
//   count  u64                 number of f64 parameters
//   params f64 * count

const CHECKPOINT_MAGIC: &[u8; 8] = b"FEDSIMCK";
const CHECKPOINT_VERSION: u16 = 1;

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    seed: u64,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let c = &params.config;
    for v in [
        c.num_features,
        c.embed_dim,
        c.num_heads,
        c.ff_hidden,
        c.head_hidden,
        c.num_classes,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&seed.to_le_bytes());
    let flat = params.flatten();
    buf.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, u64)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::Parse {
        path: path.display().to_string(),
        row: 0,
        col: 0,
        msg: msg.to_string(),
    };
    if bytes.len() < 8 + 2 + 24 + 8 + 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("not a model checkpoint"));
    }
    let version = u16::from_le_bytes(bytes[8..10].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(&format!("unsupported checkpoint version {version}")));
    }
    let mut cursor = 10;
    let mut read_u32 = || {
        let v = u32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
        cursor += 4;
        v as usize
    };
    let config = ModelConfig {
        num_features: read_u32(),
        embed_dim: read_u32(),
        num_heads: read_u32(),
        ff_hidden: read_u32(),
        head_hidden: read_u32(),
        num_classes: read_u32(),
    };
    let seed = u64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap());
    cursor += 8;
    let count = u64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap()) as usize;
    cursor += 8;
    if count != config.param_count() {
        return Err(fail(&format!(
            "checkpoint holds {count} parameters, config implies {}",
            config.param_count()
        )));
    }
    if bytes.len() != cursor + count * 8 {
        return Err(fail("truncated checkpoint"));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = cursor + i * 8;
        data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
    }
    let params = ModelParams::unflatten(config, &ParameterVector::new(data))?;
    Ok((params, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            num_features: 5,
            embed_dim: 6,
            num_heads: 3,
            ff_hidden: 8,
            head_hidden: 4,
            num_classes: 2,
        }
    }

    #[test]
    fn default_config_shape_and_count() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_features, 21);
        assert_eq!(cfg.num_heads, 3);
        assert_eq!(cfg.param_count(), 6746);
        let params = ModelParams::init(cfg, 1).unwrap();
        let tokens = embed_features(&cfg, &params, &vec![0.5; 21]).unwrap();
        assert_eq!(tokens.shape(), &[21, 24]);
    }

    #[test]
    fn invalid_head_split_rejected() {
        let cfg = ModelConfig {
            embed_dim: 25,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let cfg = small_config();
        let params = ModelParams::init(cfg, 3).unwrap();
        let flat = params.flatten();
        assert_eq!(flat.len(), cfg.param_count());
        let back = ModelParams::unflatten(cfg, &flat).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn embedding_zero_input_gives_biases() {
        let cfg = small_config();
        let params = ModelParams::init(cfg, 5).unwrap();
        let tokens = embed_features(&cfg, &params, &vec![0.0; 5]).unwrap();
        assert_eq!(tokens.data(), params.tensors()[1].data());
    }

    #[test]
    fn embedding_is_local_per_feature() {
        let cfg = small_config();
        let params = ModelParams::init(cfg, 5).unwrap();
        let base = embed_features(&cfg, &params, &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let bumped = embed_features(&cfg, &params, &[0.1, 0.2, 0.9, 0.4, 0.5]).unwrap();
        for i in 0..5 {
            let changed = base.row(i) != bumped.row(i);
            assert_eq!(changed, i == 2, "only row 2 may change");
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_shapes_match() {
        let cfg = small_config();
        let params = ModelParams::init(cfg, 7).unwrap();
        let tokens = embed_features(&cfg, &params, &[0.3, -1.0, 0.7, 0.0, 2.0]).unwrap();
        let (encoded, attention) = encoder_forward(&cfg, &params, &tokens).unwrap();
        assert_eq!(encoded.shape(), tokens.shape());
        assert_eq!(attention.len(), cfg.num_heads);
        for att in &attention {
            assert_eq!(att.scores.shape(), &[5, 5]);
            for i in 0..5 {
                let s: f64 = att.scores.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zeroed_qk_gives_uniform_attention() {
        let cfg = small_config();
        let mut params = ModelParams::init(cfg, 7).unwrap();
        // zero out wq, bq, wk, bk
        for idx in [2usize, 3, 4, 5] {
            let t = &mut params.tensors[idx];
            let shape = t.shape().to_vec();
            *t = Tensor::zeros(&shape);
        }
        let tokens = embed_features(&cfg, &params, &[0.3, -1.0, 0.7, 0.0, 2.0]).unwrap();
        let (_, attention) = encoder_forward(&cfg, &params, &tokens).unwrap();
        for att in &attention {
            for v in att.scores.data() {
                assert!((v - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classify_is_normalized_and_deterministic() {
        let cfg = small_config();
        let params = ModelParams::init(cfg, 11).unwrap();
        let x = [0.5, -0.25, 1.5, 0.0, -1.0];
        let lp1 = classify(&cfg, &params, &x).unwrap();
        let lp2 = classify(&cfg, &params, &x).unwrap();
        assert_eq!(lp1, lp2);
        let sum: f64 = lp1.iter().map(|v| v.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn classify_input_gradient_matches_finite_differences() {
        let cfg = small_config();
        let params = ModelParams::init(cfg, 13).unwrap();
        let x = [0.5, -0.25, 1.5, 0.0, -1.0];

        let mut pass = forward(&cfg, &params, &x).unwrap();
        let picked = pass.graph.pick_per_row(pass.log_probs, &[1]).unwrap();
        let root = pass.graph.sum_all(picked).unwrap();
        pass.graph.backward(root).unwrap();
        let grad = pass.graph.grad(pass.input);

        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x;
            xp[i] += h;
            let fp = classify(&cfg, &params, &xp).unwrap()[1];
            xp[i] -= 2.0 * h;
            let fm = classify(&cfg, &params, &xp).unwrap()[1];
            let fd = (fp - fm) / (2.0 * h);
            let ad = grad.data()[i];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "feature {i}: autodiff {ad} vs fd {fd}");
        }
    }

    #[test]
    fn permutation_consistency() {
        let cfg = small_config();
        let params = ModelParams::init(cfg, 17).unwrap();
        let x = [0.5, -0.25, 1.5, 0.0, -1.0];
        let base = classify(&cfg, &params, &x).unwrap();

        let mut permuted = params.clone();
        permuted.swap_feature_embeddings(1, 3);
        let mut xp = x;
        xp.swap(1, 3);
        let swapped = classify(&cfg, &permuted, &xp).unwrap();
        for (a, b) in base.iter().zip(&swapped) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn average_attention_single_sample_matches_heads_mean() {
        let cfg = small_config();
        let params = ModelParams::init(cfg, 19).unwrap();
        let x = vec![0.3, -1.0, 0.7, 0.0, 2.0];
        let avg = average_attention(&cfg, &params, &[x.clone()], false).unwrap();
        let tokens = embed_features(&cfg, &params, &x).unwrap();
        let (_, heads) = encoder_forward(&cfg, &params, &tokens).unwrap();
        let d = cfg.num_features;
        for i in 0..d * d {
            let mean: f64 =
                heads.iter().map(|h| h.scores.data()[i]).sum::<f64>() / heads.len() as f64;
            assert!((avg.scores.data()[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn average_attention_two_samples_is_elementwise_mean() {
        let cfg = small_config();
        let params = ModelParams::init(cfg, 23).unwrap();
        let a = vec![0.3, -1.0, 0.7, 0.0, 2.0];
        let b = vec![-0.5, 0.5, 0.1, 1.0, -2.0];
        let avg_a = average_attention(&cfg, &params, &[a.clone()], false).unwrap();
        let avg_b = average_attention(&cfg, &params, &[b.clone()], false).unwrap();
        let avg_ab = average_attention(&cfg, &params, &[a, b], false).unwrap();
        for i in 0..avg_ab.scores.len() {
            let want = 0.5 * (avg_a.scores.data()[i] + avg_b.scores.data()[i]);
            assert!((avg_ab.scores.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_attention_hits_exact_bounds() {
        let cfg = small_config();
        let params = ModelParams::init(cfg, 29).unwrap();
        let samples = vec![vec![0.3, -1.0, 0.7, 0.0, 2.0], vec![1.0, 0.0, -0.3, 0.5, 0.1]];
        let norm = average_attention(&cfg, &params, &samples, true).unwrap();
        let min = norm.scores.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = norm
            .scores
            .data()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, -1.0);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn empty_sample_list_rejected() {
        let cfg = small_config();
        let params = ModelParams::init(cfg, 31).unwrap();
        assert!(average_attention(&cfg, &params, &[], false).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = small_config();
        let params = ModelParams::init(cfg, 37).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, 37).unwrap();
        let (loaded, seed) = load_checkpoint(&path).unwrap();
        assert_eq!(seed, 37);
        assert_eq!(loaded, params);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
