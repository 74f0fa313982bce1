//! Transformer stacks of softmax, linear and mesa attention layers.
//!
//! Every forward pass records onto its own [`Tape`], so the same code path
//! serves evaluation, training gradients and input sensitivities.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{causal_ones, softmax_rows_masked, HeadParams};
use crate::autodiff::{softplus, softplus_inverse, GradMap, Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Softmax,
    Linear,
    Mesa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Positional {
    None,
    /// Sinusoidal codes of width `dim` appended to first-layer queries and keys.
    FirstLayerConcat { dim: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Prediction = first `out_dim` coordinates of the final residual stream.
    FirstDims,
    /// Prediction = `W_out e_T`.
    OutputEmbedding,
}

fn default_init_std() -> f64 {
    0.05
}

fn default_true() -> bool {
    true
}

fn default_positional() -> Positional {
    Positional::None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: Vec<LayerKind>,
    pub heads: usize,
    pub key_size: usize,
    /// Defaults to the key size.
    #[serde(default)]
    pub value_size: Option<usize>,
    pub token_dim: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub input_embedding: bool,
    #[serde(default)]
    pub use_mlp: bool,
    /// Defaults to four times the embedding width.
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
    #[serde(default)]
    pub use_layernorm: bool,
    #[serde(default = "default_positional")]
    pub positional: Positional,
    #[serde(default)]
    pub activation_clip: Option<f64>,
    pub readout: Readout,
    pub out_dim: usize,
    /// Divide queries and keys by their L2 norm.
    #[serde(default)]
    pub qk_normalize: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Learn the mesa ridge strength; when false it stays at its initial value.
    #[serde(default = "default_true")]
    pub learn_lambda: bool,
}

impl TransformerConfig {
    /// Linear-attention stack on constructed tokens, read out from the first channel.
    pub fn linear_constructed(n_s: usize, channels: usize, layers: usize, heads: usize, key_size: usize) -> Self {
        let d = channels * n_s;
        TransformerConfig {
            layers: vec![LayerKind::Linear; layers],
            heads,
            key_size,
            value_size: None,
            token_dim: d,
            embed_dim: d,
            input_embedding: false,
            use_mlp: false,
            mlp_hidden: None,
            use_layernorm: false,
            positional: Positional::None,
            activation_clip: Some(4.0),
            readout: Readout::FirstDims,
            out_dim: n_s,
            qk_normalize: false,
            init_std: 0.0002f64.sqrt(),
            learn_lambda: true,
        }
    }

    /// Embedded stack on raw observations with first-layer positional codes.
    pub fn raw_tokens(layers: Vec<LayerKind>, n_s: usize, embed_dim: usize, heads: usize, key_size: usize) -> Self {
        TransformerConfig {
            layers,
            heads,
            key_size,
            value_size: None,
            token_dim: n_s,
            embed_dim,
            input_embedding: true,
            use_mlp: false,
            mlp_hidden: None,
            use_layernorm: true,
            positional: Positional::FirstLayerConcat { dim: 40 },
            activation_clip: None,
            readout: Readout::OutputEmbedding,
            out_dim: n_s,
            qk_normalize: false,
            init_std: 0.05,
            learn_lambda: true,
        }
    }

    /// Softmax layer followed by one mesa layer.
    pub fn hybrid_mesa(n_s: usize) -> Self {
        Self::raw_tokens(vec![LayerKind::Softmax, LayerKind::Mesa], n_s, 40, 4, 20)
    }

    pub fn value_size(&self) -> usize {
        self.value_size.unwrap_or(self.key_size)
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or(4 * self.embed_dim)
    }

    pub fn pos_dim(&self) -> usize {
        match self.positional {
            Positional::None => 0,
            Positional::FirstLayerConcat { dim } => dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers.is_empty() || self.heads == 0 || self.key_size == 0 || self.value_size() == 0 {
            return bad("layers, heads, key and value sizes must be positive".into());
        }
        if self.key_size > self.embed_dim {
            return bad(format!("key size {} exceeds embedding width {}", self.key_size, self.embed_dim));
        }
        if !self.input_embedding && self.token_dim != self.embed_dim {
            return bad("without an input embedding the token and embedding widths must agree".into());
        }
        if self.readout == Readout::FirstDims && self.out_dim > self.embed_dim {
            return bad("readout width exceeds the residual stream".into());
        }
        if let Some(c) = self.activation_clip {
            if !(c > 0.0) {
                return bad("activation clip must be positive".into());
            }
            if self.layers.iter().any(|k| *k != LayerKind::Linear) {
                return bad("activation clipping is only defined for linear stacks".into());
            }
        }
        if !(self.init_std >= 0.0) {
            return bad("init std must be non-negative".into());
        }
        Ok(())
    }

    /// Every parameter name with its shape, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (e, a, v) = (self.embed_dim, self.key_size, self.value_size());
        let mut out = Vec::new();
        if self.input_embedding {
            out.push(("embed.in".to_string(), (e, self.token_dim)));
        }
        for (l, kind) in self.layers.iter().enumerate() {
            if self.use_layernorm {
                out.push((format!("layer{l}.ln1.scale"), (1, e)));
                out.push((format!("layer{l}.ln1.offset"), (1, e)));
            }
            for h in 0..self.heads {
                out.push((head_name(l, h, "wq"), (a, e)));
                out.push((head_name(l, h, "wk"), (a, e)));
                out.push((head_name(l, h, "wv"), (v, e)));
                out.push((head_name(l, h, "p"), (e, v)));
                if *kind == LayerKind::Mesa {
                    out.push((head_name(l, h, "lambda_raw"), (1, 1)));
                }
            }
            if self.use_mlp {
                if self.use_layernorm {
                    out.push((format!("layer{l}.ln2.scale"), (1, e)));
                    out.push((format!("layer{l}.ln2.offset"), (1, e)));
                }
                out.push((format!("layer{l}.mlp.w1"), (self.mlp_hidden(), e)));
                out.push((format!("layer{l}.mlp.w2"), (e, self.mlp_hidden())));
            }
        }
        if self.readout == Readout::OutputEmbedding {
            out.push(("readout.out".to_string(), (self.out_dim, e)));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, (r, c))| r * c).sum()
    }
}

pub fn head_name(layer: usize, head: usize, field: &str) -> String {
    format!("layer{layer}.head{head}.{field}")
}

/// Named parameter tensors of one model.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Matrix>,
}

impl ModelParams {
    pub fn init(config: &TransformerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, (r, c)) in config.param_shapes() {
            let m = if name.ends_with(".scale") {
                Matrix::filled(r, c, 1.0)
            } else if name.ends_with(".offset") {
                Matrix::zeros(r, c)
            } else if name.ends_with(".lambda_raw") {
                Matrix::scalar(softplus_inverse(1.0))
            } else {
                rng.normal_matrix(r, c, config.init_std)
            };
            tensors.insert(name, m);
        }
        Ok(ModelParams { tensors })
    }

    pub fn zeros(config: &TransformerConfig) -> Self {
        let tensors = config.param_shapes().into_iter().map(|(n, (r, c))| (n, Matrix::zeros(r, c))).collect();
        ModelParams { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors.get(name).ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))
    }

    pub fn set(&mut self, name: &str, m: Matrix) {
        self.tensors.insert(name.to_string(), m);
    }

    /// Checks that names and shapes are exactly those of `config`.
    pub fn check(&self, config: &TransformerConfig) -> Result<()> {
        let shapes = config.param_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in shapes {
            let m = self.get(&name)?;
            if m.shape() != shape {
                return Err(Error::CheckpointMismatch(format!("{name}: expected {shape:?}, found {:?}", m.shape())));
            }
        }
        Ok(())
    }

    pub fn head(&self, layer: usize, head: usize) -> Result<HeadParams> {
        let lambda = match self.tensors.get(&head_name(layer, head, "lambda_raw")) {
            Some(raw) => softplus(raw.item()),
            None => 0.0,
        };
        Ok(HeadParams {
            wq: self.get(&head_name(layer, head, "wq"))?.clone(),
            wk: self.get(&head_name(layer, head, "wk"))?.clone(),
            wv: self.get(&head_name(layer, head, "wv"))?.clone(),
            p: self.get(&head_name(layer, head, "p"))?.clone(),
            lambda,
        })
    }

    pub fn set_head(&mut self, layer: usize, head: usize, hp: &HeadParams) {
        self.set(&head_name(layer, head, "wq"), hp.wq.clone());
        self.set(&head_name(layer, head, "wk"), hp.wk.clone());
        self.set(&head_name(layer, head, "wv"), hp.wv.clone());
        self.set(&head_name(layer, head, "p"), hp.p.clone());
        let raw = head_name(layer, head, "lambda_raw");
        if self.tensors.contains_key(&raw) && hp.lambda > 0.0 {
            self.set(&raw, Matrix::scalar(softplus_inverse(hp.lambda)));
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.values().map(|m| m.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
    }
}

/// `pe[t, 2i] = sin(t / 10000^{2i/d})`, `pe[t, 2i+1] = cos(…)`, `t` from 0.
pub fn sinusoidal_encoding(t_len: usize, dim: usize) -> Matrix {
    Matrix::from_fn(t_len, dim, |t, j| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Appends positional codes to first-layer queries and keys.
pub fn positional_concat(q: &Matrix, k: &Matrix, table: &Matrix) -> (Matrix, Matrix) {
    if table.cols() == 0 {
        return (q.clone(), k.clone());
    }
    let pe = table.slice_rows(0, q.rows());
    (Matrix::hcat(&[q, &pe]), Matrix::hcat(&[k, &pe]))
}

/// Elementwise clamp to `[−c, c]`.
pub fn activation_clip(x: &Matrix, c: f64) -> Matrix {
    x.map(|v| v.clamp(-c, c))
}

/// Per-token standardization (no affine), epsilon 1e-6.
pub fn layernorm(x: &Matrix) -> Matrix {
    crate::autodiff::eval_op(&crate::autodiff::Op::LayerNormRows, &[x]).expect("layernorm").0
}

/// `W₂ GELU(W₁ x)` applied to every row.
pub fn gelu_mlp(x: &Matrix, w1: &Matrix, w2: &Matrix) -> Matrix {
    x.matmul_t(w1).map(crate::autodiff::gelu).matmul_t(w2)
}

/// Residual stream after the input embedding (`stream[0]`) and after each layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub stream: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub preds: Matrix,
    pub trace: ActivationTrace,
}

/// Tape handles of one recorded forward pass.
pub struct TapeForward {
    pub tokens: Var,
    pub preds: Var,
    pub stream: Vec<Var>,
    pub params: BTreeMap<String, Var>,
}

/// Records the model on `tape`. Parameters become named leaves; the tokens
/// become a leaf named `input.tokens` when `tokens_trainable`.
pub fn record_forward(
    tape: &mut Tape,
    params: &ModelParams,
    config: &TransformerConfig,
    tokens: &Matrix,
    tokens_trainable: bool,
) -> Result<TapeForward> {
    if tokens.cols() != config.token_dim {
        return Err(Error::ShapeMismatch(format!(
            "tokens have width {}, config expects {}",
            tokens.cols(),
            config.token_dim
        )));
    }
    let t_len = tokens.rows();
    let mut pv = BTreeMap::new();
    for (name, m) in &params.tensors {
        pv.insert(name.clone(), tape.param(name, m.clone()));
    }
    let p = |name: &str| -> Result<Var> {
        pv.get(name).copied().ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))
    };
    let tok = if tokens_trainable { tape.param("input.tokens", tokens.clone()) } else { tape.constant(tokens.clone()) };
    let mut x = if config.input_embedding { tape.matmul_nt(tok, p("embed.in")?) } else { tok };
    let mut stream = vec![x];
    let mask = config.layers.contains(&LayerKind::Linear).then(|| tape.constant(causal_ones(t_len)));
    let pe = (config.pos_dim() > 0).then(|| tape.constant(sinusoidal_encoding(t_len, config.pos_dim())));

    for (l, kind) in config.layers.iter().enumerate() {
        let h_in = if config.use_layernorm {
            let n = tape.layernorm(x);
            let n = tape.row_mul(n, p(&format!("layer{l}.ln1.scale"))?);
            tape.row_add(n, p(&format!("layer{l}.ln1.offset"))?)
        } else {
            x
        };
        let mut delta: Option<Var> = None;
        for h in 0..config.heads {
            let mut q = tape.matmul_nt(h_in, p(&head_name(l, h, "wq"))?);
            let mut k = tape.matmul_nt(h_in, p(&head_name(l, h, "wk"))?);
            let v = tape.matmul_nt(h_in, p(&head_name(l, h, "wv"))?);
            if config.qk_normalize {
                q = tape.l2_normalize_rows(q);
                k = tape.l2_normalize_rows(k);
            }
            if let (0, Some(pe)) = (l, pe) {
                q = tape.concat_cols(&[q, pe]);
                k = tape.concat_cols(&[k, pe]);
            }
            let y = match kind {
                LayerKind::Softmax => {
                    let logits = tape.matmul_nt(q, k);
                    let a = tape.softmax_rows(logits, true);
                    tape.matmul(a, v)
                }
                LayerKind::Linear => {
                    let s = tape.matmul_nt(q, k);
                    let s = tape.mul(s, mask.expect("mask"));
                    tape.matmul(s, v)
                }
                LayerKind::Mesa => {
                    let raw_name = head_name(l, h, "lambda_raw");
                    let raw = if config.learn_lambda {
                        p(&raw_name)?
                    } else {
                        tape.constant(params.get(&raw_name)?.clone())
                    };
                    let lam = tape.softplus(raw);
                    tape.mesa(k, q, v, lam, None)?
                }
            };
            let out = tape.matmul_nt(y, p(&head_name(l, h, "p"))?);
            delta = Some(match delta {
                None => out,
                Some(d) => tape.add(d, out),
            });
        }
        x = tape.add(x, delta.expect("at least one head"));
        if let (LayerKind::Linear, Some(c)) = (kind, config.activation_clip) {
            x = tape.clamp(x, c);
        }
        if config.use_mlp {
            let h2 = if config.use_layernorm {
                let n = tape.layernorm(x);
                let n = tape.row_mul(n, p(&format!("layer{l}.ln2.scale"))?);
                tape.row_add(n, p(&format!("layer{l}.ln2.offset"))?)
            } else {
                x
            };
            let hid = tape.matmul_nt(h2, p(&format!("layer{l}.mlp.w1"))?);
            let hid = tape.gelu(hid);
            let out = tape.matmul_nt(hid, p(&format!("layer{l}.mlp.w2"))?);
            x = tape.add(x, out);
        }
        stream.push(x);
    }
    let preds = match config.readout {
        Readout::FirstDims => tape.slice_cols(x, 0, config.out_dim),
        Readout::OutputEmbedding => tape.matmul_nt(x, p("readout.out")?),
    };
    Ok(TapeForward { tokens: tok, preds, stream, params: pv })
}

pub fn model_forward(params: &ModelParams, config: &TransformerConfig, tokens: &Matrix) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let f = record_forward(&mut tape, params, config, tokens, false)?;
    Ok(ForwardOutput {
        preds: tape.value(f.preds).clone(),
        trace: ActivationTrace { stream: f.stream.iter().map(|v| tape.value(*v).clone()).collect() },
    })
}

/// `½ Σ_{t<T} ||target_{t+1} − f_t||²` of one sequence.
pub fn sequence_loss(preds: &Matrix, targets: &Matrix) -> Result<f64> {
    Ok(step_losses(preds, targets)?.iter().sum())
}

/// Per-step losses `½||target_{t+1} − f_t||²`, length `T − 1`.
pub fn step_losses(preds: &Matrix, targets: &Matrix) -> Result<Vec<f64>> {
    if preds.shape() != targets.shape() {
        return Err(Error::ShapeMismatch(format!("predictions {:?} vs targets {:?}", preds.shape(), targets.shape())));
    }
    Ok((0..preds.rows().saturating_sub(1))
        .map(|t| {
            0.5 * preds.row(t).iter().zip(targets.row(t + 1)).map(|(f, e)| (e - f) * (e - f)).sum::<f64>()
        })
        .collect())
}

/// Loss and parameter gradients of one sequence.
pub fn sequence_loss_and_grads(
    params: &ModelParams,
    config: &TransformerConfig,
    tokens: &Matrix,
    targets: &Matrix,
) -> Result<(f64, GradMap)> {
    let mut tape = Tape::new();
    let f = record_forward(&mut tape, params, config, tokens, false)?;
    let t_len = tokens.rows();
    if targets.shape() != (t_len, config.out_dim) {
        return Err(Error::ShapeMismatch("targets".into()));
    }
    let head = tape.slice_rows(f.preds, 0, t_len - 1);
    let tgt = tape.constant(targets.slice_rows(1, t_len - 1));
    let loss = tape.squared_error(head, tgt);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss, &Matrix::scalar(1.0))?;
    let mut map = grads.to_map(&tape);
    if let Some(name) = map.keys().find(|k| !params.tensors.contains_key(*k)).cloned() {
        map.remove(&name);
    }
    Ok((value, map))
}

/// Mean loss and gradients over a batch. Sequences run in parallel when
/// enabled; gradients are summed in index order either way.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    config: &TransformerConfig,
    tokens: &[Matrix],
    targets: &[Matrix],
    parallel: bool,
) -> Result<(f64, GradMap)> {
    if tokens.len() != targets.len() || tokens.is_empty() {
        return Err(Error::ShapeMismatch("batch of tokens and targets".into()));
    }
    let work = |i: usize| sequence_loss_and_grads(params, config, &tokens[i], &targets[i]);
    let per = if parallel { par::map_indexed(tokens.len(), work) } else { par::map_indexed_seq(tokens.len(), work) };
    let inv = 1.0 / tokens.len() as f64;
    let mut total = 0.0;
    let mut acc: Option<GradMap> = None;
    for r in per {
        let (l, g) = r?;
        total += l;
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => {
                for (k, v) in g {
                    a.get_mut(&k).expect("same parameter set").add_assign(&v);
                }
            }
        }
    }
    let mut acc = acc.expect("non-empty batch");
    for v in acc.values_mut() {
        v.scale_in_place(inv);
    }
    Ok((total * inv, acc))
}

/// Mean per-step loss curve over a batch (length `T − 1`).
pub fn batch_step_losses(
    params: &ModelParams,
    config: &TransformerConfig,
    tokens: &[Matrix],
    targets: &[Matrix],
) -> Result<Vec<f64>> {
    let per = par::map_indexed(tokens.len(), |i| {
        model_forward(params, config, &tokens[i]).and_then(|f| step_losses(&f.preds, &targets[i]))
    });
    let mut mean: Vec<f64> = Vec::new();
    for r in per {
        let l = r?;
        if mean.is_empty() {
            mean = vec![0.0; l.len()];
        }
        for (m, x) in mean.iter_mut().zip(l) {
            *m += x / tokens.len() as f64;
        }
    }
    Ok(mean)
}

/// Attention pattern of every head in `layer` given that layer's input
/// stream: softmax weights, masked linear scores, or mesa `k·R_t q` scores.
pub fn head_scores(params: &ModelParams, config: &TransformerConfig, layer: usize, stream_in: &Matrix) -> Result<Vec<Matrix>> {
    let x = if config.use_layernorm {
        let n = layernorm(stream_in);
        let s = params.get(&format!("layer{layer}.ln1.scale"))?;
        let o = params.get(&format!("layer{layer}.ln1.offset"))?;
        Matrix::from_fn(n.rows(), n.cols(), |r, c| n.get(r, c) * s.get(0, c) + o.get(0, c))
    } else {
        stream_in.clone()
    };
    let t_len = x.rows();
    let kind = *config.layers.get(layer).ok_or_else(|| Error::InvalidConfig(format!("no layer {layer}")))?;
    let mut out = Vec::new();
    for h in 0..config.heads {
        let hp = params.head(layer, h)?;
        let (mut q, mut k, _) = hp.project(&x);
        if config.qk_normalize {
            q = normalize_rows(&q);
            k = normalize_rows(&k);
        }
        if layer == 0 && config.pos_dim() > 0 {
            let (q2, k2) = positional_concat(&q, &k, &sinusoidal_encoding(t_len, config.pos_dim()));
            q = q2;
            k = k2;
        }
        out.push(match kind {
            LayerKind::Softmax => softmax_rows_masked(&q.matmul_t(&k), true),
            LayerKind::Linear => q.matmul_t(&k).hadamard(&causal_ones(t_len)),
            LayerKind::Mesa => {
                let f = crate::attention::mesa_forward(&k, &q, &k, hp.lambda, None, false)?;
                f.q_tilde.matmul_t(&k).hadamard(&causal_ones(t_len))
            }
        });
    }
    Ok(out)
}

fn normalize_rows(m: &Matrix) -> Matrix {
    crate::autodiff::eval_op(&crate::autodiff::Op::RowL2Normalize, &[m]).expect("normalize").0
}
