//! Probes, sensitivities, attention maps, distillation and few-shot evaluation.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::constructions::{chebyshev_solve, preconditioned_exact, IterationParams};
use crate::error::{Error, Result};
use crate::model::{head_scores, model_forward, record_forward, LayerKind, ModelParams, TransformerConfig};
use crate::numerics::{pinv, solve_spd, Matrix, Rng};
use crate::par;
use crate::seqgen::{gen_icl_tasks, spurious_pairs, IclLayout, IclTask, PREFIX_LEN};

/// Default ridge used by every probe.
pub const PROBE_REG: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Token,
    Target,
    Precond,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub layer: usize,
    /// Lag for token probes, time step otherwise.
    pub index: usize,
    pub mse: f64,
    /// Precond probes only: MSE against the Chebyshev target.
    pub mse_alt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub cells: Vec<ProbeCell>,
    pub reg: f64,
    pub batch: usize,
}

impl ProbeReport {
    pub fn mse(&self, layer: usize, index: usize) -> Option<f64> {
        self.cells.iter().find(|c| c.layer == layer && c.index == index).map(|c| c.mse)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFit {
    /// `m × d`
    pub decoder: Matrix,
    /// Mean squared error per target coordinate on the held-out fifth.
    pub mse: f64,
}

/// Ridge decoder fitted on a seeded 80% split, scored on the other 20%.
pub fn fit_linear_probe(acts: &Matrix, targets: &Matrix, reg: f64, seed: u64) -> Result<ProbeFit> {
    let n = acts.rows();
    if targets.rows() != n || n < 2 {
        return Err(Error::ShapeMismatch("probe needs matching rows and at least two samples".into()));
    }
    let perm = Rng::derive(seed, "probe-split", n as u64).permutation(n);
    let n_train = ((n as f64) * 0.8).round().clamp(1.0, (n - 1) as f64) as usize;
    let pick = |m: &Matrix, idx: &[usize]| Matrix::from_fn(idx.len(), m.cols(), |r, c| m.get(idx[r], c));
    let (tr, te) = perm.split_at(n_train);
    let (xa, ya) = (pick(acts, tr), pick(targets, tr));
    let (xb, yb) = (pick(acts, te), pick(targets, te));
    let mut gram = xa.t_matmul(&xa);
    for i in 0..gram.rows() {
        gram.set(i, i, gram.get(i, i) + reg);
    }
    let decoder = match solve_spd(&gram, &xa.t_matmul(&ya)) {
        Ok(w) => w.transpose(),
        // rank-deficient activations with no ridge: minimum-norm least squares
        Err(Error::NotSpd(_)) => pinv(&xa).matmul(&ya).transpose(),
        Err(e) => return Err(e),
    };
    let resid = yb.sub(&xb.matmul_t(&decoder));
    let mse = resid.data().iter().map(|x| x * x).sum::<f64>() / resid.len() as f64;
    Ok(ProbeFit { decoder, mse })
}

fn traces(params: &ModelParams, config: &TransformerConfig, tokens: &[Matrix]) -> Result<Vec<Vec<Matrix>>> {
    par::map_indexed(tokens.len(), |i| model_forward(params, config, &tokens[i]).map(|f| f.trace.stream))
        .into_iter()
        .collect()
}

fn rows_at(mats: &[Matrix], t: usize) -> Matrix {
    Matrix::from_fn(mats.len(), mats[0].cols(), |r, c| mats[r].get(t, c))
}

/// Decodes the input token `t − lag` from the stream after `layer` at time `t`
/// (layer 0 is the embedded input).
pub fn token_probe(
    params: &ModelParams,
    config: &TransformerConfig,
    tokens: &[Matrix],
    layer: usize,
    t: usize,
    lags: &[usize],
    reg: f64,
) -> Result<ProbeReport> {
    let tr = traces(params, config, tokens)?;
    let acts: Vec<Matrix> = tr.iter().map(|s| s[layer].clone()).collect();
    let x = rows_at(&acts, t);
    let mut cells = Vec::new();
    for &lag in lags.iter().filter(|&&l| l <= t) {
        let y = rows_at(tokens, t - lag);
        let fit = fit_linear_probe(&x, &y, reg, (layer * 1000 + lag) as u64)?;
        cells.push(ProbeCell { layer, index: lag, mse: fit.mse, mse_alt: None });
    }
    Ok(ProbeReport { kind: ProbeKind::Token, cells, reg, batch: tokens.len() })
}

/// Decodes the next observation `target_{t+1}` from each layer at each time.
pub fn target_probe(
    params: &ModelParams,
    config: &TransformerConfig,
    tokens: &[Matrix],
    targets: &[Matrix],
    layers: &[usize],
    t_grid: &[usize],
    reg: f64,
) -> Result<ProbeReport> {
    let tr = traces(params, config, tokens)?;
    let mut cells = Vec::new();
    for &l in layers {
        let acts: Vec<Matrix> = tr.iter().map(|s| s[l].clone()).collect();
        for &t in t_grid.iter().filter(|&&t| t + 1 < tokens[0].rows()) {
            let fit = fit_linear_probe(&rows_at(&acts, t), &rows_at(targets, t + 1), reg, (l * 1000 + t) as u64)?;
            cells.push(ProbeCell { layer: l, index: t, mse: fit.mse, mse_alt: None });
        }
    }
    Ok(ProbeReport { kind: ProbeKind::Target, cells, reg, batch: tokens.len() })
}

/// Decodes `(S_{t−1}S_{t−1}ᵀ + I/λ)⁻¹ s_t`, computed exactly (`mse`) and with
/// six Chebyshev steps (`mse_alt`).
#[allow(clippy::too_many_arguments)]
pub fn precond_probe(
    params: &ModelParams,
    config: &TransformerConfig,
    tokens: &[Matrix],
    observations: &[Matrix],
    layers: &[usize],
    t_grid: &[usize],
    lambda: f64,
    reg: f64,
) -> Result<(ProbeReport, f64)> {
    let tr = traces(params, config, tokens)?;
    let exact: Vec<Matrix> = observations.iter().map(|s| preconditioned_exact(s, lambda)).collect::<Result<_>>()?;
    let cheb_params = precond_iteration(observations, lambda);
    let cheb: Vec<Matrix> = observations.iter().map(|s| chebyshev_solve(s, &cheb_params)).collect::<Result<_>>()?;
    let gap = exact.iter().zip(&cheb).map(|(a, b)| a.rel_diff(b)).fold(0.0, f64::max);
    let mut cells = Vec::new();
    for &l in layers {
        let acts: Vec<Matrix> = tr.iter().map(|s| s[l].clone()).collect();
        for &t in t_grid.iter().filter(|&&t| t < tokens[0].rows()) {
            let x = rows_at(&acts, t);
            let seed = (l * 1000 + t) as u64;
            let a = fit_linear_probe(&x, &rows_at(&exact, t), reg, seed)?;
            let b = fit_linear_probe(&x, &rows_at(&cheb, t), reg, seed)?;
            cells.push(ProbeCell { layer: l, index: t, mse: a.mse, mse_alt: Some(b.mse) });
        }
    }
    Ok((ProbeReport { kind: ProbeKind::Precond, cells, reg, batch: tokens.len() }, gap))
}

/// Six-step Chebyshev parameters for the probe target, with the spectrum
/// bounds of the largest system in the batch.
pub fn precond_iteration(observations: &[Matrix], lambda: f64) -> IterationParams {
    use crate::constructions::Normalization;
    let top = observations
        .iter()
        .map(|s| crate::numerics::operator_norm(&s.t_matmul(s), 100))
        .fold(0.0, f64::max);
    let c = top + 1.0 / lambda;
    IterationParams::chebyshev(6, (1.0 / lambda) / c, 1.0, lambda, Normalization::Fixed(c))
}

/// `||∇_{s_{t'}} ||f_t^{(1)}|| ||` for every `t'`, where `f^{(1)}` is the
/// residual stream after the first layer.
pub fn sensitivity_norms(params: &ModelParams, config: &TransformerConfig, tokens: &Matrix, t: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let f = record_forward(&mut tape, params, config, tokens, true)?;
    let out = tape.slice_rows(f.stream[1], t, 1);
    let y = tape.value(out).clone();
    let norm = y.frobenius();
    let cot = if norm > 0.0 { y.scale(1.0 / norm) } else { y };
    let g = tape.backward(out, &cot)?.of(&tape, f.tokens);
    Ok((0..tokens.rows()).map(|r| g.row(r).iter().map(|x| x * x).sum::<f64>().sqrt()).collect())
}

/// Batch-averaged attention pattern of every head of `layer`.
pub fn export_attention_maps(params: &ModelParams, config: &TransformerConfig, tokens: &[Matrix], layer: usize) -> Result<Vec<Matrix>> {
    let per = par::map_indexed(tokens.len(), |i| -> Result<Vec<Matrix>> {
        let f = model_forward(params, config, &tokens[i])?;
        head_scores(params, config, layer, &f.trace.stream[layer])
    });
    let mut acc: Vec<Matrix> = Vec::new();
    for r in per {
        let maps = r?;
        if acc.is_empty() {
            acc = maps.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        }
        for (a, m) in acc.iter_mut().zip(&maps) {
            a.axpy(1.0 / tokens.len() as f64, m);
        }
    }
    Ok(acc)
}

/// Mean weight on the previous token, over rows `t ≥ 1`.
pub fn sub_diagonal_mass(map: &Matrix) -> f64 {
    let t_len = map.rows();
    (1..t_len).map(|t| map.get(t, t - 1)).sum::<f64>() / (t_len - 1).max(1) as f64
}

/// Input to the attention block of `layer` (after its LayerNorm) and that
/// block's output.
pub fn attention_io(params: &ModelParams, config: &TransformerConfig, stream_in: &Matrix, layer: usize) -> Result<(Matrix, Matrix)> {
    let single = single_layer_config(config, layer, config.layers[layer]);
    let single_params = single_layer_params(params, config, layer)?;
    let h_in = layer_input(params, config, stream_in, layer)?;
    let out = model_forward(&single_params, &single, &h_in)?.preds.sub(&h_in);
    Ok((h_in, out))
}

fn layer_input(params: &ModelParams, config: &TransformerConfig, x: &Matrix, layer: usize) -> Result<Matrix> {
    if !config.use_layernorm {
        return Ok(x.clone());
    }
    let n = crate::model::layernorm(x);
    let s = params.get(&format!("layer{layer}.ln1.scale"))?;
    let o = params.get(&format!("layer{layer}.ln1.offset"))?;
    Ok(Matrix::from_fn(n.rows(), n.cols(), |r, c| n.get(r, c) * s.get(0, c) + o.get(0, c)))
}

/// A bare one-layer model that applies only the attention block of `layer`.
fn single_layer_config(config: &TransformerConfig, layer: usize, kind: LayerKind) -> TransformerConfig {
    let mut c = config.clone();
    c.layers = vec![kind];
    c.token_dim = c.embed_dim;
    c.input_embedding = false;
    c.use_mlp = false;
    c.use_layernorm = false;
    c.activation_clip = None;
    c.readout = crate::model::Readout::FirstDims;
    c.out_dim = c.embed_dim;
    if layer != 0 {
        c.positional = crate::model::Positional::None;
    }
    c
}

fn single_layer_params(params: &ModelParams, config: &TransformerConfig, layer: usize) -> Result<ModelParams> {
    let mut p = ModelParams::default();
    for h in 0..config.heads {
        for field in ["wq", "wk", "wv", "p", "lambda_raw"] {
            let from = crate::model::head_name(layer, h, field);
            if let Some(m) = params.tensors.get(&from) {
                p.set(&crate::model::head_name(0, h, field), m.clone());
            }
        }
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Distilled {
    pub config: TransformerConfig,
    pub params: ModelParams,
    /// Mean squared error per coordinate between distilled and reference block outputs.
    pub mse: f64,
    /// Eval loss of the swapped model over the reference eval loss.
    pub loss_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for DistillOptions {
    fn default() -> Self {
        DistillOptions { steps: 300, lr: 1e-3, batch: 16 }
    }
}

/// Replaces the attention block of `layer` by a linear-attention block fitted
/// with Adam on recorded (input, output) pairs, warm-started from the
/// reference heads. The swapped model is scored on `eval`.
pub fn distill_linear_layer(
    params: &ModelParams,
    config: &TransformerConfig,
    layer: usize,
    data: &[Matrix],
    eval: (&[Matrix], &[Matrix]),
    opts: DistillOptions,
) -> Result<Distilled> {
    let tr = traces(params, config, data)?;
    let pairs: Vec<(Matrix, Matrix)> =
        tr.iter().map(|s| attention_io(params, config, &s[layer], layer)).collect::<Result<_>>()?;
    let lin_cfg = single_layer_config(config, layer, LayerKind::Linear);
    let mut lin = single_layer_params(params, config, layer)?;
    lin.tensors.retain(|k, _| !k.ends_with("lambda_raw"));
    let mut state = crate::train::OptimizerState::new(&lin);
    let adam = adam_config(opts.lr);
    let loss_and_grads = |p: &ModelParams, idx: &[usize]| -> Result<(f64, crate::autodiff::GradMap)> {
        let per = par::map_indexed(idx.len(), |j| -> Result<(f64, crate::autodiff::GradMap)> {
            let (h_in, out) = &pairs[idx[j]];
            let mut tape = Tape::new();
            let f = record_forward(&mut tape, p, &lin_cfg, h_in, false)?;
            let target = tape.constant(h_in.add(out));
            let l = tape.squared_error(f.preds, target);
            let g = tape.backward(l, &Matrix::scalar(1.0))?;
            Ok((tape.value(l).item(), g.to_map(&tape)))
        });
        let mut total = 0.0;
        let mut acc: Option<crate::autodiff::GradMap> = None;
        for r in per {
            let (l, g) = r?;
            total += l;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => {
                    for (k, v) in g {
                        a.get_mut(&k).expect("same names").add_assign(&v);
                    }
                }
            }
        }
        let mut acc = acc.expect("non-empty");
        acc.retain(|k, _| p.tensors.contains_key(k));
        for v in acc.values_mut() {
            v.scale_in_place(1.0 / idx.len() as f64);
        }
        Ok((total / idx.len() as f64, acc))
    };
    let mut rng = Rng::derive(0, "distill", layer as u64);
    for _ in 0..opts.steps {
        let idx: Vec<usize> = (0..opts.batch.min(pairs.len())).map(|_| rng.below(pairs.len())).collect();
        let (_, mut g) = loss_and_grads(&lin, &idx)?;
        crate::train::clip_global_norm(&mut g, 1.0);
        crate::train::adamw_step(&mut lin, &g, &mut state, opts.lr, &adam)?;
    }
    let all: Vec<usize> = (0..pairs.len()).collect();
    let (sse, _) = loss_and_grads(&lin, &all)?;
    let width = (pairs[0].0.len()) as f64;
    let mse = 2.0 * sse / width;

    let mut swapped_cfg = config.clone();
    swapped_cfg.layers[layer] = LayerKind::Linear;
    let mut swapped = params.clone();
    for h in 0..config.heads {
        swapped.tensors.remove(&crate::model::head_name(layer, h, "lambda_raw"));
        swapped.set_head(layer, h, &lin.head(0, h)?);
    }
    let ref_loss = crate::train::eval_loss(params, config, eval.0, eval.1)?;
    let new_loss = crate::train::eval_loss(&swapped, &swapped_cfg, eval.0, eval.1)?;
    Ok(Distilled { config: swapped_cfg, params: swapped, mse, loss_ratio: new_loss / ref_loss })
}

fn adam_config(lr: f64) -> crate::train::TrainConfig {
    use crate::train::*;
    TrainConfig {
        steps: 0,
        batch_size: 1,
        peak_lr: lr,
        warmup_steps: 1,
        cosine_steps: 1,
        final_lr: lr,
        weight_decay: 0.0,
        grad_clip_norm: 1.0,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        seed: 0,
        eval_every: 1,
        eval_batch: 1,
        schedule: Schedule::Constant,
        tokens: TokenMode::Raw,
        frozen_corpus: None,
        deterministic: true,
        task: crate::seqgen::GeneratorSpec::fully_observed(1, 2),
        arch: TransformerConfig::raw_tokens(vec![LayerKind::Softmax], 1, 1, 1, 1),
    }
}

/// Learned prompt tokens for the EOS layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTokens {
    pub eos: Vec<f64>,
    pub prefix: Option<Matrix>,
}

/// Per-pair losses `L_i = ½||y_i − f(x_i)||²` averaged over tasks,
/// index `i − 1`.
pub fn icl_eval(
    params: &ModelParams,
    config: &TransformerConfig,
    tasks: &[IclTask],
    layout: IclLayout,
    prompt: Option<&PromptTokens>,
) -> Result<Vec<f64>> {
    if layout != IclLayout::Plain && prompt.is_none() {
        return Err(Error::MissingPromptTokens(format!("{layout:?}").to_lowercase()));
    }
    let per = par::map_indexed(tasks.len(), |i| -> Result<Vec<f64>> {
        let task = &tasks[i];
        let toks = task.tokens(layout, prompt.map(|p| &p.eos[..]), prompt.and_then(|p| p.prefix.as_ref()))?;
        let preds = model_forward(params, config, &toks)?.preds;
        Ok((0..task.n())
            .map(|j| {
                let row = preds.row(IclTask::x_position(layout, j));
                0.5 * row.iter().zip(&task.ys[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .collect())
    });
    mean_curves(per)
}

/// Two tasks back to back in one prompt (plain layout): losses over all `2N` pairs.
pub fn icl_eval_continual(
    params: &ModelParams,
    config: &TransformerConfig,
    first: &[IclTask],
    second: &[IclTask],
) -> Result<Vec<f64>> {
    let joined: Vec<IclTask> = first
        .iter()
        .zip(second)
        .map(|(a, b)| IclTask {
            xs: a.xs.iter().chain(&b.xs).cloned().collect(),
            ys: a.ys.iter().chain(&b.ys).cloned().collect(),
            teacher: a.teacher.clone(),
        })
        .collect();
    icl_eval(params, config, &joined, IclLayout::Plain, None)
}

fn mean_curves(per: Vec<Result<Vec<f64>>>) -> Result<Vec<f64>> {
    let n = per.len() as f64;
    let mut mean: Vec<f64> = Vec::new();
    for r in per {
        let c = r?;
        if mean.is_empty() {
            mean = vec![0.0; c.len()];
        }
        for (m, x) in mean.iter_mut().zip(c) {
            *m += x / n;
        }
    }
    Ok(mean)
}

/// Least-squares control: before predicting `y_i`, fit a ridge map on the
/// correct pairs seen so far, or on every consecutive token pair seen so
/// far (which adds the spurious `y_j → x_{j+1}` associations). Index `i − 1`;
/// entry 0 is the zero-data prediction.
pub fn lsq_icl_curve(tasks: &[IclTask], spurious: bool, lambda: f64) -> Result<Vec<f64>> {
    let per = par::map_indexed(tasks.len(), |k| -> Result<Vec<f64>> {
        let task = &tasks[k];
        let d = task.xs[0].len();
        let all = spurious_pairs(task);
        let n = task.n();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut data: Vec<(&[f64], &[f64])> = (0..i).map(|j| (&all[j].0[..], &all[j].1[..])).collect();
            if spurious {
                // spurious pair j links y_j to x_{j+1}; it is visible once x_{j+1} is
                data.extend((0..i).map(|j| (&all[n + j].0[..], &all[n + j].1[..])));
            }
            let w = crate::seqgen::ridge_fit(&data, d, d, lambda)?;
            let pred = w.matvec(&task.xs[i]);
            out.push(0.5 * pred.iter().zip(&task.ys[i]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
        }
        Ok(out)
    });
    mean_curves(per)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTuning {
    pub steps: usize,
    pub batch: usize,
    pub n_pairs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PromptTuning {
    fn default() -> Self {
        PromptTuning { steps: 5000, batch: 256, n_pairs: 10, lr: 1e-2, seed: 0 }
    }
}

/// Trains the EOS token (and, for the prefix layout, twenty prefix tokens)
/// with Adam while the model stays frozen. EOS starts at `N(0, I)`.
pub fn tune_prompt_tokens(
    params: &ModelParams,
    config: &TransformerConfig,
    layout: IclLayout,
    opts: PromptTuning,
) -> Result<PromptTokens> {
    if layout == IclLayout::Plain {
        return Err(Error::InvalidConfig("plain prompts have no tunable tokens".into()));
    }
    let d = config.token_dim;
    let mut init = Rng::derive(opts.seed, "prompt-init", 0);
    let mut prompt = PromptTokens {
        eos: init.normal_vec(d, 1.0),
        prefix: (layout == IclLayout::EosPrefix).then(|| init.normal_matrix(PREFIX_LEN, d, 1.0)),
    };
    let mut tunable = ModelParams::default();
    let sync = |p: &PromptTokens, t: &mut ModelParams| {
        t.set("eos", Matrix::row_vector(&p.eos));
        if let Some(pre) = &p.prefix {
            t.set("prefix", pre.clone());
        }
    };
    sync(&prompt, &mut tunable);
    let mut state = crate::train::OptimizerState::new(&tunable);
    let adam = adam_config(opts.lr);
    for step in 0..opts.steps {
        let tasks = gen_icl_tasks(d, opts.n_pairs, opts.batch, &Rng::derive(opts.seed, "prompt-tasks", step as u64))?;
        let per = par::map_indexed(tasks.len(), |i| -> Result<Matrix> {
            let task = &tasks[i];
            let toks = task.tokens(layout, Some(&prompt.eos), prompt.prefix.as_ref())?;
            let mut tape = Tape::new();
            let f = record_forward(&mut tape, params, config, &toks, true)?;
            let rows: Vec<usize> = (0..task.n()).map(|j| IclTask::x_position(layout, j)).collect();
            let mut cot = Matrix::zeros(toks.rows(), config.out_dim);
            let preds = tape.value(f.preds).clone();
            for (j, &r) in rows.iter().enumerate() {
                for c in 0..config.out_dim {
                    cot.set(r, c, preds.get(r, c) - task.ys[j][c]);
                }
            }
            Ok(tape.backward(f.preds, &cot)?.of(&tape, f.tokens))
        });
        let mut g_eos = Matrix::zeros(1, d);
        let mut g_pre = Matrix::zeros(PREFIX_LEN, d);
        let inv = 1.0 / tasks.len() as f64;
        for (i, g) in per.into_iter().enumerate() {
            let g = g?;
            let n = tasks[i].n();
            let off = if layout == IclLayout::EosPrefix { PREFIX_LEN } else { 0 };
            for j in 0..n - 1 {
                let r = off + 3 * j + 2;
                for c in 0..d {
                    g_eos.set(0, c, g_eos.get(0, c) + inv * g.get(r, c));
                }
            }
            if off > 0 {
                g_pre.axpy(inv, &g.slice_rows(0, PREFIX_LEN));
            }
        }
        let mut grads = crate::autodiff::GradMap::new();
        grads.insert("eos".into(), g_eos);
        if prompt.prefix.is_some() {
            grads.insert("prefix".into(), g_pre);
        }
        crate::train::adamw_step(&mut tunable, &grads, &mut state, opts.lr, &adam)?;
        prompt.eos = tunable.get("eos")?.data().to_vec();
        if prompt.prefix.is_some() {
            prompt.prefix = Some(tunable.get("prefix")?.clone());
        }
    }
    Ok(prompt)
}
