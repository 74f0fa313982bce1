//! Hand-set attention weights that implement gradient descent and
//! preconditioned gradient descent on the in-context regression problem,
//! plus tools to compare trained stacks against them.

use serde::{Deserialize, Serialize};

use crate::attention::{linear_attention, HeadParams};
use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelParams, Readout, TransformerConfig};
use crate::numerics::{dot, operator_norm, Matrix};
use crate::par;
use crate::seqgen::concat_window;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channels {
    /// `[0, s_t, s_{t−1}]`
    Three,
    /// `[0, s_t, s_t, s_{t−1}]`
    Four,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructedTokenSpec {
    pub channels: Channels,
    pub n_s: usize,
}

impl ConstructedTokenSpec {
    pub fn count(&self) -> usize {
        match self.channels {
            Channels::Three => 3,
            Channels::Four => 4,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.count() * self.n_s
    }

    /// Channel holding `s_t`.
    pub fn current(&self) -> usize {
        1
    }

    /// Channel holding `s_{t−1}`.
    pub fn previous(&self) -> usize {
        self.count() - 1
    }
}

/// Constructed tokens with `s₀ = 0`.
pub fn build_constructed_tokens(seq: &Matrix, spec: &ConstructedTokenSpec) -> Matrix {
    let (t_len, n) = seq.shape();
    assert_eq!(n, spec.n_s, "observation width");
    let mut out = Matrix::zeros(t_len, spec.token_dim());
    for t in 0..t_len {
        for ch in 1..spec.count() {
            let src = if ch == spec.previous() {
                if t == 0 {
                    continue;
                }
                t - 1
            } else {
                t
            };
            out.row_mut(t)[ch * n..(ch + 1) * n].copy_from_slice(seq.row(src));
        }
    }
    out
}

/// Rows `z_t^k = [s_{t−k+1}; …; s_t]`, zero-padded.
pub fn build_concat_tokens(seq: &Matrix, k: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..seq.rows()).map(|t| concat_window(seq, k, t)).collect();
    Matrix::from_rows(&rows).expect("finite observations")
}

/// Head with identity keys and values, so that `W_kᵀW_q = qk` and `PW_v = pv`.
pub fn head_from_products(qk: &Matrix, pv: &Matrix) -> HeadParams {
    let d = qk.rows();
    HeadParams { wq: qk.clone(), wk: Matrix::identity(d), wv: pv.clone(), p: Matrix::identity(d), lambda: 0.0 }
}

/// `(W_kᵀW_q, PW_v)` of a head.
pub fn head_products(h: &HeadParams) -> (Matrix, Matrix) {
    (h.wk.t_matmul(&h.wq), h.p.matmul(&h.wv))
}

fn put_block(m: &mut Matrix, n: usize, row_ch: usize, col_ch: usize, block: &Matrix) {
    m.set_block(row_ch * n, col_ch * n, block);
}

/// One gradient step from `Φ₀` on the in-context regression objective,
/// realized by a single linear head.
pub fn prop1_weights(spec: &ConstructedTokenSpec, eta: f64, phi0: &Matrix) -> HeadParams {
    let n = spec.n_s;
    let d = spec.token_dim();
    let mut qk = Matrix::zeros(d, d);
    put_block(&mut qk, n, spec.previous(), spec.current(), &Matrix::identity(n));
    let mut pv = Matrix::zeros(d, d);
    put_block(&mut pv, n, 0, spec.current(), &Matrix::identity(n).scale(eta));
    put_block(&mut pv, n, 0, spec.previous(), &phi0.scale(-eta));
    head_from_products(&qk, &pv)
}

/// First channel of every token moved by `−η ∇L_t(Φ₀) s_t`, with
/// `∇L_t(Φ₀) = Σ_{t' ≤ t} (Φ₀ s_{t'−1} − s_{t'}) s_{t'−1}ᵀ`.
pub fn prop1_oracle_step(tokens: &Matrix, spec: &ConstructedTokenSpec, eta: f64, phi0: &Matrix) -> Matrix {
    let n = spec.n_s;
    let t_len = tokens.rows();
    let cur = |t: usize| &tokens.row(t)[spec.current() * n..(spec.current() + 1) * n];
    let prev = |t: usize| &tokens.row(t)[spec.previous() * n..(spec.previous() + 1) * n];
    let mut grad = Matrix::zeros(n, n);
    let mut out = tokens.clone();
    for t in 0..t_len {
        let resid: Vec<f64> = phi0.matvec(prev(t)).iter().zip(cur(t)).map(|(a, b)| a - b).collect();
        let d = grad.data_mut();
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] += resid[i] * prev(t)[j];
            }
        }
        let step = grad.matvec(cur(t));
        for (o, g) in out.row_mut(t)[..n].iter_mut().zip(step) {
            *o -= eta * g;
        }
    }
    out
}

/// How the preconditioning system is normalized before iterating.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the operator-norm estimate of each step's system.
    PerStep,
    /// Divide every system by the same constant.
    Fixed(f64),
}

/// Per-iteration step sizes and momenta of a second-order Richardson
/// (Chebyshev) solve of `(S_{t−1}S_{t−1}ᵀ + I/λ) x = s_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationParams {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub lambda: f64,
    pub normalization: Normalization,
}

impl IterationParams {
    pub fn k(&self) -> usize {
        self.alphas.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.len() != self.betas.len() {
            return Err(Error::InvalidConfig("alphas and betas differ in length".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::NonPositiveLambda(self.lambda));
        }
        if matches!(self.normalization, Normalization::Fixed(c) if !(c > 0.0)) {
            return Err(Error::InvalidConfig("normalization constant must be positive".into()));
        }
        Ok(())
    }

    /// Plain Richardson with step `alpha`.
    pub fn richardson(k: usize, alpha: f64, lambda: f64, normalization: Normalization) -> Self {
        IterationParams { alphas: vec![alpha; k], betas: vec![0.0; k], lambda, normalization }
    }

    /// Chebyshev semi-iteration for a spectrum inside `[lo, hi]`.
    pub fn chebyshev(k: usize, lo: f64, hi: f64, lambda: f64, normalization: Normalization) -> Self {
        let d = 0.5 * (hi + lo);
        let sigma = (hi - lo) / (hi + lo);
        let mut omega = 1.0;
        let (mut alphas, mut betas) = (Vec::with_capacity(k), Vec::with_capacity(k));
        for i in 0..k {
            if i == 1 {
                omega = 1.0 / (1.0 - 0.5 * sigma * sigma);
            } else if i > 1 {
                omega = 1.0 / (1.0 - 0.25 * sigma * sigma * omega);
            }
            alphas.push(omega / d);
            betas.push(1.0 - omega);
        }
        IterationParams { alphas, betas, lambda, normalization }
    }
}

/// Rows `t` hold the approximation of `H*_t s_t = (S_{t−1}S_{t−1}ᵀ + I/λ)⁻¹ s_t`,
/// where `S_{t−1}` stacks the observations before row `t`.
pub fn chebyshev_solve(seq: &Matrix, params: &IterationParams) -> Result<Matrix> {
    params.validate()?;
    let (t_len, n) = seq.shape();
    let inv_lam = 1.0 / params.lambda;
    let mut gram = Matrix::identity(n).scale(inv_lam);
    let mut out = Matrix::zeros(t_len, n);
    for t in 0..t_len {
        if t > 0 {
            let s = seq.row(t - 1);
            let g = gram.data_mut();
            for i in 0..n {
                for j in 0..n {
                    g[i * n + j] += s[i] * s[j];
                }
            }
        }
        let c = match params.normalization {
            Normalization::PerStep => {
                let est = operator_norm(&gram, 100);
                if t == 0 {
                    inv_lam
                } else {
                    est
                }
            }
            Normalization::Fixed(c) => c,
        };
        let b = seq.row(t).to_vec();
        let mut y = b.clone();
        let mut y_prev = b.clone();
        for (a, beta) in params.alphas.iter().zip(&params.betas) {
            let ay = gram.matvec(&y);
            let next: Vec<f64> = (0..n).map(|i| y[i] - a * (ay[i] / c - b[i]) - beta * (y[i] - y_prev[i])).collect();
            y_prev = std::mem::replace(&mut y, next);
        }
        for (o, v) in out.row_mut(t).iter_mut().zip(&y) {
            *o = v / c;
        }
    }
    Ok(out)
}

/// Exact `H*_t s_t` for every row, via Cholesky.
pub fn preconditioned_exact(seq: &Matrix, lambda: f64) -> Result<Matrix> {
    let (t_len, n) = seq.shape();
    let mut gram = Matrix::identity(n).scale(1.0 / lambda);
    let mut out = Matrix::zeros(t_len, n);
    for t in 0..t_len {
        if t > 0 {
            let s = Matrix::column(seq.row(t - 1));
            gram.add_assign(&s.matmul_t(&s));
        }
        let x = crate::numerics::solve_spd(&gram, &Matrix::column(seq.row(t)))?;
        out.row_mut(t).copy_from_slice(x.data());
    }
    Ok(out)
}

/// `f_t = η Σ_{t' ≤ t} s_{t'} (s_{t'−1}ᵀ x_t)`: one gradient step from zero
/// applied to the (possibly preconditioned) test inputs `x_t`.
pub fn gd_readout(seq: &Matrix, inputs: &Matrix, eta: f64) -> Matrix {
    let (t_len, n) = seq.shape();
    let mut phi = Matrix::zeros(n, n);
    let mut out = Matrix::zeros(t_len, n);
    for t in 1..t_len {
        let (y, x) = (seq.row(t), seq.row(t - 1));
        let d = phi.data_mut();
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] += y[i] * x[j];
            }
        }
        let p = phi.matvec(inputs.row(t));
        out.row_mut(t).copy_from_slice(&p);
    }
    out.scale(eta)
}

/// Per-step losses `½||s_{t+1} − f_t||²` (length `T − 1`).
pub fn prediction_losses(seq: &Matrix, preds: &Matrix) -> Vec<f64> {
    crate::model::step_losses(preds, seq).expect("same shapes")
}

fn mean_curve(curves: Vec<Vec<f64>>) -> Vec<f64> {
    let b = curves.len() as f64;
    let mut m = vec![0.0; curves.first().map_or(0, |c| c.len())];
    for c in curves {
        for (a, x) in m.iter_mut().zip(c) {
            *a += x / b;
        }
    }
    m
}

/// Learning rate minimizing `Σ ½||s_{t+1} − η g_t||²` over all sequences;
/// the objective is quadratic in `η`, so the line search is exact.
pub fn line_search_eta(seqs: &[Matrix], inputs: &[Matrix]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (seq, x) in seqs.iter().zip(inputs) {
        let g = gd_readout(seq, x, 1.0);
        for t in 0..seq.rows() - 1 {
            num += dot(g.row(t), seq.row(t + 1));
            den += dot(g.row(t), g.row(t));
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Mean loss curve of one gradient step with a line-searched rate.
pub fn one_step_gd_curve(seqs: &[Matrix], eta: Option<f64>) -> (f64, Vec<f64>) {
    let eta = eta.unwrap_or_else(|| line_search_eta(seqs, seqs));
    let curves = par::map_indexed(seqs.len(), |i| prediction_losses(&seqs[i], &gd_readout(&seqs[i], &seqs[i], eta)));
    (eta, mean_curve(curves))
}

/// Preconditioned single step: Chebyshev solve then one gradient step.
pub fn prop2_pipeline_predictions(seq: &Matrix, params: &IterationParams, eta: f64) -> Result<Matrix> {
    Ok(gd_readout(seq, &chebyshev_solve(seq, params)?, eta))
}

pub fn prop2_pipeline_curve(seqs: &[Matrix], params: &IterationParams, eta: f64) -> Result<Vec<f64>> {
    let curves = par::map_indexed(seqs.len(), |i| {
        prop2_pipeline_predictions(&seqs[i], params, eta).map(|p| prediction_losses(&seqs[i], &p))
    });
    Ok(mean_curve(curves.into_iter().collect::<Result<Vec<_>>>()?))
}

/// Linear head computing `−α S_{t−1}S_{t−1}ᵀ x_t` from the channel `query_ch`
/// holding `x_t` and `key_ch` holding `s_{t−1}`, written into `out_ch`.
pub fn prop2_layer_weights(
    n_s: usize,
    channels: usize,
    alpha: f64,
    query_ch: usize,
    key_ch: usize,
    out_ch: usize,
) -> HeadParams {
    let d = channels * n_s;
    let mut qk = Matrix::zeros(d, d);
    put_block(&mut qk, n_s, key_ch, query_ch, &Matrix::identity(n_s));
    let mut pv = Matrix::zeros(d, d);
    put_block(&mut pv, n_s, out_ch, key_ch, &Matrix::identity(n_s).scale(-alpha));
    head_from_products(&qk, &pv)
}

/// Channel layout of the attention-only Chebyshev stack:
/// `[output, y^k, y^{k−1}, s_t, s_{t−1}]`.
pub const PROP2_CHANNELS: usize = 5;

/// Runs the Chebyshev iteration as `K` linear attention layers separated by
/// fixed channel maps, then one gradient-step layer. Returns the predictions.
/// Needs a fixed normalization constant, since a layer cannot renormalize
/// per time step.
pub fn prop2_stack_forward(seq: &Matrix, params: &IterationParams, eta: f64) -> Result<Matrix> {
    params.validate()?;
    let c = match params.normalization {
        Normalization::Fixed(c) => c,
        Normalization::PerStep => {
            return Err(Error::InvalidConfig("the attention stack needs a fixed normalization".into()))
        }
    };
    let (t_len, n) = seq.shape();
    let mut e = Matrix::zeros(t_len, PROP2_CHANNELS * n);
    for t in 0..t_len {
        let row = e.row_mut(t);
        for ch in 1..4 {
            row[ch * n..(ch + 1) * n].copy_from_slice(seq.row(t));
        }
        if t > 0 {
            row[4 * n..].copy_from_slice(seq.row(t - 1));
        }
    }
    let inv_lam = 1.0 / params.lambda;
    for (a, beta) in params.alphas.iter().zip(&params.betas) {
        // attention writes −(α/c) S Sᵀ y^k into the scratch output channel
        let head = prop2_layer_weights(n, PROP2_CHANNELS, a / c, 1, 4, 0);
        e = e.add(&linear_attention(&e, &[head], None, None)?);
        for t in 0..t_len {
            let row = e.row_mut(t);
            for i in 0..n {
                let (scratch, y, yp, b) = (row[i], row[n + i], row[2 * n + i], row[3 * n + i]);
                row[n + i] = (1.0 - a * inv_lam / c - beta) * y + scratch + beta * yp + a * b;
                row[2 * n + i] = y;
                row[i] = 0.0;
            }
        }
    }
    // gradient step on the preconditioned queries y^K / c
    let mut qk = Matrix::zeros(PROP2_CHANNELS * n, PROP2_CHANNELS * n);
    put_block(&mut qk, n, 4, 1, &Matrix::identity(n).scale(1.0 / c));
    let mut pv = Matrix::zeros(PROP2_CHANNELS * n, PROP2_CHANNELS * n);
    put_block(&mut pv, n, 0, 3, &Matrix::identity(n).scale(eta));
    let e = e.add(&linear_attention(&e, &[head_from_products(&qk, &pv)], None, None)?);
    Ok(e.slice_cols(0, n))
}

/// Coordinate search over `α_k`, `β_k`, λ and the normalization constant,
/// with `η` solved exactly at each candidate. Minimizes the mean cumulative
/// loss on `seqs`.
pub fn tune_iteration_params(seqs: &[Matrix], k: usize, rounds: usize) -> Result<(IterationParams, f64)> {
    let objective = |p: &IterationParams| -> Result<(f64, f64)> {
        let inputs: Vec<Matrix> =
            par::map_indexed(seqs.len(), |i| chebyshev_solve(&seqs[i], p)).into_iter().collect::<Result<_>>()?;
        let eta = line_search_eta(seqs, &inputs);
        let curves = par::map_indexed(seqs.len(), |i| prediction_losses(&seqs[i], &gd_readout(&seqs[i], &inputs[i], eta)));
        Ok((mean_curve(curves).iter().sum(), eta))
    };
    // Spectrum scale: largest Gram norm over the tuning batch.
    let top = seqs
        .iter()
        .map(|s| operator_norm(&s.t_matmul(s), 100))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut best: Option<(IterationParams, f64, f64)> = None;
    for lambda in [0.1, 0.3, 1.0, 3.0, 10.0, 30.0] {
        let c = top + 1.0 / lambda;
        let lo = (1.0 / lambda) / c;
        for lo_mult in [1.0, 3.0, 10.0, 30.0] {
            let p = IterationParams::chebyshev(k, (lo * lo_mult).min(0.5), 1.0, lambda, Normalization::Fixed(c));
            let (loss, eta) = objective(&p)?;
            if best.as_ref().map_or(true, |b| loss < b.1) {
                best = Some((p, loss, eta));
            }
        }
    }
    let (mut p, mut loss, mut eta) = best.expect("grid is non-empty");
    let mults = [0.5, 0.8, 0.95, 1.05, 1.25, 2.0];
    for _ in 0..rounds {
        for i in 0..k {
            for which in 0..2 {
                for m in mults {
                    let mut cand = p.clone();
                    if which == 0 {
                        cand.alphas[i] *= m;
                    } else if i > 0 {
                        cand.betas[i] = if cand.betas[i] == 0.0 { -0.1 * (m - 1.0) } else { cand.betas[i] * m };
                    } else {
                        continue;
                    }
                    let (l, e) = objective(&cand)?;
                    if l < loss {
                        (p, loss, eta) = (cand, l, e);
                    }
                }
            }
        }
        for m in mults {
            let mut cand = p.clone();
            cand.lambda *= m;
            let (l, e) = objective(&cand)?;
            if l < loss {
                (p, loss, eta) = (cand, l, e);
            }
        }
    }
    Ok((p, eta))
}

/// Scalars of a compressed head: diagonal means of every `n_s × n_s` block
/// of `W_kᵀW_q` and `PW_v`, row-major over channel pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressedHead {
    pub qk: Vec<f64>,
    pub pv: Vec<f64>,
}

impl CompressedHead {
    pub fn len(&self) -> usize {
        self.qk.len() + self.pv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedModel {
    pub config: TransformerConfig,
    pub params: ModelParams,
    /// `heads[layer][head]`
    pub heads: Vec<Vec<CompressedHead>>,
}

fn check_linear_stack(config: &TransformerConfig, n_s: usize) -> Result<usize> {
    if config.layers.iter().any(|k| *k != LayerKind::Linear) {
        return Err(Error::NotLinearStack("every layer must be linear attention".into()));
    }
    if config.input_embedding || config.use_mlp || config.use_layernorm || config.readout != Readout::FirstDims {
        return Err(Error::NotLinearStack("expected a bare stack on constructed tokens".into()));
    }
    if n_s == 0 || config.embed_dim % n_s != 0 {
        return Err(Error::NotLinearStack(format!("width {} is not a multiple of {n_s}", config.embed_dim)));
    }
    Ok(config.embed_dim / n_s)
}

fn block_diag_means(m: &Matrix, n: usize, ch: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(ch * ch);
    for bi in 0..ch {
        for bj in 0..ch {
            out.push((0..n).map(|i| m.get(bi * n + i, bj * n + i)).sum::<f64>() / n as f64);
        }
    }
    out
}

fn from_block_scalars(s: &[f64], n: usize, ch: usize) -> Matrix {
    let mut m = Matrix::zeros(ch * n, ch * n);
    for bi in 0..ch {
        for bj in 0..ch {
            for i in 0..n {
                m.set(bi * n + i, bj * n + i, s[bi * ch + bj]);
            }
        }
    }
    m
}

/// Config whose heads are full-width so that any product is representable.
pub fn product_config(config: &TransformerConfig) -> TransformerConfig {
    let mut c = config.clone();
    c.key_size = c.embed_dim;
    c.value_size = Some(c.embed_dim);
    c
}

/// Rebuilds every head from scaled-identity blocks. `keep(qk_or_pv, row_ch, col_ch)`
/// selects which blocks survive; the others are zeroed.
pub fn project_blocks<F>(params: &ModelParams, config: &TransformerConfig, n_s: usize, keep: F) -> Result<CompressedModel>
where
    F: Fn(bool, usize, usize) -> bool,
{
    let ch = check_linear_stack(config, n_s)?;
    let out_cfg = product_config(config);
    let mut out = ModelParams::zeros(&out_cfg);
    let mut heads = Vec::new();
    for l in 0..config.layers.len() {
        let mut row = Vec::new();
        for h in 0..config.heads {
            let (qk, pv) = head_products(&params.head(l, h)?);
            let mut sq = block_diag_means(&qk, n_s, ch);
            let mut sp = block_diag_means(&pv, n_s, ch);
            for bi in 0..ch {
                for bj in 0..ch {
                    if !keep(true, bi, bj) {
                        sq[bi * ch + bj] = 0.0;
                    }
                    if !keep(false, bi, bj) {
                        sp[bi * ch + bj] = 0.0;
                    }
                }
            }
            let hp = head_from_products(&from_block_scalars(&sq, n_s, ch), &from_block_scalars(&sp, n_s, ch));
            out.set_head(l, h, &hp);
            row.push(CompressedHead { qk: sq, pv: sp });
        }
        heads.push(row);
    }
    Ok(CompressedModel { config: out_cfg, params: out, heads })
}

/// Sparse reparameterization: one scalar per channel block and product.
pub fn compress_algorithm(params: &ModelParams, config: &TransformerConfig, n_s: usize) -> Result<CompressedModel> {
    project_blocks(params, config, n_s, |_, _, _| true)
}

/// Projection onto the single-step gradient pattern: key channel `s_{t−1}`
/// against query channels holding `s_t`, and values from `s_t`, `s_{t−1}`
/// into the output channel. Both copies of `s_t` in the four-channel layout
/// count, since a trained model splits its weight between them.
pub fn prop1_fit(params: &ModelParams, config: &TransformerConfig, spec: &ConstructedTokenSpec) -> Result<CompressedModel> {
    let prev = spec.previous();
    let holds_current = |c: usize| c >= spec.current() && c < prev;
    project_blocks(params, config, spec.n_s, |is_qk, r, c| {
        if is_qk {
            r == prev && holds_current(c)
        } else {
            r == 0 && (holds_current(c) || c == prev)
        }
    })
}

fn same_shape_config(a: &TransformerConfig, b: &TransformerConfig) -> bool {
    let (mut x, mut y) = (product_config(a), product_config(b));
    x.init_std = 0.0;
    y.init_std = 0.0;
    x == y
}

/// Interpolates head products (not factors) and every other tensor
/// linearly; heads are refactored with identity keys and values.
pub fn interpolate_products(
    config_a: &TransformerConfig,
    params_a: &ModelParams,
    config_b: &TransformerConfig,
    params_b: &ModelParams,
    w: f64,
) -> Result<(TransformerConfig, ModelParams)> {
    if !same_shape_config(config_a, config_b) {
        return Err(Error::ConfigMismatch("architectures differ beyond head width".into()));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidConfig(format!("interpolation weight {w} outside [0, 1]")));
    }
    let cfg = product_config(config_a);
    let mut out = ModelParams::zeros(&cfg);
    for (name, _) in cfg.param_shapes() {
        if name.contains(".head") {
            continue;
        }
        let (a, b) = (params_a.get(&name)?, params_b.get(&name)?);
        out.set(&name, a.scale(1.0 - w).add(&b.scale(w)));
    }
    for l in 0..cfg.layers.len() {
        for h in 0..cfg.heads {
            let (ha, hb) = (params_a.head(l, h)?, params_b.head(l, h)?);
            let (qa, pa) = head_products(&ha);
            let (qb, pb) = head_products(&hb);
            let mut hp = head_from_products(&qa.scale(1.0 - w).add(&qb.scale(w)), &pa.scale(1.0 - w).add(&pb.scale(w)));
            hp.lambda = (1.0 - w) * ha.lambda + w * hb.lambda;
            out.set_head(l, h, &hp);
        }
    }
    Ok((cfg, out))
}
