//! Softmax, linear and mesa attention heads as eager kernels.
//!
//! Tokens are rows: a sequence is a `T × n_e` matrix. Keys, queries and
//! values of one head are `T × n_a`, `T × n_a` and `T × n_v`. The forget
//! mask is indexed `M[t', t]` (source, target), so the score matrix of a
//! linear head is `(Q Kᵀ) ⊙ Mᵀ`.

use crate::error::{Error, Result};
use crate::numerics::{dot, inv_spd, operator_norm, Matrix};

/// Causal mask value for softmax logits.
pub const MASKED_LOGIT: f64 = -1e30;

/// Reverse downdates closer than this to singular are refused.
pub const DEGENERATE_GAP: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub p: Matrix,
    /// Ridge strength of a mesa head; ignored by the other families.
    pub lambda: f64,
}

impl HeadParams {
    pub fn key_size(&self) -> usize {
        self.wq.rows()
    }

    pub fn project(&self, e: &Matrix) -> (Matrix, Matrix, Matrix) {
        (e.matmul_t(&self.wq), e.matmul_t(&self.wk), e.matmul_t(&self.wv))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Softmax,
    Linear,
    Mesa,
}

/// Validates a forget schedule: every γ in (0, 1].
pub fn check_gammas(g: &[f64]) -> Result<()> {
    match g.iter().position(|x| !(*x > 0.0 && *x <= 1.0)) {
        Some(i) => Err(Error::ShapeMismatch(format!("gamma[{i}] = {} outside (0, 1]", g[i]))),
        None => Ok(()),
    }
}

/// `M[t', t] = 1{t' ≤ t} · Π_{t'' = t'+1..t} γ_{t''}`.
pub fn forget_mask(gammas: &[f64]) -> Matrix {
    let t_len = gammas.len();
    let mut m = Matrix::zeros(t_len, t_len);
    for t in 0..t_len {
        let mut prod = 1.0;
        for tp in (0..=t).rev() {
            m.set(tp, t, prod);
            prod *= gammas[tp];
        }
    }
    m
}

/// Lower-triangular ones in score orientation (`[t, t'] = 1{t' ≤ t}`).
pub fn causal_ones(t_len: usize) -> Matrix {
    Matrix::from_fn(t_len, t_len, |t, tp| if tp <= t { 1.0 } else { 0.0 })
}

/// Score-oriented mask `Mᵀ`, or plain causal ones without a schedule.
pub fn score_mask(t_len: usize, gammas: Option<&[f64]>) -> Matrix {
    match gammas {
        Some(g) => forget_mask(g).transpose(),
        None => causal_ones(t_len),
    }
}

pub fn softmax_rows_masked(logits: &Matrix, causal: bool) -> Matrix {
    let (rows, cols) = logits.shape();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let src = logits.row(r);
        let dst = out.row_mut(r);
        let mut mx = f64::NEG_INFINITY;
        for c in 0..cols {
            let x = if causal && c > r { MASKED_LOGIT } else { src[c] };
            dst[c] = x;
            mx = mx.max(x);
        }
        let mut s = 0.0;
        for x in dst.iter_mut() {
            *x = (*x - mx).exp();
            s += *x;
        }
        for x in dst.iter_mut() {
            *x /= s;
        }
    }
    out
}

fn with_pe(x: &Matrix, pe: Option<&Matrix>) -> Matrix {
    match pe {
        Some(p) if p.cols() > 0 => Matrix::hcat(&[x, p]),
        _ => x.clone(),
    }
}

/// Causal softmax attention weights `T × T` of one head.
pub fn softmax_weights(e: &Matrix, h: &HeadParams, pe: Option<&Matrix>) -> Matrix {
    let (q, k, _) = h.project(e);
    let q = with_pe(&q, pe);
    let k = with_pe(&k, pe);
    softmax_rows_masked(&q.matmul_t(&k), true)
}

/// `Δe_t = Σ_h P_h V_h softmax(K_hᵀ q_{h,t})` with a causal mask.
pub fn softmax_attention(e: &Matrix, heads: &[HeadParams], pe: Option<&Matrix>) -> Result<Matrix> {
    check_heads(e, heads)?;
    let mut out = Matrix::zeros(e.rows(), e.cols());
    for h in heads {
        let a = softmax_weights(e, h, pe);
        let (_, _, v) = h.project(e);
        out.add_assign(&a.matmul(&v).matmul_t(&h.p));
    }
    Ok(out)
}

/// Linear attention scores `(Q Kᵀ) ⊙ Mᵀ` of one head.
pub fn linear_scores(e: &Matrix, h: &HeadParams, gammas: Option<&[f64]>, pe: Option<&Matrix>) -> Matrix {
    let (q, k, _) = h.project(e);
    let q = with_pe(&q, pe);
    let k = with_pe(&k, pe);
    q.matmul_t(&k).hadamard(&score_mask(e.rows(), gammas))
}

/// `Δe_t = Σ_h P_h V_h (M[:, t] ⊙ K_hᵀ q_{h,t})`.
pub fn linear_attention(
    e: &Matrix,
    heads: &[HeadParams],
    gammas: Option<&[f64]>,
    pe: Option<&Matrix>,
) -> Result<Matrix> {
    check_heads(e, heads)?;
    if let Some(g) = gammas {
        check_gammas(g)?;
        if g.len() != e.rows() {
            return Err(Error::ShapeMismatch("gamma length".into()));
        }
    }
    let mut out = Matrix::zeros(e.rows(), e.cols());
    for h in heads {
        let s = linear_scores(e, h, gammas, pe);
        let (_, _, v) = h.project(e);
        out.add_assign(&s.matmul(&v).matmul_t(&h.p));
    }
    Ok(out)
}

/// Mesa attention summed over heads.
pub fn mesa_attention(e: &Matrix, heads: &[HeadParams], gammas: Option<&[f64]>) -> Result<Matrix> {
    check_heads(e, heads)?;
    let mut out = Matrix::zeros(e.rows(), e.cols());
    for h in heads {
        let (q, k, v) = h.project(e);
        let f = mesa_forward(&k, &q, &v, h.lambda, gammas, false)?;
        out.add_assign(&f.y.matmul_t(&h.p));
    }
    Ok(out)
}

fn check_heads(e: &Matrix, heads: &[HeadParams]) -> Result<()> {
    for (i, h) in heads.iter().enumerate() {
        let ok = h.wq.cols() == e.cols()
            && h.wk.cols() == e.cols()
            && h.wv.cols() == e.cols()
            && h.wq.rows() == h.wk.rows()
            && h.p.rows() == e.cols()
            && h.p.cols() == h.wv.rows();
        if !ok {
            return Err(Error::ShapeMismatch(format!("head {i} does not fit {}-dim tokens", e.cols())));
        }
    }
    Ok(())
}

/// Output of the recursive mesa forward pass for one head.
#[derive(Clone, Debug)]
pub struct MesaForward {
    /// Readout `y_t = Σ_{t'} M[t', t] (k_{t'}·q̃_t) v_{t'}`, `T × n_v`.
    pub y: Matrix,
    /// Preconditioned queries `q̃_t = R_t q_t`, `T × n_a`.
    pub q_tilde: Matrix,
    /// Final state `R_T`.
    pub r_final: Matrix,
    /// `R_0 … R_T` when requested.
    pub trace: Option<Vec<Matrix>>,
}

/// One forgetting Sherman–Morrison update, symmetrized.
///
/// `R ← γ⁻¹ (R − R k kᵀ R / (γ + kᵀ R k))`
pub fn sm_update(r: &mut Matrix, k: &[f64], gamma: f64, u: &mut Vec<f64>) {
    let n = k.len();
    u.clear();
    u.extend((0..n).map(|i| dot(r.row(i), k)));
    let c = gamma + dot(k, u);
    let inv_g = 1.0 / gamma;
    let d = r.data_mut();
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] = inv_g * (d[i * n + j] - u[i] * u[j] / c);
        }
    }
    r.symmetrize();
}

/// Recursive mesa forward for one head.
pub fn mesa_forward(
    k: &Matrix,
    q: &Matrix,
    v: &Matrix,
    lambda: f64,
    gammas: Option<&[f64]>,
    keep_trace: bool,
) -> Result<MesaForward> {
    if !(lambda > 0.0) {
        return Err(Error::NonPositiveLambda(lambda));
    }
    let (t_len, n_a) = k.shape();
    if q.shape() != (t_len, n_a) || v.rows() != t_len {
        return Err(Error::ShapeMismatch("mesa K/Q/V".into()));
    }
    if let Some(g) = gammas {
        check_gammas(g)?;
        if g.len() != t_len {
            return Err(Error::ShapeMismatch("gamma length".into()));
        }
    }
    let mut r = Matrix::identity(n_a).scale(lambda);
    let mut trace = keep_trace.then(|| vec![r.clone()]);
    let mut q_tilde = Matrix::zeros(t_len, n_a);
    let mut u = Vec::with_capacity(n_a);
    for t in 0..t_len {
        let g = gammas.map_or(1.0, |g| g[t]);
        sm_update(&mut r, k.row(t), g, &mut u);
        let qt = r.matvec(q.row(t));
        q_tilde.row_mut(t).copy_from_slice(&qt);
        if let Some(tr) = trace.as_mut() {
            tr.push(r.clone());
        }
    }
    let scores = q_tilde.matmul_t(k).hadamard(&score_mask(t_len, gammas));
    Ok(MesaForward { y: scores.matmul(v), q_tilde, r_final: r, trace })
}

/// Gradients of one mesa head.
#[derive(Clone, Debug, PartialEq)]
pub struct MesaGrads {
    pub dk: Matrix,
    pub dq: Matrix,
    pub dv: Matrix,
    pub dgamma: Vec<f64>,
    pub dlambda: f64,
}

impl MesaGrads {
    pub fn zeros(t_len: usize, n_a: usize, n_v: usize) -> Self {
        MesaGrads {
            dk: Matrix::zeros(t_len, n_a),
            dq: Matrix::zeros(t_len, n_a),
            dv: Matrix::zeros(t_len, n_v),
            dgamma: vec![0.0; t_len],
            dlambda: 0.0,
        }
    }

    fn reset(&mut self) {
        self.dk.scale_in_place(0.0);
        self.dq.scale_in_place(0.0);
        self.dv.scale_in_place(0.0);
        self.dgamma.iter_mut().for_each(|x| *x = 0.0);
        self.dlambda = 0.0;
    }

    pub fn max_abs_diff(&self, other: &MesaGrads) -> f64 {
        let g = self
            .dgamma
            .iter()
            .zip(&other.dgamma)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        self.dk
            .max_abs_diff(&other.dk)
            .max(self.dq.max_abs_diff(&other.dq))
            .max(self.dv.max_abs_diff(&other.dv))
            .max(g)
            .max((self.dlambda - other.dlambda).abs())
    }

    pub fn max_abs(&self) -> f64 {
        self.dk
            .max_abs()
            .max(self.dq.max_abs())
            .max(self.dv.max_abs())
            .max(self.dgamma.iter().fold(0.0f64, |m, x| m.max(x.abs())))
            .max(self.dlambda.abs())
    }
}

/// Memory-lean reverse pass for one mesa head.
///
/// Walks t = T…1, rebuilding `R_{t−1}` from `R_t` by the inverse
/// Sherman–Morrison downdate, and accumulates every gradient straight into
/// `out`. Beyond `out`, working storage is a handful of `n_a × n_a`
/// matrices and `n_a`-vectors, so it does not grow with T.
#[allow(clippy::too_many_arguments)]
pub fn mesa_backward_into(
    k: &Matrix,
    q: &Matrix,
    v: &Matrix,
    lambda: f64,
    gammas: Option<&[f64]>,
    r_final: &Matrix,
    dy: &Matrix,
    out: &mut MesaGrads,
) -> Result<()> {
    let (t_len, n_a) = k.shape();
    let n_v = v.cols();
    if dy.shape() != (t_len, n_v) || out.dk.shape() != (t_len, n_a) || out.dv.shape() != (t_len, n_v) {
        return Err(Error::ShapeMismatch("mesa backward buffers".into()));
    }
    out.reset();
    let gam = |t: usize| gammas.map_or(1.0, |g| g[t]);

    let mut r = r_final.clone();
    let mut d_r = Matrix::zeros(n_a, n_a);
    let mut x = Matrix::zeros(n_a, n_a);
    let mut qt = vec![0.0; n_a];
    let mut g = vec![0.0; n_a];
    let mut u = vec![0.0; n_a];
    let mut w = vec![0.0; n_a];
    let mut tmp = vec![0.0; n_a];

    for t in (0..t_len).rev() {
        let q_t = q.row(t);
        let dy_t = dy.row(t);
        for i in 0..n_a {
            qt[i] = dot(r.row(i), q_t);
        }
        // Readout column t: g = dL/dq̃_t, plus dK, dV and mask terms.
        g.iter_mut().for_each(|x| *x = 0.0);
        let mut total = 0.0;
        let mut m = 1.0;
        for tp in (0..=t).rev() {
            let k_tp = k.row(tp);
            let a = dot(k_tp, &qt);
            let b = dot(dy_t, v.row(tp));
            let mb = m * b;
            for i in 0..n_a {
                g[i] += mb * k_tp[i];
            }
            let dk_row = out.dk.row_mut(tp);
            for i in 0..n_a {
                dk_row[i] += mb * qt[i];
            }
            let ma = m * a;
            let dv_row = out.dv.row_mut(tp);
            for i in 0..n_v {
                dv_row[i] += ma * dy_t[i];
            }
            total += a * b * m;
            m *= gam(tp);
        }
        if let Some(gs) = gammas {
            // dγ_j += Σ_{t' < j ≤ t} dM[t',t] M[t',t] / γ_j, via a suffix pass.
            let mut suffix = 0.0;
            let mut m = 1.0;
            for tp in (1..=t).rev() {
                let c = dot(k.row(tp), &qt) * dot(dy_t, v.row(tp)) * m;
                suffix += c;
                out.dgamma[tp] += (total - suffix) / gs[tp];
                m *= gs[tp];
            }
        }
        // q̃_t = R_t q_t: dq_t = R_t g, dR_t += g q_tᵀ.
        let dq_row = out.dq.row_mut(t);
        for i in 0..n_a {
            dq_row[i] = dot(r.row(i), &g);
        }
        for i in 0..n_a {
            for j in 0..n_a {
                x.set(i, j, d_r.get(i, j) + g[i] * q_t[j]);
            }
        }
        x.symmetrize();
        let xr = dot(x.data(), r.data());

        // Rebuild P = R_{t−1} = γ (R_t − R_t k kᵀ R_t / (kᵀ R_t k − 1)).
        let k_t = k.row(t);
        let gamma = gam(t);
        for i in 0..n_a {
            tmp[i] = dot(r.row(i), k_t);
        }
        let s = dot(k_t, &tmp) - 1.0;
        if s.abs() < DEGENERATE_GAP {
            return Err(Error::DegenerateReverse { step: t + 1, gap: s.abs() });
        }
        {
            let rd = r.data_mut();
            for i in 0..n_a {
                for j in 0..n_a {
                    rd[i * n_a + j] = gamma * (rd[i * n_a + j] - tmp[i] * tmp[j] / s);
                }
            }
        }
        r.symmetrize();

        // Adjoint of R_t = γ⁻¹ (P − u uᵀ / c), u = P k, c = γ + kᵀ u.
        for i in 0..n_a {
            u[i] = dot(r.row(i), k_t);
        }
        let c = gamma + dot(k_t, &u);
        for i in 0..n_a {
            w[i] = dot(x.row(i), &u);
        }
        let uxu = dot(&u, &w);
        if gammas.is_some() {
            out.dgamma[t] += (-xr + uxu / (c * c)) / gamma;
        }
        // dk_t: −2 P X u / (γ c) + 2 (uᵀXu) u / (γ c²)
        let dk_row = out.dk.row_mut(t);
        for i in 0..n_a {
            let pxu = dot(r.row(i), &w);
            dk_row[i] += (-2.0 * pxu / c + 2.0 * uxu * u[i] / (c * c)) / gamma;
        }
        // dP = γ⁻¹ [X − (w kᵀ + k wᵀ)/c + (uᵀXu) k kᵀ / c²]
        let dd = d_r.data_mut();
        for i in 0..n_a {
            for j in 0..n_a {
                dd[i * n_a + j] = (x.get(i, j) - (w[i] * k_t[j] + k_t[i] * w[j]) / c
                    + uxu * k_t[i] * k_t[j] / (c * c))
                    / gamma;
            }
        }
    }
    out.dlambda = d_r.trace();
    // Drift guard: the rebuilt R_0 must be λI.
    let drift = (0..n_a)
        .flat_map(|i| (0..n_a).map(move |j| (i, j)))
        .fold(0.0f64, |mx, (i, j)| {
            let target = if i == j { lambda } else { 0.0 };
            mx.max((r.get(i, j) - target).abs())
        });
    if drift > 1e-6 * lambda.max(1.0) {
        return Err(Error::DegenerateReverse { step: 0, gap: drift });
    }
    Ok(())
}

/// Convenience wrapper allocating the outputs.
pub fn mesa_backward(
    k: &Matrix,
    q: &Matrix,
    v: &Matrix,
    lambda: f64,
    gammas: Option<&[f64]>,
    r_final: &Matrix,
    dy: &Matrix,
) -> Result<MesaGrads> {
    let mut out = MesaGrads::zeros(k.rows(), k.cols(), v.cols());
    mesa_backward_into(k, q, v, lambda, gammas, r_final, dy, &mut out)?;
    Ok(out)
}

/// Store-everything reference backward.
///
/// Uses every stored `R_t` and differentiates the closed form
/// `R_t⁻¹ = Σ_{t'} M[t',t] k_{t'} k_{t'}ᵀ + (Π_{j≤t} γ_j / λ) I` directly:
/// with `Y_t = −R_t X_t R_t` the adjoint of `R_t⁻¹`, keys pick up
/// `2 M Y_t k`, the mask picks up `kᵀ Y_t k` and λ picks up
/// `−tr(Y_t) Π γ / λ²`. No reverse recursion is involved.
pub fn mesa_backward_stored(
    k: &Matrix,
    q: &Matrix,
    v: &Matrix,
    lambda: f64,
    gammas: Option<&[f64]>,
    dy: &Matrix,
) -> Result<MesaGrads> {
    let (t_len, n_a) = k.shape();
    let fwd = mesa_forward(k, q, v, lambda, gammas, true)?;
    let trace = fwd.trace.expect("trace requested");
    let gam: Vec<f64> = gammas.map_or(vec![1.0; t_len], |g| g.to_vec());
    let mt = score_mask(t_len, gammas); // [t, t']
    let s0 = fwd.q_tilde.matmul_t(k); // [t, t'] = q̃_t · k_t'
    let scores = s0.hadamard(&mt);
    let d_scores = dy.matmul_t(v);
    let dv = scores.t_matmul(dy);
    let ds0 = d_scores.hadamard(&mt);
    let dqt = ds0.matmul(k);
    let mut dk = ds0.t_matmul(&fwd.q_tilde);
    // dMᵀ[t, t'] from the readout.
    let mut dmt = d_scores.hadamard(&s0);
    let mut dq = Matrix::zeros(t_len, n_a);
    let mut dlambda = 0.0;
    let mut dgamma = vec![0.0; t_len];
    let mut prod_gamma = 1.0;
    for t in 0..t_len {
        prod_gamma *= gam[t];
        let rt = &trace[t + 1];
        let g = dqt.row(t);
        let dq_t = rt.matvec(g);
        dq.row_mut(t).copy_from_slice(&dq_t);
        // X_t = sym(g qᵀ); Y_t = −R X R
        let mut xm = Matrix::column(g).matmul_t(&Matrix::column(q.row(t)));
        xm.symmetrize();
        let y = rt.matmul(&xm).matmul(rt).scale(-1.0);
        for tp in 0..=t {
            let kk = k.row(tp);
            let yk = y.matvec(kk);
            let m = mt.get(t, tp);
            let row = dk.row_mut(tp);
            for i in 0..n_a {
                row[i] += 2.0 * m * yk[i];
            }
            let old = dmt.get(t, tp);
            dmt.set(t, tp, old + dot(kk, &yk));
        }
        let tr = y.trace();
        dlambda += -tr * prod_gamma / (lambda * lambda);
        if gammas.is_some() {
            for j in 0..=t {
                dgamma[j] += tr * prod_gamma / lambda / gam[j];
            }
        }
    }
    if gammas.is_some() {
        // dγ_j from M[t',t] = Π_{t'<j≤t} γ_j.
        for t in 0..t_len {
            for tp in 0..t {
                let c = dmt.get(t, tp) * mt.get(t, tp);
                for j in (tp + 1)..=t {
                    dgamma[j] += c / gam[j];
                }
            }
        }
    }
    Ok(MesaGrads { dk, dq, dv, dgamma, dlambda })
}

/// Closed-form `R_t` by direct inversion of the regularized Gram matrix.
pub fn mesa_state_direct(k: &Matrix, lambda: f64, gammas: Option<&[f64]>, t: usize) -> Result<Matrix> {
    let n_a = k.cols();
    let mut a = Matrix::zeros(n_a, n_a);
    let mut prod = 1.0;
    let mut m = 1.0;
    for tp in (0..=t).rev() {
        let kk = Matrix::column(k.row(tp));
        a.axpy(m, &kk.matmul_t(&kk));
        let g = gammas.map_or(1.0, |g| g[tp]);
        m *= g;
        prod *= g;
    }
    for i in 0..n_a {
        let x = a.get(i, i) + prod / lambda;
        a.set(i, i, x);
    }
    inv_spd(&a)
}

/// Truncated Neumann-series mesa forward, parallel over time steps.
///
/// Each system matrix `A_t` is divided by `1.01 ×` its power-iteration norm
/// estimate when that estimate exceeds one; spectra already inside (0, 1]
/// are iterated as they are.
pub fn mesa_forward_neumann(
    k: &Matrix,
    q: &Matrix,
    v: &Matrix,
    lambda: f64,
    gammas: Option<&[f64]>,
    steps: usize,
) -> Result<Matrix> {
    Ok(neumann_queries(k, q, lambda, gammas, steps)?.0.matmul_t(k).hadamard(&score_mask(k.rows(), gammas)).matmul(v))
}

/// Neumann approximations of `q̃_t` for all t, and the per-step scale used.
pub fn neumann_queries(
    k: &Matrix,
    q: &Matrix,
    lambda: f64,
    gammas: Option<&[f64]>,
    steps: usize,
) -> Result<(Matrix, Vec<f64>)> {
    if !(lambda > 0.0) {
        return Err(Error::NonPositiveLambda(lambda));
    }
    let (t_len, n_a) = k.shape();
    let mt = score_mask(t_len, gammas);
    let mut reg = vec![0.0; t_len];
    let mut prod = 1.0;
    for t in 0..t_len {
        prod *= gammas.map_or(1.0, |g| g[t]);
        reg[t] = prod / lambda;
    }
    // A_t x_t for every row x_t of X at once.
    let apply = |x: &Matrix| -> Matrix {
        let mut ax = x.matmul_t(k).hadamard(&mt).matmul(k);
        for t in 0..t_len {
            let row = ax.row_mut(t);
            for i in 0..n_a {
                row[i] += reg[t] * x.get(t, i);
            }
        }
        ax
    };
    let mut scale = vec![1.0; t_len];
    for t in 0..t_len {
        let mut a = Matrix::zeros(n_a, n_a);
        for tp in 0..=t {
            let kk = Matrix::column(k.row(tp));
            a.axpy(mt.get(t, tp), &kk.matmul_t(&kk));
        }
        for i in 0..n_a {
            let d = a.get(i, i) + reg[t];
            a.set(i, i, d);
        }
        let est = operator_norm(&a, 30);
        if est > 1.0 + 1e-9 {
            scale[t] = 1.01 * est;
        }
    }
    let mut x = q.clone();
    for _ in 0..steps {
        let ax = apply(&x);
        let mut next = q.clone();
        for t in 0..t_len {
            let row = next.row_mut(t);
            for i in 0..n_a {
                row[i] += x.get(t, i) - ax.get(t, i) / scale[t];
            }
        }
        x = next;
    }
    for t in 0..t_len {
        let s = 1.0 / scale[t];
        x.row_mut(t).iter_mut().for_each(|v| *v *= s);
    }
    Ok((x, scale))
}

/// Compares the value-gradient of the mesa readout with the implicit
/// function theorem route `∂Φ̂_t/∂v_{t'} = M[t',t] R_t k_{t'}`, where
/// `R_t` comes from a direct inverse. Returns the max relative gap.
pub fn mesa_ifth_gradient_check(
    k: &Matrix,
    q: &Matrix,
    v: &Matrix,
    lambda: f64,
    gammas: Option<&[f64]>,
    dy: &Matrix,
) -> Result<f64> {
    let (t_len, _) = k.shape();
    let fwd = mesa_forward(k, q, v, lambda, gammas, false)?;
    let grads = match mesa_backward(k, q, v, lambda, gammas, &fwd.r_final, dy) {
        Ok(g) => g,
        Err(Error::DegenerateReverse { .. }) => mesa_backward_stored(k, q, v, lambda, gammas, dy)?,
        Err(e) => return Err(e),
    };
    let fm = gammas.map(forget_mask);
    let mut ift = Matrix::zeros(t_len, v.cols());
    for t in 0..t_len {
        let rt = mesa_state_direct(k, lambda, gammas, t)?;
        let rq = rt.matvec(q.row(t));
        for tp in 0..=t {
            let m = fm.as_ref().map_or(1.0, |m| m.get(tp, t));
            // (∂Φ̂_t/∂v_{t'})ᵀ dy_t q_t contracted: dy_t · ⟨M R_t k_{t'}, q_t⟩
            let coef = m * dot(k.row(tp), &rq);
            let row = ift.row_mut(tp);
            for (i, x) in row.iter_mut().enumerate() {
                *x += coef * dy.get(t, i);
            }
        }
    }
    let mut worst = 0.0f64;
    for (a, b) in grads.dv.data().iter().zip(ift.data()) {
        worst = worst.max((a - b).abs() / (b.abs() + 1e-8));
    }
    Ok(worst)
}

/// Per-head score matrix of a mesa head, `[t, t'] = M[t',t] k_{t'}ᵀ R_t q_t`.
pub fn mesa_scores(e: &Matrix, h: &HeadParams, gammas: Option<&[f64]>) -> Result<Matrix> {
    let (q, k, v) = h.project(e);
    let f = mesa_forward(&k, &q, &v, h.lambda, gammas, false)?;
    Ok(f.q_tilde.matmul_t(&k).hadamard(&score_mask(e.rows(), gammas)))
}
