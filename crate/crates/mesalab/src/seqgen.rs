//! Synthetic teachers, few-shot regression tasks, and the closed-form
//! predictors trained models are compared against.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::attention::softmax_rows_masked;
use crate::error::{Error, Result};
use crate::numerics::{dot, pinv, random_orthogonal, solve_lu, solve_spd, Matrix, Rng};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    FullyObservedLinear,
    PartiallyObservedLinear,
    Nonlinear,
    Contracting,
    FixedTeacher,
}

fn default_sigma_h() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub n_h: usize,
    pub n_s: usize,
    #[serde(default)]
    pub n_m: usize,
    #[serde(default = "default_sigma_h")]
    pub sigma_h: f64,
    #[serde(default)]
    pub sigma_s: f64,
    pub seq_len: usize,
    #[serde(default)]
    pub clip_band: Option<f64>,
}

/// Eigenvalue magnitude band of contracting teachers.
pub const CONTRACTING_BAND: (f64, f64) = (0.3, 0.9);
/// Observation clip applied to contracting sequences.
pub const CONTRACTING_CLIP: f64 = 2.0;

impl GeneratorSpec {
    pub fn fully_observed(n_s: usize, seq_len: usize) -> Self {
        GeneratorSpec {
            kind: GeneratorKind::FullyObservedLinear,
            n_h: n_s,
            n_s,
            n_m: 0,
            sigma_h: default_sigma_h(),
            sigma_s: 0.0,
            seq_len,
            clip_band: None,
        }
    }

    pub fn partially_observed(n_s: usize, n_h: usize, seq_len: usize) -> Self {
        GeneratorSpec { kind: GeneratorKind::PartiallyObservedLinear, n_h, ..Self::fully_observed(n_s, seq_len) }
    }

    pub fn with_noise(mut self, sigma_h: f64, sigma_s: f64) -> Self {
        self.sigma_h = sigma_h;
        self.sigma_s = sigma_s;
        self
    }

    pub fn with_kind(mut self, kind: GeneratorKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.n_s == 0 || self.n_h == 0 {
            return bad("dimensions must be positive");
        }
        if self.n_s > self.n_h {
            return bad(&format!("n_s = {} exceeds n_h = {}", self.n_s, self.n_h));
        }
        if self.seq_len < 2 {
            return bad("sequence length must be at least 2");
        }
        if !(self.sigma_h >= 0.0 && self.sigma_s >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if matches!(self.clip_band, Some(c) if !(c > 0.0)) {
            return bad("clip band must be positive");
        }
        match self.kind {
            GeneratorKind::PartiallyObservedLinear if self.n_s >= self.n_h => {
                bad("partially observed tasks need n_s < n_h")
            }
            GeneratorKind::PartiallyObservedLinear => Ok(()),
            GeneratorKind::Nonlinear if self.n_m == 0 => bad("nonlinear tasks need n_m > 0"),
            _ if self.n_s != self.n_h => bad("fully observed kinds need n_s = n_h"),
            _ => Ok(()),
        }
    }

    fn effective_clip(&self) -> Option<f64> {
        match (self.kind, self.clip_band) {
            (_, Some(c)) => Some(c),
            (GeneratorKind::Contracting, None) => Some(CONTRACTING_CLIP),
            _ => None,
        }
    }
}

/// Groundtruth parameters of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub w: Matrix,
    pub c: Matrix,
    /// MLP weights `(A, B)` of nonlinear teachers.
    pub mlp: Option<(Matrix, Matrix)>,
}

impl Teacher {
    pub fn transition(&self, h: &[f64]) -> Vec<f64> {
        match &self.mlp {
            None => self.w.matvec(h),
            Some((a, b)) => {
                let z: Vec<f64> = a.matvec(h).into_iter().map(crate::autodiff::gelu).collect();
                self.w.matvec(&b.matvec(&z))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    /// One `T × n_s` matrix per sequence.
    pub observations: Vec<Matrix>,
    /// Latent states, `T × n_h`, before observation noise and clipping.
    pub states: Vec<Matrix>,
    pub teachers: Vec<Teacher>,
    pub clipped: Vec<bool>,
    pub spec: GeneratorSpec,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Real matrix with the eigenvectors of `w` and eigenvalue magnitudes
/// mapped affinely onto `[lo, hi]` (phases kept).
pub fn rescale_eigenvalues(w: &Matrix, lo: f64, hi: f64, rng: &mut Rng) -> Option<Matrix> {
    let n = w.rows();
    let wn = w.to_nalgebra();
    let eig = wn.complex_eigenvalues();
    let tol = 1e-9 * eig.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1.0);
    // Keep one representative per conjugate pair.
    let mut reps: Vec<Complex<f64>> = Vec::new();
    for z in eig.iter() {
        if z.im.abs() <= tol {
            reps.push(Complex::new(z.re, 0.0));
        } else if z.im > 0.0 {
            reps.push(*z);
        }
    }
    let count: usize = reps.iter().map(|z| if z.im == 0.0 { 1 } else { 2 }).sum();
    if count != n {
        return None;
    }
    let wc: DMatrix<Complex<f64>> = wn.map(|x| Complex::new(x, 0.0));
    let mut vecs: Vec<nalgebra::DVector<Complex<f64>>> = Vec::new();
    let mut vals: Vec<Complex<f64>> = Vec::new();
    let mags: Vec<f64> = reps.iter().map(|z| z.norm()).collect();
    let (mn, mx) = mags.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &m| (a.min(m), b.max(m)));
    for (z, m) in reps.iter().zip(&mags) {
        // Inverse iteration with a slightly shifted eigenvalue.
        let shift = *z + Complex::new(1e-10 * (1.0 + z.norm()), 0.0);
        let mut sys = wc.clone();
        for i in 0..n {
            sys[(i, i)] -= shift;
        }
        let lu = sys.lu();
        let mut v = nalgebra::DVector::from_fn(n, |_, _| Complex::new(rng.normal(), rng.normal()));
        for _ in 0..3 {
            v = lu.solve(&v)?;
            let nv = v.norm();
            if !nv.is_finite() || nv == 0.0 {
                return None;
            }
            v /= Complex::new(nv, 0.0);
        }
        let target = if mx > mn { lo + (hi - lo) * (m - mn) / (mx - mn) } else { 0.5 * (lo + hi) };
        let phase = if *m > 0.0 { *z / *m } else { Complex::new(1.0, 0.0) };
        let new = phase * target;
        if z.im == 0.0 {
            vecs.push(v.map(|c| Complex::new(c.re, 0.0)).normalize());
            vals.push(Complex::new(new.re, 0.0));
        } else {
            vecs.push(v.clone());
            vals.push(new);
            vecs.push(v.map(|c| c.conj()));
            vals.push(new.conj());
        }
    }
    let vm = DMatrix::from_columns(&vecs);
    let vinv = vm.clone().try_inverse()?;
    let lam = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vals));
    let out = vm * lam * vinv;
    let imag = out.iter().fold(0.0f64, |a, z| a.max(z.im.abs()));
    if imag > 1e-6 {
        return None;
    }
    let real = Matrix::from_fn(n, n, |r, c| out[(r, c)].re);
    real.is_finite().then_some(real)
}

fn draw_teacher(spec: &GeneratorSpec, rng: &mut Rng) -> Teacher {
    let (n_h, n_s) = (spec.n_h, spec.n_s);
    let identity_c = Matrix::identity(n_h);
    match spec.kind {
        GeneratorKind::FullyObservedLinear | GeneratorKind::FixedTeacher => {
            Teacher { w: random_orthogonal(n_h, rng), c: identity_c, mlp: None }
        }
        GeneratorKind::PartiallyObservedLinear => Teacher {
            w: random_orthogonal(n_h, rng),
            c: rng.normal_matrix(n_s, n_h, 0.5f64.sqrt()),
            mlp: None,
        },
        GeneratorKind::Nonlinear => {
            let a = rng.normal_matrix(spec.n_m, n_h, (1.1 / n_h as f64).sqrt());
            let b = rng.normal_matrix(n_h, spec.n_m, (1.1 / spec.n_m as f64).sqrt());
            Teacher { w: random_orthogonal(n_h, rng), c: identity_c, mlp: Some((a, b)) }
        }
        GeneratorKind::Contracting => loop {
            let w = rng.normal_matrix(n_h, n_h, 1.0);
            if let Some(w) = rescale_eigenvalues(&w, CONTRACTING_BAND.0, CONTRACTING_BAND.1, rng) {
                break Teacher { w, c: identity_c, mlp: None };
            }
        },
    }
}

/// Rolls one sequence out of a teacher.
pub fn rollout(spec: &GeneratorSpec, teacher: &Teacher, rng: &mut Rng) -> (Matrix, Matrix, bool) {
    let (n_h, n_s, t_len) = (spec.n_h, spec.n_s, spec.seq_len);
    let mut states = Matrix::zeros(t_len, n_h);
    let mut obs = Matrix::zeros(t_len, n_s);
    let mut h = rng.normal_vec(n_h, 1.0);
    let clip = spec.effective_clip();
    let mut clipped = false;
    for t in 0..t_len {
        states.row_mut(t).copy_from_slice(&h);
        let mut s = teacher.c.matvec(&h);
        for x in s.iter_mut() {
            *x += spec.sigma_s * rng.normal();
            if let Some(c) = clip {
                if x.abs() > c {
                    clipped = true;
                    *x = x.clamp(-c, c);
                }
            }
        }
        obs.row_mut(t).copy_from_slice(&s);
        let mut next = teacher.transition(&h);
        for x in next.iter_mut() {
            *x += spec.sigma_h * rng.normal();
        }
        h = next;
    }
    (obs, states, clipped)
}

/// Draws `batch` sequences; each sequence gets its own forked stream.
pub fn gen_sequences(spec: &GeneratorSpec, batch: usize, rng: &Rng) -> Result<SequenceBatch> {
    spec.validate()?;
    let shared = (spec.kind == GeneratorKind::FixedTeacher).then(|| draw_teacher(spec, &mut rng.fork(u64::MAX)));
    let items: Vec<(Matrix, Matrix, Teacher, bool)> = par::map_indexed(batch, |b| {
        let mut r = rng.fork(b as u64);
        let teacher = shared.clone().unwrap_or_else(|| draw_teacher(spec, &mut r));
        let (o, s, c) = rollout(spec, &teacher, &mut r);
        (o, s, teacher, c)
    });
    let mut out = SequenceBatch {
        observations: Vec::with_capacity(batch),
        states: Vec::with_capacity(batch),
        teachers: Vec::with_capacity(batch),
        clipped: Vec::with_capacity(batch),
        spec: spec.clone(),
    };
    for (o, s, t, c) in items {
        out.observations.push(o);
        out.states.push(s);
        out.teachers.push(t);
        out.clipped.push(c);
    }
    Ok(out)
}

/// Few-shot regression task `y_i = W* x_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct IclTask {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
    pub teacher: Matrix,
}

/// Token layout of a few-shot prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IclLayout {
    /// `[x₁, y₁, …, x_N, y_N]`
    Plain,
    /// `[x₁, y₁, EOS, x₂, …, y_N]`
    Eos,
    /// Twenty prefix tokens, then the EOS layout.
    EosPrefix,
}

pub const PREFIX_LEN: usize = 20;

impl IclTask {
    pub fn n(&self) -> usize {
        self.xs.len()
    }

    /// Row index of `x_i` (0-based i) in a prompt of this layout.
    pub fn x_position(layout: IclLayout, i: usize) -> usize {
        match layout {
            IclLayout::Plain => 2 * i,
            IclLayout::Eos => 3 * i,
            IclLayout::EosPrefix => PREFIX_LEN + 3 * i,
        }
    }

    pub fn seq_len(layout: IclLayout, n: usize) -> usize {
        match layout {
            IclLayout::Plain => 2 * n,
            IclLayout::Eos => 3 * n - 1,
            IclLayout::EosPrefix => PREFIX_LEN + 3 * n - 1,
        }
    }

    /// Prompt matrix; `eos` and `prefix` are required by the layouts that use them.
    pub fn tokens(&self, layout: IclLayout, eos: Option<&[f64]>, prefix: Option<&Matrix>) -> Result<Matrix> {
        let n = self.n();
        let d = self.xs[0].len();
        let mut m = Matrix::zeros(Self::seq_len(layout, n), d);
        let mut row = 0;
        if layout == IclLayout::EosPrefix {
            let p = prefix.ok_or_else(|| Error::MissingPromptTokens("eos_prefix".into()))?;
            if p.shape() != (PREFIX_LEN, d) {
                return Err(Error::ShapeMismatch("prefix tokens".into()));
            }
            m.set_block(0, 0, p);
            row = PREFIX_LEN;
        }
        for i in 0..n {
            m.row_mut(row).copy_from_slice(&self.xs[i]);
            m.row_mut(row + 1).copy_from_slice(&self.ys[i]);
            row += 2;
            if layout != IclLayout::Plain && i + 1 < n {
                let e = eos.ok_or_else(|| Error::MissingPromptTokens("eos".into()))?;
                if e.len() != d {
                    return Err(Error::ShapeMismatch("eos token".into()));
                }
                m.row_mut(row).copy_from_slice(e);
                row += 1;
            }
        }
        Ok(m)
    }
}

pub fn gen_icl_tasks(n_s: usize, n_pairs: usize, batch: usize, rng: &Rng) -> Result<Vec<IclTask>> {
    if n_pairs < 2 {
        return Err(Error::InvalidSpec("few-shot tasks need at least two pairs".into()));
    }
    Ok(par::map_indexed(batch, |b| {
        let mut r = rng.fork(b as u64);
        let w = random_orthogonal(n_s, &mut r);
        let xs: Vec<Vec<f64>> = (0..n_pairs).map(|_| r.normal_vec(n_s, 1.0)).collect();
        let ys = xs.iter().map(|x| w.matvec(x)).collect();
        IclTask { xs, ys, teacher: w }
    }))
}

/// `{(x_i, y_i)} ∪ {(y_i, x_{i+1})}`: correct pairs first, then the spurious ones.
pub fn spurious_pairs(task: &IclTask) -> Vec<(Vec<f64>, Vec<f64>)> {
    let n = task.n();
    let mut out: Vec<(Vec<f64>, Vec<f64>)> = (0..n).map(|i| (task.xs[i].clone(), task.ys[i].clone())).collect();
    for i in 0..n.saturating_sub(1) {
        out.push((task.ys[i].clone(), task.xs[i + 1].clone()));
    }
    out
}

/// Ridge map fitted on (input, target) pairs, `(Σ y xᵀ)(Σ x xᵀ + I/λ)⁻¹`.
pub fn ridge_fit(pairs: &[(&[f64], &[f64])], dim_in: usize, dim_out: usize, lambda: f64) -> Result<Matrix> {
    let mut a = Matrix::identity(dim_in).scale(1.0 / lambda);
    let mut b = Matrix::zeros(dim_in, dim_out);
    for (x, y) in pairs {
        accumulate_outer(&mut a, x, x);
        accumulate_outer(&mut b, x, y);
    }
    Ok(solve_spd(&a, &b)?.transpose())
}

fn accumulate_outer(m: &mut Matrix, a: &[f64], b: &[f64]) {
    let cols = m.cols();
    let d = m.data_mut();
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            d[i * cols + j] += ai * bj;
        }
    }
}

fn half_sq(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

/// Per-time-step predictions of an autoregressive predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `preds[t]` predicts `s_{t+1}` (0-based rows); `None` without data.
    pub preds: Vec<Option<Vec<f64>>>,
    /// `½||s_{t+1} − pred_t||²` where both exist.
    pub losses: Vec<Option<f64>>,
}

impl Predictions {
    fn from_preds(seq: &Matrix, preds: Vec<Option<Vec<f64>>>) -> Self {
        let t_len = seq.rows();
        let losses = preds
            .iter()
            .enumerate()
            .map(|(t, p)| match p {
                Some(p) if t + 1 < t_len => Some(half_sq(seq.row(t + 1), p)),
                _ => None,
            })
            .collect();
        Predictions { preds, losses }
    }

    /// Sum of available losses at 0-based steps `t ≥ from`.
    pub fn cumulative(&self, from: usize) -> f64 {
        self.losses.iter().skip(from).flatten().sum()
    }
}

/// Least-squares autoregression: at each step, ridge on all pairs seen so far.
pub fn lsq_autoregressive(seq: &Matrix, lambda: f64) -> Result<Predictions> {
    if !(lambda > 0.0) {
        return Err(Error::NonPositiveLambda(lambda));
    }
    let (t_len, n) = seq.shape();
    let mut preds = vec![None; t_len];
    let mut gram = Matrix::identity(n).scale(1.0 / lambda);
    let mut b = Matrix::zeros(n, n);
    for t in 1..t_len {
        let (x, y) = (seq.row(t - 1), seq.row(t));
        accumulate_outer(&mut gram, x, x);
        accumulate_outer(&mut b, x, y);
        // Φ̂ᵀ = gram⁻¹ b; prediction Φ̂ s_t = bᵀ gram⁻¹ s_t.
        let z = solve_spd(&gram, &Matrix::column(seq.row(t)))?;
        preds[t] = Some(b.t_matmul(&z).into_data());
    }
    Ok(Predictions::from_preds(seq, preds))
}

/// Softmax-kernel regression over past transitions.
pub fn softmax_kernel_predictor(seq: &Matrix, beta: f64) -> Predictions {
    let t_len = seq.rows();
    let mut preds = vec![None; t_len];
    for t in 1..t_len {
        let s_t = seq.row(t);
        let logits = Matrix::row_vector(&(0..t).map(|tp| beta * dot(seq.row(tp), s_t)).collect::<Vec<_>>());
        let w = softmax_rows_masked(&logits, false);
        let mut p = vec![0.0; seq.cols()];
        for tp in 0..t {
            let wt = w.get(0, tp);
            for (o, v) in p.iter_mut().zip(seq.row(tp + 1)) {
                *o += wt * v;
            }
        }
        preds[t] = Some(p);
    }
    Predictions::from_preds(seq, preds)
}

/// Logarithmic grid used to tune λ and β: 25 points over [1e-3, 1e3].
pub fn log_grid() -> Vec<f64> {
    (0..25).map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / 24.0)).collect()
}

/// Grid value minimizing the mean cumulative loss (steps ≥ `from`) of `eval` over `seqs`.
pub fn tune_on<F>(seqs: &[Matrix], grid: &[f64], from: usize, eval: F) -> Result<(f64, f64)>
where
    F: Fn(&Matrix, f64) -> Result<Predictions> + Sync,
{
    let mut best = (f64::NAN, f64::INFINITY);
    for &g in grid {
        let losses = par::map_indexed(seqs.len(), |i| eval(&seqs[i], g).map(|p| p.cumulative(from)));
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        let mean = total / seqs.len().max(1) as f64;
        if mean < best.1 {
            best = (g, mean);
        }
    }
    Ok(best)
}

/// Stacked `[s_{t−k+1}; …; s_t]` with zero padding before the first step.
pub fn concat_window(seq: &Matrix, k: usize, t: usize) -> Vec<f64> {
    let n = seq.cols();
    let mut z = vec![0.0; k * n];
    for j in 0..k {
        // block j holds s_{t−k+1+j}
        let idx = t as isize - (k as isize - 1) + j as isize;
        if idx >= 0 {
            z[j * n..(j + 1) * n].copy_from_slice(seq.row(idx as usize));
        }
    }
    z
}

/// Observability stack `[C; CW; …; CW^{k−1}]`.
pub fn observability(w: &Matrix, c: &Matrix, k: usize) -> Matrix {
    let mut blocks = Vec::with_capacity(k);
    let mut cur = c.clone();
    for _ in 0..k {
        blocks.push(cur.clone());
        cur = cur.matmul(w);
    }
    let refs: Vec<&Matrix> = blocks.iter().collect();
    Matrix::vcat(&refs)
}

/// `Φ_k = O_k W O_k†`; the flag is raised when `k·n_s < n_h`.
pub fn phi_k_optimal(w: &Matrix, c: &Matrix, k: usize) -> (Matrix, bool) {
    let o = observability(w, c, k);
    let under = k * c.rows() < w.rows();
    (o.matmul(w).matmul(&pinv(&o)), under)
}

/// Filter blocks: coefficient of `h_t` and of each `ε_{t−l}` in `z_t^k`.
fn filter_matrices(w: &Matrix, c: &Matrix, k: usize) -> Result<(Matrix, Vec<Matrix>)> {
    let n_h = w.rows();
    let n_s = c.rows();
    let winv = solve_lu(w, &Matrix::identity(n_h))?;
    // powers[j] = W^{-j}
    let mut powers = vec![Matrix::identity(n_h)];
    for j in 1..k {
        powers.push(powers[j - 1].matmul(&winv));
    }
    // Block row r (top = oldest) observes s_{t−j} with j = k−1−r.
    let mut f = Matrix::zeros(k * n_s, n_h);
    for r in 0..k {
        let j = k - 1 - r;
        f.set_block(r * n_s, 0, &c.matmul(&powers[j]));
    }
    let mut fl = Vec::new();
    for l in 1..k {
        let mut m = Matrix::zeros(k * n_s, n_h);
        for r in 0..k {
            let j = k - 1 - r;
            if j >= l {
                m.set_block(r * n_s, 0, &c.matmul(&powers[j - l + 1]));
            }
        }
        fl.push(m);
    }
    Ok((f, fl))
}

/// Maximum-likelihood latent state from a window `z_t^k` under equal
/// state/observation noise σ, via the stationarity system of the
/// constrained objective. Variables: `h, ε_1 … ε_{k−1}, v, μ`.
pub fn mle_latent_state(z: &[f64], w: &Matrix, c: &Matrix, k: usize, sigma: f64) -> Result<Vec<f64>> {
    let u = mle_decoder(w, c, k, sigma)?;
    Ok(u.matvec(z))
}

/// The linear decoder `U` with `ĥ_t = U z_t^k`.
pub fn mle_decoder(w: &Matrix, c: &Matrix, k: usize, sigma: f64) -> Result<Matrix> {
    let n_h = w.rows();
    let n_s = c.rows();
    let m = k * n_s;
    let (f, fl) = filter_matrices(w, c, k)?;
    let s2 = sigma * sigma;
    let inv_s2 = if s2 > 0.0 { 1.0 / s2 } else { 1.0 };
    let dim = k * n_h + 2 * m;
    let mut s = Matrix::zeros(dim, dim);
    let off_eps = n_h;
    let off_v = k * n_h;
    let off_mu = k * n_h + m;
    // ∇_h: Fᵀ μ = 0
    s.set_block(0, off_mu, &f.transpose());
    // ∇_ε_l: ε_l/σ² − F_lᵀ μ = 0
    for (l, fm) in fl.iter().enumerate() {
        let r0 = off_eps + l * n_h;
        s.set_block(r0, r0, &Matrix::identity(n_h).scale(inv_s2));
        s.set_block(r0, off_mu, &fm.transpose().scale(-1.0));
    }
    // ∇_v: v/σ² + μ = 0
    s.set_block(off_v, off_v, &Matrix::identity(m).scale(inv_s2));
    s.set_block(off_v, off_mu, &Matrix::identity(m));
    // constraint: v + F h − Σ F_l ε_l = z
    s.set_block(off_mu, 0, &f);
    for (l, fm) in fl.iter().enumerate() {
        s.set_block(off_mu, off_eps + l * n_h, &fm.scale(-1.0));
    }
    s.set_block(off_mu, off_v, &Matrix::identity(m));
    let mut rhs = Matrix::zeros(dim, m);
    rhs.set_block(off_mu, 0, &Matrix::identity(m));
    let sol = solve_lu(&s, &rhs)?;
    Ok(sol.block(0, 0, n_h, m))
}
