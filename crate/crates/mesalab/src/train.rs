//! Base optimization: online autoregressive training with AdamW.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::GradMap;
use crate::constructions::{build_constructed_tokens, Channels, ConstructedTokenSpec};
use crate::error::{Error, Result};
use crate::model::{batch_loss_and_grads, model_forward, sequence_loss, ModelParams, TransformerConfig};
use crate::numerics::{Matrix, Rng};
use crate::par;
use crate::seqgen::{gen_sequences, GeneratorSpec, SequenceBatch};

/// How observation sequences become model inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TokenMode {
    Raw,
    Constructed { channels: Channels },
}

impl TokenMode {
    /// Model inputs and prediction targets for one observation sequence.
    pub fn encode(&self, seq: &Matrix) -> (Matrix, Matrix) {
        match self {
            TokenMode::Raw => (seq.clone(), seq.clone()),
            TokenMode::Constructed { channels } => {
                let spec = ConstructedTokenSpec { channels: *channels, n_s: seq.cols() };
                (build_constructed_tokens(seq, &spec), seq.clone())
            }
        }
    }

    pub fn encode_batch(&self, batch: &SequenceBatch) -> (Vec<Matrix>, Vec<Matrix>) {
        batch.observations.iter().map(|s| self.encode(s)).unzip()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup from zero, cosine decay, then constant.
    WarmupCosine,
    /// `peak_lr` throughout.
    Constant,
}

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_clip() -> f64 {
    1.0
}
fn d_eval_batch() -> usize {
    2048
}
fn d_schedule() -> Schedule {
    Schedule::WarmupCosine
}
fn d_tokens() -> TokenMode {
    TokenMode::Raw
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub cosine_steps: usize,
    pub final_lr: f64,
    pub weight_decay: f64,
    #[serde(default = "d_clip")]
    pub grad_clip_norm: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    pub eval_every: usize,
    #[serde(default = "d_eval_batch")]
    pub eval_batch: usize,
    #[serde(default = "d_schedule")]
    pub schedule: Schedule,
    #[serde(default = "d_tokens")]
    pub tokens: TokenMode,
    /// Reuse one fixed set of this many sequences instead of fresh batches.
    #[serde(default)]
    pub frozen_corpus: Option<usize>,
    /// Write zero wallclock times so logs are reproducible byte for byte.
    #[serde(default)]
    pub deterministic: bool,
    pub task: GeneratorSpec,
    pub arch: TransformerConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        self.task.validate()?;
        self.arch.validate()?;
        if self.warmup_steps == 0 && self.schedule == Schedule::WarmupCosine {
            return bad("warmup_steps must be at least 1");
        }
        let rates = [self.peak_lr, self.final_lr, self.eps, self.grad_clip_norm];
        if rates.iter().any(|r| !(*r > 0.0)) || self.weight_decay < 0.0 {
            return bad("rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_batch == 0 {
            return bad("batch sizes and eval interval must be positive");
        }
        let width = match self.tokens {
            TokenMode::Raw => self.task.n_s,
            TokenMode::Constructed { channels } => ConstructedTokenSpec { channels, n_s: self.task.n_s }.token_dim(),
        };
        if width != self.arch.token_dim || self.arch.out_dim != self.task.n_s {
            return Err(Error::ConfigMismatch(format!(
                "task produces {width}-dim tokens and {}-dim targets; model expects {} and {}",
                self.task.n_s, self.arch.token_dim, self.arch.out_dim
            )));
        }
        Ok(())
    }
}

/// `0 → peak` linearly over the warmup, cosine to `final_lr`, then constant.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> f64 {
    if config.schedule == Schedule::Constant {
        return config.peak_lr;
    }
    let (w, c) = (config.warmup_steps, config.cosine_steps);
    if step < w {
        config.peak_lr * step as f64 / w as f64
    } else if step < w + c {
        let frac = (step - w) as f64 / c as f64;
        config.final_lr + 0.5 * (config.peak_lr - config.final_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
    } else {
        config.final_lr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: BTreeMap<String, Matrix> =
            params.tensors.iter().map(|(k, m)| (k.clone(), Matrix::zeros(m.rows(), m.cols()))).collect();
        OptimizerState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

pub fn global_norm(grads: &GradMap) -> f64 {
    grads.values().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales so the global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// AdamW with bias-corrected moments and decoupled weight decay.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &GradMap,
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.tensors.iter_mut() {
        let g = grads.get(name).ok_or_else(|| Error::CheckpointMismatch(format!("no gradient for {name}")))?;
        let m = state.m.get_mut(name).expect("moments mirror params");
        let v = state.v.get_mut(name).expect("moments mirror params");
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            pd[i] -= lr * (mhat / (vhat.sqrt() + config.eps) + config.weight_decay * pd[i]);
        }
    }
    Ok(())
}

/// `½ Σ_t ||target_{t+1} − f_t||²` averaged over the batch.
pub fn autoregressive_loss(preds: &[Matrix], targets: &[Matrix]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch("batch sizes differ".into()));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        total += sequence_loss(p, t)?;
    }
    Ok(total / preds.len() as f64)
}

pub fn eval_loss(params: &ModelParams, arch: &TransformerConfig, tokens: &[Matrix], targets: &[Matrix]) -> Result<f64> {
    let preds: Vec<Matrix> = par::map_indexed(tokens.len(), |i| model_forward(params, arch, &tokens[i]).map(|f| f.preds))
        .into_iter()
        .collect::<Result<_>>()?;
    autoregressive_loss(&preds, targets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub grad_norm: f64,
    pub wallclock_s: f64,
}

pub const METRIC_COLUMNS: [&str; 6] = ["step", "lr", "train_loss", "eval_loss", "grad_norm", "wallclock_s"];

impl MetricRow {
    pub fn values(&self) -> [f64; 6] {
        [self.step as f64, self.lr, self.train_loss, self.eval_loss, self.grad_norm, self.wallclock_s]
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub state: OptimizerState,
    pub metrics: Vec<MetricRow>,
}

/// Where a run starts: fresh initialization or a saved state.
pub struct Start {
    pub params: ModelParams,
    pub state: OptimizerState,
}

pub fn init_params(config: &TrainConfig) -> Result<ModelParams> {
    ModelParams::init(&config.arch, &mut Rng::derive(config.seed, "init", 0))
}

/// The frozen evaluation batch of a run.
pub fn eval_batch(config: &TrainConfig) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let b = gen_sequences(&config.task, config.eval_batch, &Rng::derive(config.seed, "eval", 0))?;
    Ok(config.tokens.encode_batch(&b))
}

/// Training batch of `step`: a pure function of the seed and the step index.
pub fn train_batch(config: &TrainConfig, step: usize, corpus: Option<&SequenceBatch>) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    match corpus {
        None => {
            let b = gen_sequences(&config.task, config.batch_size, &Rng::derive(config.seed, "train", step as u64))?;
            Ok(config.tokens.encode_batch(&b))
        }
        Some(c) => {
            let mut r = Rng::derive(config.seed, "corpus-draw", step as u64);
            let (toks, tgts) = (0..config.batch_size)
                .map(|_| config.tokens.encode(&c.observations[r.below(c.len())]))
                .unzip();
            Ok((toks, tgts))
        }
    }
}

/// Runs `config.steps` optimizer steps. `on_eval` sees every evaluation
/// point (and receives the last good parameters before a divergence error).
pub fn train_loop<F>(config: &TrainConfig, start: Option<Start>, mut on_eval: F) -> Result<TrainOutcome>
where
    F: FnMut(&MetricRow, &ModelParams, &OptimizerState) -> Result<()>,
{
    config.validate()?;
    let Start { mut params, mut state } = match start {
        Some(s) => {
            s.params.check(&config.arch)?;
            s
        }
        None => {
            let p = init_params(config)?;
            let st = OptimizerState::new(&p);
            Start { params: p, state: st }
        }
    };
    let (eval_toks, eval_tgts) = eval_batch(config)?;
    let corpus = match config.frozen_corpus {
        Some(n) => Some(gen_sequences(&config.task, n, &Rng::derive(config.seed, "corpus", 0))?),
        None => None,
    };
    let clock = Instant::now();
    let mut metrics = Vec::new();
    let first = state.step as usize;
    for step in first..config.steps {
        let lr = lr_schedule(step, config);
        let (toks, tgts) = train_batch(config, step, corpus.as_ref())?;
        let (loss, mut grads) = batch_loss_and_grads(&params, &config.arch, &toks, &tgts, true)?;
        if !loss.is_finite() {
            let row = MetricRow { step, lr, train_loss: loss, eval_loss: f64::NAN, grad_norm: f64::NAN, wallclock_s: 0.0 };
            on_eval(&row, &params, &state)?;
            return Err(Error::DivergedTraining { step, loss });
        }
        let grad_norm = clip_global_norm(&mut grads, config.grad_clip_norm);
        let before = params.clone();
        if let Err(e) = adamw_step(&mut params, &grads, &mut state, lr, config) {
            let row = MetricRow { step, lr, train_loss: loss, eval_loss: f64::NAN, grad_norm, wallclock_s: 0.0 };
            on_eval(&row, &before, &state)?;
            return Err(e);
        }
        let done = step + 1;
        if done % config.eval_every == 0 || done == config.steps {
            let ev = eval_loss(&params, &config.arch, &eval_toks, &eval_tgts)?;
            let wallclock_s = if config.deterministic { 0.0 } else { clock.elapsed().as_secs_f64() };
            let row = MetricRow { step: done, lr, train_loss: loss, eval_loss: ev, grad_norm, wallclock_s };
            if !ev.is_finite() {
                on_eval(&row, &before, &state)?;
                return Err(Error::DivergedTraining { step: done, loss: ev });
            }
            on_eval(&row, &params, &state)?;
            metrics.push(row);
        }
    }
    Ok(TrainOutcome { params, state, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerKind;
    use proptest::prelude::*;

    pub(crate) fn small_config() -> TrainConfig {
        let mut arch = TransformerConfig::raw_tokens(vec![LayerKind::Softmax, LayerKind::Linear], 3, 8, 2, 4);
        arch.positional = crate::model::Positional::FirstLayerConcat { dim: 4 };
        TrainConfig {
            steps: 20,
            batch_size: 4,
            peak_lr: 7e-4,
            warmup_steps: 5,
            cosine_steps: 10,
            final_lr: 1e-5,
            weight_decay: 0.05,
            grad_clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 3,
            eval_every: 5,
            eval_batch: 8,
            schedule: Schedule::WarmupCosine,
            tokens: TokenMode::Raw,
            frozen_corpus: None,
            deterministic: true,
            task: GeneratorSpec::fully_observed(3, 10),
            arch,
        }
    }

    #[test]
    fn schedule_examples() {
        let mut c = small_config();
        c.peak_lr = 7e-4;
        c.warmup_steps = 1000;
        c.cosine_steps = 10000;
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert_eq!(lr_schedule(1000, &c), 7e-4);
        assert!((lr_schedule(11000, &c) - 1e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(50000, &c), 1e-5);
        assert!((lr_schedule(500, &c) - 3.5e-4).abs() < 1e-18);
    }

    #[test]
    fn loss_examples() {
        let t = Matrix::from_fn(50, 2, |_, c| if c == 0 { 1.0 } else { 0.0 });
        assert_eq!(autoregressive_loss(&[t.clone()], &[t.clone()]).unwrap(), 0.0);
        assert_eq!(autoregressive_loss(&[Matrix::zeros(50, 2)], &[t.clone()]).unwrap(), 24.5);
        assert!(autoregressive_loss(&[Matrix::zeros(3, 2)], &[t]).is_err());
    }

    #[test]
    fn loss_gradient_is_residual() {
        let mut tape = crate::autodiff::Tape::new();
        let f = tape.param("f", Matrix::row_vector(&[0.5, -1.0]));
        let e = tape.constant(Matrix::row_vector(&[1.0, 1.0]));
        let l = tape.squared_error(f, e);
        let g = tape.backward(l, &Matrix::scalar(1.0)).unwrap();
        assert_eq!(g.of(&tape, f).data(), &[-0.5, -2.0]);
    }

    #[test]
    fn adamw_examples() {
        let c = small_config();
        let mut p = ModelParams::default();
        p.set("w", Matrix::row_vector(&[2.0, -4.0]));
        let mut st = OptimizerState::new(&p);
        let mut g = GradMap::new();
        g.insert("w".into(), Matrix::zeros(1, 2));
        let cfg = TrainConfig { weight_decay: 0.1, ..c.clone() };
        adamw_step(&mut p, &g, &mut st, 0.01, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[2.0 * (1.0 - 0.001), -4.0 * (1.0 - 0.001)]);

        let mut p = ModelParams::default();
        p.set("w", Matrix::row_vector(&[0.0, 0.0]));
        let mut st = OptimizerState::new(&p);
        g.insert("w".into(), Matrix::row_vector(&[3.0, -0.2]));
        let cfg = TrainConfig { weight_decay: 0.0, ..c };
        adamw_step(&mut p, &g, &mut st, 0.01, &cfg).unwrap();
        let w = p.get("w").unwrap();
        assert!((w.get(0, 0) + 0.01).abs() < 1e-9 && (w.get(0, 1) - 0.01).abs() < 1e-9);
        g.insert("w".into(), Matrix::raw(1, 2, vec![f64::NAN, 0.0]));
        assert!(matches!(adamw_step(&mut p, &g, &mut st, 0.01, &cfg), Err(Error::NonFiniteGradient(_))));
    }

    #[test]
    fn clipping_examples() {
        let mut g = GradMap::new();
        g.insert("a".into(), Matrix::row_vector(&[0.3, 0.4]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 0.5);
        assert_eq!(g["a"].data(), &[0.3, 0.4]);
        g.insert("a".into(), Matrix::row_vector(&[1.2, 1.6]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 2.0);
        assert!((g["a"].get(0, 0) - 0.6).abs() < 1e-15 && (g["a"].get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_returns_init() {
        let c = TrainConfig { steps: 0, ..small_config() };
        let out = train_loop(&c, None, |_, _, _| Ok(())).unwrap();
        assert_eq!(out.params, init_params(&c).unwrap());
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn runs_are_bit_identical_and_resumable() {
        let c = small_config();
        let a = train_loop(&c, None, |_, _, _| Ok(())).unwrap();
        let b = train_loop(&c, None, |_, _, _| Ok(())).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics, b.metrics);
        // stop at step 10, resume to 20
        let half = TrainConfig { steps: 10, ..c.clone() };
        let h = train_loop(&half, None, |_, _, _| Ok(())).unwrap();
        let r = train_loop(&c, Some(Start { params: h.params, state: h.state }), |_, _, _| Ok(())).unwrap();
        assert_eq!(r.params, a.params);
        assert_eq!(r.metrics[..], a.metrics[2..]);
    }

    #[test]
    fn divergence_is_reported() {
        let mut c = small_config();
        c.task = c.task.with_noise(1e200, 0.0);
        let mut seen = 0;
        let r = train_loop(&c, None, |_, _, _| {
            seen += 1;
            Ok(())
        });
        assert!(matches!(r, Err(Error::DivergedTraining { .. }) | Err(Error::NonFiniteGradient(_))), "{:?}", r.err());
        assert_eq!(seen, 1);
    }

    #[test]
    fn config_checks() {
        let mut c = small_config();
        c.warmup_steps = 0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.tokens = TokenMode::Constructed { channels: Channels::Three };
        assert!(matches!(c.validate(), Err(Error::ConfigMismatch(_))));
        let text = serde_json::to_string(&small_config()).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, small_config());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn clip_bound_holds(xs in proptest::collection::vec(-100.0f64..100.0, 1..20), max in 0.01f64..10.0) {
            let mut g = GradMap::new();
            g.insert("x".into(), Matrix::row_vector(&xs));
            clip_global_norm(&mut g, max);
            prop_assert!(global_norm(&g) <= max + 1e-12);
        }

        #[test]
        fn tiny_lr_moves_little(seed in 0u64..100) {
            let c = TrainConfig { weight_decay: 0.0, seed, steps: 1, ..small_config() };
            let p0 = init_params(&c).unwrap();
            let (t, y) = train_batch(&c, 0, None).unwrap();
            let (_, mut g) = batch_loss_and_grads(&p0, &c.arch, &t, &y, false).unwrap();
            clip_global_norm(&mut g, c.grad_clip_norm);
            let mut p = p0.clone();
            let mut st = OptimizerState::new(&p);
            let lr = 1e-9;
            adamw_step(&mut p, &g, &mut st, lr, &c).unwrap();
            let mut moved = 0.0f64;
            for (k, m) in &p.tensors {
                moved = moved.max(m.max_abs_diff(&p0.tensors[k]));
            }
            prop_assert!(moved <= lr * (1.0 + 1e-6));
        }
    }
}
