//! Experiment configuration: one JSON file with a strict schema.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mesalab::analyze::{DistillOptions, ProbeKind, PromptTuning};
use mesalab::model::TransformerConfig;
use mesalab::seqgen::{GeneratorSpec, IclLayout};
use mesalab::train::{Schedule, TokenMode, TrainConfig};
use serde::{Deserialize, Serialize};

/// Environment variable that may override `output_dir`; nothing else is read
/// from the environment.
pub const OUTPUT_DIR_ENV: &str = "MESA_OUTPUT_DIR";

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_gen_batch() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: GeneratorSpec,
    pub arch: TransformerConfig,
    pub train: TrainSettings,
    #[serde(default)]
    pub analyses: Vec<AnalysisRequest>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Sequences written by `gen`.
    #[serde(default = "default_gen_batch")]
    pub gen_batch: usize,
}

fn d_clip() -> f64 {
    1.0
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
fn d_eval_batch() -> usize {
    2048
}
fn d_schedule() -> Schedule {
    Schedule::WarmupCosine
}
fn d_tokens() -> TokenMode {
    TokenMode::Raw
}

/// Optimization settings; task, architecture and seed come from the
/// enclosing experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
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
    pub eval_every: usize,
    #[serde(default = "d_eval_batch")]
    pub eval_batch: usize,
    #[serde(default = "d_schedule")]
    pub schedule: Schedule,
    #[serde(default = "d_tokens")]
    pub tokens: TokenMode,
    #[serde(default)]
    pub frozen_corpus: Option<usize>,
    #[serde(default)]
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalysisRequest {
    Probe {
        probe: ProbeKind,
        #[serde(default)]
        layers: Vec<usize>,
        /// Time steps; token probes use the first entry.
        #[serde(default)]
        t: Vec<usize>,
        #[serde(default)]
        lags: Vec<usize>,
        #[serde(default = "d_probe_batch")]
        batch: usize,
        #[serde(default = "d_probe_lambda")]
        lambda: f64,
        #[serde(default = "d_probe_reg")]
        reg: f64,
    },
    Icl {
        variant: IclLayout,
        #[serde(default = "d_pairs")]
        n_pairs: usize,
        #[serde(default = "d_tasks")]
        tasks: usize,
        /// Also evaluate two tasks back to back.
        #[serde(default)]
        continual: bool,
        #[serde(default)]
        tune: Option<PromptTuning>,
    },
    Distill {
        layer: usize,
        #[serde(default = "d_distill_batch")]
        batch: usize,
        #[serde(default)]
        options: DistillOptions,
    },
    Maps {
        layer: usize,
        #[serde(default = "d_maps_batch")]
        batch: usize,
        /// Qualitative copy-head threshold on the sub-diagonal mass.
        #[serde(default = "d_copy_threshold")]
        copy_threshold: f64,
    },
}

fn d_probe_batch() -> usize {
    1024
}
fn d_probe_lambda() -> f64 {
    1.0
}
fn d_probe_reg() -> f64 {
    mesalab::analyze::PROBE_REG
}
fn d_pairs() -> usize {
    20
}
fn d_tasks() -> usize {
    256
}
fn d_distill_batch() -> usize {
    256
}
fn d_maps_batch() -> usize {
    2048
}
fn d_copy_threshold() -> f64 {
    0.4
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_json(&text)?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(mesalab::Error::InvalidConfig("seeds must not be empty".into()).into());
        }
        self.task.validate()?;
        self.train_config(self.seeds[0]).validate()?;
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let s = &self.train;
        TrainConfig {
            steps: s.steps,
            batch_size: s.batch_size,
            peak_lr: s.peak_lr,
            warmup_steps: s.warmup_steps,
            cosine_steps: s.cosine_steps,
            final_lr: s.final_lr,
            weight_decay: s.weight_decay,
            grad_clip_norm: s.grad_clip_norm,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
            seed,
            eval_every: s.eval_every,
            eval_batch: s.eval_batch,
            schedule: s.schedule,
            tokens: s.tokens,
            frozen_corpus: s.frozen_corpus,
            deterministic: s.deterministic,
            task: self.task.clone(),
            arch: self.arch.clone(),
        }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed{seed}"))
    }
}
