//! One function per subcommand. Outputs land in per-seed directories and are
//! overwritten atomically, so repeating a command with the same inputs is
//! harmless.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use mesalab::analyze::{
    distill_linear_layer, export_attention_maps, icl_eval, icl_eval_continual, lsq_icl_curve, precond_probe,
    sub_diagonal_mass, target_probe, token_probe, tune_prompt_tokens, ProbeKind, ProbeReport, PromptTokens,
};
use mesalab::io::{
    batch_container, load_checkpoint, save_checkpoint, write_atomic, NamedTensorContainer, Tensor, TensorData,
};
use mesalab::model::{LayerKind, ModelParams};
use mesalab::numerics::mean_std;
use mesalab::seqgen::{gen_icl_tasks, gen_sequences, IclLayout, SequenceBatch, PREFIX_LEN};
use mesalab::train::{train_loop, MetricRow, Start, METRIC_COLUMNS};
use mesalab::{Error, Matrix, Rng};

use crate::config::{AnalysisRequest, ExperimentConfig};
use crate::output::{read_csv, write_csv, Cell};
use crate::verify::{self, Report, Suite, VerifyOptions};

pub const BATCH_FILE: &str = "batch.mesa";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.mesa";
pub const FINAL_FILE: &str = "final.mesa";
pub const LAST_GOOD_FILE: &str = "last_good.mesa";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const PROMPT_FILE: &str = "prompt.mesa";

/// Writes the seeded corpus and its task spec; returns the corpus path.
pub fn cmd_gen(cfg: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
    let batch = gen_sequences(&cfg.task, cfg.gen_batch, &Rng::derive(seed, "gen", 0))?;
    let dir = cfg.seed_dir(seed);
    let path = dir.join(BATCH_FILE);
    batch_container(&batch)?.save(&path)?;
    let spec = serde_json::to_string_pretty(&cfg.task)?;
    write_atomic(&dir.join("task.json"), spec.as_bytes())?;
    Ok(path)
}

fn metric_cells(r: &MetricRow) -> Vec<Cell> {
    let mut v: Vec<Cell> = vec![r.step.into()];
    v.extend(r.values()[1..].iter().map(|&x| Cell::Float(x)));
    v
}

fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let (header, rows) = read_csv(path)?;
    if header != METRIC_COLUMNS {
        return Err(anyhow!("unexpected metrics header in {}", path.display()));
    }
    Ok(rows
        .into_iter()
        .map(|r| MetricRow { step: r[0] as usize, lr: r[1], train_loss: r[2], eval_loss: r[3], grad_norm: r[4], wallclock_s: r[5] })
        .collect())
}

/// Per-seed result of `cmd_train`.
#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub outcome: std::result::Result<Vec<MetricRow>, Error>,
}

/// Trains every seed. With `resume`, each seed restarts from its own
/// checkpoint and keeps the metrics logged up to it. A divergence stops that
/// seed only; the first one is returned as the error after all seeds ran.
pub fn cmd_train(cfg: &ExperimentConfig, seeds: &[u64], resume: bool) -> Result<Vec<SeedRun>> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let tc = cfg.train_config(seed);
        let dir = cfg.seed_dir(seed);
        std::fs::create_dir_all(&dir)?;
        let (start, mut log) = if resume {
            let (params, state) = load_checkpoint(&dir.join(CHECKPOINT_FILE)).context("loading checkpoint to resume")?;
            let state = state.ok_or_else(|| anyhow!("checkpoint has no optimizer state"))?;
            let kept: Vec<MetricRow> =
                read_metrics(&dir.join(METRICS_FILE))?.into_iter().filter(|r| r.step as u64 <= state.step).collect();
            (Some(Start { params, state }), kept)
        } else {
            (None, Vec::new())
        };
        let metrics_path = dir.join(METRICS_FILE);
        let ck_path = dir.join(CHECKPOINT_FILE);
        let result = train_loop(&tc, start, |row, params, state| {
            if !row.eval_loss.is_finite() {
                return save_checkpoint(&dir.join(LAST_GOOD_FILE), params, Some(state));
            }
            log.push(row.clone());
            let rows: Vec<Vec<Cell>> = log.iter().map(metric_cells).collect();
            write_csv(&metrics_path, &METRIC_COLUMNS, &rows).map_err(|e| Error::Io(e.to_string()))?;
            save_checkpoint(&ck_path, params, Some(state))
        });
        let outcome = match result {
            Ok(out) => {
                if log.is_empty() {
                    write_csv(&metrics_path, &METRIC_COLUMNS, &[])?;
                }
                save_checkpoint(&dir.join(FINAL_FILE), &out.params, None)?;
                Ok(log.clone())
            }
            Err(e @ Error::DivergedTraining { .. }) => {
                eprintln!("seed {seed}: {e}");
                Err(e)
            }
            Err(e) => return Err(e.into()),
        };
        runs.push(SeedRun { seed, dir, outcome });
    }
    write_aggregate(&cfg.output_dir.join(AGGREGATE_FILE), &runs)?;
    if let Some(e) = runs.iter().find_map(|r| r.outcome.as_ref().err()) {
        return Err(e.clone().into());
    }
    Ok(runs)
}

/// Mean and population standard deviation over the seeds that finished, at
/// every step they all logged.
pub fn write_aggregate(path: &Path, runs: &[SeedRun]) -> Result<()> {
    let ok: Vec<&Vec<MetricRow>> = runs.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    let mut header = vec!["step".to_string(), "seeds".to_string()];
    for c in &METRIC_COLUMNS[1..] {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    let mut rows = Vec::new();
    if let Some(first) = ok.first() {
        for r in first.iter() {
            let at: Vec<&MetricRow> = ok.iter().filter_map(|m| m.iter().find(|x| x.step == r.step)).collect();
            if at.len() != ok.len() {
                continue;
            }
            let mut row: Vec<Cell> = vec![r.step.into(), ok.len().into()];
            for col in 1..METRIC_COLUMNS.len() {
                let (m, s) = mean_std(&at.iter().map(|x| x.values()[col]).collect::<Vec<_>>());
                row.push(m.into());
                row.push(s.into());
            }
            rows.push(row);
        }
    }
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(path, &h, &rows)
}

pub fn cmd_verify(suite: Suite, opts: &VerifyOptions, out: Option<&Path>) -> Result<Report> {
    let report = verify::run(suite, opts);
    if let Some(dir) = out {
        let name = format!("verify_{}.json", serde_json::to_value(suite)?.as_str().unwrap_or("suite"));
        write_atomic(&dir.join(name), serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(report)
}

/// Loads a checkpoint and checks it against the configured architecture.
pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<ModelParams> {
    let (params, _) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    params.check(&cfg.arch)?;
    Ok(params)
}

fn analysis_batch(cfg: &ExperimentConfig, seed: u64, purpose: &str, n: usize) -> Result<(SequenceBatch, Vec<Matrix>, Vec<Matrix>)> {
    let b = gen_sequences(&cfg.task, n, &Rng::derive(seed, purpose, 0))?;
    let (toks, tgts) = cfg.train.tokens.encode_batch(&b);
    Ok((b, toks, tgts))
}

fn probe_rows(r: &ProbeReport) -> Vec<Vec<Cell>> {
    r.cells
        .iter()
        .map(|c| vec![c.layer.into(), c.index.into(), c.mse.into(), c.mse_alt.unwrap_or(f64::NAN).into()])
        .collect()
}

/// Runs every probe request (a lag-0..4 token probe on layer 0 when none is
/// configured) and returns the written files.
pub fn cmd_probe(cfg: &ExperimentConfig, checkpoint: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    let params = load_model(cfg, checkpoint)?;
    let t_len = cfg.task.seq_len;
    let depth = cfg.arch.layers.len();
    let mut reqs: Vec<AnalysisRequest> =
        cfg.analyses.iter().filter(|a| matches!(a, AnalysisRequest::Probe { .. })).cloned().collect();
    if reqs.is_empty() {
        reqs.push(AnalysisRequest::Probe {
            probe: ProbeKind::Token,
            layers: vec![0],
            t: vec![t_len - 1],
            lags: (0..5).collect(),
            batch: 1024,
            lambda: 1.0,
            reg: mesalab::analyze::PROBE_REG,
        });
    }
    let mut written = Vec::new();
    for (i, req) in reqs.iter().enumerate() {
        let AnalysisRequest::Probe { probe, layers, t, lags, batch, lambda, reg } = req else { continue };
        let layers = if layers.is_empty() { (0..=depth).collect() } else { layers.clone() };
        let t_grid = if t.is_empty() { (0..t_len).collect() } else { t.clone() };
        let (b, toks, tgts) = analysis_batch(cfg, seed, "probe", *batch)?;
        let (report, extra) = match probe {
            ProbeKind::Token => {
                let lags = if lags.is_empty() { (0..5).collect() } else { lags.clone() };
                let mut cells = Vec::new();
                for &l in &layers {
                    cells.extend(token_probe(&params, &cfg.arch, &toks, l, t_grid[0], &lags, *reg)?.cells);
                }
                (ProbeReport { kind: ProbeKind::Token, cells, reg: *reg, batch: *batch }, None)
            }
            ProbeKind::Target => (target_probe(&params, &cfg.arch, &toks, &tgts, &layers, &t_grid, *reg)?, None),
            ProbeKind::Precond => {
                let (r, gap) = precond_probe(&params, &cfg.arch, &toks, &b.observations, &layers, &t_grid, *lambda, *reg)?;
                (r, Some(gap))
            }
        };
        let kind = serde_json::to_value(probe)?.as_str().unwrap_or("probe").to_string();
        let path = cfg.seed_dir(seed).join(format!("probe_{i}_{kind}.csv"));
        let index = if *probe == ProbeKind::Token { "lag" } else { "t" };
        let alt = if *probe == ProbeKind::Precond { "mse_chebyshev" } else { "mse_alt" };
        write_csv(&path, &["layer", index, "mse", alt], &probe_rows(&report))?;
        if let Some(gap) = extra {
            eprintln!("precond probe: exact vs 6-step Chebyshev targets differ by {gap:.3e} (relative, worst sequence)");
        }
        written.push(path);
    }
    Ok(written)
}

pub fn save_prompt(path: &Path, p: &PromptTokens) -> Result<()> {
    let mut c = NamedTensorContainer::new();
    c.insert("eos", Tensor::new(vec![p.eos.len()], TensorData::F64(p.eos.clone()))?)?;
    if let Some(pre) = &p.prefix {
        c.insert("prefix", Tensor::from_matrix(pre))?;
    }
    Ok(c.save(path)?)
}

pub fn load_prompt(path: &Path) -> Result<PromptTokens> {
    let c = NamedTensorContainer::load(path)?;
    let eos = c.require("eos")?.data.to_f64();
    let prefix = c.get("prefix").map(|t| t.to_matrix()).transpose()?;
    if prefix.as_ref().is_some_and(|p| p.rows() != PREFIX_LEN) {
        return Err(anyhow!("prefix must have {PREFIX_LEN} rows"));
    }
    Ok(PromptTokens { eos, prefix })
}

/// Few-shot curves of the model next to the least-squares controls. EOS
/// variants use `prompt` when given, tune tokens when the request asks for
/// it, and fail with `MissingPromptTokens` otherwise.
pub fn cmd_icl(cfg: &ExperimentConfig, checkpoint: &Path, seed: u64, prompt: Option<&Path>) -> Result<Vec<PathBuf>> {
    let params = load_model(cfg, checkpoint)?;
    let mut reqs: Vec<AnalysisRequest> =
        cfg.analyses.iter().filter(|a| matches!(a, AnalysisRequest::Icl { .. })).cloned().collect();
    if reqs.is_empty() {
        reqs.push(AnalysisRequest::Icl { variant: IclLayout::Plain, n_pairs: 20, tasks: 256, continual: false, tune: None });
    }
    let n_s = cfg.task.n_s;
    let dir = cfg.seed_dir(seed);
    let mut written = Vec::new();
    for req in &reqs {
        let AnalysisRequest::Icl { variant, n_pairs, tasks, continual, tune } = req else { continue };
        let held_out = gen_icl_tasks(n_s, *n_pairs, *tasks, &Rng::derive(seed, "icl", 0))?;
        let tokens = match (variant, prompt, tune) {
            (IclLayout::Plain, _, _) => None,
            (_, Some(p), _) => Some(load_prompt(p)?),
            (_, None, Some(opts)) => {
                let t = tune_prompt_tokens(&params, &cfg.arch, *variant, PromptTuning { seed, ..*opts })?;
                save_prompt(&dir.join(PROMPT_FILE), &t)?;
                Some(t)
            }
            (v, None, None) => return Err(Error::MissingPromptTokens(serde_json::to_value(v)?.as_str().unwrap_or("").into()).into()),
        };
        let curve = icl_eval(&params, &cfg.arch, &held_out, *variant, tokens.as_ref())?;
        let lsq = lsq_icl_curve(&held_out, false, 1.0)?;
        let spur = lsq_icl_curve(&held_out, true, 1.0)?;
        let rows: Vec<Vec<Cell>> =
            (0..curve.len()).map(|i| vec![(i + 1).into(), curve[i].into(), lsq[i].into(), spur[i].into()]).collect();
        let name = serde_json::to_value(variant)?.as_str().unwrap_or("icl").to_string();
        let path = dir.join(format!("icl_{name}.csv"));
        write_csv(&path, &["i", "loss", "lsq_correct", "lsq_spurious"], &rows)?;
        written.push(path);
        if *continual {
            let second = gen_icl_tasks(n_s, *n_pairs, *tasks, &Rng::derive(seed, "icl", 1))?;
            let c = icl_eval_continual(&params, &cfg.arch, &held_out, &second)?;
            let rows: Vec<Vec<Cell>> = c.iter().enumerate().map(|(i, l)| vec![(i + 1).into(), (*l).into()]).collect();
            let path = dir.join("icl_continual.csv");
            write_csv(&path, &["i", "loss"], &rows)?;
            written.push(path);
        }
    }
    Ok(written)
}

use mesalab::analyze::PromptTuning;

pub fn cmd_distill(cfg: &ExperimentConfig, checkpoint: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    let params = load_model(cfg, checkpoint)?;
    let dir = cfg.seed_dir(seed);
    let mut rows = Vec::new();
    for req in &cfg.analyses {
        let AnalysisRequest::Distill { layer, batch, options } = req else { continue };
        if *layer >= cfg.arch.layers.len() {
            return Err(Error::InvalidConfig(format!("layer {layer} does not exist")).into());
        }
        let (_, data, _) = analysis_batch(cfg, seed, "distill", *batch)?;
        let (_, ev_t, ev_y) = analysis_batch(cfg, seed, "distill-eval", *batch)?;
        let d = distill_linear_layer(&params, &cfg.arch, *layer, &data, (&ev_t, &ev_y), *options)?;
        save_checkpoint(&dir.join(format!("distilled_layer{layer}.mesa")), &d.params, None)?;
        rows.push(vec![(*layer).into(), d.mse.into(), d.loss_ratio.into()]);
    }
    if rows.is_empty() {
        return Err(Error::InvalidConfig("no distill analysis configured".into()).into());
    }
    let path = dir.join("distill.csv");
    write_csv(&path, &["layer", "distill_mse", "loss_ratio"], &rows)?;
    Ok(vec![path])
}

/// Batch-averaged per-head maps as `T × T` CSVs plus a summary with the
/// previous-token mass of each head. Mesa layers export `kᵀ R q` scores under
/// a distinct file name.
pub fn cmd_maps(cfg: &ExperimentConfig, checkpoint: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    let params = load_model(cfg, checkpoint)?;
    let dir = cfg.seed_dir(seed);
    let mut reqs: Vec<(usize, usize, f64)> = cfg
        .analyses
        .iter()
        .filter_map(|a| match a {
            AnalysisRequest::Maps { layer, batch, copy_threshold } => Some((*layer, *batch, *copy_threshold)),
            _ => None,
        })
        .collect();
    if reqs.is_empty() {
        reqs.push((0, 2048, 0.4));
    }
    let mut written = Vec::new();
    let mut summary = Vec::new();
    for (layer, batch, threshold) in reqs {
        let kind = *cfg.arch.layers.get(layer).ok_or_else(|| Error::InvalidConfig(format!("layer {layer} does not exist")))?;
        let (_, toks, _) = analysis_batch(cfg, seed, "maps", batch)?;
        let maps = export_attention_maps(&params, &cfg.arch, &toks, layer)?;
        let stem = if kind == LayerKind::Mesa { "mesa_scores" } else { "attention" };
        for (h, m) in maps.iter().enumerate() {
            let header: Vec<String> = std::iter::once("t".to_string()).chain((0..m.cols()).map(|c| c.to_string())).collect();
            let h_refs: Vec<&str> = header.iter().map(String::as_str).collect();
            let rows: Vec<Vec<Cell>> = (0..m.rows())
                .map(|t| std::iter::once(Cell::from(t)).chain(m.row(t).iter().map(|&x| Cell::Float(x))).collect())
                .collect();
            let path = dir.join(format!("{stem}_layer{layer}_head{h}.csv"));
            write_csv(&path, &h_refs, &rows)?;
            written.push(path);
            let mass = sub_diagonal_mass(m);
            summary.push(vec![layer.into(), h.into(), mass.into(), Cell::Int((mass >= threshold) as i64)]);
        }
    }
    let path = dir.join("maps_summary.csv");
    write_csv(&path, &["layer", "head", "sub_diagonal_mass", "copy_head"], &summary)?;
    written.push(path);
    Ok(written)
}

/// Exit status for an error: 3 for divergence, 2 for everything else
/// (usage, configuration, input files).
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::DivergedTraining { .. }) => 3,
        _ => 2,
    }
}
