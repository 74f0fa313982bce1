use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};
use mesalab_cli::commands::{self, exit_code};
use mesalab_cli::config::ExperimentConfig;
use mesalab_cli::verify::{Suite, VerifyOptions};

#[derive(Parser)]
#[command(name = "mesa", about = "Train, verify and probe in-context least-squares learners", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to analyze; defaults to `<out>/seed<N>/final.mesa`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded corpus of sequences.
    Gen(Common),
    /// Train one model per seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue each seed from its last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Run the equivalence and oracle suites and print a JSON report.
    Verify {
        #[arg(value_enum, default_value = "all")]
        suite: Suite,
        /// Directory for the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Regularizer fed to the mesa suite.
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        mesa_lambda: f64,
    },
    Probe(ModelArgs),
    Icl {
        #[command(flatten)]
        model: ModelArgs,
        /// Tuned prompt tokens for the EOS variants.
        #[arg(long)]
        prompt: Option<PathBuf>,
    },
    Distill(ModelArgs),
    Maps(ModelArgs),
}

fn load(c: &Common) -> Result<(ExperimentConfig, Vec<u64>)> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    let seeds = c.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    Ok((cfg, seeds))
}

fn checkpoint(cfg: &ExperimentConfig, seed: u64, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.seed_dir(seed).join(commands::FINAL_FILE))
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn for_each_seed(m: &ModelArgs, f: impl Fn(&ExperimentConfig, &std::path::Path, u64) -> Result<Vec<PathBuf>>) -> Result<bool> {
    let (cfg, seeds) = load(&m.common)?;
    if m.checkpoint.is_some() && seeds.len() > 1 {
        return Err(anyhow!("--checkpoint needs --seed"));
    }
    for s in seeds {
        report(&f(&cfg, &checkpoint(&cfg, s, &m.checkpoint), s)?);
    }
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Gen(c) => {
            let (cfg, seeds) = load(&c)?;
            for s in seeds {
                println!("{}", commands::cmd_gen(&cfg, s)?.display());
            }
            Ok(true)
        }
        Cmd::Train { common, resume } => {
            let (cfg, seeds) = load(&common)?;
            for r in commands::cmd_train(&cfg, &seeds, resume)? {
                let last = r.outcome.as_ref().ok().and_then(|m| m.last().map(|x| x.eval_loss));
                println!("seed {}: {} (final eval loss {:?})", r.seed, r.dir.display(), last);
            }
            Ok(true)
        }
        Cmd::Verify { suite, out, mesa_lambda } => {
            let rep = commands::cmd_verify(suite, &VerifyOptions { mesa_lambda }, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
            Ok(rep.passed)
        }
        Cmd::Probe(m) => for_each_seed(&m, commands::cmd_probe),
        Cmd::Icl { model, prompt } => for_each_seed(&model, |c, ck, s| commands::cmd_icl(c, ck, s, prompt.as_deref())),
        Cmd::Distill(m) => for_each_seed(&m, commands::cmd_distill),
        Cmd::Maps(m) => for_each_seed(&m, commands::cmd_maps),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
