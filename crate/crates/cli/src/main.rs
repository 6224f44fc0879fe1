use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cedd_cli::checkpoint::Checkpoint;
use cedd_cli::commands::{
    check_table, contaminate, majority_baseline, results_csv, run_eval_bound, run_sample, run_spellcheck, run_train,
    run_verify, sample_file, training_log_csv,
};
use cedd_cli::config::RunConfig;
use cedd_cli::corpus::Corpus;
use cedd_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "cedd", version, about = "Discrete diffusion on character corpora with a tabular denoiser")]
struct Cli {
    /// Worker threads for parallel estimation and sampling (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// TOML run configuration; unspecified fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set model.family=roulette`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
    /// Seed of the command's own section.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a tabular denoiser and write a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate text from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Estimate the perplexity bounds on a corpus and write a results CSV.
    EvalBound {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate on every chunk instead of the held-out tail.
        #[arg(long)]
        all_chunks: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the brute-force oracle checks on tiny chains; exits non-zero on any failure.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correct a noisy text by reading it as x_t at time `spellcheck.t_star`
    /// (default 0.15) and taking the most probable clean character at every
    /// position. Needs a uniform or roulette checkpoint (roulette with p_m = 0.95
    /// is the intended setting). With `--reference`, reports the accuracy on the
    /// positions where the input differs from the reference.
    Spellcheck {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Corpus used for the majority-character baseline.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Replace a fraction of characters with random charset characters.
    Contaminate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_sets(cfg: RunConfig, sets: &[String]) -> Result<RunConfig> {
    if sets.is_empty() {
        return Ok(cfg);
    }
    let bad = |detail: String| CliError::Parse { what: "--set", detail };
    let mut table = toml::Table::try_from(&cfg).map_err(|e| bad(e.to_string()))?;
    for item in sets {
        let (key, raw) = item.split_once('=').ok_or_else(|| bad(format!("expected SECTION.KEY=VALUE, got {item}")))?;
        let (section, field) = key.split_once('.').ok_or_else(|| bad(format!("expected SECTION.KEY, got {key}")))?;
        let entry = table
            .entry(section.trim())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| bad(format!("{section} is not a section")))?;
        entry.insert(field.trim().to_string(), parse_value(raw.trim()));
    }
    RunConfig::from_toml(&toml::to_string(&table).map_err(|e| bad(e.to_string()))?)
}

fn resolve(base: RunConfig, o: &Overrides, seed_slot: impl FnOnce(&mut RunConfig) -> &mut u64) -> Result<RunConfig> {
    let base = match &o.config {
        Some(p) => RunConfig::from_toml(&read(p)?)?,
        None => base,
    };
    let mut cfg = apply_sets(base, &o.sets)?;
    if let Some(s) = o.seed {
        *seed_slot(&mut cfg) = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { corpus, out, log, overrides } => {
            let cfg = resolve(RunConfig::default(), &overrides, |c| &mut c.train.seed)?;
            let corpus = Corpus::load(&corpus, cfg.model.length, cfg.data.eval_fraction, None)?;
            eprintln!(
                "corpus: {} train / {} eval chunks, V = {}, {} chars dropped, unknown ratio {}",
                corpus.train.len(),
                corpus.eval.len(),
                corpus.charset.data_tokens(),
                corpus.dropped,
                corpus.unknown_ratio()
            );
            let every = (cfg.train.steps / 20).max(1);
            let (ck, logs) = run_train(&cfg, &corpus, |l| {
                if l.step % every == 0 {
                    eprintln!("step {:>6}  loss {:.5}  weight {:.4}", l.step, l.loss, l.weight);
                }
            })?;
            ck.save(&out)?;
            if let Some(path) = log {
                write(&path, &training_log_csv(&cfg, &logs))?;
            }
        }
        Command::Sample { checkpoint, out, overrides } => {
            let mut ck = Checkpoint::load(&checkpoint)?;
            ck.config = resolve(ck.config.clone(), &overrides, |c| &mut c.sample.seed)?;
            let run = run_sample(&ck)?;
            write(&out, &sample_file(&ck, &run))?;
            eprintln!("{} samples, {} clamped categoricals", run.texts.len(), run.stats.clamped);
        }
        Command::EvalBound { checkpoint, corpus, out, all_chunks, overrides } => {
            let mut ck = Checkpoint::load(&checkpoint)?;
            ck.config = resolve(ck.config.clone(), &overrides, |c| &mut c.bound.seed)?;
            let fraction = if all_chunks { 0.0 } else { ck.config.data.eval_fraction };
            let corpus = Corpus::load(&corpus, ck.config.model.length, fraction, Some(ck.charset.clone()))?;
            let data = if all_chunks { &corpus.train[..] } else { corpus.eval_or_train() };
            let name = if all_chunks { "all" } else { "eval" };
            let records = run_eval_bound(&ck, data, name)?;
            for r in &records {
                eprintln!("{} = {:.5} +- {:.5} (perplexity {:.3})", r.estimate.which.name(), r.estimate.mean, r.estimate.stderr, r.estimate.perplexity);
            }
            write(&out, &results_csv(&ck.config, &records))?;
        }
        Command::Verify { seed, out } => {
            let rows = run_verify(seed)?;
            let table = check_table(&rows);
            print!("{table}");
            if let Some(path) = out {
                write(&path, &table)?;
            }
            if rows.iter().any(|r| !r.pass) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Spellcheck { checkpoint, input, reference, corpus, out, overrides } => {
            let mut ck = Checkpoint::load(&checkpoint)?;
            ck.config = resolve(ck.config.clone(), &overrides, |c| &mut c.spellcheck.seed)?;
            let noisy = read(&input)?;
            let clean = reference.as_deref().map(read).transpose()?;
            let report = run_spellcheck(&ck, &noisy, clean.as_deref())?;
            write(&out, &report.corrected)?;
            if let Some(clean) = &clean {
                eprintln!(
                    "corrupted {}  fixed {}  broken {}  accuracy {:.4}",
                    report.corrupted,
                    report.fixed,
                    report.broken,
                    report.accuracy()
                );
                if let Some(c) = corpus {
                    eprintln!("majority-character baseline {:.4}", majority_baseline(&read(&c)?, &noisy, clean));
                }
            }
        }
        Command::Contaminate { input, out, rate, seed } => {
            let text = read(&input)?;
            let charset = cedd_cli::corpus::Charset::from_text(&text)?;
            write(&out, &contaminate(&text, &charset, rate, seed))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
