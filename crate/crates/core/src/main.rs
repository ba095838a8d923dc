use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use afd_slu::checkpoint::Checkpoint;
use afd_slu::config::{RunConfig, ScheduleVariant};
use afd_slu::data::{gen_synthetic, read_utterances, Split, SynthConfig};
use afd_slu::gradsuite::{run_suite, ROUNDOFF_SLACK, STEP, TOLERANCE};
use afd_slu::metrics::Metrics;
use afd_slu::student::evaluate;
use afd_slu::teacher::TeacherBackend;
use afd_slu::trainer::{ablate, ddc_lambda, train, TrainData};

#[derive(Parser, Debug)]
#[command(
    version,
    about = "Adaptive feature distillation for joint intent detection and slot filling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus (train/dev/test) and its teacher embeddings.
    GenSynth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        n_dev: usize,
        #[arg(long, default_value_t = 100)]
        n_test: usize,
        #[arg(long, default_value_t = 64)]
        d_et: usize,
        #[arg(long, default_value_t = 120)]
        vocab: usize,
        #[arg(long, default_value_t = 6)]
        n_intents: usize,
        #[arg(long, default_value_t = 8)]
        n_slot_types: usize,
    },
    /// Train a student, keeping the best dev checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// `file:PATH` or `synth:SEED`.
        #[arg(long)]
        teacher: Option<String>,
        /// Epoch log (JSON lines); defaults to `<out>/epochs.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split; prints metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train every ablation arm on several seeds and report test metrics.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<String>,
        /// Comma-separated seeds, e.g. `0,1,2,3,4`.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Finite-difference checks over all ops and both model losses.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the distillation weight per epoch for both schedule variants.
    Schedule {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Misuse of an otherwise valid command; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// Flags take precedence over the config file.
fn resolve(cfg: &mut RunConfig, data: Option<PathBuf>, teacher: Option<String>) -> Result<PathBuf> {
    if let Some(d) = data {
        cfg.data = Some(d.display().to_string());
    }
    if let Some(t) = teacher {
        cfg.teacher = Some(t);
    }
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| Usage("no data directory (--data or config.data)".into()))?;
    let data = PathBuf::from(data);
    if cfg.teacher.is_none() {
        cfg.teacher = Some(format!("file:{}", data.join("teacher.jsonl").display()));
    }
    Ok(data)
}

fn teacher_for(cfg: &RunConfig, vocab: usize) -> Result<TeacherBackend> {
    let spec = cfg.teacher.as_deref().expect("resolved");
    Ok(TeacherBackend::from_spec(
        spec,
        cfg.adapter.d_teacher,
        vocab,
    )?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("{}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn metrics_json(m: &Metrics) -> String {
    format!(
        "{{\"intent_acc\":{:.2},\"slot_f1\":{:.2},\"overall_acc\":{:.2}}}",
        m.intent_acc, m.slot_f1, m.overall_acc
    )
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::GenSynth {
            seed,
            out,
            n_train,
            n_dev,
            n_test,
            d_et,
            vocab,
            n_intents,
            n_slot_types,
        } => {
            let corpus = gen_synthetic(&SynthConfig {
                seed,
                n_train,
                n_dev,
                n_test,
                vocab,
                n_intents,
                n_slot_types,
                d_et,
            })?;
            corpus.write(&out)?;
            eprintln!("wrote corpus to {}", out.display());
        }
        Command::Train {
            config,
            data,
            teacher,
            log,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            let dir = resolve(&mut cfg, data, teacher)?;
            let data = TrainData::load(&dir)?;
            let teacher = teacher_for(&cfg, data.maps.tokens.len())?;
            std::fs::create_dir_all(&out).with_context(|| format!("{}", out.display()))?;
            std::fs::write(out.join("config.json"), cfg.to_json_pretty() + "\n")
                .with_context(|| format!("{}", out.display()))?;
            let log_path = log.unwrap_or_else(|| out.join("epochs.jsonl"));
            let mut log = create(&log_path)?;
            let before = teacher.checksum();
            let outcome = train(&cfg, &data, &teacher, Some(&mut log))?;
            log.flush()?;
            if teacher.checksum() != before {
                bail!("teacher parameters changed during training");
            }
            let ck_path = out.join("checkpoint.json");
            outcome.checkpoint.save(&ck_path)?;
            writeln!(
                stdout,
                "{}",
                serde_json::json!({
                    "checkpoint": ck_path.display().to_string(),
                    "digest": outcome.checkpoint.digest(),
                    "epoch": outcome.checkpoint.epoch,
                    "dev": outcome.checkpoint.dev.rounded(),
                })
            )?;
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            let split: Split = split.parse().map_err(|e: String| Usage(e))?;
            let ck = Checkpoint::load(&checkpoint)?;
            let utts = read_utterances(&split.path(&data))?;
            if utts.is_empty() {
                return Err(Usage(format!("split {} is empty", split.file_name())).into());
            }
            let counts = evaluate(
                &ck.student,
                &ck.label_maps,
                &utts,
                ck.config.optim.batch_size,
            )?;
            writeln!(stdout, "{}", metrics_json(&counts.metrics()))?;
        }
        Command::Ablate {
            config,
            data,
            teacher,
            seeds,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            let dir = resolve(&mut cfg, data, teacher)?;
            let data = TrainData::load(&dir)?;
            let test = read_utterances(&Split::Test.path(&dir))?;
            let teacher = teacher_for(&cfg, data.maps.tokens.len())?;
            let report = ablate(&cfg, &data, &test, &teacher, &seeds)?;
            writeln!(stdout, "{}", serde_json::to_string_pretty(&report)?)?;
        }
        Command::GradCheck { seed } => {
            let results = run_suite(seed)?;
            writeln!(
                stdout,
                "# h={STEP:e} tolerance={TOLERANCE:e} roundoff_slack={ROUNDOFF_SLACK:e}"
            )?;
            writeln!(
                stdout,
                "{:<16} {:>12} {:>12} {:>8} {:>9}",
                "check", "max_rel_err", "grad", "strict", "roundoff"
            )?;
            let mut broken = Vec::new();
            for r in &results {
                let verdict = |ok: bool| if ok { "pass" } else { "fail" };
                writeln!(
                    stdout,
                    "{:<16} {:>12.3e} {:>12.3e} {:>8} {:>9}",
                    r.name,
                    r.max_rel_err,
                    r.worst_grad,
                    verdict(r.passes()),
                    verdict(r.within_roundoff)
                )?;
                if !r.within_roundoff {
                    broken.push(r.name.clone());
                }
            }
            if !broken.is_empty() {
                bail!("gradient mismatch beyond round-off: {}", broken.join(", "));
            }
        }
        Command::Schedule { config } => {
            let cfg = load_config(config.as_deref())?;
            let mut halved = cfg.distill.clone();
            halved.schedule_variant = ScheduleVariant::Halved;
            let mut literal = cfg.distill.clone();
            literal.schedule_variant = ScheduleVariant::Literal;
            writeln!(stdout, "epoch\thalved\tliteral")?;
            for e in 0..=cfg.distill.epochs {
                writeln!(
                    stdout,
                    "{e}\t{:.12}\t{:.12}",
                    ddc_lambda(e, &halved)?,
                    ddc_lambda(e, &literal)?
                )?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Causes already folded into their parent's message are skipped.
            let mut message = e.to_string();
            for cause in e.chain().skip(1) {
                let text = cause.to_string();
                if !message.ends_with(&text) {
                    message = format!("{message}: {text}");
                }
            }
            let usage = e.downcast_ref::<Usage>().is_some();
            let kind = if usage { "usage" } else { "runtime" };
            eprintln!(
                "{}",
                serde_json::json!({ "error": kind, "message": message })
            );
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
