use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use seqdiff::checkpoint::Checkpoint;
use seqdiff::config::RunConfig;
use seqdiff::pipeline;
use seqdiff::sampler::{SamplerMode, TauTerminal};
use seqdiff::{Error, NoiseSchedule};

#[derive(Parser)]
#[command(
    name = "seqdiff",
    version,
    about = "Embedding diffusion for sequence-to-sequence tasks"
)]
#[command(after_help = RunConfig::help_text())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a checksum manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a denoiser, writing metrics.csv, checkpoint.json and run.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `train_steps`.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode sources (pairs .jsonl or token lines) with a trained model.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write every candidate set as JSON lines.
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        mode: Option<SamplerMode>,
        #[arg(long)]
        tau_sigma: Option<f64>,
        #[arg(long)]
        length_beam: Option<usize>,
        #[arg(long)]
        mbr: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_self_condition: bool,
    },
    /// Corpus BLEU (and language accuracy for multilingual corpora).
    Evaluate {
        #[arg(long)]
        hypotheses: PathBuf,
        /// Pairs .jsonl (targets are used) or token lines.
        #[arg(long)]
        reference: PathBuf,
    },
    /// Diagnostic experiments.
    Analyze {
        #[command(subcommand)]
        mode: Analysis,
    },
}

#[derive(Subcommand)]
enum Analysis {
    /// Nearest-neighbour recovery of noisy Gaussian embeddings against σ.
    NnRecovery {
        #[arg(long, value_delimiter = ',', default_values_t = [100, 1000])]
        vocab: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [16, 64, 128])]
        dim: Vec<usize>,
        #[arg(long, default_value_t = 49)]
        points: usize,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diffusion loss of a trained model against σ.
    LossProfile {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 49)]
        points: usize,
        #[arg(long, default_value_t = 200)]
        limit: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distance of predictions to the true and a mismatched target when the
    /// mismatched one is noised, with τ = t versus a fixed τ.
    RelianceProbe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
        t: Vec<f64>,
        #[arg(long, default_value_t = 0.995)]
        tau: f64,
        #[arg(long, default_value_t = 200)]
        limit: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Uniform-time loss under a schedule versus reweighted uniform-σ loss.
    ScheduleEquiv {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = NoiseSchedule::Sqrt)]
        from: NoiseSchedule,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> seqdiff::Result<RunConfig> {
    RunConfig::load(path)
}

fn run(cli: Cli) -> seqdiff::Result<serde_json::Value> {
    use serde_json::json;
    Ok(match cli.command {
        Command::GenData { config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.task.seed = s;
            }
            let m = pipeline::gen_data(&cfg, &out)?;
            json!({"command": "gen-data", "vocab_size": m.vocab_size, "collision_rate": m.collision_rate, "checksums": m.checksums})
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            steps,
            resume,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(s) = steps {
                cfg.train_steps = s;
            }
            let r = pipeline::train(&cfg, &data, &out, resume.as_deref())?;
            let last = r.records.last();
            json!({
                "command": "train",
                "step": r.trainer.step(),
                "loss": last.map(|l| l.loss.total),
                "sigma_min": last.map(|l| l.sigma_min),
                "checkpoint": r.checkpoint,
                "metrics": r.metrics,
            })
        }
        Command::Sample {
            checkpoint,
            input,
            output,
            candidates,
            steps,
            mode,
            tau_sigma,
            length_beam,
            mbr,
            seed,
            no_self_condition,
        } => {
            let mut sc = Checkpoint::load(&checkpoint)?.config.sampler;
            if let Some(v) = steps {
                sc.steps = v;
            }
            if let Some(v) = mode {
                sc.mode = v;
            }
            if let Some(v) = tau_sigma {
                sc.tau_terminal = TauTerminal::Sigma(v);
            }
            if let Some(v) = length_beam {
                sc.length_beam = v;
            }
            if let Some(v) = mbr {
                sc.mbr_samples = v;
            }
            if let Some(v) = seed {
                sc.seed = v;
            }
            if no_self_condition {
                sc.self_condition = false;
            }
            let sets = pipeline::sample(&checkpoint, &input, &sc, &output, candidates.as_deref())?;
            let per_source = sets.first().map_or(0, |s| s.candidates.len());
            json!({"command": "sample", "sources": sets.len(), "candidates_per_source": per_source, "output": output})
        }
        Command::Evaluate {
            hypotheses,
            reference,
        } => {
            let e = pipeline::evaluate(&hypotheses, &reference)?;
            json!({"command": "evaluate", "sentences": e.sentences, "bleu": e.bleu, "language_accuracy": e.language_accuracy})
        }
        Command::Analyze { mode } => match mode {
            Analysis::NnRecovery {
                vocab,
                dim,
                points,
                samples,
                seed,
                out,
            } => {
                let curves =
                    pipeline::analyze_nn_recovery(&vocab, &dim, points, samples, seed, &out)?;
                json!({"command": "analyze nn-recovery", "curves": curves.len(), "out": out})
            }
            Analysis::LossProfile {
                checkpoint,
                data,
                points,
                limit,
                seed,
                out,
            } => {
                let p =
                    pipeline::analyze_loss_profile(&checkpoint, &data, points, limit, seed, &out)?;
                json!({"command": "analyze loss-profile", "points": p.len(), "out": out})
            }
            Analysis::RelianceProbe {
                checkpoint,
                data,
                t,
                tau,
                limit,
                seed,
                out,
            } => {
                let (cur, fixed) = pipeline::analyze_reliance_probe(
                    &checkpoint,
                    &data,
                    &t,
                    tau,
                    limit,
                    seed,
                    &out,
                )?;
                let mean = |rows: &[seqdiff::analysis::ProbeRow],
                            f: fn(&seqdiff::analysis::ProbeRow) -> f64| {
                    rows.iter().map(f).sum::<f64>() / rows.len() as f64
                };
                json!({
                    "command": "analyze reliance-probe",
                    "truth_tau_t": mean(&cur, |r| r.mse_to_truth),
                    "negative_tau_t": mean(&cur, |r| r.mse_to_negative),
                    "truth_tau_fixed": mean(&fixed, |r| r.mse_to_truth),
                    "negative_tau_fixed": mean(&fixed, |r| r.mse_to_negative),
                    "out": out,
                })
            }
            Analysis::ScheduleEquiv {
                checkpoint,
                data,
                from,
                samples,
                seed,
                out,
            } => {
                let r = pipeline::analyze_schedule_equiv(
                    &checkpoint,
                    &data,
                    from,
                    samples,
                    seed,
                    &out,
                )?;
                json!({"command": "analyze schedule-equiv", "lhs": r.lhs, "rhs": r.rhs, "relative_gap": r.relative_gap})
            }
        },
    })
}

fn fail(kind: &str, code: u8, message: &str) -> ExitCode {
    eprintln!("{}", serde_json::json!({"error": kind, "message": message}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("usage error")
                .trim_start_matches("error: ");
            return fail("usage", 2, first);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e @ Error::MissingFile(_)) => fail("missing_file", 3, &e.to_string()),
        Err(e @ Error::Config(_)) => fail("config", 4, &e.to_string()),
        Err(e) => fail("runtime", 1, &e.to_string()),
    }
}
