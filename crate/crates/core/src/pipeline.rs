//! End-to-end orchestration behind the command line: corpus generation,
//! training with metrics and checkpoints, decoding, scoring and the
//! diagnostic experiments. Every command writes a `run.json` manifest.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, TauPolicy};
use crate::bleu::corpus_bleu;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, CorpusManifest, CorpusPaths, SeqPair};
use crate::denoiser::DenoiserParams;
use crate::diffusion::{StepRecord, Trainer};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::sampler::{CandidateSet, Sampler, SamplerConfig};
use crate::schedule::NoiseSchedule;

pub const METRICS_HEADER: &str =
    "step,diffusion_mse,reconstruction_nll,length_nll,total,sigma_min,t_min";
pub const MANIFEST_VERSION: u32 = 1;

/// Provenance written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    /// `(path, sha256)` of input files.
    pub inputs: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig, seed: u64) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: Vec::new(),
        }
    }

    pub fn with_input(mut self, path: &Path) -> Result<Self> {
        self.inputs
            .push((path.display().to_string(), data::sha256_file(path)?));
        Ok(self)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join("run.json");
        let json = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<CorpusManifest> {
    let manifest = data::generate_dataset(&cfg.task, out)?;
    RunManifest::new("gen-data", cfg, cfg.task.seed).write(out)?;
    Ok(manifest)
}

/// Fresh parameters and embeddings drawn from the training seed.
pub fn init_model(cfg: &RunConfig) -> Result<(DenoiserParams, EmbeddingTable)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, &[0x1417]));
    let params = DenoiserParams::new(cfg.denoiser_config(), &mut rng)?;
    let table = EmbeddingTable::random(cfg.task.total_vocab(), cfg.model.embed_dim, &mut rng);
    Ok((params, table))
}

pub fn new_trainer(cfg: &RunConfig, train: Vec<SeqPair>) -> Result<Trainer> {
    let (params, table) = init_model(cfg)?;
    Trainer::new(cfg.train.clone(), params, table, train)
}

pub fn metrics_row(r: &StepRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.step,
        r.loss.diffusion_mse,
        r.loss.reconstruction_nll,
        r.loss.length_nll,
        r.loss.total,
        r.sigma_min,
        r.t_min
    )
}

pub struct TrainOutput {
    pub trainer: Trainer,
    pub records: Vec<StepRecord>,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

/// Keeps the header and rows up to `step` of an existing metrics file.
fn truncate_metrics(path: &Path, step: u64) -> Result<String> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for line in text.lines().skip(1) {
        let s: u64 = line
            .split(',')
            .next()
            .and_then(|x| x.parse().ok())
            .unwrap_or(u64::MAX);
        if s <= step {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains on `data_dir`'s train split until `cfg.train_steps`, writing
/// `metrics.csv`, `checkpoint.json` and `run.json` into `out`. With `resume`
/// the trainer continues from that checkpoint's exact position.
pub fn train(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutput> {
    let manifest = data::read_manifest(data_dir)?;
    if manifest.spec != cfg.task {
        return Err(Error::Config(format!(
            "corpus in {} was generated from a different task spec",
            data_dir.display()
        )));
    }
    let train_path = CorpusPaths::new(data_dir).split("train");
    let train_pairs = data::read_pairs(&train_path)?;
    create_dir(out)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if !cfg.resumable_from(&ck.config) {
                return Err(Error::Config(
                    "checkpoint was written under a different config".into(),
                ));
            }
            ck.into_trainer(train_pairs)?
        }
        None => new_trainer(cfg, train_pairs)?,
    };
    RunManifest::new("train", cfg, cfg.train.seed)
        .with_input(&train_path)?
        .write(out)?;
    fs::write(out.join("config.txt"), cfg.render()).map_err(|e| Error::io(out, e))?;

    let metrics = out.join("metrics.csv");
    let head = truncate_metrics(&metrics, trainer.step())?;
    let mut file = fs::File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    file.write_all(head.as_bytes())
        .map_err(|e| Error::io(&metrics, e))?;
    let checkpoint = out.join("checkpoint.json");
    let mut records = Vec::new();
    while trainer.step() < cfg.train_steps {
        let r = trainer.train_step()?;
        if r.step % cfg.log_every == 0 || r.step == cfg.train_steps {
            writeln!(file, "{}", metrics_row(&r)).map_err(|e| Error::io(&metrics, e))?;
            log::info!(
                "step {} mse {:.4} nll {:.4} len {:.4} sigma_min {:.4}",
                r.step,
                r.loss.diffusion_mse,
                r.loss.reconstruction_nll,
                r.loss.length_nll,
                r.sigma_min
            );
        }
        if r.step % cfg.save_every == 0 {
            Checkpoint::from_trainer(cfg, &trainer).save(&checkpoint)?;
        }
        records.push(r);
    }
    file.flush().map_err(|e| Error::io(&metrics, e))?;
    Checkpoint::from_trainer(cfg, &trainer).save(&checkpoint)?;
    Ok(TrainOutput {
        trainer,
        records,
        metrics,
        checkpoint,
    })
}

/// Sources from a pairs file (`.jsonl`) or a token-lines file.
pub fn read_sources(path: &Path) -> Result<Vec<Vec<usize>>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        Ok(data::read_pairs(path)?.into_iter().map(|p| p.src).collect())
    } else {
        data::read_token_lines(path)
    }
}

/// References from a pairs file (`.jsonl`) or a token-lines file.
pub fn read_references(path: &Path) -> Result<Vec<Vec<usize>>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        Ok(data::read_pairs(path)?.into_iter().map(|p| p.tgt).collect())
    } else {
        data::read_token_lines(path)
    }
}

/// Decodes every source in `input` with the checkpointed model. Writes the
/// selected hypotheses to `output` and, if given, every candidate set as
/// JSON lines to `candidates`.
pub fn sample(
    checkpoint: &Path,
    input: &Path,
    sampler: &SamplerConfig,
    output: &Path,
    candidates: Option<&Path>,
) -> Result<Vec<CandidateSet>> {
    let ck = Checkpoint::load(checkpoint)?;
    let params = ck.denoiser()?;
    let table = ck.table();
    let sources = read_sources(input)?;
    let s = Sampler::new(&params, &table, ck.config.train.schedule, sampler.clone())?;
    let sets = s.decode(&sources, 64)?;
    let best: Vec<Vec<usize>> = sets.iter().map(|c| c.best().to_vec()).collect();
    data::write_token_lines(output, &best)?;
    if let Some(p) = candidates {
        let mut f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
        for c in &sets {
            let line = serde_json::to_string(c).expect("candidates serialise");
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
    }
    if let Some(dir) = output.parent() {
        let mut cfg = ck.config.clone();
        cfg.sampler = sampler.clone();
        RunManifest::new("sample", &cfg, sampler.seed)
            .with_input(checkpoint)?
            .with_input(input)?
            .write(if dir.as_os_str().is_empty() {
                Path::new(".")
            } else {
                dir
            })?;
    }
    Ok(sets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub sentences: usize,
    pub bleu: f64,
    /// Only for multilingual corpora, when the reference is a pairs file
    /// whose directory carries a corpus manifest.
    pub language_accuracy: Option<f64>,
}

pub fn evaluate(hypotheses: &Path, reference: &Path) -> Result<Evaluation> {
    let hyps = data::read_token_lines(hypotheses)?;
    let refs = read_references(reference)?;
    let bleu = corpus_bleu(&hyps, &refs)?;
    let mut language_accuracy = None;
    if reference.extension().is_some_and(|e| e == "jsonl") {
        let dir = reference.parent().unwrap_or(Path::new("."));
        if let Ok(m) = data::read_manifest(dir) {
            if m.spec.is_multilingual() {
                let sources = read_sources(reference)?;
                language_accuracy = Some(data::language_accuracy(&hyps, &sources, &m.spec)?);
            }
        }
    }
    Ok(Evaluation {
        sentences: hyps.len(),
        bleu,
        language_accuracy,
    })
}

fn write_plot(path: &Path, svg: &str) -> Result<()> {
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn meta(pairs: &[(&str, String)]) -> Vec<(String, String)> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

/// Nearest-neighbour recovery curves for every `(V, D)` on a shared σ grid.
/// Writes `nn_recovery.csv` and `nn_recovery.svg`.
pub fn analyze_nn_recovery(
    vocab_sizes: &[usize],
    dims: &[usize],
    points: usize,
    samples: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<(usize, usize, Vec<analysis::RecoveryPoint>)>> {
    create_dir(out)?;
    let mut grid = vec![0.0];
    grid.extend(analysis::open_unit_grid(points));
    grid.push(1.0);
    let mut rows = Vec::new();
    let mut series = Vec::new();
    let mut curves = Vec::new();
    for &v in vocab_sizes {
        for &d in dims {
            let curve = analysis::nn_recovery(v, d, &grid, samples, seed)?;
            for p in &curve {
                rows.push(vec![v as f64, d as f64, p.sigma, p.accuracy, p.std_err]);
            }
            series.push((
                format!("V={v} D={d}"),
                curve.iter().map(|p| (p.sigma, p.accuracy)).collect(),
            ));
            curves.push((v, d, curve));
        }
    }
    analysis::write_csv(
        &out.join("nn_recovery.csv"),
        &meta(&[("samples", samples.to_string()), ("seed", seed.to_string())]),
        &["vocab", "dim", "sigma", "accuracy", "std_err"],
        &rows,
    )?;
    write_plot(
        &out.join("nn_recovery.svg"),
        &analysis::line_plot_svg("Nearest-neighbour recovery", "sigma", "accuracy", &series),
    )?;
    Ok(curves)
}

fn load_model(checkpoint: &Path) -> Result<(Checkpoint, DenoiserParams, EmbeddingTable)> {
    let ck = Checkpoint::load(checkpoint)?;
    let params = ck.denoiser()?;
    let table = ck.table();
    Ok((ck, params, table))
}

fn eval_pairs(data_dir: &Path, split: &str, limit: usize) -> Result<Vec<SeqPair>> {
    let mut pairs = data::read_pairs(&CorpusPaths::new(data_dir).split(split))?;
    pairs.truncate(limit.max(1));
    Ok(pairs)
}

/// Diffusion loss against σ for a trained model; writes `loss_profile.csv`/`.svg`.
pub fn analyze_loss_profile(
    checkpoint: &Path,
    data_dir: &Path,
    points: usize,
    limit: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<analysis::ProfilePoint>> {
    create_dir(out)?;
    let (ck, params, table) = load_model(checkpoint)?;
    let pairs = eval_pairs(data_dir, "valid", limit)?;
    let grid = analysis::open_unit_grid(points);
    let prof = analysis::loss_vs_sigma_profile(
        &params,
        &table,
        &pairs,
        &grid,
        ck.config.train.schedule,
        seed,
    )?;
    let sigma_min = crate::embedding::sigma_min(&table)?;
    analysis::write_csv(
        &out.join("loss_profile.csv"),
        &meta(&[
            ("sigma_min", sigma_min.to_string()),
            ("seed", seed.to_string()),
        ]),
        &["sigma", "loss"],
        &prof
            .iter()
            .map(|p| vec![p.sigma, p.loss])
            .collect::<Vec<_>>(),
    )?;
    write_plot(
        &out.join("loss_profile.svg"),
        &analysis::line_plot_svg(
            "Diffusion loss by noise level",
            "sigma",
            "loss",
            &[(
                "loss".into(),
                prof.iter().map(|p| (p.sigma, p.loss)).collect(),
            )],
        ),
    )?;
    Ok(prof)
}

/// Condition-reliance probe under `τ = t` and a fixed `τ`; writes
/// `reliance_probe.csv`/`.svg` with both policies side by side.
pub fn analyze_reliance_probe(
    checkpoint: &Path,
    data_dir: &Path,
    t_grid: &[f64],
    tau: f64,
    limit: usize,
    seed: u64,
    out: &Path,
) -> Result<(Vec<analysis::ProbeRow>, Vec<analysis::ProbeRow>)> {
    create_dir(out)?;
    let (ck, params, table) = load_model(checkpoint)?;
    let pairs = eval_pairs(data_dir, "valid", limit)?;
    let triples = analysis::probe_triples(&pairs, seed);
    let schedule = ck.config.train.schedule;
    let current = analysis::condition_reliance_probe(
        &params,
        &table,
        &triples,
        t_grid,
        TauPolicy::Current,
        schedule,
        seed,
    )?;
    let fixed = analysis::condition_reliance_probe(
        &params,
        &table,
        &triples,
        t_grid,
        TauPolicy::Fixed(tau),
        schedule,
        seed,
    )?;
    let rows: Vec<Vec<f64>> = current
        .iter()
        .zip(&fixed)
        .map(|(c, f)| {
            vec![
                c.t,
                c.mse_to_truth,
                c.mse_to_negative,
                f.mse_to_truth,
                f.mse_to_negative,
            ]
        })
        .collect();
    analysis::write_csv(
        &out.join("reliance_probe.csv"),
        &meta(&[
            ("tau", tau.to_string()),
            ("triples", triples.len().to_string()),
            ("seed", seed.to_string()),
        ]),
        &[
            "t",
            "truth_tau_t",
            "negative_tau_t",
            "truth_tau_fixed",
            "negative_tau_fixed",
        ],
        &rows,
    )?;
    let series = vec![
        (
            "truth, tau=t".to_string(),
            current.iter().map(|r| (r.t, r.mse_to_truth)).collect(),
        ),
        (
            "negative, tau=t".to_string(),
            current.iter().map(|r| (r.t, r.mse_to_negative)).collect(),
        ),
        (
            format!("truth, tau={tau}"),
            fixed.iter().map(|r| (r.t, r.mse_to_truth)).collect(),
        ),
        (
            format!("negative, tau={tau}"),
            fixed.iter().map(|r| (r.t, r.mse_to_negative)).collect(),
        ),
    ];
    write_plot(
        &out.join("reliance_probe.svg"),
        &analysis::line_plot_svg(
            "Prediction distance to truth and negative",
            "t",
            "mse",
            &series,
        ),
    )?;
    Ok((current, fixed))
}

/// Uniform-time loss under `from` versus reweighted uniform-σ loss; writes
/// `schedule_equiv.csv`.
pub fn analyze_schedule_equiv(
    checkpoint: &Path,
    data_dir: &Path,
    from: NoiseSchedule,
    samples: usize,
    seed: u64,
    out: &Path,
) -> Result<analysis::EquivalenceResult> {
    create_dir(out)?;
    let (_, params, table) = load_model(checkpoint)?;
    let pairs = eval_pairs(data_dir, "valid", usize::MAX)?;
    let r = analysis::schedule_equivalence_check(&params, &table, &pairs, from, samples, seed)?;
    analysis::write_csv(
        &out.join("schedule_equiv.csv"),
        &meta(&[
            ("from", from.to_string()),
            ("samples", samples.to_string()),
            ("seed", seed.to_string()),
        ]),
        &["lhs", "rhs", "relative_gap", "lhs_std_err", "rhs_std_err"],
        &[vec![
            r.lhs,
            r.rhs,
            r.relative_gap,
            r.lhs_std_err,
            r.rhs_std_err,
        ]],
    )?;
    Ok(r)
}
