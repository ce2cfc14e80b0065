//! Acceptance suite. Each test prints one `ACCEPTANCE <n> PASS|FAIL` line
//! and then asserts on the same condition.
//!
//! Criteria 8–11 share trained models through process-wide caches, so run
//! with `--nocapture` to see the lines in order:
//! `cargo test --release -p seqdiff --test acceptance -- --nocapture`.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use seqdiff::analysis::{self, ProbeRow, TauPolicy};
use seqdiff::bleu::corpus_bleu;
use seqdiff::config::{ModelConfig, RunConfig};
use seqdiff::data::{self, SeqPair, TaskKind, TaskSpec};
use seqdiff::diffusion::{batch_loss, DiffusionBatch};
use seqdiff::embedding::{self, PAD};
use seqdiff::pipeline;
use seqdiff::sampler::{SampleRequest, Sampler, SamplerConfig, SamplerMode, TauTerminal};
use seqdiff::{
    DenoiserConfig, DenoiserParams, EmbeddingTable, Matrix, NoiseSchedule, OracleDenoiser,
};

fn report(id: u32, name: &str, pass: bool, detail: &str, started: Instant) {
    println!(
        "ACCEPTANCE {id:>2} {} {name}: {detail} ({:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 1. schedule algebra

#[test]
fn criterion_01_schedule_algebra() {
    let t0 = Instant::now();
    let mut worst_id = 0.0f64;
    let mut worst_inv = 0.0f64;
    for s in [NoiseSchedule::Linear, NoiseSchedule::Sqrt] {
        for i in 0..=10_000 {
            let t = i as f64 / 10_000.0;
            let a = s.alpha(t).unwrap();
            let g = s.sigma(t).unwrap();
            worst_id = worst_id.max((a * a + g * g - 1.0).abs());
            worst_inv = worst_inv.max((s.sigma_inverse(g).unwrap() - t).abs());
        }
    }
    let pass = worst_id <= 1e-12 && worst_inv <= 1e-10 && t0.elapsed().as_secs_f64() < 1.0;
    report(
        1,
        "schedule algebra",
        pass,
        &format!("max |a²+s²-1| = {worst_id:.1e}, max inverse error = {worst_inv:.1e}"),
        t0,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 2. clipping threshold against a brute-force oracle

fn brute_force_sigma_min(m: &Matrix) -> f64 {
    let rows: Vec<usize> = (0..m.rows()).filter(|&i| i != PAD).collect();
    let mut total = 0.0;
    for &i in &rows {
        let mut best = f64::INFINITY;
        for &j in &rows {
            if i != j {
                let d: f64 = (0..m.cols())
                    .map(|k| (m.get(i, k) - m.get(j, k)).powi(2))
                    .sum();
                best = best.min(d);
            }
        }
        total += best;
    }
    let delta_sq = total / (rows.len() * m.cols()) as f64;
    1.0 / (1.0 / delta_sq + 1.0).sqrt()
}

#[test]
fn criterion_02_clipping_threshold_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let v = rng.random_range(3..=256);
        let d = rng.random_range(1..=64);
        let scale = rng.random_range(0.05..3.0);
        let table = EmbeddingTable::gaussian(v, d, scale, &mut rng);
        let got = embedding::sigma_min(&table).unwrap();
        let want = brute_force_sigma_min(table.matrix());
        worst = worst.max((got - want).abs() / want);
    }
    let h4 = embedding::sigma_min_from_delta_sq(4.0);
    let h2 = embedding::sigma_min_from_delta_sq(2.0);
    let pass = worst < 1e-9
        && (h4 - 0.8944).abs() < 1e-4
        && (h2 - 0.8165).abs() < 1e-4
        && t0.elapsed().as_secs_f64() < 10.0;
    report(
        2,
        "clipping threshold oracle",
        pass,
        &format!("max relative error {worst:.1e} over 50 tables; δ²=4 → {h4:.4}, δ²=2 → {h2:.4}"),
        t0,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 3. oracle sampler round trip

#[test]
fn criterion_03_oracle_round_trip() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table = EmbeddingTable::random(40, 16, &mut rng);
    let mut total = 0;
    let mut exact = 0;
    for steps in [1, 5, 20] {
        for mode in [SamplerMode::Ddim, SamplerMode::Cedi] {
            for _ in 0..1000 {
                let len = rng.random_range(1..=12);
                let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(4..40)).collect();
                let oracle = OracleDenoiser::new(table.embed(&tokens).unwrap());
                let cfg = SamplerConfig {
                    steps,
                    mode,
                    seed: rng.random(),
                    ..Default::default()
                };
                let s = Sampler::new(&oracle, &table, NoiseSchedule::Sqrt, cfg).unwrap();
                let out = s.sample(&[5, 6], len).unwrap();
                total += 1;
                exact += usize::from(out == tokens);
            }
        }
    }
    let pass = exact == total && t0.elapsed().as_secs_f64() < 30.0;
    report(
        3,
        "oracle sampler round trip",
        pass,
        &format!("{exact}/{total} exact"),
        t0,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 4. CeDi with a terminal model timestep equal to the trajectory's is DDIM

fn small_model(seed: u64) -> (DenoiserParams, EmbeddingTable) {
    let cfg = DenoiserConfig {
        vocab_size: 24,
        embed_dim: 8,
        width: 16,
        layers: 1,
        heads: 2,
        ffn_width: 32,
        length_offset_k: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = DenoiserParams::new(cfg, &mut rng).unwrap();
    let t = EmbeddingTable::random(24, 8, &mut rng);
    (p, t)
}

#[test]
fn criterion_04_cedi_reduces_to_ddim() {
    let t0 = Instant::now();
    let (params, table) = small_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut equal = 0;
    for run in 0..100u64 {
        let src: Vec<usize> = (0..rng.random_range(2..8))
            .map(|_| rng.random_range(4..24))
            .collect();
        let req = vec![SampleRequest {
            source: src,
            length: rng.random_range(1..8),
            seed: run,
        }];
        let base = SamplerConfig {
            steps: 10,
            seed: run,
            ..Default::default()
        };
        let ddim = SamplerConfig {
            mode: SamplerMode::Ddim,
            ..base.clone()
        };
        let cedi = SamplerConfig {
            mode: SamplerMode::Cedi,
            tau_terminal: TauTerminal::Time(base.t_terminal),
            ..base
        };
        let a = Sampler::new(&params, &table, NoiseSchedule::Sqrt, ddim)
            .unwrap()
            .sample_continuous(&req)
            .unwrap();
        let b = Sampler::new(&params, &table, NoiseSchedule::Sqrt, cedi)
            .unwrap()
            .sample_continuous(&req)
            .unwrap();
        let same = a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        equal += usize::from(same);
    }
    let pass = equal == 100 && t0.elapsed().as_secs_f64() < 10.0;
    report(
        4,
        "CeDi reduction to DDIM",
        pass,
        &format!("{equal}/100 bitwise equal"),
        t0,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 5. nearest-neighbour recovery curves

#[test]
fn criterion_05_nn_recovery() {
    let t0 = Instant::now();
    let n = 10_000;
    let mut grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    grid[14] = 0.7;
    let mut problems = Vec::new();
    let mut summary = Vec::new();
    for v in [100, 1000] {
        let mut at_07 = Vec::new();
        for d in [16, 64, 128] {
            let c = analysis::nn_recovery(v, d, &grid, n, 5).unwrap();
            if c[0].accuracy != 1.0 {
                problems.push(format!("V={v} D={d}: accuracy at σ=0 is {}", c[0].accuracy));
            }
            for w in c.windows(2) {
                if w[1].accuracy > w[0].accuracy + 0.02 {
                    problems.push(format!("V={v} D={d}: rises at σ={}", w[1].sigma));
                }
            }
            at_07.push(c[14].accuracy);
        }
        summary.push(format!(
            "V={v} accuracy at σ=0.7 for D=16/64/128: {at_07:?}"
        ));
        if !(at_07[0] < at_07[1] && at_07[1] < at_07[2]) {
            problems.push(format!(
                "V={v}: accuracy at σ=0.7 not increasing in D: {at_07:?}"
            ));
        }
    }
    // two rows at ±e₁: recovery fails only when the noise along e₁ crosses the midpoint
    let mut two = Matrix::zeros(2, 4);
    two.set(0, 0, 1.0);
    two.set(1, 0, -1.0);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let sig = [0.1, 0.3, 0.5, 0.7, 0.9, 0.99];
    let mut worst_z = 0.0f64;
    for p in analysis::nn_recovery_on(&two, &sig, n, 7).unwrap() {
        let expect = std_normal.cdf((1.0 - p.sigma * p.sigma).sqrt() / p.sigma);
        let se = (expect * (1.0 - expect) / n as f64)
            .sqrt()
            .max(1.0 / n as f64);
        let z = (p.accuracy - expect).abs() / se;
        worst_z = worst_z.max(z);
        if z > 3.0 {
            problems.push(format!("V=2 σ={}: {} vs Φ {}", p.sigma, p.accuracy, expect));
        }
    }
    let pass = problems.is_empty() && t0.elapsed().as_secs_f64() < 120.0;
    let detail = format!(
        "{}; V=2 worst |z| = {worst_z:.2}; problems: {}",
        summary.join("; "),
        if problems.is_empty() {
            "none".to_string()
        } else {
            problems.join("; ")
        }
    );
    report(5, "nearest-neighbour recovery", pass, &detail, t0);
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 6. uniform-time sqrt-schedule loss equals reweighted uniform-σ loss

#[test]
fn criterion_06_schedule_equivalence() {
    let t0 = Instant::now();
    let mut cfg = desk_config(TaskKind::ToyTranslation, true, 6);
    cfg.model = ModelConfig {
        embed_dim: 16,
        width: 32,
        layers: 1,
        heads: 2,
        ffn_width: 64,
        length_offset_k: 8,
    };
    let corpus = cfg.task.generate().unwrap();
    let mut trainer = pipeline::new_trainer(&cfg, corpus.train).unwrap();
    for _ in 0..200 {
        trainer.train_step().unwrap();
    }
    let r = analysis::schedule_equivalence_check(
        &trainer.params,
        &trainer.table,
        &corpus.valid,
        NoiseSchedule::Sqrt,
        100_000,
        6,
    )
    .unwrap();
    let pass = r.relative_gap < 0.02 && t0.elapsed().as_secs_f64() < 60.0;
    report(
        6,
        "schedule equivalence",
        pass,
        &format!(
            "uniform-t {:.4} ± {:.4}, reweighted uniform-σ {:.4} ± {:.4}, gap {:.2}%",
            r.lhs,
            r.lhs_std_err,
            r.rhs,
            r.rhs_std_err,
            100.0 * r.relative_gap
        ),
        t0,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 7. gradients of the total loss against central differences

#[test]
fn criterion_07_gradient_check() {
    let t0 = Instant::now();
    let cfg = DenoiserConfig {
        vocab_size: 9,
        embed_dim: 3,
        width: 8,
        layers: 1,
        heads: 2,
        ffn_width: 8,
        length_offset_k: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = DenoiserParams::new(cfg, &mut rng).unwrap();
    let mut table = EmbeddingTable::random(9, 3, &mut rng);
    let batch = DiffusionBatch {
        sources: vec![vec![4, 5, 6]],
        targets: vec![vec![7, 8, 4]],
        lengths: vec![3],
        t: vec![0.6],
        epsilon: Matrix::from_fn(3, 3, |_, _| rng.sample(StandardNormal)),
    };
    let self_cond = Matrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.5);
    let schedule = NoiseSchedule::Sqrt;
    let (_, grads) = batch_loss(
        &params,
        &table,
        schedule,
        &batch,
        Some(&self_cond),
        0.1,
        true,
    )
    .unwrap();
    let grads = grads.unwrap();
    let h = 1e-5;
    let mut diff_sq = 0.0;
    let mut ref_sq = 0.0;
    let mut checked = 0;
    let n_tensors = params.num_tensors();
    for k in 0..=n_tensors {
        let len = if k < n_tensors {
            params.values()[k].data().len()
        } else {
            table.matrix().data().len()
        };
        for i in 0..len {
            let eval = |delta: f64, params: &mut DenoiserParams, table: &mut EmbeddingTable| {
                let slot = if k < n_tensors {
                    &mut params.values_mut()[k].data_mut()[i]
                } else {
                    &mut table.matrix_mut().data_mut()[i]
                };
                let orig = *slot;
                *slot = orig + delta;
                let (l, _) = batch_loss(
                    params,
                    table,
                    schedule,
                    &batch,
                    Some(&self_cond),
                    0.1,
                    false,
                )
                .unwrap();
                let slot = if k < n_tensors {
                    &mut params.values_mut()[k].data_mut()[i]
                } else {
                    &mut table.matrix_mut().data_mut()[i]
                };
                *slot = orig;
                l.total
            };
            let fd =
                (eval(h, &mut params, &mut table) - eval(-h, &mut params, &mut table)) / (2.0 * h);
            let g = grads[k].data()[i];
            diff_sq += (g - fd).powi(2);
            ref_sq += fd.powi(2);
            checked += 1;
        }
    }
    let rel = (diff_sq / ref_sq).sqrt();
    let pass = rel < 1e-4 && t0.elapsed().as_secs_f64() < 60.0;
    report(
        7,
        "gradient check",
        pass,
        &format!("relative error {rel:.2e} over {checked} scalars"),
        t0,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// shared desk-scale training for criteria 8–11

const SEEDS: [u64; 3] = [1, 2, 3];
const TRAIN_STEPS: u64 = 2000;

fn desk_config(kind: TaskKind, clip: bool, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.task = TaskSpec {
        kind,
        vocab_size: 64,
        min_len: 5,
        max_len: 16,
        n_train: 4000,
        n_valid: 200,
        n_test: 200,
        languages: 4,
        seed: 1,
    };
    cfg.model = ModelConfig {
        embed_dim: 16,
        width: 64,
        layers: 2,
        heads: 4,
        ffn_width: 128,
        length_offset_k: 8,
    };
    cfg.train.noise_clipping = clip;
    cfg.train.batch_tokens = 256;
    cfg.train.optimizer.lr = 1e-3;
    cfg.train.optimizer.warmup_steps = 100;
    cfg.train.seed = seed;
    cfg.train_steps = TRAIN_STEPS;
    cfg.save_every = 500;
    cfg.log_every = 10;
    cfg.sampler = SamplerConfig {
        steps: 20,
        length_beam: 5,
        mbr_samples: 1,
        seed: 0,
        ..Default::default()
    };
    cfg
}

struct Trained {
    params: DenoiserParams,
    table: EmbeddingTable,
}

struct PipelineRun {
    metrics: Vec<u8>,
    data_checksums: Vec<(String, String)>,
    model: Trained,
}

fn pipeline_run(tag: &str) -> PipelineRun {
    let cfg = desk_config(TaskKind::ToyTranslation, true, SEEDS[0]);
    let root: PathBuf =
        std::env::temp_dir().join(format!("seqdiff-acceptance-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    let data_dir = root.join("data");
    let manifest = pipeline::gen_data(&cfg, &data_dir).unwrap();
    let out = pipeline::train(&cfg, &data_dir, &root.join("run"), None).unwrap();
    let metrics = std::fs::read(&out.metrics).unwrap();
    let (params, table) = out.trainer.into_parts();
    let _ = std::fs::remove_dir_all(&root);
    PipelineRun {
        metrics,
        data_checksums: manifest.checksums,
        model: Trained { params, table },
    }
}

fn pipeline_runs() -> &'static (PipelineRun, PipelineRun) {
    static RUNS: OnceLock<(PipelineRun, PipelineRun)> = OnceLock::new();
    RUNS.get_or_init(|| (pipeline_run("a"), pipeline_run("b")))
}

fn train_in_memory(kind: TaskKind, clip: bool, seed: u64) -> Trained {
    let cfg = desk_config(kind, clip, seed);
    let corpus = cfg.task.generate().unwrap();
    let mut trainer = pipeline::new_trainer(&cfg, corpus.train).unwrap();
    while trainer.step() < cfg.train_steps {
        trainer.train_step().unwrap();
    }
    let (params, table) = trainer.into_parts();
    Trained { params, table }
}

/// Toy-translation models indexed `[clipped, unclipped][seed]`. The clipped
/// first-seed model is the one produced by the pipeline run.
fn toy_models() -> &'static Vec<Vec<&'static Trained>> {
    static MODELS: OnceLock<Vec<Vec<&'static Trained>>> = OnceLock::new();
    MODELS.get_or_init(|| {
        let mut out = Vec::new();
        for clip in [true, false] {
            let mut row: Vec<&'static Trained> = Vec::new();
            for &seed in &SEEDS {
                if clip && seed == SEEDS[0] {
                    row.push(&pipeline_runs().0.model);
                } else {
                    row.push(Box::leak(Box::new(train_in_memory(
                        TaskKind::ToyTranslation,
                        clip,
                        seed,
                    ))));
                }
            }
            out.push(row);
        }
        out
    })
}

fn decode(
    model: &Trained,
    mode: SamplerMode,
    sources: &[Vec<usize>],
    cfg: &RunConfig,
) -> Vec<Vec<usize>> {
    let sc = SamplerConfig {
        mode,
        ..cfg.sampler.clone()
    };
    let s = Sampler::new(&model.params, &model.table, cfg.train.schedule, sc).unwrap();
    s.decode(sources, 50)
        .unwrap()
        .iter()
        .map(|c| c.best().to_vec())
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn split(pairs: &[SeqPair]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    (
        pairs.iter().map(|p| p.src.clone()).collect(),
        pairs.iter().map(|p| p.tgt.clone()).collect(),
    )
}

// ---------------------------------------------------------------------------
// 8. ablation ordering of clipping × sampler

#[test]
fn criterion_08_clipping_sampler_ordering() {
    let t0 = Instant::now();
    let cfg = desk_config(TaskKind::ToyTranslation, true, 0);
    let corpus = cfg.task.generate().unwrap();
    let (sources, refs) = split(&corpus.test);
    let models = toy_models();
    // cells[clip][mode] = median BLEU over seeds
    let mut cells = [[0.0; 2]; 2];
    let mut all = Vec::new();
    for (ci, row) in models.iter().enumerate() {
        for (mi, mode) in [SamplerMode::Ddim, SamplerMode::Cedi]
            .into_iter()
            .enumerate()
        {
            let scores: Vec<f64> = row
                .iter()
                .map(|m| corpus_bleu(&decode(m, mode, &sources, &cfg), &refs).unwrap())
                .collect();
            all.push(format!(
                "{}+{mode} {:?}",
                if ci == 0 { "clip" } else { "noclip" },
                scores
                    .iter()
                    .map(|s| (s * 100.0).round() / 100.0)
                    .collect::<Vec<_>>()
            ));
            cells[ci][mi] = median(scores);
        }
    }
    let [[clip_ddim, clip_cedi], [noclip_ddim, noclip_cedi]] = cells;
    let a = clip_cedi >= clip_ddim;
    let b = noclip_ddim < clip_ddim && noclip_ddim < clip_cedi && noclip_ddim < noclip_cedi;
    let c = (noclip_cedi - noclip_ddim) > (clip_cedi - clip_ddim);
    let pass = a && b && c;
    report(
        8,
        "clipping x sampler ordering",
        pass,
        &format!(
            "median BLEU clip: DDIM {clip_ddim:.2} CeDi {clip_cedi:.2}; noclip: DDIM {noclip_ddim:.2} CeDi {noclip_cedi:.2}; \
             (a) {a} (b) {b} (c) {c}; per seed: {}",
            all.join(", ")
        ),
        t0,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 9. language accuracy on one-to-many

#[test]
fn criterion_09_one_to_many_language_accuracy() {
    let t0 = Instant::now();
    let cfg = desk_config(TaskKind::OneToMany, true, 0);
    let corpus = cfg.task.generate().unwrap();
    let (sources, _) = split(&corpus.test);
    let mut ddim = Vec::new();
    let mut cedi = Vec::new();
    for &seed in &SEEDS {
        let m = train_in_memory(TaskKind::OneToMany, true, seed);
        for (mode, acc) in [
            (SamplerMode::Ddim, &mut ddim),
            (SamplerMode::Cedi, &mut cedi),
        ] {
            let hyps = decode(&m, mode, &sources, &cfg);
            acc.push(data::language_accuracy(&hyps, &sources, &cfg.task).unwrap());
        }
    }
    let (md, mc) = (median(ddim.clone()), median(cedi.clone()));
    let pass = mc - md >= 0.10;
    report(
        9,
        "one-to-many language accuracy",
        pass,
        &format!(
            "median accuracy DDIM {:.1}% CeDi {:.1}% (gap {:.1} points); per seed DDIM {ddim:?} CeDi {cedi:?}",
            100.0 * md,
            100.0 * mc,
            100.0 * (mc - md)
        ),
        t0,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 10. condition-reliance probe

#[test]
fn criterion_10_condition_reliance_probe() {
    let model = toy_models()[0][0];
    let t0 = Instant::now();
    let cfg = desk_config(TaskKind::ToyTranslation, true, 0);
    let corpus = cfg.task.generate().unwrap();
    let triples = analysis::probe_triples(&corpus.valid, 10);
    let grid: Vec<f64> = (0..=6).map(|i| 0.3 + 0.1 * i as f64).collect();
    let run = |policy| {
        analysis::condition_reliance_probe(
            &model.params,
            &model.table,
            &triples,
            &grid,
            policy,
            cfg.train.schedule,
            10,
        )
        .unwrap()
    };
    let cur = run(TauPolicy::Current);
    let fixed = run(TauPolicy::Fixed(0.995));
    let mean = |rows: &[ProbeRow], f: fn(&ProbeRow) -> f64| {
        rows.iter().map(f).sum::<f64>() / rows.len() as f64
    };
    let (ct, cn) = (
        mean(&cur, |r| r.mse_to_truth),
        mean(&cur, |r| r.mse_to_negative),
    );
    let (ft, fneg) = (
        mean(&fixed, |r| r.mse_to_truth),
        mean(&fixed, |r| r.mse_to_negative),
    );
    let truth_ok = ft < ct;
    let neg_ok = fneg > cn;
    let pass = truth_ok && neg_ok && t0.elapsed().as_secs_f64() < 300.0;
    report(
        10,
        "condition-reliance probe",
        pass,
        &format!(
            "{} triples; τ=t: truth {ct:.4} negative {cn:.4}; τ=0.995: truth {ft:.4} negative {fneg:.4}; \
             lower truth {truth_ok}, higher negative {neg_ok}",
            triples.len()
        ),
        t0,
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 11. end-to-end reproducibility

#[test]
fn criterion_11_pipeline_reproducibility() {
    use sha2::{Digest, Sha256};
    let t0 = Instant::now();
    let (a, b) = pipeline_runs();
    let ha = hex::encode(Sha256::digest(&a.metrics));
    let hb = hex::encode(Sha256::digest(&b.metrics));
    let lines = a.metrics.iter().filter(|&&c| c == b'\n').count();
    let pass =
        ha == hb && a.data_checksums == b.data_checksums && lines as u64 == TRAIN_STEPS / 10 + 1;
    report(
        11,
        "pipeline reproducibility",
        pass,
        &format!(
            "metrics sha256 {} vs {} over {lines} lines; corpus checksums equal {}",
            &ha[..16],
            &hb[..16],
            a.data_checksums == b.data_checksums
        ),
        t0,
    );
    assert!(pass);
}
