//! How much does the model listen to the source?
//!
//! Noises a *wrong* target `y′`, asks the model for `ẑ0` given the true
//! source, and measures the distance to both `y` and `y′`, once telling the
//! model the real timestep and once a near-pure-noise timestep `τ = 0.995`.
//!
//!     cargo run --release --example reliance_probe [steps]

use seqdiff::analysis::{condition_reliance_probe, probe_triples, TauPolicy};
use seqdiff::config::{ModelConfig, RunConfig};
use seqdiff::data::{TaskKind, TaskSpec};
use seqdiff::pipeline;

fn main() -> seqdiff::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1000);
    let mut cfg = RunConfig::default();
    cfg.task = TaskSpec {
        kind: TaskKind::ToyTranslation,
        vocab_size: 48,
        min_len: 5,
        max_len: 12,
        n_train: 3000,
        n_valid: 200,
        n_test: 10,
        ..Default::default()
    };
    cfg.model = ModelConfig {
        embed_dim: 16,
        width: 48,
        layers: 2,
        heads: 4,
        ffn_width: 96,
        length_offset_k: 6,
    };
    cfg.train.batch_tokens = 256;
    cfg.train.optimizer.lr = 1e-3;
    cfg.train.optimizer.warmup_steps = 100;
    let corpus = cfg.task.generate()?;
    let mut trainer = pipeline::new_trainer(&cfg, corpus.train)?;
    for _ in 0..steps {
        trainer.train_step()?;
    }

    let triples = probe_triples(&corpus.valid, 0);
    let grid: Vec<f64> = (3..=9).map(|i| i as f64 / 10.0).collect();
    let probe = |p| {
        condition_reliance_probe(
            &trainer.params,
            &trainer.table,
            &triples,
            &grid,
            p,
            cfg.train.schedule,
            0,
        )
    };
    let cur = probe(TauPolicy::Current)?;
    let fixed = probe(TauPolicy::Fixed(0.995))?;
    println!("{} triples", triples.len());
    println!(
        "{:>5} {:>14} {:>14} {:>14} {:>14}",
        "t", "truth τ=t", "neg τ=t", "truth τ=.995", "neg τ=.995"
    );
    for (c, f) in cur.iter().zip(&fixed) {
        println!(
            "{:>5.1} {:>14.4} {:>14.4} {:>14.4} {:>14.4}",
            c.t, c.mse_to_truth, c.mse_to_negative, f.mse_to_truth, f.mse_to_negative
        );
    }
    Ok(())
}
