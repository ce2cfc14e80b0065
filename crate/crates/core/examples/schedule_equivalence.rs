//! Training under a schedule with uniform timesteps is the same as training
//! on uniform noise levels with a per-sample weight `dt/dσ`.
//!
//! Evaluates both expectations with a frozen model and prints the gap.
//!
//!     cargo run --release --example schedule_equivalence [samples]

use seqdiff::analysis::schedule_equivalence_check;
use seqdiff::config::{ModelConfig, RunConfig};
use seqdiff::data::{TaskKind, TaskSpec};
use seqdiff::{pipeline, NoiseSchedule};

fn main() -> seqdiff::Result<()> {
    let samples: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20_000);
    let mut cfg = RunConfig::default();
    cfg.task = TaskSpec {
        kind: TaskKind::Reverse,
        vocab_size: 24,
        min_len: 3,
        max_len: 8,
        n_train: 500,
        n_valid: 100,
        n_test: 10,
        ..Default::default()
    };
    cfg.model = ModelConfig {
        embed_dim: 8,
        width: 32,
        layers: 1,
        heads: 2,
        ffn_width: 64,
        length_offset_k: 4,
    };
    cfg.train.batch_tokens = 128;
    let corpus = cfg.task.generate()?;
    let mut trainer = pipeline::new_trainer(&cfg, corpus.train)?;
    for _ in 0..100 {
        trainer.train_step()?;
    }
    for from in [NoiseSchedule::Linear, NoiseSchedule::Sqrt] {
        let r = schedule_equivalence_check(
            &trainer.params,
            &trainer.table,
            &corpus.valid,
            from,
            samples,
            0,
        )?;
        println!(
            "{from:>6}: uniform t {:.4} ± {:.4}   weighted uniform σ {:.4} ± {:.4}   gap {:.2}%",
            r.lhs,
            r.lhs_std_err,
            r.rhs,
            r.rhs_std_err,
            100.0 * r.relative_gap
        );
    }
    Ok(())
}
