//! Adaptive noise-scale clipping during training.
//!
//! Trains the same small model with and without clipping and prints how the
//! threshold `σ_min` follows the embedding geometry, then the loss profile of
//! each model across noise levels.
//!
//!     cargo run --release --example noise_clipping [steps]

use seqdiff::analysis::{loss_vs_sigma_profile, sigma_histogram};
use seqdiff::config::{ModelConfig, RunConfig};
use seqdiff::data::{TaskKind, TaskSpec};
use seqdiff::pipeline;

fn config(clip: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.task = TaskSpec {
        kind: TaskKind::ToyTranslation,
        vocab_size: 32,
        min_len: 4,
        max_len: 10,
        n_train: 2000,
        n_valid: 100,
        n_test: 100,
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
    cfg.train.noise_clipping = clip;
    cfg.train.batch_tokens = 256;
    cfg.train.optimizer.lr = 1e-3;
    cfg.train.optimizer.warmup_steps = 100;
    cfg
}

fn main() -> seqdiff::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(800);
    let grid: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
    for clip in [true, false] {
        let cfg = config(clip);
        let corpus = cfg.task.generate()?;
        let mut trainer = pipeline::new_trainer(&cfg, corpus.train)?;
        println!("noise clipping {}", if clip { "on" } else { "off" });
        for _ in 0..steps {
            let r = trainer.train_step()?;
            if r.step % (steps / 4).max(1) == 0 {
                println!(
                    "  step {:>5}  mse {:.4}  σ_min {:.3}  t_min {:.3}",
                    r.step, r.loss.diffusion_mse, r.sigma_min, r.t_min
                );
            }
        }
        let hist = sigma_histogram(cfg.train.schedule, trainer.t_min(), 10, 10_000, 0)?;
        println!("  training σ histogram over [0, 1] in tenths: {hist:?}");
        let prof = loss_vs_sigma_profile(
            &trainer.params,
            &trainer.table,
            &corpus.valid,
            &grid,
            cfg.train.schedule,
            0,
        )?;
        let line: Vec<String> = prof
            .iter()
            .map(|p| format!("{:.1}:{:.3}", p.sigma, p.loss))
            .collect();
        println!("  validation loss by σ: {}", line.join(" "));
    }
    Ok(())
}
