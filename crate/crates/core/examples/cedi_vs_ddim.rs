//! DDIM against condition-enhanced sampling on a toy translation task.
//!
//! CeDi steps the trajectory on the usual grid but tells the model the noise
//! is much larger, which makes it lean on the source sentence.
//!
//!     cargo run --release --example cedi_vs_ddim [steps]

use seqdiff::bleu::corpus_bleu;
use seqdiff::config::{ModelConfig, RunConfig};
use seqdiff::data::{TaskKind, TaskSpec};
use seqdiff::pipeline;
use seqdiff::sampler::{Sampler, SamplerConfig, SamplerMode, TauTerminal};

fn main() -> seqdiff::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1500);
    let mut cfg = RunConfig::default();
    cfg.task = TaskSpec {
        kind: TaskKind::ToyTranslation,
        vocab_size: 64,
        min_len: 5,
        max_len: 16,
        n_train: 4000,
        n_valid: 100,
        n_test: 100,
        ..Default::default()
    };
    cfg.model = ModelConfig {
        embed_dim: 16,
        width: 64,
        layers: 2,
        heads: 4,
        ffn_width: 128,
        length_offset_k: 8,
    };
    cfg.train.batch_tokens = 256;
    cfg.train.optimizer.lr = 1e-3;
    cfg.train.optimizer.warmup_steps = 100;

    let corpus = cfg.task.generate()?;
    let mut trainer = pipeline::new_trainer(&cfg, corpus.train)?;
    for _ in 0..steps {
        trainer.train_step()?;
    }
    let sources: Vec<Vec<usize>> = corpus.test.iter().map(|p| p.src.clone()).collect();
    let refs: Vec<Vec<usize>> = corpus.test.iter().map(|p| p.tgt.clone()).collect();

    let runs = [
        ("DDIM", SamplerMode::Ddim, 0.99),
        ("CeDi σ(τ_M)=0.9", SamplerMode::Cedi, 0.9),
        ("CeDi σ(τ_M)=0.99", SamplerMode::Cedi, 0.99),
    ];
    for (name, mode, tau) in runs {
        let sc = SamplerConfig {
            mode,
            tau_terminal: TauTerminal::Sigma(tau),
            length_beam: 5,
            ..Default::default()
        };
        let s = Sampler::new(&trainer.params, &trainer.table, cfg.train.schedule, sc)?;
        let hyps: Vec<Vec<usize>> = s
            .decode(&sources, 50)?
            .iter()
            .map(|c| c.best().to_vec())
            .collect();
        println!("{name:<18} BLEU {:6.2}", corpus_bleu(&hyps, &refs)?);
    }
    Ok(())
}
