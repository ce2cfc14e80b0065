//! One source, several target languages chosen by a tag token.
//!
//! Trains on the one-to-many task and reports, per sampler, how often the
//! output is in the language the tag asked for.
//!
//!     cargo run --release --example multilingual [steps]

use seqdiff::bleu::corpus_bleu;
use seqdiff::config::{ModelConfig, RunConfig};
use seqdiff::data::{language_accuracy, TaskKind, TaskSpec};
use seqdiff::pipeline;
use seqdiff::sampler::{Sampler, SamplerConfig, SamplerMode};

fn main() -> seqdiff::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(800);
    let mut cfg = RunConfig::default();
    cfg.task = TaskSpec {
        kind: TaskKind::OneToMany,
        vocab_size: 32,
        min_len: 4,
        max_len: 10,
        n_train: 3000,
        n_valid: 10,
        n_test: 200,
        languages: 4,
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
    let sources: Vec<Vec<usize>> = corpus.test.iter().map(|p| p.src.clone()).collect();
    let refs: Vec<Vec<usize>> = corpus.test.iter().map(|p| p.tgt.clone()).collect();
    for mode in [SamplerMode::Ddim, SamplerMode::Cedi] {
        let sc = SamplerConfig {
            mode,
            length_beam: 3,
            ..Default::default()
        };
        let s = Sampler::new(&trainer.params, &trainer.table, cfg.train.schedule, sc)?;
        let hyps: Vec<Vec<usize>> = s
            .decode(&sources, 50)?
            .iter()
            .map(|c| c.best().to_vec())
            .collect();
        println!(
            "{mode}: language accuracy {:.1}%  BLEU {:.2}",
            100.0 * language_accuracy(&hyps, &sources, &cfg.task)?,
            corpus_bleu(&hyps, &refs)?
        );
    }
    Ok(())
}
