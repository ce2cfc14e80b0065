//! Length beam plus minimum-Bayes-risk selection.
//!
//! Decodes a few sources with 3 candidate lengths and 4 samples each, prints
//! every candidate with its mean utility against the others, and marks the
//! one MBR keeps.
//!
//!     cargo run --release --example mbr_decoding [steps]

use seqdiff::config::{ModelConfig, RunConfig};
use seqdiff::data::{TaskKind, TaskSpec};
use seqdiff::pipeline;
use seqdiff::sampler::{Sampler, SamplerConfig};

fn main() -> seqdiff::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(600);
    let mut cfg = RunConfig::default();
    cfg.task = TaskSpec {
        kind: TaskKind::Reverse,
        vocab_size: 24,
        min_len: 4,
        max_len: 9,
        n_train: 2000,
        n_valid: 10,
        n_test: 3,
        ..Default::default()
    };
    cfg.model = ModelConfig {
        embed_dim: 8,
        width: 48,
        layers: 2,
        heads: 4,
        ffn_width: 96,
        length_offset_k: 4,
    };
    cfg.train.batch_tokens = 256;
    cfg.train.optimizer.lr = 1e-3;
    cfg.train.optimizer.warmup_steps = 100;
    let corpus = cfg.task.generate()?;
    let mut trainer = pipeline::new_trainer(&cfg, corpus.train)?;
    for _ in 0..steps {
        trainer.train_step()?;
    }

    let sc = SamplerConfig {
        length_beam: 3,
        mbr_samples: 4,
        ..Default::default()
    };
    let sampler = Sampler::new(&trainer.params, &trainer.table, cfg.train.schedule, sc)?;
    let sources: Vec<Vec<usize>> = corpus.test.iter().map(|p| p.src.clone()).collect();
    for (pair, set) in corpus.test.iter().zip(sampler.decode(&sources, 8)?) {
        println!("source    {:?}\nreference {:?}", pair.src, pair.tgt);
        let n = set.candidates.len();
        for (i, c) in set.candidates.iter().enumerate() {
            let mean = set.utility[i].iter().sum::<f64>() / (n - 1) as f64;
            let mark = if i == set.selected { "*" } else { " " };
            println!(
                "  {mark} len {:>2} sample {} utility {:6.2}  {:?}",
                c.length, c.sample, mean, c.tokens
            );
        }
        println!();
    }
    Ok(())
}
