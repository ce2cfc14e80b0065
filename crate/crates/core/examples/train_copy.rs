//! The file-based pipeline on the copy task: generate a corpus, train with
//! checkpoints, resume, decode the test split and score it.
//!
//!     cargo run --release --example train_copy [out_dir]

use std::path::PathBuf;

use seqdiff::config::RunConfig;
use seqdiff::data::CorpusPaths;
use seqdiff::pipeline;

const CONFIG: &str = "
task = copy
vocab_size = 20
min_len = 3
max_len = 8
n_train = 1000
n_valid = 50
n_test = 50
embed_dim = 8
width = 32
layers = 1
heads = 2
ffn_width = 64
length_offset_k = 4
batch_tokens = 128
lr = 0.002
warmup_steps = 50
save_every = 100
log_every = 50
length_beam = 3
";

fn main() -> seqdiff::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("seqdiff-train-copy"));
    let mut cfg = RunConfig::parse_str(CONFIG)?;
    cfg.validate()?;
    let data = out.join("data");
    let manifest = pipeline::gen_data(&cfg, &data)?;
    println!(
        "corpus in {} (vocabulary {})",
        data.display(),
        manifest.vocab_size
    );

    // train half way, then resume from the checkpoint to the end
    cfg.train_steps = 300;
    let first = pipeline::train(&cfg, &data, &out.join("run"), None)?;
    println!("stopped at step {}", first.trainer.step());
    cfg.train_steps = 600;
    let done = pipeline::train(&cfg, &data, &out.join("run"), Some(&first.checkpoint))?;
    let last = done.records.last().expect("trained at least one step");
    println!(
        "resumed to step {}: total loss {:.4}",
        last.step, last.loss.total
    );

    let test = CorpusPaths::new(&data).split("test");
    let hyp = out.join("hyp.txt");
    pipeline::sample(&done.checkpoint, &test, &cfg.sampler, &hyp, None)?;
    let eval = pipeline::evaluate(&hyp, &test)?;
    println!(
        "test BLEU {:.2} over {} sentences; outputs in {}",
        eval.bleu,
        eval.sentences,
        out.display()
    );
    Ok(())
}
