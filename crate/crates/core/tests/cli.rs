use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "
task = toy_translation
vocab_size = 12
min_len = 3
max_len = 6
n_train = 200
n_valid = 12
n_test = 6
embed_dim = 4
width = 16
layers = 1
heads = 2
ffn_width = 16
length_offset_k = 3
batch_tokens = 48
train_steps = 25
log_every = 5
save_every = 10
";

fn seqdiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqdiff"))
        .current_dir(dir)
        .env_remove("SEQDIFF_TRAIN_STEPS")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let last = text.lines().last().unwrap();
    serde_json::from_str(last).unwrap()
}

#[test]
fn end_to_end_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.cfg"), CONFIG).unwrap();
    ok(&seqdiff(
        d,
        &["gen-data", "--config", "c.cfg", "--out", "data"],
    ));
    assert!(d.join("data/run.json").exists());

    ok(&seqdiff(
        d,
        &[
            "train", "--config", "c.cfg", "--data", "data", "--out", "r1", "--seed", "1",
        ],
    ));
    ok(&seqdiff(
        d,
        &[
            "train", "--config", "c.cfg", "--data", "data", "--out", "r2", "--seed", "1",
        ],
    ));
    let m1 = std::fs::read(d.join("r1/metrics.csv")).unwrap();
    assert_eq!(m1, std::fs::read(d.join("r2/metrics.csv")).unwrap());
    assert!(String::from_utf8_lossy(&m1)
        .starts_with("step,diffusion_mse,reconstruction_nll,length_nll"));
    let run: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("r1/run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 1);
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(run["code_version"], env!("CARGO_PKG_VERSION"));

    let s = ok(&seqdiff(
        d,
        &[
            "sample",
            "--checkpoint",
            "r1/checkpoint.json",
            "--input",
            "data/test.jsonl",
            "--output",
            "hyp.txt",
            "--candidates",
            "cands.jsonl",
            "--mode",
            "cedi",
            "--steps",
            "20",
            "--length-beam",
            "5",
            "--mbr",
            "10",
        ],
    ));
    assert_eq!(s["sources"], 6);
    let cands = std::fs::read_to_string(d.join("cands.jsonl")).unwrap();
    for line in cands.lines() {
        let set: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(set["candidates"].as_array().unwrap().len(), 50);
        assert!(set["selected"].as_u64().unwrap() < 50);
    }

    let e = ok(&seqdiff(
        d,
        &[
            "evaluate",
            "--hypotheses",
            "hyp.txt",
            "--reference",
            "hyp.txt",
        ],
    ));
    assert_eq!(e["bleu"], 100.0);
    ok(&seqdiff(
        d,
        &[
            "evaluate",
            "--hypotheses",
            "hyp.txt",
            "--reference",
            "data/test.jsonl",
        ],
    ));

    for args in [
        vec![
            "analyze",
            "loss-profile",
            "--checkpoint",
            "r1/checkpoint.json",
            "--data",
            "data",
            "--points",
            "5",
            "--out",
            "an",
        ],
        vec![
            "analyze",
            "reliance-probe",
            "--checkpoint",
            "r1/checkpoint.json",
            "--data",
            "data",
            "--out",
            "an",
        ],
        vec![
            "analyze",
            "schedule-equiv",
            "--checkpoint",
            "r1/checkpoint.json",
            "--data",
            "data",
            "--samples",
            "200",
            "--out",
            "an",
        ],
        vec![
            "analyze",
            "nn-recovery",
            "--vocab",
            "20",
            "--dim",
            "4",
            "--points",
            "5",
            "--samples",
            "100",
            "--out",
            "an",
        ],
    ] {
        ok(&seqdiff(d, &args));
    }
    for f in [
        "loss_profile.csv",
        "reliance_probe.csv",
        "schedule_equiv.csv",
        "nn_recovery.csv",
        "nn_recovery.svg",
    ] {
        assert!(d.join("an").join(f).exists(), "{f}");
    }
}

#[test]
fn failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = seqdiff(d, &["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "usage");

    let out = seqdiff(d, &["gen-data", "--config", "missing.cfg", "--out", "x"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "missing_file");

    std::fs::write(d.join("bad.cfg"), "width = wide\n").unwrap();
    let out = seqdiff(d, &["gen-data", "--config", "bad.cfg", "--out", "x"]);
    assert_eq!(out.status.code(), Some(4));
    let err = error_line(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("line 1"));

    assert!(seqdiff(d, &["--help"]).status.success());
    let help = String::from_utf8(seqdiff(d, &["--help"]).stdout).unwrap();
    assert!(help.contains("SEQDIFF_"));
}
