use std::path::Path;
use std::process::{Command, Output};

use memt5::config::RunConfig;
use memt5::data::synthetic::synthetic_corpus;

fn memt5(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memt5"))
        .args(args)
        .env("MEMT5_DETERMINISTIC", "1")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn preset(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

/// Vocabulary, corpus and a tiny MLM config inside `dir`.
fn tiny_run(dir: &Path) -> String {
    let corpus = dir.join("corpus.txt");
    std::fs::write(&corpus, synthetic_corpus(8_000, 3)).unwrap();
    let vocab = dir.join("vocab.txt");
    let o = memt5(&[
        "train-tokenizer",
        "--corpus",
        corpus.to_str().unwrap(),
        "--vocab-size",
        "210",
        "--out",
        vocab.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut c = RunConfig::default();
    c.model.variant = memt5::Variant::Mem;
    c.model.d_model = 16;
    c.model.num_heads = 2;
    c.model.d_kv = 8;
    c.model.d_ff = 32;
    c.model.vocab_size = 210;
    c.model.n_chunks = 2;
    c.model.chunk_len = 16;
    c.model.mem_tokens = 1;
    c.data.train = vec![corpus.clone()];
    c.data.valid = vec![corpus];
    c.data.vocab = Some(vocab);
    c.train.batch_size = 8;
    c.train.epochs = 1;
    c.train.output_dir = dir.join("run");
    let path = dir.join("config.json");
    c.save(&path).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_lists_every_config_key() {
    let o = memt5(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for (key, _) in RunConfig::keys() {
        assert!(text.contains(&key), "--help is missing `{key}`");
    }
    let o = memt5(&["pretrain", "--help"]);
    assert!(stdout(&o).contains("model.mem_tokens"));
}

#[test]
fn full_scale_preset_echoes_resolved_config() {
    let o = memt5(&["pretrain", "--config", &preset("mlm_512_4chunk.json"), "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let c = RunConfig::from_json(&stdout(&o)).unwrap();
    assert_eq!(c.model.variant, memt5::Variant::Mem);
    assert_eq!((c.model.n_chunks, c.model.chunk_len, c.model.mem_tokens), (4, 128, 2));
    assert_eq!((c.train.batch_size, c.train.epochs, c.seed), (160, 100, 42));
}

#[test]
fn every_preset_parses() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for dir in [root.clone(), root.join("desk")] {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.extension().is_some_and(|x| x == "json") {
                RunConfig::load(&p).unwrap().validate().unwrap();
                n += 1;
            }
        }
    }
    assert!(n >= 30);
}

#[test]
fn usage_errors_exit_with_one() {
    let cfg = preset("mlm_512_4chunk.json");
    let o = memt5(&["pretrain", "--config", &cfg, "--set", "model.d_modle=3", "--dry-run"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.d_modle"));
    assert_eq!(memt5(&["pretrain", "--bogus"]).status.code(), Some(1));
    let o = memt5(&["pretrain", "--config", "/nonexistent/run.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pretrain_generate_and_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    let o = memt5(&["pretrain", "--config", &cfg, "--max-steps", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = dir.path().join("run/last.ckpt");
    assert!(ckpt.exists());
    assert!(dir.path().join("run/config.json").exists());
    let ckpt = ckpt.to_str().unwrap();

    let resumed = memt5(&["pretrain", "--config", &cfg, "--resume", ckpt]);
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    let csv = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert!(csv.starts_with("step,epoch,split,loss,acc,ppl,em,f1,precision,recall,lr,wallclock_s\n"));
    assert!(csv.contains(",valid,"));

    let gen = || memt5(&["generate", "--ckpt", ckpt, "--input", "the quick fox", "--max-len", "5"]);
    let (a, b) = (gen(), gen());
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));

    let o = memt5(&["eval", "--config", &cfg, "--ckpt", ckpt, "--split", "valid"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["perplexity"].as_f64().unwrap() > 1.0);

    // A different vocabulary of the same size is rejected by fingerprint.
    let other_corpus = dir.path().join("other.txt");
    std::fs::write(&other_corpus, synthetic_corpus(8_000, 99).to_uppercase()).unwrap();
    let other_vocab = dir.path().join("other_vocab.txt");
    let o = memt5(&[
        "train-tokenizer",
        "--corpus",
        other_corpus.to_str().unwrap(),
        "--vocab-size",
        "210",
        "--out",
        other_vocab.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let set = format!("data.vocab={}", other_vocab.display());
    let o = memt5(&["eval", "--config", &cfg, "--ckpt", ckpt, "--set", &set]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("incompatible"), "{}", stderr(&o));
}

#[test]
fn dump_attention_writes_mask_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("attn");
    let o = memt5(&[
        "dump-attention",
        "--config",
        &preset("mlm_512_4chunk.json"),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["cost"]["allowed"], 67_648);
    assert_eq!(summary["cost"]["dense"], 270_400);
    let mask = std::fs::read_to_string(out.join("encoder_mask.csv")).unwrap();
    let ones = mask.split([',', '\n']).filter(|x| *x == "1").count();
    assert_eq!(ones, 67_648);
}

#[test]
fn gradcheck_command_passes() {
    let o = memt5(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("case,"));
    assert!(!text.contains(",false,"));
}
