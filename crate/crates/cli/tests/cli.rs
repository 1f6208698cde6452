use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use persona_lab::corpus::{load_jsonl, shares_profile_keyword};
use persona_lab::eval::EvalReport;

const SMOKE: &str = r#"{
  "synth": {"train": 50, "dev": 10, "test": 10, "seed": 3},
  "model": {"hidden": 16, "latent": 4, "encoder_layers": 1, "decoder_layers": 2, "heads": 2,
            "injection_interval": 1, "ffn_mult": 2},
  "train": {"epochs": 2, "batch_size": 10, "seed": 5},
  "decode": {"max_new_tokens": 8},
  "eval_contexts": 3
}"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let s = Self { dir: tempfile::tempdir().unwrap() };
        std::fs::write(s.path("smoke.json"), SMOKE).unwrap();
        s
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_persona-lab"));
        c.args(args).env("PERSONA_LAB_RUNS", self.path("runs")).current_dir(self.dir.path());
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn smoke_train(&self, name: &str) -> PathBuf {
        self.ok(&["train", "--config", "smoke.json", "--strategy", "podi", "--name", name]);
        self.path("runs").join(name)
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn synth_default_writes_three_splits() {
    let s = Sandbox::new();
    s.ok(&["synth", "--out", "corpus"]);
    let dir = s.path("corpus");
    let sizes: Vec<usize> = ["train", "dev", "test"]
        .iter()
        .map(|n| load_jsonl(&dir.join(format!("{n}.jsonl"))).unwrap().len())
        .collect();
    assert_eq!(sizes, vec![2000, 200, 200]);
    for f in ["vocab.txt", "embeddings.txt", "stopwords.txt", "manifest.json", "config.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn synth_is_reproducible_and_guarded() {
    let s = Sandbox::new();
    s.ok(&["synth", "--out", "a", "--seed", "9", "--train-size", "40"]);
    s.ok(&["synth", "--out", "b", "--seed", "9", "--train-size", "40"]);
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "vocab.txt"] {
        assert_eq!(read(&s.path("a").join(f)), read(&s.path("b").join(f)), "{f}");
    }
    let again = s.run(&["synth", "--out", "a", "--seed", "9"]);
    assert_eq!(code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    s.ok(&["synth", "--out", "a", "--seed", "9", "--force"]);
}

#[test]
fn synth_sparse_ratio_sets_keyword_overlap() {
    let s = Sandbox::new();
    s.ok(&["synth", "--out", "c", "--sparse-ratio", "0.3"]);
    let train = load_jsonl(&s.path("c/train.jsonl")).unwrap();
    let shared = train.iter().filter(|e| shares_profile_keyword(e)).count();
    assert_eq!(shared as f64 / train.len() as f64, 0.7);
}

#[test]
fn invalid_synth_spec_is_a_usage_error() {
    let s = Sandbox::new();
    let out = s.run(&["synth", "--out", "x", "--sparse-ratio", "1.5"]);
    assert_eq!(code(&out), 2);
    assert!(!s.path("x").exists());
}

#[test]
fn config_errors_list_every_offending_key() {
    let s = Sandbox::new();
    std::fs::write(s.path("bad.json"), r#"{"epochs": 3, "train": {"batchsize": 4}}"#).unwrap();
    let out = s.run(&["train", "--config", "bad.json"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("epochs") && err.contains("train.batchsize"), "{err}");
}

#[test]
fn smoke_training_writes_a_complete_run_directory() {
    let s = Sandbox::new();
    let run = s.smoke_train("smoke");
    for f in ["config.json", "manifest.json", "metrics.csv", "checkpoint.bin", "last.bin", "report.json", "state.json", "epochs.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = read(&run.join("metrics.csv"));
    let header: Vec<&str> = metrics.lines().next().unwrap().split(',').collect();
    assert!(header.contains(&"podi"));
    assert_eq!(metrics.lines().count(), 1 + 10);
    let report: EvalReport = serde_json::from_str(&read(&run.join("report.json"))).unwrap();
    assert!(report.is_finite());
    assert_eq!(report.samples, 9);

    let again = s.run(&["train", "--config", "smoke.json", "--name", "smoke"]);
    assert_eq!(code(&again), 2);
}

#[test]
fn training_is_reproducible_from_its_config_snapshot() {
    let s = Sandbox::new();
    let a = s.smoke_train("a");
    let snapshot = a.join("config.json");
    s.ok(&["train", "--config", snapshot.to_str().unwrap(), "--name", "b"]);
    let b = s.path("runs/b");
    assert_eq!(read(&a.join("metrics.csv")), read(&b.join("metrics.csv")));
    assert_eq!(std::fs::read(a.join("checkpoint.bin")).unwrap(), std::fs::read(b.join("checkpoint.bin")).unwrap());
}

#[test]
fn resumed_run_continues_step_numbering() {
    let s = Sandbox::new();
    let first = s.smoke_train("first");
    s.ok(&["train", "--config", "smoke.json", "--strategy", "podi", "--name", "second", "--resume", first.to_str().unwrap(), "--epochs", "1"]);
    let steps = |dir: &Path| -> Vec<usize> {
        read(&dir.join("metrics.csv")).lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect()
    };
    let a = steps(&first);
    let b = steps(&s.path("runs/second"));
    assert_eq!(a, (0..10).collect::<Vec<_>>());
    assert_eq!(b, (10..15).collect::<Vec<_>>());
}

#[test]
fn eval_reproduces_the_golden_report() {
    let s = Sandbox::new();
    let run = s.smoke_train("golden");
    let out = s.path("eval.json");
    s.ok(&["eval", "--checkpoint", run.join("checkpoint.bin").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let got: EvalReport = serde_json::from_str(&read(&out)).unwrap();
    let trained: EvalReport = serde_json::from_str(&read(&run.join("report.json"))).unwrap();
    assert_eq!(got, trained);
    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/eval_smoke.json");
    if std::env::var_os("PERSONA_LAB_BLESS").is_some() {
        std::fs::write(&golden_path, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
    }
    let golden: EvalReport = serde_json::from_str(&read(&golden_path)).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
    assert!(close(got.ppl, golden.ppl), "{} vs {}", got.ppl, golden.ppl);
    assert!(close(got.kl_cost, golden.kl_cost));
    assert!(close(got.distinct_1, golden.distinct_1) && close(got.distinct_2, golden.distinct_2));
    assert!(close(got.p_distance, golden.p_distance));
    assert_eq!((got.active_units, got.samples), (golden.active_units, golden.samples));
}

#[test]
fn generate_returns_requested_samples_with_latents() {
    let s = Sandbox::new();
    let run = s.smoke_train("gen");
    let ckpt = run.join("checkpoint.bin");
    let out = s.ok(&["generate", "--checkpoint", ckpt.to_str().unwrap(), "--context", "hello there | hi | i like chess", "--n", "3"]);
    let samples: serde_json::Value = serde_json::from_str(&out).unwrap();
    let arr = samples.as_array().unwrap();
    assert_eq!(arr.len(), 3);
    for x in arr {
        assert_eq!(x["z"].as_array().unwrap().len(), 4);
        assert!(x["alpha"].as_f64().unwrap() >= 0.0);
    }
    let by_index = s.ok(&["generate", "--checkpoint", ckpt.to_str().unwrap(), "--index", "2", "--n", "1"]);
    assert_eq!(serde_json::from_str::<serde_json::Value>(&by_index).unwrap().as_array().unwrap().len(), 1);
    let missing = s.run(&["generate", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn sweep_writes_eleven_rows() {
    let s = Sandbox::new();
    let run = s.smoke_train("sweep");
    let ckpt = run.join("checkpoint.bin");
    let one = s.ok(&["sweep", "--checkpoint", ckpt.to_str().unwrap(), "--index", "1"]);
    assert_eq!(one.lines().count(), 12);
    assert!(one.starts_with("alpha,response,length_tokens,p_distance"));
    let out = s.path("summary.csv");
    s.ok(&["sweep", "--checkpoint", ckpt.to_str().unwrap(), "--contexts", "3", "--out", out.to_str().unwrap()]);
    let summary = read(&out);
    assert_eq!(summary.lines().count(), 12);
    assert!(summary.lines().skip(1).all(|l| l.ends_with(",3")));
}

#[test]
fn probe_tables_and_curves() {
    let s = Sandbox::new();
    let single = s.ok(&["probe", "--config", "smoke.json", "--strategies", "none", "--name", "p1", "--epochs", "1"]);
    assert_eq!(single.lines().filter(|l| l.starts_with("none")).count(), 1);
    assert!(single.contains("seed 5"));
    s.ok(&["probe", "--config", "smoke.json", "--strategies", "none,podi", "--name", "p2", "--epochs", "1"]);
    let dir = s.path("runs/p2");
    assert_eq!(read(&dir.join("probe.csv")).lines().count(), 3);
    let curves = read(&dir.join("kl_curves.csv"));
    let grid = |name: &str| -> Vec<String> {
        curves.lines().filter(|l| l.starts_with(&format!("{name},"))).map(|l| l.split(',').nth(1).unwrap().to_string()).collect()
    };
    assert_eq!(grid("none"), grid("podi"));
    assert_eq!(grid("none").len(), 5);
    assert!(dir.join("podi.bin").exists() && dir.join("none.bin").exists());
    let bad = s.run(&["probe", "--config", "smoke.json", "--strategies", "nonsense"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn mismatched_checkpoint_and_missing_files_are_data_errors() {
    let s = Sandbox::new();
    let run = s.smoke_train("mm");
    std::fs::write(s.path("other.json"), r#"{"synth": {"train": 50, "dev": 10, "test": 10, "seed": 3},
        "model": {"hidden": 32, "latent": 4, "encoder_layers": 1, "decoder_layers": 2, "heads": 2, "injection_interval": 1}}"#).unwrap();
    let out = s.run(&["train", "--config", "other.json", "--name", "mm2", "--resume", run.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("architecture mismatch"));

    let gone = s.run(&["eval", "--checkpoint", "nowhere/checkpoint.bin"]);
    assert_eq!(code(&gone), 3);
    let mut bytes = std::fs::read(run.join("checkpoint.bin")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(s.path("corrupt.bin"), bytes).unwrap();
    let corrupt = s.run(&["eval", "--checkpoint", "corrupt.bin", "--config", "smoke.json"]);
    assert_eq!(code(&corrupt), 3);
    let missing_data = s.run(&["train", "--config", "smoke.json", "--data", "no-such-dir", "--name", "nd"]);
    assert_eq!(code(&missing_data), 3);
}

#[test]
fn runaway_learning_rate_is_a_numerical_failure() {
    let s = Sandbox::new();
    let out = s.run(&["train", "--config", "smoke.json", "--lr", "1e200", "--name", "boom"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(s.path("runs/boom/last_good.bin").exists());
}

#[test]
fn training_on_a_synth_directory() {
    let s = Sandbox::new();
    s.ok(&["synth", "--out", "corpus", "--train-size", "30", "--dev-size", "6", "--test-size", "6"]);
    s.ok(&["train", "--config", "smoke.json", "--data", "corpus", "--name", "fromdir", "--epochs", "1"]);
    let cfg = read(&s.path("runs/fromdir/config.json"));
    assert!(cfg.contains("corpus"));
}

#[test]
fn chat_answers_each_line() {
    let s = Sandbox::new();
    let run = s.smoke_train("chat");
    let mut child = s
        .cmd(&["chat", "--checkpoint", run.join("checkpoint.bin").to_str().unwrap()])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"hello there\n/alpha 0.5\ni like chess\n/quit\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
}
