//! End-to-end runs of the `musc` binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
embed_dim = 16
n_layers = 1
n_heads = 2
context_len = 96
[data]
n_sft_examples = 64
n_pairs = 12
[sft]
epochs = 1
batch_size = 16
[train]
lr = 0.001
batch_size = 4
epochs = 1
[heldout]
n_instructions = 16
"#;

fn musc(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_musc"));
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).env_remove("MUSC_API_KEY").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

struct Lab {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Lab {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        Self { _dir: dir, root, config }
    }

    fn p(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        musc(args, Some(&self.config))
    }
}

#[test]
fn full_pipeline_through_the_binary() {
    let lab = Lab::new();
    let sft = lab.p("sft");
    ok(&lab.run(&["sft", "--out", &sft]));
    assert!(Path::new(&format!("{sft}.manifest.json")).exists());
    assert!(Path::new(&format!("{sft}.config.toml")).exists());

    let data = lab.p("pairs.jsonl");
    let text =
        ok(&lab.run(&["gen-data", "--mode", "selfinst", "--n", "12", "--checkpoint", &sft, "--out", &data]));
    assert!(text.contains("emitted"), "{text}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{data}.manifest.json")).unwrap()).unwrap();
    let hash = manifest["dataset_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);

    ok(&lab.run(&["attach-weights", "--data", &data, "--checkpoint", &sft, "--metric", "pmi"]));
    let inspect = ok(&lab.run(&["weights-inspect", "--data", &data, "--index", "0"]));
    assert!(inspect.contains("metric: pmi"), "{inspect}");
    assert!(inspect.contains("chosen:") && inspect.contains("rejected:"));

    let tuned = lab.p("tuned");
    let t = ok(&lab.run(&["train", "--data", &data, "--checkpoint", &sft, "--out", &tuned]));
    assert!(t.contains("steps"), "{t}");
    let metrics = std::fs::read_to_string(format!("{tuned}.metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,"), "{metrics}");

    let ra = lab.p("a.jsonl");
    let rb = lab.p("b.jsonl");
    assert!(ok(&lab.run(&["eval", "--checkpoint", &sft, "--out", &ra])).contains("ISR"));
    ok(&lab.run(&["eval", "--checkpoint", &tuned, "--out", &rb]));
    let delta = ok(&lab.run(&["compare", &ra, &rb]));
    assert!(delta.contains("ΔISR"), "{delta}");
}

#[test]
fn training_without_weights_needs_the_flag() {
    let lab = Lab::new();
    let sft = lab.p("sft");
    ok(&lab.run(&["sft", "--out", &sft]));
    let data = lab.p("pairs.jsonl");
    ok(&lab.run(&["gen-data", "--n", "6", "--scheme", "negate", "--checkpoint", &sft, "--out", &data]));
    let out = lab.run(&["train", "--data", &data, "--checkpoint", &sft, "--out", &lab.p("t")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("weights"));
    ok(&lab.run(&["train", "--data", &data, "--checkpoint", &sft, "--out", &lab.p("t"), "--no-weights"]));
}

#[test]
fn preinst_file_mode_reads_token_arrays() {
    let lab = Lab::new();
    let sft = lab.p("sft");
    ok(&lab.run(&["sft", "--out", &sft]));
    // three positive Contains constraints on letters 0, 1 and 2
    let ins = "[1, 5, 11, 26, 2, 5, 11, 27, 2, 5, 11, 28, 3]\n";
    let input = lab.root.join("ins.jsonl");
    std::fs::write(&input, ins.repeat(3)).unwrap();
    let data = lab.p("file_pairs.jsonl");
    let out = lab.run(&[
        "gen-data",
        "--mode",
        "preinst-file",
        "--input",
        input.to_str().unwrap(),
        "--checkpoint",
        &sft,
        "--out",
        &data,
    ]);
    ok(&out);
    std::fs::write(&input, "[1, 5]\n").unwrap();
    let bad = lab.run(&[
        "gen-data",
        "--mode",
        "preinst-file",
        "--input",
        input.to_str().unwrap(),
        "--checkpoint",
        &sft,
        "--out",
        &data,
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 1"));
}

#[test]
fn usage_and_config_errors_exit_with_1() {
    let lab = Lab::new();
    assert_eq!(musc(&["no-such-command"], None).status.code(), Some(1));
    assert_eq!(musc(&["eval"], None).status.code(), Some(1));
    assert_eq!(musc(&["--help"], None).status.code(), Some(0));

    let bad = lab.root.join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 1.0\n").unwrap();
    let out = musc(&["show-config"], Some(&bad));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = lab.run(&["gen-data", "--mode", "selfinst", "--out", &lab.p("x")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));

    let input = lab.root.join("nl.txt");
    std::fs::write(&input, "write a poem; rhyme; be brief\n").unwrap();
    let out = lab.run(&[
        "gen-data",
        "--mode",
        "preinst-endpoint",
        "--input",
        input.to_str().unwrap(),
        "--out",
        &lab.p("y"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("MUSC_API_KEY"));
}

#[test]
fn runtime_errors_exit_with_2() {
    let lab = Lab::new();
    let out = lab.run(&["eval", "--checkpoint", &lab.p("missing"), "--out", &lab.p("r.jsonl")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn show_config_round_trips() {
    let desk = ok(&musc(&["show-config", "--preset", "desk"], None));
    let lab = Lab::new();
    let path = lab.root.join("desk.toml");
    std::fs::write(&path, &desk).unwrap();
    assert_eq!(ok(&musc(&["show-config"], Some(&path))), desk);
    let paper = ok(&musc(&["show-config", "--preset", "paper"], None));
    assert!(paper.contains("lr = 1e-6") || paper.contains("lr = 0.000001"), "{paper}");
}

#[test]
fn sweep_alpha_writes_a_row_per_cell() {
    let lab = Lab::new();
    let table = lab.p("sweep.csv");
    let text = ok(&lab.run(&["sweep-alpha", "--alphas", "0.2,0.5", "--seeds", "0,1", "--out", &table]));
    assert_eq!(text.lines().count(), 5, "{text}");
    let mut r = csv::Reader::from_path(&table).unwrap();
    assert_eq!(r.records().count(), 4);
}
