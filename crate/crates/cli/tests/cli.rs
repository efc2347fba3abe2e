use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn noisegcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisegcl"))
        .args(args)
        .env_remove("NOISEGCL_OUT")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_TRAIN: &str = r#"
[data.synth]
n_per_block = 12
num_blocks = 2
p_in = 0.4
p_out = 0.05
feat_dim = 6
feat_shift = 1.0
seed = 1

[train]
epochs = 6
hidden = 12
embed = 8
proj = 8
edge_hidden = 6
attr_hidden = 6

[eval]
n_splits = 2
seeds = [0]
"#;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, body).unwrap();
    path
}

fn gen_synth(out: &Path, seed: u64) -> Output {
    noisegcl(&[
        "gen-synth",
        "--size",
        "50",
        "--seed",
        &seed.to_string(),
        "--out",
        p(out),
    ])
}

#[test]
fn missing_config_exits_1_and_names_the_file() {
    let o = noisegcl(&[
        "train",
        "--config",
        "/no/such/dir/exp.toml",
        "--out",
        "/tmp/unused",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("/no/such/dir/exp.toml"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn unknown_config_key_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nepochs = 2\nlearning_rate = 1.0\n");
    let o = noisegcl(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("exp.toml:3"), "{}", stderr(&o));
}

#[test]
fn train_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_TRAIN);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = noisegcl(&["train", "--config", p(&cfg), "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in [
        "config.toml",
        "diagnostics.jsonl",
        "encoder.bin",
        "encoder.json",
        "edge_gen.bin",
        "attr_gen.bin",
        "edge_noise.tsv",
        "edge_noise.dot",
    ] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let diag = fs::read_to_string(a.join("diagnostics.jsonl")).unwrap();
    assert_eq!(diag.lines().count(), 6);
    let first: Value = serde_json::from_str(diag.lines().next().unwrap()).unwrap();
    for key in [
        "epoch",
        "loss",
        "mean_kappa",
        "task_entropy",
        "neg_cond_entropy",
    ] {
        assert!(first.get(key).is_some(), "no {key} in {first}");
    }
    assert_eq!(
        diag,
        fs::read_to_string(b.join("diagnostics.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("encoder.bin")).unwrap(),
        fs::read(b.join("encoder.bin")).unwrap()
    );
    let tsv = fs::read_to_string(a.join("edge_noise.tsv")).unwrap();
    assert_eq!(tsv.lines().next(), Some("u\tv\tdrop_prob\tkept"));
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_TRAIN);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(noisegcl(&["train", "--config", p(&cfg), "--out", p(&a)])
        .status
        .success());
    assert!(
        noisegcl(&["train", "--config", p(&cfg), "--out", p(&b), "--seed", "3"])
            .status
            .success()
    );
    assert_ne!(
        fs::read(a.join("diagnostics.jsonl")).unwrap(),
        fs::read(b.join("diagnostics.jsonl")).unwrap()
    );
}

#[test]
fn runaway_learning_rate_exits_3_with_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL_TRAIN.replace("epochs = 6", "epochs = 6\nlr_encoder = 1e300");
    let cfg = write_config(dir.path(), &body);
    let out = dir.path().join("o");
    let o = noisegcl(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(out.join("last_good.bin").is_file());
    assert!(out.join("diagnostics.jsonl").is_file());
}

#[test]
fn gen_synth_is_loadable_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(gen_synth(&a, 4).status.success());
    assert!(gen_synth(&b, 4).status.success());
    for f in [
        "header.json",
        "edges.tsv",
        "features.csv",
        "labels.csv",
        "splits.json",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let (g, _) = noisegcl::load_graph(&a).unwrap();
    assert_eq!(g.num_nodes(), 100);
    assert_eq!(g.feat_dim(), 16);
    assert_eq!(g.num_classes(), 2);
}

#[test]
fn gen_synth_edge_counts_are_binomial() {
    // 2 blocks of 50: 2 * C(50, 2) pairs at 0.1 and 50 * 50 at 0.01
    let (inside, across): (f64, f64) = (2.0 * 1225.0, 2500.0);
    let mean = inside * 0.1 + across * 0.01;
    let sd = (inside * 0.1 * 0.9 + across * 0.01 * 0.99).sqrt();
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..5 {
        let out = dir.path().join(seed.to_string());
        assert!(gen_synth(&out, seed).status.success());
        let (g, _) = noisegcl::load_graph(&out).unwrap();
        let z = (g.num_edges() as f64 - mean) / sd;
        assert!(
            z.abs() < 4.0,
            "seed {seed}: {} edges, z = {z}",
            g.num_edges()
        );
    }
}

#[test]
fn gradcheck_tiny_passes_and_injected_bug_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = noisegcl(&["gradcheck", "--scale", "tiny", "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap())
            .unwrap();
    assert_eq!(report.as_array().unwrap().len(), 1);

    let o = noisegcl(&["gradcheck", "--scale", "tiny", "--inject-bug"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn eval_with_one_repeat_has_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("g");
    assert!(gen_synth(&graph, 0).status.success());
    let cfg = write_config(
        dir.path(),
        SMALL_TRAIN
            .replace("feat_dim = 6", "feat_dim = 16")
            .as_str(),
    );
    let run = dir.path().join("run");
    let o = noisegcl(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&graph),
        "--out",
        p(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let out = dir.path().join("eval");
    let o = noisegcl(&[
        "eval",
        "--checkpoint",
        p(&run.join("encoder")),
        "--data",
        p(&graph),
        "--config",
        p(&cfg),
        "--repeats",
        "1",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();
    for key in ["accuracies", "mean", "std", "fingerprint", "per_seed"] {
        assert!(report.get(key).is_some(), "no {key}");
    }
    assert_eq!(report["accuracies"].as_array().unwrap().len(), 1);
    assert_eq!(report["std"].as_f64(), Some(0.0));
    let acc = report["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn eval_on_fixed_split_file() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("g");
    assert!(gen_synth(&graph, 2).status.success());
    let o = noisegcl(&[
        "eval",
        "--checkpoint",
        "unused",
        "--raw",
        "--data",
        p(&graph),
        "--splits",
        p(&graph.join("splits.json")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("over 1 runs"));
}

#[test]
fn eval_without_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("g");
    assert!(gen_synth(&graph, 0).status.success());
    let o = noisegcl(&[
        "eval",
        "--checkpoint",
        p(&dir.path().join("nothing")),
        "--data",
        p(&graph),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_fills_nine_cells() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL_TRAIN.replace("epochs = 6", "epochs = 2");
    let cfg = write_config(dir.path(), &body);
    let out = dir.path().join("grid");
    let o = noisegcl(&[
        "ablate",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--emit-latex",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("feat_mode,edge_mode,mean,std,runs"));
    assert_eq!(lines.count(), 9);
    assert!(out.join("report.json").is_file());
    assert!(out.join("report.tex").is_file());
}
