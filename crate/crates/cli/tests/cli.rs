use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
version = 1
seed = 3

[scm]
dim_latent = 20
dim_obs = 24
num_spurious = 4
domains = [
  { domain_id = "train_a", spurious_scale = 0.5, domain_weight = 0.5, role = "train" },
  { domain_id = "train_b", spurious_scale = 2.0, domain_weight = 0.5, role = "train" },
  { domain_id = "test", spurious_scale = 3.0, role = "test" },
]

[data]
n_train = 200
n_test = 300
n_indomain_test = 300

[pairs]
k = 8
epsilon = [0.0, 1.0]
pairing = "oracle"

[model]
loss_kind = "log_loss"
optimizer = "gd"
epochs = 30
step_size = 0.05

[sweep]
axis = "r"
values = [0, 2, 4]
num_seeds = 3

[bounds]
mc_samples = 4000
"#;

fn ncm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncm"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.toml"), SMALL.replace("[sweep]", "[sweep]\nseeds = 2")).unwrap();
    let out = ncm(dir.path(), &["--config", "bad.toml", "--out", "o", "sweep"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeds"));
}

#[test]
fn missing_config_exits_with_config_code() {
    let dir = setup();
    let out = ncm(dir.path(), &["--config", "nope.toml", "sweep"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_with_io_code() {
    let dir = setup();
    std::fs::write(dir.path().join("blocker"), "").unwrap();
    let out = ncm(dir.path(), &["--config", "small.toml", "--out", "blocker/sub", "sweep"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn generate_pairs_train_pipeline() {
    let dir = setup();
    let run = |args: &[&str]| {
        let out = ncm(dir.path(), args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["--config", "small.toml", "--out", "o", "generate"]);
    run(&["--config", "small.toml", "--out", "o", "generate", "--domain", "test", "--file", "test.csv"]);
    run(&["--config", "small.toml", "--out", "o", "pairs", "--scm", "o/scm.toml", "--epsilon", "0.5"]);
    run(&["--config", "small.toml", "--out", "o", "pairs", "--pairing", "random", "--data", "o/dataset.csv", "--file", "rp.csv"]);
    run(&["--config", "small.toml", "--out", "o", "train", "--data", "o/dataset.csv", "--pairs", "o/pairs.csv", "--eval", "o/test.csv"]);
    let o = dir.path().join("o");
    for f in ["scm.toml", "dataset.csv", "test.csv", "pairs.csv", "pairs.meta.json", "rp.csv", "model.csv", "subspace.csv", "eval.jsonl", "config.toml"] {
        assert!(o.join(f).exists(), "{f} missing");
    }
    let eval = std::fs::read_to_string(o.join("eval.jsonl")).unwrap();
    assert_eq!(eval.lines().count(), 2);
    let header = std::fs::read_to_string(o.join("dataset.csv")).unwrap();
    assert!(header.starts_with("domain_id,y,x_0,"));
    let echoed = std::fs::read_to_string(o.join("config.toml")).unwrap();
    assert!(echoed.starts_with("# --out o\n"));
}

#[test]
fn sweep_output_is_byte_identical_across_job_counts() {
    let dir = setup();
    for (jobs, out) in [("1", "j1"), ("3", "j3")] {
        let res = ncm(dir.path(), &["--config", "small.toml", "--out", out, "--jobs", jobs, "sweep"]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    for f in ["sweep.csv", "sweep_summary.csv"] {
        let a = std::fs::read(dir.path().join("j1").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("j3").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("j1/sweep.csv")).unwrap();
    assert!(csv.starts_with("sweep_axis,sweep_value,seed,k,r,epsilon,pairing,loss_kind,train_loss,"));
    assert_eq!(csv.lines().count(), 1 + 3 * 2 * 3);
}

#[test]
fn bound_check_prints_verdicts() {
    let dir = setup();
    let out = ncm(dir.path(), &["--config", "small.toml", "--out", "b", "bound-check"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().next().unwrap().contains("wedin"));
    assert!(stdout.contains("theorem-level bound held in 18/18 runs"), "{stdout}");
    for f in ["sweep.csv", "sweep_bounds.jsonl", "sweep_moment.jsonl"] {
        assert!(dir.path().join("b").join(f).exists(), "{f}");
    }
}

#[test]
fn baselines_write_erm_then_oracle() {
    let dir = setup();
    let out = ncm(dir.path(), &["--config", "small.toml", "--out", "o", "baselines"]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("o/sweep_baselines.csv")).unwrap();
    let tags: Vec<&str> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(tags, ["erm", "erm", "erm", "oracle", "oracle", "oracle"]);
}
