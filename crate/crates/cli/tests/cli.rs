use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[data]
holdout_count = 2

[synth]
genes = 12
cell_types = 2
perturbations = 4
batches = 1
cells_per_group = 16
control_cells = 16
de_genes = 3

[encoder]
d_h = 8
d = 8
gene_tokens = 2

[transport]
blocks = 1

[train]
epochs = 2
steps_per_epoch = 2
batch_size = 2
cells = 8
"#;

fn vcell(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcell"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = setup();
    let d = dir.path();
    ok(&vcell(d, &["synth", "--config", "tiny.toml"]));
    assert!(d.join("data/manifest.json").is_file());
    assert!(d.join("data/truth.csv").is_file());

    for (run, variant) in [("run_xx", "xx"), ("run_vv", "vv")] {
        let base = ["--config", "tiny.toml", "--out", run, "--variant", variant];
        let ckpt = ok(&vcell(d, &[&["train"], &base[..]].concat()));
        assert!(ckpt.trim().ends_with("checkpoint"));
        ok(&vcell(d, &[&["generate", "--steps", "2"], &base[..]].concat()));
        let csv = ok(&vcell(d, &[&["eval"], &base[..]].concat()));
        assert!(csv.starts_with("perturbation,MSE,MAE"));
        assert!(csv.lines().last().unwrap().starts_with("MEAN"));
        assert!(d.join(run).join("report.json").is_file());
    }
    let table = ok(&vcell(d, &["report", "run_xx", "run_vv", "nowhere"]));
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3, "{table}");
    assert!(rows[1..].iter().any(|r| r.contains(",vv,")));
}

#[test]
fn explicit_conditions_and_lookup_failures() {
    let dir = setup();
    let d = dir.path();
    ok(&vcell(d, &["synth", "--config", "tiny.toml"]));
    ok(&vcell(d, &["train", "--config", "tiny.toml"]));
    ok(&vcell(
        d,
        &["generate", "--config", "tiny.toml", "--condition", "type1|pert2|batch0"],
    ));
    let bad = vcell(
        d,
        &["generate", "--config", "tiny.toml", "--condition", "type1|pert7|batch0"],
    );
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn exit_codes_by_failure_class() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[synth]\nde_genes = 500\n").unwrap();
    assert_eq!(vcell(d, &["synth", "--config", "bad.toml"]).status.code(), Some(2));
    std::fs::write(d.join("junk.toml"), "nonsense = true\n").unwrap();
    assert_eq!(vcell(d, &["train", "--config", "junk.toml"]).status.code(), Some(2));
    assert_eq!(vcell(d, &["train", "--config", "tiny.toml"]).status.code(), Some(3));
    assert_eq!(vcell(d, &["train", "--variant", "zz"]).status.code(), Some(2));
}

#[test]
fn same_seed_same_dataset() {
    let dir = setup();
    let d = dir.path();
    ok(&vcell(d, &["synth", "--config", "tiny.toml", "--out", "a"]));
    ok(&vcell(d, &["synth", "--config", "tiny.toml", "--out", "b"]));
    ok(&vcell(d, &["synth", "--config", "tiny.toml", "--out", "c", "--seed", "6"]));
    let read = |p: &str| std::fs::read(d.join(p).join("manifest.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}
