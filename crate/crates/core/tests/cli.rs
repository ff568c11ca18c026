use std::path::Path;
use std::process::{Command, Output};

use mati::synthetic::{self, RegionSpec};

const CONFIG: &str = r#"[data]
path = "data.csv"
target = "y"
columns = [
  { name = "x0", kind = "numeric" },
  { name = "x1", kind = "numeric" },
  { name = "x2", kind = "numeric" },
  { name = "x3", kind = "numeric" },
]

[mlp]
max_epochs = 20

[ttsa]
epochs = 5
"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthetic::regions(&RegionSpec {
        n_rows: 500,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    mati::data::write_csv(&ds, dir.path().join("data.csv"), false).unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

fn mati(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mati"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mati(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(mati(dir.path(), &["split", "--bogus"]).status.code(), Some(1));
    assert_eq!(mati(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_exits_two_with_stage() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    let o = mati(dir.path(), &["split", "-c", "run.toml", "-o", "out"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage"));
}

#[test]
fn bad_override_exits_two() {
    let dir = workspace();
    let o = mati(dir.path(), &["split", "-c", "run.toml", "--set", "mlp.max_epochs=-3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config"));
}

#[test]
fn out_of_order_stage_names_the_missing_artifact() {
    let dir = workspace();
    let o = mati(dir.path(), &["aggregate", "-c", "run.toml", "-o", "out", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("missing artifact"), "{err}");
}

#[test]
fn stages_run_one_at_a_time_and_cache() {
    let dir = workspace();
    let common = ["-c", "run.toml", "-o", "out", "--seed", "3"];
    for stage in ["split", "fit-gmm", "synth", "train-experts", "aggregate", "evaluate"] {
        let mut args = vec![stage];
        args.extend(common);
        let o = mati(dir.path(), &args);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let seed_dir = dir.path().join("out/seed-3");
    for f in [
        "split/train.csv",
        "gmm/gmm.json",
        "synth/full.csv",
        "models/vanilla.json",
        "weights/inverse.json",
        "reports/mati.json",
    ] {
        assert!(seed_dir.join(f).exists(), "missing {f}");
    }
    let mut args = vec!["aggregate"];
    args.extend(common);
    let again = stdout(&mati(dir.path(), &args));
    assert!(again.contains("status=cached"), "{again}");
}

#[test]
fn sweep_accepts_ratio_list() {
    let dir = workspace();
    for stage in ["split", "fit-gmm", "synth", "train-experts"] {
        assert!(mati(dir.path(), &[stage, "-c", "run.toml", "-o", "out", "--seed", "2"]).status.success());
    }
    let o = mati(dir.path(), &["sweep", "-c", "run.toml", "-o", "out", "--seed", "2", "--ratios", "0.1,0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/seed-2/sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}
