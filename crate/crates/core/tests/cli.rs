use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dfedavgm");

fn dfedavgm(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(dir).env("RUST_LOG", "warn").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const QUADRATIC_3_SEEDS: &str = r#"
[[experiment]]
name = "ring"
algorithm = "dfedavgm"
rounds = 40
repetitions = 3
seed = 11
output = "out"

[experiment.problem]
kind = "quadratic"
clients = 6
dim = 5
heterogeneity = 0.5
noise_sigma = 0.3

[experiment.topology]
kind = "ring"

[experiment.trainer]
eta = 0.05
theta = 0.5
local_steps = 3
"#;

#[test]
fn empty_config_succeeds_with_empty_summary() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "").unwrap();
    let o = dfedavgm(&["run", "c.toml"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary, serde_json::json!([]));
    let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

/// Drops the last (`wall_ms`) column of a record CSV.
fn without_wall_time(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn three_seeds_replay_identically_except_wall_time() {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            fs::write(dir.path().join("c.toml"), QUADRATIC_3_SEEDS).unwrap();
            let o = dfedavgm(&["run", "c.toml"], dir.path());
            assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
            dir
        })
        .collect();
    let out0 = runs[0].path().join("out");
    let csvs: Vec<_> = fs::read_dir(&out0)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    assert_eq!(csvs.len(), 3, "{csvs:?}");
    for seed in 11..14 {
        let stem = format!("ring_seed{seed}");
        let a = fs::read_to_string(out0.join(format!("{stem}.csv"))).unwrap();
        let b = fs::read_to_string(runs[1].path().join("out").join(format!("{stem}.csv"))).unwrap();
        assert_eq!(a.lines().count(), 42);
        assert_eq!(without_wall_time(&a), without_wall_time(&b));
        let sidecar = |d: &Path| fs::read(d.join("out").join(format!("{stem}.json"))).unwrap();
        assert_eq!(sidecar(runs[0].path()), sidecar(runs[1].path()));
    }
    let summary = |d: &Path| fs::read(d.join("summary.csv")).unwrap();
    assert_eq!(summary(runs[0].path()), summary(runs[1].path()));
    let side: serde_json::Value = serde_json::from_slice(&fs::read(out0.join("ring_seed11.json")).unwrap()).unwrap();
    assert!(side["theory"]["constants"]["gamma"].is_number());
    assert!(side["theory"]["consensus_bound"].is_number());
}

#[test]
fn momentum_one_is_rejected_citing_the_range() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), QUADRATIC_3_SEEDS.replace("theta = 0.5", "theta = 1.0")).unwrap();
    for cmd in ["run", "validate"] {
        let o = dfedavgm(&[cmd, "c.toml"], dir.path());
        assert_eq!(o.status.code(), Some(1));
        assert!(stderr(&o).contains("0 ≤ θ < 1"), "{}", stderr(&o));
    }
    assert!(!dir.path().join("out").exists());
}

#[test]
fn every_offending_field_is_listed() {
    let dir = tempfile::tempdir().unwrap();
    let text = QUADRATIC_3_SEEDS
        .replace("theta = 0.5", "theta = 1.5")
        .replace("repetitions = 3", "repetitions = 0")
        .replace("name = \"ring\"", "name = \"\"")
        .replace("dim = 5", "dim = 0");
    fs::write(dir.path().join("c.toml"), text).unwrap();
    let o = dfedavgm(&["validate", "c.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for needle in ["θ", "repetitions", "name", "dim"] {
        assert!(err.contains(needle), "missing {needle:?} in {err}");
    }
}

#[test]
fn divergence_is_recorded_and_other_runs_continue() {
    let dir = tempfile::tempdir().unwrap();
    let bad = QUADRATIC_3_SEEDS.replace("name = \"ring\"", "name = \"blowup\"").replace("eta = 0.05", "eta = 1e150").replace("repetitions = 3", "repetitions = 1");
    fs::write(dir.path().join("c.toml"), format!("{QUADRATIC_3_SEEDS}\n{bad}")).unwrap();
    let o = dfedavgm(&["run", "c.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let summary: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.len(), 4);
    let blown: Vec<_> = summary.iter().filter(|r| r["experiment"] == "blowup").collect();
    assert_eq!(blown.len(), 1);
    assert_eq!(blown[0]["status"], "diverged");
    assert!(summary.iter().filter(|r| r["experiment"] == "ring").all(|r| r["status"] == "ok"));
    // partial records are flushed
    let partial = fs::read_to_string(dir.path().join("out/blowup_seed11.csv")).unwrap();
    assert!(partial.lines().count() >= 2);
}

#[test]
fn unknown_preset_and_bad_worker_count_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = dfedavgm(&["preset", "nope"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(BIN).args(["run", "c.toml"]).current_dir(dir.path()).env("DFEDAVGM_WORKERS", "0").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dfedavgm(&["run", "absent.toml"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn render_after_run_and_schema_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), QUADRATIC_3_SEEDS).unwrap();
    assert_eq!(dfedavgm(&["run", "c.toml"], dir.path()).status.code(), Some(0));
    let o = dfedavgm(&["render", "out"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("out/ring_f_avg_vs_round.svg").exists());
    assert!(dir.path().join("out/ring_consensus_vs_bits.svg").exists());
    fs::write(dir.path().join("out/other.csv"), "a,b\n1,2\n").unwrap();
    let o = dfedavgm(&["render", "out"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("expected header"), "{}", stderr(&o));
}
