use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_proharq"));
    c.env_remove("PROHARQ_OUT_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn only_subdir(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(Result::unwrap).collect()
}

const SHORT: &str = "sim_slots=2000";

#[test]
fn run_single_seed_writes_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["run", "--out", tmp.path().to_str().unwrap(), "--set", SHORT, "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = only_subdir(tmp.path());
    assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("run-"));
    assert_eq!(csv_rows(&dir.join("summary.csv")).len(), 1);
    for f in ["latency_cdf.csv", "resolved_config.toml", "manifest.json", "seed-7/mac_delay_trace.csv", "seed-7/controller_trace.csv"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    assert!(!dir.join("seed-7/channel_trace.csv").exists());
}

#[test]
fn several_seeds_add_aggregate_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["run", "--out", tmp.path().to_str().unwrap(), "--set", SHORT, "--seed", "1", "--seed", "2,3", "--channel-trace"]);
    assert!(out.status.success());
    let dir = only_subdir(tmp.path());
    let rows = csv_rows(&dir.join("summary.csv"));
    let seeds: Vec<&str> = rows.iter().map(|r| &r[1]).collect();
    assert_eq!(seeds, ["1", "2", "3", "mean", "std"]);
    assert!(dir.join("seed-3/channel_trace.csv").exists());
}

#[test]
fn bad_key_fails_and_leaves_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["run", "--out", tmp.path().to_str().unwrap(), "--set", "sinr_targt_db=3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sinr_targt_db"));
    assert_eq!(fs::read_dir(tmp.path()).map(|d| d.count()).unwrap_or(0), 0);

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "fc_ghz = 3.5\nwhatever = 1\n").unwrap();
    let out = run(&["run", "--out", tmp.path().to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("whatever"));
}

#[test]
fn sweep_rows_follow_grid_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["sweep-v", "--out", tmp.path().to_str().unwrap(), "--set", SHORT, "--seed", "1,2", "--v-grid", "0,20,40"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&only_subdir(tmp.path()).join("vsweep.csv"));
    assert_eq!(rows.len(), 6);
    for block in rows.chunks(3) {
        let v: Vec<f64> = block.iter().map(|r| r[0].parse().unwrap()).collect();
        assert_eq!(v, [0.0, 20.0, 40.0]);
    }
}

#[test]
fn sweep_rejects_negative_v_and_non_adaptive() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["sweep-v", "--out", tmp.path().to_str().unwrap(), "--v-grid", "-5,10"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["sweep-v", "--out", tmp.path().to_str().unwrap(), "--set", SHORT, "--set", "strategy=reactive"]);
    assert!(!out.status.success());
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0, "partial output left behind");
}

#[test]
fn compare_writes_one_cdf_per_strategy() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["compare", "--out", tmp.path().to_str().unwrap(), "--set", SHORT, "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = only_subdir(tmp.path());
    for slug in ["reactive", "fixed-2-2-2-2-2", "fixed-3-3-3-1", "adaptive"] {
        assert!(dir.join(slug).join("latency_cdf.csv").exists(), "{slug}");
    }
    let rows = csv_rows(&dir.join("summary.csv"));
    assert_eq!(rows.len(), 4);
    // Paired seeds: every strategy saw the same packets.
    let generated: Vec<&str> = rows.iter().map(|r| &r[3]).collect();
    assert!(generated.windows(2).all(|w| w[0] == w[1]), "{generated:?}");
}

#[test]
fn compare_needs_two_strategies() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["compare", "--out", tmp.path().to_str().unwrap(), "--strategies", "reactive"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn env_var_sets_output_root_and_overrides_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .env("PROHARQ_OUT_DIR", tmp.path())
        .args(["run", "--set", SHORT, "--set", "v_param=33"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let dir = only_subdir(tmp.path());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["overrides"][1], serde_json::json!(["v_param", "33"]));
    assert_eq!(manifest["runs"][0]["v_param"], 33.0);
    let resolved = fs::read_to_string(dir.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("v_param = 33.0"), "{resolved}");
    assert!(resolved.contains("sim_slots = 2000"));
}
