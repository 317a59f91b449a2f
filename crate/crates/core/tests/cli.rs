use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use covnn::brainage::DeltaAgeReport;
use covnn::cli::{Manifest, StatsOutput};
use covnn::stats::summarize_groups;

const CONFIG: &str = r#"{
  "seed": 17,
  "synth": { "scales": [20, 40], "train_scale": 20, "n": 90,
             "sites": [{ "params": { "tag": "site_b", "m": 24 } }] },
  "vnn": { "widths": [3, 3] },
  "train": { "ensemble_size": 2, "epochs": 15 }
}"#;

const COMMANDS: [&str; 5] = ["gen", "train", "brainage", "transfer", "stats"];

fn covnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covnn")).args(args).output().unwrap()
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    covnn(&args)
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn full_run(config: &Path, out: &Path) {
    for cmd in COMMANDS {
        ok(&run(cmd, config, out, &["--threads", "2"]));
    }
}

/// Every file under `root` except wall-clock timings.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            let rel = path.strip_prefix(root).unwrap().display().to_string();
            if path.is_dir() {
                stack.push(path);
            } else if !rel.starts_with("timing") {
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn manifest(out: &Path, cmd: &str) -> Manifest {
    serde_json::from_str(&std::fs::read_to_string(out.join(format!("manifests/{cmd}.json"))).unwrap()).unwrap()
}

#[test]
fn pipeline_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let (a, b) = (dir.path().join("a"), dir.path().join("nested/b"));
    full_run(&config, &a);
    full_run(&config, &b);
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{k} differs");
    }
    for key in [
        "cohorts/m20.csv",
        "cohorts/m40.csv",
        "cohorts/site_b.csv",
        "ground_truth.json",
        "model/ensemble.json",
        "brainage/report.json",
        "transfer/m40/report.json",
        "transfer/site_b/report.json",
        "transfer/summary.json",
        "stats/brainage.json",
        "stats/brainage_tukey.csv",
    ] {
        assert!(sa.contains_key(key), "missing {key}");
    }
    for cmd in COMMANDS {
        let m = manifest(&a, cmd);
        assert_eq!(m.master_seed, 17);
        assert_eq!(m.config_sha256, covnn::config::sha256_hex(CONFIG.as_bytes()));
        for f in &m.outputs {
            assert_eq!(f.sha256, covnn::config::sha256_hex(&sa[&f.path]), "{}", f.path);
        }
    }
    let train_inputs = manifest(&a, "train").inputs;
    assert_eq!(train_inputs[0].path, "cohorts/m20.csv");
}

#[test]
fn seed_override_changes_outputs_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run("gen", &config, &a, &[]));
    ok(&run("gen", &config, &b, &["--seed", "18"]));
    assert_eq!(manifest(&b, "gen").master_seed, 18);
    let read = |d: &Path| std::fs::read(d.join("cohorts/m20.csv")).unwrap();
    assert_ne!(read(&a), read(&b));
}

#[test]
fn smoke_training_is_fast_and_reports_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = dir.path().join("o");
    ok(&run("gen", &config, &out, &[]));
    let started = Instant::now();
    ok(&run("train", &config, &out, &[]));
    assert!(started.elapsed().as_secs_f64() < 60.0);
    let ens = covnn::training::Ensemble::from_json(&std::fs::read_to_string(out.join("model/ensemble.json")).unwrap());
    assert_eq!(ens.unwrap().len(), 2);
    let val = std::fs::read_to_string(out.join("train/loss/member_001_val.csv")).unwrap();
    assert_eq!(val.lines().count(), 1 + 16);

    ok(&run("brainage", &config, &out, &[]));
    let report = DeltaAgeReport::from_json(&std::fs::read_to_string(out.join("brainage/report.json")).unwrap()).unwrap();
    assert_eq!(report.records.len(), 90);

    ok(&run("transfer", &config, &out, &[]));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("transfer/summary.json")).unwrap()).unwrap();
    let site = summary.as_array().unwrap().iter().find(|r| r["tag"] == "site_b").unwrap();
    assert!(site["hc_offset"].as_f64().unwrap().abs() > 1e-6);
    assert!(site["eps_mean"].is_null());
    let m40 = summary.as_array().unwrap().iter().find(|r| r["tag"] == "m40").unwrap();
    assert!(m40["eps_mean"].as_f64().unwrap() >= 0.0);

    ok(&run("stats", &config, &out, &["--report", "brainage/report.json"]));
    let stats: StatsOutput =
        serde_json::from_str(&std::fs::read_to_string(out.join("stats/brainage.json")).unwrap()).unwrap();
    assert_eq!(stats.comparison, summarize_groups(&report).unwrap());
    assert_eq!(
        std::fs::read_to_string(out.join("stats/brainage_tukey.csv")).unwrap(),
        stats.comparison.tukey_csv()
    );
}

#[test]
fn standardization_switch_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let text = CONFIG.replacen("\"seed\": 17,", "\"seed\": 17, \"standardize_features\": true,", 1);
    let config = write_config(dir.path(), &text);
    let out = dir.path().join("o");
    for cmd in ["gen", "train", "brainage"] {
        ok(&run(cmd, &config, &out, &[]));
    }
    assert!(manifest(&out, "brainage").standardized_features);
    let plain = dir.path().join("p");
    let config = write_config(dir.path(), CONFIG);
    for cmd in ["gen", "train"] {
        ok(&run(cmd, &config, &plain, &[]));
    }
    assert!(!manifest(&plain, "train").standardized_features);
    let read = |d: &Path| std::fs::read(d.join("model/ensemble.json")).unwrap();
    assert_ne!(read(&out), read(&plain));
}

#[test]
fn exit_codes() {
    assert_eq!(covnn(&[]).status.code(), Some(1));
    assert_eq!(covnn(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(covnn(&["--help"]).status.code(), Some(0));
    assert_eq!(covnn(&["--version"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"sede": 3}"#).unwrap();
    assert_eq!(run("gen", &bad, &out, &[]).status.code(), Some(1));
    std::fs::write(&bad, r#"{"vnn": {"layers": 0}}"#).unwrap();
    assert_eq!(run("gen", &bad, &out, &[]).status.code(), Some(1));
    assert_eq!(run("gen", &dir.path().join("missing.json"), &out, &[]).status.code(), Some(1));

    let config = write_config(dir.path(), CONFIG);
    assert_eq!(run("train", &config, &out, &[]).status.code(), Some(2));
    ok(&run("gen", &config, &out, &[]));
    std::fs::write(out.join("cohorts/m20.csv"), "id,age,group,f1\na,70,HC,1,2\n").unwrap();
    assert_eq!(run("train", &config, &out, &[]).status.code(), Some(2));
}

#[test]
fn stats_on_a_single_group_report_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = dir.path().join("o");
    for cmd in ["gen", "train", "brainage"] {
        ok(&run(cmd, &config, &out, &[]));
    }
    let mut report =
        DeltaAgeReport::from_json(&std::fs::read_to_string(out.join("brainage/report.json")).unwrap()).unwrap();
    report.records.retain(|r| r.group == covnn::dataset::Group::Hc);
    std::fs::write(out.join("hc_only.json"), report.to_json().unwrap()).unwrap();
    let o = run("stats", &config, &out, &["--report", "hc_only.json"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!String::from_utf8_lossy(&o.stderr).contains("panicked"));
}
