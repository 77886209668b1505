use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn quickstart() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("quickstart")
}

fn fedconf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedconf"))
        .args(args)
        .env_remove("FEDCONF_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
}

/// An 8-round copy of the quickstart bundle in a scratch directory.
fn small_bundle(tweak: impl FnOnce(&mut Value, &mut Value, &mut Value)) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let mut policy = read_json(&quickstart().join("policy.json"));
    let mut training = read_json(&quickstart().join("training.json"));
    let mut manifest = read_json(&quickstart().join("manifest.json"));
    policy["nodes"]["dp_noise"]["noise"]["rounds"] = json!(8);
    policy["nodes"]["client_update"]["constraints"]["max_decrypt_count"] = json!(8);
    training["rounds"] = json!(8);
    training["data"]["clients"] = json!(40);
    policy["nodes"]["aggregate"]["constraints"]["min_inputs"] = json!(20);
    training["clients_per_round"] = json!(40);
    tweak(&mut policy, &mut training, &mut manifest);
    write_json(&dir.path().join("policy.json"), &policy);
    write_json(&dir.path().join("training.json"), &training);
    let manifest_path = dir.path().join("manifest.json");
    write_json(&manifest_path, &manifest);
    (dir, manifest_path)
}

#[test]
fn validate_accepts_the_bundled_policy() {
    let out = fedconf(&["policy", "validate", quickstart().join("policy.json").to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).trim(), "ok");
}

#[test]
fn validate_reports_cycles() {
    let dir = tempfile::tempdir().unwrap();
    let mut policy = read_json(&quickstart().join("policy.json"));
    policy["edges"]
        .as_array_mut()
        .unwrap()
        .push(json!(["release", "client_update"]));
    let path = dir.path().join("cyclic.json");
    write_json(&path, &policy);
    let out = fedconf(&["policy", "validate", path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("cycle_detected"), "{}", stdout(&out));
    let out = fedconf(&["policy", "summarize", path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn unreadable_or_malformed_policy_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.json");
    fs::write(&junk, b"{ not json").unwrap();
    for action in ["validate", "summarize", "hash"] {
        assert_eq!(code(&fedconf(&["policy", action, junk.to_str().unwrap()])), 2);
        assert_eq!(code(&fedconf(&["policy", action, "/nonexistent/p.json"])), 2);
    }
}

#[test]
fn hash_is_stable_hex() {
    let path = quickstart().join("policy.json");
    let a = stdout(&fedconf(&["policy", "hash", path.to_str().unwrap()]));
    let b = stdout(&fedconf(&["policy", "hash", path.to_str().unwrap()]));
    assert_eq!(a, b);
    let h = a.trim();
    assert_eq!(h.len(), 64);
    assert!(h.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
}

#[test]
fn summarize_describes_release_and_budget() {
    let out = fedconf(&["policy", "summarize", quickstart().join("policy.json").to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("rho=3.50000"), "{text}");
    assert!(text.contains("tree-aggregation"), "{text}");
}

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn accountant_direct_and_tree_forms() {
    let out = fedconf(&["accountant", "--rho", "0.0144", "--delta", "1e-10"]);
    assert_eq!(code(&out), 0);
    assert!((field(&stdout(&out), "epsilon") - 0.994).abs() < 0.02);

    let out = fedconf(&["accountant", "--tree", "1", "--sigma", "1", "--clip", "1", "--delta", "1e-10"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert_eq!(field(&text, "rho"), 0.5);
    let direct = stdout(&fedconf(&["accountant", "--rho", "0.5"]));
    assert_eq!(field(&text, "epsilon"), field(&direct, "epsilon"));

    let out = fedconf(&["accountant", "--tree", "64", "--sigma", "1", "--clip", "1"]);
    assert_eq!(field(&stdout(&out), "rho"), 3.5);
}

#[test]
fn accountant_rejects_inconsistent_flags() {
    for args in [
        &["accountant", "--rho", "1", "--tree", "4", "--sigma", "1", "--clip", "1"][..],
        &["accountant"],
        &["accountant", "--tree", "4"],
        &["accountant", "--sigma", "1"],
        &["accountant", "--rho", "1", "--delta", "2"],
        &["accountant", "--rho", "-1"],
    ] {
        assert_eq!(code(&fedconf(args)), 2, "{args:?}");
    }
    assert_eq!(code(&fedconf(&["frobnicate"])), 2);
}

#[test]
fn zero_noise_tree_has_no_guarantee() {
    let out = fedconf(&["accountant", "--tree", "4", "--sigma", "0", "--clip", "1"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("unbounded"));
}

#[test]
fn run_writes_artifacts_deterministically() {
    let (dir, manifest) = small_bundle(|_, _, _| {});
    let inputs: Vec<Vec<u8>> = ["policy.json", "training.json", "manifest.json"]
        .iter()
        .map(|f| fs::read(dir.path().join(f)).unwrap())
        .collect();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out_dir in [&a, &b] {
        let out = fedconf(&["run", manifest.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let text = stdout(&out);
        assert_eq!(field(&text, "rho"), 2.0);
        assert!(field(&text, "accuracy") > 0.5);
    }
    for name in ["metrics.csv", "audit.jsonl", "trace.jsonl"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
    assert!(!a.join(".metrics.csv.tmp").exists());
    for (f, before) in ["policy.json", "training.json", "manifest.json"].iter().zip(inputs) {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), before, "{f} changed");
    }

    assert_eq!(code(&fedconf(&["audit", "verify", a.join("audit.jsonl").to_str().unwrap()])), 0);
    let replay = fedconf(&["replay", a.join("trace.jsonl").to_str().unwrap()]);
    assert_eq!(code(&replay), 0);
    assert_eq!(stdout(&replay).matches(": released").count(), 8);
}

#[test]
fn seed_comes_from_manifest_unless_env_overrides() {
    let (dir, manifest) = small_bundle(|_, _, _| {});
    let run = |seed: Option<&str>, out: &str| {
        let out_dir = dir.path().join(out);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedconf"));
        cmd.args(["run", manifest.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()]);
        match seed {
            Some(s) => cmd.env("FEDCONF_SEED", s),
            None => cmd.env_remove("FEDCONF_SEED"),
        };
        let status = cmd.output().unwrap();
        (code(&status), fs::read(out_dir.join("metrics.csv")).ok())
    };
    let (c0, base) = run(None, "base");
    let (c1, same) = run(Some("2024"), "same");
    let (c2, other) = run(Some("7"), "other");
    assert_eq!((c0, c1, c2), (0, 0, 0));
    assert_eq!(base, same);
    assert_ne!(base, other);
    assert_eq!(run(Some("seven"), "bad").0, 2);
}

#[test]
fn noiseless_config_under_finite_budget_is_refused_before_writing() {
    let (dir, manifest) = small_bundle(|policy, training, _| {
        for node in policy["nodes"].as_object_mut().unwrap().values_mut() {
            node["constraints"]["noise_multiplier"] = json!("0");
        }
        training["server_optimizer"]["noise_multiplier"] = json!(0.0);
    });
    let out_dir = dir.path().join("never");
    let out = fedconf(&["run", manifest.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dp_gate_unmet"));
    assert!(!out_dir.exists());
}

#[test]
fn mismatched_config_is_refused() {
    let (dir, manifest) = small_bundle(|_, training, _| {
        training["server_optimizer"]["clip_norm"] = json!(2.0);
    });
    let out_dir = dir.path().join("never");
    let out = fedconf(&["run", manifest.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(!out_dir.exists());
}

#[test]
fn bad_manifest_is_a_usage_error() {
    let (dir, manifest) = small_bundle(|_, _, m| {
        m["policy"] = json!("missing.json");
    });
    assert_eq!(code(&fedconf(&["run", manifest.to_str().unwrap()])), 2);
    let junk = dir.path().join("junk.json");
    fs::write(&junk, b"[]").unwrap();
    assert_eq!(code(&fedconf(&["run", junk.to_str().unwrap()])), 2);
    let (_dir, manifest) = small_bundle(|_, _, m| {
        m["colour"] = json!("blue");
    });
    assert_eq!(code(&fedconf(&["run", manifest.to_str().unwrap()])), 2);
}

#[test]
fn idle_run_is_incomplete_but_still_exports() {
    let (dir, manifest) = small_bundle(|_, _, m| {
        m["max_ticks"] = json!(50);
        m["simulation"] = json!({ "dropout_probability": 1.0 });
    });
    let out_dir = dir.path().join("out");
    let out = fedconf(&["run", manifest.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("incomplete"));
    assert_eq!(fs::read_to_string(out_dir.join("metrics.csv")).unwrap().lines().count(), 1);
}

#[test]
fn audit_verify_detects_tampering() {
    let (dir, manifest) = small_bundle(|_, _, _| {});
    let out_dir = dir.path().join("out");
    assert_eq!(code(&fedconf(&["run", manifest.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()])), 0);
    let log = fs::read_to_string(out_dir.join("audit.jsonl")).unwrap();

    let mut lines: Vec<String> = log.lines().map(str::to_owned).collect();
    let target = 5;
    lines[target] = lines[target].replacen("\"granted\"", "\"denied\"", 1);
    assert_ne!(lines[target], log.lines().nth(target).unwrap());
    let tampered = dir.path().join("tampered.jsonl");
    fs::write(&tampered, lines.join("\n") + "\n").unwrap();
    let out = fedconf(&["audit", "verify", tampered.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains(&format!("record {target}")), "{}", stdout(&out));

    let dropped: Vec<&str> = log.lines().enumerate().filter(|(i, _)| *i != 3).map(|(_, l)| l).collect();
    let gap = dir.path().join("gap.jsonl");
    fs::write(&gap, dropped.join("\n") + "\n").unwrap();
    assert_eq!(code(&fedconf(&["audit", "verify", gap.to_str().unwrap()])), 1);

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, b"").unwrap();
    assert_eq!(code(&fedconf(&["audit", "verify", empty.to_str().unwrap()])), 0);

    let garbage = dir.path().join("garbage.jsonl");
    fs::write(&garbage, b"not json\n").unwrap();
    assert_eq!(code(&fedconf(&["audit", "verify", garbage.to_str().unwrap()])), 2);
    assert_eq!(code(&fedconf(&["audit", "verify", "/nonexistent/audit.jsonl"])), 2);
}

#[test]
fn replay_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    fs::write(&path, b"{\"tick\":1}\n").unwrap();
    assert_eq!(code(&fedconf(&["replay", path.to_str().unwrap()])), 2);
}
