//! End-to-end tests of the binary: golden outputs, exit codes, and the
//! reproducibility contract of result files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_catt-sim"))
}

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn shipped_fixtures_match_generator() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen-scenarios", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for sub in ["", "geometries", "profiles"] {
        let shipped = scenarios_dir().join(sub);
        let generated = dir.path().join(sub);
        for entry in fs::read_dir(&shipped).unwrap() {
            let entry = entry.unwrap();
            if !entry.file_type().unwrap().is_file() {
                continue;
            }
            let name = entry.file_name();
            let a = fs::read(entry.path()).unwrap();
            let b = fs::read(generated.join(&name))
                .unwrap_or_else(|_| panic!("{name:?} not generated"));
            assert_eq!(a, b, "shipped {name:?} differs from generator output");
        }
    }
}

#[test]
fn scan_reports_victims_and_respects_blacklisting() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("scan.json");
    let geometry = scenarios_dir().join("geometries/s1.json");
    let profile = scenarios_dir().join("profiles/s1.json");
    let out = run(&[
        "scan",
        "--geometry",
        geometry.to_str().unwrap(),
        "--profile",
        profile.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("133 victim frame(s)"));
    let parsed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(parsed["victim_pfns"].as_array().unwrap().len(), 133);

    let out = run(&[
        "scan",
        "--geometry",
        geometry.to_str().unwrap(),
        "--profile",
        profile.to_str().unwrap(),
        "--defense",
        "bcatt",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("0 victim frame(s)"));
}

#[test]
fn scan_empty_profile_gives_empty_list() {
    let dir = tempfile::tempdir().unwrap();
    let geometry = scenarios_dir().join("geometries/calib.json");
    // an empty profile bound to the calib geometry
    let mapper = catt_sim::scenario::load_geometry(&geometry)
        .unwrap()
        .mapper()
        .unwrap();
    let profile = catt_sim::fault::VulnerabilityProfile::empty(&mapper);
    let profile_path = dir.path().join("empty.json");
    catt_sim::fault::store_profile(&profile, &profile_path).unwrap();
    let out_path = dir.path().join("scan.json");
    let out = run(&[
        "scan",
        "--geometry",
        geometry.to_str().unwrap(),
        "--profile",
        profile_path.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let parsed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(parsed["victim_pfns"].as_array().unwrap().len(), 0);
}

#[test]
fn scan_digest_mismatch_exits_3_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("scan.json");
    let out = run(&[
        "scan",
        "--geometry",
        scenarios_dir().join("geometries/calib.json").to_str().unwrap(),
        "--profile",
        scenarios_dir().join("profiles/s1.json").to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(!out_path.exists());
}

#[test]
fn blacklist_prints_overhead_row_and_extends_map() {
    let dir = tempfile::tempdir().unwrap();
    let geometry = scenarios_dir().join("geometries/s1.json");
    let scan_path = dir.path().join("scan.json");
    let out = run(&[
        "scan",
        "--geometry",
        geometry.to_str().unwrap(),
        "--profile",
        scenarios_dir().join("profiles/s1.json").to_str().unwrap(),
        "--out",
        scan_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);

    let base_path = dir.path().join("base.json");
    fs::write(
        &base_path,
        "[{\"base\":\"0x0\",\"length\":\"0x4000000\",\"kind\":\"usable\"}]",
    )
    .unwrap();
    let out_map = dir.path().join("extended.json");
    let out = run(&[
        "blacklist",
        "--geometry",
        geometry.to_str().unwrap(),
        "--scan-output",
        scan_path.to_str().unwrap(),
        "--base-map",
        base_path.to_str().unwrap(),
        "--out-map",
        out_map.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        stdout(&out),
        "blacklisted        total   overhead\n        133        16384    0.8118%\n"
    );
    let map = catt_sim::bcatt::MemoryMap::load(&out_map).unwrap();
    assert_eq!(
        map.total_bytes() - map.usable_bytes(),
        133 * 4096,
        "extended map reserves exactly the victim frames"
    );

    // a scan output naming an impossible frame is rejected
    let mut scan: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&scan_path).unwrap()).unwrap();
    scan["victim_pfns"] = serde_json::json!([999_999]);
    fs::write(&scan_path, scan.to_string()).unwrap();
    let out = run(&[
        "blacklist",
        "--geometry",
        geometry.to_str().unwrap(),
        "--scan-output",
        scan_path.to_str().unwrap(),
        "--base-map",
        base_path.to_str().unwrap(),
        "--out-map",
        out_map.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn blacklist_of_empty_scan_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let geometry = scenarios_dir().join("geometries/calib.json");
    let mapper = catt_sim::scenario::load_geometry(&geometry)
        .unwrap()
        .mapper()
        .unwrap();
    let profile = catt_sim::fault::VulnerabilityProfile::empty(&mapper);
    let profile_path = dir.path().join("empty.json");
    catt_sim::fault::store_profile(&profile, &profile_path).unwrap();
    let scan_path = dir.path().join("scan.json");
    run(&[
        "scan",
        "--geometry",
        geometry.to_str().unwrap(),
        "--profile",
        profile_path.to_str().unwrap(),
        "--out",
        scan_path.to_str().unwrap(),
    ]);
    let base_path = dir.path().join("base.json");
    fs::write(
        &base_path,
        "[{\"base\":\"0x0\",\"length\":\"0x200000\",\"kind\":\"usable\"}]",
    )
    .unwrap();
    let out_map = dir.path().join("extended.json");
    let out = run(&[
        "blacklist",
        "--geometry",
        geometry.to_str().unwrap(),
        "--scan-output",
        scan_path.to_str().unwrap(),
        "--base-map",
        base_path.to_str().unwrap(),
        "--out-map",
        out_map.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let before = catt_sim::bcatt::MemoryMap::load(&base_path).unwrap();
    let after = catt_sim::bcatt::MemoryMap::load(&out_map).unwrap();
    assert_eq!(before.regions(), after.regions());
}

fn strip_timestamp(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v["manifest"]
        .as_object_mut()
        .unwrap()
        .remove("created_unix");
    v
}

#[test]
fn attack_results_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenarios_dir().join("s1-unprotected.json");
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out_path in [&a, &b] {
        let out = run(&[
            "attack",
            "--scenario",
            scenario.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(strip_timestamp(&a), strip_timestamp(&b));
    let result = strip_timestamp(&a);
    assert!(result["result"]["successes"].as_u64().unwrap() > 0);
}

#[test]
fn report_merges_results_and_rejects_mixed_digests() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for name in ["s1-unprotected", "s1-bcatt", "s1-gcatt-split"] {
        let path = dir.path().join(format!("{name}.json"));
        let out = run(&[
            "attack",
            "--scenario",
            scenarios_dir().join(format!("{name}.json")).to_str().unwrap(),
            "--out",
            path.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
        paths.push(path);
    }
    let args: Vec<&str> = std::iter::once("report")
        .chain(paths.iter().map(|p| p.to_str().unwrap()))
        .collect();
    let out = run(&args);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4, "header plus one row per input:\n{text}");
    assert!(lines[0].starts_with("defense"));
    assert!(lines[1].starts_with("none"));
    assert!(lines[2].starts_with("bcatt"));
    assert!(lines[3].starts_with("gcatt-split"));
    assert!(lines[2].contains("0.8118%"));
    assert!(lines[3].contains("0.195%"));

    // a result from a different geometry cannot be merged
    let calib = dir.path().join("calib.json");
    let mut v = strip_timestamp(&paths[0]);
    v["manifest"]["geometry_digest"] = serde_json::json!("0000");
    v["manifest"]["created_unix"] = serde_json::json!(0);
    fs::write(&calib, v.to_string()).unwrap();
    let out = run(&[
        "report",
        paths[0].to_str().unwrap(),
        calib.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn alloc_sim_writes_replayable_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace_path = dir.path().join("trace.txt");
    let out = run(&[
        "alloc-sim",
        "--geometry",
        scenarios_dir().join("geometries/calib.json").to_str().unwrap(),
        "--defense",
        "gcatt-dynamic",
        "--seed",
        "9",
        "--ops",
        "2000",
        "--out",
        trace_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("audits passed"));
    let trace = fs::read_to_string(&trace_path).unwrap();
    assert!(!trace.trim().is_empty());
    for line in trace.lines() {
        let ok = (line.starts_with("alloc ")
            && (line.ends_with("OOM") || line.contains(" -> ")))
            || line.starts_with("free ");
        assert!(ok, "unexpected trace line: {line}");
    }
}

#[test]
fn thread_cap_env_is_validated() {
    let out = bin()
        .env("CATT_SIM_THREADS", "zero")
        .args(["report", "nonexistent.json"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);

    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("a.json");
    let out = bin()
        .env("CATT_SIM_THREADS", "1")
        .args([
            "attack",
            "--scenario",
            scenarios_dir().join("s1-unprotected.json").to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_input_exits_2() {
    let out = run(&["attack", "--scenario", "nope.json", "--out", "x.json"]);
    assert_eq!(code(&out), 2);
}
