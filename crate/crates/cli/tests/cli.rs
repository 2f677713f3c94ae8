use std::path::{Path, PathBuf};

use mixq_cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use mixq_core::kb::{self, ComponentId, ResourceKind};
use mixq_core::Bitwidth;
use serde_json::Value;

struct Output {
    code: i32,
    out: String,
    err: String,
}

fn mixq(args: &[&str]) -> Output {
    let argv: Vec<String> = std::iter::once("mixq").chain(args.iter().copied()).map(String::from).collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(&argv, &mut out, &mut err);
    Output { code, out: String::from_utf8(out).unwrap(), err: String::from_utf8(err).unwrap() }
}

fn ok_json(args: &[&str]) -> Value {
    let o = mixq(args);
    assert_eq!(o.code, EXIT_OK, "{args:?} failed: {}", o.err);
    serde_json::from_str(&o.out).unwrap_or_else(|e| panic!("{args:?} printed invalid JSON ({e}): {}", o.out))
}

fn asset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join(name)
}

fn golden(name: &str) -> Value {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn exported_kb(dir: &Path) -> String {
    let p = dir.join("table2.json");
    assert_eq!(mixq(&["kb", "export", p.to_str().unwrap()]).code, EXIT_OK);
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = mixq(&["search", "--n", "12", "--bogus"]);
    assert_eq!(o.code, EXIT_USAGE);
    assert!(o.err.contains("Usage"), "{}", o.err);
    assert!(o.out.is_empty());
}

#[test]
fn version_names_schema_versions() {
    let o = mixq(&["--version"]);
    assert_eq!(o.code, EXIT_OK);
    assert!(o.out.contains(env!("CARGO_PKG_VERSION")));
    assert!(o.out.contains("knowledge database schema 1"), "{}", o.out);
    assert!(o.out.contains("model format 1"), "{}", o.out);
}

#[test]
fn help_goes_to_stdout() {
    let o = mixq(&["--help"]);
    assert_eq!(o.code, EXIT_OK);
    assert!(o.out.contains("pipeline"));
}

#[test]
fn estimate_prints_luts_line() {
    let dir = tempfile::tempdir().unwrap();
    let kb = exported_kb(dir.path());
    let o = mixq(&["estimate", "--kb", &kb, "--n", "12", "--combo", "8,8,6,8,8,4,8,6,8,8"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    assert!(o.out.lines().any(|l| l == "LUTs 78.0"), "{}", o.out);

    // published as 78.0; the tenths table sums to 77.9
    let o = mixq(&["estimate", "--kb", &kb, "--n", "12", "--combo", "8,8,6,8,6,4,8,8,8,8"]);
    let luts: f64 = o.out.lines().find_map(|l| l.strip_prefix("LUTs ")).unwrap().parse().unwrap();
    assert!((luts - 78.0).abs() <= 0.5, "{luts}");
}

#[test]
fn estimate_json_matches_golden() {
    let v = ok_json(&["--json", "estimate", "--n", "12", "--combo", "6,8,6,8,6,6,8,8,8,8"]);
    assert_eq!(v, golden("estimate_n12.json"));
}

#[test]
fn estimate_rejects_bad_combo_and_uncovered_length() {
    assert_eq!(mixq(&["estimate", "--n", "12", "--combo", "8,8,8"]).code, EXIT_USAGE);
    assert_eq!(mixq(&["estimate", "--n", "12", "--combo", "8,8,8,8,8,8,8,8,8,5"]).code, EXIT_USAGE);
    let o = mixq(&["estimate", "--n", "6", "--combo", "8,8,8,8,8,8,8,8,8,8"]);
    assert_eq!(o.code, EXIT_DATA, "{}", o.err);
}

#[test]
fn search_json_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let kb = exported_kb(dir.path());
    let v = ok_json(&[
        "search", "--kb", &kb, "--n", "12", "--t-luts", "80", "--t-dram", "100", "--t-bram", "100", "--t-dsps", "100", "--top", "5", "--json",
    ]);
    assert_eq!(v["total"], 59049);
    assert_eq!(v["selected"].as_array().unwrap().len(), 5);
    assert_eq!(v, golden("search_n12.json"));
}

#[test]
fn search_output_independent_of_threads() {
    let base = ["--json", "search", "--n", "18", "--t-luts", "80", "--top", "5"];
    let one = mixq(&[&["--threads", "1"], &base[..]].concat());
    let four = mixq(&[&["--threads", "4"], &base[..]].concat());
    assert_eq!(one.code, EXIT_OK);
    assert_eq!(one.out, four.out);
    assert_eq!(mixq(&[&["--threads", "0"], &base[..]].concat()).code, EXIT_USAGE);
}

#[test]
fn search_writes_out_file_and_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.json");
    let printed = ok_json(&["--json", "search", "--n", "24", "--t-luts", "80", "--out", s(&out)]);
    let written: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(printed, written);
    assert_eq!(written["passed"], 192);

    let o = mixq(&["search", "--n", "12", "--t-luts", "80", "--histogram", "luts", "--bins", "4"]);
    assert_eq!(o.code, EXIT_OK);
    let lines: Vec<&str> = o.out.lines().collect();
    assert_eq!(lines[0], "bin_start,bin_end,count");
    let total: u64 = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 18118);
}

#[test]
fn search_validates_thresholds() {
    assert_eq!(mixq(&["search", "--n", "12", "--t-luts", "-1"]).code, EXIT_USAGE);
    assert_eq!(mixq(&["search", "--n", "12", "--t-luts", "NaN"]).code, EXIT_USAGE);
    assert_eq!(mixq(&["search", "--n", "12", "--bins", "3"]).code, EXIT_USAGE);
}

fn write_reports(dir: &Path, n: u32) {
    let db = kb::bundled();
    for b in Bitwidth::ALL {
        let mut text = format!("# n={n} b={}\ncomponent,luts,dram,bram,dsps\n", b.bits());
        for c in ComponentId::ALL {
            let vals: Vec<String> = ResourceKind::ALL.iter().map(|&r| db.lookup(n, c, r, b).unwrap().to_string()).collect();
            text.push_str(&format!("{},{}\n", c.name(), vals.join(",")));
        }
        std::fs::write(dir.join(format!("n{n}_b{}.csv", b.bits())), text).unwrap();
    }
}

#[test]
fn kb_build_validate_show_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let reports = dir.path().join("reports");
    std::fs::create_dir(&reports).unwrap();
    write_reports(&reports, 12);
    let out = dir.path().join("built.json");
    let v = ok_json(&["--json", "kb", "build", "--reports", s(&reports), "--out", s(&out)]);
    assert_eq!(v["reports"], 3);

    let v = ok_json(&["--json", "kb", "validate", s(&out)]);
    assert_eq!(v["valid"], true);
    assert_eq!(v["entries_per_seq_len"], 156);

    let built = ok_json(&["--json", "kb", "show", s(&out), "--n", "12"]);
    let bundled = ok_json(&["--json", "kb", "show", "--n", "12"]);
    assert_eq!(built, bundled);
    assert_eq!(bundled["components"]["FFN"]["bram"]["4"], 55.0);
}

#[test]
fn kb_show_filters_component() {
    let o = mixq(&["kb", "show", "--n", "12", "--component", "MHA"]);
    assert_eq!(o.code, EXIT_OK);
    assert_eq!(o.out.lines().count(), 5);
    assert!(o.out.contains("30.8"));
    assert_eq!(mixq(&["kb", "show", "--n", "12", "--component", "NOPE"]).code, EXIT_USAGE);
}

#[test]
fn kb_errors_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let kb = exported_kb(dir.path());
    let text = std::fs::read_to_string(&kb).unwrap();
    let truncated = dir.path().join("truncated.json");
    std::fs::write(&truncated, &text[..text.len() / 2]).unwrap();
    assert_eq!(mixq(&["kb", "validate", s(&truncated)]).code, EXIT_DATA);
    assert_eq!(mixq(&["kb", "validate", s(&dir.path().join("missing.json"))]).code, EXIT_DATA);

    let reports = dir.path().join("bad");
    std::fs::create_dir(&reports).unwrap();
    std::fs::write(reports.join("r.csv"), "# n=12 b=4\ncomponent,luts,dram,bram,dsps\nMHA,30.8,14.3,15.0,30.0\n").unwrap();
    let o = mixq(&["kb", "build", "--reports", s(&reports), "--out", s(&dir.path().join("x.json"))]);
    assert_eq!(o.code, EXIT_DATA);
    assert!(o.err.contains("r.csv"), "{}", o.err);
}

#[test]
fn bundled_synthetic_asset_matches_generator() {
    let text = std::fs::read_to_string(asset("synthetic.csv")).unwrap();
    assert_eq!(text, mixq_core::data::synthetic_csv(2000, 42));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    ok_json(&["--json", "synth", "--out", s(&out)]);
    assert_eq!(std::fs::read_to_string(out).unwrap(), text);
}

#[test]
fn train_quantize_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = asset("synthetic.csv");
    let float = dir.path().join("float.json");
    let report = dir.path().join("report.json");
    let small = ["--n", "6", "--d-model", "8", "--epochs", "2", "--batch-size", "64"];
    let mut args = vec!["--json", "train", "--data", s(&data), "--out", s(&float), "--report", s(&report)];
    args.extend(small);
    let t = ok_json(&args);
    assert!(t["test_rmse"].as_f64().unwrap().is_finite());
    assert_eq!(t["epochs_run"], 2);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["epochs"].as_array().unwrap().len(), 2);

    // identical inputs and seed give identical files
    let again = dir.path().join("again.json");
    let mut args2 = vec!["--json", "train", "--data", s(&data), "--out", s(&again)];
    args2.extend(small);
    ok_json(&args2);
    assert_eq!(std::fs::read(&float).unwrap(), std::fs::read(&again).unwrap());

    let q = dir.path().join("q.json");
    let v = ok_json(&["--json", "quantize", "--model", s(&float), "--data", s(&data), "--combo", "8,8,8,8,8,8,8,8,8,8", "--out", s(&q)]);
    let q_rmse = v["test_rmse"].as_f64().unwrap();
    assert!(q_rmse.is_finite());

    let e = ok_json(&["--json", "eval", "--model", s(&q), "--data", s(&data)]);
    assert_eq!(e["rmse"].as_f64().unwrap(), q_rmse);
    let all = ok_json(&["--json", "eval", "--model", s(&float), "--data", s(&data), "--all"]);
    assert!(all["pairs"].as_u64().unwrap() > e["pairs"].as_u64().unwrap());

    let f = ok_json(&["--json", "infer", "--model", s(&q), "--data", s(&data)]);
    assert_eq!(f["target"], "pm25");
    assert!(f["forecast"].as_f64().unwrap().is_finite());

    // quantizing an already quantized model is refused
    let o = mixq(&["quantize", "--model", s(&q), "--data", s(&data), "--combo", "8,8,8,8,8,8,8,8,8,8", "--out", s(&dir.path().join("qq.json"))]);
    assert_ne!(o.code, EXIT_OK);
    let o = mixq(&["eval", "--model", s(&float), "--data", s(&data), "--target", "humidity"]);
    assert_ne!(o.code, EXIT_OK);
}

#[test]
fn train_validates_flags_before_reading_data() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = dir.path().join("m.json");
    let o = mixq(&["train", "--data", s(&missing), "--out", s(&out), "--lr", "0"]);
    assert_eq!(o.code, EXIT_USAGE, "{}", o.err);
    let o = mixq(&["train", "--data", s(&missing), "--out", s(&out), "--test-fraction", "1.5"]);
    assert_eq!(o.code, EXIT_USAGE, "{}", o.err);
    let o = mixq(&["train", "--data", s(&missing), "--out", s(&out)]);
    assert_eq!(o.code, EXIT_DATA, "{}", o.err);
    assert!(!out.exists());
}

#[test]
fn pipeline_top_zero_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let o = mixq(&["pipeline", "--data", s(&asset("synthetic.csv")), "--top", "0", "--run-dir", s(&run_dir)]);
    assert_eq!(o.code, EXIT_USAGE);
    assert!(!run_dir.exists());
}

#[test]
fn pipeline_with_no_survivors_reports_empty() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let v = ok_json(&[
        "--json", "pipeline", "--data", s(&asset("synthetic.csv")), "--t-luts", "0", "--t-dram", "0", "--t-bram", "0", "--t-dsps", "0", "--run-dir",
        s(&run_dir),
    ]);
    assert_eq!(v["reduction_pct"], 100.0);
    assert_eq!(v["passed"], 0);
    assert!(v["candidates"].as_array().unwrap().is_empty());
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
}

#[test]
fn pipeline_smoke_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let data = asset("synthetic.csv");
    let v = ok_json(&[
        "--json", "pipeline", "--data", s(&data), "--n", "12", "--t-luts", "80", "--top", "2", "--epochs", "2", "--d-model", "8", "--batch-size", "64",
        "--runs", s(&runs),
    ]);
    let cands = v["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 2);
    for c in cands {
        assert!(c["test_rmse"].as_f64().unwrap().is_finite());
        assert!(c["estimate"]["luts"].as_f64().unwrap() <= 80.0);
    }

    let run_dir = PathBuf::from(v["run_dir"].as_str().unwrap());
    assert_eq!(run_dir.parent().unwrap(), runs);
    let name = run_dir.file_name().unwrap().to_str().unwrap();
    assert_eq!(name.len(), "20260101T000000Z-".len() + 12, "{name}");

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    for f in manifest["outputs"].as_array().unwrap() {
        assert!(run_dir.join(f.as_str().unwrap()).exists(), "{f}");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("report.json")).unwrap()).unwrap();
    let mut printed = v.clone();
    printed.as_object_mut().unwrap().remove("run_dir");
    assert_eq!(report, printed);
}

#[test]
fn pipeline_failure_names_stage_and_keeps_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiny.csv");
    std::fs::write(&data, "a,b\n1,2\n3,4\n5,6\n").unwrap();
    let run_dir = dir.path().join("run");
    let o = mixq(&["pipeline", "--data", s(&data), "--t-luts", "80", "--top", "1", "--run-dir", s(&run_dir)]);
    assert_eq!(o.code, EXIT_DATA, "{}", o.err);
    assert!(o.err.contains("stage `data` failed"), "{}", o.err);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "failed");
    assert_eq!(manifest["stages"].as_array().unwrap().last().unwrap()["name"], "data");
    assert!(run_dir.join("search.json").exists());
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_mixq");
    let st = std::process::Command::new(bin).args(["estimate", "--wat"]).output().unwrap();
    assert_eq!(st.status.code(), Some(EXIT_USAGE));
    let st = std::process::Command::new(bin).args(["--json", "estimate", "--n", "12", "--combo", "6,8,6,8,6,6,8,8,8,8"]).output().unwrap();
    assert_eq!(st.status.code(), Some(EXIT_OK));
    let v: Value = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(v, golden("estimate_n12.json"));
    let st = std::process::Command::new(bin).args(["kb", "validate", "/nonexistent/kb.json"]).output().unwrap();
    assert_eq!(st.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&st.stderr).starts_with("error: "));
}

#[test]
fn training_is_thread_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let data = asset("synthetic.csv");
    let train = |t: &str| {
        let out = dir.path().join(format!("t{t}.json"));
        ok_json(&["--json", "--threads", t, "train", "--data", s(&data), "--n", "6", "--d-model", "8", "--epochs", "1", "--batch-size", "64", "--out", s(&out)]);
        std::fs::read(out).unwrap()
    };
    assert_eq!(train("1"), train("4"));
}
