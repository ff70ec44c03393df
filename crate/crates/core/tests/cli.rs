use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kvrefresh::harness::{compare, read_report, Report};

fn kvrefresh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvrefresh"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

fn run_to(dir: &Path, extra: &[&str]) -> Report {
    let mut args = vec!["run", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = kvrefresh(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    read_report(&dir.join("report.json")).unwrap()
}

#[test]
fn run_writes_trace_and_report_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let flags = [
        "--policy.kind",
        "refreshkv",
        "--schedule.mode",
        "qc",
        "--schedule.qc-stride",
        "5",
        "--schedule.threshold",
        "0.85",
        "--n_generate",
        "20",
    ];
    let a = run_to(&tmp.path().join("a"), &flags);
    run_to(&tmp.path().join("b"), &flags);
    let ta = fs::read(tmp.path().join("a/trace.jsonl")).unwrap();
    let tb = fs::read(tmp.path().join("b/trace.jsonl")).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(String::from_utf8(ta).unwrap().lines().count(), 20);
    assert_eq!(a.config.schedule.qc_stride, 5);
    assert_eq!(a.totals.steps, 20);
    assert!(a.cost_model.contains("n_query_heads*4"));
}

#[test]
fn config_file_and_fixed_stride_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"policy": {"kind": "refreshkv"}, "schedule": {"mode": "fixed", "stride": 10},
            "n_generate": 100}"#,
    )
    .unwrap();
    let r = run_to(&tmp.path().join("out"), &["--config", cfg.to_str().unwrap()]);
    assert_eq!(r.effective_strides, vec![Some(10.0), Some(10.0)]);
}

#[test]
fn compare_self_and_vanilla() {
    let tmp = tempfile::tempdir().unwrap();
    let v = tmp.path().join("v");
    let r = tmp.path().join("r");
    run_to(&v, &["--policy.kind", "vanilla", "--n_generate", "30"]);
    run_to(&r, &["--policy.kind", "refreshkv", "--n_generate", "30"]);
    let vr = read_report(&v.join("report.json")).unwrap();
    let rr = read_report(&r.join("report.json")).unwrap();

    let same = compare(&[vr.clone(), vr.clone()]).unwrap();
    assert!(same.rows.iter().all(|row| row.flops_ratio == 1.0 && row.bytes_ratio == 1.0));

    let cmp = compare(&[rr, vr]).unwrap();
    assert!(cmp.rows[0].bytes_ratio < 1.0);
    assert_eq!(cmp.baseline, "vanilla");

    let csv = tmp.path().join("cmp.csv");
    let out = kvrefresh(&[
        "compare",
        r.join("report.json").to_str().unwrap(),
        v.join("report.json").to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("policy,quality,attention_flops"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn compare_refuses_mismatched_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_to(&a, &["--n_generate", "4", "--seed", "1"]);
    run_to(&b, &["--n_generate", "4", "--seed", "2"]);
    let out = kvrefresh(&[
        "compare",
        a.join("report.json").to_str().unwrap(),
        b.join("report.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("task seeds"));
}

#[test]
fn nll_csv_for_perplexity_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let task = r#"{"task": {"kind": "lm", "length": 160, "tail": 33, "structure": "repeated_motif"}}"#;
    let cfg = tmp.path().join("lm.json");
    fs::write(&cfg, task).unwrap();
    let mut paths = Vec::new();
    for kind in ["vanilla", "snapkv", "refreshkv"] {
        let d = tmp.path().join(kind);
        let r = run_to(&d, &["--config", cfg.to_str().unwrap(), "--policy.kind", kind]);
        assert_eq!(r.nll.as_ref().unwrap().len(), 33);
        assert_eq!(r.totals.steps, 32);
        paths.push(d.join("report.json").to_str().unwrap().to_string());
    }
    let csv = tmp.path().join("nll.csv");
    let mut args = vec!["compare"];
    args.extend(paths.iter().map(String::as_str));
    args.extend(["--nll-csv", csv.to_str().unwrap()]);
    assert_eq!(code(&kvrefresh(&args)), 0);
    let text = fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "token,vanilla,snapkv,refreshkv");
    assert_eq!(lines.len(), 34);
    assert!(lines[1..].iter().all(|l| l.split(',').nth(1) == Some("1")));
}

#[test]
fn self_check_passes() {
    let out = kvrefresh(&["self-check"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5);
    let tmp = tempfile::tempdir().unwrap();
    let out = kvrefresh(&[
        "run",
        "--self-check",
        "--out",
        tmp.path().to_str().unwrap(),
        "--n_generate",
        "8",
    ]);
    assert_eq!(code(&out), 0);
}

#[test]
fn exit_codes() {
    // configuration errors
    assert_eq!(code(&kvrefresh(&["run", "--policy.kind", "lru"])), 1);
    assert_eq!(code(&kvrefresh(&["run", "--schedule.qc-stride", "0"])), 1);
    assert_eq!(code(&kvrefresh(&["run", "--policy.k"])), 1);
    assert_eq!(code(&kvrefresh(&["bogus"])), 1);
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{not json").unwrap();
    assert_eq!(code(&kvrefresh(&["run", "--config", bad.to_str().unwrap()])), 1);
    // i/o errors
    assert_eq!(code(&kvrefresh(&["run", "--config", "/nonexistent/run.json"])), 3);
    assert_eq!(
        code(&kvrefresh(&["compare", "/nonexistent/a.json", "/nonexistent/b.json"])),
        3
    );
    assert_eq!(code(&kvrefresh(&["--help"])), 0);
}

#[test]
fn chainkey_generate_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let inst = tmp.path().join("inst.jsonl");
    let out = kvrefresh(&[
        "gen-chainkey",
        "--n-keys",
        "20",
        "--T",
        "5",
        "--count",
        "3",
        "--seed",
        "10",
        "--out",
        inst.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(&inst).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for field in ["prompt", "keys", "successor_map", "T", "seed"] {
        assert!(lines[0].get(field).is_some(), "{field}");
    }
    // walk the successor map from the first key
    let first = &lines[0];
    let map = first["successor_map"].as_object().unwrap();
    let mut key = first["keys"][0].as_str().unwrap().to_string();
    let mut chain = vec![key.clone()];
    for _ in 1..5 {
        key = map[&key].as_str().unwrap().to_string();
        chain.push(key.clone());
    }
    let outputs = tmp.path().join("out.jsonl");
    fs::write(
        &outputs,
        format!(
            "{}\n{}\n",
            serde_json::json!({"instance_id": first["instance_id"], "output_text": chain.join(", ")}),
            serde_json::json!({"instance_id": lines[1]["instance_id"], "output_text": ""}),
        ),
    )
    .unwrap();
    let out = kvrefresh(&[
        "eval-chainkey",
        "--instances",
        inst.to_str().unwrap(),
        "--outputs",
        outputs.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let scores: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(scores[0]["score"], 1.0);
    assert_eq!(scores[1]["score"], 0.0);
}

#[test]
fn chainkey_run_with_oracle_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("ck.json");
    fs::write(
        &cfg,
        r#"{"task": {"kind": "chainkey", "n_keys": 12, "T": 6, "W": 2, "oracle": true},
            "policy": {"kind": "h2o"}}"#,
    )
    .unwrap();
    let r = run_to(&tmp.path().join("o"), &["--config", cfg.to_str().unwrap()]);
    assert_eq!(r.chain_score.unwrap().score, 1.0);
    assert!(r.prompt_len > 12 * 13);
}
