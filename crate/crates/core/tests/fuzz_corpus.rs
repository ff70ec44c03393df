//! Replays the checked-in fuzz seeds through the same entry points the
//! fuzz targets drive, so the seeds stay meaningful as formats evolve.

use std::fs;
use std::path::PathBuf;

use kvrefresh::harness::parse_run_config;
use kvrefresh::model::{read_weights, write_weights};
use kvrefresh::tasks::chainkey::{evaluate_chain, generate_chain_instance, parse_eval_line, parse_instance_line};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn weights_seeds() {
    for (name, data) in seeds("weights_file") {
        match read_weights(&data) {
            Ok((c, w)) => {
                assert!(name.contains("tiny"));
                assert_eq!(write_weights(&c, &w).unwrap(), data);
            }
            Err(_) => assert!(name.contains("truncated")),
        }
    }
}

#[test]
fn run_config_seeds() {
    for (name, data) in seeds("run_config") {
        let text = String::from_utf8(data).unwrap();
        let (head, body) = text.split_once('\n').unwrap_or(("", &text));
        let overrides: Vec<(String, String)> = head
            .split_once('=')
            .map(|(k, v)| vec![(k.to_string(), v.to_string())])
            .unwrap_or_default();
        let config = parse_run_config(Some(body), &overrides).unwrap_or_else(|e| panic!("{name}: {e}"));
        config.validate().unwrap();
    }
}

#[test]
fn chain_output_seeds() {
    let inst = generate_chain_instance(20, 2, 5, 0).unwrap();
    let scores: Vec<f64> = seeds("chain_output")
        .into_iter()
        .map(|(_, d)| evaluate_chain(&inst, &String::from_utf8_lossy(&d)).score)
        .collect();
    // broken, empty, gold
    assert_eq!(scores, vec![0.4, 0.0, 1.0]);
}

#[test]
fn eval_jsonl_seeds() {
    for (name, data) in seeds("eval_jsonl") {
        let line = String::from_utf8(data).unwrap();
        if name.contains("instance") {
            parse_instance_line(line.trim()).unwrap();
        } else {
            parse_eval_line(line.trim()).unwrap();
        }
    }
}
