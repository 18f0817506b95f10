//! Command-line behaviour on the bundled fixture corpus.

mod common;

use std::process::Command;

use common::{data_dir, edited_config, sarcex, toy_config, workspace};

fn binary(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sarcex")).args(args).output().unwrap()
}

#[test]
fn stats_table_matches_hand_counts() {
    let dataset = data_dir().join("dataset");
    let out = sarcex(&["stats", "--dataset", dataset.to_str().unwrap()]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let rows: Vec<Vec<&str>> = out.stdout.lines().map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows[0][0], "split");
    assert_eq!(rows[1], ["train", "3", "5.33", "16", "6.33", "16", "2.00", "6"]);
    assert_eq!(rows[2], ["val", "1", "5.00", "5", "6.00", "6", "2.00", "2"]);
    assert_eq!(rows[3], ["test", "2", "6.00", "12", "6.00", "10", "2.00", "4"]);
    assert_eq!(rows[4], ["total", "6", "5.50", "31", "6.17", "29", "2.00", "11"]);
}

#[test]
fn exit_codes() {
    assert_eq!(binary(&["--help"]).status.code(), Some(0));
    assert_eq!(binary(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(binary(&["generate"]).status.code(), Some(1));
    assert_eq!(binary(&["--jobs", "0", "stats", "--dataset", "."]).status.code(), Some(1));

    let missing = binary(&["stats", "--dataset", "/nonexistent/sarcex"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("train.jsonl"));

    let dir = workspace();
    let bad = edited_config(dir.path(), "bad.toml", &[], "[model]\nwidht = 3\n");
    assert_eq!(sarcex(&["train", "-c", bad.to_str().unwrap()]).code, 2);
    let unknown_split = sarcex(&["enrich", "-c", toy_config(dir.path(), "").to_str().unwrap(), "--split", "dev"]);
    assert_eq!(unknown_split.code, 1, "{}", unknown_split.stderr);
}

#[test]
fn commands_before_enrich_fail_cleanly() {
    let dir = workspace();
    let config = toy_config(dir.path(), "");
    let out = sarcex(&["train", "-c", config.to_str().unwrap()]);
    assert_ne!(out.code, 0);
    assert!(out.stderr.contains("enrich"), "{}", out.stderr);
}

#[test]
fn enrich_is_deterministic_and_names_missing_tokens() {
    let dir = workspace();
    let config = toy_config(dir.path(), "");
    let path = config.to_str().unwrap();
    let first = sarcex(&["enrich", "-c", path]);
    assert_eq!(first.code, 0, "{}", first.stderr);
    assert!(first.stdout.contains("rattlesnake"), "{}", first.stdout);
    assert!(first.stdout.contains("remote fetches: 0, transport calls: 0"));
    let read = |s: &str| std::fs::read(dir.path().join("work/enriched").join(format!("{s}.jsonl"))).unwrap();
    let before = [read("train"), read("val"), read("test")];
    let second = sarcex(&["enrich", "-c", path]);
    assert_eq!(second.code, 0);
    assert_eq!([read("train"), read("val"), read("test")], before);

    let t1: serde_json::Value = serde_json::from_str(std::str::from_utf8(&before[0]).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(t1["id"], "t1");
    let tokens: Vec<&str> = t1["knowledge"]["tokens"].as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect();
    assert_eq!(&tokens[..4], ["loving", "this", "weather", "today"]);
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = workspace();
    let config = toy_config(dir.path(), "");
    let c = config.to_str().unwrap();
    let work = dir.path().join("work");

    assert_eq!(sarcex(&["enrich", "-c", c]).code, 0);
    let graphs = sarcex(&["build-graph", "-c", c]);
    assert_eq!(graphs.code, 0, "{}", graphs.stderr);
    let graph_file = std::fs::read_to_string(work.join("graphs/train.full.jsonl")).unwrap();
    let g: serde_json::Value = serde_json::from_str(graph_file.lines().next().unwrap()).unwrap();
    assert!(g["edges"].as_array().unwrap().iter().all(|e| e["u"].as_u64() < e["v"].as_u64()));

    let train = sarcex(&["train", "-c", c]);
    assert_eq!(train.code, 0, "{}", train.stderr);
    let losses = std::fs::read_to_string(work.join("loss/full.csv")).unwrap();
    let mut lines = losses.lines();
    assert_eq!(lines.next(), Some("step,epoch,loss,tokens"));
    let values: Vec<f64> = lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 40);
    assert!(values.last().unwrap() < &values[0]);

    let a = work.join("a.jsonl");
    let b = work.join("b.jsonl");
    for p in [&a, &b] {
        let out = sarcex(&["generate", "-c", c, "--beam", "1", "--out", p.to_str().unwrap()]);
        assert_eq!(out.code, 0, "{}", out.stderr);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 2);

    let eval = sarcex(&["evaluate", "-c", c, "--generations", a.to_str().unwrap()]);
    assert_eq!(eval.code, 0, "{}", eval.stderr);
    assert!(eval.stdout.contains("BLEU-1") || eval.stdout.contains("B1"), "{}", eval.stdout);
    let reports = work.join("reports");
    let csv = std::fs::read_to_string(reports.join("test.full.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(std::fs::read_to_string(reports.join("test.full.samples.jsonl")).unwrap().lines().count(), 2);

    let clear = sarcex(&["cache", "clear", "-c", c]);
    assert_eq!(clear.code, 0);
}

#[test]
fn incompatible_checkpoint_is_rejected() {
    let dir = workspace();
    let config = toy_config(dir.path(), "");
    let c = config.to_str().unwrap();
    assert_eq!(sarcex(&["enrich", "-c", c]).code, 0);
    assert_eq!(sarcex(&["train", "-c", c]).code, 0);
    let checkpoint = dir.path().join("work/checkpoints/full.json");
    assert!(checkpoint.exists());

    let wider = edited_config(dir.path(), "wider.toml", &[("width = 16", "width = 8")], "");
    let out = sarcex(&["generate", "-c", wider.to_str().unwrap(), "--checkpoint", checkpoint.to_str().unwrap()]);
    assert_eq!(out.code, 2, "{}", out.stderr);
    assert!(out.stderr.to_lowercase().contains("incompatible"), "{}", out.stderr);

    std::fs::write(&checkpoint, "{\"not\": \"a checkpoint\"}").unwrap();
    let out = sarcex(&["generate", "-c", c]);
    assert_eq!(out.code, 2, "{}", out.stderr);
}
