//! The binary end to end on synthetic fixtures.

mod common;

use std::collections::HashMap;
use std::fs;
use std::time::Instant;

use common::{build, primary_outputs, run_pipeline, Options, LLMS, PIPELINE_TRAIN};
use idiorank::corpus::parse_dataset;
use idiorank::embedstore::{EmbeddingStore, Role};
use idiorank::ranker::RankResult;
use serde_json::Value;

fn pipeline_fixture() -> common::Fixture {
    build(Options {
        extra_config: PIPELINE_TRAIN.into(),
        ..Options::default()
    })
}

fn read_json(path: &std::path::Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pipeline_writes_artifacts_and_skips_on_rerun() {
    let fx = pipeline_fixture();
    run_pipeline(&fx, "a");

    let rank = fs::read_to_string(fx.run_path("a", "rank/ci.gpt-4.synth.test.jsonl")).unwrap();
    assert_eq!(rank.lines().count(), 14);
    let types = fs::read_to_string(fx.run_path("a", "llm/gpt-4/types-test.jsonl")).unwrap();
    assert_eq!(types.lines().count(), 14);
    let queries = fs::read_to_string(fx.run_path("a", "llm/gpt-4/queries-test.jsonl")).unwrap();
    assert_eq!(queries.lines().count(), 14);
    assert!(fx
        .run_path("a", "heads/gpt-4.synth/checkpoint.json")
        .exists());

    let manifest = read_json(&fx.run_path("a", "heads/gpt-4.synth/manifest.json"));
    assert_eq!(manifest["params"]["config"]["k_soft"], 10);
    assert_eq!(manifest["params"]["config"]["batch_size"], 16);
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["inputs"].as_object().unwrap().len() >= 4);
    assert!(manifest["created"].is_string());

    let table = fs::read_to_string(fx.run_path("a", "report/report.txt")).unwrap();
    for block in ["[CI]", "[CIC]", "[CI-F]"] {
        assert!(table.contains(block), "{table}");
    }
    assert!(
        table.lines().any(|l| l.starts_with("- ")),
        "baseline row missing:\n{table}"
    );
    assert!(table.contains("Ensemble"));
    let csv = fs::read_to_string(fx.run_path("a", "report/type-detection.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + LLMS.len());

    let again = fx.ok(
        "a",
        &[
            "rank", "--store", "synth", "--split", "test", "--llm", "gpt-4",
        ],
    );
    assert!(again.starts_with("up to date"), "{again}");
    let again = fx.ok("a", &["train-head", "--store", "synth", "--llm", "gpt-4"]);
    assert!(again.starts_with("up to date"), "{again}");
    let forced = fx.ok(
        "a",
        &[
            "--force", "rank", "--store", "synth", "--split", "test", "--llm", "gpt-4",
        ],
    );
    assert!(forced.starts_with("wrote"), "{forced}");
}

#[test]
fn two_runs_are_byte_identical() {
    let fx = pipeline_fixture();
    run_pipeline(&fx, "first");
    run_pipeline(&fx, "second");
    let (a, b) = (
        primary_outputs(&fx, "first"),
        primary_outputs(&fx, "second"),
    );
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(v == &b[k], "{k} differs");
    }
}

#[test]
fn missing_prerequisites_name_the_producing_command() {
    let fx = pipeline_fixture();
    let out = fx.cli("x", &["train-head", "--store", "synth", "--llm", "gpt-4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("idiorank build-triplets"));

    let out = fx.cli("x", &["meanings", "--llm", "gpt-4", "--split", "test"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("idiorank classify"));

    let out = fx.cli("x", &["project", "--store", "synth", "--llm", "gpt-4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("idiorank train-head"));

    let out = fx.cli("x", &["rank", "--store", "synth", "--split", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("idiorank ingest"));
}

#[test]
fn exit_codes_by_error_class() {
    let fx = build(Options {
        extra_config:
            "[llm.remote]\nbase_url = \"http://127.0.0.1:9\"\nmax_attempts = 1\ntimeout_secs = 2\n"
                .into(),
        ..Options::default()
    });
    // Invalid temperature: validation.
    fx.ok(
        "x",
        &[
            "build-triplets",
            "--store",
            "synth",
            "--llm",
            "gpt-4",
            "--k-soft",
            "10",
        ],
    );
    let out = fx.cli(
        "x",
        &[
            "train-head",
            "--store",
            "synth",
            "--llm",
            "gpt-4",
            "--k-soft",
            "10",
            "--tau",
            "0",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // Nothing listens on the discard port: transport.
    let out = fx.cli("x", &["classify", "--llm", "remote", "--split", "val"]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // A zero query vector: numerical.
    let mut store = EmbeddingStore::read(&fx.path("stores/synth.emb.jsonl")).unwrap();
    let key = "val000/query/gpt-4";
    let dim = store.dim();
    let mut zeroed = EmbeddingStore::new(store.encoder().to_string(), dim);
    for r in store.records() {
        let mut r = r.clone();
        if r.key == key {
            r.vector = vec![0.0; dim];
        }
        zeroed.insert(r).unwrap();
    }
    store = zeroed;
    fs::create_dir_all(fx.run_path("x", "stores")).unwrap();
    store
        .write(&fx.run_path("x", "stores/zero.emb.jsonl"))
        .unwrap();
    let out = fx.cli(
        "x",
        &[
            "rank", "--store", "zero", "--split", "val", "--llm", "gpt-4",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // Unknown flag: clap's usage error.
    let out = fx.cli("x", &["rank", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

fn spearman(pred: &[String], gold: &[String]) -> f64 {
    let d2: f64 = pred
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let j = gold.iter().position(|g| g == id).unwrap();
            ((i as f64) - (j as f64)).powi(2)
        })
        .sum();
    1.0 - 6.0 * d2 / 120.0
}

#[test]
fn eval_matches_hand_computed_metrics() {
    let fx = pipeline_fixture();
    fx.ok("e", &["rank", "--store", "synth", "--split", "test"]);
    let rank_file = "runs/e/rank/ci.baseline.synth.test.jsonl";
    fx.ok("e", &["eval", "--rank", rank_file]);
    let got = read_json(&fx.run_path("e", "eval/ci.baseline.synth.test.json"));
    assert_eq!(got["key"]["llm"], Value::Null);
    assert_eq!(got["split"], "test");

    let dataset = parse_dataset(&fs::read_to_string(fx.path("data/test.json")).unwrap()).unwrap();
    let golds: HashMap<String, Vec<String>> = dataset
        .samples
        .iter()
        .map(|s| (s.sample_id.clone(), s.gold_order.clone().unwrap()))
        .collect();
    let results: Vec<RankResult> = fs::read_to_string(fx.path(rank_file))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let n = results.len() as f64;
    let (mut acc, mut corr, mut dcg) = (0.0, 0.0, 0.0);
    for r in &results {
        let gold = &golds[&r.sample_id];
        acc += f64::from(u8::from(r.order[0] == gold[0]));
        corr += spearman(&r.order, gold);
        for (i, id) in r.order.iter().enumerate() {
            let gain = [3.0, 1.0, 0.0, 0.0, 0.0][gold.iter().position(|g| g == id).unwrap()];
            dcg += gain / ((i + 2) as f64).log2();
        }
    }
    let m = &got["metrics"];
    assert_eq!(m["n"], 14);
    assert!((m["acc"].as_f64().unwrap() - acc / n).abs() < 1e-12);
    assert!((m["corr"].as_f64().unwrap() - corr / n).abs() < 1e-12);
    assert!((m["dcg"].as_f64().unwrap() - dcg / n).abs() < 1e-12);
}

#[test]
fn ingest_tsv_and_split() {
    let fx = build(Options::default());
    let mut tsv = String::from("compound\tsubset\tsentence_type\tsentence\texpected_order");
    for k in 1..=5 {
        tsv.push_str(&format!("\timage{k}_name\timage{k}_caption"));
    }
    tsv.push('\n');
    for i in 0..70 {
        let names: Vec<String> = (1..=5).map(|k| format!("{i}_{k}.png")).collect();
        let order = format!(
            "[{}]",
            names
                .iter()
                .rev()
                .map(|n| format!("'{n}'"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        let kind = if i % 2 == 0 { "idiomatic" } else { "literal" };
        tsv.push_str(&format!(
            "word {i}\tTrain\t{kind}\tThe word {i} appears here.\t{order}"
        ));
        for n in &names {
            tsv.push_str(&format!("\t{n}\tcaption for {n}"));
        }
        tsv.push('\n');
    }
    fs::write(fx.path("en_train.tsv"), tsv).unwrap();
    let out = fx.ok(
        "t",
        &[
            "ingest",
            "--input",
            "en_train.tsv",
            "--language",
            "en",
            "--split",
            "--split-names",
            "tr,va,te",
        ],
    );
    assert!(
        out.contains("49 samples") && out.contains("7 samples") && out.contains("14 samples"),
        "{out}"
    );
    let part =
        parse_dataset(&fs::read_to_string(fx.run_path("t", "data/te.json")).unwrap()).unwrap();
    assert_eq!(part.samples.len(), 14);
    // The ingested split is loadable by later commands.
    let out = fx.cli(
        "t",
        &[
            "build-triplets",
            "--store",
            "synth",
            "--llm",
            "gpt-4",
            "--split",
            "tr",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(2),
        "samples are absent from the store"
    );

    let out = fx.cli("t", &["ingest", "--input", "en_train.tsv", "--name", "x"]);
    assert_eq!(out.status.code(), Some(2), "TSV without a language");
}

#[test]
fn full_grid_writes_one_manifest_per_configuration() {
    let fx = build(Options {
        dim: 8,
        roles: vec![Role::Image, Role::Caption],
        extra_config: "[train]\nhidden = 96\nmax_epochs = 1\npatience = 1\ntest_split = \"test\"\n"
            .into(),
        ..Options::default()
    });
    let start = Instant::now();
    fx.ok(
        "g",
        &["grid", "--store", "synth", "--llm", "gpt-4", "--lenient"],
    );
    eprintln!("grid took {:?}", start.elapsed());
    let runs_dir = fx.run_path("g", "grid/gpt-4.synth/runs");
    let manifests = fs::read_dir(&runs_dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().join("manifest.json").exists())
        .count();
    assert_eq!(manifests, 162);
    let summary = fs::read_to_string(fx.run_path("g", "grid/gpt-4.synth/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 163);
    let curves = fs::read_to_string(fx.run_path("g", "grid/gpt-4.synth/sensitivity.csv")).unwrap();
    for axis in [
        "batch_size",
        "learning_rate",
        "k_soft",
        "tau",
        "dropout_rate",
    ] {
        assert!(
            curves.lines().any(|l| l.starts_with(axis)),
            "no {axis} curve"
        );
    }
    let tau_values: std::collections::BTreeSet<&str> = curves
        .lines()
        .filter(|l| l.starts_with("tau,"))
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(tau_values.len(), 3);
}

#[test]
fn help_lists_every_subcommand() {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_idiorank"))
        .arg("--help")
        .output()
        .unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in [
        "ingest",
        "classify",
        "meanings",
        "rank",
        "ensemble",
        "build-triplets",
        "train-head",
        "grid",
        "project",
        "eval",
        "report",
    ] {
        assert!(text.contains(sub), "{sub} missing from --help");
    }
}
