use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::PathBuf;

use idiorank::llmgate::TypeVote;
use idiorank::metrics::{self, ReportSpec, RowInput, RowKey};
use serde_json::json;

use super::rank::{gains, load_ranking, RankParams};
use super::{manifest_for, skipped, wrote};
use crate::error::{CliError, Result};
use crate::run::{read_jsonl, write_atomic, Run, Step};
use crate::{EvalArgs, ReportArgs};

fn row_key(p: &RankParams) -> RowKey {
    RowKey {
        method: p.method.clone(),
        llm: p.llm.clone(),
        clip: p.clip.clone(),
    }
}

pub fn eval(run: &Run, args: &EvalArgs) -> Result<()> {
    let gains = gains(run)?;
    for path in &args.rank {
        let (params, results) = load_ranking(run, path)?;
        let split = run.load_split(&params.split)?;
        let golds: HashMap<String, Vec<String>> = split.golds()?.into_iter().collect();
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("ranking");
        let out = run.path(format!("eval/{}.json", name.trim_end_matches(".jsonl")));
        let mut step = Step::new(
            run,
            "eval",
            manifest_for(&out),
            json!({"gains": gains.values()}),
        );
        step.input(run, path)?;
        step.input(run, &split.path)?;
        if step.up_to_date(run) {
            skipped(run, &out);
            continue;
        }
        let m = metrics::evaluate(&results, &golds, &gains)?;
        let mut text = serde_json::to_string_pretty(
            &json!({"key": row_key(&params), "split": params.split, "metrics": m}),
        )?;
        text.push('\n');
        write_atomic(&out, text.as_bytes())?;
        wrote(
            run,
            &out,
            &format!(
                "{} / {}: n {} acc {:.3} corr {:.3} dcg {:.3}",
                row_key(&params).label(),
                params.split,
                m.n,
                m.acc,
                m.corr,
                m.dcg
            ),
        );
        step.finish(run, &[out], json!(m))?;
    }
    Ok(())
}

fn method_order(method: &str) -> usize {
    ["CI", "CIC", "CI-F", "CIC-F"]
        .iter()
        .position(|m| *m == method)
        .unwrap_or(usize::MAX)
}

/// Baselines first, then LLMs by name, the ensemble last.
fn llm_order(llm: &Option<String>) -> (u8, String) {
    match llm.as_deref() {
        None => (0, String::new()),
        Some("Ensemble") => (2, String::new()),
        Some(l) => (1, l.to_string()),
    }
}

pub fn report(run: &Run, args: &ReportArgs) -> Result<()> {
    let rank_dir = run.path("rank");
    let mut files: Vec<PathBuf> = match fs::read_dir(&rank_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect(),
        Err(_) => vec![],
    };
    if files.is_empty() {
        return Err(CliError::missing("rankings", &rank_dir, "rank"));
    }
    files.sort();

    let mut loaded = Vec::new();
    for f in &files {
        loaded.push((f.clone(), load_ranking(run, f)?));
    }
    loaded.sort_by(|(_, (a, _)), (_, (b, _))| {
        (
            method_order(&a.method),
            &a.method,
            llm_order(&a.llm),
            &a.clip,
            &a.split,
        )
            .cmp(&(
                method_order(&b.method),
                &b.method,
                llm_order(&b.llm),
                &b.clip,
                &b.split,
            ))
    });

    let splits: Vec<String> = if !args.splits.is_empty() {
        args.splits.clone()
    } else if !run.config.report.splits.is_empty() {
        run.config.report.splits.clone()
    } else {
        let seen: BTreeSet<&String> = loaded.iter().map(|(_, (p, _))| &p.split).collect();
        seen.into_iter().cloned().collect()
    };
    let out_dir = run.path("report");
    let (json_out, table_out, csv_out) = (
        out_dir.join("report.json"),
        out_dir.join("report.txt"),
        out_dir.join("report.csv"),
    );
    let types_out = out_dir.join("type-detection.csv");
    let gains = gains(run)?;
    let mut step = Step::new(
        run,
        "report",
        out_dir.join("manifest.json"),
        json!({"splits": splits, "combined": run.config.report.combined, "gains": gains.values(),
               "require_complete": run.config.report.require_complete}),
    );

    let mut golds = HashMap::new();
    let mut split_files = BTreeMap::new();
    for (_, (p, _)) in &loaded {
        if !splits.contains(&p.split) || golds.contains_key(&p.split) {
            continue;
        }
        let split = run.load_split(&p.split)?;
        golds.insert(
            p.split.clone(),
            split.golds()?.into_iter().collect::<HashMap<_, _>>(),
        );
        split_files.insert(p.split.clone(), split);
    }
    for (f, _) in &loaded {
        step.input(run, f)?;
    }
    for split in split_files.values() {
        step.input(run, &split.path)?;
    }
    let type_files = type_files(run);
    for (_, _, f) in &type_files {
        step.input(run, f)?;
    }
    if step.up_to_date(run) {
        skipped(run, &table_out);
        print!("{}", fs::read_to_string(&table_out)?);
        return Ok(());
    }

    let inputs: Vec<RowInput> = loaded
        .into_iter()
        .filter(|(_, (p, _))| splits.contains(&p.split))
        .map(|(_, (p, results))| RowInput {
            key: row_key(&p),
            split: p.split,
            results,
        })
        .collect();
    let spec = ReportSpec {
        splits,
        combined: run.config.report.combined.clone().into_iter().collect(),
        require_complete: run.config.report.require_complete,
    };
    let report = metrics::build_report(&inputs, &golds, &spec, &gains)?;
    let table = report.render_table();
    write_atomic(&json_out, report.to_json().as_bytes())?;
    write_atomic(&table_out, table.as_bytes())?;
    write_atomic(&csv_out, report.to_csv().as_bytes())?;
    let mut outputs = vec![json_out, table_out.clone(), csv_out];

    let types_csv = type_detection_csv(run, &type_files)?;
    if let Some(csv) = types_csv {
        write_atomic(&types_out, csv.as_bytes())?;
        outputs.push(types_out);
    }
    print!("{table}");
    wrote(run, &table_out, &format!("{} rows", report.rows.len()));
    step.finish(
        run,
        &outputs,
        json!({"rows": report.rows.len(), "sample_counts": report.sample_counts}),
    )?;
    Ok(())
}

/// `(llm, split, path)` of every classification output in the run.
fn type_files(run: &Run) -> Vec<(String, String, PathBuf)> {
    let mut out = Vec::new();
    let Ok(llms) = fs::read_dir(run.path("llm")) else {
        return out;
    };
    for llm in llms.filter_map(|e| e.ok()) {
        let Ok(files) = fs::read_dir(llm.path()) else {
            continue;
        };
        for f in files.filter_map(|e| e.ok()) {
            let name = f.file_name().to_string_lossy().to_string();
            if let Some(split) = name
                .strip_prefix("types-")
                .and_then(|s| s.strip_suffix(".jsonl"))
            {
                out.push((
                    llm.file_name().to_string_lossy().to_string(),
                    split.to_string(),
                    f.path(),
                ));
            }
        }
    }
    out.sort();
    out
}

/// Type-detection accuracy per LLM and split, where gold types exist.
fn type_detection_csv(run: &Run, files: &[(String, String, PathBuf)]) -> Result<Option<String>> {
    let mut csv = String::from("llm,split,n,accuracy\n");
    let mut any = false;
    for (llm, split_name, path) in files {
        let Ok(split) = run.load_split(split_name) else {
            continue;
        };
        let votes: Vec<TypeVote> = read_jsonl(path)?;
        let by_id: HashMap<&str, _> = split
            .samples
            .iter()
            .map(|s| (s.sample_id.as_str(), s.gold_type))
            .collect();
        let golds: Vec<_> = votes
            .iter()
            .map(|v| by_id.get(v.compound_id.as_str()).copied().flatten())
            .collect();
        if golds.iter().any(Option::is_none) {
            continue;
        }
        let acc = idiorank::llmgate::type_detection_accuracy(&votes, &golds)?;
        csv.push_str(&format!("{llm},{split_name},{},{acc}\n", votes.len()));
        any = true;
    }
    Ok(any.then_some(csv))
}
