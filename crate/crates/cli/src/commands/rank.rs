use std::path::{Path, PathBuf};

use idiorank::embedstore::COMPOUND_QUERY;
use idiorank::metrics::{self, DcgGains};
use idiorank::ranker::{self, RankResult, ScoreMode};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{manifest_for, skipped, wrote};
use crate::error::{CliError, Context, Result};
use crate::run::{check_name, read_jsonl, to_jsonl, write_atomic, Manifest, Run, Step};
use crate::{EnsembleArgs, RankArgs};

/// What a ranking file holds; stored in its manifest and read back by `eval`
/// and `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankParams {
    /// Report block: `CI`, `CIC`, `CI-F` or `CIC-F`.
    pub method: String,
    pub mode: ScoreMode,
    /// None for the compound-only baseline.
    pub llm: Option<String>,
    pub clip: String,
    pub store: String,
    pub split: String,
    /// Rankings averaged into this one.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<String>,
}

pub fn method_label(mode: ScoreMode, fine_tuned: bool) -> String {
    let base = match mode {
        ScoreMode::Ci => "CI",
        ScoreMode::Cic => "CIC",
    };
    if fine_tuned {
        format!("{base}-F")
    } else {
        base.to_string()
    }
}

pub fn rank_path(run: &Run, method: &str, llm: Option<&str>, store: &str, split: &str) -> PathBuf {
    run.path(format!(
        "rank/{}.{}.{store}.{split}.jsonl",
        method.to_ascii_lowercase(),
        llm.unwrap_or("baseline")
    ))
}

/// Reads a ranking file and the parameters its manifest recorded.
pub fn load_ranking(run: &Run, path: &Path) -> Result<(RankParams, Vec<RankResult>)> {
    let manifest_path = manifest_for(path);
    if !path.exists() || !manifest_path.exists() {
        return Err(CliError::missing("ranking", path, "rank"));
    }
    let manifest = Manifest::read(&manifest_path)?;
    let params: RankParams = serde_json::from_value(manifest.params)
        .context(format!("reading {}", manifest_path.display()))?;
    let results = read_jsonl(path).context(format!("reading {}", run.display(path)))?;
    Ok((params, results))
}

pub fn rank(run: &Run, args: &RankArgs) -> Result<()> {
    if let Some(llm) = &args.llm {
        check_name("llm", llm)?;
    }
    let split = run.load_split(&args.split)?;
    let store = run.open_store(&args.store)?;
    let mode = ScoreMode::from(args.mode);
    let params = RankParams {
        method: method_label(mode, store.fine_tuned()),
        mode,
        llm: args.llm.clone(),
        clip: store.clip().to_string(),
        store: store.name.clone(),
        split: split.name.clone(),
        members: vec![],
    };
    let out = rank_path(
        run,
        &params.method,
        args.llm.as_deref(),
        &store.name,
        &split.name,
    );
    let mut step = Step::new(run, "rank", manifest_for(&out), &params);
    step.input(run, &split.path)?;
    step.input(run, &store.path)?;
    if step.up_to_date(run) {
        skipped(run, &out);
        return Ok(());
    }

    let variant = args.llm.as_deref().unwrap_or(COMPOUND_QUERY);
    let bundles = split
        .samples
        .iter()
        .map(|s| {
            store.store.get_sample_bundle(s, variant).map_err(|e| {
                CliError::from(e).context(format!(
                    "store {} lacks records for sample {} (encode the queries written by `idiorank meanings --llm {variant} --split {}`)",
                    store.name, s.sample_id, split.name
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let results = ranker::score_all(&bundles, mode)?;
    write_atomic(&out, &to_jsonl(&results))?;

    let summary = match split.golds() {
        Ok(golds) => {
            let golds = golds.into_iter().collect();
            let m = metrics::evaluate(&results, &golds, &gains(run)?)?;
            wrote(
                run,
                &out,
                &format!(
                    "{} samples, acc {:.3} corr {:.3} dcg {:.3}",
                    m.n, m.acc, m.corr, m.dcg
                ),
            );
            json!(m)
        }
        Err(_) => {
            wrote(run, &out, &format!("{} samples", results.len()));
            json!({"n": results.len()})
        }
    };
    step.finish(run, &[out], summary)?;
    Ok(())
}

pub fn gains(run: &Run) -> Result<DcgGains> {
    match &run.config.report.gains {
        Some(g) => Ok(DcgGains::new(g.clone())?),
        None => Ok(DcgGains::default()),
    }
}

pub fn ensemble(run: &Run, args: &EnsembleArgs) -> Result<()> {
    let inputs: Vec<PathBuf> = if !args.inputs.is_empty() {
        args.inputs.clone()
    } else {
        let (Some(store), Some(split)) = (&args.store, &args.split) else {
            return Err(CliError::validation(
                "ensemble needs --inputs, or --llms with --store and --split",
            ));
        };
        let method = method_label(args.mode.into(), args.fine_tuned);
        args.llms
            .iter()
            .map(|llm| {
                let store = if args.fine_tuned {
                    format!("{store}-f-{llm}")
                } else {
                    store.clone()
                };
                rank_path(run, &method, Some(llm), &store, split)
            })
            .collect()
    };
    if inputs.len() < 2 {
        return Err(CliError::validation(
            "an ensemble needs at least two rankings",
        ));
    }
    let mut loaded = Vec::new();
    for path in &inputs {
        let (params, results) = load_ranking(run, path)
            .map_err(|e| e.context(format!("ensemble input {}", run.display(path))))?;
        loaded.push((params, results));
    }
    let first = &loaded[0].0;
    for (p, _) in &loaded[1..] {
        if (&p.method, &p.clip, &p.split) != (&first.method, &first.clip, &first.split) {
            return Err(CliError::validation(format!(
                "cannot ensemble {} {} {} with {} {} {}",
                first.method, first.clip, first.split, p.method, p.clip, p.split
            )));
        }
    }
    let members: Vec<String> = loaded
        .iter()
        .map(|(p, _)| p.llm.clone().unwrap_or_else(|| "baseline".into()))
        .collect();
    let base_store = match (&first.llm, first.method.ends_with("-F")) {
        (Some(llm), true) => first
            .store
            .trim_end_matches(&format!("-f-{llm}"))
            .to_string(),
        _ => first.store.clone(),
    };
    let params = RankParams {
        method: first.method.clone(),
        mode: first.mode,
        llm: Some("Ensemble".into()),
        clip: first.clip.clone(),
        store: base_store.clone(),
        split: first.split.clone(),
        members,
    };
    let out = rank_path(
        run,
        &params.method,
        Some("ensemble"),
        &base_store,
        &params.split,
    );
    let mut step = Step::new(run, "ensemble", manifest_for(&out), &params);
    for path in &inputs {
        step.input(run, path)?;
    }
    if step.up_to_date(run) {
        skipped(run, &out);
        return Ok(());
    }

    let n = loaded[0].1.len();
    if loaded.iter().any(|(_, r)| r.len() != n) {
        return Err(CliError::validation(
            "rankings cover different numbers of samples",
        ));
    }
    let mut combined = Vec::with_capacity(n);
    for i in 0..n {
        let per_llm: Vec<RankResult> = loaded.iter().map(|(_, r)| r[i].clone()).collect();
        combined.push(ranker::ensemble_scores(&per_llm)?);
    }
    write_atomic(&out, &to_jsonl(&combined))?;
    wrote(
        run,
        &out,
        &format!("{} samples from {} rankings", combined.len(), inputs.len()),
    );
    step.finish(run, &[out], json!({"n": combined.len()}))?;
    Ok(())
}
