use std::collections::BTreeMap;

use idiorank::corpus::CompoundType;
use idiorank::llmgate::{self, MeaningRecord, QueryRecord, TypeVote};
use idiorank::seed::derive_seed;
use serde_json::json;

use super::{manifest_for, skipped, wrote};
use crate::error::{CliError, Result};
use crate::run::{read_jsonl, to_jsonl, write_atomic, Run, Step};
use crate::{ClassifyArgs, MeaningsArgs};

pub fn types_path(run: &Run, llm: &str, split: &str) -> std::path::PathBuf {
    run.path(format!("llm/{llm}/types-{split}.jsonl"))
}

pub fn classify(run: &Run, args: &ClassifyArgs) -> Result<()> {
    let split = run.load_split(&args.split)?;
    let (transport, deps, described) = run.transport(&args.llm)?;
    let t = args.t.unwrap_or(run.config.classify.t);
    let prompts = run.config.prompts.clone().unwrap_or_default();
    let out = types_path(run, &args.llm, &split.name);
    let mut step = Step::new(
        run,
        "classify",
        manifest_for(&out),
        json!({"llm": args.llm, "split": split.name, "t": t, "prompts": prompts, "transport": described}),
    );
    step.input(run, &split.path)?;
    for d in &deps {
        step.input(run, d)?;
    }
    if step.up_to_date(run) {
        skipped(run, &out);
        return Ok(());
    }

    let seed = derive_seed(run.seed, "classify");
    let votes = llmgate::classify_all(
        &split.samples,
        transport.as_ref(),
        &prompts,
        t,
        seed,
        run.config.classify.max_in_flight,
    )
    .into_iter()
    .collect::<std::result::Result<Vec<TypeVote>, _>>()?;
    write_atomic(&out, &to_jsonl(&votes))?;

    let idiomatic = votes
        .iter()
        .filter(|v| v.decision == CompoundType::Idiomatic)
        .count();
    let golds: Vec<_> = split.samples.iter().map(|s| s.gold_type).collect();
    let accuracy = if golds.iter().all(Option::is_some) {
        Some(llmgate::type_detection_accuracy(&votes, &golds)?)
    } else {
        None
    };
    let detail = match accuracy {
        Some(a) => format!(
            "{} compounds, {idiomatic} idiomatic, accuracy {a:.4}",
            votes.len()
        ),
        None => format!("{} compounds, {idiomatic} idiomatic", votes.len()),
    };
    wrote(run, &out, &detail);
    step.finish(
        run,
        &[out],
        json!({"compounds": votes.len(), "idiomatic": idiomatic, "accuracy": accuracy}),
    )?;
    Ok(())
}

pub fn meanings(run: &Run, args: &MeaningsArgs) -> Result<()> {
    let split = run.load_split(&args.split)?;
    let (transport, deps, described) = run.transport(&args.llm)?;
    let prompts = run.config.prompts.clone().unwrap_or_default();
    let meanings_out = run.path(format!("llm/{}/meanings-{}.jsonl", args.llm, split.name));
    let queries_out = run.path(format!("llm/{}/queries-{}.jsonl", args.llm, split.name));
    let types = types_path(run, &args.llm, &split.name);

    let mut step = Step::new(
        run,
        "meanings",
        manifest_for(&meanings_out),
        json!({"llm": args.llm, "split": split.name, "gold_types": args.gold_types, "all": args.all,
               "prompts": prompts, "transport": described}),
    );
    step.input(run, &split.path)?;
    for d in &deps {
        step.input(run, d)?;
    }
    if !args.gold_types {
        if !types.exists() {
            return Err(CliError::missing(
                "compound types",
                &types,
                &format!("classify --llm {} --split {}", args.llm, split.name),
            ));
        }
        step.input(run, &types)?;
    }
    if step.up_to_date(run) {
        skipped(run, &meanings_out);
        skipped(run, &queries_out);
        return Ok(());
    }

    let decisions: BTreeMap<String, CompoundType> = if args.gold_types {
        split
            .samples
            .iter()
            .map(|s| {
                s.gold_type
                    .map(|t| (s.sample_id.clone(), t))
                    .ok_or_else(|| {
                        CliError::validation(format!("sample {} has no gold type", s.sample_id))
                    })
            })
            .collect::<Result<_>>()?
    } else {
        read_jsonl::<TypeVote>(&types)?
            .into_iter()
            .map(|v| (v.compound_id, v.decision))
            .collect()
    };

    let mut meanings = Vec::new();
    let mut queries = Vec::new();
    for sample in &split.samples {
        let decision = *decisions.get(&sample.sample_id).ok_or_else(|| {
            CliError::validation(format!(
                "no type decision for sample {} in {}",
                sample.sample_id,
                types.display()
            ))
        })?;
        let meaning: Option<MeaningRecord> = if decision == CompoundType::Idiomatic || args.all {
            Some(llmgate::generate_meaning(
                sample,
                decision,
                args.all,
                transport.as_ref(),
                &prompts,
            )?)
        } else {
            None
        };
        queries.push(QueryRecord {
            sample_id: sample.sample_id.clone(),
            llm_name: args.llm.clone(),
            decision,
            query_text: llmgate::resolve_query_text(sample, decision, meaning.as_ref())?,
            meaning: meaning.as_ref().map(|m| m.meaning_text.clone()),
            prompt_hash: meaning.as_ref().map(|m| m.prompt_hash.clone()),
        });
        meanings.extend(meaning);
    }
    write_atomic(&meanings_out, &to_jsonl(&meanings))?;
    write_atomic(&queries_out, &to_jsonl(&queries))?;
    wrote(run, &meanings_out, &format!("{} meanings", meanings.len()));
    wrote(run, &queries_out, &format!("{} queries", queries.len()));
    step.finish(
        run,
        &[meanings_out, queries_out],
        json!({"meanings": meanings.len(), "queries": queries.len()}),
    )?;
    Ok(())
}
