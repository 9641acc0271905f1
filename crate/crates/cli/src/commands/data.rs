use std::fs;
use std::path::PathBuf;

use idiorank::corpus::{self, ColumnMap, Language, SplitSpec};
use serde_json::json;

use super::{manifest_for, skipped, wrote};
use crate::error::{CliError, Context, Result};
use crate::run::{check_name, write_atomic, Run, Step};
use crate::IngestArgs;

pub fn ingest(run: &Run, args: &IngestArgs) -> Result<()> {
    let names: Vec<String> = if args.split {
        if args.split_names.len() != 3 {
            return Err(CliError::validation(
                "--split-names needs exactly three names",
            ));
        }
        args.split_names.clone()
    } else {
        vec![args
            .name
            .clone()
            .ok_or_else(|| CliError::validation("ingest needs --name, or --split"))?]
    };
    for n in &names {
        check_name("split", n)?;
    }
    let language: Option<Language> = args
        .language
        .as_deref()
        .map(|l| l.parse().map_err(|e: String| CliError::validation(e)))
        .transpose()?;
    let fracs = &run.config.split;
    let outputs: Vec<PathBuf> = names
        .iter()
        .map(|n| run.path(format!("data/{n}.json")))
        .collect();
    let mut step = Step::new(
        run,
        "ingest",
        manifest_for(&run.path(format!("data/{}.json", names.join("+")))),
        json!({"names": names, "language": language, "split": args.split, "fractions": fracs}),
    );
    step.input(run, &args.input)?;
    if step.up_to_date(run) {
        outputs.iter().for_each(|o| skipped(run, o));
        return Ok(());
    }

    let text =
        fs::read_to_string(&args.input).context(format!("reading {}", args.input.display()))?;
    let is_tsv = args
        .input
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("tsv"));
    let (language, samples) = if is_tsv {
        let language =
            language.ok_or_else(|| CliError::validation("--language is required for TSV input"))?;
        (language, corpus::ingest_tsv(&text, &ColumnMap::default())?)
    } else {
        let dataset =
            corpus::parse_dataset(&text).context(format!("parsing {}", args.input.display()))?;
        if let Some(l) = language {
            if l != dataset.language {
                return Err(CliError::validation(format!(
                    "--language {l} but the file says {}",
                    dataset.language
                )));
            }
        }
        (dataset.language, dataset.samples)
    };
    for s in &samples {
        s.validate()?;
    }

    let parts = if args.split {
        let spec = SplitSpec {
            train_frac: fracs.train_frac,
            val_frac: fracs.val_frac,
            test_frac: fracs.test_frac,
            seed: run.seed,
        };
        let s = corpus::split_dataset(&samples, &spec)?;
        vec![s.train, s.val, s.test]
    } else {
        vec![samples]
    };
    for (path, part) in outputs.iter().zip(&parts) {
        write_atomic(path, corpus::dataset_to_json(language, part).as_bytes())?;
        wrote(run, path, &format!("{} samples", part.len()));
    }
    let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
    step.finish(run, &outputs, json!({"samples": sizes}))?;
    Ok(())
}
