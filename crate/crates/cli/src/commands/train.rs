use std::borrow::Cow;
use std::fs;
use std::path::PathBuf;

use idiorank::embedstore::Role;
use idiorank::head::{self, Checkpoint, ContrastiveExample, HeadError, RankingProbe, TrainConfig};
use idiorank::seed::derive_seed;
use idiorank::triplets::{self, TripletOptions, TripletSet};
use serde_json::json;

use super::{manifest_for, skipped, wrote};
use crate::config::TrainSection;
use crate::error::{CliError, Context, Result};
use crate::run::{check_name, write_atomic, Run, Split, Step, Store};
use crate::{GridArgs, HyperArgs, ProjectArgs, TrainArgs, TripletArgs};

impl HyperArgs {
    fn section(&self) -> TrainSection {
        TrainSection {
            preset: self.preset.clone(),
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            k_soft: self.k_soft,
            tau: self.tau,
            dropout_rate: self.dropout_rate,
            hidden: self.hidden,
            max_epochs: self.max_epochs,
            patience: self.patience,
            resample_per_epoch: self.resample_per_epoch.then_some(true),
            train_split: self.train_split.clone(),
            val_split: self.val_split.clone(),
            test_split: self.test_split.clone(),
            probe_captions: self.probe_captions.then_some(true),
        }
    }
}

fn triplet_options(run: &Run, llm: &str, k_soft: usize, strict: bool) -> TripletOptions {
    TripletOptions {
        llm_name: llm.to_string(),
        k_soft,
        seed: derive_seed(run.seed, "triplets"),
        strict,
    }
}

fn triplets_path(run: &Run, llm: &str, store: &str, split: &str, k: usize) -> PathBuf {
    run.path(format!("triplets/{llm}.{store}.{split}.k{k}.json"))
}

fn head_dir(run: &Run, llm: &str, store: &str) -> PathBuf {
    run.path(format!("heads/{llm}.{store}"))
}

pub fn build_triplets(run: &Run, args: &TripletArgs) -> Result<()> {
    check_name("llm", &args.llm)?;
    let section = run.config.train.overlay(&TrainSection {
        preset: args.preset.clone(),
        k_soft: args.k_soft,
        ..TrainSection::default()
    });
    let config = section.resolve(&args.llm, run.seed)?;
    let split_name = args
        .split
        .clone()
        .unwrap_or_else(|| section.train_split().to_string());
    let split = run.load_split(&split_name)?;
    let store = run.open_store(&args.store)?;
    let out = triplets_path(run, &args.llm, &store.name, &split.name, config.k_soft);
    let options = triplet_options(run, &args.llm, config.k_soft, !args.lenient);
    let mut step = Step::new(
        run,
        "build-triplets",
        manifest_for(&out),
        json!({"llm": args.llm, "store": store.name, "split": split.name, "k_soft": config.k_soft,
               "strict": options.strict, "seed": options.seed}),
    );
    step.input(run, &split.path)?;
    step.input(run, &store.path)?;
    if step.up_to_date(run) {
        skipped(run, &out);
        return Ok(());
    }
    let set = triplets::build_triplets_from_store(&split.samples, &store.store, &options)?;
    let mut text = serde_json::to_string_pretty(&set)?;
    text.push('\n');
    write_atomic(&out, text.as_bytes())?;
    wrote(
        run,
        &out,
        &format!(
            "{} entries, M={} N={}",
            set.entries.len(),
            set.m_count(),
            set.n_count()
        ),
    );
    step.finish(
        run,
        &[out],
        json!({"entries": set.entries.len(), "m": set.m_count(), "n": set.n_count()}),
    )?;
    Ok(())
}

/// Splits and data shared by `train-head` and `grid`.
struct TrainingInputs {
    section: TrainSection,
    config: TrainConfig,
    train: Split,
    val: Split,
    test: Option<Split>,
    store: Store,
}

fn training_inputs(run: &Run, llm: &str, store: &str, hyper: &HyperArgs) -> Result<TrainingInputs> {
    check_name("llm", llm)?;
    let section = run.config.train.overlay(&hyper.section());
    let config = section.resolve(llm, run.seed)?;
    let train = run.load_split(section.train_split())?;
    let val = run.load_split(section.val_split())?;
    let test = section
        .test_split
        .as_deref()
        .map(|s| run.load_split(s))
        .transpose()?;
    for other in std::iter::once(&val).chain(test.as_ref()) {
        if other.language != train.language {
            return Err(CliError::validation(format!(
                "split {} is {} but training split {} is {}",
                other.name, other.language, train.name, train.language
            )));
        }
    }
    let store = run.open_store(store)?;
    Ok(TrainingInputs {
        section,
        config,
        train,
        val,
        test,
        store,
    })
}

impl TrainingInputs {
    fn add_inputs(&self, run: &Run, step: &mut Step) -> Result<()> {
        step.input(run, &self.train.path)?;
        step.input(run, &self.val.path)?;
        if let Some(t) = &self.test {
            step.input(run, &t.path)?;
        }
        step.input(run, &self.store.path)
    }

    /// Validation triplets carry no soft negatives, so validation losses are
    /// comparable across soft-negative counts.
    fn val_set(
        &self,
        run: &Run,
        llm: &str,
        modalities: &[Role],
    ) -> Result<Vec<ContrastiveExample>> {
        let set = triplets::build_triplets(
            &self.val.samples,
            Some(&self.store.store),
            &triplet_options(run, llm, 0, true),
            Some(modalities),
        )
        .context("building validation triplets")?;
        Ok(set.resolve(&self.store.store)?)
    }

    fn probes(&self, llm: &str) -> Result<Vec<RankingProbe>> {
        match &self.test {
            Some(t) => Ok(head::probes_from_store(
                &t.samples,
                &self.store.store,
                llm,
                self.section.probe_captions.unwrap_or(false),
            )?),
            None => Ok(vec![]),
        }
    }

    fn split_names(&self) -> serde_json::Value {
        json!({"train": self.train.name, "val": self.val.name, "test": self.test.as_ref().map(|t| &t.name),
               "probe_captions": self.section.probe_captions.unwrap_or(false)})
    }
}

fn triplet_err(e: triplets::TripletError) -> HeadError {
    HeadError::InvalidConfig(e.to_string())
}

pub fn train_head(run: &Run, args: &TrainArgs) -> Result<()> {
    let inputs = training_inputs(run, &args.llm, &args.store, &args.hyper)?;
    let config = &inputs.config;
    let triplet_file = triplets_path(
        run,
        &args.llm,
        &inputs.store.name,
        &inputs.train.name,
        config.k_soft,
    );
    if !triplet_file.exists() {
        return Err(CliError::missing(
            "training triplets",
            &triplet_file,
            &format!(
                "build-triplets --store {} --llm {} --split {} --k-soft {}",
                inputs.store.name, args.llm, inputs.train.name, config.k_soft
            ),
        ));
    }
    let dir = head_dir(run, &args.llm, &inputs.store.name);
    let (ckpt_out, curve_out, report_out) = (
        dir.join("checkpoint.json"),
        dir.join("epochs.csv"),
        dir.join("train-report.json"),
    );
    let mut step = Step::new(
        run,
        "train-head",
        dir.join("manifest.json"),
        json!({"llm": args.llm, "store": inputs.store.name, "config": config, "splits": inputs.split_names()}),
    );
    inputs.add_inputs(run, &mut step)?;
    step.input(run, &triplet_file)?;
    if step.up_to_date(run) {
        skipped(run, &ckpt_out);
        return Ok(());
    }

    let text = fs::read_to_string(&triplet_file)?;
    let set: TripletSet =
        serde_json::from_str(&text).context(format!("parsing {}", triplet_file.display()))?;
    let store = &inputs.store.store;
    let train_set = set.resolve(store)?;
    let val_set = inputs.val_set(run, &args.llm, &set.modalities)?;
    let probes = inputs.probes(&args.llm)?;
    log::info!(
        "training on {} examples (M={} N={}), {} validation, {} probes",
        train_set.len(),
        set.m_count(),
        set.n_count(),
        val_set.len(),
        probes.len()
    );

    let (params, report) = if config.resample_per_epoch {
        let samples = &inputs.train.samples;
        head::train_with(
            |epoch| {
                if epoch == 1 {
                    return Ok(Cow::Borrowed(&train_set[..]));
                }
                let fresh = set
                    .resample_soft(samples, derive_seed(run.seed, &format!("resample/{epoch}")))
                    .map_err(triplet_err)?;
                Ok(Cow::Owned(fresh.resolve(store)?))
            },
            &val_set,
            &probes,
            config,
        )?
    } else {
        head::train(&train_set, &val_set, &probes, config)?
    };

    write_atomic(&ckpt_out, Checkpoint::from(&params).to_json().as_bytes())?;
    write_atomic(&curve_out, report.to_csv().as_bytes())?;
    let mut summary = serde_json::to_string_pretty(&json!({"config": config, "report": report}))?;
    summary.push('\n');
    write_atomic(&report_out, summary.as_bytes())?;
    let best = report.best();
    wrote(
        run,
        &ckpt_out,
        &format!(
            "{} epochs, best epoch {} val loss {:.6}{}",
            report.epochs.len(),
            report.best_epoch,
            report.best_val_loss,
            best.test_top1
                .map(|a| format!(" test top-1 {a:.3}"))
                .unwrap_or_default()
        ),
    );
    step.finish(
        run,
        &[ckpt_out, curve_out, report_out],
        json!({"epochs": report.epochs.len(), "best_epoch": report.best_epoch,
               "best_val_loss": report.best_val_loss, "test_top1": best.test_top1,
               "stop_reason": report.stop_reason}),
    )?;
    Ok(())
}

pub fn grid(run: &Run, args: &GridArgs) -> Result<()> {
    let inputs = training_inputs(run, &args.llm, &args.store, &args.hyper)?;
    let base = &inputs.config;
    let axes = run.config.grid.clone().unwrap_or_default();
    if axes.is_empty() {
        return Err(CliError::validation(
            "every grid axis needs at least one value",
        ));
    }
    let dir = run.path(format!("grid/{}.{}", args.llm, inputs.store.name));
    let summary_out = dir.join("summary.csv");
    let curves_out = dir.join("sensitivity.csv");
    let best_out = dir.join("best.json");
    let params = json!({"llm": args.llm, "store": inputs.store.name, "base": base, "axes": axes,
                        "splits": inputs.split_names(), "lenient": args.lenient});
    let mut step = Step::new(run, "grid", dir.join("manifest.json"), &params);
    inputs.add_inputs(run, &mut step)?;
    if step.up_to_date(run) {
        skipped(run, &summary_out);
        return Ok(());
    }

    let store = &inputs.store.store;
    let probe_set = triplets::build_triplets_from_store(
        &inputs.train.samples,
        store,
        &triplet_options(run, &args.llm, 0, !args.lenient),
    )?;
    let modalities = probe_set.modalities.clone();
    let val_set = inputs.val_set(run, &args.llm, &modalities)?;
    let probes = inputs.probes(&args.llm)?;
    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    println!(
        "training {} configurations on {workers} workers",
        axes.len()
    );
    let runs = head::grid_search(
        base,
        &axes,
        |k| {
            let set = triplets::build_triplets(
                &inputs.train.samples,
                Some(store),
                &triplet_options(run, &args.llm, k, !args.lenient),
                Some(&modalities),
            )
            .map_err(triplet_err)?;
            Ok(set.resolve(store)?)
        },
        &val_set,
        &probes,
        workers,
    )?;

    // One manifest per configuration.
    let mut per_config = Vec::with_capacity(runs.len());
    for r in &runs {
        let key = r.config.key();
        let curve = dir.join(format!("runs/{key}/epochs.csv"));
        write_atomic(&curve, r.report.to_csv().as_bytes())?;
        let mut s = Step::new(
            run,
            "grid",
            dir.join(format!("runs/{key}/manifest.json")),
            json!({"llm": args.llm, "store": inputs.store.name, "config": r.config, "splits": inputs.split_names()}),
        );
        inputs.add_inputs(run, &mut s)?;
        s.finish(
            run,
            std::slice::from_ref(&curve),
            json!({"best_epoch": r.report.best_epoch, "best_val_loss": r.best_val_loss,
                   "test_top1": r.test_top1, "epochs": r.report.epochs.len(),
                   "stop_reason": r.report.stop_reason}),
        )?;
        per_config.push(curve);
    }

    let mut csv = String::from("rank,key,batch_size,learning_rate,k_soft,tau,dropout_rate,epochs,best_epoch,best_val_loss,test_top1\n");
    for (i, r) in runs.iter().enumerate() {
        let c = &r.config;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            i + 1,
            c.key(),
            c.batch_size,
            c.learning_rate,
            c.k_soft,
            c.tau,
            c.dropout_rate,
            r.report.epochs.len(),
            r.report.best_epoch,
            r.best_val_loss,
            r.test_top1.map(|a| a.to_string()).unwrap_or_default()
        ));
    }
    write_atomic(&summary_out, csv.as_bytes())?;
    let best = &runs[0];
    let curves = head::sensitivity_curves(&runs, &axes, &best.config);
    write_atomic(&curves_out, head::curves_to_csv(&curves).as_bytes())?;
    let mut best_json = serde_json::to_string_pretty(
        &json!({"config": best.config, "best_val_loss": best.best_val_loss,
                                                            "test_top1": best.test_top1}),
    )?;
    best_json.push('\n');
    write_atomic(&best_out, best_json.as_bytes())?;
    wrote(
        run,
        &summary_out,
        &format!(
            "{} runs, best {} val loss {:.6}",
            runs.len(),
            best.config.key(),
            best.best_val_loss
        ),
    );
    let mut outputs = vec![summary_out, curves_out, best_out];
    outputs.extend(per_config);
    step.finish(
        run,
        &outputs,
        json!({"runs": runs.len(), "best": best.config.key(), "curves": curves.len()}),
    )?;
    Ok(())
}

pub fn project(run: &Run, args: &ProjectArgs) -> Result<()> {
    check_name("llm", &args.llm)?;
    let store = run.open_store(&args.store)?;
    let checkpoint = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| head_dir(run, &args.llm, &store.name).join("checkpoint.json"));
    if !checkpoint.exists() {
        return Err(CliError::missing(
            "head checkpoint",
            &checkpoint,
            &format!("train-head --store {} --llm {}", store.name, args.llm),
        ));
    }
    let name = format!("{}-f-{}", store.name, args.llm);
    let out = run.path(format!("stores/{name}.emb.jsonl"));
    let mut step = Step::new(
        run,
        "project",
        manifest_for(&out),
        json!({"store": store.name, "llm": args.llm}),
    );
    step.input(run, &store.path)?;
    step.input(run, &checkpoint)?;
    if step.up_to_date(run) {
        skipped(run, &out);
        return Ok(());
    }
    let text = fs::read_to_string(&checkpoint)?;
    let params = Checkpoint::from_json(&text)
        .and_then(Checkpoint::into_params)
        .map_err(|e| CliError::from(e).context(format!("loading {}", checkpoint.display())))?;
    let projected = head::project_store(&params, &store.store)?;
    crate::run::create_parent(&out)?;
    projected.write(&out)?;
    wrote(
        run,
        &out,
        &format!("{} records, store name {name}", projected.len()),
    );
    step.finish(
        run,
        &[out],
        json!({"records": projected.len(), "store": name}),
    )?;
    Ok(())
}
