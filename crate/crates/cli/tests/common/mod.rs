#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use idiorank::corpus::{dataset_to_json, CandidateImage, CompoundType, Language, Sample};
use idiorank::embedstore::{make_key, EmbeddingRecord, EmbeddingStore, Role, COMPOUND_QUERY};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

pub const LLMS: [&str; 3] = ["gpt-3.5", "gpt-4", "gpt-4o"];

pub struct Options {
    /// Split name → sample count.
    pub splits: Vec<(&'static str, usize)>,
    pub dim: usize,
    pub roles: Vec<Role>,
    pub seed: u64,
    /// Extra TOML appended to the config.
    pub extra_config: String,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            splits: vec![("train", 50), ("val", 6), ("test", 14)],
            dim: 16,
            roles: vec![
                Role::Image,
                Role::Caption,
                Role::ImageAug,
                Role::CaptionBt,
                Role::CaptionPara,
            ],
            seed: 1,
            extra_config: String::new(),
        }
    }
}

pub struct Fixture {
    pub dir: TempDir,
}

impl Fixture {
    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn run_path(&self, run: &str, rel: impl AsRef<Path>) -> PathBuf {
        self.dir.path().join("runs").join(run).join(rel)
    }

    /// Runs the binary inside the fixture directory for run `run`.
    pub fn cli(&self, run: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_idiorank"))
            .current_dir(self.dir.path())
            .args(["--config", "config.toml", "--run-id", run])
            .args(args)
            .env_remove("RUST_LOG")
            .output()
            .expect("binary runs")
    }

    /// Like `cli`, but fails the test on a nonzero exit.
    pub fn ok(&self, run: &str, args: &[&str]) -> String {
        let out = self.cli(run, args);
        assert!(
            out.status.success(),
            "idiorank {args:?} failed ({:?}):\n{}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn noisy(rng: &mut ChaCha8Rng, base: &[f64], scale: f64) -> Vec<f64> {
    base.iter()
        .map(|x| x + scale * rng.random_range(-1.0..1.0))
        .collect()
}

fn make_samples(split: &str, n: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let ids: Vec<String> = (0..5).map(|k| format!("img{k}")).collect();
            let mut gold = ids.clone();
            gold.shuffle(rng);
            Sample {
                sample_id: format!("{split}{i:03}"),
                compound: format!("{split} compound {i}"),
                sentence: format!("A sentence using the {split} compound {i}."),
                language: None,
                gold_type: Some(if i % 3 == 0 {
                    CompoundType::Literal
                } else {
                    CompoundType::Idiomatic
                }),
                gold_order: Some(gold),
                candidates: ids
                    .iter()
                    .map(|id| CandidateImage {
                        image_id: id.clone(),
                        image_path: format!("images/{split}{i:03}/{id}.png"),
                        caption: format!("caption of {id} for {split} {i}"),
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Query vectors lean toward the gold top and second image; the baseline
/// query is noisier than the LLM ones.
fn add_sample(store: &mut EmbeddingStore, s: &Sample, roles: &[Role], rng: &mut ChaCha8Rng) {
    let dim = store.dim();
    let dirs: BTreeMap<String, Vec<f64>> = s
        .candidates
        .iter()
        .map(|c| {
            (
                c.image_id.clone(),
                unit((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
            )
        })
        .collect();
    let gold = s.gold_order.as_ref().unwrap();
    let target: Vec<f64> = (0..dim)
        .map(|j| dirs[&gold[0]][j] + 0.5 * dirs[&gold[1]][j])
        .collect();
    let variants = std::iter::once((COMPOUND_QUERY, 1.2))
        .chain(LLMS.iter().zip([0.8, 0.6, 0.7]).map(|(l, n)| (*l, n)));
    for (variant, noise) in variants {
        let q = noisy(rng, &target, noise);
        store
            .insert(EmbeddingRecord::new(
                make_key(&s.sample_id, Role::Query, variant),
                Role::Query,
                q,
            ))
            .unwrap();
    }
    for c in &s.candidates {
        for &role in roles {
            let v = noisy(rng, &dirs[&c.image_id], 0.4);
            let mut record =
                EmbeddingRecord::new(make_key(&s.sample_id, role, &c.image_id), role, v);
            if role == Role::Caption {
                record.truncated = Some(false);
            }
            store.insert(record).unwrap();
        }
    }
}

/// Mock transcripts: mostly right about the type, a few errors per LLM.
fn mock_script(llm_index: usize, samples: &[Sample]) -> BTreeMap<String, Vec<String>> {
    let mut script = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let gold = s.gold_type.unwrap();
        let wrong = (i + llm_index).is_multiple_of(7);
        let (yes, no) = match (gold, wrong) {
            (CompoundType::Idiomatic, false) | (CompoundType::Literal, true) => {
                ("Idiomatic", "Literal.")
            }
            _ => ("literal", "Idiomatic"),
        };
        script.insert(
            format!("classify|{}", s.compound),
            vec![
                yes.into(),
                no.into(),
                format!("The answer is {yes}"),
                yes.into(),
                "unsure".into(),
            ],
        );
        script.insert(
            format!("meaning|{}", s.compound),
            vec![format!(
                "\"figurative sense {} of {}\"",
                llm_index, s.compound
            )],
        );
    }
    script
}

pub fn build(options: Options) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::create_dir_all(root.join("data")).unwrap();
    fs::create_dir_all(root.join("mock")).unwrap();
    fs::create_dir_all(root.join("stores")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut store = EmbeddingStore::new(format!("SYNTH-{}", options.dim), options.dim);
    let mut all = Vec::new();
    let mut data_toml = String::from("[data]\n");
    for (split, n) in &options.splits {
        let samples = make_samples(split, *n, &mut rng);
        for s in &samples {
            add_sample(&mut store, s, &options.roles, &mut rng);
        }
        fs::write(
            root.join(format!("data/{split}.json")),
            dataset_to_json(Language::En, &samples),
        )
        .unwrap();
        data_toml.push_str(&format!("{split} = \"data/{split}.json\"\n"));
        all.extend(samples);
    }
    store.write(&root.join("stores/synth.emb.jsonl")).unwrap();
    let mut llm_toml = String::new();
    for (i, llm) in LLMS.iter().enumerate() {
        let script = mock_script(i, &all);
        fs::write(
            root.join(format!("mock/{llm}.json")),
            serde_json::to_string_pretty(&script).unwrap(),
        )
        .unwrap();
        llm_toml.push_str(&format!(
            "[llm.\"{llm}\"]\nfixture = \"mock/{llm}.json\"\n\n"
        ));
    }
    let config = format!(
        "runs_dir = \"runs\"\nseed = 7\n\n{data_toml}\n[stores]\nsynth = \"stores/synth.emb.jsonl\"\n\n{llm_toml}{}\n",
        options.extra_config
    );
    fs::write(root.join("config.toml"), config).unwrap();
    Fixture { dir }
}

pub const PIPELINE_TRAIN: &str = "[train]\nhidden = 96\nmax_epochs = 4\npatience = 2\nk_soft = 10\nlearning_rate = 1e-3\ntest_split = \"test\"\n";

/// Classify, meanings, rankings, ensemble, one head and the report.
pub fn run_pipeline(fx: &Fixture, run: &str) {
    for llm in LLMS {
        fx.ok(run, &["classify", "--llm", llm, "--split", "test"]);
        fx.ok(run, &["meanings", "--llm", llm, "--split", "test"]);
    }
    for mode in ["ci", "cic"] {
        fx.ok(
            run,
            &[
                "rank", "--store", "synth", "--split", "test", "--mode", mode,
            ],
        );
        for llm in LLMS {
            fx.ok(
                run,
                &[
                    "rank", "--store", "synth", "--split", "test", "--mode", mode, "--llm", llm,
                ],
            );
        }
        fx.ok(
            run,
            &[
                "ensemble",
                "--llms",
                &LLMS.join(","),
                "--store",
                "synth",
                "--split",
                "test",
                "--mode",
                mode,
            ],
        );
    }
    fx.ok(
        run,
        &["build-triplets", "--store", "synth", "--llm", "gpt-4"],
    );
    fx.ok(run, &["train-head", "--store", "synth", "--llm", "gpt-4"]);
    fx.ok(run, &["project", "--store", "synth", "--llm", "gpt-4"]);
    fx.ok(
        run,
        &[
            "rank",
            "--store",
            "synth-f-gpt-4",
            "--split",
            "test",
            "--llm",
            "gpt-4",
        ],
    );
    fx.ok(run, &["report"]);
}

/// Relative path → bytes for every primary output of a pipeline run.
pub fn primary_outputs(fx: &Fixture, run: &str) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let root = fx.run_path(run, "");
    let mut stack = vec![root.clone()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            let rel = p.strip_prefix(&root).unwrap().to_string_lossy().to_string();
            if !name.contains("manifest") {
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}
