pub mod data;
pub mod llm;
pub mod rank;
pub mod report;
pub mod train;

use std::path::{Path, PathBuf};

use crate::run::Run;

/// `dir/name.jsonl` → `dir/name.manifest.json`.
pub fn manifest_for(output: &Path) -> PathBuf {
    let name = output
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    let stem = [".emb.jsonl", ".jsonl", ".json", ".csv"]
        .iter()
        .find_map(|ext| name.strip_suffix(ext))
        .unwrap_or(name);
    output.with_file_name(format!("{stem}.manifest.json"))
}

pub fn skipped(run: &Run, what: &Path) {
    println!("up to date: {}", run.display(what));
}

pub fn wrote(run: &Run, what: &Path, detail: &str) {
    println!("wrote {} ({detail})", run.display(what));
}
