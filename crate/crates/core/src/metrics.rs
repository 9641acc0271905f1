//! Ranking metrics and report tables.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranker::RankResult;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("sample {0} has no gold order")]
    MissingGold(String),
    #[error("orders are not permutations of the same ids: {0:?} vs {1:?}")]
    NotPermutation(Vec<String>, Vec<String>),
    #[error("invalid DCG gains {0:?}: need nonincreasing, nonnegative, first > 0")]
    InvalidGains(Vec<f64>),
    #[error("no results to evaluate")]
    Empty,
    #[error("report is missing {}", .0.join("; "))]
    MissingRows(Vec<String>),
    #[error("duplicate report row {0}")]
    DuplicateRow(String),
}

/// Gains for gold positions 1..n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcgGains(Vec<f64>);

impl DcgGains {
    pub fn new(gains: Vec<f64>) -> Result<Self, MetricError> {
        let ok = gains.first().is_some_and(|g| *g > 0.0)
            && gains.iter().all(|g| *g >= 0.0 && g.is_finite())
            && gains.windows(2).all(|w| w[0] >= w[1]);
        if ok {
            Ok(Self(gains))
        } else {
            Err(MetricError::InvalidGains(gains))
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    fn at(&self, position: usize) -> f64 {
        self.0.get(position).copied().unwrap_or(0.0)
    }
}

impl Default for DcgGains {
    fn default() -> Self {
        Self(vec![3.0, 1.0, 0.0, 0.0, 0.0])
    }
}

/// Gold position (0-based) of every predicted id, in prediction order.
fn gold_positions(pred: &[String], gold: &[String]) -> Result<Vec<usize>, MetricError> {
    let not_perm = || MetricError::NotPermutation(pred.to_vec(), gold.to_vec());
    if pred.len() != gold.len() {
        return Err(not_perm());
    }
    let index: HashMap<&str, usize> = gold
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    if index.len() != gold.len() {
        return Err(not_perm());
    }
    let mut seen = vec![false; gold.len()];
    pred.iter()
        .map(|id| {
            let pos = *index.get(id.as_str()).ok_or_else(not_perm)?;
            if std::mem::replace(&mut seen[pos], true) {
                return Err(not_perm());
            }
            Ok(pos)
        })
        .collect()
}

/// Spearman's ρ between two strict orders of the same ids.
pub fn spearman(pred: &[String], gold: &[String]) -> Result<f64, MetricError> {
    let positions = gold_positions(pred, gold)?;
    let n = positions.len() as f64;
    if positions.len() < 2 {
        return Ok(1.0);
    }
    let d2: f64 = positions
        .iter()
        .enumerate()
        .map(|(pred_rank, &gold_rank)| {
            let d = pred_rank as f64 - gold_rank as f64;
            d * d
        })
        .sum();
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

/// Σ_i gains[gold_position(pred[i])] / log2(i + 1), positions 1-based.
pub fn dcg(pred: &[String], gold: &[String], gains: &DcgGains) -> Result<f64, MetricError> {
    let positions = gold_positions(pred, gold)?;
    Ok(positions
        .iter()
        .enumerate()
        .map(|(i, &g)| gains.at(g) / ((i + 2) as f64).log2())
        .sum())
}

fn gold_for<'a>(
    result: &RankResult,
    golds: &'a HashMap<String, Vec<String>>,
) -> Result<&'a [String], MetricError> {
    golds
        .get(&result.sample_id)
        .map(Vec::as_slice)
        .ok_or_else(|| MetricError::MissingGold(result.sample_id.clone()))
}

pub fn top1_accuracy(
    results: &[RankResult],
    golds: &HashMap<String, Vec<String>>,
) -> Result<f64, MetricError> {
    if results.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut hits = 0;
    for r in results {
        let gold = gold_for(r, golds)?;
        if r.order.first() == gold.first() {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

pub fn mean_spearman(
    results: &[RankResult],
    golds: &HashMap<String, Vec<String>>,
) -> Result<f64, MetricError> {
    if results.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut sum = 0.0;
    for r in results {
        sum += spearman(&r.order, gold_for(r, golds)?)?;
    }
    Ok(sum / results.len() as f64)
}

pub fn mean_dcg(
    results: &[RankResult],
    golds: &HashMap<String, Vec<String>>,
    gains: &DcgGains,
) -> Result<f64, MetricError> {
    if results.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut sum = 0.0;
    for r in results {
        sum += dcg(&r.order, gold_for(r, golds)?, gains)?;
    }
    Ok(sum / results.len() as f64)
}

/// Per-sample means over one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub acc: f64,
    pub corr: f64,
    pub dcg: f64,
    pub n: usize,
}

pub fn evaluate(
    results: &[RankResult],
    golds: &HashMap<String, Vec<String>>,
    gains: &DcgGains,
) -> Result<SplitMetrics, MetricError> {
    Ok(SplitMetrics {
        acc: top1_accuracy(results, golds)?,
        corr: mean_spearman(results, golds)?,
        dcg: mean_dcg(results, golds, gains)?,
        n: results.len(),
    })
}

/// Sample-count-weighted mean of per-split metrics.
pub fn combine(parts: &[SplitMetrics]) -> SplitMetrics {
    let n: usize = parts.iter().map(|p| p.n).sum();
    let w = |f: fn(&SplitMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            parts.iter().map(|p| f(p) * p.n as f64).sum::<f64>() / n as f64
        }
    };
    SplitMetrics {
        acc: w(|p| p.acc),
        corr: w(|p| p.corr),
        dcg: w(|p| p.dcg),
        n,
    }
}

/// Identifies one report row: method block, LLM (None for baselines), encoder.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    /// Method label, e.g. `Baseline`, `CI`, `CIC`, `CI-F`, `CIC-F`.
    pub method: String,
    pub llm: Option<String>,
    pub clip: String,
}

impl RowKey {
    pub fn label(&self) -> String {
        format!(
            "{} {} {}",
            self.method,
            self.llm.as_deref().unwrap_or("-"),
            self.clip
        )
    }
}

/// Ranked results of one row on one split.
#[derive(Debug, Clone)]
pub struct RowInput {
    pub key: RowKey,
    pub split: String,
    pub results: Vec<RankResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub key: RowKey,
    /// Split name → metrics; includes combined columns.
    pub cells: BTreeMap<String, SplitMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Column order.
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub sample_counts: BTreeMap<String, usize>,
    pub gains: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ReportSpec {
    /// Splits every row must cover.
    pub splits: Vec<String>,
    /// Derived columns: name → the splits it pools, e.g. `EN` = test + XE.
    pub combined: Vec<(String, Vec<String>)>,
    /// When true, rows lacking a split are an error; otherwise the cell is blank.
    pub require_complete: bool,
}

/// Evaluates every row on every split and adds the combined columns.
pub fn build_report(
    inputs: &[RowInput],
    golds: &HashMap<String, HashMap<String, Vec<String>>>,
    spec: &ReportSpec,
    gains: &DcgGains,
) -> Result<EvalReport, MetricError> {
    let mut cells: BTreeMap<RowKey, BTreeMap<String, SplitMetrics>> = BTreeMap::new();
    let mut first_seen: Vec<RowKey> = Vec::new();
    for input in inputs {
        let split_golds = golds.get(&input.split).ok_or_else(|| {
            MetricError::MissingRows(vec![format!("gold labels for split {}", input.split)])
        })?;
        let metrics = evaluate(&input.results, split_golds, gains)?;
        let row = cells.entry(input.key.clone()).or_insert_with(|| {
            first_seen.push(input.key.clone());
            BTreeMap::new()
        });
        if row.insert(input.split.clone(), metrics).is_some() {
            return Err(MetricError::DuplicateRow(format!(
                "{} / {}",
                input.key.label(),
                input.split
            )));
        }
    }
    if spec.require_complete {
        let gaps: Vec<String> = first_seen
            .iter()
            .flat_map(|key| {
                spec.splits
                    .iter()
                    .filter(|s| !cells[key].contains_key(*s))
                    .map(move |s| format!("{} / {s}", key.label()))
            })
            .collect();
        if !gaps.is_empty() {
            return Err(MetricError::MissingRows(gaps));
        }
    }
    let mut columns = spec.splits.clone();
    for (name, parts) in &spec.combined {
        columns.push(name.clone());
        for row in cells.values_mut() {
            let present: Vec<SplitMetrics> =
                parts.iter().filter_map(|p| row.get(p).copied()).collect();
            if present.len() == parts.len() {
                row.insert(name.clone(), combine(&present));
            }
        }
    }
    let mut sample_counts = BTreeMap::new();
    for row in cells.values() {
        for (split, m) in row {
            sample_counts.entry(split.clone()).or_insert(m.n);
        }
    }
    let rows = first_seen
        .into_iter()
        .map(|key| ReportRow {
            cells: cells.remove(&key).unwrap_or_default(),
            key,
        })
        .collect();
    Ok(EvalReport {
        columns,
        rows,
        sample_counts,
        gains: gains.values().to_vec(),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Plain-text table grouped by method, one Acc/Corr/DCG triple per column.
    pub fn render_table(&self) -> String {
        let mut header = vec!["LLM".to_string(), "CLIP model".to_string()];
        for c in &self.columns {
            header.extend([format!("{c} Acc"), format!("{c} Corr"), format!("{c} DCG")]);
        }
        let mut body: Vec<Vec<String>> = Vec::new();
        let mut current_method: Option<&str> = None;
        for row in &self.rows {
            if current_method != Some(row.key.method.as_str()) {
                current_method = Some(&row.key.method);
                body.push(vec![format!("[{}]", row.key.method)]);
            }
            let mut line = vec![
                row.key.llm.clone().unwrap_or_else(|| "-".into()),
                row.key.clip.clone(),
            ];
            for c in &self.columns {
                match row.cells.get(c) {
                    Some(m) => line.extend([
                        format!("{:.3}", m.acc),
                        format!("{:.3}", m.corr),
                        format!("{:.3}", m.dcg),
                    ]),
                    None => line.extend(["-".into(), "-".into(), "-".into()]),
                }
            }
            body.push(line);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                std::iter::once(&header)
                    .chain(body.iter().filter(|l| l.len() > 1))
                    .map(|l| l[i].len())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let fmt_line = |cells: &[String]| {
            cells
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if i < 2 {
                        format!("{c:<w$}", w = widths[i])
                    } else {
                        format!("{c:>w$}", w = widths[i])
                    }
                })
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = fmt_line(&header);
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        out.push('\n');
        for line in &body {
            if line.len() == 1 {
                out.push_str(&line[0]);
            } else {
                out.push_str(&fmt_line(line));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,llm,clip,split,n,acc,corr,dcg\n");
        for row in &self.rows {
            for c in &self.columns {
                if let Some(m) = row.cells.get(c) {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        row.key.method,
                        row.key.llm.as_deref().unwrap_or("-"),
                        row.key.clip,
                        c,
                        m.n,
                        m.acc,
                        m.corr,
                        m.dcg
                    ));
                }
            }
        }
        out
    }
}
