//! Cosine ranking scores, candidate ordering and the unweighted multi-LLM
//! ensemble.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedstore::SampleBundle;

/// `llm_name` of ensembled results.
pub const ENSEMBLE: &str = "ensemble";

#[derive(Debug, Error, PartialEq)]
pub enum RankError {
    #[error("vector length mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error("sample {sample_id}: no caption embedding for {image_id} (required in CIC mode)")]
    MissingCaption { sample_id: String, image_id: String },
    #[error("ensemble needs at least 2 results, got {0}")]
    TooFewResults(usize),
    #[error("ensemble inputs disagree: {0}")]
    Mismatched(String),
}

/// Which similarity terms make up the ranking score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Compound and image.
    Ci,
    /// Compound, image and caption.
    Cic,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::Ci => "ci",
            ScoreMode::Cic => "cic",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ci" => Ok(ScoreMode::Ci),
            "cic" => Ok(ScoreMode::Cic),
            other => Err(format!("unknown score mode {other:?} (expected ci or cic)")),
        }
    }
}

/// Cosine similarity in double precision.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, RankError> {
    if u.len() != v.len() {
        return Err(RankError::DimMismatch(u.len(), v.len()));
    }
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(RankError::ZeroNorm);
    }
    Ok((dot / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub sample_id: String,
    pub llm_name: String,
    pub mode: ScoreMode,
    /// Ranking score per image, in candidate order.
    pub scores: IndexMap<String, f64>,
    /// Image ids, best first.
    pub order: Vec<String>,
}

/// Sorts ids by descending score; equal scores keep candidate order.
pub fn order_by_scores(scores: &IndexMap<String, f64>) -> Vec<String> {
    let mut entries: Vec<(&String, f64)> = scores.iter().map(|(k, v)| (k, *v)).collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1));
    entries.into_iter().map(|(k, _)| k.clone()).collect()
}

pub fn score_sample(bundle: &SampleBundle<'_>, mode: ScoreMode) -> Result<RankResult, RankError> {
    let mut scores = IndexMap::with_capacity(bundle.candidates.len());
    for cand in &bundle.candidates {
        let mut r = cosine(bundle.query, cand.image)?;
        if mode == ScoreMode::Cic {
            let caption = cand.caption.ok_or_else(|| RankError::MissingCaption {
                sample_id: bundle.sample_id.clone(),
                image_id: cand.image_id.clone(),
            })?;
            r += cosine(bundle.query, caption)?;
        }
        scores.insert(cand.image_id.clone(), r);
    }
    let order = order_by_scores(&scores);
    Ok(RankResult {
        sample_id: bundle.sample_id.clone(),
        llm_name: bundle.llm_name.clone(),
        mode,
        scores,
        order,
    })
}

/// Per-image arithmetic mean of the inputs' scores.
///
/// Each image's scores are summed in sorted order, so the result does not
/// depend on the order of `results`.
pub fn ensemble_scores(results: &[RankResult]) -> Result<RankResult, RankError> {
    if results.len() < 2 {
        return Err(RankError::TooFewResults(results.len()));
    }
    let first = &results[0];
    for r in &results[1..] {
        if r.sample_id != first.sample_id {
            return Err(RankError::Mismatched(format!(
                "samples {} and {}",
                first.sample_id, r.sample_id
            )));
        }
        if r.mode != first.mode {
            return Err(RankError::Mismatched(format!(
                "sample {}: modes {} and {}",
                first.sample_id, first.mode, r.mode
            )));
        }
        let same_set = r.scores.len() == first.scores.len()
            && r.scores.keys().all(|k| first.scores.contains_key(k));
        if !same_set {
            return Err(RankError::Mismatched(format!(
                "sample {}: candidate sets differ between {} and {}",
                first.sample_id, first.llm_name, r.llm_name
            )));
        }
    }
    let n = results.len() as f64;
    let scores: IndexMap<String, f64> = first
        .scores
        .keys()
        .map(|id| {
            let mut values: Vec<f64> = results.iter().map(|r| r.scores[id]).collect();
            values.sort_by(f64::total_cmp);
            (id.clone(), values.iter().sum::<f64>() / n)
        })
        .collect();
    let order = order_by_scores(&scores);
    Ok(RankResult {
        sample_id: first.sample_id.clone(),
        llm_name: ENSEMBLE.to_string(),
        mode: first.mode,
        scores,
        order,
    })
}

/// Scores many bundles in parallel; output follows input order.
pub fn score_all(
    bundles: &[SampleBundle<'_>],
    mode: ScoreMode,
) -> Result<Vec<RankResult>, RankError> {
    use rayon::prelude::*;
    bundles.par_iter().map(|b| score_sample(b, mode)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::CandidateVectors;

    fn result(llm: &str, scores: &[(&str, f64)]) -> RankResult {
        let scores: IndexMap<String, f64> =
            scores.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        RankResult {
            sample_id: "s".into(),
            llm_name: llm.into(),
            mode: ScoreMode::Ci,
            order: order_by_scores(&scores),
            scores,
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.7071067811865475).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(RankError::ZeroNorm));
        assert_eq!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(RankError::DimMismatch(1, 2))
        );
    }

    fn unit(i: usize, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn query_equal_to_image_ranks_first() {
        let images: Vec<Vec<f64>> = (0..5).map(|i| unit(i, 5)).collect();
        let query = images[2].clone();
        let bundle = SampleBundle {
            sample_id: "s".into(),
            llm_name: "gpt4".into(),
            query: &query,
            candidates: images
                .iter()
                .enumerate()
                .map(|(i, v)| CandidateVectors {
                    image_id: format!("i{i}"),
                    image: v,
                    caption: None,
                    image_aug: None,
                    caption_bt: None,
                    caption_para: None,
                })
                .collect(),
        };
        let r = score_sample(&bundle, ScoreMode::Ci).unwrap();
        assert_eq!(r.order[0], "i2");
        assert_eq!(r.scores["i2"], 1.0);
        assert!(matches!(
            score_sample(&bundle, ScoreMode::Cic),
            Err(RankError::MissingCaption { .. })
        ));
    }

    #[test]
    fn cic_caption_decides() {
        // In 2D, a unit vector at angle acos(c) from the query has cosine c.
        let at = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let query = vec![1.0, 0.0];
        let image = at(0.5);
        let captions: Vec<Vec<f64>> = (0..5).map(|i| at(if i == 4 { 0.9 } else { 0.1 })).collect();
        let bundle = SampleBundle {
            sample_id: "s".into(),
            llm_name: "m".into(),
            query: &query,
            candidates: (0..5)
                .map(|i| CandidateVectors {
                    image_id: format!("i{i}"),
                    image: &image,
                    caption: Some(&captions[i]),
                    image_aug: None,
                    caption_bt: None,
                    caption_para: None,
                })
                .collect(),
        };
        let cic = score_sample(&bundle, ScoreMode::Cic).unwrap();
        assert_eq!(cic.order[0], "i4");
        assert!((cic.scores["i4"] - 1.4).abs() < 1e-12);
        let ci = score_sample(&bundle, ScoreMode::Ci).unwrap();
        assert_eq!(ci.order, ["i0", "i1", "i2", "i3", "i4"]);
    }

    #[test]
    fn equal_scores_keep_candidate_order() {
        let r = result(
            "m",
            &[("e", 0.3), ("b", 0.3), ("a", 0.3), ("d", 0.3), ("c", 0.3)],
        );
        assert_eq!(r.order, ["e", "b", "a", "d", "c"]);
    }

    #[test]
    fn ensemble_examples() {
        let a = result("gpt4", &[("A", 1.0), ("B", 0.0)]);
        let b = result("gpt4o", &[("A", 0.0), ("B", 0.8)]);
        let e = ensemble_scores(&[a.clone(), b]).unwrap();
        assert_eq!(e.scores["A"], 0.5);
        assert_eq!(e.scores["B"], 0.4);
        assert_eq!(e.order, ["A", "B"]);
        assert_eq!(e.llm_name, ENSEMBLE);

        let same = ensemble_scores(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(same.order, a.order);

        // Two models prefer X by 0.2, one prefers Y by 0.1: the mean keeps X on top.
        let r1 = result("m1", &[("X", 0.6), ("Y", 0.4)]);
        let r2 = result("m2", &[("X", 0.55), ("Y", 0.35)]);
        let r3 = result("m3", &[("X", 0.4), ("Y", 0.5)]);
        let e = ensemble_scores(&[r1, r2, r3]).unwrap();
        assert_eq!(e.order[0], "X");
    }

    #[test]
    fn ensemble_rejects_mismatches() {
        let a = result("m1", &[("A", 1.0), ("B", 0.0)]);
        let b = result("m2", &[("A", 1.0), ("C", 0.0)]);
        assert!(matches!(
            ensemble_scores(&[a.clone(), b]),
            Err(RankError::Mismatched(_))
        ));
        assert_eq!(ensemble_scores(&[a]), Err(RankError::TooFewResults(1)));
    }
}
