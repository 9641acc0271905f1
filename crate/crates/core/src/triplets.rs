//! Anchor / positive / negative sets for contrastive training.
//!
//! Each training sample yields one entry. The anchor is the sample's query
//! embedding. For every modality the positive is the gold top image's record,
//! the hard negatives are the other four candidates' records, and the soft
//! negatives are the gold top records of `k_soft` other samples. A set stores
//! keys only; [`TripletSet::resolve`] pulls the vectors from a store.

use std::collections::HashSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sample;
use crate::embedstore::{make_key, EmbeddingStore, Role, StoreError};
use crate::head::{ContrastiveExample, ModalityGroup};
use crate::seed;

#[derive(Debug, Error)]
pub enum TripletError {
    #[error("sample {0} has no gold order")]
    MissingGoldOrder(String),
    #[error("sample {0} has no gold compound type")]
    MissingGoldType(String),
    #[error("k_soft = {k_soft} but each sample has only {others} other samples")]
    TooManySoftNegatives { k_soft: usize, others: usize },
    #[error("no training samples")]
    Empty,
    #[error("strict mode: missing {role} record {key}")]
    MissingModality { role: Role, key: String },
    #[error("raw image records are required for every candidate; missing {0}")]
    MissingImage(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Positive/negative record types, in canonical order.
pub const MODALITIES: [Role; 5] = [
    Role::Image,
    Role::ImageAug,
    Role::Caption,
    Role::CaptionBt,
    Role::CaptionPara,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityKeys {
    pub modality: Role,
    pub positive: String,
    pub hard: Vec<String>,
    pub soft: Vec<String>,
}

impl ModalityKeys {
    pub fn negative_count(&self) -> usize {
        self.hard.len() + self.soft.len()
    }

    pub fn negatives(&self) -> impl Iterator<Item = &String> {
        self.hard.iter().chain(&self.soft)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletEntry {
    pub sample_id: String,
    pub anchor: String,
    pub groups: Vec<ModalityKeys>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletOptions {
    /// Query variant used for anchors (usually the LLM name).
    pub llm_name: String,
    pub k_soft: usize,
    pub seed: u64,
    /// Require all five modalities; otherwise drop any modality that is not
    /// available for every candidate.
    pub strict: bool,
}

/// Serialized as the triplet manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletSet {
    pub llm_name: String,
    pub modalities: Vec<Role>,
    pub k_soft: usize,
    pub hard_neg_per_modality: usize,
    pub seed: u64,
    pub strict: bool,
    pub entries: Vec<TripletEntry>,
}

impl TripletSet {
    /// M: positives per anchor.
    pub fn m_count(&self) -> usize {
        self.modalities.len()
    }

    /// N: negatives per modality.
    pub fn n_count(&self) -> usize {
        self.hard_neg_per_modality + self.k_soft
    }

    /// Materializes the vectors referenced by every entry.
    pub fn resolve(&self, store: &EmbeddingStore) -> Result<Vec<ContrastiveExample>, StoreError> {
        self.entries
            .iter()
            .map(|entry| {
                let groups = entry
                    .groups
                    .iter()
                    .map(|g| {
                        Ok(ModalityGroup {
                            positive: store.get(&g.positive)?.to_vec(),
                            negatives: g
                                .negatives()
                                .map(|k| store.get(k).map(<[f64]>::to_vec))
                                .collect::<Result<_, _>>()?,
                        })
                    })
                    .collect::<Result<_, StoreError>>()?;
                Ok(ContrastiveExample {
                    anchor: store.get(&entry.anchor)?.to_vec(),
                    groups,
                })
            })
            .collect()
    }

    /// Redraws soft negatives under a new seed, keeping everything else.
    pub fn resample_soft(&self, samples: &[Sample], seed: u64) -> Result<TripletSet, TripletError> {
        build_triplets(
            samples,
            None,
            &TripletOptions {
                llm_name: self.llm_name.clone(),
                k_soft: self.k_soft,
                seed,
                strict: self.strict,
            },
            Some(&self.modalities),
        )
    }
}

struct Prepared<'a> {
    sample: &'a Sample,
    top: &'a str,
}

fn prepare(samples: &[Sample]) -> Result<Vec<Prepared<'_>>, TripletError> {
    samples
        .iter()
        .map(|s| {
            let top = s
                .gold_top()
                .ok_or_else(|| TripletError::MissingGoldOrder(s.sample_id.clone()))?;
            if s.gold_type.is_none() {
                return Err(TripletError::MissingGoldType(s.sample_id.clone()));
            }
            Ok(Prepared { sample: s, top })
        })
        .collect()
}

/// Modalities usable for the whole run.
fn available_modalities(
    prepared: &[Prepared<'_>],
    store: &EmbeddingStore,
    strict: bool,
) -> Result<Vec<Role>, TripletError> {
    let mut present = Vec::new();
    for role in MODALITIES {
        let missing = prepared.iter().find_map(|p| {
            p.sample
                .candidate_ids()
                .map(|id| make_key(&p.sample.sample_id, role, id))
                .find(|k| !store.contains(k))
        });
        match missing {
            None => present.push(role),
            Some(key) if role == Role::Image => return Err(TripletError::MissingImage(key)),
            Some(key) if strict => return Err(TripletError::MissingModality { role, key }),
            Some(key) => log::warn!("dropping modality {role}: missing {key}"),
        }
    }
    Ok(present)
}

pub fn build_triplets_from_store(
    samples: &[Sample],
    store: &EmbeddingStore,
    options: &TripletOptions,
) -> Result<TripletSet, TripletError> {
    build_triplets(samples, Some(store), options, None)
}

/// Builds the triplet set. With a store, modality availability and anchors are
/// checked against it; otherwise `modalities` must be given.
pub fn build_triplets(
    samples: &[Sample],
    store: Option<&EmbeddingStore>,
    options: &TripletOptions,
    modalities: Option<&[Role]>,
) -> Result<TripletSet, TripletError> {
    if samples.is_empty() {
        return Err(TripletError::Empty);
    }
    let prepared = prepare(samples)?;
    let others = prepared.len() - 1;
    if options.k_soft > others {
        return Err(TripletError::TooManySoftNegatives {
            k_soft: options.k_soft,
            others,
        });
    }
    let modalities = match (modalities, store) {
        (Some(m), _) => m.to_vec(),
        (None, Some(store)) => available_modalities(&prepared, store, options.strict)?,
        (None, None) => MODALITIES.to_vec(),
    };
    let mut rng = seed::rng_for(options.seed, "soft-negatives");

    let mut entries = Vec::with_capacity(prepared.len());
    for (i, p) in prepared.iter().enumerate() {
        let sid = &p.sample.sample_id;
        let anchor = make_key(sid, Role::Query, &options.llm_name);
        if let Some(store) = store {
            store.get(&anchor)?;
        }
        // Indices into `prepared`, skipping the entry's own sample.
        let soft: Vec<usize> = index::sample(&mut rng, others, options.k_soft)
            .into_iter()
            .map(|j| if j >= i { j + 1 } else { j })
            .collect();

        let groups = modalities
            .iter()
            .map(|&role| {
                let positive = make_key(sid, role, p.top);
                let hard = p
                    .sample
                    .candidate_ids()
                    .filter(|id| *id != p.top)
                    .map(|id| make_key(sid, role, id))
                    .collect();
                let soft = soft
                    .iter()
                    .map(|&j| make_key(&prepared[j].sample.sample_id, role, prepared[j].top))
                    .collect();
                ModalityKeys {
                    modality: role,
                    positive,
                    hard,
                    soft,
                }
            })
            .collect();
        let entry = TripletEntry {
            sample_id: sid.clone(),
            anchor,
            groups,
        };
        debug_assert!(no_leakage(&entry));
        entries.push(entry);
    }
    Ok(TripletSet {
        llm_name: options.llm_name.clone(),
        modalities,
        k_soft: options.k_soft,
        hard_neg_per_modality: crate::corpus::CANDIDATES_PER_SAMPLE - 1,
        seed: options.seed,
        strict: options.strict,
        entries,
    })
}

/// True when no positive key of the entry appears among its negatives.
pub fn no_leakage(entry: &TripletEntry) -> bool {
    let positives: HashSet<&String> = entry.groups.iter().map(|g| &g.positive).collect();
    entry
        .groups
        .iter()
        .flat_map(|g| g.negatives())
        .all(|k| !positives.contains(k) && *k != entry.anchor)
}
