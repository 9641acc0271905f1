#![allow(dead_code)]

use idiorank::corpus::{CandidateImage, CompoundType, Sample};
use idiorank::embedstore::{make_key, EmbeddingRecord, EmbeddingStore, Role};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` samples with five candidates each; gold order rotates with the index.
pub fn samples(n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample {
            sample_id: format!("s{i:03}"),
            compound: format!("compound {i}"),
            sentence: format!("A sentence mentioning compound {i}."),
            language: None,
            gold_type: Some(if i % 3 == 0 {
                CompoundType::Literal
            } else {
                CompoundType::Idiomatic
            }),
            gold_order: Some((0..5).map(|k| format!("img{}", (k + i) % 5)).collect()),
            candidates: (0..5)
                .map(|k| CandidateImage {
                    image_id: format!("img{k}"),
                    image_path: format!("compound {i}/img{k}.png"),
                    caption: format!("caption {k} of {i}"),
                })
                .collect(),
        })
        .collect()
}

pub fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Random store covering every role for the given samples and query variants.
pub fn store_for(samples: &[Sample], variants: &[&str], dim: usize, seed: u64) -> EmbeddingStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = EmbeddingStore::new("synthetic", dim);
    for s in samples {
        for v in variants {
            let key = make_key(&s.sample_id, Role::Query, v);
            store
                .insert(EmbeddingRecord::new(
                    key,
                    Role::Query,
                    random_vec(&mut rng, dim),
                ))
                .unwrap();
        }
        for c in &s.candidates {
            for role in [
                Role::Image,
                Role::Caption,
                Role::ImageAug,
                Role::CaptionBt,
                Role::CaptionPara,
            ] {
                let key = make_key(&s.sample_id, role, &c.image_id);
                store
                    .insert(EmbeddingRecord::new(key, role, random_vec(&mut rng, dim)))
                    .unwrap();
            }
        }
    }
    store
}
