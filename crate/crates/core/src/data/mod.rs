//! Synthetic triplet generation, concept parsing, vocabulary and dataset I/O.

pub mod io;
pub mod lexicon;
pub mod scene;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use io::{
    read_triplets, write_dataset, write_triplets, Dataset, ImageStore, ImageStoreWriter, TripletRecord, IMAGE_MAGIC,
};
pub use lexicon::{build_vocabulary, parse_concepts, tokenize, ConceptVocabulary, Lexicon, Pos, PosSet};
pub use scene::{
    generate_split, generate_triplet, render_clean, render_scene, Action, Attrs, Color, Edit, EditOp, GeneratorConfig,
    Scene, Shape, Triplet,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("empty: {0}")]
    Empty(String),
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("missing {kind} {id:?}")]
    Missing { kind: &'static str, id: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Concepts appearing in validation modifiers but never in training
/// modifiers, and the validation triplets that mention at least one of them.
pub fn make_zero_shot_split<S: AsRef<str>>(
    train_modifiers: &[S],
    val: &[TripletRecord],
    lexicon: &Lexicon,
    enabled: &PosSet,
) -> Result<(BTreeSet<String>, Vec<TripletRecord>), DataError> {
    if train_modifiers.is_empty() || val.is_empty() {
        return Err(DataError::Empty("zero-shot split needs non-empty train and val splits".into()));
    }
    let seen: BTreeSet<String> = train_modifiers
        .iter()
        .flat_map(|m| parse_concepts(m.as_ref(), lexicon, enabled))
        .collect();
    let val_concepts: Vec<BTreeSet<String>> =
        val.iter().map(|t| parse_concepts(&t.modifier, lexicon, enabled)).collect();
    let novel: BTreeSet<String> = val_concepts
        .iter()
        .flatten()
        .filter(|c| !seen.contains(*c))
        .cloned()
        .collect();
    if novel.is_empty() {
        log::warn!("no zero-shot concepts: validation vocabulary is covered by training");
    }
    let kept = val
        .iter()
        .zip(&val_concepts)
        .filter(|(_, cs)| !cs.is_disjoint(&novel))
        .map(|(t, _)| t.clone())
        .collect();
    Ok((novel, kept))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, modifier: &str) -> TripletRecord {
        TripletRecord {
            id: id.into(),
            ref_image: format!("{id}r"),
            tgt_image: format!("{id}t"),
            modifier: modifier.into(),
            concepts: BTreeSet::new(),
            edit: None,
            concept_patches: Default::default(),
        }
    }

    #[test]
    fn covered_validation_gives_empty_split() {
        let lex = Lexicon::standard();
        let (z, kept) = make_zero_shot_split(
            &["add a red circle", "remove the square"],
            &[rec("a", "add a circle"), rec("b", "remove the red square")],
            &lex,
            &PosSet::all(),
        )
        .unwrap();
        assert!(z.is_empty() && kept.is_empty());
    }

    #[test]
    fn novel_concepts_select_triplets() {
        let lex = Lexicon::standard();
        let (z, kept) = make_zero_shot_split(
            &["add a red circle"],
            &[rec("a", "add a blue circle"), rec("b", "add a red circle"), rec("c", "remove the circle")],
            &lex,
            &PosSet::all(),
        )
        .unwrap();
        let want: BTreeSet<String> = ["blue", "remove"].iter().map(|s| s.to_string()).collect();
        assert_eq!(z, want);
        let ids: Vec<&str> = kept.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "c"]);
    }

    #[test]
    fn mix_spreads_seeds() {
        assert_ne!(mix(1, 0), mix(1, 1));
        assert_ne!(mix(0, 1), mix(1, 0));
    }
}
