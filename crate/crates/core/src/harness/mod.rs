//! Training loop, retrieval metrics, checkpoints and exports.

mod config;
mod eval;
mod export;
mod train;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::TrainConfig;
pub use eval::{
    embed_gallery, evaluate, metrics_from_rankings, rank_gallery, score_queries, visually_similar_subset, GalleryEmbedding,
    Metrics, Ranking, SubsetIndex,
};
pub use export::{
    alignment_heatmap, localization_report, write_heatmap, write_rankings, Heatmap, LocalizationReport,
};
pub use train::{build_vocabularies, train, EpochLog, PatchCache, TrainOutcome};

use crate::data::{ConceptVocabulary, DataError, Lexicon};
use crate::diffcore::{read_checkpoint, write_checkpoint, DiffError, OptimizerState, ParameterSet};
use crate::encoders::{EncoderError, TextVocabulary};
use crate::model::ModelConfig;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("non-finite value in batch {batch}: {detail}")]
    NonFinite { batch: String, detail: String },
    #[error("{0}")]
    Diff(#[from] DiffError),
    #[error("{0}")]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Process exit code: 2 config, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::NonFinite { .. } => 4,
            HarnessError::Diff(DiffError::NonFiniteValue { .. }) => 4,
            HarnessError::Diff(_) => 3,
            HarnessError::Data(DataError::Config(_)) => 2,
            HarnessError::Data(_) | HarnessError::Encoder(_) | HarnessError::Io(_) | HarnessError::Json(_) => 3,
        }
    }
}

/// Everything needed to score queries: weights, vocabularies and configs.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub params: ParameterSet,
    pub optimizer: Option<OptimizerState>,
    pub epoch: usize,
    pub text_vocab: TextVocabulary,
    pub concepts: ConceptVocabulary,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    model: ModelConfig,
    epoch: usize,
    concepts: ConceptVocabulary,
}

const WEIGHTS_FILE: &str = "model.nck";
const META_FILE: &str = "checkpoint.json";
const VOCAB_FILE: &str = "text_vocab.txt";

impl TrainedModel {
    /// Writes `model.nck`, `checkpoint.json` and `text_vocab.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(WEIGHTS_FILE))?);
        write_checkpoint(&mut w, &self.params, self.optimizer.as_ref())?;
        w.flush()?;
        let meta = CheckpointMeta {
            config: self.config.clone(),
            model: self.model.clone(),
            epoch: self.epoch,
            concepts: self.concepts.clone(),
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join(META_FILE))?), &meta)?;
        self.text_vocab.save(&dir.join(VOCAB_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let open = |name: &str| {
            File::open(dir.join(name)).map_err(|e| {
                HarnessError::Data(DataError::Format {
                    path: dir.join(name).display().to_string(),
                    msg: e.to_string(),
                })
            })
        };
        let meta: CheckpointMeta = serde_json::from_reader(BufReader::new(open(META_FILE)?))?;
        let (params, optimizer) = read_checkpoint(&mut BufReader::new(open(WEIGHTS_FILE)?))?;
        let text_vocab = TextVocabulary::load(&dir.join(VOCAB_FILE))?;
        Ok(Self {
            config: meta.config,
            model: meta.model,
            params,
            optimizer,
            epoch: meta.epoch,
            text_vocab,
            concepts: meta.concepts,
        })
    }

    pub fn lexicon(&self) -> Lexicon {
        Lexicon::standard()
    }
}

/// `R@K` style keys for logs and reports.
pub fn recall_keys(m: &Metrics) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (k, v) in &m.recall {
        out.insert(format!("R@{k}"), *v);
    }
    for (k, v) in &m.subset_recall {
        out.insert(format!("R_s@{k}"), *v);
    }
    out
}
