//! The training loop.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::eval::{embed_gallery, evaluate_embedded, gallery_of, SubsetIndex};
use super::{recall_keys, HarnessError, TrainConfig, TrainedModel};
use crate::data::{build_vocabulary, parse_concepts, seeded_rng, ConceptVocabulary, DataError, Dataset, ImageStore, Lexicon, TripletRecord};
use crate::diffcore::{adamw_step, step_decay_lr, AdamWConfig, DiffError, Graph, OptimizerState, ParameterSet, Program, Tensor};
use crate::encoders::{load_word_vectors, TextBatch, TextVocabulary, IMAGE_PREFIX};
use crate::model::{init_model, Batch, LossProgram, ModelConfig};

/// Patch tensors (`[L, P]`) of every image, computed once.
#[derive(Clone, Debug)]
pub struct PatchCache {
    patches: BTreeMap<String, Tensor>,
    pub patch: usize,
    pub channels: usize,
    /// Patch grid of each image.
    pub rows: usize,
    pub cols: usize,
}

impl PatchCache {
    pub fn build(images: &ImageStore, patch: usize) -> Result<Self, HarnessError> {
        let mut patches = BTreeMap::new();
        let mut geometry = None;
        for id in images.ids() {
            let img = images.get(id)?;
            let g = (img.height(), img.width(), img.channels());
            match geometry {
                None => geometry = Some(g),
                Some(prev) if prev != g => {
                    return Err(HarnessError::Data(DataError::Format {
                        path: id.clone(),
                        msg: format!("image is {g:?} but earlier images are {prev:?}"),
                    }))
                }
                _ => {}
            }
            patches.insert(id.clone(), img.patches(patch)?);
        }
        let (h, w, c) = geometry.ok_or_else(|| HarnessError::Data(DataError::Empty("image store".into())))?;
        Ok(Self {
            patches,
            patch,
            channels: c,
            rows: h / patch,
            cols: w / patch,
        })
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn get(&self, id: &str) -> Result<&Tensor, HarnessError> {
        self.patches.get(id).ok_or_else(|| {
            HarnessError::Data(DataError::Missing {
                kind: "image",
                id: id.to_string(),
            })
        })
    }

    /// `[B, L, P]` stack of the named images.
    pub fn stack<S: AsRef<str>>(&self, ids: &[S]) -> Result<Tensor, HarnessError> {
        let mut data = Vec::new();
        let mut shape = vec![ids.len()];
        for id in ids {
            let t = self.get(id.as_ref())?;
            if shape.len() == 1 {
                shape.extend_from_slice(t.shape());
            }
            data.extend_from_slice(t.data());
        }
        Ok(Tensor::new(shape, data)?)
    }
}

/// Text vocabulary and concept vocabulary, both from training modifiers only.
pub fn build_vocabularies(
    train: &[TripletRecord],
    lexicon: &Lexicon,
    cfg: &TrainConfig,
) -> Result<(TextVocabulary, ConceptVocabulary), HarnessError> {
    let modifiers: Vec<&str> = train.iter().map(|t| t.modifier.as_str()).collect();
    let concepts = build_vocabulary(&modifiers, lexicon, &cfg.pos)?;
    Ok((TextVocabulary::build(&modifiers), concepts))
}

/// One line of the metrics log. Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_m")]
    pub l_m: f64,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub lr: f64,
    /// `R@K` and `R_s@K` on the validation split, when evaluated.
    pub recall: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub log: Vec<EpochLog>,
}

pub(crate) fn text_batch(vocab: &TextVocabulary, records: &[&TripletRecord]) -> Result<TextBatch, HarnessError> {
    let seqs: Vec<Vec<usize>> = records.iter().map(|r| vocab.encode(&r.modifier)).collect();
    if let Some(r) = records.iter().zip(&seqs).find(|(_, s)| s.is_empty()).map(|(r, _)| r) {
        return Err(HarnessError::Data(DataError::Format {
            path: r.id.clone(),
            msg: "empty modifier".into(),
        }));
    }
    Ok(TextBatch::new(&seqs, vocab.len())?)
}

struct Prepared<'a> {
    model: &'a ModelConfig,
    cache: &'a PatchCache,
    vocab: &'a TextVocabulary,
    labels: BTreeMap<&'a str, Vec<f32>>,
}

impl Prepared<'_> {
    fn batch(&self, records: &[&TripletRecord]) -> Result<Batch, HarnessError> {
        let refs: Vec<&str> = records.iter().map(|r| r.ref_image.as_str()).collect();
        let tgts: Vec<&str> = records.iter().map(|r| r.tgt_image.as_str()).collect();
        let m = self.labels.values().next().map_or(0, Vec::len);
        let labels: Vec<f32> = records.iter().flat_map(|r| self.labels[r.id.as_str()].iter().copied()).collect();
        Ok(Batch {
            ref_patches: self.cache.stack(&refs)?,
            tgt_patches: self.cache.stack(&tgts)?,
            text: text_batch(self.vocab, records)?,
            labels: Tensor::new(vec![records.len(), m], labels)?,
        })
    }

    /// Loss values and, with `with_grad`, gradients for one batch.
    fn step(
        &self,
        params: &ParameterSet,
        batch: &Batch,
        frozen: bool,
        with_grad: bool,
        label: &str,
    ) -> Result<([f64; 3], Option<ParameterSet>), HarnessError> {
        let numeric = |e: DiffError| match e {
            DiffError::NonFiniteValue { context } => HarnessError::NonFinite {
                batch: label.to_string(),
                detail: context,
            },
            other => HarnessError::Diff(other),
        };
        let frozen_prefixes = if frozen { vec![IMAGE_PREFIX.to_string()] } else { Vec::new() };
        let mut g = Graph::new(params).with_frozen(&frozen_prefixes);
        if !with_grad {
            g = g.no_grad();
        }
        let program = LossProgram {
            cfg: self.model,
            batch,
        };
        let out = program.build(&mut g).map_err(numeric)?;
        let get = |name: &str| {
            out.outputs
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| g.value(*v).item() as f64)
                .unwrap_or(0.0)
        };
        let values = [get("L_m"), get("L_c"), g.value(out.loss).item() as f64];
        if !with_grad {
            return Ok((values, None));
        }
        let grads = g.backward(out.loss).map_err(numeric)?;
        if let Some((p, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(HarnessError::NonFinite {
                batch: label.to_string(),
                detail: format!("gradient of {p}"),
            });
        }
        Ok((values, Some(grads)))
    }
}

fn batches<'a>(order: &[&'a TripletRecord], size: usize) -> Vec<Vec<&'a TripletRecord>> {
    let mut out: Vec<Vec<&TripletRecord>> = order.chunks(size).map(|c| c.to_vec()).collect();
    // a lone trailing triplet has no in-batch negatives
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

fn batch_label(epoch: usize, i: usize, b: &[&TripletRecord]) -> String {
    let ids: Vec<&str> = b.iter().map(|r| r.id.as_str()).collect();
    format!("epoch {epoch} batch {i} [{}]", ids.join(","))
}

/// Trains on `ds.train`, evaluating on `ds.val`. With `out_dir`, the metrics
/// log is appended to `metrics.jsonl` every epoch and the final checkpoint
/// is written there.
pub fn train(cfg: &TrainConfig, ds: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let seed = cfg
        .seed
        .ok_or_else(|| HarnessError::Config("a training seed is required".into()))?;
    if ds.train.len() < 2 {
        return Err(HarnessError::Data(DataError::Empty(
            "training needs at least two triplets".into(),
        )));
    }
    let lexicon = Lexicon::standard();
    let patch = ds.generator.as_ref().map_or(cfg.patch, |g| g.patch);
    let cache = PatchCache::build(&ds.images, patch)?;
    let model_cfg = cfg.model_config(patch, cache.channels, cache.tokens());
    let (vocab, concepts) = build_vocabularies(&ds.train, &lexicon, cfg)?;
    let word_vectors = match &cfg.word_vectors {
        Some(p) => Some(load_word_vectors(p, cfg.d)?),
        None => None,
    };
    let mut params = init_model(&model_cfg, &vocab, &concepts.concepts, seed, word_vectors.as_ref());
    let mut opt = OptimizerState::for_params(&params);
    log::info!(
        "training {} triplets, {} parameters, |M| = {}, vocabulary {}",
        ds.train.len(),
        params.num_elements(),
        concepts.len(),
        vocab.len()
    );

    let labels = ds
        .train
        .iter()
        .map(|r| (r.id.as_str(), concepts.multi_hot(&parse_concepts(&r.modifier, &lexicon, &cfg.pos))))
        .collect();
    let prep = Prepared {
        model: &model_cfg,
        cache: &cache,
        vocab: &vocab,
        labels,
    };

    let gallery = gallery_of(&ds.val);
    let subsets = if ds.val.is_empty() {
        SubsetIndex::default()
    } else {
        SubsetIndex::build(&model_cfg, cfg.subset_seed, &cache, &gallery, cfg.subset_size)?
    };
    let validate = |params: &ParameterSet| -> Result<BTreeMap<String, f64>, HarnessError> {
        if ds.val.is_empty() {
            return Ok(BTreeMap::new());
        }
        let emb = embed_gallery(&model_cfg, params, &cache, &gallery)?;
        let (m, _) = evaluate_embedded(&model_cfg, params, &vocab, &cache, &ds.val, &emb, Some(&subsets), cfg)?;
        Ok(recall_keys(&m))
    };

    let mut sink = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.txt"), cfg.to_text())?;
            Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(cfg.epochs + 1);
    let mut emit = |entry: EpochLog, sink: &mut Option<BufWriter<File>>| -> Result<(), HarnessError> {
        log::info!(
            "epoch {} L {:.4} L_m {:.4} L_c {:.5} lr {:.2e} {:?}",
            entry.epoch,
            entry.l,
            entry.l_m,
            entry.l_c,
            entry.lr,
            entry.recall
        );
        if let Some(w) = sink {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        log.push(entry);
        Ok(())
    };

    let in_order: Vec<&TripletRecord> = ds.train.iter().collect();
    let bs = cfg.batch_size.min(ds.train.len());

    // untrained reference point
    let mut sums = [0.0f64; 3];
    let initial = batches(&in_order, bs);
    for (i, b) in initial.iter().enumerate() {
        let batch = prep.batch(b)?;
        let (v, _) = prep.step(&params, &batch, true, false, &batch_label(0, i, b))?;
        (0..3).for_each(|j| sums[j] += v[j]);
    }
    let n = initial.len() as f64;
    emit(
        EpochLog {
            epoch: 0,
            l_m: sums[0] / n,
            l_c: sums[1] / n,
            l: sums[2] / n,
            lr: cfg.lr,
            recall: validate(&params)?,
        },
        &mut sink,
    )?;

    for epoch in 1..=cfg.epochs {
        let e0 = epoch - 1;
        let lr = step_decay_lr(cfg.lr, cfg.lr_decay, cfg.lr_decay_every, e0);
        let frozen = e0 < cfg.freeze_epochs;
        let adam = AdamWConfig {
            lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        };
        let mut order = in_order.clone();
        order.shuffle(&mut seeded_rng(seed, 1_000 + epoch as u64));
        let epoch_batches = batches(&order, bs);
        let mut sums = [0.0f64; 3];
        for (i, b) in epoch_batches.iter().enumerate() {
            let label = batch_label(epoch, i, b);
            let batch = prep.batch(b)?;
            let (v, grads) = prep.step(&params, &batch, frozen, true, &label)?;
            (0..3).for_each(|j| sums[j] += v[j]);
            let grads = grads.expect("gradients requested");
            let (np, no) = adamw_step(&params, &grads, &opt, &adam, |p| frozen && p.starts_with(IMAGE_PREFIX))?;
            if !np.iter().all(|(_, t)| t.all_finite()) {
                return Err(HarnessError::NonFinite {
                    batch: label,
                    detail: "parameter update".into(),
                });
            }
            params = np;
            opt = no;
        }
        let n = epoch_batches.len() as f64;
        let evaluate_now = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        emit(
            EpochLog {
                epoch,
                l_m: sums[0] / n,
                l_c: sums[1] / n,
                l: sums[2] / n,
                lr,
                recall: if evaluate_now { validate(&params)? } else { BTreeMap::new() },
            },
            &mut sink,
        )?;
    }

    let model = TrainedModel {
        config: cfg.clone(),
        model: model_cfg,
        params,
        optimizer: Some(opt),
        epoch: cfg.epochs,
        text_vocab: vocab,
        concepts,
    };
    if let Some(dir) = out_dir {
        model.save(dir)?;
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str) -> TripletRecord {
        TripletRecord {
            id: id.into(),
            ref_image: String::new(),
            tgt_image: String::new(),
            modifier: "add".into(),
            concepts: Default::default(),
            edit: None,
            concept_patches: Default::default(),
        }
    }

    #[test]
    fn trailing_singleton_joins_previous_batch() {
        let rs: Vec<TripletRecord> = (0..7).map(|i| rec(&i.to_string())).collect();
        let refs: Vec<&TripletRecord> = rs.iter().collect();
        let sizes: Vec<usize> = batches(&refs, 3).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 4]);
        let sizes: Vec<usize> = batches(&refs, 2).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 3]);
    }
}
