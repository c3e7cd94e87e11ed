//! Alignment heatmaps, localization statistics and score dumps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::PatchCache;
use super::{HarnessError, Ranking, TrainedModel};
use crate::alignment::{alignment_scores, attention_pool};
use crate::data::{DataError, EditOp, TripletRecord};
use crate::diffcore::Graph;
use crate::encoders::{encode_image_tokens, CONCEPT_TABLE};
use crate::model::alignment_tokens;

/// Attention of the alignment pool over `[reference | target]` tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub id: String,
    pub concept: String,
    /// Alignment score `s_c`.
    pub score: f32,
    /// Patch grid of one image.
    pub rows: usize,
    pub cols: usize,
    /// `2 · rows · cols` pooling weights, reference tokens first.
    pub weights: Vec<f32>,
    /// Per-token share of `score`: `w_j (f_j · w_c)`; sums to `score`.
    pub contributions: Vec<f32>,
    pub reference_mass: f32,
    pub target_mass: f32,
}

struct AlignmentPass {
    /// Per row: weights over `2L` tokens (zeros on a side that is not pooled).
    weights: Vec<Vec<f32>>,
    /// Per row: pooled tokens `[2L, d]` flattened, zeros where not pooled.
    tokens: Vec<Vec<f32>>,
    scores: Vec<Vec<f32>>,
}

fn alignment_pass(model: &TrainedModel, cache: &PatchCache, records: &[&TripletRecord]) -> Result<AlignmentPass, HarnessError> {
    let cfg = &model.model;
    let refs: Vec<&str> = records.iter().map(|r| r.ref_image.as_str()).collect();
    let tgts: Vec<&str> = records.iter().map(|r| r.tgt_image.as_str()).collect();
    let mut g = Graph::new(&model.params).no_grad();
    let rp = g.constant(cache.stack(&refs)?)?;
    let tp = g.constant(cache.stack(&tgts)?)?;
    let f_r = encode_image_tokens(&mut g, rp, cfg.heads)?;
    let f_t = encode_image_tokens(&mut g, tp, cfg.heads)?;
    let tokens = alignment_tokens(&mut g, cfg, f_r, f_t)?;
    let pooled = attention_pool(&mut g, tokens)?;
    let s = alignment_scores(&mut g, pooled.pooled)?;
    let l = cache.tokens();
    let d = cfg.d;
    let (w, tk, sv) = (g.value(pooled.weights), g.value(tokens), g.value(s));
    let per = w.len() / records.len();
    let m = sv.shape()[1];
    let mut out = AlignmentPass {
        weights: Vec::new(),
        tokens: Vec::new(),
        scores: Vec::new(),
    };
    for i in 0..records.len() {
        let wr = &w.data()[i * per..(i + 1) * per];
        let tr = &tk.data()[i * per * d..(i + 1) * per * d];
        let (mut wf, mut tf) = (vec![0.0f32; 2 * l], vec![0.0f32; 2 * l * d]);
        let off = if per == 2 * l || cfg.variant.reference_only { 0 } else { l };
        wf[off..off + per].copy_from_slice(wr);
        tf[off * d..(off + per) * d].copy_from_slice(tr);
        out.weights.push(wf);
        out.tokens.push(tf);
        out.scores.push(sv.data()[i * m..(i + 1) * m].to_vec());
    }
    Ok(out)
}

/// Attention heatmap of `record` for `concept`.
pub fn alignment_heatmap(
    model: &TrainedModel,
    cache: &PatchCache,
    record: &TripletRecord,
    concept: &str,
) -> Result<Heatmap, HarnessError> {
    let c = model
        .concepts
        .id(concept)
        .ok_or_else(|| HarnessError::Config(format!("concept {concept:?} is not in the vocabulary")))?;
    let pass = alignment_pass(model, cache, &[record])?;
    let d = model.model.d;
    let table = model
        .params
        .get(CONCEPT_TABLE)
        .ok_or_else(|| HarnessError::Config("checkpoint has no concept table".into()))?;
    let wc = &table.data()[c * d..(c + 1) * d];
    let weights = pass.weights[0].clone();
    let contributions = weights
        .iter()
        .enumerate()
        .map(|(j, w)| {
            let f = &pass.tokens[0][j * d..(j + 1) * d];
            w * f.iter().zip(wc).map(|(a, b)| a * b).sum::<f32>()
        })
        .collect();
    let l = cache.tokens();
    Ok(Heatmap {
        id: record.id.clone(),
        concept: concept.to_string(),
        score: pass.scores[0][c],
        rows: cache.rows,
        cols: cache.cols,
        reference_mass: weights[..l].iter().sum(),
        target_mass: weights[l..].iter().sum(),
        weights,
        contributions,
    })
}

/// Writes `<stem>.pgm` (plain PGM, reference grid left of target grid, each
/// cell `scale` pixels wide, brightest = largest weight) and `<stem>.json`.
pub fn write_heatmap(stem: &Path, h: &Heatmap, scale: usize) -> Result<(PathBuf, PathBuf), HarnessError> {
    let scale = scale.max(1);
    let (l, w, ht) = (h.rows * h.cols, 2 * h.cols * scale, h.rows * scale);
    let max = h.weights.iter().copied().fold(0.0f32, f32::max);
    let level = |v: f32| if max > 0.0 { (v / max * 255.0).round() as u32 } else { 0 };
    let pgm = stem.with_extension("pgm");
    let mut f = BufWriter::new(File::create(&pgm)?);
    writeln!(f, "P2")?;
    writeln!(f, "# {} {} score {}", h.id, h.concept, h.score)?;
    writeln!(f, "{w} {ht}")?;
    writeln!(f, "255")?;
    for y in 0..ht {
        let r = y / scale;
        let line: Vec<String> = (0..w)
            .map(|x| {
                let c = x / scale;
                let (side, col) = (c / h.cols, c % h.cols);
                level(h.weights[side * l + r * h.cols + col]).to_string()
            })
            .collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    f.flush()?;
    let json = stem.with_extension("json");
    let mut j = BufWriter::new(File::create(&json)?);
    serde_json::to_writer_pretty(&mut j, h)?;
    j.flush()?;
    Ok((pgm, json))
}

/// How much pooling attention lands on the patches where each modifier
/// concept is drawn.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    /// (triplet, concept) pairs with known patches.
    pub pairs: usize,
    pub mean_mass: f64,
    /// Mean of `|patches| / 2L`, the mass a uniform pool would give.
    pub mean_uniform: f64,
    pub ratio: f64,
    /// Mean target-side mass over ADD edits.
    pub add_target_mass: Option<f64>,
}

pub fn localization_report(
    model: &TrainedModel,
    cache: &PatchCache,
    records: &[TripletRecord],
) -> Result<LocalizationReport, HarnessError> {
    let l2 = 2 * cache.tokens();
    let (mut mass, mut uniform, mut pairs) = (0.0f64, 0.0f64, 0usize);
    let (mut add_mass, mut adds) = (0.0f64, 0usize);
    for chunk in records.chunks(64) {
        let refs: Vec<&TripletRecord> = chunk.iter().collect();
        let pass = alignment_pass(model, cache, &refs)?;
        for (r, w) in chunk.iter().zip(&pass.weights) {
            for (concept, patches) in &r.concept_patches {
                if patches.is_empty() {
                    continue;
                }
                if let Some(bad) = patches.iter().find(|&&p| p >= l2) {
                    return Err(HarnessError::Data(DataError::Format {
                        path: r.id.clone(),
                        msg: format!("patch index {bad} of {concept:?} outside {l2} tokens"),
                    }));
                }
                mass += patches.iter().map(|&p| w[p] as f64).sum::<f64>();
                uniform += patches.len() as f64 / l2 as f64;
                pairs += 1;
            }
            if r.edit.as_ref().is_some_and(|e| e.op == EditOp::Add) {
                add_mass += w[l2 / 2..].iter().map(|&x| x as f64).sum::<f64>();
                adds += 1;
            }
        }
    }
    let n = pairs.max(1) as f64;
    Ok(LocalizationReport {
        pairs,
        mean_mass: mass / n,
        mean_uniform: uniform / n,
        ratio: if uniform > 0.0 { mass / uniform } else { 0.0 },
        add_target_mass: (adds > 0).then(|| add_mass / adds as f64),
    })
}

/// One JSON line per query: `{query, target, ranked, scores}`.
pub fn write_rankings(path: &Path, rankings: &[Ranking]) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rankings {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
