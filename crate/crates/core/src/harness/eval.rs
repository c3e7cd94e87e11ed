//! Retrieval scoring, ranking and recall metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::train::{text_batch, PatchCache};
use super::{HarnessError, TrainConfig, TrainedModel};
use crate::data::{DataError, TripletRecord};
use crate::diffcore::{Graph, ParameterSet, Var};
use crate::encoders::{encode_image_tokens, TextVocabulary};
use crate::fusion::{matching_score, mean_tokens};
use crate::model::{init_image_params, query_vars, target_vars, ModelConfig};

const CHUNK: usize = 64;

/// Recall at each cutoff over the full gallery and within visually similar subsets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: BTreeMap<usize, f64>,
    pub subset_recall: BTreeMap<usize, f64>,
    pub queries: usize,
    pub gallery: usize,
}

impl Metrics {
    /// `(R@5 + R_s@1) / 2`, the usual summary column.
    pub fn summary(&self) -> Option<f64> {
        Some((self.recall.get(&5)? + self.subset_recall.get(&1)?) / 2.0)
    }
}

/// Full ranking of the gallery for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query: String,
    pub target: String,
    pub ranked: Vec<String>,
    pub scores: Vec<f32>,
}

/// Distinct target images of `records`, sorted.
pub(crate) fn gallery_of(records: &[TripletRecord]) -> Vec<String> {
    records
        .iter()
        .map(|r| r.tgt_image.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Indices of `ids` by descending score; equal scores by ascending id.
pub fn rank_gallery(scores: &[f32], ids: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
    order
}

fn row(t: &crate::diffcore::Tensor, i: usize) -> Vec<f32> {
    let w = t.len() / t.shape()[0];
    t.data()[i * w..(i + 1) * w].to_vec()
}

/// Pooled (and token-mean) target representations of the gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEmbedding {
    pub ids: Vec<String>,
    pub pooled: Vec<Vec<f32>>,
    pub mean: Vec<Vec<f32>>,
}

pub fn embed_gallery(
    cfg: &ModelConfig,
    params: &ParameterSet,
    cache: &PatchCache,
    ids: &[String],
) -> Result<GalleryEmbedding, HarnessError> {
    let mut out = GalleryEmbedding {
        ids: ids.to_vec(),
        pooled: Vec::with_capacity(ids.len()),
        mean: Vec::with_capacity(ids.len()),
    };
    for chunk in ids.chunks(CHUNK) {
        let mut g = Graph::new(params).no_grad();
        let p = g.constant(cache.stack(chunk)?)?;
        let f = encode_image_tokens(&mut g, p, cfg.heads)?;
        let t = target_vars(&mut g, f)?;
        for i in 0..chunk.len() {
            out.pooled.push(row(g.value(t.pooled), i));
            out.mean.push(row(g.value(t.mean), i));
        }
    }
    Ok(out)
}

fn query_chunk(
    cfg: &ModelConfig,
    params: &ParameterSet,
    vocab: &TextVocabulary,
    cache: &PatchCache,
    chunk: &[TripletRecord],
) -> Result<Vec<(Vec<f32>, Vec<f32>)>, HarnessError> {
    let refs: Vec<&TripletRecord> = chunk.iter().collect();
    let ids: Vec<&str> = chunk.iter().map(|r| r.ref_image.as_str()).collect();
    let text = text_batch(vocab, &refs)?;
    let mut g = Graph::new(params).no_grad();
    let p = g.constant(cache.stack(&ids)?)?;
    let f_r = encode_image_tokens(&mut g, p, cfg.heads)?;
    let q = query_vars(&mut g, cfg, f_r, &text)?;
    let (pooled, mean): (Var, Var) = (q.pooled, q.mean);
    Ok((0..chunk.len())
        .map(|i| (row(g.value(pooled), i), row(g.value(mean), i)))
        .collect())
}

/// Matching scores of every query against every gallery image. Queries are
/// processed in fixed chunks, spread over threads when more than one core
/// is available; the result does not depend on the thread count.
pub fn score_queries(
    cfg: &ModelConfig,
    params: &ParameterSet,
    vocab: &TextVocabulary,
    cache: &PatchCache,
    queries: &[TripletRecord],
    gallery: &GalleryEmbedding,
) -> Result<Vec<Vec<f32>>, HarnessError> {
    let chunks: Vec<&[TripletRecord]> = queries.chunks(CHUNK).collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(chunks.len().max(1));
    let encoded: Vec<Result<Vec<(Vec<f32>, Vec<f32>)>, HarnessError>> = if threads <= 1 {
        chunks.iter().map(|c| query_chunk(cfg, params, vocab, cache, c)).collect()
    } else {
        let mut slots: Vec<Option<Result<_, HarnessError>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let per = chunks.len().div_ceil(threads);
            for (chunk_group, slot_group) in chunks.chunks(per).zip(slots.chunks_mut(per)) {
                s.spawn(move || {
                    for (c, slot) in chunk_group.iter().zip(slot_group.iter_mut()) {
                        *slot = Some(query_chunk(cfg, params, vocab, cache, c));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk scored")).collect()
    };
    let mut out = Vec::with_capacity(queries.len());
    for chunk in encoded {
        for (qp, qm) in chunk? {
            out.push(
                gallery
                    .pooled
                    .iter()
                    .zip(&gallery.mean)
                    .map(|(gp, gm)| {
                        let s = matching_score(&qp, gp);
                        if cfg.variant.context_score_on {
                            s + matching_score(&qm, gm)
                        } else {
                            s
                        }
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The `size` gallery images closest to `target` by cosine over `embeddings`
/// (target included, first); ties by ascending id.
pub fn visually_similar_subset(
    target: &str,
    gallery: &[String],
    size: usize,
    embeddings: &BTreeMap<String, Vec<f32>>,
) -> Result<Vec<String>, HarnessError> {
    let missing = |id: &str| {
        HarnessError::Data(DataError::Missing {
            kind: "gallery embedding",
            id: id.to_string(),
        })
    };
    let te = embeddings.get(target).ok_or_else(|| missing(target))?;
    let mut others = Vec::with_capacity(gallery.len());
    for id in gallery {
        if id == target {
            continue;
        }
        let e = embeddings.get(id).ok_or_else(|| missing(id))?;
        others.push((cosine(te, e), id));
    }
    others.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let mut out = vec![target.to_string()];
    out.extend(others.into_iter().take(size.saturating_sub(1)).map(|(_, id)| id.clone()));
    Ok(out)
}

/// Visually similar subset of every gallery image, from mean-pooled tokens
/// of a freshly initialized (never trained) image encoder.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SubsetIndex {
    subsets: BTreeMap<String, Vec<String>>,
}

impl SubsetIndex {
    pub fn build(
        cfg: &ModelConfig,
        seed: u64,
        cache: &PatchCache,
        gallery: &[String],
        size: usize,
    ) -> Result<Self, HarnessError> {
        let params = init_image_params(cfg, seed);
        let mut embeddings = BTreeMap::new();
        for chunk in gallery.chunks(CHUNK) {
            let mut g = Graph::new(&params).no_grad();
            let p = g.constant(cache.stack(chunk)?)?;
            let f = encode_image_tokens(&mut g, p, cfg.heads)?;
            let m = mean_tokens(&mut g, f)?;
            for (i, id) in chunk.iter().enumerate() {
                embeddings.insert(id.clone(), row(g.value(m), i));
            }
        }
        Self::from_embeddings(gallery, size, &embeddings)
    }

    pub fn from_embeddings(
        gallery: &[String],
        size: usize,
        embeddings: &BTreeMap<String, Vec<f32>>,
    ) -> Result<Self, HarnessError> {
        let subsets = gallery
            .iter()
            .map(|t| Ok((t.clone(), visually_similar_subset(t, gallery, size, embeddings)?)))
            .collect::<Result<_, HarnessError>>()?;
        Ok(Self { subsets })
    }

    pub fn get(&self, target: &str) -> Option<&[String]> {
        self.subsets.get(target).map(Vec::as_slice)
    }
}

/// Ranks every query's scores and computes recall. `targets[i]` must be in
/// `gallery`.
pub fn metrics_from_rankings(
    query_ids: &[String],
    scores: &[Vec<f32>],
    targets: &[String],
    gallery: &[String],
    subsets: Option<&SubsetIndex>,
    ks: &[usize],
    subset_ks: &[usize],
) -> Result<(Metrics, Vec<Ranking>), HarnessError> {
    let position: BTreeMap<&str, usize> = gallery.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut subset_hits: BTreeMap<usize, usize> = subset_ks.iter().map(|&k| (k, 0)).collect();
    let mut rankings = Vec::with_capacity(scores.len());
    for ((qid, s), target) in query_ids.iter().zip(scores).zip(targets) {
        if !position.contains_key(target.as_str()) {
            return Err(HarnessError::Data(DataError::Missing {
                kind: "gallery target",
                id: target.clone(),
            }));
        }
        let order = rank_gallery(s, gallery);
        let rank = order.iter().position(|&i| gallery[i] == *target).unwrap() + 1;
        for (k, h) in hits.iter_mut() {
            *h += usize::from(rank <= *k);
        }
        if let Some(idx) = subsets {
            let members = idx.get(target).ok_or_else(|| {
                HarnessError::Data(DataError::Missing {
                    kind: "visually similar subset",
                    id: target.clone(),
                })
            })?;
            let sub_ids: Vec<String> = members.to_vec();
            let sub_scores: Vec<f32> = members.iter().map(|m| s[position[m.as_str()]]).collect();
            let sub_order = rank_gallery(&sub_scores, &sub_ids);
            let sub_rank = sub_order.iter().position(|&i| sub_ids[i] == *target).unwrap() + 1;
            for (k, h) in subset_hits.iter_mut() {
                *h += usize::from(sub_rank <= *k);
            }
        }
        rankings.push(Ranking {
            query: qid.clone(),
            target: target.clone(),
            ranked: order.iter().map(|&i| gallery[i].clone()).collect(),
            scores: order.iter().map(|&i| s[i]).collect(),
        });
    }
    let n = scores.len().max(1) as f64;
    let metrics = Metrics {
        recall: hits.into_iter().map(|(k, h)| (k, h as f64 / n)).collect(),
        subset_recall: if subsets.is_some() {
            subset_hits.into_iter().map(|(k, h)| (k, h as f64 / n)).collect()
        } else {
            BTreeMap::new()
        },
        queries: scores.len(),
        gallery: gallery.len(),
    };
    for m in [&metrics.recall, &metrics.subset_recall] {
        let v: Vec<f64> = m.values().copied().collect();
        assert!(v.windows(2).all(|w| w[0] <= w[1]), "recall must be monotone in K");
        assert!(v.iter().all(|r| (0.0..=1.0).contains(r)));
    }
    Ok((metrics, rankings))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn evaluate_embedded(
    cfg: &ModelConfig,
    params: &ParameterSet,
    vocab: &TextVocabulary,
    cache: &PatchCache,
    queries: &[TripletRecord],
    gallery: &GalleryEmbedding,
    subsets: Option<&SubsetIndex>,
    tc: &TrainConfig,
) -> Result<(Metrics, Vec<Ranking>), HarnessError> {
    let known: BTreeSet<&str> = gallery.ids.iter().map(String::as_str).collect();
    if let Some(q) = queries.iter().find(|q| !known.contains(q.tgt_image.as_str())) {
        return Err(HarnessError::Data(DataError::Missing {
            kind: "gallery target",
            id: q.tgt_image.clone(),
        }));
    }
    let scores = score_queries(cfg, params, vocab, cache, queries, gallery)?;
    let qids: Vec<String> = queries.iter().map(|q| q.id.clone()).collect();
    let targets: Vec<String> = queries.iter().map(|q| q.tgt_image.clone()).collect();
    metrics_from_rankings(&qids, &scores, &targets, &gallery.ids, subsets, &tc.recall_ks, &tc.subset_ks)
}

/// Scores `queries` against `gallery` (defaulting to the queries' distinct
/// targets) and reports recall. Subsets are built from the checkpoint's
/// `subset_seed` when `subsets` is `None`.
pub fn evaluate(
    model: &TrainedModel,
    cache: &PatchCache,
    queries: &[TripletRecord],
    gallery: Option<&[String]>,
    subsets: Option<&SubsetIndex>,
) -> Result<(Metrics, Vec<Ranking>), HarnessError> {
    if queries.is_empty() {
        return Err(HarnessError::Data(DataError::Empty("no queries to evaluate".into())));
    }
    let ids = match gallery {
        Some(g) => g.to_vec(),
        None => gallery_of(queries),
    };
    let built;
    let subsets = match subsets {
        Some(s) => s,
        None => {
            built = SubsetIndex::build(&model.model, model.config.subset_seed, cache, &ids, model.config.subset_size)?;
            &built
        }
    };
    let emb = embed_gallery(&model.model, &model.params, cache, &ids)?;
    evaluate_embedded(
        &model.model,
        &model.params,
        &model.text_vocab,
        cache,
        queries,
        &emb,
        Some(subsets),
        &model.config,
    )
}
