//! Full model assembly: parameter initialization, the training loss program
//! and the inference passes used for retrieval.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alignment::{
    alignment_scores, asymmetric_loss, attention_pool, init_alignment, joint_encode, side_encode,
};
use crate::data::seeded_rng;
use crate::diffcore::{init_linear, DiffError, Graph, ParameterSet, Program, ProgramOutput, Scalar, Tensor, Var};
use crate::encoders::{
    encode_image_tokens, encode_text_batch, init_concept_table, init_image_encoder, init_text_encoder, EncoderConfig,
    TextBatch, TextVocabulary,
};
use crate::fusion::{
    batch_classification_loss, cosine_matrix, fusion_sequence, init_fusion, mean_tokens, progressive_fusion,
    total_loss, NormKind,
};

/// Ablation and variant switches.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub reference_only: bool,
    pub target_only: bool,
    pub cross_entropy_loss: bool,
    pub remove_fusion: bool,
    pub plain_layer_norm: bool,
    pub remove_concept_module: bool,
    pub context_score_on: bool,
    pub share_block_weights: bool,
}

impl Variant {
    pub fn full() -> Self {
        Self {
            share_block_weights: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.reference_only && self.target_only {
            return Err("reference_only and target_only are mutually exclusive".into());
        }
        if self.remove_fusion && self.plain_layer_norm {
            return Err("plain_layer_norm has no effect when the fusion module is removed".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub k: usize,
    pub joint_layers: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub beta_plus: f64,
    pub beta_minus: f64,
    pub patch: usize,
    pub channels: usize,
    /// Patches per image.
    pub tokens: usize,
    pub word_dim: usize,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn encoder(&self, text_vocab: usize) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            patch: self.patch,
            channels: self.channels,
            tokens: self.tokens,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            text_vocab,
            word_dim: self.word_dim,
        }
    }

    /// Effective concept-loss weight (`0` when the concept module is removed).
    pub fn effective_alpha(&self) -> f64 {
        if self.variant.remove_concept_module {
            0.0
        } else {
            self.alpha
        }
    }

    pub fn betas(&self) -> (f64, f64) {
        if self.variant.cross_entropy_loss {
            (0.0, 0.0)
        } else {
            (self.beta_plus, self.beta_minus)
        }
    }

    fn norm_kind(&self) -> NormKind {
        if self.variant.plain_layer_norm {
            NormKind::Plain
        } else {
            NormKind::Adaptive
        }
    }
}

/// Image-encoder initialization depends only on the seed, so the frozen
/// seed-init encoder can be rebuilt for visual-similarity subsets.
pub fn init_image_params(cfg: &ModelConfig, seed: u64) -> ParameterSet {
    let mut ps = ParameterSet::new();
    let mut rng = seeded_rng(seed, 101);
    init_image_encoder(&mut ps, &mut rng, &cfg.encoder(0));
    ps
}

pub fn init_model(
    cfg: &ModelConfig,
    text_vocab: &TextVocabulary,
    concepts: &[String],
    seed: u64,
    word_vectors: Option<&BTreeMap<String, Vec<f32>>>,
) -> ParameterSet {
    let mut ps = init_image_params(cfg, seed);
    let enc = cfg.encoder(text_vocab.len());
    let mut rng = seeded_rng(seed, 102);
    init_text_encoder(&mut ps, &mut rng, &enc, text_vocab, word_vectors);
    let mut rng = seeded_rng(seed, 103);
    init_concept_table(&mut ps, &mut rng, concepts, cfg.d, word_vectors.filter(|_| cfg.word_dim == cfg.d));
    let mut rng = seeded_rng(seed, 104);
    init_alignment(&mut ps, &mut rng, cfg.d, cfg.ffn_hidden, cfg.joint_layers);
    let mut rng = seeded_rng(seed, 105);
    if cfg.variant.remove_fusion {
        init_linear(&mut ps, &mut rng, "direct", 2 * cfg.d, cfg.d);
    } else {
        init_fusion(
            &mut ps,
            &mut rng,
            cfg.d,
            cfg.ffn_hidden,
            cfg.k,
            cfg.variant.share_block_weights,
            cfg.norm_kind(),
        );
    }
    ps
}

/// One training batch in storage precision.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, L, P]` reference and target patches.
    pub ref_patches: Tensor,
    pub tgt_patches: Tensor,
    pub text: TextBatch,
    /// `[B, |M|]` multi-hot concept labels.
    pub labels: Tensor,
}

/// Query-side representations: pooled `[B, d]` and, for the context
/// score, token means `[B, d]`.
#[derive(Clone, Copy, Debug)]
pub struct QueryVars {
    pub pooled: Var,
    pub mean: Var,
}

/// Target-side representations `f^t_a` and token means.
#[derive(Clone, Copy, Debug)]
pub struct TargetVars {
    pub pooled: Var,
    pub mean: Var,
}

pub fn query_vars<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    f_r: Var,
    text: &TextBatch,
) -> Result<QueryVars, DiffError> {
    let (q, t) = encode_text_batch(g, text, cfg.d)?;
    if cfg.variant.remove_fusion {
        return g.scoped("direct", |g| {
            let pr = attention_pool(g, f_r)?;
            let cat = g.concat(&[pr.pooled, q], 1)?;
            let pooled = g.linear(cat, "direct")?;
            let mean = mean_tokens(g, f_r)?;
            Ok(QueryVars { pooled, mean })
        });
    }
    let mask = g.constant(text.key_bias())?;
    let key_bias = if text.lengths.iter().all(|&n| n == text.max_len()) {
        None
    } else {
        Some(mask)
    };
    let s = fusion_sequence(g, q, t, key_bias, cfg.k, cfg.heads)?;
    let states = progressive_fusion(g, f_r, &s, cfg.variant.share_block_weights, cfg.norm_kind(), cfg.heads)?;
    let f_k = *states.last().unwrap();
    let pooled = attention_pool(g, f_k)?.pooled;
    let mean = mean_tokens(g, f_k)?;
    Ok(QueryVars { pooled, mean })
}

pub fn target_vars<T: Scalar>(g: &mut Graph<'_, T>, f_t: Var) -> Result<TargetVars, DiffError> {
    let pooled = attention_pool(g, f_t)?.pooled;
    let mean = mean_tokens(g, f_t)?;
    Ok(TargetVars { pooled, mean })
}

/// `M_ij` = concept matching score plus, when enabled, the context score.
pub fn score_matrix<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    q: QueryVars,
    t: TargetVars,
) -> Result<Var, DiffError> {
    let m = cosine_matrix(g, q.pooled, t.pooled)?;
    if cfg.variant.context_score_on {
        let c = cosine_matrix(g, q.mean, t.mean)?;
        g.add(m, c)
    } else {
        Ok(m)
    }
}

/// Tokens that the alignment branch pools, per variant.
pub fn alignment_tokens<T: Scalar>(g: &mut Graph<'_, T>, cfg: &ModelConfig, f_r: Var, f_t: Var) -> Result<Var, DiffError> {
    let v = &cfg.variant;
    if v.reference_only {
        side_encode(g, f_r, 0, cfg.joint_layers, cfg.heads)
    } else if v.target_only {
        side_encode(g, f_t, 1, cfg.joint_layers, cfg.heads)
    } else {
        joint_encode(g, f_r, f_t, cfg.joint_layers, cfg.heads)
    }
}

/// Training objective `L = L_m + α L_c` over one batch.
pub struct LossProgram<'a> {
    pub cfg: &'a ModelConfig,
    pub batch: &'a Batch,
}

impl Program for LossProgram<'_> {
    fn build<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Result<ProgramOutput, DiffError> {
        let cfg = self.cfg;
        let b = self.batch;
        let rp = g.constant(b.ref_patches.convert())?;
        let tp = g.constant(b.tgt_patches.convert())?;
        let f_r = encode_image_tokens(g, rp, cfg.heads)?;
        let f_t = encode_image_tokens(g, tp, cfg.heads)?;

        let alpha = cfg.effective_alpha();
        let l_c = if alpha > 0.0 {
            let tokens = alignment_tokens(g, cfg, f_r, f_t)?;
            let pooled = attention_pool(g, tokens)?.pooled;
            let s = alignment_scores(g, pooled)?;
            let (bp, bm) = cfg.betas();
            asymmetric_loss(g, s, &b.labels.convert(), bp, bm)?
        } else {
            g.constant(Tensor::scalar(T::zero()))?
        };

        let q = query_vars(g, cfg, f_r, &b.text)?;
        let t = target_vars(g, f_t)?;
        let m = score_matrix(g, cfg, q, t)?;
        let l_m = g.scoped("matching", |g| batch_classification_loss(g, m, cfg.gamma))?;
        let loss = g.scoped("loss", |g| total_loss(g, l_m, l_c, alpha))?;
        Ok(ProgramOutput {
            loss,
            outputs: vec![("L_m".into(), l_m), ("L_c".into(), l_c)],
        })
    }
}

/// Alignment attention over `[reference | target]` tokens (zeros on a side
/// the variant does not pool) and concept scores, for each batch row.
pub fn alignment_forward(
    params: &ParameterSet,
    cfg: &ModelConfig,
    ref_patches: &Tensor,
    tgt_patches: &Tensor,
) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>), DiffError> {
    let mut g = Graph::new(params).no_grad();
    let rp = g.constant(ref_patches.clone())?;
    let tp = g.constant(tgt_patches.clone())?;
    let f_r = encode_image_tokens(&mut g, rp, cfg.heads)?;
    let f_t = encode_image_tokens(&mut g, tp, cfg.heads)?;
    let tokens = alignment_tokens(&mut g, cfg, f_r, f_t)?;
    let p = attention_pool(&mut g, tokens)?;
    let s = alignment_scores(&mut g, p.pooled)?;
    let (b, l) = (ref_patches.shape()[0], ref_patches.shape()[1]);
    let w = g.value(p.weights);
    let per = w.len() / b;
    let weights = (0..b)
        .map(|i| {
            let row = &w.data()[i * per..(i + 1) * per];
            if per == 2 * l {
                row.to_vec()
            } else if cfg.variant.reference_only {
                row.iter().copied().chain(std::iter::repeat_n(0.0, l)).collect()
            } else {
                std::iter::repeat_n(0.0, l).chain(row.iter().copied()).collect()
            }
        })
        .collect();
    let sv = g.value(s);
    let m = sv.shape()[1];
    let scores = (0..b).map(|i| sv.data()[i * m..(i + 1) * m].to_vec()).collect();
    Ok((weights, scores))
}
