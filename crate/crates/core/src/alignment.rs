//! Weakly supervised concept alignment: joint reference+target encoding,
//! attention-MIL pooling, concept scores and the asymmetric loss.
//!
//! Parameter prefixes: `align.` (segment embedding and the joint
//! transformer layers) and `pool.` (the shared attention-pool head).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{init_linear, uniform, DiffError, Graph, ParameterSet, Scalar, Tensor, Var};
use crate::encoders::CONCEPT_TABLE;
use crate::nn::{init_transformer_layer, transformer_layer};

pub const POOL_HEAD: &str = "pool.logit";
pub const JOINT_LAYERS: usize = 2;

pub fn init_alignment<R: Rng>(ps: &mut ParameterSet, rng: &mut R, d: usize, ffn_hidden: usize, layers: usize) {
    ps.insert("align.segment", uniform(rng, &[2, d], 0.1));
    for i in 0..layers {
        init_transformer_layer(ps, rng, &format!("align.layer{i}"), d, ffn_hidden);
    }
    init_pool_head(ps, rng, d);
}

pub fn init_pool_head<R: Rng>(ps: &mut ParameterSet, rng: &mut R, d: usize) {
    init_linear(ps, rng, POOL_HEAD, d, 1);
    // softmax over tokens is invariant to a shared logit offset
    ps.remove(&format!("{POOL_HEAD}.b"));
}

/// Contextualized `[reference rows, target rows]` with the split index.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTokens {
    pub tokens: Tensor,
    pub boundary: usize,
}

/// Concatenates `f_r: [B, L_r, d]` and `f_t: [B, L_t, d]` along the token
/// axis, tags each side with a learned segment vector and runs the joint
/// transformer layers. Returns `[B, L_r + L_t, d]`.
pub fn joint_encode<T: Scalar>(
    g: &mut Graph<'_, T>,
    f_r: Var,
    f_t: Var,
    layers: usize,
    heads: usize,
) -> Result<Var, DiffError> {
    g.scoped("align", |g| {
        let (sr, st) = (g.shape(f_r).to_vec(), g.shape(f_t).to_vec());
        if sr.len() != 3 || st.len() != 3 || sr[0] != st[0] || sr[2] != st[2] {
            return Err(DiffError::ShapeMismatch {
                op: "joint_encode",
                shapes: vec![sr, st],
            });
        }
        let seg = g.param("align.segment")?;
        let seg_r = g.slice(seg, 0, 0, 1)?;
        let seg_t = g.slice(seg, 0, 1, 1)?;
        let r = g.add(f_r, seg_r)?;
        let t = g.add(f_t, seg_t)?;
        let mut x = g.concat(&[r, t], 1)?;
        for i in 0..layers {
            x = transformer_layer(g, x, &format!("align.layer{i}"), heads)?;
        }
        Ok(x)
    })
}

/// Single-token-side variant used by the reference-only and target-only
/// ablations: the same layers over one image's tokens.
pub fn side_encode<T: Scalar>(
    g: &mut Graph<'_, T>,
    f: Var,
    segment: usize,
    layers: usize,
    heads: usize,
) -> Result<Var, DiffError> {
    g.scoped("align", |g| {
        let seg = g.param("align.segment")?;
        let s = g.slice(seg, 0, segment, 1)?;
        let mut x = g.add(f, s)?;
        for i in 0..layers {
            x = transformer_layer(g, x, &format!("align.layer{i}"), heads)?;
        }
        Ok(x)
    })
}

/// Attention weights `[B, L, 1]` and pooled features `[B, d]`.
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    pub weights: Var,
    pub pooled: Var,
}

/// Learned `d → 1` logit per token, softmax over the token axis, weighted sum.
pub fn attention_pool<T: Scalar>(g: &mut Graph<'_, T>, tokens: Var) -> Result<Pooled, DiffError> {
    g.scoped("pool", |g| {
        let s = g.shape(tokens).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "attention_pool",
                shapes: vec![s],
            });
        }
        let logits = g.linear(tokens, POOL_HEAD)?;
        let weights = g.softmax(logits, 1)?;
        let wt = g.transpose(weights)?;
        let p = g.matmul(wt, tokens)?;
        let pooled = g.reshape(p, &[s[0], s[2]])?;
        Ok(Pooled { weights, pooled })
    })
}

/// `s = pooled · Wᵀ` over the concept table: `[B, d] → [B, |M|]`.
pub fn alignment_scores<T: Scalar>(g: &mut Graph<'_, T>, pooled: Var) -> Result<Var, DiffError> {
    let table = g.param(CONCEPT_TABLE)?;
    let tt = g.transpose(table)?;
    g.matmul(pooled, tt)
}

/// Mean over the examples with at least one positive label of
/// `−Σ_P (1−s′)^β+ log s′ − Σ_N (s′)^β− log(1−s′)`.
///
/// `labels` is a `[B, |M|]` multi-hot constant. Examples without positives
/// are skipped with a warning; if none remain the loss is zero.
pub fn asymmetric_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    scores: Var,
    labels: &Tensor<T>,
    beta_plus: f64,
    beta_minus: f64,
) -> Result<Var, DiffError> {
    if beta_plus < 0.0 || beta_minus < 0.0 {
        return Err(DiffError::InvalidArgument(format!(
            "focusing exponents must be non-negative, got {beta_plus} and {beta_minus}"
        )));
    }
    if g.shape(scores) != labels.shape() || labels.rank() != 2 {
        return Err(DiffError::ShapeMismatch {
            op: "asymmetric_loss",
            shapes: vec![g.shape(scores).to_vec(), labels.shape().to_vec()],
        });
    }
    g.scoped("asl", |g| {
        let m = labels.shape()[1];
        let valid: Vec<bool> = labels
            .data()
            .chunks(m)
            .map(|row| row.iter().any(|v| v.f64() > 0.5))
            .collect();
        for (i, ok) in valid.iter().enumerate() {
            if !ok {
                log::warn!("example {i} has no positive concepts; skipped in the alignment loss");
            }
        }
        let n = valid.iter().filter(|v| **v).count();
        let weights: Vec<f64> = valid
            .iter()
            .map(|&v| if v { -1.0 / n.max(1) as f64 } else { 0.0 })
            .collect();
        let pos_mask: Vec<f64> = labels.to_f64_vec();
        let neg_mask: Vec<f64> = pos_mask.iter().map(|y| 1.0 - y).collect();
        let shape = labels.shape().to_vec();

        let neg_s = g.neg(scores)?;
        // positives: (1−s′)^β+ · log s′ = sigmoid(−s)^β+ · log_sigmoid(s)
        let mut pos = g.log_sigmoid(scores)?;
        if beta_plus != 0.0 {
            let focus = g.sigmoid(neg_s)?;
            let focus = g.powf(focus, beta_plus)?;
            pos = g.mul(focus, pos)?;
        }
        // negatives: (s′)^β− · log(1−s′) = sigmoid(s)^β− · log_sigmoid(−s)
        let mut neg = g.log_sigmoid(neg_s)?;
        if beta_minus != 0.0 {
            let focus = g.sigmoid(scores)?;
            let focus = g.powf(focus, beta_minus)?;
            neg = g.mul(focus, neg)?;
        }
        let pm = g.constant(Tensor::from_f64(&shape, &pos_mask)?)?;
        let nm = g.constant(Tensor::from_f64(&shape, &neg_mask)?)?;
        let pos = g.mul(pos, pm)?;
        let neg = g.mul(neg, nm)?;
        let terms = g.add(pos, neg)?;
        let per_example = g.sum_axis(terms, 1)?;
        let w = g.constant(Tensor::from_f64(&[shape[0], 1], &weights)?)?;
        let weighted = g.mul(per_example, w)?;
        g.sum_all(weighted)
    })
}

/// Per-triplet alignment report written by the diagnostics export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDiagnostics {
    pub id: String,
    pub concepts: Vec<String>,
    pub scores: Vec<f32>,
    pub attention: Vec<f32>,
    pub boundary: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize, m: usize) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParameterSet::new();
        init_alignment(&mut ps, &mut rng, d, 2 * d, JOINT_LAYERS);
        ps.insert(CONCEPT_TABLE, uniform(&mut rng, &[m, d], 0.5));
        ps
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_f64(shape, &v).unwrap()
    }

    #[test]
    fn joint_shape_and_width_check() {
        let ps = params(8, 3).convert::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new(&ps);
        let r = g.constant(random(&mut rng, &[2, 4, 8])).unwrap();
        let t = g.constant(random(&mut rng, &[2, 4, 8])).unwrap();
        let j = joint_encode(&mut g, r, t, JOINT_LAYERS, 2).unwrap();
        assert_eq!(g.shape(j), &[2, 8, 8]);
        let bad = g.constant(random(&mut rng, &[2, 4, 6])).unwrap();
        assert!(joint_encode(&mut g, r, bad, JOINT_LAYERS, 2).is_err());
    }

    #[test]
    fn permuting_target_rows_permutes_outputs() {
        let ps = params(8, 3).convert::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rv = random(&mut rng, &[1, 3, 8]);
        let tv = random(&mut rng, &[1, 3, 8]);
        let perm = [2usize, 0, 1];
        let tp: Vec<f64> = perm.iter().flat_map(|&i| tv.row_slice(i, 8)).collect();
        let mut g = Graph::new(&ps);
        let r = g.constant(rv).unwrap();
        let t = g.constant(tv.clone()).unwrap();
        let t2 = g.constant(Tensor::from_f64(&[1, 3, 8], &tp).unwrap()).unwrap();
        let a = joint_encode(&mut g, r, t, JOINT_LAYERS, 2).unwrap();
        let b = joint_encode(&mut g, r, t2, JOINT_LAYERS, 2).unwrap();
        let (a, b) = (g.value(a).to_vec(), g.value(b).to_vec());
        for (k, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((b[(3 + k) * 8 + c] - a[(3 + src) * 8 + c]).abs() < 1e-10);
            }
        }
        for i in 0..24 {
            assert!((a[i] - b[i]).abs() < 1e-10);
        }
    }

    trait RowSlice {
        fn row_slice(&self, i: usize, w: usize) -> Vec<f64>;
    }
    impl RowSlice for Tensor<f64> {
        fn row_slice(&self, i: usize, w: usize) -> Vec<f64> {
            self.data()[i * w..(i + 1) * w].to_vec()
        }
    }

    #[test]
    fn pooling_closed_forms() {
        let mut ps = params(2, 1).convert::<f64>();
        // logit = token[1], so tokens [x, 0] and [x, ln 3] give weights 1/4, 3/4
        ps.insert(POOL_HEAD.to_string() + ".w", Tensor::from_f64(&[2, 1], &[0.0, 1.0]).unwrap());
        let mut g = Graph::new(&ps);
        let x = g
            .constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 0.0, 5.0, 3f64.ln()]).unwrap())
            .unwrap();
        let p = attention_pool(&mut g, x).unwrap();
        let w = g.value(p.weights).to_vec();
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
        let same = g.constant(Tensor::from_f64(&[1, 3, 2], &[0.3, -0.2, 0.3, -0.2, 0.3, -0.2]).unwrap()).unwrap();
        let p = attention_pool(&mut g, same).unwrap();
        assert!(g.value(p.weights).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        let pooled = g.value(p.pooled).to_vec();
        assert!((pooled[0] - 0.3).abs() < 1e-12 && (pooled[1] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_scores_and_scaling() {
        let mut ps = params(2, 2).convert::<f64>();
        ps.insert(CONCEPT_TABLE, Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.5, 2.0]).unwrap());
        let mut g = Graph::new(&ps);
        let p = g.constant(Tensor::from_f64(&[1, 2], &[0.0, 1.0]).unwrap()).unwrap();
        let s = alignment_scores(&mut g, p).unwrap();
        assert_eq!(g.value(s).to_vec(), vec![0.0, 2.0]);
        let p3 = g.scale(p, 3.0).unwrap();
        let s3 = alignment_scores(&mut g, p3).unwrap();
        assert_eq!(g.value(s3).to_vec(), vec![0.0, 6.0]);
    }

    fn asl_value(s: &[f64], y: &[f64], bp: f64, bm: f64) -> f64 {
        let ps = ParameterSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let sv = g.constant(Tensor::from_f64(&[1, s.len()], s).unwrap()).unwrap();
        let l = asymmetric_loss(&mut g, sv, &Tensor::from_f64(&[1, y.len()], y).unwrap(), bp, bm).unwrap();
        g.value(l).item()
    }

    #[test]
    fn asymmetric_loss_hand_values() {
        assert!((asl_value(&[0.0], &[1.0], 1.0, 4.0) - 0.5 * 2f64.ln()).abs() < 1e-12);
        assert!(asl_value(&[40.0, -40.0], &[1.0, 0.0], 1.0, 4.0) < 1e-15);
        assert!(asl_value(&[0.3, -1.0], &[1.0, 0.0], 1.0, 4.0) >= 0.0);
        // negative focusing factor (s′)^4 at s′ = 0.9
        let s = (0.9f64 / 0.1).ln();
        // a saturated positive keeps the row valid without adding to the loss
        let bce = asl_value(&[s, 60.0], &[0.0, 1.0], 0.0, 0.0);
        let asl = asl_value(&[s, 60.0], &[0.0, 1.0], 1.0, 4.0);
        assert!((asl / bce - 0.6561).abs() < 1e-9, "{asl} {bce}");
    }

    #[test]
    fn rows_without_positives_are_skipped() {
        let with = asl_value(&[0.5, -0.5], &[1.0, 0.0], 1.0, 4.0);
        let ps = ParameterSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let sv = g
            .constant(Tensor::from_f64(&[2, 2], &[0.5, -0.5, 3.0, 3.0]).unwrap())
            .unwrap();
        let y = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let l = asymmetric_loss(&mut g, sv, &y, 1.0, 4.0).unwrap();
        assert!((g.value(l).item() - with).abs() < 1e-12);
    }
}
