//! Progressive meta-fusion: fusion-sequence indicators, per-step
//! normalization parameters, the shared fusion block and the matching loss.
//!
//! Parameter prefixes: `fusion.fc{i}` (indicator queries), `fusion.seq`
//! (indicator attention), `fusion.gen{i}.{mu1,sigma1,mu2,sigma2}` (per-step
//! generator heads) and `fusion.block` (shared attention and FFN), or
//! `fusion.block{i}` when block weights are not shared.

use rand::Rng;

use crate::alignment::attention_pool;
use crate::diffcore::{init_linear, DiffError, Graph, ParameterSet, Scalar, Tensor, Var};
use crate::nn::{feed_forward, init_ffn, init_layer_norm, init_mha, layer_norm, multi_head_attention, LN_EPS};

pub const GEN_HEADS: [&str; 4] = ["mu1", "sigma1", "mu2", "sigma2"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per-step `(μ, σ)` generated from the indicator.
    Adaptive,
    /// Learned layer norm, no per-step instantiation.
    Plain,
}

pub fn block_prefix(step: usize, shared: bool) -> String {
    if shared {
        "fusion.block".to_string()
    } else {
        format!("fusion.block{step}")
    }
}

pub fn init_fusion<R: Rng>(
    ps: &mut ParameterSet,
    rng: &mut R,
    d: usize,
    ffn_hidden: usize,
    k: usize,
    shared: bool,
    norm: NormKind,
) {
    for i in 0..k {
        init_linear(ps, rng, &format!("fusion.fc{i}"), d, d);
    }
    init_mha(ps, rng, "fusion.seq", d);
    let blocks = if shared { 1 } else { k };
    for b in 0..blocks {
        let p = block_prefix(b, shared);
        init_mha(ps, rng, &format!("{p}.attn"), d);
        init_ffn(ps, rng, &format!("{p}.ffn"), d, ffn_hidden);
        if norm == NormKind::Plain {
            init_layer_norm(ps, &format!("{p}.ln1"), d);
            init_layer_norm(ps, &format!("{p}.ln2"), d);
        }
    }
    if norm == NormKind::Adaptive {
        for i in 0..k {
            for h in GEN_HEADS {
                let p = format!("fusion.gen{i}.{h}");
                init_linear(ps, rng, &p, d, d);
                if h.starts_with("sigma") {
                    // start every instantiation near the identity scale
                    ps.insert(format!("{p}.b"), Tensor::full(&[d], 1.0));
                }
            }
        }
    }
}

/// `S_i = MHA(FC_i(q), t, t)` for `i < k`; each `S_i` is `[B, 1, d]`.
/// `key_bias` masks padded words (`[B, 1, L_w]`).
pub fn fusion_sequence<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    t: Var,
    key_bias: Option<Var>,
    k: usize,
    heads: usize,
) -> Result<Vec<Var>, DiffError> {
    if k == 0 {
        return Err(DiffError::InvalidArgument("fusion needs at least one step".into()));
    }
    g.scoped("fusion_sequence", |g| {
        let (b, d) = (g.shape(q)[0], g.shape(q)[1]);
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let qi = g.linear(q, &format!("fusion.fc{i}"))?;
            let qi = g.reshape(qi, &[b, 1, d])?;
            out.push(multi_head_attention(g, qi, t, key_bias, "fusion.seq", heads)?);
        }
        Ok(out)
    })
}

/// Generated normalization parameters, each `[B, 1, d]`.
#[derive(Clone, Copy, Debug)]
pub struct BlockInstance {
    pub mu1: Var,
    pub sigma1: Var,
    pub mu2: Var,
    pub sigma2: Var,
}

/// Four independent affine heads of step `step` applied to `S_i`.
pub fn instantiate_block<T: Scalar>(g: &mut Graph<'_, T>, s_i: Var, step: usize) -> Result<BlockInstance, DiffError> {
    let v = GEN_HEADS
        .iter()
        .map(|h| g.linear(s_i, &format!("fusion.gen{step}.{h}")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BlockInstance {
        mu1: v[0],
        sigma1: v[1],
        mu2: v[2],
        sigma2: v[3],
    })
}

/// `σ ⊙ (x − mean) / sqrt(var + 1e-5) + μ` with statistics per token row.
pub fn adaptive_norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, mu: Var, sigma: Var) -> Result<Var, DiffError> {
    let z = g.standardize(x, LN_EPS)?;
    let z = g.mul(z, sigma)?;
    g.add(z, mu)
}

/// Normalization site parameters for one fusion step.
#[derive(Clone, Copy, Debug)]
pub enum StepNorm {
    Adaptive(BlockInstance),
    Plain,
}

/// One meta-fusion step on `f_prev: [B, L, d]`.
pub fn fusion_step<T: Scalar>(
    g: &mut Graph<'_, T>,
    f_prev: Var,
    norm: StepNorm,
    prefix: &str,
    heads: usize,
) -> Result<Var, DiffError> {
    let f1 = match norm {
        StepNorm::Adaptive(i) => adaptive_norm(g, f_prev, i.mu1, i.sigma1)?,
        StepNorm::Plain => layer_norm(g, f_prev, &format!("{prefix}.ln1"))?,
    };
    let a = multi_head_attention(g, f1, f1, None, &format!("{prefix}.attn"), heads)?;
    let f2 = g.add(a, f1)?;
    let f3 = match norm {
        StepNorm::Adaptive(i) => adaptive_norm(g, f2, i.mu2, i.sigma2)?,
        StepNorm::Plain => layer_norm(g, f2, &format!("{prefix}.ln2"))?,
    };
    let h = feed_forward(g, f3, &format!("{prefix}.ffn"))?;
    g.add(h, f3)
}

/// Runs all `K` steps from `f̂_0 = f^r`; returns every `f̂_i` including `f̂_0`.
pub fn progressive_fusion<T: Scalar>(
    g: &mut Graph<'_, T>,
    f_r: Var,
    indicators: &[Var],
    shared: bool,
    norm: NormKind,
    heads: usize,
) -> Result<Vec<Var>, DiffError> {
    g.scoped("fusion", |g| {
        let mut states = vec![f_r];
        for (i, &s) in indicators.iter().enumerate() {
            let step_norm = match norm {
                NormKind::Adaptive => StepNorm::Adaptive(instantiate_block(g, s, i)?),
                NormKind::Plain => StepNorm::Plain,
            };
            let prev = *states.last().unwrap();
            let next = fusion_step(g, prev, step_norm, &block_prefix(i, shared), heads)?;
            states.push(next);
        }
        Ok(states)
    })
}

/// `[N, d] × [N, d] → [N, N]` cosine similarities.
pub fn cosine_matrix<T: Scalar>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var, DiffError> {
    let an = g.l2_normalize(a, 1e-12)?;
    let bn = g.l2_normalize(b, 1e-12)?;
    let bt = g.transpose(bn)?;
    g.matmul(an, bt)
}

/// Concept matching matrix: the shared pool head summarizes `f̂_K`, then
/// cosine against the pooled target features `f^t_a: [N, d]`.
pub fn concept_matching_matrix<T: Scalar>(g: &mut Graph<'_, T>, f_k: Var, target_pooled: Var) -> Result<Var, DiffError> {
    let p = attention_pool(g, f_k)?;
    cosine_matrix(g, p.pooled, target_pooled)
}

/// Mean over the token axis: `[B, L, d] → [B, d]`.
pub fn mean_tokens<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Result<Var, DiffError> {
    let s = g.shape(x).to_vec();
    let m = g.mean_axis(x, 1)?;
    g.reshape(m, &[s[0], s[2]])
}

/// `−(1/N) Σ_i log softmax_j(γ M_ij)[i]` for a square score matrix.
pub fn batch_classification_loss<T: Scalar>(g: &mut Graph<'_, T>, scores: Var, gamma: f64) -> Result<Var, DiffError> {
    let s = g.shape(scores).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(DiffError::ShapeMismatch {
            op: "batch_classification_loss",
            shapes: vec![s],
        });
    }
    let n = s[0];
    g.scoped("batch_ce", |g| {
        let z = g.scale(scores, gamma)?;
        let lp = g.log_softmax(z, 1)?;
        let eye: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
        let eye = g.constant(Tensor::from_f64(&[n, n], &eye)?)?;
        let diag = g.mul(lp, eye)?;
        let total = g.sum_all(diag)?;
        g.scale(total, -1.0 / n as f64)
    })
}

/// `L = L_m + α L_c`.
pub fn total_loss<T: Scalar>(g: &mut Graph<'_, T>, l_m: Var, l_c: Var, alpha: f64) -> Result<Var, DiffError> {
    if alpha < 0.0 {
        return Err(DiffError::InvalidArgument(format!("alpha must be non-negative, got {alpha}")));
    }
    let w = g.scale(l_c, alpha)?;
    g.add(l_m, w)
}

/// Cosine of two plain vectors; zero-norm input gives 0 with a warning.
pub fn matching_score(a: &[f32], b: &[f32]) -> f32 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("matching score of a zero-norm vector defined as 0");
        return 0.0;
    }
    (dot / (na * nb)) as f32
}
