//! Transformer building blocks shared by the encoders, the alignment
//! transformer and the meta-fusion block.

use rand::Rng;

use crate::diffcore::{init_linear, DiffError, Graph, ParameterSet, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

pub fn init_layer_norm(ps: &mut ParameterSet, prefix: &str, d: usize) {
    ps.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0));
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
}

/// Layer normalization over the last axis with learned gain and bias.
pub fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var, DiffError> {
    let gain = g.param(&format!("{prefix}.g"))?;
    let bias = g.param(&format!("{prefix}.b"))?;
    let z = g.standardize(x, LN_EPS)?;
    let z = g.mul(z, gain)?;
    g.add(z, bias)
}

pub fn init_mha<R: Rng>(ps: &mut ParameterSet, rng: &mut R, prefix: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        init_linear(ps, rng, &format!("{prefix}.{p}"), d, d);
    }
    // a key bias shifts every logit of a query equally, so softmax ignores it
    ps.remove(&format!("{prefix}.k.b"));
}

/// Multi-head attention. `query: [B, Lq, d]`, `kv: [B, Lk, d]`;
/// `key_bias` is an optional additive `[B, 1, Lk]` mask.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    query: Var,
    kv: Var,
    key_bias: Option<Var>,
    prefix: &str,
    heads: usize,
) -> Result<Var, DiffError> {
    let d = *g.shape(query).last().unwrap();
    if d % heads != 0 {
        return Err(DiffError::InvalidArgument(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = g.linear(query, &format!("{prefix}.q"))?;
    let k = g.linear(kv, &format!("{prefix}.k"))?;
    let v = g.linear(kv, &format!("{prefix}.v"))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 2, h * dh, dh)?;
        let kh = g.slice(k, 2, h * dh, dh)?;
        let vh = g.slice(v, 2, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let mut s = g.scale(s, scale)?;
        if let Some(bias) = key_bias {
            s = g.add(s, bias)?;
        }
        let p = g.softmax(s, 2)?;
        outs.push(g.matmul(p, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 2)? };
    g.linear(cat, &format!("{prefix}.o"))
}

pub fn init_ffn<R: Rng>(ps: &mut ParameterSet, rng: &mut R, prefix: &str, d: usize, hidden: usize) {
    init_linear(ps, rng, &format!("{prefix}.fc1"), d, hidden);
    init_linear(ps, rng, &format!("{prefix}.fc2"), hidden, d);
}

/// Two-layer feed-forward network with SiLU activation.
pub fn feed_forward<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var, DiffError> {
    let h = g.linear(x, &format!("{prefix}.fc1"))?;
    let h = g.silu(h)?;
    g.linear(h, &format!("{prefix}.fc2"))
}

pub fn init_transformer_layer<R: Rng>(ps: &mut ParameterSet, rng: &mut R, prefix: &str, d: usize, hidden: usize) {
    init_layer_norm(ps, &format!("{prefix}.ln1"), d);
    init_mha(ps, rng, &format!("{prefix}.attn"), d);
    init_layer_norm(ps, &format!("{prefix}.ln2"), d);
    init_ffn(ps, rng, &format!("{prefix}.ffn"), d, hidden);
}

/// Pre-norm encoder layer: `x + MHA(LN(x))`, then `+ FFN(LN(·))`.
pub fn transformer_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    prefix: &str,
    heads: usize,
) -> Result<Var, DiffError> {
    let h = layer_norm(g, x, &format!("{prefix}.ln1"))?;
    let a = multi_head_attention(g, h, h, None, &format!("{prefix}.attn"), heads)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, x, &format!("{prefix}.ln2"))?;
    let f = feed_forward(g, h, &format!("{prefix}.ffn"))?;
    g.add(x, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let dh = q[0].len() as f64;
        q.iter()
            .map(|qi| {
                let s: Vec<f64> = k
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dh.sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                let p: Vec<f64> = s.iter().map(|x| (x - m).exp() / z).collect();
                (0..v[0].len())
                    .map(|c| p.iter().zip(v).map(|(pj, vj)| pj * vj[c]).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_head_attention_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParameterSet::new();
        init_mha(&mut ps, &mut rng, "a", 4);
        // identity projections isolate the attention arithmetic
        for p in ["q", "k", "v", "o"] {
            let mut eye = vec![0.0f32; 16];
            (0..4).for_each(|i| eye[i * 5] = 1.0);
            ps.insert(format!("a.{p}.w"), Tensor::new(vec![4, 4], eye).unwrap());
        }
        let x: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.5).collect();
        let ps64 = ps.convert::<f64>();
        let mut g = Graph::new(&ps64);
        let xv = g.constant(Tensor::from_f64(&[1, 3, 4], &x).unwrap()).unwrap();
        let y = multi_head_attention(&mut g, xv, xv, None, "a", 1).unwrap();
        let rows: Vec<Vec<f64>> = x.chunks(4).map(|c| c.to_vec()).collect();
        let want = brute_attention(&rows, &rows, &rows);
        let got = g.value(y).to_vec();
        for (i, row) in want.iter().enumerate() {
            for (c, w) in row.iter().enumerate() {
                assert!((got[i * 4 + c] - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_keys_receive_no_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParameterSet::new();
        init_mha(&mut ps, &mut rng, "a", 4);
        let ps64 = ps.convert::<f64>();
        let mut g = Graph::new(&ps64);
        let q = g.constant(Tensor::from_f64(&[1, 1, 4], &[0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        let kv_a: Vec<f64> = vec![0.5, -0.2, 0.1, 0.0, 9.0, 9.0, -9.0, 3.0];
        let kv_b: Vec<f64> = vec![0.5, -0.2, 0.1, 0.0, -4.0, 1.0, 2.0, 7.0];
        let mask = g.constant(Tensor::from_f64(&[1, 1, 2], &[0.0, -1e9]).unwrap()).unwrap();
        let ka = g.constant(Tensor::from_f64(&[1, 2, 4], &kv_a).unwrap()).unwrap();
        let kb = g.constant(Tensor::from_f64(&[1, 2, 4], &kv_b).unwrap()).unwrap();
        let ya = multi_head_attention(&mut g, q, ka, Some(mask), "a", 2).unwrap();
        let yb = multi_head_attention(&mut g, q, kb, Some(mask), "a", 2).unwrap();
        assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-12);
    }
}
