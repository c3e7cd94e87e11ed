//! Toy trainable image encoder, BiGRU text encoder and concept embeddings.
//!
//! Parameter prefixes: `image.` (patch embedding, positions, one attention
//! block), `text.` (word embeddings, two GRU directions, projections) and
//! `concepts.embed` (one row per vocabulary concept).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::data::tokenize;
use crate::diffcore::{init_linear, uniform, DiffError, Graph, ParameterSet, Scalar, Tensor, Var};
use crate::nn::{init_transformer_layer, transformer_layer};

pub const IMAGE_PREFIX: &str = "image.";
pub const TEXT_PREFIX: &str = "text.";
pub const CONCEPT_TABLE: &str = "concepts.embed";
pub const UNK: usize = 0;
pub const UNK_WORD: &str = "<unk>";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("image {h}x{w} is not divisible into {patch}x{patch} patches")]
    IndivisiblePatch { h: usize, w: usize, patch: usize },
    #[error("image needs at least 2x2 pixels and values in [0,1]: {0}")]
    BadImage(String),
    #[error("empty word sequence")]
    EmptyText,
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pixel image in `[0, 1]`, stored `[H, W, C]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, EncoderError> {
        if height < 2 || width < 2 || channels == 0 {
            return Err(EncoderError::BadImage(format!("{height}x{width}x{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(EncoderError::BadImage(format!(
                "{} values for {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(EncoderError::BadImage(format!("value {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, self.channels], self.data.clone()).expect("validated")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, EncoderError> {
        match t.shape() {
            [h, w, c] => Self::new(*h, *w, *c, t.to_vec()),
            s => Err(EncoderError::BadImage(format!("expected rank-3 [H, W, C], got {s:?}"))),
        }
    }

    /// Non-overlapping patches flattened row-major (channels innermost):
    /// `[L, patch·patch·C]` with patches in raster order.
    pub fn patches(&self, patch: usize) -> Result<Tensor, EncoderError> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(EncoderError::IndivisiblePatch {
                h: self.height,
                w: self.width,
                patch,
            });
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let pd = patch * patch * self.channels;
        let mut out = Vec::with_capacity(gh * gw * pd);
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..patch {
                    for x in 0..patch {
                        out.extend_from_slice(self.pixel(py * patch + y, px * patch + x));
                    }
                }
            }
        }
        Ok(Tensor::new(vec![gh * gw, pd], out)?)
    }
}

/// Per-patch image features, `L × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokens {
    pub tokens: Tensor,
}

/// Sentence feature `q` (`d`), word features `t` (`L_w × d`) and word ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoding {
    pub q: Tensor,
    pub t: Tensor,
    pub word_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d: usize,
    pub patch: usize,
    pub channels: usize,
    /// Patches per image.
    pub tokens: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub text_vocab: usize,
    pub word_dim: usize,
}

impl EncoderConfig {
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Closed training-time word vocabulary; id 0 is the unknown word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextVocabulary {
    words: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl TextVocabulary {
    pub fn from_words(words: Vec<String>) -> Self {
        let mut all = vec![UNK_WORD.to_string()];
        all.extend(words.into_iter().filter(|w| w != UNK_WORD));
        let ids = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words: all, ids }
    }

    /// Sorted unique tokens of the given texts.
    pub fn build<S: AsRef<str>>(texts: &[S]) -> Self {
        let set: std::collections::BTreeSet<String> = texts.iter().flat_map(|t| tokenize(t.as_ref())).collect();
        Self::from_words(set.into_iter().collect())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        let mut w = BufWriter::new(File::create(path)?);
        for word in &self.words {
            writeln!(w, "{word}")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads one word per line; line number is the id and line 0 must be
    /// the unknown word.
    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let r = BufReader::new(File::open(path)?);
        let words: Vec<String> = r.lines().collect::<Result<_, _>>()?;
        if words.first().map(String::as_str) != Some(UNK_WORD) {
            return Err(EncoderError::Format {
                path: path.display().to_string(),
                msg: format!("first line must be {UNK_WORD}"),
            });
        }
        Ok(Self::from_words(words[1..].to_vec()))
    }
}

/// Parses a `word v1 … vd` text file. Every vector must have `dim` values.
pub fn load_word_vectors(path: &Path, dim: usize) -> Result<BTreeMap<String, Vec<f32>>, EncoderError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = BTreeMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let vals: Vec<f32> = parts
            .map(|p| p.parse::<f32>())
            .collect::<Result<_, _>>()
            .map_err(|e| EncoderError::Format {
                path: path.display().to_string(),
                msg: format!("line {}: {e}", i + 1),
            })?;
        if vals.len() != dim || vals.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::Format {
                path: path.display().to_string(),
                msg: format!("line {}: expected {dim} finite values, got {}", i + 1, vals.len()),
            });
        }
        out.insert(word.to_lowercase(), vals);
    }
    Ok(out)
}

/// `rows × dim` table whose row `i` comes from `vectors[words[i]]` when
/// present and from a seeded uniform draw otherwise.
pub fn embedding_table<R: Rng>(
    rng: &mut R,
    words: &[String],
    dim: usize,
    vectors: Option<&BTreeMap<String, Vec<f32>>>,
) -> Tensor {
    let bound = 1.0 / (dim as f32).sqrt();
    let mut data = Vec::with_capacity(words.len() * dim);
    for w in words {
        let random = uniform(rng, &[dim], bound);
        match vectors.and_then(|v| v.get(w)) {
            Some(v) => data.extend_from_slice(v),
            None => data.extend_from_slice(random.data()),
        }
    }
    Tensor::new(vec![words.len(), dim], data).expect("finite table")
}

pub fn init_image_encoder<R: Rng>(ps: &mut ParameterSet, rng: &mut R, cfg: &EncoderConfig) {
    init_linear(ps, rng, "image.patch", cfg.patch_dim(), cfg.d);
    ps.insert("image.pos", uniform(rng, &[cfg.tokens, cfg.d], 0.1));
    init_transformer_layer(ps, rng, "image.block", cfg.d, cfg.ffn_hidden);
}

pub fn init_text_encoder<R: Rng>(
    ps: &mut ParameterSet,
    rng: &mut R,
    cfg: &EncoderConfig,
    vocab: &TextVocabulary,
    vectors: Option<&BTreeMap<String, Vec<f32>>>,
) {
    ps.insert("text.embed", embedding_table(rng, vocab.words(), cfg.word_dim, vectors));
    for dir in ["fwd", "bwd"] {
        init_linear(ps, rng, &format!("text.{dir}.x"), cfg.word_dim, 3 * cfg.d);
        // recurrent weights carry no bias; the input projection already has one
        ps.insert(format!("text.{dir}.h.w"), crate::diffcore::uniform_weight(rng, cfg.d, 3 * cfg.d));
    }
    init_linear(ps, rng, "text.q", 2 * cfg.d, cfg.d);
    init_linear(ps, rng, "text.t", 2 * cfg.d, cfg.d);
}

pub fn init_concept_table<R: Rng>(
    ps: &mut ParameterSet,
    rng: &mut R,
    concepts: &[String],
    d: usize,
    vectors: Option<&BTreeMap<String, Vec<f32>>>,
) {
    ps.insert(CONCEPT_TABLE, embedding_table(rng, concepts, d, vectors));
}

/// Patch embedding plus positions, before attention. `patches: [B, L, P]`.
pub fn embed_patches<T: Scalar>(g: &mut Graph<'_, T>, patches: Var) -> Result<Var, DiffError> {
    let x = g.linear(patches, "image.patch")?;
    let pos = g.param("image.pos")?;
    g.add(x, pos)
}

/// `[B, L, P]` patches → `[B, L, d]` tokens.
pub fn encode_image_tokens<T: Scalar>(g: &mut Graph<'_, T>, patches: Var, heads: usize) -> Result<Var, DiffError> {
    g.scoped("image", |g| {
        let x = embed_patches(g, patches)?;
        transformer_layer(g, x, "image.block", heads)
    })
}

/// Padded batch of word-id sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBatch {
    /// `B × max_len` ids, padded with `UNK`.
    pub ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl TextBatch {
    pub fn new(seqs: &[Vec<usize>], vocab_size: usize) -> Result<Self, EncoderError> {
        if seqs.iter().any(|s| s.is_empty()) || seqs.is_empty() {
            return Err(EncoderError::EmptyText);
        }
        let max = seqs.iter().map(Vec::len).max().unwrap();
        let ids = seqs
            .iter()
            .map(|s| {
                let mut row: Vec<usize> = s.iter().map(|&i| if i < vocab_size { i } else { UNK }).collect();
                row.resize(max, UNK);
                row
            })
            .collect();
        Ok(Self {
            ids,
            lengths: seqs.iter().map(Vec::len).collect(),
        })
    }

    pub fn batch(&self) -> usize {
        self.ids.len()
    }

    pub fn max_len(&self) -> usize {
        self.ids[0].len()
    }

    /// `[B, 1, max_len]` additive mask: 0 on words, a large negative on padding.
    pub fn key_bias<T: Scalar>(&self) -> Tensor<T> {
        let l = self.max_len();
        let data: Vec<f64> = self
            .lengths
            .iter()
            .flat_map(|&n| (0..l).map(move |j| if j < n { 0.0 } else { -1e9 }))
            .collect();
        Tensor::from_f64(&[self.batch(), 1, l], &data).expect("finite mask")
    }

    /// `[B, 1]` validity of step `j` for every row.
    fn step_mask<T: Scalar>(&self, j: usize) -> Tensor<T> {
        let data: Vec<f64> = self.lengths.iter().map(|&n| if j < n { 1.0 } else { 0.0 }).collect();
        Tensor::from_f64(&[self.batch(), 1], &data).expect("finite mask")
    }
}

/// One GRU direction over precomputed input projections `xp: [B, L, 3d]`.
/// Masked steps carry the previous state through unchanged.
fn gru_direction<T: Scalar>(
    g: &mut Graph<'_, T>,
    xp: Var,
    batch: &TextBatch,
    prefix: &str,
    d: usize,
    reverse: bool,
) -> Result<(Vec<Var>, Var), DiffError> {
    let b = batch.batch();
    let l = batch.max_len();
    let uh = g.param(&format!("{prefix}.h.w"))?;
    let mut h = g.constant(Tensor::zeros(&[b, d]))?;
    let mut states = vec![None; l];
    let order: Vec<usize> = if reverse { (0..l).rev().collect() } else { (0..l).collect() };
    for j in order {
        let xj = g.slice(xp, 1, j, 1)?;
        let xj = g.reshape(xj, &[b, 3 * d])?;
        let hp = g.matmul(h, uh)?;
        let xz = g.slice(xj, 1, 0, d)?;
        let xr = g.slice(xj, 1, d, d)?;
        let xn = g.slice(xj, 1, 2 * d, d)?;
        let hz = g.slice(hp, 1, 0, d)?;
        let hr = g.slice(hp, 1, d, d)?;
        let hn = g.slice(hp, 1, 2 * d, d)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let rh = g.mul(r, hn)?;
        let n = g.add(xn, rh)?;
        let n = g.tanh(n)?;
        // h' = n + z ⊙ (h − n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        let cand = g.add(n, zd)?;
        h = if batch.lengths.iter().all(|&n| j < n) {
            cand
        } else {
            let m = g.constant(batch.step_mask(j))?;
            let delta = g.sub(cand, h)?;
            let md = g.mul(m, delta)?;
            g.add(h, md)?
        };
        states[j] = Some(h);
    }
    Ok((states.into_iter().map(|s| s.unwrap()).collect(), h))
}

/// Batched BiGRU: returns `q: [B, d]` and `t: [B, max_len, d]`.
pub fn encode_text_batch<T: Scalar>(
    g: &mut Graph<'_, T>,
    batch: &TextBatch,
    d: usize,
) -> Result<(Var, Var), DiffError> {
    g.scoped("text", |g| {
        let b = batch.batch();
        let l = batch.max_len();
        let table = g.param("text.embed")?;
        let flat: Vec<usize> = batch.ids.iter().flatten().copied().collect();
        let e = g.gather(table, &flat)?;
        let wd = g.shape(e)[1];
        let e = g.reshape(e, &[b, l, wd])?;
        let xf = g.linear(e, "text.fwd.x")?;
        let xb = g.linear(e, "text.bwd.x")?;
        let (fs, ff) = gru_direction(g, xf, batch, "text.fwd", d, false)?;
        let (bs, bf) = gru_direction(g, xb, batch, "text.bwd", d, true)?;
        let fin = g.concat(&[ff, bf], 1)?;
        let q = g.linear(fin, "text.q")?;
        let mut rows = Vec::with_capacity(l);
        for j in 0..l {
            let c = g.concat(&[fs[j], bs[j]], 1)?;
            rows.push(g.reshape(c, &[b, 1, 2 * d])?);
        }
        let states = if l == 1 { rows[0] } else { g.concat(&rows, 1)? };
        let t = g.linear(states, "text.t")?;
        Ok((q, t))
    })
}

/// Row `id` of the concept table.
pub fn embed_concept<T: Scalar>(g: &mut Graph<'_, T>, id: usize) -> Result<Var, DiffError> {
    let table = g.param(CONCEPT_TABLE)?;
    g.gather(table, &[id])
}

/// Single-image convenience wrapper around [`encode_image_tokens`].
pub fn encode_image(image: &ImageGrid, params: &ParameterSet, cfg: &EncoderConfig) -> Result<VisualTokens, EncoderError> {
    let p = image.patches(cfg.patch)?;
    let l = p.shape()[0];
    let mut g = Graph::new(params).no_grad();
    let x = g.constant(p.reshape(&[1, l, cfg.patch_dim()])?)?;
    let y = encode_image_tokens(&mut g, x, cfg.heads)?;
    Ok(VisualTokens {
        tokens: g.value(y).reshape(&[l, cfg.d])?,
    })
}

/// Single-sequence convenience wrapper around [`encode_text_batch`].
pub fn encode_text(word_ids: &[usize], params: &ParameterSet, cfg: &EncoderConfig) -> Result<TextEncoding, EncoderError> {
    let batch = TextBatch::new(&[word_ids.to_vec()], cfg.text_vocab)?;
    let mut g = Graph::new(params).no_grad();
    let (q, t) = encode_text_batch(&mut g, &batch, cfg.d)?;
    Ok(TextEncoding {
        q: g.value(q).reshape(&[cfg.d])?,
        t: g.value(t).reshape(&[word_ids.len(), cfg.d])?,
        word_ids: batch.ids[0].clone(),
    })
}

/// Stacks images into a `[B, L, P]` patch tensor.
pub fn stack_patches(images: &[&ImageGrid], patch: usize) -> Result<Tensor, EncoderError> {
    let mut data = Vec::new();
    let mut shape = None;
    for img in images {
        let p = img.patches(patch)?;
        match &shape {
            None => shape = Some(p.shape().to_vec()),
            Some(s) if s.as_slice() != p.shape() => {
                return Err(EncoderError::BadImage(format!("mixed image sizes {s:?} and {:?}", p.shape())))
            }
            _ => {}
        }
        data.extend_from_slice(p.data());
    }
    let s = shape.ok_or(EncoderError::BadImage("empty image batch".into()))?;
    Ok(Tensor::new(vec![images.len(), s[0], s[1]], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            d: 8,
            patch: 4,
            channels: 3,
            tokens: 4,
            heads: 2,
            ffn_hidden: 16,
            text_vocab: 6,
            word_dim: 8,
        }
    }

    fn params(c: &EncoderConfig, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterSet::new();
        init_image_encoder(&mut ps, &mut rng, c);
        let vocab = TextVocabulary::from_words(["a", "add", "circle", "red", "the"].map(String::from).to_vec());
        init_text_encoder(&mut ps, &mut rng, c, &vocab, None);
        ps
    }

    fn image(seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::new(8, 8, 3, (0..192).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn token_count_and_patch_errors() {
        let c = cfg();
        let ps = params(&c, 1);
        let v = encode_image(&image(0), &ps, &c).unwrap();
        assert_eq!(v.tokens.shape(), &[4, 8]);
        assert!(v.tokens.all_finite());
        let err = image(0).patches(3).unwrap_err();
        assert!(err.to_string().contains("3x3"));
    }

    #[test]
    fn zero_image_zero_params_embed_to_zero() {
        let c = cfg();
        let mut ps = params(&c, 1);
        for p in ["image.patch.w", "image.patch.b", "image.pos"] {
            let s = ps.get(p).unwrap().shape().to_vec();
            ps.insert(p, Tensor::zeros(&s));
        }
        let mut g = Graph::new(&ps).no_grad();
        let x = g.constant(Tensor::zeros(&[1, 4, 48])).unwrap();
        let y = embed_patches(&mut g, x).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_patch_change_changes_tokens() {
        let c = cfg();
        let ps = params(&c, 2);
        let a = image(3);
        let mut data = a.data().to_vec();
        data[0] = 1.0 - data[0];
        let b = ImageGrid::new(8, 8, 3, data).unwrap();
        let ta = encode_image(&a, &ps, &c).unwrap();
        let tb = encode_image(&b, &ps, &c).unwrap();
        assert!(ta.tokens.max_abs_diff(&tb.tokens) > 0.0);
    }

    #[test]
    fn text_shapes_unk_and_determinism() {
        let c = cfg();
        let ps = params(&c, 4);
        let one = encode_text(&[2], &ps, &c).unwrap();
        assert_eq!(one.t.shape(), &[1, 8]);
        assert_eq!(one.q.shape(), &[8]);
        let a = encode_text(&[2, 1, 4, 3], &ps, &c).unwrap();
        let b = encode_text(&[2, 1, 4, 3], &ps, &c).unwrap();
        assert_eq!(a.t.shape(), &[4, 8]);
        assert_eq!(a, b);
        let unk = encode_text(&[99], &ps, &c).unwrap();
        assert_eq!(unk.word_ids, vec![UNK]);
        assert!(encode_text(&[], &ps, &c).is_err());
    }

    #[test]
    fn reversal_swaps_directions() {
        let c = cfg();
        let ps = params(&c, 5);
        let seq = vec![1, 2, 3, 4];
        let rev: Vec<usize> = seq.iter().rev().copied().collect();
        let mut swapped = ps.clone();
        for s in ["x.w", "x.b", "h.w"] {
            swapped.insert(format!("text.fwd.{s}"), ps.get(&format!("text.bwd.{s}")).unwrap().clone());
            swapped.insert(format!("text.bwd.{s}"), ps.get(&format!("text.fwd.{s}")).unwrap().clone());
        }
        // the q projection reads [fwd, bwd]; swap its input halves to match
        let w = ps.get("text.q.w").unwrap();
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let half = rows / 2;
        let mut data = Vec::with_capacity(rows * cols);
        data.extend_from_slice(&w.data()[half * cols..]);
        data.extend_from_slice(&w.data()[..half * cols]);
        swapped.insert("text.q.w", Tensor::new(vec![rows, cols], data).unwrap());
        let a = encode_text(&rev, &ps, &c).unwrap();
        let b = encode_text(&seq, &swapped, &c).unwrap();
        assert!(a.q.max_abs_diff(&b.q) < 1e-6);
    }

    #[test]
    fn padding_does_not_change_encodings() {
        let c = cfg();
        let ps = params(&c, 6);
        let short = encode_text(&[3, 4], &ps, &c).unwrap();
        let batch = TextBatch::new(&[vec![1, 2, 3, 4, 5], vec![3, 4]], c.text_vocab).unwrap();
        let mut g = Graph::new(&ps).no_grad();
        let (q, t) = encode_text_batch(&mut g, &batch, c.d).unwrap();
        let qv = g.value(q).to_vec();
        assert!(qv[8..].iter().zip(short.q.data()).all(|(a, b)| (a - b).abs() < 1e-6));
        let tv = g.value(t).to_vec();
        // row 1, first two positions
        let got = &tv[5 * 8..5 * 8 + 16];
        assert!(got.iter().zip(short.t.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = TextVocabulary::build(&["add a red circle", "remove the circle"]);
        assert_eq!(v.words()[0], UNK_WORD);
        assert_eq!(v.encode("add a purple circle")[2], UNK);
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(TextVocabulary::load(&p).unwrap(), v);
    }

    #[test]
    fn word_vector_loader_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vec.txt");
        std::fs::write(&p, "red 0.5 -1 2\ncircle 1 1 1\n").unwrap();
        let vecs = load_word_vectors(&p, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let words: Vec<String> = ["circle", "green", "red"].map(String::from).to_vec();
        let t = embedding_table(&mut rng, &words, 3, Some(&vecs));
        assert_eq!(t.row(0), &[1.0, 1.0, 1.0]);
        assert_eq!(t.row(2), &[0.5, -1.0, 2.0]);
        assert!(t.row(1).iter().all(|v| v.abs() <= 1.0 / 3f32.sqrt()));
        std::fs::write(&p, "red 0.5 -1\n").unwrap();
        assert!(load_word_vectors(&p, 3).is_err());
    }

    #[test]
    fn concept_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParameterSet::new();
        init_concept_table(&mut ps, &mut rng, &["a".into(), "b".into()], 4, None);
        let mut g = Graph::new(&ps);
        let r = embed_concept(&mut g, 0).unwrap();
        assert_eq!(g.value(r).data(), ps.get(CONCEPT_TABLE).unwrap().row(0));
        assert!(embed_concept(&mut g, 2).is_err());
    }
}
