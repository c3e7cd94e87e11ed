//! Property tests for the model components, data generator and metrics.

use std::collections::BTreeMap;

use neucore::alignment::{alignment_scores, asymmetric_loss, attention_pool, init_pool_head};
use neucore::data::{generate_triplet, parse_concepts, render_scene, GeneratorConfig, Lexicon, PosSet};
use neucore::diffcore::{uniform, Graph, ParameterSet, Tensor};
use neucore::encoders::{encode_image, init_image_encoder, EncoderConfig, ImageGrid, CONCEPT_TABLE};
use neucore::fusion::{adaptive_norm, batch_classification_loss};
use neucore::harness::metrics_from_rankings;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pool_params(d: usize, m: usize, seed: u64) -> ParameterSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParameterSet::new();
    init_pool_head(&mut ps, &mut rng, d);
    ps.insert(CONCEPT_TABLE, uniform(&mut rng, &[m, d], 1.0));
    ps.convert()
}

fn asl_value(scores: &[f64], labels: &[f64], m: usize, bp: f64, bm: f64) -> f64 {
    let ps = ParameterSet::<f64>::new();
    let mut g = Graph::new(&ps);
    let b = scores.len() / m;
    let s = g.constant(Tensor::from_f64(&[b, m], scores).unwrap()).unwrap();
    let l = asymmetric_loss(&mut g, s, &Tensor::from_f64(&[b, m], labels).unwrap(), bp, bm).unwrap();
    g.value(l).item()
}

fn batch_loss(m: &[f64], n: usize) -> f64 {
    let ps = ParameterSet::<f64>::new();
    let mut g = Graph::new(&ps);
    let s = g.constant(Tensor::from_f64(&[n, n], m).unwrap()).unwrap();
    let l = batch_classification_loss(&mut g, s, 2.65926).unwrap();
    g.value(l).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooling_weights_form_a_distribution(
        tokens in prop::collection::vec(-5.0f64..5.0, 2 * 7 * 8),
        seed in 0u64..100,
    ) {
        let ps = pool_params(8, 3, seed);
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::from_f64(&[2, 7, 8], &tokens).unwrap()).unwrap();
        let p = attention_pool(&mut g, x).unwrap();
        let w = g.value(p.weights);
        for row in w.data().chunks(7) {
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn alignment_scores_scale_linearly(
        pooled in prop::collection::vec(-2.0f64..2.0, 8),
        lambda in 0.01f64..10.0,
    ) {
        let ps = pool_params(8, 5, 1);
        let mut g = Graph::new(&ps);
        let p = g.constant(Tensor::from_f64(&[1, 8], &pooled).unwrap()).unwrap();
        let q = g.scale(p, lambda).unwrap();
        let s = alignment_scores(&mut g, p).unwrap();
        let t = alignment_scores(&mut g, q).unwrap();
        for (a, b) in g.value(s).data().iter().zip(g.value(t).data()) {
            prop_assert!((a * lambda - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn asymmetric_loss_is_non_negative_and_falls_toward_the_labels(
        scores in prop::collection::vec(-8.0f64..8.0, 3 * 6),
        mask in prop::collection::vec(any::<bool>(), 3 * 6),
        bp in 0.0f64..4.0,
        bm in 0.0f64..6.0,
    ) {
        let mut labels: Vec<f64> = mask.iter().map(|&b| f64::from(u8::from(b))).collect();
        for r in 0..3 {
            labels[r * 6] = 1.0;
        }
        let l0 = asl_value(&scores, &labels, 6, bp, bm);
        prop_assert!(l0 >= 0.0);
        // move every logit toward its label
        let moved: Vec<f64> = scores.iter().zip(&labels).map(|(s, y)| if *y > 0.5 { s + 1.0 } else { s - 1.0 }).collect();
        let l1 = asl_value(&moved, &labels, 6, bp, bm);
        prop_assert!(l1 <= l0 + 1e-12, "{l1} > {l0}");
    }

    #[test]
    fn batch_loss_is_symmetric_under_batch_permutation(
        m in prop::collection::vec(-1.0f64..1.0, 25),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let n = 5;
        let permuted: Vec<f64> = (0..n * n).map(|k| m[perm[k / n] * n + perm[k % n]]).collect();
        prop_assert!((batch_loss(&m, n) - batch_loss(&permuted, n)).abs() <= 1e-6);
    }

    #[test]
    fn raising_a_diagonal_score_lowers_the_batch_loss(
        m in prop::collection::vec(-1.0f64..1.0, 16),
        i in 0usize..4,
    ) {
        let h = 1e-5;
        let mut up = m.clone();
        up[i * 4 + i] += h;
        let mut down = m.clone();
        down[i * 4 + i] -= h;
        prop_assert!((batch_loss(&up, 4) - batch_loss(&down, 4)) / (2.0 * h) < 0.0);
    }

    #[test]
    fn adaptive_norm_inverts_with_the_row_statistics(
        x in prop::collection::vec(-3.0f64..3.0, 3 * 6),
    ) {
        let rows: Vec<&[f64]> = x.chunks(6).collect();
        let var = |r: &[f64]| {
            let m = r.iter().sum::<f64>() / 6.0;
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 6.0
        };
        prop_assume!(rows.iter().all(|r| var(r) >= 1e-3));
        let mut mu = Vec::new();
        let mut sigma = Vec::new();
        for r in &rows {
            let m = r.iter().sum::<f64>() / 6.0;
            let s = (var(r) + 1e-5).sqrt();
            mu.extend(std::iter::repeat_n(m, 6));
            sigma.extend(std::iter::repeat_n(s, 6));
        }
        let ps = ParameterSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let xv = g.constant(Tensor::from_f64(&[3, 6], &x).unwrap()).unwrap();
        let mv = g.constant(Tensor::from_f64(&[3, 6], &mu).unwrap()).unwrap();
        let sv = g.constant(Tensor::from_f64(&[3, 6], &sigma).unwrap()).unwrap();
        let y = adaptive_norm(&mut g, xv, mv, sv).unwrap();
        prop_assert!(g.value(y).max_abs_diff(g.value(xv)) <= 1e-5);
    }

    #[test]
    fn rankings_ignore_positive_score_scaling(
        scores in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 12), 1..20),
        c in 0.01f32..50.0,
    ) {
        let gallery: Vec<String> = (0..12).map(|i| format!("g{i:02}")).collect();
        let n = scores.len();
        let targets: Vec<String> = (0..n).map(|i| gallery[(i * 5) % 12].clone()).collect();
        let q: Vec<String> = (0..n).map(|i| format!("q{i}")).collect();
        let scaled: Vec<Vec<f32>> = scores.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        let (m1, r1) = metrics_from_rankings(&q, &scores, &targets, &gallery, None, &[1, 5, 10], &[]).unwrap();
        let (m2, r2) = metrics_from_rankings(&q, &scaled, &targets, &gallery, None, &[1, 5, 10], &[]).unwrap();
        prop_assert_eq!(m1, m2);
        for (a, b) in r1.iter().zip(&r2) {
            prop_assert_eq!(&a.ranked, &b.ranked);
        }
    }

    #[test]
    fn encoder_tokens_match_grid_and_stay_finite(
        gh in 1usize..5,
        gw in 1usize..5,
        seed in 0u64..50,
    ) {
        let patch = 4;
        let cfg = EncoderConfig { d: 8, patch, channels: 3, tokens: gh * gw, heads: 2, ffn_hidden: 16, text_vocab: 4, word_dim: 8 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterSet::new();
        init_image_encoder(&mut ps, &mut rng, &cfg);
        let n = gh * patch * gw * patch * 3;
        let data: Vec<f32> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 999.0).collect();
        let img = ImageGrid::new(gh * patch, gw * patch, 3, data).unwrap();
        let v = encode_image(&img, &ps, &cfg).unwrap();
        prop_assert_eq!(v.tokens.shape(), &[gh * gw, 8]);
        prop_assert!(v.tokens.all_finite());
    }

    #[test]
    fn generated_triplets_satisfy_containment_and_parser_identity(seed in 0u64..5000) {
        let cfg = GeneratorConfig::default();
        let t = generate_triplet(seed, &cfg).unwrap();
        prop_assert!(t.containment_holds());
        prop_assert_eq!(t.edit.apply(&t.reference), t.target.clone());
        let parsed = parse_concepts(&t.modifier, &Lexicon::standard(), &PosSet::all());
        prop_assert_eq!(&parsed, &t.text_concepts);
        let cells = cfg.cells();
        for (c, patches) in &t.concept_patches {
            prop_assert!(t.text_concepts.contains(c));
            prop_assert!(!patches.is_empty() && patches.iter().all(|&p| p < 2 * cells));
        }
    }
}

#[test]
fn rendering_is_deterministic_per_seed() {
    let cfg = GeneratorConfig::default();
    let t = generate_triplet(11, &cfg).unwrap();
    assert_eq!(render_scene(&t.reference, &cfg, 3), render_scene(&t.reference, &cfg, 3));
    assert_ne!(render_scene(&t.reference, &cfg, 3), render_scene(&t.reference, &cfg, 4));
}

#[test]
fn concept_patch_map_is_keyed_by_text_concepts() {
    let cfg = GeneratorConfig::default();
    let t = generate_triplet(2, &cfg).unwrap();
    let keys: BTreeMap<_, _> = t.concept_patches.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    assert_eq!(keys.keys().cloned().collect::<std::collections::BTreeSet<_>>(), t.text_concepts);
}
