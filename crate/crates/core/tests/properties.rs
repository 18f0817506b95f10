//! Cross-module invariants checked on random inputs.

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sarcex_core::enrich::{build_knowledge_sequence, EnrichedSequence, SegmentKind, SourceTokens};
use sarcex_core::fusion::{fuse, shared_fusion, AttentionScale, FusionParams, GateParams, MixWeights};
use sarcex_core::graph::{build_graph, normalized_adjacency};
use sarcex_core::knowledge::{ConceptEntry, ConceptLookup};
use sarcex_core::metrics::{corpus_bleu, rouge_l, BleuConfig};
use sarcex_core::reasoner::{gcn_forward, Activation, GcnConfig, GcnParams};
use sarcex_core::visual::{project_visual, VisualFeatureMatrix};
use sarcex_core::Matrix;

const WORDS: [&str; 8] = ["cold", "rain", "dog", "tea", "late", "bus", "sun", "day"];

fn arb_source() -> impl Strategy<Value = (Vec<String>, ConceptLookup)> {
    prop::collection::vec(prop::sample::select(WORDS.to_vec()), 0..7).prop_flat_map(|toks| {
        let n = toks.len();
        let entries = prop::collection::vec(
            prop::option::of((prop::collection::vec(prop::sample::select(WORDS.to_vec()), 1..3), 0.01f64..4.0)),
            n,
        );
        (Just(toks), entries).prop_map(|(toks, entries)| {
            let tokens: Vec<String> = toks.iter().map(|s| s.to_string()).collect();
            let entries = entries
                .into_iter()
                .zip(&tokens)
                .map(|(e, t)| {
                    e.map(|(c, r)| ConceptEntry {
                        source_token: t.clone(),
                        concept_tokens: c.iter().map(|s| s.to_string()).collect(),
                        relevance: r,
                    })
                })
                .collect();
            (tokens, ConceptLookup { entries })
        })
    })
}

fn arb_sequence() -> impl Strategy<Value = EnrichedSequence> {
    (arb_source(), arb_source(), arb_source(), prop::option::of(1usize..40)).prop_map(|(c, d, o, max_len)| {
        build_knowledge_sequence(
            SourceTokens::new(&c.0, &c.1),
            SourceTokens::new(&d.0, &d.1),
            SourceTokens::new(&o.0, &o.1),
            max_len,
        )
        .unwrap()
    })
}

fn to_nalgebra(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn normalized_adjacency_is_symmetric_with_unit_spectral_bound(seq in arb_sequence(), pad in 0usize..4) {
        let g = build_graph(&seq).unwrap();
        let n = seq.len().max(1) + pad;
        let a = normalized_adjacency(&g, n).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(a[(i, j)], a[(j, i)]);
                prop_assert!(a[(i, j)] >= 0.0);
            }
        }
        let eig = SymmetricEigen::new(to_nalgebra(&a));
        for &l in eig.eigenvalues.iter() {
            prop_assert!(l <= 1.0 + 1e-9 && l >= -1.0 - 1e-9, "eigenvalue {}", l);
        }
    }

    #[test]
    fn dropping_concepts_removes_only_concept_edges(seq in arb_sequence()) {
        let full = build_graph(&seq).unwrap();
        let mut stripped = seq.clone();
        for seg in &mut stripped.segments {
            seg.concept_links.clear();
        }
        let bare = build_graph(&stripped).unwrap();
        let in_concepts = |i: usize| {
            seq.segments.iter().any(|s| s.kind.is_concepts() && s.contains(i))
        };
        for e in &full.edges {
            let kept = bare.edges.contains(e);
            prop_assert_eq!(kept, !in_concepts(e.u) && !in_concepts(e.v), "edge {:?}", e);
        }
        prop_assert!(bare.edges.iter().all(|e| full.edges.contains(e)));
    }

    #[test]
    fn source_edges_stay_inside_their_segment(seq in arb_sequence()) {
        let g = build_graph(&seq).unwrap();
        for e in &g.edges {
            prop_assert!(e.u < e.v && e.v < seq.len());
            let seg_of = |i: usize| seq.segments.iter().find(|s| s.contains(i)).map(|s| s.kind).unwrap();
            let (a, b) = (seg_of(e.u), seg_of(e.v));
            prop_assert!(a == b || b.source_of() == Some(a), "{:?} -> {:?}", a, b);
            prop_assert!(a != SegmentKind::Objects || b == SegmentKind::ObjectConcepts);
        }
    }

    #[test]
    fn gates_are_strictly_inside_the_unit_interval(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let m = |rng: &mut ChaCha8Rng, r, c| Matrix::from_fn(r, c, |_, _| rng.gen_range(-scale..scale));
        let (e_t, e_v, f_vt, f_tv) = (m(&mut rng, 3, d), m(&mut rng, 3, d), m(&mut rng, 3, d), m(&mut rng, 3, d));
        let gates = GateParams { w_v: m(&mut rng, d, d), w_t: m(&mut rng, d, d), b_v: m(&mut rng, 1, d), b_t: m(&mut rng, 1, d) };
        let out = fuse(&e_t, &e_v, &f_vt, &f_tv, &gates, &MixWeights::default()).unwrap();
        for &g in out.g_v.as_slice().iter().chain(out.g_t.as_slice()) {
            prop_assert!(g >= 0.0 && g <= 1.0);
        }
        for &g in out.g_v.as_slice() {
            // sigmoid saturates to exactly 0 or 1 only beyond ~±37
            let pre_bounded = scale * (1.0 + d as f64 * scale) < 30.0;
            if pre_bounded {
                prop_assert!(g > 0.0 && g < 1.0);
            }
        }
    }

    #[test]
    fn mixture_is_linear_in_its_weights(seed in any::<u64>(), w in prop::array::uniform4(-2.0f64..2.0)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = FusionParams::init(5, AttentionScale::SqrtWidth, &mut rng);
        let e_t = Matrix::from_fn(4, 5, |_, _| rng.gen_range(-1.0..1.0));
        let e_v = Matrix::from_fn(4, 5, |_, _| rng.gen_range(-1.0..1.0));
        p.mix = MixWeights { alpha1: w[0], alpha2: w[1], beta1: w[2], beta2: w[3] };
        let t = shared_fusion(&e_t, &e_v, &p).unwrap();
        let g = &t.gated;
        let want = Matrix::from_fn(4, 5, |i, j| {
            w[0] * g.f_1[(i, j)] + w[1] * g.f_2[(i, j)] + w[2] * g.f_v[(i, j)] + w[3] * g.f_t[(i, j)]
        });
        prop_assert!(t.f_sf().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn visual_projection_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |rows, cols| Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
        let (x, y, proj) = (r(3, 6), r(3, 6), r(5, 3));
        let mix = Matrix::from_fn(3, 6, |i, j| a * x[(i, j)] + b * y[(i, j)]);
        let feats = |m: &Matrix| VisualFeatureMatrix { values: m.clone() };
        let lhs = project_visual(&feats(&mix), &proj).unwrap();
        let px = project_visual(&feats(&x), &proj).unwrap();
        let py = project_visual(&feats(&y), &proj).unwrap();
        let rhs = Matrix::from_fn(5, 6, |i, j| a * px[(i, j)] + b * py[(i, j)]);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn rouge_l_is_symmetric(a in prop::collection::vec(prop::sample::select(WORDS.to_vec()), 0..12),
                            b in prop::collection::vec(prop::sample::select(WORDS.to_vec()), 0..12)) {
        let a: Vec<String> = a.iter().map(|s| s.to_string()).collect();
        let b: Vec<String> = b.iter().map(|s| s.to_string()).collect();
        prop_assert!((rouge_l(&a, &b) - rouge_l(&b, &a)).abs() < 1e-15);
    }

    #[test]
    fn corpus_bleu_ignores_pair_order(pairs in prop::collection::vec(
        (prop::collection::vec(prop::sample::select(WORDS.to_vec()), 1..10),
         prop::collection::vec(prop::sample::select(WORDS.to_vec()), 1..10)), 1..8)) {
        let to = |v: &Vec<&str>| v.iter().map(|s| s.to_string()).collect::<Vec<String>>();
        let c: Vec<Vec<String>> = pairs.iter().map(|p| to(&p.0)).collect();
        let r: Vec<Vec<String>> = pairs.iter().map(|p| to(&p.1)).collect();
        let (mut c2, mut r2) = (c.clone(), r.clone());
        c2.reverse();
        r2.reverse();
        prop_assert_eq!(corpus_bleu(&c, &r, BleuConfig::default()), corpus_bleu(&c2, &r2, BleuConfig::default()));
    }
}

#[test]
fn gcn_output_stays_finite_across_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 9;
    let adj = Matrix::from_fn(n, n, |i, j| if i == j || i + 1 == j || j + 1 == i { 1.0 } else { 0.0 });
    let deg: Vec<f64> = (0..n).map(|i| adj.row(i).iter().sum()).collect();
    let norm = Matrix::from_fn(n, n, |i, j| adj[(i, j)] / (deg[i] * deg[j]).sqrt());
    for activation in [Activation::Relu, Activation::Tanh, Activation::Identity] {
        let config = GcnConfig { layers: 4, width: 6, activation };
        let params = GcnParams::init(&config, &mut rng);
        let h0 = Matrix::from_fn(n, 6, |_, _| rng.gen_range(-1.0..1.0));
        let out = gcn_forward(&h0, &norm, &params, &config).unwrap();
        assert!(out.output().is_finite());
        assert_eq!(out.hidden.len(), 5);
    }
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// BLEU-n is not monotone in n for every corpus. A short unmatched pair
/// next to a long exact copy lowers unigram precision more than bigram
/// precision, so BLEU-2 exceeds BLEU-1.
#[test]
fn bleu_is_not_monotone_in_n_for_every_corpus() {
    let long: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
    let cands = vec![toks("a b c d"), long.clone()];
    let refs = vec![toks("e f g h"), long];
    let b = corpus_bleu(&cands, &refs, BleuConfig { epsilon: None });
    let p1: f64 = 100.0 / 104.0;
    let p2: f64 = 99.0 / 102.0;
    assert!((b[0] - p1).abs() < 1e-12);
    assert!((b[1] - (p1 * p2).sqrt()).abs() < 1e-12);
    assert!(b[1] > b[0]);
}

/// With epsilon smoothing, a tiny corpus whose only 4-gram is unmatched
/// gets p4 = 0.1, which can exceed the running geometric mean.
#[test]
fn smoothed_bleu_can_rise_at_order_four() {
    let cands = vec![toks("a b c d")];
    let refs = vec![toks("a x y z")];
    let b = corpus_bleu(&cands, &refs, BleuConfig::default());
    let p = [0.25, 0.1 / 3.0, 0.1 / 2.0, 0.1 / 1.0];
    for n in 1..=4 {
        let want = p[..n].iter().product::<f64>().powf(1.0 / n as f64);
        assert!((b[n - 1] - want).abs() < 1e-12, "BLEU-{n}: {} vs {want}", b[n - 1]);
    }
    assert!(b[3] > b[2]);
}
