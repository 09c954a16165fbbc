use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use super::*;
use crate::numcore::{grad_check_params, tests::naive_attention};

fn random_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}

fn refs(rows: &[Vec<f32>]) -> Vec<&[f32]> {
    rows.iter().map(|r| r.as_slice()).collect()
}

fn widen(rows: &[Vec<f32>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn ln_rows(rows: &[Vec<f64>], store: &ParamStore<f64>, p: &LayerNormParams) -> Vec<Vec<f64>> {
    let gamma = store.get(p.gamma).data();
    let beta = store.get(p.beta).data();
    rows.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + p.eps).sqrt() * gamma[i] + beta[i])
                .collect()
        })
        .collect()
}

fn add_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

fn naive_stack(mut x: Vec<Vec<f64>>, store: &ParamStore<f64>, blocks: &[EncoderBlock]) -> Vec<Vec<f64>> {
    for b in blocks {
        let attended = naive_attention(&x, &x, store, &b.attn);
        x = ln_rows(&add_rows(&attended, &x), store, &b.norm);
    }
    x
}

fn naive_encode(model: &ModelParameters<f64>, f_q: &[f64], context: &[Vec<f64>]) -> Vec<f64> {
    let re = model.encoder.as_ref().unwrap();
    let refined = naive_stack(context.to_vec(), &model.store, &re.blocks);
    let q = vec![f_q.to_vec()];
    let summary = naive_attention(&q, &refined, &model.store, re.cross.as_ref().unwrap());
    ln_rows(&add_rows(&summary, &q), &model.store, re.final_norm.as_ref().unwrap()).remove(0)
}

fn naive_link(model: &ModelParameters<f64>, g_q: &[f64], candidates: &[Vec<f64>]) -> Vec<f64> {
    let lp = model.predictor.as_ref().unwrap();
    let cls = model.classifier.as_ref().unwrap();
    let s = &model.store;
    let refined = if model.config.query_in_predictor {
        let mut set = vec![g_q.to_vec()];
        set.extend_from_slice(candidates);
        naive_stack(set, s, &lp.blocks).split_off(1)
    } else {
        naive_stack(candidates.to_vec(), s, &lp.blocks)
    };
    let dense = |x: &[f64], w: ParamId, b: ParamId| -> Vec<f64> {
        let w = s.get(w);
        let (din, dout) = w.as_matrix_dims().unwrap();
        (0..dout)
            .map(|j| (0..din).map(|i| x[i] * w.data()[i * dout + j]).sum::<f64>() + s.get(b).data()[j])
            .collect()
    };
    let slope = s.get(cls.slope).data()[0];
    refined
        .iter()
        .map(|k| {
            let edge: Vec<f64> = g_q.iter().chain(k).copied().collect();
            let hidden: Vec<f64> = dense(&edge, cls.w1, cls.b1)
                .into_iter()
                .map(|v| if v > 0.0 { v } else { slope * v })
                .collect();
            let logits = dense(&hidden, cls.w2, cls.b2);
            1.0 / (1.0 + (logits[1] - logits[0]).exp())
        })
        .collect()
}

fn tiny(variant: Variant, dim: usize, heads: usize, depth: usize, seed: u64) -> ModelParameters {
    ModelParameters::init(variant, ModelConfig::new(dim, heads, 4, depth), seed).unwrap()
}

fn with_query(variant: Variant, dim: usize, depth: usize, seed: u64) -> ModelParameters {
    let config = ModelConfig {
        hidden: 12,
        query_in_predictor: true,
        ..ModelConfig::new(dim, 2, 4, depth)
    };
    ModelParameters::init(variant, config, seed).unwrap()
}

fn enhanced(rows: &[Vec<f32>]) -> Vec<EnhancedFeature> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| EnhancedFeature {
            values: r.clone(),
            node: Some(i),
        })
        .collect()
}

#[test]
fn variant_codes_and_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(Variant::from_code(v.code()).unwrap(), v);
        assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
    }
    assert!(Variant::from_code(9).is_err());
    assert!(matches!("bogus".parse::<Variant>(), Err(LinkError::Usage(_))));
}

#[test]
fn relation_encode_matches_naive_loops() {
    let mut rng = rng_stream(11, RngStream::Data);
    let model = tiny(Variant::Full, 8, 2, 2, 3);
    let wide = model.cast::<f64>();
    let f_q = random_rows(&mut rng, 1, 8).remove(0);
    let ctx = random_rows(&mut rng, 5, 8);
    let got = relation_encode(&model, &f_q, &refs(&ctx), DropoutSpec::eval()).unwrap();
    let want = naive_encode(&wide, &widen(&[f_q])[0], &widen(&ctx));
    assert_eq!(got.values.len(), 8);
    for (a, b) in got.values.iter().zip(&want) {
        assert!((*a as f64 - b).abs() <= 1e-5, "{a} vs {b}");
    }
}

#[test]
fn linkage_forward_matches_naive_loops() {
    let mut rng = rng_stream(12, RngStream::Data);
    let model = ModelParameters::init(Variant::Full, ModelConfig::new(4, 1, 4, 1), 4).unwrap();
    let wide = model.cast::<f64>();
    let g_q = random_rows(&mut rng, 1, 4);
    let cands = random_rows(&mut rng, 3, 4);
    let got = linkage_forward(&model, &enhanced(&g_q)[0], &enhanced(&cands), DropoutSpec::eval()).unwrap();
    let want = naive_link(&wide, &widen(&g_q)[0], &widen(&cands));
    assert_eq!(got.len(), 3);
    for (a, b) in got.iter().zip(&want) {
        assert!((*a as f64 - b).abs() <= 1e-5, "{a} vs {b}");
    }
}

#[test]
fn query_in_predictor_matches_naive_loops() {
    let mut rng = rng_stream(14, RngStream::Data);
    let model = with_query(Variant::Full, 4, 2, 8);
    let wide = model.cast::<f64>();
    let g_q = random_rows(&mut rng, 1, 4);
    let cands = random_rows(&mut rng, 4, 4);
    let got = linkage_forward(&model, &enhanced(&g_q)[0], &enhanced(&cands), DropoutSpec::eval()).unwrap();
    let want = naive_link(&wide, &widen(&g_q)[0], &widen(&cands));
    for (a, b) in got.iter().zip(&want) {
        assert!((*a as f64 - b).abs() <= 1e-5, "{a} vs {b}");
    }
}

#[test]
fn zero_output_projection_reduces_to_normed_feature() {
    let mut model = tiny(Variant::Full, 6, 2, 1, 5);
    let w_o = model.encoder.as_ref().unwrap().cross.as_ref().unwrap().w_o;
    model.store.get_mut(w_o).data_mut().fill(0.0);
    let f_q = vec![0.3f32, -1.0, 2.0, 0.5, 0.0, 1.2];
    let ctx = vec![vec![1.0f32, 0.0, 0.0, 0.0, 0.0, 0.0]];
    let got = relation_encode(&model, &f_q, &refs(&ctx), DropoutSpec::eval()).unwrap();
    let mean = f_q.iter().map(|&v| v as f64).sum::<f64>() / 6.0;
    let var = f_q.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 6.0;
    for (g, &f) in got.values.iter().zip(&f_q) {
        let want = (f as f64 - mean) / (var + 1e-5).sqrt();
        assert!((*g as f64 - want).abs() < 1e-5);
    }
}

#[test]
fn zero_classifier_output_gives_even_odds() {
    let mut model = tiny(Variant::Full, 8, 2, 2, 6);
    model.zero_classifier_output();
    let mut rng = rng_stream(1, RngStream::Data);
    let p = linkage_forward(
        &model,
        &enhanced(&random_rows(&mut rng, 1, 8))[0],
        &enhanced(&random_rows(&mut rng, 7, 8)),
        DropoutSpec::eval(),
    )
    .unwrap();
    assert!(p.iter().all(|&v| v == 0.5));
}

#[test]
fn edge_embedding_starts_with_query_feature() {
    let model = tiny(Variant::Full, 4, 1, 1, 7);
    let mut rng = rng_stream(2, RngStream::Data);
    let q = enhanced(&random_rows(&mut rng, 1, 4)).remove(0);
    let (_, edges) =
        linkage_with_edges(&model, &q, &enhanced(&random_rows(&mut rng, 3, 4)), DropoutSpec::eval()).unwrap();
    assert_eq!(edges.len(), 3);
    for e in edges {
        assert_eq!(e.values.len(), 8);
        assert_eq!(&e.values[..4], q.values.as_slice());
    }
}

#[test]
fn empty_inputs_are_usage_errors() {
    let model = tiny(Variant::Full, 4, 1, 1, 7);
    let f = vec![0.5f32; 4];
    assert!(matches!(
        relation_encode(&model, &f, &[], DropoutSpec::eval()),
        Err(LinkError::Usage(_))
    ));
    let q = enhanced(&[f.clone()]).remove(0);
    assert!(matches!(
        linkage_forward(&model, &q, &[], DropoutSpec::eval()),
        Err(LinkError::Usage(_))
    ));
    let short = vec![vec![1.0f32; 3]];
    assert!(matches!(
        relation_encode(&model, &f, &refs(&short), DropoutSpec::eval()),
        Err(LinkError::Config(_))
    ));
}

#[test]
fn distance_head_closed_forms() {
    assert_eq!(distance_head(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (1.0, 0.0));
    assert_eq!(distance_head(&[1.0, 0.0], &[-3.0, 0.0]).unwrap(), (0.0, 1.0));
    let (p, e) = distance_head(&[1.0, 0.0], &[0.0, 2.0]).unwrap();
    assert!((p - 0.5).abs() < 1e-12 && (e - 0.5).abs() < 1e-12);
    assert!(matches!(
        distance_head(&[0.0, 0.0], &[1.0, 0.0]),
        Err(LinkError::Numeric(_))
    ));
}

#[test]
fn full_model_gradient_check() {
    let start = std::time::Instant::now();
    let model = ModelParameters::<f64>::init(Variant::Full, ModelConfig::new(8, 2, 4, 1), 21).unwrap();
    let mut rng = rng_stream(22, RngStream::Data);
    // query 0 with candidates 1..=3; every node carries two context rows
    let rows = random_rows(&mut rng, 6, 8);
    let store = FeatureStore::from_rows(&rows, None).unwrap();
    let graph = crate::graph::build_knn(&store, 3, 2).unwrap();
    let batch = QueryBatch::new(&graph, &[0]).unwrap();
    let labels = [1.0, 0.0, 1.0];
    let report = grad_check_params(
        &model.store,
        |fw| {
            let p = score_batch(fw, &model, &store, &graph, &batch)?;
            fw.tape.bce(p, &labels)
        },
        1e-6,
    )
    .unwrap();
    let worst = report.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    assert!(worst <= 1e-3, "worst relative error {worst}: {report:?}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

fn toy_graph(n: usize, d: usize, seed: u64) -> (FeatureStore, NeighborGraph) {
    let mut rng = rng_stream(seed, RngStream::Data);
    let store = FeatureStore::from_rows(&random_rows(&mut rng, n, d), None).unwrap();
    let graph = crate::graph::build_knn(&store, 5, 3).unwrap();
    (store, graph)
}

#[test]
fn predict_query_is_deterministic_and_sized() {
    let (store, graph) = toy_graph(30, 8, 3);
    for variant in Variant::ALL {
        let model = tiny(variant, 8, 2, 1, 9);
        let a = predict_query(&model, &store, &graph, 4).unwrap();
        let b = predict_query(&model, &store, &graph, 4).unwrap();
        assert_eq!(a.len(), 5, "{variant}");
        assert_eq!(a, b);
        assert!(a.iter().all(|r| (0.0..=1.0).contains(&r.prob) && r.query == 4));
    }
}

#[test]
fn predict_all_agrees_with_single_queries() {
    let (store, graph) = toy_graph(150, 8, 4);
    for variant in Variant::ALL {
        let model = tiny(variant, 8, 2, 2, 10);
        let all = predict_all(&model, &store, &graph).unwrap();
        assert_eq!(all.len(), 150 * 5);
        for q in [0, 63, 64, 149] {
            let one = predict_query(&model, &store, &graph, q).unwrap();
            assert_eq!(&all[q * 5..q * 5 + 5], one.as_slice(), "{variant} query {q}");
        }
    }
}

#[test]
fn predict_all_independent_of_worker_count() {
    let (store, graph) = toy_graph(200, 8, 5);
    let model = tiny(Variant::Full, 8, 2, 1, 11);
    let run = |workers| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .unwrap()
            .install(|| predict_all(&model, &store, &graph).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn only_re_scores_match_distance_head() {
    let (store, graph) = toy_graph(40, 8, 6);
    let model = tiny(Variant::OnlyRe, 8, 2, 1, 12);
    let g = enhance_all(&model, &store, &graph).unwrap();
    for row in predict_query(&model, &store, &graph, 7).unwrap() {
        let (p, _) = distance_head(&g[7 * 8..8 * 8], &g[row.candidate * 8..(row.candidate + 1) * 8]).unwrap();
        assert!((row.prob as f64 - p).abs() < 1e-5);
    }
}

#[test]
fn checkpoint_layout_recovers_config() {
    let model = ModelParameters::<f32>::init(Variant::Full, ModelConfig::new(8, 2, 4, 2), 1).unwrap();
    let again = ModelParameters::from_store(Variant::Full, model.store.clone(), 8).unwrap();
    assert_eq!(again, model);
    let lp = ModelParameters::<f32>::init(Variant::OnlyLp, ModelConfig::new(8, 2, 4, 2), 1).unwrap();
    assert!(lp.encoder.is_none());
    assert!(ModelParameters::from_store(Variant::Full, lp.store.clone(), 8).is_err());
    let wide = with_query(Variant::OnlyLp, 8, 1, 2);
    let again = ModelParameters::from_store(Variant::OnlyLp, wide.store.clone(), 8).unwrap();
    assert_eq!(again, wide);
}

#[test]
fn query_in_predictor_batches_agree_with_single_queries() {
    let (store, graph) = toy_graph(100, 8, 6);
    for variant in [Variant::OnlyLp, Variant::Full] {
        let model = with_query(variant, 8, 1, 12);
        let all = predict_all(&model, &store, &graph).unwrap();
        for q in [0, 64, 99] {
            let one = predict_query(&model, &store, &graph, q).unwrap();
            assert_eq!(&all[q * 5..q * 5 + 5], one.as_slice(), "{variant} query {q}");
        }
    }
}

#[test]
fn training_dropout_changes_output() {
    let model = tiny(Variant::Full, 8, 2, 2, 13);
    let mut rng = rng_stream(3, RngStream::Data);
    let f = random_rows(&mut rng, 1, 8).remove(0);
    let ctx = random_rows(&mut rng, 4, 8);
    let eval = relation_encode(&model, &f, &refs(&ctx), DropoutSpec::eval()).unwrap();
    let train = relation_encode(&model, &f, &refs(&ctx), DropoutSpec::new(0.5, 1, true).unwrap()).unwrap();
    assert_ne!(eval, train);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn context_order_does_not_matter(seed in 0u64..1000, m in 1usize..6) {
        let model = tiny(Variant::Full, 8, 2, 2, seed);
        let mut rng = rng_stream(seed, RngStream::Data);
        let f = random_rows(&mut rng, 1, 8).remove(0);
        let ctx = random_rows(&mut rng, m, 8);
        let mut shuffled = ctx.clone();
        shuffled.shuffle(&mut rng);
        let a = relation_encode(&model, &f, &refs(&ctx), DropoutSpec::eval()).unwrap();
        let b = relation_encode(&model, &f, &refs(&shuffled), DropoutSpec::eval()).unwrap();
        prop_assert_eq!(a.values.len(), 8);
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn candidate_order_permutes_probabilities(seed in 0u64..1000, n in 1usize..8, query_in_set: bool) {
        let model = if query_in_set { with_query(Variant::Full, 8, 2, seed) } else { tiny(Variant::Full, 8, 2, 2, seed) };
        let mut rng = rng_stream(seed, RngStream::Data);
        let q = enhanced(&random_rows(&mut rng, 1, 8)).remove(0);
        let cands = enhanced(&random_rows(&mut rng, n, 8));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<_> = perm.iter().map(|&i| cands[i].clone()).collect();
        let a = linkage_forward(&model, &q, &cands, DropoutSpec::eval()).unwrap();
        let b = linkage_forward(&model, &q, &permuted, DropoutSpec::eval()).unwrap();
        for (slot, &i) in perm.iter().enumerate() {
            prop_assert!((b[slot] - a[i]).abs() <= 1e-6);
            prop_assert!((0.0..=1.0).contains(&a[i]));
        }
    }

    #[test]
    fn class_probabilities_sum_to_one(seed in 0u64..1000) {
        let model = tiny(Variant::Full, 8, 2, 1, seed);
        let mut rng = rng_stream(seed, RngStream::Data);
        let (lp, cls) = model.predictor().unwrap();
        let mut fw = Forward::eval(&model.store);
        let q = fw.tape.constant(1, 8, random_rows(&mut rng, 1, 8).concat()).unwrap();
        let c = fw.tape.constant(5, 8, random_rows(&mut rng, 5, 8).concat()).unwrap();
        let out = link_batch(&mut fw, lp, cls, q, c, false).unwrap();
        for pair in fw.tape.value(out.classes).chunks(2) {
            prop_assert!((pair[0] + pair[1] - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn distance_head_is_symmetric(a in prop::collection::vec(-5.0f32..5.0, 6), b in prop::collection::vec(-5.0f32..5.0, 6)) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let (p, e) = distance_head(&a, &b).unwrap();
        prop_assert_eq!((p, e), distance_head(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&e));
    }
}
