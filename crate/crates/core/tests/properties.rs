use proptest::prelude::*;

use hybridrank::aggregator::{
    aggregate, attention_layer_forward, full_attention_forward, mean_pool, AggregatorConfig, AggregatorParams,
};
use hybridrank::evaluation::{average_precision, evaluate, precision_at_k, recall_at_k};
use hybridrank::linalg::{sigmoid, Matrix};
use hybridrank::similarity::{hybrid_scores, rank, QueryMode, ScoreKind, ScoreVector};
use hybridrank::store::{assemble_database, EmbeddingSet, LabelNames, QueryBundle};
use hybridrank::training::contrastive_loss;

fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d)
        .prop_filter("non-degenerate", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-4)
        .prop_map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
}

fn tokens(d: usize, k: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(unit_vec(d), k)
}

fn params(d: usize, layers: usize) -> impl Strategy<Value = AggregatorParams> {
    (prop::collection::vec(-0.8f64..0.8, d * d * layers), -5.0f64..5.0).prop_map(move |(noise, logit)| {
        let projections = noise
            .chunks(d * d)
            .map(|c| {
                let mut m = Matrix::identity(d);
                for (x, n) in m.data_mut().iter_mut().zip(c) {
                    *x += n;
                }
                m
            })
            .collect();
        AggregatorParams::new(d, projections, logit).unwrap()
    })
}

fn agg_case() -> impl Strategy<Value = (AggregatorParams, Vec<Vec<f64>>, bool)> {
    (2usize..=8, 1usize..=3).prop_flat_map(|(d, layers)| (params(d, layers), tokens(d, 1..=6), any::<bool>()))
}

fn scores(v: Vec<f64>) -> ScoreVector {
    ScoreVector {
        values: v,
        kind: ScoreKind::Hybrid,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn aggregate_ignores_token_order((p, toks, repeat) in agg_case(), rot in 0usize..6) {
        let cfg = AggregatorConfig { repeat_inputs: repeat, ..AggregatorConfig::default() };
        let a = aggregate(&p, &toks, &cfg).unwrap();
        let mut moved = toks.clone();
        let r = rot % moved.len();
        moved.rotate_left(r);
        moved.reverse();
        let b = aggregate(&p, &moved, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn aggregate_stays_inside_token_box((p, toks, repeat) in agg_case()) {
        // a necessary condition of convex-hull membership, per coordinate
        let cfg = AggregatorConfig { repeat_inputs: repeat, ..AggregatorConfig::default() };
        let out = aggregate(&p, &toks, &cfg).unwrap();
        for (c, x) in out.iter().enumerate() {
            let lo = toks.iter().map(|t| t[c]).fold(f64::INFINITY, f64::min);
            let hi = toks.iter().map(|t| t[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*x >= lo - 1e-12 && *x <= hi + 1e-12);
        }
    }

    #[test]
    fn single_token_passes_through((p, toks, repeat) in agg_case()) {
        let cfg = AggregatorConfig { repeat_inputs: repeat, ..AggregatorConfig::default() };
        let out = aggregate(&p, &toks[..1], &cfg).unwrap();
        prop_assert_eq!(out, toks[0].clone());
    }

    #[test]
    fn cls_row_matches_full_attention((p, toks, _r) in agg_case()) {
        let cls = mean_pool(&toks).unwrap();
        let proj = &p.projections()[0];
        let (row, _) = attention_layer_forward(proj, &toks, &cls, 1.0).unwrap();
        let mut all = toks.clone();
        all.push(cls);
        let (full, _) = full_attention_forward(proj, &all, 1.0).unwrap();
        prop_assert_eq!(&row, full.last().unwrap());
    }

    #[test]
    fn lambda_is_strictly_inside_unit_interval(logit in -30.0f64..30.0) {
        let l = sigmoid(logit);
        prop_assert!(l > 0.0 && l < 1.0);
    }

    #[test]
    fn ranking_is_a_sorted_permutation(v in prop::collection::vec(-1.0f64..1.0, 1..80), shift in -5.0f64..5.0, top in 0usize..90) {
        let r = rank(&scores(v.clone()), None).unwrap();
        let mut seen = r.order.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..v.len()).collect::<Vec<_>>());
        prop_assert!(r.order.windows(2).all(|w| v[w[0]] >= v[w[1]]));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        // a shift can merge or split near-ties, so compare only when order is strict
        let strict = r.order.windows(2).all(|w| v[w[0]] - v[w[1]] > 1e-9);
        if strict {
            prop_assert_eq!(&rank(&scores(shifted), None).unwrap().order, &r.order);
        }
        let prefix = rank(&scores(v), Some(top)).unwrap();
        prop_assert_eq!(&prefix.order[..], &r.order[..top.min(r.order.len())]);
    }

    #[test]
    fn hybrid_is_monotone(ci in -1.0f64..1.0, cj in -1.0f64..1.0, ii in -1.0f64..1.0, ij in -1.0f64..1.0, lambda in 0.001f64..=1.0) {
        prop_assume!(ii > ij && ci >= cj);
        let h = hybrid_scores(lambda, &scores(vec![ci, cj]), &scores(vec![ii, ij])).unwrap();
        prop_assert!(h.values[0] > h.values[1]);
    }

    #[test]
    fn loss_is_nonnegative(pos in -1.0f64..1.0, neg in -1.0f64..1.0, tau in 0.01f64..1.0) {
        prop_assert!(contrastive_loss(pos, neg, tau).loss >= 0.0);
        prop_assert_eq!(contrastive_loss(pos, pos, tau).loss, std::f64::consts::LN_2);
    }

    #[test]
    fn metrics_are_bounded(rel in prop::collection::vec(any::<bool>(), 1..60), v in prop::collection::vec(-1.0f64..1.0, 60), k in 1usize..70) {
        prop_assume!(rel.iter().any(|&r| r));
        let n = rel.len();
        let r = rank(&scores(v[..n].to_vec()), None).unwrap();
        let ap = average_precision(&r, &rel).unwrap();
        let p = precision_at_k(&r, &rel, k).unwrap();
        let rc = recall_at_k(&r, &rel, k).unwrap();
        for x in [ap, p, rc] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        let first_irrelevant = r.order.iter().position(|&i| !rel[i]).unwrap_or(n);
        let relevant_on_top = r.order[first_irrelevant..].iter().all(|&i| !rel[i]);
        prop_assert_eq!(ap == 1.0, relevant_on_top);
    }

    #[test]
    fn ap_ignores_score_scale(rel in prop::collection::vec(any::<bool>(), 2..40), v in prop::collection::vec(-1.0f64..1.0, 40), scale in 0.01f64..100.0) {
        prop_assume!(rel.iter().any(|&r| r));
        let n = rel.len();
        let a = average_precision(&rank(&scores(v[..n].to_vec()), None).unwrap(), &rel).unwrap();
        let scaled: Vec<f64> = v[..n].iter().map(|x| x * scale).collect();
        let b = average_precision(&rank(&scores(scaled), None).unwrap(), &rel).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn map_is_mean_of_query_aps(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut unit = |d: usize| -> Vec<f32> {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / n) as f32).collect()
        };
        let n = 30;
        let vlm = EmbeddingSet::from_rows(4, (0..n).map(|i| (i as u64, (i % 3) as u32, unit(4)))).unwrap();
        let vm = EmbeddingSet::from_rows(5, (0..n).map(|i| (i as u64, (i % 3) as u32, unit(5)))).unwrap();
        let names: LabelNames = (0..3).map(|l| (l, format!("c{l}"))).collect();
        let db = assemble_database(vlm, vm, names).unwrap();
        let bundles: Vec<QueryBundle> = (0..5)
            .map(|q| QueryBundle {
                query_id: q,
                text_embedding: unit(4),
                image_queries: vec![unit(5), unit(5)],
                generator_tags: vec![0, 1],
                label: Some((q % 3) as u32),
            })
            .collect();
        let report = evaluate(&db, &bundles, None, &AggregatorConfig::default(), &[QueryMode::TextOnly, QueryMode::HybridMean], &[5]).unwrap();
        for m in &report.modes {
            let mean = m.queries.iter().map(|q| q.ap).sum::<f64>() / m.queries.len() as f64;
            prop_assert!((m.map - mean).abs() <= 1e-15);
        }
    }
}
