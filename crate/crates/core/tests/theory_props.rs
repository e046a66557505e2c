use proptest::prelude::*;
use taskplan_core::theory::oracle::{brute_force_shortest, brute_force_tsp, dijkstra, exhaustive_lis};
use taskplan_core::theory::{
    dp_run, fit_tabular, frequency_logits, lis_length, make_bellman_ford, parse_edge_list, serialize_edge_list,
    tsp_solve, Aggregator, BinaryFn, DpInstance, DpSignature, PathDataset, RowStatus, Transition, UnaryFn,
    WeightedDigraph, UNREACHABLE,
};

fn arb_digraph(max_n: usize) -> impl Strategy<Value = WeightedDigraph> {
    (1..=max_n).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> =
            (0..n).flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b))).collect();
        let k = pairs.len();
        proptest::collection::vec(proptest::option::weighted(0.4, 0u32..2000), k).prop_map(move |ws| {
            let edges = pairs
                .iter()
                .zip(ws)
                .filter_map(|(&(u, v), w)| w.map(|w| (u, v, w as f64 / 100.0)))
                .collect();
            WeightedDigraph::new(n, edges).unwrap()
        })
    })
}

fn as_dp(d: &[Option<f64>]) -> Vec<f64> {
    d.iter().map(|x| x.unwrap_or(UNREACHABLE)).collect()
}

fn arb_instance() -> impl Strategy<Value = DpInstance> {
    (1usize..6).prop_flat_map(|n| {
        let ts = proptest::collection::vec(
            proptest::collection::vec((0..n, -50_000i64..50_000), 0..4),
            n,
        );
        let init = proptest::collection::vec(-50_000i64..50_000, n);
        let agg = prop_oneof![Just(Aggregator::Min), Just(Aggregator::Max), Just(Aggregator::Sum), Just(Aggregator::Mean)];
        let g = prop_oneof![Just(BinaryFn::Add), Just(BinaryFn::MinPair), Just(BinaryFn::MaxPair)];
        (ts, init, agg, g).prop_map(|(ts, init, agg, g)| {
            DpInstance::new(
                ts.into_iter()
                    .map(|row| row.into_iter().map(|(from, c)| Transition { from, cost: c as f64 / 1000.0 }).collect())
                    .collect(),
                init.into_iter().map(|x| x as f64 / 1000.0).collect(),
                agg,
                g,
                UnaryFn::Identity,
            )
            .unwrap()
        })
    })
}

fn arb_paths() -> impl Strategy<Value = Vec<Vec<usize>>> {
    let path = (2usize..=6).prop_flat_map(|len| Just((0..6).collect::<Vec<usize>>()).prop_shuffle().prop_map(move |p| p[..len].to_vec()));
    proptest::collection::vec(path, 1..=50)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bellman_ford_equals_brute_force(g in arb_digraph(8), s in 0usize..8) {
        let s = s % g.n;
        let inst = make_bellman_ford(&g, s).unwrap();
        let dp = dp_run(&inst, g.n.saturating_sub(1)).unwrap();
        prop_assert_eq!(&dp, &as_dp(&brute_force_shortest(&g, s)));
        prop_assert_eq!(&dp, &as_dp(&dijkstra(&g, s)));
    }

    #[test]
    fn lis_equals_exhaustive(a in proptest::collection::vec(0u8..6, 0..=10)) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        prop_assert_eq!(lis_length(&a).unwrap(), exhaustive_lis(&a));
    }

    #[test]
    fn held_karp_equals_permutations(n in 1usize..=7, d in proptest::collection::vec(1u32..100, 49)) {
        let dist: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { d[i * 7 + j] as f64 }).collect())
            .collect();
        prop_assert_eq!(tsp_solve(&dist).unwrap(), brute_force_tsp(&dist));
    }

    #[test]
    fn serialization_round_trips(inst in arb_instance()) {
        let toks = serialize_edge_list(&inst);
        prop_assert_eq!(toks.len(), 3 * inst.edge_count() + 2 * inst.n());
        let back = parse_edge_list(&toks, DpSignature::of(&inst)).unwrap();
        prop_assert_eq!(&back, &inst);
        let text = toks.join(" ");
        let split: Vec<&str> = text.split_whitespace().collect();
        prop_assert_eq!(parse_edge_list(&split, DpSignature::of(&inst)).unwrap(), inst);
    }

    #[test]
    fn fit_converges_to_frequencies(paths in arb_paths()) {
        let d = PathDataset::from_paths(&paths).unwrap();
        let closed = frequency_logits(&d);
        let fitted = fit_tabular(&d, 40_000, 2.0).unwrap();
        let gap = fitted.constrained_linf(&closed);
        prop_assert!(gap < 1e-3, "gap {}", gap);
        for (a, b) in fitted.rows.iter().zip(&closed.rows) {
            prop_assert_eq!(a.status, b.status);
            prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            if a.status == RowStatus::Unconstrained {
                prop_assert!(a.logits.as_ref().unwrap().iter().all(|&z| z == 0.0));
            }
        }
    }
}
