mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use unrec::metrics::{evaluate, item_metrics_multi, user_metrics_multi, EvalReport, EvalSet, View};
use unrec::{DatasetSplit, Error, Partition, UserItems};

const KS: [usize; 4] = [1, 2, 3, 5];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_stay_in_range_and_recall_grows_with_k(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (nu, ni) = (r.gen_range(1..=9), r.gen_range(1..=9));
        let state = random_state(&mut r, nu, ni);
        let eval = random_edges(&mut r, nu, ni, 0.3);
        let mask = UserItems::from_edges(nu, &random_edges(&mut r, nu, ni, 0.2));
        for (view, got) in [
            (View::UserCentric, user_metrics_multi(&state, &eval, &KS, &mask)),
            (View::ItemCentric, item_metrics_multi(&state, &eval, &KS, &mask)),
        ] {
            let Ok(per_k) = got else { continue };
            let mut prev = 0.0;
            for (&k, &m) in KS.iter().zip(&per_k) {
                for x in [m.recall, m.ndcg, m.map] {
                    prop_assert!((0.0..=1.0 + 1e-12).contains(&x), "{view:?} K={k}: {m:?}");
                }
                prop_assert!(m.precision >= 0.0);
                if view == View::UserCentric {
                    prop_assert!(m.precision <= 1.0);
                }
                prop_assert!(m.recall >= prev - 1e-12, "{view:?}: recall fell at K={k}");
                prev = m.recall;
            }
        }
    }

    #[test]
    fn metrics_depend_only_on_score_order(seed in any::<u64>(), shift in -6i32..6) {
        let mut r = rng(seed);
        let (nu, ni) = (r.gen_range(1..=9), r.gen_range(1..=9));
        let state = random_state(&mut r, nu, ni);
        let eval = random_edges(&mut r, nu, ni, 0.3);
        let mask = UserItems::from_edges(nu, &[]);
        // A power-of-two scale is exact, so order and ties are preserved.
        let mut scaled = state.clone();
        scaled.user_final.mapv_inplace(|x| x * 2f64.powi(shift));
        let a = user_metrics_multi(&state, &eval, &KS, &mask).ok();
        let b = user_metrics_multi(&scaled, &eval, &KS, &mask).ok();
        prop_assert_eq!(a, b);
        let a = item_metrics_multi(&state, &eval, &KS, &mask).ok();
        let b = item_metrics_multi(&scaled, &eval, &KS, &mask).ok();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn report_json_round_trips_to_six_decimals(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (nu, ni) = (r.gen_range(2..=9), r.gen_range(2..=9));
        let state = random_state(&mut r, nu, ni);
        let split = DatasetSplit {
            train: random_edges(&mut r, nu, ni, 0.3),
            valid: (0..nu).map(|u| (u, u % ni)).collect(),
            test: (0..nu).map(|u| (u, (u + 1) % ni)).collect(),
        };
        for view in [View::UserCentric, View::ItemCentric] {
            let Ok(report) = evaluate(&state, &split, None, &KS, view) else { continue };
            let back = EvalReport::from_json(&report.to_json()).unwrap();
            prop_assert_eq!(back.view, report.view);
            prop_assert_eq!(back.to_json(), report.to_json());
            for (set, per_k) in &report.sets {
                for (k, m) in per_k {
                    let n = back.get(*set, *k).unwrap();
                    prop_assert!((n.recall - m.recall).abs() <= 5e-7 && (n.ndcg - m.ndcg).abs() <= 5e-7);
                }
            }
        }
    }
}

#[test]
fn perfect_ranking_scores_one() {
    let mut r = rng(5);
    let state = random_state(&mut r, 4, 6);
    // Each user's relevant item is its own top-scored item.
    let eval: Vec<_> = (0..4).map(|u| (u, state.recommend_topk(u, 1, &[])[0])).collect();
    let m = user_metrics_multi(&state, &eval, &[1], &UserItems::from_edges(4, &[])).unwrap()[0];
    assert_eq!((m.recall, m.precision, m.ndcg, m.map), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn forget_section_requires_forget_edges() {
    let mut r = rng(6);
    let state = random_state(&mut r, 3, 4);
    let split = DatasetSplit { train: vec![(0, 0), (1, 1)], valid: vec![(0, 2)], test: vec![(1, 3)] };
    let empty = Partition { retain: split.train.clone(), forget: vec![] };
    let rep = evaluate(&state, &split, Some(&empty), &[2], View::UserCentric).unwrap();
    assert!(!rep.sets.contains_key(&EvalSet::Forget));
    let part = Partition { retain: vec![(1, 1)], forget: vec![(0, 0)] };
    let rep = evaluate(&state, &split, Some(&part), &[2], View::UserCentric).unwrap();
    assert!(rep.sets.contains_key(&EvalSet::Forget));
    assert!(matches!(evaluate(&state, &split, None, &[], View::UserCentric), Err(Error::Config(_))));
}

