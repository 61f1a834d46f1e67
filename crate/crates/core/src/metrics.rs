//! User-centric and item-centric top-K metrics and unlearning property gaps.
//!
//! Relevance is binary. User-centric metrics follow the usual definitions with
//! the ideal DCG taken over `min(|relevant|, K)` slots and AP normalized by
//! `min(|relevant|, K)`.
//!
//! Item-centric metrics look at each item `i` from the side of the users it is
//! relevant to (`Users_i`):
//!
//! * recall: fraction of `Users_i` whose top-K contains `i`;
//! * precision: that hit count divided by `K`;
//! * NDCG: `sum 1/log2(rank+1)` over the hits, divided by the ideal value in
//!   which every relevant user ranks `i` first (`|Users_i|`);
//! * MAP: `sum 1/rank` over the hits divided by `|Users_i|`, i.e. the AP of
//!   each relevant user's list with `i` as its only relevant entry, averaged.
//!
//! Entities with no relevant edges in a set are excluded from that set's
//! macro-average.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DatasetSplit, Edge, Partition, UserItems};
use crate::model::PropagatedState;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues {
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
    pub map: f64,
}

impl MetricValues {
    fn add(&mut self, o: &MetricValues) {
        self.recall += o.recall;
        self.precision += o.precision;
        self.ndcg += o.ndcg;
        self.map += o.map;
    }

    fn div(mut self, n: f64) -> Self {
        self.recall /= n;
        self.precision /= n;
        self.ndcg /= n;
        self.map /= n;
        self
    }

    fn abs_diff(&self, o: &MetricValues) -> MetricValues {
        MetricValues {
            recall: (self.recall - o.recall).abs(),
            precision: (self.precision - o.precision).abs(),
            ndcg: (self.ndcg - o.ndcg).abs(),
            map: (self.map - o.map).abs(),
        }
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "recall" => Some(self.recall),
            "precision" => Some(self.precision),
            "ndcg" => Some(self.ndcg),
            "map" => Some(self.map),
            _ => None,
        }
    }

    pub const NAMES: [&'static str; 4] = ["recall", "precision", "ndcg", "map"];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    UserCentric,
    ItemCentric,
}

impl View {
    pub fn as_str(&self) -> &'static str {
        match self {
            View::UserCentric => "user_centric",
            View::ItemCentric => "item_centric",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "user_centric" | "user" => Ok(View::UserCentric),
            "item_centric" | "item" => Ok(View::ItemCentric),
            other => Err(Error::Config(format!("unknown view `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EvalSet {
    Valid,
    Test,
    Forget,
}

impl EvalSet {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalSet::Valid => "valid",
            EvalSet::Test => "test",
            EvalSet::Forget => "forget",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(EvalSet::Valid),
            "test" => Ok(EvalSet::Test),
            "forget" => Ok(EvalSet::Forget),
            other => Err(Error::Format(format!("unknown evaluation set `{other}`"))),
        }
    }
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// Top-`k` lists for `users`, computed in parallel in index order.
fn top_lists(state: &PropagatedState, users: &[usize], k: usize, mask: &UserItems) -> Vec<Vec<usize>> {
    users
        .par_iter()
        .map(|&u| state.recommend_topk(u, k, mask.items(u)))
        .collect()
}

fn relevant_by_user(edges: &[Edge], num_users: usize) -> Vec<(usize, Vec<usize>)> {
    UserItems::from_edges(num_users, edges)
        .lists
        .into_iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .collect()
}

/// Metrics of one ranked list against a sorted relevant set.
fn user_list_metrics(list: &[usize], relevant: &[usize], k: usize) -> MetricValues {
    let mut hits = 0usize;
    let mut dcg = 0.0;
    let mut ap = 0.0;
    for (pos, item) in list.iter().take(k).enumerate() {
        if relevant.binary_search(item).is_ok() {
            hits += 1;
            dcg += discount(pos + 1);
            ap += hits as f64 / (pos + 1) as f64;
        }
    }
    let ideal = relevant.len().min(k);
    let idcg: f64 = (1..=ideal).map(discount).sum();
    MetricValues {
        recall: hits as f64 / relevant.len() as f64,
        precision: hits as f64 / k as f64,
        ndcg: dcg / idcg,
        map: ap / ideal as f64,
    }
}

/// User-centric metrics for several cut-offs at once.
pub fn user_metrics_multi(
    state: &PropagatedState,
    eval_edges: &[Edge],
    ks: &[usize],
    mask: &UserItems,
) -> Result<Vec<MetricValues>> {
    check_ks(ks)?;
    let rel = relevant_by_user(eval_edges, state.num_users());
    if rel.is_empty() {
        return Err(Error::Domain("no user has relevant items in the evaluation set".into()));
    }
    let kmax = *ks.iter().max().unwrap();
    let users: Vec<usize> = rel.iter().map(|r| r.0).collect();
    let lists = top_lists(state, &users, kmax, mask);
    Ok(ks
        .iter()
        .map(|&k| {
            let mut acc = MetricValues::default();
            for ((_, r), l) in rel.iter().zip(&lists) {
                acc.add(&user_list_metrics(l, r, k));
            }
            acc.div(rel.len() as f64)
        })
        .collect())
}

pub fn user_metrics(
    state: &PropagatedState,
    eval_edges: &[Edge],
    k: usize,
    mask: &UserItems,
) -> Result<MetricValues> {
    Ok(user_metrics_multi(state, eval_edges, &[k], mask)?[0])
}

/// Item-centric metrics for several cut-offs at once.
pub fn item_metrics_multi(
    state: &PropagatedState,
    eval_edges: &[Edge],
    ks: &[usize],
    mask: &UserItems,
) -> Result<Vec<MetricValues>> {
    check_ks(ks)?;
    let mut users_of: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(u, i) in eval_edges {
        users_of.entry(i).or_default().push(u);
    }
    for us in users_of.values_mut() {
        us.sort_unstable();
        us.dedup();
    }
    if users_of.is_empty() {
        return Err(Error::Domain("no item has relevant users in the evaluation set".into()));
    }
    let kmax = *ks.iter().max().unwrap();
    let mut users: Vec<usize> = users_of.values().flatten().copied().collect();
    users.sort_unstable();
    users.dedup();
    let lists = top_lists(state, &users, kmax, mask);
    let list_of = |u: usize| &lists[users.binary_search(&u).unwrap()];

    // 1-based rank of each (item, relevant user) pair within the kmax list.
    let ranks: Vec<Vec<Option<usize>>> = users_of
        .iter()
        .map(|(&i, us)| {
            us.iter()
                .map(|&u| list_of(u).iter().position(|&x| x == i).map(|p| p + 1))
                .collect()
        })
        .collect();

    Ok(ks
        .iter()
        .map(|&k| {
            let mut acc = MetricValues::default();
            for r in &ranks {
                let n = r.len() as f64;
                let mut hits = 0usize;
                let mut dcg = 0.0;
                let mut rr = 0.0;
                for rank in r.iter().flatten().filter(|&&x| x <= k) {
                    hits += 1;
                    dcg += discount(*rank);
                    rr += 1.0 / *rank as f64;
                }
                acc.add(&MetricValues {
                    recall: hits as f64 / n,
                    precision: hits as f64 / k as f64,
                    ndcg: dcg / n,
                    map: rr / n,
                });
            }
            acc.div(ranks.len() as f64)
        })
        .collect())
}

pub fn item_metrics(
    state: &PropagatedState,
    eval_edges: &[Edge],
    k: usize,
    mask: &UserItems,
) -> Result<MetricValues> {
    Ok(item_metrics_multi(state, eval_edges, &[k], mask)?[0])
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::Config("at least one K is required".into()));
    }
    if ks.contains(&0) {
        return Err(Error::Config("K must be at least 1".into()));
    }
    Ok(())
}

/// Metric table per evaluation set and cut-off.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub view: View,
    pub sets: BTreeMap<EvalSet, BTreeMap<usize, MetricValues>>,
}

impl EvalReport {
    pub fn get(&self, set: EvalSet, k: usize) -> Option<&MetricValues> {
        self.sets.get(&set)?.get(&k)
    }

    pub fn to_json(&self) -> String {
        let mut out = String::new();
        write!(out, "{{\"view\":\"{}\",\"sets\":", self.view.as_str()).unwrap();
        write_table(&mut out, &self.sets);
        out.push('}');
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let view = v
            .get("view")
            .and_then(|x| x.as_str())
            .ok_or_else(|| Error::Format("report lacks `view`".into()))
            .and_then(View::parse)?;
        let sets = v
            .get("sets")
            .ok_or_else(|| Error::Format("report lacks `sets`".into()))?;
        Ok(EvalReport { view, sets: read_table(sets)? })
    }
}

fn write_table(out: &mut String, sets: &BTreeMap<EvalSet, BTreeMap<usize, MetricValues>>) {
    out.push('{');
    for (n, (set, per_k)) in sets.iter().enumerate() {
        if n > 0 {
            out.push(',');
        }
        write!(out, "\"{}\":", set.as_str()).unwrap();
        write_per_k(out, per_k);
    }
    out.push('}');
}

fn write_per_k(out: &mut String, per_k: &BTreeMap<usize, MetricValues>) {
    out.push('{');
    for (n, (k, m)) in per_k.iter().enumerate() {
        if n > 0 {
            out.push(',');
        }
        write!(
            out,
            "\"{k}\":{{\"recall\":{:.6},\"precision\":{:.6},\"ndcg\":{:.6},\"map\":{:.6}}}",
            m.recall, m.precision, m.ndcg, m.map
        )
        .unwrap();
    }
    out.push('}');
}

fn read_per_k(v: &serde_json::Value) -> Result<BTreeMap<usize, MetricValues>> {
    let obj = v.as_object().ok_or_else(|| Error::Format("expected an object of cut-offs".into()))?;
    obj.iter()
        .map(|(k, m)| {
            let k: usize = k.parse().map_err(|_| Error::Format(format!("bad cut-off `{k}`")))?;
            let m: MetricValues = serde_json::from_value(m.clone())?;
            Ok((k, m))
        })
        .collect()
}

fn read_table(v: &serde_json::Value) -> Result<BTreeMap<EvalSet, BTreeMap<usize, MetricValues>>> {
    let obj = v.as_object().ok_or_else(|| Error::Format("`sets` must be an object".into()))?;
    obj.iter()
        .map(|(name, per_k)| Ok((EvalSet::parse(name)?, read_per_k(per_k)?)))
        .collect()
}

/// Runs the chosen metric family on valid, test, and (when a partition with
/// forget edges is given) forget edges. Candidates exclude the model's own
/// training positives: retain edges under a partition, train edges otherwise.
pub fn evaluate(
    state: &PropagatedState,
    split: &DatasetSplit,
    partition: Option<&Partition>,
    ks: &[usize],
    view: View,
) -> Result<EvalReport> {
    check_ks(ks)?;
    let mask_edges = partition.map_or(&split.train, |p| &p.retain);
    let mask = UserItems::from_edges(state.num_users(), mask_edges);
    let mut sets = vec![(EvalSet::Valid, &split.valid), (EvalSet::Test, &split.test)];
    if let Some(p) = partition.filter(|p| !p.forget.is_empty()) {
        sets.push((EvalSet::Forget, &p.forget));
    }
    let mut out = BTreeMap::new();
    for (set, edges) in sets {
        let values = match view {
            View::UserCentric => user_metrics_multi(state, edges, ks, &mask),
            View::ItemCentric => item_metrics_multi(state, edges, ks, &mask),
        }
        .map_err(|e| match e {
            Error::Domain(msg) => Error::Domain(format!("{} set: {msg}", set.as_str())),
            other => other,
        })?;
        out.insert(set, ks.iter().copied().zip(values).collect());
    }
    Ok(EvalReport { view, sets: out })
}

/// Absolute metric gaps between an unlearned model and its gold reference:
/// `epsilon_f` on forget, `epsilon_t` on test, `epsilon_v` on valid.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyGaps {
    pub view: View,
    pub gaps: BTreeMap<EvalSet, BTreeMap<usize, MetricValues>>,
}

impl PropertyGaps {
    pub fn epsilon_f(&self) -> Option<&BTreeMap<usize, MetricValues>> {
        self.gaps.get(&EvalSet::Forget)
    }

    pub fn epsilon_t(&self) -> Option<&BTreeMap<usize, MetricValues>> {
        self.gaps.get(&EvalSet::Test)
    }

    pub fn epsilon_v(&self) -> Option<&BTreeMap<usize, MetricValues>> {
        self.gaps.get(&EvalSet::Valid)
    }

    pub fn to_json(&self) -> String {
        let mut out = String::new();
        write!(out, "{{\"view\":\"{}\"", self.view.as_str()).unwrap();
        for (set, per_k) in &self.gaps {
            let key = match set {
                EvalSet::Forget => "epsilon_f",
                EvalSet::Test => "epsilon_t",
                EvalSet::Valid => "epsilon_v",
            };
            write!(out, ",\"{key}\":").unwrap();
            write_per_k(&mut out, per_k);
        }
        out.push('}');
        out
    }
}

pub fn property_gaps(unlearned: &EvalReport, gold: &EvalReport) -> Result<PropertyGaps> {
    if unlearned.view != gold.view {
        return Err(Error::Shape("reports use different views".into()));
    }
    if !unlearned.sets.keys().eq(gold.sets.keys()) {
        return Err(Error::Shape("reports cover different evaluation sets".into()));
    }
    let mut gaps = BTreeMap::new();
    for (set, a) in &unlearned.sets {
        let b = &gold.sets[set];
        if !a.keys().eq(b.keys()) {
            return Err(Error::Shape(format!("reports use different K on {}", set.as_str())));
        }
        gaps.insert(*set, a.iter().map(|(k, m)| (*k, m.abs_diff(&b[k]))).collect());
    }
    Ok(PropertyGaps { view: unlearned.view, gaps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn scored(user_scores: Array2<f64>) -> PropagatedState {
        // user u's score for item i is user_scores[u, i]: identity item
        // embeddings and the score rows as user embeddings.
        let n_items = user_scores.ncols();
        let item_final = Array2::from_shape_fn((n_items, n_items), |(a, b)| f64::from(u8::from(a == b)));
        PropagatedState {
            user_beh: user_scores.clone(),
            item_beh: item_final.clone(),
            user_mul: Array2::zeros(user_scores.raw_dim()),
            item_mul: Array2::zeros(item_final.raw_dim()),
            user_final: user_scores,
            item_final,
        }
    }

    fn no_mask(n: usize) -> UserItems {
        UserItems::from_edges(n, &[])
    }

    #[test]
    fn user_recall_precision_ndcg_by_hand() {
        // top-2 = [a, c] where a = 0, b = 1, c = 2
        let s = scored(array![[0.9, 0.1, 0.5]]);
        let m = user_metrics(&s, &[(0, 0), (0, 1)], 2, &no_mask(1)).unwrap();
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.precision, 0.5);
        let expected = 1.0 / (1.0 + 1.0 / 3f64.log2());
        assert!((m.ndcg - expected).abs() < 1e-12);
        assert!((m.ndcg - 0.6131).abs() < 1e-4);
        assert_eq!(m.map, 0.5);
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let s = scored(array![[0.9, 0.8, 0.1, 0.0]]);
        let m = user_metrics(&s, &[(0, 0), (0, 1)], 3, &no_mask(1)).unwrap();
        assert_eq!((m.recall, m.ndcg, m.map), (1.0, 1.0, 1.0));
    }

    #[test]
    fn item_recall_half_and_zero() {
        // item 0 relevant to users 0 and 1; only user 0 ranks it in top-1
        let s = scored(array![[0.9, 0.1], [0.1, 0.9]]);
        let m = item_metrics(&s, &[(0, 0), (1, 0)], 1, &no_mask(2)).unwrap();
        assert_eq!(m.recall, 0.5);
        let s = scored(array![[0.1, 0.9], [0.1, 0.9]]);
        let m = item_metrics(&s, &[(0, 0), (1, 0)], 1, &no_mask(2)).unwrap();
        assert_eq!(m, MetricValues::default());
    }

    #[test]
    fn no_qualifying_entity_is_an_error() {
        let s = scored(array![[0.9, 0.1]]);
        assert!(matches!(user_metrics(&s, &[], 1, &no_mask(1)), Err(Error::Domain(_))));
        assert!(matches!(item_metrics(&s, &[], 1, &no_mask(1)), Err(Error::Domain(_))));
    }

    #[test]
    fn masking_promotes_next_item() {
        let s = scored(array![[0.9, 0.5, 0.1]]);
        let mask = UserItems::from_edges(1, &[(0, 0)]);
        let m = user_metrics(&s, &[(0, 1)], 1, &mask).unwrap();
        assert_eq!(m.recall, 1.0);
    }

    fn split() -> DatasetSplit {
        DatasetSplit { train: vec![(0, 3)], valid: vec![(0, 0)], test: vec![(0, 1)] }
    }

    #[test]
    fn report_without_partition_has_no_forget_section() {
        let s = scored(array![[0.9, 0.5, 0.1, 0.0]]);
        let r = evaluate(&s, &split(), None, &[1, 2], View::UserCentric).unwrap();
        assert_eq!(r.sets.keys().copied().collect::<Vec<_>>(), vec![EvalSet::Valid, EvalSet::Test]);
        let p = Partition { retain: vec![], forget: vec![(0, 3)] };
        let r = evaluate(&s, &split(), Some(&p), &[1, 2], View::UserCentric).unwrap();
        assert!(r.sets.contains_key(&EvalSet::Forget));
    }

    #[test]
    fn json_layout_and_round_trip() {
        let s = scored(array![[0.9, 0.5, 0.1, 0.0]]);
        let r = evaluate(&s, &split(), None, &[1], View::UserCentric).unwrap();
        let text = r.to_json();
        assert_eq!(
            text,
            "{\"view\":\"user_centric\",\"sets\":{\"valid\":{\"1\":{\"recall\":1.000000,\"precision\":1.000000,\"ndcg\":1.000000,\"map\":1.000000}},\"test\":{\"1\":{\"recall\":0.000000,\"precision\":0.000000,\"ndcg\":0.000000,\"map\":0.000000}}}}"
        );
        assert_eq!(EvalReport::from_json(&text).unwrap(), r);
    }

    #[test]
    fn gaps_of_identical_reports_are_zero() {
        let s = scored(array![[0.9, 0.5, 0.1, 0.0]]);
        let r = evaluate(&s, &split(), None, &[1, 2], View::ItemCentric).unwrap();
        let g = property_gaps(&r, &r).unwrap();
        for per_k in g.gaps.values() {
            for m in per_k.values() {
                assert_eq!(*m, MetricValues::default());
            }
        }
        let other = evaluate(&s, &split(), None, &[1], View::ItemCentric).unwrap();
        assert!(matches!(property_gaps(&r, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn gap_arithmetic_matches_table_difference() {
        let mk = |recall| EvalReport {
            view: View::UserCentric,
            sets: BTreeMap::from([(
                EvalSet::Test,
                BTreeMap::from([(20, MetricValues { recall, ..Default::default() })]),
            )]),
        };
        let g = property_gaps(&mk(0.0870), &mk(0.0944)).unwrap();
        assert!((g.epsilon_t().unwrap()[&20].recall - 0.0074).abs() < 1e-12);
    }
}
