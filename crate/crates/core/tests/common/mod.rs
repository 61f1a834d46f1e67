//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use unrec::graph::{DatasetSplit, ForgetKind, ForgetSpec, Partition};
use unrec::losses::{
    combined_loss, contrastive_loss, impair_loss, l2_penalty, preserve_loss, reverse_bpr_loss, bpr_loss,
    ContrastNodes,
};
use unrec::metrics::MetricValues;
use unrec::{Edge, Encoder, HyperParams, InteractionGraph, ModelParams, PropagatedState, TripleBatch};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A tiny random model with retain and forget batches.
pub struct Instance {
    pub graph: InteractionGraph,
    pub edges: Vec<Edge>,
    pub params: ModelParams,
    pub hyper: HyperParams,
    pub retain: TripleBatch,
    pub forget: TripleBatch,
}

impl Instance {
    pub fn encoder(&self) -> Encoder<'_> {
        Encoder::new(&self.graph, &self.edges, self.hyper.layers)
    }
}

fn random_batch(r: &mut ChaCha8Rng, edges: &[Edge], ni: usize) -> TripleBatch {
    loop {
        let n = r.gen_range(3..=8);
        let triples: Vec<(usize, usize, usize)> = (0..n)
            .map(|_| {
                let (u, i) = *edges.choose(r).unwrap();
                let mut j = r.gen_range(0..ni);
                while edges.binary_search(&(u, j)).is_ok() {
                    j = r.gen_range(0..ni);
                }
                (u, i, j)
            })
            .collect();
        let batch = TripleBatch::new(triples);
        if batch.nodes().is_usable() {
            return batch;
        }
    }
}

/// Random instance with at most 8 users, 8 items, and embedding width 4.
pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let nu = r.gen_range(3..=8);
    let ni = r.gen_range(3..=8);
    let mut rows = BTreeSet::new();
    for u in 0..nu {
        let k = r.gen_range(1..ni);
        let mut items: Vec<usize> = (0..ni).collect();
        items.shuffle(&mut r);
        for &i in &items[..k] {
            rows.insert((u, i));
        }
    }
    for i in 0..ni {
        if !rows.iter().any(|e| e.1 == i) {
            rows.insert((r.gen_range(0..nu), i));
        }
    }
    // Users that cover every item have no negatives; drop one of their edges.
    for u in 0..nu {
        if (0..ni).all(|i| rows.contains(&(u, i))) {
            let drop = (0..ni).find(|&i| rows.iter().filter(|e| e.1 == i).count() > 1).unwrap();
            rows.remove(&(u, drop));
        }
    }
    let names: Vec<(String, String)> = rows.iter().map(|(u, i)| (format!("u{u}"), format!("i{i}"))).collect();
    let mut features = BTreeMap::new();
    for m in 0..r.gen_range(1..=2) {
        let dm = r.gen_range(1..=3);
        features.insert(format!("m{m}"), Array2::from_shape_fn((ni, dm), |_| r.gen_range(-1.0..1.0)));
    }
    let graph = InteractionGraph::from_rows(names.iter().map(|(a, b)| (a.as_str(), b.as_str())), BTreeMap::new())
        .unwrap();
    // Reorder feature rows so row k belongs to the item with dense index k.
    let order: Vec<usize> = graph.item_ids.iter().map(|id| id[1..].parse().unwrap()).collect();
    let features = features
        .into_iter()
        .map(|(m, f)| (m, Array2::from_shape_fn(f.raw_dim(), |(k, c)| f[[order[k], c]])))
        .collect();
    let graph = InteractionGraph::from_rows(names.iter().map(|(a, b)| (a.as_str(), b.as_str())), features).unwrap();
    let edges = graph.edges.clone();

    let hyper = HyperParams {
        dim: r.gen_range(1..=4),
        layers: r.gen_range(0..=2),
        lambda_c: r.gen_range(0.1..1.0),
        lambda_reg: r.gen_range(0.01..0.5),
        tau: r.gen_range(0.3..1.5),
        alpha: r.gen_range(0.0..1.0),
        ..HyperParams::default()
    };
    let mut params = ModelParams::init(&graph, &hyper, seed);
    for k in 0..params.num_values() {
        let v = params.get_flat(k);
        params.set_flat(k, v + r.gen_range(-0.3..0.3));
    }
    let retain = random_batch(&mut r, &edges, graph.num_items);
    let forget = random_batch(&mut r, &edges, graph.num_items);
    Instance { graph, edges, params, hyper, retain, forget }
}

pub const LOSSES: [&str; 7] = ["bpr", "rpr", "contrastive", "l2", "preserve", "impair", "combined"];

/// Value and analytic gradient of the named loss at `params`.
pub fn eval_loss(inst: &Instance, enc: &Encoder, name: &str, params: &ModelParams) -> (f64, ModelParams) {
    let fwd = enc.forward(params).unwrap();
    let h = &inst.hyper;
    let rn: ContrastNodes = inst.retain.nodes();
    let fnodes: ContrastNodes = inst.forget.nodes();
    match name {
        "bpr" => {
            let r = bpr_loss(enc, params, &fwd, &inst.retain);
            (r.bpr, r.grads)
        }
        "rpr" => {
            let r = reverse_bpr_loss(enc, params, &fwd, &inst.forget);
            (r.rpr, r.grads)
        }
        "contrastive" => {
            let r = contrastive_loss(enc, params, &fwd, &rn, h.tau).unwrap();
            (r.contrastive, r.grads)
        }
        "l2" => l2_penalty(params),
        "preserve" => {
            let r = preserve_loss(enc, params, &fwd, &inst.retain, Some(&rn), h).unwrap();
            (r.preserve, r.grads)
        }
        "impair" => {
            let r = impair_loss(enc, params, &fwd, &inst.forget, Some(&fnodes), h).unwrap();
            (r.impair, r.grads)
        }
        "combined" => {
            let p = preserve_loss(enc, params, &fwd, &inst.retain, Some(&rn), h).unwrap();
            let i = impair_loss(enc, params, &fwd, &inst.forget, Some(&fnodes), h).unwrap();
            let c = combined_loss(&p, &i, h.alpha).unwrap();
            (c.combined, c.grads)
        }
        other => panic!("unknown loss {other}"),
    }
}

/// Largest relative error `|a - n| / max(|a|, |n|, 1e-6)` between analytic and
/// central-difference gradients with step `h`.
pub fn max_grad_error(inst: &Instance, name: &str, h: f64) -> f64 {
    let enc = inst.encoder();
    let (_, grads) = eval_loss(inst, &enc, name, &inst.params);
    let mut worst: f64 = 0.0;
    for k in 0..inst.params.num_values() {
        let mut p = inst.params.clone();
        let v = p.get_flat(k);
        p.set_flat(k, v + h);
        let plus = eval_loss(inst, &enc, name, &p).0;
        p.set_flat(k, v - h);
        let minus = eval_loss(inst, &enc, name, &p).0;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get_flat(k);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

/// Random embedding state for metric checks.
pub fn random_state(r: &mut ChaCha8Rng, nu: usize, ni: usize) -> PropagatedState {
    let d = r.gen_range(1..=3);
    let user_final = Array2::from_shape_fn((nu, d), |_| r.gen_range(-1.0..1.0));
    let item_final = Array2::from_shape_fn((ni, d), |_| r.gen_range(-1.0..1.0));
    PropagatedState {
        user_beh: user_final.clone(),
        item_beh: item_final.clone(),
        user_mul: Array2::zeros((nu, d)),
        item_mul: Array2::zeros((ni, d)),
        user_final,
        item_final,
    }
}

pub fn random_edges(r: &mut ChaCha8Rng, nu: usize, ni: usize, p: f64) -> Vec<Edge> {
    let mut out = Vec::new();
    for u in 0..nu {
        for i in 0..ni {
            if r.gen::<f64>() < p {
                out.push((u, i));
            }
        }
    }
    out
}

/// Full ranking by explicit dot products: score descending, index ascending.
fn brute_ranking(state: &PropagatedState, u: usize, masked: &BTreeSet<Edge>) -> Vec<usize> {
    let ni = state.item_final.nrows();
    let d = state.user_final.ncols();
    let mut scored: Vec<(f64, usize)> = (0..ni)
        .filter(|&i| !masked.contains(&(u, i)))
        .map(|i| {
            let s: f64 = (0..d).map(|c| state.user_final[[u, c]] * state.item_final[[i, c]]).sum();
            (s, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().map(|x| x.1).collect()
}

fn gain(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// Exhaustive user-centric metrics; `None` when no user qualifies.
pub fn brute_user(state: &PropagatedState, eval: &[Edge], k: usize, mask: &[Edge]) -> Option<MetricValues> {
    let masked: BTreeSet<Edge> = mask.iter().copied().collect();
    let nu = state.user_final.nrows();
    let mut sum = MetricValues::default();
    let mut n = 0usize;
    for u in 0..nu {
        let rel: BTreeSet<usize> = eval.iter().filter(|e| e.0 == u).map(|e| e.1).collect();
        if rel.is_empty() {
            continue;
        }
        n += 1;
        let ranking = brute_ranking(state, u, &masked);
        let top = &ranking[..k.min(ranking.len())];
        let mut hits = 0;
        let mut dcg = 0.0;
        let mut ap = 0.0;
        for (pos, i) in top.iter().enumerate() {
            if rel.contains(i) {
                hits += 1;
                dcg += gain(pos + 1);
                ap += hits as f64 / (pos + 1) as f64;
            }
        }
        let m = rel.len().min(k);
        let idcg: f64 = (1..=m).map(gain).sum();
        sum.recall += hits as f64 / rel.len() as f64;
        sum.precision += hits as f64 / k as f64;
        sum.ndcg += dcg / idcg;
        sum.map += ap / m as f64;
    }
    (n > 0).then(|| MetricValues {
        recall: sum.recall / n as f64,
        precision: sum.precision / n as f64,
        ndcg: sum.ndcg / n as f64,
        map: sum.map / n as f64,
    })
}

/// Exhaustive item-centric metrics; `None` when no item qualifies.
pub fn brute_item(state: &PropagatedState, eval: &[Edge], k: usize, mask: &[Edge]) -> Option<MetricValues> {
    let masked: BTreeSet<Edge> = mask.iter().copied().collect();
    let ni = state.item_final.nrows();
    let mut sum = MetricValues::default();
    let mut n = 0usize;
    for i in 0..ni {
        let users: BTreeSet<usize> = eval.iter().filter(|e| e.1 == i).map(|e| e.0).collect();
        if users.is_empty() {
            continue;
        }
        n += 1;
        let mut hits = 0;
        let mut dcg = 0.0;
        let mut rr = 0.0;
        for &u in &users {
            let ranking = brute_ranking(state, u, &masked);
            if let Some(pos) = ranking.iter().take(k).position(|&x| x == i) {
                hits += 1;
                dcg += gain(pos + 1);
                rr += 1.0 / (pos + 1) as f64;
            }
        }
        let m = users.len() as f64;
        sum.recall += hits as f64 / m;
        sum.precision += hits as f64 / k as f64;
        sum.ndcg += dcg / m;
        sum.map += rr / m;
    }
    (n > 0).then(|| MetricValues {
        recall: sum.recall / n as f64,
        precision: sum.precision / n as f64,
        ndcg: sum.ndcg / n as f64,
        map: sum.map / n as f64,
    })
}

/// Random split of random edges, for partition checks.
pub fn random_split(r: &mut ChaCha8Rng) -> (usize, usize, DatasetSplit) {
    let nu = r.gen_range(2..=12);
    let ni = r.gen_range(2..=12);
    let mut train = random_edges(r, nu, ni, 0.4);
    if train.is_empty() {
        train.push((0, 0));
    }
    (nu, ni, DatasetSplit { train, valid: vec![], test: vec![] })
}

pub fn random_spec(r: &mut ChaCha8Rng, kind: ForgetKind, nu: usize, ni: usize, train: &[Edge]) -> ForgetSpec {
    let pick_edges = |r: &mut ChaCha8Rng| {
        let n = r.gen_range(1..=train.len());
        let mut e: Vec<Edge> = train.choose_multiple(r, n).copied().collect();
        e.sort_unstable();
        e
    };
    let pick = |r: &mut ChaCha8Rng, n: usize| {
        let k = r.gen_range(1..=n);
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(r);
        v.truncate(k);
        v
    };
    match kind {
        ForgetKind::Interaction | ForgetKind::UserPreference => ForgetSpec::edges(kind, pick_edges(r)),
        ForgetKind::Account => ForgetSpec::users(pick(r, nu)),
        ForgetKind::BiasedItem | ForgetKind::License => ForgetSpec::items(kind, pick(r, ni)),
    }
}

/// Disjointness, coverage, and cascade closure. Returns the first violation.
pub fn partition_laws(train: &[Edge], spec: &ForgetSpec, p: &Partition) -> Result<(), String> {
    let retain: BTreeSet<Edge> = p.retain.iter().copied().collect();
    let forget: BTreeSet<Edge> = p.forget.iter().copied().collect();
    if retain.len() != p.retain.len() || forget.len() != p.forget.len() {
        return Err("duplicate edges".into());
    }
    if !retain.is_disjoint(&forget) {
        return Err("retain and forget overlap".into());
    }
    let all: BTreeSet<Edge> = retain.union(&forget).copied().collect();
    let expected: BTreeSet<Edge> = train.iter().copied().collect();
    if all != expected {
        return Err("retain and forget do not cover train".into());
    }
    for e in &spec.edges {
        if !forget.contains(e) {
            return Err(format!("listed edge {e:?} retained"));
        }
    }
    for e in &retain {
        if spec.users.contains(&e.0) || spec.items.contains(&e.1) {
            return Err(format!("retain edge {e:?} touches a forgotten node"));
        }
    }
    for e in &forget {
        if !(spec.edges.contains(e) || spec.users.contains(&e.0) || spec.items.contains(&e.1)) {
            return Err(format!("forget edge {e:?} has no cause"));
        }
    }
    Ok(())
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
