//! Training, gold retraining, and the two unlearning procedures.
//!
//! All loops share one skeleton: an epoch of Adam steps, a snapshot, valid
//! Recall@20 against the run's own training edges, and patience-based early
//! stopping that returns the best-valid parameters. Unlearning runs build
//! their adjacency on the retain edges and start from fresh optimizer state.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DatasetSplit, Edge, InteractionGraph, Partition, UserItems};
use crate::losses::{
    bpr_divergence, combined_loss, impair_loss, preserve_loss, reverse_bpr_loss, ProbeUser, TripleBatch,
};
use crate::metrics::user_metrics;
use crate::model::{Encoder, HyperParams, ModelParams, PropagatedState};
use crate::optim::Adam;
use crate::rng::{self, StreamRng};

/// Cut-off of the early-stopping metric.
pub const STOP_K: usize = 20;
/// Sampled negatives per forget user in the divergence probe.
pub const PROBE_NEGATIVES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Gold,
    AmUn,
    MmRecUn,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Gold => "gold",
            Mode::AmUn => "amun",
            Mode::MmRecUn => "mmrecun",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mode::Train),
            "gold" => Ok(Mode::Gold),
            "amun" => Ok(Mode::AmUn),
            "mmrecun" => Ok(Mode::MmRecUn),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hyper: HyperParams,
    pub seed: u64,
    pub mode: Mode,
}

impl TrainConfig {
    pub fn new(mode: Mode, hyper: HyperParams, seed: u64) -> Self {
        TrainConfig { hyper, seed, mode }
    }

    fn expect(&self, mode: Mode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::Config(format!(
                "configuration is for mode `{}`, operation needs `{}`",
                self.mode.as_str(),
                mode.as_str()
            )));
        }
        self.hyper.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Valid recall did not improve for `patience` epochs.
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub params: ModelParams,
    pub epochs_run: usize,
    /// Epoch whose parameters were returned; 0 means the starting point.
    pub best_epoch: usize,
    pub best_valid_recall: f64,
    /// Seconds, including per-epoch evaluation.
    pub wall_time: f64,
    /// `(epoch, beta)` against the reference model, one entry per epoch.
    pub divergence_curve: Vec<(usize, f64)>,
    /// `(epoch, valid Recall@20)`, one entry per epoch.
    pub valid_curve: Vec<(usize, f64)>,
    pub stop_reason: StopReason,
}

/// Uniform draw of `count` distinct items outside the sorted `exclusions`.
/// Returns every candidate, in index order, when there are not enough.
pub fn sample_negatives(num_items: usize, count: usize, exclusions: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    let excluded = |i: &usize| exclusions.binary_search(i).is_ok();
    let available = num_items - exclusions.iter().filter(|&&i| i < num_items).count();
    if available <= count {
        return (0..num_items).filter(|i| !excluded(i)).collect();
    }
    if 2 * count <= available && 2 * available >= num_items {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let i = rng.gen_range(0..num_items);
            if !excluded(&i) && !out.contains(&i) {
                out.push(i);
            }
        }
        return out;
    }
    let candidates: Vec<usize> = (0..num_items).filter(|i| !excluded(i)).collect();
    candidates.choose_multiple(rng, count).copied().collect()
}

/// Shuffles positives each epoch and attaches sampled negatives.
struct Batcher {
    edges: Vec<Edge>,
    exclude: UserItems,
    num_items: usize,
    neg_per_pos: usize,
    batch_size: usize,
    order_rng: StreamRng,
    neg_rng: StreamRng,
}

impl Batcher {
    fn new(edges: &[Edge], exclude: UserItems, num_items: usize, hyper: &HyperParams, seed: u64, streams: (&str, &str)) -> Self {
        Batcher {
            edges: edges.to_vec(),
            exclude,
            num_items,
            neg_per_pos: hyper.neg_per_pos,
            batch_size: hyper.batch_size,
            order_rng: rng::stream(seed, streams.0),
            neg_rng: rng::stream(seed, streams.1),
        }
    }

    fn epoch(&mut self) -> Vec<TripleBatch> {
        self.edges.shuffle(&mut self.order_rng);
        self.edges
            .chunks(self.batch_size)
            .map(|chunk| {
                let mut triples = Vec::with_capacity(chunk.len() * self.neg_per_pos);
                for &(u, i) in chunk {
                    for j in sample_negatives(self.num_items, self.neg_per_pos, self.exclude.items(u), &mut self.neg_rng) {
                        triples.push((u, i, j));
                    }
                }
                TripleBatch::new(triples)
            })
            .collect()
    }
}

/// Divergence tracking against a fixed reference state.
struct Probe {
    reference: PropagatedState,
    users: Vec<ProbeUser>,
}

impl Probe {
    fn new(reference: PropagatedState, forget: &[Edge], train: &UserItems, num_items: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::PROBE);
        let by_user = UserItems::from_edges(train.num_users(), forget);
        let users = by_user
            .lists
            .iter()
            .enumerate()
            .filter(|(_, items)| !items.is_empty())
            .map(|(u, items)| ProbeUser {
                user: u,
                positives: items.clone(),
                negatives: sample_negatives(num_items, PROBE_NEGATIVES, train.items(u), &mut rng),
            })
            .filter(|p| !p.negatives.is_empty())
            .collect();
        Probe { reference, users }
    }
}

/// Shared epoch loop. `step_epoch` performs one epoch of updates.
fn run_loop(
    enc: &Encoder,
    valid: &[Edge],
    initial: ModelParams,
    hyper: &HyperParams,
    probe: Option<&Probe>,
    mut step_epoch: impl FnMut(&mut ModelParams, &mut Adam) -> Result<()>,
) -> Result<RunResult> {
    let start = Instant::now();
    let mask = enc.neighbors.clone();
    let mut adam = Adam::new(&initial, hyper.lr);
    let mut params = initial;
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_recall = f64::NEG_INFINITY;
    let mut curve = Vec::new();
    let mut valid_curve = Vec::new();
    let mut epochs_run = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=hyper.max_epochs {
        step_epoch(&mut params, &mut adam)?;
        epochs_run = epoch;
        if !params.all_finite() {
            return Err(Error::Numeric(format!("non-finite parameters after epoch {epoch}")));
        }
        let state = enc.state(&params)?;
        if !state.all_finite() {
            return Err(Error::Numeric(format!("non-finite embeddings after epoch {epoch}")));
        }
        let recall = user_metrics(&state, valid, STOP_K, &mask)?.recall;
        valid_curve.push((epoch, recall));
        if let Some(p) = probe.filter(|p| !p.users.is_empty()) {
            curve.push((epoch, bpr_divergence(&state, &p.reference, &p.users)?));
        }
        if recall > best_recall {
            best_recall = recall;
            best_epoch = epoch;
            best = params.clone();
        }
        if epoch - best_epoch >= hyper.patience {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    if epochs_run == 0 {
        best_recall = user_metrics(&enc.state(&best)?, valid, STOP_K, &mask)?.recall;
    }
    Ok(RunResult {
        params: best,
        epochs_run,
        best_epoch,
        best_valid_recall: best_recall,
        wall_time: start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
        divergence_curve: curve,
        valid_curve,
        stop_reason,
    })
}

fn check_valid(split: &DatasetSplit) -> Result<()> {
    if split.valid.is_empty() {
        return Err(Error::Config("validation set is empty; early stopping needs it".into()));
    }
    Ok(())
}

fn preserve_step(
    enc: &Encoder,
    params: &mut ModelParams,
    adam: &mut Adam,
    batch: &TripleBatch,
    hyper: &HyperParams,
) -> Result<()> {
    let fwd = enc.forward(params)?;
    let nodes = batch.nodes();
    let report = preserve_loss(enc, params, &fwd, batch, Some(&nodes), hyper)?;
    adam.step(params, &report.grads);
    Ok(())
}

/// Trains from scratch on `edges` with the full objective.
fn train_on(graph: &InteractionGraph, split: &DatasetSplit, edges: &[Edge], config: &TrainConfig) -> Result<RunResult> {
    check_valid(split)?;
    let hyper = &config.hyper;
    let enc = Encoder::new(graph, edges, hyper.layers);
    let initial = ModelParams::init(graph, hyper, config.seed);
    let exclude = UserItems::from_edges(graph.num_users, edges);
    let mut batcher = Batcher::new(edges, exclude, graph.num_items, hyper, config.seed, (rng::BATCHES, rng::NEGATIVES));
    run_loop(&enc, &split.valid, initial, hyper, None, |params, adam| {
        for batch in batcher.epoch() {
            preserve_step(&enc, params, adam, &batch, hyper)?;
        }
        Ok(())
    })
}

/// Learns the original model on all training edges.
pub fn train(graph: &InteractionGraph, split: &DatasetSplit, config: &TrainConfig) -> Result<RunResult> {
    config.expect(Mode::Train)?;
    if split.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    train_on(graph, split, &split.train, config)
}

/// Trains from scratch on the retain edges only.
pub fn retrain_gold(
    graph: &InteractionGraph,
    split: &DatasetSplit,
    partition: &Partition,
    config: &TrainConfig,
) -> Result<RunResult> {
    config.expect(Mode::Gold)?;
    if partition.retain.is_empty() {
        return Err(Error::Config("retain set is empty".into()));
    }
    train_on(graph, split, &partition.retain, config)
}

struct UnlearnSetup<'g> {
    enc: Encoder<'g>,
    retain: Batcher,
    forget: Batcher,
}

fn unlearn_setup<'g>(
    graph: &'g InteractionGraph,
    split: &DatasetSplit,
    partition: &Partition,
    initial: &ModelParams,
    hyper: &HyperParams,
    seed: u64,
) -> Result<UnlearnSetup<'g>> {
    check_valid(split)?;
    if partition.forget.is_empty() {
        return Err(Error::Config("forget set is empty; nothing to unlearn".into()));
    }
    initial.check_against(graph)?;
    let train = UserItems::from_edges(graph.num_users, &split.train);
    Ok(UnlearnSetup {
        enc: Encoder::new(graph, &partition.retain, hyper.layers),
        retain: Batcher::new(&partition.retain, train.clone(), graph.num_items, hyper, seed, (rng::BATCHES, rng::NEGATIVES)),
        forget: Batcher::new(
            &partition.forget,
            train,
            graph.num_items,
            hyper,
            seed,
            (rng::FORGET_BATCHES, rng::FORGET_NEGATIVES),
        ),
    })
}

fn make_probe(
    enc: &Encoder,
    split: &DatasetSplit,
    partition: &Partition,
    reference: Option<&ModelParams>,
    seed: u64,
) -> Result<Option<Probe>> {
    let Some(r) = reference else { return Ok(None) };
    r.check_against(enc.graph)?;
    let train = UserItems::from_edges(enc.graph.num_users, &split.train);
    Ok(Some(Probe::new(enc.state(r)?, &partition.forget, &train, enc.graph.num_items, seed)))
}

/// Preserve/impair unlearning: each step pairs a retain batch with a forget
/// batch (cycling the forget batches) and descends
/// `alpha * preserve + (1 - alpha) * impair`.
pub fn unlearn_mmrecun(
    graph: &InteractionGraph,
    split: &DatasetSplit,
    partition: &Partition,
    initial: &ModelParams,
    config: &TrainConfig,
    reference: Option<&ModelParams>,
) -> Result<RunResult> {
    config.expect(Mode::MmRecUn)?;
    let hyper = &config.hyper;
    let mut s = unlearn_setup(graph, split, partition, initial, hyper, config.seed)?;
    let probe = make_probe(&s.enc, split, partition, reference, config.seed)?;
    let enc = &s.enc;
    run_loop(enc, &split.valid, initial.clone(), hyper, probe.as_ref(), |params, adam| {
        let retain = s.retain.epoch();
        let forget = s.forget.epoch();
        for (n, rb) in retain.iter().enumerate() {
            let fb = &forget[n % forget.len()];
            let fwd = enc.forward(params)?;
            let rn = rb.nodes();
            let fnodes = fb.nodes();
            let p = preserve_loss(enc, params, &fwd, rb, Some(&rn), hyper)?;
            let i = impair_loss(enc, params, &fwd, fb, Some(&fnodes), hyper)?;
            let c = combined_loss(&p, &i, hyper.alpha)?;
            adam.step(params, &c.grads);
        }
        Ok(())
    })
}

/// Reverse-only baseline: ascends BPR on forget batches with no preservation.
pub fn unlearn_amun(
    graph: &InteractionGraph,
    split: &DatasetSplit,
    partition: &Partition,
    initial: &ModelParams,
    config: &TrainConfig,
) -> Result<RunResult> {
    config.expect(Mode::AmUn)?;
    let hyper = &config.hyper;
    let mut s = unlearn_setup(graph, split, partition, initial, hyper, config.seed)?;
    let enc = &s.enc;
    run_loop(enc, &split.valid, initial.clone(), hyper, None, |params, adam| {
        for fb in s.forget.epoch() {
            let fwd = enc.forward(params)?;
            let r = reverse_bpr_loss(enc, params, &fwd, &fb);
            adam.step(params, &r.grads);
        }
        Ok(())
    })
}

/// Fine-tunes an existing model on retain batches alone, drawing exactly the
/// batches an unlearning run with the same seed would draw.
pub fn fine_tune_retain(
    graph: &InteractionGraph,
    split: &DatasetSplit,
    partition: &Partition,
    initial: &ModelParams,
    hyper: &HyperParams,
    seed: u64,
) -> Result<RunResult> {
    hyper.validate()?;
    let mut s = unlearn_setup(graph, split, partition, initial, hyper, seed)?;
    let enc = &s.enc;
    run_loop(enc, &split.valid, initial.clone(), hyper, None, |params, adam| {
        for rb in s.retain.epoch() {
            preserve_step(enc, params, adam, &rb, hyper)?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use ndarray::Array2;

    use crate::graph::{mark_forget, split_dataset, ForgetSpec};

    fn small_graph() -> InteractionGraph {
        let mut rows = Vec::new();
        for u in 0..12 {
            for k in 0..6 {
                let i = (u * 3 + k * 2) % 14;
                rows.push((format!("u{u}"), format!("i{i}")));
            }
        }
        let pairs = || rows.iter().map(|(a, b)| (a.as_str(), b.as_str()));
        let items = InteractionGraph::from_rows(pairs(), BTreeMap::new()).unwrap().num_items;
        let feats = Array2::from_shape_fn((items, 3), |(i, c)| ((i * 7 + c) % 5) as f64 / 5.0);
        InteractionGraph::from_rows(pairs(), BTreeMap::from([("visual".to_string(), feats)])).unwrap()
    }

    fn hyper() -> HyperParams {
        HyperParams { dim: 4, batch_size: 16, max_epochs: 5, patience: 5, lr: 0.01, ..HyperParams::default() }
    }

    #[test]
    fn negatives_exclude_and_fall_back() {
        let mut r = rng::stream(1, "t");
        let excl: Vec<usize> = (0..9).collect();
        for _ in 0..20 {
            assert_eq!(sample_negatives(10, 1, &excl, &mut r), vec![9]);
        }
        assert_eq!(sample_negatives(5, 10, &[1, 3], &mut r), vec![0, 2, 4]);
        let s = sample_negatives(100, 30, &[5, 6], &mut r);
        let mut d = s.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), 30);
        assert!(!s.contains(&5) && !s.contains(&6));
        let dense = sample_negatives(10, 4, &[0, 1, 2, 3, 4], &mut r);
        assert_eq!(dense.len(), 4);
        assert!(dense.iter().all(|&i| i >= 5));
    }

    #[test]
    fn negatives_are_deterministic() {
        let a = sample_negatives(50, 5, &[1], &mut rng::stream(3, "n"));
        let b = sample_negatives(50, 5, &[1], &mut rng::stream(3, "n"));
        assert_eq!(a, b);
    }

    #[test]
    fn patience_zero_runs_one_epoch() {
        let g = small_graph();
        let split = split_dataset(&g, 0);
        let cfg = TrainConfig::new(Mode::Train, HyperParams { patience: 0, ..hyper() }, 1);
        let r = train(&g, &split, &cfg).unwrap();
        assert_eq!(r.epochs_run, 1);
        assert_eq!(r.best_epoch, 1);
        assert_eq!(r.stop_reason, StopReason::Patience);
        assert!(r.wall_time > 0.0);
    }

    #[test]
    fn mode_mismatch_is_config_error() {
        let g = small_graph();
        let split = split_dataset(&g, 0);
        let cfg = TrainConfig::new(Mode::Gold, hyper(), 1);
        assert!(matches!(train(&g, &split, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn empty_forget_gold_equals_train() {
        let g = small_graph();
        let split = split_dataset(&g, 0);
        let t = train(&g, &split, &TrainConfig::new(Mode::Train, hyper(), 4)).unwrap();
        let p = Partition { retain: split.train.clone(), forget: vec![] };
        let gold = retrain_gold(&g, &split, &p, &TrainConfig::new(Mode::Gold, hyper(), 4)).unwrap();
        assert_eq!(t.params, gold.params);
        let cfg = TrainConfig::new(Mode::MmRecUn, hyper(), 4);
        assert!(matches!(unlearn_mmrecun(&g, &split, &p, &t.params, &cfg, None), Err(Error::Config(_))));
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let g = small_graph();
        let split = split_dataset(&g, 0);
        let t = train(&g, &split, &TrainConfig::new(Mode::Train, hyper(), 2)).unwrap();
        let p = mark_forget(&split, &ForgetSpec::users(vec![0])).unwrap();
        let cfg = TrainConfig::new(Mode::AmUn, HyperParams { max_epochs: 0, ..hyper() }, 2);
        let r = unlearn_amun(&g, &split, &p, &t.params, &cfg).unwrap();
        assert_eq!(r.params, t.params);
        assert_eq!(r.epochs_run, 0);
    }

    #[test]
    fn alpha_one_matches_retain_fine_tuning() {
        let g = small_graph();
        let split = split_dataset(&g, 0);
        let t = train(&g, &split, &TrainConfig::new(Mode::Train, hyper(), 9)).unwrap();
        let p = mark_forget(&split, &ForgetSpec::users(vec![1, 2])).unwrap();
        let h = HyperParams { alpha: 1.0, batch_size: 8, ..hyper() };
        let u = unlearn_mmrecun(&g, &split, &p, &t.params, &TrainConfig::new(Mode::MmRecUn, h.clone(), 9), None).unwrap();
        let f = fine_tune_retain(&g, &split, &p, &t.params, &h, 9).unwrap();
        assert_eq!(u.params, f.params);
        assert_eq!(u.epochs_run, f.epochs_run);
    }

    #[test]
    fn reference_yields_one_beta_per_epoch() {
        let g = small_graph();
        let split = split_dataset(&g, 0);
        let t = train(&g, &split, &TrainConfig::new(Mode::Train, hyper(), 5)).unwrap();
        let p = mark_forget(&split, &ForgetSpec::users(vec![3])).unwrap();
        let gold = retrain_gold(&g, &split, &p, &TrainConfig::new(Mode::Gold, hyper(), 5)).unwrap();
        let cfg = TrainConfig::new(Mode::MmRecUn, hyper(), 5);
        let r = unlearn_mmrecun(&g, &split, &p, &t.params, &cfg, Some(&gold.params)).unwrap();
        assert_eq!(r.divergence_curve.len(), r.epochs_run);
        assert!(r.divergence_curve.iter().all(|&(_, b)| b.is_finite() && b >= 0.0));
    }

    #[test]
    fn runs_are_deterministic() {
        let g = small_graph();
        let split = split_dataset(&g, 0);
        let cfg = TrainConfig::new(Mode::Train, hyper(), 11);
        assert_eq!(train(&g, &split, &cfg).unwrap().params, train(&g, &split, &cfg).unwrap().params);
    }
}
