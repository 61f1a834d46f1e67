//! Objectives and their analytic gradients.
//!
//! Every loss is a batch mean. State-level gradients are accumulated first and
//! pulled back through fusion and propagation by [`Encoder::backward`], so each
//! [`LossReport`] carries a gradient buffer shaped like [`ModelParams`].

use std::collections::BTreeSet;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{Encoder, Forward, HyperParams, ModelParams, PropagatedState, StateGrad};

/// `(user, positive item, negative item)` triples.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TripleBatch {
    pub triples: Vec<(usize, usize, usize)>,
}

impl TripleBatch {
    pub fn new(triples: Vec<(usize, usize, usize)>) -> Self {
        TripleBatch { triples }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Distinct users and positive items of the batch, used as the
    /// contrastive sample.
    pub fn nodes(&self) -> ContrastNodes {
        let users: BTreeSet<usize> = self.triples.iter().map(|t| t.0).collect();
        let items: BTreeSet<usize> = self.triples.iter().map(|t| t.1).collect();
        ContrastNodes {
            users: users.into_iter().collect(),
            items: items.into_iter().collect(),
        }
    }
}

/// Users and items whose behavior/multi-modal agreement enters the
/// contrastive term. Softmax denominators run over this sample.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ContrastNodes {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
}

impl ContrastNodes {
    /// Whether the sample is large enough for a contrastive term.
    pub fn is_usable(&self) -> bool {
        self.users.len() >= 2 && self.items.len() >= 2
    }
}

/// Scalar terms of one loss evaluation plus the parameter gradient of the
/// headline value. Terms an operation does not compute stay at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub bpr: f64,
    pub rpr: f64,
    /// Contrastive term on the retain sample.
    pub contrastive: f64,
    /// Contrastive term on the forget sample.
    pub contrastive_forget: f64,
    pub l2: f64,
    pub preserve: f64,
    pub impair: f64,
    pub combined: f64,
    pub grads: ModelParams,
}

impl LossReport {
    fn empty(params: &ModelParams) -> Self {
        LossReport {
            bpr: 0.0,
            rpr: 0.0,
            contrastive: 0.0,
            contrastive_forget: 0.0,
            l2: 0.0,
            preserve: 0.0,
            impair: 0.0,
            combined: 0.0,
            grads: params.zeros_like(),
        }
    }
}

/// `softplus(x) = ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean `-ln sigmoid(y_ui - y_uj)` and its gradient on the final embeddings.
pub fn bpr_state(state: &PropagatedState, batch: &TripleBatch) -> (f64, StateGrad) {
    let mut grad = StateGrad::for_state(state);
    if batch.is_empty() {
        return (0.0, grad);
    }
    let n = batch.len() as f64;
    let mut total = 0.0;
    for &(u, i, j) in &batch.triples {
        let eu = state.user_final.row(u);
        let ei = state.item_final.row(i);
        let ej = state.item_final.row(j);
        let diff = eu.dot(&ei) - eu.dot(&ej);
        total += softplus(-diff);
        // d/d diff of -ln sigmoid(diff)
        let g = -sigmoid(-diff) / n;
        let delta = &ei - &ej;
        let eu = eu.to_owned();
        grad.user_final.row_mut(u).scaled_add(g, &delta);
        grad.item_final.row_mut(i).scaled_add(g, &eu);
        grad.item_final.row_mut(j).scaled_add(-g, &eu);
    }
    (total / n, grad)
}

/// In-batch InfoNCE between multi-modal and behavior embeddings, averaged
/// over all sampled nodes.
pub fn contrastive_state(
    state: &PropagatedState,
    nodes: &ContrastNodes,
    tau: f64,
) -> Result<(f64, StateGrad)> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    if !nodes.is_usable() {
        return Err(Error::Domain(format!(
            "contrastive sample needs >=2 users and >=2 items, got {} and {}",
            nodes.users.len(),
            nodes.items.len()
        )));
    }
    let mut grad = StateGrad::for_state(state);
    let total_nodes = (nodes.users.len() + nodes.items.len()) as f64;
    let users = info_nce_side(
        &nodes.users,
        (&state.user_mul, &state.user_beh),
        (&mut grad.user_mul, &mut grad.user_beh),
        tau,
        total_nodes,
    );
    let items = info_nce_side(
        &nodes.items,
        (&state.item_mul, &state.item_beh),
        (&mut grad.item_mul, &mut grad.item_beh),
        tau,
        total_nodes,
    );
    let total = users + items;
    Ok((total / total_nodes, grad))
}

/// Sum over `idx` of `-log softmax(mul . beh / tau)`, accumulating its
/// gradient scaled by `1 / norm`.
fn info_nce_side(
    idx: &[usize],
    (mul, beh): (&Array2<f64>, &Array2<f64>),
    (g_mul, g_beh): (&mut Array2<f64>, &mut Array2<f64>),
    tau: f64,
    norm: f64,
) -> f64 {
    let logits: Vec<f64> = idx.iter().map(|&v| mul.row(v).dot(&beh.row(v)) / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let n = idx.len() as f64;
    for (&v, s) in idx.iter().zip(&logits) {
        // d(sum_u -log softmax_u) / d s_v = n * softmax_v - 1
        let coef = (n * (s - lse).exp() - 1.0) / (tau * norm);
        g_mul.row_mut(v).scaled_add(coef, &beh.row(v));
        g_beh.row_mut(v).scaled_add(coef, &mul.row(v));
    }
    n * lse - logits.iter().sum::<f64>()
}

/// BPR over the batch.
pub fn bpr_loss(enc: &Encoder, params: &ModelParams, fwd: &Forward, batch: &TripleBatch) -> LossReport {
    let (value, g) = bpr_state(&fwd.state, batch);
    LossReport { bpr: value, grads: enc.backward(params, fwd, &g), ..LossReport::empty(params) }
}

/// Reverse BPR: mean `+ln sigmoid(y_ui - y_uj)`, the exact negation of BPR on
/// the same triples.
pub fn reverse_bpr_loss(
    enc: &Encoder,
    params: &ModelParams,
    fwd: &Forward,
    batch: &TripleBatch,
) -> LossReport {
    let (value, mut g) = bpr_state(&fwd.state, batch);
    negate(&mut g);
    LossReport { rpr: -value, grads: enc.backward(params, fwd, &g), ..LossReport::empty(params) }
}

fn negate(g: &mut StateGrad) {
    for m in [
        &mut g.user_beh,
        &mut g.item_beh,
        &mut g.user_mul,
        &mut g.item_mul,
        &mut g.user_final,
        &mut g.item_final,
    ] {
        m.mapv_inplace(|x| -x);
    }
}

pub fn contrastive_loss(
    enc: &Encoder,
    params: &ModelParams,
    fwd: &Forward,
    nodes: &ContrastNodes,
    tau: f64,
) -> Result<LossReport> {
    let (value, g) = contrastive_state(&fwd.state, nodes, tau)?;
    Ok(LossReport {
        contrastive: value,
        grads: enc.backward(params, fwd, &g),
        ..LossReport::empty(params)
    })
}

/// Sum of squares of every trainable value and its gradient `2 * params`.
pub fn l2_penalty(params: &ModelParams) -> (f64, ModelParams) {
    let mut g = params.clone();
    g.scale(2.0);
    (params.sum_squares(), g)
}

fn optional_contrastive(
    state: &PropagatedState,
    nodes: Option<&ContrastNodes>,
    tau: f64,
) -> Result<Option<(f64, StateGrad)>> {
    match nodes {
        Some(n) if n.is_usable() => contrastive_state(state, n, tau).map(Some),
        _ => Ok(None),
    }
}

/// `bpr + lambda_c * contrastive + lambda_reg * l2` on retain data. The
/// contrastive term is skipped when `nodes` is absent or too small.
pub fn preserve_loss(
    enc: &Encoder,
    params: &ModelParams,
    fwd: &Forward,
    retain_batch: &TripleBatch,
    nodes: Option<&ContrastNodes>,
    hyper: &HyperParams,
) -> Result<LossReport> {
    if !(hyper.tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {}", hyper.tau)));
    }
    let (bpr, mut g) = bpr_state(&fwd.state, retain_batch);
    let mut contrastive = 0.0;
    if let Some((c, gc)) = optional_contrastive(&fwd.state, nodes, hyper.tau)? {
        contrastive = c;
        g.add_scaled(hyper.lambda_c, &gc);
    }
    let (l2, gl2) = l2_penalty(params);
    let mut grads = enc.backward(params, fwd, &g);
    grads.add_scaled(hyper.lambda_reg, &gl2);
    Ok(LossReport {
        bpr,
        contrastive,
        l2,
        preserve: bpr + hyper.lambda_c * contrastive + hyper.lambda_reg * l2,
        grads,
        ..LossReport::empty(params)
    })
}

/// `rpr - (lambda_c * contrastive + lambda_reg * l2)` on forget data.
pub fn impair_loss(
    enc: &Encoder,
    params: &ModelParams,
    fwd: &Forward,
    forget_batch: &TripleBatch,
    nodes: Option<&ContrastNodes>,
    hyper: &HyperParams,
) -> Result<LossReport> {
    if !(hyper.tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {}", hyper.tau)));
    }
    let (bpr, mut g) = bpr_state(&fwd.state, forget_batch);
    negate(&mut g);
    let rpr = -bpr;
    let mut contrastive_forget = 0.0;
    if let Some((c, gc)) = optional_contrastive(&fwd.state, nodes, hyper.tau)? {
        contrastive_forget = c;
        g.add_scaled(-hyper.lambda_c, &gc);
    }
    let (l2, gl2) = l2_penalty(params);
    let mut grads = enc.backward(params, fwd, &g);
    grads.add_scaled(-hyper.lambda_reg, &gl2);
    Ok(LossReport {
        rpr,
        contrastive_forget,
        l2,
        impair: rpr - (hyper.lambda_c * contrastive_forget + hyper.lambda_reg * l2),
        grads,
        ..LossReport::empty(params)
    })
}

/// `alpha * preserve + (1 - alpha) * impair`, applied to scalars and gradients.
pub fn combined_loss(preserve: &LossReport, impair: &LossReport, alpha: f64) -> Result<LossReport> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let mut grads = preserve.grads.clone();
    grads.scale(alpha);
    grads.add_scaled(1.0 - alpha, &impair.grads);
    Ok(LossReport {
        bpr: preserve.bpr,
        rpr: impair.rpr,
        contrastive: preserve.contrastive,
        contrastive_forget: impair.contrastive_forget,
        l2: preserve.l2,
        preserve: preserve.preserve,
        impair: impair.impair,
        combined: alpha * preserve.preserve + (1.0 - alpha) * impair.impair,
        grads,
    })
}

/// One probe user for the score divergence: positives and sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeUser {
    pub user: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Mean over probe users of the mean squared score difference on positives
/// plus the same on negatives.
pub fn bpr_divergence(a: &PropagatedState, b: &PropagatedState, probe: &[ProbeUser]) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::Domain("divergence probe is empty".into()));
    }
    let mut total = 0.0;
    for p in probe {
        if p.positives.is_empty() || p.negatives.is_empty() {
            return Err(Error::Domain(format!(
                "probe user {} needs at least one positive and one negative",
                p.user
            )));
        }
        let msd = |items: &[usize]| {
            items
                .iter()
                .map(|&i| {
                    let d = a.score(p.user, i) - b.score(p.user, i);
                    d * d
                })
                .sum::<f64>()
                / items.len() as f64
        };
        total += msd(&p.positives) + msd(&p.negatives);
    }
    Ok(total / probe.len() as f64)
}
