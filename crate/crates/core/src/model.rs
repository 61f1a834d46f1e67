//! Trainable parameters, propagation, modality fusion, and scoring.
//!
//! Forward pass:
//!
//! 1. `beh = mean_{l=0..L} A^l [user_emb; item_emb]` over the normalized
//!    adjacency `A`.
//! 2. For each modality `h_m = features_m * proj_m^T`. A global softmax over
//!    `attn_m . mean_items(h_m)` weights the modalities into `shared`;
//!    `specific_m = h_m - shared`.
//! 3. `gate = sigmoid(item_beh * gate_w^T + gate_b)`,
//!    `item_mul = shared + gate * mean_m(specific_m)`.
//! 4. `user_mul` is the mean `item_mul` over the user's graph neighbors.
//! 5. Scoring uses `beh + mul` on both sides.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_normalized_adjacency, Edge, InteractionGraph, NormAdj, UserItems};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Embedding dimension.
    pub dim: usize,
    pub lr: f64,
    /// Weight of the contrastive auxiliary loss.
    pub lambda_c: f64,
    /// Weight of the squared L2 norm of all parameters.
    pub lambda_reg: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Preserve/impair balance for unlearning.
    pub alpha: f64,
    pub layers: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub neg_per_pos: usize,
    pub topk: Vec<usize>,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            dim: 64,
            lr: 1e-3,
            lambda_c: 0.01,
            lambda_reg: 1e-4,
            tau: 0.2,
            alpha: 0.3,
            layers: 2,
            batch_size: 2048,
            max_epochs: 1000,
            patience: 20,
            neg_per_pos: 1,
            topk: vec![5, 10, 20, 50],
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.lambda_reg >= 0.0) || !(self.lambda_c >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.neg_per_pos == 0 {
            return bad("batch_size and neg_per_pos must be positive");
        }
        if self.topk.iter().any(|&k| k == 0) {
            return bad("every K must be at least 1");
        }
        Ok(())
    }
}

/// Every trainable tensor. Also used as the gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `num_users x d` behavior embeddings.
    pub user_emb: Array2<f64>,
    /// `num_items x d` behavior embeddings.
    pub item_emb: Array2<f64>,
    /// `d x d_m` projection per modality.
    pub proj: BTreeMap<String, Array2<f64>>,
    /// `d x d` modality-preference gate.
    pub gate_w: Array2<f64>,
    pub gate_b: Array1<f64>,
    /// Shared-feature attention query per modality.
    pub attn: BTreeMap<String, Array1<f64>>,
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize, fan: usize) -> Array2<f64> {
    let bound = (6.0 / fan as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
}

impl ModelParams {
    /// Xavier-uniform initialization, deterministic in `seed`. Biases start at 0.
    pub fn init(graph: &InteractionGraph, hyper: &HyperParams, seed: u64) -> Self {
        let d = hyper.dim;
        let mut r = rng::stream(seed, rng::INIT);
        let user_emb = xavier(&mut r, graph.num_users, d, graph.num_users + d);
        let item_emb = xavier(&mut r, graph.num_items, d, graph.num_items + d);
        let proj = graph
            .modality_dims()
            .into_iter()
            .map(|(m, dm)| (m, xavier(&mut r, d, dm, d + dm)))
            .collect();
        let gate_w = xavier(&mut r, d, d, 2 * d);
        let attn = graph
            .modality_features
            .keys()
            .map(|m| (m.clone(), xavier(&mut r, 1, d, 1 + d).remove_axis(Axis(0))))
            .collect();
        ModelParams { user_emb, item_emb, proj, gate_w, gate_b: Array1::zeros(d), attn }
    }

    pub fn dim(&self) -> usize {
        self.gate_w.nrows()
    }

    pub fn num_users(&self) -> usize {
        self.user_emb.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.item_emb.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            user_emb: Array2::zeros(self.user_emb.raw_dim()),
            item_emb: Array2::zeros(self.item_emb.raw_dim()),
            proj: self.proj.iter().map(|(k, v)| (k.clone(), Array2::zeros(v.raw_dim()))).collect(),
            gate_w: Array2::zeros(self.gate_w.raw_dim()),
            gate_b: Array1::zeros(self.gate_b.raw_dim()),
            attn: self.attn.iter().map(|(k, v)| (k.clone(), Array1::zeros(v.raw_dim()))).collect(),
        }
    }

    /// Named `(rows, cols, data)` views in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, usize, usize, &[f64])> {
        let mut out = vec![
            ("user_emb".to_owned(), self.user_emb.nrows(), self.user_emb.ncols(), contiguous(self.user_emb.as_slice())),
            ("item_emb".to_owned(), self.item_emb.nrows(), self.item_emb.ncols(), contiguous(self.item_emb.as_slice())),
        ];
        for (m, p) in &self.proj {
            out.push((format!("proj.{m}"), p.nrows(), p.ncols(), contiguous(p.as_slice())));
        }
        out.push(("gate_w".to_owned(), self.gate_w.nrows(), self.gate_w.ncols(), contiguous(self.gate_w.as_slice())));
        out.push(("gate_b".to_owned(), 1, self.gate_b.len(), contiguous(self.gate_b.as_slice())));
        for (m, a) in &self.attn {
            out.push((format!("attn.{m}"), 1, a.len(), contiguous(a.as_slice())));
        }
        out
    }

    /// Mutable data slices in the same order as [`ModelParams::tensors`].
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            contiguous_mut(self.user_emb.as_slice_mut()),
            contiguous_mut(self.item_emb.as_slice_mut()),
        ];
        out.extend(self.proj.values_mut().map(|p| contiguous_mut(p.as_slice_mut())));
        out.push(contiguous_mut(self.gate_w.as_slice_mut()));
        out.push(contiguous_mut(self.gate_b.as_slice_mut()));
        out.extend(self.attn.values_mut().map(|a| contiguous_mut(a.as_slice_mut())));
        out
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.tensors().into_iter().map(|t| t.3).collect()
    }

    pub fn num_values(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: f64, other: &ModelParams) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in dst.iter_mut().zip(src) {
                *x += a * y;
            }
        }
    }

    pub fn scale(&mut self, a: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= a);
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// Value at flat position `k` across all tensors in checkpoint order.
    pub fn get_flat(&self, mut k: usize) -> f64 {
        for s in self.slices() {
            if k < s.len() {
                return s[k];
            }
            k -= s.len();
        }
        panic!("flat index out of range")
    }

    pub fn set_flat(&mut self, mut k: usize, v: f64) {
        for s in self.slices_mut() {
            if k < s.len() {
                s[k] = v;
                return;
            }
            k -= s.len();
        }
        panic!("flat index out of range")
    }

    pub fn check_against(&self, graph: &InteractionGraph) -> Result<()> {
        if self.num_users() != graph.num_users || self.num_items() != graph.num_items {
            return Err(Error::Shape(format!(
                "parameters cover {}x{} users/items, graph has {}x{}",
                self.num_users(),
                self.num_items(),
                graph.num_users,
                graph.num_items
            )));
        }
        let dims = graph.modality_dims();
        if dims.len() != self.proj.len() {
            return Err(Error::Dimension(format!(
                "graph has {} modalities, parameters have {}",
                dims.len(),
                self.proj.len()
            )));
        }
        for (m, dm) in dims {
            match self.proj.get(&m) {
                Some(p) if p.ncols() == dm && p.nrows() == self.dim() => {}
                Some(p) => {
                    return Err(Error::Dimension(format!(
                        "projection for `{m}` is {}x{}, expected {}x{dm}",
                        p.nrows(),
                        p.ncols(),
                        self.dim()
                    )))
                }
                None => return Err(Error::Dimension(format!("no projection for modality `{m}`"))),
            }
        }
        Ok(())
    }
}

fn contiguous<T>(s: Option<&[T]>) -> &[T] {
    s.expect("parameter tensors are kept in standard layout")
}

fn contiguous_mut<T>(s: Option<&mut [T]>) -> &mut [T] {
    s.expect("parameter tensors are kept in standard layout")
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
const CHECKPOINT_VERSION: u32 = 1;

impl ModelParams {
    /// MMCK encoding: magic, u32 version, then per tensor a u32 name length,
    /// name bytes, u32 rows, u32 cols, and row-major f64 values, all
    /// little-endian.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.num_values() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, rows, cols, data) in self.tensors() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(rows as u32).to_le_bytes());
            out.extend_from_slice(&(cols as u32).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing MMCK magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut tensors: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        while cur.pos < bytes.len() {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            let raw = cur.take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, Array2::from_shape_vec((rows, cols), data).unwrap());
        }

        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
        };
        let user_emb = take("user_emb")?;
        let item_emb = take("item_emb")?;
        let gate_w = take("gate_w")?;
        let gate_b = take("gate_b")?.remove_axis(Axis(0));
        let mut proj = BTreeMap::new();
        let mut attn = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(m) = name.strip_prefix("proj.") {
                proj.insert(m.to_owned(), t);
            } else if let Some(m) = name.strip_prefix("attn.") {
                attn.insert(m.to_owned(), t.remove_axis(Axis(0)));
            } else {
                return Err(Error::Format(format!("unexpected tensor `{name}`")));
            }
        }
        let d = gate_w.nrows();
        let consistent = user_emb.ncols() == d
            && item_emb.ncols() == d
            && gate_w.ncols() == d
            && gate_b.len() == d
            && proj.keys().eq(attn.keys())
            && proj.values().all(|p| p.nrows() == d)
            && attn.values().all(|a| a.len() == d);
        if !consistent {
            return Err(Error::Format("checkpoint tensor shapes are inconsistent".into()));
        }
        Ok(ModelParams { user_emb, item_emb, proj, gate_w, gate_b, attn })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_checkpoint_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Embeddings produced by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedState {
    pub user_beh: Array2<f64>,
    pub item_beh: Array2<f64>,
    pub user_mul: Array2<f64>,
    pub item_mul: Array2<f64>,
    pub user_final: Array2<f64>,
    pub item_final: Array2<f64>,
}

impl PropagatedState {
    pub fn num_users(&self) -> usize {
        self.user_final.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.item_final.nrows()
    }

    pub fn all_finite(&self) -> bool {
        [&self.user_beh, &self.item_beh, &self.user_mul, &self.item_mul, &self.user_final, &self.item_final]
            .iter()
            .all(|m| m.iter().all(|x| x.is_finite()))
    }

    /// Predicted preference `user_final[u] . item_final[i]`.
    pub fn score(&self, u: usize, i: usize) -> f64 {
        self.user_final.row(u).dot(&self.item_final.row(i))
    }

    /// Scores of user `u` against every item.
    pub fn user_scores(&self, u: usize) -> Array1<f64> {
        self.item_final.dot(&self.user_final.row(u))
    }

    /// Highest-scoring items for `u` outside `masked` (sorted item indices).
    /// Ties go to the lower item index.
    pub fn recommend_topk(&self, u: usize, k: usize, masked: &[usize]) -> Vec<usize> {
        rank_top(self.user_scores(u).as_slice().unwrap(), k, masked)
    }
}

pub fn score(state: &PropagatedState, u: usize, i: usize) -> f64 {
    state.score(u, i)
}

pub fn recommend_topk(state: &PropagatedState, u: usize, k: usize, masked: &[usize]) -> Vec<usize> {
    state.recommend_topk(u, k, masked)
}

/// Top-`k` indices of `scores` excluding `masked`, by descending score then
/// ascending index.
pub fn rank_top(scores: &[f64], k: usize, masked: &[usize]) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..scores.len())
        .filter(|i| masked.binary_search(i).is_err())
        .collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let k = k.min(cand.len());
    if k == 0 {
        return Vec::new();
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp);
    cand
}

/// Mean over layers `0..=layers` of `adj^l * x`.
pub fn propagate_stacked(adj: &NormAdj, x: &Array2<f64>, layers: usize) -> Array2<f64> {
    let mut acc = x.clone();
    let mut cur = x.clone();
    for _ in 0..layers {
        cur = adj.mul_dense(&cur);
        acc += &cur;
    }
    acc /= (layers + 1) as f64;
    acc
}

/// Graph propagation of the behavior embeddings. Returns `(user_beh, item_beh)`.
pub fn propagate(params: &ModelParams, adj: &NormAdj, layers: usize) -> (Array2<f64>, Array2<f64>) {
    let nu = params.num_users();
    let x0 = ndarray::concatenate(Axis(0), &[params.user_emb.view(), params.item_emb.view()])
        .expect("embedding widths agree");
    let out = propagate_stacked(adj, &x0, layers);
    (out.slice(s![..nu, ..]).to_owned(), out.slice(s![nu.., ..]).to_owned())
}

/// Intermediate values of the fuser kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FusionCache {
    /// `num_items x d` projected features, in modality-name order.
    pub projected: Vec<Array2<f64>>,
    /// Column means of each projected matrix.
    pub projected_mean: Vec<Array1<f64>>,
    /// Softmax attention weight per modality.
    pub weights: Vec<f64>,
    pub shared: Array2<f64>,
    /// Mean of the projected matrices.
    pub projected_avg: Array2<f64>,
    pub gate: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Builds the multi-modal embeddings and the final scoring embeddings.
pub fn fuse_modalities(
    params: &ModelParams,
    graph: &InteractionGraph,
    neighbors: &UserItems,
    user_beh: Array2<f64>,
    item_beh: Array2<f64>,
) -> Result<PropagatedState> {
    fuse_with_cache(params, graph, neighbors, user_beh, item_beh).map(|(s, _)| s)
}

fn fuse_with_cache(
    params: &ModelParams,
    graph: &InteractionGraph,
    neighbors: &UserItems,
    user_beh: Array2<f64>,
    item_beh: Array2<f64>,
) -> Result<(PropagatedState, FusionCache)> {
    params.check_against(graph)?;
    let (nu, ni, d) = (graph.num_users, graph.num_items, params.dim());

    let mut projected = Vec::with_capacity(params.proj.len());
    let mut projected_mean = Vec::with_capacity(params.proj.len());
    let mut logits = Vec::with_capacity(params.proj.len());
    for (m, feats) in &graph.modality_features {
        let h = feats.dot(&params.proj[m].t());
        let mean = h.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(d));
        logits.push(params.attn[m].dot(&mean));
        projected.push(h);
        projected_mean.push(mean);
    }
    let weights = softmax(&logits);

    let mut shared = Array2::zeros((ni, d));
    let mut projected_avg = Array2::zeros((ni, d));
    for (h, &w) in projected.iter().zip(&weights) {
        shared.scaled_add(w, h);
        projected_avg.scaled_add(1.0 / projected.len() as f64, h);
    }

    let mut gate = item_beh.dot(&params.gate_w.t());
    gate += &params.gate_b;
    gate.mapv_inplace(sigmoid);

    // shared + g * (avg - shared)
    let mut item_mul = Array2::zeros((ni, d));
    Zip::from(&mut item_mul)
        .and(&shared)
        .and(&projected_avg)
        .and(&gate)
        .for_each(|o, &sh, &av, &g| *o = sh + g * (av - sh));

    let mut user_mul = Array2::zeros((nu, d));
    for (u, mut row) in user_mul.outer_iter_mut().enumerate() {
        let items = neighbors.items(u);
        if items.is_empty() {
            continue;
        }
        for &i in items {
            row += &item_mul.row(i);
        }
        row /= items.len() as f64;
    }

    let user_final = &user_beh + &user_mul;
    let item_final = &item_beh + &item_mul;
    let state = PropagatedState { user_beh, item_beh, user_mul, item_mul, user_final, item_final };
    let cache = FusionCache { projected, projected_mean, weights, shared, projected_avg, gate };
    Ok((state, cache))
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Gradients of a scalar loss with respect to each [`PropagatedState`] field.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrad {
    pub user_beh: Array2<f64>,
    pub item_beh: Array2<f64>,
    pub user_mul: Array2<f64>,
    pub item_mul: Array2<f64>,
    pub user_final: Array2<f64>,
    pub item_final: Array2<f64>,
}

impl StateGrad {
    pub fn zeros(num_users: usize, num_items: usize, d: usize) -> Self {
        let u = Array2::zeros((num_users, d));
        let i = Array2::zeros((num_items, d));
        StateGrad {
            user_beh: u.clone(),
            item_beh: i.clone(),
            user_mul: u.clone(),
            item_mul: i.clone(),
            user_final: u,
            item_final: i,
        }
    }

    pub fn for_state(state: &PropagatedState) -> Self {
        Self::zeros(state.num_users(), state.num_items(), state.user_final.ncols())
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: f64, other: &StateGrad) {
        self.user_beh.scaled_add(a, &other.user_beh);
        self.item_beh.scaled_add(a, &other.item_beh);
        self.user_mul.scaled_add(a, &other.user_mul);
        self.item_mul.scaled_add(a, &other.item_mul);
        self.user_final.scaled_add(a, &other.user_final);
        self.item_final.scaled_add(a, &other.item_final);
    }
}

/// Result of a forward pass together with what the backward pass needs.
#[derive(Debug, Clone)]
pub struct Forward {
    pub state: PropagatedState,
    pub cache: FusionCache,
}

/// Forward/backward machinery bound to one graph and one training edge set.
#[derive(Debug, Clone)]
pub struct Encoder<'g> {
    pub graph: &'g InteractionGraph,
    pub adj: NormAdj,
    /// Per-user neighbors in the edge set, used for `user_mul`.
    pub neighbors: UserItems,
    /// Per-item neighbors in the edge set.
    pub item_neighbors: Vec<Vec<usize>>,
    pub layers: usize,
}

impl<'g> Encoder<'g> {
    pub fn new(graph: &'g InteractionGraph, edges: &[Edge], layers: usize) -> Self {
        let neighbors = UserItems::from_edges(graph.num_users, edges);
        let mut item_neighbors = vec![Vec::new(); graph.num_items];
        for (u, items) in neighbors.lists.iter().enumerate() {
            for &i in items {
                item_neighbors[i].push(u);
            }
        }
        Encoder {
            graph,
            adj: build_normalized_adjacency(graph.num_users, graph.num_items, edges),
            neighbors,
            item_neighbors,
            layers,
        }
    }

    pub fn forward(&self, params: &ModelParams) -> Result<Forward> {
        let (user_beh, item_beh) = propagate(params, &self.adj, self.layers);
        let (state, cache) = fuse_with_cache(params, self.graph, &self.neighbors, user_beh, item_beh)?;
        Ok(Forward { state, cache })
    }

    pub fn state(&self, params: &ModelParams) -> Result<PropagatedState> {
        self.forward(params).map(|f| f.state)
    }

    /// Pulls state gradients back to parameter gradients. Feature matrices are
    /// frozen and receive nothing.
    pub fn backward(&self, params: &ModelParams, fwd: &Forward, grad: &StateGrad) -> ModelParams {
        let nu = self.graph.num_users;
        let ni = self.graph.num_items;
        let cache = &fwd.cache;
        let state = &fwd.state;
        let mut out = params.zeros_like();

        let mut g_ub = &grad.user_beh + &grad.user_final;
        let g_um = &grad.user_mul + &grad.user_final;
        let mut g_ib = &grad.item_beh + &grad.item_final;
        let mut g_im = &grad.item_mul + &grad.item_final;

        for (u, items) in self.neighbors.lists.iter().enumerate() {
            if items.is_empty() {
                continue;
            }
            let w = 1.0 / items.len() as f64;
            let gu = g_um.row(u);
            for &i in items {
                g_im.row_mut(i).scaled_add(w, &gu);
            }
        }

        let g_shared = &g_im * &cache.gate.mapv(|g| 1.0 - g);
        let g_avg = &g_im * &cache.gate;
        let mut g_z = &cache.projected_avg - &cache.shared;
        Zip::from(&mut g_z).and(&g_im).and(&cache.gate).for_each(|z, &gm, &g| {
            *z *= gm * g * (1.0 - g);
        });

        out.gate_w = g_z.t().dot(&state.item_beh);
        out.gate_b = g_z.sum_axis(Axis(0));
        g_ib += &g_z.dot(&params.gate_w);

        let n_mod = cache.projected.len();
        if n_mod > 0 {
            let g_w: Vec<f64> = cache.projected.iter().map(|h| (&g_shared * h).sum()).collect();
            let mix: f64 = cache.weights.iter().zip(&g_w).map(|(a, g)| a * g).sum();
            for (k, (m, feats)) in self.graph.modality_features.iter().enumerate() {
                let a = cache.weights[k];
                let g_logit = a * (g_w[k] - mix);
                out.attn.insert(m.clone(), &cache.projected_mean[k] * g_logit);
                let mut g_h = &g_avg / n_mod as f64;
                g_h.scaled_add(a, &g_shared);
                g_h += &(&params.attn[m] * (g_logit / ni as f64));
                out.proj.insert(m.clone(), g_h.t().dot(feats));
            }
        }

        let g_beh = ndarray::concatenate(Axis(0), &[g_ub.view(), g_ib.view()]).unwrap();
        // The normalized adjacency is symmetric, so the propagation operator is
        // its own adjoint.
        let g_x0 = propagate_stacked(&self.adj, &g_beh, self.layers);
        g_ub = g_x0.slice(s![..nu, ..]).to_owned();
        out.user_emb = g_ub;
        out.item_emb = g_x0.slice(s![nu.., ..]).to_owned();
        out
    }
}
