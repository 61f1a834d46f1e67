//! Interaction data: ingestion, splitting, forget requests, and adjacency.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// A `(user_index, item_index)` interaction.
pub type Edge = (usize, usize);

/// Bipartite user-item graph plus frozen per-modality item features.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionGraph {
    pub num_users: usize,
    pub num_items: usize,
    /// Unique edges, sorted by `(user, item)`.
    pub edges: Vec<Edge>,
    /// `num_items x d_m` matrix per modality, keyed by modality id.
    pub modality_features: BTreeMap<String, Array2<f64>>,
    /// External id of each dense user index.
    pub user_ids: Vec<String>,
    /// External id of each dense item index.
    pub item_ids: Vec<String>,
}

impl InteractionGraph {
    /// Builds a graph from `(user_id, item_id)` rows, assigning dense indices by
    /// first appearance and dropping duplicate rows.
    pub fn from_rows<I, S>(rows: I, features: BTreeMap<String, Array2<f64>>) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S)>,
        S: AsRef<str>,
    {
        let mut users = IdMap::default();
        let mut items = IdMap::default();
        let mut seen = BTreeSet::new();
        for (u, i) in rows {
            let u = users.intern(u.as_ref());
            let i = items.intern(i.as_ref());
            seen.insert((u, i));
        }
        let graph = InteractionGraph {
            num_users: users.ids.len(),
            num_items: items.ids.len(),
            edges: seen.into_iter().collect(),
            modality_features: features,
            user_ids: users.ids,
            item_ids: items.ids,
        };
        graph.check_features()?;
        Ok(graph)
    }

    fn check_features(&self) -> Result<()> {
        for (name, m) in &self.modality_features {
            if m.nrows() != self.num_items {
                return Err(Error::Dimension(format!(
                    "modality `{name}` has {} rows, expected {} items",
                    m.nrows(),
                    self.num_items
                )));
            }
        }
        Ok(())
    }

    pub fn modality_dims(&self) -> BTreeMap<String, usize> {
        self.modality_features
            .iter()
            .map(|(k, v)| (k.clone(), v.ncols()))
            .collect()
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_ids.iter().position(|x| x == id)
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_ids.iter().position(|x| x == id)
    }
}

#[derive(Default)]
struct IdMap {
    index: HashMap<String, usize>,
    ids: Vec<String>,
}

impl IdMap {
    fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.index.insert(id.to_owned(), i);
        self.ids.push(id.to_owned());
        i
    }
}

/// Reads an interaction CSV (`user_id,item_id[,timestamp]`) and MMFT feature
/// files, one per modality.
pub fn load_interactions(
    path: &Path,
    feature_paths: &BTreeMap<String, PathBuf>,
) -> Result<InteractionGraph> {
    let file_name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(&file_name, e))?;

    let headers = reader.headers().map_err(|e| csv_error(&file_name, e))?.clone();
    if headers.len() < 2 || &headers[0] != "user_id" || &headers[1] != "item_id" {
        return Err(Error::Parse {
            file: file_name,
            line: 1,
            msg: "expected header `user_id,item_id[,timestamp]`".into(),
        });
    }

    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(&file_name, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < 2 || rec.len() > 3 || rec[0].is_empty() || rec[1].is_empty() {
            return Err(Error::Parse {
                file: file_name,
                line,
                msg: format!("expected 2 or 3 non-empty fields, got {:?}", rec),
            });
        }
        rows.push((rec[0].to_owned(), rec[1].to_owned()));
    }

    let mut features = BTreeMap::new();
    for (name, p) in feature_paths {
        features.insert(name.clone(), read_mmft(p)?.mapv(f64::from));
    }
    InteractionGraph::from_rows(rows, features)
}

fn csv_error(file: &str, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            file: file.to_owned(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

const MMFT_MAGIC: &[u8; 4] = b"MMFT";

/// Reads an MMFT feature matrix: magic `MMFT`, u32 rows, u32 cols, then
/// row-major little-endian f32.
pub fn read_mmft(path: &Path) -> Result<Array2<f32>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_mmft(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_mmft(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < 12 || &bytes[..4] != MMFT_MAGIC {
        return Err(Error::Format("missing MMFT header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != rows * cols * 4 {
        return Err(Error::Format(format!(
            "MMFT body holds {} bytes, header promises {rows}x{cols}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked above"))
}

pub fn encode_mmft(m: &Array2<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + m.len() * 4);
    out.extend_from_slice(MMFT_MAGIC);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_mmft(path: &Path, m: &Array2<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_mmft(m))?;
    w.flush()?;
    Ok(())
}

/// Train/validation/test edge sets, each sorted by `(user, item)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<Edge>,
    pub valid: Vec<Edge>,
    pub test: Vec<Edge>,
}

/// Per-user 8:1:1 split. Users with fewer than three edges keep everything in
/// train; everyone else gets at least one validation and one test edge.
pub fn split_dataset(graph: &InteractionGraph, seed: u64) -> DatasetSplit {
    let mut rng = rng::stream(seed, rng::SPLIT);
    let by_user = UserItems::from_edges(graph.num_users, &graph.edges);
    let mut split = DatasetSplit {
        train: Vec::with_capacity(graph.edges.len()),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for (u, items) in by_user.lists.iter().enumerate() {
        let n = items.len();
        if n < 3 {
            split.train.extend(items.iter().map(|&i| (u, i)));
            continue;
        }
        let mut shuffled = items.clone();
        shuffled.shuffle(&mut rng);
        let held = (n / 10).max(1);
        split.test.extend(shuffled[..held].iter().map(|&i| (u, i)));
        split.valid.extend(shuffled[held..2 * held].iter().map(|&i| (u, i)));
        split.train.extend(shuffled[2 * held..].iter().map(|&i| (u, i)));
    }
    split.train.sort_unstable();
    split.valid.sort_unstable();
    split.test.sort_unstable();
    split
}

/// Unlearning request categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgetKind {
    Interaction,
    UserPreference,
    BiasedItem,
    Account,
    License,
}

impl ForgetKind {
    pub const ALL: [ForgetKind; 5] = [
        ForgetKind::Interaction,
        ForgetKind::UserPreference,
        ForgetKind::BiasedItem,
        ForgetKind::Account,
        ForgetKind::License,
    ];
}

/// A resolved forget request over dense indices.
///
/// The kind determines which target list must be non-empty; the other lists may
/// also carry targets, which lets one request forget users and items together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForgetSpec {
    pub kind: ForgetKind,
    pub edges: Vec<Edge>,
    pub users: Vec<usize>,
    pub items: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ForgetSpecFile {
    kind: ForgetKind,
    #[serde(default)]
    edges: Vec<(String, String)>,
    #[serde(default)]
    users: Vec<String>,
    #[serde(default)]
    items: Vec<String>,
}

impl ForgetSpec {
    pub fn edges(kind: ForgetKind, edges: Vec<Edge>) -> Self {
        ForgetSpec { kind, edges, users: vec![], items: vec![] }
    }

    pub fn users(users: Vec<usize>) -> Self {
        ForgetSpec { kind: ForgetKind::Account, edges: vec![], users, items: vec![] }
    }

    pub fn items(kind: ForgetKind, items: Vec<usize>) -> Self {
        ForgetSpec { kind, edges: vec![], users: vec![], items }
    }

    /// Parses the JSON request format, resolving external ids against `graph`.
    pub fn from_json(text: &str, graph: &InteractionGraph) -> Result<Self> {
        let file: ForgetSpecFile = serde_json::from_str(text)?;
        let user = |id: &str| {
            graph
                .user_index(id)
                .ok_or_else(|| Error::NotFound(format!("user `{id}`")))
        };
        let item = |id: &str| {
            graph
                .item_index(id)
                .ok_or_else(|| Error::NotFound(format!("item `{id}`")))
        };
        Ok(ForgetSpec {
            kind: file.kind,
            edges: file
                .edges
                .iter()
                .map(|(u, i)| Ok((user(u)?, item(i)?)))
                .collect::<Result<_>>()?,
            users: file.users.iter().map(|u| user(u)).collect::<Result<_>>()?,
            items: file.items.iter().map(|i| item(i)).collect::<Result<_>>()?,
        })
    }

    pub fn to_json(&self, graph: &InteractionGraph) -> String {
        let file = ForgetSpecFile {
            kind: self.kind,
            edges: self
                .edges
                .iter()
                .map(|&(u, i)| (graph.user_ids[u].clone(), graph.item_ids[i].clone()))
                .collect(),
            users: self.users.iter().map(|&u| graph.user_ids[u].clone()).collect(),
            items: self.items.iter().map(|&i| graph.item_ids[i].clone()).collect(),
        };
        serde_json::to_string_pretty(&file).expect("plain data serializes")
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty() && self.users.is_empty() && self.items.is_empty()
    }

    /// Checks the request against the training edges and index ranges.
    pub fn validate(&self, num_users: usize, num_items: usize, train: &[Edge]) -> Result<()> {
        let primary_empty = match self.kind {
            ForgetKind::Interaction | ForgetKind::UserPreference => self.edges.is_empty(),
            ForgetKind::Account => self.users.is_empty(),
            ForgetKind::BiasedItem | ForgetKind::License => self.items.is_empty(),
        };
        if primary_empty {
            return Err(Error::Config(format!("{:?} request has no targets", self.kind)));
        }
        if let Some(u) = self.users.iter().find(|&&u| u >= num_users) {
            return Err(Error::NotFound(format!("user index {u} (have {num_users})")));
        }
        if let Some(i) = self.items.iter().find(|&&i| i >= num_items) {
            return Err(Error::NotFound(format!("item index {i} (have {num_items})")));
        }
        for e in &self.edges {
            if train.binary_search(e).is_err() {
                return Err(Error::NotFound(format!("edge {e:?} is not a training edge")));
            }
        }
        Ok(())
    }
}

/// Disjoint retain/forget split of the training edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub retain: Vec<Edge>,
    pub forget: Vec<Edge>,
}

/// Resolves a forget request: listed edges plus every training edge incident to
/// a listed user or item.
pub fn mark_forget(split: &DatasetSplit, spec: &ForgetSpec) -> Result<Partition> {
    // Index ranges need the owning graph; see `mark_forget_checked`.
    spec.validate(usize::MAX, usize::MAX, &split.train)?;
    Ok(partition_edges(&split.train, spec))
}

/// [`mark_forget`] with index-range validation against the owning graph.
pub fn mark_forget_checked(
    graph: &InteractionGraph,
    split: &DatasetSplit,
    spec: &ForgetSpec,
) -> Result<Partition> {
    spec.validate(graph.num_users, graph.num_items, &split.train)?;
    Ok(partition_edges(&split.train, spec))
}

fn partition_edges(train: &[Edge], spec: &ForgetSpec) -> Partition {
    let users: BTreeSet<usize> = spec.users.iter().copied().collect();
    let items: BTreeSet<usize> = spec.items.iter().copied().collect();
    let edges: BTreeSet<Edge> = spec.edges.iter().copied().collect();
    let (forget, retain) = train.iter().partition(|e| {
        edges.contains(e) || users.contains(&e.0) || items.contains(&e.1)
    });
    Partition { retain, forget }
}

/// Per-user sorted item lists for an edge set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserItems {
    pub lists: Vec<Vec<usize>>,
}

impl UserItems {
    pub fn from_edges(num_users: usize, edges: &[Edge]) -> Self {
        let mut lists = vec![Vec::new(); num_users];
        for &(u, i) in edges {
            lists[u].push(i);
        }
        for l in &mut lists {
            l.sort_unstable();
            l.dedup();
        }
        UserItems { lists }
    }

    pub fn items(&self, u: usize) -> &[usize] {
        &self.lists[u]
    }

    pub fn contains(&self, u: usize, i: usize) -> bool {
        self.lists[u].binary_search(&i).is_ok()
    }

    pub fn num_users(&self) -> usize {
        self.lists.len()
    }
}

/// Symmetric normalized bipartite adjacency over `num_users + num_items` nodes
/// in compressed-row layout. Users occupy rows `0..num_users`, item `i` sits at
/// row `num_users + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormAdj {
    pub num_users: usize,
    pub num_items: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl NormAdj {
    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `self * x` for a dense `num_nodes x d` matrix.
    pub fn mul_dense(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.num_nodes(), "adjacency/embedding node count");
        let mut out = Array2::zeros(x.raw_dim());
        for (r, mut out_row) in out.outer_iter_mut().enumerate() {
            for (c, w) in self.row(r) {
                out_row.scaled_add(w, &x.row(c));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.num_nodes();
        let mut m = Array2::zeros((n, n));
        for r in 0..n {
            for (c, w) in self.row(r) {
                m[[r, c]] = w;
            }
        }
        m
    }
}

/// LightGCN-style `D^-1/2 A D^-1/2` over the bipartite graph of `edges`.
pub fn build_normalized_adjacency(num_users: usize, num_items: usize, edges: &[Edge]) -> NormAdj {
    let by_user = UserItems::from_edges(num_users, edges);
    let mut by_item = vec![Vec::new(); num_items];
    for (u, items) in by_user.lists.iter().enumerate() {
        for &i in items {
            by_item[i].push(u);
        }
    }
    let user_deg: Vec<f64> = by_user.lists.iter().map(|l| l.len() as f64).collect();
    let item_deg: Vec<f64> = by_item.iter().map(|l| l.len() as f64).collect();

    let mut row_ptr = Vec::with_capacity(num_users + num_items + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for (u, items) in by_user.lists.iter().enumerate() {
        for &i in items {
            col_idx.push(num_users + i);
            values.push(1.0 / (user_deg[u] * item_deg[i]).sqrt());
        }
        row_ptr.push(col_idx.len());
    }
    for (i, users) in by_item.iter().enumerate() {
        for &u in users {
            col_idx.push(u);
            values.push(1.0 / (user_deg[u] * item_deg[i]).sqrt());
        }
        row_ptr.push(col_idx.len());
    }
    NormAdj { num_users, num_items, row_ptr, col_idx, values }
}

/// Writes edge sets as `user_id,item_id,set` rows using external ids.
pub fn write_edge_sets(
    path: &Path,
    graph: &InteractionGraph,
    sets: &[(&str, &[Edge])],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "user_id,item_id,set")?;
    for (name, edges) in sets {
        for &(u, i) in *edges {
            writeln!(w, "{},{},{}", graph.user_ids[u], graph.item_ids[i], name)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_edge_sets`], grouping edges by set name.
pub fn read_edge_sets(path: &Path, graph: &InteractionGraph) -> Result<BTreeMap<String, Vec<Edge>>> {
    let file_name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(&file_name, e))?;
    let users: HashMap<&str, usize> =
        graph.user_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let items: HashMap<&str, usize> =
        graph.item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut out: BTreeMap<String, Vec<Edge>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(&file_name, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Parse { file: file_name.clone(), line, msg };
        if rec.len() != 3 {
            return Err(bad("expected user_id,item_id,set".into()));
        }
        let u = *users.get(&rec[0]).ok_or_else(|| bad(format!("unknown user `{}`", &rec[0])))?;
        let i = *items.get(&rec[1]).ok_or_else(|| bad(format!("unknown item `{}`", &rec[1])))?;
        out.entry(rec[2].to_owned()).or_default().push((u, i));
    }
    for v in out.values_mut() {
        v.sort_unstable();
    }
    Ok(out)
}

impl DatasetSplit {
    pub fn write(&self, path: &Path, graph: &InteractionGraph) -> Result<()> {
        write_edge_sets(
            path,
            graph,
            &[("train", &self.train), ("valid", &self.valid), ("test", &self.test)],
        )
    }

    pub fn read(path: &Path, graph: &InteractionGraph) -> Result<Self> {
        let mut sets = read_edge_sets(path, graph)?;
        Ok(DatasetSplit {
            train: sets.remove("train").unwrap_or_default(),
            valid: sets.remove("valid").unwrap_or_default(),
            test: sets.remove("test").unwrap_or_default(),
        })
    }
}

impl Partition {
    pub fn write(&self, path: &Path, graph: &InteractionGraph) -> Result<()> {
        write_edge_sets(path, graph, &[("retain", &self.retain), ("forget", &self.forget)])
    }

    pub fn read(path: &Path, graph: &InteractionGraph) -> Result<Self> {
        let mut sets = read_edge_sets(path, graph)?;
        Ok(Partition {
            retain: sets.remove("retain").unwrap_or_default(),
            forget: sets.remove("forget").unwrap_or_default(),
        })
    }
}
