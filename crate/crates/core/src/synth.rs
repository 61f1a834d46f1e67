//! Planted-cluster synthetic datasets.
//!
//! Users and items are assigned to latent groups. A user-item pair in the same
//! group becomes an edge ten times as often as a cross-group pair, with both
//! rates scaled to hit the requested density. Item features are the item's
//! group centroid plus uniform noise, scaled to unit norm, one matrix per
//! modality.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{write_mmft, InteractionGraph};
use crate::rng;

pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
/// In-group to cross-group edge probability ratio.
pub const AFFINITY: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub modalities: usize,
    pub density: f64,
    pub groups: usize,
    pub feature_dim: usize,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { users: 200, items: 100, modalities: 2, density: 0.05, groups: 5, feature_dim: 16, noise: 2.0 }
    }
}

/// Name of the `m`-th modality.
pub fn modality_name(m: usize) -> String {
    match m {
        0 => "visual".into(),
        1 => "textual".into(),
        _ => format!("m{m}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub seed: u64,
    pub edges: usize,
    pub interactions: String,
    /// Modality name to feature file, relative to the manifest.
    pub features: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub seed: u64,
    /// `(user_id, item_id)` rows sorted by item, then user.
    pub rows: Vec<(String, String)>,
    pub features: BTreeMap<String, Array2<f32>>,
    pub user_groups: Vec<usize>,
    pub item_groups: Vec<usize>,
}

fn user_id(u: usize) -> String {
    format!("u{u:05}")
}

fn item_id(i: usize) -> String {
    format!("i{i:05}")
}

pub fn generate(config: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    let c = config;
    if !(c.density > 0.0 && c.density <= 1.0) {
        return Err(Error::Config(format!("density must lie in (0, 1], got {}", c.density)));
    }
    if c.users == 0 || c.items == 0 || c.groups == 0 || c.modalities == 0 || c.feature_dim == 0 {
        return Err(Error::Config("users, items, groups, modalities and feature_dim must be positive".into()));
    }
    if !(c.noise >= 0.0) {
        return Err(Error::Config(format!("noise must be non-negative, got {}", c.noise)));
    }
    let mut rng = rng::stream(seed, rng::SYNTH);
    let user_groups: Vec<usize> = (0..c.users).map(|_| rng.gen_range(0..c.groups)).collect();
    let item_groups: Vec<usize> = (0..c.items).map(|_| rng.gen_range(0..c.groups)).collect();

    let mut group_items = vec![Vec::new(); c.groups];
    for (i, &g) in item_groups.iter().enumerate() {
        group_items[g].push(i);
    }
    let mut group_users = vec![Vec::new(); c.groups];
    for (u, &g) in user_groups.iter().enumerate() {
        group_users[g].push(u);
    }
    let same: usize = user_groups.iter().map(|&g| group_items[g].len()).sum();
    let share = same as f64 / (c.users * c.items) as f64;
    let mut p_out = c.density / (1.0 + (AFFINITY - 1.0) * share);
    let mut p_in = AFFINITY * p_out;
    if p_in > 1.0 {
        p_in = 1.0;
        p_out = (c.density - share) / (1.0 - share);
        if !(0.0..=1.0).contains(&p_out) {
            return Err(Error::Config(format!("density {} is infeasible for this group layout", c.density)));
        }
    }

    let mut adj = vec![vec![false; c.items]; c.users];
    for (u, row) in adj.iter_mut().enumerate() {
        for (i, cell) in row.iter_mut().enumerate() {
            let p = if user_groups[u] == item_groups[i] { p_in } else { p_out };
            *cell = rng.gen::<f64>() < p;
        }
    }
    // Every node gets at least one edge, preferring its own group.
    for u in 0..c.users {
        if !adj[u].iter().any(|&x| x) {
            let pool = &group_items[user_groups[u]];
            let i = if pool.is_empty() { rng.gen_range(0..c.items) } else { pool[rng.gen_range(0..pool.len())] };
            adj[u][i] = true;
        }
    }
    for i in 0..c.items {
        if !(0..c.users).any(|u| adj[u][i]) {
            let pool = &group_users[item_groups[i]];
            let u = if pool.is_empty() { rng.gen_range(0..c.users) } else { pool[rng.gen_range(0..pool.len())] };
            adj[u][i] = true;
        }
    }
    let mut rows = Vec::new();
    for i in 0..c.items {
        for (u, row) in adj.iter().enumerate() {
            if row[i] {
                rows.push((user_id(u), item_id(i)));
            }
        }
    }

    let mut features = BTreeMap::new();
    for m in 0..c.modalities {
        let centroids = Array2::from_shape_fn((c.groups, c.feature_dim), |_| rng.gen_range(-1.0..1.0));
        let mut f = Array2::from_shape_fn((c.items, c.feature_dim), |(i, k)| {
            centroids[[item_groups[i], k]] + c.noise * rng.gen_range(-1.0..1.0)
        });
        for mut row in f.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        }
        let f = f.mapv(|x: f64| x as f32);
        features.insert(modality_name(m), f);
    }
    Ok(SynthDataset { config: c.clone(), seed, rows, features, user_groups, item_groups })
}

impl SynthDataset {
    /// The in-memory graph, identical to loading the written files.
    pub fn graph(&self) -> Result<InteractionGraph> {
        let features = self.features.iter().map(|(k, v)| (k.clone(), v.mapv(f64::from))).collect();
        InteractionGraph::from_rows(self.rows.iter().map(|(u, i)| (u.as_str(), i.as_str())), features)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            config: self.config.clone(),
            seed: self.seed,
            edges: self.rows.len(),
            interactions: INTERACTIONS_FILE.into(),
            features: self.features.keys().map(|m| (m.clone(), format!("features_{m}.mmft"))).collect(),
        }
    }

    /// Writes `interactions.csv`, one MMFT file per modality, and the manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(INTERACTIONS_FILE)).map_err(csv_error)?;
        w.write_record(["user_id", "item_id"]).map_err(csv_error)?;
        for (u, i) in &self.rows {
            w.write_record([u, i]).map_err(csv_error)?;
        }
        w.flush()?;
        let manifest = self.manifest();
        for (m, file) in &manifest.features {
            write_mmft(&dir.join(file), &self.features[m])?;
        }
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

/// Loads a dataset directory written by [`SynthDataset::write`] or laid out
/// the same way by hand.
pub fn load_dir(dir: &Path) -> Result<InteractionGraph> {
    let manifest = Manifest::read(dir)?;
    let features = manifest.features.iter().map(|(m, f)| (m.clone(), dir.join(f))).collect();
    crate::graph::load_interactions(&dir.join(&manifest.interactions), &features)
}
