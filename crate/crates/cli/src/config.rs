//! `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key may appear
//! once; unknown keys are rejected. Modality feature files use
//! `features.<modality> = PATH`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use unrec::{Error, HyperParams, Mode, Result, View};

/// Which metric families `evaluate` emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewChoice {
    User,
    Item,
    Both,
}

impl ViewChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "user" | "user_centric" => Ok(ViewChoice::User),
            "item" | "item_centric" => Ok(ViewChoice::Item),
            "both" => Ok(ViewChoice::Both),
            other => Err(Error::Config(format!("unknown view `{other}` (expected user, item, or both)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ViewChoice::User => "user",
            ViewChoice::Item => "item",
            ViewChoice::Both => "both",
        }
    }

    pub fn views(&self) -> Vec<View> {
        match self {
            ViewChoice::User => vec![View::UserCentric],
            ViewChoice::Item => vec![View::ItemCentric],
            ViewChoice::Both => vec![View::UserCentric, View::ItemCentric],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub hyper: HyperParams,
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide, 1 is bit-deterministic.
    pub threads: usize,
    /// Dataset directory holding a manifest.
    pub data: Option<PathBuf>,
    /// Raw interaction CSV, used when `data` is unset.
    pub interactions: Option<PathBuf>,
    pub features: BTreeMap<String, PathBuf>,
    pub split: Option<PathBuf>,
    /// Forget request JSON.
    pub forget: Option<PathBuf>,
    /// Precomputed retain/forget CSV; takes precedence over `forget`.
    pub partition: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub method: Option<Mode>,
    pub view: ViewChoice,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            hyper: HyperParams::default(),
            seed: 0,
            threads: 0,
            data: None,
            interactions: None,
            features: BTreeMap::new(),
            split: None,
            forget: None,
            partition: None,
            checkpoint: None,
            gold: None,
            method: None,
            view: ViewChoice::User,
            out: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|x| num(key, x.trim())).collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |e: Error| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_owned()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            config.set(key, value.trim()).map_err(at)?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key, as if it appeared in the file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let h = &mut self.hyper;
        let path = || Some(PathBuf::from(value));
        match key {
            "dim" => h.dim = num(key, value)?,
            "lr" => h.lr = num(key, value)?,
            "lambda_c" => h.lambda_c = num(key, value)?,
            "lambda_reg" => h.lambda_reg = num(key, value)?,
            "tau" => h.tau = num(key, value)?,
            "alpha" => h.alpha = num(key, value)?,
            "layers" => h.layers = num(key, value)?,
            "batch_size" => h.batch_size = num(key, value)?,
            "max_epochs" => h.max_epochs = num(key, value)?,
            "patience" => h.patience = num(key, value)?,
            "neg_per_pos" => h.neg_per_pos = num(key, value)?,
            "ks" => h.topk = list(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            "data" => self.data = path(),
            "interactions" => self.interactions = path(),
            "split" => self.split = path(),
            "forget" => self.forget = path(),
            "partition" => self.partition = path(),
            "checkpoint" => self.checkpoint = path(),
            "gold" => self.gold = path(),
            "method" => self.method = Some(Mode::parse(value)?),
            "view" => self.view = ViewChoice::parse(value)?,
            "out" => self.out = path(),
            _ => match key.strip_prefix("features.") {
                Some(m) if !m.is_empty() => {
                    self.features.insert(m.to_owned(), PathBuf::from(value));
                }
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            },
        }
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Every key in a fixed order; unset paths are omitted.
    pub fn serialize(&self) -> String {
        let h = &self.hyper;
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(out, "{k} = {v}").unwrap();
        kv("seed", &self.seed);
        kv("threads", &self.threads);
        kv("dim", &h.dim);
        kv("lr", &h.lr);
        kv("lambda_c", &h.lambda_c);
        kv("lambda_reg", &h.lambda_reg);
        kv("tau", &h.tau);
        kv("alpha", &h.alpha);
        kv("layers", &h.layers);
        kv("batch_size", &h.batch_size);
        kv("max_epochs", &h.max_epochs);
        kv("patience", &h.patience);
        kv("neg_per_pos", &h.neg_per_pos);
        let ks: Vec<String> = h.topk.iter().map(|k| k.to_string()).collect();
        kv("ks", &ks.join(","));
        kv("view", &self.view.as_str());
        if let Some(m) = self.method {
            kv("method", &m.as_str());
        }
        let paths = [
            ("data", &self.data),
            ("interactions", &self.interactions),
            ("split", &self.split),
            ("forget", &self.forget),
            ("partition", &self.partition),
            ("checkpoint", &self.checkpoint),
            ("gold", &self.gold),
            ("out", &self.out),
        ];
        for (k, p) in paths {
            if let Some(p) = p {
                kv(k, &p.display());
            }
        }
        for (m, p) in &self.features {
            kv(&format!("features.{m}"), &p.display());
        }
        out
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))
    }

    pub fn require<'a>(&self, key: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
        value.as_deref().ok_or_else(|| Error::Config(format!("`{key}` is required for this command")))
    }
}
