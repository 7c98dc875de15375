//! Run configuration: a flat TOML file, `GIVF_*` environment variables and
//! command-line overrides, layered in that order over the defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::CliError;

pub const ENV_PREFIX: &str = "GIVF_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub base: Option<PathBuf>,
    pub learn: Option<PathBuf>,
    pub query: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    /// Artifacts go here unless a path is given explicitly.
    pub out_dir: PathBuf,
    pub index: Option<PathBuf>,
    /// Expected dimension; checked against the data when set.
    pub dim: Option<usize>,

    pub k: usize,
    pub m: usize,
    pub l: usize,
    pub grouping: bool,
    pub rotation: bool,
    pub normalize: bool,

    pub kmeans_iters: usize,
    /// `auto`, `exact` or `graph`. `auto` uses the graph for K ≥ 65536.
    pub kmeans_assigner: String,
    pub pq_iters: usize,
    pub opq_rounds: usize,
    pub pq_train_max: usize,
    pub max_links: usize,
    pub ef_construction: usize,
    /// Beam width used to route base points to regions.
    pub build_ef_search: usize,
    pub seed: u64,

    pub nprobe: Vec<usize>,
    pub tau: Vec<f32>,
    pub candidates: Vec<usize>,
    pub top_k: usize,
    pub ef_search: usize,
    pub prune: bool,
    pub rerank: bool,
    pub recall_at: Vec<usize>,
    pub gt_k: usize,
    pub timing: bool,
    pub runs: usize,
    pub plot: bool,
    /// Row of the query file used by `search`.
    pub query_index: usize,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            base: None,
            learn: None,
            query: None,
            gt: None,
            out_dir: PathBuf::from("givf-out"),
            index: None,
            dim: None,
            k: 4096,
            m: 16,
            l: 64,
            grouping: true,
            rotation: true,
            normalize: false,
            kmeans_iters: 20,
            kmeans_assigner: "auto".into(),
            pq_iters: 15,
            opq_rounds: 4,
            pq_train_max: 65_536,
            max_links: 32,
            ef_construction: 256,
            build_ef_search: 128,
            seed: 0,
            nprobe: vec![16],
            tau: vec![0.5],
            candidates: vec![10_000],
            top_k: 100,
            ef_search: 128,
            prune: true,
            rerank: true,
            recall_at: vec![1, 10, 100],
            gt_k: 100,
            timing: false,
            runs: 3,
            plot: false,
            query_index: 0,
            threads: None,
        }
    }
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "base",
    "learn",
    "query",
    "gt",
    "out_dir",
    "index",
    "dim",
    "k",
    "m",
    "l",
    "grouping",
    "rotation",
    "normalize",
    "kmeans_iters",
    "kmeans_assigner",
    "pq_iters",
    "opq_rounds",
    "pq_train_max",
    "max_links",
    "ef_construction",
    "build_ef_search",
    "seed",
    "nprobe",
    "tau",
    "candidates",
    "top_k",
    "ef_search",
    "prune",
    "rerank",
    "recall_at",
    "gt_k",
    "timing",
    "runs",
    "plot",
    "query_index",
    "threads",
];

const LIST_KEYS: &[&str] = &["nprobe", "tau", "candidates", "recall_at"];
const STRING_KEYS: &[&str] = &["base", "learn", "query", "gt", "out_dir", "index", "kmeans_assigner"];

fn bad(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Parses a raw override string into a typed value for `key`.
pub fn coerce(key: &str, raw: &str) -> Result<Value, CliError> {
    if !KEYS.contains(&key) {
        return Err(bad(key, "unknown key"));
    }
    let raw = raw.trim();
    if STRING_KEYS.contains(&key) {
        return Ok(Value::String(raw.to_string()));
    }
    let scalar = |s: &str| -> Result<Value, CliError> {
        let s = s.trim();
        format!("v = {s}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .ok_or_else(|| bad(key, format!("cannot parse `{s}`")))
    };
    if LIST_KEYS.contains(&key) {
        if raw.starts_with('[') {
            return scalar(raw);
        }
        let items = raw.split(',').map(scalar).collect::<Result<Vec<_>, _>>()?;
        return Ok(Value::Array(items));
    }
    scalar(raw)
}

/// Builds the configuration from (lowest to highest precedence) the
/// defaults, an optional TOML file, `GIVF_<KEY>` environment variables and
/// explicit `key=value` overrides.
pub fn load_config(
    file: Option<&Path>,
    env: &BTreeMap<String, String>,
    overrides: &[(String, String)],
) -> Result<RunConfig, CliError> {
    let mut merged = Table::try_from(RunConfig::default()).map_err(|e| bad("defaults", e.to_string()))?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let table: Table = text.parse().map_err(|e: toml::de::Error| bad("config", e.to_string()))?;
        for (key, value) in table {
            if !KEYS.contains(&key.as_str()) {
                return Err(bad(&key, "unknown key in config file"));
            }
            let value = match value {
                Value::Integer(_) | Value::Float(_) if LIST_KEYS.contains(&key.as_str()) => Value::Array(vec![value]),
                v => v,
            };
            merged.insert(key, value);
        }
    }
    for key in KEYS {
        let var = format!("{ENV_PREFIX}{}", key.to_uppercase());
        if let Some(raw) = env.get(&var) {
            merged.insert(key.to_string(), coerce(key, raw)?);
        }
    }
    for (key, raw) in overrides {
        merged.insert(key.clone(), coerce(key, raw)?);
    }
    let cfg: RunConfig = Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| bad("config", e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// `GIVF_*` variables of the current process.
pub fn process_env() -> BTreeMap<String, String> {
    std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect()
}

impl RunConfig {
    /// Range checks that need no data.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.k == 0 {
            return Err(bad("k", "must be at least 1"));
        }
        if self.m == 0 {
            return Err(bad("m", "must be at least 1"));
        }
        if let Some(d) = self.dim {
            self.check_dim(d)?;
        }
        if self.grouping && (self.l == 0 || self.l >= self.k) {
            return Err(bad("l", format!("{} must be in [1, k={})", self.l, self.k)));
        }
        if self.tau.is_empty() {
            return Err(bad("tau", "needs at least one value"));
        }
        for &t in &self.tau {
            if !(t > 0.0 && t <= 1.0) {
                return Err(bad("tau", format!("{t} is outside (0, 1]")));
            }
        }
        if self.nprobe.is_empty() || self.nprobe.iter().any(|&p| p == 0 || p > self.k) {
            return Err(bad("nprobe", format!("values must be in [1, k={}]", self.k)));
        }
        if self.candidates.is_empty() || self.candidates.contains(&0) {
            return Err(bad("candidates", "values must be at least 1"));
        }
        if self.recall_at.is_empty() || self.recall_at.contains(&0) {
            return Err(bad("recall_at", "values must be at least 1"));
        }
        for (field, v) in [
            ("top_k", self.top_k),
            ("ef_search", self.ef_search),
            ("ef_construction", self.ef_construction),
            ("build_ef_search", self.build_ef_search),
            ("kmeans_iters", self.kmeans_iters),
            ("pq_iters", self.pq_iters),
            ("gt_k", self.gt_k),
            ("runs", self.runs),
        ] {
            if v == 0 {
                return Err(bad(field, "must be at least 1"));
            }
        }
        if self.pq_train_max < 256 {
            return Err(bad("pq_train_max", "must be at least 256"));
        }
        if self.max_links < 2 {
            return Err(bad("max_links", "must be at least 2"));
        }
        if !matches!(self.kmeans_assigner.as_str(), "auto" | "exact" | "graph") {
            return Err(bad("kmeans_assigner", "must be `auto`, `exact` or `graph`"));
        }
        if self.threads == Some(0) {
            return Err(bad("threads", "must be at least 1"));
        }
        Ok(())
    }

    pub fn check_dim(&self, d: usize) -> Result<(), CliError> {
        if let Some(expected) = self.dim {
            if expected != d {
                return Err(bad("dim", format!("configured {expected}, data has {d}")));
            }
        }
        if d == 0 || d % self.m != 0 {
            return Err(bad("m", format!("{} does not divide the dimension {d}", self.m)));
        }
        Ok(())
    }

    /// The path under `field`, which must be set and exist.
    pub fn input(&self, field: &str) -> Result<&Path, CliError> {
        let path = match field {
            "base" => &self.base,
            "learn" => &self.learn,
            "query" => &self.query,
            "gt" => &self.gt,
            _ => unreachable!("not an input field: {field}"),
        };
        let path = path.as_deref().ok_or_else(|| bad(field, "no path given"))?;
        if !path.is_file() {
            return Err(bad(field, format!("{} does not exist", path.display())));
        }
        Ok(path)
    }

    pub fn coarse_path(&self) -> PathBuf {
        self.out_dir.join("coarse.fvecs")
    }

    pub fn trained_path(&self) -> PathBuf {
        self.out_dir.join("trained.givf")
    }

    pub fn index_path(&self) -> PathBuf {
        self.index.clone().unwrap_or_else(|| self.out_dir.join("index.givf"))
    }

    pub fn csv_path(&self) -> PathBuf {
        self.out_dir.join("eval.csv")
    }

    pub fn manifest_path(&self, command: &str) -> PathBuf {
        self.out_dir.join(format!("{command}.manifest.json"))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
