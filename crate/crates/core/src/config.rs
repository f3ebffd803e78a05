//! Strict TOML run configuration.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! preset = "tiny-mamba-moe"   # or `variant = "mamba"` for the tiny defaults
//! n_experts = 8               # any model field overrides the preset
//!
//! [train]
//! task = "associative-recall"
//! steps = 5000
//!
//! [bench]
//! lengths = [128, 512, 2048]
//!
//! [paths]
//! out = "runs/a"
//! ```
//!
//! Unknown keys are fatal. Paths may be overridden with `MAMBAMOE_OUT`,
//! `MAMBAMOE_CHECKPOINT_DIR` and `MAMBAMOE_METRICS_DIR`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::SweepOptions;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::moe::ExpertKind;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub variant: Option<Variant>,
    pub n_layers: Option<usize>,
    pub d_model: Option<usize>,
    pub expand: Option<usize>,
    pub d_state: Option<usize>,
    pub dt_rank: Option<usize>,
    pub d_conv: Option<usize>,
    pub n_experts: Option<usize>,
    pub d_ff: Option<usize>,
    pub expert_kind: Option<ExpertKind>,
    pub vocab_size: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub n_heads: Option<usize>,
    pub tie_embeddings: Option<bool>,
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut c = match (&self.preset, self.variant) {
            (Some(name), _) => ModelConfig::preset(name)?,
            (None, Some(v)) => ModelConfig::tiny(v),
            (None, None) => return Err(Error::Config("[model] needs `preset` or `variant`".into())),
        };
        if let Some(v) = self.variant {
            if v != c.variant {
                c.variant = v;
                if !v.uses_moe() {
                    c.n_experts = 1;
                }
            }
        }
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(x) = self.$f { c.$f = x; })*};
        }
        set!(n_layers, d_model, expand, d_state, dt_rank, d_conv, n_experts, d_ff, expert_kind, vocab_size, max_seq_len, n_heads, tie_embeddings);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_dir: Option<PathBuf>,
}

impl Paths {
    pub const ENV_OUT: &'static str = "MAMBAMOE_OUT";
    pub const ENV_CHECKPOINT_DIR: &'static str = "MAMBAMOE_CHECKPOINT_DIR";
    pub const ENV_METRICS_DIR: &'static str = "MAMBAMOE_METRICS_DIR";

    pub fn apply_env(&mut self) {
        let get = |k: &str| std::env::var_os(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        if let Some(p) = get(Self::ENV_OUT) {
            self.out = Some(p);
        }
        if let Some(p) = get(Self::ENV_CHECKPOINT_DIR) {
            self.checkpoint_dir = Some(p);
        }
        if let Some(p) = get(Self::ENV_METRICS_DIR) {
            self.metrics_dir = Some(p);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    model: ModelSection,
    train: Option<TrainConfig>,
    bench: Option<SweepOptions>,
    #[serde(default)]
    paths: Paths,
    seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub bench: SweepOptions,
    pub paths: Paths,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_model(model: ModelConfig) -> Self {
        Self { model, train: None, bench: SweepOptions::default(), paths: Paths::default(), seed: 0 }
    }

    /// Training settings, falling back to defaults, with the run seed applied.
    pub fn train_or_default(&self) -> TrainConfig {
        let mut t = self.train.clone().unwrap_or_default();
        if self.train.is_none() {
            t.seed = self.seed;
        }
        t
    }
}

/// Every key accepted anywhere in a run configuration.
fn known_keys() -> Vec<String> {
    let mut keys: Vec<String> = ["model", "train", "bench", "paths", "seed", "preset", "variant"].map(String::from).to_vec();
    let model = serde_json::to_value(ModelConfig::tiny(Variant::MambaMoe)).expect("serializable");
    let train = serde_json::to_value(TrainConfig::default()).expect("serializable");
    let bench = serde_json::to_value(SweepOptions::default()).expect("serializable");
    let paths = serde_json::to_value(Paths::default()).expect("serializable");
    for v in [model, train, bench, paths] {
        if let Some(obj) = v.as_object() {
            keys.extend(obj.keys().cloned());
        }
    }
    keys.sort();
    keys.dedup();
    keys
}

/// Closest known key by shared `_`-separated words, then edit distance.
pub fn suggest_key(unknown: &str) -> Option<String> {
    let words = |s: &str| s.split('_').filter(|w| !w.is_empty()).map(str::to_lowercase).collect::<Vec<_>>();
    let uw = words(unknown);
    known_keys()
        .into_iter()
        .map(|k| {
            let shared = words(&k).iter().filter(|w| uw.contains(w)).count();
            let dist = strsim::levenshtein(unknown, &k);
            (k, shared, dist)
        })
        .filter(|(k, shared, dist)| *shared > 0 || *dist <= (k.len() / 3).max(2))
        .min_by_key(|(k, shared, dist)| (std::cmp::Reverse(*shared), *dist, k.clone()))
        .map(|(k, _, _)| k)
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn unknown_field(message: &str) -> Option<&str> {
    let rest = message.split("unknown field `").nth(1)?;
    rest.split('`').next()
}

/// Parses and validates a configuration from TOML text.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let raw: RawRunConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of(text, s.start));
        let message = e.message().trim().to_string();
        let at = line.map(|l| format!("line {l}: ")).unwrap_or_default();
        match unknown_field(&message) {
            Some(key) => {
                let hint = suggest_key(key).map(|s| format!("; did you mean `{s}`?")).unwrap_or_default();
                Error::Config(format!("{at}unknown key `{key}`{hint}"))
            }
            None => Error::Config(format!("{at}{message}")),
        }
    })?;
    let seed = raw.seed.unwrap_or(0);
    let model = raw.model.resolve()?;
    let train = match raw.train {
        Some(t) => {
            t.validate()?;
            Some(t)
        }
        None => None,
    };
    let bench = raw.bench.unwrap_or_default();
    if bench.repeats == 0 || bench.lengths.is_empty() || bench.window == 0 {
        return Err(Error::Config("[bench] needs at least one length, one repeat and a positive window".into()));
    }
    let mut paths = raw.paths;
    paths.apply_env();
    Ok(RunConfig { model, train, bench, paths, seed })
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}
