//! Run configuration: preset defaults, then the TOML file, then flags.
//!
//! Later sources win key by key. Tables merge recursively; a key absent
//! from the preset is rejected so typos never pass silently.

use std::path::Path;

use circuitnet::eval::ExperimentConfig;
use circuitnet::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Kfold,
    Loso,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Kfold => "kfold",
            Protocol::Loso => "loso",
        }
    }
}

/// Fully resolved settings, written verbatim to the run's `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub protocol: Protocol,
    /// Fold count; ignored by leave-one-site-out.
    pub folds: usize,
    pub cohort: String,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
}

/// Flag values that override the file when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub patience: Option<usize>,
}

pub const DEFAULT_FOLDS: usize = 5;

pub fn read_file(path: &Path) -> circuitnet::Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::to_value(table).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Recursively overlays `top` onto `base`.
pub fn merge(base: &mut Value, top: Value, path: &str) -> circuitnet::Result<()> {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            if slot.is_object() {
                return Err(Error::Config(format!("config key `{path}` must be a table")));
            }
            *slot = v;
            Ok(())
        }
    }
}

fn preset_of(file: Option<&Value>, flags: &Overrides) -> circuitnet::Result<Preset> {
    if let Some(p) = flags.preset {
        return Ok(p);
    }
    match file.and_then(|f| f.get("preset")) {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("preset: {e}"))),
        None => Ok(Preset::Desk),
    }
}

/// Resolves the configuration for a cohort of `n_regions x n_timepoints`.
pub fn resolve(
    protocol: Protocol,
    cohort: &Path,
    dims: (usize, usize),
    file: Option<Value>,
    flags: &Overrides,
) -> circuitnet::Result<RunConfig> {
    let preset = preset_of(file.as_ref(), flags)?;
    let experiment = match preset {
        Preset::Desk => ExperimentConfig::desk(dims.0, dims.1, 0),
        Preset::Full => ExperimentConfig::full(dims.0, dims.1, 0),
    };
    let base = RunConfig {
        preset,
        protocol,
        folds: DEFAULT_FOLDS,
        cohort: cohort.display().to_string(),
        experiment,
    };
    let mut value = serde_json::to_value(&base).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(mut f) = file {
        if let Some(obj) = f.as_object_mut() {
            for fixed in ["protocol", "cohort"] {
                if obj.remove(fixed).is_some() {
                    return Err(Error::Config(format!("`{fixed}` is set by the subcommand, not the config file")));
                }
            }
        }
        merge(&mut value, f, "")?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.preset = preset;
    if let Some(k) = flags.folds {
        cfg.folds = k;
    }
    let (m, t) = (&mut cfg.experiment.model, &mut cfg.experiment.train);
    if let Some(s) = flags.seed {
        t.seed = s;
    }
    if let Some(v) = &flags.variant {
        m.variant = v.parse()?;
    }
    if let Some(e) = flags.epochs {
        t.max_epochs = e;
    }
    if let Some(b) = flags.batch_size {
        t.batch_size = b;
    }
    if let Some(lr) = flags.lr {
        t.lr = lr;
    }
    if let Some(p) = flags.patience {
        t.patience = p;
    }
    if protocol == Protocol::Kfold && cfg.folds < 2 {
        return Err(Error::Config(format!("folds must be >= 2, got {}", cfg.folds)));
    }
    cfg.experiment.validate()?;
    Ok(cfg)
}
