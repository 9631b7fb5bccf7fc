//! Run configuration: TOML files with dotted keys, `key=value` overrides
//! and a flat resolved snapshot that loads back to the same value.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::evaluator::{ExtractOptions, Metric};
use crate::model::{Ablation, FeatureTag, ModelConfig};
use crate::synth_data::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metric: Metric,
    pub feature: FeatureTag,
    pub extract: ExtractOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { metric: Metric::Cosine, feature: FeatureTag::G, extract: ExtractOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// When set, replaces `model.switches` with the row's switches.
    pub ablation: Option<Ablation>,
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            ablation: None,
            data: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Splits `key=value`; the value is parsed as a TOML literal and falls back
/// to a bare string.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text.split_once('=').ok_or_else(|| Error::config(format!("override `{text}` is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(format!("override `{text}` has an empty key segment")));
    }
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key.to_string(), value))
}

/// Sets a dotted key inside `table`, creating intermediate tables.
pub fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::config(format!("`{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// `(dotted key, value)` for every non-table leaf, in key order.
pub fn flatten(table: &Table) -> Vec<(String, Value)> {
    fn walk(prefix: &str, t: &Table, out: &mut Vec<(String, Value)>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Table(inner) => walk(&key, inner, out),
                other => out.push((key, other.clone())),
            }
        }
    }
    let mut out = Vec::new();
    walk("", table, &mut out);
    out
}

impl RunConfig {
    /// Parses TOML text on top of the defaults, then applies overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_dotted(&mut table, &k, v)?;
        }
        Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::config(format!("invalid config: {}", e.message())))
    }

    /// Reads `path` (or starts from the defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    /// Fills derived fields and validates the combination: the ablation row
    /// sets the switches, the class count and input size come from the data
    /// section and the heatmap grid must match the feature map.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(a) = self.ablation {
            self.model.switches = a.switches();
        }
        self.model.num_classes = self.data.train_ids;
        self.model.image_height = self.data.image_height;
        self.model.image_width = self.data.image_width;
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let grid = (self.data.heatmap_height, self.data.heatmap_width);
        if grid != self.model.feature_size() {
            return Err(Error::config(format!("heatmap grid {grid:?} differs from the feature map {:?}", self.model.feature_size())));
        }
        if self.data.train_ids < self.train.p || self.data.train_per_id < self.train.s {
            return Err(Error::config(format!(
                "P={} x S={} batches need more than {} ids x {} images",
                self.train.p, self.train.s, self.data.train_ids, self.data.train_per_id
            )));
        }
        if self.eval.extract.batch_size == 0 {
            return Err(Error::config("eval.extract.batch_size must be positive"));
        }
        Ok(self)
    }

    /// One `key = value` line per leaf, sorted by key.
    pub fn to_flat_toml(&self) -> Result<String> {
        let value = Value::try_from(self).map_err(|e| Error::config(format!("config does not serialize: {e}")))?;
        let table = value.as_table().expect("struct serializes to a table");
        Ok(flatten(table).into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect())
    }
}
