//! Run configuration: one TOML key-value file with a table per component.
//! Any leaf can be overridden as `table.key=value`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{BocpdConfig, GruConfig};
use crate::detector::Trigger;
use crate::error::{Error, Result};
use crate::experiment::Method;
use crate::metrics::TOLERANCES;
use crate::sim::{EgoConfig, WorkspaceConfig};
use crate::train::{ModelKind, TrainingConfig};
use crate::uatom::UatomConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Hard-detection rule of the learned detectors.
    pub threshold: f64,
    pub debounce: usize,
    pub tolerances: Vec<usize>,
    /// Output width of the fixed feature encoder.
    pub feat_dim: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            debounce: 2,
            tolerances: TOLERANCES.to_vec(),
            feat_dim: 32,
        }
    }
}

impl EvalConfig {
    pub fn trigger(&self) -> Trigger {
        Trigger {
            threshold: self.threshold,
            debounce: self.debounce,
        }
    }
}

/// Experiment size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    /// Training episodes per transition and seed.
    pub train_per_transition: usize,
    /// Closed-loop evaluation episodes per transition, seed and method.
    pub eval_per_transition: usize,
    /// Evaluated methods, by report label.
    pub methods: Vec<Method>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            train_per_transition: 20,
            eval_per_transition: 20,
            methods: Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunConfig,
    pub workspace: WorkspaceConfig,
    pub ego: EgoConfig,
    pub uatom: UatomConfig,
    pub gru: GruConfig,
    pub bocpd: BocpdConfig,
    pub train: TrainingConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.workspace.validate()?;
        self.uatom.validate()?;
        self.train.validate()?;
        let f = self.eval.feat_dim;
        if self.uatom.feat_dim != f || self.gru.feat_dim != f {
            return Err(Error::InvalidConfig(format!(
                "feature width disagrees: eval {f}, uatom {}, gru {}",
                self.uatom.feat_dim, self.gru.feat_dim
            )));
        }
        if self.uatom.dt != self.workspace.dt || self.gru.dt != self.workspace.dt {
            return Err(Error::InvalidConfig("model dt must equal workspace dt".into()));
        }
        if self.uatom.v_max != self.workspace.v_max || self.gru.v_max != self.workspace.v_max {
            return Err(Error::InvalidConfig("model v_max must equal workspace v_max".into()));
        }
        if self.eval.tolerances.is_empty() || self.eval.debounce == 0 {
            return Err(Error::InvalidConfig("need tolerances and a positive debounce".into()));
        }
        if self.run.seeds.is_empty() || self.run.train_per_transition == 0 || self.run.eval_per_transition == 0 {
            return Err(Error::InvalidConfig("need at least one seed and one episode per transition".into()));
        }
        let mut seeds = self.run.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.run.seeds.len() {
            return Err(Error::InvalidConfig("duplicate seeds".into()));
        }
        if self.run.methods.is_empty() {
            return Err(Error::InvalidConfig("need at least one method".into()));
        }
        let mut methods = self.run.methods.clone();
        methods.sort_unstable();
        methods.dedup();
        if methods.len() != self.run.methods.len() {
            return Err(Error::InvalidConfig("duplicate methods".into()));
        }
        if !(self.bocpd.hazard > 0.0 && self.bocpd.hazard < 1.0) {
            return Err(Error::InvalidConfig("bocpd hazard must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Apply `table.key=value`. Values parse as TOML literals, falling back
    /// to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got {assignment}")))?;
        let (table, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::InvalidConfig(format!("expected table.key, got {path}")))?;
        let value = parse_literal(raw.trim());
        let mut doc = toml::Table::try_from(&*self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let t = doc
            .get_mut(table)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown table {table}")))?;
        let old = t
            .get(key)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown key {table}.{key}")))?;
        let value = match (old, value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        t.insert(key.to_string(), value);
        let next: Config = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(format!("{path}: {e}")))?;
        *self = next;
        Ok(())
    }

    /// Hash of everything that determines a trained model except the epoch
    /// budget and the seed, so runs can be resumed with a larger budget.
    pub fn model_hash(&self, kind: ModelKind) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            kind: ModelKind,
            workspace: &'a WorkspaceConfig,
            ego: &'a EgoConfig,
            train_per_transition: usize,
            uatom: Option<&'a UatomConfig>,
            gru: Option<&'a GruConfig>,
            train: TrainingConfig,
            feat_dim: usize,
        }
        let key = Key {
            kind,
            workspace: &self.workspace,
            ego: &self.ego,
            train_per_transition: self.run.train_per_transition,
            uatom: (kind == ModelKind::Uatom).then_some(&self.uatom),
            gru: (kind == ModelKind::Gru).then_some(&self.gru),
            train: TrainingConfig {
                epochs: 0,
                ..self.train.clone()
            },
            feat_dim: self.eval.feat_dim,
        };
        sha256_hex(&serde_json::to_vec(&key).expect("hash key serializes"))
    }

    /// Hash of the whole configuration.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
