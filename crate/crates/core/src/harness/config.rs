use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ensure, Error, Result};
use crate::hhgnn::{HierAggregator, DEFAULT_HEADS, DEFAULT_LAYERS};
use crate::objective::{HtclVariant, DEFAULT_LAMBDA, GAMMA_QUILTNET, TOPK_HIGH, TOPK_LOW};
use crate::synthgen::SynthConfig;
use crate::tgdf::{TgdfSwitches, DEFAULT_ALPHA};

/// Whole-module switches. With both `tgdf` and `hhg` off no graph is built
/// and message passing is skipped entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModuleSwitches {
    pub tgdf: bool,
    pub hhg: bool,
    pub htcl: bool,
}

impl Default for ModuleSwitches {
    fn default() -> Self {
        Self::FULL
    }
}

impl ModuleSwitches {
    pub const NONE: Self = Self {
        tgdf: false,
        hhg: false,
        htcl: false,
    };
    pub const TGDF_ONLY: Self = Self {
        tgdf: true,
        hhg: false,
        htcl: false,
    };
    pub const NO_HTCL: Self = Self {
        tgdf: true,
        hhg: true,
        htcl: false,
    };
    pub const FULL: Self = Self {
        tgdf: true,
        hhg: true,
        htcl: true,
    };

    /// The four rows of the module ablation, `a` through `d`.
    pub fn row(name: &str) -> Option<Self> {
        Some(match name {
            "a" => Self::NONE,
            "b" => Self::TGDF_ONLY,
            "c" => Self::NO_HTCL,
            "d" => Self::FULL,
            _ => return None,
        })
    }

    pub fn bypass_gnn(self) -> bool {
        !self.tgdf && !self.hhg
    }

    pub fn label(self) -> String {
        for r in ["a", "b", "c", "d"] {
            if Self::row(r) == Some(self) {
                return r.to_owned();
            }
        }
        format!("tgdf{}-hhg{}-htcl{}", self.tgdf as u8, self.hhg as u8, self.htcl as u8)
    }
}

/// Which embeddings the hit ratio is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitSource {
    Raw,
    #[default]
    PostGnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub identity_gain: f64,
    pub std: f64,
    pub scale_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            identity_gain: 1.0,
            std: 0.02,
            scale_std: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Where bags come from: a dataset directory, or a generator config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    pub path: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub alpha: f64,
    pub lambda: f64,
    pub context_len: usize,
    pub parents_per_class: usize,
    pub children_per_parent: usize,
    pub layers: usize,
    pub heads: usize,
    pub topk_low: usize,
    pub topk_high: usize,
    pub gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub aggregator: HierAggregator,
    pub htcl_variant: HtclVariant,
    pub tgdf: TgdfSwitches,
    pub modules: ModuleSwitches,
    pub init: InitConfig,
    pub adam: AdamConfig,
    pub hit_source: HitSource,
    pub data: DataSource,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            shots: 16,
            seeds: vec![0, 1, 2, 3, 4],
            alpha: DEFAULT_ALPHA,
            lambda: DEFAULT_LAMBDA,
            context_len: 16,
            parents_per_class: 4,
            children_per_parent: 3,
            layers: DEFAULT_LAYERS,
            heads: DEFAULT_HEADS,
            topk_low: TOPK_LOW,
            topk_high: TOPK_HIGH,
            gamma: GAMMA_QUILTNET,
            lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 1,
            max_epochs: 50,
            patience: 10,
            aggregator: HierAggregator::Msa,
            htcl_variant: HtclVariant::ClassWise,
            tgdf: TgdfSwitches::default(),
            modules: ModuleSwitches::FULL,
            init: InitConfig::default(),
            adam: AdamConfig::default(),
            hit_source: HitSource::PostGnn,
            data: DataSource::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.shots > 0, Config, "shots must be positive");
        ensure!(!self.seeds.is_empty(), Config, "at least one seed is required");
        ensure!(self.alpha.is_finite(), Config, "alpha must be finite");
        ensure!(self.lambda >= 0.0 && self.lambda.is_finite(), Config, "lambda must be non-negative");
        ensure!(self.layers >= 1, Config, "layers must be positive");
        ensure!(self.heads >= 1, Config, "heads must be positive");
        ensure!(self.topk_low >= 1 && self.topk_high >= 1, Config, "top-k must be at least 1");
        ensure!(self.gamma > 0.0, Config, "gamma must be positive");
        ensure!(self.lr > 0.0 && self.weight_decay >= 0.0, Config, "bad optimizer settings");
        ensure!(self.batch_size == 1, Config, "only batch size 1 is supported");
        ensure!(self.max_epochs >= 1, Config, "max_epochs must be positive");
        ensure!(
            self.adam.beta1 >= 0.0 && self.adam.beta1 < 1.0 && self.adam.beta2 >= 0.0 && self.adam.beta2 < 1.0,
            Config,
            "Adam betas must lie in [0, 1)"
        );
        Ok(())
    }

    /// Effective contrastive weight once the module switch is applied.
    pub fn effective_lambda(&self) -> f64 {
        if self.modules.htcl {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::datamodel::io::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::datamodel::io::write_json(path, self)
    }

    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        apply_overrides(self, overrides)
    }
}

/// Applies `key=value` overrides to any serializable config. Keys are dotted
/// paths into its JSON form; values are parsed as JSON, falling back to a
/// bare string.
pub fn apply_overrides<T, S>(base: &T, overrides: &[S]) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
    S: AsRef<str>,
{
    let mut v = serde_json::to_value(base)?;
    for o in overrides {
        let o = o.as_ref();
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Argument(format!("override {o:?} is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
        set_path(&mut v, key, value)?;
    }
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not an object")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_owned(), value);
            return Ok(());
        }
        cur = obj.entry(*part).or_insert(Value::Null);
    }
    Err(Error::Config("empty override key".into()))
}
