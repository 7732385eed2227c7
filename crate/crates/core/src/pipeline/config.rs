//! Pipeline configuration.
//!
//! A config is one JSON document. Missing keys take their defaults, unknown
//! keys are rejected, and any leaf can be overridden by its dotted path
//! (`schedule.upstream_epochs=3`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::growth::Strategy;
use crate::vit::ModelSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineKind {
    Dense,
    MoeScratch,
    RmoeI,
    RmoeD,
}

impl PipelineKind {
    pub const ALL: [PipelineKind; 4] = [Self::Dense, Self::RmoeD, Self::RmoeI, Self::MoeScratch];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dense => "dense",
            Self::MoeScratch => "moe-scratch",
            Self::RmoeI => "rmoe-i",
            Self::RmoeD => "rmoe-d",
        }
    }
}

impl std::str::FromStr for PipelineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pipeline {s:?}; expected dense, moe-scratch, rmoe-i or rmoe-d")))
    }
}

impl std::fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: usize,
    pub val_images: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    /// Range of the majority-class patch fraction per image.
    pub majority_min: f32,
    pub majority_max: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_images: 4096,
            val_images: 128,
            noise: 0.3,
            majority_min: 0.55,
            majority_max: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub upstream_epochs: usize,
    pub steps_per_epoch: usize,
    pub intermediate_epochs: usize,
    pub downstream_steps: usize,
    pub batch_size: usize,
    pub lr_upstream: f64,
    pub lr_intermediate: f64,
    pub lr_downstream: f64,
    pub cosine: bool,
    pub weight_decay: f64,
    pub eval_batch_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            upstream_epochs: 20,
            steps_per_epoch: 200,
            intermediate_epochs: 4,
            downstream_steps: 400,
            batch_size: 16,
            lr_upstream: 1e-3,
            lr_intermediate: 1e-4,
            lr_downstream: 1e-3,
            cosine: true,
            weight_decay: 0.05,
            eval_batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeSettings {
    pub n: usize,
    pub k: usize,
    pub max_layers: usize,
    pub strategy: Strategy,
    pub epsilon: f32,
    pub epsilon_score: f32,
    pub w_balance_upstream: f64,
    pub w_balance_downstream: f64,
    /// Inclusive `[first, last]` block ranges, used by `every-last`.
    pub stages: Vec<[usize; 2]>,
}

impl Default for MoeSettings {
    fn default() -> Self {
        Self {
            n: 8,
            k: 1,
            max_layers: 3,
            strategy: Strategy::Score,
            epsilon: 0.01,
            epsilon_score: 0.001,
            w_balance_upstream: 0.01,
            w_balance_downstream: 1e-4,
            stages: vec![[0, 1], [2, 3]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FireflySettings {
    pub warmup_steps: usize,
    pub lr: f64,
    pub raw_l2: bool,
    pub scoring_batches: usize,
    /// Task names from the registry (`upstream`, `downstream`). Empty means
    /// the task of the stage being grown.
    pub tasks: Vec<String>,
}

impl Default for FireflySettings {
    fn default() -> Self {
        Self {
            warmup_steps: 10,
            lr: 1e-3,
            raw_l2: false,
            scoring_batches: 2,
            tasks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub pipeline: PipelineKind,
    pub seed: u64,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub schedule: Schedule,
    pub moe: MoeSettings,
    pub firefly: FireflySettings,
    pub pretrained_checkpoint: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineKind::RmoeD,
            seed: 0,
            model: ModelSpec::default(),
            data: DataConfig::default(),
            schedule: Schedule::default(),
            moe: MoeSettings::default(),
            firefly: FireflySettings::default(),
            pretrained_checkpoint: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let side = (self.model.patch_dim as f64).sqrt().round() as usize;
        if side * side != self.model.patch_dim {
            return Err(Error::Config(format!(
                "model.patch_dim ({}) must be a square number of pixels",
                self.model.patch_dim
            )));
        }
        let s = &self.schedule;
        if s.batch_size == 0 || s.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.pipeline == PipelineKind::RmoeI && (s.intermediate_epochs < 1 || s.intermediate_epochs > s.upstream_epochs) {
            return Err(Error::Config(format!(
                "rmoe-i needs 1 <= schedule.intermediate_epochs <= schedule.upstream_epochs, got {} and {}",
                s.intermediate_epochs, s.upstream_epochs
            )));
        }
        for (name, v) in [
            ("schedule.lr_upstream", s.lr_upstream),
            ("schedule.lr_intermediate", s.lr_intermediate),
            ("schedule.lr_downstream", s.lr_downstream),
            ("schedule.weight_decay", s.weight_decay),
            ("moe.w_balance_upstream", self.moe.w_balance_upstream),
            ("moe.w_balance_downstream", self.moe.w_balance_downstream),
            ("moe.epsilon", self.moe.epsilon as f64),
            ("moe.epsilon_score", self.moe.epsilon_score as f64),
            ("firefly.lr", self.firefly.lr),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        let m = &self.moe;
        if m.n < 1 || m.k < 1 || m.k > m.n {
            return Err(Error::Config(format!("need 1 <= moe.k <= moe.n, got k={} n={}", m.k, m.n)));
        }
        if m.max_layers < 1 {
            return Err(Error::Config("moe.max_layers must be at least 1".into()));
        }
        for &[a, b] in &m.stages {
            if a > b || b >= self.model.n_blocks {
                return Err(Error::Config(format!("moe.stages entry [{a}, {b}] invalid for {} blocks", self.model.n_blocks)));
            }
        }
        let d = &self.data;
        if d.train_images == 0 || d.val_images == 0 {
            return Err(Error::Config("data.train_images and data.val_images must be at least 1".into()));
        }
        if !(d.majority_min > 0.5 && d.majority_min <= d.majority_max && d.majority_max <= 1.0) {
            return Err(Error::Config(format!(
                "need 0.5 < data.majority_min <= data.majority_max <= 1, got {} and {}",
                d.majority_min, d.majority_max
            )));
        }
        if !(d.noise >= 0.0) {
            return Err(Error::Config("data.noise must be non-negative".into()));
        }
        if self.firefly.scoring_batches == 0 {
            return Err(Error::Config("firefly.scoring_batches must be at least 1".into()));
        }
        for t in &self.firefly.tasks {
            if t != "upstream" && t != "downstream" {
                return Err(Error::Config(format!("unknown firefly task {t:?}; expected upstream or downstream")));
            }
        }
        Ok(())
    }

    /// Defaults, overlaid with `base` (a JSON document, possibly partial),
    /// then with each dotted `key=value` override. Values parse as JSON when
    /// they can and as bare strings otherwise.
    pub fn from_parts(base: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut v = serde_json::to_value(Self::default())?;
        if let Some(text) = base {
            let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
            merge(&mut v, user, "")?;
        }
        for (key, raw) in overrides {
            set_dotted(&mut v, key, raw)?;
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_parts(Some(&text), overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(dst: &mut Value, src: Value, path: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v, &p)?,
                    None => return Err(Error::Config(format!("unknown config key {p}"))),
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

fn set_dotted(v: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut cur = v;
    for part in key.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
    }
    if cur.is_object() {
        return Err(Error::Config(format!("config key {key} is a section, not a value")));
    }
    *cur = match serde_json::from_str::<Value>(raw) {
        Ok(parsed) => parsed,
        Err(_) => Value::String(raw.to_string()),
    };
    Ok(())
}

/// Every overridable dotted key with its default value, sorted by key.
pub fn config_keys() -> Vec<(String, String)> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(o) => {
                for (k, c) in o {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(c, &p, out);
                }
            }
            leaf => out.push((prefix.to_string(), leaf.to_string())),
        }
    }
    let mut out = Vec::new();
    walk(&serde_json::to_value(PipelineConfig::default()).unwrap(), "", &mut out);
    out
}
