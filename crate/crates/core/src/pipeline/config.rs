//! Run configuration: defaults, the desk-scale profile, and TOML/JSON loading.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ShiftParams;
use crate::error::{Error, Result};
use crate::nn::SupernetOptions;
use crate::selftrain::{Scheme, SelfTrainConfig};
use crate::space::{parse_si, SupernetSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub n_eval: usize,
    pub classes: usize,
    pub image_hw: usize,
    pub shift: ShiftParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_source: 200,
            n_target: 200,
            n_eval: 100,
            classes: 5,
            image_hw: 64,
            shift: ShiftParams::desk_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceConfig {
    pub encoder_depth: usize,
    pub base_channels: usize,
    pub instance_norm: bool,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            encoder_depth: 2,
            base_channels: 8,
            instance_norm: false,
        }
    }
}

fn count<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Option::<Raw>::deserialize(d)? {
        None => Ok(None),
        Some(Raw::Num(v)) => Ok(Some(v)),
        Some(Raw::Text(s)) => parse_si(&s).map(Some).map_err(serde::de::Error::custom),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Candidates extracted per scheme.
    pub m: usize,
    pub diversity_weight: f64,
    /// MAC ceiling (accepts `"2.5G"`-style strings); `None` disables filtering.
    #[serde(deserialize_with = "count")]
    pub budget_flops: Option<f64>,
    /// Square input side at which the budget is evaluated.
    pub budget_hw: usize,
    /// Subnets kept after retraining, per scheme.
    pub top_k: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            m: 4,
            diversity_weight: 1.0,
            budget_flops: Some(2.5e9),
            budget_hw: 256,
            top_k: 2,
        }
    }
}

/// Everything a pipeline run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Name of the profile the file was layered on (`full` or `toy`).
    pub profile: String,
    pub seed: u64,
    /// Pseudo-labelling schemes searched and retrained.
    pub schemes: Vec<Scheme>,
    pub data: DataConfig,
    pub space: SpaceConfig,
    pub search: SelfTrainConfig,
    pub retrain: SelfTrainConfig,
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl RunConfig {
    /// Published hyperparameters; data sizes from the synthetic-task defaults.
    pub fn full() -> Self {
        Self {
            profile: "full".into(),
            seed: 0,
            schemes: vec![Scheme::Confidence, Scheme::Energy],
            data: DataConfig::default(),
            space: SpaceConfig::default(),
            search: SelfTrainConfig::default(),
            retrain: SelfTrainConfig::default(),
            infer: InferConfig::default(),
        }
    }

    /// Minute-scale single-core profile.
    pub fn toy() -> Self {
        let search = SelfTrainConfig {
            iterations: 2000,
            warmup_iterations: 200,
            ema_decay: 0.99,
            recall_ce: false,
            k_random: 1,
            factor_lr: 1.0,
            ..SelfTrainConfig::default()
        };
        let retrain = SelfTrainConfig {
            warmup_iterations: 0,
            k_random: 0,
            ..search.clone()
        };
        Self {
            profile: "toy".into(),
            seed: 0,
            schemes: vec![Scheme::Confidence],
            data: DataConfig {
                n_source: 80,
                n_target: 80,
                n_eval: 32,
                image_hw: 16,
                ..DataConfig::default()
            },
            space: SpaceConfig::default(),
            search,
            retrain,
            infer: InferConfig::default(),
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::Config(format!("unknown profile `{name}` (full|toy)"))),
        }
    }

    pub fn spec(&self) -> Result<SupernetSpec> {
        SupernetSpec::unet(
            self.space.encoder_depth,
            self.space.base_channels,
            crate::data::CHANNELS,
            self.data.classes,
        )
    }

    pub fn net_options(&self) -> SupernetOptions {
        SupernetOptions {
            instance_norm: self.space.instance_norm,
        }
    }

    /// Propagates the root seed and checks every section.
    pub fn finalize(mut self) -> Result<Self> {
        self.search.seed = self.seed;
        self.retrain.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        self.retrain.validate()?;
        self.data.shift.validate()?;
        let spec = self.spec()?;
        spec.check_input_hw((self.data.image_hw, self.data.image_hw))
            .map_err(|e| Error::Config(format!("data.image_hw: {e}")))?;
        spec.check_input_hw((self.infer.budget_hw, self.infer.budget_hw))
            .map_err(|e| Error::Config(format!("infer.budget_hw: {e}")))?;
        if self.schemes.is_empty() {
            return Err(Error::Config("at least one scheme is required".into()));
        }
        if self.infer.m == 0 {
            return Err(Error::Config("infer.m must be at least 1".into()));
        }
        if !(self.infer.diversity_weight >= 0.0 && self.infer.diversity_weight.is_finite()) {
            return Err(Error::Config("infer.diversity_weight must be finite and non-negative".into()));
        }
        if let Some(b) = self.infer.budget_flops {
            if b.is_nan() || b < 0.0 {
                return Err(Error::Config(format!("infer.budget_flops must be non-negative, got {b}")));
            }
        }
        Ok(())
    }

    /// Parses TOML (or JSON when the text starts with `{`). Keys override the
    /// profile named by `profile` (default `full`).
    pub fn from_str_any(text: &str) -> Result<Self> {
        let overrides: serde_json::Value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?
        } else {
            let v: toml::Value = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
            serde_json::to_value(v)?
        };
        let profile = overrides
            .get("profile")
            .and_then(|p| p.as_str())
            .unwrap_or("full");
        let mut base = serde_json::to_value(Self::profile(profile)?)?;
        merge(&mut base, overrides);
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.finalize()
    }

    /// Loads a config file, returning it with the SHA-256 of its bytes.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Ok((Self::from_str_any(&text)?, sha256_hex(&bytes)))
    }

    /// Digest of the canonical JSON form, used when no file backs the config.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Recursively overlays `over` onto `base`; non-object values replace.
fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
