//! Run configuration and the end-to-end pipeline: generate domains, pretrain
//! the source model, train the oracle, build the proxy, adapt.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{gen_two_moons, shift_domain, split, Dataset, ShiftSpec};
use crate::diagnostics::accuracy_of_scores;
use crate::error::{Error, Result};
use crate::mlp::MlpModel;
use crate::proxy::ProxyOracle;
use crate::rng::{derive_seed, Purpose};
use crate::training::{
    adapt, pretrain_source, train_oracle, AdaptConfig, AdaptResult, ArchSpec, PretrainConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Samples per domain.
    pub n: usize,
    /// Gaussian noise of the two-moons generator.
    pub noise: f64,
    pub rotation_degrees: f64,
    pub translation: Vec<f64>,
    pub feature_noise: f64,
    /// Train fraction of the source split.
    pub split_ratio: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n: 400,
            noise: 0.1,
            rotation_degrees: 30.0,
            translation: vec![0.0, 0.0],
            feature_noise: 0.0,
            split_ratio: 0.9,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn shift_spec(&self) -> ShiftSpec {
        ShiftSpec {
            rotation_radians: self.rotation_degrees.to_radians(),
            translation: self.translation.clone(),
            feature_noise: self.feature_noise,
            seed: derive_seed(self.seed, Purpose::FeatureNoise, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub arch: ArchSpec,
    pub oracle_arch: ArchSpec,
    pub source: PretrainConfig,
    pub oracle: PretrainConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            arch: ArchSpec::default(),
            oracle_arch: ArchSpec::default(),
            source: PretrainConfig::default(),
            oracle: PretrainConfig {
                seed: 1,
                ..PretrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyConfig {
    pub noise_scale: f64,
    pub temperature: f64,
    pub noise_seed: u64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            noise_scale: 0.3,
            temperature: 1.0,
            noise_seed: 0,
        }
    }
}

/// Top-level run configuration. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub pretrain: PretrainSection,
    pub proxy: ProxyConfig,
    pub adapt: AdaptConfig,
    /// Adaptation seeds for repeated runs; when empty, `adapt.repeats`
    /// consecutive seeds starting at `adapt.seed` are used.
    pub seeds: Vec<u64>,
}

impl RunConfig {
    /// The committed desk-scale recipe: defaults except for a linear oracle,
    /// a longer source pretraining and a smaller adaptation rate.
    pub fn recipe() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.pretrain.oracle_arch.hidden = Vec::new();
        cfg.pretrain.source.epochs = 50;
        cfg.adapt.lr = 5e-4;
        cfg
    }

    pub fn adapt_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.adapt.repeats as u64).map(|r| self.adapt.seed + r).collect()
        } else {
            self.seeds.clone()
        }
    }

    /// Copy with every section seed derived from one experiment seed.
    pub fn reseeded(&self, seed: u64) -> RunConfig {
        let mut cfg = self.clone();
        let d = |k| derive_seed(seed, Purpose::Experiment, k);
        cfg.data.seed = d(1);
        cfg.pretrain.source.seed = d(2);
        cfg.pretrain.oracle.seed = d(3);
        cfg.proxy.noise_seed = d(4);
        cfg.adapt.seed = d(5);
        cfg
    }

    /// SHA-256 of the compact JSON form.
    pub fn config_hash(&self) -> String {
        crate::io::sha256_hex(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.adapt.validate()?;
        if self.data.n < 2 {
            return Err(Error::Config(format!("data.n must be at least 2, got {}", self.data.n)));
        }
        if self.data.translation.len() != 2 {
            return Err(Error::Config("data.translation must have 2 entries".into()));
        }
        Ok(())
    }

    /// Resolves defaults < `file` < `overrides`. Overrides are `dotted.key=value`
    /// pairs whose value is parsed as JSON, falling back to a plain string.
    pub fn resolve(file: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(text) = file {
            let file_value: Value = serde_json::from_str(text)
                .map_err(|e| Error::Config(format!("config file is not valid JSON: {e}")))?;
            // Validate the file alone first so unknown keys are reported as such.
            serde_json::from_value::<RunConfig>(file_value.clone())
                .map_err(|e| Error::Config(e.to_string()))?;
            merge(&mut value, file_value);
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
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

fn set_path(root: &mut Value, path: &str, new: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?}: {part:?} is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("override {path:?}: unknown key {part:?}")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), new);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked");
    }
    Err(Error::Config("empty override key".into()))
}

/// Source and target domains of a run. Target ids continue after source ids.
#[derive(Debug, Clone)]
pub struct Domains {
    pub source: Dataset,
    pub target: Dataset,
}

pub fn generate_domains(cfg: &DataConfig) -> Result<Domains> {
    let source = gen_two_moons(cfg.n, cfg.noise, derive_seed(cfg.seed, Purpose::DataGen, 0))?;
    let raw_target = gen_two_moons(cfg.n, cfg.noise, derive_seed(cfg.seed, Purpose::DataGen, 1))?;
    let mut target = shift_domain(&raw_target, &cfg.shift_spec())?;
    // shift_domain numbers after the raw sample; move past the source instead
    let base = source.sample_ids.iter().max().map_or(0, |m| m + 1);
    target.sample_ids = (0..target.len() as u64).map(|i| base + i).collect();
    target.domain_tag = "target".into();
    let mut source = source;
    source.domain_tag = "source".into();
    Ok(Domains { source, target })
}

/// Trained models for a pair of domains.
#[derive(Debug, Clone)]
pub struct Models {
    pub source: MlpModel,
    pub source_test_accuracy: f64,
    pub oracle: MlpModel,
}

/// Train and held-out parts of the source domain.
pub fn split_source(cfg: &DataConfig, source: &Dataset) -> Result<(Dataset, Dataset)> {
    split(source, cfg.split_ratio, derive_seed(cfg.seed, Purpose::Split, 0))
}

/// Oracle trained on the labeled union of the source train split and the target.
pub fn fit_oracle(cfg: &RunConfig, source_train: &Dataset, target: &Dataset) -> Result<MlpModel> {
    let union = source_train.concat(target, "union")?;
    train_oracle(&union, &cfg.pretrain.oracle_arch, &cfg.pretrain.oracle)
}

pub fn train_models(cfg: &RunConfig, domains: &Domains) -> Result<Models> {
    let (train, test) = split_source(&cfg.data, &domains.source)?;
    let (source, source_test_accuracy) =
        pretrain_source(&train, &test, &cfg.pretrain.arch, &cfg.pretrain.source)?;
    let oracle = fit_oracle(cfg, &train, &domains.target)?;
    Ok(Models {
        source,
        source_test_accuracy,
        oracle,
    })
}

pub fn build_proxy(cfg: &ProxyConfig, oracle: &MlpModel) -> Result<ProxyOracle> {
    ProxyOracle::new(oracle.clone(), cfg.noise_scale, cfg.temperature, cfg.noise_seed)
}

/// Headline numbers of one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub source_test_accuracy: f64,
    pub source_target_accuracy: f64,
    pub oracle_target_accuracy: f64,
    pub proxy_target_accuracy: f64,
    pub adapted_target_accuracy: f64,
    pub source_digest_before: String,
    pub source_digest_after: String,
    pub result: AdaptResult,
}

/// Runs the full pipeline with every seed taken from `cfg` as is.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    let domains = generate_domains(&cfg.data)?;
    let models = train_models(cfg, &domains)?;
    let proxy = build_proxy(&cfg.proxy, &models.oracle)?;
    let target = &domains.target;
    let source_digest_before = models.source.digest();
    let result = adapt(&models.source, &proxy, target, &cfg.adapt)?;
    let first = &result.report.records[0];
    Ok(PipelineOutcome {
        source_test_accuracy: models.source_test_accuracy,
        source_target_accuracy: first.acc_target,
        oracle_target_accuracy: accuracy_of_scores(&models.oracle.predict(&target.features)?, &target.labels)?,
        proxy_target_accuracy: first.acc_proxy_raw,
        adapted_target_accuracy: result.report.final_accuracy().unwrap_or(0.0),
        source_digest_before,
        source_digest_after: models.source.digest(),
        result,
    })
}
