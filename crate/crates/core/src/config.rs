//! Experiment configuration: a strict JSON document plus dotted-path
//! overrides. Errors point at the offending line of the source file.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapt::AdaptConfig;
use crate::data::{CorruptionKind, CorruptionSpec, DatasetSpec, OneDDistribution};
use crate::error::{Error, Result};
use crate::nn::ModelSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fig1Config {
    pub distribution: OneDDistribution,
    pub ks: Vec<usize>,
    pub n: usize,
    pub seed: u64,
}

impl Default for Fig1Config {
    fn default() -> Self {
        Self {
            distribution: OneDDistribution::default(),
            ks: vec![2, 4, 8, 10, 16, 32],
            n: 100_000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub corruptions: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    /// One trained model and one corrupted stream per seed.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub fig1: Fig1Config,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            corruptions: CorruptionKind::ALL.to_vec(),
            severities: vec![5],
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("runs"),
            fig1: Fig1Config::default(),
        }
    }
}

fn strip_position(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg,
    }
}

/// 1-based line of the first occurrence of `"key"`, or 1.
fn line_of_key(text: &str, key: &str) -> usize {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map_or(1, |i| i + 1)
}

impl ExperimentConfig {
    /// Section name and message of the first invalid section.
    fn check(&self) -> std::result::Result<(), (&'static str, Error)> {
        self.dataset.validate().map_err(|e| ("dataset", e))?;
        self.model.validate().map_err(|e| ("model", e))?;
        self.train.validate().map_err(|e| ("train", e))?;
        self.adapt.validate().map_err(|e| ("adapt", e))?;
        self.fig1.distribution.validate().map_err(|e| ("fig1", e))?;
        let cfg = |m: String| Error::Config(m);
        if self.model.in_channels != 1
            || self.model.image_size != self.dataset.image_size
            || self.model.num_classes != self.dataset.num_classes
        {
            return Err((
                "model",
                cfg(format!(
                    "model expects {}-channel {}px images with {} classes, dataset has 1-channel {}px with {}",
                    self.model.in_channels,
                    self.model.image_size,
                    self.model.num_classes,
                    self.dataset.image_size,
                    self.dataset.num_classes
                )),
            ));
        }
        if self.adapt.j > self.model.blocks() {
            return Err((
                "adapt",
                cfg(format!("J = {} exceeds the {} extractor blocks", self.adapt.j, self.model.blocks())),
            ));
        }
        if let Some(&s) = self.severities.iter().find(|s| !(1..=5).contains(*s)) {
            return Err(("severities", cfg(format!("severity {s} is outside 1..=5"))));
        }
        if self.seeds.is_empty() {
            return Err(("seeds", cfg("at least one seed is required".into())));
        }
        if self.fig1.ks.iter().any(|&k| k < 2 || k > self.fig1.n) {
            return Err(("fig1", cfg(format!("fig1 cluster counts {:?} must lie in 2..=n", self.fig1.ks))));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(_, e)| e)
    }

    /// Parses `text` (named `origin` in messages), applies `overrides` of
    /// the form `a.b.c=value` and validates the result.
    pub fn parse(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let parsed: Self = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("{origin}:{}:{}: {}", e.line(), e.column(), strip_position(&e)))
        })?;
        let cfg = if overrides.is_empty() {
            parsed
        } else {
            let mut v = serde_json::to_value(&parsed)?;
            for o in overrides {
                apply_override(&mut v, o)?;
            }
            serde_json::from_value(v)
                .map_err(|e| Error::Config(format!("--set {}: {}", overrides.join(" "), strip_position(&e))))?
        };
        cfg.check().map_err(|(section, e)| {
            let msg = match e {
                Error::Config(m) => m,
                other => other.to_string(),
            };
            Error::Config(format!("{origin}:{}: {msg}", line_of_key(text, section)))
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>, overrides: &[String]) -> Result<(Self, String)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::parse(&text, &path.display().to_string(), overrides)?;
        Ok((cfg, text))
    }

    /// Corruption specs for one seed, in configured order.
    pub fn corruption_specs(&self, seed: u64) -> Result<Vec<CorruptionSpec>> {
        let mut out = Vec::new();
        for &kind in &self.corruptions {
            for &sev in &self.severities {
                out.push(CorruptionSpec::new(kind, sev, seed)?);
            }
        }
        Ok(out)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Sets the field at dotted `path` to `value`. The value is read as JSON
/// when it parses, otherwise as a string. Only existing fields can be set.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set {spec}: expected key.path=value")))?;
    let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let missing = || Error::Config(format!("--set {spec}: no field `{}`", keys[..=i].join(".")));
        cur = match cur {
            Value::Object(map) => map.get_mut(*key).ok_or_else(missing)?,
            Value::Array(items) => {
                let idx: usize = key.parse().map_err(|_| missing())?;
                items.get_mut(idx).ok_or_else(missing)?
            }
            _ => return Err(missing()),
        };
    }
    *cur = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let c = ExperimentConfig::parse("{}", "c.json", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.adapt.j, 2);
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let text = "{\n  \"train\": {\n    \"epochz\": 3\n  }\n}";
        let e = ExperimentConfig::parse(text, "c.json", &[]).unwrap_err().to_string();
        assert!(e.contains("c.json:3:"), "{e}");
        assert!(e.contains("epochz"), "{e}");
    }

    #[test]
    fn invalid_values_point_at_their_section() {
        let text = "{\n  \"seeds\": [1],\n  \"adapt\": {\"checkpoints\": [5, 1]}\n}";
        let e = ExperimentConfig::parse(text, "c.json", &[]).unwrap_err().to_string();
        assert!(e.contains("c.json:3:"), "{e}");
    }

    #[test]
    fn dotted_overrides() {
        let c = ExperimentConfig::parse(
            "{}",
            "c.json",
            &["adapt.J=1".into(), "train.epochs=4".into(), "corruptions=[\"blur\"]".into()],
        )
        .unwrap();
        assert_eq!((c.adapt.j, c.train.epochs), (1, 4));
        assert_eq!(c.corruptions, vec![CorruptionKind::Blur]);
        let c = ExperimentConfig::parse("{}", "c.json", &["model.projectors.lambda.1=0.5".into()]).unwrap();
        assert_eq!(c.model.projectors.lambda, vec![1.0, 0.5, 1.0, 1.0]);
        assert!(ExperimentConfig::parse("{}", "c.json", &["model.projectors.layers.0=2".into()]).is_err());
        assert!(ExperimentConfig::parse("{}", "c.json", &["adapt.j=1".into()]).is_err());
        assert!(ExperimentConfig::parse("{}", "c.json", &["adapt.J".into()]).is_err());
        assert!(ExperimentConfig::parse("{}", "c.json", &["adapt.J=9".into()]).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&c.to_json_pretty().unwrap(), "c.json", &[]).unwrap();
        assert_eq!(back, c);
    }
}
