//! Experiment configuration: one JSON document with `model`, `data`, `train`
//! and `resolution` sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ClassRules, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelConfig, TrainConfig};
use crate::resolution::{ResizeSchedule, ResizeStage};
use crate::ssm::Cutoff;

fn default_antialias() -> usize {
    4
}

/// Stored datasets: containers holding `images` `[n, C, R...]` and `labels` `[n]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub train: PathBuf,
    pub val: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<DatasetManifest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<DataFiles>,
    /// Training resolution.
    pub resolution: Vec<usize>,
    /// Supersampling factor per axis when rendering scenes.
    #[serde(default = "default_antialias")]
    pub antialias: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolutionConfig {
    /// Resolutions evaluated zero-shot after every epoch.
    #[serde(default)]
    pub test_resolutions: Vec<Vec<usize>>,
    /// Multi-stage training; plain single-resolution training when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ResizeSchedule>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub resolution: ResolutionConfig,
}

/// JSON schema for [`ExperimentConfig`], as shipped in `schema/`.
pub const EXPERIMENT_SCHEMA: &str = include_str!("../../../schema/experiment-config.schema.json");

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        let dims = d.resolution.len();
        if dims == 0 || d.resolution.iter().any(|&r| r < 2) {
            return Err(Error::config(format!("data.resolution {:?} needs at least 2 samples per axis", d.resolution)));
        }
        if d.resolution.iter().any(|r| r % self.model.patch != 0) {
            return Err(Error::config(format!(
                "data.resolution {:?} is not divisible by model.patch {}",
                d.resolution, self.model.patch
            )));
        }
        if d.antialias == 0 {
            return Err(Error::config("data.antialias must be at least 1"));
        }
        match (&d.manifest, &d.files) {
            (Some(m), None) => {
                m.validate()?;
                if m.n_classes != self.model.classes {
                    return Err(Error::config(format!(
                        "data.manifest.n_classes {} differs from model.classes {}",
                        m.n_classes, self.model.classes
                    )));
                }
                if dims != 2 || self.model.in_channels != 1 {
                    return Err(Error::config("rendered scenes are single-channel 2D images"));
                }
            }
            (None, Some(_)) => {}
            _ => return Err(Error::config("data needs exactly one of manifest or files")),
        }
        if let Some(delta) = &self.model.delta {
            if delta.len() != dims {
                return Err(Error::config(format!("model.delta has {} entries for {dims} axes", delta.len())));
            }
        }
        for r in &self.resolution.test_resolutions {
            if r.len() != dims || r.iter().any(|&v| v < 2 || v % self.model.patch != 0) {
                return Err(Error::config(format!("test resolution {r:?} is incompatible with {:?}", d.resolution)));
            }
        }
        if let Some(s) = &self.resolution.schedule {
            s.validate()?;
            if s.stages[0].resolution != d.resolution {
                return Err(Error::config(format!(
                    "first schedule stage trains at {:?} but data.resolution is {:?}",
                    s.stages[0].resolution, d.resolution
                )));
            }
            if s.total_epochs() != self.train.epochs {
                return Err(Error::config(format!(
                    "schedule stages sum to {} epochs but train.epochs is {}",
                    s.total_epochs(),
                    self.train.epochs
                )));
            }
            for st in &s.stages {
                if st.resolution.len() != dims || st.resolution.iter().any(|v| v % self.model.patch != 0) {
                    return Err(Error::config(format!("stage resolution {:?} is incompatible", st.resolution)));
                }
            }
        }
        Ok(())
    }

    /// Named presets: `cifar-like` (low 8, mid 16, base 32) and `celeb-like`
    /// (low 16, mid 32, base 40; base/mid = 1.25, base/low = 2.5).
    pub fn preset(name: &str) -> Result<Self> {
        let (low, mid, base) = match name {
            "cifar-like" => (8, 16, 32),
            "celeb-like" => (16, 32, 40),
            other => return Err(Error::config(format!("unknown preset {other:?} (cifar-like, celeb-like)"))),
        };
        let cfg = ExperimentConfig {
            model: ModelConfig { layer: LayerKind::S4nd, ..ModelConfig::default() },
            data: DataConfig {
                manifest: Some(DatasetManifest {
                    n_train: 2000,
                    n_val: 500,
                    n_classes: 4,
                    rules: ClassRules::Shapes,
                    seed: 0,
                    cache_resolutions: vec![],
                }),
                files: None,
                resolution: vec![low, low],
                antialias: default_antialias(),
            },
            train: TrainConfig { epochs: 10, alpha: Cutoff::new(0.2)?, ..TrainConfig::default() },
            resolution: ResolutionConfig {
                test_resolutions: vec![vec![low, low], vec![mid, mid], vec![base, base]],
                schedule: None,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The preset's two-stage 80/20 schedule, low resolution then base.
    pub fn with_two_stage_schedule(mut self, low_alpha: Cutoff, base_alpha: Cutoff) -> Result<Self> {
        let base = self
            .resolution
            .test_resolutions
            .last()
            .cloned()
            .ok_or_else(|| Error::config("no base resolution among the test resolutions"))?;
        let mut s =
            ResizeSchedule::two_stage(&self.data.resolution, &base, self.train.epochs, 0.8, (low_alpha, base_alpha))?;
        s.warmup_steps = self.train.warmup_steps;
        self.resolution.schedule = Some(s);
        self.validate()?;
        Ok(self)
    }

    /// Stages to run: the schedule when present, otherwise one stage at the
    /// data resolution with the training α.
    pub fn stages(&self) -> Vec<ResizeStage> {
        match &self.resolution.schedule {
            Some(s) => s.stages.clone(),
            None => vec![ResizeStage {
                resolution: self.data.resolution.clone(),
                epochs: self.train.epochs,
                alpha: self.train.alpha,
                lr_epochs: None,
            }],
        }
    }

    /// Evaluation resolutions, always including the training resolution first.
    pub fn eval_resolutions(&self) -> Vec<Vec<usize>> {
        let last = self.stages().last().map(|s| s.resolution.clone()).unwrap_or_else(|| self.data.resolution.clone());
        let mut out = vec![last];
        for r in &self.resolution.test_resolutions {
            if !out.contains(r) {
                out.push(r.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for name in ["cifar-like", "celeb-like"] {
            let cfg = ExperimentConfig::preset(name).unwrap();
            let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&ExperimentConfig::preset("cifar-like").unwrap().to_json()).unwrap();
        v["train"]["momentum"] = serde_json::json!(0.9);
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("momentum"));
    }

    #[test]
    fn alpha_accepts_inf() {
        let mut v: serde_json::Value =
            serde_json::from_str(&ExperimentConfig::preset("cifar-like").unwrap().to_json()).unwrap();
        v["train"]["alpha"] = serde_json::json!("inf");
        let cfg = ExperimentConfig::from_json(&v.to_string()).unwrap();
        assert!(cfg.train.alpha.is_infinite());
    }

    #[test]
    fn schedule_must_match_epochs() {
        let cfg = ExperimentConfig::preset("cifar-like").unwrap();
        let cfg = cfg.with_two_stage_schedule(Cutoff::new(0.2).unwrap(), Cutoff::INFINITE).unwrap();
        let s = cfg.resolution.schedule.as_ref().unwrap();
        assert_eq!(s.stages.len(), 2);
        assert_eq!((s.stages[0].epochs, s.stages[1].epochs), (8, 2));
        let mut bad = cfg.clone();
        bad.train.epochs = 11;
        assert!(bad.validate().is_err());
    }
}
