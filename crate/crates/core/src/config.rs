//! Experiment configuration (TOML) and clip manifest (JSON).
//!
//! Relative paths are resolved against the directory of the file that names
//! them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bilevel::{ConstraintBox, UpdateConfig};
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::morphology::{calibrate, Calibration, Correspondences, Morphology};
use crate::objective::{LossWeights, RewardConfig, RewardTerm};
use crate::refmap::SourceMotionClip;
use crate::sim::{SimConfig, SimModel};
use crate::trainer::{EnvConfig, PpoConfig, Task, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub source: PathBuf,
    pub target: PathBuf,
    pub correspondences: PathBuf,
    /// Clip manifest, see [`ClipManifest`].
    pub clips: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub sampler_epsilon: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            hidden: t.hidden,
            init_log_std: t.init_log_std,
            sampler_epsilon: t.sampler_epsilon,
        }
    }
}

/// A named reward preset with per-term weight overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSpec {
    pub preset: String,
    pub overrides: BTreeMap<RewardTerm, f64>,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            preset: "retargeting".into(),
            overrides: BTreeMap::new(),
        }
    }
}

impl RewardSpec {
    pub fn resolve(&self) -> Result<RewardConfig> {
        let mut cfg = RewardConfig::preset(&self.preset)?;
        for (&term, &w) in &self.overrides {
            cfg = cfg.with_weight(term, w);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub bilevel: bool,
    /// Write a checkpoint every this many iterations; zero writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    pub paths: Paths,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub update: UpdateConfig,
    #[serde(default)]
    pub bounds: ConstraintBox,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub reward: RewardSpec,
    #[serde(default)]
    pub metrics: MetricConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses a config; `origin` names the text in error messages.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(origin, e))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, &path.display().to_string())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.paths.out)
    }

    /// Checks every section and that the referenced input files exist.
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.train_config()?.validate()?;
        self.metrics_validate()?;
        for (what, p) in [
            ("source morphology", &self.paths.source),
            ("target morphology", &self.paths.target),
            ("correspondences", &self.paths.correspondences),
            ("clip manifest", &self.paths.clips),
        ] {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(Error::Config(format!("{what} file `{}` does not exist", full.display())));
            }
        }
        Ok(())
    }

    fn metrics_validate(&self) -> Result<()> {
        let m = &self.metrics;
        for (name, v) in [
            ("h_thresh", m.h_thresh),
            ("v_thresh", m.v_thresh),
            ("penetration_threshold", m.penetration_threshold),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("metrics.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            ppo: self.ppo.clone(),
            env: self.env,
            update: self.update,
            bounds: self.bounds,
            loss: self.loss,
            reward: self.reward.resolve()?,
            hidden: self.policy.hidden.clone(),
            init_log_std: self.policy.init_log_std,
            sampler_epsilon: self.policy.sampler_epsilon,
            bilevel: self.bilevel,
            seed: self.seed,
        })
    }

    pub fn load_morphologies(&self) -> Result<(Morphology, Morphology, Correspondences)> {
        let source = Morphology::from_json_file(self.resolve(&self.paths.source))?;
        let target = Morphology::from_json_file(self.resolve(&self.paths.target))?;
        let pairs = Correspondences::from_json_file(self.resolve(&self.paths.correspondences), &source, &target)?;
        Ok((source, target, pairs))
    }

    pub fn load_calibration(&self) -> Result<(Morphology, Morphology, Correspondences, Calibration)> {
        let (s, t, pairs) = self.load_morphologies()?;
        let cal = calibrate(&s, &t, &pairs)?;
        Ok((s, t, pairs, cal))
    }

    /// All clips of the manifest; the first malformed clip is an error.
    pub fn load_clips(&self) -> Result<Vec<SourceMotionClip>> {
        let path = self.resolve(&self.paths.clips);
        let manifest = ClipManifest::read(&path)?;
        manifest.load(&path)?.into_iter().map(|(_, c)| c).collect()
    }

    pub fn load_task(&self) -> Result<Task> {
        let (source, target, pairs, cal) = self.load_calibration()?;
        let clips = self.load_clips()?;
        Task::new(SimModel::new(target, self.sim.clone())?, source, pairs, cal, clips)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_nom: Option<f64>,
}

/// List of clip files.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClipManifest {
    pub clips: Vec<ManifestEntry>,
}

impl ClipManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if m.clips.is_empty() {
            return Err(Error::Config(format!("clip manifest `{}` lists no clips", path.display())));
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Parses every listed clip; `manifest_path` anchors relative entries.
    pub fn load(&self, manifest_path: &Path) -> Result<Vec<(PathBuf, Result<SourceMotionClip>)>> {
        let base = manifest_path.parent().unwrap_or(Path::new(""));
        Ok(self
            .clips
            .iter()
            .map(|e| {
                let p = base.join(&e.path);
                let clip = SourceMotionClip::from_json_file(&p);
                (p, clip)
            })
            .collect())
    }
}
