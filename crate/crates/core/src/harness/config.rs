use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::AdaptConfig;
use crate::datagen::{DatagenConfig, ViewJitter};
use crate::describe::{DescriptorConfig, MarsConfig};
use crate::detector::DetectorConfig;
use crate::error::{ForgeError, Result};
use crate::track::TrackerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Write an intermediate checkpoint every this many steps (0 = final only).
    pub checkpoint_every: usize,
}

impl OptimizerConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ForgeError::Config(format!("{name}: learning_rate must be positive")));
        }
        if self.batch_size == 0 {
            return Err(ForgeError::Config(format!("{name}: batch_size must be at least 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub adapt_enabled: bool,
    pub mars_enabled: bool,
}

/// Landmark view pools for descriptor training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewsConfig {
    pub train_worlds: usize,
    pub eval_worlds: usize,
    pub landmarks_per_world: usize,
    pub views_per_landmark: usize,
    pub jitter: ViewJitter,
}

impl Default for ViewsConfig {
    fn default() -> Self {
        Self { train_worlds: 24, eval_worlds: 10, landmarks_per_world: 5, views_per_landmark: 4, jitter: ViewJitter::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Held-out scenes per domain for detection recall.
    pub detection_images: usize,
    pub sequence_frames: usize,
    /// Camera motion per frame, world units.
    pub sequence_drift: [f64; 2],
    pub sequence_spin: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { detection_images: 48, sequence_frames: 20, sequence_drift: [1.5, 0.5], sequence_spin: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub datagen: DatagenConfig,
    pub detector: DetectorConfig,
    pub adapt: AdaptConfig,
    pub mars: MarsConfig,
    pub descriptor: DescriptorConfig,
    pub views: ViewsConfig,
    pub detector_optimizer: OptimizerConfig,
    pub descriptor_optimizer: OptimizerConfig,
    pub ablation: AblationFlags,
    pub track: TrackerConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            datagen: DatagenConfig::default(),
            detector: DetectorConfig::default(),
            adapt: AdaptConfig::default(),
            mars: MarsConfig::default(),
            descriptor: DescriptorConfig::default(),
            views: ViewsConfig::default(),
            detector_optimizer: OptimizerConfig { learning_rate: 1e-2, steps: 2000, batch_size: 8, checkpoint_every: 0 },
            descriptor_optimizer: OptimizerConfig {
                learning_rate: 3e-3,
                steps: 1500,
                batch_size: 16,
                checkpoint_every: 0,
            },
            ablation: AblationFlags { adapt_enabled: true, mars_enabled: true },
            track: TrackerConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.datagen.validate()?;
        self.detector.validate()?;
        self.adapt.validate()?;
        self.mars.validate()?;
        self.descriptor.validate()?;
        self.detector_optimizer.validate("detector_optimizer")?;
        self.descriptor_optimizer.validate("descriptor_optimizer")?;
        self.track.validate()?;
        if self.views.views_per_landmark < 2 {
            return Err(ForgeError::Config("views: views_per_landmark must be at least 2".into()));
        }
        if self.views.landmarks_per_world == 0 || self.views.train_worlds == 0 || self.views.eval_worlds == 0 {
            return Err(ForgeError::Config("views: world and landmark counts must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ForgeError::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ForgeError::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical serialized form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Descriptor MARs settings after the ablation switch.
    pub fn effective_mars(&self) -> MarsConfig {
        if self.ablation.mars_enabled {
            self.mars.clone()
        } else {
            self.mars.disabled()
        }
    }

    /// Adaptation settings after the ablation switch.
    pub fn effective_adapt(&self) -> AdaptConfig {
        if self.ablation.adapt_enabled {
            self.adapt.clone()
        } else {
            AdaptConfig { w_global: 0.0, w_reg: 0.0, w_vsa_adv: 0.0, w_vsa_con: 0.0, ..self.adapt.clone() }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_field_is_rejected() {
        let mut text = ExperimentConfig::default().to_toml();
        text = text.replacen("[datagen]\n", "[datagen]\nbogus = 1\n", 1);
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let missing = ExperimentConfig::default().to_toml().replacen("seed = 0\n", "", 1);
        assert!(ExperimentConfig::from_toml(&missing).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = ExperimentConfig::default();
        c.detector_optimizer.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.views.views_per_landmark = 1;
        assert!(c.validate().is_err());
    }
}
