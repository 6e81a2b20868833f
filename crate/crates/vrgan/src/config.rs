//! Run configuration: a sectioned TOML file mirroring the dataset, model
//! and trainer settings, plus the two shipped presets.

use crate::baseline::BaselineConfig;
use crate::error::{Error, Result};
use crate::models::{CriticSpec, GeneratorSpec, RegressorSpec};
use crate::toydata::ToyConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which training objective a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vrgan,
    Vagan,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vrgan" => Ok(Method::Vrgan),
            "vagan" => Ok(Method::Vagan),
            other => Err(Error::InvalidArgument(format!(
                "unknown method {other}; expected vrgan or vagan"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Vrgan => "vrgan",
            Method::Vagan => "vagan",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub generator: GeneratorSpec,
    pub regressor: RegressorSpec,
    pub critic: CriticSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_seeds: 5 }
    }
}

/// Everything a run needs, serialized as sectioned TOML.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub toy: ToyConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Paper-scale preset: 224x224, 10,000 training images.
    pub fn toy_paper() -> Self {
        RunConfig {
            method: Method::Vrgan,
            toy: ToyConfig::default(),
            model: ModelConfig {
                generator: GeneratorSpec {
                    depth: 5,
                    base_channels: 32,
                    image_size: 224,
                    conditioned: true,
                },
                regressor: RegressorSpec::default(),
                critic: CriticSpec::default(),
            },
            train: TrainConfig::default(),
            baseline: BaselineConfig::default(),
            eval: EvalConfig { n_seeds: 5 },
        }
    }

    /// Desk-scale preset: 64x64, 2,000 training images, 200/200 pairs,
    /// depth-4 generator, 3 seeds. Sized so the full benchmark fits a CPU
    /// budget.
    pub fn toy_desk() -> Self {
        let toy = ToyConfig {
            image_size: 64,
            side_scale: 56.0,
            noise_sigma_px: 2.0,
            n_train: 2000,
            n_val_pairs: 200,
            n_test_pairs: 200,
            ..ToyConfig::default()
        };
        RunConfig {
            method: Method::Vrgan,
            toy,
            model: ModelConfig {
                generator: GeneratorSpec {
                    depth: 4,
                    base_channels: 16,
                    image_size: 64,
                    conditioned: true,
                },
                regressor: RegressorSpec {
                    base_channels: 16,
                    stem_stride: 2,
                    bn_frozen: true,
                },
                critic: CriticSpec {
                    base_channels: 16,
                    stem_stride: 2,
                },
            },
            train: TrainConfig {
                batch_size: 16,
                ..TrainConfig::default()
            },
            baseline: BaselineConfig {
                batch_size: 16,
                ..BaselineConfig::default()
            },
            eval: EvalConfig { n_seeds: 3 },
        }
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        match name {
            "toy-paper" => Ok(Self::toy_paper()),
            "toy-desk" => Ok(Self::toy_desk()),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset {other}; expected toy-paper or toy-desk"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.toy.validate()?;
        self.model.generator.validate()?;
        self.train.validate()?;
        self.baseline.validate()?;
        if self.model.generator.image_size != self.toy.image_size {
            return Err(Error::Config(format!(
                "generator image_size {} does not match dataset image_size {}",
                self.model.generator.image_size, self.toy.image_size
            )));
        }
        if self.eval.n_seeds < 1 {
            return Err(Error::Config("n_seeds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 over the canonical TOML form.
    pub fn content_hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(format!(
            "{:x}",
            Sha256::digest(self.to_toml()?.as_bytes())
        ))
    }

    /// Seed every sub-config consistently.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.toy.seed = seed;
        self.train.seed = seed;
        self.baseline.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::toy_paper().validate().unwrap();
        RunConfig::toy_desk().validate().unwrap();
        assert!(RunConfig::from_preset("toy-desk").is_ok());
        assert!(RunConfig::from_preset("nope").is_err());
    }

    #[test]
    fn toml_roundtrip_preserves_hash() {
        let cfg = RunConfig::toy_desk();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.content_hash().unwrap(), back.content_hash().unwrap());
        assert_eq!(back.method, Method::Vrgan);
        assert_eq!(back.toy.image_size, 64);
        assert_eq!(back.train.batch_size, 16);
    }

    #[test]
    fn lambda_keys_use_spec_names() {
        let text = RunConfig::toy_desk().to_toml().unwrap();
        assert!(text.contains("lambda_gx = 0.3"), "{text}");
        assert!(text.contains("lambda_reg = 0.03"));
        assert!(text.contains("lambda_rx = 1.0"));
        assert!(text.contains("lambda_rxp = 0.3"));
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let mut cfg = RunConfig::toy_desk();
        cfg.model.generator.image_size = 32;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_propagates() {
        let cfg = RunConfig::toy_desk().with_seed(17);
        assert_eq!(cfg.toy.seed, 17);
        assert_eq!(cfg.train.seed, 17);
        assert_eq!(cfg.baseline.seed, 17);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("vrgan".parse::<Method>().unwrap(), Method::Vrgan);
        assert_eq!("vagan".parse::<Method>().unwrap(), Method::Vagan);
        assert!("wgan".parse::<Method>().is_err());
        assert_eq!(Method::Vagan.to_string(), "vagan");
    }
}
