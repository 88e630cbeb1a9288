//! Run configuration: one TOML file with a section per module.
//!
//! Every key has a default, unknown keys are rejected, and the resolved
//! configuration can be echoed next to a command's outputs together with
//! content hashes of its input files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ca::{CaParams, TerrainLayers};
use crate::dataset::DatasetConfig;
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::evaluate::EvalConfig;
use crate::terrain::{load_terrain, SyntheticTerrain};
use crate::train::{Plateau, TrainConfig};
use crate::unet::NetConfig;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const INPUT_HASHES_FILE: &str = "inputs.sha256";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct TerrainSection {
    /// Terrain file (binary or text); when absent a synthetic terrain is
    /// generated.
    pub path: Option<PathBuf>,
    /// Overrides the cell size of a loaded terrain file.
    pub cell_size: Option<f64>,
    pub synthetic: SyntheticTerrain,
}


#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Trajectories in a training dataset.
    pub train_samples: usize,
    /// Trajectories in an ensemble dataset.
    pub ensemble_samples: usize,
    /// Continuations averaged per ensemble target.
    pub ensemble_size: usize,
    pub n_steps: usize,
    pub stride: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            train_samples: 900,
            ensemble_samples: 50,
            ensemble_size: 50,
            n_steps: 50,
            stride: 10,
        }
    }
}

impl DatasetSection {
    pub fn train(&self) -> DatasetConfig {
        DatasetConfig {
            n_samples: self.train_samples,
            n_steps: self.n_steps,
            stride: self.stride,
            ensemble_size: 1,
        }
    }

    pub fn ensemble(&self) -> DatasetConfig {
        DatasetConfig {
            n_samples: self.ensemble_samples,
            n_steps: self.n_steps,
            stride: self.stride,
            ensemble_size: self.ensemble_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub terrain: TerrainSection,
    pub ca: CaParams,
    pub dataset: DatasetSection,
    pub diffusion: DiffusionConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub plateau: Plateau,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            output_dir: PathBuf::from("run"),
            terrain: TerrainSection::default(),
            ca: CaParams::default(),
            dataset: DatasetSection::default(),
            diffusion: DiffusionConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            plateau: Plateau::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.ca.validate()?;
        self.dataset.train().validate()?;
        self.dataset.ensemble().validate()?;
        self.diffusion.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if let Some(c) = self.terrain.cell_size {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidConfig("terrain.cell_size must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Short content hash of the resolved configuration.
    pub fn hash_hex(&self) -> String {
        hex::encode(&Sha256::digest(self.to_toml().as_bytes())[..8])
    }

    /// Loads the configured terrain file or generates the synthetic one.
    pub fn terrain(&self) -> Result<TerrainLayers> {
        match &self.terrain.path {
            Some(p) => {
                let mut t = load_terrain(p)?;
                if let Some(c) = self.terrain.cell_size {
                    t.cell_size = c;
                }
                Ok(t)
            }
            None => self.terrain.synthetic.generate(),
        }
    }

    /// Writes the resolved configuration and the SHA-256 of each input file
    /// into `dir`.
    pub fn echo(&self, dir: &Path, inputs: &[&Path]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = dir.join(RESOLVED_CONFIG_FILE);
        let text = format!("# config hash {}\n{}", self.hash_hex(), self.to_toml());
        std::fs::write(&cfg, text).map_err(|e| Error::io(&cfg, e))?;
        let mut lines = String::new();
        let mut all: Vec<&Path> = inputs.to_vec();
        if let Some(p) = &self.terrain.path {
            all.push(p);
        }
        for p in all {
            lines.push_str(&format!("{}  {}\n", file_sha256(p)?, p.display()));
        }
        let out = dir.join(INPUT_HASHES_FILE);
        std::fs::write(&out, lines).map_err(|e| Error::io(&out, e))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("[net]\nchannels = 3").is_err());
        assert!(RunConfig::parse("[terrain.synthetic]\nwidht = 3").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::parse(
            "master_seed = 5\n[net]\nbase_channels = 32\nstage_channels = [32, 64, 64]\nimage_size = 32\nnorm_groups = 8\n[dataset]\nstride = 5\nn_steps = 25\n",
        )
        .unwrap();
        assert_eq!(cfg.master_seed, 5);
        assert_eq!(cfg.dataset.train().n_samples, 900);
        assert_eq!(cfg.dataset.ensemble().ensemble_size, 50);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("[diffusion]\nsampling_steps = 700").is_err());
        assert!(RunConfig::parse("[ca]\np_h = 1.5").is_err());
    }
}
