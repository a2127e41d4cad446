//! Run configuration: TOML with sections and explicit defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DriverError;
use crate::hamiltonian::{Hamiltonian, ModelSpec};
use crate::lattice::{LatticeGeometry, SiteMode};
use crate::network::{Cnn, NetworkConfig};
use crate::optimizer::SrConfig;
use crate::sampler::{SamplerConfig, SelectionWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub lx: usize,
    pub ly: usize,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self { lx: 4, ly: 4 }
    }
}

/// Whether the Marshall sign multiplies the network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SignPrior {
    /// Marshall sign for spin models, none for t-J.
    #[default]
    Auto,
    Marshall,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Number of randomly initialized parameter candidates.
    pub candidates: usize,
    pub e_min: f64,
    pub e_max: f64,
    pub count: usize,
    pub gap: Option<usize>,
    pub max_rejected: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        let w = SelectionWindow::default();
        Self {
            candidates: 4,
            e_min: w.e_min,
            e_max: w.e_max,
            count: w.count,
            gap: w.gap,
            max_rejected: w.max_rejected,
        }
    }
}

impl SelectionConfig {
    pub fn window(&self) -> SelectionWindow {
        SelectionWindow {
            e_min: self.e_min,
            e_max: self.e_max,
            count: self.count,
            gap: self.gap,
            max_rejected: self.max_rejected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_steps: usize,
    pub seed: u64,
    /// Checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Sampling threads; 0 uses every available core.
    pub workers: usize,
    pub resume_from: Option<PathBuf>,
    pub sign_prior: SignPrior,
    pub model: ModelSpec,
    pub lattice: LatticeConfig,
    pub network: NetworkConfig,
    pub sampler: SamplerConfig,
    pub sr: SrConfig,
    pub selection: SelectionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_steps: 100,
            seed: 1,
            checkpoint_every: 50,
            workers: 0,
            resume_from: None,
            sign_prior: SignPrior::Auto,
            model: ModelSpec::default(),
            lattice: LatticeConfig::default(),
            network: NetworkConfig::default(),
            sampler: SamplerConfig::default(),
            sr: SrConfig::default(),
            selection: SelectionConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, DriverError> {
        toml::from_str(text).map_err(|e| DriverError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DriverError> {
        let text = std::fs::read_to_string(path).map_err(|e| DriverError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Every field, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn geometry(&self) -> Result<LatticeGeometry, DriverError> {
        LatticeGeometry::new(self.lattice.lx, self.lattice.ly).map_err(|e| DriverError::Config(e.to_string()))
    }

    pub fn hamiltonian(&self) -> Result<Hamiltonian, DriverError> {
        Hamiltonian::new(self.model, self.geometry()?).map_err(|e| DriverError::Config(e.to_string()))
    }

    pub fn use_sign_prior(&self) -> bool {
        match self.sign_prior {
            SignPrior::Auto => self.model.mode() == SiteMode::Spin,
            SignPrior::Marshall => true,
            SignPrior::None => false,
        }
    }

    /// Sampler settings with the stream seed taken from the run seed.
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.seed,
            ..self.sampler.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DriverError> {
        let cfg_err = |e: String| DriverError::Config(e);
        self.model.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.hamiltonian()?;
        self.network.validate().map_err(|e| cfg_err(e.to_string()))?;
        Cnn::new(self.network.clone()).map_err(|e| cfg_err(e.to_string()))?;
        let (ph, pw) = (self.network.conv_kernel[0] / 2, self.network.conv_kernel[1] / 2);
        if ph >= self.lattice.ly || pw >= self.lattice.lx {
            return Err(cfg_err(format!(
                "conv kernel {:?} needs padding larger than the {}x{} lattice",
                self.network.conv_kernel, self.lattice.lx, self.lattice.ly
            )));
        }
        self.sampler.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.sr.validate().map_err(|e| cfg_err(e.to_string()))?;
        if self.sign_prior == SignPrior::Marshall && self.model.mode() != SiteMode::Spin {
            return Err(cfg_err("the Marshall sign prior needs a spin model".into()));
        }
        if self.selection.candidates == 0 {
            return Err(cfg_err("selection needs at least one candidate".into()));
        }
        if !(self.selection.e_min < self.selection.e_max) || self.selection.count == 0 {
            return Err(cfg_err("selection window is empty".into()));
        }
        Ok(())
    }
}
