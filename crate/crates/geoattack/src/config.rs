//! Experiment configuration (JSON) and seed resolution.

use std::path::Path;

use anyhow::{bail, Context};
use geoattack_core::attacks::{FsaAttackConfig, LinfAttackConfig};
use geoattack_core::ga::{GaConfig, InnerAttack};
use geoattack_core::rng::derive_seed;
use geoattack_core::zoo::{Arch, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    /// Derived from the master seed when unset.
    pub seed: Option<u64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 100,
            size: 16,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooEntry {
    pub arch: Arch,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZooConfig {
    pub models: Vec<ZooEntry>,
    pub train: TrainConfig,
    pub autoencoder: TrainConfig,
    pub autoencoder_seed: Option<u64>,
    /// Minimum held-out accuracy of every classifier.
    pub accuracy_gate: f64,
    /// Maximum held-out mean squared reconstruction error.
    pub reconstruction_gate: f64,
}

impl Default for ZooConfig {
    fn default() -> Self {
        Self {
            models: Arch::ALL.iter().map(|&arch| ZooEntry { arch, seed: None }).collect(),
            train: TrainConfig::classifier(10),
            autoencoder: TrainConfig::autoencoder(30),
            autoencoder_seed: None,
            accuracy_gate: 0.9,
            reconstruction_gate: geoattack_core::zoo::RECONSTRUCTION_GATE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Linf,
    Fsa,
}

/// Which pool models train the attack and which validate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionChoice {
    /// Minimum partition loss over the pool.
    Auto,
    Fixed { train: Vec<usize>, validation: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub zoo: ZooConfig,
    /// Index into `zoo.models` of the held-out model that is scored against.
    pub test_model: usize,
    /// Indices into `zoo.models` available as training/validation models.
    pub pool: Vec<usize>,
    pub partition: PartitionChoice,
    /// Training-group size for partition search.
    pub partition_k: usize,
    /// Number of evaluation inputs (held-out images every zoo model labels correctly).
    pub evaluation_inputs: usize,
    /// Attack used to measure transfer rates between pool models.
    pub transfer: LinfAttackConfig,
    pub family: Family,
    pub linf: LinfAttackConfig,
    pub fsa: FsaAttackConfig,
    /// `K`.
    pub sub_procedures: usize,
    pub eta: f64,
    pub eta_grid: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dataset: DatasetConfig::default(),
            zoo: ZooConfig::default(),
            test_model: 2,
            pool: vec![0, 1, 3, 4, 5, 6],
            partition: PartitionChoice::Auto,
            partition_k: 3,
            evaluation_inputs: 200,
            transfer: LinfAttackConfig {
                epsilon: 16.0,
                ..LinfAttackConfig::default()
            },
            family: Family::Linf,
            linf: LinfAttackConfig {
                epsilon: 16.0,
                ..LinfAttackConfig::default()
            },
            fsa: FsaAttackConfig {
                iterations: 10,
                ..FsaAttackConfig::default()
            },
            sub_procedures: 5,
            eta: 0.1,
            eta_grid: vec![0.001, 0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9],
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fills every unset seed from the master seed and overwrites the attack
    /// seeds, then checks the invariants.
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        let s = self.seed;
        self.dataset.seed.get_or_insert(derive_seed(s, 1));
        for (i, m) in self.zoo.models.iter_mut().enumerate() {
            m.seed.get_or_insert(derive_seed(s, 100 + i as u64));
        }
        self.zoo.autoencoder_seed.get_or_insert(derive_seed(s, 200));
        self.transfer.seed = derive_seed(s, 300);
        self.linf.seed = derive_seed(s, 301);
        self.fsa.seed = derive_seed(s, 302);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let n = self.zoo.models.len();
        if self.test_model >= n {
            bail!("test_model {} out of range for {n} models", self.test_model);
        }
        if self.pool.contains(&self.test_model) {
            bail!("test_model {} must not be in the pool", self.test_model);
        }
        let mut seen = vec![false; n];
        for &p in &self.pool {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                bail!("pool index {p} out of range or repeated");
            }
        }
        if self.pool.len() < 4 {
            bail!("pool of {} models is too small (need ≥ 4)", self.pool.len());
        }
        if let PartitionChoice::Fixed { train, validation } = &self.partition {
            let mut all: Vec<usize> = train.iter().chain(validation).copied().collect();
            all.sort_unstable();
            let mut pool = self.pool.clone();
            pool.sort_unstable();
            if all != pool {
                bail!("fixed partition must split the pool exactly");
            }
        }
        if self.eta_grid.iter().any(|e| !(0.0..1.0).contains(e)) || !(0.0..1.0).contains(&self.eta) {
            bail!("eta values must lie in [0, 1)");
        }
        if self.evaluation_inputs == 0 {
            bail!("evaluation_inputs must be ≥ 1");
        }
        self.transfer.validate()?;
        self.ga(Family::Linf).validate()?;
        self.ga(Family::Fsa).validate()?;
        Ok(())
    }

    pub fn ga(&self, family: Family) -> GaConfig {
        let inner = match family {
            Family::Linf => InnerAttack::Linf(self.linf.clone()),
            Family::Fsa => InnerAttack::Fsa(self.fsa.clone()),
        };
        GaConfig {
            sub_procedures: self.sub_procedures,
            eta: self.eta,
            inner,
        }
    }

    /// `m{index}-{arch}` for every zoo entry.
    pub fn model_ids(&self) -> Vec<String> {
        self.zoo
            .models
            .iter()
            .enumerate()
            .map(|(i, m)| format!("m{i}-{}", m.arch.tag()))
            .collect()
    }
}
