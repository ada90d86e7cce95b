//! JSON checkpoints: parameters by name, optimizer state, controller state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::curriculum::Curriculum;
use crate::enforcer::EpochCommStats;
use crate::error::{Error, Result};
use crate::policy::{PolicyParams, PARAM_NAMES};
use crate::tensor::{Parameterized, RmsProp, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub tensors: Vec<NamedTensor>,
    pub optimizer: RmsProp<f64>,
    pub curriculum: Curriculum,
    pub stats: EpochCommStats,
}

impl Checkpoint {
    pub fn capture(
        config: &ExperimentConfig,
        seed: u64,
        epoch: usize,
        params: &PolicyParams<f64>,
        optimizer: &RmsProp<f64>,
        curriculum: &Curriculum,
        stats: &EpochCommStats,
    ) -> Self {
        let tensors = params
            .named_params()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            seed,
            epoch,
            obs_dim: params.obs_dim,
            n_actions: params.n_actions,
            tensors,
            optimizer: optimizer.clone(),
            curriculum: curriculum.clone(),
            stats: stats.clone(),
        }
    }

    /// Rebuild the policy; every tensor must be present with its shape.
    pub fn params(&self) -> Result<PolicyParams<f64>> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let mut rng = crate::rng::seeded(0);
        let mut p = PolicyParams::<f64>::new(self.config.effective_policy(), self.obs_dim, self.n_actions, &mut rng)?;
        if self.tensors.len() != PARAM_NAMES.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                PARAM_NAMES.len(),
                self.tensors.len()
            )));
        }
        for ((name, dst), src) in PARAM_NAMES.iter().zip(p.params_mut()).zip(&self.tensors) {
            if src.name != *name || src.shape != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match expected `{name}` {:?}",
                    src.name,
                    src.shape,
                    dst.shape()
                )));
            }
            let t = Tensor::from_vec(&src.shape, src.values.clone())?;
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("cannot parse {}: {e}", path.display())))
    }
}
