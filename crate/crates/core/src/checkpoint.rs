//! JSON checkpoints of trained models.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::narx::NarxModel;
use crate::ssm::PrssmParams;
use crate::train::TrainConfig;

/// A trained model with the normalization it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model_type", rename_all = "snake_case")]
pub enum Checkpoint {
    Prssm {
        seed: u64,
        state_dim: usize,
        input_dim: usize,
        output_dim: usize,
        norm: NormStats,
        config: TrainConfig,
        params: PrssmParams,
    },
    Narx {
        seed: u64,
        input_dim: usize,
        output_dim: usize,
        norm: NormStats,
        model: NarxModel,
    },
}

impl Checkpoint {
    pub fn prssm(params: PrssmParams, config: TrainConfig, norm: NormStats) -> Self {
        Checkpoint::Prssm {
            seed: config.seed,
            state_dim: params.state_dim(),
            input_dim: params.input_dim(),
            output_dim: params.output_dim(),
            norm,
            config,
            params,
        }
    }

    pub fn narx(model: NarxModel, norm: NormStats) -> Self {
        Checkpoint::Narx {
            seed: model.config.seed,
            input_dim: model.input_dim,
            output_dim: model.output_dim,
            norm,
            model,
        }
    }

    pub fn norm(&self) -> &NormStats {
        match self {
            Checkpoint::Prssm { norm, .. } | Checkpoint::Narx { norm, .. } => norm,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Checkpoint::Prssm { input_dim, .. } | Checkpoint::Narx { input_dim, .. } => *input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Checkpoint::Prssm { output_dim, .. } | Checkpoint::Narx { output_dim, .. } => *output_dim,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    fn validate(&self) -> Result<()> {
        match self {
            Checkpoint::Prssm {
                state_dim,
                input_dim,
                output_dim,
                params,
                ..
            } => {
                params.validate()?;
                if (params.state_dim(), params.input_dim(), params.output_dim())
                    != (*state_dim, *input_dim, *output_dim)
                {
                    return Err(Error::DimensionMismatch(
                        "checkpoint header disagrees with its parameters".into(),
                    ));
                }
            }
            Checkpoint::Narx {
                input_dim,
                output_dim,
                model,
                ..
            } => {
                if (model.input_dim, model.output_dim) != (*input_dim, *output_dim) || model.gps.len() != *output_dim {
                    return Err(Error::DimensionMismatch(
                        "checkpoint header disagrees with its model".into(),
                    ));
                }
                for gp in &model.gps {
                    gp.validate()?;
                }
            }
        }
        if self.norm().u_mean.len() != self.input_dim() || self.norm().y_mean.len() != self.output_dim() {
            return Err(Error::DimensionMismatch(
                "normalization statistics do not match the model".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
