//! Single-file checkpoint container: config echo, dataset hash, all
//! parameter tensors as 32-bit values, optimizer state, and the best
//! validation record. JSON with shortest-round-trip floats, so save/load is
//! value-exact.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adamax::{Adamax, AdamaxConfig, TensorState};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};
use crate::tensor::{ParameterGroup, Scalar, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl TensorRecord {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let t32: Tensor<f32> = t.cast();
        Self {
            rows: t32.rows(),
            cols: t32.cols(),
            values: t32.data().to_vec(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Ok(Tensor::<f32>::new(self.rows, self.cols, self.values.clone())?.cast())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimizerEntry {
    pub name: String,
    pub first_moment: TensorRecord,
    pub inf_norm: TensorRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimizerRecord {
    pub step_count: usize,
    pub entries: Vec<OptimizerEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub dims: ModelDims,
    /// Content hash of the dataset files the vocabularies were built from.
    pub dataset_hash: String,
    pub granularity: String,
    /// Resolved temporal-scope flag the model was trained with.
    pub history_only: bool,
    pub best_epoch: usize,
    pub best_valid_mrr: f64,
    pub parameters: Vec<(String, TensorRecord)>,
    pub optimizer: OptimizerRecord,
}

impl Checkpoint {
    pub fn new<T: Scalar>(
        config: &TrainConfig,
        dims: ModelDims,
        dataset_hash: &str,
        granularity: &str,
        history_only: bool,
        best_epoch: usize,
        best_valid_mrr: f64,
        params: &ModelParams<T>,
        optimizer: &Adamax<T>,
    ) -> Self {
        let mut parameters = Vec::new();
        params.visit(|name, tensor, _| {
            parameters.push((name, TensorRecord::from_tensor(tensor)));
        });
        let optimizer = OptimizerRecord {
            step_count: optimizer.step_count,
            entries: optimizer
                .state
                .iter()
                .map(|s| OptimizerEntry {
                    name: s.name.clone(),
                    first_moment: TensorRecord::from_tensor(&s.first_moment),
                    inf_norm: TensorRecord::from_tensor(&s.inf_norm),
                })
                .collect(),
        };
        Self {
            config: config.clone(),
            dims,
            dataset_hash: dataset_hash.to_string(),
            granularity: granularity.to_string(),
            history_only,
            best_epoch,
            best_valid_mrr,
            parameters,
            optimizer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer(&mut writer, self)?;
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }

    /// Materialize model parameters at the requested precision.
    pub fn model_params<T: Scalar>(&self) -> Result<ModelParams<T>> {
        let mut group = ParameterGroup::new();
        for (name, rec) in &self.parameters {
            group.push(name.clone(), rec.to_tensor::<T>()?, true);
        }
        ModelParams::from_group(self.dims, &group)
    }

    /// Restore optimizer state for resuming.
    pub fn optimizer_state<T: Scalar>(&self, config: AdamaxConfig) -> Result<Adamax<T>> {
        let mut opt = Adamax::new(config);
        opt.step_count = self.optimizer.step_count;
        opt.state = self
            .optimizer
            .entries
            .iter()
            .map(|e| {
                Ok(TensorState {
                    name: e.name.clone(),
                    first_moment: e.first_moment.to_tensor()?,
                    inf_norm: e.inf_norm.to_tensor()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(opt)
    }
}

/// SHA-256 of a file's bytes, hex-encoded. Used to stamp evaluation reports
/// with the checkpoint they came from.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{:02x}", b))
        .collect())
}

/// Guard for loading: the checkpoint must have been trained on the same
/// dataset content.
pub fn check_dataset_hash(checkpoint: &Checkpoint, dataset_hash: &str) -> Result<()> {
    if checkpoint.dataset_hash != dataset_hash {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained on dataset {} but the loaded dataset hashes to {}",
            checkpoint.dataset_hash, dataset_hash
        )));
    }
    Ok(())
}
