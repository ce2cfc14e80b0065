//! Versioned JSON checkpoints holding everything needed to resume training
//! bit-for-bit: configuration, weights, embeddings, optimizer moments and
//! trainer position (step, data cursor, RNG streams, clipping threshold).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::denoiser::DenoiserParams;
use crate::diffusion::{Trainer, TrainerState};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::optim::AdamWState;
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub params: Vec<(String, Matrix)>,
    pub embedding: Matrix,
    pub optimizer: AdamWState,
    pub trainer: TrainerState,
}

impl Checkpoint {
    pub fn from_trainer(config: &RunConfig, trainer: &Trainer) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            params: trainer
                .params
                .names()
                .iter()
                .cloned()
                .zip(trainer.params.values().iter().cloned())
                .collect(),
            embedding: trainer.table.matrix().clone(),
            optimizer: trainer.optimizer.clone(),
            trainer: trainer.state(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let header: Header = serde_json::from_slice(bytes)
            .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn denoiser(&self) -> Result<DenoiserParams> {
        DenoiserParams::from_named(self.config.denoiser_config(), self.params.clone())
    }

    pub fn table(&self) -> EmbeddingTable {
        EmbeddingTable::new(self.embedding.clone())
    }

    /// Rebuilds a trainer over `data` positioned exactly where this
    /// checkpoint was taken.
    pub fn into_trainer(self, data: Vec<crate::data::SeqPair>) -> Result<Trainer> {
        let params = self.denoiser()?;
        let table = self.table();
        let mut trainer = Trainer::new(self.config.train.clone(), params, table, data)?;
        trainer.restore_state(&self.trainer, self.optimizer)?;
        Ok(trainer)
    }
}
