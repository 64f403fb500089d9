use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::numeric::{AdamConfig, Matrix, ParameterStore, Scalar};
use crate::network::Trainer;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParameter {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Named parameter matrices plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub precision: String,
    pub config: NetworkConfig,
    pub params: Vec<NamedParameter>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(config: &NetworkConfig, store: &ParameterStore<T>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            precision: T::NAME.to_string(),
            config: config.clone(),
            params: store
                .iter()
                .map(|(_, p)| NamedParameter {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    values: p.value.data().iter().map(|v| v.f64()).collect(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Io(e.into()))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let c: Self = serde_json::from_reader(r).map_err(|e| Error::Parse {
            index: 0,
            message: format!("checkpoint: {e}"),
        })?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", c.version)));
        }
        Ok(c)
    }

    /// Rebuilds a trainer. When `expected` is given the stored configuration
    /// must match it exactly.
    pub fn restore<T: Scalar>(&self, expected: Option<&NetworkConfig>, adam: AdamConfig) -> Result<Trainer<T>> {
        if let Some(exp) = expected
            && exp != &self.config
        {
            return Err(Error::Config(
                "checkpoint was produced by a different network configuration".into(),
            ));
        }
        let (network, mut store) = Network::init::<T>(&self.config, 0)?;
        if store.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, network expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in &self.params {
            let id = store.id(&p.name)?;
            let value = Matrix::new(p.rows, p.cols, p.values.iter().map(|&v| T::of(v)).collect())?;
            store.set_value(id, value)?;
        }
        Ok(Trainer {
            network,
            store,
            adam,
            grad_clip: None,
        })
    }
}
