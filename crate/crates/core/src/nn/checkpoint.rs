//! JSON network checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, DenseLayer, Network};
use crate::error::{Error, Result};

pub const FORMAT: &str = "introspect-network";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerFile {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
    /// Row-major `fan_in x fan_out`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkFile {
    pub format: String,
    pub version: u32,
    pub layers: Vec<LayerFile>,
}

impl From<&Network> for NetworkFile {
    fn from(net: &Network) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            layers: net
                .layers()
                .iter()
                .map(|l| LayerFile {
                    fan_in: l.fan_in(),
                    fan_out: l.fan_out(),
                    activation: l.activation(),
                    weights: l.weights().to_vec(),
                    bias: l.bias().to_vec(),
                })
                .collect(),
        }
    }
}

impl NetworkFile {
    pub fn into_network(self) -> Result<Network> {
        if self.format != FORMAT {
            return Err(Error::Shape(format!("unexpected checkpoint format `{}`", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Shape(format!("unsupported checkpoint version {}", self.version)));
        }
        let layers = self
            .layers
            .into_iter()
            .map(|l| DenseLayer::new(l.fan_in, l.fan_out, l.weights, l.bias, l.activation))
            .collect::<Result<Vec<_>>>()?;
        Network::from_layers(layers)
    }

    /// Parses and validates a checkpoint from raw bytes.
    pub fn parse(bytes: &[u8], origin: &str) -> Result<Network> {
        let file: NetworkFile = serde_json::from_slice(bytes)
            .map_err(|e| Error::format(origin, e.line() as u64, e.to_string()))?;
        file.into_network()
    }
}

pub fn network_to_json(net: &Network) -> String {
    serde_json::to_string(&NetworkFile::from(net)).expect("network serialises")
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, network_to_json(net)).map_err(|e| Error::io(path, e))
}

pub fn load_network(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    NetworkFile::parse(&bytes, &path.display().to_string())
}
