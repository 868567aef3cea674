//! Checkpoint files: one line of JSON header, a `\n`, then the flat parameter
//! vector in NFTENSOR framing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{DenoiserNet, Mlp, NetArch, RefinerNet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchSpec {
    Denoiser(NetArch),
    Refiner(NetArch),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ArchSpec,
    pub step: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn of_denoiser(net: &DenoiserNet, step: u64, seed: u64) -> Self {
        Self {
            header: CheckpointHeader { arch: ArchSpec::Denoiser(net.arch().clone()), step, seed },
            params: net.params().to_vec(),
        }
    }

    pub fn of_refiner(net: &RefinerNet, step: u64, seed: u64) -> Self {
        Self {
            header: CheckpointHeader { arch: ArchSpec::Refiner(net.arch().clone()), step, seed },
            params: net.params().to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        Tensor::new(vec![self.params.len()], self.params.clone())?.write_nft(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint header is not newline-terminated".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])?;
        let params = Tensor::read_nft(&bytes[split + 1..])?.into_data();
        Ok(Self { header, params })
    }

    pub fn into_denoiser(self) -> Result<DenoiserNet> {
        match self.header.arch {
            ArchSpec::Denoiser(arch) => {
                let mut net = DenoiserNet::zeros(arch);
                net.set_params(self.params)?;
                Ok(net)
            }
            ArchSpec::Refiner(_) => Err(Error::Format("expected a denoiser checkpoint, found a refiner".into())),
        }
    }

    pub fn into_refiner(self) -> Result<RefinerNet> {
        match self.header.arch {
            ArchSpec::Refiner(arch) => {
                let d = arch.image_dim();
                let mut mlp = Mlp::zeros(d + arch.time_dim + arch.num_classes + 1, arch.hidden, arch.depth, d);
                mlp.set_params(self.params)?;
                RefinerNet::from_mlp(arch, mlp)
            }
            ArchSpec::Denoiser(_) => Err(Error::Format("expected a refiner checkpoint, found a denoiser".into())),
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
