//! JSON checkpoints for velocity networks.

use std::path::Path;

use dmvae_core::networks::{VelocityNet, VelocityNetSpec};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, LabError, LabResult};

pub const FORMAT: &str = "dmvae-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Parameter-name prefix the net was built with.
    pub name: String,
    pub spec: VelocityNetSpec,
    /// Training steps behind these weights.
    pub step: usize,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn of(net: &VelocityNet, name: &str, step: usize) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            name: name.into(),
            spec: net.spec.clone(),
            step,
            params: net
                .params
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the net, checking every parameter's name and shape.
    pub fn to_net(&self) -> Result<VelocityNet, String> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(format!("unsupported format {} v{}", self.format, self.version));
        }
        let flat: Vec<f64> = self.params.iter().flat_map(|p| p.data.iter().copied()).collect();
        let net = VelocityNet::from_flat(self.spec.clone(), &self.name, &flat).map_err(|e| e.to_string())?;
        if net.params.len() != self.params.len() {
            return Err(format!("expected {} parameters, found {}", net.params.len(), self.params.len()));
        }
        for (p, r) in net.params.iter().zip(&self.params) {
            if p.name != r.name || p.value.shape() != (r.rows, r.cols) || r.data.len() != r.rows * r.cols {
                return Err(format!(
                    "parameter `{}` {:?} does not match the spec's `{}` {:?}",
                    r.name,
                    (r.rows, r.cols),
                    p.name,
                    p.value.shape()
                ));
            }
        }
        Ok(net)
    }
}

pub fn save(path: &Path, net: &VelocityNet, name: &str, step: usize) -> LabResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string(&Checkpoint::of(net, name, step)).map_err(|e| LabError::Checkpoint {
        path: path.into(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn load(path: &Path) -> LabResult<(VelocityNet, usize)> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let fail = |reason: String| LabError::Checkpoint {
        path: path.into(),
        reason,
    };
    let c: Checkpoint = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
    Ok((c.to_net().map_err(fail)?, c.step))
}
