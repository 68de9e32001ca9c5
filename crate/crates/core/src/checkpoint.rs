//! Model checkpoints.
//!
//! A checkpoint is a magic line, a one-line JSON header, then the flat
//! parameter vector as little-endian `f64`. Saving and reloading reproduces
//! every parameter bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{expect_eof, read_f64s, write_f64s};
use crate::diffusion::{NoiseModel, NoiseModelSpec, ScheduleSpec};
use crate::error::{Error, Result};
use crate::numeric::MlpParams;

const MAGIC_LINE: &str = "FKPDCKPT v1";

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Stage that produced the weights, e.g. `bc` or `align-fkpd`.
    pub stage: String,
    pub seed: Option<u64>,
    pub steps: usize,
    /// Average D-MSE of the BC model on D, used as the default offset b.
    pub reference_dmse: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    spec: NoiseModelSpec,
    dims: Vec<usize>,
    schedule: ScheduleSpec,
    n_params: usize,
    meta: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: NoiseModel,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(model: NoiseModel, meta: CheckpointMeta) -> Self {
        Self { model, meta }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = Header {
            spec: self.model.spec(),
            dims: self.model.net().dims(),
            schedule: self.model.schedule_spec(),
            n_params: self.model.n_params(),
            meta: self.meta.clone(),
        };
        writeln!(w, "{MAGIC_LINE}")?;
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        write_f64s(&mut w, &self.model.params())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC_LINE {
            return Err(Error::Format(format!("not a checkpoint (first line {:?})", line.trim_end())));
        }
        line.clear();
        r.read_line(&mut line)?;
        let h: Header = serde_json::from_str(line.trim_end())?;
        if h.dims != h.spec.layer_dims() {
            return Err(Error::Format(format!("layer dims {:?} disagree with spec", h.dims)));
        }
        let mut net = MlpParams::zeros(&h.dims, h.spec.activation)?;
        if net.n_params() != h.n_params {
            return Err(Error::Format(format!("header says {} params, spec implies {}", h.n_params, net.n_params())));
        }
        net.set_flat(&read_f64s(&mut r, h.n_params)?)?;
        expect_eof(&mut r)?;
        let model = NoiseModel::new(net, h.spec.state_dim, h.spec.action_dim, h.spec.time_embed_dim, h.schedule)?;
        Ok(Self { model, meta: h.meta })
    }
}

/// Hex SHA-256 of the raw parameter bytes.
pub fn params_digest(model: &NoiseModel) -> String {
    let mut hasher = Sha256::new();
    for p in model.params() {
        hasher.update(p.to_le_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads only the header fields a caller may want without loading weights.
pub fn read_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC_LINE {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let mut header = String::new();
    r.by_ref().take(1 << 20).read_line(&mut header)?;
    let h: Header = serde_json::from_str(header.trim_end())?;
    Ok(h.meta)
}
