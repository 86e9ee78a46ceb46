//! Checkpoint files: a JSON header (architecture, objective, provenance,
//! tensor table) followed by raw little-endian f32 payloads — every
//! parameter tensor in `named_tensors` order, then the optimizer moments
//! when present. Loads rebuild the model from the header's own config and
//! refuse anything that does not byte-match the table.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LanguageModel, ModelConfig};
use crate::train::{AdamState, Objective};

const MAGIC: &[u8; 4] = b"PSCK";
const VERSION: u8 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub model: LanguageModel<f32>,
    pub objective: Objective,
    /// Fingerprint of the dataset the model was trained on.
    pub dataset_fingerprint: String,
    /// Last completed epoch.
    pub epoch: u32,
    pub opt: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    objective: Objective,
    dataset_fingerprint: String,
    epoch: u32,
    tensors: Vec<TensorInfo>,
    opt_state: bool,
    opt_step: u64,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tensors: Vec<TensorInfo> = ckpt
        .model
        .named_tensors()
        .iter()
        .map(|(name, t)| TensorInfo {
            name: name.clone(),
            shape: t.shape.clone(),
        })
        .collect();
    let header = Header {
        config: ckpt.model.config().clone(),
        objective: ckpt.objective,
        dataset_fingerprint: ckpt.dataset_fingerprint.clone(),
        epoch: ckpt.epoch,
        tensors,
        opt_state: ckpt.opt.is_some(),
        opt_step: ckpt.opt.as_ref().map_or(0, |o| o.step),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Integrity(format!("unserializable header: {e}")))?;

    let mut f = BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&[VERSION])?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    for (_, t) in ckpt.model.named_tensors() {
        write_f32s(&mut f, &t.data)?;
    }
    if let Some(opt) = &ckpt.opt {
        for buf in opt.m.iter().chain(opt.v.iter()) {
            write_f32s(&mut f, buf)?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut f, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let mut version = [0u8; 1];
    read_exact(&mut f, &mut version)?;
    if version[0] != VERSION {
        return Err(Error::Integrity(format!(
            "checkpoint version {} unsupported (expected {VERSION})",
            version[0]
        )));
    }
    let mut len = [0u8; 4];
    read_exact(&mut f, &mut len)?;
    let mut header_json = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact(&mut f, &mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Integrity(format!("bad checkpoint header: {e}")))?;
    header.config.validate()?;

    let mut model = LanguageModel::<f32>::init(&header.config, 0)?;
    {
        let tensors = model.named_tensors_mut();
        if tensors.len() != header.tensors.len() {
            return Err(Error::Integrity(format!(
                "header lists {} tensors, architecture has {}",
                header.tensors.len(),
                tensors.len()
            )));
        }
        for (info, (name, tensor)) in header.tensors.iter().zip(tensors) {
            if info.name != *name || info.shape != tensor.shape {
                return Err(Error::Integrity(format!(
                    "tensor table mismatch: file has {} {:?}, architecture wants {} {:?}",
                    info.name, info.shape, name, tensor.shape
                )));
            }
            read_f32s(&mut f, &mut tensor.data)?;
        }
    }

    let opt = if header.opt_state {
        let mut state = AdamState::new(&model);
        state.step = header.opt_step;
        for buf in state.m.iter_mut().chain(state.v.iter_mut()) {
            read_f32s(&mut f, buf)?;
        }
        Some(state)
    } else {
        None
    };

    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(Error::Integrity(
            "checkpoint has trailing bytes past the declared payload".into(),
        ));
    }

    Ok(Checkpoint {
        model,
        objective: header.objective,
        dataset_fingerprint: header.dataset_fingerprint,
        epoch: header.epoch,
        opt,
    })
}

fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, out: &mut [f32]) -> Result<()> {
    let mut bytes = vec![0u8; out.len() * 4];
    read_exact(r, &mut bytes)?;
    for (x, chunk) in out.iter_mut().zip(bytes.chunks_exact(4)) {
        *x = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Integrity("checkpoint truncated".into())
        } else {
            Error::Io(e)
        }
    })
}
