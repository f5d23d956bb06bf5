//! Versioned checkpoint container: a JSON header describing parameter grids
//! keyed by module path, followed by a raw little-endian f32 blob. Stores
//! optimizer moments so resumed runs are bit-identical.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Adam, ParamStore};
use crate::palette::LabelPalette;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TRYCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("header: {0}")]
    Header(String),
    #[error("blob truncated: wanted {wanted} floats, had {had}")]
    Truncated { wanted: usize, had: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamDesc {
    pub name: String,
    pub dims: Vec<usize>,
    pub trainable: bool,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamDesc {
    pub slot: usize,
    pub m_offset: u64,
    pub v_offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamStateDesc {
    pub t: u64,
    pub entries: Vec<AdamDesc>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub iteration: u64,
    pub init_seed: u64,
    pub palette: LabelPalette,
    pub condition_resolution: (usize, usize),
    pub output_resolution: (usize, usize),
    pub cond_widths: [usize; 5],
    pub toig_widths: [usize; 4],
    pub params: Vec<ParamDesc>,
    pub adam_gen: Option<AdamStateDesc>,
    pub adam_disc: Option<AdamStateDesc>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParamStore<f32>,
    pub adam_gen: Option<(u64, Vec<(usize, Tensor<f32>, Tensor<f32>)>)>,
    pub adam_disc: Option<(u64, Vec<(usize, Tensor<f32>, Tensor<f32>)>)>,
}

#[allow(clippy::too_many_arguments)]
pub fn save(
    path: &Path,
    kind: &str,
    iteration: u64,
    init_seed: u64,
    palette: &LabelPalette,
    condition_resolution: (usize, usize),
    output_resolution: (usize, usize),
    cond_widths: [usize; 5],
    toig_widths: [usize; 4],
    store: &ParamStore<f32>,
    adam_gen: Option<&Adam>,
    adam_disc: Option<&Adam>,
) -> Result<(), CheckpointError> {
    let mut blob: Vec<f32> = Vec::new();
    let mut params = Vec::new();
    for e in store.entries() {
        params.push(ParamDesc {
            name: e.name.clone(),
            dims: e.value.dims().to_vec(),
            trainable: e.trainable,
            offset: blob.len() as u64,
            len: e.value.numel() as u64,
        });
        blob.extend_from_slice(e.value.data());
    }
    let mut encode_adam = |opt: Option<&Adam>| -> Option<AdamStateDesc> {
        opt.map(|a| {
            let (t, slots) = a.state();
            let mut entries = Vec::new();
            for (slot, m, v) in slots {
                let m_offset = blob.len() as u64;
                blob.extend_from_slice(m.data());
                let v_offset = blob.len() as u64;
                blob.extend_from_slice(v.data());
                entries.push(AdamDesc {
                    slot,
                    m_offset,
                    v_offset,
                    len: m.numel() as u64,
                });
            }
            AdamStateDesc { t, entries }
        })
    };
    let adam_gen = encode_adam(adam_gen);
    let adam_disc = encode_adam(adam_disc);

    let header = CheckpointHeader {
        kind: kind.to_string(),
        iteration,
        init_seed,
        palette: palette.clone(),
        condition_resolution,
        output_resolution,
        cond_widths,
        toig_widths,
        params,
        adam_gen,
        adam_disc,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    for v in &blob {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut v4 = [0u8; 4];
    f.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut l8 = [0u8; 8];
    f.read_exact(&mut l8)?;
    let hlen = u64::from_le_bytes(l8) as usize;
    let mut hbuf = vec![0u8; hlen];
    f.read_exact(&mut hbuf)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&hbuf).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut raw = Vec::new();
    f.read_to_end(&mut raw)?;
    if raw.len() % 4 != 0 {
        return Err(CheckpointError::Header("blob length not float-aligned".into()));
    }
    let blob: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let fetch = |offset: u64, len: u64| -> Result<Vec<f32>, CheckpointError> {
        let (o, l) = (offset as usize, len as usize);
        if o + l > blob.len() {
            return Err(CheckpointError::Truncated {
                wanted: o + l,
                had: blob.len(),
            });
        }
        Ok(blob[o..o + l].to_vec())
    };

    let mut store = ParamStore::new();
    for p in &header.params {
        let data = fetch(p.offset, p.len)?;
        store.add(&p.name, Tensor::from_vec(&p.dims, data), p.trainable);
    }
    let decode_adam = |desc: &Option<AdamStateDesc>| -> Result<
        Option<(u64, Vec<(usize, Tensor<f32>, Tensor<f32>)>)>,
        CheckpointError,
    > {
        match desc {
            None => Ok(None),
            Some(d) => {
                let mut slots = Vec::new();
                for e in &d.entries {
                    let dims = header.params[e.slot].dims.clone();
                    let m = Tensor::from_vec(&dims, fetch(e.m_offset, e.len)?);
                    let v = Tensor::from_vec(&dims, fetch(e.v_offset, e.len)?);
                    slots.push((e.slot, m, v));
                }
                Ok(Some((d.t, slots)))
            }
        }
    };
    let adam_gen = decode_adam(&header.adam_gen)?;
    let adam_disc = decode_adam(&header.adam_disc)?;
    Ok(Checkpoint {
        header,
        store,
        adam_gen,
        adam_disc,
    })
}
