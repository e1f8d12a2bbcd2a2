//! Versioned, checksummed container for a complete training state.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "GMMUCKPT" | version u32 | header_len u64 | header (JSON)
//! | payload_len u64 | payload (f32 values) | sha256 of everything before
//! ```
//!
//! The header lists every tensor by module name, tensor name and shape,
//! together with its offset into the payload.

use std::fs;
use std::path::Path;

use gmmunit_autodiff::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gmm::{AttributeGmm, GmmSpec};
use crate::nn::{Model, NetConfig, ParamEntry, ParamSet, Part};
use crate::training::{Adam, TrainSettings, TrainState};

const MAGIC: &[u8; 8] = b"GMMUCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    GenMean,
    GenVar,
    DiscMean,
    DiscVar,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorRecord {
    role: Role,
    module: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    iteration: u64,
    settings: TrainSettings,
    net: NetConfig,
    gmm: GmmSpec,
    gen_steps: u64,
    disc_steps: u64,
    tensors: Vec<TensorRecord>,
}

fn push_tensor(
    records: &mut Vec<TensorRecord>,
    payload: &mut Vec<f32>,
    role: Role,
    entry: &ParamEntry<f32>,
    value: &Tensor<f32>,
) {
    records.push(TensorRecord {
        role,
        module: entry.part.module_name().to_string(),
        name: entry.name.clone(),
        shape: value.shape().to_vec(),
        offset: payload.len(),
    });
    payload.extend_from_slice(value.data());
}

/// Serializes `state` to bytes.
pub fn encode(state: &TrainState) -> Vec<u8> {
    let params = &state.model.params;
    let mut records = Vec::new();
    let mut payload = Vec::new();
    for e in params.entries() {
        push_tensor(&mut records, &mut payload, Role::Param, e, &e.value);
    }
    for (opt, roles) in [
        (&state.opt_g, (Role::GenMean, Role::GenVar)),
        (&state.opt_d, (Role::DiscMean, Role::DiscVar)),
    ] {
        for (j, &i) in opt.indices.iter().enumerate() {
            let e = &params.entries()[i];
            push_tensor(&mut records, &mut payload, roles.0.clone(), e, &opt.m[j]);
            push_tensor(&mut records, &mut payload, roles.1.clone(), e, &opt.v[j]);
        }
    }
    let header = Header {
        iteration: state.iteration,
        settings: state.settings.clone(),
        net: state.model.config().clone(),
        gmm: state.gmm.spec().clone(),
        gen_steps: state.opt_g.steps,
        disc_steps: state.opt_d.steps,
        tensors: records,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(header.len() + 4 * payload.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in &payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("container is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses and verifies a container produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint container".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "container version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let header_len = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let n_values = r.u64()? as usize;
    let raw = r.take(n_values.checked_mul(4).ok_or_else(|| Error::Checkpoint("bad payload length".into()))?)?;
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    let payload: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    let tensor = |rec: &TensorRecord| -> Result<Tensor<f32>> {
        let n: usize = rec.shape.iter().product();
        let data = payload
            .get(rec.offset..rec.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} lies outside the payload", rec.name)))?;
        Ok(Tensor::from_vec(&rec.shape, data.to_vec()))
    };

    let mut entries = Vec::new();
    let mut moments: [Vec<Tensor<f32>>; 4] = Default::default();
    for rec in &header.tensors {
        let value = tensor(rec)?;
        match rec.role {
            Role::Param => {
                let part = Part::from_module_name(&rec.module)
                    .ok_or_else(|| Error::Checkpoint(format!("unknown module {}", rec.module)))?;
                entries.push(ParamEntry {
                    part,
                    name: rec.name.clone(),
                    value,
                });
            }
            Role::GenMean => moments[0].push(value),
            Role::GenVar => moments[1].push(value),
            Role::DiscMean => moments[2].push(value),
            Role::DiscVar => moments[3].push(value),
        }
    }
    let model = Model::from_params(header.net.clone(), ParamSet::from_entries(entries))
        .map_err(|e| Error::Checkpoint(format!("parameters do not fit the stored layout: {e}")))?;
    let gmm = AttributeGmm::new(header.gmm).map_err(|e| Error::Checkpoint(format!("stored prior: {e}")))?;
    let [gm, gv, dm, dv] = moments;
    let rebuild = |filter: fn(Part) -> bool, m: Vec<Tensor<f32>>, v: Vec<Tensor<f32>>, steps| -> Result<Adam<f32>> {
        let mut opt = Adam::new(&model.params, filter);
        let fits = |t: &[Tensor<f32>]| {
            t.len() == opt.indices.len()
                && t.iter()
                    .zip(&opt.indices)
                    .all(|(t, &i)| t.shape() == model.params.entries()[i].value.shape())
        };
        if !fits(&m) || !fits(&v) {
            return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
        }
        opt.m = m;
        opt.v = v;
        opt.steps = steps;
        Ok(opt)
    };
    let opt_g = rebuild(Part::is_generator_side, gm, gv, header.gen_steps)?;
    let opt_d = rebuild(|p| !p.is_generator_side(), dm, dv, header.disc_steps)?;
    Ok(TrainState {
        settings: header.settings,
        model,
        gmm,
        opt_g,
        opt_d,
        iteration: header.iteration,
    })
}

/// Writes atomically through a temporary sibling file.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}
