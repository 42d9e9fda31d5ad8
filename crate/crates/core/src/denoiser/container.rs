//! Versioned binary container for trained denoisers.
//!
//! Layout: magic, `u32` version, `u32` header length, JSON header, the
//! parameters as little-endian `f64` in visit order, SHA-256 trailer over
//! everything before it.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DenoiserModel, UNetConfig};
use crate::error::{Error, Result};
use crate::nn::ParamVisit;
use crate::schedule::LatentShape;
use crate::seed;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MODEL_MAGIC: &[u8; 8] = b"LDXMODEL";

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    latent_shape: LatentShape,
    cond_dim: usize,
    schedule_id: String,
    arch: UNetConfig,
    label_levels: Option<Vec<usize>>,
    num_params: usize,
    param_checksum: String,
}

pub fn save_model(model: &DenoiserModel, path: &Path) -> Result<()> {
    let header = ModelHeader {
        format_version: MODEL_FORMAT_VERSION,
        latent_shape: model.latent_shape,
        cond_dim: model.net.cond_dim,
        schedule_id: model.schedule_id.clone(),
        arch: model.net.config.clone(),
        label_levels: model.vocab.as_ref().map(|v| v.levels()),
        num_params: model.num_params(),
        param_checksum: model.checksum(),
    };
    let header = serde_json::to_vec(&header).expect("model header serializes");
    let params = model.flat_params();
    let mut out = Vec::with_capacity(16 + header.len() + 8 * params.len() + 32);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DenoiserModel> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let fail = |msg: String| Error::format(path, msg);
    if bytes.len() < 48 {
        return Err(fail("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(fail("checksum mismatch".into()));
    }
    if &body[..8] != MODEL_MAGIC {
        return Err(fail("not a denoiser model file".into()));
    }
    let version = LittleEndian::read_u32(&body[8..12]);
    if version != MODEL_FORMAT_VERSION {
        return Err(fail(format!(
            "unsupported model format version {version} (expected {MODEL_FORMAT_VERSION})"
        )));
    }
    let hlen = LittleEndian::read_u32(&body[12..16]) as usize;
    if body.len() < 16 + hlen {
        return Err(fail("truncated header".into()));
    }
    let header: ModelHeader =
        serde_json::from_slice(&body[16..16 + hlen]).map_err(|e| fail(format!("bad header: {e}")))?;
    let payload = &body[16 + hlen..];
    if payload.len() != 8 * header.num_params {
        return Err(fail("payload size does not match header".into()));
    }
    // Weights are overwritten below; the init stream only fixes the layout.
    let mut rng = seed::stream(0, "container/layout");
    let mut model = DenoiserModel::new(
        header.arch,
        header.latent_shape,
        header.cond_dim,
        header.label_levels.as_deref(),
        header.schedule_id,
        &mut rng,
    );
    if model.num_params() != header.num_params {
        return Err(fail("architecture does not match parameter count".into()));
    }
    let mut params = vec![0.0; header.num_params];
    LittleEndian::read_f64_into(payload, &mut params);
    model.load_flat(&params);
    if model.checksum() != header.param_checksum {
        return Err(fail("parameter checksum mismatch".into()));
    }
    Ok(model)
}
