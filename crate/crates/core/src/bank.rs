//! The learnable direction embeddings and their on-disk container.

use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::{self, Rng};

pub const BANK_FORMAT_VERSION: u32 = 1;
const BANK_MAGIC: &[u8; 8] = b"LDXBANK\0";

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionBank {
    embeddings: Array2<f64>,
    init_seed: u64,
    labels: Vec<Option<String>>,
    frozen: bool,
    config_hash: String,
}

pub fn init_bank(
    k: usize,
    cond_dim: usize,
    seed: u64,
    null_embedding: ArrayView1<f64>,
    init_scale: f64,
) -> Result<DirectionBank> {
    if k == 0 {
        return Err(Error::invalid("direction bank needs K >= 1"));
    }
    if !(init_scale > 0.0) {
        return Err(Error::invalid(format!(
            "init_scale must be positive, got {init_scale}"
        )));
    }
    if null_embedding.len() != cond_dim {
        return Err(Error::invalid(format!(
            "null embedding has {} entries, cond_dim is {cond_dim}",
            null_embedding.len()
        )));
    }
    let mut rng = seed::stream(seed, "bank/init");
    let mut embeddings = seed::gaussian_matrix(&mut rng, k, cond_dim) * init_scale;
    embeddings += &null_embedding;
    Ok(DirectionBank {
        embeddings,
        init_seed: seed,
        labels: vec![None; k],
        frozen: false,
        config_hash: String::new(),
    })
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    format_version: u32,
    k: usize,
    cond_dim: usize,
    init_seed: u64,
    frozen: bool,
    config_hash: String,
    labels: Vec<Option<String>>,
}

impl DirectionBank {
    /// Wraps an explicit embedding matrix (unfrozen, no labels).
    pub fn from_embeddings(embeddings: Array2<f64>, init_seed: u64) -> Result<Self> {
        if embeddings.nrows() == 0 {
            return Err(Error::invalid("direction bank needs K >= 1"));
        }
        let k = embeddings.nrows();
        Ok(Self {
            embeddings,
            init_seed,
            labels: vec![None; k],
            frozen: false,
            config_hash: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cond_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn row(&self, k: usize) -> Result<ArrayView1<'_, f64>> {
        if k >= self.len() {
            return Err(Error::invalid(format!(
                "direction {k} out of range for a bank of {}",
                self.len()
            )));
        }
        Ok(self.embeddings.row(k))
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// One-way: there is no unfreeze.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn set_config_hash(&mut self, hash: impl Into<String>) {
        self.config_hash = hash.into();
    }

    pub fn labels(&self) -> &[Option<String>] {
        &self.labels
    }

    /// Annotation only; labels never enter any computation.
    pub fn set_label(&mut self, k: usize, label: Option<String>) -> Result<()> {
        self.row(k)?;
        self.labels[k] = label;
        Ok(())
    }

    /// Replaces all embeddings; refused once frozen.
    pub fn set_embeddings(&mut self, embeddings: Array2<f64>) -> Result<()> {
        if self.frozen {
            return Err(Error::contract("direction bank is frozen"));
        }
        if embeddings.dim() != self.embeddings.dim() {
            return Err(Error::invalid(format!(
                "embedding matrix {:?} does not match bank {:?}",
                embeddings.dim(),
                self.embeddings.dim()
            )));
        }
        self.embeddings = embeddings;
        Ok(())
    }

    pub fn set_row(&mut self, k: usize, row: Array1<f64>) -> Result<()> {
        if self.frozen {
            return Err(Error::contract("direction bank is frozen"));
        }
        self.row(k)?;
        if row.len() != self.cond_dim() {
            return Err(Error::invalid("row has the wrong condition dimension"));
        }
        self.embeddings.row_mut(k).assign(&row);
        Ok(())
    }

    /// `size` distinct indices, uniformly without replacement, in generator order.
    pub fn sample_subset(&self, size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if size == 0 || size > self.len() {
            return Err(Error::invalid(format!(
                "subset size {size} outside [1, {}]",
                self.len()
            )));
        }
        Ok(rand::seq::index::sample(rng, self.len(), size).into_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = BankHeader {
            format_version: BANK_FORMAT_VERSION,
            k: self.len(),
            cond_dim: self.cond_dim(),
            init_seed: self.init_seed,
            frozen: self.frozen,
            config_hash: self.config_hash.clone(),
            labels: self.labels.clone(),
        };
        let header = serde_json::to_vec(&header).expect("bank header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.embeddings.len() + 32);
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.embeddings.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: &str| Error::format(path, msg);
        if bytes.len() < 16 + 32 {
            return Err(fail("file too short"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(fail("checksum mismatch"));
        }
        if &body[..8] != BANK_MAGIC {
            return Err(fail("not a direction bank file"));
        }
        let version = LittleEndian::read_u32(&body[8..12]);
        if version != BANK_FORMAT_VERSION {
            return Err(fail(&format!(
                "unsupported bank format version {version} (expected {BANK_FORMAT_VERSION})"
            )));
        }
        let hlen = LittleEndian::read_u32(&body[12..16]) as usize;
        let header_end = 16 + hlen;
        if body.len() < header_end {
            return Err(fail("truncated header"));
        }
        let header: BankHeader = serde_json::from_slice(&body[16..header_end])
            .map_err(|e| fail(&format!("bad header: {e}")))?;
        let payload = &body[header_end..];
        let n = header.k * header.cond_dim;
        if payload.len() != 8 * n || header.k == 0 || header.labels.len() != header.k {
            return Err(fail("payload size does not match header"));
        }
        let mut values = vec![0.0; n];
        LittleEndian::read_f64_into(payload, &mut values);
        let embeddings = Array2::from_shape_vec((header.k, header.cond_dim), values)
            .map_err(|e| fail(&e.to_string()))?;
        Ok(Self {
            embeddings,
            init_seed: header.init_seed,
            labels: header.labels,
            frozen: header.frozen,
            config_hash: header.config_hash,
        })
    }
}

pub fn save_bank(bank: &DirectionBank, path: &Path) -> Result<()> {
    let bytes = bank.to_bytes();
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<DirectionBank> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    DirectionBank::from_bytes(&bytes, path)
}
