//! Versioned binary container for model artifacts.
//!
//! Layout: magic `PPPC` | u32 version | u64 header length | JSON header |
//! raw little-endian f32 tensor data. The header carries the artifact kind,
//! a free-form JSON metadata block, and the tensor directory. Readers reject
//! files written by a future format version.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PPPC";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name, shape, data));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut infos = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, shape, data) in &self.tensors {
            infos.push(TensorInfo {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                len: data.len() as u64,
            });
            offset += 4 * data.len() as u64;
        }
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: infos,
        };
        let hbytes =
            serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header: {e}")))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(hbytes.len() as u64).to_le_bytes())?;
        f.write_all(&hbytes)?;
        for (_, _, data) in &self.tensors {
            for v in data {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(
            std::fs::File::open(path)
                .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?,
        );
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "{}: not a model container",
                path.display()
            )));
        }
        let mut vbuf = [0u8; 4];
        f.read_exact(&mut vbuf)?;
        let version = u32::from_le_bytes(vbuf);
        if version > VERSION {
            return Err(Error::Format(format!(
                "{}: written by format version {version}, this build reads up to {VERSION}",
                path.display()
            )));
        }
        let mut lbuf = [0u8; 8];
        f.read_exact(&mut lbuf)?;
        let hlen = u64::from_le_bytes(lbuf) as usize;
        let mut hbytes = vec![0u8; hlen];
        f.read_exact(&mut hbytes)?;
        let header: Header =
            serde_json::from_slice(&hbytes).map_err(|e| Error::Format(format!("header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in &header.tensors {
            let mut data = vec![0f32; info.len as usize];
            let mut buf = vec![0u8; 4 * info.len as usize];
            f.read_exact(&mut buf)
                .map_err(|e| Error::Format(format!("tensor {}: {e}", info.name)))?;
            for (i, chunk) in buf.chunks_exact(4).enumerate() {
                data[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
            tensors.push((info.name.clone(), info.shape.clone(), data));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn tensor_map(self) -> BTreeMap<String, (Vec<usize>, Vec<f32>)> {
        self.tensors
            .into_iter()
            .map(|(n, s, d)| (n, (s, d)))
            .collect()
    }
}

/// Hex digest of a file's contents, for artifact provenance.
pub fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}
