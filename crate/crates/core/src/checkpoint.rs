//! Unified checkpoint archive: schema integer, JSON hyperparameter block,
//! then named parameter arrays as little-endian f32. Parameter names keep
//! their namespaces so loaders can target one subsystem at a time.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"IMPRCKP\0";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("Format: {0}")]
    Format(String),
    #[error("SchemaMismatch: file has schema {found}, expected {expected}")]
    SchemaMismatch { found: u32, expected: u32 },
    #[error("ParamMismatch: {0}")]
    ParamMismatch(String),
}

#[derive(Debug)]
pub struct Checkpoint {
    pub schema: u32,
    pub meta: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: serde_json::Value) -> Self {
        Checkpoint {
            schema: SCHEMA_VERSION,
            meta,
            params: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&self.schema.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta).expect("meta json");
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(t.shape().len() as u8).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let schema = read_u32(&mut r)?;
        if schema != SCHEMA_VERSION {
            return Err(CheckpointError::SchemaMismatch { found: schema, expected: SCHEMA_VERSION });
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        r.read_exact(&mut meta_buf)?;
        let meta = serde_json::from_slice(&meta_buf)
            .map_err(|e| CheckpointError::Format(format!("meta json: {e}")))?;
        let count = read_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let mut nlen = [0u8; 2];
            r.read_exact(&mut nlen)?;
            let mut nbuf = vec![0u8; u16::from_le_bytes(nlen) as usize];
            r.read_exact(&mut nbuf)?;
            let name = String::from_utf8(nbuf)
                .map_err(|e| CheckpointError::Format(e.to_string()))?;
            let mut nd = [0u8; 1];
            r.read_exact(&mut nd)?;
            let mut shape = Vec::with_capacity(nd[0] as usize);
            for _ in 0..nd[0] {
                shape.push(read_u32(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0.0f32; n];
            let mut buf = [0u8; 4];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f32::from_le_bytes(buf);
            }
            params.push((name, Tensor::from_vec(&shape, data)));
        }
        Ok(Checkpoint { schema, meta, params })
    }

    /// Copy parameter values into an already-registered store. Every stored
    /// name must exist with the same shape (extra registrations are errors
    /// too, so architecture drift is caught on load).
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        if store.len() != self.params.len() {
            return Err(CheckpointError::ParamMismatch(format!(
                "store has {} params, checkpoint has {}",
                store.len(),
                self.params.len()
            )));
        }
        for (name, tensor) in &self.params {
            let id = store.id_of(name).ok_or_else(|| {
                CheckpointError::ParamMismatch(format!("unknown parameter {name}"))
            })?;
            if store.get(id).shape() != tensor.shape() {
                return Err(CheckpointError::ParamMismatch(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    store.get(id).shape(),
                    tensor.shape()
                )));
            }
            *store.get_mut(id) = tensor.clone();
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
