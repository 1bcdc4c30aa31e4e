//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FVCK" | version: u32 | count: u32
//! per entry: name_len: u32 | name: UTF-8 | rank: u32 | extents: u64 * rank | values: f32 * prod(extents)
//! ```
//!
//! Text values (configs, provider tags) are stored as rank-1 entries of byte
//! values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::array::Array;

pub const MAGIC: &[u8; 4] = b"FVCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no entry `{0}`")]
    Missing(String),
    #[error("entry `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Ordered named arrays; insertion order is the on-disk order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entry(name).is_some()
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Inserts or replaces an entry.
    pub fn insert(&mut self, entry: Entry) {
        match self.entries.iter_mut().find(|e| e.name == entry.name) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn insert_array(&mut self, name: impl Into<String>, a: &Array) {
        self.insert(Entry {
            name: name.into(),
            shape: a.shape().to_vec(),
            values: a.data().iter().map(|&v| v as f32).collect(),
        });
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.insert_array(name, &Array::scalar(v));
    }

    pub fn insert_text(&mut self, name: impl Into<String>, text: &str) {
        let bytes = text.as_bytes();
        self.insert(Entry {
            name: name.into(),
            shape: vec![bytes.len()],
            values: bytes.iter().map(|&b| b as f32).collect(),
        });
    }

    pub fn array(&self, name: &str) -> Result<Array, CheckpointError> {
        let e = self.entry(name).ok_or_else(|| CheckpointError::Missing(name.into()))?;
        if e.values.is_empty() {
            return Err(CheckpointError::Malformed(format!("entry `{name}` is empty")));
        }
        Ok(Array::new(e.shape.clone(), e.values.iter().map(|&v| v as f64).collect()))
    }

    pub fn scalar(&self, name: &str) -> Result<f64, CheckpointError> {
        let a = self.array(name)?;
        if a.numel() != 1 {
            return Err(CheckpointError::Malformed(format!("entry `{name}` is not a scalar")));
        }
        Ok(a.item())
    }

    pub fn text(&self, name: &str) -> Result<String, CheckpointError> {
        let e = self.entry(name).ok_or_else(|| CheckpointError::Missing(name.into()))?;
        let bytes: Vec<u8> = e
            .values
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(CheckpointError::Malformed(format!("entry `{name}` is not text")))
                }
            })
            .collect::<Result<_, _>>()?;
        String::from_utf8(bytes).map_err(|_| CheckpointError::Malformed(format!("entry `{name}` is not UTF-8")))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &e.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            entries.push(Entry { name, shape, values });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
