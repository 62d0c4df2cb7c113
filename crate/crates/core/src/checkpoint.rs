//! Binary parameter checkpoints.
//!
//! Layout:
//!
//! ```text
//! 8 bytes   magic "FSACDCKP"
//! 8 bytes   header length H, u64 little-endian
//! H bytes   UTF-8 JSON header {format_version, config, vocabulary, arrays: [{name, shape}]}
//! ...       for each array in header order, product(shape) f64 values, little-endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Param;

pub const MAGIC: &[u8; 8] = b"FSACDCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: serde_json::Value,
    vocabulary: Vec<String>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub vocabulary: Vec<String>,
    pub arrays: Vec<(String, Param)>,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, p)| ArrayEntry {
                    name: name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for (_, p) in &self.arrays {
            for v in &p.data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        input.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut buf = [0u8; 8];
        for entry in header.arrays {
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                input
                    .read_exact(&mut buf)
                    .map_err(|e| Error::Checkpoint(format!("truncated array {}: {e}", entry.name)))?;
                data.push(f64::from_le_bytes(buf));
            }
            arrays.push((entry.name, Param::new(entry.shape, data)?));
        }
        Ok(Checkpoint {
            config: header.config,
            vocabulary: header.vocabulary,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Config(format!("checkpoint {} does not exist", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Self::read(BufReader::new(file))
    }

    /// Arrays whose names start with `prefix.`, with the prefix removed.
    pub fn namespace(&self, prefix: &str) -> Vec<(String, Param)> {
        let pre = format!("{prefix}.");
        self.arrays
            .iter()
            .filter_map(|(n, p)| n.strip_prefix(&pre).map(|s| (s.to_string(), p.clone())))
            .collect()
    }

    pub fn has_namespace(&self, prefix: &str) -> bool {
        let pre = format!("{prefix}.");
        self.arrays.iter().any(|(n, _)| n.starts_with(&pre))
    }
}
