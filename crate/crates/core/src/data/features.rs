//! Binary patch-feature files.
//!
//! Layout (little-endian): magic `RRGF`, `u16` version, `u8` kind
//! (0 = raw, 1 = projected), `u32` record count, `u32` patches per record,
//! `u32` feature width, then per record a `u16` id length, the UTF-8 id and
//! `patches × width` `f32` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Result};

const MAGIC: &[u8; 4] = b"RRGF";
pub const FEATURE_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Backbone width; the model applies its input projection.
    Raw,
    /// Already at model width.
    Projected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub kind: FeatureKind,
    pub n_patches: usize,
    pub width: usize,
    pub records: Vec<(String, Vec<f32>)>,
}

fn eof(e: std::io::Error) -> DataError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        DataError::Truncated("feature")
    } else {
        DataError::Io(e)
    }
}

impl FeatureFile {
    pub fn new(kind: FeatureKind, n_patches: usize, width: usize) -> Self {
        Self {
            kind,
            n_patches,
            width,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, values: Vec<f32>) -> Result<()> {
        let id = id.into();
        if values.len() != self.n_patches * self.width {
            return Err(DataError::Shape {
                what: format!("features for {id:?}"),
                expected: format!("{} values", self.n_patches * self.width),
                actual: format!("{} values", values.len()),
            });
        }
        self.records.push((id, values));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.records.iter().find(|(i, _)| i == id).map(|(_, v)| v.as_slice())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FEATURE_VERSION.to_le_bytes())?;
        w.write_all(&[match self.kind {
            FeatureKind::Raw => 0,
            FeatureKind::Projected => 1,
        }])?;
        for n in [self.records.len(), self.n_patches, self.width] {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for (id, values) in &self.records {
            w.write_all(&(id.len() as u16).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != MAGIC {
            return Err(DataError::BadMagic("feature"));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(eof)?;
        let version = u16::from_le_bytes(b2);
        if version != FEATURE_VERSION {
            return Err(DataError::Version {
                what: "feature file",
                found: version.into(),
                expected: FEATURE_VERSION.into(),
            });
        }
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind).map_err(eof)?;
        let kind = match kind[0] {
            0 => FeatureKind::Raw,
            1 => FeatureKind::Projected,
            k => return Err(DataError::Invalid(format!("unknown feature kind {k}"))),
        };
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b4 = [0u8; 4];
            r.read_exact(&mut b4).map_err(eof)?;
            *d = u32::from_le_bytes(b4) as usize;
        }
        let [count, n_patches, width] = dims;
        let mut file = Self::new(kind, n_patches, width);
        let mut buf = vec![0u8; n_patches * width * 4];
        for _ in 0..count {
            r.read_exact(&mut b2).map_err(eof)?;
            let mut id = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut id).map_err(eof)?;
            let id = String::from_utf8(id).map_err(|e| DataError::Invalid(e.to_string()))?;
            r.read_exact(&mut buf).map_err(eof)?;
            let values = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            file.records.push((id, values));
        }
        Ok(file)
    }

    /// Checks the header against the configured patch count and width.
    pub fn validate(&self, n_patches: usize, width: usize) -> Result<()> {
        if (self.n_patches, self.width) != (n_patches, width) {
            return Err(DataError::Shape {
                what: "feature file header (N_I, width)".into(),
                expected: format!("({n_patches}, {width})"),
                actual: format!("({}, {})", self.n_patches, self.width),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::io::atomic_write(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
