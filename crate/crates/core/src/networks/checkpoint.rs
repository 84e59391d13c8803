//! `DPLC` named-tensor bundles.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DPLC"  version:u32=1  count:u32
//! repeated count times, names in lexicographic order:
//!     name_len:u16  name:utf-8  rank:u8  dims:u32×rank  values:f32×∏dims
//! ```

use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"DPLC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, not a DPLC checkpoint")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("duplicate tensor name '{0}'")]
    DuplicateName(String),
    #[error("tensor names must be non-empty")]
    EmptyName,
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("tensor '{name}' cannot be stored: {reason}")]
    Unstorable { name: String, reason: String },
    #[error("tensor '{name}' holds {actual} values but its shape {shape:?} needs {expected}")]
    Length {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("checkpoint has no tensor '{0}'")]
    Missing(String),
    #[error("tensor '{name}' has shape {found:?}, the network expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint tensor '{0}' does not belong to this network")]
    Unexpected(String),
}

type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// An ordered map from tensor name to 32-bit values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(CheckpointError::EmptyName);
        }
        if name.len() > usize::from(u16::MAX) {
            return Err(CheckpointError::Unstorable {
                name,
                reason: "name longer than 65535 bytes".into(),
            });
        }
        if shape.len() > usize::from(u8::MAX) || shape.iter().any(|&d| d > u32::MAX as usize) {
            return Err(CheckpointError::Unstorable {
                name,
                reason: format!("shape {shape:?} exceeds the format limits"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CheckpointError::Length {
                name,
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        if self.tensors.contains_key(&name) {
            return Err(CheckpointError::DuplicateName(name));
        }
        self.tensors.insert(
            name,
            StoredTensor {
                shape: shape.to_vec(),
                data,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Moves every tensor of `other` into `self`; names must not collide.
    pub fn merge(&mut self, other: Checkpoint) -> Result<()> {
        for (name, t) in other.tensors {
            self.insert(name, &t.shape, t.data)?;
        }
        Ok(())
    }

    /// Tensors whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Checkpoint {
        Checkpoint {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32("tensor count")?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let len = usize::from(r.u16("name length")?);
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| CheckpointError::InvalidName)?
                .to_owned();
            let rank = usize::from(r.take(1, "rank")?[0]);
            let shape = (0..rank)
                .map(|_| r.u32("dimensions").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or(CheckpointError::Truncated("payload"))?;
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated("payload"))?, "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            ckpt.insert(name, &shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

pub fn save_checkpoint(bundle: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    bundle.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        let slice = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated(what))?;
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("b.weight", &[2, 1], vec![1.5, -0.0]).unwrap();
        c.insert("a", &[], vec![f32::MIN_POSITIVE]).unwrap();
        c.insert("c.nan", &[1], vec![f32::from_bits(0x7fc0_1234)]).unwrap();
        c
    }

    #[test]
    fn empty_bundle_is_twelve_bytes() {
        let bytes = Checkpoint::new().encode();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..4], b"DPLC");
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), Checkpoint::new());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        let bits = |c: &Checkpoint| -> Vec<u32> {
            c.iter().flat_map(|(_, t)| t.data.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&back), bits(&c));
    }

    #[test]
    fn names_are_sorted_on_disk() {
        let bytes = sample().encode();
        let first_len = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
        assert_eq!(&bytes[14..14 + first_len], b"a");
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().encode();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = Checkpoint::decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = sample().encode();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::Version(2))));
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = sample().encode();
        for cut in 0..bytes.len() {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn duplicate_and_empty_names() {
        let mut c = sample();
        assert!(matches!(
            c.insert("a", &[], vec![0.0]),
            Err(CheckpointError::DuplicateName(_))
        ));
        assert!(matches!(c.insert("", &[], vec![0.0]), Err(CheckpointError::EmptyName)));

        // a file naming the same tensor twice
        let mut one = Checkpoint::new();
        one.insert("x", &[], vec![1.0]).unwrap();
        let mut bytes = one.encode();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let entry = bytes[12..].to_vec();
        bytes.extend_from_slice(&entry);
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(CheckpointError::DuplicateName(_))
        ));
    }
}
