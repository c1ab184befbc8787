//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SSEG"  u32 version  u32 entry-count
//! per entry: u32 name-length, name (UTF-8), u32 rank, rank × u64 extents,
//!            product(extents) × f32 payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSEG";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.at)));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut c = Cursor { bytes, at: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected \"SSEG\"")));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = c.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("entry {i} ({name}): rank {rank} exceeds 8")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("entry {i} ({name}): extents overflow")))?;
        let data = c
            .take(numel, &format!("payload of {name}"))?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        entries.push((name, Tensor::new(&shape, data)?));
    }
    if c.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the last entry", bytes.len() - c.at)));
    }
    Ok(entries)
}

/// Write via a temporary sibling file and rename.
pub fn save_checkpoint(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, encode_checkpoint(store))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Replace the values of `store` from the file at `path`.
pub fn load_checkpoint(store: &mut ParamStore<f32>, path: &Path) -> Result<()> {
    store.load_entries(read_checkpoint(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, Network};

    #[test]
    fn round_trip_is_byte_identical() {
        let net = Network::<f32>::build(&ModelSpec::proposed(4), 3).unwrap();
        let bytes = encode_checkpoint(&net.params);
        let mut other = Network::<f32>::build(&ModelSpec::proposed(4), 99).unwrap();
        other.params.load_entries(decode_checkpoint(&bytes).unwrap()).unwrap();
        assert_eq!(other.params, net.params);
        assert_eq!(encode_checkpoint(&other.params), bytes);
    }

    #[test]
    fn framing_errors() {
        let net = Network::<f32>::build(&ModelSpec::proposed(2), 3).unwrap();
        let bytes = encode_checkpoint(&net.params);
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(decode_checkpoint(&b).unwrap_err().to_string().contains("bad magic"));
        let mut b = bytes.clone();
        b[4] = 7;
        assert!(decode_checkpoint(&b).unwrap_err().to_string().contains("version"));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 2]).unwrap_err().to_string().contains("truncated"));
        let mut b = bytes.clone();
        b.push(0);
        assert!(decode_checkpoint(&b).is_err());
    }

    #[test]
    fn mismatched_model_names_first_entry() {
        let small = Network::<f32>::build(&ModelSpec::proposed(8), 0).unwrap();
        let mut big = Network::<f32>::build(&ModelSpec::proposed(64), 0).unwrap();
        let err = big.params.load_entries(decode_checkpoint(&encode_checkpoint(&small.params)).unwrap()).unwrap_err();
        match err {
            Error::StateMismatch { index, expected, .. } => {
                let first = (0..small.params.len())
                    .find(|&i| small.params.entries()[i].tensor.shape() != big.params.entries()[i].tensor.shape())
                    .unwrap();
                assert_eq!(index, first);
                assert!(expected.starts_with(&big.params.entries()[first].name), "{expected}");
            }
            other => panic!("{other:?}"),
        }
    }
}
