//! Binary checkpoints. Little-endian layout:
//!
//! ```text
//! "STIC" | u32 version | u32 tau | u64 seed
//! u32 len | descriptor (UTF-8 JSON)
//! u32 count | count * (u32 len | name | u32 rank | rank * u64 dim | f64 payload)
//! u32 CRC32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Architecture, ClassifierModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STIC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tau: u32,
    pub seed: u64,
    /// JSON describing how to rebuild the network the tensors belong to.
    pub descriptor: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &ClassifierModel, tau: u32, seed: u64) -> Self {
        Checkpoint {
            tau,
            seed,
            descriptor: model.arch().to_descriptor(),
            tensors: model
                .named_params()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<ClassifierModel> {
        let arch = Architecture::from_descriptor(&self.descriptor)?;
        ClassifierModel::from_parts(arch, self.tensors.clone())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.tau.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.descriptor);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(Error::format("checkpoint: missing STIC magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::format(format!(
                "checkpoint: version {version} unsupported, expected {VERSION}"
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::format(format!(
                "checkpoint: CRC32 mismatch (stored {stored:#010x}, computed {actual:#010x})"
            )));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let tau = r.u32()?;
        let seed = r.u64()?;
        let descriptor = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::format("checkpoint: tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::format(format!(
                "checkpoint: {} trailing bytes before checksum",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            tau,
            seed,
            descriptor,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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
            .ok_or_else(|| {
                Error::format(format!(
                    "checkpoint: truncated at byte {}: need {n} more, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format("checkpoint: name is not UTF-8"))
    }
}

/// Saves a classifier with its pass index and root seed.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &ClassifierModel,
    tau: u32,
    seed: u64,
) -> Result<()> {
    Checkpoint::from_model(model, tau, seed).save(path)
}

/// Loads a classifier checkpoint, returning the model and its header.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ClassifierModel, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.to_model()?, ck))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let m = ClassifierModel::new(Architecture::mlp(2, &[5], 3), 17).unwrap();
        Checkpoint::from_model(&m, 3, 17)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.tau, 3);
        assert_eq!(back.encode(), bytes);
        let m = back.to_model().unwrap();
        for ((_, a), (_, b)) in m.named_params().zip(&ck.tensors) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn every_corrupted_byte_is_rejected() {
        let bytes = sample().encode();
        for i in (0..bytes.len()).step_by(7) {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(Checkpoint::decode(&bad).is_err(), "flip at {i} accepted");
        }
    }

    #[test]
    fn version_and_crc_errors_are_distinct() {
        let mut bytes = sample().encode();
        bytes[4] = 9;
        assert!(Checkpoint::decode(&bytes)
            .unwrap_err()
            .to_string()
            .contains("version"));
        let mut bytes = sample().encode();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(Checkpoint::decode(&bytes)
            .unwrap_err()
            .to_string()
            .contains("CRC32"));
    }
}
