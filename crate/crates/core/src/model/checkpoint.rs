//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//! `ECEN`, u32 version, u32 step, u32 parameter count, the parameter
//! records, u32 moment count, the moment records, u64 config hash. A record
//! is u16 name length, name bytes, u8 rank, `rank` u32 extents, then the
//! values as f32.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ECEN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u32,
    pub params: Vec<NamedTensor>,
    /// Optimizer state; for AdamW the first and second moments of each
    /// parameter, named `<param>.m` and `<param>.v`.
    pub moments: Vec<NamedTensor>,
    pub config_hash: u64,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, step: u32, moments: Vec<NamedTensor>, config_hash: u64) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                value: p.value.clone(),
            })
            .collect();
        Checkpoint {
            step,
            params,
            moments,
            config_hash,
        }
    }

    /// Copy every parameter into `store`, which must hold exactly the same
    /// names and shapes.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for nt in &self.params {
            let id = store
                .find(&nt.name)
                .ok_or_else(|| Error::Data(format!("unknown parameter {} in checkpoint", nt.name)))?;
            store.set(id, nt.value.clone())?;
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        write_records(w, &self.params)?;
        write_records(w, &self.moments)?;
        w.write_all(&self.config_hash.to_le_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Checkpoint> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let step = read_u32(r)?;
        let params = read_records(r)?;
        let moments = read_records(r)?;
        let mut hash = [0u8; 8];
        r.read_exact(&mut hash)?;
        Ok(Checkpoint {
            step,
            params,
            moments,
            config_hash: u64::from_le_bytes(hash),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn write_records<W: Write>(w: &mut W, records: &[NamedTensor]) -> Result<()> {
    let count = u32::try_from(records.len()).map_err(|_| Error::contract("too many checkpoint records"))?;
    w.write_all(&count.to_le_bytes())?;
    for nt in records {
        let name = nt.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::contract("parameter name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        let shape = nt.value.shape();
        w.write_all(&[u8::try_from(shape.len()).map_err(|_| Error::contract("rank above 255"))?])?;
        for &e in shape {
            let e = u32::try_from(e).map_err(|_| Error::contract("extent above u32"))?;
            w.write_all(&e.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * nt.value.numel());
        for &v in nt.value.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_records<R: Read>(r: &mut R) -> Result<Vec<NamedTensor>> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let shape = (0..rank[0]).map(|_| read_u32(r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; 4 * n];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let value = Tensor::new(&shape, data).map_err(|e| Error::Data(format!("parameter {name}: {e}")))?;
        out.push(NamedTensor { name, value });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let ck = Checkpoint {
            step: 7,
            params: vec![NamedTensor {
                name: "w".into(),
                value: Tensor::new(&[2], vec![1.5, -0.25]).unwrap(),
            }],
            moments: vec![],
            config_hash: 0x0102_0304_0506_0708,
        };
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"ECEN");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &7u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..18], &1u16.to_le_bytes());
        assert_eq!(buf[18], b'w');
        assert_eq!(buf[19], 1);
        assert_eq!(&buf[buf.len() - 8..], &0x0102_0304_0506_0708u64.to_le_bytes());
        assert_eq!(Checkpoint::read(&mut buf.as_slice()).unwrap(), ck);
    }

    #[test]
    fn bad_magic_is_a_data_error() {
        let r = Checkpoint::read(&mut &b"NOPE\x01\x00\x00\x00"[..]);
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
