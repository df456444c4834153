//! OVW1 weight-file format.
//!
//! Layout: 4-byte magic `OVW1`, then repeated records
//! `{ name_len: u32 LE, name: UTF-8, rank: u32 LE, dims: u32 LE each,
//!    payload: f32 LE row-major }` until end of file.
//!
//! Tensors are stored in 32-bit and promoted to f64 on load; a load/save
//! cycle of any valid file reproduces it bit for bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"OVW1";

pub fn to_bytes(params: &Params) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Params> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let mut params = Params::new();
    while !r.done() {
        let name_len = r.u32("name length")? as usize;
        let name_off = r.pos;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|e| Error::Parse {
                offset: name_off,
                msg: format!("name is not UTF-8: {e}"),
            })?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload_off = r.pos;
        let payload = r.take(n * 4, "payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if params.get(&name).is_some() {
            return Err(Error::Parse {
                offset: payload_off,
                msg: format!("duplicate record `{name}`"),
            });
        }
        params.push(name, Tensor::new(shape, data).map_err(|e| Error::Parse {
            offset: payload_off,
            msg: e.to_string(),
        })?);
    }
    Ok(params)
}

pub fn save(params: &Params, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Params> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Params {
        let mut p = Params::new();
        p.push("block3.attn.wq", Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.5]]).unwrap());
        p.push("proj", Tensor::new(vec![3], vec![0.25, -1.0, 7.0]).unwrap());
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = to_bytes(&sample());
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&loaded), bytes);
        assert_eq!(loaded.get("proj").unwrap().data(), &[0.25, -1.0, 7.0]);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = to_bytes(&sample());
        let err = from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(from_bytes(b"NOPE").is_err());
    }
}
