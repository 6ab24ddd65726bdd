//! `CATN` checkpoints: magic, `u32` version, `u32`-length JSON config, then
//! named tensors (`u32` name length, name, `u32` rank, `u32` dims, `f64` data,
//! all little-endian) until end of file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ToyNet, TrainConfig};
use crate::diff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CATN";
const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_checkpoint<W: Write>(model: &ToyNet, mut out: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION as usize)?;
    let config = serde_json::to_string(model.config()).map_err(|e| Error::Format(e.to_string()))?;
    put_u32(&mut buf, config.len())?;
    buf.extend_from_slice(config.as_bytes());
    for (name, t) in model.params() {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ToyNet> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, at: 0 };
    if c.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a CATN checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = c.u32()?;
    let config: TrainConfig = serde_json::from_slice(c.take(len)?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut params = Vec::new();
    while !c.done() {
        let len = c.u32()?;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let data = c
            .take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        params.push((name, t));
    }
    ToyNet::from_parts(config, params).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_checkpoint(model: &ToyNet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ToyNet> {
    read_checkpoint(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toynet::Variant;

    #[test]
    fn round_trip_is_bitwise() {
        for variant in Variant::ALL {
            let model = ToyNet::new(TrainConfig { variant, seed: 9, ..TrainConfig::default() }).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&model, &mut buf).unwrap();
            let back = read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back, model);
            let mut again = Vec::new();
            write_checkpoint(&back, &mut again).unwrap();
            assert_eq!(again, buf);
        }
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let model = ToyNet::new(TrainConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[1] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read_checkpoint(&buf[..buf.len() - 3]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[4] = 7;
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Format(_))));
    }
}
