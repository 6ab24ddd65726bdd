//! `CAAR` attribution record files: magic, `u32` version, `u32` record count,
//! `u32` pixels per record, then per record a label byte, a mask flag byte,
//! `f32` image, `f64` attribution and (if flagged) the mask bytes. Integers and
//! floats are little-endian.

use std::path::Path;

use anyhow::{bail, Context, Result};
use consistent_attention::eval::AttributionRecord;
use consistent_attention::Error;

const MAGIC: &[u8; 4] = b"CAAR";
const VERSION: u32 = 1;

pub fn save(records: &[AttributionRecord], path: &Path) -> Result<()> {
    let pixels = records.first().map_or(0, |r| r.image.len());
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&u32::try_from(records.len())?.to_le_bytes());
    buf.extend_from_slice(&u32::try_from(pixels)?.to_le_bytes());
    for r in records {
        if r.image.len() != pixels {
            bail!("records differ in size");
        }
        buf.push(r.label);
        buf.push(u8::from(r.mask.is_some()));
        r.image.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        r.attribution.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        if let Some(m) = &r.mask {
            buf.extend_from_slice(m);
        }
    }
    std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn format_err(msg: &str) -> Error {
    Error::Format(format!("attribution records: {msg}"))
}

pub fn load(path: &Path) -> Result<Vec<AttributionRecord>> {
    let bytes = std::fs::read(path).map_err(Error::from).with_context(|| format!("reading {}", path.display()))?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8], Error> {
        let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| format_err("truncated"))?;
        let s = &bytes[at..end];
        at = end;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(format_err("bad magic").into());
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    if u32_at(take(4)?) != VERSION as usize {
        return Err(format_err("unsupported version").into());
    }
    let count = u32_at(take(4)?);
    let pixels = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let head = take(2)?;
        let (label, has_mask) = (head[0], head[1]);
        let image = take(pixels * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4"))).collect();
        let attribution =
            take(pixels * 8)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8"))).collect();
        let mask = match has_mask {
            0 => None,
            1 => Some(take(pixels)?.to_vec()),
            _ => return Err(format_err("bad mask flag").into()),
        };
        out.push(AttributionRecord::new(attribution, image, label, mask).map_err(|e| format_err(&e.to_string()))?);
    }
    if take(1).is_ok() {
        return Err(format_err("trailing bytes").into());
    }
    Ok(out)
}
