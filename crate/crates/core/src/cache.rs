//! Binary operator cache.
//!
//! Layout (little-endian): 16-byte magic, `u64 M`, `u64 N`, `f64 eps`,
//! `f64 alpha`, `u32 mode`, `u32 kernel id`, `f64 eta`, `u8 corrected`,
//! 7 padding bytes, then `M * M` row-major `f64` entries. Mapped operators
//! append one tag-length-value record describing the map.

use nalgebra::DMatrix;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::domain_maps::DomainMap;
use crate::error::{Error, Result};
use crate::kernels::KernelId;
use crate::multishape::{AssemblyMode, ConvOperator, OperatorMeta};

pub const MAGIC: &[u8; 16] = b"NLCHCONVOP-v1\0\0\0";
pub const HEADER_LEN: usize = 72;

const TAG_RECTANGLE: u32 = 1;
const TAG_BULGED: u32 = 2;

/// Serialize an operator.
pub fn to_bytes(op: &ConvOperator) -> Vec<u8> {
    let m = op.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m * m + 48);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m as u64).to_le_bytes());
    out.extend_from_slice(&(op.meta.n as u64).to_le_bytes());
    out.extend_from_slice(&op.meta.eps.to_le_bytes());
    out.extend_from_slice(&op.meta.alpha.to_le_bytes());
    out.extend_from_slice(&(op.meta.mode as u32).to_le_bytes());
    out.extend_from_slice(&(op.meta.kernel as u32).to_le_bytes());
    out.extend_from_slice(&op.meta.eta.to_le_bytes());
    out.push(op.meta.corrected as u8);
    out.extend_from_slice(&[0u8; 7]);
    for i in 0..m {
        for j in 0..m {
            out.extend_from_slice(&op.matrix[(i, j)].to_le_bytes());
        }
    }
    if let Some(map) = op.meta.map {
        let (tag, vals): (u32, Vec<f64>) = match map {
            DomainMap::Rectangle { a1, b1, a2, b2 } => (TAG_RECTANGLE, vec![a1, b1, a2, b2]),
            DomainMap::Bulged { k } => (TAG_BULGED, vec![k]),
        };
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&((8 * vals.len()) as u32).to_le_bytes());
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated at byte {} (wanted {n} more, file has {})",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse an operator, rejecting unknown magic, enum codes or trailing data.
pub fn from_bytes(buf: &[u8]) -> Result<ConvOperator> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(16)? != MAGIC {
        return Err(Error::Format("unknown magic".into()));
    }
    let m = r.u64()? as usize;
    let n = r.u64()? as usize;
    let eps = r.f64()?;
    let alpha = r.f64()?;
    let mode_code = r.u32()?;
    let mode = AssemblyMode::from_code(mode_code)
        .ok_or_else(|| Error::Format(format!("unknown partition mode {mode_code}")))?;
    let kernel_code = r.u32()?;
    let kernel =
        KernelId::from_code(kernel_code).ok_or_else(|| Error::Format(format!("unknown kernel id {kernel_code}")))?;
    let eta = r.f64()?;
    let corrected = match r.take(1)?[0] {
        0 => false,
        1 => true,
        v => return Err(Error::Format(format!("invalid correction flag {v}"))),
    };
    r.take(7)?;
    let expected_m = if mode == AssemblyMode::Direct3d { n.pow(3) } else { n * n };
    if m != expected_m {
        return Err(Error::Format(format!("dimension {m} inconsistent with N = {n}")));
    }
    let bytes = m
        .checked_mul(m)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let data = r.take(bytes)?;
    let mut matrix = DMatrix::zeros(m, m);
    for (k, chunk) in data.chunks_exact(8).enumerate() {
        matrix[(k / m, k % m)] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    let map = if r.pos < buf.len() {
        let tag = r.u32()?;
        let len = r.u32()? as usize;
        let map = match (tag, len) {
            (TAG_RECTANGLE, 32) => DomainMap::Rectangle {
                a1: r.f64()?,
                b1: r.f64()?,
                a2: r.f64()?,
                b2: r.f64()?,
            },
            (TAG_BULGED, 8) => DomainMap::Bulged { k: r.f64()? },
            _ => return Err(Error::Format(format!("unknown map record tag {tag} of length {len}"))),
        };
        map.validate().map_err(|e| Error::Format(e.to_string()))?;
        Some(map)
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(ConvOperator {
        matrix,
        meta: OperatorMeta {
            n,
            m,
            eps,
            alpha,
            mode,
            kernel,
            eta,
            corrected,
            map,
        },
    })
}

/// Write an operator to `path`.
pub fn write_operator(path: &Path, op: &ConvOperator) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(op))?;
    Ok(())
}

/// Read an operator from `path`.
pub fn read_operator(path: &Path) -> Result<ConvOperator> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ConvOperator {
        let mut op = ConvOperator::zero(3);
        for i in 0..9 {
            for j in 0..9 {
                op.matrix[(i, j)] = (i as f64 - 0.5 * j as f64) / 7.0;
            }
        }
        op.meta.eps = 1e-3;
        op.meta.corrected = true;
        op
    }

    #[test]
    fn round_trip_is_bitwise() {
        let op = sample();
        let bytes = to_bytes(&op);
        assert_eq!(bytes.len(), HEADER_LEN + 8 * 81);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.matrix, op.matrix);
        assert_eq!(back.meta, op.meta);
    }

    #[test]
    fn map_record_round_trip() {
        let mut op = sample();
        op.meta.map = Some(DomainMap::Bulged { k: 0.3 });
        let back = from_bytes(&to_bytes(&op)).unwrap();
        assert_eq!(back.meta.map, op.meta.map);
    }

    #[test]
    fn rejects_corruption() {
        let op = sample();
        let mut bad = to_bytes(&op);
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = to_bytes(&op);
        bad[48] = 9;
        assert!(from_bytes(&bad).is_err());
        let mut bad = to_bytes(&op);
        bad[52] = 17;
        assert!(from_bytes(&bad).is_err());
        let bad = to_bytes(&op);
        assert!(from_bytes(&bad[..bad.len() - 1]).is_err());
        let mut bad = to_bytes(&op);
        bad.push(0);
        assert!(from_bytes(&bad).is_err());
    }
}
