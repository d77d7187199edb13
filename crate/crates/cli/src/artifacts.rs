//! On-disk artifacts.
//!
//! CSV floats use the shortest representation that parses back to the same
//! bits. Field snapshots are stored as little-endian records: a 16-byte
//! magic, `u64 M`, `u64 count`, then `count` records of `f64 t` followed by
//! `M` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::Failure;

pub const SNAPSHOT_MAGIC: &[u8; 16] = b"NLCHSNAPSHOT-v1\0";

/// Write a header row and then every record, so empty tables keep their header.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), Failure> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Failure> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// One row of `trajectory.csv`. The initial state has `dt = 0` and `order = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub mass: f64,
    pub energy: f64,
    pub sup_norm: f64,
    pub l2_to_final: f64,
    pub dt: f64,
    pub order: u8,
}

pub const TRAJECTORY_HEADER: [&str; 7] = ["t", "mass", "energy", "sup_norm", "l2_to_final", "dt", "order"];

pub fn write_snapshots(path: &Path, m: usize, records: &[(f64, &[f64])]) -> Result<(), Failure> {
    let mut buf = Vec::with_capacity(32 + records.len() * 8 * (m + 1));
    buf.extend_from_slice(SNAPSHOT_MAGIC);
    buf.extend_from_slice(&(m as u64).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (t, values) in records {
        if values.len() != m {
            return Err(Failure::Numerical(format!("snapshot at t = {t} has {} values, expected {m}", values.len())));
        }
        buf.extend_from_slice(&t.to_le_bytes());
        for v in *values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_snapshots(path: &Path) -> Result<Vec<(f64, Vec<f64>)>, Failure> {
    let buf = fs::read(path)?;
    let bad = |msg: &str| Failure::Config(format!("{}: {msg}", path.display()));
    if buf.len() < 32 || &buf[..16] != SNAPSHOT_MAGIC {
        return Err(bad("not a snapshot file"));
    }
    let word = |k: usize| u64::from_le_bytes(buf[k..k + 8].try_into().unwrap());
    let (m, count) = (word(16) as usize, word(24) as usize);
    let expected = m
        .checked_add(1)
        .and_then(|r| r.checked_mul(8))
        .and_then(|r| r.checked_mul(count))
        .and_then(|r| r.checked_add(32));
    if expected != Some(buf.len()) {
        return Err(bad("length does not match the header"));
    }
    let value = |k: usize| f64::from_le_bytes(buf[k..k + 8].try_into().unwrap());
    let stride = 8 * (m + 1);
    Ok((0..count)
        .map(|r| {
            let base = 32 + r * stride;
            (value(base), (0..m).map(|j| value(base + 8 + 8 * j)).collect())
        })
        .collect())
}
