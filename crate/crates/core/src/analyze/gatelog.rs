//! Evaluation-time gate records and their binary file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic          8 bytes  "GATELOG1"
//! num_samples    u64
//! num_gates      u64      (c)
//! layer ids      c x u32  backbone layer of each gate
//! labels         num_samples x u32
//! gate bits      num_samples rows of ceil(c / 8) bytes; gate j of a row is
//!                bit (j % 8) of byte j / 8, least significant bit first
//! ```
//!
//! Filter indices are implied: gates of one layer are contiguous and
//! numbered from zero in order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::GateSite;
use crate::util::write_atomic;

const MAGIC: &[u8; 8] = b"GATELOG1";

/// Binary gate vectors of an evaluation set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateLog {
    num_samples: usize,
    num_gates: usize,
    /// Row-major `num_samples x num_gates`, entries 0 or 1.
    gates: Vec<u8>,
    labels: Vec<u32>,
    layers: Vec<u32>,
}

impl GateLog {
    /// `gates` is row-major `labels.len() x layers.len()` with entries 0 or 1.
    pub fn new(gates: Vec<u8>, labels: Vec<u32>, layers: Vec<u32>) -> Result<Self> {
        let (n, c) = (labels.len(), layers.len());
        if gates.len() != n * c {
            return Err(Error::invalid(format!("{} gate entries for {n} samples x {c} gates", gates.len())));
        }
        if let Some(bad) = gates.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("gate entries must be 0 or 1, got {bad}")));
        }
        // each layer's gates must form one contiguous run
        let mut seen = std::collections::HashSet::new();
        for (j, &l) in layers.iter().enumerate() {
            if (j == 0 || layers[j - 1] != l) && !seen.insert(l) {
                return Err(Error::invalid(format!("gates of layer {l} are not contiguous")));
            }
        }
        Ok(Self {
            num_samples: n,
            num_gates: c,
            gates,
            labels,
            layers,
        })
    }

    /// Builds a log from `N x c` gate values, thresholding nothing: every
    /// value must already be exactly 0.0 or 1.0.
    pub fn from_f32_rows(values: &[f32], labels: Vec<u32>, sites: &[GateSite]) -> Result<Self> {
        let gates = values
            .iter()
            .map(|&v| match v {
                0.0 => Ok(0u8),
                1.0 => Ok(1u8),
                other => Err(Error::invalid(format!("gate log needs binary gates, got {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(gates, labels, sites.iter().map(|s| s.layer as u32).collect())
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn num_gates(&self) -> usize {
        self.num_gates
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn layer_ids(&self) -> &[u32] {
        &self.layers
    }

    #[inline]
    pub fn get(&self, sample: usize, gate: usize) -> u8 {
        self.gates[sample * self.num_gates + gate]
    }

    pub fn row(&self, sample: usize) -> &[u8] {
        &self.gates[sample * self.num_gates..(sample + 1) * self.num_gates]
    }

    /// Layer and filter of every gate.
    pub fn layer_map(&self) -> Vec<GateSite> {
        let mut out = Vec::with_capacity(self.num_gates);
        for (j, &l) in self.layers.iter().enumerate() {
            let filter = if j > 0 && self.layers[j - 1] == l { out.last().map_or(0, |s: &GateSite| s.filter + 1) } else { 0 };
            out.push(GateSite {
                layer: l as usize,
                filter,
            });
        }
        out
    }

    /// Appends the rows of `other`, which must have the same layer map.
    pub fn extend(&mut self, other: &GateLog) -> Result<()> {
        if other.layers != self.layers {
            return Err(Error::invalid("cannot merge gate logs with different layer maps"));
        }
        self.gates.extend_from_slice(&other.gates);
        self.labels.extend_from_slice(&other.labels);
        self.num_samples += other.num_samples;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let row_bytes = self.num_gates.div_ceil(8);
        let mut out = Vec::with_capacity(24 + 4 * (self.num_gates + self.num_samples) + row_bytes * self.num_samples);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.num_samples as u64).to_le_bytes());
        out.extend_from_slice(&(self.num_gates as u64).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for s in 0..self.num_samples {
            let mut row = vec![0u8; row_bytes];
            for (j, &bit) in self.row(s).iter().enumerate() {
                row[j / 8] |= bit << (j % 8);
            }
            out.extend_from_slice(&row);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, reason: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason,
        };
        let mut pos = 0usize;
        let mut take = |len: usize, what: &str| -> Result<&[u8]> {
            let end = pos.checked_add(len).filter(|&e| e <= bytes.len());
            let Some(end) = end else {
                return Err(fail(pos, format!("truncated {what}")));
            };
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(8, "magic")? != MAGIC {
            return Err(fail(0, "not a gate log".into()));
        }
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let n = u64_at(take(8, "header")?) as usize;
        let c = u64_at(take(8, "header")?) as usize;
        let u32s = |b: &[u8]| -> Vec<u32> { b.chunks_exact(4).map(|x| u32::from_le_bytes(x.try_into().expect("4 bytes"))).collect() };
        let layers = u32s(take(c.checked_mul(4).ok_or_else(|| fail(16, "gate count overflow".into()))?, "layer map")?);
        let labels = u32s(take(n.checked_mul(4).ok_or_else(|| fail(16, "sample count overflow".into()))?, "labels")?);
        let row_bytes = c.div_ceil(8);
        let bits = take(row_bytes * n, "gate bits")?;
        let mut gates = Vec::with_capacity(n * c);
        for row in bits.chunks_exact(row_bytes.max(1)).take(n) {
            for j in 0..c {
                gates.push((row[j / 8] >> (j % 8)) & 1);
            }
        }
        if pos != bytes.len() {
            return Err(fail(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Self::new(gates, labels, layers).map_err(|e| fail(0, e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes();
        write_atomic(path.as_ref(), |f| f.write_all(&bytes))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_map_derives_filter_indices() {
        let log = GateLog::new(vec![1, 0, 1, 0, 1, 1, 0, 1, 0, 0], vec![0, 1], vec![0, 0, 2, 2, 2]).unwrap();
        let map = log.layer_map();
        assert_eq!(map[1], GateSite { layer: 0, filter: 1 });
        assert_eq!(map[4], GateSite { layer: 2, filter: 2 });
        assert!(GateLog::new(vec![], vec![], vec![0, 1, 0]).is_err());
    }

    #[test]
    fn bytes_round_trip_with_partial_last_byte() {
        let gates: Vec<u8> = (0..3 * 11).map(|i| ((i * 7) % 3 == 0) as u8).collect();
        let log = GateLog::new(gates, vec![4, 0, 9], vec![0; 11]).unwrap();
        let bytes = log.to_bytes();
        assert_eq!(bytes.len(), 8 + 16 + 44 + 12 + 3 * 2);
        assert_eq!(GateLog::from_bytes(&bytes, Path::new("mem")).unwrap(), log);
        assert!(GateLog::from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }
}
