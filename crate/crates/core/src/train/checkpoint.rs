//! Self-describing checkpoint container.
//!
//! ```text
//! magic        8 bytes "GNETCKPT"
//! version      u32
//! meta_len     u32, then meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! count        u32 tensors, each:
//!   name_len   u32, then name_len bytes of UTF-8
//!   dtype      u8 (1 = f32)
//!   rank       u32, then rank x u64 dims
//!   payload    product(dims) x f32
//! digest       32 bytes SHA-256 of everything above
//! ```
//!
//! Integers and floats are little-endian. Tensor names are `param/<name>`,
//! `stats/<name>/mean`, `stats/<name>/var` and `velocity/<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochMetrics, Phase, Sgd};
use crate::error::{Error, Result};
use crate::layers::RunningStats;
use crate::model::{Component, GaterNet};
use crate::tensor::Tensor;
use crate::util::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GNETCKPT";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    /// Base seed; per-epoch generators are derived from it, so it is the
    /// whole random state between epochs.
    pub seed: u64,
    pub spec_hash: String,
    pub config_hash: String,
    #[serde(default)]
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Snapshot of every parameter, running statistic and momentum buffer.
    /// `skip` components are left out.
    pub fn capture(net: &GaterNet, sgd: Option<&Sgd>, meta: CheckpointMeta, skip: &[Component]) -> Self {
        let mut tensors = BTreeMap::new();
        let store = net.store();
        for (i, p) in store.params().iter().enumerate() {
            if skip.contains(&p.component) {
                continue;
            }
            tensors.insert(format!("param/{}", p.name), p.value.clone());
            if let Some(v) = sgd.and_then(|s| s.velocity(i)) {
                tensors.insert(format!("velocity/{}", p.name), v.clone());
            }
        }
        for (name, comp, stats) in store.stats_entries() {
            if skip.contains(&comp) {
                continue;
            }
            tensors.insert(format!("stats/{name}/mean"), stats.mean.clone());
            tensors.insert(format!("stats/{name}/var"), stats.var.clone());
        }
        Self { meta, tensors }
    }

    fn check_spec(&self, net: &GaterNet) -> Result<()> {
        let expected = net.spec().hash();
        if self.meta.spec_hash != expected {
            return Err(Error::SpecHashMismatch {
                expected,
                found: self.meta.spec_hash.clone(),
            });
        }
        Ok(())
    }

    /// Loads the parameters and statistics of `components` into `net`, and
    /// momentum buffers into `sgd` when given. Every requested tensor must
    /// be present.
    pub fn restore(&self, net: &mut GaterNet, sgd: Option<&mut Sgd>, components: &[Component]) -> Result<()> {
        self.check_spec(net)?;
        let missing = |name: &str| Error::Format {
            path: "checkpoint".into(),
            offset: 0,
            reason: format!("missing tensor {name}"),
        };
        let store = net.store_mut();
        let wanted: Vec<(usize, String)> = store
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| components.contains(&p.component))
            .map(|(i, p)| (i, p.name.clone()))
            .collect();
        for (_, name) in &wanted {
            let key = format!("param/{name}");
            let t = self.tensors.get(&key).ok_or_else(|| missing(&key))?;
            store.set_by_name(name, t.clone())?;
        }
        let stats: Vec<String> = store
            .stats_entries()
            .filter(|(_, c, _)| components.contains(c))
            .map(|(n, _, _)| n.to_string())
            .collect();
        for name in stats {
            let mean = self.tensors.get(&format!("stats/{name}/mean")).ok_or_else(|| missing(&name))?;
            let var = self.tensors.get(&format!("stats/{name}/var")).ok_or_else(|| missing(&name))?;
            let slot = store.stats_mut_by_name(&name).expect("listed above");
            if mean.shape() != slot.mean.shape() || var.shape() != slot.var.shape() {
                return Err(Error::ShapeMismatch {
                    op: "restore running stats",
                    lhs: slot.mean.shape().to_vec(),
                    rhs: mean.shape().to_vec(),
                });
            }
            *slot = RunningStats {
                mean: mean.clone(),
                var: var.clone(),
            };
        }
        if let Some(sgd) = sgd {
            for (i, name) in wanted {
                if let Some(v) = self.tensors.get(&format!("velocity/{name}")) {
                    sgd.set_velocity(i, v.clone());
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, reason: &str| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason: reason.to_string(),
        };
        if bytes.len() < CHECKPOINT_MAGIC.len() + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail(0, "not a checkpoint"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(fail(body.len(), "checksum mismatch (truncated or corrupt)"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32().ok_or_else(|| fail(r.pos, "truncated header"))?;
        if version != VERSION {
            return Err(fail(8, &format!("unsupported version {version}")));
        }
        let meta_len = r.u32().ok_or_else(|| fail(r.pos, "truncated header"))? as usize;
        let meta_at = r.pos;
        let meta_bytes = r.take(meta_len).ok_or_else(|| fail(meta_at, "truncated metadata"))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(meta_bytes).map_err(|e| fail(meta_at, &format!("bad metadata: {e}")))?;
        let count = r.u32().ok_or_else(|| fail(r.pos, "truncated tensor count"))?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32().ok_or_else(|| fail(at, "truncated tensor header"))? as usize;
            let name = r
                .take(name_len)
                .and_then(|b| std::str::from_utf8(b).ok())
                .ok_or_else(|| fail(at, "bad tensor name"))?
                .to_string();
            if r.take(1) != Some(&[DTYPE_F32][..]) {
                return Err(fail(r.pos - 1, "unsupported dtype"));
            }
            let rank = r.u32().ok_or_else(|| fail(r.pos, "truncated tensor header"))? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(|| fail(r.pos, "truncated shape"))? as usize);
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fail(at, "shape overflow"))?;
            let payload = r
                .take(len.checked_mul(4).ok_or_else(|| fail(at, "shape overflow"))?)
                .ok_or_else(|| fail(r.pos, "truncated payload"))?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != body.len() {
            return Err(fail(r.pos, "trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes();
        write_atomic(path.as_ref(), |w| w.write_all(&bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len())?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
