//! Versioned binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "APCN" | version u32 | kind (u16 len + utf8) | arch_digest u64
//! | epoch u32 | adam_step u64 | param_count u32
//! | params:  name (u16 len + utf8) | system u8 | rank u8 | dims u32…
//!            | values f64…
//! | has_opt u8 | (adam m blobs, then v blobs, in parameter order)
//! ```
//!
//! Values are raw `f64` bits, so save → load → save is byte-identical.

use crate::autodiff::{ParamStore, System, Tensor};
use crate::error::{Error, Result};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"APCN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    /// Model kind tag, e.g. `apcn2`, `apcn1`, `rb-recon`, `rb-class`.
    pub kind: String,
    /// Digest of the architecture config that produced the parameters.
    pub arch_digest: u64,
    /// Epochs completed.
    pub epoch: u32,
    pub adam_step: u64,
}

/// Optimizer moment vectors in parameter order.
pub type OptState = (Vec<Vec<f64>>, Vec<Vec<f64>>);

pub fn encode(store: &ParamStore, meta: &CheckpointMeta, opt: Option<&OptState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.kind.len() as u16).to_le_bytes());
    out.extend_from_slice(meta.kind.as_bytes());
    out.extend_from_slice(&meta.arch_digest.to_le_bytes());
    out.extend_from_slice(&meta.epoch.to_le_bytes());
    out.extend_from_slice(&meta.adam_step.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, entry) in store.iter() {
        out.extend_from_slice(&(entry.name.len() as u16).to_le_bytes());
        out.extend_from_slice(entry.name.as_bytes());
        out.push(match entry.system {
            System::State => 0,
            System::Action => 1,
            System::Baseline => 2,
        });
        out.push(entry.value.shape().len() as u8);
        for &d in entry.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in entry.value.vals() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match opt {
        Some((m, v)) => {
            out.push(1);
            for blob in m.iter().chain(v.iter()) {
                for &x in blob {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        None => out.push(0),
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} reading {what}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Checkpoint(format!("non-utf8 {what}")))
    }
}

/// Decode a checkpoint into a fresh store mirroring the saved layout.
pub fn decode(bytes: &[u8]) -> Result<(ParamStore, CheckpointMeta, Option<OptState>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let kind = r.string("kind")?;
    let arch_digest = r.u64("arch digest")?;
    let epoch = r.u32("epoch")?;
    let adam_step = r.u64("adam step")?;
    let count = r.u32("param count")? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string("param name")?;
        let system = match r.u8("system")? {
            0 => System::State,
            1 => System::Action,
            2 => System::Baseline,
            other => {
                return Err(Error::Checkpoint(format!("unknown system tag {other}")))
            }
        };
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let vals = r.f64s(numel, "values")?;
        store.register(name, system, Tensor::new(shape, vals));
    }
    let opt = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let sizes: Vec<usize> = store.iter().map(|(_, e)| e.value.numel()).collect();
            let mut m = Vec::with_capacity(sizes.len());
            for &n in &sizes {
                m.push(r.f64s(n, "adam m")?);
            }
            let mut v = Vec::with_capacity(sizes.len());
            for &n in &sizes {
                v.push(r.f64s(n, "adam v")?);
            }
            Some((m, v))
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "bad optimizer flag {other}"
            )))
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((
        store,
        CheckpointMeta {
            kind,
            arch_digest,
            epoch,
            adam_step,
        },
        opt,
    ))
}

pub fn save(
    path: &Path,
    store: &ParamStore,
    meta: &CheckpointMeta,
    opt: Option<&OptState>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(store, meta, opt))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, CheckpointMeta, Option<OptState>)> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

/// Copy saved values into an already-constructed store, verifying that the
/// layouts agree and the checkpoint belongs to this model and architecture.
pub fn load_into(
    path: &Path,
    store: &mut ParamStore,
    expect_kind: &str,
    expect_digest: u64,
) -> Result<(CheckpointMeta, Option<OptState>)> {
    let bytes = std::fs::read(path)?;
    load_into_bytes(&bytes, store, expect_kind, expect_digest)
}

/// In-memory variant of [`load_into`].
pub fn load_into_bytes(
    bytes: &[u8],
    store: &mut ParamStore,
    expect_kind: &str,
    expect_digest: u64,
) -> Result<(CheckpointMeta, Option<OptState>)> {
    let (saved, meta, opt) = decode(bytes)?;
    if meta.kind != expect_kind {
        return Err(Error::Checkpoint(format!(
            "checkpoint is for model `{}`, expected `{expect_kind}`",
            meta.kind
        )));
    }
    if meta.arch_digest != expect_digest {
        return Err(Error::Checkpoint(
            "checkpoint architecture digest does not match the config".into(),
        ));
    }
    if saved.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            saved.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let current = store.entry(id);
        let loaded = saved.entry(crate::autodiff::ParamId(id.0));
        if current.name != loaded.name || current.value.shape() != loaded.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch at `{}` (checkpoint has `{}` {:?})",
                current.name,
                loaded.name,
                loaded.value.shape()
            )));
        }
        *store.value_mut(id) = loaded.value.clone();
    }
    Ok((meta, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_store() -> ParamStore {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        store.register(
            "w",
            System::State,
            Tensor::matrix(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()),
        );
        store.register("b", System::Action, Tensor::vector(vec![0.25, -1.5e-300]));
        store.register("c", System::Baseline, Tensor::scalar(f64::MIN_POSITIVE));
        store
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let store = sample_store();
        let meta = CheckpointMeta {
            kind: "apcn2".into(),
            arch_digest: 0xabcdef,
            epoch: 7,
            adam_step: 1234,
        };
        let opt = (
            vec![vec![0.1; 6], vec![0.2; 2], vec![0.3]],
            vec![vec![0.4; 6], vec![0.5; 2], vec![0.6]],
        );
        let bytes = encode(&store, &meta, Some(&opt));
        let (saved, meta2, opt2) = decode(&bytes).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(opt2.as_ref(), Some(&opt));
        let bytes2 = encode(&saved, &meta2, opt2.as_ref());
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn kind_and_digest_mismatches_are_rejected() {
        let dir = std::env::temp_dir().join("apcn-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.ckpt");
        let store = sample_store();
        let meta = CheckpointMeta {
            kind: "apcn2".into(),
            arch_digest: 1,
            epoch: 0,
            adam_step: 0,
        };
        save(&path, &store, &meta, None).unwrap();
        let mut target = sample_store();
        assert!(load_into(&path, &mut target, "apcn1", 1).is_err());
        assert!(load_into(&path, &mut target, "apcn2", 2).is_err());
        assert!(load_into(&path, &mut target, "apcn2", 1).is_ok());
    }

    #[test]
    fn truncation_is_detected() {
        let store = sample_store();
        let meta = CheckpointMeta {
            kind: "rb-recon".into(),
            arch_digest: 5,
            epoch: 1,
            adam_step: 10,
        };
        let bytes = encode(&store, &meta, None);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
