//! Single-file binary container shared by embedder and GAN checkpoints.
//!
//! Layout: magic `TXGN`, format version (u32 LE), kind string, JSON header,
//! a sequence of `f64` blobs, and a trailing SHA-256 over everything before
//! it. Lengths are u64 LE prefixes.

use std::fs;
use std::path::Path;

use autograd::nn::ParamStore;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TXGN";
pub const FORMAT_VERSION: u32 = 1;

pub struct Container {
    pub kind: String,
    pub header: Value,
    pub blobs: Vec<Vec<f64>>,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Encode and write a container; returns the SHA-256 of the written file.
pub fn write(path: &Path, kind: &str, header: &Value, blobs: &[&[f64]]) -> Result<String> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u64(&mut buf, kind.len() as u64);
    buf.extend_from_slice(kind.as_bytes());
    let header = serde_json::to_vec(header).expect("header serializes");
    put_u64(&mut buf, header.len() as u64);
    buf.extend_from_slice(&header);
    put_u64(&mut buf, blobs.len() as u64);
    for blob in blobs {
        put_u64(&mut buf, blob.len() as u64);
        for v in blob.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // write-then-rename so a crash never leaves a truncated checkpoint
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&buf))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

pub fn read(path: &Path, expected_kind: &str) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected_kind).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode(bytes: &[u8], expected_kind: &str) -> Result<Container> {
    if bytes.len() < 4 + 4 + 32 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (file is corrupt)".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let n = r.u64()?;
    let kind = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("bad kind tag".into()))?;
    if kind != expected_kind {
        return Err(Error::Checkpoint(format!("holds a `{kind}` checkpoint, expected `{expected_kind}`")));
    }
    let n = r.u64()?;
    let header: Value = serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let count = r.u64()?;
    let mut blobs = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u64()?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        blobs.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect());
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Container { kind, header, blobs })
}

/// Names and shapes of a parameter store, stored in headers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout(pub Vec<(String, Vec<usize>)>);

pub fn flatten(store: &ParamStore) -> Vec<f64> {
    store.entries().iter().flat_map(|e| e.value.iter().copied()).collect()
}

/// Fill `store` from a flat blob, checking the stored layout first.
pub fn unflatten(store: &mut ParamStore, layout: &Layout, blob: &[f64]) -> Result<()> {
    if store.layout() != layout.0 {
        return Err(Error::Checkpoint("parameter layout does not match the configured model".into()));
    }
    if blob.len() != store.num_scalars() {
        return Err(Error::Checkpoint(format!("{} values for {} parameters", blob.len(), store.num_scalars())));
    }
    let mut offset = 0;
    for i in 0..store.len() {
        let entry = store.entry_mut(autograd_param_id(i));
        let n = entry.value.len();
        entry.value.copy_from_slice(&blob[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

fn autograd_param_id(i: usize) -> autograd::nn::ParamId {
    autograd::nn::ParamId::nth(i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let header = serde_json::json!({"a": 1});
        write(&path, "demo", &header, &[&[1.0, -2.5], &[]]).unwrap();
        let c = read(&path, "demo").unwrap();
        assert_eq!(c.header, header);
        assert_eq!(c.blobs, vec![vec![1.0, -2.5], vec![]]);
        assert!(matches!(read(&path, "other"), Err(Error::Checkpoint(_))));

        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read(&path, "demo"), Err(Error::Checkpoint(_))));
        fs::write(&path, b"junk").unwrap();
        assert!(matches!(read(&path, "demo"), Err(Error::Checkpoint(_))));
    }
}
