//! Named-tensor checkpoint archive.
//!
//! Layout: `RBCK` magic, u32 version, length-prefixed manifest JSON, tensor
//! count, then per tensor a length-prefixed name, dimensions, and f64
//! little-endian payload, followed by a SHA-256 digest of everything before
//! it. No timestamps anywhere: the same state serializes to identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use sha2::{Digest, Sha256};

use crate::autodiff::Arr;
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"RBCK";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug)]
pub struct Archive {
    pub manifest: serde_json::Value,
    pub tensors: BTreeMap<String, Arr>,
}

pub fn save_archive(path: &Path, manifest: &serde_json::Value, tensors: &[(String, Arr)]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    let mjson = serde_json::to_vec(manifest)?;
    buf.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
    buf.extend_from_slice(&mjson);
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, tensor) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<Archive> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    if buf.len() < 4 + 4 + 8 + 8 + 32 {
        return Err(Error::Checkpoint(format!("{}: truncated archive", path.display())));
    }
    let (body, stored_digest) = buf.split_at(buf.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Checkpoint(format!("{}: checksum mismatch (corrupt or tampered)", path.display())));
    }

    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(Error::Checkpoint("archive truncated".into()));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != ARCHIVE_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != ARCHIVE_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: archive version {version}, this build reads {ARCHIVE_VERSION}",
            path.display()
        )));
    }
    let mlen = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let manifest: serde_json::Value = serde_json::from_slice(take(&mut pos, mlen)?)?;
    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name not UTF-8".into()))?;
        let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = dims.iter().product();
        let bytes = take(&mut pos, n * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = Arr::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        tensors.insert(name, arr);
    }
    Ok(Archive { manifest, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn roundtrip_preserves_manifest_and_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rbck");
        let manifest = serde_json::json!({"kind": "test", "seed": 7});
        let tensors = vec![
            ("w".to_string(), array![[1.0, 2.0], [3.0, -4.5]].into_dyn()),
            ("b".to_string(), array![0.25].into_dyn()),
        ];
        save_archive(&path, &manifest, &tensors).unwrap();
        let a = load_archive(&path).unwrap();
        assert_eq!(a.manifest["kind"], "test");
        assert_eq!(a.tensors["w"], tensors[0].1);
        assert_eq!(a.tensors["b"], tensors[1].1);
    }

    #[test]
    fn identical_state_serializes_to_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("1.rbck"), dir.path().join("2.rbck"));
        let manifest = serde_json::json!({"epoch": 3});
        let tensors = vec![("x".to_string(), array![1.0, 2.0, 3.0].into_dyn())];
        save_archive(&p1, &manifest, &tensors).unwrap();
        save_archive(&p2, &manifest, &tensors).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn tampered_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rbck");
        let tensors = vec![("x".to_string(), array![9.0].into_dyn())];
        save_archive(&path, &serde_json::json!({}), &tensors).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, bytes).unwrap();
        match load_archive(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("checksum") || msg.contains("magic")),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn future_version_is_an_explicit_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rbck");
        save_archive(&path, &serde_json::json!({}), &[]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        let n = bytes.len();
        bytes[n - 32..].copy_from_slice(&digest);
        std::fs::write(&path, bytes).unwrap();
        match load_archive(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version 99")),
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
