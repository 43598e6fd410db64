//! On-disk artifact formats and the provenance manifest chain.
//!
//! Formats:
//! - dataset  "RFDS": version u16, count u32, records {label u8, 2048 le f32}
//! - tokens   "RFTK": version u16, count u32, records {label u8, 512 u8}
//! - checkpoints "RFVQ"/"RFDT"/"RFCL": version u16, JSON header, named f32
//!   tensors with shape headers, sha256 trailer.
//!
//! Every writer drops a `<path>.manifest.json` sidecar recording the seed,
//! config echo, and the hashes of all inputs the artifact was derived from.

use crate::dataset::{IQFrame, FRAME_LEN};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u16 = 1;
pub const MAGIC_DATASET: &[u8; 4] = b"RFDS";
pub const MAGIC_TOKENS: &[u8; 4] = b"RFTK";
pub const MAGIC_VQVAE: &[u8; 4] = b"RFVQ";
pub const MAGIC_DOT: &[u8; 4] = b"RFDT";
pub const MAGIC_CLASSIFIER: &[u8; 4] = b"RFCL";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

// ---------------------------------------------------------------- dataset

pub fn write_dataset(path: &Path, frames: &[IQFrame]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + frames.len() * (1 + 8 * FRAME_LEN));
    buf.extend_from_slice(MAGIC_DATASET);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    for f in frames {
        buf.push(f.label);
        for v in f.i.iter().chain(f.q.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<IQFrame>> {
    let bytes = fs::read(path)?;
    let mut r = Cursor::new(&bytes, path, MAGIC_DATASET)?;
    let count = r.u32()? as usize;
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let label = r.u8()?;
        if label > 5 {
            return Err(CoreError::Format(format!("dataset label {label} out of range")));
        }
        let mut i = Vec::with_capacity(FRAME_LEN);
        let mut q = Vec::with_capacity(FRAME_LEN);
        for _ in 0..FRAME_LEN {
            i.push(r.f32()?);
        }
        for _ in 0..FRAME_LEN {
            q.push(r.f32()?);
        }
        frames.push(IQFrame { i, q, label });
    }
    r.expect_end()?;
    Ok(frames)
}

// ---------------------------------------------------------------- tokens

/// Discrete latent sequence of one frame: 512 codeword indices plus a class
/// label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<u8>,
    pub label: u8,
}

pub const TOKENS_PER_SEQ: usize = 512;

pub fn write_tokens(path: &Path, seqs: &[TokenSeq]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + seqs.len() * (1 + TOKENS_PER_SEQ));
    buf.extend_from_slice(MAGIC_TOKENS);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(seqs.len() as u32).to_le_bytes());
    for s in seqs {
        if s.tokens.len() != TOKENS_PER_SEQ {
            return Err(CoreError::InvalidArgument(format!(
                "token sequence length {} != {TOKENS_PER_SEQ}",
                s.tokens.len()
            )));
        }
        buf.push(s.label);
        buf.extend_from_slice(&s.tokens);
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tokens(path: &Path) -> Result<Vec<TokenSeq>> {
    let bytes = fs::read(path)?;
    let mut r = Cursor::new(&bytes, path, MAGIC_TOKENS)?;
    let count = r.u32()? as usize;
    let mut seqs = Vec::with_capacity(count);
    for _ in 0..count {
        let label = r.u8()?;
        let tokens = r.bytes(TOKENS_PER_SEQ)?.to_vec();
        if let Some(bad) = tokens.iter().find(|t| **t >= 128) {
            return Err(CoreError::Format(format!("token {bad} out of codebook range")));
        }
        seqs.push(TokenSeq { tokens, label });
    }
    r.expect_end()?;
    Ok(seqs)
}

// ---------------------------------------------------------------- checkpoints

/// Serialized model: JSON hyperparameter header plus named parameter tensors.
#[derive(Debug)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn write_checkpoint(
    path: &Path,
    magic: &[u8; 4],
    header: &serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let hdr = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(hdr.len() as u32).to_le_bytes());
    buf.extend_from_slice(&hdr);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(t.shape.len() as u8);
        for d in &t.shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path, magic: &[u8; 4]) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 32 {
        return Err(CoreError::Format(format!("{}: truncated checkpoint", path.display())));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(CoreError::Integrity(format!(
            "{}: checksum mismatch (corrupt checkpoint)",
            path.display()
        )));
    }
    let mut r = Cursor::new(body, path, magic)?;
    let hlen = r.u32()? as usize;
    let header: serde_json::Value = serde_json::from_slice(r.bytes(hlen)?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = String::from_utf8(r.bytes(nlen)?.to_vec())
            .map_err(|_| CoreError::Format("bad tensor name".into()))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f32()?);
        }
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    r.expect_end()?;
    Ok(Checkpoint { header, tensors })
}

impl Checkpoint {
    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CoreError::Format(format!("checkpoint missing tensor {name}")))?;
        Ok(self.tensors.remove(pos).1)
    }
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestInput {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<ManifestInput>,
    pub output_sha256: String,
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut os = artifact.as_os_str().to_owned();
    os.push(".manifest.json");
    PathBuf::from(os)
}

pub fn write_manifest(
    artifact: &Path,
    command: &str,
    seed: u64,
    config: serde_json::Value,
    inputs: &[&Path],
) -> Result<()> {
    let m = Manifest {
        command: command.to_string(),
        seed,
        config,
        inputs: inputs
            .iter()
            .map(|p| {
                Ok(ManifestInput {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        output_sha256: sha256_file(artifact)?,
    };
    let mut f = fs::File::create(manifest_path(artifact))?;
    f.write_all(serde_json::to_string_pretty(&m)?.as_bytes())?;
    Ok(())
}

pub fn read_manifest(artifact: &Path) -> Result<Manifest> {
    let mut s = String::new();
    fs::File::open(manifest_path(artifact))?.read_to_string(&mut s)?;
    Ok(serde_json::from_str(&s)?)
}

/// Re-check the hash chain: the artifact against its manifest, then each
/// recorded input (recursively, where the input has a manifest of its own).
pub fn verify_chain(artifact: &Path) -> Result<()> {
    let m = read_manifest(artifact)?;
    let actual = sha256_file(artifact)?;
    if actual != m.output_sha256 {
        return Err(CoreError::Integrity(format!(
            "{}: hash {} != recorded {}",
            artifact.display(),
            actual,
            m.output_sha256
        )));
    }
    for input in &m.inputs {
        let p = Path::new(&input.path);
        let actual = sha256_file(p)?;
        if actual != input.sha256 {
            return Err(CoreError::Integrity(format!(
                "{}: input {} hash changed since it was consumed",
                artifact.display(),
                input.path
            )));
        }
        if manifest_path(p).exists() {
            verify_chain(p)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- reader

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &Path, magic: &[u8; 4]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0, path: path.display().to_string() };
        let m = c.bytes(4)?;
        if m != magic {
            return Err(CoreError::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                c.path,
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let ver = c.u16()?;
        if ver != FORMAT_VERSION {
            return Err(CoreError::Format(format!(
                "{}: unsupported version {ver}",
                c.path
            )));
        }
        Ok(c)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::Format(format!("{}: truncated file", self.path)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(CoreError::Format(format!(
                "{}: {} trailing bytes",
                self.path,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_dataset;
    use tempfile::tempdir;

    #[test]
    fn dataset_round_trip_and_byte_determinism() {
        let dir = tempdir().unwrap();
        let frames = build_dataset(1, 3, None).unwrap();
        let p1 = dir.path().join("a.rfds");
        let p2 = dir.path().join("b.rfds");
        write_dataset(&p1, &frames).unwrap();
        write_dataset(&p2, &build_dataset(1, 3, None).unwrap()).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let back = read_dataset(&p1).unwrap();
        assert_eq!(back, frames);
    }

    #[test]
    fn token_file_round_trip_rejects_bad_tokens() {
        let dir = tempdir().unwrap();
        let seqs = vec![TokenSeq { tokens: vec![5; 512], label: 2 }];
        let p = dir.path().join("t.rftk");
        write_tokens(&p, &seqs).unwrap();
        assert_eq!(read_tokens(&p).unwrap(), seqs);
        // corrupt one token beyond the codebook range
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 1] = 200;
        fs::write(&p, bytes).unwrap();
        assert!(read_tokens(&p).is_err());
    }

    #[test]
    fn checkpoint_detects_corruption() {
        let dir = tempdir().unwrap();
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = dir.path().join("m.rfvq");
        write_checkpoint(&p, MAGIC_VQVAE, &serde_json::json!({"beta": 0.25}), &[("w".into(), &t)])
            .unwrap();
        let mut ck = read_checkpoint(&p, MAGIC_VQVAE).unwrap();
        assert_eq!(ck.header["beta"], 0.25);
        assert_eq!(ck.take("w").unwrap(), t);
        // flip one payload byte
        let mut bytes = fs::read(&p).unwrap();
        bytes[20] ^= 0xff;
        fs::write(&p, bytes).unwrap();
        match read_checkpoint(&p, MAGIC_VQVAE) {
            Err(CoreError::Integrity(_)) => {}
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.rfds");
        write_dataset(&p, &build_dataset(1, 1, None).unwrap()).unwrap();
        match read_tokens(&p) {
            Err(CoreError::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_chain_verifies_and_detects_tampering() {
        let dir = tempdir().unwrap();
        let d = dir.path().join("d.rfds");
        write_dataset(&d, &build_dataset(1, 1, None).unwrap()).unwrap();
        write_manifest(&d, "data", 1, serde_json::json!({}), &[]).unwrap();
        let t = dir.path().join("t.rftk");
        write_tokens(&t, &[TokenSeq { tokens: vec![0; 512], label: 0 }]).unwrap();
        write_manifest(&t, "tokenize", 1, serde_json::json!({}), &[&d]).unwrap();
        verify_chain(&t).unwrap();
        // tamper with the upstream dataset
        let mut bytes = fs::read(&d).unwrap();
        bytes[10] ^= 1;
        fs::write(&d, bytes).unwrap();
        assert!(verify_chain(&t).is_err());
    }
}
