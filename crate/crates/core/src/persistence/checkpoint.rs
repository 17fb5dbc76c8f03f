//! Single-file checkpoint container: a JSON metadata header followed by
//! named little-endian f32 parameter blobs and a whole-file SHA-256
//! checksum. Self-describing, so any language can read it; saves are
//! atomic (write-temp-then-rename) and byte-deterministic, so
//! save -> load -> save reproduces the file exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{ParameterStore, StoreMeta};
use crate::persistence::config::RunConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VSODCKPT";
const FORMAT_VERSION: u32 = 1;

/// Parameter-name prefixes of the infer-frame feature encoder (removable at
/// test time in the train-only configuration).
pub const ENCODER_PREFIXES: &[&str] = &["attention.", "embedding.unit3."];

pub fn is_encoder_param(name: &str) -> bool {
    ENCODER_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    stage: u8,
    iteration: u64,
    run: RunConfig,
}

/// A parameter store plus the run configuration that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub parameters: ParameterStore<f32>,
    pub run: RunConfig,
}

impl Checkpoint {
    pub fn new(parameters: ParameterStore<f32>, run: RunConfig) -> Self {
        Self { parameters, run }
    }

    /// Removes the infer-frame encoder parameters; returns the removed names.
    pub fn strip_encoder(&mut self) -> Vec<String> {
        let mut removed = Vec::new();
        for prefix in ENCODER_PREFIXES {
            removed.extend(self.parameters.remove_prefix(prefix));
        }
        removed
    }

    pub fn has_encoder_params(&self) -> bool {
        self.parameters.names().any(is_encoder_param)
    }
}

fn encode<T: Scalar>(store: &ParameterStore<T>, run: &RunConfig) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        stage: store.meta.stage,
        iteration: store.meta.iteration,
        run: run.clone(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, tensor) in store.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            let f = v.to_f64().unwrap_or(f64::NAN) as f32;
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

/// Saves atomically: the bytes are written to a sibling temp file and
/// renamed into place.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    store: &ParameterStore<T>,
    run: &RunConfig,
) -> Result<()> {
    let bytes = encode(store, run)?;
    let tmp = path.with_extension("ckpt.tmp");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 32 {
        return Err(Error::Checkpoint("file too short to be a checkpoint".into()));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Checkpoint(
            "checksum mismatch: file is corrupt or truncated".into(),
        ));
    }
    let mut cur = Cursor { data: body, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = cur.u64()? as usize;
    let header: Header = serde_json::from_slice(cur.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let count = cur.u64()? as usize;
    let mut store = ParameterStore::<f32>::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        let ndim = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, Tensor::new(shape, data)?);
    }
    store.meta = StoreMeta {
        stage: header.stage,
        iteration: header.iteration,
        ablation: header.run.ablation,
        fusion: header.run.fusion,
    };
    Ok(Checkpoint {
        parameters: store,
        run: header.run,
    })
}

/// Key-by-key comparison of a loaded store against the shapes this
/// architecture expects; used to reject checkpoint/config mismatches with an
/// explicit diff.
pub fn diff_against_expected<T: Scalar>(
    store: &ParameterStore<T>,
    expected: &ParameterStore<T>,
) -> Vec<String> {
    let mut diff = Vec::new();
    for (name, t) in expected.iter() {
        match store.get(name) {
            Ok(have) if have.shape() == t.shape() => {}
            Ok(have) => diff.push(format!(
                "shape mismatch `{name}`: checkpoint {:?} vs expected {:?}",
                have.shape(),
                t.shape()
            )),
            Err(_) => diff.push(format!("missing `{name}`")),
        }
    }
    for name in store.names() {
        if !expected.contains(name) {
            diff.push(format!("unexpected `{name}`"));
        }
    }
    diff
}
