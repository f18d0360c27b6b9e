//! Binary tensor files and corpus manifests.
//!
//! Tensor layout: `b"ASTT"`, `u32` version, `u8` dtype (1 = f32), `u8`
//! rank, `rank` x `u32` extents, then row-major `f32` payload. All integers
//! and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::depth::{preprocess_depth, DepthMap, PreprocessConfig};
use super::{assemble_sample, Label, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"ASTT";
pub const TENSOR_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

fn take<'a>(bytes: &'a [u8], offset: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    bytes
        .get(offset..offset + n)
        .ok_or_else(|| format_err(bytes.len().min(offset), format!("truncated {what}")))
}

/// Decodes one tensor from the front of `bytes`, returning it with the
/// number of bytes consumed.
pub fn decode_tensor_prefix(bytes: &[u8]) -> Result<(Tensor<f32>, usize)> {
    if take(bytes, 0, 4, "magic")? != TENSOR_MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4, "version")?.try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let dtype = take(bytes, 8, 1, "dtype")?[0];
    if dtype != DTYPE_F32 {
        return Err(format_err(8, format!("unsupported dtype {dtype}")));
    }
    let rank = take(bytes, 9, 1, "rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut pos = 10;
    for _ in 0..rank {
        let e = u32::from_le_bytes(take(bytes, pos, 4, "extent")?.try_into().unwrap()) as usize;
        if e == 0 {
            return Err(format_err(pos, "zero extent"));
        }
        shape.push(e);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let payload = take(bytes, pos, 4 * n, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::new(shape, data)?, pos + 4 * n))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (t, used) = decode_tensor_prefix(bytes)?;
    if used != bytes.len() {
        return Err(format_err(used, "trailing bytes after payload"));
    }
    Ok(t)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn save_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn load_tensor(path: &Path) -> Result<Tensor<f32>> {
    decode_tensor(&read_file(path)?)
}

/// One entry of a corpus manifest. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub features: PathBuf,
    /// Raw depth in centimeters, 0 where missing.
    #[serde(default)]
    pub depth: Option<PathBuf>,
    pub label: Label,
    #[serde(default)]
    pub gt_mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
    pub meta: ManifestMeta,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// Loads and preprocesses every sample listed in the manifest at `path`.
/// Samples are read in parallel and returned in manifest order.
pub fn load_corpus(path: &Path) -> Result<Vec<Sample>> {
    let manifest = Manifest::load(path)?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    manifest
        .samples
        .par_iter()
        .map(|e| load_entry(&root, e, &manifest.meta.preprocess))
        .collect()
}

fn load_entry(root: &Path, e: &ManifestEntry, cfg: &PreprocessConfig) -> Result<Sample> {
    let features = load_tensor(&root.join(&e.features))?;
    let (depth, mask) = match &e.depth {
        Some(p) => {
            let raw = load_tensor(&root.join(p))?;
            let processed = preprocess_depth(&DepthMap::from_raw(raw)?, cfg)?;
            (Some(processed.channels), Some(processed.mask.mask))
        }
        None => (None, None),
    };
    let gt = e.gt_mask.as_ref().map(|p| load_tensor(&root.join(p))).transpose()?;
    assemble_sample(features, depth, mask, e.label, gt)
}
