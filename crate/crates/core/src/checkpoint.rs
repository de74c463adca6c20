//! Checkpoint directories: a plain-text manifest, one little-endian binary
//! file per array, the configuration snapshot and the RNG state.
//!
//! ```text
//! <dir>/manifest.csv      name,shape,dtype,frozen,stage_of_origin
//! <dir>/config.toml
//! <dir>/rng_state.bin
//! <dir>/arrays/<name>.bin
//! ```
//!
//! Each array file starts with the magic `SUCA`, a `u32` rank and one `u64`
//! per dimension, followed by the `f64` values.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sucode_tensor::Tensor;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{ArrayEntry, ParamMap};

const MAGIC: &[u8; 4] = b"SUCA";
const HEADER: &str = "name,shape,dtype,frozen,stage_of_origin";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub arrays: ParamMap,
    pub config: RunConfig,
    pub rng_state: Vec<u8>,
}

impl CheckpointBundle {
    pub fn new(config: RunConfig) -> Self {
        Self { arrays: ParamMap::new(), config, rng_state: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, frozen: bool, stage: u8) {
        self.arrays.insert(name.to_string(), ArrayEntry { tensor, frozen, stage_of_origin: stage });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.get(name).map(|e| &e.tensor)
    }

    /// Whether any array belongs to `component` (first path segment).
    pub fn has_component(&self, component: &str) -> bool {
        let prefix = format!("{component}/");
        self.arrays.keys().any(|k| k.starts_with(&prefix))
    }

    /// Scalar bookkeeping value stored as a one-element array.
    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).map(|t| t.data()[0])
    }
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(text: &str) -> Option<Vec<usize>> {
    if text.is_empty() {
        return Some(Vec::new());
    }
    text.split('x').map(|d| d.parse().ok()).collect()
}

fn array_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("arrays").join(format!("{name}.bin"))
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.contains(',')
        && name.split('/').all(|seg| !seg.is_empty() && seg != "." && seg != "..")
}

pub fn encode_array(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_array(bytes: &[u8]) -> Option<Tensor> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return None;
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().ok()?) as usize;
    let body = 8 + 8 * rank;
    if bytes.len() < body {
        return None;
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != body + 8 * n {
        return None;
    }
    let data = bytes[body..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Some(Tensor::new(&shape, data))
}

/// Writes the bundle to a sibling temporary directory, then swaps it into
/// place so an interrupted save never leaves a partial checkpoint at `path`.
pub fn save_checkpoint(bundle: &CheckpointBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    let tmp = parent.join(format!(".{file_name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io("clearing stale temporary checkpoint", e))?;
    }
    write_dir(bundle, &tmp)?;
    if path.exists() {
        let old = parent.join(format!(".{file_name}.old-{}", std::process::id()));
        fs::rename(path, &old).map_err(|e| Error::io(format!("moving aside {}", path.display()), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("installing {}", path.display()), e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io("removing previous checkpoint", e))?;
    } else {
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("installing {}", path.display()), e))?;
    }
    Ok(())
}

fn write_dir(bundle: &CheckpointBundle, dir: &Path) -> Result<()> {
    let io = |what: &str, e| Error::io(format!("{what} in {}", dir.display()), e);
    fs::create_dir_all(dir.join("arrays")).map_err(|e| io("creating arrays/", e))?;
    let mut manifest = String::from(HEADER);
    manifest.push('\n');
    for (name, entry) in &bundle.arrays {
        if !valid_name(name) {
            return Err(Error::CheckpointCorrupt(format!("invalid array name `{name}`")));
        }
        manifest.push_str(&format!(
            "{name},{},f64,{},{}\n",
            shape_text(entry.tensor.shape()),
            entry.frozen,
            entry.stage_of_origin
        ));
        let file = array_path(dir, name);
        fs::create_dir_all(file.parent().unwrap()).map_err(|e| io("creating array directory", e))?;
        fs::write(&file, encode_array(&entry.tensor)).map_err(|e| io("writing array", e))?;
    }
    let mut f = fs::File::create(dir.join("manifest.csv")).map_err(|e| io("creating manifest", e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| io("writing manifest", e))?;
    fs::write(dir.join("config.toml"), bundle.config.to_toml_string()).map_err(|e| io("writing config", e))?;
    fs::write(dir.join("rng_state.bin"), &bundle.rng_state).map_err(|e| io("writing rng state", e))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointBundle> {
    let dir = path.as_ref();
    let manifest_path = dir.join("manifest.csv");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::CheckpointCorrupt(format!("cannot read {}: {e}", manifest_path.display())))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(HEADER) {
        return Err(Error::CheckpointCorrupt("manifest header missing or wrong".into()));
    }
    let mut arrays = ParamMap::new();
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |why: &str| Error::CheckpointCorrupt(format!("manifest line {}: {why}", lineno + 2));
        let fields: Vec<&str> = line.trim().split(',').collect();
        let [name, shape, dtype, frozen, stage] = fields[..] else {
            return Err(bad("expected 5 fields"));
        };
        if !valid_name(name) {
            return Err(bad("invalid name"));
        }
        let shape = parse_shape(shape).ok_or_else(|| bad("unparsable shape"))?;
        if dtype != "f64" {
            return Err(bad("unsupported dtype"));
        }
        let frozen: bool = frozen.parse().map_err(|_| bad("frozen must be true/false"))?;
        let stage: u8 = stage.parse().map_err(|_| bad("unparsable stage"))?;
        let file = array_path(dir, name);
        let bytes = fs::read(&file).map_err(|e| Error::CheckpointCorrupt(format!("array `{name}`: {e}")))?;
        let tensor = decode_array(&bytes).ok_or_else(|| Error::CheckpointCorrupt(format!("array `{name}` is malformed")))?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::CheckpointCorrupt(format!(
                "array `{name}` has shape {:?} but manifest declares {shape:?}",
                tensor.shape()
            )));
        }
        if arrays.insert(name.to_string(), ArrayEntry { tensor, frozen, stage_of_origin: stage }).is_some() {
            return Err(bad("duplicate name"));
        }
    }
    let config_text = fs::read_to_string(dir.join("config.toml"))
        .map_err(|e| Error::CheckpointCorrupt(format!("config snapshot: {e}")))?;
    let config = RunConfig::from_toml_str(&config_text)
        .map_err(|e| Error::CheckpointCorrupt(format!("config snapshot: {e}")))?;
    let rng_state = fs::read(dir.join("rng_state.bin")).map_err(|e| Error::CheckpointCorrupt(format!("rng state: {e}")))?;
    Ok(CheckpointBundle { arrays, config, rng_state })
}

/// Accepts either a checkpoint directory or a run directory containing one
/// under `checkpoint/`.
pub fn resolve_checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join("checkpoint");
    if !path.join("manifest.csv").exists() && nested.join("manifest.csv").exists() {
        nested
    } else {
        path.to_path_buf()
    }
}
