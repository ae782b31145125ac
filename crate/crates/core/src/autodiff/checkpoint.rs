//! Binary checkpoint plus a JSON sidecar manifest.
//!
//! Layout of the binary file (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "TFGRPOCK"
//! version  u32
//! act      u8       0 = tanh, 1 = silu
//! freqs    u32      time-embedding frequencies
//! nlayers  u32      number of entries in the size list
//! sizes    u32 * nlayers
//! payload  f64 LE, entries in declaration order
//! ```
//!
//! The manifest (`<file>.manifest.json`) lists each entry's name, shape and
//! byte offset into the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::network::{Activation, Network};
use super::params::{ParamEntry, ParamSet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TFGRPOCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub state_dim: usize,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub time_freqs: usize,
    pub entries: Vec<ManifestEntry>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn header_bytes(net: &Network) -> Vec<u8> {
    let sizes = net.layer_sizes();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(net.activation.code());
    out.extend_from_slice(&(net.time_freqs as u32).to_le_bytes());
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for s in sizes {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    out
}

/// Writes the checkpoint and its manifest. Returns both paths.
pub fn save_checkpoint(path: &Path, net: &Network, params: &ParamSet) -> Result<(PathBuf, PathBuf)> {
    net.check_params(params)?;
    let mut bytes = header_bytes(net);
    let mut entries = Vec::new();
    for e in params.entries() {
        let offset = bytes.len();
        for v in &e.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            offset,
            bytes: e.values.len() * 8,
        });
    }
    let manifest = CheckpointManifest {
        version: VERSION,
        state_dim: net.state_dim,
        layer_sizes: net.layer_sizes(),
        activation: net.activation,
        time_freqs: net.time_freqs,
        entries,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok((path.to_path_buf(), mpath))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Load("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Loads a checkpoint, reconstructing its network description.
pub fn load_checkpoint(path: &Path) -> Result<(Network, ParamSet)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let mtext = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&mtext).map_err(|e| Error::Load(format!("manifest: {e}")))?;

    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Load("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Load(format!("unsupported version {version}")));
    }
    let act = Activation::from_code(r.take(1)?[0]).ok_or_else(|| Error::Load("unknown activation code".into()))?;
    let time_freqs = r.u32()? as usize;
    let n = r.u32()? as usize;
    let sizes = (0..n)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    if sizes.len() < 3 {
        return Err(Error::Load("layer size list too short".into()));
    }
    let state_dim = *sizes.last().unwrap();
    let hidden = sizes[1..sizes.len() - 1].to_vec();
    let net = Network::new(state_dim, hidden, act, time_freqs).map_err(|e| Error::Load(e.to_string()))?;
    if net.layer_sizes() != sizes
        || manifest.layer_sizes != sizes
        || manifest.activation != act
        || manifest.time_freqs != time_freqs
    {
        return Err(Error::Load("header and manifest disagree".into()));
    }

    let layout = net.param_layout();
    if layout.len() != manifest.entries.len() {
        return Err(Error::Load("manifest entry count mismatch".into()));
    }
    let mut entries = Vec::new();
    for ((name, shape), me) in layout.into_iter().zip(&manifest.entries) {
        if me.name != name || me.shape != shape || me.offset != r.pos {
            return Err(Error::Load(format!(
                "manifest entry `{}` does not match layout",
                me.name
            )));
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(ParamEntry { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::Load("trailing bytes after payload".into()));
    }
    let params = ParamSet::new(entries).map_err(|e| Error::Load(e.to_string()))?;
    Ok((net, params))
}

/// Loads and verifies the checkpoint matches an expected network.
pub fn load_for(path: &Path, expected: &Network) -> Result<ParamSet> {
    let (net, params) = load_checkpoint(path)?;
    if &net != expected {
        return Err(Error::Load(format!(
            "checkpoint network {:?} incompatible with configured {:?}",
            net.layer_sizes(),
            expected.layer_sizes()
        )));
    }
    Ok(params)
}
