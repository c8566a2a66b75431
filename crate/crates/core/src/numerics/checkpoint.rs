//! Parameter archive: a flat binary file of `name → shape + little-endian f32`
//! entries, paired with a plain-text `key = value` manifest.
//!
//! Archive layout:
//!
//! ```text
//! magic   "RLRLCKP1"
//! u32     entry count
//! repeat: u32 name length, name bytes (UTF-8), u32 rank, rank × u32 dims, values × f32
//! ```
//!
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::params::ParameterStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RLRLCKP1";

pub const ARCHIVE_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn encode_archive(store: &ParameterStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_values() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for d in &p.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("truncated archive at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<ParameterStore<f32>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let count = cur.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::Format(format!("parameter name: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let size: usize = shape.iter().product();
        let values = cur
            .take(size * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store.insert(&name, shape, values)?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }
    Ok(store)
}

/// Ordered `key = value` text file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest(pub BTreeMap<String, String>);

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line {}: missing '='", i + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }
}

/// Writes `params.bin` and `manifest.txt` (with `step_count`) into `dir`.
pub fn save_checkpoint(dir: &Path, store: &ParameterStore<f32>, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = manifest.clone();
    manifest.set("step_count", store.step_count);
    fs::File::create(dir.join(ARCHIVE_FILE))?.write_all(&encode_archive(store))?;
    fs::write(dir.join(MANIFEST_FILE), manifest.render())?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParameterStore<f32>, Manifest)> {
    let mut bytes = Vec::new();
    fs::File::open(dir.join(ARCHIVE_FILE))?.read_to_end(&mut bytes)?;
    let mut store = decode_archive(&bytes)?;
    let manifest = Manifest::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if let Some(steps) = manifest.get("step_count") {
        store.step_count = steps
            .parse()
            .map_err(|e| Error::Format(format!("step_count: {e}")))?;
    }
    Ok((store, manifest))
}
