//! Plain-text `key=value` manifests and raw `f64` blobs shared by the
//! backbone and prompt checkpoints.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// Ordered key-value document. Keys keep insertion order on write.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::data(format!("manifest is missing key '{key}'")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::data(format!("manifest key '{key}' has invalid value '{raw}'")))
    }

    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::data(format!("manifest line {}: expected key=value", i + 1)))?;
            let k = k.trim().to_string();
            if seen.insert(k.clone(), ()).is_some() {
                return Err(Error::data(format!("manifest line {}: duplicate key '{k}'", i + 1)));
            }
            entries.push((k, v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `name.f64` under `dir` and records shape and digest in `manifest`.
pub fn write_blob(dir: &Path, manifest: &mut Manifest, name: &str, m: &Matrix) -> Result<()> {
    let bytes = m.to_le_bytes();
    fs::write(dir.join(format!("{name}.f64")), &bytes)?;
    manifest.set(
        format!("blob.{name}"),
        format!("{}x{} {}", m.rows(), m.cols(), sha256_hex(&bytes)),
    );
    Ok(())
}

/// Reads a blob written by [`write_blob`], checking shape and digest.
pub fn read_blob(dir: &Path, manifest: &Manifest, name: &str) -> Result<Matrix> {
    let entry = manifest.require(&format!("blob.{name}"))?;
    let (shape, digest) = entry
        .split_once(' ')
        .ok_or_else(|| Error::data(format!("malformed blob entry for '{name}'")))?;
    let (r, c) = shape
        .split_once('x')
        .and_then(|(r, c)| Some((r.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
        .ok_or_else(|| Error::data(format!("malformed blob shape for '{name}'")))?;
    let bytes = fs::read(dir.join(format!("{name}.f64")))?;
    if sha256_hex(&bytes) != digest {
        return Err(Error::data(format!("content hash mismatch for blob '{name}'")));
    }
    Matrix::from_le_bytes(r, c, &bytes)
}

pub fn render_flags(flags: impl IntoIterator<Item = bool>) -> String {
    flags
        .into_iter()
        .map(|f| if f { "1" } else { "0" })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_flags(raw: &str) -> Result<Vec<bool>> {
    raw.split_whitespace()
        .map(|t| match t {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(Error::data(format!("mask entry '{other}' is not 0 or 1"))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_text_round_trip() {
        let mut m = Manifest::new();
        m.set("a", 1);
        m.set("b.c", "x y");
        m.set("a", 2);
        let back = Manifest::from_text(&m.render()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.parse::<u32>("a").unwrap(), 2);
        assert!(Manifest::from_text("a=1\na=2\n").is_err());
    }

    #[test]
    fn blob_digest_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let mut man = Manifest::new();
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_blob(dir.path(), &mut man, "w", &m).unwrap();
        assert_eq!(read_blob(dir.path(), &man, "w").unwrap(), m);
        fs::write(dir.path().join("w.f64"), [0u8; 32]).unwrap();
        assert!(matches!(read_blob(dir.path(), &man, "w"), Err(Error::Data(_))));
    }
}
