//! Binary checkpoints.
//!
//! Layout, little-endian: magic `DMCK`, u32 version, u32 config length and
//! the UTF-8 `key = value` model description, u32 array count, then per
//! array a u32 name length, the name, u32 rank, u32 dims and f64 values.
//! A readable `.txt` summary is written next to every checkpoint.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{model_from_text, model_to_text};
use crate::error::{Error, Result};
use crate::model::{Model, SurvivalHead};
use crate::NumArray;

pub const CKPT_MAGIC: [u8; 4] = *b"DMCK";
pub const CKPT_VERSION: u32 = 1;

pub fn encode(model: &Model) -> Vec<u8> {
    let cfg = model_to_text(&model.config, model.survival.as_ref().map(|s| s.boundaries()));
    let named = model.params.named();
    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, a) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
        for &d in a.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in a.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(k).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::Truncated { expected: self.pos.saturating_add(k), actual: self.bytes.len() })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn str(&mut self, k: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(k)?).map_err(|_| Error::Corrupt("non-UTF-8 text".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 {
        return Err(Error::Truncated { expected: 8, actual: bytes.len() });
    }
    if bytes[..4] != CKPT_MAGIC {
        return Err(Error::BadMagic { expected: CKPT_MAGIC, found: bytes[..4].try_into().expect("four bytes") });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch { expected: CKPT_VERSION, found: version });
    }
    let len = r.u32()? as usize;
    let (config, bounds) = model_from_text(r.str(len)?).map_err(|e| Error::Corrupt(format!("embedded config: {e}")))?;
    // Seed 0 only fixes shapes; every value is overwritten below.
    let mut model = Model::new(config, 0)?;
    if let Some(b) = bounds {
        model = model.with_survival(SurvivalHead::new(b)?).map_err(|e| Error::Corrupt(e.to_string()))?;
    }
    let expected: Vec<(String, Vec<usize>)> =
        model.params.named().into_iter().map(|(n, a)| (n, a.shape().to_vec())).collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Corrupt(format!("{count} arrays, configuration implies {}", expected.len())));
    }
    let mut slots = model.params.values_mut();
    for ((name, shape), slot) in expected.iter().zip(slots.iter_mut()) {
        let nlen = r.u32()? as usize;
        let found = r.str(nlen)?;
        if found != name {
            return Err(Error::Corrupt(format!("expected array {name}, found {found}")));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::Corrupt(format!("{name}: shape {dims:?}, expected {shape:?}")));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect();
        **slot = NumArray::from_parts(dims, data);
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

/// Readable companion path: `fold0.ckpt` becomes `fold0.txt`.
pub fn summary_path(path: &Path) -> PathBuf {
    path.with_extension("txt")
}

pub fn summary(model: &Model) -> String {
    let mut s = model_to_text(&model.config, model.survival.as_ref().map(|s| s.boundaries()));
    let _ = writeln!(s, "\n# name\tshape\tfrobenius");
    for (name, a) in model.params.named() {
        let _ = writeln!(s, "{name}\t{:?}\t{:.6e}", a.shape(), a.frobenius());
    }
    let _ = writeln!(s, "# scalars {}  checksum {:016x}", model.params.n_scalars(), model.params.checksum());
    s
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))?;
    let txt = summary_path(path);
    fs::write(&txt, summary(model)).map_err(|e| Error::io(txt, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingCheckpoint(path.into())),
        Err(e) => return Err(Error::io(path, e)),
    };
    decode(&bytes)
}
