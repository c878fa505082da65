//! On-disk formats: "IDK1" tensor blobs, named tensor archives for
//! checkpoints, and dataset directories.
//!
//! Tensor blob layout (little-endian throughout):
//!
//! ```text
//! magic   4 bytes  "IDK1"
//! dtype   1 byte   1 = f32, 2 = f64
//! ndim    1 byte
//! dims    ndim x u32
//! payload raw values, little-endian
//! ```
//!
//! A tensor *archive* is a sequence of `(u32 name length, name bytes, blob)`
//! entries, one per named parameter. Dataset directories hold one blob plus
//! one annotation text file ("x y w h c" per line) per image, a key=value
//! manifest and a sha256 checksum list.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IDK1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

fn err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Archive {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor, dtype: Dtype) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[dtype as u8, t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match dtype {
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read, path: &Path) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if &magic != MAGIC {
        return Err(err(path, "bad magic bytes"));
    }
    let mut hdr = [0u8; 2];
    r.read_exact(&mut hdr)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let dtype = match hdr[0] {
        1 => Dtype::F32,
        2 => Dtype::F64,
        other => return Err(err(path, format!("unknown dtype tag {other}"))),
    };
    let ndim = hdr[1] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match dtype {
        Dtype::F32 => {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            for c in buf.chunks_exact(4) {
                data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
        Dtype::F64 => {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            for c in buf.chunks_exact(8) {
                data.push(f64::from_le_bytes([
                    c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                ]));
            }
        }
    }
    Ok(Tensor::from_vec(&shape, data))
}

pub fn write_tensor_file(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t, dtype).map_err(|e| Error::io(path.display().to_string(), e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_tensor(&mut bytes.as_slice(), path)
}

/// Write a named tensor archive. Entries keep insertion order.
pub fn write_archive(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    for (name, tensor) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_tensor(&mut buf, tensor, Dtype::F64)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_archive(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cursor = bytes.as_slice();
    let mut out = BTreeMap::new();
    while !cursor.is_empty() {
        let mut len = [0u8; 4];
        cursor
            .read_exact(&mut len)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let len = u32::from_le_bytes(len) as usize;
        let mut name = vec![0u8; len];
        cursor
            .read_exact(&mut name)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let name = String::from_utf8(name).map_err(|_| err(path, "non-utf8 entry name"))?;
        let tensor = read_tensor(&mut cursor, path)?;
        out.insert(name, tensor);
    }
    Ok(out)
}

/// Plain-text key=value manifest (one per dataset or checkpoint directory).
pub fn write_manifest(path: &Path, pairs: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in pairs {
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(err(path, format!("manifest line without '=': {line:?}")));
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Write `checksums.txt` ("<hex> <filename>" per line) for the given files
/// inside `dir`.
pub fn write_checksums(dir: &Path, files: &[String]) -> Result<()> {
    let mut text = String::new();
    for f in files {
        let bytes =
            std::fs::read(dir.join(f)).map_err(|e| Error::io(dir.join(f).display().to_string(), e))?;
        text.push_str(&sha256_hex(&bytes));
        text.push(' ');
        text.push_str(f);
        text.push('\n');
    }
    std::fs::write(dir.join("checksums.txt"), text)
        .map_err(|e| Error::io(dir.join("checksums.txt").display().to_string(), e))
}

/// Verify every file listed in `checksums.txt`; the first mismatch is
/// reported with the offending file name.
pub fn verify_checksums(dir: &Path) -> Result<()> {
    let list_path = dir.join("checksums.txt");
    let text = std::fs::read_to_string(&list_path)
        .map_err(|e| Error::io(list_path.display().to_string(), e))?;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((hex, file)) = line.split_once(' ') else {
            return Err(err(&list_path, format!("malformed checksum line {line:?}")));
        };
        let bytes = std::fs::read(dir.join(file))
            .map_err(|e| Error::io(dir.join(file).display().to_string(), e))?;
        if sha256_hex(&bytes) != hex {
            return Err(Error::ChecksumMismatch {
                file: dir.join(file).display().to_string(),
            });
        }
    }
    Ok(())
}
