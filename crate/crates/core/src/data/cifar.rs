//! CIFAR-10/100 binary format.
//!
//! Each record is one label byte (two for CIFAR-100: coarse then fine)
//! followed by 3x32x32 channel-planar pixel bytes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarKind {
    Cifar10,
    Cifar100,
}

impl CifarKind {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 1,
            CifarKind::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn classes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 10,
            CifarKind::Cifar100 => 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Decoded images kept as raw bytes; converted to tensors per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CifarData {
    pub kind: CifarKind,
    /// `len() * PIXELS` bytes, channel-planar per image.
    pub pixels: Vec<u8>,
    /// Fine labels.
    pub labels: Vec<u8>,
    /// CIFAR-100 coarse labels; empty for CIFAR-10.
    pub coarse: Vec<u8>,
}

impl CifarData {
    pub fn empty(kind: CifarKind) -> Self {
        CifarData {
            kind,
            pixels: Vec::new(),
            labels: Vec::new(),
            coarse: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn append(&mut self, other: CifarData) {
        self.pixels.extend(other.pixels);
        self.labels.extend(other.labels);
        self.coarse.extend(other.coarse);
    }
}

/// Parses an in-memory file. `path` only labels errors.
pub fn parse(bytes: &[u8], kind: CifarKind, path: &Path) -> Result<CifarData> {
    let rec = kind.record_len();
    let whole = bytes.len() / rec * rec;
    if whole != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: whole as u64,
            message: format!(
                "truncated record: {} trailing bytes, records are {rec} bytes",
                bytes.len() - whole
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut data = CifarData::empty(kind);
    data.pixels.reserve(n * PIXELS);
    data.labels.reserve(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let fine = r[kind.label_bytes() - 1];
        if fine as usize >= kind.classes() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (i * rec + kind.label_bytes() - 1) as u64,
                message: format!("label {fine} out of range for {} classes", kind.classes()),
            });
        }
        if kind == CifarKind::Cifar100 {
            data.coarse.push(r[0]);
        }
        data.labels.push(fine);
        data.pixels.extend_from_slice(&r[kind.label_bytes()..]);
    }
    Ok(data)
}

/// Serializes back to the binary format; inverse of [`parse`].
pub fn serialize(data: &CifarData) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * data.kind.record_len());
    for i in 0..data.len() {
        if data.kind == CifarKind::Cifar100 {
            out.push(data.coarse[i]);
        }
        out.push(data.labels[i]);
        out.extend_from_slice(data.image(i));
    }
    out
}

pub fn read_file(path: &Path, kind: CifarKind) -> Result<CifarData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes, kind, path)
}

pub fn write_file(path: &Path, data: &CifarData) -> Result<()> {
    fs::write(path, serialize(data)).map_err(|e| Error::io(path, e))
}

pub fn file_names(kind: CifarKind, split: Split) -> Vec<String> {
    match (kind, split) {
        (CifarKind::Cifar10, Split::Train) => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        (CifarKind::Cifar10, Split::Test) => vec!["test_batch.bin".into()],
        (CifarKind::Cifar100, Split::Train) => vec!["train.bin".into()],
        (CifarKind::Cifar100, Split::Test) => vec!["test.bin".into()],
    }
}

/// Resolves the split's files under `root` or the archive's usual subdirectory.
pub fn locate(root: &Path, kind: CifarKind, split: Split) -> Result<Vec<PathBuf>> {
    let sub = match kind {
        CifarKind::Cifar10 => "cifar-10-batches-bin",
        CifarKind::Cifar100 => "cifar-100-binary",
    };
    let names = file_names(kind, split);
    for dir in [root.to_path_buf(), root.join(sub)] {
        let paths: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).collect();
        if paths.iter().all(|p| p.is_file()) {
            return Ok(paths);
        }
    }
    Err(Error::Io {
        path: root.join(&names[0]),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "CIFAR split files not found"),
    })
}

pub fn load(root: &Path, kind: CifarKind, split: Split) -> Result<CifarData> {
    let mut data = CifarData::empty(kind);
    for path in locate(root, kind, split)? {
        data.append(read_file(&path, kind)?);
    }
    Ok(data)
}
