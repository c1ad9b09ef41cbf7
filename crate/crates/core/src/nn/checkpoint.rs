//! Binary checkpoints: a manifest of named tensors followed by raw data.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ASLCKPT1"
//! u32 entry count
//! per entry: u32 name length, name bytes, u8 dtype tag, u32 rank, rank x u64 dims
//! entry data in manifest order, elements little-endian
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::graph::Graph;
use crate::nn::optim::Sgd;
use crate::tensor::{DType, Element};

pub const MAGIC: &[u8; 8] = b"ASLCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Raw little-endian bytes.
    pub bytes: Vec<u8>,
}

impl Entry {
    pub fn from_values<T: Element>(name: String, shape: Vec<usize>, values: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * T::DTYPE.size_of());
        for &v in values {
            v.write_le(&mut bytes);
        }
        Entry {
            name,
            dtype: T::DTYPE,
            shape,
            bytes,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values<T: Element>(&self) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{}: stored as {}, expected {}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        Ok(self
            .bytes
            .chunks_exact(T::DTYPE.size_of())
            .map(T::read_le)
            .collect())
    }
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dtype.tag());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for e in entries {
        out.extend_from_slice(&e.bytes);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype tag {tag}")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        entries.push(Entry {
            name,
            dtype,
            shape,
            bytes: Vec::new(),
        });
    }
    for e in &mut entries {
        let n = e
            .len()
            .checked_mul(e.dtype.size_of())
            .ok_or_else(|| Error::Checkpoint(format!("{}: size overflow", e.name)))?;
        e.bytes = r.take(n)?.to_vec();
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after data",
            buf.len() - r.pos
        )));
    }
    Ok(entries)
}

/// Everything needed to resume training.
pub fn snapshot<T: Element>(graph: &Graph<T>, opt: Option<&Sgd<T>>, iteration: u64) -> Vec<Entry> {
    let mut entries = Vec::new();
    for (name, p) in graph.named_params() {
        entries.push(Entry::from_values(format!("param/{name}"), p.shape.clone(), &p.value));
    }
    for (name, b) in graph.named_buffers() {
        entries.push(Entry::from_values(format!("buffer/{name}"), b.shape.clone(), &b.value));
    }
    if let Some(opt) = opt {
        for ((name, p), v) in graph.named_params().into_iter().zip(opt.velocities()) {
            entries.push(Entry::from_values(format!("velocity/{name}"), p.shape.clone(), v));
        }
    }
    entries.push(Entry::from_values("meta/iteration".into(), vec![1], &[iteration as f64]));
    entries
}

pub fn save<T: Element>(path: &Path, graph: &Graph<T>, opt: Option<&Sgd<T>>, iteration: u64) -> Result<()> {
    let bytes = encode(&snapshot(graph, opt, iteration));
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn find<'a>(entries: &'a [Entry], name: &str, shape: &[usize]) -> Result<&'a Entry> {
    let e = entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?;
    if e.shape != shape {
        return Err(Error::Checkpoint(format!(
            "{name}: stored shape {:?}, model expects {:?}",
            e.shape, shape
        )));
    }
    Ok(e)
}

/// Restores parameters, buffers and (optionally) optimizer state.
///
/// Returns the stored iteration. Nothing is modified unless every entry matches.
pub fn restore<T: Element>(entries: &[Entry], graph: &mut Graph<T>, opt: Option<&mut Sgd<T>>) -> Result<u64> {
    let mut params = Vec::new();
    for (name, p) in graph.named_params() {
        params.push(find(entries, &format!("param/{name}"), &p.shape)?.values::<T>()?);
    }
    let mut buffers = Vec::new();
    for (name, b) in graph.named_buffers() {
        buffers.push(find(entries, &format!("buffer/{name}"), &b.shape)?.values::<T>()?);
    }
    let mut velocities = Vec::new();
    if opt.is_some() {
        for (name, p) in graph.named_params() {
            velocities.push(find(entries, &format!("velocity/{name}"), &p.shape)?.values::<T>()?);
        }
    }
    // Optimizer state is ignored when only the model is restored.
    let stored = if opt.is_some() {
        entries.len()
    } else {
        entries.iter().filter(|e| !e.name.starts_with("velocity/")).count()
    };
    let expected = params.len() + buffers.len() + velocities.len() + 1;
    if stored != expected {
        let known = graph.named_params().len() + graph.named_buffers().len();
        return Err(Error::Checkpoint(format!(
            "checkpoint has {stored} entries, model has {known} tensors"
        )));
    }
    let iteration = find(entries, "meta/iteration", &[1])?.values::<f64>()?[0] as u64;

    for (p, v) in graph.params_mut().zip(params) {
        p.value = v;
    }
    for (b, v) in graph.buffers_mut().zip(buffers) {
        b.value = v;
    }
    if let Some(opt) = opt {
        for (dst, v) in opt.velocities_mut().iter_mut().zip(velocities) {
            *dst = v;
        }
    }
    Ok(iteration)
}

pub fn load<T: Element>(path: &Path, graph: &mut Graph<T>, opt: Option<&mut Sgd<T>>) -> Result<u64> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(&decode(&bytes)?, graph, opt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_roundtrip() {
        let entries = vec![
            Entry::from_values("a".into(), vec![2, 3], &[1.0f32, 2.0, 3.0, 4.0, 5.0, -6.5]),
            Entry::from_values("b/c".into(), vec![1], &[std::f64::consts::PI]),
        ];
        let bytes = encode(&entries);
        assert_eq!(&bytes[..8], MAGIC);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, entries);
        assert_eq!(back[1].values::<f64>().unwrap(), vec![std::f64::consts::PI]);
    }

    #[test]
    fn decode_rejects_damage() {
        let bytes = encode(&[Entry::from_values("a".into(), vec![4], &[1.0f32; 4])]);
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Checkpoint(_))));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn dtype_mismatch() {
        let e = Entry::from_values("a".into(), vec![1], &[1.0f32]);
        assert!(matches!(e.values::<f64>(), Err(Error::Checkpoint(_))));
    }
}
