//! Binary feature, label and neighbor-graph files.
//!
//! ```text
//! features: "FCTF" | version u32 | N u64 | D u32 | N·D f32
//! labels:   "FCTL" | version u32 | N u64 | N i64 (-1 = unlabeled)
//! graph:    "FCTG" | version u32 | N u64 | hop1 u32 | hop2 u32 | N·hop1 × (index u32, similarity f32)
//! ```
//! Everything is little-endian. Headers are validated before any payload
//! is read.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{LinkError, Result};
use crate::graph::{FeatureStore, Neighbor, NeighborGraph, NORM_WARN_TOLERANCE};

pub const FEATURE_MAGIC: &[u8; 4] = b"FCTF";
pub const LABEL_MAGIC: &[u8; 4] = b"FCTL";
pub const GRAPH_MAGIC: &[u8; 4] = b"FCTG";
pub const FORMAT_VERSION: u32 = 1;

struct Header<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Header<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| LinkError::format(self.pos, format!("file ends inside the {what} field")))?;
        self.pos += N as u64;
        Ok(buf)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.bytes::<4>("magic")?;
        if &got != want {
            return Err(LinkError::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&got),
                    String::from_utf8_lossy(want)
                ),
            ));
        }
        let version = u32::from_le_bytes(self.bytes("version")?);
        if version != FORMAT_VERSION {
            return Err(LinkError::format(4, format!("unsupported format version {version}")));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    /// Read the rest of the stream and require exactly `expected` bytes.
    fn payload(mut self, expected: u64) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.inner
            .read_to_end(&mut buf)
            .map_err(|e| LinkError::format(self.pos, format!("read failed: {e}")))?;
        if buf.len() as u64 != expected {
            return Err(LinkError::format(
                self.pos + (buf.len() as u64).min(expected),
                format!("payload holds {} bytes, expected {expected}", buf.len()),
            ));
        }
        Ok(buf)
    }
}

fn open(path: &Path) -> Result<Header<BufReader<File>>> {
    let file = File::open(path).map_err(|e| LinkError::io(path, e))?;
    Ok(Header {
        inner: BufReader::new(file),
        pos: 0,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| LinkError::io(path, e))
}

fn overflow(at: u64) -> LinkError {
    LinkError::format(at, "declared payload size overflows")
}

pub fn read_features<R: Read>(reader: R) -> Result<FeatureStore> {
    let mut h = Header { inner: reader, pos: 0 };
    h.magic(FEATURE_MAGIC)?;
    let n = h.u64("N")?;
    let d = h.u32("D")? as u64;
    let bytes = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .filter(|&b| usize::try_from(b).is_ok())
        .ok_or_else(|| overflow(8))?;
    let buf = h.payload(bytes)?;
    let data = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let (store, worst) = FeatureStore::from_raw(n as usize, d as usize, data, None)?;
    if worst > NORM_WARN_TOLERANCE {
        log::warn!("feature rows renormalized on load (max |norm - 1| = {worst:.3e})");
    }
    Ok(store)
}

pub fn write_features<W: Write>(mut w: W, store: &FeatureStore) -> std::io::Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    w.write_all(&(store.dim() as u32).to_le_bytes())?;
    for &v in store.features() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_labels<R: Read>(reader: R) -> Result<Vec<i64>> {
    let mut h = Header { inner: reader, pos: 0 };
    h.magic(LABEL_MAGIC)?;
    let n = h.u64("N")?;
    let bytes = n
        .checked_mul(8)
        .filter(|&b| usize::try_from(b).is_ok())
        .ok_or_else(|| overflow(8))?;
    let buf = h.payload(bytes)?;
    Ok(buf
        .chunks_exact(8)
        .map(|b| i64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect())
}

pub fn write_labels<W: Write>(mut w: W, labels: &[i64]) -> std::io::Result<()> {
    w.write_all(LABEL_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(labels.len() as u64).to_le_bytes())?;
    for &l in labels {
        w.write_all(&l.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_graph<R: Read>(reader: R) -> Result<NeighborGraph> {
    let mut h = Header { inner: reader, pos: 0 };
    h.magic(GRAPH_MAGIC)?;
    let n = h.u64("N")?;
    let hop1 = h.u32("hop1")? as u64;
    let hop2 = h.u32("hop2")? as usize;
    let bytes = n
        .checked_mul(hop1)
        .and_then(|c| c.checked_mul(8))
        .filter(|&b| usize::try_from(b).is_ok())
        .ok_or_else(|| overflow(8))?;
    let buf = h.payload(bytes)?;
    let lists = buf
        .chunks_exact(8)
        .map(|b| Neighbor {
            index: u32::from_le_bytes([b[0], b[1], b[2], b[3]]),
            similarity: f32::from_le_bytes([b[4], b[5], b[6], b[7]]),
        })
        .collect();
    NeighborGraph::from_lists(n as usize, hop1 as usize, hop2, lists)
}

pub fn write_graph<W: Write>(mut w: W, graph: &NeighborGraph) -> std::io::Result<()> {
    w.write_all(GRAPH_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(graph.len() as u64).to_le_bytes())?;
    w.write_all(&(graph.hop1_size() as u32).to_le_bytes())?;
    w.write_all(&(graph.hop2_size() as u32).to_le_bytes())?;
    for nb in graph.raw_lists() {
        w.write_all(&nb.index.to_le_bytes())?;
        w.write_all(&nb.similarity.to_le_bytes())?;
    }
    w.flush()
}

/// Load features, attaching labels when a label path is given.
pub fn load_features(path: &Path, labels: Option<&Path>) -> Result<FeatureStore> {
    let mut store = read_features(open(path)?.inner)?;
    if let Some(lp) = labels {
        let l = load_labels(lp)?;
        if l.len() != store.len() {
            return Err(LinkError::format(
                8,
                format!("{} labels for {} features", l.len(), store.len()),
            ));
        }
        store.set_labels(l)?;
    }
    Ok(store)
}

pub fn save_features(store: &FeatureStore, path: &Path, labels: Option<&Path>) -> Result<()> {
    write_features(create(path)?, store).map_err(|e| LinkError::io(path, e))?;
    if let Some(lp) = labels {
        let l = store.require_labels("writing a label file")?;
        write_labels(create(lp)?, l).map_err(|e| LinkError::io(lp, e))?;
    }
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<Vec<i64>> {
    read_labels(open(path)?.inner)
}

pub fn load_graph(path: &Path) -> Result<NeighborGraph> {
    read_graph(open(path)?.inner)
}

pub fn save_graph(graph: &NeighborGraph, path: &Path) -> Result<()> {
    write_graph(create(path)?, graph).map_err(|e| LinkError::io(path, e))
}
