//! Index file format, little-endian throughout:
//!
//! ```text
//! header   "GIVF" u32 version, u32 flags (bit 0 grouping, bit 1 rotation),
//!          u32 D, u32 K, u32 M, u32 L, u64 points, u64 dataset hash,
//!          u32 max_links, u32 entry point, f32 const lo, f32 const hi
//! coarse   K × D f32
//! rotation D × D f32                      (flag bit 1 only)
//! pq       M × 256 × (D/M) f32
//! graph    per node: u32 layers, per layer u32 degree + degree × u32
//! regions  per region: u32 size, L × u32 neighbor ids, f32 alpha,
//!          L × f32 norm terms, L × u32 group sizes,
//!          size × (u32 id, M code bytes, 1 const byte)
//! trailer  u64 checksum (first 8 bytes of SHA-256 over everything before)
//! ```
//!
//! `L` is 0 when grouping is off, so the per-region lists vanish.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ConstQuantizer, GroupedIndex, GroupedRegion};
use crate::error::{Error, Result};
use crate::graph::ProximityGraph;
use crate::kmeans::CoarseCodebook;
use crate::pq::{PqCodebook, CODEBOOK_SIZE};
use crate::vectors::VectorSet;

pub const MAGIC: &[u8; 4] = b"GIVF";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_GROUPING: u32 = 1;
const FLAG_ROTATION: u32 = 2;

pub(crate) const HEADER_BYTES: usize = 4 + 4 * 6 + 8 * 2 + 4 * 4;

fn checksum(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(Sha256::digest(bytes)[..8].try_into().unwrap())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for &v in vs {
            self.f32(v);
        }
    }
}

pub fn encode_index(index: &GroupedIndex) -> Vec<u8> {
    let dim = index.dim();
    let m = index.m();
    let l = index.l;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    let mut flags = 0;
    if index.grouping {
        flags |= FLAG_GROUPING;
    }
    if index.pq.rotation().is_some() {
        flags |= FLAG_ROTATION;
    }
    w.u32(flags);
    w.u32(dim as u32);
    w.u32(index.k() as u32);
    w.u32(m as u32);
    w.u32(l as u32);
    w.u64(index.point_count as u64);
    w.u64(index.dataset_hash);
    w.u32(index.graph.max_links() as u32);
    w.u32(index.graph.entry_point());
    w.f32(index.constq.lo());
    w.f32(index.constq.hi());
    debug_assert_eq!(w.0.len(), HEADER_BYTES);

    w.f32s(index.coarse.centroids().as_slice());
    if let Some(r) = index.pq.rotation() {
        w.f32s(r);
    }
    w.f32s(index.pq.codewords());

    for node in 0..index.graph.node_count() {
        let layers = index.graph.node_links(node);
        w.u32(layers.len() as u32);
        for adj in layers {
            w.u32(adj.len() as u32);
            for &t in adj {
                w.u32(t);
            }
        }
    }

    for reg in &index.regions {
        w.u32(reg.ids.len() as u32);
        for &id in &reg.neighbor_ids {
            w.u32(id);
        }
        w.f32(reg.alpha);
        w.f32s(&reg.norm_terms);
        if l > 0 {
            for s in reg.group_sizes() {
                w.u32(s);
            }
        }
        for pos in 0..reg.ids.len() {
            w.u32(reg.ids[pos]);
            w.0.extend_from_slice(reg.code(pos, m));
            w.0.push(reg.consts[pos]);
        }
    }
    let sum = checksum(&w.0);
    w.u64(sum);
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("unexpected end of data reading {n} bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn bounded(&self, count: u64, unit: usize, what: &str) -> Result<usize> {
        let remaining = (self.bytes.len() - self.pos) as u64;
        if count.saturating_mul(unit as u64) > remaining {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("{what} count {count} exceeds remaining data"),
            });
        }
        Ok(count as usize)
    }
}

pub fn decode_index(bytes: &[u8]) -> Result<GroupedIndex> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < HEADER_BYTES + 8 {
        return Err(Error::ChecksumMismatch {
            stored: 0,
            computed: checksum(bytes),
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    let computed = checksum(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 8 };
    let flags = r.u32()?;
    let dim = r.u32()? as usize;
    let k = r.u32()? as usize;
    let m = r.u32()? as usize;
    let l = r.u32()? as usize;
    let point_count = r.u64()? as usize;
    let dataset_hash = r.u64()?;
    let max_links = r.u32()? as usize;
    let entry_point = r.u32()?;
    let lo = r.f32()?;
    let hi = r.f32()?;
    let grouping = flags & FLAG_GROUPING != 0;
    if dim == 0 || m == 0 || dim % m != 0 || k == 0 || (grouping != (l > 0)) {
        return Err(Error::Format {
            offset: 8,
            message: format!("inconsistent header: D={dim} K={k} M={m} L={l} flags={flags:#x}"),
        });
    }

    let n = r.bounded((k * dim) as u64, 4, "centroid")?;
    let coarse = CoarseCodebook::new(VectorSet::new(dim, r.f32s(n)?)?)?;
    let rotation = if flags & FLAG_ROTATION != 0 {
        let n = r.bounded((dim * dim) as u64, 4, "rotation")?;
        Some(r.f32s(n)?)
    } else {
        None
    };
    let n = r.bounded((dim * CODEBOOK_SIZE) as u64, 4, "codeword")?;
    let pq = PqCodebook::from_parts(dim, m, r.f32s(n)?, rotation)?;

    let mut links = Vec::with_capacity(k);
    for _ in 0..k {
        let layers = r.u32()? as u64;
        let layers = r.bounded(layers, 4, "layer")?;
        let mut node = Vec::with_capacity(layers);
        for _ in 0..layers {
            let deg = r.u32()? as u64;
            let deg = r.bounded(deg, 4, "link")?;
            node.push(r.u32s(deg)?);
        }
        links.push(node);
    }
    let graph = ProximityGraph::from_parts(max_links, entry_point, links)?;

    let mut regions = Vec::with_capacity(k);
    let mut total = 0usize;
    for _ in 0..k {
        let size = r.u32()? as u64;
        let size = r.bounded(size, 4 + m + 1, "code")?;
        let neighbor_ids = r.u32s(l)?;
        let alpha = r.f32()?;
        let norm_terms = r.f32s(l)?;
        let sizes = if l > 0 { r.u32s(l)? } else { vec![size as u32] };
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0u32);
        for s in &sizes {
            offsets.push(offsets.last().unwrap().saturating_add(*s));
        }
        if *offsets.last().unwrap() as usize != size {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("group sizes sum to {}, region holds {size}", offsets.last().unwrap()),
            });
        }
        let mut ids = Vec::with_capacity(size);
        let mut codes = Vec::with_capacity(size * m);
        let mut consts = Vec::with_capacity(size);
        for _ in 0..size {
            ids.push(r.u32()?);
            codes.extend_from_slice(r.take(m)?);
            consts.push(r.take(1)?[0]);
        }
        total += size;
        regions.push(GroupedRegion {
            neighbor_ids,
            alpha,
            norm_terms,
            group_offsets: offsets,
            ids,
            codes,
            consts,
        });
    }
    if r.pos != body.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes", body.len() - r.pos),
        });
    }
    if total != point_count {
        return Err(Error::Format {
            offset: 8,
            message: format!("header says {point_count} points, regions hold {total}"),
        });
    }

    let index = GroupedIndex {
        coarse,
        graph,
        pq,
        constq: ConstQuantizer::new(lo, hi),
        regions,
        l,
        grouping,
        point_count,
        dataset_hash,
    };
    index.validate()?;
    Ok(index)
}

/// Writes the index atomically: a sibling temp file is renamed over `path`.
pub fn save_index(index: &GroupedIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_index(index);
    let mut tmp_name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_index(path: impl AsRef<Path>) -> Result<GroupedIndex> {
    decode_index(&fs::read(path)?)
}
