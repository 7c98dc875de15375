//! Byte accounting for an index, both measured and analytic.

use std::fmt;

use super::io::HEADER_BYTES;
use super::GroupedIndex;
use crate::pq::CODEBOOK_SIZE;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemoryReport {
    pub header_bytes: u64,
    /// `K · D · 4`.
    pub codebook_bytes: u64,
    pub pq_codebook_bytes: u64,
    pub rotation_bytes: u64,
    /// Stored link ids across all graph layers, 4 bytes each.
    pub graph_bytes: u64,
    pub graph_layer0_bytes: u64,
    /// `max_links · K · 4`, the layer-0 budget.
    pub graph_capacity_bytes: u64,
    /// `n · (M + 1)`: PQ bytes plus the constant byte.
    pub code_bytes: u64,
    pub id_bytes: u64,
    /// `K · L · 4`.
    pub norm_term_bytes: u64,
    /// `K · L · 4` group sizes.
    pub group_size_bytes: u64,
    /// `K · L · 4` neighbor ids.
    pub neighbor_id_bytes: u64,
    /// `K · 4` (one f32 α per region).
    pub alpha_bytes: u64,
}

/// Shape parameters for the analytic accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryShape {
    pub k: u64,
    pub d: u64,
    pub m: u64,
    pub l: u64,
    pub n: u64,
    pub max_links: u64,
    pub grouping: bool,
    pub rotation: bool,
}

impl MemoryReport {
    /// Closed-form accounting; the graph is charged its full layer-0 budget.
    pub fn analytic(s: MemoryShape) -> Self {
        let l = if s.grouping { s.l } else { 0 };
        MemoryReport {
            header_bytes: HEADER_BYTES as u64,
            codebook_bytes: s.k * s.d * 4,
            pq_codebook_bytes: CODEBOOK_SIZE as u64 * s.d * 4,
            rotation_bytes: if s.rotation { s.d * s.d * 4 } else { 0 },
            graph_bytes: s.max_links * s.k * 4,
            graph_layer0_bytes: s.max_links * s.k * 4,
            graph_capacity_bytes: s.max_links * s.k * 4,
            code_bytes: s.n * (s.m + 1),
            id_bytes: s.n * 4,
            norm_term_bytes: s.k * l * 4,
            group_size_bytes: s.k * l * 4,
            neighbor_id_bytes: s.k * l * 4,
            alpha_bytes: s.k * 4,
        }
    }

    /// Norm terms, group sizes and neighbor ids.
    pub fn grouping_overhead_bytes(&self) -> u64 {
        self.norm_term_bytes + self.group_size_bytes + self.neighbor_id_bytes
    }

    pub fn total_bytes(&self) -> u64 {
        self.header_bytes
            + self.codebook_bytes
            + self.pq_codebook_bytes
            + self.rotation_bytes
            + self.graph_bytes
            + self.code_bytes
            + self.id_bytes
            + self.grouping_overhead_bytes()
            + self.alpha_bytes
    }
}

pub fn memory_report(index: &GroupedIndex) -> MemoryReport {
    let k = index.k() as u64;
    let l = index.l() as u64;
    let n = index.len() as u64;
    let d = index.dim() as u64;
    let graph = index.graph();
    MemoryReport {
        header_bytes: HEADER_BYTES as u64,
        codebook_bytes: index.coarse().centroids().as_slice().len() as u64 * 4,
        pq_codebook_bytes: index.pq().codewords().len() as u64 * 4,
        rotation_bytes: index.pq().rotation().map_or(0, |r| r.len() as u64 * 4),
        graph_bytes: graph.edge_count() as u64 * 4,
        graph_layer0_bytes: graph.layer0_edge_count() as u64 * 4,
        graph_capacity_bytes: graph.max_links() as u64 * k * 4,
        code_bytes: index
            .regions()
            .iter()
            .map(|r| (r.codes.len() + r.consts.len()) as u64)
            .sum(),
        id_bytes: index.regions().iter().map(|r| r.ids.len() as u64 * 4).sum(),
        norm_term_bytes: index.regions().iter().map(|r| r.norm_terms.len() as u64 * 4).sum(),
        group_size_bytes: if index.grouping() { k * l * 4 } else { 0 },
        neighbor_id_bytes: index
            .regions()
            .iter()
            .map(|r| r.neighbor_ids.len() as u64 * 4)
            .sum(),
        alpha_bytes: k * 4,
    }
    .checked(n, d)
}

impl MemoryReport {
    fn checked(self, n: u64, d: u64) -> Self {
        debug_assert!(self.id_bytes == n * 4);
        debug_assert!(self.pq_codebook_bytes == CODEBOOK_SIZE as u64 * d * 4);
        self
    }
}

fn mib(b: u64) -> f64 {
    b as f64 / (1024.0 * 1024.0)
}

impl fmt::Display for MemoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("coarse codebook", self.codebook_bytes),
            ("pq codebook", self.pq_codebook_bytes),
            ("rotation", self.rotation_bytes),
            ("graph links", self.graph_bytes),
            ("  layer 0", self.graph_layer0_bytes),
            ("  layer-0 budget", self.graph_capacity_bytes),
            ("codes (pq + const)", self.code_bytes),
            ("point ids", self.id_bytes),
            ("norm terms", self.norm_term_bytes),
            ("group sizes", self.group_size_bytes),
            ("neighbor ids", self.neighbor_id_bytes),
            ("alphas", self.alpha_bytes),
            ("header", self.header_bytes),
            ("total", self.total_bytes()),
        ];
        for (name, bytes) in rows {
            writeln!(f, "{name:<20} {bytes:>14} B  {:>10.2} MiB", mib(bytes))?;
        }
        Ok(())
    }
}
