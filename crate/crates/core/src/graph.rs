//! Layered navigable small-world graph over the coarse centroids.
//!
//! Nodes are inserted in id order. Each node draws its top layer from a
//! geometric distribution with multiplier `1 / ln(max_links)`; below 1024
//! nodes the graph stays flat (single layer). Neighbor lists on every layer
//! are capped at `max_links` and chosen with the distance heuristic: a
//! candidate is kept only if it is closer to the base node than to every
//! neighbor already kept.
//!
//! All heaps order by `(distance, id)` so construction and search are
//! reproducible bit for bit.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vectors::{l2_sq, VectorSet};

pub const DEFAULT_MAX_LINKS: usize = 32;
pub const DEFAULT_EF_CONSTRUCTION: usize = 256;
pub const DEFAULT_EF_SEARCH: usize = 128;

/// Node counts below this build a single-layer graph.
pub const FLAT_THRESHOLD: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphParams {
    pub max_links: usize,
    pub ef_construction: usize,
    pub seed: u64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            max_links: DEFAULT_MAX_LINKS,
            ef_construction: DEFAULT_EF_CONSTRUCTION,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Scored {
    dist: f32,
    id: u32,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scored {}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.id.cmp(&other.id))
    }
}

/// Per-search scratch: a visited table reset by bumping an epoch counter.
#[derive(Clone, Debug, Default)]
pub struct SearchScratch {
    visited: Vec<u32>,
    epoch: u32,
}

impl SearchScratch {
    pub fn new(node_count: usize) -> Self {
        Self {
            visited: vec![0; node_count],
            epoch: 0,
        }
    }

    fn reset(&mut self, node_count: usize) {
        if self.visited.len() != node_count {
            self.visited = vec![0; node_count];
            self.epoch = 0;
        }
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.visited.iter_mut().for_each(|v| *v = 0);
            self.epoch = 1;
        }
    }

    #[inline]
    fn visit(&mut self, id: u32) -> bool {
        let slot = &mut self.visited[id as usize];
        if *slot == self.epoch {
            false
        } else {
            *slot = self.epoch;
            true
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProximityGraph {
    max_links: usize,
    entry_point: u32,
    /// `links[node][layer]`; every node has at least layer 0.
    links: Vec<Vec<Vec<u32>>>,
}

impl ProximityGraph {
    pub fn build(centroids: &VectorSet, params: &GraphParams) -> Result<Self> {
        let n = centroids.len();
        if n == 0 {
            return Err(Error::Empty("graph over an empty codebook"));
        }
        if params.max_links < 2 {
            return Err(Error::param("max_links", "must be at least 2"));
        }
        if n > u32::MAX as usize {
            return Err(Error::param("node_count", "exceeds u32 id space"));
        }
        let ef_construction = params.ef_construction.max(params.max_links);
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let level_mult = 1.0 / (params.max_links as f64).ln();
        let flat = n < FLAT_THRESHOLD;
        let levels: Vec<usize> = (0..n)
            .map(|_| {
                let u: f64 = 1.0 - rng.gen::<f64>();
                if flat {
                    0
                } else {
                    (-u.ln() * level_mult).floor() as usize
                }
            })
            .collect();

        let mut graph = ProximityGraph {
            max_links: params.max_links,
            entry_point: 0,
            links: levels.iter().map(|&l| vec![Vec::new(); l + 1]).collect(),
        };
        let mut top_level = levels[0];
        let mut scratch = SearchScratch::new(n);

        for node in 1..n {
            let q = centroids.row(node);
            let level = levels[node];
            let mut entry = Scored {
                dist: l2_sq(q, centroids.row(graph.entry_point as usize)),
                id: graph.entry_point,
            };
            for layer in (level + 1..=top_level).rev() {
                entry = graph.greedy(centroids, q, entry, layer);
            }
            let mut entries = vec![entry];
            for layer in (0..=level.min(top_level)).rev() {
                let found =
                    graph.search_layer(centroids, q, &entries, ef_construction, layer, &mut scratch);
                let chosen = select_neighbors(centroids, &found, params.max_links);
                graph.links[node][layer] = chosen.iter().map(|s| s.id).collect();
                for s in &chosen {
                    graph.link_back(centroids, s.id, node as u32, s.dist, layer);
                }
                entries = found;
            }
            if level > top_level {
                top_level = level;
                graph.entry_point = node as u32;
            }
        }
        Ok(graph)
    }

    fn link_back(&mut self, centroids: &VectorSet, target: u32, new: u32, dist: f32, layer: usize) {
        let list = &mut self.links[target as usize][layer];
        if list.len() < self.max_links {
            list.push(new);
            return;
        }
        let base = centroids.row(target as usize);
        let mut pool: Vec<Scored> = list
            .iter()
            .map(|&id| Scored {
                dist: l2_sq(base, centroids.row(id as usize)),
                id,
            })
            .collect();
        pool.push(Scored { dist, id: new });
        pool.sort_unstable();
        let kept = select_neighbors(centroids, &pool, self.max_links);
        self.links[target as usize][layer] = kept.iter().map(|s| s.id).collect();
    }

    fn greedy(&self, centroids: &VectorSet, q: &[f32], mut cur: Scored, layer: usize) -> Scored {
        loop {
            let mut moved = false;
            for &nb in &self.links[cur.id as usize][layer] {
                let cand = Scored {
                    dist: l2_sq(q, centroids.row(nb as usize)),
                    id: nb,
                };
                if cand < cur {
                    cur = cand;
                    moved = true;
                }
            }
            if !moved {
                return cur;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` nodes, ascending.
    fn search_layer(
        &self,
        centroids: &VectorSet,
        q: &[f32],
        entries: &[Scored],
        ef: usize,
        layer: usize,
        scratch: &mut SearchScratch,
    ) -> Vec<Scored> {
        scratch.reset(self.links.len());
        let mut candidates: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        let mut best: BinaryHeap<Scored> = BinaryHeap::new();
        for &e in entries {
            if scratch.visit(e.id) {
                candidates.push(Reverse(e));
                best.push(e);
            }
        }
        while best.len() > ef {
            best.pop();
        }
        while let Some(Reverse(cur)) = candidates.pop() {
            if best.len() >= ef && cur > *best.peek().unwrap() {
                break;
            }
            for &nb in &self.links[cur.id as usize][layer] {
                if !scratch.visit(nb) {
                    continue;
                }
                let cand = Scored {
                    dist: l2_sq(q, centroids.row(nb as usize)),
                    id: nb,
                };
                if best.len() < ef || cand < *best.peek().unwrap() {
                    candidates.push(Reverse(cand));
                    best.push(cand);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    /// Approximate `top` nearest centroids of `q`, ascending `(id, squared
    /// distance)`. The beam width is `max(ef_search, top)`.
    pub fn search(
        &self,
        centroids: &VectorSet,
        q: &[f32],
        top: usize,
        ef_search: usize,
        scratch: &mut SearchScratch,
    ) -> Result<Vec<(u32, f32)>> {
        let n = self.links.len();
        if centroids.len() != n {
            return Err(Error::Invariant(format!(
                "graph has {n} nodes but codebook has {}",
                centroids.len()
            )));
        }
        if q.len() != centroids.dim() {
            return Err(Error::DimensionMismatch {
                expected: centroids.dim(),
                actual: q.len(),
            });
        }
        if top > n {
            return Err(Error::param("top", format!("{top} exceeds node count {n}")));
        }
        if top == 0 {
            return Ok(Vec::new());
        }
        let mut entry = Scored {
            dist: l2_sq(q, centroids.row(self.entry_point as usize)),
            id: self.entry_point,
        };
        for layer in (1..self.links[self.entry_point as usize].len()).rev() {
            entry = self.greedy(centroids, q, entry, layer);
        }
        let mut found = self.search_layer(centroids, q, &[entry], ef_search.max(top), 0, scratch);
        found.truncate(top);
        Ok(found.into_iter().map(|s| (s.id, s.dist)).collect())
    }

    pub fn node_count(&self) -> usize {
        self.links.len()
    }

    pub fn max_links(&self) -> usize {
        self.max_links
    }

    pub fn entry_point(&self) -> u32 {
        self.entry_point
    }

    pub fn top_layer(&self) -> usize {
        self.links[self.entry_point as usize].len() - 1
    }

    /// Adjacency of `node` on every layer it belongs to, bottom layer first.
    pub fn node_links(&self, node: usize) -> &[Vec<u32>] {
        &self.links[node]
    }

    /// Total stored link slots across all layers.
    pub fn edge_count(&self) -> usize {
        self.links
            .iter()
            .flat_map(|layers| layers.iter())
            .map(Vec::len)
            .sum()
    }

    pub fn layer0_edge_count(&self) -> usize {
        self.links.iter().map(|layers| layers[0].len()).sum()
    }

    /// Rebuilds a graph from stored adjacency, validating the structural
    /// invariants.
    pub fn from_parts(max_links: usize, entry_point: u32, links: Vec<Vec<Vec<u32>>>) -> Result<Self> {
        let n = links.len();
        if n == 0 {
            return Err(Error::Invariant("graph without nodes".into()));
        }
        if entry_point as usize >= n {
            return Err(Error::Invariant(format!("entry point {entry_point} out of range")));
        }
        let top = links[entry_point as usize].len();
        for (node, layers) in links.iter().enumerate() {
            if layers.is_empty() || layers.len() > top {
                return Err(Error::Invariant(format!(
                    "node {node} has {} layers, entry point has {top}",
                    layers.len()
                )));
            }
            for (layer, adj) in layers.iter().enumerate() {
                if adj.len() > max_links {
                    return Err(Error::Invariant(format!(
                        "node {node} layer {layer} has {} links > {max_links}",
                        adj.len()
                    )));
                }
                for &t in adj {
                    if t as usize >= n || links[t as usize].len() <= layer {
                        return Err(Error::Invariant(format!(
                            "node {node} links to {t} absent from layer {layer}"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            max_links,
            entry_point,
            links,
        })
    }
}

/// Distance heuristic over `candidates` sorted ascending by distance to the
/// base node.
fn select_neighbors(centroids: &VectorSet, candidates: &[Scored], max_links: usize) -> Vec<Scored> {
    let mut kept: Vec<Scored> = Vec::with_capacity(max_links);
    for &c in candidates {
        if kept.len() >= max_links {
            break;
        }
        let v = centroids.row(c.id as usize);
        let dominated = kept
            .iter()
            .any(|k| l2_sq(v, centroids.row(k.id as usize)) < c.dist);
        if !dominated {
            kept.push(c);
        }
    }
    kept
}
