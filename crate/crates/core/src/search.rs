//! Query pipeline: region selection, subregion scoring and pruning, and the
//! compressed-domain scan.
//!
//! For a subcentroid `y = c + α(s − c)` and a stored code decoding to `r`,
//!
//! ```text
//! ‖q − y − r‖² = (1 − α)‖q − c‖² + α‖q − s‖² − 2⟨q, r⟩
//!               + [−α(1 − α)‖s − c‖²] + [2⟨y, r⟩ + ‖r‖²]
//! ```
//!
//! The first bracket is the group's norm term, stored exactly; the second is
//! the per-point constant stored as one quantized byte. The first two terms
//! plus the norm term equal `‖q − y‖²`, the score used to rank subregions.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{SearchScratch, DEFAULT_EF_SEARCH};
use crate::index::GroupedIndex;
use crate::pq::{LookupTable, TableMode};
use crate::vectors::{cmp_scored, l2_sq, VectorSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchParams {
    /// Regions visited per query.
    pub nprobe: usize,
    /// Fraction of the pooled subregions kept, in `(0, 1]`.
    pub tau: f32,
    /// Candidate-list length: the scan stops after this many codes.
    pub candidates: usize,
    /// Length of the reranked result list (ignored without reranking).
    pub top_k: usize,
    pub ef_search: usize,
    /// Rank candidates by their compressed distance. When off, candidates
    /// are returned in traversal order with their subregion scores.
    pub rerank: bool,
    /// Disable to take the sort-everything path (no selection step).
    pub prune: bool,
    /// Cache query-to-centroid distances across regions.
    pub memo: bool,
    /// Pick regions by a full scan of the codebook instead of the graph.
    pub exact_assignment: bool,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            nprobe: 16,
            tau: 0.5,
            candidates: 10_000,
            top_k: 100,
            ef_search: DEFAULT_EF_SEARCH,
            rerank: true,
            prune: true,
            memo: true,
            exact_assignment: false,
        }
    }
}

impl SearchParams {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.nprobe == 0 || self.nprobe > k {
            return Err(Error::param("nprobe", format!("{} must be in [1, K={k}]", self.nprobe)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::param("tau", format!("{} must be in (0, 1]", self.tau)));
        }
        if self.candidates == 0 {
            return Err(Error::param("candidates", "must be at least 1"));
        }
        if self.top_k == 0 {
            return Err(Error::param("top_k", "must be at least 1"));
        }
        if self.ef_search == 0 {
            return Err(Error::param("ef_search", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub regions_visited: usize,
    /// Subregions pooled for pruning (`nprobe · groups`).
    pub subregions_considered: usize,
    /// Subregions whose codes were (at least partly) scanned.
    pub subregions_visited: usize,
    pub subregions_pruned: usize,
    pub codes_scanned: usize,
    pub elapsed: Duration,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchResult {
    pub ids: Vec<u32>,
    /// Squared distances, ascending.
    pub distances: Vec<f32>,
    pub stats: SearchStats,
}

impl SearchResult {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Same ids and bit-identical distances; timing is ignored.
    pub fn same_results(&self, other: &SearchResult) -> bool {
        self.ids == other.ids
            && self.distances.len() == other.distances.len()
            && self
                .distances
                .iter()
                .zip(&other.distances)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// The decomposed compressed-domain distance. `const_term` is the full
/// query-independent part: `−α(1 − α)‖s − c‖² + 2⟨y, r⟩ + ‖r‖²`.
pub fn decomposed_distance(
    q: &[f32],
    c: &[f32],
    s: &[f32],
    alpha: f32,
    code: &[u8],
    table: &LookupTable,
    const_term: f32,
) -> f32 {
    let base = (1.0 - alpha) * l2_sq(q, c) + alpha * l2_sq(q, s);
    (base - 2.0 * table.sum(code)) + const_term
}

#[derive(Clone, Copy, Debug)]
struct Subregion {
    score: f32,
    /// `(1 − α)‖q − c‖² + α‖q − s‖²`.
    base: f32,
    norm: f32,
    region: u32,
    group: u32,
}

fn cmp_subregion(a: &Subregion, b: &Subregion) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then(a.region.cmp(&b.region))
        .then(a.group.cmp(&b.group))
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    dist: f32,
    id: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Per-worker scratch for repeated queries against one index.
pub struct Searcher<'a> {
    index: &'a GroupedIndex,
    graph_scratch: SearchScratch,
    memo: Vec<f32>,
    touched: Vec<u32>,
    pool: Vec<Subregion>,
}

impl<'a> Searcher<'a> {
    pub fn new(index: &'a GroupedIndex) -> Self {
        Self {
            index,
            graph_scratch: SearchScratch::new(index.k()),
            memo: vec![f32::NAN; index.k()],
            touched: Vec::new(),
            pool: Vec::new(),
        }
    }

    fn centroid_distance(&mut self, q: &[f32], id: u32, memo: bool) -> f32 {
        if !memo {
            return l2_sq(q, self.index.coarse().centroid(id as usize));
        }
        let slot = &mut self.memo[id as usize];
        if slot.is_nan() {
            *slot = l2_sq(q, self.index.coarse().centroid(id as usize));
            self.touched.push(id);
        }
        *slot
    }

    fn reset_memo(&mut self) {
        for &id in &self.touched {
            self.memo[id as usize] = f32::NAN;
        }
        self.touched.clear();
    }

    fn select_regions(&mut self, q: &[f32], params: &SearchParams) -> Result<Vec<(u32, f32)>> {
        let index = self.index;
        if params.exact_assignment {
            let mut all: Vec<(u32, f32)> = index
                .coarse()
                .centroids()
                .rows()
                .enumerate()
                .map(|(i, c)| (i as u32, l2_sq(q, c)))
                .collect();
            if params.nprobe < all.len() {
                all.select_nth_unstable_by(params.nprobe - 1, cmp_scored);
                all.truncate(params.nprobe);
            }
            all.sort_unstable_by(cmp_scored);
            Ok(all)
        } else {
            index.graph().search(
                index.coarse().centroids(),
                q,
                params.nprobe,
                params.ef_search.max(params.nprobe),
                &mut self.graph_scratch,
            )
        }
    }

    /// Scores the subregions of the visited regions and leaves the kept ones
    /// in `self.pool`, ascending by `(score, region, group)`. Returns the
    /// number of regions visited and subregions considered.
    fn plan(&mut self, q: &[f32], params: &SearchParams) -> Result<(usize, usize)> {
        let index = self.index;
        let regions = self.select_regions(q, params)?;

        self.pool.clear();
        for &(r, dc) in &regions {
            if params.memo && self.memo[r as usize].is_nan() {
                self.memo[r as usize] = dc;
                self.touched.push(r);
            }
            let reg = index.region(r as usize);
            if reg.neighbor_ids().is_empty() {
                self.pool.push(Subregion {
                    score: dc,
                    base: dc,
                    norm: 0.0,
                    region: r,
                    group: 0,
                });
                continue;
            }
            let alpha = reg.alpha();
            for (g, (&s, &norm)) in reg.neighbor_ids().iter().zip(reg.norm_terms()).enumerate() {
                let ds = self.centroid_distance(q, s, params.memo);
                let base = (1.0 - alpha) * dc + alpha * ds;
                self.pool.push(Subregion {
                    score: base + norm,
                    base,
                    norm,
                    region: r,
                    group: g as u32,
                });
            }
        }
        self.reset_memo();

        let considered = self.pool.len();
        if params.prune {
            let keep = ((params.tau as f64) * considered as f64).ceil() as usize;
            let keep = keep.clamp(1, considered);
            if keep < considered {
                self.pool.select_nth_unstable_by(keep - 1, cmp_subregion);
                self.pool.truncate(keep);
            }
        }
        self.pool.sort_unstable_by(cmp_subregion);

        Ok((regions.len(), considered))
    }

    /// The subregions a search would scan, in scan order, as
    /// `(region, group, score)`.
    pub fn kept_subregions(&mut self, q: &[f32], params: &SearchParams) -> Result<Vec<(u32, u32, f32)>> {
        self.check(q, params)?;
        self.plan(q, params)?;
        Ok(self.pool.iter().map(|s| (s.region, s.group, s.score)).collect())
    }

    fn check(&self, q: &[f32], params: &SearchParams) -> Result<()> {
        let index = self.index;
        if q.len() != index.dim() {
            return Err(Error::DimensionMismatch {
                expected: index.dim(),
                actual: q.len(),
            });
        }
        if index.is_empty() {
            return Err(Error::Empty("index holds no points"));
        }
        params.validate(index.k())
    }

    pub fn search(&mut self, q: &[f32], params: &SearchParams) -> Result<SearchResult> {
        let start = Instant::now();
        let index = self.index;
        self.check(q, params)?;
        let table = index.pq().lookup_table(q, TableMode::Inner)?;
        let deq = index.const_quantizer().table();
        let (regions_visited, considered) = self.plan(q, params)?;
        let kept = std::mem::take(&mut self.pool);

        let m = index.m();
        let mut stats = SearchStats {
            regions_visited,
            subregions_considered: considered,
            subregions_pruned: considered - kept.len(),
            ..Default::default()
        };
        let cap = params.top_k.min(params.candidates);
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(cap + 1);
        let mut listed: Vec<(u32, f32)> = Vec::new();
        let mut remaining = params.candidates;
        for sub in &kept {
            if remaining == 0 {
                break;
            }
            let reg = index.region(sub.region as usize);
            let range = reg.group_range(sub.group as usize);
            if range.is_empty() {
                continue;
            }
            let end = range.start + range.len().min(remaining);
            stats.subregions_visited += 1;
            stats.codes_scanned += end - range.start;
            remaining -= end - range.start;
            if !params.rerank {
                listed.extend(reg.ids()[range.start..end].iter().map(|&id| (id, sub.score)));
                continue;
            }
            for pos in range.start..end {
                let code = reg.code(pos, m);
                let const_term = sub.norm + deq[reg.const_byte(pos) as usize];
                let dist = (sub.base - 2.0 * table.sum(code)) + const_term;
                let cand = Candidate {
                    dist,
                    id: reg.ids()[pos],
                };
                if heap.len() < cap {
                    heap.push(cand);
                } else if cand < *heap.peek().unwrap() {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        self.pool = kept;

        let (ids, distances) = if params.rerank {
            heap.into_sorted_vec().into_iter().map(|c| (c.id, c.dist)).unzip()
        } else {
            listed.into_iter().unzip()
        };
        stats.elapsed = start.elapsed();
        Ok(SearchResult { ids, distances, stats })
    }
}

/// Searches a single query with fresh scratch.
pub fn search(index: &GroupedIndex, q: &[f32], params: &SearchParams) -> Result<SearchResult> {
    Searcher::new(index).search(q, params)
}

/// Searches every row of `queries` in parallel, one query per worker.
pub fn search_batch(index: &GroupedIndex, queries: &VectorSet, params: &SearchParams) -> Result<Vec<SearchResult>> {
    queries.check_dim(index.dim())?;
    let rows: Vec<&[f32]> = queries.rows().collect();
    rows.par_iter()
        .map_init(|| Searcher::new(index), |s, q| s.search(q, params))
        .collect()
}

/// Searches every row sequentially on the calling thread, for timing.
pub fn search_sequential(
    index: &GroupedIndex,
    queries: &VectorSet,
    params: &SearchParams,
) -> Result<Vec<SearchResult>> {
    queries.check_dim(index.dim())?;
    let mut s = Searcher::new(index);
    queries.rows().map(|q| s.search(q, params)).collect()
}
