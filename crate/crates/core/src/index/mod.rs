//! The inverted index with subcentroid grouping.
//!
//! Each region stores its `L` nearest neighboring centroids, a learned
//! scaling factor `α`, and its points grouped by closest subcentroid
//! `c + α(s_l − c)`. Points are stored as the PQ code of their displacement
//! from that subcentroid plus one byte holding the quantized
//! query-independent distance term `2⟨y, r⟩ + ‖r‖²` (`y` the subcentroid,
//! `r` the decoded displacement). The remaining query-independent piece,
//! `−α(1 − α)‖s_l − c‖²`, is kept exactly per group as a norm term, so the
//! query-to-subcentroid distance of any group is
//! `(1 − α)‖q − c‖² + α‖q − s_l‖² + norm_l` and is comparable across
//! regions.
//!
//! With grouping disabled every region holds a single group, `α = 0`, and
//! the constant byte is still stored.

mod constq;
mod grouping;
mod io;
mod memory;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub use constq::ConstQuantizer;
pub use grouping::{
    all_neighbor_lists, assign_subcentroid, learn_alpha, neighbor_centroids, subcentroid,
    subcentroid_norm_term,
};
pub use io::{decode_index, encode_index, load_index, save_index, FORMAT_VERSION, MAGIC};
pub use memory::{memory_report, MemoryReport, MemoryShape};

use crate::error::{Error, Result};
use crate::graph::{ProximityGraph, SearchScratch, DEFAULT_EF_SEARCH};
use crate::kmeans::CoarseCodebook;
use crate::pq::{subsample, train_pq, PqCodebook, PqParams, DEFAULT_OPQ_ROUNDS};
use crate::vectors::{dot, l2_sq, VectorSet};

/// How points are routed to regions at build time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionAssignment {
    Graph { ef_search: usize },
    Exact,
}

#[derive(Clone, Debug)]
pub struct BuildParams {
    /// Neighboring centroids (subregions) per region.
    pub l: usize,
    /// PQ subspaces; bytes per code.
    pub m: usize,
    pub learn_rotation: bool,
    pub grouping: bool,
    pub pq_iters: usize,
    pub opq_rounds: usize,
    /// Cap on the number of displacement vectors used to train PQ.
    pub pq_train_max: usize,
    pub assignment: RegionAssignment,
    pub seed: u64,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            l: 64,
            m: 16,
            learn_rotation: true,
            grouping: true,
            pq_iters: 15,
            opq_rounds: DEFAULT_OPQ_ROUNDS,
            pq_train_max: 65_536,
            assignment: RegionAssignment::Graph {
                ef_search: DEFAULT_EF_SEARCH,
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuildStats {
    pub points: usize,
    /// Mean Euclidean distance from points to their assigned (sub)centroid.
    pub mean_displacement_norm: f64,
    /// Constant terms outside the quantizer range (clamped).
    pub clamped_consts: usize,
    pub empty_regions: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupedRegion {
    pub(crate) neighbor_ids: Vec<u32>,
    pub(crate) alpha: f32,
    pub(crate) norm_terms: Vec<f32>,
    /// `groups + 1` prefix sums of the group sizes.
    pub(crate) group_offsets: Vec<u32>,
    pub(crate) ids: Vec<u32>,
    /// `len × m` PQ bytes.
    pub(crate) codes: Vec<u8>,
    pub(crate) consts: Vec<u8>,
}

impl GroupedRegion {
    fn empty(neighbor_ids: Vec<u32>, alpha: f32, norm_terms: Vec<f32>) -> Self {
        let groups = neighbor_ids.len().max(1);
        Self {
            neighbor_ids,
            alpha,
            norm_terms,
            group_offsets: vec![0; groups + 1],
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn neighbor_ids(&self) -> &[u32] {
        &self.neighbor_ids
    }

    pub fn norm_terms(&self) -> &[f32] {
        &self.norm_terms
    }

    pub fn group_count(&self) -> usize {
        self.group_offsets.len() - 1
    }

    pub fn group_sizes(&self) -> Vec<u32> {
        self.group_offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn group_range(&self, group: usize) -> std::ops::Range<usize> {
        self.group_offsets[group] as usize..self.group_offsets[group + 1] as usize
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn code(&self, pos: usize, m: usize) -> &[u8] {
        &self.codes[pos * m..(pos + 1) * m]
    }

    pub fn const_byte(&self, pos: usize) -> u8 {
        self.consts[pos]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupedIndex {
    pub(crate) coarse: CoarseCodebook,
    pub(crate) graph: ProximityGraph,
    pub(crate) pq: PqCodebook,
    pub(crate) constq: ConstQuantizer,
    pub(crate) regions: Vec<GroupedRegion>,
    pub(crate) l: usize,
    pub(crate) grouping: bool,
    pub(crate) point_count: usize,
    pub(crate) dataset_hash: u64,
}

/// Where one point lands.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub region: u32,
    pub group: usize,
    /// Squared distance to the assigned (sub)centroid.
    pub distance_sq: f32,
}

/// Truncated SHA-256 of the little-endian float bytes.
pub fn dataset_hash(set: &VectorSet) -> u64 {
    let mut h = Sha256::new();
    h.update((set.dim() as u64).to_le_bytes());
    for v in set.as_slice() {
        h.update(v.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

impl GroupedIndex {
    /// Learns everything that does not depend on the base set: neighbor
    /// lists, per-region `α`, the displacement PQ and the constant-term
    /// quantizer, all from `learn`. Regions start empty.
    pub fn train(
        coarse: CoarseCodebook,
        graph: ProximityGraph,
        learn: &VectorSet,
        params: &BuildParams,
    ) -> Result<Self> {
        let dim = coarse.dim();
        let k = coarse.k();
        if graph.node_count() != k {
            return Err(Error::Invariant(format!(
                "graph indexes {} nodes, codebook has {k}",
                graph.node_count()
            )));
        }
        if learn.is_empty() {
            return Err(Error::Empty("learning set"));
        }
        learn.check_dim(dim)?;
        if params.m == 0 || dim % params.m != 0 {
            return Err(Error::param("M", format!("{} must divide D={dim}", params.m)));
        }
        if params.grouping && (params.l == 0 || params.l >= k) {
            return Err(Error::param("L", format!("{} must be in [1, K={k})", params.l)));
        }

        let mut index = GroupedIndex {
            coarse,
            graph,
            pq: PqCodebook::from_parts(dim, params.m, vec![0.0; dim * 256], None)?,
            constq: ConstQuantizer::new(0.0, 0.0),
            regions: Vec::new(),
            l: if params.grouping { params.l } else { 0 },
            grouping: params.grouping,
            point_count: 0,
            dataset_hash: dataset_hash(&VectorSet::empty(dim)),
        };

        let labels = index.assign_regions(learn, params.assignment)?;
        let buckets = bucket_by_region(&labels, k);

        let neighbor_lists = if params.grouping {
            all_neighbor_lists(&index.coarse, params.l)?
        } else {
            vec![Vec::new(); k]
        };
        let coarse = &index.coarse;
        index.regions = neighbor_lists
            .into_par_iter()
            .enumerate()
            .map(|(r, neigh)| -> Result<GroupedRegion> {
                let c = coarse.centroid(r);
                if neigh.is_empty() {
                    return Ok(GroupedRegion::empty(neigh, 0.0, Vec::new()));
                }
                let ids: Vec<usize> = buckets[r].iter().map(|&i| i as usize).collect();
                let neighbors = coarse.centroids().select(&neigh.iter().map(|&i| i as usize).collect::<Vec<_>>());
                let alpha = learn_alpha(&learn.select(&ids), c, &neighbors)?;
                let norms = neighbors
                    .rows()
                    .map(|s| subcentroid_norm_term(c, s, alpha))
                    .collect();
                Ok(GroupedRegion::empty(neigh, alpha, norms))
            })
            .collect::<Result<_>>()?;

        // displacements of the learning points through the same pipeline
        let train_set = subsample(learn, params.pq_train_max, params.seed ^ 0x5EED);
        let train_labels = if train_set.len() == learn.len() {
            labels
        } else {
            index.assign_regions(&train_set, params.assignment)?
        };
        let placements: Vec<(Vec<f32>, Vec<f32>)> = train_set
            .rows()
            .zip(&train_labels)
            .map(|(x, &r)| {
                let (_, y) = index.place_in_region(x, r as usize);
                let disp: Vec<f32> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
                (y, disp)
            })
            .collect();
        let mut disp = VectorSet::empty(dim);
        for (_, d) in &placements {
            disp.push(d)?;
        }
        index.pq = train_pq(
            &disp,
            &PqParams {
                m: params.m,
                learn_rotation: params.learn_rotation,
                iters: params.pq_iters,
                seed: params.seed,
                opq_rounds: params.opq_rounds,
            },
        )?;
        let consts: Vec<f32> = placements
            .par_iter()
            .map(|(y, d)| {
                let code = index.pq.encode(d).expect("dimension checked");
                point_const(y, &index.pq.decode(&code))
            })
            .collect();
        index.constq = ConstQuantizer::train(&consts);
        Ok(index)
    }

    /// Encodes and stores the base set (ids `0..n`). The index must not hold
    /// points yet.
    pub fn add_base(&mut self, base: &VectorSet, assignment: RegionAssignment) -> Result<BuildStats> {
        if self.point_count != 0 {
            return Err(Error::Invariant("index already populated".into()));
        }
        if base.is_empty() {
            return Err(Error::Empty("base set"));
        }
        base.check_dim(self.dim())?;
        if base.len() > u32::MAX as usize {
            return Err(Error::param("base", "more points than the u32 id space"));
        }
        let m = self.pq.m();
        let labels = self.assign_regions(base, assignment)?;
        let rows: Vec<&[f32]> = base.rows().collect();

        struct Encoded {
            group: u32,
            dist: f32,
            code: Vec<u8>,
            constant: f32,
        }
        let encoded: Vec<Encoded> = rows
            .par_chunks(4096)
            .zip(labels.par_chunks(4096))
            .flat_map_iter(|(chunk, labs)| {
                chunk
                    .iter()
                    .zip(labs)
                    .map(|(x, &r)| {
                        let (group, y) = self.place_in_region(x, r as usize);
                        let disp: Vec<f32> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
                        let mut code = vec![0u8; m];
                        self.pq.encode_into(&disp, &mut code);
                        let constant = point_const(&y, &self.pq.decode(&code));
                        Encoded {
                            group: group as u32,
                            dist: dot(&disp, &disp),
                            code,
                            constant,
                        }
                    })
                    .collect::<Vec<_>>()
            })
            .collect();

        let mut stats = BuildStats {
            points: base.len(),
            ..Default::default()
        };
        let buckets = bucket_by_region(&labels, self.coarse.k());
        for (region, members) in self.regions.iter_mut().zip(buckets) {
            let groups = region.group_count();
            let mut sizes = vec![0u32; groups];
            for &i in &members {
                sizes[encoded[i as usize].group as usize] += 1;
            }
            let mut offsets = vec![0u32; groups + 1];
            for g in 0..groups {
                offsets[g + 1] = offsets[g] + sizes[g];
            }
            let n = members.len();
            let mut cursor = offsets.clone();
            region.ids = vec![0; n];
            region.codes = vec![0; n * m];
            region.consts = vec![0; n];
            // members are ascending, so each group stays sorted by id
            for &i in &members {
                let e = &encoded[i as usize];
                let pos = cursor[e.group as usize] as usize;
                cursor[e.group as usize] += 1;
                region.ids[pos] = i;
                region.codes[pos * m..(pos + 1) * m].copy_from_slice(&e.code);
                if !self.constq.in_range(e.constant) {
                    stats.clamped_consts += 1;
                }
                region.consts[pos] = self.constq.quantize(e.constant);
            }
            region.group_offsets = offsets;
            if n == 0 {
                stats.empty_regions += 1;
            }
        }
        stats.mean_displacement_norm =
            encoded.iter().map(|e| (e.dist.max(0.0) as f64).sqrt()).sum::<f64>() / base.len() as f64;
        self.point_count = base.len();
        self.dataset_hash = dataset_hash(base);
        Ok(stats)
    }

    /// Region of every row of `data`.
    pub fn assign_regions(&self, data: &VectorSet, assignment: RegionAssignment) -> Result<Vec<u32>> {
        data.check_dim(self.dim())?;
        let rows: Vec<&[f32]> = data.rows().collect();
        match assignment {
            RegionAssignment::Exact => Ok(rows
                .par_chunks(4096)
                .flat_map_iter(|chunk| chunk.iter().map(|x| self.coarse.nearest(x).0).collect::<Vec<_>>())
                .collect()),
            RegionAssignment::Graph { ef_search } => {
                let parts = rows
                    .par_chunks(4096)
                    .map(|chunk| {
                        let mut scratch = SearchScratch::new(self.coarse.k());
                        chunk
                            .iter()
                            .map(|x| {
                                self.graph
                                    .search(self.coarse.centroids(), x, 1, ef_search, &mut scratch)
                                    .map(|r| r[0].0)
                            })
                            .collect::<Result<Vec<u32>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(parts.into_iter().flatten().collect())
            }
        }
    }

    /// Group index and (sub)centroid for `x` inside `region`.
    fn place_in_region(&self, x: &[f32], region: usize) -> (usize, Vec<f32>) {
        let c = self.coarse.centroid(region);
        let reg = &self.regions[region];
        if reg.neighbor_ids.is_empty() {
            return (0, c.to_vec());
        }
        let fill = |y: &mut [f32], s: u32| {
            let s = self.coarse.centroid(s as usize);
            for ((yv, &cv), &sv) in y.iter_mut().zip(c).zip(s) {
                *yv = cv + reg.alpha * (sv - cv);
            }
        };
        let mut y = vec![0.0f32; c.len()];
        let mut best = (0usize, f32::INFINITY);
        for (l, &s) in reg.neighbor_ids.iter().enumerate() {
            fill(&mut y, s);
            let d = l2_sq(x, &y);
            if d < best.1 {
                best = (l, d);
            }
        }
        fill(&mut y, reg.neighbor_ids[best.0]);
        (best.0, y)
    }

    /// Region, group and squared (sub)centroid distance for `x`.
    pub fn place(&self, x: &[f32], assignment: RegionAssignment) -> Result<Placement> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        let region = match assignment {
            RegionAssignment::Exact => self.coarse.nearest(x).0,
            RegionAssignment::Graph { ef_search } => {
                let mut scratch = SearchScratch::new(self.coarse.k());
                self.graph.search(self.coarse.centroids(), x, 1, ef_search, &mut scratch)?[0].0
            }
        };
        let (group, y) = self.place_in_region(x, region as usize);
        Ok(Placement {
            region,
            group,
            distance_sq: l2_sq(x, &y),
        })
    }

    /// Mean Euclidean distance from each row of `data` to the (sub)centroid
    /// it would be stored under.
    pub fn mean_assigned_distance(&self, data: &VectorSet, assignment: RegionAssignment) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("distance statistics over an empty set"));
        }
        let labels = self.assign_regions(data, assignment)?;
        let rows: Vec<&[f32]> = data.rows().collect();
        let partials: Vec<f64> = rows
            .par_chunks(4096)
            .zip(labels.par_chunks(4096))
            .map(|(chunk, labs)| {
                chunk
                    .iter()
                    .zip(labs)
                    .map(|(x, &r)| {
                        let (_, y) = self.place_in_region(x, r as usize);
                        (l2_sq(x, &y).max(0.0) as f64).sqrt()
                    })
                    .sum()
            })
            .collect();
        Ok(partials.iter().sum::<f64>() / data.len() as f64)
    }

    pub fn dim(&self) -> usize {
        self.coarse.dim()
    }

    pub fn k(&self) -> usize {
        self.coarse.k()
    }

    pub fn m(&self) -> usize {
        self.pq.m()
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn grouping(&self) -> bool {
        self.grouping
    }

    pub fn len(&self) -> usize {
        self.point_count
    }

    pub fn is_empty(&self) -> bool {
        self.point_count == 0
    }

    pub fn dataset_hash(&self) -> u64 {
        self.dataset_hash
    }

    pub fn coarse(&self) -> &CoarseCodebook {
        &self.coarse
    }

    pub fn graph(&self) -> &ProximityGraph {
        &self.graph
    }

    pub fn pq(&self) -> &PqCodebook {
        &self.pq
    }

    pub fn const_quantizer(&self) -> &ConstQuantizer {
        &self.constq
    }

    pub fn regions(&self) -> &[GroupedRegion] {
        &self.regions
    }

    pub fn region(&self, r: usize) -> &GroupedRegion {
        &self.regions[r]
    }

    /// The (sub)centroid a stored point was encoded against.
    pub fn group_centroid(&self, region: usize, group: usize) -> Vec<f32> {
        let c = self.coarse.centroid(region);
        let reg = &self.regions[region];
        if reg.neighbor_ids.is_empty() {
            c.to_vec()
        } else {
            subcentroid(c, self.coarse.centroid(reg.neighbor_ids[group] as usize), reg.alpha)
        }
    }

    /// Checks the structural invariants: every id stored exactly once,
    /// group offsets consistent, `α ∈ [0, 1]`, neighbor lists valid.
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if self.regions.len() != k {
            return Err(Error::Invariant(format!("{} regions for K={k}", self.regions.len())));
        }
        let mut seen = vec![false; self.point_count];
        let m = self.m();
        for (r, reg) in self.regions.iter().enumerate() {
            if !(0.0..=1.0).contains(&reg.alpha) {
                return Err(Error::Invariant(format!("region {r}: alpha {} outside [0,1]", reg.alpha)));
            }
            if self.grouping {
                if reg.neighbor_ids.len() != self.l || reg.norm_terms.len() != self.l {
                    return Err(Error::Invariant(format!("region {r}: neighbor list length")));
                }
                let mut ids = reg.neighbor_ids.clone();
                ids.sort_unstable();
                ids.dedup();
                if ids.len() != self.l || ids.iter().any(|&i| i as usize == r || i as usize >= k) {
                    return Err(Error::Invariant(format!("region {r}: bad neighbor ids")));
                }
            }
            let offs = &reg.group_offsets;
            if offs.first() != Some(&0)
                || offs.windows(2).any(|w| w[0] > w[1])
                || *offs.last().unwrap() as usize != reg.ids.len()
            {
                return Err(Error::Invariant(format!("region {r}: group offsets")));
            }
            if reg.codes.len() != reg.ids.len() * m || reg.consts.len() != reg.ids.len() {
                return Err(Error::Invariant(format!("region {r}: code array length")));
            }
            for &id in &reg.ids {
                let slot = seen
                    .get_mut(id as usize)
                    .ok_or_else(|| Error::Invariant(format!("region {r}: id {id} out of range")))?;
                if *slot {
                    return Err(Error::Invariant(format!("id {id} stored twice")));
                }
                *slot = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Invariant(format!("id {missing} not stored")));
        }
        Ok(())
    }
}

/// Builds a populated index from a trained coarse codebook and its graph.
pub fn build_index(
    base: &VectorSet,
    coarse: CoarseCodebook,
    graph: ProximityGraph,
    learn: &VectorSet,
    params: &BuildParams,
) -> Result<(GroupedIndex, BuildStats)> {
    let mut index = GroupedIndex::train(coarse, graph, learn, params)?;
    let stats = index.add_base(base, params.assignment)?;
    Ok((index, stats))
}

/// `2⟨y, r⟩ + ‖r‖²` for subcentroid `y` and reconstructed displacement `r`.
pub(crate) fn point_const(y: &[f32], r: &[f32]) -> f32 {
    2.0 * dot(y, r) + dot(r, r)
}

/// Row indices grouped per region, ascending within each bucket.
fn bucket_by_region(labels: &[u32], k: usize) -> Vec<Vec<u32>> {
    let mut buckets = vec![Vec::new(); k];
    for (i, &r) in labels.iter().enumerate() {
        buckets[r as usize].push(i as u32);
    }
    buckets
}

#[cfg(test)]
mod tests;
