//! Coarse codebooks: k-means++ seeded Lloyd iterations with exact or
//! graph-accelerated assignment, plus exact assignment and distortion
//! statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::top_k_scan;
use crate::error::{Error, Result};
use crate::graph::{GraphParams, ProximityGraph, SearchScratch};
use crate::vectors::{l2_sq, VectorSet};

/// Points per parallel work unit. Partial results are combined in chunk
/// order, so output does not depend on the thread count.
const CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseCodebook {
    centroids: VectorSet,
}

impl CoarseCodebook {
    pub fn new(centroids: VectorSet) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::Empty("codebook needs at least one centroid"));
        }
        centroids.check_finite()?;
        Ok(Self { centroids })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim()
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        self.centroids.row(i)
    }

    pub fn centroids(&self) -> &VectorSet {
        &self.centroids
    }

    /// Exact nearest centroid, ties to the lower id.
    pub fn nearest(&self, v: &[f32]) -> (u32, f32) {
        nearest_in(&self.centroids, v)
    }
}

pub(crate) fn nearest_in(centroids: &VectorSet, v: &[f32]) -> (u32, f32) {
    let mut best = (0u32, f32::INFINITY);
    for (i, c) in centroids.rows().enumerate() {
        let d = l2_sq(v, c);
        if d < best.1 {
            best = (i as u32, d);
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assigner {
    Exact,
    /// Rebuild a proximity graph over the current centroids every iteration
    /// and take its top-1 answer.
    Graph {
        max_links: usize,
        ef_construction: usize,
        ef_search: usize,
    },
}

impl Assigner {
    pub fn graph_default() -> Self {
        Assigner::Graph {
            max_links: 32,
            ef_construction: 64,
            ef_search: 64,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KMeansParams {
    pub k: usize,
    pub iters: usize,
    pub seed: u64,
    pub assigner: Assigner,
}

#[derive(Clone, Debug, Default)]
pub struct KMeansReport {
    /// Mean squared distance to the assigned centroid at each assignment
    /// step (before that step's centroid update).
    pub distortions: Vec<f64>,
    pub reseeded: usize,
}

pub fn train_kmeans(data: &VectorSet, params: &KMeansParams) -> Result<(CoarseCodebook, KMeansReport)> {
    if data.is_empty() {
        return Err(Error::Empty("k-means training data"));
    }
    if params.k == 0 || params.k > data.len() {
        return Err(Error::param(
            "k",
            format!("{} must be in [1, {}]", params.k, data.len()),
        ));
    }
    data.check_finite()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let init = kmeans_plus_plus(data, params.k, &mut rng);
    let (centroids, report) = lloyd(data, init, params.iters, params.assigner, params.seed)?;
    Ok((CoarseCodebook::new(centroids)?, report))
}

/// k-means++ seeding (squared-distance weighted sampling).
pub(crate) fn kmeans_plus_plus(data: &VectorSet, k: usize, rng: &mut ChaCha8Rng) -> VectorSet {
    let n = data.len();
    let mut chosen = Vec::with_capacity(k);
    let first = rng.gen_range(0..n);
    chosen.push(first);
    let mut min_d: Vec<f32> = vec![f32::INFINITY; n];
    let mut last = first;
    while chosen.len() < k {
        let c = data.row(last).to_vec();
        min_d
            .par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(ci, chunk)| {
                for (j, d) in chunk.iter_mut().enumerate() {
                    let nd = l2_sq(data.row(ci * CHUNK + j), &c);
                    if nd < *d {
                        *d = nd;
                    }
                }
            });
        let total: f64 = min_d.iter().map(|&d| d as f64).sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0f64;
            let mut pick = None;
            let mut last_positive = 0;
            for (i, &d) in min_d.iter().enumerate() {
                if d > 0.0 {
                    last_positive = i;
                    acc += d as f64;
                    if acc > target {
                        pick = Some(i);
                        break;
                    }
                }
            }
            pick.unwrap_or(last_positive)
        } else {
            // every point already coincides with a centroid
            rng.gen_range(0..n)
        };
        chosen.push(next);
        last = next;
    }
    data.select(&chosen)
}

/// Assigns every row to a centroid; returns (labels, squared distances).
fn assign_all(
    data: &VectorSet,
    centroids: &VectorSet,
    assigner: Assigner,
    seed: u64,
) -> Result<(Vec<u32>, Vec<f32>)> {
    let rows: Vec<&[f32]> = data.rows().collect();
    let pairs: Vec<(u32, f32)> = match assigner {
        Assigner::Exact => rows
            .par_chunks(CHUNK)
            .flat_map_iter(|chunk| chunk.iter().map(|r| nearest_in(centroids, r)).collect::<Vec<_>>())
            .collect(),
        Assigner::Graph {
            max_links,
            ef_construction,
            ef_search,
        } => {
            let graph = ProximityGraph::build(
                centroids,
                &GraphParams {
                    max_links,
                    ef_construction,
                    seed,
                },
            )?;
            rows.par_chunks(CHUNK)
                .map(|chunk| {
                    let mut scratch = SearchScratch::new(centroids.len());
                    chunk
                        .iter()
                        .map(|r| graph.search(centroids, r, 1, ef_search, &mut scratch).map(|v| v[0]))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect()
        }
    };
    Ok(pairs.into_iter().unzip())
}

/// Lloyd iterations from the given initial centroids. Empty clusters are
/// re-seeded with the point farthest from its centroid in the currently
/// largest cluster.
pub(crate) fn lloyd(
    data: &VectorSet,
    mut centroids: VectorSet,
    iters: usize,
    assigner: Assigner,
    seed: u64,
) -> Result<(VectorSet, KMeansReport)> {
    let k = centroids.len();
    let dim = data.dim();
    let mut report = KMeansReport::default();
    let mut prev_labels: Option<Vec<u32>> = None;
    for it in 0..iters {
        let (labels, dists) = assign_all(data, &centroids, assigner, seed.wrapping_add(it as u64))?;
        report
            .distortions
            .push(dists.iter().map(|&d| d as f64).sum::<f64>() / data.len() as f64);
        if prev_labels.as_ref() == Some(&labels) {
            break;
        }

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (row, &l) in data.rows().zip(&labels) {
            let l = l as usize;
            counts[l] += 1;
            for (s, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(row) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = (s * inv) as f32;
                }
            }
        }

        let mut taken = vec![false; data.len()];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let largest = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
            if counts[largest] <= 1 {
                break;
            }
            let center = centroids.row(largest).to_vec();
            let mut far: Option<(usize, f32)> = None;
            for (i, (&l, row)) in labels.iter().zip(data.rows()).enumerate() {
                if l as usize != largest || taken[i] {
                    continue;
                }
                let d = l2_sq(row, &center);
                if far.map_or(true, |(_, fd)| d > fd) {
                    far = Some((i, d));
                }
            }
            if let Some((i, _)) = far {
                taken[i] = true;
                counts[largest] -= 1;
                counts[c] = 1;
                let src = data.row(i).to_vec();
                centroids.row_mut(c).copy_from_slice(&src);
                report.reseeded += 1;
            }
        }
        prev_labels = Some(labels);
    }
    Ok((centroids, report))
}

/// Exact `top` nearest centroids per vector, ascending, ties by id.
pub fn assign_exact(codebook: &CoarseCodebook, vectors: &VectorSet, top: usize) -> Result<Vec<Vec<(u32, f32)>>> {
    if vectors.is_empty() {
        return Ok(Vec::new());
    }
    vectors.check_dim(codebook.dim())?;
    if top > codebook.k() {
        return Err(Error::param(
            "top",
            format!("{top} exceeds codebook size {}", codebook.k()),
        ));
    }
    let rows: Vec<&[f32]> = vectors.rows().collect();
    Ok(rows
        .par_iter()
        .map(|r| top_k_scan(&codebook.centroids, r, top))
        .collect())
}

/// Mean (non-squared) Euclidean distance from each vector to its closest
/// centroid.
pub fn mean_closest_centroid_distance(codebook: &CoarseCodebook, data: &VectorSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("distortion over an empty set"));
    }
    data.check_dim(codebook.dim())?;
    let rows: Vec<&[f32]> = data.rows().collect();
    let partials: Vec<f64> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|r| (codebook.nearest(r).1.max(0.0) as f64).sqrt())
                .sum()
        })
        .collect();
    Ok(partials.iter().sum::<f64>() / data.len() as f64)
}

/// Mean squared distance to the nearest centroid.
pub fn mean_squared_distortion(codebook: &CoarseCodebook, data: &VectorSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("distortion over an empty set"));
    }
    data.check_dim(codebook.dim())?;
    let rows: Vec<&[f32]> = data.rows().collect();
    let partials: Vec<f64> = rows
        .par_chunks(CHUNK)
        .map(|chunk| chunk.iter().map(|r| codebook.nearest(r).1 as f64).sum())
        .collect();
    Ok(partials.iter().sum::<f64>() / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_clustered;

    fn exact(k: usize, iters: usize) -> KMeansParams {
        KMeansParams {
            k,
            iters,
            seed: 7,
            assigner: Assigner::Exact,
        }
    }

    #[test]
    fn k_equals_n_recovers_the_data() {
        let data = synth_clustered(50, 3, 50, 0.5, 1).unwrap();
        let (cb, report) = train_kmeans(&data, &exact(50, 5)).unwrap();
        let mut a: Vec<Vec<u32>> = cb.centroids().rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        let mut b: Vec<Vec<u32>> = data.rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_eq!(*report.distortions.last().unwrap(), 0.0);
    }

    /// Brute-force optimum over all 2-partitions of the given points.
    fn best_two_partition(points: &[[f32; 2]]) -> f64 {
        let n = points.len();
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << n) - 1 {
            let mut cost = 0.0;
            for side in [true, false] {
                let members: Vec<&[f32; 2]> = (0..n)
                    .filter(|&i| ((mask >> i) & 1 == 1) == side)
                    .map(|i| &points[i])
                    .collect();
                let cx = members.iter().map(|p| p[0] as f64).sum::<f64>() / members.len() as f64;
                let cy = members.iter().map(|p| p[1] as f64).sum::<f64>() / members.len() as f64;
                cost += members
                    .iter()
                    .map(|p| (p[0] as f64 - cx).powi(2) + (p[1] as f64 - cy).powi(2))
                    .sum::<f64>();
            }
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn square_corners_split_into_edge_midpoints() {
        let pts = [[0.0f32, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]];
        let oracle = best_two_partition(&pts) / 4.0;
        // side 2: every point sits (side/2)^2 = 1 from its midpoint
        assert_eq!(oracle, 1.0);
        let data = VectorSet::from_rows(2, &pts).unwrap();
        let mut optimal_seeds = 0;
        for seed in 0..16 {
            let (cb, _) = train_kmeans(&data, &KMeansParams { seed, ..exact(2, 10) }).unwrap();
            let d = mean_squared_distortion(&cb, &data).unwrap();
            let mut cs: Vec<[f32; 2]> = cb.centroids().rows().map(|r| [r[0], r[1]]).collect();
            cs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if (d - oracle).abs() < 1e-9 {
                optimal_seeds += 1;
                let vertical = cs == [[0.0, 1.0], [2.0, 1.0]];
                let horizontal = cs == [[1.0, 0.0], [1.0, 2.0]];
                assert!(vertical || horizontal, "{cs:?}");
            } else {
                // diagonal seeding: the tie rule sends both equidistant
                // corners to one centroid, a Lloyd fixed point at 4/3
                assert!((d - 4.0 / 3.0).abs() < 1e-6, "seed {seed}: {d}");
            }
        }
        assert!(optimal_seeds >= 4);
    }

    #[test]
    fn exact_distortion_is_non_increasing() {
        let data = synth_clustered(5000, 8, 30, 0.15, 2).unwrap();
        let (_, report) = train_kmeans(&data, &exact(64, 20)).unwrap();
        for w in report.distortions.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-6), "{:?}", report.distortions);
        }
    }

    #[test]
    fn rejects_bad_k_and_non_finite() {
        let data = synth_clustered(10, 2, 2, 0.1, 0).unwrap();
        assert!(train_kmeans(&data, &exact(11, 1)).is_err());
        assert!(train_kmeans(&data, &exact(0, 1)).is_err());
        let bad = VectorSet::from_rows(2, &[[0.0, f32::NAN], [1.0, 1.0]]).unwrap();
        assert!(matches!(train_kmeans(&bad, &exact(1, 1)), Err(Error::NonFinite(1))));
    }

    #[test]
    fn duplicate_heavy_data_reseeds_without_panicking() {
        let mut rows = vec![[0.0f32, 0.0]; 40];
        rows.extend(vec![[5.0, 5.0]; 40]);
        rows.push([9.0, 0.0]);
        let data = VectorSet::from_rows(2, &rows).unwrap();
        let (cb, _) = train_kmeans(&data, &exact(6, 5)).unwrap();
        assert_eq!(cb.k(), 6);
        assert_eq!(mean_squared_distortion(&cb, &data).unwrap(), 0.0);
    }

    #[test]
    fn assign_exact_cases() {
        let cents = synth_clustered(20, 4, 20, 0.5, 3).unwrap();
        let cb = CoarseCodebook::new(cents.clone()).unwrap();
        let v = VectorSet::from_rows(4, &[cents.row(7)]).unwrap();
        let r = assign_exact(&cb, &v, 3).unwrap();
        assert_eq!(r[0][0], (7, 0.0));
        assert!(assign_exact(&cb, &VectorSet::empty(4), 3).unwrap().is_empty());
        assert!(assign_exact(&cb, &v, 21).is_err());

        let q = synth_clustered(5, 4, 1, 1.0, 9).unwrap();
        let full = assign_exact(&cb, &q, 20).unwrap();
        for (qi, row) in q.rows().enumerate() {
            let mut naive: Vec<(f64, u32)> = cents
                .rows()
                .enumerate()
                .map(|(i, c)| (crate::vectors::l2_sq_f64(row, c), i as u32))
                .collect();
            naive.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let ids: Vec<u32> = full[qi].iter().map(|p| p.0).collect();
            assert_eq!(ids, naive.iter().map(|p| p.1).collect::<Vec<_>>());
        }
    }

    #[test]
    fn mean_distance_conventions() {
        let cents = synth_clustered(10, 3, 10, 1.0, 4).unwrap();
        let cb = CoarseCodebook::new(cents.clone()).unwrap();
        assert_eq!(mean_closest_centroid_distance(&cb, &cents).unwrap(), 0.0);
        let origin = CoarseCodebook::new(VectorSet::from_rows(3, &[[0.0, 0.0, 0.0]]).unwrap()).unwrap();
        let units = VectorSet::from_rows(3, &[[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert!((mean_closest_centroid_distance(&origin, &units).unwrap() - 1.0).abs() < 1e-12);
        assert!(mean_closest_centroid_distance(&origin, &VectorSet::empty(3)).is_err());
    }

    #[test]
    fn graph_assigner_close_to_exact() {
        let data = synth_clustered(20_000, 16, 100, 0.1, 5).unwrap();
        let (exact_cb, _) = train_kmeans(&data, &exact(256, 8)).unwrap();
        let (graph_cb, _) = train_kmeans(
            &data,
            &KMeansParams {
                assigner: Assigner::graph_default(),
                ..exact(256, 8)
            },
        )
        .unwrap();
        let de = mean_squared_distortion(&exact_cb, &data).unwrap();
        let dg = mean_squared_distortion(&graph_cb, &data).unwrap();
        assert!(dg <= 1.02 * de, "graph {dg} vs exact {de}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = synth_clustered(3000, 8, 10, 0.2, 6).unwrap();
        let a = train_kmeans(&data, &exact(32, 5)).unwrap().0;
        let b = train_kmeans(&data, &exact(32, 5)).unwrap().0;
        assert_eq!(a, b);
    }
}
