//! Subcentroids as convex combinations `c + α(s_l − c)` of a region
//! centroid `c` and its nearest neighboring centroids `s_l`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kmeans::CoarseCodebook;
use crate::vectors::{cmp_scored, l2_sq, VectorSet};

/// The `l` nearest other centroids of centroid `region`, ascending, ties by
/// id. Computed exactly.
pub fn neighbor_centroids(coarse: &CoarseCodebook, region: usize, l: usize) -> Result<Vec<u32>> {
    let k = coarse.k();
    if l >= k {
        return Err(Error::param("L", format!("{l} must be below K={k}")));
    }
    if region >= k {
        return Err(Error::param("region", format!("{region} out of range")));
    }
    let c = coarse.centroid(region);
    let mut scored: Vec<(u32, f32)> = coarse
        .centroids()
        .rows()
        .enumerate()
        .filter(|&(i, _)| i != region)
        .map(|(i, row)| (i as u32, l2_sq(c, row)))
        .collect();
    if l == 0 {
        return Ok(Vec::new());
    }
    if l < scored.len() {
        scored.select_nth_unstable_by(l - 1, cmp_scored);
        scored.truncate(l);
        scored.shrink_to_fit();
    }
    scored.sort_unstable_by(cmp_scored);
    Ok(scored.into_iter().map(|(id, _)| id).collect())
}

/// Neighbor lists for every region, in region order.
pub fn all_neighbor_lists(coarse: &CoarseCodebook, l: usize) -> Result<Vec<Vec<u32>>> {
    (0..coarse.k())
        .into_par_iter()
        .map(|r| neighbor_centroids(coarse, r, l))
        .collect()
}

/// Learns the region's scaling factor in two steps: each point first picks
/// the neighbor whose segment from `c` (with a per-point factor clamped to
/// `[0, 1]`) fits it best; then a single factor is fitted in closed form to
/// those choices and clamped to `[0, 1]`.
///
/// Neighbors coinciding with `c` are never chosen. With no points, or no
/// usable neighbor, the factor is 0.
pub fn learn_alpha(points: &VectorSet, c: &[f32], neighbors: &VectorSet) -> Result<f32> {
    if points.is_empty() || neighbors.is_empty() {
        return Ok(0.0);
    }
    points.check_dim(c.len())?;
    neighbors.check_dim(c.len())?;
    let dirs: Vec<Vec<f64>> = neighbors
        .rows()
        .map(|s| s.iter().zip(c).map(|(&a, &b)| a as f64 - b as f64).collect())
        .collect();
    let dir_norms: Vec<f64> = dirs.iter().map(|u| u.iter().map(|v| v * v).sum()).collect();

    let mut num = 0.0f64;
    let mut den = 0.0f64;
    let mut diff = vec![0.0f64; c.len()];
    for x in points.rows() {
        for ((d, &xv), &cv) in diff.iter_mut().zip(x).zip(c) {
            *d = xv as f64 - cv as f64;
        }
        let diff_norm: f64 = diff.iter().map(|v| v * v).sum();
        let mut best: Option<(f64, usize, f64)> = None;
        for (l, (u, &un)) in dirs.iter().zip(&dir_norms).enumerate() {
            if un == 0.0 {
                continue;
            }
            let proj: f64 = diff.iter().zip(u).map(|(a, b)| a * b).sum();
            let a = (proj / un).clamp(0.0, 1.0);
            let residual = diff_norm - 2.0 * a * proj + a * a * un;
            if best.map_or(true, |(r, _, _)| residual < r) {
                best = Some((residual, l, proj));
            }
        }
        if let Some((_, l, proj)) = best {
            num += proj;
            den += dir_norms[l];
        }
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((num / den).clamp(0.0, 1.0) as f32)
}

/// `c + α(s − c)`.
pub fn subcentroid(c: &[f32], s: &[f32], alpha: f32) -> Vec<f32> {
    c.iter().zip(s).map(|(&cv, &sv)| cv + alpha * (sv - cv)).collect()
}

/// Index of the closest subcentroid, ties to the lowest index.
pub fn assign_subcentroid(x: &[f32], c: &[f32], neighbors: &VectorSet, alpha: f32) -> usize {
    let subs: Vec<Vec<f32>> = neighbors.rows().map(|s| subcentroid(c, s, alpha)).collect();
    nearest_subcentroid(x, &subs).0
}

fn nearest_subcentroid(x: &[f32], subs: &[Vec<f32>]) -> (usize, f32) {
    let mut best = (0usize, f32::INFINITY);
    for (l, s) in subs.iter().enumerate() {
        let d = l2_sq(x, s);
        if d < best.1 {
            best = (l, d);
        }
    }
    best
}

/// Query-independent part of the squared query-to-subcentroid distance:
/// `‖q − c − α(s − c)‖² = (1 − α)‖q − c‖² + α‖q − s‖² − α(1 − α)‖s − c‖²`.
pub fn subcentroid_norm_term(c: &[f32], s: &[f32], alpha: f32) -> f32 {
    -alpha * (1.0 - alpha) * l2_sq(s, c)
}
