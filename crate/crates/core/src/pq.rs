//! Product quantization with an optional learned orthogonal rotation, and
//! asymmetric-distance lookup tables.
//!
//! A vector is rotated (if a rotation is present), split into `m` equal
//! subvectors, and each subvector is replaced by the index of its nearest
//! codeword in a 256-entry sub-codebook.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kmeans::{kmeans_plus_plus, lloyd, Assigner};
use crate::vectors::{dot, l2_sq, VectorSet};

/// Codewords per sub-codebook; one byte per subspace.
pub const CODEBOOK_SIZE: usize = 256;

pub const DEFAULT_OPQ_ROUNDS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct PqCodebook {
    dim: usize,
    m: usize,
    /// `m × 256 × (dim / m)`, subspace-major.
    codewords: Vec<f32>,
    /// Row-major `dim × dim`; maps input space to code space.
    rotation: Option<Vec<f32>>,
}

#[derive(Clone, Copy, Debug)]
pub struct PqParams {
    pub m: usize,
    pub learn_rotation: bool,
    pub iters: usize,
    pub seed: u64,
    pub opq_rounds: usize,
}

impl Default for PqParams {
    fn default() -> Self {
        Self {
            m: 8,
            learn_rotation: false,
            iters: 15,
            seed: 0,
            opq_rounds: DEFAULT_OPQ_ROUNDS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableMode {
    /// `‖q_m − r‖²` per codeword.
    Squared,
    /// `⟨q_m, r⟩` per codeword.
    Inner,
}

/// Per-query partial values, `m × 256`.
#[derive(Clone, Debug, PartialEq)]
pub struct LookupTable {
    m: usize,
    mode: TableMode,
    entries: Vec<f32>,
}

impl LookupTable {
    #[inline]
    pub fn sum(&self, code: &[u8]) -> f32 {
        debug_assert_eq!(code.len(), self.m);
        let mut acc = 0.0f32;
        for (sub, &c) in code.iter().enumerate() {
            acc += self.entries[sub * CODEBOOK_SIZE + c as usize];
        }
        acc
    }

    pub fn entry(&self, sub: usize, word: usize) -> f32 {
        self.entries[sub * CODEBOOK_SIZE + word]
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn mode(&self) -> TableMode {
        self.mode
    }
}

fn subspace_slices(data: &VectorSet, m: usize, sub: usize) -> VectorSet {
    let sd = data.dim() / m;
    let mut out = Vec::with_capacity(data.len() * sd);
    for row in data.rows() {
        out.extend_from_slice(&row[sub * sd..(sub + 1) * sd]);
    }
    VectorSet::new(sd, out).expect("slice length is a multiple of sub_dim")
}

pub fn train_pq(data: &VectorSet, params: &PqParams) -> Result<PqCodebook> {
    let dim = data.dim();
    if params.m == 0 || dim == 0 || dim % params.m != 0 {
        return Err(Error::param(
            "m",
            format!("{} must divide the dimension {dim}", params.m),
        ));
    }
    if data.len() < CODEBOOK_SIZE {
        return Err(Error::param(
            "training set",
            format!("{} vectors, need at least {CODEBOOK_SIZE}", data.len()),
        ));
    }
    data.check_finite()?;

    let mut pq = PqCodebook {
        dim,
        m: params.m,
        codewords: Vec::new(),
        rotation: None,
    };
    pq.codewords = train_subspaces(data, params.m, None, params.iters, params.seed)?;
    if !params.learn_rotation {
        return Ok(pq);
    }

    let identity: Vec<f32> = (0..dim * dim)
        .map(|i| if i / dim == i % dim { 1.0 } else { 0.0 })
        .collect();
    pq.rotation = Some(identity);
    let mut best = (pq.reconstruction_mse(data), pq.clone());
    log::debug!("opq round 0: mse {:.6}", best.0);

    for round in 1..=params.opq_rounds {
        let rotation = procrustes(data, &pq);
        pq.rotation = Some(rotation);
        let rotated = pq.rotate_set(data);
        pq.codewords = train_subspaces(
            &rotated,
            params.m,
            Some(&pq.codewords),
            params.iters,
            params.seed.wrapping_add(round as u64),
        )?;
        let mse = pq.reconstruction_mse(data);
        log::debug!("opq round {round}: mse {mse:.6}");
        if mse < best.0 {
            best = (mse, pq.clone());
        }
    }
    Ok(best.1)
}

/// One k-means per subspace, either seeded with k-means++ or warm-started
/// from `warm`.
fn train_subspaces(
    data: &VectorSet,
    m: usize,
    warm: Option<&[f32]>,
    iters: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    let sd = data.dim() / m;
    let mut codewords = Vec::with_capacity(m * CODEBOOK_SIZE * sd);
    for sub in 0..m {
        let slice = subspace_slices(data, m, sub);
        let sub_seed = seed.wrapping_mul(0x9E37_79B9).wrapping_add(sub as u64);
        let init = match warm {
            Some(w) => VectorSet::new(
                sd,
                w[sub * CODEBOOK_SIZE * sd..(sub + 1) * CODEBOOK_SIZE * sd].to_vec(),
            )?,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
                kmeans_plus_plus(&slice, CODEBOOK_SIZE, &mut rng)
            }
        };
        let (cents, _) = lloyd(&slice, init, iters, Assigner::Exact, sub_seed)?;
        codewords.extend_from_slice(cents.as_slice());
    }
    Ok(codewords)
}

/// Orthogonal rotation minimizing `Σ‖R x − ŷ‖²` where `ŷ` is the current
/// code-space reconstruction of the rotated `x`.
fn procrustes(data: &VectorSet, pq: &PqCodebook) -> Vec<f32> {
    let dim = pq.dim;
    let rows: Vec<&[f32]> = data.rows().collect();
    let partials: Vec<Vec<f64>> = rows
        .par_chunks(4096)
        .map(|chunk| {
            let mut acc = vec![0.0f64; dim * dim];
            let mut code = vec![0u8; pq.m];
            for x in chunk {
                let y = pq.rotate(x);
                pq.encode_rotated(&y, &mut code);
                let yhat = pq.decode_rotated(&code);
                for (i, &yi) in yhat.iter().enumerate() {
                    let yi = yi as f64;
                    let row = &mut acc[i * dim..(i + 1) * dim];
                    for (a, &xj) in row.iter_mut().zip(x.iter()) {
                        *a += yi * xj as f64;
                    }
                }
            }
            acc
        })
        .collect();
    let mut cross = vec![0.0f64; dim * dim];
    for p in &partials {
        for (c, v) in cross.iter_mut().zip(p) {
            *c += v;
        }
    }
    let cross = DMatrix::from_row_slice(dim, dim, &cross);
    let svd = cross.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let r = u * v_t;
    let mut out = Vec::with_capacity(dim * dim);
    for i in 0..dim {
        for j in 0..dim {
            out.push(r[(i, j)] as f32);
        }
    }
    out
}

impl PqCodebook {
    /// Assembles a codebook from stored parts.
    pub fn from_parts(dim: usize, m: usize, codewords: Vec<f32>, rotation: Option<Vec<f32>>) -> Result<Self> {
        if m == 0 || dim % m != 0 {
            return Err(Error::param("m", format!("{m} must divide {dim}")));
        }
        if codewords.len() != dim * CODEBOOK_SIZE {
            return Err(Error::Invariant(format!(
                "codeword array has {} floats, expected {}",
                codewords.len(),
                dim * CODEBOOK_SIZE
            )));
        }
        if let Some(r) = &rotation {
            if r.len() != dim * dim {
                return Err(Error::Invariant("rotation is not dim × dim".into()));
            }
        }
        Ok(Self {
            dim,
            m,
            codewords,
            rotation,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn sub_dim(&self) -> usize {
        self.dim / self.m
    }

    pub fn codewords(&self) -> &[f32] {
        &self.codewords
    }

    pub fn rotation(&self) -> Option<&[f32]> {
        self.rotation.as_deref()
    }

    #[inline]
    pub fn codeword(&self, sub: usize, word: usize) -> &[f32] {
        let sd = self.sub_dim();
        let off = (sub * CODEBOOK_SIZE + word) * sd;
        &self.codewords[off..off + sd]
    }

    /// Maps an input-space vector into code space.
    pub fn rotate(&self, v: &[f32]) -> Vec<f32> {
        match &self.rotation {
            None => v.to_vec(),
            Some(r) => r.chunks_exact(self.dim).map(|row| dot(row, v)).collect(),
        }
    }

    /// Inverse of [`rotate`](Self::rotate) (transpose of the rotation).
    pub fn unrotate(&self, y: &[f32]) -> Vec<f32> {
        match &self.rotation {
            None => y.to_vec(),
            Some(r) => {
                let mut out = vec![0.0f32; self.dim];
                for (row, &yi) in r.chunks_exact(self.dim).zip(y) {
                    for (o, &rij) in out.iter_mut().zip(row) {
                        *o += rij * yi;
                    }
                }
                out
            }
        }
    }

    fn rotate_set(&self, data: &VectorSet) -> VectorSet {
        let rows: Vec<&[f32]> = data.rows().collect();
        let out: Vec<f32> = rows.par_iter().flat_map_iter(|r| self.rotate(r)).collect();
        VectorSet::new(self.dim, out).expect("rotation preserves dimension")
    }

    fn encode_rotated(&self, y: &[f32], out: &mut [u8]) {
        let sd = self.sub_dim();
        for (sub, slot) in out.iter_mut().enumerate() {
            let part = &y[sub * sd..(sub + 1) * sd];
            let mut best = (0usize, f32::INFINITY);
            for w in 0..CODEBOOK_SIZE {
                let d = l2_sq(part, self.codeword(sub, w));
                if d < best.1 {
                    best = (w, d);
                }
            }
            *slot = best.0 as u8;
        }
    }

    fn decode_rotated(&self, code: &[u8]) -> Vec<f32> {
        let mut y = Vec::with_capacity(self.dim);
        for (sub, &c) in code.iter().enumerate() {
            y.extend_from_slice(self.codeword(sub, c as usize));
        }
        y
    }

    pub fn encode_into(&self, v: &[f32], out: &mut [u8]) {
        debug_assert_eq!(v.len(), self.dim);
        debug_assert_eq!(out.len(), self.m);
        if self.rotation.is_some() {
            self.encode_rotated(&self.rotate(v), out);
        } else {
            self.encode_rotated(v, out);
        }
    }

    pub fn encode(&self, v: &[f32]) -> Result<Vec<u8>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        let mut out = vec![0u8; self.m];
        self.encode_into(v, &mut out);
        Ok(out)
    }

    pub fn decode(&self, code: &[u8]) -> Vec<f32> {
        debug_assert_eq!(code.len(), self.m);
        let y = self.decode_rotated(code);
        if self.rotation.is_some() {
            self.unrotate(&y)
        } else {
            y
        }
    }

    pub fn lookup_table(&self, q: &[f32], mode: TableMode) -> Result<LookupTable> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: q.len(),
            });
        }
        let y = self.rotate(q);
        let sd = self.sub_dim();
        let mut entries = Vec::with_capacity(self.m * CODEBOOK_SIZE);
        for sub in 0..self.m {
            let part = &y[sub * sd..(sub + 1) * sd];
            for w in 0..CODEBOOK_SIZE {
                let cw = self.codeword(sub, w);
                entries.push(match mode {
                    TableMode::Squared => l2_sq(part, cw),
                    TableMode::Inner => dot(part, cw),
                });
            }
        }
        Ok(LookupTable {
            m: self.m,
            mode,
            entries,
        })
    }

    /// Mean squared reconstruction error over `data`.
    pub fn reconstruction_mse(&self, data: &VectorSet) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let rows: Vec<&[f32]> = data.rows().collect();
        let partials: Vec<f64> = rows
            .par_chunks(4096)
            .map(|chunk| {
                let mut code = vec![0u8; self.m];
                chunk
                    .iter()
                    .map(|x| {
                        let y = self.rotate(x);
                        self.encode_rotated(&y, &mut code);
                        l2_sq(&y, &self.decode_rotated(&code)) as f64
                    })
                    .sum()
            })
            .collect();
        partials.iter().sum::<f64>() / data.len() as f64
    }

    /// Largest `|(RᵀR − I)_ij|`; zero without a rotation.
    pub fn orthogonality_error(&self) -> f32 {
        let Some(r) = &self.rotation else { return 0.0 };
        let d = self.dim;
        let mut worst = 0.0f32;
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0f64;
                for k in 0..d {
                    s += r[k * d + i] as f64 * r[k * d + j] as f64;
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((s - target).abs() as f32);
            }
        }
        worst
    }
}

/// Draws up to `max` rows without replacement (all rows when `max >= len`),
/// keeping their original order.
pub fn subsample(data: &VectorSet, max: usize, seed: u64) -> VectorSet {
    if data.len() <= max {
        return data.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = sample(&mut rng, data.len(), max).into_vec();
    ids.sort_unstable();
    data.select(&ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_clustered;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn small_pq(rotation: bool) -> (VectorSet, PqCodebook) {
        let data = synth_clustered(3000, 16, 40, 0.2, 21).unwrap();
        let pq = train_pq(
            &data,
            &PqParams {
                m: 4,
                learn_rotation: rotation,
                iters: 6,
                seed: 3,
                opq_rounds: 2,
            },
        )
        .unwrap();
        (data, pq)
    }

    #[test]
    fn few_distinct_values_quantize_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // each 2-dim subvector takes one of 100 fixed values
        let palette: Vec<[f32; 2]> = (0..100).map(|_| [rng.gen(), rng.gen()]).collect();
        let mut data = Vec::new();
        for _ in 0..2000 {
            for _ in 0..4 {
                data.extend_from_slice(&palette[rng.gen_range(0..100)]);
            }
        }
        let data = VectorSet::new(8, data).unwrap();
        let pq = train_pq(&data, &PqParams { m: 4, iters: 5, ..Default::default() }).unwrap();
        assert_eq!(pq.reconstruction_mse(&data), 0.0);
    }

    #[test]
    fn codeword_concatenation_encodes_to_its_indices() {
        let (_, pq) = small_pq(false);
        assert!(pq.rotation().is_none());
        let idx = [3u8, 9, 200, 255];
        let v: Vec<f32> = idx
            .iter()
            .enumerate()
            .flat_map(|(s, &w)| pq.codeword(s, w as usize).to_vec())
            .collect();
        let code = pq.encode(&v).unwrap();
        // duplicate codewords would legitimately map to the lower index
        for (s, (&got, &want)) in code.iter().zip(&idx).enumerate() {
            assert_eq!(pq.codeword(s, got as usize), pq.codeword(s, want as usize));
            assert!(got <= want);
        }
        assert_eq!(pq.decode(&code), v);
    }

    #[test]
    fn encode_picks_the_best_codeword_per_subspace() {
        let (data, pq) = small_pq(false);
        for x in data.rows().take(50) {
            let code = pq.encode(x).unwrap();
            let sd = pq.sub_dim();
            for s in 0..pq.m() {
                let part = &x[s * sd..(s + 1) * sd];
                let chosen = l2_sq(part, pq.codeword(s, code[s] as usize));
                for w in 0..CODEBOOK_SIZE {
                    assert!(chosen <= l2_sq(part, pq.codeword(s, w)));
                }
            }
        }
    }

    #[test]
    fn decode_then_encode_is_stable() {
        for rotation in [false, true] {
            let (_, pq) = small_pq(rotation);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..50 {
                let code: Vec<u8> = (0..pq.m()).map(|_| rng.gen()).collect();
                let again = pq.encode(&pq.decode(&code)).unwrap();
                for s in 0..pq.m() {
                    assert_eq!(
                        pq.codeword(s, again[s] as usize),
                        pq.codeword(s, code[s] as usize)
                    );
                }
            }
        }
    }

    #[test]
    fn rotation_round_trip_and_orthogonality() {
        let (data, pq) = small_pq(true);
        assert!(pq.rotation().is_some());
        assert!(pq.orthogonality_error() < 1e-5);
        for x in data.rows().take(20) {
            let back = pq.unrotate(&pq.rotate(x));
            let err = l2_sq(&back, x).sqrt();
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn lookup_tables_reproduce_direct_distances() {
        for rotation in [false, true] {
            let (data, pq) = small_pq(rotation);
            let q = data.row(7);
            let sq = pq.lookup_table(q, TableMode::Squared).unwrap();
            let inner = pq.lookup_table(q, TableMode::Inner).unwrap();
            for x in data.rows().skip(100).take(30) {
                let code = pq.encode(x).unwrap();
                let rec = pq.decode(&code);
                let direct = crate::vectors::l2_sq_f64(q, &rec);
                let got = sq.sum(&code) as f64;
                assert!((got - direct).abs() <= 1e-5 * direct.max(1e-3), "{got} {direct}");
                let ip: f64 = q.iter().zip(&rec).map(|(&a, &b)| a as f64 * b as f64).sum();
                assert!((inner.sum(&code) as f64 - ip).abs() <= 1e-4 * ip.abs().max(1.0));
            }
            let code = pq.encode(data.row(9)).unwrap();
            let at_rec = pq.lookup_table(&pq.decode(&code), TableMode::Squared).unwrap();
            assert!(at_rec.sum(&code).abs() < 1e-6);
        }
    }

    #[test]
    fn training_errors() {
        let tiny = synth_clustered(100, 8, 4, 0.1, 0).unwrap();
        assert!(train_pq(&tiny, &PqParams { m: 4, ..Default::default() }).is_err());
        let data = synth_clustered(300, 8, 4, 0.1, 0).unwrap();
        assert!(train_pq(&data, &PqParams { m: 3, ..Default::default() }).is_err());
    }

    fn correlated(n: usize, dim: usize, seed: u64) -> VectorSet {
        // a random dense mixing matrix spreads a few strong latent factors
        // across every subspace
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let latent = 4;
        let mix: Vec<f32> = (0..latent * dim).map(|_| normal.sample(&mut rng)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let z: Vec<f32> = (0..latent).map(|_| normal.sample(&mut rng)).collect();
            for j in 0..dim {
                let mut v = 0.05 * normal.sample(&mut rng);
                for (l, zl) in z.iter().enumerate() {
                    v += zl * mix[l * dim + j];
                }
                data.push(v);
            }
        }
        VectorSet::new(dim, data).unwrap()
    }

    #[test]
    fn rotation_helps_on_correlated_data() {
        let train = correlated(6000, 16, 1);
        let held_out = correlated(2000, 16, 2);
        let params = PqParams {
            m: 8,
            learn_rotation: false,
            iters: 8,
            seed: 4,
            opq_rounds: DEFAULT_OPQ_ROUNDS,
        };
        let plain = train_pq(&train, &params).unwrap();
        let rotated = train_pq(&train, &PqParams { learn_rotation: true, ..params }).unwrap();
        let (e_plain, e_rot) = (
            plain.reconstruction_mse(&held_out),
            rotated.reconstruction_mse(&held_out),
        );
        assert!(e_rot < e_plain, "rotated {e_rot} vs plain {e_plain}");
        assert!(rotated.reconstruction_mse(&train) <= plain.reconstruction_mse(&train));
    }

    #[test]
    fn subsample_keeps_order_and_size() {
        let data = synth_clustered(100, 2, 3, 0.1, 0).unwrap();
        let s = subsample(&data, 10, 1);
        assert_eq!(s.len(), 10);
        assert_eq!(subsample(&data, 1000, 1), data);
    }
}
