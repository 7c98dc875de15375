use super::*;
use crate::error::Error;
use crate::search::{search, SearchParams};
use crate::testutil::{build, fixture, small_params};
use crate::vectors::l2_sq_f64;

fn region_sets(index: &GroupedIndex) -> Vec<Vec<u32>> {
    index
        .regions()
        .iter()
        .map(|r| {
            let mut ids = r.ids().to_vec();
            ids.sort_unstable();
            ids
        })
        .collect()
}

#[test]
fn grouping_only_reorders_within_regions() {
    let f = fixture(3000, 16, 32, 1);
    let on = build(&f, &small_params(true));
    let off = build(&f, &small_params(false));
    assert_eq!(region_sets(&on), region_sets(&off));
    for index in [&on, &off] {
        let mut all: Vec<u32> = index.regions().iter().flat_map(|r| r.ids().iter().copied()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..3000).collect::<Vec<u32>>());
        index.validate().unwrap();
    }
}

#[test]
fn groups_are_contiguous_and_sorted() {
    let f = fixture(3000, 16, 32, 2);
    let index = build(&f, &small_params(true));
    for (r, reg) in index.regions().iter().enumerate() {
        assert_eq!(reg.group_count(), 6);
        assert_eq!(reg.group_sizes().iter().sum::<u32>() as usize, reg.len());
        assert!((0.0..=1.0).contains(&reg.alpha()));
        for g in 0..reg.group_count() {
            let ids = &reg.ids()[reg.group_range(g)];
            assert!(ids.windows(2).all(|w| w[0] < w[1]));
            for &id in ids {
                let x = f.base.row(id as usize);
                let p = index.place(x, RegionAssignment::Exact).unwrap();
                assert_eq!((p.region as usize, p.group), (r, g));
            }
        }
    }
}

#[test]
fn grouping_shrinks_displacements() {
    let f = fixture(4000, 16, 32, 3);
    let mut on = GroupedIndex::train(f.coarse.clone(), f.graph.clone(), &f.learn, &small_params(true)).unwrap();
    let mut off = GroupedIndex::train(f.coarse.clone(), f.graph.clone(), &f.learn, &small_params(false)).unwrap();
    let s_on = on.add_base(&f.base, RegionAssignment::Exact).unwrap();
    let s_off = off.add_base(&f.base, RegionAssignment::Exact).unwrap();
    assert!(s_on.mean_displacement_norm <= s_off.mean_displacement_norm);
    let d_on = on.mean_assigned_distance(&f.base, RegionAssignment::Exact).unwrap();
    let d_off = off.mean_assigned_distance(&f.base, RegionAssignment::Exact).unwrap();
    assert!(d_on < d_off, "{d_on} vs {d_off}");
    assert!((d_on - s_on.mean_displacement_norm).abs() < 1e-6);
}

#[test]
fn stored_constants_within_half_bucket() {
    let f = fixture(3000, 16, 32, 4);
    let index = build(&f, &small_params(true));
    let q = index.const_quantizer();
    let half = q.bucket_width() / 2.0;
    let mut checked = 0;
    for (r, reg) in index.regions().iter().enumerate() {
        for g in 0..reg.group_count() {
            let y = index.group_centroid(r, g);
            for pos in reg.group_range(g) {
                let recon = index.pq().decode(reg.code(pos, index.m()));
                let exact = point_const(&y, &recon);
                if q.in_range(exact) {
                    let err = (q.dequantize(reg.const_byte(pos)) - exact).abs();
                    assert!(err <= half * (1.0 + 1e-4) + 1e-6, "err {err} half {half}");
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 2900);
}

#[test]
fn grouping_off_has_zero_alpha_and_one_group() {
    let f = fixture(2000, 16, 32, 5);
    let index = build(&f, &small_params(false));
    let loaded = decode_index(&encode_index(&index)).unwrap();
    for reg in loaded.regions() {
        assert_eq!(reg.alpha(), 0.0);
        assert_eq!(reg.group_count(), 1);
        assert!(reg.neighbor_ids().is_empty());
    }
}

#[test]
fn round_trip_preserves_search() {
    let f = fixture(3000, 16, 32, 6);
    let index = build(&f, &small_params(true));
    let loaded = decode_index(&encode_index(&index)).unwrap();
    assert_eq!(index, loaded);
    let params = SearchParams {
        nprobe: 4,
        candidates: 500,
        top_k: 20,
        ..Default::default()
    };
    for q in f.queries.rows() {
        let a = search(&index, q, &params).unwrap();
        let b = search(&loaded, q, &params).unwrap();
        assert!(a.same_results(&b));
    }
}

#[test]
fn save_load_files() {
    let f = fixture(2000, 16, 32, 7);
    let index = build(&f, &small_params(true));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.givf");
    save_index(&index, &path).unwrap();
    save_index(&index, &path).unwrap();
    assert_eq!(load_index(&path).unwrap(), index);
    assert_eq!(std::fs::read(&path).unwrap(), encode_index(&index));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn corrupt_files_are_rejected() {
    let f = fixture(2000, 16, 32, 8);
    let bytes = encode_index(&build(&f, &small_params(true)));
    for cut in [bytes.len() - 1, bytes.len() / 2, HEADER_LEN + 3] {
        assert!(matches!(decode_index(&bytes[..cut]), Err(Error::ChecksumMismatch { .. })));
    }
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 3] ^= 0x10;
    assert!(matches!(decode_index(&flipped), Err(Error::ChecksumMismatch { .. })));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_index(&magic), Err(Error::BadMagic)));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(decode_index(&version), Err(Error::VersionMismatch { found: 9, .. })));
    assert!(matches!(decode_index(b""), Err(Error::BadMagic)));
}

const HEADER_LEN: usize = io::HEADER_BYTES;

#[test]
fn build_is_deterministic() {
    let f = fixture(3000, 16, 32, 9);
    let mut params = small_params(true);
    params.assignment = RegionAssignment::Graph { ef_search: 32 };
    let a = encode_index(&build(&f, &params));
    let b = encode_index(&build(&f, &params));
    assert_eq!(a, b);
}

#[test]
fn file_size_delta_is_grouping_overhead() {
    let f = fixture(2000, 16, 32, 10);
    let on = encode_index(&build(&f, &small_params(true)));
    let off = encode_index(&build(&f, &small_params(false)));
    assert_eq!(on.len() - off.len(), 32 * 6 * 12);
}

#[test]
fn memory_report_matches_formulas() {
    let f = fixture(2000, 16, 32, 11);
    let index = build(&f, &small_params(true));
    let rep = memory_report(&index);
    let shape = MemoryShape {
        k: 32,
        d: 16,
        m: 4,
        l: 6,
        n: 2000,
        max_links: 16,
        grouping: true,
        rotation: true,
    };
    let ana = MemoryReport::analytic(shape);
    assert_eq!(rep.codebook_bytes, 32 * 16 * 4);
    assert_eq!(rep.code_bytes, 2000 * 5);
    assert_eq!(rep.id_bytes, 2000 * 4);
    assert_eq!(rep.norm_term_bytes, 32 * 6 * 4);
    assert_eq!(rep.grouping_overhead_bytes(), ana.grouping_overhead_bytes());
    assert!(rep.graph_layer0_bytes <= rep.graph_capacity_bytes);
    let file = encode_index(&index).len() as u64;
    let layers: u64 = (0..32).map(|n| index.graph().node_links(n).len() as u64).sum();
    let framing = 32 * 4 + layers * 4 + 32 * 4 + 8;
    assert_eq!(file, rep.total_bytes() + framing);
}

#[test]
fn empty_index_report() {
    let f = fixture(2000, 16, 32, 12);
    let index = GroupedIndex::train(f.coarse.clone(), f.graph.clone(), &f.learn, &small_params(true)).unwrap();
    let rep = memory_report(&index);
    assert_eq!(rep.code_bytes, 0);
    assert_eq!(rep.id_bytes, 0);
    assert_eq!(rep.header_bytes, HEADER_LEN as u64);
    assert!(index.is_empty());
    let loaded = decode_index(&encode_index(&index)).unwrap();
    assert_eq!(loaded, index);
}

#[test]
fn table_two_codebook_size() {
    let rep = MemoryReport::analytic(MemoryShape {
        k: 1 << 18,
        d: 96,
        m: 8,
        l: 64,
        n: 0,
        max_links: 32,
        grouping: true,
        rotation: true,
    });
    let mib = rep.codebook_bytes as f64 / (1024.0 * 1024.0);
    assert_eq!(mib, 96.0);
    assert!((mib - 97.0).abs() / 97.0 <= 0.02);
    assert_eq!(rep.norm_term_bytes, (1u64 << 18) * 64 * 4);
}

#[test]
fn rejects_bad_parameters() {
    let f = fixture(2000, 16, 32, 13);
    let mut p = small_params(true);
    p.m = 5;
    assert!(GroupedIndex::train(f.coarse.clone(), f.graph.clone(), &f.learn, &p).is_err());
    let mut p = small_params(true);
    p.l = 32;
    assert!(GroupedIndex::train(f.coarse.clone(), f.graph.clone(), &f.learn, &p).is_err());
    let mut index = build(&f, &small_params(true));
    assert!(matches!(
        index.add_base(&f.base, RegionAssignment::Exact),
        Err(Error::Invariant(_))
    ));
}

#[test]
fn placement_distance_matches_oracle() {
    let f = fixture(2000, 16, 32, 14);
    let index = build(&f, &small_params(true));
    for x in f.queries.rows() {
        let p = index.place(x, RegionAssignment::Exact).unwrap();
        let c = f.coarse.centroid(p.region as usize);
        let reg = index.region(p.region as usize);
        let best = reg
            .neighbor_ids()
            .iter()
            .map(|&s| l2_sq_f64(x, &subcentroid(c, f.coarse.centroid(s as usize), reg.alpha())))
            .fold(f64::INFINITY, f64::min);
        assert!((p.distance_sq as f64 - best).abs() < 1e-4);
    }
}
