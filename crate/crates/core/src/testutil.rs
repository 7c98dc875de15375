//! Small fixtures shared by unit tests.

use crate::dataset::synth_clustered;
use crate::graph::{GraphParams, ProximityGraph};
use crate::index::{build_index, BuildParams, GroupedIndex, RegionAssignment};
use crate::kmeans::{train_kmeans, Assigner, CoarseCodebook, KMeansParams};
use crate::VectorSet;

pub struct Fixture {
    pub base: VectorSet,
    pub learn: VectorSet,
    pub queries: VectorSet,
    pub coarse: CoarseCodebook,
    pub graph: ProximityGraph,
}

pub fn fixture(n: usize, dim: usize, k: usize, seed: u64) -> Fixture {
    let all = synth_clustered(n + 2000 + 50, dim, 40, 0.08, seed).unwrap();
    let base = all.select(&(0..n).collect::<Vec<_>>());
    let learn = all.select(&(n..n + 2000).collect::<Vec<_>>());
    let queries = all.select(&(n + 2000..n + 2050).collect::<Vec<_>>());
    let (coarse, _) = train_kmeans(
        &learn,
        &KMeansParams {
            k,
            iters: 8,
            seed,
            assigner: Assigner::Exact,
        },
    )
    .unwrap();
    let graph = ProximityGraph::build(
        coarse.centroids(),
        &GraphParams {
            max_links: 16,
            ef_construction: 64,
            seed,
        },
    )
    .unwrap();
    Fixture {
        base,
        learn,
        queries,
        coarse,
        graph,
    }
}

pub fn small_params(grouping: bool) -> BuildParams {
    BuildParams {
        l: 6,
        m: 4,
        learn_rotation: true,
        grouping,
        pq_iters: 6,
        opq_rounds: 2,
        pq_train_max: 4096,
        assignment: RegionAssignment::Exact,
        seed: 3,
    }
}

pub fn build(f: &Fixture, params: &BuildParams) -> GroupedIndex {
    build_index(&f.base, f.coarse.clone(), f.graph.clone(), &f.learn, params)
        .unwrap()
        .0
}
