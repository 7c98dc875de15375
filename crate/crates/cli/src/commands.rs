use std::fs;
use std::path::{Path, PathBuf};

use givf_core::dataset::{exact_ground_truth, read_vecs, write_vecs, ElementKind, GroundTruth};
use givf_core::eval::{format_table, recall_vs_latency, recall_vs_r, svg_plot, sweep, write_csv, SweepOptions, SweepRow};
use givf_core::graph::{GraphParams, ProximityGraph};
use givf_core::index::{
    load_index, memory_report, save_index, BuildParams, BuildStats, GroupedIndex, MemoryReport, RegionAssignment,
};
use givf_core::kmeans::{train_kmeans, Assigner, KMeansParams};
use givf_core::search::{search, SearchParams, SearchResult};
use givf_core::VectorSet;
use log::info;

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::CliError;

const GRAPH_KMEANS_MIN_K: usize = 1 << 16;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn read_set(cfg: &RunConfig, field: &str) -> Result<VectorSet, CliError> {
    let path = cfg.input(field)?;
    let kind = ElementKind::from_path(path).ok_or_else(|| CliError::Config {
        field: field.into(),
        message: format!("{}: expected a .fvecs, .bvecs or .ivecs file", path.display()),
    })?;
    let mut set = read_vecs(path, kind)?;
    if set.is_empty() {
        return Err(CliError::Config {
            field: field.into(),
            message: format!("{} holds no vectors", path.display()),
        });
    }
    set.check_finite()?;
    if cfg.normalize {
        set.normalize_rows();
    }
    info!("{field}: {} vectors of dimension {}", set.len(), set.dim());
    Ok(set)
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))
}

fn build_params(cfg: &RunConfig) -> BuildParams {
    BuildParams {
        l: cfg.l,
        m: cfg.m,
        learn_rotation: cfg.rotation,
        grouping: cfg.grouping,
        pq_iters: cfg.pq_iters,
        opq_rounds: cfg.opq_rounds,
        pq_train_max: cfg.pq_train_max,
        assignment: RegionAssignment::Graph {
            ef_search: cfg.build_ef_search,
        },
        seed: cfg.seed,
    }
}

/// Search parameters for every (nprobe, tau, candidates) combination.
pub fn search_grid(cfg: &RunConfig) -> Vec<SearchParams> {
    let mut grid = Vec::new();
    for &nprobe in &cfg.nprobe {
        for &tau in &cfg.tau {
            for &candidates in &cfg.candidates {
                grid.push(SearchParams {
                    nprobe,
                    tau,
                    candidates,
                    top_k: cfg.top_k,
                    ef_search: cfg.ef_search,
                    rerank: cfg.rerank,
                    prune: cfg.prune,
                    memo: true,
                    exact_assignment: false,
                });
            }
        }
    }
    grid
}

#[derive(Debug)]
pub struct GtOutcome {
    pub path: PathBuf,
    pub queries: usize,
    pub neighbors: usize,
}

pub fn cmd_gt(cfg: &RunConfig) -> Result<GtOutcome, CliError> {
    let base = read_set(cfg, "base")?;
    let queries = read_set(cfg, "query")?;
    cfg.check_dim(base.dim())?;
    if cfg.gt_k > base.len() {
        return Err(CliError::Config {
            field: "gt_k".into(),
            message: format!("{} exceeds the base size {}", cfg.gt_k, base.len()),
        });
    }
    let path = cfg.gt.clone().ok_or_else(|| CliError::Config {
        field: "gt".into(),
        message: "no output path given".into(),
    })?;
    let gt = exact_ground_truth(&base, &queries, cfg.gt_k)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    gt.write_ivecs(&path)?;
    ensure_out_dir(cfg)?;
    let mut m = Manifest::new("gt", cfg);
    m.input("base", cfg.input("base")?)?;
    m.input("query", cfg.input("query")?)?;
    m.output("gt", &path)?;
    m.write(&cfg.manifest_path("gt"))?;
    Ok(GtOutcome {
        path,
        queries: gt.query_count,
        neighbors: gt.neighbors_per_query,
    })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub coarse_path: PathBuf,
    pub trained_path: PathBuf,
    pub distortions: Vec<f64>,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let learn = read_set(cfg, "learn")?;
    cfg.check_dim(learn.dim())?;
    if cfg.k > learn.len() {
        return Err(CliError::Config {
            field: "k".into(),
            message: format!("{} exceeds the learning set size {}", cfg.k, learn.len()),
        });
    }
    ensure_out_dir(cfg)?;
    let assigner = match cfg.kmeans_assigner.as_str() {
        "exact" => Assigner::Exact,
        "graph" => Assigner::graph_default(),
        _ if cfg.k >= GRAPH_KMEANS_MIN_K => Assigner::graph_default(),
        _ => Assigner::Exact,
    };
    info!("k-means: K={} iters={} assigner={assigner:?}", cfg.k, cfg.kmeans_iters);
    let (coarse, report) = train_kmeans(
        &learn,
        &KMeansParams {
            k: cfg.k,
            iters: cfg.kmeans_iters,
            seed: cfg.seed,
            assigner,
        },
    )?;
    info!("building the centroid graph");
    let graph = ProximityGraph::build(
        coarse.centroids(),
        &GraphParams {
            max_links: cfg.max_links,
            ef_construction: cfg.ef_construction,
            seed: cfg.seed,
        },
    )?;
    write_vecs(coarse.centroids(), cfg.coarse_path(), ElementKind::Float32)?;
    info!("learning alphas, PQ and the constant quantizer");
    let trained = GroupedIndex::train(coarse, graph, &learn, &build_params(cfg))?;
    save_index(&trained, cfg.trained_path())?;

    let mut m = Manifest::new("train", cfg);
    m.input("learn", cfg.input("learn")?)?;
    m.output("coarse", &cfg.coarse_path())?;
    m.output("trained", &cfg.trained_path())?;
    m.write(&cfg.manifest_path("train"))?;
    Ok(TrainOutcome {
        coarse_path: cfg.coarse_path(),
        trained_path: cfg.trained_path(),
        distortions: report.distortions,
    })
}

#[derive(Debug)]
pub struct BuildOutcome {
    pub index_path: PathBuf,
    pub stats: BuildStats,
    pub memory: MemoryReport,
}

pub fn cmd_build(cfg: &RunConfig) -> Result<BuildOutcome, CliError> {
    let trained_path = cfg.trained_path();
    if !trained_path.is_file() {
        return Err(CliError::Config {
            field: "out_dir".into(),
            message: format!("{} not found; run `givf train` first", trained_path.display()),
        });
    }
    let base = read_set(cfg, "base")?;
    cfg.check_dim(base.dim())?;
    let mut index = load_index(&trained_path)?;
    if index.grouping() != cfg.grouping || index.m() != cfg.m || index.k() != cfg.k {
        return Err(CliError::Config {
            field: "grouping".into(),
            message: "trained artifacts do not match the configuration; retrain".into(),
        });
    }
    info!("encoding {} base vectors", base.len());
    let stats = index.add_base(
        &base,
        RegionAssignment::Graph {
            ef_search: cfg.build_ef_search,
        },
    )?;
    index.validate()?;
    let path = cfg.index_path();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    save_index(&index, &path)?;
    let memory = memory_report(&index);

    ensure_out_dir(cfg)?;
    let mut m = Manifest::new("build", cfg);
    m.input("base", cfg.input("base")?)?;
    m.input("trained", &trained_path)?;
    m.output("index", &path)?;
    m.write(&cfg.manifest_path("build"))?;
    Ok(BuildOutcome {
        index_path: path,
        stats,
        memory,
    })
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub rows: Vec<SweepRow>,
    pub csv_path: PathBuf,
    pub summary: String,
}

/// Structural checks on a handful of queries: sorted distinct results and
/// no effect from the pruning path at `tau = 1`.
fn self_check(index: &GroupedIndex, queries: &VectorSet, grid: &[SearchParams]) -> Result<(), CliError> {
    index.validate().map_err(|e| CliError::SelfCheck(e.to_string()))?;
    let Some(first) = grid.first() else {
        return Ok(());
    };
    let full = SearchParams { tau: 1.0, ..*first };
    let unpruned = SearchParams { prune: false, ..full };
    for q in queries.rows().take(16) {
        let a = search(index, q, &full)?;
        let b = search(index, q, &unpruned)?;
        if !a.same_results(&b) {
            return Err(CliError::SelfCheck("tau = 1 differs from the unpruned path".into()));
        }
        check_result(&a)?;
    }
    Ok(())
}

fn check_result(r: &SearchResult) -> Result<(), CliError> {
    if r.distances.windows(2).any(|w| w[0] > w[1]) {
        return Err(CliError::SelfCheck("result distances are not ascending".into()));
    }
    let mut ids = r.ids.clone();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::SelfCheck("duplicate ids in a result".into()));
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalOutcome, CliError> {
    let index_path = cfg.index_path();
    let index = load_index(&index_path)?;
    let queries = read_set(cfg, "query")?;
    if queries.dim() != index.dim() {
        return Err(CliError::Config {
            field: "query".into(),
            message: format!("dimension {} does not match the index ({})", queries.dim(), index.dim()),
        });
    }
    let gt = GroundTruth::read_ivecs(cfg.input("gt")?)?;
    if gt.query_count != queries.len() {
        return Err(CliError::Config {
            field: "gt".into(),
            message: format!("{} ground-truth rows for {} queries", gt.query_count, queries.len()),
        });
    }
    if gt.ids.iter().any(|&id| id as usize >= index.len()) {
        return Err(CliError::Config {
            field: "gt".into(),
            message: "ground truth references ids outside the index".into(),
        });
    }
    if let Some(&p) = cfg.nprobe.iter().find(|&&p| p > index.k()) {
        return Err(CliError::Config {
            field: "nprobe".into(),
            message: format!("{p} exceeds the index's K={}", index.k()),
        });
    }
    let grid = search_grid(cfg);
    self_check(&index, &queries, &grid)?;
    let opts = SweepOptions {
        recall_at: cfg.recall_at.clone(),
        timing: cfg.timing,
        runs: cfg.runs,
    };
    let rows = sweep(&index, &queries, &gt, &grid, &opts)?;

    ensure_out_dir(cfg)?;
    let csv_path = cfg.csv_path();
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf)?;
    fs::write(&csv_path, buf).map_err(io_err(&csv_path))?;
    let summary = format_table(&rows);
    let summary_path = cfg.out_dir.join("eval.txt");
    fs::write(&summary_path, &summary).map_err(io_err(&summary_path))?;

    let mut m = Manifest::new("eval", cfg);
    m.input("index", &index_path)?;
    m.input("query", cfg.input("query")?)?;
    m.input("gt", cfg.input("gt")?)?;
    m.output("csv", &csv_path)?;
    if cfg.plot {
        let path = cfg.out_dir.join("recall_vs_r.svg");
        let svg = svg_plot(&recall_vs_r(&rows), "R (candidate list length)", "recall@R", true);
        fs::write(&path, svg).map_err(io_err(&path))?;
        m.output("plot_recall_r", &path)?;
        if cfg.timing {
            let r = cfg.recall_at[cfg.recall_at.len().min(2) - 1];
            let path = cfg.out_dir.join("recall_vs_latency.svg");
            let svg = svg_plot(&recall_vs_latency(&rows, r), "ms / query", &format!("recall@{r}"), false);
            fs::write(&path, svg).map_err(io_err(&path))?;
        }
    }
    m.write(&cfg.manifest_path("eval"))?;
    Ok(EvalOutcome { rows, csv_path, summary })
}

pub fn cmd_search(cfg: &RunConfig) -> Result<SearchResult, CliError> {
    let index = load_index(cfg.index_path())?;
    let queries = read_set(cfg, "query")?;
    if cfg.query_index >= queries.len() {
        return Err(CliError::Config {
            field: "query_index".into(),
            message: format!("{} is past the {} queries in the file", cfg.query_index, queries.len()),
        });
    }
    let params = search_grid(cfg)[0];
    Ok(search(&index, queries.row(cfg.query_index), &params)?)
}

/// Header fields and the memory report of an index file.
pub fn cmd_info(path: &Path) -> Result<String, CliError> {
    let index = load_index(path)?;
    let rot = if index.pq().rotation().is_some() { "yes" } else { "no" };
    let mut s = format!(
        "file       {}\nD          {}\nK          {}\nM          {}\nL          {}\ngrouping   {}\nrotation   {rot}\npoints     {}\ndataset    {:016x}\n\n",
        path.display(),
        index.dim(),
        index.k(),
        index.m(),
        index.l(),
        index.grouping(),
        index.len(),
        index.dataset_hash(),
    );
    s.push_str(&memory_report(&index).to_string());
    Ok(s)
}
