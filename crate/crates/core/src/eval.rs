//! Recall@R evaluation, parameter sweeps and their CSV / SVG output.

use std::fmt::Write as _;
use std::io;

use crate::dataset::GroundTruth;
use crate::error::{Error, Result};
use crate::index::GroupedIndex;
use crate::search::{search_batch, search_sequential, SearchParams, SearchResult};
use crate::VectorSet;

/// Fraction of queries whose true nearest neighbor is among the first
/// `min(r, len)` results.
pub fn recall_at_r(results: &[SearchResult], gt: &GroundTruth, r: usize) -> Result<f64> {
    if results.len() != gt.query_count {
        return Err(Error::param(
            "ground truth",
            format!("{} queries, {} result lists", gt.query_count, results.len()),
        ));
    }
    if results.is_empty() {
        return Err(Error::Empty("recall over zero queries"));
    }
    if gt.neighbors_per_query == 0 {
        return Err(Error::param("ground truth", "no neighbors per query"));
    }
    let hits = results
        .iter()
        .enumerate()
        .filter(|(q, res)| {
            let truth = gt.neighbors(*q)[0];
            res.ids.iter().take(r).any(|&id| id == truth)
        })
        .count();
    Ok(hits as f64 / results.len() as f64)
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub recall_at: Vec<usize>,
    /// Measure per-query latency on one thread.
    pub timing: bool,
    /// Timed repetitions; the median of the per-run means is reported.
    pub runs: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            recall_at: vec![1, 10, 100],
            timing: false,
            runs: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub params: SearchParams,
    /// `(R, recall@R)` in the order requested.
    pub recalls: Vec<(usize, f64)>,
    pub latency_ms: Option<f64>,
    pub codes_scanned: f64,
    pub subregions_visited: f64,
    pub subregions_pruned: f64,
}

impl SweepRow {
    pub fn recall(&self, r: usize) -> Option<f64> {
        self.recalls.iter().find(|&&(rr, _)| rr == r).map(|&(_, v)| v)
    }
}

fn mean_of(results: &[SearchResult], f: impl Fn(&SearchResult) -> usize) -> f64 {
    results.iter().map(|r| f(r) as f64).sum::<f64>() / results.len().max(1) as f64
}

pub fn sweep(
    index: &GroupedIndex,
    queries: &VectorSet,
    gt: &GroundTruth,
    grid: &[SearchParams],
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Ok(Vec::new());
    }
    if gt.query_count != queries.len() {
        return Err(Error::param(
            "ground truth",
            format!("{} queries in ground truth, {} in the query set", gt.query_count, queries.len()),
        ));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for params in grid {
        let (results, latency_ms) = if opts.timing {
            let mut per_run = Vec::new();
            let mut last = Vec::new();
            for _ in 0..opts.runs.max(1) {
                last = search_sequential(index, queries, params)?;
                let total: f64 = last.iter().map(|r| r.stats.elapsed.as_secs_f64()).sum();
                per_run.push(total * 1e3 / last.len().max(1) as f64);
            }
            per_run.sort_by(f64::total_cmp);
            (last, Some(per_run[per_run.len() / 2]))
        } else {
            (search_batch(index, queries, params)?, None)
        };
        let recalls = opts
            .recall_at
            .iter()
            .map(|&r| recall_at_r(&results, gt, r).map(|v| (r, v)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(SweepRow {
            params: *params,
            recalls,
            latency_ms,
            codes_scanned: mean_of(&results, |r| r.stats.codes_scanned),
            subregions_visited: mean_of(&results, |r| r.stats.subregions_visited),
            subregions_pruned: mean_of(&results, |r| r.stats.subregions_pruned),
        });
    }
    Ok(rows)
}

pub const CSV_HEADER: [&str; 7] = ["nprobe", "tau", "candidates", "R", "recall", "latency_ms", "codes_scanned"];

/// One record per (grid point, R). The latency field is empty when timing
/// was off, so untimed output is reproducible byte for byte.
pub fn write_csv<W: io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for row in rows {
        for &(r, recall) in &row.recalls {
            w.write_record([
                row.params.nprobe.to_string(),
                row.params.tau.to_string(),
                row.params.candidates.to_string(),
                r.to_string(),
                format!("{recall:.6}"),
                row.latency_ms.map(|v| format!("{v:.4}")).unwrap_or_default(),
                format!("{:.2}", row.codes_scanned),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Invariant(format!("csv: {other:?}")),
    }
}

/// Fixed-width summary, one line per grid point.
pub fn format_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let rs: Vec<usize> = rows.first().map(|r| r.recalls.iter().map(|&(r, _)| r).collect()).unwrap_or_default();
    let _ = write!(s, "{:>7} {:>5} {:>10}", "nprobe", "tau", "cands");
    for r in &rs {
        let _ = write!(s, " {:>9}", format!("R@{r}"));
    }
    let _ = writeln!(s, " {:>10} {:>12}", "ms/query", "codes");
    for row in rows {
        let _ = write!(s, "{:>7} {:>5} {:>10}", row.params.nprobe, row.params.tau, row.params.candidates);
        for &(_, v) in &row.recalls {
            let _ = write!(s, " {v:>9.4}");
        }
        let lat = row.latency_ms.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(s, " {lat:>10} {:>12.1}", row.codes_scanned);
    }
    s
}

/// A named polyline for [`svg_plot`].
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Recall against R, one series per grid point.
pub fn recall_vs_r(rows: &[SweepRow]) -> Vec<Series> {
    rows.iter()
        .map(|row| Series {
            name: format!("nprobe={} tau={} cand={}", row.params.nprobe, row.params.tau, row.params.candidates),
            points: row.recalls.iter().map(|&(r, v)| (r as f64, v)).collect(),
        })
        .collect()
}

/// Recall@`r` against latency, one series per `tau`.
pub fn recall_vs_latency(rows: &[SweepRow], r: usize) -> Vec<Series> {
    let mut taus: Vec<f32> = rows.iter().map(|row| row.params.tau).collect();
    taus.sort_by(f32::total_cmp);
    taus.dedup();
    taus.into_iter()
        .map(|tau| {
            let mut points: Vec<(f64, f64)> = rows
                .iter()
                .filter(|row| row.params.tau == tau)
                .filter_map(|row| Some((row.latency_ms?, row.recall(r)?)))
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                name: format!("tau={tau}"),
                points,
            }
        })
        .filter(|s| !s.points.is_empty())
        .collect()
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Minimal line chart. Recall axes run from 0 to 1.
pub fn svg_plot(series: &[Series], x_label: &str, y_label: &str, log_x: bool) -> String {
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let tx = |x: f64| if log_x { x.max(1e-12).log10() } else { x };
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| tx(p.0))).collect();
    let (mut x0, mut x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let px = |x: f64| pad + (tx(x) - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - y.clamp(0.0, 1.0) * (h - 2.0 * pad);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.1}</text>"#, pad - 6.0, py(y) + 4.0);
    }
    for i in 0..=4 {
        let t = x0 + (x1 - x0) * i as f64 / 4.0;
        let label = if log_x { format!("{:.0}", 10f64.powf(t)) } else { format!("{t:.3}") };
        let x = pad + (t - x0) / (x1 - x0) * (w - 2.0 * pad);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{label}</text>"#, h - pad + 18.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        let ly = pad + 16.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly:.1}" fill="{color}">{}</text>"#, pad + 10.0, escape(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::exact_ground_truth;
    use crate::testutil::{build, fixture, small_params};

    fn result(ids: &[u32]) -> SearchResult {
        SearchResult {
            ids: ids.to_vec(),
            distances: (0..ids.len()).map(|i| i as f32).collect(),
            stats: Default::default(),
        }
    }

    fn gt(rows: &[&[u32]]) -> GroundTruth {
        GroundTruth {
            query_count: rows.len(),
            neighbors_per_query: rows[0].len(),
            ids: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    #[test]
    fn recall_cases() {
        let truth = gt(&[&[3, 1], &[7, 2], &[0, 5]]);
        let perfect = vec![result(&[3, 1]), result(&[7, 2]), result(&[0, 5])];
        for r in [1, 2, 10] {
            assert_eq!(recall_at_r(&perfect, &truth, r).unwrap(), 1.0);
        }
        let disjoint = vec![result(&[9]), result(&[9]), result(&[9])];
        assert_eq!(recall_at_r(&disjoint, &truth, 100).unwrap(), 0.0);
        let partial = vec![result(&[1, 3]), result(&[2, 4, 7]), result(&[])];
        assert_eq!(recall_at_r(&partial, &truth, 1).unwrap(), 0.0);
        assert_eq!(recall_at_r(&partial, &truth, 2).unwrap(), 1.0 / 3.0);
        assert_eq!(recall_at_r(&partial, &truth, 3).unwrap(), 2.0 / 3.0);
        assert!(recall_at_r(&partial[..2], &truth, 1).is_err());
    }

    #[test]
    fn recall_is_monotone_in_r() {
        let truth = gt(&[&[4], &[8], &[1], &[6]]);
        let res = vec![result(&[5, 4]), result(&[1, 2, 3, 8]), result(&[1]), result(&[0, 9, 7])];
        let mut last = 0.0;
        for r in 0..8 {
            let v = recall_at_r(&res, &truth, r).unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn sweep_is_monotone_in_nprobe_and_deterministic() {
        let f = fixture(4000, 16, 32, 21);
        let index = build(&f, &small_params(true));
        let truth = exact_ground_truth(&f.base, &f.queries, 1).unwrap();
        let grid: Vec<SearchParams> = [1, 2, 4, 8, 16, 32]
            .iter()
            .map(|&nprobe| SearchParams {
                nprobe,
                tau: 1.0,
                candidates: 4000,
                top_k: 100,
                ..Default::default()
            })
            .collect();
        let rows = sweep(&index, &f.queries, &truth, &grid, &SweepOptions::default()).unwrap();
        for r in [1, 10, 100] {
            for w in rows.windows(2) {
                assert!(w[1].recall(r).unwrap() >= w[0].recall(r).unwrap());
            }
        }
        let again = sweep(&index, &f.queries, &truth, &grid, &SweepOptions::default()).unwrap();
        assert_eq!(rows, again);
        let mut a = Vec::new();
        write_csv(&rows, &mut a).unwrap();
        let mut b = Vec::new();
        write_csv(&again, &mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().count(), 1 + grid.len() * 3);
        assert!(text.starts_with("nprobe,tau,candidates,R,recall,latency_ms,codes_scanned\n"));
        assert!(sweep(&index, &f.queries, &truth, &[], &SweepOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn tau_grid_gives_two_rows_per_r() {
        let f = fixture(3000, 16, 32, 22);
        let index = build(&f, &small_params(true));
        let truth = exact_ground_truth(&f.base, &f.queries, 1).unwrap();
        let grid: Vec<SearchParams> = [0.5, 1.0]
            .iter()
            .map(|&tau| SearchParams {
                nprobe: 4,
                tau,
                ..Default::default()
            })
            .collect();
        let opts = SweepOptions {
            timing: true,
            runs: 1,
            ..Default::default()
        };
        let rows = sweep(&index, &f.queries, &truth, &grid, &opts).unwrap();
        assert!(rows.iter().all(|r| r.latency_ms.is_some()));
        assert!(rows[0].codes_scanned <= rows[1].codes_scanned);
        let mut out = Vec::new();
        write_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        for r in ["1", "10", "100"] {
            let n = text.lines().filter(|l| l.split(',').nth(3) == Some(r)).count();
            assert_eq!(n, 2);
        }
        let svg = svg_plot(&recall_vs_latency(&rows, 10), "ms", "recall@10", false);
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
        assert!(format_table(&rows).lines().count() == 3);
        let truth_short = exact_ground_truth(&f.base, &f.queries.head(10), 1).unwrap();
        assert!(sweep(&index, &f.queries, &truth_short, &grid, &opts).is_err());
    }
}
