use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use givf_cli::config::{load_config, process_env, KEYS};
use givf_cli::{cmd_build, cmd_eval, cmd_gt, cmd_info, cmd_search, cmd_train, CliError, RunConfig};

/// Inverted-file nearest-neighbor index with subcentroid grouping and
/// pruning.
///
/// Settings are read from an optional flat TOML file (`--config`), then
/// `GIVF_<KEY>` environment variables, then flags; later sources win.
#[derive(Parser, Debug)]
#[command(name = "givf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Exact ground truth for the query set, written as .ivecs.
    Gt(Opts),
    /// Train the coarse codebook, centroid graph, alphas and PQ on the learning set.
    Train(Opts),
    /// Encode the base set with the trained artifacts and write the index.
    Build(Opts),
    /// Run the parameter sweep and write CSV, summary and plots.
    Eval(Opts),
    /// Answer one query from the query file.
    Search(Opts),
    /// Print header fields and the memory report of an index file.
    Info {
        /// Index file.
        path: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
struct Opts {
    /// Flat TOML configuration file.
    #[arg(short, long, env = "GIVF_CONFIG")]
    config: Option<PathBuf>,
    /// Base vectors (.fvecs/.bvecs/.ivecs).
    #[arg(long)]
    base: Option<String>,
    /// Learning vectors.
    #[arg(long)]
    learn: Option<String>,
    /// Query vectors.
    #[arg(long)]
    query: Option<String>,
    /// Ground-truth .ivecs file.
    #[arg(long)]
    gt: Option<String>,
    /// Directory for artifacts, manifests and reports.
    #[arg(long)]
    out_dir: Option<String>,
    /// Index file (default: <out_dir>/index.givf).
    #[arg(long)]
    index: Option<String>,
    /// Coarse codebook size K.
    #[arg(short = 'k', long)]
    k: Option<String>,
    /// Bytes per PQ code M.
    #[arg(short = 'm', long)]
    m: Option<String>,
    /// Subcentroids per region L.
    #[arg(short = 'l', long)]
    l: Option<String>,
    /// Pruning fractions, comma separated, each in (0, 1].
    #[arg(long)]
    tau: Option<String>,
    /// Regions visited per query, comma separated.
    #[arg(long)]
    nprobe: Option<String>,
    /// Candidate-list lengths, comma separated.
    #[arg(long)]
    candidates: Option<String>,
    /// Graph beam width at query time.
    #[arg(long)]
    ef_search: Option<String>,
    /// Seed for every randomized step.
    #[arg(long)]
    seed: Option<String>,
    /// Disable subcentroid grouping (plain inverted index).
    #[arg(long)]
    no_grouping: bool,
    /// Disable subregion pruning.
    #[arg(long)]
    no_prune: bool,
    /// Disable the learned PQ rotation.
    #[arg(long)]
    no_rotation: bool,
    /// L2-normalize every vector on load.
    #[arg(long)]
    normalize: bool,
    /// Measure single-threaded per-query latency.
    #[arg(long)]
    timing: bool,
    /// Write SVG plots next to the CSV.
    #[arg(long)]
    plot: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<String>,
    /// Any other key, as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Opts {
    fn overrides(&self) -> Result<Vec<(String, String)>, CliError> {
        let mut out = Vec::new();
        let named = [
            ("base", &self.base),
            ("learn", &self.learn),
            ("query", &self.query),
            ("gt", &self.gt),
            ("out_dir", &self.out_dir),
            ("index", &self.index),
            ("k", &self.k),
            ("m", &self.m),
            ("l", &self.l),
            ("tau", &self.tau),
            ("nprobe", &self.nprobe),
            ("candidates", &self.candidates),
            ("ef_search", &self.ef_search),
            ("seed", &self.seed),
            ("threads", &self.threads),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                out.push((key.to_string(), v.clone()));
            }
        }
        for (key, flag, value) in [
            ("grouping", self.no_grouping, "false"),
            ("prune", self.no_prune, "false"),
            ("rotation", self.no_rotation, "false"),
            ("normalize", self.normalize, "true"),
            ("timing", self.timing, "true"),
            ("plot", self.plot, "true"),
        ] {
            if flag {
                out.push((key.to_string(), value.to_string()));
            }
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config {
                field: kv.clone(),
                message: format!("expected KEY=VALUE; keys: {}", KEYS.join(", ")),
            })?;
            out.push((k.trim().to_string(), v.to_string()));
        }
        Ok(out)
    }

    fn load(&self) -> Result<RunConfig, CliError> {
        let cfg = load_config(self.config.as_deref(), &process_env(), &self.overrides()?)?;
        if let Some(n) = cfg.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::SelfCheck(format!("thread pool: {e}")))?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gt(o) => {
            let out = cmd_gt(&o.load()?)?;
            println!("wrote {} ({} queries x {} neighbors)", out.path.display(), out.queries, out.neighbors);
        }
        Command::Train(o) => {
            let out = cmd_train(&o.load()?)?;
            if let Some(d) = out.distortions.last() {
                println!("final k-means distortion {d:.6}");
            }
            println!("wrote {} and {}", out.coarse_path.display(), out.trained_path.display());
        }
        Command::Build(o) => {
            let out = cmd_build(&o.load()?)?;
            println!(
                "indexed {} points, mean displacement {:.6}, {} empty regions, {} clamped constants",
                out.stats.points, out.stats.mean_displacement_norm, out.stats.empty_regions, out.stats.clamped_consts
            );
            print!("{}", out.memory);
            println!("wrote {}", out.index_path.display());
        }
        Command::Eval(o) => {
            let out = cmd_eval(&o.load()?)?;
            print!("{}", out.summary);
            println!("wrote {}", out.csv_path.display());
        }
        Command::Search(o) => {
            let res = cmd_search(&o.load()?)?;
            for (rank, (id, d)) in res.ids.iter().zip(&res.distances).enumerate() {
                println!("{rank:>4} {id:>10} {d:.6}");
            }
            let s = res.stats;
            println!(
                "regions {} subregions {}/{} pruned {} codes {} in {:?}",
                s.regions_visited,
                s.subregions_visited,
                s.subregions_considered,
                s.subregions_pruned,
                s.codes_scanned,
                s.elapsed
            );
        }
        Command::Info { path } => print!("{}", cmd_info(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
