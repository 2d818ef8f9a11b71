//! Command-line front end: `simulate`, `build-map`, `localize`, `evaluate`, `plot`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cloud::PreprocessConfig;
use crate::dataset::{read_queries, read_trajectory, write_csv, write_queries, write_trajectory};
use crate::error::{LockitError, Result};
use crate::eval::{aggregate, format_table, read_errors, Regions};
use crate::features::{FeatureBackend, FileBackend, SyntheticBackend};
use crate::pipeline::{run_localization, LocalizationConfig, ERRORS_FILE};
use crate::plot::plot_run;
use crate::registration::FineMethod;
use crate::sim::ScenarioConfig;
use crate::topo_map::{build_map, TopoMap, TrajectoryScan};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

/// Process exit code for an error: bad settings, bad or missing input data, or
/// a failure while computing.
pub fn exit_code(e: &LockitError) -> i32 {
    use LockitError::*;
    match e {
        InvalidConfig(_) | BTooLarge { .. } | ExtentTooSmall(_) => EXIT_CONFIG,
        Io { .. } | Parse { .. } | Format { .. } | EmptyInput(_) | EmptyTrajectory | EmptyMap | EmptyCloud
        | DimensionMismatch { .. } | BackendUnavailable(_) | TooShort { .. } => EXIT_DATA,
        _ => EXIT_RUNTIME,
    }
}

#[derive(Debug, Parser)]
#[command(name = "lockit", version, about = "Coarse-to-fine LiDAR localization on topological maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world with a mapping run and query sessions.
    Simulate(SimulateArgs),
    /// Build a topological map from one or more mapping trajectories.
    BuildMap(BuildMapArgs),
    /// Run coarse and fine localization over a query session.
    Localize(LocalizeArgs),
    /// Aggregate per-query errors of one or more runs into tables.
    Evaluate(EvaluateArgs),
    /// Render particle snapshots, trajectories and error histograms of a run.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendKind {
    /// Handcrafted descriptors computed from the clouds.
    Synthetic,
    /// Precomputed LDSC descriptor files.
    File,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    pub backend: BackendKind,
    /// Directory of `<scan>.g.ldsc` / `<scan>.l.ldsc` files for the file backend.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long, default_value_t = crate::features::NETWORK_GLOBAL_DIM)]
    pub global_dim: usize,
    #[arg(long, default_value_t = crate::features::NETWORK_LOCAL_DIM)]
    pub local_dim: usize,
}

impl BackendArgs {
    fn backend(&self) -> Result<Arc<dyn FeatureBackend>> {
        match self.backend {
            BackendKind::Synthetic => Ok(Arc::new(SyntheticBackend::new())),
            BackendKind::File => {
                let dir = self
                    .features
                    .clone()
                    .ok_or_else(|| LockitError::InvalidConfig("--backend file needs --features DIR".into()))?;
                if !dir.is_dir() {
                    return Err(LockitError::io(&dir, std::io::Error::from(std::io::ErrorKind::NotFound)));
                }
                Ok(Arc::new(FileBackend::new(dir).with_dims(self.global_dim, self.local_dim)))
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON scenario file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub obstacles: Option<usize>,
    #[arg(long)]
    pub map_scans: Option<usize>,
    /// Number of query sessions.
    #[arg(long, default_value_t = 1)]
    pub sessions: u64,
    /// Scans per query session.
    #[arg(long)]
    pub query_steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildMapArgs {
    /// Trajectory directory or pose CSV; repeat to merge several runs.
    #[arg(long, required = true)]
    pub trajectory: Vec<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub spacing: f64,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// JSON localization config; only its preprocessing section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, value_parser = parse_method)]
    pub fine: Option<FineMethod>,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// JSON localization config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub retrieval_depth: Option<usize>,
    #[arg(long)]
    pub sigma_l: Option<f64>,
    #[arg(long)]
    pub sigma_m: Option<f64>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// Session label used in error records; defaults to the query directory name.
    #[arg(long)]
    pub session: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directories or error CSV files.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// JSON region polygons for segment tagging.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Run directory or its trace CSV.
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_method(s: &str) -> std::result::Result<FineMethod, String> {
    s.parse().map_err(|e: LockitError| e.to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| LockitError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => LockitError::InvalidConfig(format!("{}: {e}", path.display())),
        _ => LockitError::parse(path, e.line(), e.to_string()),
    })
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::BuildMap(a) => build(a),
        Command::Localize(a) => localize(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Plot(a) => plot(a),
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg: ScenarioConfig = a.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
    if let Some(s) = a.seed {
        cfg.world_seed = s;
    }
    if let Some(n) = a.obstacles {
        cfg.obstacles = n;
    }
    if let Some(n) = a.map_scans {
        cfg.map_scans = n;
    }
    if let Some(n) = a.query_steps {
        cfg.query.steps = n;
    }
    let world = cfg.world()?;
    fs::create_dir_all(&a.out).map_err(|e| LockitError::io(&a.out, e))?;
    let path = a.out.join("world.json");
    fs::write(&path, world.to_json()).map_err(|e| LockitError::io(&path, e))?;
    crate::pipeline::write_json(&a.out.join("scenario.json"), &cfg)?;

    let mapping = cfg.mapping(&world);
    let (poses, ids, clouds) = unzip_scans(&mapping)?;
    write_trajectory(&a.out.join("mapping"), &poses, &ids, &clouds)?;
    println!("mapping: {} scans over {:.1} m of route", mapping.len(), world.route.length());

    for s in 0..a.sessions {
        let q = cfg.session(&world, s)?;
        let ids: Vec<String> = q.iter().map(|x| x.id.clone()).collect();
        let odo: Vec<_> = q.iter().skip(1).map(|x| x.odometry).collect();
        let clouds = q.iter().map(|x| x.cloud.load()).collect::<Result<Vec<_>>>()?;
        let truth: Vec<_> = q.iter().filter_map(|x| x.truth).collect();
        write_queries(&a.out.join(format!("session_{s:02}")), &ids, &odo, &clouds, Some(&truth))?;
    }
    println!("queries: {} sessions of {} scans", a.sessions, cfg.query.steps + 1);
    Ok(())
}

type Unzipped = (Vec<crate::geometry::Pose2>, Vec<String>, Vec<Arc<crate::cloud::PointCloud>>);

fn unzip_scans(scans: &[TrajectoryScan]) -> Result<Unzipped> {
    let poses = scans.iter().map(|s| s.pose).collect();
    let ids = scans.iter().map(|s| s.scan_id.clone()).collect();
    let clouds = scans.iter().map(|s| s.cloud.load()).collect::<Result<Vec<_>>>()?;
    Ok((poses, ids, clouds))
}

fn build(a: BuildMapArgs) -> Result<()> {
    let preprocess = match &a.config {
        Some(p) => read_json::<LocalizationConfig>(p)?.preprocess,
        None => PreprocessConfig::default(),
    };
    preprocess.validate()?;
    let backend = a.backend.backend()?;
    let mut scans = Vec::new();
    for t in &a.trajectory {
        scans.extend(read_trajectory(t)?);
    }
    let map = build_map(&scans, a.spacing, backend.as_ref(), &preprocess)?;
    map.save(&a.out)?;
    println!("{} nodes from {} scans", map.len(), scans.len());
    Ok(())
}

/// Localization config from the optional file with flag overrides applied.
pub fn localization_config(a: &LocalizeArgs) -> Result<LocalizationConfig> {
    let mut cfg: LocalizationConfig = a.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
    if let Some(m) = a.fine {
        cfg.method = m;
    }
    if let Some(s) = a.seed {
        cfg.mcl.seed = s;
    }
    if let Some(m) = a.particles {
        cfg.mcl.particles = Some(m);
    }
    if let Some(b) = a.retrieval_depth {
        cfg.mcl.retrieval_depth = b;
    }
    if let Some(v) = a.sigma_l {
        cfg.mcl.sigma_l = v;
    }
    if let Some(v) = a.sigma_m {
        cfg.mcl.sigma_m = v;
    }
    if let Some(v) = a.burn_in {
        cfg.mcl.burn_in_iters = v;
    }
    if let Some(s) = &a.session {
        cfg.session = s.clone();
    } else if cfg.session == LocalizationConfig::default().session {
        if let Some(name) = a.queries.file_name() {
            cfg.session = name.to_string_lossy().into_owned();
        }
    }
    cfg.mcl.validate()?;
    cfg.preprocess.validate()?;
    Ok(cfg)
}

fn localize(a: LocalizeArgs) -> Result<()> {
    let cfg = localization_config(&a)?;
    let backend = a.backend.backend()?;
    let map = Arc::new(TopoMap::load(&a.map)?);
    if map.backend_name() != backend.name() {
        return Err(LockitError::InvalidConfig(format!(
            "map was built with the '{}' backend, localizing with '{}'",
            map.backend_name(),
            backend.name()
        )));
    }
    let queries = read_queries(&a.queries)?;
    let out = run_localization(map, backend, &queries, &cfg)?;
    out.write(&a.out, &cfg)?;
    crate::pipeline::write_json(&a.out.join("config.json"), &cfg)?;
    let s = out.summary(&cfg);
    println!("{} iterations, {} scored queries", s.iterations, s.scored_queries);
    for (name, sum) in [("coarse", s.coarse), (cfg.method.as_str(), s.fine)] {
        if let Some(sum) = sum {
            println!("{name}: median {:.3} m, mean {:.3} m", sum.median, sum.mean);
        }
    }
    match out.failure {
        Some(f) => Err(LockitError::Aborted(format!("{f}; partial outputs in {}", a.out.display()))),
        None => Ok(()),
    }
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut records = Vec::new();
    for r in &a.runs {
        let path = if r.is_dir() { r.join(ERRORS_FILE) } else { r.clone() };
        records.extend(read_errors(&path)?);
    }
    let regions = a.regions.as_deref().map(Regions::load).transpose()?;
    let rows = aggregate(&records, regions.as_ref())?;
    let text = format_table(&rows);
    print!("{text}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| LockitError::io(out, e))?;
        write_csv(&out.join("table.csv"), &rows)?;
        let p = out.join("table.txt");
        fs::write(&p, &text).map_err(|e| LockitError::io(&p, e))?;
    }
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    let dir = if a.trace.is_dir() {
        a.trace.clone()
    } else {
        a.trace.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    for p in plot_run(&dir, &a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}
