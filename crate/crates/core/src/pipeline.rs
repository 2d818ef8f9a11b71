//! Localization runs: the particle filter at a fixed travelled-distance cadence,
//! fine registration on every filter iteration, and the files a run leaves behind.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cloud::{preprocess_for_descriptor, PreprocessConfig};
use crate::dataset::{write_csv, QueryScan};
use crate::error::{LockitError, Result};
use crate::eval::{summarize, ErrorRecord, Summary};
use crate::features::{global_descriptor, FeatureBackend};
use crate::geometry::{OdometryDelta, Pose2};
use crate::mcl::{self, MclConfig, ParticleSet};
use crate::registration::{FineConfig, FineLocalizer, FineMethod, FineResult, RegistrationReport};
use crate::topo_map::TopoMap;

pub const TRACE_FILE: &str = "trace.csv";
pub const POSES_FILE: &str = "poses.csv";
pub const PARTICLES_FILE: &str = "particles.csv";
pub const ERRORS_FILE: &str = "errors.csv";
pub const REGISTRATIONS_FILE: &str = "registrations.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Method label of coarse (filter) estimates in error records.
pub const COARSE: &str = "coarse";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizationConfig {
    pub mcl: MclConfig,
    pub preprocess: PreprocessConfig,
    pub fine: FineConfig,
    pub method: FineMethod,
    /// Iterations whose particle sets are kept.
    pub snapshot_iters: Vec<usize>,
    /// Iterations at which the filter is re-initialized over the whole map.
    pub reinit_at: Vec<usize>,
    pub session: String,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        LocalizationConfig {
            mcl: MclConfig::default(),
            preprocess: PreprocessConfig::default(),
            fine: FineConfig::default(),
            method: FineMethod::default(),
            snapshot_iters: vec![0, 5, 10, 20, 50, 100],
            reinit_at: Vec::new(),
            session: "session".into(),
        }
    }
}

/// One filter iteration, the line format of `trace.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub est_x: f64,
    pub est_y: f64,
    pub est_theta: f64,
    pub effective_sample_size: f64,
    pub top1_node_id: usize,
    pub top1_desc_dist: f64,
}

/// Coarse, fine and true poses per iteration, the line format of `poses.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseTraceRow {
    pub iter: usize,
    pub scan_id: String,
    pub coarse_x: f64,
    pub coarse_y: f64,
    pub coarse_theta: f64,
    pub fine_x: Option<f64>,
    pub fine_y: Option<f64>,
    pub fine_theta: Option<f64>,
    pub truth_x: Option<f64>,
    pub truth_y: Option<f64>,
    pub truth_theta: Option<f64>,
    pub reinitialized: bool,
}

/// A kept particle, the line format of `particles.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleRow {
    pub iter: usize,
    pub particle: usize,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub weight: f64,
    pub node_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub session: String,
    pub method: FineMethod,
    pub iterations: usize,
    pub burn_in_iters: usize,
    /// Queries scored after burn-in.
    pub scored_queries: usize,
    pub coarse: Option<Summary>,
    pub fine: Option<Summary>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub trace: Vec<TraceRow>,
    pub poses: Vec<PoseTraceRow>,
    pub particles: Vec<ParticleRow>,
    pub fine: Vec<(usize, FineResult)>,
    pub errors: Vec<ErrorRecord>,
    /// Set when the run stopped early; everything before it is kept.
    pub failure: Option<String>,
}

impl RunOutput {
    pub fn reports(&self) -> Vec<RegistrationReport> {
        self.fine.iter().map(|(i, r)| r.report(*i)).collect()
    }

    pub fn errors_for(&self, method: &str) -> Vec<f64> {
        self.errors
            .iter()
            .filter(|e| e.method == method)
            .map(|e| e.position_error_m)
            .collect()
    }

    pub fn summary(&self, cfg: &LocalizationConfig) -> RunSummary {
        let coarse = summarize(&self.errors_for(COARSE)).ok();
        let fine = match cfg.method {
            FineMethod::None => None,
            m => summarize(&self.errors_for(m.as_str())).ok(),
        };
        RunSummary {
            session: cfg.session.clone(),
            method: cfg.method,
            iterations: self.trace.len(),
            burn_in_iters: cfg.mcl.burn_in_iters,
            scored_queries: coarse.map_or(0, |s| s.count),
            coarse,
            fine,
            failure: self.failure.clone(),
        }
    }

    /// Writes every run file into `dir`; `errors.csv` only when ground truth was scored.
    pub fn write(&self, dir: &Path, cfg: &LocalizationConfig) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| LockitError::io(dir, e))?;
        write_csv(&dir.join(TRACE_FILE), &self.trace)?;
        write_csv(&dir.join(POSES_FILE), &self.poses)?;
        write_csv(&dir.join(PARTICLES_FILE), &self.particles)?;
        if !self.errors.is_empty() {
            write_csv(&dir.join(ERRORS_FILE), &self.errors)?;
        }
        write_json(&dir.join(REGISTRATIONS_FILE), &self.reports())?;
        write_json(&dir.join(SUMMARY_FILE), &self.summary(cfg))
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| LockitError::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| LockitError::io(path, e))
}

/// Runs the filter over `queries`; see [`Localizer::push`] for the cadence.
/// Errors after setup end the run and are reported in `RunOutput::failure`.
pub fn run_localization(
    map: Arc<TopoMap>,
    backend: Arc<dyn FeatureBackend>,
    queries: &[QueryScan],
    cfg: &LocalizationConfig,
) -> Result<RunOutput> {
    if queries.is_empty() {
        return Err(LockitError::EmptyInput("no query scans".into()));
    }
    let mut loc = Localizer::new(map, backend, cfg.clone())?;
    for q in queries {
        if let Err(e) = loc.push(q) {
            let iter = loc.out.trace.len();
            log::warn!("run stopped at iteration {iter} (scan {}): {e}", q.id);
            loc.out.failure = Some(format!("iteration {iter}, scan {}: {e}", q.id));
            break;
        }
    }
    Ok(loc.out)
}

/// Streaming coarse-to-fine localizer. Scans are pushed one at a time; results
/// accumulate in [`Localizer::output`].
pub struct Localizer {
    map: Arc<TopoMap>,
    backend: Arc<dyn FeatureBackend>,
    cfg: LocalizationConfig,
    fine: FineLocalizer,
    set: ParticleSet,
    prev_coarse: Option<Pose2>,
    pending: Pose2,
    travelled: f64,
    out: RunOutput,
}

impl Localizer {
    pub fn new(map: Arc<TopoMap>, backend: Arc<dyn FeatureBackend>, cfg: LocalizationConfig) -> Result<Localizer> {
        cfg.mcl.validate()?;
        cfg.preprocess.validate()?;
        if backend.global_dim() != map.global_dim() {
            return Err(LockitError::DimensionMismatch {
                expected: map.global_dim(),
                actual: backend.global_dim(),
            });
        }
        Ok(Localizer {
            fine: FineLocalizer::new(Arc::clone(&map), Arc::clone(&backend), cfg.preprocess.clone(), cfg.fine.clone()),
            set: mcl::init_particles(&map, &cfg.mcl)?,
            map,
            backend,
            cfg,
            prev_coarse: None,
            pending: Pose2::origin(),
            travelled: 0.0,
            out: RunOutput::default(),
        })
    }

    pub fn config(&self) -> &LocalizationConfig {
        &self.cfg
    }

    pub fn output(&self) -> &RunOutput {
        &self.out
    }

    pub fn into_output(self) -> RunOutput {
        self.out
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.set
    }

    /// Feeds one scan. The first scan initializes the filter; later scans are
    /// processed once the odometry since the last processed scan adds up to the
    /// step distance. Returns the iteration number when the scan was processed.
    pub fn push(&mut self, q: &QueryScan) -> Result<Option<usize>> {
        let motion = if self.out.trace.is_empty() {
            None
        } else {
            self.pending = self.pending.compose(&q.odometry);
            self.travelled += q.odometry.distance();
            if self.travelled + 1e-9 < self.cfg.mcl.step_distance_m {
                return Ok(None);
            }
            Some(Pose2::origin().delta_to(&self.pending))
        };
        let iter = self.out.trace.len();
        self.iteration(iter, q, motion.as_ref())?;
        self.pending = Pose2::origin();
        self.travelled = 0.0;
        Ok(Some(iter))
    }

    fn iteration(&mut self, iter: usize, q: &QueryScan, motion: Option<&OdometryDelta>) -> Result<()> {
        let (map, cfg) = (self.map.as_ref(), &self.cfg.mcl);
        let raw = q.cloud.load()?;
        let descriptor = global_descriptor(self.backend.as_ref(), &q.id, &preprocess_for_descriptor(&raw, &self.cfg.preprocess)?)?;

        let mut reinitialized = false;
        if self.cfg.reinit_at.contains(&iter) {
            mcl::reinitialize(&mut self.set, map, cfg)?;
            self.prev_coarse = None;
            reinitialized = true;
        }
        if let Some(u) = motion {
            mcl::predict(&mut self.set, u, map, cfg)?;
        }
        let (ess, top1) = match mcl::update_weights(&mut self.set, &descriptor, map, cfg) {
            Ok(obs) => {
                mcl::resample(&mut self.set, cfg.resampling)?;
                (obs.effective_sample_size, obs.matches[0])
            }
            Err(LockitError::AllZeroWeights) => {
                log::info!("iteration {iter}: all particle weights vanished, re-initializing");
                mcl::reinitialize(&mut self.set, map, cfg)?;
                self.prev_coarse = None;
                reinitialized = true;
                let best = map.top_b_descriptor_matches(&descriptor, 1)?;
                (self.set.effective_sample_size(), (best[0].0.id, best[0].1))
            }
            Err(e) => return Err(e),
        };
        let coarse = mcl::estimate(&self.set)?;
        self.out.trace.push(TraceRow {
            iter,
            est_x: coarse.x,
            est_y: coarse.y,
            est_theta: coarse.theta,
            effective_sample_size: ess,
            top1_node_id: top1.0,
            top1_desc_dist: top1.1,
        });
        if self.cfg.snapshot_iters.contains(&iter) {
            self.out.particles.extend(self.set.particles.iter().enumerate().map(|(i, p)| ParticleRow {
                iter,
                particle: i,
                x: p.pose.x,
                y: p.pose.y,
                theta: p.pose.theta,
                weight: p.weight,
                node_id: p.node_id,
            }));
        }

        let fine = match self.cfg.method {
            FineMethod::None => None,
            method => {
                let query = self.fine.prepare_query(&raw)?;
                let r = match self.fine.localize(method, &query, &q.id, &coarse, self.prev_coarse.as_ref()) {
                    Ok(r) => r,
                    Err(e) => {
                        log::debug!("iteration {iter}: {} failed, keeping coarse pose: {e}", method.as_str());
                        self.fine.coarse_result(method, &coarse, Some(e.to_string()))?
                    }
                };
                Some(r)
            }
        };
        self.prev_coarse = Some(coarse);

        if let Some(truth) = q.truth.filter(|_| iter >= cfg.burn_in_iters) {
            let session = &self.cfg.session;
            self.out.errors.push(ErrorRecord::new(session, iter, COARSE, &coarse, &truth));
            if let Some(f) = &fine {
                self.out.errors.push(ErrorRecord::new(session, iter, f.method.as_str(), &f.pose, &truth));
            }
        }
        self.out.poses.push(PoseTraceRow {
            iter,
            scan_id: q.id.clone(),
            coarse_x: coarse.x,
            coarse_y: coarse.y,
            coarse_theta: coarse.theta,
            fine_x: fine.as_ref().map(|f| f.pose.x),
            fine_y: fine.as_ref().map(|f| f.pose.y),
            fine_theta: fine.as_ref().map(|f| f.pose.theta),
            truth_x: q.truth.map(|t| t.x),
            truth_y: q.truth.map(|t| t.y),
            truth_theta: q.truth.map(|t| t.theta),
            reinitialized,
        });
        if let Some(f) = fine {
            self.out.fine.push((iter, f));
        }
        Ok(())
    }
}
