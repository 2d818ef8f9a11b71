//! Topological map: scan-capture positions kept at a minimum spacing, each with
//! its cloud and global descriptor, plus exact spatial and descriptor queries.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::cloud::{self, preprocess_for_descriptor, PointCloud, PreprocessConfig};
use crate::error::{LockitError, Result};
use crate::features::{self, ldsc, FeatureBackend, GlobalDescriptor};
use crate::geometry::Pose2;
use crate::kdtree::KdTree;

pub const MAP_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "map.json";

/// Where a scan's points live.
#[derive(Debug, Clone)]
pub enum CloudSource {
    Memory(Arc<PointCloud>),
    File(PathBuf),
}

impl CloudSource {
    pub fn load(&self) -> Result<Arc<PointCloud>> {
        match self {
            CloudSource::Memory(c) => Ok(Arc::clone(c)),
            CloudSource::File(p) => Ok(Arc::new(cloud::load_cloud(p)?)),
        }
    }
}

/// One scan of a mapping trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryScan {
    pub pose: Pose2,
    pub scan_id: String,
    pub cloud: CloudSource,
}

#[derive(Debug, Clone)]
pub struct MapNode {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub yaw: Option<f64>,
    pub scan_id: String,
    pub cloud_ref: String,
    pub descriptor: GlobalDescriptor,
}

impl MapNode {
    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.x, self.y, self.yaw.unwrap_or(0.0))
    }
}

#[derive(Debug)]
struct NodeCloud {
    source: CloudSource,
    cached: OnceLock<Arc<PointCloud>>,
}

#[derive(Debug)]
pub struct TopoMap {
    nodes: Vec<MapNode>,
    spacing_m: f64,
    backend_name: String,
    spatial: KdTree<2>,
    clouds: Vec<NodeCloud>,
}

/// Indices of the scans kept by greedy spacing selection: a scan is kept when it
/// lies at least `spacing_m` from every scan kept before it.
pub fn select_nodes(positions: &[(f64, f64)], spacing_m: f64) -> Vec<usize> {
    let cell = spacing_m.max(f64::MIN_POSITIVE);
    let key = |x: f64, y: f64| ((x / cell).floor() as i64, (y / cell).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut kept: Vec<usize> = Vec::new();
    for (i, &(x, y)) in positions.iter().enumerate() {
        let (cx, cy) = key(x, y);
        let mut free = true;
        'scan: for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(list) = grid.get(&(cx + dx, cy + dy)) {
                    for &k in list {
                        let (kx, ky) = positions[k];
                        if (kx - x).hypot(ky - y) < spacing_m {
                            free = false;
                            break 'scan;
                        }
                    }
                }
            }
        }
        if free {
            grid.entry((cx, cy)).or_default().push(i);
            kept.push(i);
        }
    }
    kept
}

/// Builds a map from one or more concatenated mapping trajectories.
pub fn build_map(
    trajectory: &[TrajectoryScan],
    spacing_m: f64,
    backend: &dyn FeatureBackend,
    preprocess: &PreprocessConfig,
) -> Result<TopoMap> {
    if trajectory.is_empty() {
        return Err(LockitError::EmptyTrajectory);
    }
    if !(spacing_m > 0.0 && spacing_m.is_finite()) {
        return Err(LockitError::InvalidConfig(format!("spacing must be positive, got {spacing_m}")));
    }
    if let Some(bad) = trajectory.iter().find(|s| !s.pose.is_finite()) {
        return Err(LockitError::InvalidConfig(format!("non-finite pose for scan '{}'", bad.scan_id)));
    }
    let positions: Vec<(f64, f64)> = trajectory.iter().map(|s| (s.pose.x, s.pose.y)).collect();
    let kept = select_nodes(&positions, spacing_m);
    let mut nodes = Vec::with_capacity(kept.len());
    let mut clouds = Vec::with_capacity(kept.len());
    for (id, &i) in kept.iter().enumerate() {
        let scan = &trajectory[i];
        let raw = scan.cloud.load()?;
        let prepared = preprocess_for_descriptor(&raw, preprocess)?;
        let descriptor = features::global_descriptor(backend, &scan.scan_id, &prepared)?;
        nodes.push(MapNode {
            id,
            x: scan.pose.x,
            y: scan.pose.y,
            yaw: Some(scan.pose.theta),
            scan_id: scan.scan_id.clone(),
            cloud_ref: cloud_file_name(id),
            descriptor,
        });
        clouds.push(NodeCloud {
            source: CloudSource::Memory(raw),
            cached: OnceLock::new(),
        });
    }
    log::info!("built map with {} nodes from {} scans", nodes.len(), trajectory.len());
    TopoMap::from_parts(nodes, clouds, spacing_m, backend.name().to_string())
}

fn cloud_file_name(id: usize) -> String {
    format!("clouds/{id:06}.lpcd")
}

fn descriptor_file_name(id: usize) -> String {
    format!("descriptors/{id:06}.g.ldsc")
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestNode {
    id: usize,
    x: f64,
    y: f64,
    yaw: Option<f64>,
    scan_id: String,
    cloud: String,
    descriptor: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    spacing_m: f64,
    backend: String,
    global_dim: usize,
    nodes: Vec<ManifestNode>,
}

impl TopoMap {
    fn from_parts(nodes: Vec<MapNode>, clouds: Vec<NodeCloud>, spacing_m: f64, backend_name: String) -> Result<TopoMap> {
        let dim = nodes.first().map_or(0, |n| n.descriptor.len());
        if let Some(bad) = nodes.iter().find(|n| n.descriptor.len() != dim) {
            return Err(LockitError::DimensionMismatch {
                expected: dim,
                actual: bad.descriptor.len(),
            });
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(LockitError::InvalidConfig(format!("node ids must be 0..N in order, found {} at {i}", n.id)));
            }
        }
        let spatial = KdTree::new(nodes.iter().map(|n| [n.x, n.y]).collect());
        Ok(TopoMap {
            nodes,
            spacing_m,
            backend_name,
            spatial,
            clouds,
        })
    }

    /// Map whose node clouds are held in memory.
    pub fn from_nodes(nodes: Vec<MapNode>, clouds: Vec<Arc<PointCloud>>, spacing_m: f64, backend_name: &str) -> Result<TopoMap> {
        if clouds.len() != nodes.len() {
            return Err(LockitError::DimensionMismatch {
                expected: nodes.len(),
                actual: clouds.len(),
            });
        }
        let clouds = clouds
            .into_iter()
            .map(|c| NodeCloud {
                source: CloudSource::Memory(c),
                cached: OnceLock::new(),
            })
            .collect();
        TopoMap::from_parts(nodes, clouds, spacing_m, backend_name.to_string())
    }

    pub fn nodes(&self) -> &[MapNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &MapNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn spacing_m(&self) -> f64 {
        self.spacing_m
    }

    pub fn backend_name(&self) -> &str {
        &self.backend_name
    }

    pub fn global_dim(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.descriptor.len())
    }

    /// Raw cloud of a node, loaded on first use.
    pub fn node_cloud(&self, id: usize) -> Result<Arc<PointCloud>> {
        let slot = &self.clouds[id];
        if let Some(c) = slot.cached.get() {
            return Ok(Arc::clone(c));
        }
        let c = slot.source.load()?;
        Ok(Arc::clone(slot.cached.get_or_init(|| c)))
    }

    /// Node closest to `(x, y)`; ties go to the lowest id.
    pub fn nearest_node(&self, x: f64, y: f64) -> Result<&MapNode> {
        self.spatial
            .nearest(&[x, y])
            .map(|(i, _)| &self.nodes[i])
            .ok_or(LockitError::EmptyMap)
    }

    /// The `b` nodes with the smallest descriptor distance, ascending, ties by id.
    pub fn top_b_descriptor_matches(&self, query: &GlobalDescriptor, b: usize) -> Result<Vec<(&MapNode, f64)>> {
        if self.nodes.is_empty() {
            return Err(LockitError::EmptyMap);
        }
        if b == 0 || b > self.nodes.len() {
            return Err(LockitError::BTooLarge {
                b,
                nodes: self.nodes.len(),
            });
        }
        if query.len() != self.global_dim() {
            return Err(LockitError::DimensionMismatch {
                expected: self.global_dim(),
                actual: query.len(),
            });
        }
        let mut scored: Vec<(usize, f64)> = self
            .nodes
            .iter()
            .map(|n| (n.id, n.descriptor.squared_distance(query)))
            .collect();
        let cmp = |a: &(usize, f64), c: &(usize, f64)| a.1.total_cmp(&c.1).then(a.0.cmp(&c.0));
        if b < scored.len() {
            scored.select_nth_unstable_by(b - 1, cmp);
            scored.truncate(b);
        }
        scored.sort_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(i, d2)| (&self.nodes[i], d2.sqrt()))
            .collect())
    }

    /// Writes `map.json`, `clouds/` and `descriptors/` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["clouds", "descriptors"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| LockitError::io(&p, e))?;
        }
        let mut manifest_nodes = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let cloud_ref = cloud_file_name(n.id);
            let desc_ref = descriptor_file_name(n.id);
            cloud::save_lpcd(&*self.node_cloud(n.id)?, &dir.join(&cloud_ref))?;
            ldsc::write_global_file(&dir.join(&desc_ref), &n.descriptor, "global")?;
            manifest_nodes.push(ManifestNode {
                id: n.id,
                x: n.x,
                y: n.y,
                yaw: n.yaw,
                scan_id: n.scan_id.clone(),
                cloud: cloud_ref,
                descriptor: desc_ref,
            });
        }
        let manifest = Manifest {
            version: MAP_FORMAT_VERSION,
            spacing_m: self.spacing_m,
            backend: self.backend_name.clone(),
            global_dim: self.global_dim(),
            nodes: manifest_nodes,
        };
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| LockitError::io(&path, e))?;
        self.export_csv(&dir.join("nodes.csv"))
    }

    /// Loads a saved map; node clouds are read lazily.
    pub fn load(dir: &Path) -> Result<TopoMap> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| LockitError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| LockitError::parse(&path, e.line(), e.to_string()))?;
        if manifest.version != MAP_FORMAT_VERSION {
            return Err(LockitError::format(&path, format!("unsupported map version {}", manifest.version)));
        }
        let mut nodes = Vec::with_capacity(manifest.nodes.len());
        let mut clouds = Vec::with_capacity(manifest.nodes.len());
        for m in manifest.nodes {
            let dpath = dir.join(&m.descriptor);
            let file = ldsc::read_ldsc(&dpath)?;
            let descriptor = match file.payload {
                ldsc::LdscPayload::Global(mut v) if v.len() == 1 => v.remove(0),
                _ => return Err(LockitError::format(&dpath, "expected one global descriptor")),
            };
            if descriptor.len() != manifest.global_dim {
                return Err(LockitError::DimensionMismatch {
                    expected: manifest.global_dim,
                    actual: descriptor.len(),
                });
            }
            clouds.push(NodeCloud {
                source: CloudSource::File(dir.join(&m.cloud)),
                cached: OnceLock::new(),
            });
            nodes.push(MapNode {
                id: m.id,
                x: m.x,
                y: m.y,
                yaw: m.yaw,
                scan_id: m.scan_id,
                cloud_ref: m.cloud,
                descriptor,
            });
        }
        TopoMap::from_parts(nodes, clouds, manifest.spacing_m, manifest.backend)
    }

    /// Node table as CSV: `id,x,y,yaw,scan_id,cloud`.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| LockitError::format(path, e.to_string()))?;
        let io_err = |e: csv::Error| LockitError::format(path, e.to_string());
        w.write_record(["id", "x", "y", "yaw", "scan_id", "cloud"]).map_err(io_err)?;
        for n in &self.nodes {
            w.write_record([
                n.id.to_string(),
                n.x.to_string(),
                n.y.to_string(),
                n.yaw.map(|v| v.to_string()).unwrap_or_default(),
                n.scan_id.clone(),
                n.cloud_ref.clone(),
            ])
            .map_err(io_err)?;
        }
        w.flush().map_err(|e| LockitError::io(path, e))
    }
}
