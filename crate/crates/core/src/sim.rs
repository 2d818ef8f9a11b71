//! Synthetic worlds of boxes, cylinders and walls around a closed route, with a
//! ray-cast spinning LiDAR and noisy odometry. Everything is seeded.

use std::sync::Arc;

use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{preprocess_for_descriptor, PointCloud, PreprocessConfig};
use crate::dataset::QueryScan;
use crate::error::{LockitError, Result};
use crate::features::synthetic_global;
use crate::geometry::{wrap_angle, OdometryDelta, Pose2};
use crate::topo_map::{CloudSource, TrajectoryScan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Extent {
    pub fn new(width: f64, height: f64) -> Extent {
        Extent {
            min: [0.0, 0.0],
            max: [width, height],
        }
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Obstacle {
    /// Upright box with its footprint rotated by `yaw`.
    Box {
        center: [f64; 2],
        half_size: [f64; 2],
        yaw: f64,
        height: f64,
    },
    Cylinder {
        center: [f64; 2],
        radius: f64,
        height: f64,
    },
    /// Straight wall segment of the given thickness.
    Wall {
        start: [f64; 2],
        end: [f64; 2],
        thickness: f64,
        height: f64,
    },
}

/// Upright box in footprint-local coordinates, the shape walls are traced as.
struct Prism {
    center: [f64; 2],
    half: [f64; 2],
    cos: f64,
    sin: f64,
    height: f64,
}

impl Obstacle {
    pub fn bounding_circle(&self) -> ([f64; 2], f64) {
        match *self {
            Obstacle::Box { center, half_size, .. } => (center, half_size[0].hypot(half_size[1])),
            Obstacle::Cylinder { center, radius, .. } => (center, radius),
            Obstacle::Wall { start, end, thickness, .. } => {
                let c = [(start[0] + end[0]) * 0.5, (start[1] + end[1]) * 0.5];
                let half_len = (end[0] - start[0]).hypot(end[1] - start[1]) * 0.5;
                (c, half_len.hypot(thickness * 0.5))
            }
        }
    }

    fn prism(&self) -> Option<Prism> {
        match *self {
            Obstacle::Box { center, half_size, yaw, height } => Some(Prism {
                center,
                half: half_size,
                cos: yaw.cos(),
                sin: yaw.sin(),
                height,
            }),
            Obstacle::Wall { start, end, thickness, height } => {
                let (dx, dy) = (end[0] - start[0], end[1] - start[1]);
                let len = dx.hypot(dy);
                Some(Prism {
                    center: [(start[0] + end[0]) * 0.5, (start[1] + end[1]) * 0.5],
                    half: [len * 0.5, thickness * 0.5],
                    cos: dx / len,
                    sin: dy / len,
                    height,
                })
            }
            Obstacle::Cylinder { .. } => None,
        }
    }

    /// Smallest positive ray parameter at which `o + t·d` hits the solid.
    fn intersect(&self, o: &[f64; 3], d: &[f64; 3]) -> Option<f64> {
        if let Some(p) = self.prism() {
            let (rx, ry) = (o[0] - p.center[0], o[1] - p.center[1]);
            let lo = [p.cos * rx + p.sin * ry, -p.sin * rx + p.cos * ry, o[2]];
            let ld = [p.cos * d[0] + p.sin * d[1], -p.sin * d[0] + p.cos * d[1], d[2]];
            let bounds = [(-p.half[0], p.half[0]), (-p.half[1], p.half[1]), (0.0, p.height)];
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for k in 0..3 {
                let (a, b) = bounds[k];
                if ld[k].abs() < 1e-15 {
                    if lo[k] < a || lo[k] > b {
                        return None;
                    }
                    continue;
                }
                let (mut ta, mut tb) = ((a - lo[k]) / ld[k], (b - lo[k]) / ld[k]);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
            return (t0 > 1e-9).then_some(t0);
        }
        let Obstacle::Cylinder { center, radius, height } = *self else {
            unreachable!()
        };
        let (px, py) = (o[0] - center[0], o[1] - center[1]);
        let a = d[0] * d[0] + d[1] * d[1];
        let mut best: Option<f64> = None;
        if a > 1e-15 {
            let b = px * d[0] + py * d[1];
            let c = px * px + py * py - radius * radius;
            let disc = b * b - a * c;
            if disc >= 0.0 {
                let t = (-b - disc.sqrt()) / a;
                let z = o[2] + t * d[2];
                if t > 1e-9 && (0.0..=height).contains(&z) {
                    best = Some(t);
                }
            }
        }
        if d[2] < 0.0 && o[2] > height {
            let t = (height - o[2]) / d[2];
            let (x, y) = (px + t * d[0], py + t * d[1]);
            if x * x + y * y <= radius * radius && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
        best
    }

    fn transformed(&self, f: &impl Fn([f64; 2]) -> [f64; 2], dyaw: f64) -> Obstacle {
        match *self {
            Obstacle::Box { center, half_size, yaw, height } => Obstacle::Box {
                center: f(center),
                half_size,
                yaw: wrap_angle(yaw + dyaw),
                height,
            },
            Obstacle::Cylinder { center, radius, height } => Obstacle::Cylinder {
                center: f(center),
                radius,
                height,
            },
            Obstacle::Wall { start, end, thickness, height } => Obstacle::Wall {
                start: f(start),
                end: f(end),
                thickness,
                height,
            },
        }
    }
}

/// Closed loop `center + R(yaw)·(a·cos φ, b·sin φ)·(1 + Σ amp·sin(k·φ + phase))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    pub yaw: f64,
    /// `(amplitude, frequency, phase)` radial modulation terms.
    pub wobble: Vec<(f64, u32, f64)>,
}

const ROUTE_SAMPLES: usize = 8192;

impl Route {
    fn point(&self, phi: f64) -> [f64; 2] {
        let m = 1.0 + self.wobble.iter().map(|&(a, k, p)| a * (k as f64 * phi + p).sin()).sum::<f64>();
        let (lx, ly) = (self.semi_axes[0] * phi.cos() * m, self.semi_axes[1] * phi.sin() * m);
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        [self.center[0] + c * lx - s * ly, self.center[1] + s * lx + c * ly]
    }

    /// Dense polyline with cumulative arc length; the last vertex repeats the first.
    pub fn polyline(&self) -> (Vec<[f64; 2]>, Vec<f64>) {
        let pts: Vec<[f64; 2]> = (0..=ROUTE_SAMPLES)
            .map(|i| self.point(i as f64 / ROUTE_SAMPLES as f64 * std::f64::consts::TAU))
            .collect();
        let mut cum = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in pts.windows(2) {
            acc += (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            cum.push(acc);
        }
        (pts, cum)
    }

    pub fn length(&self) -> f64 {
        *self.polyline().1.last().unwrap()
    }

    /// Poses every `step_m` of arc length from `start_m`, heading along the route,
    /// shifted sideways by `lateral_m` (positive to the left).
    pub fn sample(&self, start_m: f64, length_m: f64, step_m: f64, lateral_m: f64) -> Vec<Pose2> {
        let (pts, cum) = self.polyline();
        let total = *cum.last().unwrap();
        let count = (length_m / step_m + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|k| {
                let s = (start_m + k as f64 * step_m).rem_euclid(total);
                let i = cum.partition_point(|&c| c <= s).clamp(1, cum.len() - 1);
                let seg = cum[i] - cum[i - 1];
                let f = if seg > 0.0 { (s - cum[i - 1]) / seg } else { 0.0 };
                let (a, b) = (pts[i - 1], pts[i]);
                let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
                let x = a[0] + f * (b[0] - a[0]) - lateral_m * heading.sin();
                let y = a[1] + f * (b[1] - a[1]) + lateral_m * heading.cos();
                Pose2::new(x, y, heading)
            })
            .collect()
    }

    /// Distance from a point to the route polyline.
    pub fn distance_to(&self, x: f64, y: f64, polyline: &[[f64; 2]]) -> f64 {
        polyline
            .windows(2)
            .map(|w| segment_distance([x, y], w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let l2 = abx * abx + aby * aby;
    let t = if l2 > 0.0 {
        (((p[0] - a[0]) * abx + (p[1] - a[1]) * aby) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * abx).hypot(p[1] - a[1] - t * aby)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub extent: Extent,
    pub obstacles: Vec<Obstacle>,
    pub route: Route,
    pub seed: u64,
    /// Whether the ground plane z = 0 returns echoes.
    pub ground: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanConfig {
    pub rings: usize,
    pub azimuth_steps: usize,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
    pub max_range_m: f64,
    pub noise_sigma_m: f64,
    pub sensor_height_m: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            rings: 32,
            azimuth_steps: 360,
            min_elevation_deg: -30.67,
            max_elevation_deg: 10.67,
            max_range_m: 50.0,
            noise_sigma_m: 0.02,
            sensor_height_m: 1.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Closest an obstacle may come to the route.
    pub route_clearance_m: f64,
    /// Obstacles are scattered up to this far from the route.
    pub max_offset_m: f64,
    /// Probe spacing along the route for the distinctiveness census.
    pub census_step_m: f64,
    /// Probes closer than this are not compared.
    pub census_radius_m: f64,
    pub min_descriptor_distance: f64,
    pub max_attempts: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            route_clearance_m: 3.0,
            max_offset_m: 18.0,
            census_step_m: 2.0,
            census_radius_m: 10.0,
            min_descriptor_distance: 0.1,
            max_attempts: 20,
        }
    }
}

const ROUTE_MARGIN_M: f64 = 15.0;
const MIN_SEMI_AXIS_M: f64 = 8.0;

/// Generates a world whose route neighborhoods are mutually distinguishable by
/// the synthetic global descriptor.
pub fn generate_world(seed: u64, n_obstacles: usize, extent: Extent) -> Result<World> {
    generate_world_with(seed, n_obstacles, extent, &WorldConfig::default())
}

pub fn generate_world_with(seed: u64, n_obstacles: usize, extent: Extent, cfg: &WorldConfig) -> Result<World> {
    if n_obstacles == 0 {
        return Err(LockitError::InvalidConfig("a world needs at least one obstacle".into()));
    }
    let a = extent.width() * 0.5 - ROUTE_MARGIN_M;
    let b = extent.height() * 0.5 - ROUTE_MARGIN_M;
    if a < MIN_SEMI_AXIS_M || b < MIN_SEMI_AXIS_M {
        return Err(LockitError::ExtentTooSmall(format!(
            "{}×{} m leaves no room for a route; need at least {}×{} m",
            extent.width(),
            extent.height(),
            2.0 * (ROUTE_MARGIN_M + MIN_SEMI_AXIS_M),
            2.0 * (ROUTE_MARGIN_M + MIN_SEMI_AXIS_M)
        )));
    }
    let mut worst = f64::INFINITY;
    for attempt in 0..cfg.max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(attempt as u64));
        let world = candidate_world(seed, n_obstacles, extent, [a, b], cfg, &mut rng)?;
        let margin = census(&world, cfg)?;
        if margin > cfg.min_descriptor_distance {
            log::debug!("world {seed}: accepted attempt {attempt}, census margin {margin:.3}");
            return Ok(world);
        }
        worst = worst.min(margin);
        log::debug!("world {seed}: attempt {attempt} rejected, census margin {margin:.3}");
    }
    Err(LockitError::WorldGeneration(format!(
        "no distinctive layout after {} attempts (smallest descriptor gap {worst:.3})",
        cfg.max_attempts
    )))
}

fn candidate_world(seed: u64, n: usize, extent: Extent, axes: [f64; 2], cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<World> {
    let route = Route {
        center: [
            (extent.min[0] + extent.max[0]) * 0.5,
            (extent.min[1] + extent.max[1]) * 0.5,
        ],
        semi_axes: [axes[0] / 1.12, axes[1] / 1.12],
        yaw: 0.0,
        wobble: vec![
            (rng.random_range(0.03..0.06), 2, rng.random_range(0.0..std::f64::consts::TAU)),
            (rng.random_range(0.02..0.05), 3, rng.random_range(0.0..std::f64::consts::TAU)),
        ],
    };
    let (poly, cum) = route.polyline();
    let total = *cum.last().unwrap();
    let mut obstacles = Vec::with_capacity(n);
    let mut tries = 0;
    while obstacles.len() < n {
        tries += 1;
        if tries > n * 200 {
            return Err(LockitError::WorldGeneration(format!(
                "could only place {} of {n} obstacles",
                obstacles.len()
            )));
        }
        let anchor = route.sample(rng.random_range(0.0..total), 0.0, 1.0, 0.0)[0];
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let offset = side * rng.random_range(cfg.route_clearance_m + 1.0..cfg.max_offset_m);
        let c = [
            anchor.x - offset * anchor.theta.sin(),
            anchor.y + offset * anchor.theta.cos(),
        ];
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let kind = rng.random_range(0..4);
        let o = match kind {
            0 | 1 => Obstacle::Box {
                center: c,
                half_size: [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)],
                yaw,
                height: rng.random_range(1.0..6.0),
            },
            2 => Obstacle::Cylinder {
                center: c,
                radius: rng.random_range(0.3..1.5),
                height: rng.random_range(1.0..8.0),
            },
            _ => {
                let half = rng.random_range(2.0..7.5);
                Obstacle::Wall {
                    start: [c[0] - half * yaw.cos(), c[1] - half * yaw.sin()],
                    end: [c[0] + half * yaw.cos(), c[1] + half * yaw.sin()],
                    thickness: 0.3,
                    height: rng.random_range(2.0..5.0),
                }
            }
        };
        let (bc, br) = o.bounding_circle();
        let inside = extent.contains(bc[0] - br, bc[1] - br) && extent.contains(bc[0] + br, bc[1] + br);
        if !inside || route.distance_to(bc[0], bc[1], &poly) - br < cfg.route_clearance_m {
            continue;
        }
        obstacles.push(o);
    }
    Ok(World {
        extent,
        obstacles,
        route,
        seed,
        ground: true,
    })
}

/// Smallest descriptor distance between route probes more than the census radius apart.
fn census(world: &World, cfg: &WorldConfig) -> Result<f64> {
    let length = world.route.length();
    let probes = world.route.sample(0.0, length - cfg.census_step_m * 0.5, cfg.census_step_m, 0.0);
    let scan_cfg = ScanConfig {
        noise_sigma_m: 0.0,
        ..ScanConfig::default()
    };
    let pre = PreprocessConfig::default();
    let descriptors = probes
        .iter()
        .map(|p| synthetic_global(&preprocess_for_descriptor(&simulate_scan(world, p, &scan_cfg, 0), &pre)?))
        .collect::<Result<Vec<_>>>()?;
    let mut margin = f64::INFINITY;
    for i in 0..probes.len() {
        for j in i + 1..probes.len() {
            if probes[i].distance_to(&probes[j]) > cfg.census_radius_m {
                margin = margin.min(descriptors[i].distance(&descriptors[j]));
            }
        }
    }
    Ok(margin)
}

impl World {
    /// The world moved rigidly by the planar transform `t`.
    pub fn transformed(&self, t: &Pose2) -> World {
        let (c, s) = (t.theta.cos(), t.theta.sin());
        let f = |p: [f64; 2]| [t.x + c * p[0] - s * p[1], t.y + s * p[0] + c * p[1]];
        let corners = [
            self.extent.min,
            self.extent.max,
            [self.extent.min[0], self.extent.max[1]],
            [self.extent.max[0], self.extent.min[1]],
        ]
        .map(f);
        let min = [
            corners.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min),
            corners.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min),
        ];
        let max = [
            corners.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max),
            corners.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max),
        ];
        World {
            extent: Extent { min, max },
            obstacles: self.obstacles.iter().map(|o| o.transformed(&f, t.theta)).collect(),
            route: Route {
                center: f(self.route.center),
                yaw: wrap_angle(self.route.yaw + t.theta),
                ..self.route.clone()
            },
            seed: self.seed,
            ground: self.ground,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("world serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> std::result::Result<World, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Ray-cast scan from `pose`, returned in the sensor frame (sensor at the origin,
/// x forward, z up). Beams that hit nothing within range are dropped.
pub fn simulate_scan(world: &World, pose: &Pose2, cfg: &ScanConfig, seed: u64) -> PointCloud {
    let rings = cfg.rings.max(1);
    let az_steps = cfg.azimuth_steps.max(1);
    let elevations: Vec<f64> = (0..rings)
        .map(|r| {
            let f = if rings == 1 { 0.5 } else { r as f64 / (rings - 1) as f64 };
            (cfg.min_elevation_deg + f * (cfg.max_elevation_deg - cfg.min_elevation_deg)).to_radians()
        })
        .collect();
    let origin = [pose.x, pose.y, cfg.sensor_height_m];
    let circles: Vec<([f64; 2], f64)> = world.obstacles.iter().map(|o| o.bounding_circle()).collect();

    let ranges: Vec<Option<f64>> = (0..az_steps)
        .into_par_iter()
        .flat_map_iter(|k| {
            let az_local = k as f64 / az_steps as f64 * std::f64::consts::TAU;
            let az = pose.theta + az_local;
            let (ca, sa) = (az.cos(), az.sin());
            // obstacles whose footprint circle the horizontal ray passes through
            let candidates: Vec<usize> = circles
                .iter()
                .enumerate()
                .filter(|(_, (c, r))| {
                    let (px, py) = (c[0] - origin[0], c[1] - origin[1]);
                    let along = px * ca + py * sa;
                    let across = (-px * sa + py * ca).abs();
                    across <= *r && along > -*r && along - r <= cfg.max_range_m
                })
                .map(|(i, _)| i)
                .collect();
            let elevations = &elevations;
            let candidates_ref = candidates;
            elevations.iter().map(move |&el| {
                let d = [el.cos() * ca, el.cos() * sa, el.sin()];
                let mut best = f64::INFINITY;
                if world.ground && d[2] < 0.0 {
                    best = -origin[2] / d[2];
                }
                for &i in &candidates_ref {
                    if let Some(t) = world.obstacles[i].intersect(&origin, &d) {
                        best = best.min(t);
                    }
                }
                (best <= cfg.max_range_m).then_some(best)
            })
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_sigma_m.max(0.0)).expect("valid sigma");
    let mut points = Vec::new();
    for (b, r) in ranges.iter().enumerate() {
        let eps = if cfg.noise_sigma_m > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        let Some(t) = r else { continue };
        let (k, ring) = (b / rings, b % rings);
        let az_local = k as f64 / az_steps as f64 * std::f64::consts::TAU;
        let el = elevations[ring];
        let range = t + eps;
        points.push(Point3::new(
            range * el.cos() * az_local.cos(),
            range * el.cos() * az_local.sin(),
            range * el.sin(),
        ));
    }
    PointCloud::new(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdometryNoise {
    /// Standard deviation of each step's distance as a fraction of it.
    pub distance_fraction: f64,
    pub theta_rad: f64,
}

impl Default for OdometryNoise {
    fn default() -> Self {
        OdometryNoise {
            distance_fraction: 0.05,
            theta_rad: 1f64.to_radians(),
        }
    }
}

/// Relative motions between consecutive truth poses, with the travelled distance
/// and heading change perturbed by zero-mean Gaussian noise.
pub fn simulate_odometry(truth: &[Pose2], noise: &OdometryNoise, seed: u64) -> Result<Vec<OdometryDelta>> {
    if truth.len() < 2 {
        return Err(LockitError::TooShort {
            needed: 2,
            got: truth.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(truth
        .windows(2)
        .map(|w| {
            let exact = w[0].delta_to(&w[1]);
            let d = exact.distance();
            let (en, tn) = (unit.sample(&mut rng), unit.sample(&mut rng));
            if noise.distance_fraction == 0.0 && noise.theta_rad == 0.0 {
                return exact;
            }
            let dn = d * (1.0 + noise.distance_fraction * en);
            let dir = exact.dy.atan2(exact.dx);
            OdometryDelta {
                dx: dn * dir.cos(),
                dy: dn * dir.sin(),
                dtheta: exact.dtheta + noise.theta_rad * tn,
            }
        })
        .collect())
}

/// Ground truth, the odometry a robot would report, and the dead-reckoned poses.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrajectory {
    pub poses: Vec<Pose2>,
    pub odometry: Vec<OdometryDelta>,
    pub truth: Vec<Pose2>,
}

impl SimTrajectory {
    pub fn from_truth(truth: Vec<Pose2>, noise: &OdometryNoise, seed: u64) -> Result<SimTrajectory> {
        let odometry = simulate_odometry(&truth, noise, seed)?;
        let mut poses = Vec::with_capacity(truth.len());
        poses.push(truth[0]);
        for u in &odometry {
            let next = poses.last().unwrap().compose(u);
            poses.push(next);
        }
        Ok(SimTrajectory { poses, odometry, truth })
    }
}

/// Mapping run: `count` scans every `step_m` along the route from its start.
/// Steps slightly above the node spacing keep every scan as a node.
pub fn mapping_scans(world: &World, count: usize, step_m: f64, scan: &ScanConfig, seed: u64) -> Vec<TrajectoryScan> {
    let poses = world.route.sample(0.0, step_m * count.saturating_sub(1) as f64, step_m, 0.0);
    poses
        .iter()
        .take(count)
        .enumerate()
        .map(|(k, p)| TrajectoryScan {
            pose: *p,
            scan_id: format!("m{k:05}"),
            cloud: CloudSource::Memory(Arc::new(simulate_scan(world, p, scan, seed.wrapping_add(k as u64)))),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryRunConfig {
    /// Arc position of the first scan.
    pub start_m: f64,
    pub steps: usize,
    pub step_m: f64,
    /// Sideways offset from the route, positive to the left.
    pub lateral_m: f64,
    /// Drive the route against its parametrization.
    pub reverse: bool,
    pub odometry_noise: OdometryNoise,
    pub scan: ScanConfig,
}

impl Default for QueryRunConfig {
    fn default() -> Self {
        QueryRunConfig {
            start_m: 0.0,
            steps: 300,
            step_m: 0.5,
            lateral_m: 0.3,
            reverse: false,
            odometry_noise: OdometryNoise::default(),
            scan: ScanConfig::default(),
        }
    }
}

/// Query run along the route: truth poses, noisy odometry and fresh scans.
pub fn query_scans(world: &World, cfg: &QueryRunConfig, seed: u64) -> Result<Vec<QueryScan>> {
    let length = cfg.step_m * cfg.steps as f64;
    let mut truth = if cfg.reverse {
        let mut p = world.route.sample(cfg.start_m - length, length, cfg.step_m, -cfg.lateral_m);
        p.reverse();
        p.iter_mut().for_each(|q| *q = Pose2::new(q.x, q.y, q.theta + std::f64::consts::PI));
        p
    } else {
        world.route.sample(cfg.start_m, length, cfg.step_m, cfg.lateral_m)
    };
    truth.truncate(cfg.steps + 1);
    let traj = SimTrajectory::from_truth(truth, &cfg.odometry_noise, seed)?;
    let scans: Vec<PointCloud> = traj
        .truth
        .iter()
        .enumerate()
        .map(|(k, p)| simulate_scan(world, p, &cfg.scan, seed.wrapping_mul(7919).wrapping_add(k as u64 + 1)))
        .collect();
    Ok(scans
        .into_iter()
        .enumerate()
        .map(|(k, cloud)| QueryScan {
            id: format!("q{k:05}"),
            odometry: if k == 0 { OdometryDelta::zero() } else { traj.odometry[k - 1] },
            cloud: CloudSource::Memory(Arc::new(cloud)),
            truth: Some(traj.truth[k]),
        })
        .collect())
}

/// Query run for one session: start arc and travel direction drawn from `session`.
pub fn session_run(world: &World, base: &QueryRunConfig, session: u64) -> QueryRunConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(session ^ 0x5e55_1011);
    QueryRunConfig {
        start_m: rng.random_range(0.0..world.route.length()),
        reverse: rng.random_bool(0.5),
        ..*base
    }
}

/// A world, a mapping run over it and the settings for query sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub world_seed: u64,
    pub obstacles: usize,
    pub width_m: f64,
    pub height_m: f64,
    pub map_scans: usize,
    pub map_step_m: f64,
    pub query: QueryRunConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            world_seed: 7,
            obstacles: 50,
            width_m: 116.0,
            height_m: 90.0,
            map_scans: 200,
            map_step_m: 1.02,
            query: QueryRunConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn world(&self) -> Result<World> {
        generate_world(self.world_seed, self.obstacles, Extent::new(self.width_m, self.height_m))
    }

    pub fn mapping(&self, world: &World) -> Vec<TrajectoryScan> {
        mapping_scans(world, self.map_scans, self.map_step_m, &self.query.scan, self.world_seed.wrapping_add(1))
    }

    pub fn session(&self, world: &World, session: u64) -> Result<Vec<QueryScan>> {
        query_scans(world, &session_run(world, &self.query, session), 1000 + session)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wall_world() -> World {
        World {
            extent: Extent { min: [-100.0, -100.0], max: [100.0, 100.0] },
            obstacles: vec![Obstacle::Wall {
                start: [1.0, -1000.0],
                end: [1.0, 1000.0],
                thickness: 0.0,
                height: 1000.0,
            }],
            route: Route { center: [0.0, 0.0], semi_axes: [20.0, 20.0], yaw: 0.0, wobble: vec![] },
            seed: 0,
            ground: false,
        }
    }

    #[test]
    fn wall_hits_at_analytic_range() {
        let cfg = ScanConfig { noise_sigma_m: 0.0, max_range_m: 100.0, ..ScanConfig::default() };
        let cloud = simulate_scan(&wall_world(), &Pose2::origin(), &cfg, 1);
        assert!(!cloud.is_empty());
        for p in &cloud.points {
            // every return lies on the plane x = 1 (sensor frame, robot at origin facing +x)
            assert!((p.x - 1.0).abs() < 1e-9, "{p:?}");
        }
        // forward horizontal-most beams: range = 1 / (cos el · cos az)
        let cfg1 = ScanConfig { rings: 1, min_elevation_deg: 0.0, max_elevation_deg: 0.0, ..cfg };
        let c = simulate_scan(&wall_world(), &Pose2::origin(), &cfg1, 1);
        for p in &c.points {
            let az = p.y.atan2(p.x);
            assert!((p.coords.norm() - 1.0 / az.cos()).abs() < 1e-9);
        }
    }

    #[test]
    fn scans_are_deterministic_and_frame_invariant() {
        let world = generate_world(3, 30, Extent::new(80.0, 70.0)).unwrap();
        let pose = world.route.sample(5.0, 0.0, 1.0, 0.0)[0];
        let cfg = ScanConfig::default();
        let a = simulate_scan(&world, &pose, &cfg, 9);
        assert_eq!(a, simulate_scan(&world, &pose, &cfg, 9));
        let t = Pose2::new(13.0, -7.0, 0.7);
        let moved = world.transformed(&t);
        let tp = t.compose(&Pose2::origin().delta_to(&pose));
        let b = simulate_scan(&moved, &tp, &cfg, 9);
        assert_eq!(a.len(), b.len());
        for (p, q) in a.points.iter().zip(&b.points) {
            assert!((p - q).norm() < 1e-9);
        }
    }

    #[test]
    fn world_generation_contract() {
        let extent = Extent::new(80.0, 70.0);
        let a = generate_world(5, 30, extent).unwrap();
        assert_eq!(a, generate_world(5, 30, extent).unwrap());
        assert_eq!(a.obstacles.len(), 30);
        for o in &a.obstacles {
            let (c, r) = o.bounding_circle();
            assert!(extent.contains(c[0] - r, c[1] - r) && extent.contains(c[0] + r, c[1] + r));
        }
        assert!(matches!(generate_world(5, 0, extent), Err(LockitError::InvalidConfig(_))));
        assert!(matches!(generate_world(5, 10, Extent::new(30.0, 200.0)), Err(LockitError::ExtentTooSmall(_))));
        let back = World::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn route_sampling_spacing() {
        let r = Route { center: [0.0, 0.0], semi_axes: [30.0, 20.0], yaw: 0.3, wobble: vec![(0.05, 3, 0.2)] };
        let poses = r.sample(3.0, 50.0, 1.0, 0.0);
        assert_eq!(poses.len(), 51);
        for w in poses.windows(2) {
            let d = w[0].distance_to(&w[1]);
            assert!(d > 0.98 && d <= 1.0 + 1e-9, "{d}");
        }
        let (poly, _) = r.polyline();
        let shifted = r.sample(3.0, 10.0, 1.0, 0.5);
        for p in &shifted {
            assert!((r.distance_to(p.x, p.y, &poly) - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn odometry_contract() {
        let r = Route { center: [0.0, 0.0], semi_axes: [30.0, 20.0], yaw: 0.0, wobble: vec![] };
        let truth = r.sample(0.0, 100.0, 1.0, 0.0);
        let exact = SimTrajectory::from_truth(truth.clone(), &OdometryNoise { distance_fraction: 0.0, theta_rad: 0.0 }, 1).unwrap();
        assert_eq!(exact.odometry.len(), truth.len() - 1);
        for (p, t) in exact.poses.iter().zip(&truth) {
            assert!(p.distance_to(t) < 1e-12 && wrap_angle(p.theta - t.theta).abs() < 1e-12);
        }
        let noisy = SimTrajectory::from_truth(truth.clone(), &OdometryNoise::default(), 2).unwrap();
        assert!(noisy.poses.last().unwrap().distance_to(truth.last().unwrap()) > 0.0);
        assert_eq!(noisy, SimTrajectory::from_truth(truth.clone(), &OdometryNoise::default(), 2).unwrap());
        assert!(matches!(simulate_odometry(&truth[..1], &OdometryNoise::default(), 0), Err(LockitError::TooShort { .. })));
    }
}
