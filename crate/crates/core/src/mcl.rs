//! Topological Monte Carlo localization: particles live on map nodes and are
//! weighted by how well the nodes retrieved for the current descriptor agree
//! with each particle's position and node descriptor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LockitError, Result};
use crate::features::GlobalDescriptor;
use crate::geometry::{wrap_angle, OdometryDelta, Pose2};
use crate::topo_map::{MapNode, TopoMap};

/// Form of the descriptor-distance factor of the particle weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorKernel {
    /// `exp(-h² / σ_m²)`
    #[default]
    Gaussian,
    /// `exp(-h² · σ_m)`, the covariance `1/σ_m` taken literally.
    InverseCovariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingScheme {
    #[default]
    Multinomial,
    Systematic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionNoise {
    /// Standard deviation of the travelled distance as a fraction of it.
    pub distance_fraction: f64,
    pub theta_rad: f64,
}

// Wide enough that predicted particles regularly reach neighbouring nodes;
// narrower noise lets the whole set settle on one node and stop tracking.
impl Default for MotionNoise {
    fn default() -> Self {
        MotionNoise {
            distance_fraction: 0.3,
            theta_rad: 5f64.to_radians(),
        }
    }
}

impl MotionNoise {
    pub fn none() -> Self {
        MotionNoise {
            distance_fraction: 0.0,
            theta_rad: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MclConfig {
    /// Particle count; `None` uses one particle per map node.
    pub particles: Option<usize>,
    /// Number of descriptor matches (B) used in the observation model.
    pub retrieval_depth: usize,
    pub sigma_l: f64,
    pub sigma_m: f64,
    pub kernel: DescriptorKernel,
    pub step_distance_m: f64,
    pub burn_in_iters: usize,
    pub motion_noise: MotionNoise,
    pub resampling: ResamplingScheme,
    pub seed: u64,
}

impl Default for MclConfig {
    fn default() -> Self {
        MclConfig {
            particles: None,
            retrieval_depth: 5,
            sigma_l: 3.0,
            sigma_m: 0.3,
            kernel: DescriptorKernel::Gaussian,
            step_distance_m: 1.0,
            burn_in_iters: 20,
            motion_noise: MotionNoise::default(),
            resampling: ResamplingScheme::Multinomial,
            seed: 0,
        }
    }
}

impl MclConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(LockitError::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        positive(self.sigma_l, "sigma_l")?;
        positive(self.sigma_m, "sigma_m")?;
        positive(self.step_distance_m, "step_distance_m")?;
        if self.retrieval_depth == 0 {
            return Err(LockitError::InvalidConfig("retrieval_depth must be at least 1".into()));
        }
        if self.particles == Some(0) {
            return Err(LockitError::InvalidConfig("particle count must be at least 1".into()));
        }
        let n = self.motion_noise;
        if !(n.distance_fraction >= 0.0 && n.theta_rad >= 0.0 && n.distance_fraction.is_finite() && n.theta_rad.is_finite()) {
            return Err(LockitError::InvalidConfig("motion noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn particle_count(&self, map: &TopoMap) -> usize {
        self.particles.unwrap_or(map.len())
    }

    fn descriptor_factor(&self, h_sq: f64) -> f64 {
        match self.kernel {
            DescriptorKernel::Gaussian => (-h_sq / (self.sigma_m * self.sigma_m)).exp(),
            DescriptorKernel::InverseCovariance => (-h_sq * self.sigma_m).exp(),
        }
    }

    fn metric_factor(&self, v_sq: f64) -> f64 {
        (-v_sq / (self.sigma_l * self.sigma_l)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub pose: Pose2,
    pub weight: f64,
    pub node_id: usize,
}

#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
    rng: ChaCha8Rng,
}

impl ParticleSet {
    pub fn from_particles(particles: Vec<Particle>, seed: u64) -> Self {
        ParticleSet {
            particles,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }

    /// `1 / Σ w²` of the normalized weights.
    pub fn effective_sample_size(&self) -> f64 {
        let s = self.weight_sum();
        if s <= 0.0 {
            return 0.0;
        }
        1.0 / self.particles.iter().map(|p| (p.weight / s).powi(2)).sum::<f64>()
    }
}

/// Places particles on node positions with uniform random headings.
pub fn init_particles(map: &TopoMap, cfg: &MclConfig) -> Result<ParticleSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let particles = spawn_particles(map, cfg.particle_count(map), &mut rng)?;
    Ok(ParticleSet { particles, rng })
}

fn spawn_particles(map: &TopoMap, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Particle>> {
    let n = map.len();
    if n == 0 {
        return Err(LockitError::EmptyMap);
    }
    let nodes: Vec<usize> = if m < n {
        rand::seq::index::sample(rng, n, m).into_vec()
    } else {
        (0..m).map(|i| i % n).collect()
    };
    let w = 1.0 / m as f64;
    Ok(nodes
        .into_iter()
        .map(|id| {
            let node = map.node(id);
            // (−π, π]: mirror the half-open [−π, π) draw
            let theta = -rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            Particle {
                pose: Pose2 { x: node.x, y: node.y, theta },
                weight: w,
                node_id: id,
            }
        })
        .collect())
}

/// Re-initializes every particle over the whole map, keeping the generator state.
pub fn reinitialize(set: &mut ParticleSet, map: &TopoMap, cfg: &MclConfig) -> Result<()> {
    set.particles = spawn_particles(map, cfg.particle_count(map), &mut set.rng)?;
    Ok(())
}

/// Moves every particle by the odometry delta plus noise and snaps it to the nearest node.
pub fn predict(set: &mut ParticleSet, u: &OdometryDelta, map: &TopoMap, cfg: &MclConfig) -> Result<()> {
    let d = u.distance();
    let sd = cfg.motion_noise.distance_fraction * d;
    let st = cfg.motion_noise.theta_rad;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for p in &mut set.particles {
        let dn = if sd > 0.0 { d + sd * unit.sample(&mut set.rng) } else { d };
        let tn = if st > 0.0 { u.dtheta + st * unit.sample(&mut set.rng) } else { u.dtheta };
        let heading = p.pose.theta + tn;
        let x = p.pose.x + dn * heading.cos();
        let y = p.pose.y + dn * heading.sin();
        let node = map.nearest_node(x, y)?;
        p.pose = Pose2 {
            x: node.x,
            y: node.y,
            theta: wrap_angle(heading),
        };
        p.node_id = node.id;
    }
    Ok(())
}

/// Unnormalized observation weights for `particles` given the retrieved nodes.
///
/// The descriptor factor depends only on the particle's node, so it is computed
/// once per distinct node and shared.
pub fn observation_weights(particles: &[Particle], retrieved: &[&MapNode], map: &TopoMap, cfg: &MclConfig) -> Vec<f64> {
    let mut per_node: Vec<Option<Vec<f64>>> = vec![None; map.len()];
    particles
        .iter()
        .map(|p| {
            let factors = per_node[p.node_id].get_or_insert_with(|| {
                let own = &map.node(p.node_id).descriptor;
                retrieved
                    .iter()
                    .map(|r| cfg.descriptor_factor(r.descriptor.squared_distance(own)))
                    .collect()
            });
            retrieved
                .iter()
                .zip(factors.iter())
                .map(|(r, f)| {
                    let (vx, vy) = (r.x - p.pose.x, r.y - p.pose.y);
                    cfg.metric_factor(vx * vx + vy * vy) * f
                })
                .sum()
        })
        .collect()
}

/// Result of weighting a set against one query descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Retrieved `(node id, descriptor distance)`, ascending.
    pub matches: Vec<(usize, f64)>,
    pub effective_sample_size: f64,
}

/// Weights particles against `query` and normalizes them to sum to one.
pub fn update_weights(set: &mut ParticleSet, query: &GlobalDescriptor, map: &TopoMap, cfg: &MclConfig) -> Result<Observation> {
    let matches = map.top_b_descriptor_matches(query, cfg.retrieval_depth)?;
    let retrieved: Vec<&MapNode> = matches.iter().map(|(n, _)| *n).collect();
    let w = observation_weights(&set.particles, &retrieved, map, cfg);
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        set.particles.iter_mut().for_each(|p| p.weight = 0.0);
        return Err(LockitError::AllZeroWeights);
    }
    for (p, wi) in set.particles.iter_mut().zip(w) {
        p.weight = wi / total;
    }
    Ok(Observation {
        matches: matches.iter().map(|(n, d)| (n.id, *d)).collect(),
        effective_sample_size: set.effective_sample_size(),
    })
}

/// Draws `M` particles with probability proportional to weight; weights reset to `1/M`.
pub fn resample(set: &mut ParticleSet, scheme: ResamplingScheme) -> Result<()> {
    let m = set.particles.len();
    if m == 0 {
        return Err(LockitError::EmptySet);
    }
    let mut cumulative = Vec::with_capacity(m);
    let mut acc = 0.0;
    for p in &set.particles {
        if !(p.weight >= 0.0 && p.weight.is_finite()) {
            return Err(LockitError::InvalidConfig(format!("invalid particle weight {}", p.weight)));
        }
        acc += p.weight;
        cumulative.push(acc);
    }
    if acc <= 0.0 {
        return Err(LockitError::AllZeroWeights);
    }
    let pick = |u: f64| cumulative.partition_point(|&c| c <= u).min(m - 1);
    let ancestors: Vec<usize> = match scheme {
        ResamplingScheme::Multinomial => (0..m).map(|_| pick(set.rng.random::<f64>() * acc)).collect(),
        ResamplingScheme::Systematic => {
            let start: f64 = set.rng.random::<f64>();
            (0..m).map(|k| pick((k as f64 + start) / m as f64 * acc)).collect()
        }
    };
    let w = 1.0 / m as f64;
    set.particles = ancestors
        .into_iter()
        .map(|a| Particle {
            weight: w,
            ..set.particles[a]
        })
        .collect();
    Ok(())
}

/// Mean position and circular-mean heading of the set.
pub fn estimate(set: &ParticleSet) -> Result<Pose2> {
    if set.particles.is_empty() {
        return Err(LockitError::EmptySet);
    }
    let m = set.particles.len() as f64;
    let (mut x, mut y, mut s, mut c) = (0.0, 0.0, 0.0, 0.0);
    for p in &set.particles {
        x += p.pose.x;
        y += p.pose.y;
        s += p.pose.theta.sin();
        c += p.pose.theta.cos();
    }
    Ok(Pose2::new(x / m, y / m, s.atan2(c)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub estimate: Pose2,
    pub observation: Observation,
}

/// One filter iteration: predict, weight, resample, estimate.
pub fn step(set: &mut ParticleSet, u: &OdometryDelta, query: &GlobalDescriptor, map: &TopoMap, cfg: &MclConfig) -> Result<StepOutcome> {
    predict(set, u, map, cfg)?;
    let observation = update_weights(set, query, map, cfg)?;
    resample(set, cfg.resampling)?;
    Ok(StepOutcome {
        estimate: estimate(set)?,
        observation,
    })
}
