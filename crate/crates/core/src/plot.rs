//! Static PNG figures from run outputs: particle snapshots, trajectory overlay
//! and error histograms. Output depends only on the input files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::dataset::{read_csv, write_csv};
use crate::error::{LockitError, Result};
use crate::eval::ErrorRecord;
use crate::pipeline::{ParticleRow, PoseTraceRow, TraceRow, ERRORS_FILE, PARTICLES_FILE, POSES_FILE, TRACE_FILE};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 800;
const MARGIN: f64 = 30.0;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GRAY: Rgb<u8> = Rgb([170, 170, 170]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const RED: Rgb<u8> = Rgb([220, 30, 30]);
const BLUE: Rgb<u8> = Rgb([30, 60, 220]);
const GREEN: Rgb<u8> = Rgb([20, 150, 40]);

/// RMS distance of the points from their centroid.
pub fn dispersion_radius(points: &[(f64, f64)]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let n = points.len() as f64;
    let (cx, cy) = points.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (cx, cy) = (cx / n, cy / n);
    (points.iter().map(|p| (p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, Copy)]
struct Bounds {
    min: (f64, f64),
    max: (f64, f64),
}

impl Bounds {
    fn of(points: impl Iterator<Item = (f64, f64)>) -> Option<Bounds> {
        let mut b: Option<Bounds> = None;
        for (x, y) in points.filter(|p| p.0.is_finite() && p.1.is_finite()) {
            b = Some(match b {
                None => Bounds { min: (x, y), max: (x, y) },
                Some(b) => Bounds {
                    min: (b.min.0.min(x), b.min.1.min(y)),
                    max: (b.max.0.max(x), b.max.1.max(y)),
                },
            });
        }
        b
    }
}

struct Canvas {
    img: RgbImage,
    bounds: Bounds,
    scale: f64,
}

impl Canvas {
    /// Equal-aspect canvas covering `bounds`.
    fn new(bounds: Bounds) -> Canvas {
        let w = (bounds.max.0 - bounds.min.0).max(1.0);
        let h = (bounds.max.1 - bounds.min.1).max(1.0);
        let scale = ((WIDTH as f64 - 2.0 * MARGIN) / w).min((HEIGHT as f64 - 2.0 * MARGIN) / h);
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, WHITE);
        for x in 0..WIDTH {
            img.put_pixel(x, 0, BLACK);
            img.put_pixel(x, HEIGHT - 1, BLACK);
        }
        for y in 0..HEIGHT {
            img.put_pixel(0, y, BLACK);
            img.put_pixel(WIDTH - 1, y, BLACK);
        }
        Canvas { img, bounds, scale }
    }

    fn pixel(&self, x: f64, y: f64) -> (i64, i64) {
        let px = MARGIN + (x - self.bounds.min.0) * self.scale;
        // image rows grow downwards
        let py = HEIGHT as f64 - MARGIN - (y - self.bounds.min.1) * self.scale;
        (px.round() as i64, py.round() as i64)
    }

    fn put(&mut self, px: i64, py: i64, c: Rgb<u8>) {
        if px >= 0 && py >= 0 && (px as u32) < WIDTH && (py as u32) < HEIGHT {
            self.img.put_pixel(px as u32, py as u32, c);
        }
    }

    fn dot(&mut self, x: f64, y: f64, r: i64, c: Rgb<u8>) {
        let (px, py) = self.pixel(x, y);
        for dy in -r..=r {
            for dx in -r..=r {
                self.put(px + dx, py + dy, c);
            }
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
        let (mut x0, mut y0) = self.pixel(a.0, a.1);
        let (x1, y1) = self.pixel(b.0, b.1);
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], c: Rgb<u8>) {
        for w in pts.windows(2) {
            self.line(w[0], w[1], c);
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img
            .save(path)
            .map_err(|e| LockitError::format(path, format!("cannot write image: {e}")))
    }
}

/// Files read from a run directory.
pub struct RunFiles {
    pub trace: Vec<TraceRow>,
    pub poses: Vec<PoseTraceRow>,
    pub particles: Vec<ParticleRow>,
    pub errors: Vec<ErrorRecord>,
}

impl RunFiles {
    pub fn load(run_dir: &Path) -> Result<RunFiles> {
        let trace: Vec<TraceRow> = read_csv(&run_dir.join(TRACE_FILE))?;
        if trace.is_empty() {
            return Err(LockitError::EmptyInput(format!("{} has no iterations", run_dir.join(TRACE_FILE).display())));
        }
        let optional = |name: &str| run_dir.join(name).exists().then(|| run_dir.join(name));
        Ok(RunFiles {
            trace,
            poses: optional(POSES_FILE).map(|p| read_csv(&p)).transpose()?.unwrap_or_default(),
            particles: optional(PARTICLES_FILE).map(|p| read_csv(&p)).transpose()?.unwrap_or_default(),
            errors: optional(ERRORS_FILE).map(|p| read_csv(&p)).transpose()?.unwrap_or_default(),
        })
    }

    /// Particle positions per snapshot iteration.
    pub fn snapshots(&self) -> BTreeMap<usize, Vec<(f64, f64)>> {
        let mut m: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
        for p in &self.particles {
            m.entry(p.iter).or_default().push((p.x, p.y));
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DispersionRow {
    pub iter: usize,
    pub particles: usize,
    pub dispersion_radius_m: f64,
}

/// Writes every figure for the run in `run_dir` into `out_dir` and returns the paths.
pub fn plot_run(run_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let run = RunFiles::load(run_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| LockitError::io(out_dir, e))?;
    let mut written = Vec::new();

    let truth: Vec<(f64, f64)> = run
        .poses
        .iter()
        .filter_map(|p| Some((p.truth_x?, p.truth_y?)))
        .collect();
    let coarse: Vec<(f64, f64)> = run.trace.iter().map(|t| (t.est_x, t.est_y)).collect();
    let fine: Vec<(f64, f64)> = run.poses.iter().filter_map(|p| Some((p.fine_x?, p.fine_y?))).collect();
    let snapshots = run.snapshots();
    let all = truth
        .iter()
        .chain(&coarse)
        .chain(&fine)
        .chain(snapshots.values().flatten())
        .copied();
    let bounds = Bounds::of(all).expect("trace is non-empty");

    let mut dispersion = Vec::new();
    for (iter, pts) in &snapshots {
        let mut c = Canvas::new(bounds);
        c.polyline(&truth, GRAY);
        for &(x, y) in pts {
            c.dot(x, y, 2, RED);
        }
        if let Some(t) = run.trace.iter().find(|t| t.iter == *iter) {
            c.dot(t.est_x, t.est_y, 4, BLUE);
        }
        let path = out_dir.join(format!("particles_iter_{iter:04}.png"));
        c.save(&path)?;
        written.push(path);
        dispersion.push(DispersionRow {
            iter: *iter,
            particles: pts.len(),
            dispersion_radius_m: dispersion_radius(pts),
        });
    }
    if !dispersion.is_empty() {
        let path = out_dir.join("dispersion.csv");
        write_csv(&path, &dispersion)?;
        written.push(path);
    }

    let mut c = Canvas::new(bounds);
    c.polyline(&truth, BLACK);
    c.polyline(&coarse, BLUE);
    for &(x, y) in &fine {
        c.dot(x, y, 1, GREEN);
    }
    let path = out_dir.join("trajectory.png");
    c.save(&path)?;
    written.push(path);

    if !run.errors.is_empty() {
        let path = out_dir.join("error_histogram.png");
        error_histogram(&run.errors, &path)?;
        written.push(path);
    }
    Ok(written)
}

const BINS: usize = 40;

/// One panel per method, stacked, over a shared position-error axis.
fn error_histogram(errors: &[ErrorRecord], path: &Path) -> Result<()> {
    let mut by_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for e in errors {
        by_method.entry(e.method.as_str()).or_default().push(e.position_error_m);
    }
    let max = errors.iter().map(|e| e.position_error_m).fold(0.0, f64::max).max(1e-6);
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, WHITE);
    let panel_h = (HEIGHT - 20) / by_method.len() as u32;
    let bar_w = (WIDTH - 40) / BINS as u32;
    let colors = [BLUE, GREEN, RED, BLACK];
    for (k, (_, values)) in by_method.iter().enumerate() {
        let mut counts = [0usize; BINS];
        for v in values {
            counts[((v / max * BINS as f64) as usize).min(BINS - 1)] += 1;
        }
        let peak = *counts.iter().max().unwrap_or(&1) as f64;
        let base = 10 + (k as u32 + 1) * panel_h - 5;
        for (b, &n) in counts.iter().enumerate() {
            let h = ((n as f64 / peak) * (panel_h as f64 - 15.0)).round() as u32;
            for x in 20 + b as u32 * bar_w..20 + (b as u32 + 1) * bar_w - 1 {
                for y in base.saturating_sub(h)..base {
                    img.put_pixel(x, y, colors[k % colors.len()]);
                }
            }
        }
        for x in 20..WIDTH - 20 {
            img.put_pixel(x, base, BLACK);
        }
    }
    img.save(path).map_err(|e| LockitError::format(path, format!("cannot write image: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispersion_of_known_sets() {
        assert_eq!(dispersion_radius(&[]), 0.0);
        assert_eq!(dispersion_radius(&[(3.0, 4.0)]), 0.0);
        let square = [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)];
        assert!((dispersion_radius(&square) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_trace_is_an_error_without_images() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(TRACE_FILE), "iter,est_x,est_y,est_theta,effective_sample_size,top1_node_id,top1_desc_dist\n").unwrap();
        let out = dir.path().join("plots");
        assert!(matches!(plot_run(dir.path(), &out), Err(LockitError::EmptyInput(_))));
        assert!(!out.exists());
    }

    #[test]
    fn line_endpoints_are_drawn() {
        let mut c = Canvas::new(Bounds { min: (0.0, 0.0), max: (10.0, 10.0) });
        c.line((0.0, 0.0), (10.0, 10.0), RED);
        let (a, b) = (c.pixel(0.0, 0.0), c.pixel(10.0, 10.0));
        assert_eq!(*c.img.get_pixel(a.0 as u32, a.1 as u32), RED);
        assert_eq!(*c.img.get_pixel(b.0 as u32, b.1 as u32), RED);
    }
}
