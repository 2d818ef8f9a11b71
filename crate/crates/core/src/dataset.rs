//! On-disk trajectory and query formats.
//!
//! A trajectory directory holds `poses.csv` (`id,x,y,theta,cloud`) with cloud
//! paths relative to the directory. A query directory holds `odometry.csv`
//! (`id,dx,dy,dtheta,cloud`, one row per scan, the delta leading to that scan)
//! and optionally `groundtruth.csv` in the pose format.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cloud::{save_lpcd, PointCloud};
use crate::error::{LockitError, Result};
use crate::geometry::{OdometryDelta, Pose2};
use crate::topo_map::{CloudSource, TrajectoryScan};

pub const POSES_FILE: &str = "poses.csv";
pub const ODOMETRY_FILE: &str = "odometry.csv";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRow {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    #[serde(default)]
    pub cloud: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdometryRow {
    pub id: String,
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
    pub cloud: String,
}

/// All rows of a headed CSV file; errors carry the file and line.
pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| LockitError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row.map_err(|e| csv_error(path, e))?);
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| LockitError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> LockitError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => LockitError::io(path, io),
        other => LockitError::parse(path, line, format!("{other:?}")),
    }
}

fn check_finite(path: &Path, index: usize, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        // header is line 1
        Err(LockitError::parse(path, index + 2, "non-finite value"))
    }
}

fn resolve(base: &Path, cloud: &str) -> PathBuf {
    let p = Path::new(cloud);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn csv_path(dir_or_file: &Path, default_name: &str) -> PathBuf {
    if dir_or_file.is_dir() {
        dir_or_file.join(default_name)
    } else {
        dir_or_file.to_path_buf()
    }
}

/// Reads a mapping trajectory from a directory or a pose CSV path.
pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryScan>> {
    let file = csv_path(path, POSES_FILE);
    let base = file.parent().unwrap_or(Path::new(".")).to_path_buf();
    let rows: Vec<PoseRow> = read_csv(&file)?;
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            check_finite(&file, i, &[r.x, r.y, r.theta])?;
            if r.cloud.is_empty() {
                return Err(LockitError::parse(&file, i + 2, "missing cloud path"));
            }
            Ok(TrajectoryScan {
                pose: Pose2::new(r.x, r.y, r.theta),
                scan_id: r.id,
                cloud: CloudSource::File(resolve(&base, &r.cloud)),
            })
        })
        .collect()
}

fn write_scans(dir: &Path, ids: &[String], clouds: &[Arc<PointCloud>]) -> Result<Vec<String>> {
    let cloud_dir = dir.join("clouds");
    fs::create_dir_all(&cloud_dir).map_err(|e| LockitError::io(&cloud_dir, e))?;
    ids.iter()
        .zip(clouds)
        .map(|(id, c)| {
            let rel = format!("clouds/{id}.lpcd");
            save_lpcd(c, &dir.join(&rel))?;
            Ok(rel)
        })
        .collect()
}

/// Writes `poses.csv` plus one LPCD file per scan.
pub fn write_trajectory(dir: &Path, poses: &[Pose2], ids: &[String], clouds: &[Arc<PointCloud>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LockitError::io(dir, e))?;
    let rels = write_scans(dir, ids, clouds)?;
    let rows: Vec<PoseRow> = poses
        .iter()
        .zip(ids)
        .zip(rels)
        .map(|((p, id), cloud)| PoseRow {
            id: id.clone(),
            x: p.x,
            y: p.y,
            theta: p.theta,
            cloud,
        })
        .collect();
    write_csv(&dir.join(POSES_FILE), &rows)
}

/// One query scan with the odometry that led to it.
#[derive(Debug, Clone)]
pub struct QueryScan {
    pub id: String,
    pub odometry: OdometryDelta,
    pub cloud: CloudSource,
    pub truth: Option<Pose2>,
}

/// Reads a query directory; ground truth is attached by scan id when present.
pub fn read_queries(dir: &Path) -> Result<Vec<QueryScan>> {
    let odo_path = dir.join(ODOMETRY_FILE);
    let rows: Vec<OdometryRow> = read_csv(&odo_path)?;
    if rows.is_empty() {
        return Err(LockitError::EmptyInput(format!("{} has no rows", odo_path.display())));
    }
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let truth: std::collections::HashMap<String, Pose2> = if gt_path.exists() {
        let gt: Vec<PoseRow> = read_csv(&gt_path)?;
        gt.into_iter()
            .enumerate()
            .map(|(i, r)| {
                check_finite(&gt_path, i, &[r.x, r.y, r.theta])?;
                Ok((r.id, Pose2::new(r.x, r.y, r.theta)))
            })
            .collect::<Result<_>>()?
    } else {
        Default::default()
    };
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            check_finite(&odo_path, i, &[r.dx, r.dy, r.dtheta])?;
            Ok(QueryScan {
                truth: truth.get(&r.id).copied(),
                odometry: OdometryDelta {
                    dx: r.dx,
                    dy: r.dy,
                    dtheta: r.dtheta,
                },
                cloud: CloudSource::File(resolve(dir, &r.cloud)),
                id: r.id,
            })
        })
        .collect()
}

/// Writes a query directory. `odometry[k]` leads from scan `k` to scan `k + 1`;
/// the first scan gets a zero delta.
pub fn write_queries(
    dir: &Path,
    ids: &[String],
    odometry: &[OdometryDelta],
    clouds: &[Arc<PointCloud>],
    truth: Option<&[Pose2]>,
) -> Result<()> {
    if odometry.len() + 1 != ids.len() || clouds.len() != ids.len() {
        return Err(LockitError::InvalidConfig(format!(
            "{} scans need {} odometry deltas and as many clouds (got {} and {})",
            ids.len(),
            ids.len().saturating_sub(1),
            odometry.len(),
            clouds.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| LockitError::io(dir, e))?;
    let rels = write_scans(dir, ids, clouds)?;
    let rows: Vec<OdometryRow> = std::iter::once(&OdometryDelta::zero())
        .chain(odometry)
        .zip(ids)
        .zip(&rels)
        .map(|((u, id), cloud)| OdometryRow {
            id: id.clone(),
            dx: u.dx,
            dy: u.dy,
            dtheta: u.dtheta,
            cloud: cloud.clone(),
        })
        .collect();
    write_csv(&dir.join(ODOMETRY_FILE), &rows)?;
    if let Some(truth) = truth {
        let rows: Vec<PoseRow> = truth
            .iter()
            .zip(ids)
            .zip(rels)
            .map(|((p, id), cloud)| PoseRow {
                id: id.clone(),
                x: p.x,
                y: p.y,
                theta: p.theta,
                cloud,
            })
            .collect();
        write_csv(&dir.join(GROUND_TRUTH_FILE), &rows)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(k: usize) -> Arc<PointCloud> {
        Arc::new(PointCloud::from_xyz(&[[k as f64, 1.0, 2.0], [3.0, k as f64, 0.5]]))
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let poses = vec![Pose2::new(0.0, 0.0, 0.1), Pose2::new(1.5, -2.0, -3.0)];
        let ids = vec!["a".to_string(), "b".to_string()];
        write_trajectory(dir.path(), &poses, &ids, &[cloud(0), cloud(1)]).unwrap();
        let back = read_trajectory(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (k, s) in back.iter().enumerate() {
            assert_eq!(s.pose, poses[k]);
            assert_eq!(s.scan_id, ids[k]);
            assert_eq!(*s.cloud.load().unwrap(), *cloud(k));
        }
    }

    #[test]
    fn queries_round_trip_with_truth() {
        let dir = tempfile::tempdir().unwrap();
        let ids: Vec<String> = (0..3).map(|k| format!("q{k}")).collect();
        let odo = vec![
            OdometryDelta { dx: 1.0, dy: 0.0, dtheta: 0.1 },
            OdometryDelta { dx: 0.9, dy: 0.1, dtheta: -0.2 },
        ];
        let truth: Vec<Pose2> = (0..3).map(|k| Pose2::new(k as f64, 0.0, 0.0)).collect();
        write_queries(dir.path(), &ids, &odo, &[cloud(0), cloud(1), cloud(2)], Some(&truth)).unwrap();
        let q = read_queries(dir.path()).unwrap();
        assert_eq!(q.len(), 3);
        assert_eq!(q[0].odometry, OdometryDelta::zero());
        assert_eq!(q[2].odometry, odo[1]);
        assert_eq!(q[1].truth, Some(truth[1]));
        fs::remove_file(dir.path().join(GROUND_TRUTH_FILE)).unwrap();
        assert!(read_queries(dir.path()).unwrap().iter().all(|s| s.truth.is_none()));
    }

    #[test]
    fn parse_errors_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(POSES_FILE);
        fs::write(&p, "id,x,y,theta,cloud\na,0,0,0,c.lpcd\nb,zero,0,0,c.lpcd\n").unwrap();
        match read_trajectory(&p) {
            Err(LockitError::Parse { path, line, .. }) => {
                assert_eq!(path, p);
                assert_eq!(line, 3);
            }
            other => panic!("{other:?}"),
        }
        let missing = dir.path().join("nope");
        let e = read_queries(&missing).unwrap_err();
        assert!(e.to_string().contains("nope"));
    }
}
