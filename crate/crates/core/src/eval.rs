//! Per-query error records and their aggregation into median/mean tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{read_csv, write_csv};
use crate::error::{LockitError, Result};
use crate::geometry::{angle_distance, Pose2};

/// One scored query. `x`, `y` are the ground-truth position, used for region tagging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub session: String,
    pub iter: usize,
    pub method: String,
    pub x: f64,
    pub y: f64,
    pub position_error_m: f64,
    pub orientation_error_deg: f64,
}

impl ErrorRecord {
    pub fn new(session: &str, iter: usize, method: &str, estimate: &Pose2, truth: &Pose2) -> Self {
        ErrorRecord {
            session: session.to_string(),
            iter,
            method: method.to_string(),
            x: truth.x,
            y: truth.y,
            position_error_m: position_error(estimate, truth),
            orientation_error_deg: orientation_error_deg(estimate.theta, truth.theta),
        }
    }
}

pub fn position_error(estimate: &Pose2, truth: &Pose2) -> f64 {
    estimate.distance_to(truth)
}

/// Absolute heading difference in degrees, wrapped into `[0, 180]`.
pub fn orientation_error_deg(estimate: f64, truth: f64) -> f64 {
    angle_distance(estimate, truth).to_degrees().clamp(0.0, 180.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub median: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    let median = median(values).ok_or_else(|| LockitError::EmptyInput("no values to summarize".into()))?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(Summary {
        count: values.len(),
        median,
        mean,
        std: var.sqrt(),
    })
}

/// Named polygons; records outside every polygon get the default label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regions {
    #[serde(default = "default_segment")]
    pub default: String,
    pub regions: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub polygon: Vec<[f64; 2]>,
}

fn default_segment() -> String {
    "outdoor".into()
}

impl Regions {
    pub fn load(path: &Path) -> Result<Regions> {
        let text = std::fs::read_to_string(path).map_err(|e| LockitError::io(path, e))?;
        let r: Regions = serde_json::from_str(&text).map_err(|e| LockitError::parse(path, e.line(), e.to_string()))?;
        if let Some(bad) = r.regions.iter().find(|g| g.polygon.len() < 3) {
            return Err(LockitError::format(path, format!("region '{}' has fewer than 3 vertices", bad.name)));
        }
        Ok(r)
    }

    pub fn label(&self, x: f64, y: f64) -> &str {
        self.regions
            .iter()
            .find(|r| point_in_polygon(x, y, &r.polygon))
            .map(|r| r.name.as_str())
            .unwrap_or(&self.default)
    }
}

/// Even-odd rule.
pub fn point_in_polygon(x: f64, y: f64, polygon: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = polygon.len();
    for i in 0..n {
        let (a, b) = (polygon[i], polygon[(i + n - 1) % n]);
        if (a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
    }
    inside
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub session: String,
    pub method: String,
    pub segment: String,
    pub count: usize,
    pub median_position_m: f64,
    pub mean_position_m: f64,
    pub std_position_m: f64,
    pub median_orientation_deg: f64,
    pub mean_orientation_deg: f64,
    pub std_orientation_deg: f64,
}

pub const ALL: &str = "all";

/// Rows per (session, method, segment), plus `all` rollups over sessions and
/// segments. Ordered by session, method, segment with `all` last in each.
pub fn aggregate(records: &[ErrorRecord], regions: Option<&Regions>) -> Result<Vec<TableRow>> {
    if records.is_empty() {
        return Err(LockitError::EmptyInput("no error records".into()));
    }
    // key parts use a leading flag so that `all` sorts after concrete names
    type Key = ((bool, String), String, (bool, String));
    let mut groups: BTreeMap<Key, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let seg = regions.map(|g| g.label(r.x, r.y).to_string());
        let sessions = [(false, r.session.clone()), (true, ALL.to_string())];
        let mut segments = vec![(true, ALL.to_string())];
        if let Some(s) = seg {
            segments.push((false, s));
        }
        for s in &sessions {
            for g in &segments {
                let e = groups.entry((s.clone(), r.method.clone(), g.clone())).or_default();
                e.0.push(r.position_error_m);
                e.1.push(r.orientation_error_deg);
            }
        }
    }
    groups
        .into_iter()
        .map(|((s, method, g), (p, o))| {
            let (ps, os) = (summarize(&p)?, summarize(&o)?);
            Ok(TableRow {
                session: s.1,
                method,
                segment: g.1,
                count: ps.count,
                median_position_m: ps.median,
                mean_position_m: ps.mean,
                std_position_m: ps.std,
                median_orientation_deg: os.median,
                mean_orientation_deg: os.mean,
                std_orientation_deg: os.std,
            })
        })
        .collect()
}

/// Fixed-width text rendering of the table.
pub fn format_table(rows: &[TableRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} {:<8} {:<10} {:>6} {:>16} {:>14} {:>18} {:>16}",
        "session", "method", "segment", "count", "median error [m]", "mean error [m]", "median error [deg]", "mean error [deg]"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<16} {:<8} {:<10} {:>6} {:>16.3} {:>14.3} {:>18.3} {:>16.3}",
            r.session,
            r.method,
            r.segment,
            r.count,
            r.median_position_m,
            r.mean_position_m,
            r.median_orientation_deg,
            r.mean_orientation_deg
        );
    }
    s
}

pub fn read_errors(path: &Path) -> Result<Vec<ErrorRecord>> {
    read_csv(path)
}

pub fn write_errors(path: &Path, records: &[ErrorRecord]) -> Result<()> {
    write_csv(path, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn arithmetic_examples() {
        let s = summarize(&[1.0, 2.0, 100.0]).unwrap();
        assert_eq!(s.median, 2.0);
        assert!((s.mean - 34.333_333_333_333_336).abs() < 1e-12);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert!(matches!(summarize(&[]), Err(LockitError::EmptyInput(_))));
    }

    #[test]
    fn orientation_wraps() {
        let e = orientation_error_deg(-179f64.to_radians(), 179f64.to_radians());
        assert!((e - 2.0).abs() < 1e-9);
        assert!((orientation_error_deg(0.0, std::f64::consts::PI) - 180.0).abs() < 1e-9);
    }

    #[test]
    fn regions_tag_records() {
        let regions = Regions {
            default: "outdoor".into(),
            regions: vec![Region {
                name: "indoor".into(),
                polygon: vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]],
            }],
        };
        assert_eq!(regions.label(5.0, 5.0), "indoor");
        assert_eq!(regions.label(15.0, 5.0), "outdoor");
        let rec = |x: f64, e: f64| ErrorRecord {
            session: "s".into(),
            iter: 0,
            method: "dlf".into(),
            x,
            y: 1.0,
            position_error_m: e,
            orientation_error_deg: 0.0,
        };
        let rows = aggregate(&[rec(1.0, 1.0), rec(2.0, 3.0), rec(20.0, 10.0)], Some(&regions)).unwrap();
        let find = |seg: &str| rows.iter().find(|r| r.session == "s" && r.segment == seg).unwrap();
        assert_eq!(find("indoor").median_position_m, 2.0);
        assert_eq!(find("outdoor").count, 1);
        assert_eq!(find(ALL).count, 3);
        assert_eq!(rows.last().unwrap().session, ALL);
    }

    fn scalar_oracle(values: &[f64]) -> (f64, f64) {
        let mut sorted = values.to_vec();
        // insertion sort, independent of the library sort
        for i in 1..sorted.len() {
            let mut j = i;
            while j > 0 && sorted[j - 1] > sorted[j] {
                sorted.swap(j - 1, j);
                j -= 1;
            }
        }
        let n = sorted.len();
        let med = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
        let mut total = 0.0;
        for v in values {
            total += v;
        }
        (med, total / n as f64)
    }

    proptest! {
        #[test]
        fn table_matches_scalar_oracle(
            errs in prop::collection::vec((0usize..3, 0usize..2, 0.0f64..50.0, 0.0f64..180.0), 1..80)
        ) {
            let methods = ["coarse", "dlf"];
            let records: Vec<ErrorRecord> = errs
                .iter()
                .enumerate()
                .map(|(i, &(s, m, p, o))| ErrorRecord {
                    session: format!("s{s}"),
                    iter: i,
                    method: methods[m].into(),
                    x: 0.0,
                    y: 0.0,
                    position_error_m: p,
                    orientation_error_deg: o,
                })
                .collect();
            let rows = aggregate(&records, None).unwrap();
            for row in &rows {
                let sel: Vec<&ErrorRecord> = records
                    .iter()
                    .filter(|r| (row.session == ALL || r.session == row.session) && r.method == row.method)
                    .collect();
                let p: Vec<f64> = sel.iter().map(|r| r.position_error_m).collect();
                let o: Vec<f64> = sel.iter().map(|r| r.orientation_error_deg).collect();
                let (pm, pa) = scalar_oracle(&p);
                let (om, oa) = scalar_oracle(&o);
                prop_assert_eq!(row.count, sel.len());
                prop_assert_eq!(row.median_position_m, pm);
                prop_assert!((row.mean_position_m - pa).abs() <= 1e-12 * pa.max(1.0));
                prop_assert_eq!(row.median_orientation_deg, om);
                prop_assert!((row.mean_orientation_deg - oa).abs() <= 1e-12 * oa.max(1.0));
            }
        }
    }
}
