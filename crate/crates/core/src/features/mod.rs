//! Global scan descriptors and per-point local features behind one backend
//! contract. Two backends ship here: a file backend reading precomputed LDSC
//! files, and a handcrafted synthetic backend that needs no model.

pub mod ldsc;
mod synthetic;

use std::path::{Path, PathBuf};

use nalgebra::Point3;

use crate::cloud::PointCloud;
use crate::error::{LockitError, Result};

pub use synthetic::{synthetic_global, synthetic_local, SyntheticLocalConfig};

pub const NETWORK_GLOBAL_DIM: usize = 512;
pub const NETWORK_LOCAL_DIM: usize = 192;
pub const DEFAULT_LOCAL_LAYER: &str = "3D Sparse Transpose Convolution 2";

/// Fixed-length scan embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub values: Vec<f32>,
}

impl GlobalDescriptor {
    pub fn new(values: Vec<f32>) -> Self {
        GlobalDescriptor { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn squared_distance(&self, other: &GlobalDescriptor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                let d = *a as f64 - *b as f64;
                d * d
            })
            .sum()
    }

    pub fn distance(&self, other: &GlobalDescriptor) -> f64 {
        self.squared_distance(other).sqrt()
    }
}

/// Points with one feature vector each; features are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureCloud {
    pub points: Vec<Point3<f64>>,
    pub dim: usize,
    features: Vec<f32>,
}

impl LocalFeatureCloud {
    pub fn new(points: Vec<Point3<f64>>, dim: usize, features: Vec<f32>) -> Result<Self> {
        if features.len() != points.len() * dim {
            return Err(LockitError::DimensionMismatch {
                expected: points.len() * dim,
                actual: features.len(),
            });
        }
        Ok(LocalFeatureCloud {
            points,
            dim,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn raw_features(&self) -> &[f32] {
        &self.features
    }

    pub fn point_cloud(&self) -> PointCloud {
        PointCloud::new(self.points.clone())
    }

    /// Copy with each feature vector scaled to unit length (zero vectors kept).
    pub fn l2_normalized(&self) -> LocalFeatureCloud {
        let mut features = self.features.clone();
        if self.dim > 0 {
            for row in features.chunks_mut(self.dim) {
                let n = row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
                }
            }
        }
        LocalFeatureCloud {
            points: self.points.clone(),
            dim: self.dim,
            features,
        }
    }
}

/// Source of global descriptors and local features.
///
/// The `scan_id` identifies the scan for backends that look results up rather
/// than computing them; computing backends ignore it.
pub trait FeatureBackend: Send + Sync {
    fn name(&self) -> &str;
    fn global_dim(&self) -> usize;
    fn local_dim(&self) -> usize;
    /// Name of the layer local features come from.
    fn local_layer(&self) -> &str;

    fn compute_global(&self, scan_id: &str, cloud: &PointCloud) -> Result<GlobalDescriptor>;
    fn compute_local(&self, scan_id: &str, cloud: &PointCloud) -> Result<LocalFeatureCloud>;
}

/// Global descriptor with the backend's dimension contract enforced.
pub fn global_descriptor(backend: &dyn FeatureBackend, scan_id: &str, cloud: &PointCloud) -> Result<GlobalDescriptor> {
    let d = backend.compute_global(scan_id, cloud)?;
    if d.len() != backend.global_dim() {
        return Err(LockitError::DimensionMismatch {
            expected: backend.global_dim(),
            actual: d.len(),
        });
    }
    if !d.is_finite() {
        return Err(LockitError::InvalidConfig(format!("non-finite descriptor for scan '{scan_id}'")));
    }
    Ok(d)
}

/// Local features with the backend's dimension contract enforced.
pub fn local_features(backend: &dyn FeatureBackend, scan_id: &str, cloud: &PointCloud) -> Result<LocalFeatureCloud> {
    let f = backend.compute_local(scan_id, cloud)?;
    if f.dim != backend.local_dim() {
        return Err(LockitError::DimensionMismatch {
            expected: backend.local_dim(),
            actual: f.dim,
        });
    }
    Ok(f)
}

/// Handcrafted histogram/PCA backend.
#[derive(Debug, Clone, Default)]
pub struct SyntheticBackend {
    pub local: SyntheticLocalConfig,
}

impl SyntheticBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

impl FeatureBackend for SyntheticBackend {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn global_dim(&self) -> usize {
        NETWORK_GLOBAL_DIM
    }

    fn local_dim(&self) -> usize {
        NETWORK_LOCAL_DIM
    }

    fn local_layer(&self) -> &str {
        "synthetic-pca-histogram"
    }

    fn compute_global(&self, _scan_id: &str, cloud: &PointCloud) -> Result<GlobalDescriptor> {
        synthetic_global(cloud)
    }

    fn compute_local(&self, _scan_id: &str, cloud: &PointCloud) -> Result<LocalFeatureCloud> {
        synthetic_local(cloud, &self.local)
    }
}

/// Reads `<scan_id>.g.ldsc` / `<scan_id>.l.ldsc` from a directory.
#[derive(Debug, Clone)]
pub struct FileBackend {
    dir: PathBuf,
    global_dim: usize,
    local_dim: usize,
    layer: String,
}

impl FileBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FileBackend {
            dir: dir.into(),
            global_dim: NETWORK_GLOBAL_DIM,
            local_dim: NETWORK_LOCAL_DIM,
            layer: DEFAULT_LOCAL_LAYER.to_string(),
        }
    }

    pub fn with_dims(mut self, global_dim: usize, local_dim: usize) -> Self {
        self.global_dim = global_dim;
        self.local_dim = local_dim;
        self
    }

    pub fn with_layer(mut self, layer: impl Into<String>) -> Self {
        self.layer = layer.into();
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn global_path(&self, scan_id: &str) -> PathBuf {
        self.dir.join(format!("{scan_id}.g.ldsc"))
    }

    pub fn local_path(&self, scan_id: &str) -> PathBuf {
        self.dir.join(format!("{scan_id}.l.ldsc"))
    }

    fn load(&self, path: &Path, scan_id: &str) -> Result<ldsc::LdscFile> {
        if !path.is_file() {
            return Err(LockitError::BackendUnavailable(scan_id.to_string()));
        }
        ldsc::read_ldsc(path)
    }
}

impl FeatureBackend for FileBackend {
    fn name(&self) -> &str {
        "file"
    }

    fn global_dim(&self) -> usize {
        self.global_dim
    }

    fn local_dim(&self) -> usize {
        self.local_dim
    }

    fn local_layer(&self) -> &str {
        &self.layer
    }

    fn compute_global(&self, scan_id: &str, _cloud: &PointCloud) -> Result<GlobalDescriptor> {
        let path = self.global_path(scan_id);
        let file = self.load(&path, scan_id)?;
        match file.payload {
            ldsc::LdscPayload::Global(mut v) if v.len() == 1 => {
                if file.dim != self.global_dim {
                    return Err(LockitError::DimensionMismatch {
                        expected: self.global_dim,
                        actual: file.dim,
                    });
                }
                Ok(v.remove(0))
            }
            _ => Err(LockitError::format(path, "expected exactly one global descriptor")),
        }
    }

    fn compute_local(&self, scan_id: &str, _cloud: &PointCloud) -> Result<LocalFeatureCloud> {
        let path = self.local_path(scan_id);
        let file = self.load(&path, scan_id)?;
        if file.layer != self.layer {
            log::warn!(
                "{}: layer '{}' differs from configured '{}'",
                path.display(),
                file.layer,
                self.layer
            );
        }
        match file.payload {
            ldsc::LdscPayload::Local(l) => Ok(l),
            _ => Err(LockitError::format(path, "expected a local feature file")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_backend_passes_stored_values_through() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<f32> = (0..512).map(|i| (i as f32).sin()).collect();
        let d = GlobalDescriptor::new(values.clone());
        ldsc::write_global_file(&dir.path().join("scan7.g.ldsc"), &d, "global").unwrap();
        let b = FileBackend::new(dir.path());
        let got = global_descriptor(&b, "scan7", &PointCloud::default()).unwrap();
        assert_eq!(got.values, values);
        assert!(matches!(
            global_descriptor(&b, "missing", &PointCloud::default()),
            Err(LockitError::BackendUnavailable(id)) if id == "missing"
        ));
    }

    #[test]
    fn file_backend_local_roundtrip_and_dims() {
        let dir = tempfile::tempdir().unwrap();
        let pts = vec![Point3::new(1.0, 2.0, 3.0), Point3::new(-1.0, 0.5, 0.25)];
        let feats: Vec<f32> = (0..2 * 192).map(|i| i as f32 * 0.01).collect();
        let l = LocalFeatureCloud::new(pts, 192, feats).unwrap();
        ldsc::write_local_file(&dir.path().join("a.l.ldsc"), &l, DEFAULT_LOCAL_LAYER).unwrap();
        let b = FileBackend::new(dir.path());
        assert_eq!(local_features(&b, "a", &PointCloud::default()).unwrap(), l);

        let small = FileBackend::new(dir.path()).with_dims(512, 64);
        assert!(matches!(
            local_features(&small, "a", &PointCloud::default()),
            Err(LockitError::DimensionMismatch { expected: 64, actual: 192 })
        ));
    }

    #[test]
    fn wrong_global_dim_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        ldsc::write_global_file(&dir.path().join("s.g.ldsc"), &GlobalDescriptor::new(vec![0.0; 16]), "g").unwrap();
        let b = FileBackend::new(dir.path());
        assert!(matches!(
            global_descriptor(&b, "s", &PointCloud::default()),
            Err(LockitError::DimensionMismatch { expected: 512, actual: 16 })
        ));
    }

    #[test]
    fn feature_cloud_checks_sizes() {
        assert!(LocalFeatureCloud::new(vec![Point3::origin()], 3, vec![0.0; 2]).is_err());
    }
}
