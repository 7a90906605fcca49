//! Point clouds: storage, PLY I/O, synthetic labeled scenes, kNN graphs and normals.

pub(crate) mod knn;
mod normals;
pub mod ply;
pub mod synthetic;

use std::collections::HashMap;

pub use knn::{knn_graph, KnnGraph};
pub use normals::{estimate_normals, orient_normal, NormalEstimate};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Per-point attributes of one scene. `ids` are stable across augmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<Vec3>,
    pub colors: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
    pub ids: Vec<u64>,
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    /// Cloud with default gray colors and ids `0..M`.
    pub fn from_coords(coords: Vec<Vec3>) -> Self {
        let m = coords.len();
        PointCloud {
            coords,
            colors: vec![[0.5; 3]; m],
            normals: None,
            ids: (0..m as u64).collect(),
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.coords.len();
        if m == 0 {
            return Err(Error::EmptyInput("point cloud has no points".into()));
        }
        let bad = |what: &str, n: usize| Error::Precondition(format!("{} has {} entries for {} points", what, n, m));
        if self.colors.len() != m {
            return Err(bad("colors", self.colors.len()));
        }
        if self.ids.len() != m {
            return Err(bad("ids", self.ids.len()));
        }
        if let Some(n) = &self.normals {
            if n.len() != m {
                return Err(bad("normals", n.len()));
            }
            if let Some(i) = n.iter().position(|v| (norm(v) - 1.0).abs() > 1e-6) {
                return Err(Error::Precondition(format!("normal {} is not unit length", i)));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != m {
                return Err(bad("labels", l.len()));
            }
        }
        let mut seen = std::collections::HashSet::with_capacity(m);
        for id in &self.ids {
            if !seen.insert(*id) {
                return Err(Error::Precondition(format!("duplicate point id {}", id)));
            }
        }
        Ok(())
    }

    /// New cloud holding the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
            normals: self.normals.as_ref().map(|n| indices.iter().map(|&i| n[i]).collect()),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn index_of_ids(&self) -> HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for p in &self.coords {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.coords.len().max(1) as f64;
        c.map(|v| v / n)
    }

    /// Axis-aligned bounds as (min, max).
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.coords {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }
}

pub(crate) fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    dot(&d, &d)
}

pub(crate) fn normalize(a: &Vec3) -> Option<Vec3> {
    let n = norm(a);
    if n > 0.0 && n.is_finite() {
        Some(a.map(|v| v / n))
    } else {
        None
    }
}
