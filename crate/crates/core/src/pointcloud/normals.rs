use nalgebra::{Matrix3, SymmetricEigen};

use super::{KnnGraph, PointCloud, Vec3};
use crate::error::{Error, Result};

/// Output of [`estimate_normals`]: the cloud with normals replaced, plus the
/// indices whose neighborhood covariance had rank < 2.
#[derive(Debug, Clone)]
pub struct NormalEstimate {
    pub cloud: PointCloud,
    pub degenerate: Vec<usize>,
}

const SIGN_TOL: f64 = 1e-9;

/// Flips `n` so that z >= 0, then y >= 0, then x >= 0 on ties (|component| below 1e-9).
pub fn orient_normal(n: Vec3) -> Vec3 {
    for axis in [2, 1, 0] {
        if n[axis].abs() > SIGN_TOL {
            return if n[axis] < 0.0 { n.map(|v| -v) } else { n };
        }
    }
    n
}

/// PCA normals: smallest-eigenvalue eigenvector of each point's neighborhood
/// covariance (the point plus its graph neighbors).
pub fn estimate_normals(cloud: &PointCloud, graph: &KnnGraph) -> Result<NormalEstimate> {
    let m = cloud.len();
    if graph.num_points() != m {
        return Err(Error::Precondition(format!(
            "graph built over {} points, cloud has {}",
            graph.num_points(),
            m
        )));
    }
    if graph.k < 3 {
        return Err(Error::Precondition(format!(
            "normal estimation needs k >= 3, got {}",
            graph.k
        )));
    }
    let mut normals = Vec::with_capacity(m);
    let mut degenerate = Vec::new();
    for i in 0..m {
        let idx: Vec<usize> = std::iter::once(i).chain(graph.neighbor_indices(i)).collect();
        let n = idx.len() as f64;
        let mut mean = [0.0; 3];
        for &j in &idx {
            for a in 0..3 {
                mean[a] += cloud.coords[j][a] / n;
            }
        }
        let mut cov = Matrix3::<f64>::zeros();
        for &j in &idx {
            let d = [
                cloud.coords[j][0] - mean[0],
                cloud.coords[j][1] - mean[1],
                cloud.coords[j][2] - mean[2],
            ];
            for a in 0..3 {
                for b in 0..3 {
                    cov[(a, b)] += d[a] * d[b] / n;
                }
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let largest = eig.eigenvalues[order[2]];
        let middle = eig.eigenvalues[order[1]];
        if !(largest > 0.0) || middle <= 1e-12 * largest {
            degenerate.push(i);
            normals.push([0.0, 0.0, 1.0]);
            continue;
        }
        let v = eig.eigenvectors.column(order[0]);
        let len = v.norm();
        normals.push(orient_normal([v[0] / len, v[1] / len, v[2] / len]));
    }
    let mut out = cloud.clone();
    out.normals = Some(normals);
    Ok(NormalEstimate { cloud: out, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{dot, knn_graph};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn grid(f: impl Fn(f64, f64) -> Vec3) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                pts.push(f(i as f64 * 0.1, j as f64 * 0.13));
            }
        }
        PointCloud::from_coords(pts)
    }

    #[test]
    fn plane_z0_gives_up_normals() {
        let c = grid(|a, b| [a, b, 0.0]);
        let g = knn_graph(&c, 8).unwrap();
        let est = estimate_normals(&c, &g).unwrap();
        assert!(est.degenerate.is_empty());
        for n in est.cloud.normals.unwrap() {
            assert!((n[2] - 1.0).abs() < 1e-9, "{:?}", n);
        }
    }

    #[test]
    fn plane_x0_gives_x_normals() {
        let c = grid(|a, b| [0.0, a, b]);
        let g = knn_graph(&c, 8).unwrap();
        let est = estimate_normals(&c, &g).unwrap();
        for n in est.cloud.normals.unwrap() {
            assert!((n[0] - 1.0).abs() < 1e-9, "{:?}", n);
        }
    }

    #[test]
    fn collinear_neighborhood_is_degenerate() {
        let c = PointCloud::from_coords((0..6).map(|i| [i as f64, 0.0, 0.0]).collect());
        let g = knn_graph(&c, 4).unwrap();
        let est = estimate_normals(&c, &g).unwrap();
        assert_eq!(est.degenerate.len(), 6);
        assert!(est.cloud.normals.unwrap().iter().all(|n| *n == [0.0, 0.0, 1.0]));
    }

    #[test]
    fn small_k_rejected() {
        let c = grid(|a, b| [a, b, 0.0]);
        let g = knn_graph(&c, 2).unwrap();
        assert!(estimate_normals(&c, &g).is_err());
    }

    #[test]
    fn noisy_sphere_angular_error_below_ten_degrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.002).unwrap();
        let r = 0.5;
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..1500 {
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let s = (1.0 - z * z).sqrt();
            let u = [s * phi.cos(), s * phi.sin(), z];
            truth.push(u);
            pts.push(u.map(|v| v * r + noise.sample(&mut rng)));
        }
        let c = PointCloud::from_coords(pts);
        let g = knn_graph(&c, 16).unwrap();
        let est = estimate_normals(&c, &g).unwrap();
        let normals = est.cloud.normals.unwrap();
        let mean_err: f64 = normals
            .iter()
            .zip(&truth)
            .map(|(n, t)| dot(n, t).abs().min(1.0).acos().to_degrees())
            .sum::<f64>()
            / truth.len() as f64;
        assert!(mean_err < 10.0, "mean angular error {}", mean_err);
    }

    #[test]
    fn rotation_rotates_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| {
                let (x, y): (f64, f64) = (rng.random(), rng.random());
                [x, y, 0.3 * x * x - 0.2 * y]
            })
            .collect();
        let (a, b) = (0.7f64, -0.4f64);
        // rotation about z then x
        let rot = |p: &Vec3| {
            let q = [a.cos() * p[0] - a.sin() * p[1], a.sin() * p[0] + a.cos() * p[1], p[2]];
            [q[0], b.cos() * q[1] - b.sin() * q[2], b.sin() * q[1] + b.cos() * q[2]]
        };
        let c1 = PointCloud::from_coords(pts.clone());
        let c2 = PointCloud::from_coords(pts.iter().map(rot).collect());
        let n1 = estimate_normals(&c1, &knn_graph(&c1, 12).unwrap())
            .unwrap()
            .cloud
            .normals
            .unwrap();
        let n2 = estimate_normals(&c2, &knn_graph(&c2, 12).unwrap())
            .unwrap()
            .cloud
            .normals
            .unwrap();
        for (u, v) in n1.iter().zip(&n2) {
            let ru = orient_normal(rot(u));
            for k in 0..3 {
                assert!((ru[k] - v[k]).abs() < 1e-5, "{:?} vs {:?}", ru, v);
            }
        }
    }
}
