//! Two-view augmentation with tracked point identities.
//!
//! [`augment`] applies, in order: z/x/y rotations, axis flips, coordinate
//! jitter, brightness/contrast/saturation/hue jitter, Gaussian color noise,
//! voxelization and a random crop. Every step draws its random numbers in a
//! fixed order (apply-coin first, then parameters) whether or not it fires,
//! so a given seed always consumes the stream identically.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{PointCloud, Vec3};
use crate::rng::{derive_seed, seeded, Rng};

pub const MAX_ATTEMPTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Half-range of the z rotation, in multiples of π.
    pub rotate_z_angle: f64,
    pub rotate_z_p: f64,
    pub rotate_x_angle: f64,
    pub rotate_x_p: f64,
    pub rotate_y_angle: f64,
    pub rotate_y_p: f64,
    /// Per-axis probability of mirroring x and y.
    pub flip_p: f64,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    pub jitter_p: f64,
    pub brightness_ratio: f64,
    pub brightness_p: f64,
    pub contrast_ratio: f64,
    pub contrast_p: f64,
    pub saturation_ratio: f64,
    pub saturation_p: f64,
    /// Hue shift half-range as a fraction of the full hue cycle.
    pub hue_ratio: f64,
    pub hue_p: f64,
    pub color_noise_std: f64,
    pub color_noise_p: f64,
    pub voxel_size: f64,
    pub crop_ratio: f64,
    /// Minimum number of corresponding points for a view pair to be accepted.
    pub min_overlap: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate_z_angle: 1.0,
            rotate_z_p: 1.0,
            rotate_x_angle: 1.0 / 64.0,
            rotate_x_p: 1.0,
            rotate_y_angle: 1.0 / 64.0,
            rotate_y_p: 1.0,
            flip_p: 0.5,
            jitter_sigma: 0.005,
            jitter_clip: 0.02,
            jitter_p: 1.0,
            brightness_ratio: 0.4,
            brightness_p: 0.8,
            contrast_ratio: 0.4,
            contrast_p: 0.8,
            saturation_ratio: 0.2,
            saturation_p: 0.8,
            hue_ratio: 0.02,
            hue_p: 0.8,
            color_noise_std: 0.05,
            color_noise_p: 0.95,
            voxel_size: 0.02,
            crop_ratio: 0.6,
            min_overlap: 256,
        }
    }
}

impl AugmentConfig {
    /// Every random step disabled, no voxel merging, no crop.
    pub fn identity() -> Self {
        AugmentConfig {
            rotate_z_p: 0.0,
            rotate_x_p: 0.0,
            rotate_y_p: 0.0,
            flip_p: 0.0,
            jitter_p: 0.0,
            brightness_p: 0.0,
            contrast_p: 0.0,
            saturation_p: 0.0,
            hue_p: 0.0,
            color_noise_p: 0.0,
            voxel_size: 1e-9,
            crop_ratio: 1.0,
            min_overlap: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.rotate_z_p,
            self.rotate_x_p,
            self.rotate_y_p,
            self.flip_p,
            self.jitter_p,
            self.brightness_p,
            self.contrast_p,
            self.saturation_p,
            self.hue_p,
            self.color_noise_p,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        let nonneg = [
            self.rotate_z_angle,
            self.rotate_x_angle,
            self.rotate_y_angle,
            self.jitter_sigma,
            self.jitter_clip,
            self.brightness_ratio,
            self.contrast_ratio,
            self.saturation_ratio,
            self.hue_ratio,
            self.color_noise_std,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("augmentation magnitudes must be non-negative".into()));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::Config("voxel_size must be positive".into()));
        }
        if !(self.crop_ratio > 0.0 && self.crop_ratio <= 1.0) {
            return Err(Error::Config("crop_ratio must lie in (0, 1]".into()));
        }
        if self.min_overlap == 0 {
            return Err(Error::Config("min_overlap must be at least 1".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("augmentation config: {}", e)))
    }
}

pub(crate) fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn coin(rng: &mut Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

fn rotate(cloud: &mut PointCloud, axis: usize, angle: f64, center: Vec3) {
    let (s, c) = angle.sin_cos();
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    let rot = |v: &mut Vec3, origin: &Vec3| {
        let (x, y) = (v[a] - origin[a], v[b] - origin[b]);
        v[a] = c * x - s * y + origin[a];
        v[b] = s * x + c * y + origin[b];
    };
    for p in &mut cloud.coords {
        rot(p, &center);
    }
    if let Some(normals) = &mut cloud.normals {
        for n in normals {
            rot(n, &[0.0; 3]);
        }
    }
}

fn bbox_center(cloud: &PointCloud) -> Vec3 {
    let (lo, hi) = cloud.bounds();
    [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]))
}

fn luminance(c: &Vec3) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn clip01(c: Vec3) -> Vec3 {
    c.map(|v| v.clamp(0.0, 1.0))
}

pub(crate) fn rgb_to_hsv(c: Vec3) -> Vec3 {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == c[0] {
        ((c[1] - c[2]) / d).rem_euclid(6.0) / 6.0
    } else if max == c[1] {
        ((c[2] - c[0]) / d + 2.0) / 6.0
    } else {
        ((c[0] - c[1]) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub(crate) fn hsv_to_rgb(hsv: Vec3) -> Vec3 {
    let [h, s, v] = hsv;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Keeps one point per occupied voxel: the one with the smallest original id.
/// Survivors stay in input order.
pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> PointCloud {
    let mut best: HashMap<[i64; 3], usize> = HashMap::new();
    for (i, p) in cloud.coords.iter().enumerate() {
        let key = p.map(|v| (v / voxel_size).floor() as i64);
        best.entry(key)
            .and_modify(|j| {
                if cloud.ids[i] < cloud.ids[*j] {
                    *j = i;
                }
            })
            .or_insert(i);
    }
    let mut keep: Vec<usize> = best.into_values().collect();
    keep.sort_unstable();
    cloud.select(&keep)
}

/// Indices of the `round(ratio * M)` points closest (Chebyshev distance, ties by
/// index) to `center`: the smallest axis-aligned cube around it holding that many.
pub fn crop_indices(cloud: &PointCloud, center: Vec3, ratio: f64) -> Vec<usize> {
    let m = cloud.len();
    let target = ((ratio * m as f64).round() as usize).min(m);
    let mut order: Vec<(f64, usize)> = cloud
        .coords
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = (0..3).map(|k| (p[k] - center[k]).abs()).fold(0.0, f64::max);
            (d, i)
        })
        .collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = order[..target].iter().map(|e| e.1).collect();
    keep.sort_unstable();
    keep
}

pub fn augment(cloud: &PointCloud, seed: u64, cfg: &AugmentConfig) -> Result<PointCloud> {
    cloud.validate()?;
    cfg.validate()?;
    let mut rng = seeded(seed);
    let mut out = cloud.clone();

    // rotations about the bounding-box center: z, then x, then y
    for (axis, half, p) in [
        (2, cfg.rotate_z_angle, cfg.rotate_z_p),
        (0, cfg.rotate_x_angle, cfg.rotate_x_p),
        (1, cfg.rotate_y_angle, cfg.rotate_y_p),
    ] {
        let hit = coin(&mut rng, p);
        let angle = uniform(&mut rng, -half, half) * PI;
        if hit {
            let center = bbox_center(&out);
            rotate(&mut out, axis, angle, center);
        }
    }

    for axis in 0..2 {
        if coin(&mut rng, cfg.flip_p) {
            let center = bbox_center(&out);
            for p in &mut out.coords {
                p[axis] = 2.0 * center[axis] - p[axis];
            }
            if let Some(normals) = &mut out.normals {
                for n in normals {
                    n[axis] = -n[axis];
                }
            }
        }
    }

    if coin(&mut rng, cfg.jitter_p) && cfg.jitter_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.jitter_sigma).expect("valid sigma");
        for p in &mut out.coords {
            for v in p.iter_mut() {
                *v += noise.sample(&mut rng).clamp(-cfg.jitter_clip, cfg.jitter_clip);
            }
        }
    }

    let hit = coin(&mut rng, cfg.brightness_p);
    let f = uniform(&mut rng, 1.0 - cfg.brightness_ratio, 1.0 + cfg.brightness_ratio);
    if hit {
        for c in &mut out.colors {
            *c = clip01(c.map(|v| v * f));
        }
    }

    let hit = coin(&mut rng, cfg.contrast_p);
    let f = uniform(&mut rng, 1.0 - cfg.contrast_ratio, 1.0 + cfg.contrast_ratio);
    if hit {
        let mean = out.colors.iter().map(luminance).sum::<f64>() / out.len() as f64;
        for c in &mut out.colors {
            *c = clip01(c.map(|v| (v - mean) * f + mean));
        }
    }

    let hit = coin(&mut rng, cfg.saturation_p);
    let f = uniform(&mut rng, 1.0 - cfg.saturation_ratio, 1.0 + cfg.saturation_ratio);
    if hit {
        for c in &mut out.colors {
            let gray = luminance(c);
            *c = clip01(c.map(|v| (v - gray) * f + gray));
        }
    }

    let hit = coin(&mut rng, cfg.hue_p);
    let shift = uniform(&mut rng, -cfg.hue_ratio, cfg.hue_ratio);
    if hit {
        for c in &mut out.colors {
            let mut hsv = rgb_to_hsv(*c);
            hsv[0] = (hsv[0] + shift).rem_euclid(1.0);
            *c = clip01(hsv_to_rgb(hsv));
        }
    }

    if coin(&mut rng, cfg.color_noise_p) && cfg.color_noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.color_noise_std).expect("valid sigma");
        for c in &mut out.colors {
            for v in c.iter_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }

    let out = voxelize(&out, cfg.voxel_size);

    for _ in 0..MAX_ATTEMPTS {
        let center = out.coords[rng.random_range(0..out.len())];
        let keep = crop_indices(&out, center, cfg.crop_ratio);
        if !keep.is_empty() {
            return Ok(out.select(&keep));
        }
    }
    Err(Error::Crop(format!(
        "no points retained after {} crop attempts (ratio {})",
        MAX_ATTEMPTS, cfg.crop_ratio
    )))
}

/// Two augmented views of one scene and their shared points.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_q: PointCloud,
    pub view_k: PointCloud,
    pub overlap_q: Vec<usize>,
    pub overlap_k: Vec<usize>,
    /// (index in view_q, index in view_k), sorted by the q index.
    pub correspondence: Vec<(usize, usize)>,
}

impl ViewPair {
    pub fn from_views(view_q: PointCloud, view_k: PointCloud) -> Self {
        let k_index = view_k.index_of_ids();
        let correspondence: Vec<(usize, usize)> = view_q
            .ids
            .iter()
            .enumerate()
            .filter_map(|(i, id)| k_index.get(id).map(|&j| (i, j)))
            .collect();
        let overlap_q = correspondence.iter().map(|c| c.0).collect();
        let mut overlap_k: Vec<usize> = correspondence.iter().map(|c| c.1).collect();
        overlap_k.sort_unstable();
        ViewPair {
            view_q,
            view_k,
            overlap_q,
            overlap_k,
            correspondence,
        }
    }

    /// Same pair with the roles of the two views exchanged.
    pub fn swapped(&self) -> Self {
        ViewPair::from_views(self.view_k.clone(), self.view_q.clone())
    }

    /// Original ids of the overlap, in view_q order.
    pub fn overlap_ids(&self) -> Vec<u64> {
        self.overlap_q.iter().map(|&i| self.view_q.ids[i]).collect()
    }
}

pub fn make_view_pair(cloud: &PointCloud, seed: u64, cfg: &AugmentConfig, scene: &str) -> Result<ViewPair> {
    let mut best = 0;
    for attempt in 0..MAX_ATTEMPTS as u64 {
        let view_q = augment(cloud, derive_seed(seed, &[attempt, 0]), cfg)?;
        let view_k = augment(cloud, derive_seed(seed, &[attempt, 1]), cfg)?;
        let pair = ViewPair::from_views(view_q, view_k);
        if pair.correspondence.len() >= cfg.min_overlap {
            return Ok(pair);
        }
        best = best.max(pair.correspondence.len());
    }
    Err(Error::Overlap {
        scene: scene.to_string(),
        found: best,
        required: cfg.min_overlap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::dist2;
    use crate::pointcloud::synthetic::{generate_synthetic_scene, SceneRecipe};

    fn scene() -> PointCloud {
        generate_synthetic_scene(1, &SceneRecipe::default_room()).unwrap()
    }

    #[test]
    fn identity_pipeline_is_identity() {
        let c = scene();
        let out = augment(&c, 99, &AugmentConfig::identity()).unwrap();
        assert_eq!(out.ids, c.ids);
        for (a, b) in out.coords.iter().zip(&c.coords) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
        assert_eq!(out.colors, c.colors);
    }

    #[test]
    fn close_points_share_a_voxel() {
        let mut c = PointCloud::from_coords(vec![[0.005, 0.005, 0.005], [0.006, 0.005, 0.005]]);
        c.ids = vec![7, 3];
        let v = voxelize(&c, 0.02);
        assert_eq!(v.ids, vec![3]);
    }

    #[test]
    fn crop_fraction_on_uniform_cloud() {
        let mut coords = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                for k in 0..5 {
                    coords.push([i as f64 * 0.1, j as f64 * 0.1, k as f64 * 0.1]);
                }
            }
        }
        let c = PointCloud::from_coords(coords);
        let cfg = AugmentConfig {
            voxel_size: 0.01,
            ..AugmentConfig::identity()
        };
        let cfg = AugmentConfig { crop_ratio: 0.6, ..cfg };
        for seed in 0..5 {
            let out = augment(&c, seed, &cfg).unwrap();
            let frac = out.len() as f64 / c.len() as f64;
            assert!((0.5..=0.7).contains(&frac), "{}", frac);
        }
    }

    #[test]
    fn ids_are_unique_subset_and_rotation_keeps_distances() {
        let c = scene();
        let out = augment(&c, 5, &AugmentConfig::default()).unwrap();
        out.validate().unwrap();
        let all: std::collections::HashSet<u64> = c.ids.iter().copied().collect();
        assert!(out.ids.iter().all(|id| all.contains(id)));

        let rot_only = AugmentConfig {
            rotate_z_p: 1.0,
            rotate_x_p: 1.0,
            rotate_y_p: 1.0,
            ..AugmentConfig::identity()
        };
        let r = augment(&c, 17, &rot_only).unwrap();
        for (i, j) in [(0usize, 5usize), (10, 400), (3, 900)] {
            let before = dist2(&c.coords[i], &c.coords[j]).sqrt();
            let after = dist2(&r.coords[i], &r.coords[j]).sqrt();
            assert!((before - after).abs() < 1e-9);
        }
        for n in r.normals.as_ref().unwrap() {
            assert!((crate::pointcloud::norm(n) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_pair_is_full_diagonal() {
        let c = scene();
        let pair = make_view_pair(&c, 3, &AugmentConfig::identity(), "s").unwrap();
        assert_eq!(pair.correspondence.len(), c.len());
        assert!(pair.correspondence.iter().all(|(a, b)| a == b));
    }

    #[test]
    fn insufficient_overlap_errors_after_retries() {
        let c = scene();
        let cfg = AugmentConfig {
            crop_ratio: 0.05,
            min_overlap: c.len(),
            ..AugmentConfig::default()
        };
        match make_view_pair(&c, 3, &cfg, "room-7") {
            Err(Error::Overlap { scene, .. }) => assert_eq!(scene, "room-7"),
            other => panic!("unexpected {:?}", other.map(|p| p.correspondence.len())),
        }
    }

    #[test]
    fn swapping_transposes_correspondence() {
        let c = scene();
        let pair = make_view_pair(&c, 11, &AugmentConfig::default(), "s").unwrap();
        let sw = pair.swapped();
        let mut t: Vec<(usize, usize)> = pair.correspondence.iter().map(|&(a, b)| (b, a)).collect();
        t.sort_unstable();
        assert_eq!(t, sw.correspondence);
        for &(a, b) in &pair.correspondence {
            assert_eq!(pair.view_q.ids[a], pair.view_k.ids[b]);
        }
    }

    #[test]
    fn hsv_round_trip() {
        for c in [[0.2, 0.4, 0.9], [1.0, 0.0, 0.0], [0.5, 0.5, 0.5], [0.1, 0.8, 0.3]] {
            let back = hsv_to_rgb(rgb_to_hsv(c));
            for k in 0..3 {
                assert!((back[k] - c[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_config_rejected() {
        let c = scene();
        let cfg = AugmentConfig {
            flip_p: 1.5,
            ..AugmentConfig::default()
        };
        assert!(matches!(augment(&c, 0, &cfg), Err(Error::Config(_))));
    }
}
