//! Labeled synthetic indoor scenes sampled on analytic surfaces.
//!
//! A recipe is a TOML document:
//!
//! ```toml
//! jitter = 0.002          # Gaussian coordinate noise (m)
//! color_noise = 0.03      # Gaussian per-point color noise
//! random_colors = false   # draw each primitive's base color from the scene seed
//! layout_jitter = 0.0     # uniform xy shift (m) applied to boxes and spheres
//!
//! [[primitive]]
//! kind = "floor"          # floor | wall | box | sphere
//! class = 0               # semantic class id, 0..8
//! center = [0.0, 0.0, 0.0]
//! extent = [2.0, 2.0]     # floor [sx, sy]; wall [width, height]; box [sx, sy, sz]; sphere [radius]
//! density = 100.0         # points per square meter
//! # normal = [1.0, 0.0, 0.0]   walls only: horizontal facing direction
//! # color = [0.5, 0.5, 0.5]
//! ```
//!
//! Boxes are sampled on five faces (no bottom face), as objects resting on a floor.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{normalize, PointCloud, Vec3};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};

pub const MAX_CLASSES: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Floor,
    Wall,
    Box,
    Sphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub class: u32,
    #[serde(default)]
    pub center: Vec3,
    pub extent: Vec<f64>,
    pub density: f64,
    #[serde(default)]
    pub normal: Option<Vec3>,
    #[serde(default)]
    pub color: Option<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecipe {
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default = "default_color_noise")]
    pub color_noise: f64,
    #[serde(default)]
    pub random_colors: bool,
    #[serde(default)]
    pub layout_jitter: f64,
    #[serde(rename = "primitive", default)]
    pub primitives: Vec<Primitive>,
}

fn default_jitter() -> f64 {
    0.002
}

fn default_color_noise() -> f64 {
    0.03
}

const PALETTE: [Vec3; 8] = [
    [0.55, 0.45, 0.35],
    [0.85, 0.85, 0.80],
    [0.20, 0.35, 0.60],
    [0.70, 0.20, 0.20],
    [0.25, 0.60, 0.30],
    [0.80, 0.70, 0.20],
    [0.50, 0.30, 0.60],
    [0.30, 0.30, 0.30],
];

impl Primitive {
    fn extent_n(&self, n: usize) -> Result<&[f64]> {
        if self.extent.len() != n || self.extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Config(format!(
                "{:?} primitive needs {} positive extent values, got {:?}",
                self.kind, n, self.extent
            )));
        }
        Ok(&self.extent)
    }

    pub fn area(&self) -> Result<f64> {
        Ok(match self.kind {
            PrimitiveKind::Floor | PrimitiveKind::Wall => {
                let e = self.extent_n(2)?;
                e[0] * e[1]
            }
            PrimitiveKind::Box => {
                let e = self.extent_n(3)?;
                box_faces(e).iter().map(|f| f.0).sum()
            }
            PrimitiveKind::Sphere => {
                let r = self.extent_n(1)?[0];
                2.0 * TAU * r * r
            }
        })
    }

    pub fn point_count(&self) -> Result<usize> {
        Ok((self.area()? * self.density).round() as usize)
    }

    fn wall_normal(&self) -> Result<Vec3> {
        let n = self.normal.unwrap_or([1.0, 0.0, 0.0]);
        if n[2] != 0.0 {
            return Err(Error::Config("wall normal must be horizontal".into()));
        }
        normalize(&n).ok_or_else(|| Error::Config("wall normal must be nonzero".into()))
    }

    /// Returns (point, analytic outward normal).
    fn sample(&self, center: Vec3, rng: &mut Rng) -> Result<(Vec3, Vec3)> {
        let c = center;
        Ok(match self.kind {
            PrimitiveKind::Floor => {
                let e = self.extent_n(2)?;
                let u = rng.random_range(-0.5..0.5) * e[0];
                let v = rng.random_range(-0.5..0.5) * e[1];
                ([c[0] + u, c[1] + v, c[2]], [0.0, 0.0, 1.0])
            }
            PrimitiveKind::Wall => {
                let e = self.extent_n(2)?;
                let n = self.wall_normal()?;
                let t = [-n[1], n[0], 0.0];
                let u = rng.random_range(-0.5..0.5) * e[0];
                let v = rng.random_range(-0.5..0.5) * e[1];
                ([c[0] + u * t[0], c[1] + u * t[1], c[2] + v], n)
            }
            PrimitiveKind::Box => {
                let e = self.extent_n(3)?;
                let faces = box_faces(e);
                let total: f64 = faces.iter().map(|f| f.0).sum();
                let mut pick = rng.random_range(0.0..total);
                let mut face = faces[faces.len() - 1];
                for f in faces {
                    if pick < f.0 {
                        face = f;
                        break;
                    }
                    pick -= f.0;
                }
                let (_, n) = face;
                let h = [e[0] / 2.0, e[1] / 2.0, e[2] / 2.0];
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = if n[a] != 0.0 {
                        n[a] * h[a]
                    } else {
                        rng.random_range(-h[a]..h[a])
                    };
                }
                ([c[0] + p[0], c[1] + p[1], c[2] + p[2]], n)
            }
            PrimitiveKind::Sphere => {
                let r = self.extent_n(1)?[0];
                let z: f64 = rng.random_range(-1.0..1.0);
                let phi: f64 = rng.random_range(0.0..TAU);
                let s = (1.0 - z * z).sqrt();
                let n = [s * phi.cos(), s * phi.sin(), z];
                ([c[0] + r * n[0], c[1] + r * n[1], c[2] + r * n[2]], n)
            }
        })
    }
}

/// (area, outward normal) for the five sampled faces of a box.
fn box_faces(e: &[f64]) -> [(f64, Vec3); 5] {
    [
        (e[0] * e[1], [0.0, 0.0, 1.0]),
        (e[1] * e[2], [1.0, 0.0, 0.0]),
        (e[1] * e[2], [-1.0, 0.0, 0.0]),
        (e[0] * e[2], [0.0, 1.0, 0.0]),
        (e[0] * e[2], [0.0, -1.0, 0.0]),
    ]
}

impl SceneRecipe {
    /// Four-primitive room: floor, wall, box and sphere with classes 0..4.
    pub fn default_room() -> Self {
        SceneRecipe {
            jitter: default_jitter(),
            color_noise: default_color_noise(),
            random_colors: false,
            layout_jitter: 0.0,
            primitives: vec![
                Primitive {
                    kind: PrimitiveKind::Floor,
                    class: 0,
                    center: [0.0, 0.0, 0.0],
                    extent: vec![3.0, 3.0],
                    density: 50.0,
                    normal: None,
                    color: None,
                },
                Primitive {
                    kind: PrimitiveKind::Wall,
                    class: 1,
                    center: [-1.5, 0.0, 1.0],
                    extent: vec![3.0, 2.0],
                    density: 50.0,
                    normal: Some([1.0, 0.0, 0.0]),
                    color: None,
                },
                Primitive {
                    kind: PrimitiveKind::Box,
                    class: 2,
                    center: [0.5, 0.3, 0.3],
                    extent: vec![0.8, 0.6, 0.6],
                    density: 50.0,
                    normal: None,
                    color: None,
                },
                Primitive {
                    kind: PrimitiveKind::Sphere,
                    class: 3,
                    center: [-0.4, -0.7, 0.35],
                    extent: vec![0.35],
                    density: 50.0,
                    normal: None,
                    color: None,
                },
            ],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("scene recipe: {}", e)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("recipe serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::EmptyInput("scene recipe has no primitives".into()));
        }
        for p in &self.primitives {
            if p.class >= MAX_CLASSES {
                return Err(Error::Config(format!(
                    "class {} exceeds limit {}",
                    p.class, MAX_CLASSES
                )));
            }
            if !(p.density > 0.0) {
                return Err(Error::Config(format!("density must be positive, got {}", p.density)));
            }
            p.area()?;
            if p.kind == PrimitiveKind::Wall {
                p.wall_normal()?;
            }
        }
        if self.jitter < 0.0 || self.color_noise < 0.0 || self.layout_jitter < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn generate_synthetic_scene(seed: u64, recipe: &SceneRecipe) -> Result<PointCloud> {
    recipe.validate()?;
    let mut rng = seeded(seed);
    let coord_noise = Normal::new(0.0, recipe.jitter.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let color_noise = Normal::new(0.0, recipe.color_noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut coords = Vec::new();
    let mut colors = Vec::new();
    let mut normals = Vec::new();
    let mut labels = Vec::new();
    for p in &recipe.primitives {
        let mut center = p.center;
        if recipe.layout_jitter > 0.0 && matches!(p.kind, PrimitiveKind::Box | PrimitiveKind::Sphere) {
            center[0] += rng.random_range(-recipe.layout_jitter..recipe.layout_jitter);
            center[1] += rng.random_range(-recipe.layout_jitter..recipe.layout_jitter);
        }
        let base = if recipe.random_colors {
            [0; 3].map(|_| rng.random_range(0.1..0.9))
        } else {
            p.color.unwrap_or(PALETTE[p.class as usize])
        };
        for _ in 0..p.point_count()? {
            let (mut x, n) = p.sample(center, &mut rng)?;
            if recipe.jitter > 0.0 {
                x.iter_mut().for_each(|v| *v += coord_noise.sample(&mut rng));
            }
            let mut c = base;
            if recipe.color_noise > 0.0 {
                c.iter_mut()
                    .for_each(|v| *v = (*v + color_noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
            coords.push(x);
            colors.push(c);
            normals.push(n);
            labels.push(p.class);
        }
    }
    if coords.is_empty() {
        return Err(Error::EmptyInput("scene recipe produced zero points".into()));
    }
    let m = coords.len();
    Ok(PointCloud {
        coords,
        colors,
        normals: Some(normals),
        ids: (0..m as u64).collect(),
        labels: Some(labels),
    })
}

/// `count` scenes, scene `i` generated from a sub-seed of (`seed`, `i`).
pub fn generate_dataset(recipe: &SceneRecipe, count: usize, seed: u64) -> Result<Vec<PointCloud>> {
    (0..count)
        .map(|i| generate_synthetic_scene(derive_seed(seed, &[i as u64]), recipe))
        .collect()
}
