//! Independent reference implementations used as test oracles. They share no
//! code with the library beyond plain data types.

#![allow(dead_code)]

pub mod grad;

use std::collections::BTreeMap;

use protogroup::networks::{EncoderConfig, NetworkConfig, ParamSet};
use protogroup::pointcloud::synthetic::{generate_synthetic_scene, SceneRecipe};
use protogroup::PointCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type V3 = [f64; 3];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..rows)
        .map(|_| (0..cols).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn unit_rows(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|row| {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                vec![0.0; row.len()]
            } else {
                row.iter().map(|v| v / n).collect()
            }
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Small labeled room with normals.
pub fn small_room(seed: u64, density: f64) -> PointCloud {
    let mut recipe = SceneRecipe::default_room();
    recipe.primitives.iter_mut().for_each(|p| p.density = density);
    generate_synthetic_scene(seed, &recipe).unwrap()
}

pub fn tiny_network(d: usize, n: usize) -> NetworkConfig {
    NetworkConfig {
        encoder: EncoderConfig {
            widths: vec![5, 4],
            feature_dim: d,
            k: 3,
            ..EncoderConfig::default()
        },
        num_prototypes: n,
        head_hidden: Some(4),
        ..NetworkConfig::default()
    }
}

// ---------------------------------------------------------------- softmax

pub fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let e: Vec<f64> = logits.iter().map(|l| (l / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

// ---------------------------------------------------------------- losses

/// `-(1/P) Σ K log Q`, or the entropy-weighted variant.
pub fn grouping_loss(q: &[Vec<f64>], k: &[Vec<f64>], informative: bool) -> f64 {
    let p = q.len();
    let mut h = vec![0.0; p];
    for i in 0..p {
        for &v in &k[i] {
            if v > 0.0 {
                h[i] -= v * v.ln();
            }
        }
    }
    let hsum: f64 = h.iter().sum();
    let mut total = 0.0;
    for i in 0..p {
        let mut ce = 0.0;
        for j in 0..q[i].len() {
            ce -= k[i][j] * q[i][j].max(1e-12).ln();
        }
        let w = if informative && hsum > 0.0 {
            h[i] / hsum
        } else {
            1.0 / p as f64
        };
        total += w * ce;
    }
    total
}

/// Confidence-weighted InfoNCE written straight from its definition.
pub fn info_nce(vq: &[Vec<f64>], vk: &[Vec<f64>], positives: &[(usize, usize)], conf: &[f64], tau: f64) -> f64 {
    let mut total = 0.0;
    for (idx, &(i, j)) in positives.iter().enumerate() {
        let pos = (dot(&vq[i], &vk[j]) / tau).exp();
        let mut neg = 0.0;
        for k in 0..vk.len() {
            if !positives.contains(&(i, k)) {
                neg += (dot(&vq[i], &vk[k]) / tau).exp();
            }
        }
        total += -conf[idx] * (pos / (pos + neg)).ln();
    }
    total / positives.len() as f64
}

// ---------------------------------------------------------------- metrics

/// Purity and arithmetic-mean NMI from an explicit contingency table.
pub fn purity_nmi(pred: &[usize], truth: &[u32]) -> (f64, f64) {
    let n = pred.len() as f64;
    let gs: Vec<usize> = {
        let mut v = pred.to_vec();
        v.sort();
        v.dedup();
        v
    };
    let cs: Vec<u32> = {
        let mut v = truth.to_vec();
        v.sort();
        v.dedup();
        v
    };
    let mut table = vec![vec![0.0f64; cs.len()]; gs.len()];
    for (p, t) in pred.iter().zip(truth) {
        let a = gs.iter().position(|g| g == p).unwrap();
        let b = cs.iter().position(|c| c == t).unwrap();
        table[a][b] += 1.0;
    }
    let purity = table
        .iter()
        .map(|row| row.iter().cloned().fold(0.0, f64::max))
        .sum::<f64>()
        / n;
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..cs.len()).map(|b| table.iter().map(|r| r[b]).sum()).collect();
    let ent = |v: &[f64]| -> f64 { v.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum() };
    let mut mi = 0.0;
    for a in 0..gs.len() {
        for b in 0..cs.len() {
            let nij = table[a][b];
            if nij > 0.0 {
                mi += nij / n * ((nij / n) / ((rows[a] / n) * (cols[b] / n))).ln();
            }
        }
    }
    let (hg, hc) = (ent(&rows), ent(&cols));
    let nmi = if hg + hc == 0.0 { 1.0 } else { 2.0 * mi / (hg + hc) };
    (purity, nmi)
}

// ---------------------------------------------------------------- FH reference

fn d2(a: &V3, b: &V3) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Brute-force kNN: per source, the `k` nearest others by (distance, index).
pub fn brute_knn(coords: &[V3], k: usize) -> Vec<Vec<usize>> {
    (0..coords.len())
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..coords.len())
                .filter(|&j| j != i)
                .map(|j| (d2(&coords[i], &coords[j]), j))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            all.into_iter().take(k).map(|e| e.1).collect()
        })
        .collect()
}

/// Felzenszwalb–Huttenlocher over `1 - |n_i·n_j|` kNN edges with a flat
/// component-label array (relabel on merge), followed by the minimum-size
/// pass and nearest-point absorption of edge-less small components.
/// Returns the partition as sorted id lists, sorted.
pub fn reference_fh(
    coords: &[V3],
    normals: &[V3],
    ids: &[u64],
    k: usize,
    threshold: f64,
    min_size: usize,
) -> Vec<Vec<u64>> {
    let n = coords.len();
    let knn = brute_knn(coords, k);
    let mut edges: Vec<(f64, u64, u64, usize, usize)> = Vec::new();
    for i in 0..n {
        for &j in &knn[i] {
            let w = (1.0 - dot(&normals[i], &normals[j]).abs()).max(0.0);
            edges.push((w, ids[i], ids[j], i, j));
        }
    }
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut label: Vec<usize> = (0..n).collect();
    let mut internal: Vec<f64> = vec![0.0; n];
    let size_of = |label: &[usize], c: usize| label.iter().filter(|&&l| l == c).count();
    let merge = |label: &mut Vec<usize>, internal: &mut Vec<f64>, a: usize, b: usize, w: f64| {
        let m = internal[a].max(internal[b]).max(w);
        for l in label.iter_mut() {
            if *l == b {
                *l = a;
            }
        }
        internal[a] = m;
    };
    for &(w, _, _, i, j) in &edges {
        let (a, b) = (label[i], label[j]);
        if a == b {
            continue;
        }
        let ta = internal[a] + threshold / size_of(&label, a) as f64;
        let tb = internal[b] + threshold / size_of(&label, b) as f64;
        if w <= ta.min(tb) {
            merge(&mut label, &mut internal, a, b, w);
        }
    }
    for &(w, _, _, i, j) in &edges {
        let (a, b) = (label[i], label[j]);
        if a != b && (size_of(&label, a) < min_size || size_of(&label, b) < min_size) {
            merge(&mut label, &mut internal, a, b, w);
        }
    }
    if n >= min_size {
        loop {
            let small = (0..n)
                .filter(|&i| size_of(&label, label[i]) < min_size)
                .min_by_key(|&i| ids[i]);
            let Some(seed) = small else { break };
            let c = label[seed];
            let mut best: Option<(f64, u64, usize)> = None;
            for i in (0..n).filter(|&i| label[i] == c) {
                for j in (0..n).filter(|&j| label[j] != c) {
                    let cand = (d2(&coords[i], &coords[j]), ids[j], j);
                    if best.is_none_or(|b| (cand.0, cand.1) < (b.0, b.1)) {
                        best = Some(cand);
                    }
                }
            }
            let Some((_, _, j)) = best else { break };
            let other = label[j];
            merge(&mut label, &mut internal, c, other, 0.0);
        }
    }
    let mut groups: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for i in 0..n {
        groups.entry(label[i]).or_default().push(ids[i]);
    }
    let mut out: Vec<Vec<u64>> = groups
        .into_values()
        .map(|mut g| {
            g.sort();
            g
        })
        .collect();
    out.sort();
    out
}

// ---------------------------------------------------------------- encoder

fn mat(params: &ParamSet, name: &str) -> (usize, usize, Vec<f64>) {
    let t = params.get(name).unwrap();
    (t.rows(), t.cols(), t.data().to_vec())
}

fn affine(x: &[Vec<f64>], params: &ParamSet, w: &str, b: Option<&str>) -> Vec<Vec<f64>> {
    let (r, c, wd) = mat(params, w);
    let bias = b.map(|b| mat(params, b).2).unwrap_or_else(|| vec![0.0; c]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), r);
            (0..c)
                .map(|j| bias[j] + (0..r).map(|i| row[i] * wd[i * c + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn relu(x: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    x.into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect()
}

fn add(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| x.into_iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

/// Straight-line evaluation of the point encoder and heads:
/// returns (trunk, g, h, predictor-or-h).
pub fn encoder_oracle(params: &ParamSet, cloud: &PointCloud, cfg: &NetworkConfig) -> [Vec<Vec<f64>>; 4] {
    let m = cloud.len();
    let mut c = [0.0; 3];
    for p in &cloud.coords {
        (0..3).for_each(|k| c[k] += p[k] / m as f64);
    }
    let shift = match cfg.encoder.color_mode {
        protogroup::networks::ColorMode::Unit => 0.0,
        protogroup::networks::ColorMode::Centered => 0.5,
    };
    let x: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let p = cloud.coords[i];
            let n = cloud.normals.as_ref().map(|n| n[i]).unwrap_or([0.0; 3]);
            let col = cloud.colors[i];
            vec![
                p[0] - c[0],
                p[1] - c[1],
                p[2] - c[2],
                col[0] - shift,
                col[1] - shift,
                col[2] - shift,
                n[0],
                n[1],
                n[2],
            ]
        })
        .collect();
    let knn = brute_knn(&cloud.coords, cfg.encoder.k.min(m - 1));
    let nbr_mean = |h: &[Vec<f64>]| -> Vec<Vec<f64>> {
        knn.iter()
            .map(|ns| {
                let mut acc = vec![0.0; h[0].len()];
                for &j in ns {
                    acc.iter_mut().zip(&h[j]).for_each(|(a, v)| *a += v);
                }
                acc.iter().map(|a| a / ns.len() as f64).collect()
            })
            .collect()
    };
    let mut h = relu(affine(&x, params, "enc.0.w_self", Some("enc.0.b")));
    for i in 1..cfg.encoder.widths.len() {
        let a = nbr_mean(&h);
        let s = affine(&h, params, &format!("enc.{}.w_self", i), Some(&format!("enc.{}.b", i)));
        let nn = affine(&a, params, &format!("enc.{}.w_nbr", i), None);
        h = relu(add(s, nn));
    }
    let a = nbr_mean(&h);
    let trunk = add(
        affine(&h, params, "enc.out.w_self", Some("enc.out.b")),
        affine(&a, params, "enc.out.w_nbr", None),
    );
    let head = |x: &[Vec<f64>], p: &str| {
        let hid = relu(affine(x, params, &format!("{}w1", p), Some(&format!("{}b1", p))));
        affine(&hid, params, &format!("{}w2", p), Some(&format!("{}b2", p)))
    };
    let g = head(&trunk, "proj_g.");
    let hh = head(&trunk, "proj_h.");
    let pred = if params.contains("pred.w1") {
        head(&hh, "pred.")
    } else {
        hh.clone()
    };
    [trunk, g, hh, pred]
}

/// Segment pooling: per-point unit vectors, group-by mean, unit again.
pub fn pool_oracle(feats: &[Vec<f64>], segs: &[usize], p: usize) -> Vec<Vec<f64>> {
    let unit = unit_rows(feats);
    let d = feats[0].len();
    let mut sums = vec![vec![0.0; d]; p];
    let mut counts = vec![0.0; p];
    for (row, &s) in unit.iter().zip(segs) {
        sums[s].iter_mut().zip(row).for_each(|(a, v)| *a += v);
        counts[s] += 1.0;
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| s.iter().map(|v| v / c).collect())
        .collect();
    unit_rows(&means)
}

// ---------------------------------------------------------------- finite differences

/// Worst elementwise relative error between analytic and central-difference
/// gradients over every entry of every named parameter. Entries where both
/// magnitudes are below `floor` are compared absolutely against `floor`.
pub fn worst_relative_error(
    params: &ParamSet,
    analytic: &BTreeMap<String, Vec<f64>>,
    f: &dyn Fn(&ParamSet) -> f64,
    h: f64,
    floor: f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for name in params.names().cloned().collect::<Vec<_>>() {
        let a = &analytic[&name];
        for e in 0..a.len() {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[e] += h;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[e] -= h;
            let num = (f(&plus) - f(&minus)) / (2.0 * h);
            let err = (a[e] - num).abs() / a[e].abs().max(num.abs()).max(floor);
            if err > worst.0 {
                worst = (err, format!("{}[{}]: analytic {:e} numeric {:e}", name, e, a[e], num));
            }
        }
    }
    worst
}

// ---------------------------------------------------------------- FH instances

pub struct FhInstance {
    pub cloud: PointCloud,
    pub overlap: Vec<u64>,
    pub k: usize,
    pub threshold: f64,
    pub min_size: usize,
}

/// Twenty seeded segmentation problems: the first is a 300-point synthetic
/// room at threshold 0.1 / min size 20, the rest are noisy planar patches with
/// shuffled ids, random parameters and (for odd seeds) a partial overlap.
pub fn fh_instances() -> Vec<FhInstance> {
    let mut out = Vec::new();
    let mut recipe = SceneRecipe::default_room();
    let total_area: f64 = recipe.primitives.iter().map(|p| p.area().unwrap()).sum();
    recipe
        .primitives
        .iter_mut()
        .for_each(|p| p.density = 300.0 / total_area);
    let room = generate_synthetic_scene(11, &recipe).unwrap();
    out.push(FhInstance {
        overlap: room.ids.clone(),
        cloud: room,
        k: 16,
        threshold: 0.1,
        min_size: 20,
    });
    for seed in 1..20u64 {
        let mut r = rng(1000 + seed);
        let patches = r.random_range(2..5);
        let mut coords = Vec::new();
        let mut normals = Vec::new();
        for p in 0..patches {
            let nrm = {
                let v: V3 = [
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                ];
                let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                v.map(|x| x / l)
            };
            let offset = [p as f64 * 0.8, r.random_range(0.0..0.5), 0.0];
            for _ in 0..r.random_range(15..60) {
                coords.push([
                    offset[0] + r.random_range(0.0..1.0),
                    offset[1] + r.random_range(0.0..1.0),
                    offset[2] + r.random_range(-0.05..0.05),
                ]);
                let noisy: V3 = [0, 1, 2].map(|a| nrm[a] + r.random_range(-0.15..0.15));
                let l = (noisy[0] * noisy[0] + noisy[1] * noisy[1] + noisy[2] * noisy[2]).sqrt();
                normals.push(noisy.map(|x| x / l));
            }
        }
        let m = coords.len();
        let mut ids: Vec<u64> = Vec::new();
        while ids.len() < m {
            let id = r.random_range(0..100_000u64);
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        let mut cloud = PointCloud::from_coords(coords);
        cloud.normals = Some(normals);
        cloud.ids = ids;
        let overlap: Vec<u64> = if seed % 2 == 1 {
            cloud.ids.iter().copied().filter(|_| r.random::<f64>() < 0.8).collect()
        } else {
            cloud.ids.clone()
        };
        out.push(FhInstance {
            cloud,
            overlap,
            k: r.random_range(3..11),
            threshold: r.random_range(0.02..0.6),
            min_size: r.random_range(1..16),
        });
    }
    out
}

/// Runs the library and the reference on one instance; returns both partitions.
pub fn fh_compare(inst: &FhInstance) -> (Vec<Vec<u64>>, Vec<Vec<u64>>) {
    use protogroup::pointcloud::knn_graph;
    use protogroup::segment::{graph_cut_segments, restrict_to_ids};
    let region = restrict_to_ids(&inst.cloud, &inst.overlap).unwrap();
    let graph = knn_graph(&region, inst.k).unwrap();
    let map = graph_cut_segments(&inst.cloud, &inst.overlap, &graph, inst.threshold, inst.min_size).unwrap();
    let mut got = map.partition();
    got.sort();
    let expected = reference_fh(
        &region.coords,
        region.normals.as_ref().unwrap(),
        &region.ids,
        inst.k.min(region.len() - 1),
        inst.threshold,
        inst.min_size,
    );
    (got, expected)
}

// ---------------------------------------------------------------- small clouds

/// `m` random points in the unit cube with random colors, unit normals and
/// sparse ids.
pub fn random_cloud(m: usize, seed: u64) -> PointCloud {
    let mut r = rng(seed);
    let coords: Vec<V3> = (0..m).map(|_| [r.random(), r.random(), r.random()]).collect();
    let mut cloud = PointCloud::from_coords(coords);
    cloud.colors = (0..m).map(|_| [r.random(), r.random(), r.random()]).collect();
    cloud.normals = Some(
        (0..m)
            .map(|_| {
                let v: V3 = [
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                v.map(|x| x / n)
            })
            .collect(),
    );
    cloud.ids = (0..m as u64).map(|i| 3 * i + 7).collect();
    cloud
}

// ---------------------------------------------------------------- tiny training runs

/// A few sparse rooms and a config small enough for sub-second steps.
pub fn tiny_training() -> (Vec<protogroup::trainer::Scene>, protogroup::trainer::TrainConfig) {
    use protogroup::trainer::{Scene, TrainConfig};
    let scenes = (0..4)
        .map(|i| {
            let cloud = protogroup::trainer::ensure_normals(small_room(20 + i, 12.0), 16).unwrap();
            Scene {
                name: format!("room{}", i),
                cloud,
            }
        })
        .collect();
    let mut cfg = TrainConfig {
        batch_size: 2,
        epochs: 2,
        network: tiny_network(8, 5),
        ..TrainConfig::default()
    };
    cfg.augment.min_overlap = 32;
    cfg.contrastive.num_samples = 48;
    cfg.segment.min_segment_size = 8;
    (scenes, cfg)
}
