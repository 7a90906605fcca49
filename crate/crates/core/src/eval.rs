//! Evaluation: grouping metrics against ground-truth labels, held-out scene
//! grouping, activation maps and a linear probe on frozen features.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grouping::{extract_groups, teacher_assignments, teacher_logits, GroupingResult};
use crate::networks::{evaluate, ModelState, NetworkConfig, ParamSet, PROTOTYPES};
use crate::pointcloud::ply::{write_ply, Format};
use crate::pointcloud::PointCloud;
use crate::segment::{segment_overlap, SegmentConfig, SegmentMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupingMetrics {
    pub purity: f64,
    pub nmi: f64,
    /// Entropy (nats) of the per-point prototype usage histogram.
    pub usage_entropy: f64,
    pub cluster_count: usize,
}

fn entropy_of_counts<'a>(counts: impl IntoIterator<Item = &'a usize>, total: usize) -> f64 {
    let n = total as f64;
    counts
        .into_iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Shannon entropy (nats) of a usage histogram; empty bins are skipped.
pub fn usage_entropy(usage: &[usize]) -> f64 {
    let total: usize = usage.iter().sum();
    if total == 0 {
        return 0.0;
    }
    entropy_of_counts(usage, total)
}

/// Ground-truth labels of a labeled cloud keyed by original id.
pub fn truth_labels(cloud: &PointCloud) -> Result<BTreeMap<u64, u32>> {
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::Precondition("cloud has no ground-truth labels".into()))?;
    Ok(cloud.ids.iter().copied().zip(labels.iter().copied()).collect())
}

/// Purity, NMI (arithmetic-mean normalization) and usage statistics.
///
/// NMI is 1 when both labelings are constant.
pub fn grouping_metrics(pred: &BTreeMap<u64, usize>, truth: &BTreeMap<u64, u32>) -> Result<GroupingMetrics> {
    let mut missing: Vec<u64> = pred.keys().filter(|id| !truth.contains_key(id)).copied().collect();
    missing.extend(truth.keys().filter(|id| !pred.contains_key(id)));
    if !missing.is_empty() {
        missing.sort_unstable();
        return Err(Error::missing_ids(missing));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("no labeled points".into()));
    }
    let total = pred.len();
    let mut table: BTreeMap<(usize, u32), usize> = BTreeMap::new();
    let mut groups: BTreeMap<usize, usize> = BTreeMap::new();
    let mut classes: BTreeMap<u32, usize> = BTreeMap::new();
    for (id, &g) in pred {
        let c = truth[id];
        *table.entry((g, c)).or_default() += 1;
        *groups.entry(g).or_default() += 1;
        *classes.entry(c).or_default() += 1;
    }
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(g, _), &n) in &table {
        let b = best.entry(g).or_default();
        *b = (*b).max(n);
    }
    let purity = best.values().sum::<usize>() as f64 / total as f64;

    let n = total as f64;
    let mut mi = 0.0;
    for (&(g, c), &nij) in &table {
        let pij = nij as f64 / n;
        mi += pij * (nij as f64 * n / (groups[&g] as f64 * classes[&c] as f64)).ln();
    }
    let hg = entropy_of_counts(groups.values(), total);
    let hc = entropy_of_counts(classes.values(), total);
    let nmi = if hg + hc <= 0.0 {
        1.0
    } else {
        (2.0 * mi / (hg + hc)).clamp(0.0, 1.0)
    };
    Ok(GroupingMetrics {
        purity,
        nmi,
        usage_entropy: hg,
        cluster_count: groups.len(),
    })
}

/// Teacher assignments of every segment of a whole scene.
#[derive(Debug, Clone)]
pub struct SceneGrouping {
    pub segments: SegmentMap,
    /// P×n teacher assignment scores.
    pub scores: Tensor,
    pub groups: GroupingResult,
}

/// Segments the full cloud and assigns each segment with the teacher
/// (stored center, temperature `tau_t`).
pub fn group_scene(state: &ModelState, cloud: &PointCloud, seg: &SegmentConfig, tau_t: f64) -> Result<SceneGrouping> {
    let segments = segment_overlap(cloud, &cloud.ids, seg)?;
    let feats = evaluate(&state.teacher, cloud, &state.config)?;
    let z = pool_raw(&feats.group, &cloud.ids, &segments)?;
    let logits = teacher_logits(&z, state.teacher.get(PROTOTYPES)?)?;
    let scores = teacher_assignments(&logits, &state.center, tau_t)?;
    let groups = extract_groups(&scores, &segments)?;
    Ok(SceneGrouping {
        segments,
        scores,
        groups,
    })
}

fn unit(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 1e-12 {
        vec![0.0; row.len()]
    } else {
        row.iter().map(|v| v / n).collect()
    }
}

/// Same pooling as training, on plain tensors.
fn pool_raw(feats: &Tensor, ids: &[u64], map: &SegmentMap) -> Result<Tensor> {
    let d = feats.cols();
    let mut sums = vec![0.0; map.num_segments * d];
    let mut counts = vec![0usize; map.num_segments];
    for (r, s) in map.segments_for(ids)?.into_iter().enumerate() {
        counts[s] += 1;
        for (acc, v) in sums[s * d..(s + 1) * d].iter_mut().zip(unit(feats.row(r))) {
            *acc += v;
        }
    }
    let mut out = Vec::with_capacity(sums.len());
    for (s, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::Precondition(format!("segment {} has no points", s)));
        }
        let mean: Vec<f64> = sums[s * d..(s + 1) * d].iter().map(|v| v / c as f64).collect();
        out.extend(unit(&mean));
    }
    Tensor::matrix(map.num_segments, d, out)
}

/// Writes the cloud with per-point `prototype` and `confidence` properties.
pub fn export_groups_ply(
    cloud: &PointCloud,
    grouping: &SceneGrouping,
    path: impl AsRef<Path>,
    format: Format,
) -> Result<()> {
    let mut labels = Vec::with_capacity(cloud.len());
    let mut conf = Vec::with_capacity(cloud.len());
    for s in grouping.segments.segments_for(&cloud.ids)? {
        labels.push(grouping.groups.segment_labels[s] as f64);
        conf.push(grouping.groups.segment_confidence[s]);
    }
    write_ply(path, cloud, &[("prototype", &labels), ("confidence", &conf)], format)
}

/// Which teacher projector feeds an activation map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    G,
    H,
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g" => Ok(Branch::G),
            "h" => Ok(Branch::H),
            other => Err(Error::Config(format!("unknown branch '{}', expected g or h", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub query: u64,
    /// Cosine similarity of each point (cloud order) to the query.
    pub similarities: Vec<f64>,
    /// Set when the query feature is zero, so every similarity is zero.
    pub degenerate: bool,
    pub zero_rows: usize,
}

pub fn activation_map(
    params: &ParamSet,
    cfg: &NetworkConfig,
    cloud: &PointCloud,
    query: u64,
    branch: Branch,
) -> Result<ActivationMap> {
    let q = cloud
        .ids
        .iter()
        .position(|&id| id == query)
        .ok_or_else(|| Error::missing_ids(vec![query]))?;
    let feats = evaluate(params, cloud, cfg)?;
    let f = match branch {
        Branch::G => feats.group,
        Branch::H => feats.contrast,
    };
    let rows: Vec<Vec<f64>> = (0..f.rows()).map(|r| unit(f.row(r))).collect();
    let zero_rows = rows.iter().filter(|r| r.iter().all(|&v| v == 0.0)).count();
    let qv = &rows[q];
    let similarities = rows
        .iter()
        .map(|r| r.iter().zip(qv).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0))
        .collect();
    Ok(ActivationMap {
        query,
        similarities,
        degenerate: qv.iter().all(|&v| v == 0.0),
        zero_rows,
    })
}

impl ActivationMap {
    /// Mean similarity to points sharing / not sharing the query's label.
    pub fn label_contrast(&self, cloud: &PointCloud) -> Result<(f64, f64)> {
        let labels = cloud
            .labels
            .as_ref()
            .ok_or_else(|| Error::Precondition("cloud has no ground-truth labels".into()))?;
        let q = cloud
            .ids
            .iter()
            .position(|&id| id == self.query)
            .ok_or_else(|| Error::missing_ids(vec![self.query]))?;
        let (mut same, mut ns, mut diff, mut nd) = (0.0, 0usize, 0.0, 0usize);
        for (i, (&s, &l)) in self.similarities.iter().zip(labels).enumerate() {
            if i == q {
                continue;
            }
            if l == labels[q] {
                same += s;
                ns += 1;
            } else {
                diff += s;
                nd += 1;
            }
        }
        Ok((same / ns.max(1) as f64, diff / nd.max(1) as f64))
    }

    pub fn save_ply(&self, cloud: &PointCloud, path: impl AsRef<Path>, format: Format) -> Result<()> {
        if cloud.len() != self.similarities.len() {
            return Err(Error::Dimension {
                op: "activation_map",
                message: format!("{} similarities for {} points", self.similarities.len(), cloud.len()),
            });
        }
        write_ply(path, cloud, &[("similarity", &self.similarities)], format)
    }
}

/// Per-point features with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
}

impl ProbeData {
    pub fn new() -> Self {
        ProbeData {
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Appends the frozen trunk features of a labeled cloud.
    pub fn extend_from_cloud(&mut self, params: &ParamSet, cfg: &NetworkConfig, cloud: &PointCloud) -> Result<()> {
        let labels = cloud
            .labels
            .as_ref()
            .ok_or_else(|| Error::Precondition("probe needs labeled scenes".into()))?;
        let trunk = evaluate(params, cloud, cfg)?.trunk;
        self.features.extend((0..trunk.rows()).map(|r| trunk.row(r).to_vec()));
        self.labels.extend_from_slice(labels);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Default for ProbeData {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 300,
            lr: 0.5,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccuracy {
    pub class: u32,
    pub test_points: usize,
    pub accuracy: f64,
    pub in_training: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    /// Classes present in the test set, ascending.
    pub per_class: Vec<ClassAccuracy>,
    /// Mean over test classes that also occur in training.
    pub mean_accuracy: f64,
    pub overall_accuracy: f64,
    /// Test classes never seen in training, excluded from the mean.
    pub absent_from_training: Vec<u32>,
}

impl ProbeResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,test_points,accuracy,in_training\n");
        for c in &self.per_class {
            out.push_str(&format!(
                "{},{},{:.6},{}\n",
                c.class, c.test_points, c.accuracy, c.in_training
            ));
        }
        out.push_str(&format!("mean,,{:.6},\n", self.mean_accuracy));
        out.push_str(&format!("overall,,{:.6},\n", self.overall_accuracy));
        out
    }
}

/// Multinomial logistic regression on standardized features, full-batch
/// gradient descent from zero weights.
pub fn linear_probe(train: &ProbeData, test: &ProbeData, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyInput("probe needs training and test points".into()));
    }
    let d = train.features[0].len();
    if train.features.iter().chain(&test.features).any(|f| f.len() != d) {
        return Err(Error::Dimension {
            op: "linear_probe",
            message: "feature rows differ in length".into(),
        });
    }
    if cfg.lr <= 0.0 || cfg.weight_decay < 0.0 {
        return Err(Error::Config(
            "probe lr must be positive and weight decay non-negative".into(),
        ));
    }
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for f in &train.features {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
    }
    let mut std = vec![0.0; d];
    for f in &train.features {
        std.iter_mut()
            .zip(f)
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    let std: Vec<f64> = std
        .iter()
        .map(|s| if s.sqrt() > 1e-12 { s.sqrt() } else { 1.0 })
        .collect();
    let standardize =
        |f: &[f64]| -> Vec<f64> { f.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect() };
    let xs: Vec<Vec<f64>> = train.features.iter().map(|f| standardize(f)).collect();

    let c = 1 + train.labels.iter().chain(&test.labels).copied().max().unwrap_or(0) as usize;
    // weights (d+1)×c, last row is the bias
    let mut w = vec![0.0; (d + 1) * c];
    let mut grad = vec![0.0; (d + 1) * c];
    let mut p = vec![0.0; c];
    for _ in 0..cfg.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, &y) in xs.iter().zip(&train.labels) {
            scores(&w, x, c, &mut p);
            softmax_in_place(&mut p);
            p[y as usize] -= 1.0;
            for (j, xv) in x.iter().chain(std::iter::once(&1.0)).enumerate() {
                for k in 0..c {
                    grad[j * c + k] += xv * p[k];
                }
            }
        }
        for (i, (wv, gv)) in w.iter_mut().zip(&grad).enumerate() {
            let decay = if i < d * c { cfg.weight_decay * *wv } else { 0.0 };
            *wv -= cfg.lr * (gv / n + decay);
        }
    }

    let mut seen = vec![false; c];
    train.labels.iter().for_each(|&y| seen[y as usize] = true);
    let mut hits: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (f, &y) in test.features.iter().zip(&test.labels) {
        scores(&w, &standardize(f), c, &mut p);
        let pred = crate::grouping::argmax_row(&p);
        let e = hits.entry(y).or_default();
        e.0 += (pred == y as usize) as usize;
        e.1 += 1;
    }
    let per_class: Vec<ClassAccuracy> = hits
        .iter()
        .map(|(&class, &(h, t))| ClassAccuracy {
            class,
            test_points: t,
            accuracy: h as f64 / t as f64,
            in_training: seen[class as usize],
        })
        .collect();
    let counted: Vec<f64> = per_class.iter().filter(|a| a.in_training).map(|a| a.accuracy).collect();
    let mean_accuracy = if counted.is_empty() {
        0.0
    } else {
        counted.iter().sum::<f64>() / counted.len() as f64
    };
    let correct: usize = hits.values().map(|h| h.0).sum();
    Ok(ProbeResult {
        absent_from_training: per_class.iter().filter(|a| !a.in_training).map(|a| a.class).collect(),
        per_class,
        mean_accuracy,
        overall_accuracy: correct as f64 / test.len() as f64,
    })
}

fn scores(w: &[f64], x: &[f64], c: usize, out: &mut [f64]) {
    let d = x.len();
    out.copy_from_slice(&w[d * c..]);
    for (j, xv) in x.iter().enumerate() {
        for k in 0..c {
            out[k] += xv * w[j * c + k];
        }
    }
}

fn softmax_in_place(p: &mut [f64]) {
    let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in p.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    p.iter_mut().for_each(|v| *v /= z);
}
