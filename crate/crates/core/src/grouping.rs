//! Segment pooling, prototype assignments, the distillation loss and group labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{matmul_raw, softmax_raw, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::segment::SegmentMap;

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Rows of view points that belong to a segment, paired with their segment index.
pub fn pooled_rows(view_ids: &[u64], map: &SegmentMap) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut segs = Vec::new();
    for (r, id) in view_ids.iter().enumerate() {
        if let Some(s) = map.segment(*id) {
            rows.push(r);
            segs.push(s);
        }
    }
    let mut seen = vec![false; map.num_segments];
    segs.iter().for_each(|&s| seen[s] = true);
    if let Some(s) = seen.iter().position(|&v| !v) {
        return Err(Error::Precondition(format!("segment {} has no points in this view", s)));
    }
    Ok((rows, segs))
}

/// Per-point l2-normalize, average per segment, l2-normalize the averages.
///
/// Segments whose mean vanishes stay at zero and are counted by the graph's
/// degenerate-row counter.
pub fn pool_segments(g: &mut Graph, feats: Var, view_ids: &[u64], map: &SegmentMap) -> Result<Var> {
    if view_ids.len() != g.value(feats).rows() {
        return Err(Error::Dimension {
            op: "pool_segments",
            message: format!("{} ids for {} feature rows", view_ids.len(), g.value(feats).rows()),
        });
    }
    let (rows, segs) = pooled_rows(view_ids, map)?;
    let picked = g.gather_rows(feats, &rows)?;
    let unit = g.l2_normalize_rows(picked)?;
    let mean = g.segment_mean(unit, &segs, map.num_segments)?;
    g.l2_normalize_rows(mean)
}

fn check_temperatures(tau_s: f64, tau_t: f64, sharpening: bool) -> Result<()> {
    if tau_s <= 0.0 || tau_t <= 0.0 || !tau_s.is_finite() || !tau_t.is_finite() {
        return Err(Error::Config(format!(
            "temperatures must be positive, got {} and {}",
            tau_s, tau_t
        )));
    }
    if sharpening && tau_t >= tau_s {
        return Err(Error::Config(format!(
            "teacher temperature {} must be below student temperature {}",
            tau_t, tau_s
        )));
    }
    Ok(())
}

fn normalize_rows_raw(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let c = t.cols();
    for row in out.data_mut().chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n >= 1e-12 {
            row.iter_mut().for_each(|v| *v /= n);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

/// Teacher logits `z_k S_Θᵀ` with prototype rows re-normalized.
pub fn teacher_logits(z_k: &Tensor, prototypes: &Tensor) -> Result<Tensor> {
    if z_k.cols() != prototypes.cols() {
        return Err(Error::Dimension {
            op: "teacher_logits",
            message: format!("features have {} columns, prototypes {}", z_k.cols(), prototypes.cols()),
        });
    }
    let s = normalize_rows_raw(prototypes);
    let (p, d, n) = (z_k.rows(), z_k.cols(), s.rows());
    let mut st = vec![0.0; d * n];
    for i in 0..n {
        for j in 0..d {
            st[j * n + i] = s.get(i, j);
        }
    }
    Tensor::matrix(p, n, matmul_raw(z_k.data(), &st, p, d, n))
}

/// `softmax((logits - c) / tau_t)` row-wise.
pub fn teacher_assignments(logits: &Tensor, center: &[f64], tau_t: f64) -> Result<Tensor> {
    let n = logits.cols();
    if center.len() != n {
        return Err(Error::Dimension {
            op: "teacher_assignments",
            message: format!("center has {} entries for {} prototypes", center.len(), n),
        });
    }
    if tau_t <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {}", tau_t)));
    }
    let mut data = Vec::with_capacity(logits.numel());
    for r in 0..logits.rows() {
        let shifted: Vec<f64> = logits.row(r).iter().zip(center).map(|(l, c)| l - c).collect();
        data.extend(softmax_raw(&shifted, tau_t));
    }
    Tensor::matrix(logits.rows(), n, data)
}

/// Student scores (a graph node) and detached teacher scores.
#[derive(Debug, Clone)]
pub struct AssignmentScores {
    pub q: Var,
    pub k: Tensor,
    /// Teacher logits before centering, kept for the center update.
    pub teacher_logits: Tensor,
    pub tau_s: f64,
    pub tau_t: f64,
}

/// Builds Q in the graph and K outside it.
///
/// With `sharpening` off the caller may pass `tau_t == tau_s`.
#[allow(clippy::too_many_arguments)]
pub fn compute_assignments(
    g: &mut Graph,
    z_q: Var,
    student_prototypes: Var,
    z_k: &Tensor,
    teacher_prototypes: &Tensor,
    center: &[f64],
    tau_s: f64,
    tau_t: f64,
    sharpening: bool,
) -> Result<AssignmentScores> {
    check_temperatures(tau_s, tau_t, sharpening)?;
    let s = g.l2_normalize_rows(student_prototypes)?;
    let st = g.transpose(s)?;
    let logits = g.matmul(z_q, st)?;
    let q = g.softmax_rows(logits, tau_s)?;
    let teacher_logits = teacher_logits(z_k, teacher_prototypes)?;
    let k = teacher_assignments(&teacher_logits, center, tau_t)?;
    if k.rows() != g.value(q).rows() {
        return Err(Error::Dimension {
            op: "compute_assignments",
            message: format!("{} student segments, {} teacher segments", g.value(q).rows(), k.rows()),
        });
    }
    Ok(AssignmentScores {
        q,
        k,
        teacher_logits,
        tau_s,
        tau_t,
    })
}

/// `c ← λ c + (1 - λ) · mean_rows(logits)`.
pub fn update_center(center: &[f64], logits: &Tensor, lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::Config(format!("center momentum {} outside [0, 1)", lambda)));
    }
    if logits.cols() != center.len() {
        return Err(Error::Dimension {
            op: "update_center",
            message: format!("{} logit columns for center of {}", logits.cols(), center.len()),
        });
    }
    let p = logits.rows();
    if p == 0 {
        return Err(Error::EmptyInput("no segments for the center update".into()));
    }
    Ok(center
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let mean = (0..p).map(|i| logits.get(i, j)).sum::<f64>() / p as f64;
            lambda * c + (1.0 - lambda) * mean
        })
        .collect())
}

/// Row entropies with `0 · log 0 = 0`.
pub fn row_entropy(k: &Tensor) -> Vec<f64> {
    (0..k.rows())
        .map(|r| -k.row(r).iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct GroupingLoss {
    pub loss: Var,
    /// Set when every entropy weight was zero and the plain average was used.
    pub fell_back: bool,
}

/// Cross-entropy between K and Q, optionally weighted per segment by the entropy of K.
pub fn grouping_loss(g: &mut Graph, scores: &AssignmentScores, informative_aware: bool) -> Result<GroupingLoss> {
    let (p, n) = (scores.k.rows(), scores.k.cols());
    if p == 0 {
        return Err(Error::EmptyInput("no segments".into()));
    }
    let mut row_w = vec![1.0 / p as f64; p];
    let mut fell_back = false;
    if informative_aware {
        let h = row_entropy(&scores.k);
        let total: f64 = h.iter().sum();
        if total > 0.0 {
            // equal entropies give exactly 1/P; h/Σh would round differently
            if h.iter().any(|&v| v != h[0]) {
                row_w = h.iter().map(|v| v / total).collect();
            }
        } else {
            fell_back = true;
        }
    }
    let logq = g.log_clamped(scores.q, LOG_FLOOR)?;
    let weights: Vec<f64> = (0..p * n).map(|e| -row_w[e / n] * scores.k.data()[e]).collect();
    let loss = g.weighted_sum(logq, &weights)?;
    Ok(GroupingLoss { loss, fell_back })
}

/// Row argmax, lowest index on ties.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupingResult {
    pub segment_labels: Vec<usize>,
    /// K value at the chosen label, per segment.
    pub segment_confidence: Vec<f64>,
    pub point_labels: BTreeMap<u64, usize>,
    pub entropy: Vec<f64>,
}

pub fn extract_groups(k: &Tensor, map: &SegmentMap) -> Result<GroupingResult> {
    if k.rows() != map.num_segments {
        return Err(Error::Dimension {
            op: "extract_groups",
            message: format!("{} assignment rows for {} segments", k.rows(), map.num_segments),
        });
    }
    let segment_labels: Vec<usize> = (0..k.rows()).map(|r| argmax_row(k.row(r))).collect();
    let segment_confidence = segment_labels.iter().enumerate().map(|(r, &l)| k.get(r, l)).collect();
    let point_labels = map.segment_of.iter().map(|(&id, &s)| (id, segment_labels[s])).collect();
    Ok(GroupingResult {
        segment_labels,
        segment_confidence,
        point_labels,
        entropy: row_entropy(k),
    })
}

impl GroupingResult {
    pub fn label(&self, id: u64) -> Option<usize> {
        self.point_labels.get(&id).copied()
    }

    /// Lines of `original_id prototype_label confidence`, sorted by id.
    pub fn to_text(&self, map: &SegmentMap) -> String {
        let mut out = String::new();
        for (&id, &label) in &self.point_labels {
            let conf = map.segment(id).map(|s| self.segment_confidence[s]).unwrap_or(0.0);
            let _ = writeln!(out, "{} {} {:.6}", id, label, conf);
        }
        out
    }

    pub fn save(&self, map: &SegmentMap, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text(map)).map_err(|e| Error::io(path, e))
    }
}
