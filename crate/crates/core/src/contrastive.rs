//! Point sampling, positive-pair construction and the weighted InfoNCE loss.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::ViewPair;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::grouping::GroupingResult;
use crate::rng::seeded;
use crate::segment::SegmentMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    MatchedPoints,
    SpatialGrid,
    GeometrySegment,
    SegmentGrouping,
}

/// Sampled point indices into `view_q` and `view_k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Samples {
    pub q: Vec<usize>,
    pub k: Vec<usize>,
    /// True when the overlap was smaller than the request and indices repeat.
    pub with_replacement: bool,
}

fn draw(rng: &mut crate::rng::Rng, len: usize, n: usize) -> (Vec<usize>, bool) {
    if n <= len {
        let mut idx = sample(rng, len, n).into_vec();
        idx.sort_unstable();
        (idx, false)
    } else {
        ((0..n).map(|_| rng.random_range(0..len)).collect(), true)
    }
}

/// Draws `n` overlap points per view; `joint` draws correspondence pairs instead.
pub fn sample_points(pair: &ViewPair, n: usize, seed: u64, joint: bool) -> Result<Samples> {
    let len = pair.correspondence.len();
    if len == 0 {
        return Err(Error::Precondition("views have no overlap".into()));
    }
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    let mut rng = seeded(seed);
    if joint {
        let (idx, rep) = draw(&mut rng, len, n);
        let (q, k) = idx.iter().map(|&i| pair.correspondence[i]).unzip();
        return Ok(Samples {
            q,
            k,
            with_replacement: rep,
        });
    }
    let (qi, rep) = draw(&mut rng, len, n);
    let (ki, _) = draw(&mut rng, len, n);
    Ok(Samples {
        q: qi.iter().map(|&i| pair.overlap_q[i]).collect(),
        k: ki.iter().map(|&i| pair.overlap_k[i]).collect(),
        with_replacement: rep,
    })
}

/// Positive pairs over sample positions `(a, b)` with their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub strategy: PairStrategy,
    pub positives: Vec<(usize, usize)>,
    pub confidence: Vec<f64>,
    pub num_q: usize,
    pub num_k: usize,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    /// Anchors that have at least one positive.
    pub fn anchors(&self) -> usize {
        let mut seen = vec![false; self.num_q];
        self.positives.iter().for_each(|p| seen[p.0] = true);
        seen.iter().filter(|&&s| s).count()
    }
}

/// Strategy-specific inputs for [`build_pairs`].
#[derive(Debug, Clone, Copy, Default)]
pub struct PairInputs<'a> {
    pub segments: Option<&'a SegmentMap>,
    pub grouping: Option<&'a GroupingResult>,
    /// Teacher assignments, one row per segment.
    pub teacher_scores: Option<&'a Tensor>,
    pub grid_size: Option<f64>,
    /// When false, grouping pairs keep weight 1.
    pub confidence_weights: bool,
}

fn need<T>(v: Option<T>, what: &str, strategy: PairStrategy) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("strategy {:?} needs {}", strategy, what)))
}

fn pairs_by_key<K: Eq + std::hash::Hash + Copy>(kq: &[K], kk: &[K]) -> Vec<(usize, usize)> {
    let mut by_key: HashMap<K, Vec<usize>> = HashMap::new();
    for (b, key) in kk.iter().enumerate() {
        by_key.entry(*key).or_default().push(b);
    }
    let mut out = Vec::new();
    for (a, key) in kq.iter().enumerate() {
        if let Some(bs) = by_key.get(key) {
            out.extend(bs.iter().map(|&b| (a, b)));
        }
    }
    out
}

pub fn build_pairs(strategy: PairStrategy, pair: &ViewPair, samples: &Samples, inputs: &PairInputs) -> Result<PairSet> {
    let ids_q: Vec<u64> = samples.q.iter().map(|&i| pair.view_q.ids[i]).collect();
    let ids_k: Vec<u64> = samples.k.iter().map(|&i| pair.view_k.ids[i]).collect();
    let mut confidence = None;
    let positives = match strategy {
        PairStrategy::MatchedPoints => pairs_by_key(&ids_q, &ids_k),
        PairStrategy::SpatialGrid => {
            let size = need(inputs.grid_size, "grid_size", strategy)?;
            if size <= 0.0 || !size.is_finite() {
                return Err(Error::Config(format!("grid size must be positive, got {}", size)));
            }
            let q_index = pair.view_q.index_of_ids();
            let cell = |id: u64| -> Result<(i64, i64)> {
                let i = *q_index
                    .get(&id)
                    .ok_or_else(|| Error::Precondition(format!("id {} not in view_q", id)))?;
                let p = pair.view_q.coords[i];
                Ok(((p[0] / size).floor() as i64, (p[1] / size).floor() as i64))
            };
            let cq = ids_q.iter().map(|&id| cell(id)).collect::<Result<Vec<_>>>()?;
            let ck = ids_k.iter().map(|&id| cell(id)).collect::<Result<Vec<_>>>()?;
            pairs_by_key(&cq, &ck)
        }
        PairStrategy::GeometrySegment => {
            let map = need(inputs.segments, "segments", strategy)?;
            pairs_by_key(&map.segments_for(&ids_q)?, &map.segments_for(&ids_k)?)
        }
        PairStrategy::SegmentGrouping => {
            let map = need(inputs.segments, "segments", strategy)?;
            let groups = need(inputs.grouping, "grouping", strategy)?;
            let k = need(inputs.teacher_scores, "teacher scores", strategy)?;
            let sq = map.segments_for(&ids_q)?;
            let sk = map.segments_for(&ids_k)?;
            let lq: Vec<usize> = sq.iter().map(|&s| groups.segment_labels[s]).collect();
            let lk: Vec<usize> = sk.iter().map(|&s| groups.segment_labels[s]).collect();
            let pos = pairs_by_key(&lq, &lk);
            if inputs.confidence_weights {
                confidence = Some(
                    pos.iter()
                        .map(|&(a, b)| {
                            let l = lq[a];
                            k.get(sq[a], l) * k.get(sk[b], l)
                        })
                        .collect(),
                );
            }
            pos
        }
    };
    let confidence = confidence.unwrap_or_else(|| vec![1.0; positives.len()]);
    Ok(PairSet {
        strategy,
        positives,
        confidence,
        num_q: samples.q.len(),
        num_k: samples.k.len(),
    })
}

/// Weighted InfoNCE averaged over positive pairs. Returns `None` when there are none.
///
/// For each positive `(i, j)` the denominator holds `j` plus every sampled
/// k-view point that is not positive with `i`. `v_k` enters as a constant.
pub fn contrastive_loss(g: &mut Graph, v_q: Var, v_k: &Tensor, pairs: &PairSet, tau: f64) -> Result<Option<Var>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!(
            "contrastive temperature must be positive, got {}",
            tau
        )));
    }
    let (nq, d) = (g.value(v_q).rows(), g.value(v_q).cols());
    let nk = v_k.rows();
    if nq != pairs.num_q || nk != pairs.num_k || v_k.cols() != d {
        return Err(Error::Dimension {
            op: "contrastive_loss",
            message: format!(
                "features {}x{} and {}x{} for pair set over {}x{}",
                nq,
                d,
                nk,
                v_k.cols(),
                pairs.num_q,
                pairs.num_k
            ),
        });
    }
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut kt = vec![0.0; d * nk];
    for r in 0..nk {
        for c in 0..d {
            kt[c * nk + r] = v_k.get(r, c) / tau;
        }
    }
    let kt = g.constant(Tensor::matrix(d, nk, kt)?);
    let logits = g.matmul(v_q, kt)?;
    // Per-anchor max, treated as a constant shift.
    let lv = g.value(logits).clone();
    let mut shift = Vec::with_capacity(nq * nk);
    for r in 0..nq {
        let m = lv.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        shift.extend(std::iter::repeat_n(m, nk));
    }
    let shift = g.constant(Tensor::matrix(nq, nk, shift)?);
    let shifted = g.sub(logits, shift)?;
    let e = g.exp(shifted)?;
    let mut neg = vec![1.0; nq * nk];
    for &(a, b) in &pairs.positives {
        neg[a * nk + b] = 0.0;
    }
    let neg = g.constant(Tensor::matrix(nq, nk, neg)?);
    let masked = g.mul(e, neg)?;
    let neg_sum = g.sum_rows(masked)?;
    let pos_e = g.gather_elements(e, &pairs.positives)?;
    let anchor_idx: Vec<(usize, usize)> = pairs.positives.iter().map(|&(a, _)| (a, 0)).collect();
    let pos_neg = g.gather_elements(neg_sum, &anchor_idx)?;
    let denom = g.add(pos_e, pos_neg)?;
    let log_denom = g.log(denom)?;
    let pos_logit = g.gather_elements(shifted, &pairs.positives)?;
    let log_ratio = g.sub(pos_logit, log_denom)?;
    let p = pairs.len() as f64;
    let weights: Vec<f64> = pairs.confidence.iter().map(|c| -c / p).collect();
    Ok(Some(g.weighted_sum(log_ratio, &weights)?))
}
