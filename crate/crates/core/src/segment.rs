//! Geometric over-segmentation of the overlap region.
//!
//! Felzenszwalb–Huttenlocher merging over a kNN graph whose edge weights are
//! `1 - |n_i · n_j|`, or externally supplied masks read from `id mask` lines.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{dist2, dot, knn_graph, KnnGraph, PointCloud};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub threshold: f64,
    pub k: usize,
    pub min_segment_size: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            threshold: 0.1,
            k: 16,
            min_segment_size: 20,
        }
    }
}

/// Assignment of every overlap point (by original id) to one of `P` segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMap {
    pub segment_of: BTreeMap<u64, usize>,
    pub num_segments: usize,
    pub sizes: Vec<usize>,
}

impl SegmentMap {
    /// Builds a map from per-point raw labels, numbering segments by their
    /// smallest member id.
    pub fn from_labels(ids: &[u64], raw: &[usize]) -> Self {
        let mut first: HashMap<usize, u64> = HashMap::new();
        for (&id, &r) in ids.iter().zip(raw) {
            let e = first.entry(r).or_insert(id);
            *e = (*e).min(id);
        }
        let mut order: Vec<(u64, usize)> = first.into_iter().map(|(r, id)| (id, r)).collect();
        order.sort_unstable();
        let relabel: HashMap<usize, usize> = order.iter().enumerate().map(|(s, &(_, r))| (r, s)).collect();
        let mut sizes = vec![0; order.len()];
        let mut segment_of = BTreeMap::new();
        for (&id, r) in ids.iter().zip(raw) {
            let s = relabel[r];
            sizes[s] += 1;
            segment_of.insert(id, s);
        }
        SegmentMap {
            segment_of,
            num_segments: order.len(),
            sizes,
        }
    }

    pub fn segment(&self, id: u64) -> Option<usize> {
        self.segment_of.get(&id).copied()
    }

    /// Segment index per id, failing on ids outside the map.
    pub fn segments_for(&self, ids: &[u64]) -> Result<Vec<usize>> {
        let mut missing = Vec::new();
        let out: Vec<usize> = ids
            .iter()
            .map(|id| {
                self.segment(*id).unwrap_or_else(|| {
                    missing.push(*id);
                    0
                })
            })
            .collect();
        if missing.is_empty() {
            Ok(out)
        } else {
            Err(Error::missing_ids(missing))
        }
    }

    /// The partition as a set of id-sets, independent of segment numbering.
    pub fn partition(&self) -> Vec<Vec<u64>> {
        let mut groups = vec![Vec::new(); self.num_segments];
        for (&id, &s) in &self.segment_of {
            groups[s].push(id);
        }
        groups.sort();
        groups
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (id, seg) in &self.segment_of {
            writeln!(s, "{} {}", id, seg).expect("write to String");
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, w: f64) -> usize {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = self.internal[big].max(self.internal[small]).max(w);
        big
    }
}

/// Points of `cloud` whose ids are in `ids`, in cloud order.
pub fn restrict_to_ids(cloud: &PointCloud, ids: &[u64]) -> Result<PointCloud> {
    if ids.is_empty() {
        return Err(Error::EmptyInput("overlap region is empty".into()));
    }
    let wanted: HashSet<u64> = ids.iter().copied().collect();
    let keep: Vec<usize> = (0..cloud.len()).filter(|&i| wanted.contains(&cloud.ids[i])).collect();
    if keep.len() != wanted.len() {
        let present: HashSet<u64> = cloud.ids.iter().copied().collect();
        return Err(Error::missing_ids(
            wanted.into_iter().filter(|id| !present.contains(id)).collect(),
        ));
    }
    Ok(cloud.select(&keep))
}

/// Weighted edges `(w, i, j)` of the graph in processing order: ascending
/// weight, ties broken by the (source, target) original ids.
pub fn weighted_edges(region: &PointCloud, graph: &KnnGraph) -> Result<Vec<(f64, usize, usize)>> {
    let normals = region
        .normals
        .as_ref()
        .ok_or_else(|| Error::Precondition("segmentation needs normals".into()))?;
    let mut edges: Vec<(f64, usize, usize)> = graph
        .edges
        .iter()
        .map(|&(i, j, _)| ((1.0 - dot(&normals[i], &normals[j]).abs()).max(0.0), i, j))
        .collect();
    let ids = &region.ids;
    edges.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(ids[a.1].cmp(&ids[b.1]))
            .then(ids[a.2].cmp(&ids[b.2]))
    });
    Ok(edges)
}

/// Felzenszwalb–Huttenlocher segmentation of the overlap region.
///
/// `graph` must be built over `restrict_to_ids(cloud, overlap_ids)`.
pub fn graph_cut_segments(
    cloud: &PointCloud,
    overlap_ids: &[u64],
    graph: &KnnGraph,
    threshold: f64,
    min_segment_size: usize,
) -> Result<SegmentMap> {
    if cloud.normals.is_none() {
        return Err(Error::Precondition("segmentation needs normals".into()));
    }
    let region = restrict_to_ids(cloud, overlap_ids)?;
    let n = region.len();
    if graph.num_points() != n {
        return Err(Error::Precondition(format!(
            "graph covers {} points, overlap has {}",
            graph.num_points(),
            n
        )));
    }
    let edges = weighted_edges(&region, graph)?;
    let mut ds = DisjointSet::new(n);
    for &(w, i, j) in &edges {
        let (a, b) = (ds.find(i), ds.find(j));
        if a == b {
            continue;
        }
        let ta = ds.internal[a] + threshold / ds.size[a] as f64;
        let tb = ds.internal[b] + threshold / ds.size[b] as f64;
        if w <= ta.min(tb) {
            ds.union(a, b, w);
        }
    }
    for &(w, i, j) in &edges {
        let (a, b) = (ds.find(i), ds.find(j));
        if a != b && (ds.size[a] < min_segment_size || ds.size[b] < min_segment_size) {
            ds.union(a, b, w);
        }
    }
    absorb_disconnected(&region, &mut ds, min_segment_size);
    let raw: Vec<usize> = (0..n).map(|i| ds.find(i)).collect();
    Ok(SegmentMap::from_labels(&region.ids, &raw))
}

/// Components still below the minimum size have no graph edge to another
/// component; join each to the component holding its nearest outside point.
fn absorb_disconnected(region: &PointCloud, ds: &mut DisjointSet, min_size: usize) {
    let n = region.len();
    if n < min_size {
        return;
    }
    loop {
        let roots: Vec<usize> = (0..n).map(|i| ds.find(i)).collect();
        let small = (0..n)
            .filter(|&i| ds.size[roots[i]] < min_size)
            .min_by_key(|&i| region.ids[i]);
        let Some(seed) = small else { return };
        let root = roots[seed];
        let mut best: Option<(f64, u64, usize)> = None;
        for i in (0..n).filter(|&i| roots[i] == root) {
            for j in (0..n).filter(|&j| roots[j] != root) {
                let cand = (dist2(&region.coords[i], &region.coords[j]), region.ids[j], j);
                if best.is_none_or(|b| (cand.0, cand.1) < (b.0, b.1)) {
                    best = Some(cand);
                }
            }
        }
        match best {
            Some((_, _, j)) => {
                let other = ds.find(j);
                ds.union(root, other, 0.0);
            }
            None => return,
        }
    }
}

/// Restricts to the overlap, builds its kNN graph and segments it.
pub fn segment_overlap(cloud: &PointCloud, overlap_ids: &[u64], cfg: &SegmentConfig) -> Result<SegmentMap> {
    if cloud.normals.is_none() {
        return Err(Error::Precondition("segmentation needs normals".into()));
    }
    let region = restrict_to_ids(cloud, overlap_ids)?;
    if region.len() == 1 {
        return Ok(SegmentMap::from_labels(&region.ids, &[0]));
    }
    let graph = knn_graph(&region, cfg.k)?;
    graph_cut_segments(cloud, overlap_ids, &graph, cfg.threshold, cfg.min_segment_size)
}

/// Parses `original_id mask_id` lines; `#` starts a comment.
pub fn parse_external_segments(text: &str, overlap_ids: &[u64]) -> Result<SegmentMap> {
    if overlap_ids.is_empty() {
        return Err(Error::EmptyInput("overlap region is empty".into()));
    }
    let wanted: HashSet<u64> = overlap_ids.iter().copied().collect();
    let mut mask_of: HashMap<u64, i64> = HashMap::new();
    let mut order: Vec<u64> = Vec::new();
    let mut any = false;
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        any = true;
        let tok: Vec<&str> = line.split_whitespace().collect();
        let err = |m: String| Error::Parse {
            line: no + 1,
            message: m,
        };
        if tok.len() != 2 {
            return Err(err(format!("expected 'original_id mask_id', got '{}'", line)));
        }
        let id: u64 = tok[0].parse().map_err(|_| err(format!("bad id '{}'", tok[0])))?;
        let mask: i64 = tok[1].parse().map_err(|_| err(format!("bad mask id '{}'", tok[1])))?;
        if let Some(prev) = mask_of.insert(id, mask) {
            if prev != mask {
                return Err(err(format!("id {} assigned to masks {} and {}", id, prev, mask)));
            }
        } else if wanted.contains(&id) {
            order.push(id);
        }
    }
    if !any {
        return Err(Error::EmptyInput("segment mask file has no entries".into()));
    }
    let missing: Vec<u64> = overlap_ids
        .iter()
        .copied()
        .filter(|id| !mask_of.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::missing_ids(missing));
    }
    let mut index: HashMap<i64, usize> = HashMap::new();
    let mut segment_of = BTreeMap::new();
    let mut sizes = Vec::new();
    for id in order {
        let mask = mask_of[&id];
        let next = index.len();
        let s = *index.entry(mask).or_insert(next);
        if s == sizes.len() {
            sizes.push(0);
        }
        sizes[s] += 1;
        segment_of.insert(id, s);
    }
    Ok(SegmentMap {
        segment_of,
        num_segments: sizes.len(),
        sizes,
    })
}

pub fn load_external_segments(path: impl AsRef<Path>, overlap_ids: &[u64]) -> Result<SegmentMap> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_external_segments(&text, overlap_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::synthetic::{generate_synthetic_scene, SceneRecipe};

    fn patch(normal: [f64; 3], offset: [f64; 3], start_id: u64) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                let (a, b) = (i as f64 * 0.1, j as f64 * 0.1);
                let p = if normal[2] == 1.0 { [a, b, 0.0] } else { [0.0, a, b] };
                pts.push([p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]]);
            }
        }
        let mut c = PointCloud::from_coords(pts);
        c.normals = Some(vec![normal; c.len()]);
        c.ids = (start_id..start_id + c.len() as u64).collect();
        c
    }

    fn concat(a: PointCloud, b: PointCloud) -> PointCloud {
        let mut c = a.clone();
        c.coords.extend(b.coords);
        c.colors.extend(b.colors);
        c.ids.extend(b.ids);
        c.normals.as_mut().unwrap().extend(b.normals.unwrap());
        c
    }

    #[test]
    fn flat_plane_is_one_segment() {
        let c = patch([0.0, 0.0, 1.0], [0.0; 3], 0);
        let map = segment_overlap(&c, &c.ids, &SegmentConfig::default()).unwrap();
        assert_eq!(map.num_segments, 1);
        assert_eq!(map.sizes, vec![64]);
    }

    #[test]
    fn orthogonal_patches_split_at_seam() {
        let floor = patch([0.0, 0.0, 1.0], [0.05, 0.0, 0.0], 0);
        let wall = patch([1.0, 0.0, 0.0], [0.0, 0.0, 0.05], 64);
        let c = concat(floor, wall);
        let cfg = SegmentConfig {
            threshold: 0.05,
            k: 8,
            min_segment_size: 5,
        };
        let map = segment_overlap(&c, &c.ids, &cfg).unwrap();
        assert_eq!(map.num_segments, 2);
        assert!((0..64).all(|id| map.segment(id) == Some(0)));
        assert!((64..128).all(|id| map.segment(id) == Some(1)));
    }

    #[test]
    fn missing_normals_and_empty_overlap() {
        let mut c = patch([0.0, 0.0, 1.0], [0.0; 3], 0);
        assert!(matches!(
            segment_overlap(&c, &[], &SegmentConfig::default()),
            Err(Error::EmptyInput(_))
        ));
        c.normals = None;
        assert!(matches!(
            segment_overlap(&c, &c.ids.clone(), &SegmentConfig::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn synthetic_segments_are_pure_and_large_enough() {
        let scene = generate_synthetic_scene(4, &SceneRecipe::default_room()).unwrap();
        let cfg = SegmentConfig::default();
        let map = segment_overlap(&scene, &scene.ids, &cfg).unwrap();
        assert!(map.sizes.iter().all(|&s| s >= cfg.min_segment_size));
        assert_eq!(map.sizes.iter().sum::<usize>(), scene.len());
        let labels = scene.labels.as_ref().unwrap();
        let mut correct = 0;
        for seg in map.partition() {
            let mut hist = [0usize; 8];
            for id in &seg {
                hist[labels[*id as usize] as usize] += 1;
            }
            correct += hist.iter().max().unwrap();
        }
        let purity = correct as f64 / scene.len() as f64;
        assert!(purity >= 0.9, "purity {}", purity);
    }

    #[test]
    fn raising_threshold_never_adds_segments() {
        let scene = generate_synthetic_scene(9, &SceneRecipe::default_room()).unwrap();
        let graph = knn_graph(&scene, 16).unwrap();
        let mut last = usize::MAX;
        for t in [0.0, 0.02, 0.05, 0.1, 0.3, 1.0, 5.0] {
            let p = graph_cut_segments(&scene, &scene.ids, &graph, t, 1)
                .unwrap()
                .num_segments;
            assert!(p <= last, "threshold {}: {} > {}", t, p, last);
            last = p;
        }
    }

    #[test]
    fn permutation_keeps_partition() {
        let scene = generate_synthetic_scene(2, &SceneRecipe::default_room()).unwrap();
        let mut order: Vec<usize> = (0..scene.len()).collect();
        order.reverse();
        order.swap(3, 500);
        let shuffled = scene.select(&order);
        let cfg = SegmentConfig::default();
        let a = segment_overlap(&scene, &scene.ids, &cfg).unwrap();
        let b = segment_overlap(&shuffled, &shuffled.ids, &cfg).unwrap();
        assert_eq!(a.partition(), b.partition());
        assert_eq!(a, b);
    }

    #[test]
    fn external_masks_reindex_by_first_appearance() {
        let ids: Vec<u64> = (0..6).collect();
        let all7: String = ids.iter().map(|i| format!("{} 7\n", i)).collect();
        let m = parse_external_segments(&all7, &ids).unwrap();
        assert_eq!(m.num_segments, 1);
        assert!(m.segment_of.values().all(|&s| s == 0));

        let text = "0 9\n1 4\n2 9\n3 4\n4 9\n5 4\n";
        let m = parse_external_segments(text, &ids).unwrap();
        assert_eq!(m.num_segments, 2);
        assert_eq!(m.segment(0), Some(0));
        assert_eq!(m.segment(1), Some(1));
        assert_eq!(m.sizes, vec![3, 3]);
    }

    #[test]
    fn external_masks_report_missing_ids() {
        let ids: Vec<u64> = (0..30).collect();
        match parse_external_segments("0 1\n1 1\n", &ids) {
            Err(Error::MissingIds { count, shown }) => {
                assert_eq!(count, 28);
                assert_eq!(shown, (2..12).collect::<Vec<u64>>());
            }
            other => panic!("unexpected {:?}", other),
        }
        assert!(matches!(
            parse_external_segments("# nothing\n\n", &ids),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            parse_external_segments("0 x\n", &ids),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn text_export_round_trips() {
        let scene = generate_synthetic_scene(4, &SceneRecipe::default_room()).unwrap();
        let map = segment_overlap(&scene, &scene.ids, &SegmentConfig::default()).unwrap();
        let back = parse_external_segments(&map.to_text(), &scene.ids).unwrap();
        assert_eq!(back, map);
    }
}
