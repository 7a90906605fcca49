use super::{dist2, PointCloud, Vec3};
use crate::error::{Error, Result};

/// Exact k-nearest-neighbor graph. Sources appear in order, each with
/// `min(k, M - 1)` targets sorted by (distance, index).
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    pub edges: Vec<(usize, usize, f64)>,
    per_source: usize,
    num_points: usize,
}

impl KnnGraph {
    pub fn num_points(&self) -> usize {
        self.num_points
    }

    /// Edges leaving `i` as (source, target, squared distance).
    pub fn neighbors(&self, i: usize) -> &[(usize, usize, f64)] {
        &self.edges[i * self.per_source..(i + 1) * self.per_source]
    }

    pub fn neighbor_indices(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbors(i).iter().map(|e| e.1)
    }
}

pub fn knn_graph(cloud: &PointCloud, k: usize) -> Result<KnnGraph> {
    knn_from_coords(&cloud.coords, k)
}

type Cell = [i64; 3];

/// Dense uniform grid over the points in CSR layout. Correctness never
/// depends on the cell size.
struct Grid {
    h: f64,
    lo: Cell,
    dims: [i64; 3],
    start: Vec<usize>,
    items: Vec<usize>,
}

impl Grid {
    fn new(coords: &[Vec3], k: usize) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in coords {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| max[a] - min[a]).fold(0.0, f64::max);
        // Aim for about k points per occupied cell on surface-like data.
        let per_axis = ((coords.len() as f64 / k.max(1) as f64).sqrt()).clamp(1.0, 256.0);
        let h = if extent > 0.0 { extent / per_axis } else { 1.0 };
        let cell_of = |p: &Vec3| -> Cell { [0, 1, 2].map(|a| (p[a] / h).floor() as i64) };
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        let cells: Vec<Cell> = coords.iter().map(cell_of).collect();
        for c in &cells {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        let dims = [0, 1, 2].map(|a| hi[a] - lo[a] + 1);
        let mut grid = Grid {
            h,
            lo,
            dims,
            start: vec![0; (dims[0] * dims[1] * dims[2]) as usize + 1],
            items: vec![0; coords.len()],
        };
        let flat: Vec<usize> = cells.iter().map(|c| grid.flat(*c)).collect();
        for &f in &flat {
            grid.start[f + 1] += 1;
        }
        for i in 1..grid.start.len() {
            grid.start[i] += grid.start[i - 1];
        }
        let mut fill = grid.start.clone();
        for (i, &f) in flat.iter().enumerate() {
            grid.items[fill[f]] = i;
            fill[f] += 1;
        }
        grid
    }

    fn cell(&self, p: &Vec3) -> Cell {
        [0, 1, 2].map(|a| (p[a] / self.h).floor() as i64 - self.lo[a])
    }

    fn flat(&self, c: Cell) -> usize {
        let r = [0, 1, 2].map(|a| c[a] - self.lo[a]);
        ((r[0] * self.dims[1] + r[1]) * self.dims[2] + r[2]) as usize
    }

    fn visit(&self, x: i64, y: i64, z: i64, f: &mut impl FnMut(usize)) {
        if z < 0 || z >= self.dims[2] {
            return;
        }
        let idx = ((x * self.dims[1] + y) * self.dims[2] + z) as usize;
        self.items[self.start[idx]..self.start[idx + 1]]
            .iter()
            .for_each(|&j| f(j));
    }

    /// Calls `f` on the points of every cell at Chebyshev ring `r` around `c`
    /// (`c` relative to the grid origin).
    fn ring(&self, c: Cell, r: i64, mut f: impl FnMut(usize)) {
        for x in (c[0] - r).max(0)..=(c[0] + r).min(self.dims[0] - 1) {
            for y in (c[1] - r).max(0)..=(c[1] + r).min(self.dims[1] - 1) {
                if (x - c[0]).abs() == r || (y - c[1]).abs() == r {
                    for z in (c[2] - r).max(0)..=(c[2] + r).min(self.dims[2] - 1) {
                        self.visit(x, y, z, &mut f);
                    }
                } else {
                    self.visit(x, y, c[2] - r, &mut f);
                    if r > 0 {
                        self.visit(x, y, c[2] + r, &mut f);
                    }
                }
            }
        }
    }

    fn covers_all(&self, c: Cell, r: i64) -> bool {
        (0..3).all(|a| c[a] - r <= 0 && c[a] + r >= self.dims[a] - 1)
    }
}

pub(crate) fn knn_from_coords(coords: &[Vec3], k: usize) -> Result<KnnGraph> {
    let m = coords.len();
    if m < 2 {
        return Err(Error::EmptyInput(format!(
            "knn graph needs at least 2 points, got {}",
            m
        )));
    }
    if k == 0 {
        return Err(Error::Precondition("knn graph needs k >= 1".into()));
    }
    let kk = k.min(m - 1);
    let grid = Grid::new(coords, kk);
    let mut edges = Vec::with_capacity(m * kk);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(m);
    let mut scratch: Vec<f64> = Vec::with_capacity(m);
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for i in 0..m {
        cand.clear();
        let c = grid.cell(&coords[i]);
        let mut r = 0;
        loop {
            grid.ring(c, r, |j| {
                if j != i {
                    cand.push((dist2(&coords[i], &coords[j]), j));
                }
            });
            if grid.covers_all(c, r) {
                break;
            }
            if cand.len() >= kk {
                // Unvisited points lie farther than r cell widths away.
                scratch.clear();
                scratch.extend(cand.iter().map(|e| e.0));
                let (_, kth, _) = scratch.select_nth_unstable_by(kk - 1, f64::total_cmp);
                let reach = r as f64 * grid.h * (1.0 - 1e-9);
                if *kth < reach * reach {
                    break;
                }
            }
            r += 1;
        }
        if kk < cand.len() {
            cand.select_nth_unstable_by(kk - 1, cmp);
            cand.truncate(kk);
        }
        cand.sort_unstable_by(cmp);
        edges.extend(cand.iter().map(|&(d, j)| (i, j, d)));
    }
    Ok(KnnGraph {
        k,
        edges,
        per_source: kk,
        num_points: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(coords: &[Vec3], k: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..coords.len() {
            let mut all: Vec<(f64, usize)> = Vec::new();
            for j in 0..coords.len() {
                if j != i {
                    let d: f64 = (0..3).map(|a| (coords[i][a] - coords[j][a]).powi(2)).sum();
                    all.push((d, j));
                }
            }
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out.extend(all.iter().take(k).map(|&(_, j)| (i, j)));
        }
        out
    }

    #[test]
    fn collinear_tie_breaks_by_index() {
        let c = PointCloud::from_coords(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let g = knn_graph(&c, 1).unwrap();
        assert_eq!(g.neighbors(1), &[(1, 0, 1.0)]);
        assert_eq!(g.neighbors(0)[0].1, 1);
    }

    #[test]
    fn saturates_at_m_minus_one() {
        let c = PointCloud::from_coords(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 5.0]]);
        let g = knn_graph(&c, 10).unwrap();
        assert_eq!(g.edges.len(), 12);
        for i in 0..4 {
            let mut t: Vec<usize> = g.neighbor_indices(i).collect();
            t.sort();
            let expect: Vec<usize> = (0..4).filter(|&j| j != i).collect();
            assert_eq!(t, expect);
        }
    }

    #[test]
    fn too_few_points() {
        let c = PointCloud::from_coords(vec![[0.0; 3]]);
        assert!(matches!(knn_graph(&c, 1), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn matches_brute_force_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        let coords: Vec<Vec3> = (0..200).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let g = knn_from_coords(&coords, 8).unwrap();
        let got: Vec<(usize, usize)> = g.edges.iter().map(|e| (e.0, e.1)).collect();
        assert_eq!(got, brute_force(&coords, 8));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn equals_brute_force(
            pts in proptest::collection::vec(proptest::array::uniform3(-5i32..5), 2..120),
            k in 1usize..12,
        ) {
            // integer grid coordinates force plenty of distance ties
            let coords: Vec<Vec3> = pts.iter().map(|p| p.map(|v| v as f64 * 0.5)).collect();
            let g = knn_from_coords(&coords, k).unwrap();
            let got: Vec<(usize, usize)> = g.edges.iter().map(|e| (e.0, e.1)).collect();
            proptest::prop_assert_eq!(got, brute_force(&coords, k));
        }
    }
}
