mod common;

use std::collections::{BTreeMap, HashSet};

use protogroup::pointcloud::ply::load_ply;
use protogroup::pointcloud::synthetic::{generate_synthetic_scene, SceneRecipe};

// Values read from tests/fixtures/cloud1000.ply with the Python `plyfile` package.
const FIXTURE_MIN: [f64; 3] = [-1.9851398468017578, -1.9992550611495972, -1.9997881650924683];
const FIXTURE_MAX: [f64; 3] = [2.9982564449310303, 2.9903674125671387, 2.99927020072937];
const FIXTURE_COLOR_SUMS: [f64; 3] = [490.5333333333333, 496.3450980392157, 518.1176470588235];
const FIXTURE_COLOR_TOTAL: f64 = 1504.9960784313726;

#[test]
fn fixture_matches_independent_reader() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/cloud1000.ply");
    let c = load_ply(path).unwrap();
    assert_eq!(c.len(), 1000);
    assert_eq!(c.ids, (0..1000).collect::<Vec<u64>>());
    let (lo, hi) = c.bounds();
    for a in 0..3 {
        assert_eq!(lo[a], FIXTURE_MIN[a]);
        assert_eq!(hi[a], FIXTURE_MAX[a]);
        let s: f64 = c.colors.iter().map(|v| v[a]).sum();
        assert!((s - FIXTURE_COLOR_SUMS[a]).abs() < 1e-9, "channel {}: {}", a, s);
    }
    let total: f64 = c.colors.iter().flat_map(|v| v.iter()).sum();
    assert!((total - FIXTURE_COLOR_TOTAL).abs() < 1e-9);
    assert!(c.normals.is_none());
}

/// Expected per-class counts from the analytic primitive areas.
#[test]
fn room_histogram_is_area_proportional() {
    let recipe = SceneRecipe::default_room();
    let r = 0.35f64;
    let areas = [
        3.0 * 3.0,
        3.0 * 2.0,
        // five faces: the box rests on the floor
        0.8 * 0.6 + 2.0 * (0.8 * 0.6) + 2.0 * (0.6 * 0.6),
        4.0 * std::f64::consts::PI * r * r,
    ];
    let cloud = generate_synthetic_scene(5, &recipe).unwrap();
    let mut hist: BTreeMap<u32, usize> = BTreeMap::new();
    for l in cloud.labels.as_ref().unwrap() {
        *hist.entry(*l).or_default() += 1;
    }
    for (class, area) in areas.iter().enumerate() {
        let expected = area * 50.0;
        let got = hist[&(class as u32)] as f64;
        assert!(
            (got - expected).abs() <= 0.05 * expected,
            "class {}: {} vs {}",
            class,
            got,
            expected
        );
    }
}

#[test]
fn distinct_seeds_give_distinct_scenes() {
    let recipe = SceneRecipe::default_room();
    let a = generate_synthetic_scene(1, &recipe).unwrap();
    let b = generate_synthetic_scene(2, &recipe).unwrap();
    assert_ne!(a.coords, b.coords);
    let ids: HashSet<u64> = a.ids.iter().copied().collect();
    assert_eq!(ids.len(), a.len());
}
