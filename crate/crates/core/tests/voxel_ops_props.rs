use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use powerscan_core::grid::{RasterSpec, VoxelGrid, VoxelKey};
use powerscan_core::voxel_ops::{
    fill_gaps, gap_stretch_histogram, project_columns, prune_by_hit_count, prune_by_neighbors,
    prune_by_neighbors_in, Neighborhood, ProjectionDirection,
};

fn random_grid(rng: &mut ChaCha8Rng, nx: i32, ny: i32, nz: u32, density: f64) -> VoxelGrid {
    let mut cells = Vec::new();
    for l in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                if rng.random_bool(density) {
                    cells.push((VoxelKey::new(l, x, y), rng.random_range(1..4)));
                }
            }
        }
    }
    VoxelGrid::from_cells(RasterSpec::new(1.0).unwrap(), nz, cells).unwrap()
}

/// Counts neighbors by testing every other occupied cell for box membership.
fn brute_force_prune(g: &VoxelGrid, range: u32, min: u32, volumetric: bool) -> Vec<VoxelKey> {
    let cells: Vec<VoxelKey> = g.sorted_cells().into_iter().map(|(k, _)| k).collect();
    let r = range as i64;
    cells
        .iter()
        .filter(|a| {
            let n = cells
                .iter()
                .filter(|b| {
                    a != b
                        && (a.x as i64 - b.x as i64).abs() <= r
                        && (a.y as i64 - b.y as i64).abs() <= r
                        && if volumetric {
                            (a.layer as i64 - b.layer as i64).abs() <= r
                        } else {
                            a.layer == b.layer
                        }
                })
                .count();
            n >= min as usize
        })
        .copied()
        .collect()
}

fn keys(g: &VoxelGrid) -> Vec<VoxelKey> {
    g.sorted_cells().into_iter().map(|(k, _)| k).collect()
}

#[test]
fn neighbor_pruning_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut suites = Vec::new();
    for _ in 0..500 {
        let (nx, ny, nz) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=3),
        );
        suites.push((nx, ny, nz));
    }
    suites.extend(std::iter::repeat_n((20, 20, 5), 50));
    for (nx, ny, nz) in suites {
        let density = rng.random_range(0.05..0.9);
        let g = random_grid(&mut rng, nx, ny, nz, density);
        let range = rng.random_range(1..=5);
        let min = rng.random_range(0..=(2 * range + 1) * (2 * range + 1) - 1);
        assert_eq!(
            keys(&prune_by_neighbors(&g, range, min)),
            brute_force_prune(&g, range, min, true)
        );
        assert_eq!(
            keys(&prune_by_neighbors_in(&g, range, min, Neighborhood::Planar)),
            brute_force_prune(&g, range, min, false)
        );
    }
}

fn arb_grid() -> impl Strategy<Value = VoxelGrid> {
    prop::collection::vec((0u32..6, -6i32..6, -6i32..6, 1u32..50), 0..120).prop_map(|cells| {
        VoxelGrid::from_cells(
            RasterSpec::new(1.0).unwrap(),
            6,
            cells
                .into_iter()
                .map(|(l, x, y, h)| (VoxelKey::new(l, x, y), h)),
        )
        .unwrap()
    })
}

fn direction() -> impl Strategy<Value = ProjectionDirection> {
    prop_oneof![
        Just(ProjectionDirection::Up),
        Just(ProjectionDirection::Down),
        (0u32..6).prop_map(|m| ProjectionDirection::Bidirectional { middle_layer: m }),
    ]
}

proptest! {
    #[test]
    fn hit_pruning_idempotent_and_monotone(g in arb_grid(), k in 1u32..40, extra in 0u32..10) {
        let once = prune_by_hit_count(&g, k);
        prop_assert_eq!(&prune_by_hit_count(&once, k), &once);
        let stricter = prune_by_hit_count(&g, k + extra);
        prop_assert!(stricter.iter().all(|(key, _)| once.contains(key)));
    }

    #[test]
    fn fill_keeps_originals_and_marks(g in arb_grid(), dir in direction(), min_hit in 1u64..60) {
        let proj = project_columns(&g, dir, min_hit).unwrap();
        for e in proj.upper.values().chain(proj.lower.values()) {
            prop_assert!(e.hits >= min_hit);
        }
        let filled = fill_gaps(&g, &proj);
        for (k, &h) in g.iter() {
            prop_assert_eq!(filled.get(k), h + 1);
        }
        for (k, &h) in filled.iter() {
            if !g.contains(k) {
                prop_assert_eq!(h, 1);
            } else {
                prop_assert!(h >= 2);
            }
        }
    }

    #[test]
    fn row_cells_are_accounted_for(xs in prop::collection::btree_set(0i32..40, 0..40)) {
        let width = 40usize;
        let g = VoxelGrid::from_cells(
            RasterSpec::new(1.0).unwrap(),
            1,
            xs.iter().map(|&x| (VoxelKey::new(0, x, 0), 1)),
        )
        .unwrap();
        let stretch: usize = gap_stretch_histogram(&g).iter().map(|(len, n)| len * n).sum();
        let outside = match (xs.first(), xs.last()) {
            (Some(&lo), Some(&hi)) => lo as usize + (width - 1 - hi as usize),
            _ => width,
        };
        prop_assert_eq!(stretch + xs.len() + outside, width);
    }
}
