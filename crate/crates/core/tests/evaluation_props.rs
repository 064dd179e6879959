use proptest::prelude::*;

use powerscan_core::evaluation::{compare_voxels, revoxelize_cloud, voxelize_mesh, OccupancyGrid};
use powerscan_core::trace_io::{Triangle, TriangleMesh};
use powerscan_core::{CloudPoint, PointCloud};

fn grid_pair() -> impl Strategy<Value = (OccupancyGrid, OccupancyGrid)> {
    (1usize..=16, 1usize..=16, 1usize..=16)
        .prop_flat_map(|d| {
            let n = d.0 * d.1 * d.2;
            (
                Just(d),
                prop::collection::vec(any::<bool>(), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_map(|(d, a, b)| {
            let mk = |bits: &[bool]| {
                let mut g = OccupancyGrid::new([d.0, d.1, d.2], [0.5, -1.0, 2.0], 0.25).unwrap();
                let mut it = bits.iter();
                for k in 0..d.2 {
                    for j in 0..d.1 {
                        for i in 0..d.0 {
                            g.set([i, j, k], *it.next().unwrap());
                        }
                    }
                }
                g
            };
            (mk(&a), mk(&b))
        })
}

fn brute_force(r: &OccupancyGrid, c: &OccupancyGrid) -> (u64, u64, u64) {
    let [nx, ny, nz] = r.dims();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                match (r.is_occupied([i, j, k]), c.is_occupied([i, j, k])) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
        }
    }
    (tp, fp, fn_)
}

/// Convex octahedron with vertices on the axes at `r` from `c`.
fn octahedron(c: [f64; 3], r: [f64; 3]) -> TriangleMesh {
    let v = |a: usize, s: f64| {
        let mut p = c;
        p[a] += s * r[a];
        p
    };
    let mut tris = Vec::new();
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                let (a, b, d) = (v(0, sx), v(1, sy), v(2, sz));
                // outward winding
                let t = if sx * sy * sz > 0.0 {
                    [a, b, d]
                } else {
                    [a, d, b]
                };
                tris.push(Triangle(t));
            }
        }
    }
    TriangleMesh::new(tris).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compare_matches_brute_force((r, c) in grid_pair()) {
        let cmp = compare_voxels(&r, &c).unwrap();
        let (tp, fp, fn_) = brute_force(&r, &c);
        prop_assert_eq!((cmp.report.true_pos, cmp.report.false_pos, cmp.report.false_neg), (tp, fp, fn_));
        prop_assert_eq!(cmp.report.true_pos + cmp.report.false_neg, r.count() as u64);
        prop_assert_eq!(cmp.true_pos_cloud.len() as u64, tp);
        if r.count() > 0 && c.count() > 0 {
            let swapped = compare_voxels(&c, &r).unwrap();
            prop_assert_eq!(swapped.report.false_pos, cmp.report.false_neg);
            prop_assert_eq!(swapped.report.false_neg, cmp.report.false_pos);
        }
    }

    #[test]
    fn revoxelized_count_at_most_points(
        pts in prop::collection::vec((-1.0f64..5.0, -1.0f64..5.0, -1.0f64..5.0), 0..300)
    ) {
        let t = OccupancyGrid::new([8, 8, 8], [0.0; 3], 0.5).unwrap();
        let cloud: PointCloud = pts.iter().map(|&(x, y, z)| CloudPoint::new(x, y, z, 1)).collect();
        let r = revoxelize_cloud(&cloud, &t);
        prop_assert!(r.grid.count() <= cloud.len() - r.out_of_bounds);
    }

    #[test]
    fn coarser_cells_never_add_voxels(
        r in (0.5f64..3.0, 0.5f64..3.0, 0.5f64..3.0),
        cell in 0.1f64..0.4,
    ) {
        let mesh = octahedron([1.0, -2.0, 0.5], [r.0, r.1, r.2]);
        let fine = voxelize_mesh(&mesh, cell).unwrap();
        let coarse = voxelize_mesh(&mesh, 2.0 * cell).unwrap();
        prop_assert!(fine.watertight);
        prop_assert!(coarse.grid.count() <= fine.grid.count());
    }
}
