use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use powerscan_core::grid::RasterSpec;
use powerscan_core::sim::{simulate_print_trace, Shape, SimConfig};
use powerscan_core::trace_io::{
    load_point_cloud_csv, load_stl, load_trace_csv, write_point_cloud_csv, write_stl_ascii,
    write_stl_binary, write_trace_csv, TraceSchema, Triangle, TriangleMesh,
};
use powerscan_core::{CloudPoint, PointCloud, SignalTrace};

fn sorted_triangles(m: &TriangleMesh) -> Vec<[[f64; 3]; 3]> {
    let mut v: Vec<_> = m.triangles.iter().map(|t| t.0).collect();
    v.sort_by(|a, b| {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trace_csv_round_trip(
        rows in prop::collection::vec((-1e3f64..1e3, -10.0f64..10.0, -10.0f64..10.0), 1..200),
        rate in 1.0f64..1e6,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let (l, (x, y)): (Vec<f64>, (Vec<f64>, Vec<f64>)) = rows.into_iter().map(|(a, b, c)| (a, (b, c))).unzip();
        let t = SignalTrace::new(rate, l, x, y).unwrap();
        write_trace_csv(&t, &path, &TraceSchema::default()).unwrap();
        let back = load_trace_csv(&path, &TraceSchema::default()).unwrap();
        prop_assert_eq!(back.len(), t.len());
        prop_assert_eq!(back.sample_rate_hz(), rate);
        for (a, b) in [(back.laser(), t.laser()), (back.galvo_x(), t.galvo_x()), (back.galvo_y(), t.galvo_y())] {
            for (p, q) in a.iter().zip(b) {
                prop_assert!((p - q).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn stl_formats_agree(tris in prop::collection::vec(prop::array::uniform3(prop::array::uniform3(-100.0f64..100.0)), 1..50)) {
        let mesh = TriangleMesh::new(tris.into_iter().map(Triangle).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.stl"), dir.path().join("b.stl"));
        write_stl_ascii(&mesh, &a).unwrap();
        write_stl_binary(&mesh, &b).unwrap();
        let (ma, mb) = (load_stl(&a).unwrap(), load_stl(&b).unwrap());
        let (sa, sb) = (sorted_triangles(&ma), sorted_triangles(&mb));
        prop_assert_eq!(sa.len(), sb.len());
        for (p, q) in sa.iter().zip(&sb) {
            for (u, v) in p.iter().flatten().zip(q.iter().flatten()) {
                // binary STL stores f32
                prop_assert!((u - v).abs() <= 1e-6 * u.abs().max(1.0) * 10.0);
            }
        }
    }
}

#[test]
fn simulated_trace_survives_csv() {
    let model = Shape::parse("gear(6,16,2)")
        .unwrap()
        .voxelize(RasterSpec::new(0.01).unwrap())
        .unwrap();
    let cfg = SimConfig {
        raster_size_volts: 0.01,
        noise_sigma_volts: 0.02,
        ..SimConfig::default()
    };
    let t = simulate_print_trace(&model, &cfg, 1).unwrap().trace;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sim.csv");
    write_trace_csv(&t, &path, &TraceSchema::default()).unwrap();
    assert_eq!(load_trace_csv(&path, &TraceSchema::default()).unwrap(), t);
}

#[test]
fn large_cloud_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cloud: PointCloud = (0..10_000)
        .map(|_| {
            CloudPoint::new(
                rng.random_range(-1e3..1e3),
                rng.random_range(-1e3..1e3),
                rng.random_range(0.0..200.0),
                rng.random_range(1..1000),
            )
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    write_point_cloud_csv(&cloud, &path).unwrap();
    assert_eq!(load_point_cloud_csv(&path).unwrap(), cloud);
}
