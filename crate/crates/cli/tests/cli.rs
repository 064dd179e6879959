use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use powerscan::pipeline::load_grid;
use powerscan_core::trace_io::{load_point_cloud_csv, write_stl_ascii, Triangle, TriangleMesh};

fn powerscan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_powerscan"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = powerscan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn invalid_config_exits_2_with_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(
        &cfg,
        "threshold_on = 1.0\nthreshold_off = 2.0\nrange = 5\nmin_neighbors = 200\n",
    )
    .unwrap();
    let out = powerscan(&["validate", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("threshold_on > threshold_off"), "{err}");
    assert!(err.contains("exceeds (2r+1)²−1 = 120"), "{err}");
}

#[test]
fn unknown_key_exits_2() {
    let out = powerscan(&["validate", "--set", "rastr_size=0.1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rastr_size"));
}

#[test]
fn shipped_profiles_validate() {
    for p in ["simple", "differential"] {
        ok(&["validate", "--profile", p]);
    }
}

#[test]
fn missing_trace_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = powerscan(&[
        "run",
        "--set",
        &format!("traces={}", s(&missing)),
        "--set",
        &format!("output_dir={}", s(dir.path())),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("load stage failed"));
}

#[test]
fn stages_rerun_individually_match_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    ok(&[
        "simulate",
        "--shape",
        "cylinder(16,6)",
        "--raster",
        "0.1",
        "--noise",
        "0.01",
        "--seed",
        "5",
        "--out",
        s(&d("trace.csv")),
        "--truth",
        s(&d("truth.csv")),
    ]);
    let sets = [
        "--set".to_string(),
        "raster_size=0.1".into(),
        "--set".into(),
        "min_neighbors=20".into(),
    ];
    let sets: Vec<&str> = sets.iter().map(String::as_str).collect();
    let with = |base: &[&str]| -> Vec<String> {
        base.iter().chain(&sets).map(|x| x.to_string()).collect()
    };
    let run = |base: &[&str]| {
        let v = with(base);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>())
    };
    run(&[
        "run",
        "--set",
        &format!("traces={}", s(&d("trace.csv"))),
        "--set",
        &format!("output_dir={}", s(&d("out"))),
    ]);
    run(&[
        "preprocess",
        "--trace",
        s(&d("trace.csv")),
        "--out",
        s(&d("pre.csv")),
    ]);
    run(&[
        "segment",
        "--input",
        s(&d("pre.csv")),
        "--out",
        s(&d("seg.csv")),
    ]);
    run(&[
        "rasterize",
        "--input",
        s(&d("pre.csv")),
        "--segments",
        s(&d("seg.csv")),
        "--out",
        s(&d("raster.csv")),
    ]);
    run(&[
        "prune",
        "--input",
        s(&d("raster.csv")),
        "--out",
        s(&d("pruned.csv")),
    ]);
    for (mine, theirs) in [
        ("pre.csv", "01_preprocessed.csv"),
        ("seg.csv", "02_segments.csv"),
        ("raster.csv", "04_raster.csv"),
        ("pruned.csv", "06_pruned.csv"),
    ] {
        assert_eq!(
            fs::read_to_string(d(mine)).unwrap(),
            fs::read_to_string(d("out").join(theirs)).unwrap(),
            "{mine}"
        );
    }
    let truth = load_grid(&d("truth.csv"), 0.1).unwrap();
    let pruned = load_grid(&d("pruned.csv"), 0.1).unwrap();
    assert_eq!(pruned.layer_count(), truth.layer_count());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d("out").join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["layer_count"], 6);

    let stats: serde_json::Value =
        serde_json::from_str(&run(&["stats", "--input", s(&d("raster.csv"))])).unwrap();
    assert_eq!(stats["layers"], 6);
}

#[test]
fn differential_run_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    let mut traces = Vec::new();
    for seed in 0..3 {
        let p = d(&format!("t{seed}.csv"));
        ok(&[
            "simulate",
            "--shape",
            "box(12,8,5)",
            "--raster",
            "0.1",
            "--noise",
            "0.02",
            "--seed",
            &seed.to_string(),
            "--out",
            s(&p),
        ]);
        traces.push(s(&p).to_string());
    }
    let cfg = d("diff.cfg");
    fs::write(
        &cfg,
        format!(
            "mode = differential\ntraces = {}\noutput_dir = {}\nraster_size = 0.1\nmin_neighbors = 10\n",
            traces.join(","),
            s(&d("out"))
        ),
    )
    .unwrap();
    ok(&["run", "--config", s(&cfg)]);
    assert!(d("out").join("05_merged.csv").exists());
    let rec = load_point_cloud_csv(d("out").join("12_reconstruction.csv")).unwrap();
    assert_eq!(rec.len(), 12 * 8 * 5);

    // reference box of 12 x 8 x 5 cells with outward-facing triangles
    let mesh = box_mesh([12.0, 8.0, 5.0]);
    write_stl_ascii(&mesh, d("ref.stl")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&ok(&[
        "evaluate",
        "--reference",
        s(&d("ref.stl")),
        "--input",
        s(&d("out").join("12_reconstruction.csv")),
        "--grid",
        "1",
        "--scale-rule",
        "explicit(1,1,1)",
        "--out-dir",
        s(&d("eval")),
    ]))
    .unwrap();
    assert_eq!(report["report"]["true_pos"], 480);
    assert_eq!(report["report"]["false_pos"], 0);
    assert!(d("eval").join("false_negative.csv").exists());
}

#[test]
fn distortion_model_round_trip_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    ok(&[
        "simulate",
        "--shape",
        "cylinder(30,3)",
        "--raster",
        "0.2",
        "--distortion",
        "0.9556,0.4137,0.4137,1.2881",
        "--out",
        s(&d("t.csv")),
    ]);
    ok(&[
        "run",
        "--set",
        &format!("traces={}", s(&d("t.csv"))),
        "--set",
        &format!("output_dir={}", s(&d("out"))),
        "--set",
        "raster_size=0.1",
        "--set",
        "min_neighbors=10",
    ]);
    let model: serde_json::Value = serde_json::from_str(&ok(&[
        "fit-distortion",
        "--xy-grid",
        s(&d("out").join("06_pruned.csv")),
        "--out",
        s(&d("m.json")),
        "--set",
        "reference_radius=30",
        "--set",
        "projection_min_hit=1",
    ]))
    .unwrap();
    let m = &model["xy_matrix"];
    let want = [[0.9556, 0.4137], [0.4137, 1.2881]];
    for i in 0..2 {
        for j in 0..2 {
            let got = m[i][j].as_f64().unwrap();
            assert!((got - want[i][j]).abs() < 0.08, "{model}");
        }
    }
    ok(&[
        "correct",
        "--input",
        s(&d("out").join("06_pruned.csv")),
        "--model",
        s(&d("m.json")),
        "--out",
        s(&d("c.csv")),
    ]);
    ok(&[
        "proportion",
        "--input",
        s(&d("c.csv")),
        "--kind",
        "diameter-over-height",
        "--out",
        s(&d("p.csv")),
    ]);
    assert_eq!(
        load_point_cloud_csv(d("p.csv")).unwrap().len(),
        load_point_cloud_csv(d("out").join("06_pruned.csv"))
            .unwrap()
            .len()
    );
}

fn box_mesh(size: [f64; 3]) -> TriangleMesh {
    let v = |i: usize| {
        [
            size[0] * (i & 1) as f64,
            size[1] * (i >> 1 & 1) as f64,
            size[2] * (i >> 2 & 1) as f64,
        ]
    };
    // faces as corner indices in counter-clockwise order seen from outside
    let quads = [
        [0, 2, 3, 1],
        [4, 5, 7, 6],
        [0, 1, 5, 4],
        [2, 6, 7, 3],
        [0, 4, 6, 2],
        [1, 3, 7, 5],
    ];
    let tris = quads
        .iter()
        .flat_map(|q| {
            [
                Triangle([v(q[0]), v(q[1]), v(q[2])]),
                Triangle([v(q[0]), v(q[2]), v(q[3])]),
            ]
        })
        .collect();
    TriangleMesh::new(tris).unwrap()
}
