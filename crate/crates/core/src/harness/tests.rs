use super::*;
use crate::geometry::sort_cameras;
use crate::mveditor::{EditKind, PerViewRandom, RecolorByWorldPosition, StyleTint};
use nalgebra::Matrix3;

fn recolor() -> RecolorByWorldPosition {
    RecolorByWorldPosition { axis: [1.0, 0.0, 0.0], center: 0.0, width: 1.6, chroma_a: [1.0, 0.35, 0.3], chroma_b: [0.3, 0.45, 1.0] }
}

fn small(layout: Layout, seed: u64) -> SceneSpec {
    SceneSpec { layout, image_size: 48, seed, ..Default::default() }
}

fn consistency_of(images: &[Image<f64>], prep: &Prepared<f64>) -> f64 {
    reprojection_consistency(images, &prep.depths, &prep.cameras, RenderConfig::default().far, &ConsistencyOptions::default())
        .unwrap()
}

#[test]
fn two_cluster_pair_sits_at_centers() {
    let spec = SceneSpec { layout: Layout::TwoCluster, gaussian_count: 2, ..Default::default() };
    let (mix, _) = generate_scene::<f64>(&spec).unwrap();
    for (p, c) in mix.primitives.iter().zip(CLUSTER_CENTERS) {
        assert_eq!(p.mean, Vector3::from(c));
    }
}

#[test]
fn generation_is_deterministic_and_shuffled() {
    for layout in [Layout::OrbitSphere, Layout::BoxGrid, Layout::TwoCluster] {
        let spec = SceneSpec { layout, gaussian_count: 50, seed: 9, ..Default::default() };
        let (a, ca) = generate_scene::<f64>(&spec).unwrap();
        let (b, cb) = generate_scene::<f64>(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert!((20..=30).contains(&ca.len()));
        let order = sort_cameras(&ca);
        assert!(order.windows(2).any(|w| w[1] != w[0] + 1) || order.first() != Some(&0));
    }
}

#[test]
fn orbit_cameras_see_the_center() {
    for (radius, elevation, fov) in [(4.0, 20.0, 40.0), (2.5, -30.0, 60.0), (10.0, 60.0, 15.0)] {
        let spec = SceneSpec { radius, elevation_deg: elevation, fov_deg: fov, camera_count: Some(12), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cam in orbit_cameras(&spec, 12, &mut rng).unwrap() {
            let uv = project(&cam, &Vector3::zeros()).expect("in front");
            assert!(uv.x > 0.0 && uv.x < cam.width() as f64 && uv.y > 0.0 && uv.y < cam.height() as f64);
            assert!((cam.center().norm() - radius).abs() < 1e-9);
        }
    }
}

#[test]
fn invalid_scene_specs_are_rejected() {
    let bad = [
        SceneSpec { gaussian_count: 0, ..Default::default() },
        SceneSpec { camera_count: Some(1), ..Default::default() },
        SceneSpec { radius: 0.9, ..Default::default() },
        SceneSpec { fov_deg: 180.0, ..Default::default() },
        SceneSpec { layout: Layout::FromPly("/nonexistent/scene.ply".into()), ..Default::default() },
    ];
    for spec in bad {
        assert!(generate_scene::<f64>(&spec).is_err(), "{spec:?}");
    }
}

#[test]
fn scene_spec_json() {
    let spec = SceneSpec { layout: Layout::FromPly("a/b.ply".into()), camera_count: Some(7), ..Default::default() };
    let text = serde_json::to_string(&spec).unwrap();
    assert!(text.contains("from-ply"));
    assert_eq!(SceneSpec::from_json(&text).unwrap(), spec);
    let partial = SceneSpec::from_json(r#"{"layout": "box-grid", "seed": 3}"#).unwrap();
    assert_eq!(partial, SceneSpec { layout: Layout::BoxGrid, seed: 3, ..Default::default() });
    assert!(SceneSpec::from_json(r#"{"gaussian_count": 0}"#).is_err());
}

#[test]
fn methods_parse() {
    assert_eq!(Method::parse_list("direct, idu").unwrap(), vec![Method::Direct, Method::Idu]);
    assert_eq!("independent".parse::<Method>().unwrap(), Method::Independent);
    assert!(matches!(Method::parse_list("direct,sds"), Err(HarnessError::Method(m)) if m == "sds"));
    for m in [Method::Direct, Method::Independent, Method::Idu] {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
}

#[test]
fn ground_truth_edit_of_zero_strength_is_identity() {
    let (mix, _) = generate_scene::<f64>(&SceneSpec { gaussian_count: 20, ..Default::default() }).unwrap();
    let spec = EditSpec { kind: EditKind::RecolorByWorldPosition(recolor()), seed: 0 };
    assert_eq!(ground_truth_edit(&mix, &spec, 0.0), mix);
    let edited = ground_truth_edit(&mix, &spec, 1.0);
    assert_ne!(edited, mix);
    for (a, b) in edited.primitives.iter().zip(&mix.primitives) {
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.opacity, b.opacity);
    }
}

/// Cameras translated along x, all looking down +z at the plane z = 3.
fn plane_rig(count: usize, size: usize) -> (Vec<Camera<f64>>, Vec<Image<f64>>) {
    let k = Intrinsics::new(40.0, 40.0, size as f64 / 2.0, size as f64 / 2.0, size, size).unwrap();
    let cams = (0..count)
        .map(|i| Camera::new(k, Matrix3::identity(), Vector3::new(-0.1 * i as f64, 0.0, 0.0)).unwrap())
        .collect();
    let depths = (0..count).map(|_| Image::filled(size, size, 1, 3.0)).collect();
    (cams, depths)
}

#[test]
fn identical_views_of_a_fronto_parallel_plane_are_consistent() {
    let size = 32;
    let (cams, depths) = plane_rig(4, size);
    // Rows vary, columns do not: horizontal camera shifts map rows to rows.
    let mut img = Image::zeros(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                img.set(x, y, c, (y as f64 * 0.3 + c as f64).sin() * 0.4 + 0.5);
            }
        }
    }
    let images = vec![img; 4];
    let err = reprojection_consistency(&images, &depths, &cams, 20.0, &ConsistencyOptions::default()).unwrap();
    assert!(err <= 1e-3, "{err}");

    let mut shifted = images.clone();
    shifted[1] = shifted[1].map(|v| v * 0.5);
    let worse = reprojection_consistency(&shifted, &depths, &cams, 20.0, &ConsistencyOptions::default()).unwrap();
    assert!(worse > 0.05);
}

#[test]
fn consistency_rejects_mismatched_inputs() {
    let (cams, depths) = plane_rig(3, 16);
    let images = vec![Image::zeros(16, 16, 3); 2];
    assert!(reprojection_consistency(&images, &depths, &cams, 20.0, &ConsistencyOptions::default()).is_err());
    let images = vec![Image::zeros(15, 16, 3); 3];
    assert!(reprojection_consistency(&images, &depths, &cams, 20.0, &ConsistencyOptions::default()).is_err());
    let empty = vec![Image::filled(16, 16, 1, 20.0); 3];
    let images = vec![Image::zeros(16, 16, 3); 3];
    assert_eq!(reprojection_consistency(&images, &empty, &cams, 20.0, &ConsistencyOptions::default()).unwrap(), 0.0);
}

#[test]
fn unedited_renders_are_consistent() {
    let spec = EditSpec { kind: EditKind::RecolorByWorldPosition(recolor()), seed: 0 };
    for (i, layout) in [Layout::OrbitSphere, Layout::BoxGrid, Layout::TwoCluster].into_iter().enumerate() {
        let (mix, cams) = generate_scene::<f64>(&small(layout, i as u64)).unwrap();
        let prep = prepare(mix, cams, &spec, &RenderConfig::default(), 1.0).unwrap();
        let images: Vec<Image<f64>> = prep.sequence.views.iter().map(|v| v.image.clone()).collect();
        let err = consistency_of(&images, &prep);
        assert!(err > 0.0 && err <= 0.01, "{err}");
    }
}

#[test]
fn independent_random_edits_are_less_consistent() {
    let (mix, cams) = generate_scene::<f64>(&small(Layout::OrbitSphere, 2)).unwrap();
    let spec = EditSpec { kind: EditKind::PerViewRandom(PerViewRandom { amplitude: 0.5, base: Some(recolor()) }), seed: 3 };
    let prep = prepare(mix, cams, &spec, &RenderConfig::default(), 1.0).unwrap();
    let editor = MockEditor::default();
    let joint = edit_sequence(&prep.sequence, &spec, &editor, &SequenceOptions::default()).unwrap();
    let alone = edit_independent(&prep.sequence.views, &spec, &editor, 1.0).unwrap();
    let (a, b) = (consistency_of(&joint.images, &prep), consistency_of(&alone, &prep));
    assert!(b >= 3.0 * a, "joint {a} independent {b}");
}

fn tiny_scene() -> SceneSpec {
    SceneSpec { gaussian_count: 40, camera_count: Some(4), image_size: 24, seed: 5, ..Default::default() }
}

#[test]
fn no_op_edit_round_trips_through_direct_fit() {
    let spec = EditSpec { kind: EditKind::StyleTint(StyleTint { tint: [1.0, 0.2, 0.2], amount: 0.0 }), seed: 0 };
    let cfg = FitConfig { iterations: 5, ..Default::default() };
    let results = run_experiment::<f64>(&tiny_scene(), &spec, &[Method::Direct], &cfg, &ExperimentOptions::default()).unwrap();
    assert_eq!(results.len(), 1);
    let r = &results[0];
    assert!(r.error.is_none());
    assert_eq!(r.psnr.len(), 4);
    assert!(r.psnr.iter().all(|&p| p >= 50.0), "{:?}", r.psnr);
    assert_eq!(r.duration_ms, None);
}

#[test]
fn every_method_writes_its_directory() {
    let dir = tempfile::tempdir().unwrap();
    let spec = EditSpec { kind: EditKind::RecolorByWorldPosition(recolor()), seed: 1 };
    let cfg = FitConfig { iterations: 3, ..Default::default() };
    let opts = ExperimentOptions { out_dir: Some(dir.path().to_path_buf()), ..Default::default() };
    let methods = [Method::Direct, Method::Independent, Method::Idu];
    let results = run_experiment::<f64>(&tiny_scene(), &spec, &methods, &cfg, &opts).unwrap();
    for (m, r) in methods.iter().zip(&results) {
        assert_eq!(r.method, *m);
        assert!(r.error.is_none());
        assert!(r.consistency_error.is_some_and(f64::is_finite));
        let mut names: Vec<String> =
            fs::read_dir(dir.path().join(m.name())).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        let mut expected: Vec<String> = (0..4).flat_map(|i| [format!("edited_{i:03}.png"), format!("final_{i:03}.png")]).collect();
        expected.push("summary.json".into());
        expected.sort();
        assert_eq!(names, expected);
        let summary: ExperimentResult =
            serde_json::from_str(&fs::read_to_string(dir.path().join(m.name()).join("summary.json")).unwrap()).unwrap();
        assert_eq!(&summary, r);
    }
}

#[test]
fn failing_method_is_recorded_and_others_run() {
    let dir = tempfile::tempdir().unwrap();
    let spec = EditSpec { kind: EditKind::RecolorByWorldPosition(recolor()), seed: 1 };
    // A mask of the wrong length fails every fit; the error is per method.
    let cfg = FitConfig { iterations: 2, mask: Some(crate::fitter::GaussianMask::all(3, true)), ..Default::default() };
    let opts = ExperimentOptions { out_dir: Some(dir.path().to_path_buf()), ..Default::default() };
    let results = run_experiment::<f64>(&tiny_scene(), &spec, &[Method::Direct, Method::Idu], &cfg, &opts).unwrap();
    assert_eq!(results.len(), 2);
    for r in &results {
        assert!(r.error.is_some());
        assert!(dir.path().join(r.method.name()).join("summary.json").exists());
    }
}
