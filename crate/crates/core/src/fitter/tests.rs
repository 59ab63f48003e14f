use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::field::GaussianPrimitive;
use crate::geometry::Intrinsics;
use crate::mveditor::{EditKind, FeatureGrid, IdentityEditor, StyleTint};
use crate::renderer::splat_render;
use crate::sh::dc_from_rgb;

fn ring(n: usize, size: usize) -> Vec<Camera<f64>> {
    let k = Intrinsics::new(size as f64, size as f64, size as f64 / 2.0, size as f64 / 2.0, size, size).unwrap();
    (0..n)
        .map(|i| {
            let a = std::f64::consts::PI * i as f64 / n as f64;
            let eye = Vector3::new(3.5 * a.cos(), 3.5 * a.sin(), 1.0);
            Camera::look_at(k, eye, Vector3::zeros(), Vector3::z()).unwrap()
        })
        .collect()
}

fn scene(seed: u64, count: usize, degree: usize) -> GaussianMixture<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = (0..count)
        .map(|_| {
            let mean = Vector3::new(rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7), rng.gen_range(-0.5..0.5));
            let rgb = Vector3::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
            let mut p = GaussianPrimitive::isotropic(mean, rng.gen_range(0.12..0.25), rng.gen_range(1.0..5.0), rgb);
            p.scale = Vector3::new(rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3));
            let q = nalgebra::Vector4::new(1.0, rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            p.rotation = q.normalize();
            p.sh.resize(crate::sh::coeff_count(degree), Vector3::zeros());
            for c in p.sh.iter_mut().skip(1) {
                *c = Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
            }
            p
        })
        .collect();
    GaussianMixture::new(prims, degree).unwrap()
}

fn renders(mix: &GaussianMixture<f64>, cams: &[Camera<f64>], cfg: &FitConfig) -> Vec<Image<f64>> {
    cams.iter().map(|c| splat_render(mix, c, &cfg.render).unwrap()).collect()
}

fn textured(seed: u64, size: usize) -> Image<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64)> =
        (0..6).map(|_| (rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4), rng.gen_range(0.0..6.0))).collect();
    let mut img = Image::zeros(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let v = waves.iter().enumerate().map(|(i, (a, b, p))| (a * x as f64 + b * y as f64 + p + c as f64 * i as f64).sin()).sum::<f64>();
                img.set(x, y, c, 0.5 + 0.08 * v);
            }
        }
    }
    img
}

#[test]
fn proxy_basic_properties() {
    let a = textured(1, 32);
    let b = textured(2, 32);
    assert_eq!(perceptual_proxy(&a, &a).unwrap(), 0.0);
    let ab = perceptual_proxy(&a, &b).unwrap();
    assert!(ab > 0.0 && (ab - perceptual_proxy(&b, &a).unwrap()).abs() < 1e-12);
    let zeros = Image::<f64>::zeros(16, 16, 3);
    let ones = Image::<f64>::filled(16, 16, 3, 1.0);
    assert!(perceptual_proxy(&zeros, &ones).unwrap() > 0.9);
    assert!(perceptual_proxy(&zeros, &Image::zeros(8, 16, 3)).is_err());
}

#[test]
fn proxy_tolerates_shift_more_than_noise_of_equal_energy() {
    let a = textured(3, 48);
    let mut shifted = a.clone();
    for y in 0..48 {
        for x in 0..48 {
            for c in 0..3 {
                shifted.set(x, y, c, a.get(x.saturating_sub(1), y, c));
            }
        }
    }
    let m = mse(&a, &shifted).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut noisy = a.clone();
    for v in noisy.data.iter_mut() {
        *v += if rng.gen_bool(0.5) { m.sqrt() } else { -m.sqrt() };
    }
    assert!((mse(&a, &noisy).unwrap() - m).abs() < 1e-12);
    assert!(perceptual_proxy(&a, &shifted).unwrap() < perceptual_proxy(&a, &noisy).unwrap());
}

#[test]
fn proxy_gradient_matches_finite_differences() {
    let a = textured(5, 24);
    let b = textured(6, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut weight = Image::zeros(24, 24, 1);
    for v in weight.data.iter_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    for w in [None, Some(&weight)] {
        let (_, g) = perceptual_proxy_grad(&a, &b, w).unwrap();
        for _ in 0..40 {
            let i = rng.gen_range(0..b.data.len());
            let h = 1e-6;
            let mut p = b.clone();
            p.data[i] += h;
            let mut m = b.clone();
            m.data[i] -= h;
            let fd = (perceptual_proxy_grad(&a, &p, w).unwrap().0 - perceptual_proxy_grad(&a, &m, w).unwrap().0) / (2.0 * h);
            assert!((fd - g.data[i]).abs() <= 1e-6 * fd.abs().max(1e-4), "{fd} vs {}", g.data[i]);
        }
    }
}

#[test]
fn proxy_gradient_vanishes_at_identity() {
    let a = textured(8, 20);
    let (l, g) = perceptual_proxy_grad(&a, &a, None).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.data.iter().all(|&v| v == 0.0));
}

#[test]
fn fitting_own_renders_is_a_fixed_point() {
    for seed in 0..3 {
        let mix = scene(seed, 12, 1);
        let cams = ring(4, 32);
        let cfg = FitConfig { iterations: 50, ..Default::default() };
        let targets = renders(&mix, &cams, &cfg);
        let (out, report) = fit(&mix, &cams, &targets, &cfg).unwrap();
        assert!(report.losses[0] < 1e-12);
        for (a, b) in out.primitives.iter().zip(&mix.primitives) {
            assert!((a.mean - b.mean).abs().max() <= 1e-6);
            assert!((a.opacity - b.opacity).abs() <= 1e-6);
            assert!((a.scale - b.scale).abs().max() <= 1e-6);
            assert!((a.rotation - b.rotation).abs().max() <= 1e-6);
            for (x, y) in a.sh.iter().zip(&b.sh) {
                assert!((x - y).abs().max() <= 1e-6);
            }
        }
    }
}

fn recolored(mix: &GaussianMixture<f64>, rgb: Vector3<f64>) -> GaussianMixture<f64> {
    let mut out = mix.clone();
    for p in out.primitives.iter_mut() {
        p.sh[0] = dc_from_rgb(rgb);
    }
    out
}

#[test]
fn single_gaussian_converges_to_red() {
    let mix = GaussianMixture::new(
        vec![GaussianPrimitive::isotropic(Vector3::zeros(), 0.4, 6.0, Vector3::new(0.4, 0.6, 0.5))],
        0,
    )
    .unwrap();
    let cams = ring(3, 32);
    let cfg = FitConfig {
        iterations: 300,
        target_psnr: 40.0,
        learning_rates: LearningRates { sh: 0.02, ..Default::default() },
        ..Default::default()
    };
    let targets = renders(&recolored(&mix, Vector3::new(0.9, 0.1, 0.1)), &cams, &cfg);
    let (out, report) = fit(&mix, &cams, &targets, &cfg).unwrap();
    let mean = report.psnr.iter().sum::<f64>() / report.psnr.len() as f64;
    assert!(mean >= 40.0, "psnr {mean}");
    assert!(report.iterations_to_target.unwrap() <= 300);
    let rgb = crate::sh::rgb_from_dc(out.primitives[0].sh[0]);
    assert!(rgb.x > 0.8 && rgb.y < 0.2 && rgb.z < 0.2, "{rgb}");
}

#[test]
fn optimizer_keeps_primitives_valid_and_is_deterministic() {
    for seed in 0..4 {
        let mix = scene(seed, 10, 2);
        let cams = ring(3, 24);
        let cfg = FitConfig {
            iterations: 25,
            learning_rates: LearningRates { mean: 0.05, opacity: 0.5, scale: 0.1, rotation: 0.1, sh: 0.05 },
            ..Default::default()
        };
        let targets = renders(&scene(seed + 100, 10, 2), &cams, &cfg);
        // each step validates the mixture and reports an invariant error
        let a = fit(&mix, &cams, &targets, &cfg).unwrap();
        let b = fit(&mix, &cams, &targets, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}

#[test]
fn loss_decreases_on_consistent_targets() {
    let mix = scene(11, 8, 0);
    let cams = ring(4, 32);
    let cfg = FitConfig {
        iterations: 300,
        learning_rates: LearningRates { sh: 0.01, ..Default::default() },
        ..Default::default()
    };
    let targets = renders(&recolored(&mix, Vector3::new(0.8, 0.3, 0.2)), &cams, &cfg);
    let (_, report) = fit(&mix, &cams, &targets, &cfg).unwrap();
    let median = |w: &[f64]| {
        let mut v = w.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let medians: Vec<f64> = report.losses.chunks(100).map(median).collect();
    assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
}

#[test]
fn fit_config_json_and_validation() {
    let cfg = FitConfig::from_json(r#"{"iterations": 10, "loss_weights": {"l1": 1.0, "perceptual": 0.0}}"#).unwrap();
    assert_eq!(cfg.iterations, 10);
    assert_eq!(cfg.learning_rates, LearningRates::default());
    let back: FitConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert!(FitConfig::from_json(r#"{"iterations": 0}"#).is_err());
    assert!(FitConfig::from_json(r#"{"loss_weights": {"l1": 0.0, "perceptual": 0.0}}"#).is_err());
    let report = FitReport { losses: vec![1.0], psnr: vec![30.0], psnr_trace: vec![20.0], iterations_to_target: None, duration_ms: None };
    let v: serde_json::Value = serde_json::to_value(&report).unwrap();
    assert!(v["duration_ms"].is_null() && v["iterations_to_target"].is_null());
}

#[test]
fn targets_must_match_cameras() {
    let mix = scene(0, 3, 0);
    let cams = ring(2, 16);
    let cfg = FitConfig { iterations: 1, ..Default::default() };
    assert!(matches!(fit(&mix, &cams, &[], &cfg), Err(FitError::Targets { .. })));
    let wrong = vec![Image::zeros(8, 8, 3), Image::zeros(8, 8, 3)];
    assert!(fit(&mix, &cams, &wrong, &cfg).is_err());
}

fn left_half_scene() -> GaussianMixture<f64> {
    let mut prims = Vec::new();
    for i in 0..4 {
        for j in 0..3 {
            let x = if i < 2 { -0.9 + 0.3 * i as f64 } else { 0.6 + 0.3 * (i - 2) as f64 };
            let mean = Vector3::new(x, -0.5 + 0.5 * j as f64, 0.0);
            prims.push(GaussianPrimitive::isotropic(mean, 0.08, 8.0, Vector3::new(0.3, 0.5, 0.7)));
        }
    }
    GaussianMixture::new(prims, 0).unwrap()
}

fn front_cams(n: usize, size: usize) -> Vec<Camera<f64>> {
    let k = Intrinsics::new(size as f64, size as f64, size as f64 / 2.0, size as f64 / 2.0, size, size).unwrap();
    (0..n)
        .map(|i| {
            let a = -0.3 + 0.6 * i as f64 / (n - 1) as f64;
            let eye = Vector3::new(3.0 * a.sin(), -0.5, 3.0 * a.cos());
            Camera::look_at(k, eye, Vector3::zeros(), Vector3::y()).unwrap()
        })
        .collect()
}

#[test]
fn unprojected_masks_select_expected_gaussians() {
    let mix = left_half_scene();
    let cams = front_cams(4, 48);
    let render = RenderConfig::default();
    let ones: Vec<Image<f64>> = cams.iter().map(|_| Image::filled(48, 48, 1, 1.0)).collect();
    let zeros: Vec<Image<f64>> = cams.iter().map(|_| Image::zeros(48, 48, 1)).collect();
    assert_eq!(unproject_masks(&mix, &cams, &ones, 0.5, 0.01, &render).unwrap().count(), mix.len());
    assert_eq!(unproject_masks(&mix, &cams, &zeros, 0.5, 0.01, &render).unwrap().count(), 0);
    let halves: Vec<Image<f64>> = cams
        .iter()
        .map(|c| {
            let mut m = Image::zeros(48, 48, 1);
            for p in mix.primitives.iter().filter(|p| p.mean.x < 0.0) {
                let uv = crate::geometry::project(c, &p.mean).unwrap();
                for y in 0..48 {
                    for x in 0..48 {
                        if (x as f64 + 0.5 - uv.x).abs() < 3.0 && (y as f64 + 0.5 - uv.y).abs() < 3.0 {
                            m.set(x, y, 0, 1.0);
                        }
                    }
                }
            }
            m
        })
        .collect();
    let mask = unproject_masks(&mix, &cams, &halves, 0.5, 0.01, &render).unwrap();
    for (p, s) in mix.primitives.iter().zip(&mask.selected) {
        assert_eq!(*s, p.mean.x < 0.0);
    }
    assert!(unproject_masks(&mix, &cams, &halves, 0.0, 0.01, &render).is_err());
}

#[test]
fn partial_fit_locality() {
    let mix = left_half_scene();
    let cams = front_cams(4, 48);
    let selected: Vec<bool> = mix.primitives.iter().map(|p| p.mean.x < 0.0).collect();
    let mut edited = mix.clone();
    for (p, &s) in edited.primitives.iter_mut().zip(&selected) {
        if s {
            p.sh[0] = dc_from_rgb(Vector3::new(0.9, 0.2, 0.2));
        }
    }
    let base = FitConfig { iterations: 150, learning_rates: LearningRates { sh: 0.02, ..Default::default() }, ..Default::default() };
    let targets = renders(&edited, &cams, &base);
    let none = FitConfig { mask: Some(GaussianMask::all(mix.len(), false)), ..base.clone() };
    assert_eq!(partial_fit(&mix, &cams, &targets, &none).unwrap().0, mix);
    let all = FitConfig { mask: Some(GaussianMask::all(mix.len(), true)), iterations: 20, ..base.clone() };
    let plain = FitConfig { iterations: 20, ..base.clone() };
    assert_eq!(partial_fit(&mix, &cams, &targets, &all).unwrap(), fit(&mix, &cams, &targets, &plain).unwrap());

    let cfg = FitConfig { mask: Some(GaussianMask { selected: selected.clone() }), ..base };
    let (out, _) = partial_fit(&mix, &cams, &targets, &cfg).unwrap();
    for ((a, b), &s) in out.primitives.iter().zip(&mix.primitives).zip(&selected) {
        if !s {
            assert_eq!(a, b);
        }
    }
    let weights = mask_weights(&mix, &cams, cfg.mask.as_ref().unwrap(), &cfg.render).unwrap();
    for ((cam, w), t) in cams.iter().zip(&weights).zip(&targets) {
        let before = splat_render(&mix, cam, &cfg.render).unwrap();
        let after = splat_render(&out, cam, &cfg.render).unwrap();
        let (mut err, mut n, mut err_in, mut n_in) = (0.0, 0, 0.0, 0);
        for i in 0..w.data.len() {
            for c in 0..3 {
                let k = i * 3 + c;
                if w.data[i] <= 0.01 {
                    err += (after.data[k] - before.data[k]).powi(2);
                    n += 1;
                } else if w.data[i] >= 0.5 {
                    err_in += (after.data[k] - t.data[k]).powi(2);
                    n_in += 1;
                }
            }
        }
        assert!(psnr_from_mse(err / n as f64) >= 45.0);
        assert!(psnr_from_mse(err_in / n_in as f64) >= 30.0, "{}", psnr_from_mse(err_in / n_in as f64));
    }
}

#[test]
fn refine_with_no_rounds_equals_single_fit() {
    let mix = scene(3, 8, 0);
    let cams = ring(6, 32);
    let spec = EditSpec { kind: EditKind::StyleTint(StyleTint { tint: [1.0, 0.6, 0.3], amount: 0.8 }), seed: 0 };
    let editor = crate::mveditor::MockEditor::default();
    let cfg = FitConfig { iterations: 20, ..Default::default() };
    let opts = SequenceOptions::default();
    let refined = refine_loop(&mix, &editor, &spec, &cams, &cfg, &opts, None).unwrap();
    let views = render_views(&mix, &cams, &cfg.render, 0).unwrap();
    let targets = edit_sequence(&ViewSequence::new(views).unwrap(), &spec, &editor, &opts).unwrap().images;
    assert_eq!(refined, fit(&mix, &cams, &targets, &cfg).unwrap());

    let more = FitConfig { refinement: Refinement { every: 10, rounds: 2 }, ..cfg };
    let (_, report) = refine_loop(&mix, &editor, &spec, &cams, &more, &opts, None).unwrap();
    assert_eq!(report.losses.len(), 40);
}

struct Counting<E> {
    inner: E,
    decodes: AtomicUsize,
}

impl<E: Editor<f64>> Editor<f64> for Counting<E> {
    fn extract(&self, view: &EditView<f64>) -> Result<FeatureGrid<f64>, EditorError> {
        self.inner.extract(view)
    }
    fn transform(
        &self,
        grids: &mut [FeatureGrid<f64>],
        views: &[EditView<f64>],
        spec: &EditSpec,
        strength: f64,
    ) -> Result<(), EditorError> {
        self.inner.transform(grids, views, spec, strength)
    }
    fn decode(&self, grid: &FeatureGrid<f64>, view: &EditView<f64>) -> Result<Image<f64>, EditorError> {
        self.decodes.fetch_add(1, Ordering::SeqCst);
        self.inner.decode(grid, view)
    }
    fn match_channels(&self) -> std::ops::Range<usize> {
        <E as Editor<f64>>::match_channels(&self.inner)
    }
}

#[test]
fn idu_with_identity_editor_keeps_scene() {
    let mix = scene(5, 8, 1);
    let cams = ring(3, 24);
    let cfg = FitConfig { iterations: 31, ..Default::default() };
    let spec = EditSpec { kind: EditKind::StyleTint(StyleTint { tint: [1.0, 1.0, 1.0], amount: 1.0 }), seed: 0 };
    let editor = Counting { inner: IdentityEditor::default(), decodes: AtomicUsize::new(0) };
    let (out, report) = idu_baseline(&mix, &editor, &spec, &cams, &cfg, 1.0, None).unwrap();
    assert_eq!(out, mix);
    assert_eq!(editor.decodes.load(Ordering::SeqCst), 4);
    assert!(report.losses.iter().all(|&l| l == 0.0));
}

#[test]
fn divergence_is_reported_with_iteration() {
    let mix = scene(6, 6, 0);
    let cams = ring(2, 16);
    let mut targets = renders(&mix, &cams, &FitConfig::default());
    targets[0].data[0] = f64::NAN;
    let cfg = FitConfig { iterations: 5, ..Default::default() };
    assert!(matches!(fit(&mix, &cams, &targets, &cfg), Err(FitError::Diverged { iteration: 0, .. })));
}

#[test]
fn rebase_moves_the_divergence_baseline() {
    let mix = scene(7, 10, 0);
    let cams = ring(3, 20);
    let cfg = FitConfig::default();
    let exact = renders(&mix, &cams, &cfg);
    let shifted: Vec<Image<f64>> = exact.iter().map(|t| t.map(|v| (v + 0.3).min(1.0))).collect();
    let mut opt = Optimizer::new(&mix, &cfg).unwrap();
    opt.step(&cams, &exact, None, None).unwrap();
    assert!(matches!(opt.step(&cams, &shifted, None, None), Err(FitError::Diverged { iteration: 1, .. })));
    let mut opt = Optimizer::new(&mix, &cfg).unwrap();
    opt.step(&cams, &exact, None, None).unwrap();
    opt.rebase();
    opt.step(&cams, &shifted, None, None).unwrap();
}
