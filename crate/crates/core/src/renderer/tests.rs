use super::*;
use crate::field::GaussianPrimitive;
use crate::geometry::Intrinsics;
use nalgebra::Vector4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn camera(size: usize) -> Camera<f64> {
    let k = Intrinsics::new(size as f64, size as f64, size as f64 / 2.0, size as f64 / 2.0, size, size).unwrap();
    Camera::new(k, Matrix3::identity(), Vector3::zeros()).unwrap()
}

fn on_axis(z: f64, radius: f64, opacity: f64, rgb: [f64; 3]) -> GaussianPrimitive<f64> {
    GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, z), radius, opacity, Vector3::from(rgb))
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize, degree: usize) -> GaussianMixture<f64> {
    let prims = (0..n)
        .map(|_| {
            let q = Vector4::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            GaussianPrimitive {
                opacity: rng.gen_range(0.5..4.0),
                mean: Vector3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(2.5..3.5)),
                scale: Vector3::new(rng.gen_range(0.05..0.2), rng.gen_range(0.05..0.2), rng.gen_range(0.05..0.2)),
                rotation: q.normalize(),
                sh: (0..crate::sh::coeff_count(degree))
                    .map(|_| Vector3::new(rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)))
                    .collect(),
            }
        })
        .collect();
    GaussianMixture::new(prims, degree).unwrap()
}

#[test]
fn zero_opacity_gives_background() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mix = random_scene(&mut rng, 5, 0);
    for p in &mut mix.primitives {
        p.opacity = 0.0;
    }
    let cfg = RenderConfig { background: [0.2, 0.4, 0.6], steps: 64, ..Default::default() };
    let cam = camera(16);
    for img in [splat_render(&mix, &cam, &cfg).unwrap(), raymarch_render(&mix, &cam, &cfg).unwrap()] {
        for px in img.data.chunks(3) {
            assert_eq!(px, &[0.2, 0.4, 0.6]);
        }
    }
}

#[test]
fn nearer_gaussian_dominates_and_swaps() {
    let cam = camera(32);
    let cfg = RenderConfig::default();
    let red = on_axis(2.0, 0.2, 50.0, [1.0, 0.0, 0.0]);
    let blue = on_axis(3.0, 0.2, 50.0, [0.0, 0.0, 1.0]);
    let a = splat_render(&GaussianMixture::new(vec![red.clone(), blue.clone()], 0).unwrap(), &cam, &cfg).unwrap();
    assert!(a.get(16, 16, 0) > 0.9 && a.get(16, 16, 2) < 0.05);
    let mut red2 = red;
    let mut blue2 = blue;
    red2.mean.z = 3.0;
    blue2.mean.z = 2.0;
    let b = splat_render(&GaussianMixture::new(vec![red2, blue2], 0).unwrap(), &cam, &cfg).unwrap();
    assert!(b.get(16, 16, 2) > 0.9 && b.get(16, 16, 0) < 0.05);
}

#[test]
fn compositing_weights_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mix = random_scene(&mut rng, 24, 0);
    let cam = camera(24);
    let prep = Prepared::new(&mix, &cam, &RenderConfig::default()).unwrap();
    for y in 0..24 {
        for x in 0..24 {
            let (w, residual) = prep.weights(x, y);
            let total = w.iter().fold(residual, |acc, (_, v)| acc + v);
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn opaque_limit_and_off_support() {
    let cam = camera(32);
    let cfg = RenderConfig { near: 1.0, far: 3.0, steps: 2048, ..Default::default() };
    let mut last = 0.0;
    for opacity in [1.0, 10.0, 100.0] {
        let mix = GaussianMixture::new(vec![on_axis(2.0, 0.1, opacity, [0.8, 0.3, 0.1])], 0).unwrap();
        let img = raymarch_render(&mix, &cam, &cfg).unwrap();
        let c = img.get(16, 16, 0);
        assert!(c > last);
        last = c;
        assert_eq!(img.get(0, 0, 0), 0.0);
    }
    assert!((last - 0.8).abs() < 1e-3);
}

#[test]
fn raymarch_converges_with_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mix = random_scene(&mut rng, 8, 1);
    let cam = camera(16);
    let base = RenderConfig { near: 1.0, far: 5.0, steps: 4096, ..Default::default() };
    let a = raymarch_render(&mix, &cam, &base).unwrap();
    let b = raymarch_render(&mix, &cam, &RenderConfig { steps: 8192, ..base }).unwrap();
    let worst = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-3, "{worst}");
}

#[test]
fn single_gaussian_splat_matches_raymarch() {
    let cam = camera(64);
    let cfg = RenderConfig { near: 1.0, far: 5.0, steps: 4096, cutoff: 4.0, ..Default::default() };
    let prim = GaussianPrimitive {
        opacity: 3.0,
        mean: Vector3::new(0.1, -0.05, 3.0),
        scale: Vector3::new(0.1, 0.05, 0.075),
        rotation: Vector4::new(0.9, 0.2, -0.3, 0.1).normalize(),
        sh: vec![crate::sh::dc_from_rgb(Vector3::new(0.9, 0.5, 0.2))],
    };
    let mix = GaussianMixture::new(vec![prim], 0).unwrap();
    let s = splat_render(&mix, &cam, &cfg).unwrap();
    let r = raymarch_render(&mix, &cam, &cfg).unwrap();
    let worst = s.data.iter().zip(&r.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 2e-2, "{worst}");
}

#[test]
fn depth_of_single_gaussian() {
    let cam = camera(32);
    let cfg = RenderConfig::default();
    let mix = GaussianMixture::new(vec![on_axis(2.0, 0.1, 50.0, [1.0; 3])], 0).unwrap();
    let depth = render_depth(&mix, &cam, &cfg).unwrap();
    assert!((depth.get(16, 16, 0) - 2.0).abs() <= 0.05 * 0.1);
    assert_eq!(depth.get(0, 0, 0), cfg.far);
    let mut empty = mix.clone();
    empty.primitives[0].opacity = 0.0;
    let d = render_depth(&empty, &cam, &cfg).unwrap();
    assert!(d.data.iter().all(|&v| v == cfg.far));
}

#[test]
fn depth_of_nearer_layer() {
    let cam = camera(32);
    let cfg = RenderConfig::default();
    let front = on_axis(2.0, 0.3, 80.0, [1.0; 3]);
    let back = on_axis(4.0, 0.6, 80.0, [1.0; 3]);
    let d = render_depth(&GaussianMixture::new(vec![back, front], 0).unwrap(), &cam, &cfg).unwrap();
    assert!((d.get(16, 16, 0) - 2.0).abs() < 0.01);
}

#[test]
fn mask_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mix = random_scene(&mut rng, 10, 0);
    let cam = camera(20);
    let prep = Prepared::new(&mix, &cam, &RenderConfig::default()).unwrap();
    let all = prep.render_mask(&[true; 10]).unwrap();
    let none = prep.render_mask(&[false; 10]).unwrap();
    for y in 0..20 {
        for x in 0..20 {
            let (_, residual) = prep.weights(x, y);
            assert!((all.get(x, y, 0) + residual - 1.0).abs() < 1e-12);
            assert_eq!(none.get(x, y, 0), 0.0);
        }
    }
    assert!(prep.render_mask(&[true; 3]).is_err());
}

#[test]
fn zero_adjoint_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mix = random_scene(&mut rng, 6, 2);
    let cam = camera(16);
    let g = render_with_gradients(&mix, &cam, &RenderConfig::default(), &Image::zeros(16, 16, 3)).unwrap();
    assert!(g.is_zero());
    assert!(render_with_gradients(&mix, &cam, &RenderConfig::default(), &Image::zeros(15, 16, 3)).is_err());
}

#[test]
fn red_dc_increases_center_red() {
    let cam = camera(17);
    let mix = GaussianMixture::new(vec![on_axis(2.0, 0.2, 1.0, [0.5, 0.5, 0.5])], 0).unwrap();
    let mut adj = Image::zeros(17, 17, 3);
    adj.set(8, 8, 0, 1.0);
    let g = render_with_gradients(&mix, &cam, &RenderConfig::default(), &adj).unwrap();
    assert!(g.sh[0][0].x > 0.0);
    assert_eq!(g.sh[0][0].y, 0.0);
}

/// Central-difference check of every parameter class on a random scene.
fn check_gradients(seed: u64, degree: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix = random_scene(&mut rng, 4, degree);
    let cam = camera(12);
    let cfg = RenderConfig { cutoff: 30.0, ..Default::default() };
    let adj = Image::from_data(12, 12, 3, (0..12 * 12 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let g = render_with_gradients(&mix, &cam, &cfg, &adj).unwrap();
    let loss = |m: &GaussianMixture<f64>| -> f64 {
        let img = splat_render(m, &cam, &cfg).unwrap();
        img.data.iter().zip(&adj.data).map(|(a, b)| a * b).sum()
    };
    let check = |analytic: f64, perturb: &dyn Fn(&mut GaussianMixture<f64>, f64), base: f64| {
        let h = 1e-4 * base.abs().max(1e-2);
        let mut p = mix.clone();
        perturb(&mut p, h);
        let mut m = mix.clone();
        perturb(&mut m, -h);
        let fd = (loss(&p) - loss(&m)) / (2.0 * h);
        let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
        assert!(err <= 1e-3, "seed {seed}: analytic {analytic} fd {fd}");
    };
    for i in 0..mix.len() {
        let p = &mix.primitives[i];
        check(g.opacity[i], &|m, h| m.primitives[i].opacity += h, p.opacity);
        for a in 0..3 {
            check(g.mean[i][a], &|m, h| m.primitives[i].mean[a] += h, p.mean[a]);
            check(g.scale[i][a], &|m, h| m.primitives[i].scale[a] += h, p.scale[a]);
        }
        for a in 0..4 {
            check(
                g.rotation[i][a],
                &|m, h| {
                    let q = &mut m.primitives[i].rotation;
                    q[a] += h;
                    *q = q.normalize();
                },
                1.0,
            );
        }
        for c in 0..p.sh.len() {
            for a in 0..3 {
                check(g.sh[i][c][a], &|m, h| m.primitives[i].sh[c][a] += h, 1.0);
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..3 {
        check_gradients(100 + seed, seed as usize % 3);
    }
}

