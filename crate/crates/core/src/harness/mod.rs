//! Synthetic scenes, the cross-view consistency metric and end-to-end
//! method comparisons.

#[cfg(test)]
mod tests;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{GaussianMixture, GaussianPrimitive};
use crate::fitter::{fit_with_reference, idu_baseline_with_pool, render_views, FitConfig, FitError, PSNR_CAP};
use crate::geometry::{project, view_angle, Camera, GeometryError, Intrinsics};
use crate::image::{Image, ImageError};
use crate::mveditor::{
    edit_independent, edit_sequence, luminance, EditSpec, EditorError, MockEditor, MockEditorConfig, SequenceOptions,
    ViewSequence,
};
use crate::ply::{load_mixture, PlyError};
use crate::renderer::{splat_render, RenderConfig, RenderError};
use crate::scalar::Real;
use crate::sh::{dc_from_rgb, rgb_from_dc};

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scene spec: {0}")]
    Scene(String),
    #[error("unknown method `{0}` (expected direct, independent or idu)")]
    Method(String),
    #[error("{0}")]
    Input(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Editor(#[from] EditorError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Gaussians on a sphere of radius 0.8 around the origin.
    OrbitSphere,
    /// A regular grid filling the cube `[-0.7, 0.7]³`.
    BoxGrid,
    /// Two clusters centered at `(±0.6, 0, 0)`.
    TwoCluster,
    FromPly(PathBuf),
}

/// Primitive colors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    /// Smooth random color waves over position plus small per-primitive noise.
    Smooth,
    /// One gray for every primitive.
    Uniform,
}

pub const CLUSTER_CENTERS: [[f64; 3]; 2] = [[-0.6, 0.0, 0.0], [0.6, 0.0, 0.0]];
const SPHERE_RADIUS: f64 = 0.8;
const UNIFORM_GRAY: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub layout: Layout,
    pub gaussian_count: usize,
    /// Drawn from 20..=30 when absent.
    pub camera_count: Option<usize>,
    pub radius: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    pub image_size: usize,
    pub opacity: f64,
    pub texture: Texture,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            layout: Layout::OrbitSphere,
            gaussian_count: 300,
            camera_count: None,
            radius: 4.0,
            elevation_deg: 20.0,
            fov_deg: 40.0,
            image_size: 64,
            opacity: 8.0,
            texture: Texture::Smooth,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Scene(m));
        if self.gaussian_count == 0 && !matches!(self.layout, Layout::FromPly(_)) {
            return bad("gaussian_count must be at least 1".into());
        }
        if self.camera_count.is_some_and(|t| t < 2) {
            return bad("camera_count must be at least 2".into());
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return bad("radius must be positive".into());
        }
        if !(self.elevation_deg.abs() < 90.0) {
            return bad("elevation must lie in (-90, 90) degrees".into());
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad("fov must lie in (0, 180) degrees".into());
        }
        if self.image_size < 8 {
            return bad("image_size must be at least 8".into());
        }
        if !(self.opacity.is_finite() && self.opacity > 0.0) {
            return bad("opacity must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

fn positions(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (Vec<Vector3<f64>>, f64) {
    let n = spec.gaussian_count;
    match spec.layout {
        Layout::OrbitSphere => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            let pts = (0..n)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * i as f64;
                    Vector3::new(r * phi.cos(), r * phi.sin(), z) * SPHERE_RADIUS
                })
                .collect();
            let spacing = SPHERE_RADIUS * (4.0 * std::f64::consts::PI / n as f64).sqrt();
            (pts, (0.6 * spacing).min(0.3))
        }
        Layout::BoxGrid => {
            let k = (n as f64).cbrt().ceil().max(1.0) as usize;
            let step = if k > 1 { 1.4 / (k - 1) as f64 } else { 0.0 };
            let at = |i: usize| if k > 1 { -0.7 + step * i as f64 } else { 0.0 };
            let pts = (0..n).map(|i| Vector3::new(at(i % k), at((i / k) % k), at(i / (k * k)))).collect();
            (pts, if k > 1 { (0.35 * step).max(0.05) } else { 0.2 })
        }
        Layout::TwoCluster => {
            let pts = (0..n)
                .map(|i| {
                    let c = Vector3::from(CLUSTER_CENTERS[i % 2]);
                    if i < 2 {
                        c
                    } else {
                        c + Vector3::new(normal(rng), normal(rng), normal(rng)) * 0.15
                    }
                })
                .collect();
            (pts, 0.1)
        }
        Layout::FromPly(_) => unreachable!("handled by the caller"),
    }
}

fn colors(spec: &SceneSpec, pts: &[Vector3<f64>], rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    match spec.texture {
        Texture::Uniform => vec![Vector3::repeat(UNIFORM_GRAY); pts.len()],
        Texture::Smooth => {
            let waves: Vec<(Vector3<f64>, f64)> = (0..3)
                .map(|_| {
                    let d = Vector3::new(normal(rng), normal(rng), normal(rng)).normalize();
                    (d * 2.0, rng.gen_range(0.0..std::f64::consts::TAU))
                })
                .collect();
            pts.iter()
                .map(|p| {
                    Vector3::from_fn(|c, _| {
                        let (d, phase) = waves[c];
                        let v = 0.5 + 0.32 * (d.dot(p) + phase).sin() + rng.gen_range(-0.01..0.01);
                        v.clamp(0.05, 0.95)
                    })
                })
                .collect()
        }
    }
}

/// Cameras on a half orbit (azimuth 0 to 180 degrees) at the configured radius
/// and elevation, looking at the origin with `+z` up, in shuffled order.
pub fn orbit_cameras(spec: &SceneSpec, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Camera<f64>>, HarnessError> {
    let size = spec.image_size;
    let k = Intrinsics::from_fov(spec.fov_deg.to_radians(), size, size)?;
    let el = spec.elevation_deg.to_radians();
    let mut cams = (0..count)
        .map(|i| {
            let az = std::f64::consts::PI * i as f64 / (count - 1) as f64;
            let eye = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * spec.radius;
            Camera::look_at(k, eye, Vector3::zeros(), Vector3::z())
        })
        .collect::<Result<Vec<_>, _>>()?;
    cams.shuffle(rng);
    Ok(cams)
}

/// Deterministic scene and shuffled orbit cameras for `spec`.
pub fn generate_scene<T: Real>(spec: &SceneSpec) -> Result<(GaussianMixture<T>, Vec<Camera<T>>), HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = spec.camera_count.unwrap_or_else(|| rng.gen_range(20..=30));
    let mix = match &spec.layout {
        Layout::FromPly(path) => load_mixture::<f64>(path)?,
        _ => {
            let (pts, radius) = positions(spec, &mut rng);
            let cols = colors(spec, &pts, &mut rng);
            let prims = pts
                .into_iter()
                .zip(cols)
                .map(|(p, c)| GaussianPrimitive::isotropic(p, radius, spec.opacity, c))
                .collect();
            GaussianMixture::new(prims, 0).map_err(|e| HarnessError::Scene(e.to_string()))?
        }
    };
    if mix.is_empty() {
        return Err(HarnessError::Scene("scene has no primitives".into()));
    }
    let extent = mix
        .primitives
        .iter()
        .map(|p| p.mean.norm() + 3.0 * p.scale.max())
        .fold(0.0, f64::max);
    if spec.radius <= extent {
        return Err(HarnessError::Scene(format!("orbit radius {} does not clear the scene extent {extent:.3}", spec.radius)));
    }
    let cams = orbit_cameras(spec, count, &mut rng)?;
    Ok((mix.cast(), cams.iter().map(|c| c.cast()).collect()))
}

/// The mixture a perfectly consistent editor would produce: every primitive's
/// base color is recolored at its mean.
pub fn ground_truth_edit<T: Real>(mix: &GaussianMixture<T>, spec: &EditSpec, strength: f64) -> GaussianMixture<T> {
    let mut out = mix.clone();
    for p in out.primitives.iter_mut() {
        let m = [p.mean.x.as_f64(), p.mean.y.as_f64(), p.mean.z.as_f64()];
        let (chroma, amount) = spec.world_target(m);
        let a = T::lit(amount * strength);
        let c = rgb_from_dc(p.sh[0]);
        let l = luminance(&c);
        let target = Vector3::new(T::lit(chroma[0]), T::lit(chroma[1]), T::lit(chroma[2])) * l;
        p.sh[0] = dc_from_rgb(c + (target - c) * a);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyOptions {
    /// Other views each sample is compared against.
    pub neighbors: usize,
    /// Relative depth agreement required for a reprojected sample.
    pub depth_tolerance: f64,
    /// Every `stride`-th pixel in each direction is sampled.
    pub stride: usize,
}

impl Default for ConsistencyOptions {
    fn default() -> Self {
        Self { neighbors: 3, depth_tolerance: 0.02, stride: 1 }
    }
}

/// Mean absolute color difference between corresponding pixels of
/// `images`, transported through `depths` (renders of the unedited scene).
///
/// A pixel is sampled when its depth and its four neighbours' depths are
/// below `far` and agree within the depth tolerance. It is unprojected,
/// projected into the nearest other views by viewing angle, and compared
/// (bilinearly) where the other view's depth agrees with the reprojected
/// depth. Returns 0 when no pixel qualifies.
pub fn reprojection_consistency<T: Real>(
    images: &[Image<T>],
    depths: &[Image<T>],
    cameras: &[Camera<T>],
    far: f64,
    opts: &ConsistencyOptions,
) -> Result<f64, HarnessError> {
    if images.len() != cameras.len() || depths.len() != cameras.len() {
        return Err(HarnessError::Input(format!(
            "{} images and {} depth maps for {} cameras",
            images.len(),
            depths.len(),
            cameras.len()
        )));
    }
    for ((img, d), c) in images.iter().zip(depths).zip(cameras) {
        if img.width != c.width() || img.height != c.height() || d.width != c.width() || d.height != c.height() {
            return Err(HarnessError::Input("image or depth does not match its camera".into()));
        }
    }
    let tol = opts.depth_tolerance;
    let stride = opts.stride.max(1);
    let half = T::lit(0.5);
    let mut total = 0.0;
    let mut count = 0usize;
    for (v, cam) in cameras.iter().enumerate() {
        let mut others: Vec<(f64, usize)> =
            (0..cameras.len()).filter(|&w| w != v).map(|w| (view_angle(cam, &cameras[w]).as_f64(), w)).collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        others.truncate(opts.neighbors);
        let (img, depth) = (&images[v], &depths[v]);
        let (w, h) = (img.width, img.height);
        for y in (1..h.saturating_sub(1)).step_by(stride) {
            for x in (1..w.saturating_sub(1)).step_by(stride) {
                let d = depth.get(x, y, 0).as_f64();
                if d >= far || d <= 0.0 {
                    continue;
                }
                let steady = [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)].iter().all(|&(nx, ny)| {
                    let n = depth.get(nx, ny, 0).as_f64();
                    n < far && (n - d).abs() <= tol * d
                });
                if !steady {
                    continue;
                }
                let p = cam.unproject(T::of_usize(x) + half, T::of_usize(y) + half, T::lit(d));
                for &(_, o) in &others {
                    let other = &cameras[o];
                    let z = other.world_to_camera(&p).z.as_f64();
                    let Some(uv) = project(other, &p) else { continue };
                    if !corners_agree(&depths[o], uv.x.as_f64(), uv.y.as_f64(), z, tol) {
                        continue;
                    }
                    let mut diff = 0.0;
                    for c in 0..img.channels {
                        let s = images[o].sample_bilinear(uv.x, uv.y, c).expect("inside").as_f64();
                        diff += (img.get(x, y, c).as_f64() - s).abs();
                    }
                    total += diff / img.channels as f64;
                    count += 1;
                }
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Whether all four texels that bilinear sampling at `(u, v)` reads have a
/// depth within `tol · z` of `z`.
fn corners_agree<T: Real>(depth: &Image<T>, u: f64, v: f64, z: f64, tol: f64) -> bool {
    let (fx, fy) = ((u - 0.5).floor(), (v - 0.5).floor());
    if fx < 0.0 || fy < 0.0 {
        return false;
    }
    let (x0, y0) = (fx as usize, fy as usize);
    if x0 + 1 >= depth.width || y0 + 1 >= depth.height {
        return false;
    }
    [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)]
        .iter()
        .all(|&(x, y)| (depth.get(x, y, 0).as_f64() - z).abs() <= tol * z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Multi-view consistent editing followed by direct fitting.
    Direct,
    /// Per-view independent editing followed by direct fitting.
    Independent,
    /// Iterative dataset update.
    Idu,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Independent => "independent",
            Method::Idu => "idu",
        }
    }

    /// Parses a comma-separated method list.
    pub fn parse_list(text: &str) -> Result<Vec<Method>, HarnessError> {
        text.split(',').map(|s| s.trim().parse()).collect()
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(Method::Direct),
            "independent" => Ok(Method::Independent),
            "idu" => Ok(Method::Idu),
            other => Err(HarnessError::Method(other.into())),
        }
    }
}

/// One method's outcome, written as `summary.json` in its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub method: Method,
    /// Reprojection consistency of the images the method fitted to.
    pub consistency_error: Option<f64>,
    /// Final per-view PSNR against the consistent ground-truth edit.
    pub psnr: Vec<f64>,
    pub iterations_to_target: Option<usize>,
    pub duration_ms: Option<u64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
#[derive(Default)]
pub struct ExperimentOptions {
    pub editor: MockEditorConfig,
    pub sequence: SequenceOptions,
    pub consistency: ConsistencyOptions,
    /// Where per-method directories are written; nothing is written if
    /// `None`.
    pub out_dir: Option<PathBuf>,
}


/// A scene with everything the methods share: cameras, unedited views and
/// the ground-truth edited renders.
pub struct Prepared<T: Real> {
    pub mix: GaussianMixture<T>,
    pub cameras: Vec<Camera<T>>,
    pub sequence: ViewSequence<T>,
    pub depths: Vec<Image<T>>,
    pub reference: Vec<Image<T>>,
}

pub fn prepare<T: Real>(
    mix: GaussianMixture<T>,
    cameras: Vec<Camera<T>>,
    spec: &EditSpec,
    render: &RenderConfig,
    strength: f64,
) -> Result<Prepared<T>, HarnessError> {
    let views = render_views(&mix, &cameras, render, 0)?;
    let depths = views.iter().map(|v| v.depth.clone()).collect();
    let truth = ground_truth_edit(&mix, spec, strength);
    let reference = cameras.iter().map(|c| splat_render(&truth, c, render)).collect::<Result<_, _>>()?;
    Ok(Prepared { mix, cameras, sequence: ViewSequence::new(views)?, depths, reference })
}

struct MethodRun<T: Real> {
    result: ExperimentResult,
    edited: Vec<Image<T>>,
    fitted: GaussianMixture<T>,
}

fn run_method<T: Real>(
    method: Method,
    scene: &Prepared<T>,
    spec: &EditSpec,
    cfg: &FitConfig,
    opts: &ExperimentOptions,
) -> Result<MethodRun<T>, HarnessError> {
    let started = cfg.timing.then(Instant::now);
    let editor = MockEditor::new(opts.editor.clone());
    let reference = Some(&scene.reference[..]);
    let far = cfg.render.far;
    let (edited, fitted, report) = match method {
        Method::Direct | Method::Independent => {
            let edited = if method == Method::Direct {
                edit_sequence(&scene.sequence, spec, &editor, &opts.sequence)?.images
            } else {
                edit_independent(&scene.sequence.views, spec, &editor, opts.sequence.strength)?
            };
            let (fitted, report) = fit_with_reference(&scene.mix, &scene.cameras, &edited, reference, cfg)?;
            (edited, fitted, report)
        }
        Method::Idu => {
            let (fitted, report, pool) =
                idu_baseline_with_pool(&scene.mix, &editor, spec, &scene.cameras, cfg, opts.sequence.strength, reference)?;
            (pool, fitted, report)
        }
    };
    let consistency = reprojection_consistency(&edited, &scene.depths, &scene.cameras, far, &opts.consistency)?;
    let result = ExperimentResult {
        method,
        consistency_error: Some(consistency),
        psnr: report.psnr.iter().map(|p| p.min(PSNR_CAP)).collect(),
        iterations_to_target: report.iterations_to_target,
        duration_ms: started.map(|s| s.elapsed().as_millis() as u64),
        seed: opts.sequence.seed,
        error: None,
    };
    Ok(MethodRun { result, edited, fitted })
}

fn write_method<T: Real>(dir: &Path, run: &MethodRun<T>, scene: &Prepared<T>, render: &RenderConfig) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    for (i, img) in run.edited.iter().enumerate() {
        img.save_png(&dir.join(format!("edited_{i:03}.png")))?;
    }
    for (i, cam) in scene.cameras.iter().enumerate() {
        splat_render(&run.fitted, cam, render)?.save_png(&dir.join(format!("final_{i:03}.png")))?;
    }
    write_summary(&dir.join("summary.json"), &run.result)
}

fn write_summary(path: &Path, result: &ExperimentResult) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(result)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Runs every method on the same scene, seeds and ground truth. A failing
/// method is recorded with its error and the others still run.
pub fn run_experiment<T: Real>(
    scene: &SceneSpec,
    spec: &EditSpec,
    methods: &[Method],
    cfg: &FitConfig,
    opts: &ExperimentOptions,
) -> Result<Vec<ExperimentResult>, HarnessError> {
    spec.validate()?;
    cfg.validate()?;
    let (mix, cameras) = generate_scene::<T>(scene)?;
    run_on_scene(mix, cameras, spec, methods, cfg, opts)
}

/// [`run_experiment`] on a given mixture and cameras.
pub fn run_on_scene<T: Real>(
    mix: GaussianMixture<T>,
    cameras: Vec<Camera<T>>,
    spec: &EditSpec,
    methods: &[Method],
    cfg: &FitConfig,
    opts: &ExperimentOptions,
) -> Result<Vec<ExperimentResult>, HarnessError> {
    let prepared = prepare(mix, cameras, spec, &cfg.render, opts.sequence.strength)?;
    let mut results = Vec::with_capacity(methods.len());
    for &method in methods {
        let dir = opts.out_dir.as_ref().map(|d| d.join(method.name()));
        let result = match run_method(method, &prepared, spec, cfg, opts) {
            Ok(run) => {
                if let Some(dir) = &dir {
                    write_method(dir, &run, &prepared, &cfg.render)?;
                }
                run.result
            }
            Err(e) => {
                let failed = ExperimentResult {
                    method,
                    consistency_error: None,
                    psnr: Vec::new(),
                    iterations_to_target: None,
                    duration_ms: None,
                    seed: opts.sequence.seed,
                    error: Some(e.to_string()),
                };
                if let Some(dir) = &dir {
                    fs::create_dir_all(dir)?;
                    write_summary(&dir.join("summary.json"), &failed)?;
                }
                failed
            }
        };
        results.push(result);
    }
    Ok(results)
}
