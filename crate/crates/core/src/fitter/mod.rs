//! Direct fitting of a Gaussian mixture to edited views.
//!
//! The objective per view is `w₁·L1 + w₂·P`, where `P` is the multi-scale
//! structural dissimilarity of [`perceptual_proxy`]; it is averaged over
//! views. Every iteration renders all views, so the reported PSNR at
//! iteration `i` is that of the parameters before step `i`. Per-view
//! gradients are computed in parallel and summed in view order.

mod ssim;
#[cfg(test)]
mod tests;

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldError, GaussianMixture};
use crate::geometry::Camera;
use crate::image::{mse, psnr_from_mse, Image, ImageError};
use crate::mveditor::{edit_sequence, edit_single, EditSpec, EditView, Editor, EditorError, SequenceOptions, ViewSequence};
use crate::ply::{save_mixture, PlyError};
use crate::renderer::{Gradients, Prepared, RenderConfig, RenderError};
use crate::scalar::Real;

pub use ssim::{perceptual_proxy, perceptual_proxy_grad};

/// Reported PSNR values are capped here so identical images stay finite.
pub const PSNR_CAP: f64 = 100.0;
/// The iterative dataset update re-edits one pool view this often.
pub const IDU_PERIOD: usize = 10;
/// Edit strength of refinement rounds after the first.
pub const REFINE_STRENGTH: f64 = 0.3;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid fit config: {0}")]
    Config(String),
    #[error("{targets} targets for {cameras} cameras")]
    Targets { targets: usize, cameras: usize },
    /// Loss became non-finite or exceeded ten times its value at the start
    /// (or at the last target change).
    #[error("diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },
    /// An optimizer step produced an invalid primitive.
    #[error("iteration {iteration}: {source}")]
    Invariant {
        iteration: usize,
        #[source]
        source: FieldError,
    },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Editor(#[from] EditorError),
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Multiplied by the scene radius.
    pub mean: f64,
    pub opacity: f64,
    /// Applied to log-scales.
    pub scale: f64,
    pub rotation: f64,
    pub sh: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { mean: 1.6e-4, opacity: 0.05, scale: 5e-3, rotation: 1e-3, sh: 2.5e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 1.0, perceptual: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Refinement {
    /// Iterations fitted after each re-edit.
    pub every: usize,
    pub rounds: usize,
}

impl Default for Refinement {
    fn default() -> Self {
        Self { every: 500, rounds: 0 }
    }
}

/// Per-primitive selection for partial editing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GaussianMask {
    pub selected: Vec<bool>,
}

impl GaussianMask {
    pub fn all(n: usize, value: bool) -> Self {
        Self { selected: vec![value; n] }
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoints {
    pub every: usize,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rates: LearningRates,
    pub loss_weights: LossWeights,
    pub refinement: Refinement,
    pub mask: Option<GaussianMask>,
    /// Mean PSNR at which `iterations_to_target` is recorded.
    pub target_psnr: f64,
    pub render: RenderConfig,
    pub checkpoints: Option<Checkpoints>,
    /// Record wall-clock time in the report.
    pub timing: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            learning_rates: LearningRates::default(),
            loss_weights: LossWeights::default(),
            refinement: Refinement::default(),
            mask: None,
            target_psnr: 30.0,
            render: RenderConfig::default(),
            checkpoints: None,
            timing: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::Config(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        let w = &self.loss_weights;
        if !(w.l1 >= 0.0 && w.perceptual >= 0.0 && w.l1.is_finite() && w.perceptual.is_finite()) {
            return bad("loss weights must be finite and non-negative");
        }
        if w.l1 == 0.0 && w.perceptual == 0.0 {
            return bad("loss weights must not both be zero");
        }
        let lr = &self.learning_rates;
        if [lr.mean, lr.opacity, lr.scale, lr.rotation, lr.sh].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("learning rates must be finite and non-negative");
        }
        if self.refinement.rounds > 0 && self.refinement.every == 0 {
            return bad("refinement.every must be at least 1");
        }
        if self.checkpoints.as_ref().is_some_and(|c| c.every == 0) {
            return bad("checkpoints.every must be at least 1");
        }
        self.render.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, FitError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| FitError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Loss before each optimizer step.
    pub losses: Vec<f64>,
    /// Final per-view PSNR against the reference images.
    pub psnr: Vec<f64>,
    /// Mean PSNR before each optimizer step.
    pub psnr_trace: Vec<f64>,
    /// Steps taken before the mean PSNR first reached the target.
    pub iterations_to_target: Option<usize>,
    pub duration_ms: Option<u64>,
}

/// Mean absolute difference and its gradient with respect to `render`.
fn l1_grad<T: Real>(target: &Image<T>, render: &Image<T>, weight: Option<&Image<T>>) -> (T, Image<T>) {
    let n = T::of_usize(render.data.len());
    let c = render.channels;
    let mut g = Image::zeros(render.width, render.height, c);
    let mut total = T::zero();
    for (i, (&r, &t)) in render.data.iter().zip(&target.data).enumerate() {
        let w = weight.map_or(T::one(), |m| m.data[i / c]);
        let d = r - t;
        total += w * d.abs();
        g.data[i] = if d > T::zero() {
            w / n
        } else if d < T::zero() {
            -w / n
        } else {
            T::zero()
        };
    }
    (total / n, g)
}

/// Objective of one view and its gradient with respect to the render.
pub fn view_loss<T: Real>(
    target: &Image<T>,
    render: &Image<T>,
    weight: Option<&Image<T>>,
    weights: &LossWeights,
) -> Result<(T, Image<T>), ImageError> {
    target.check_shape(render)?;
    let (w1, w2) = (T::lit(weights.l1), T::lit(weights.perceptual));
    let (l1, mut g) = l1_grad(target, render, weight);
    let mut loss = w1 * l1;
    for v in g.data.iter_mut() {
        *v *= w1;
    }
    if weights.perceptual > 0.0 {
        let (p, gp) = perceptual_proxy_grad(target, render, weight)?;
        loss += w2 * p;
        for (a, &b) in g.data.iter_mut().zip(&gp.data) {
            *a += w2 * b;
        }
    }
    Ok((loss, g))
}

fn capped_psnr<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<f64, ImageError> {
    Ok(psnr_from_mse(mse(a, b)?).min(PSNR_CAP))
}

#[derive(Clone)]
struct Moments<T: Real> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam state over a flattened parameter vector per primitive.
struct Adam<T: Real> {
    slots: Vec<Moments<T>>,
    steps: Vec<i32>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;
const SCALE_FLOOR: f64 = 1e-6;

fn flatten_grad<T: Real>(g: &Gradients<T>, i: usize, out: &mut Vec<T>) {
    out.clear();
    out.extend(g.mean[i].iter());
    out.push(g.opacity[i]);
    out.extend(g.scale[i].iter());
    out.extend(g.rotation[i].iter());
    for c in &g.sh[i] {
        out.extend(c.iter());
    }
}

/// Owns the mixture and optimizer state across target changes.
pub struct Optimizer<'a, T: Real> {
    pub mix: GaussianMixture<T>,
    cfg: &'a FitConfig,
    adam: Adam<T>,
    selected: Option<Vec<bool>>,
    radius: T,
    initial_loss: Option<f64>,
    iteration: usize,
    pub report: FitReport,
}

impl<'a, T: Real> Optimizer<'a, T> {
    pub fn new(mix: &GaussianMixture<T>, cfg: &'a FitConfig) -> Result<Self, FitError> {
        cfg.validate()?;
        mix.validate()?;
        let selected = match &cfg.mask {
            Some(m) if m.selected.len() != mix.len() => {
                return Err(FitError::Config(format!("mask has {} entries for {} primitives", m.selected.len(), mix.len())))
            }
            Some(m) => Some(m.selected.clone()),
            None => None,
        };
        let slots = mix
            .primitives
            .iter()
            .map(|p| {
                let n = 3 + 1 + 3 + 4 + 3 * p.sh.len();
                Moments { m: vec![T::zero(); n], v: vec![T::zero(); n] }
            })
            .collect();
        let radius = mix.bounds().1.max(T::one());
        Ok(Self {
            mix: mix.clone(),
            cfg,
            adam: Adam { slots, steps: vec![0; mix.len()] },
            selected,
            radius,
            initial_loss: None,
            iteration: 0,
            report: FitReport::default(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Loss, gradient and per-view renders of the current mixture.
    fn evaluate(
        &self,
        cameras: &[Camera<T>],
        targets: &[Image<T>],
        weights: Option<&[Image<T>]>,
    ) -> Result<(f64, Gradients<T>, Vec<Image<T>>), FitError> {
        let per_view: Vec<Result<(T, Gradients<T>, Image<T>), FitError>> = cameras
            .par_iter()
            .enumerate()
            .map(|(v, cam)| {
                let prep = Prepared::new(&self.mix, cam, &self.cfg.render)?;
                let render = prep.render();
                let (loss, adjoint) = view_loss(&targets[v], &render, weights.map(|w| &w[v]), &self.cfg.loss_weights)?;
                Ok((loss, prep.backward(&adjoint)?, render))
            })
            .collect();
        let inv = T::one() / T::of_usize(cameras.len());
        let mut total = T::zero();
        let mut grads = Gradients::zeros(&self.mix);
        let mut renders = Vec::with_capacity(cameras.len());
        for r in per_view {
            let (l, g, img) = r?;
            total += l;
            grads.add_assign(&g);
            renders.push(img);
        }
        grads.scale_by(inv);
        Ok(((total * inv).as_f64(), grads, renders))
    }

    /// One optimizer step towards `targets`. PSNR is measured against
    /// `reference` (default: the targets).
    pub fn step(
        &mut self,
        cameras: &[Camera<T>],
        targets: &[Image<T>],
        weights: Option<&[Image<T>]>,
        reference: Option<&[Image<T>]>,
    ) -> Result<(), FitError> {
        check_targets(cameras, targets)?;
        if let Some(r) = reference {
            check_targets(cameras, r)?;
        }
        let (loss, grads, renders) = self.evaluate(cameras, targets, weights)?;
        let reference = reference.unwrap_or(targets);
        let mut mean_psnr = 0.0;
        for (r, t) in renders.iter().zip(reference) {
            mean_psnr += capped_psnr(t, r)?;
        }
        mean_psnr /= renders.len() as f64;
        let initial = *self.initial_loss.get_or_insert(loss);
        self.report.losses.push(loss);
        self.report.psnr_trace.push(mean_psnr);
        if self.report.iterations_to_target.is_none() && mean_psnr >= self.cfg.target_psnr {
            self.report.iterations_to_target = Some(self.iteration);
        }
        if !loss.is_finite() || loss > 10.0 * initial.max(1e-12) {
            return Err(FitError::Diverged { iteration: self.iteration, loss });
        }
        self.apply(&grads);
        self.mix.validate().map_err(|source| FitError::Invariant { iteration: self.iteration, source })?;
        self.iteration += 1;
        if let Some(cp) = &self.cfg.checkpoints {
            if self.iteration.is_multiple_of(cp.every) {
                std::fs::create_dir_all(&cp.dir).map_err(|e| FitError::Config(e.to_string()))?;
                save_mixture(&cp.dir.join(format!("iter_{:06}.ply", self.iteration)), &self.mix)?;
            }
        }
        Ok(())
    }

    fn apply(&mut self, grads: &Gradients<T>) {
        let lr = &self.cfg.learning_rates;
        let (b1, b2, eps) = (T::lit(BETA1), T::lit(BETA2), T::lit(ADAM_EPS));
        let one = T::one();
        let mut flat = Vec::new();
        for i in 0..self.mix.len() {
            if self.selected.as_ref().is_some_and(|s| !s[i]) {
                continue;
            }
            let prim = &mut self.mix.primitives[i];
            flatten_grad(grads, i, &mut flat);
            // log-scale gradient
            for k in 0..3 {
                flat[4 + k] *= prim.scale[k];
            }
            self.adam.steps[i] += 1;
            let t = self.adam.steps[i];
            let (c1, c2) = (one - b1.powi(t), one - b2.powi(t));
            let slot = &mut self.adam.slots[i];
            let mut dir = vec![T::zero(); flat.len()];
            for (k, &g) in flat.iter().enumerate() {
                slot.m[k] = b1 * slot.m[k] + (one - b1) * g;
                slot.v[k] = b2 * slot.v[k] + (one - b2) * g * g;
                let mh = slot.m[k] / c1;
                let vh = slot.v[k] / c2;
                dir[k] = mh / (vh.sqrt() + eps);
            }
            let lr_mean = T::lit(lr.mean) * self.radius;
            prim.mean -= Vector3::new(dir[0], dir[1], dir[2]) * lr_mean;
            prim.opacity = (prim.opacity - T::lit(lr.opacity) * dir[3]).max(T::zero());
            for k in 0..3 {
                if dir[4 + k] != T::zero() {
                    let s = prim.scale[k] * (-T::lit(lr.scale) * dir[4 + k]).exp();
                    prim.scale[k] = s.max(T::lit(SCALE_FLOOR));
                }
            }
            let dq = Vector4::new(dir[7], dir[8], dir[9], dir[10]);
            if dq != Vector4::zeros() {
                let q = prim.rotation - dq * T::lit(lr.rotation);
                let n = q.norm();
                if n > T::zero() && n.is_finite() {
                    prim.rotation = q / n;
                }
            }
            let lr_sh = T::lit(lr.sh);
            for (j, c) in prim.sh.iter_mut().enumerate() {
                let o = 11 + 3 * j;
                *c -= Vector3::new(dir[o], dir[o + 1], dir[o + 2]) * lr_sh;
            }
        }
    }

    /// Measures divergence against the next step's loss; call after the
    /// targets change.
    pub fn rebase(&mut self) {
        self.initial_loss = None;
    }

    /// Closes the report: final per-view PSNR and optional duration.
    pub fn finish(
        mut self,
        cameras: &[Camera<T>],
        reference: &[Image<T>],
        started: Option<Instant>,
    ) -> Result<(GaussianMixture<T>, FitReport), FitError> {
        check_targets(cameras, reference)?;
        let mut psnr = Vec::with_capacity(cameras.len());
        for (cam, r) in cameras.iter().zip(reference) {
            let img = Prepared::new(&self.mix, cam, &self.cfg.render)?.render();
            psnr.push(capped_psnr(r, &img)?);
        }
        let mean = psnr.iter().sum::<f64>() / psnr.len() as f64;
        if self.report.iterations_to_target.is_none() && mean >= self.cfg.target_psnr {
            self.report.iterations_to_target = Some(self.iteration);
        }
        self.report.psnr = psnr;
        self.report.duration_ms = started.map(|s| s.elapsed().as_millis() as u64);
        Ok((self.mix, self.report))
    }
}

fn check_targets<T: Real>(cameras: &[Camera<T>], targets: &[Image<T>]) -> Result<(), FitError> {
    if cameras.is_empty() || targets.len() != cameras.len() {
        return Err(FitError::Targets { targets: targets.len(), cameras: cameras.len() });
    }
    for (c, t) in cameras.iter().zip(targets) {
        if t.width != c.width() || t.height != c.height() || t.channels != 3 {
            return Err(FitError::Image(ImageError::Shape(format!(
                "target {}x{}x{} for a {}x{} camera",
                t.width,
                t.height,
                t.channels,
                c.width(),
                c.height()
            ))));
        }
    }
    Ok(())
}

fn timer(cfg: &FitConfig) -> Option<Instant> {
    cfg.timing.then(Instant::now)
}

/// Fits `mix` to `targets` for `cfg.iterations` steps. When `cfg.mask` is
/// set this is [`partial_fit`].
pub fn fit<T: Real>(
    mix: &GaussianMixture<T>,
    cameras: &[Camera<T>],
    targets: &[Image<T>],
    cfg: &FitConfig,
) -> Result<(GaussianMixture<T>, FitReport), FitError> {
    fit_with_reference(mix, cameras, targets, None, cfg)
}

/// As [`fit`], with PSNR measured against `reference` instead of the targets.
pub fn fit_with_reference<T: Real>(
    mix: &GaussianMixture<T>,
    cameras: &[Camera<T>],
    targets: &[Image<T>],
    reference: Option<&[Image<T>]>,
    cfg: &FitConfig,
) -> Result<(GaussianMixture<T>, FitReport), FitError> {
    if cfg.mask.is_some() {
        return partial_fit_with_reference(mix, cameras, targets, reference, cfg);
    }
    let started = timer(cfg);
    check_targets(cameras, targets)?;
    let mut opt = Optimizer::new(mix, cfg)?;
    for _ in 0..cfg.iterations {
        opt.step(cameras, targets, None, reference)?;
    }
    opt.finish(cameras, reference.unwrap_or(targets), started)
}

/// Rendered soft coverage of the selected primitives in every view.
pub fn mask_weights<T: Real>(
    mix: &GaussianMixture<T>,
    cameras: &[Camera<T>],
    mask: &GaussianMask,
    render: &RenderConfig,
) -> Result<Vec<Image<T>>, FitError> {
    cameras
        .par_iter()
        .map(|c| Ok(Prepared::new(mix, c, render)?.render_mask(&mask.selected)?))
        .collect()
}

/// Loss weights for partial fitting; `None` when nothing is masked out.
fn pixel_weights<T: Real>(
    mix: &GaussianMixture<T>,
    cameras: &[Camera<T>],
    mask: Option<&GaussianMask>,
    render: &RenderConfig,
) -> Result<Option<Vec<Image<T>>>, FitError> {
    match mask {
        Some(m) if !m.selected.iter().all(|&s| s) => Ok(Some(mask_weights(mix, cameras, m, render)?)),
        _ => Ok(None),
    }
}

/// Fits only the Gaussians selected by `cfg.mask`, with the pixel loss
/// weighted by their rendered coverage in the input mixture. Unselected
/// Gaussians are returned unchanged. A mask selecting everything reduces to
/// [`fit`].
pub fn partial_fit<T: Real>(
    mix: &GaussianMixture<T>,
    cameras: &[Camera<T>],
    targets: &[Image<T>],
    cfg: &FitConfig,
) -> Result<(GaussianMixture<T>, FitReport), FitError> {
    partial_fit_with_reference(mix, cameras, targets, None, cfg)
}

fn partial_fit_with_reference<T: Real>(
    mix: &GaussianMixture<T>,
    cameras: &[Camera<T>],
    targets: &[Image<T>],
    reference: Option<&[Image<T>]>,
    cfg: &FitConfig,
) -> Result<(GaussianMixture<T>, FitReport), FitError> {
    let started = timer(cfg);
    let mask = cfg.mask.as_ref().ok_or_else(|| FitError::Config("partial fitting needs a mask".into()))?;
    check_targets(cameras, targets)?;
    let mut opt = Optimizer::new(mix, cfg)?;
    let weights = pixel_weights(mix, cameras, Some(mask), &cfg.render)?;
    for _ in 0..cfg.iterations {
        opt.step(cameras, targets, weights.as_deref(), reference)?;
    }
    opt.finish(cameras, reference.unwrap_or(targets), started)
}

/// Selects a Gaussian when, among the views that see its projected mean with
/// compositing weight at least `floor`, the fraction whose mask covers that
/// pixel (value ≥ 0.5) is at least `threshold`.
pub fn unproject_masks<T: Real>(
    mix: &GaussianMixture<T>,
    cameras: &[Camera<T>],
    masks: &[Image<T>],
    threshold: f64,
    floor: f64,
    render: &RenderConfig,
) -> Result<GaussianMask, FitError> {
    if masks.len() != cameras.len() {
        return Err(FitError::Targets { targets: masks.len(), cameras: cameras.len() });
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(FitError::Config("threshold must lie in (0, 1]".into()));
    }
    let visibility: Vec<Vec<Option<((usize, usize), T)>>> = cameras
        .par_iter()
        .map(|c| Ok(Prepared::new(mix, c, render)?.mean_visibility()))
        .collect::<Result<_, FitError>>()?;
    for (m, c) in masks.iter().zip(cameras) {
        if m.width != c.width() || m.height != c.height() {
            return Err(FitError::Image(ImageError::Shape("mask does not match its camera".into())));
        }
    }
    let half = T::lit(0.5);
    let selected = (0..mix.len())
        .map(|i| {
            let (mut votes, mut covered) = (0usize, 0usize);
            for (vis, m) in visibility.iter().zip(masks) {
                if let Some(((x, y), w)) = vis[i] {
                    if w.as_f64() >= floor {
                        votes += 1;
                        covered += usize::from(m.get(x, y, 0) >= half);
                    }
                }
            }
            votes > 0 && covered as f64 >= threshold * votes as f64
        })
        .collect();
    Ok(GaussianMask { selected })
}

/// Views of `mix` as the editor sees them: renders, depth and cameras.
pub fn render_views<T: Real>(
    mix: &GaussianMixture<T>,
    cameras: &[Camera<T>],
    render: &RenderConfig,
    nonce: u64,
) -> Result<Vec<EditView<T>>, FitError> {
    let far = T::lit(render.far);
    cameras
        .par_iter()
        .enumerate()
        .map(|(index, c)| {
            let prep = Prepared::new(mix, c, render)?;
            Ok(EditView { index, camera: c.clone(), image: prep.render(), depth: prep.render_depth(far), far, nonce })
        })
        .collect()
}

/// Edit, fit for `cfg.iterations`, then `cfg.refinement.rounds` times:
/// re-render, re-edit at reduced strength, and fit `cfg.refinement.every`
/// more iterations. Optimizer state carries across rounds.
pub fn refine_loop<T: Real, E: Editor<T> + ?Sized>(
    mix: &GaussianMixture<T>,
    editor: &E,
    spec: &EditSpec,
    cameras: &[Camera<T>],
    cfg: &FitConfig,
    opts: &SequenceOptions,
    reference: Option<&[Image<T>]>,
) -> Result<(GaussianMixture<T>, FitReport), FitError> {
    let started = timer(cfg);
    let mut opt = Optimizer::new(mix, cfg)?;
    let weights = pixel_weights(mix, cameras, cfg.mask.as_ref(), &cfg.render)?;
    let mut targets = Vec::new();
    for round in 0..=cfg.refinement.rounds {
        let views = render_views(&opt.mix, cameras, &cfg.render, round as u64)?;
        let seq = ViewSequence::new(views)?;
        let strength = if round == 0 { opts.strength } else { REFINE_STRENGTH * opts.strength };
        let round_opts = SequenceOptions { strength, seed: opts.seed.wrapping_add(round as u64), ..opts.clone() };
        targets = edit_sequence(&seq, spec, editor, &round_opts)?.images;
        let steps = if round == 0 { cfg.iterations } else { cfg.refinement.every };
        for _ in 0..steps {
            opt.step(cameras, &targets, weights.as_deref(), reference)?;
        }
    }
    opt.finish(cameras, reference.unwrap_or(&targets), started)
}

/// Iterative dataset update: the target pool starts as the current renders;
/// before every tenth step one view (round robin) is re-rendered, edited on
/// its own and put back into the pool.
pub fn idu_baseline<T: Real, E: Editor<T> + ?Sized>(
    mix: &GaussianMixture<T>,
    editor: &E,
    spec: &EditSpec,
    cameras: &[Camera<T>],
    cfg: &FitConfig,
    strength: f64,
    reference: Option<&[Image<T>]>,
) -> Result<(GaussianMixture<T>, FitReport), FitError> {
    idu_baseline_with_pool(mix, editor, spec, cameras, cfg, strength, reference).map(|(m, r, _)| (m, r))
}

/// [`idu_baseline`], also returning the final target pool.
pub fn idu_baseline_with_pool<T: Real, E: Editor<T> + ?Sized>(
    mix: &GaussianMixture<T>,
    editor: &E,
    spec: &EditSpec,
    cameras: &[Camera<T>],
    cfg: &FitConfig,
    strength: f64,
    reference: Option<&[Image<T>]>,
) -> Result<(GaussianMixture<T>, FitReport, Vec<Image<T>>), FitError> {
    let started = timer(cfg);
    spec.validate()?;
    let mut opt = Optimizer::new(mix, cfg)?;
    let weights = pixel_weights(mix, cameras, cfg.mask.as_ref(), &cfg.render)?;
    let mut pool: Vec<Image<T>> = render_views(mix, cameras, &cfg.render, 0)?.into_iter().map(|v| v.image).collect();
    let far = T::lit(cfg.render.far);
    for i in 0..cfg.iterations {
        if i % IDU_PERIOD == 0 {
            let update = i / IDU_PERIOD;
            let v = update % cameras.len();
            let prep = Prepared::new(&opt.mix, &cameras[v], &cfg.render)?;
            let view = EditView {
                index: v,
                camera: cameras[v].clone(),
                image: prep.render(),
                depth: prep.render_depth(far),
                far,
                nonce: update as u64,
            };
            pool[v] = edit_single(&view, spec, editor, strength).map_err(|e| EditorError::View { index: v, source: Box::new(e) })?;
            opt.rebase();
        }
        opt.step(cameras, &pool, weights.as_deref(), reference)?;
    }
    let (out, report) = opt.finish(cameras, reference.unwrap_or(&pool), started)?;
    Ok((out, report, pool))
}
