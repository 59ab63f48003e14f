//! Image formation for Gaussian mixtures.
//!
//! Two renderers are provided:
//!
//! * [`raymarch_render`] integrates the emission-absorption equation along
//!   each pixel ray with midpoint quadrature. It is slow and serves as the
//!   reference.
//! * [`splat_render`] projects each Gaussian to an elliptical screen-space
//!   footprint and alpha-composites front to back in camera-depth order. Its
//!   analytic gradient is [`render_with_gradients`].
//!
//! Splat opacity for Gaussian `i` at pixel `u` is
//! `α_i = min(0.999, 1 - exp(-σ_i ℓ_i ĝ_i(u)))`, where `ĝ_i` is the projected
//! footprint (`Σ' = J W Σ Wᵀ Jᵀ`) and `ℓ_i = sqrt(2π / (rᵀ Σ⁻¹ r))` is the
//! length of the Gaussian along the pixel ray `r`. With this choice
//! `σ_i ℓ_i ĝ_i(u)` approximates the optical depth the ray-marcher integrates
//! through the same Gaussian, so both renderers agree for well-separated
//! Gaussians.

mod backward;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{covariance, inverse_covariance, sh_color, FieldError, GaussianMixture};
use crate::geometry::{Camera, GeometryError};
use crate::image::Image;
use crate::scalar::Real;

pub use backward::{render_with_gradients, Gradients};

/// Per-Gaussian alpha ceiling; keeps transmittance positive.
pub const ALPHA_MAX: f64 = 0.999;
/// Compositing stops once transmittance falls below this value.
pub const TRANSMITTANCE_MIN: f64 = 1e-6;
const TILE: usize = 16;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid render config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Ray interval start (scene units along the ray).
    pub near: f64,
    pub far: f64,
    /// Quadrature samples per ray for [`raymarch_render`].
    pub steps: usize,
    pub background: [f64; 3],
    /// Footprint truncation radius in Mahalanobis units.
    pub cutoff: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { near: 0.1, far: 20.0, steps: 1024, background: [0.0; 3], cutoff: 3.0 }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.near > 0.0 && self.far > self.near && self.far.is_finite()) {
            return Err(RenderError::Config(format!("need 0 < near < far, got {} / {}", self.near, self.far)));
        }
        if self.steps < 2 {
            return Err(RenderError::Config("steps must be >= 2".into()));
        }
        if !(self.cutoff > 0.0) {
            return Err(RenderError::Config("cutoff must be positive".into()));
        }
        if self.background.iter().any(|v| !v.is_finite()) {
            return Err(RenderError::Config("background must be finite".into()));
        }
        Ok(())
    }

    pub fn background<T: Real>(&self) -> Vector3<T> {
        Vector3::new(T::lit(self.background[0]), T::lit(self.background[1]), T::lit(self.background[2]))
    }
}

/// A Gaussian projected into one camera.
#[derive(Debug, Clone)]
pub(crate) struct Projected<T: Real> {
    pub index: usize,
    pub depth: T,
    pub mean_cam: Vector3<T>,
    pub mean2: Vector2<T>,
    pub conic: Matrix2<T>,
    pub cov: Matrix3<T>,
    pub inv_cov: Matrix3<T>,
    /// `J W`, the linearized world-to-pixel map at the mean.
    pub jw: Matrix2x3<T>,
    pub jac: Matrix2x3<T>,
    pub nu: Vector3<T>,
    pub view_dist: T,
    pub color: Vector3<T>,
    pub opacity: T,
    /// Inclusive pixel bounds `(x0, x1, y0, y1)`.
    pub bbox: (usize, usize, usize, usize),
}

/// One visited Gaussian at one pixel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution<T: Real> {
    pub slot: usize,
    pub alpha: T,
    pub tau: T,
    pub clamped: bool,
    pub ghat: T,
    pub ell: T,
    pub a: T,
    pub d: Vector2<T>,
    /// Transmittance in front of this Gaussian.
    pub trans: T,
}

/// Per-camera projection of a mixture, binned into screen tiles. Reused by
/// the forward, depth, mask and gradient passes.
pub struct Prepared<'a, T: Real> {
    pub(crate) mix: &'a GaussianMixture<T>,
    pub(crate) camera: &'a Camera<T>,
    pub(crate) cutoff_sq: T,
    pub(crate) background: Vector3<T>,
    pub(crate) center: Vector3<T>,
    pub(crate) forward: Vector3<T>,
    pub(crate) proj: Vec<Projected<T>>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    pub(crate) rays: Vec<Vector3<T>>,
}

impl<'a, T: Real> Prepared<'a, T> {
    pub fn new(mix: &'a GaussianMixture<T>, camera: &'a Camera<T>, cfg: &RenderConfig) -> Result<Self, RenderError> {
        cfg.validate()?;
        camera.validate()?;
        mix.validate()?;
        let (w, h) = (camera.width(), camera.height());
        let k = &camera.intrinsics;
        let cutoff = T::lit(cfg.cutoff);
        let near = T::lit(cfg.near);
        let center = camera.center();
        let mut proj = Vec::with_capacity(mix.len());
        for (index, p) in mix.primitives.iter().enumerate() {
            let mc = camera.world_to_camera(&p.mean);
            if !(mc.z > near) {
                continue;
            }
            let z = mc.z;
            let z2 = z * z;
            let jac = Matrix2x3::new(k.fx / z, T::zero(), -k.fx * mc.x / z2, T::zero(), k.fy / z, -k.fy * mc.y / z2);
            let jw = jac * camera.rotation;
            let cov = covariance(p);
            let cov2 = jw * cov * jw.transpose();
            let det = cov2.determinant();
            if !(det > T::zero()) || !det.is_finite() {
                continue;
            }
            let conic = Matrix2::new(cov2[(1, 1)], -cov2[(0, 1)], -cov2[(1, 0)], cov2[(0, 0)]) / det;
            let mean2 = Vector2::new(k.fx * mc.x / z + k.cx, k.fy * mc.y / z + k.cy);
            let ex = cutoff * cov2[(0, 0)].sqrt();
            let ey = cutoff * cov2[(1, 1)].sqrt();
            let Some(bbox) = pixel_range(mean2, ex, ey, w, h) else { continue };
            let v = center - p.mean;
            let view_dist = v.norm();
            let nu = if view_dist > T::zero() { v / view_dist } else { Vector3::new(T::zero(), T::zero(), T::one()) };
            proj.push(Projected {
                index,
                depth: z,
                mean_cam: mc,
                mean2,
                conic,
                cov,
                inv_cov: inverse_covariance(p),
                jw,
                jac,
                nu,
                view_dist,
                color: sh_color(p, &nu),
                opacity: p.opacity,
                bbox,
            });
        }
        proj.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap_or(std::cmp::Ordering::Equal).then(a.index.cmp(&b.index)));
        let tiles_x = w.div_ceil(TILE);
        let tiles_y = h.div_ceil(TILE);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for (slot, g) in proj.iter().enumerate() {
            let (x0, x1, y0, y1) = g.bbox;
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    tiles[ty * tiles_x + tx].push(slot as u32);
                }
            }
        }
        let mut rays = Vec::with_capacity(w * h);
        let half = T::lit(0.5);
        for y in 0..h {
            for x in 0..w {
                rays.push(camera.pixel_ray(T::of_usize(x) + half, T::of_usize(y) + half));
            }
        }
        Ok(Self {
            mix,
            camera,
            cutoff_sq: cutoff * cutoff,
            background: cfg.background(),
            center,
            forward: camera.forward(),
            proj,
            tiles,
            tiles_x,
            rays,
        })
    }

    pub fn width(&self) -> usize {
        self.camera.width()
    }

    pub fn height(&self) -> usize {
        self.camera.height()
    }

    /// Walks the Gaussians covering pixel `(x, y)` front to back, recording
    /// each contribution into `out`; returns the residual transmittance.
    pub(crate) fn composite(&self, x: usize, y: usize, out: &mut Vec<Contribution<T>>) -> T {
        out.clear();
        let one = T::one();
        let half = T::lit(0.5);
        let two_pi = T::two_pi();
        let alpha_max = T::lit(ALPHA_MAX);
        let t_min = T::lit(TRANSMITTANCE_MIN);
        let p = Vector2::new(T::of_usize(x) + half, T::of_usize(y) + half);
        let r = self.rays[y * self.width() + x];
        let mut trans = one;
        for &slot in &self.tiles[(y / TILE) * self.tiles_x + x / TILE] {
            let slot = slot as usize;
            let g = &self.proj[slot];
            let (x0, x1, y0, y1) = g.bbox;
            if x < x0 || x > x1 || y < y0 || y > y1 {
                continue;
            }
            let d = p - g.mean2;
            let q = (g.conic * d).dot(&d);
            if q > self.cutoff_sq {
                continue;
            }
            let ghat = (-half * q).exp();
            let a = (g.inv_cov * r).dot(&r);
            let ell = (two_pi / a).sqrt();
            let tau = g.opacity * ell * ghat;
            let mut alpha = one - (-tau).exp();
            let clamped = alpha > alpha_max;
            if clamped {
                alpha = alpha_max;
            }
            out.push(Contribution { slot, alpha, tau, clamped, ghat, ell, a, d, trans });
            trans *= one - alpha;
            if trans < t_min {
                break;
            }
        }
        trans
    }

    /// Compositing weights `(primitive index, T_i α_i)` at a pixel plus the
    /// residual transmittance; these sum to one.
    pub fn weights(&self, x: usize, y: usize) -> (Vec<(usize, T)>, T) {
        let mut buf = Vec::new();
        let residual = self.composite(x, y, &mut buf);
        (buf.iter().map(|c| (self.proj[c.slot].index, c.trans * c.alpha)).collect(), residual)
    }

    fn render_rows<F>(&self, channels: usize, shade: F) -> Image<T>
    where
        F: Fn(usize, usize, &[Contribution<T>], T, &mut [T]) + Sync,
    {
        let (w, h) = (self.width(), self.height());
        let mut img = Image::zeros(w, h, channels);
        img.data.par_chunks_mut(w * channels).enumerate().for_each(|(y, row)| {
            let mut buf = Vec::new();
            for x in 0..w {
                let residual = self.composite(x, y, &mut buf);
                shade(x, y, &buf, residual, &mut row[x * channels..(x + 1) * channels]);
            }
        });
        img
    }

    pub fn render(&self) -> Image<T> {
        let bg = self.background;
        self.render_rows(3, |_, _, contribs, residual, out| {
            let mut c = bg * residual;
            for k in contribs {
                c += self.proj[k.slot].color * (k.trans * k.alpha);
            }
            out.copy_from_slice(c.as_slice());
        })
    }

    /// Normalized expected depth; pixels with coverage below one half get
    /// `far`.
    pub fn render_depth(&self, far: T) -> Image<T> {
        let half = T::lit(0.5);
        self.render_rows(1, |x, y, contribs, residual, out| {
            let r = self.rays[y * self.width() + x];
            let cos = r.dot(&self.forward);
            let mut num = T::zero();
            for k in contribs {
                let g = &self.proj[k.slot];
                let m = &self.mix.primitives[g.index].mean;
                let t_star = (g.inv_cov * r).dot(&(m - self.center)) / k.a;
                num += k.trans * k.alpha * t_star * cos;
            }
            let cover = T::one() - residual;
            out[0] = if cover >= half { num / cover } else { far };
        })
    }

    /// Soft coverage of the selected primitives.
    pub fn render_mask(&self, selected: &[bool]) -> Result<Image<T>, RenderError> {
        if selected.len() != self.mix.len() {
            return Err(RenderError::Shape(format!(
                "mask has {} entries for {} primitives",
                selected.len(),
                self.mix.len()
            )));
        }
        Ok(self.render_rows(1, |_, _, contribs, _, out| {
            out[0] = contribs
                .iter()
                .filter(|k| selected[self.proj[k.slot].index])
                .fold(T::zero(), |acc, k| acc + k.trans * k.alpha);
        }))
    }

    /// For each primitive, the pixel containing its projected mean and its
    /// compositing weight there; `None` when the mean is behind the camera or
    /// outside the image.
    pub fn mean_visibility(&self) -> Vec<Option<((usize, usize), T)>> {
        let mut out = vec![None; self.mix.len()];
        let (w, h) = (self.width(), self.height());
        let mut buf = Vec::new();
        for g in &self.proj {
            let (mx, my) = (g.mean2.x.as_f64(), g.mean2.y.as_f64());
            if !(mx >= 0.0 && my >= 0.0 && mx < w as f64 && my < h as f64) {
                continue;
            }
            let (px, py) = (mx as usize, my as usize);
            self.composite(px, py, &mut buf);
            let weight = buf
                .iter()
                .find(|k| self.proj[k.slot].index == g.index)
                .map_or(T::zero(), |k| k.trans * k.alpha);
            out[g.index] = Some(((px, py), weight));
        }
        out
    }
}

fn pixel_range<T: Real>(m: Vector2<T>, ex: T, ey: T, w: usize, h: usize) -> Option<(usize, usize, usize, usize)> {
    let (mx, my, ex, ey) = (m.x.as_f64(), m.y.as_f64(), ex.as_f64(), ey.as_f64());
    if !(mx.is_finite() && my.is_finite() && ex.is_finite() && ey.is_finite()) {
        return None;
    }
    let x0 = (mx - ex - 0.5).ceil().max(0.0);
    let x1 = (mx + ex - 0.5).floor().min(w as f64 - 1.0);
    let y0 = (my - ey - 0.5).ceil().max(0.0);
    let y1 = (my + ey - 0.5).floor().min(h as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}

pub fn splat_render<T: Real>(mix: &GaussianMixture<T>, camera: &Camera<T>, cfg: &RenderConfig) -> Result<Image<T>, RenderError> {
    Ok(Prepared::new(mix, camera, cfg)?.render())
}

pub fn render_depth<T: Real>(mix: &GaussianMixture<T>, camera: &Camera<T>, cfg: &RenderConfig) -> Result<Image<T>, RenderError> {
    Ok(Prepared::new(mix, camera, cfg)?.render_depth(T::lit(cfg.far)))
}

pub fn render_mask<T: Real>(
    mix: &GaussianMixture<T>,
    camera: &Camera<T>,
    cfg: &RenderConfig,
    selected: &[bool],
) -> Result<Image<T>, RenderError> {
    Prepared::new(mix, camera, cfg)?.render_mask(selected)
}

/// Squared Mahalanobis distance beyond which a Gaussian's density along a
/// ray is below `exp(-40)` of its peak and is ignored by the ray-marcher.
const MARCH_CULL_SQ: f64 = 80.0;
/// Half-width of the sampled interval around a Gaussian's peak along a ray,
/// in units of its standard deviation along the ray.
const MARCH_SPAN: f64 = 12.0;

/// Reference renderer: midpoint quadrature of the emission-absorption
/// integral along `x(t) = o + t r`, `t ∈ [near, far]`, with per-step opacity
/// `1 - exp(-σ(x) Δt)` and residual transmittance applied to the background.
pub fn raymarch_render<T: Real>(
    mix: &GaussianMixture<T>,
    camera: &Camera<T>,
    cfg: &RenderConfig,
) -> Result<Image<T>, RenderError> {
    cfg.validate()?;
    camera.validate()?;
    mix.validate()?;
    let (w, h) = (camera.width(), camera.height());
    let steps = cfg.steps;
    let near = T::lit(cfg.near);
    let dt = T::lit((cfg.far - cfg.near) / steps as f64);
    let half = T::lit(0.5);
    let origin = camera.center();
    let bg = cfg.background::<T>();
    let inv: Vec<Matrix3<T>> = mix.primitives.iter().map(inverse_covariance).collect();
    let mut img = Image::zeros(w, h, 3);
    img.data.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        let mut sigma = vec![T::zero(); steps];
        let mut emit = vec![Vector3::<T>::zeros(); steps];
        for x in 0..w {
            sigma.iter_mut().for_each(|v| *v = T::zero());
            emit.iter_mut().for_each(|v| *v = Vector3::zeros());
            let r = camera.pixel_ray(T::of_usize(x) + half, T::of_usize(y) + half);
            let nu = -r;
            for (p, m) in mix.primitives.iter().zip(&inv) {
                if p.opacity <= T::zero() {
                    continue;
                }
                let v = p.mean - origin;
                let mr = m * r;
                let a = mr.dot(&r);
                let b = mr.dot(&v);
                let t_star = b / a;
                let base = (m * v).dot(&v) - b * b / a;
                if base.as_f64() > MARCH_CULL_SQ {
                    continue;
                }
                let span = T::lit(MARCH_SPAN) / a.sqrt();
                let lo = ((t_star - span - near) / dt - half).floor().as_f64().max(0.0);
                let hi = ((t_star + span - near) / dt - half).ceil().as_f64().min(steps as f64 - 1.0);
                if lo > hi {
                    continue;
                }
                let color = sh_color(p, &nu) * p.opacity;
                for k in lo as usize..=hi as usize {
                    let t = near + (T::of_usize(k) + half) * dt;
                    let s = t - t_star;
                    let g = (-half * (base + a * s * s)).exp();
                    sigma[k] += p.opacity * g;
                    emit[k] += color * g;
                }
            }
            let mut trans = T::one();
            let mut c = Vector3::zeros();
            for k in 0..steps {
                if sigma[k] > T::zero() {
                    let alpha = T::one() - (-sigma[k] * dt).exp();
                    c += emit[k] * (trans * alpha / sigma[k]);
                    trans *= T::one() - alpha;
                }
            }
            c += bg * trans;
            row[x * 3..x * 3 + 3].copy_from_slice(c.as_slice());
        }
    });
    Ok(img)
}

#[cfg(test)]
mod tests;
