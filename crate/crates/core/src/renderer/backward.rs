use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use super::{Contribution, Prepared, RenderConfig, RenderError};
use crate::field::GaussianMixture;
use crate::geometry::Camera;
use crate::image::Image;
use crate::scalar::Real;
use crate::sh;

/// Gradients of a scalar loss with respect to every primitive parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real> {
    pub opacity: Vec<T>,
    pub mean: Vec<Vector3<T>>,
    pub scale: Vec<Vector3<T>>,
    /// With respect to the raw quaternion `(w, x, y, z)` (normalization is
    /// part of the forward model).
    pub rotation: Vec<Vector4<T>>,
    pub sh: Vec<Vec<Vector3<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros(mix: &GaussianMixture<T>) -> Self {
        let n = mix.len();
        Self {
            opacity: vec![T::zero(); n],
            mean: vec![Vector3::zeros(); n],
            scale: vec![Vector3::zeros(); n],
            rotation: vec![Vector4::zeros(); n],
            sh: mix.primitives.iter().map(|p| vec![Vector3::zeros(); p.sh.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for i in 0..self.opacity.len() {
            self.opacity[i] += other.opacity[i];
            self.mean[i] += other.mean[i];
            self.scale[i] += other.scale[i];
            self.rotation[i] += other.rotation[i];
            for (a, b) in self.sh[i].iter_mut().zip(&other.sh[i]) {
                *a += b;
            }
        }
    }

    pub fn scale_by(&mut self, s: T) {
        for i in 0..self.opacity.len() {
            self.opacity[i] *= s;
            self.mean[i] *= s;
            self.scale[i] *= s;
            self.rotation[i] *= s;
            for a in self.sh[i].iter_mut() {
                *a *= s;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        let z = T::zero();
        self.opacity.iter().all(|&v| v == z)
            && self.mean.iter().all(|v| v.iter().all(|&c| c == z))
            && self.scale.iter().all(|v| v.iter().all(|&c| c == z))
            && self.rotation.iter().all(|v| v.iter().all(|&c| c == z))
            && self.sh.iter().flatten().all(|v| v.iter().all(|&c| c == z))
    }
}

/// Screen-space gradient accumulators for one projected Gaussian.
#[derive(Clone, Copy)]
struct Accum<T: Real> {
    opacity: T,
    mean2: Vector2<T>,
    conic: Matrix2<T>,
    inv_cov: Matrix3<T>,
    color: Vector3<T>,
}

impl<T: Real> Accum<T> {
    fn zero() -> Self {
        Self {
            opacity: T::zero(),
            mean2: Vector2::zeros(),
            conic: Matrix2::zeros(),
            inv_cov: Matrix3::zeros(),
            color: Vector3::zeros(),
        }
    }

    fn add(&mut self, o: &Self) {
        self.opacity += o.opacity;
        self.mean2 += o.mean2;
        self.conic += o.conic;
        self.inv_cov += o.inv_cov;
        self.color += o.color;
    }
}

const ROWS_PER_CHUNK: usize = 4;

impl<T: Real> Prepared<'_, T> {
    /// Gradients of `Σ_pixels adjoint · image` under the splat forward model.
    /// Partial sums are formed over fixed row blocks and reduced in block
    /// order, so results do not depend on the thread count.
    pub fn backward(&self, adjoint: &Image<T>) -> Result<Gradients<T>, RenderError> {
        let (w, h) = (self.width(), self.height());
        if adjoint.width != w || adjoint.height != h || adjoint.channels != 3 {
            return Err(RenderError::Shape(format!(
                "adjoint {}x{}x{} for a {w}x{h}x3 render",
                adjoint.width, adjoint.height, adjoint.channels
            )));
        }
        let blocks: Vec<usize> = (0..h.div_ceil(ROWS_PER_CHUNK)).collect();
        let partials: Vec<Vec<Accum<T>>> = blocks
            .par_iter()
            .map(|&b| {
                let mut acc = vec![Accum::zero(); self.proj.len()];
                let mut buf = Vec::new();
                for y in b * ROWS_PER_CHUNK..((b + 1) * ROWS_PER_CHUNK).min(h) {
                    for x in 0..w {
                        let g = Vector3::new(adjoint.get(x, y, 0), adjoint.get(x, y, 1), adjoint.get(x, y, 2));
                        if g == Vector3::zeros() {
                            continue;
                        }
                        let residual = self.composite(x, y, &mut buf);
                        self.pixel_backward(x, y, g, residual, &buf, &mut acc);
                    }
                }
                acc
            })
            .collect();
        let mut total = vec![Accum::zero(); self.proj.len()];
        for part in &partials {
            for (t, p) in total.iter_mut().zip(part) {
                t.add(p);
            }
        }
        let mut grads = Gradients::zeros(self.mix);
        for (slot, acc) in total.iter().enumerate() {
            self.chain(slot, acc, &mut grads);
        }
        Ok(grads)
    }

    fn pixel_backward(&self, x: usize, y: usize, g: Vector3<T>, residual: T, contribs: &[Contribution<T>], acc: &mut [Accum<T>]) {
        let one = T::one();
        let half = T::lit(0.5);
        let two = T::lit(2.0);
        let r = self.rays[y * self.width() + x];
        let mut behind = g.dot(&(self.background * residual));
        for k in contribs.iter().rev() {
            let p = &self.proj[k.slot];
            let a = &mut acc[k.slot];
            let gc = g.dot(&p.color);
            a.color += g * (k.trans * k.alpha);
            let d_alpha = k.trans * gc - behind / (one - k.alpha);
            behind += k.trans * k.alpha * gc;
            if k.clamped {
                continue;
            }
            let d_tau = d_alpha * (-k.tau).exp();
            a.opacity += d_tau * k.ell * k.ghat;
            let d_ell = d_tau * p.opacity * k.ghat;
            let d_ghat = d_tau * p.opacity * k.ell;
            let d_q = -half * k.ghat * d_ghat;
            a.conic += k.d * k.d.transpose() * d_q;
            a.mean2 -= p.conic * k.d * (two * d_q);
            let d_a = -d_ell * k.ell / (two * k.a);
            a.inv_cov += r * r.transpose() * d_a;
        }
    }

    /// Maps screen-space accumulators of one projected Gaussian onto its
    /// world-space parameters.
    fn chain(&self, slot: usize, acc: &Accum<T>, grads: &mut Gradients<T>) {
        let p = &self.proj[slot];
        let i = p.index;
        let prim = &self.mix.primitives[i];
        let k = &self.camera.intrinsics;
        let w_cam = self.camera.rotation;
        let two = T::lit(2.0);

        grads.opacity[i] += acc.opacity;

        // Color: coefficients and view direction.
        let basis = sh::basis(self.mix.sh_degree, &p.nu);
        let dbasis = sh::basis_gradient(self.mix.sh_degree, &p.nu);
        let mut d_nu = Vector3::zeros();
        for (c, coeff) in prim.sh.iter().enumerate() {
            grads.sh[i][c] += acc.color * basis[c];
            d_nu += dbasis[c] * acc.color.dot(coeff);
        }
        let proj_nu = Matrix3::identity() - p.nu * p.nu.transpose();
        let mut d_mean = -(proj_nu * d_nu) / p.view_dist;

        // Footprint: conic -> cov2 -> (J, Σ).
        let g2 = -(p.conic * acc.conic * p.conic);
        let d_cov_proj = p.jw.transpose() * g2 * p.jw;
        let d_jw: Matrix2x3<T> = (g2 + g2.transpose()) * p.jw * p.cov;
        let d_j = d_jw * w_cam.transpose();
        let (mx, my, mz) = (p.mean_cam.x, p.mean_cam.y, p.mean_cam.z);
        let z2 = mz * mz;
        let z3 = z2 * mz;
        let mut d_mc = p.jac.transpose() * acc.mean2;
        d_mc.x += d_j[(0, 2)] * (-k.fx / z2);
        d_mc.y += d_j[(1, 2)] * (-k.fy / z2);
        d_mc.z += d_j[(0, 0)] * (-k.fx / z2)
            + d_j[(0, 2)] * (two * k.fx * mx / z3)
            + d_j[(1, 1)] * (-k.fy / z2)
            + d_j[(1, 2)] * (two * k.fy * my / z3);
        d_mean += w_cam.transpose() * d_mc;
        grads.mean[i] += d_mean;

        // Σ = R S² Rᵀ and Σ⁻¹ = R S⁻² Rᵀ -> (R, s).
        let rot = prim.rotation_matrix();
        let s = prim.scale;
        let s2 = Matrix3::from_diagonal(&s.component_mul(&s));
        let sm2 = Matrix3::from_diagonal(&s.map(|v| T::one() / (v * v)));
        let gs = d_cov_proj;
        let gm = acc.inv_cov;
        let d_rot = (gs + gs.transpose()) * rot * s2 + (gm + gm.transpose()) * rot * sm2;
        let rs = rot.transpose() * gs * rot;
        let rm = rot.transpose() * gm * rot;
        for a in 0..3 {
            grads.scale[i][a] += two * s[a] * rs[(a, a)] - two * rm[(a, a)] / (s[a] * s[a] * s[a]);
        }
        grads.rotation[i] += quat_backward(&prim.rotation, &d_rot);
    }
}

/// Gradient with respect to a raw quaternion `q` of a loss on `R(q / |q|)`.
pub(crate) fn quat_backward<T: Real>(q: &Vector4<T>, g: &Matrix3<T>) -> Vector4<T> {
    let n = q.norm();
    let u = q / n;
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let two = T::lit(2.0);
    let dw = two * (-g[(0, 1)] * z + g[(0, 2)] * y + g[(1, 0)] * z - g[(1, 2)] * x - g[(2, 0)] * y + g[(2, 1)] * x);
    let dx = two
        * (g[(0, 1)] * y + g[(0, 2)] * z + g[(1, 0)] * y - two * g[(1, 1)] * x - g[(1, 2)] * w + g[(2, 0)] * z
            + g[(2, 1)] * w
            - two * g[(2, 2)] * x);
    let dy = two
        * (-two * g[(0, 0)] * y + g[(0, 1)] * x + g[(0, 2)] * w + g[(1, 0)] * x + g[(1, 2)] * z - g[(2, 0)] * w
            + g[(2, 1)] * z
            - two * g[(2, 2)] * y);
    let dz = two
        * (-two * g[(0, 0)] * z - g[(0, 1)] * w + g[(0, 2)] * x + g[(1, 0)] * w - two * g[(1, 1)] * z
            + g[(1, 2)] * y
            + g[(2, 0)] * x
            + g[(2, 1)] * y);
    let du = Vector4::new(dw, dx, dy, dz);
    (Matrix4::identity() - u * u.transpose()) * du / n
}

/// Gradients of `Σ adjoint · splat_render(mix, camera, cfg)` with respect to
/// every primitive parameter.
pub fn render_with_gradients<T: Real>(
    mix: &GaussianMixture<T>,
    camera: &Camera<T>,
    cfg: &RenderConfig,
    adjoint: &Image<T>,
) -> Result<Gradients<T>, RenderError> {
    Prepared::new(mix, camera, cfg)?.backward(adjoint)
}
