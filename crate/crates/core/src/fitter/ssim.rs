//! Multi-scale structural dissimilarity with its gradient.
//!
//! Local statistics use an 11-tap Gaussian window (σ = 1.5) applied
//! separably; near the border the window is truncated and renormalized, so
//! every blur is a fixed linear map whose transpose is applied in the
//! backward pass.

use crate::image::{Image, ImageError};
use crate::scalar::Real;

const C1: f64 = 1e-4;
const C2: f64 = 9e-4;
const RADIUS: usize = 5;
const SIGMA: f64 = 1.5;
pub const SCALES: usize = 3;

fn kernel<T: Real>() -> [T; 2 * RADIUS + 1] {
    std::array::from_fn(|i| {
        let d = i as f64 - RADIUS as f64;
        T::lit((-d * d / (2.0 * SIGMA * SIGMA)).exp())
    })
}

/// One planar channel.
#[derive(Clone)]
struct Plane<T> {
    w: usize,
    h: usize,
    v: Vec<T>,
}

impl<T: Real> Plane<T> {
    fn zeros(w: usize, h: usize) -> Self {
        Self { w, h, v: vec![T::zero(); w * h] }
    }

    fn of_channel(img: &Image<T>, c: usize) -> Self {
        Self { w: img.width, h: img.height, v: img.data.iter().skip(c).step_by(img.channels).copied().collect() }
    }

    fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self { w: self.w, h: self.h, v: self.v.iter().zip(&other.v).map(|(&a, &b)| f(a, b)).collect() }
    }

    /// 2×2 average pooling; an odd last row/column is dropped.
    fn down(&self) -> Self {
        let (w, h) = (self.w / 2, self.h / 2);
        let q = T::lit(0.25);
        let mut out = Self::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let s = self.v[2 * y * self.w + 2 * x]
                    + self.v[2 * y * self.w + 2 * x + 1]
                    + self.v[(2 * y + 1) * self.w + 2 * x]
                    + self.v[(2 * y + 1) * self.w + 2 * x + 1];
                out.v[y * w + x] = s * q;
            }
        }
        out
    }

    /// Transpose of [`Plane::down`] onto a `w × h` plane, accumulated.
    fn down_t(&self, into: &mut Self) {
        let q = T::lit(0.25);
        for y in 0..self.h {
            for x in 0..self.w {
                let g = self.v[y * self.w + x] * q;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    into.v[(2 * y + dy) * into.w + 2 * x + dx] += g;
                }
            }
        }
    }
}

/// Window normalizers for a line of length `n`.
fn norms<T: Real>(k: &[T], n: usize) -> Vec<T> {
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(RADIUS);
            let hi = (i + RADIUS).min(n - 1);
            (lo..=hi).fold(T::zero(), |acc, j| acc + k[j + RADIUS - i])
        })
        .collect()
}

/// Separable normalized blur, or its transpose.
fn blur<T: Real>(p: &Plane<T>, transpose: bool) -> Plane<T> {
    let k = kernel::<T>();
    let (w, h) = (p.w, p.h);
    let (nx, ny) = (norms(&k, w), norms(&k, h));
    let mut tmp = vec![T::zero(); w * h];
    let mut out = vec![T::zero(); w * h];
    // horizontal
    for y in 0..h {
        let src = &p.v[y * w..(y + 1) * w];
        let dst = &mut tmp[y * w..(y + 1) * w];
        for i in 0..w {
            let lo = i.saturating_sub(RADIUS);
            let hi = (i + RADIUS).min(w - 1);
            if transpose {
                let g = src[i] / nx[i];
                for j in lo..=hi {
                    dst[j] += g * k[j + RADIUS - i];
                }
            } else {
                let mut acc = T::zero();
                for j in lo..=hi {
                    acc += src[j] * k[j + RADIUS - i];
                }
                dst[i] = acc / nx[i];
            }
        }
    }
    // vertical, as row-wise axpy
    for i in 0..h {
        let lo = i.saturating_sub(RADIUS);
        let hi = (i + RADIUS).min(h - 1);
        for j in lo..=hi {
            let kk = k[j + RADIUS - i] / ny[i];
            let (src_row, dst_row) = if transpose { (i, j) } else { (j, i) };
            let src = &tmp[src_row * w..(src_row + 1) * w];
            let dst = &mut out[dst_row * w..(dst_row + 1) * w];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += kk * s;
            }
        }
    }
    Plane { w, h, v: out }
}

/// Mean weighted `(1 − SSIM)` of `y` against `x` at one scale, and optionally
/// its gradient with respect to `y`. `weight` defaults to uniform.
fn dssim_plane<T: Real>(x: &Plane<T>, y: &Plane<T>, weight: Option<&Plane<T>>, grad: bool) -> (T, Option<Plane<T>>) {
    let (c1, c2) = (T::lit(C1), T::lit(C2));
    let two = T::lit(2.0);
    let n = T::of_usize(x.v.len());
    let mx = blur(x, false);
    let my = blur(y, false);
    let mxx = blur(&x.zip(x, |a, b| a * b), false);
    let myy = blur(&y.zip(y, |a, b| a * b), false);
    let mxy = blur(&x.zip(y, |a, b| a * b), false);
    let mut loss = T::zero();
    let mut g_mu = Plane::zeros(x.w, x.h);
    let mut g_yy = Plane::zeros(x.w, x.h);
    let mut g_xy = Plane::zeros(x.w, x.h);
    for i in 0..x.v.len() {
        let (ux, uy) = (mx.v[i], my.v[i]);
        let sxy = mxy.v[i] - ux * uy;
        let sxx = mxx.v[i] - ux * ux;
        let syy = myy.v[i] - uy * uy;
        let a1 = two * (ux * uy) + c1;
        let b1 = ux * ux + uy * uy + c1;
        let a2 = two * sxy + c2;
        let b2 = sxx + syy + c2;
        let s = (a1 * a2) / (b1 * b2);
        let w = weight.map_or(T::one(), |p| p.v[i]);
        loss += w * (T::one() - s);
        if grad {
            // d(1 − S)/d(·) scaled by the weight and 1/n.
            let k = -w * s / n;
            g_mu.v[i] = k * two * ((ux / a1 - uy / b1) - (ux / a2 - uy / b2));
            g_xy.v[i] = k * two / a2;
            g_yy.v[i] = -k / b2;
        }
    }
    if !grad {
        return (loss / n, None);
    }
    let (t_mu, t_yy, t_xy) = (blur(&g_mu, true), blur(&g_yy, true), blur(&g_xy, true));
    let mut dy = Plane::zeros(x.w, x.h);
    for i in 0..x.v.len() {
        dy.v[i] = t_mu.v[i] + two * y.v[i] * t_yy.v[i] + x.v[i] * t_xy.v[i];
    }
    (loss / n, Some(dy))
}

fn check<T: Real>(a: &Image<T>, b: &Image<T>, weight: Option<&Image<T>>) -> Result<(), ImageError> {
    a.check_shape(b)?;
    if let Some(w) = weight {
        if w.width != a.width || w.height != a.height || w.channels != 1 {
            return Err(ImageError::Shape(format!(
                "weight map {}x{}x{} for {}x{} images",
                w.width, w.height, w.channels, a.width, a.height
            )));
        }
    }
    Ok(())
}

fn run<T: Real>(
    a: &Image<T>,
    b: &Image<T>,
    weight: Option<&Image<T>>,
    grad: bool,
) -> Result<(T, Option<Image<T>>), ImageError> {
    check(a, b, weight)?;
    let channels = a.channels;
    let scale_factor = T::one() / T::of_usize(SCALES * channels);
    let mut total = T::zero();
    let mut gimg = grad.then(|| Image::zeros(b.width, b.height, channels));
    for c in 0..channels {
        let mut xs = vec![Plane::of_channel(a, c)];
        let mut ys = vec![Plane::of_channel(b, c)];
        let mut ws = vec![weight.map(|w| Plane::of_channel(w, 0))];
        for s in 1..SCALES {
            let (x, y) = (xs[s - 1].down(), ys[s - 1].down());
            if x.w == 0 || x.h == 0 {
                break;
            }
            ws.push(ws[s - 1].as_ref().map(|w| w.down()));
            xs.push(x);
            ys.push(y);
        }
        // Each missing coarse scale counts as perfectly similar.
        let mut back: Option<Plane<T>> = None;
        for s in (0..xs.len()).rev() {
            let (l, g) = dssim_plane(&xs[s], &ys[s], ws[s].as_ref(), grad);
            total += l * scale_factor;
            if let Some(mut g) = g {
                for v in g.v.iter_mut() {
                    *v *= scale_factor;
                }
                if let Some(coarse) = back.take() {
                    coarse.down_t(&mut g);
                }
                back = Some(g);
            }
        }
        if let (Some(out), Some(g)) = (gimg.as_mut(), back) {
            for (i, v) in g.v.into_iter().enumerate() {
                out.data[i * channels + c] = v;
            }
        }
    }
    Ok((total, gimg))
}

/// Mean over three dyadic scales (and channels) of `1 − mean SSIM`. Zero for
/// identical images, symmetric in its arguments.
pub fn perceptual_proxy<T: Real>(a: &Image<T>, b: &Image<T>) -> Result<T, ImageError> {
    Ok(run(a, b, None, false)?.0)
}

/// [`perceptual_proxy`] with per-pixel `weight` (single channel, pooled with
/// the images), and its gradient with respect to `b`.
pub fn perceptual_proxy_grad<T: Real>(
    a: &Image<T>,
    b: &Image<T>,
    weight: Option<&Image<T>>,
) -> Result<(T, Image<T>), ImageError> {
    let (l, g) = run(a, b, weight, true)?;
    Ok((l, g.expect("gradient requested")))
}
