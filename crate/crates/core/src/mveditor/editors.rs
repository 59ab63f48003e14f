//! The editor contract and two deterministic implementations.
//!
//! [`MockEditor`] feature cells hold three blocks:
//!
//! | channels | content |
//! |----------|---------|
//! | `0..16`  | appearance descriptor: mean RGB, 12-bin gradient orientation histogram, mean gradient magnitude |
//! | `16..20` | world position of the cell center from the view's depth, plus a validity flag |
//! | `20..24` | edit latent: target chroma (unit luminance) and blend amount |
//!
//! Correspondences are searched on the descriptor block only. Joint editing
//! attends between cells by world position, so cells that see the same
//! surface in different key views converge to a shared latent. Decoding
//! recolors each pixel as `src + amount·(lum(src)·chroma − src)`, which leaves
//! an already-recolored image unchanged.

use std::ops::Range;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::attention_rows;
use super::spec::{EditKind, EditSpec};
use super::{EditView, EditorError, FeatureGrid};
use crate::image::Image;
use crate::scalar::Real;

/// An image editor split into feature extraction, (possibly multi-view)
/// feature transformation, and decoding.
pub trait Editor<T: Real>: Sync {
    fn extract(&self, view: &EditView<T>) -> Result<FeatureGrid<T>, EditorError>;

    /// Edits `grids` in place. With more than one grid the views are edited
    /// jointly.
    fn transform(
        &self,
        grids: &mut [FeatureGrid<T>],
        views: &[EditView<T>],
        spec: &EditSpec,
        strength: T,
    ) -> Result<(), EditorError>;

    fn decode(&self, grid: &FeatureGrid<T>, view: &EditView<T>) -> Result<Image<T>, EditorError>;

    /// Feature channels used for correspondence search.
    fn match_channels(&self) -> Range<usize>;
}

pub fn luminance<T: Real>(c: &Vector3<T>) -> T {
    T::lit(0.299) * c.x + T::lit(0.587) * c.y + T::lit(0.114) * c.z
}

fn unit_luminance(c: [f64; 3]) -> [f64; 3] {
    let l = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    c.map(|v| v / l)
}

fn jitter(seed: u64, view: usize, nonce: u64) -> [f64; 3] {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_le_bytes());
    s[8..16].copy_from_slice(&(view as u64).to_le_bytes());
    s[16..24].copy_from_slice(&nonce.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(s);
    std::array::from_fn(|_| rng.gen_range(-1.0..1.0))
}

impl EditSpec {
    /// Unit-luminance chroma and blend amount the edit asks for at world
    /// position `p` in view `view` (edit attempt `nonce`).
    pub fn target(&self, p: [f64; 3], view: usize, nonce: u64) -> ([f64; 3], f64) {
        match &self.kind {
            EditKind::RecolorByWorldPosition(r) => (unit_luminance(r.chroma_at(p)), 1.0),
            EditKind::StyleTint(t) => (unit_luminance(t.tint), t.amount),
            EditKind::PerViewRandom(r) => {
                let base = r.base.as_ref().map_or([1.0; 3], |b| b.chroma_at(p));
                let j = jitter(self.seed, view, nonce);
                (unit_luminance(std::array::from_fn(|i| base[i] * (1.0 + r.amplitude * j[i]))), 1.0)
            }
        }
    }
}

impl EditSpec {
    /// The view-independent part of [`EditSpec::target`]: per-view jitter is
    /// dropped. This is the edit a perfectly consistent editor would apply.
    pub fn world_target(&self, p: [f64; 3]) -> ([f64; 3], f64) {
        match &self.kind {
            EditKind::PerViewRandom(r) => (unit_luminance(r.base.as_ref().map_or([1.0; 3], |b| b.chroma_at(p))), 1.0),
            _ => self.target(p, 0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockEditorConfig {
    /// Pixels per feature cell.
    pub stride: usize,
    /// Transform stages; cross-view attention is recomputed at each.
    pub stages: usize,
    /// World-space kernel width (scene units) of the cross-view attention.
    pub bandwidth: f64,
}

impl Default for MockEditorConfig {
    fn default() -> Self {
        Self { stride: 8, stages: 4, bandwidth: 0.15 }
    }
}

const BINS: usize = 12;
pub(crate) const DESC: Range<usize> = 0..16;
pub(crate) const POS: Range<usize> = 16..20;
pub(crate) const LAT: Range<usize> = 20..24;
const DIM: usize = 24;

#[derive(Debug, Clone, Default)]
pub struct MockEditor {
    pub config: MockEditorConfig,
}

impl MockEditor {
    pub fn new(config: MockEditorConfig) -> Self {
        Self { config }
    }

    fn layout(&self, width: usize, height: usize) -> (usize, usize) {
        let s = self.config.stride.max(1);
        ((height / s).max(1), (width / s).max(1))
    }

    fn descriptors<T: Real>(&self, img: &Image<T>, grid: &mut FeatureGrid<T>) {
        let (w, h) = (img.width, img.height);
        let s = grid.stride;
        let lum = |x: usize, y: usize| -> T {
            if img.channels >= 3 {
                luminance(&Vector3::new(img.get(x, y, 0), img.get(x, y, 1), img.get(x, y, 2)))
            } else {
                img.get(x, y, 0)
            }
        };
        let half = T::lit(0.5);
        let two_pi = T::two_pi();
        for r in 0..grid.cells_h {
            for c in 0..grid.cells_w {
                let mut f = [T::zero(); 16];
                let (y0, y1) = (r * s, ((r + 1) * s).min(h));
                let (x0, x1) = (c * s, ((c + 1) * s).min(w));
                let count = T::of_usize((y1 - y0) * (x1 - x0));
                for y in y0..y1 {
                    for x in x0..x1 {
                        for ch in 0..3 {
                            f[ch] += img.get(x, y, ch.min(img.channels - 1));
                        }
                        let gx = (lum((x + 1).min(w - 1), y) - lum(x.saturating_sub(1), y)) * half;
                        let gy = (lum(x, (y + 1).min(h - 1)) - lum(x, y.saturating_sub(1))) * half;
                        let mag = (gx * gx + gy * gy).sqrt();
                        if mag > T::zero() {
                            let angle = gy.atan2(gx) + T::pi();
                            let bin = ((angle / two_pi * T::of_usize(BINS)).floor().as_f64() as usize).min(BINS - 1);
                            f[3 + bin] += mag;
                        }
                        f[15] += mag;
                    }
                }
                let cell = grid.cell_mut(r * grid.cells_w + c);
                for (o, v) in cell[DESC].iter_mut().zip(f) {
                    *o = v / count;
                }
            }
        }
    }
}

fn cell_position<T: Real>(g: &FeatureGrid<T>, i: usize) -> Option<[f64; 3]> {
    let p = &g.cell(i)[POS];
    (p[3] > T::zero()).then(|| [p[0].as_f64(), p[1].as_f64(), p[2].as_f64()])
}

impl<T: Real> Editor<T> for MockEditor {
    fn extract(&self, view: &EditView<T>) -> Result<FeatureGrid<T>, EditorError> {
        let img = &view.image;
        if img.channels != 3 {
            return Err(EditorError::Shape(format!("expected an RGB image, got {} channels", img.channels)));
        }
        let (ch, cw) = self.layout(img.width, img.height);
        let s = self.config.stride.max(1);
        let mut grid = FeatureGrid::zeros(ch, cw, DIM, s);
        self.descriptors(img, &mut grid);
        let half = T::lit(0.5);
        for i in 0..grid.cells() {
            let (r, c) = (i / cw, i % cw);
            let px = (c * s + s / 2).min(img.width - 1);
            let py = (r * s + s / 2).min(img.height - 1);
            let d = view.depth.get(px, py, 0);
            if d > T::zero() && d < view.far {
                let p = view.camera.unproject(T::of_usize(px) + half, T::of_usize(py) + half, d);
                let cell = grid.cell_mut(i);
                cell[POS.start..POS.start + 3].copy_from_slice(p.as_slice());
                cell[POS.start + 3] = T::one();
            }
        }
        Ok(grid)
    }

    fn transform(
        &self,
        grids: &mut [FeatureGrid<T>],
        views: &[EditView<T>],
        spec: &EditSpec,
        strength: T,
    ) -> Result<(), EditorError> {
        spec.validate()?;
        if grids.len() != views.len() {
            return Err(EditorError::Shape(format!("{} grids for {} views", grids.len(), views.len())));
        }
        if grids.iter().any(|g| g.dim != DIM) {
            return Err(EditorError::Shape(format!("mock editor grids have {DIM} channels")));
        }
        let stages = self.config.stages.max(1);
        let h = self.config.bandwidth;
        let d = T::lit(4.0);
        for stage in 0..stages {
            let frac = T::one() / T::of_usize(stages - stage);
            for (g, v) in grids.iter_mut().zip(views) {
                for i in 0..g.cells() {
                    let Some(p) = cell_position(g, i) else { continue };
                    let (chroma, amount) = spec.target(p, v.index, v.nonce);
                    let target = [chroma[0], chroma[1], chroma[2], amount * strength.as_f64()];
                    let lat = &mut g.cell_mut(i)[LAT];
                    for (l, t) in lat.iter_mut().zip(target) {
                        *l += (T::lit(t) - *l) * frac;
                    }
                }
            }
            if grids.len() < 2 {
                continue;
            }
            // Queries/keys encode a Gaussian kernel on world distance:
            // q·k/√d = (p·y)/h² − |y|²/(2h²).
            let mut keys = Vec::new();
            let mut values = Vec::new();
            for g in grids.iter() {
                for i in 0..g.cells() {
                    if let Some(y) = cell_position(g, i) {
                        let y2 = y.iter().map(|v| v * v).sum::<f64>();
                        keys.push([T::lit(y[0] / h), T::lit(y[1] / h), T::lit(y[2] / h), T::lit(-y2 / (2.0 * h * h))]);
                        values.push(g.cell(i)[LAT].to_vec());
                    }
                }
            }
            let k_rows: Vec<&[T]> = keys.iter().map(|k| &k[..]).collect();
            let v_rows: Vec<&[T]> = values.iter().map(|v| &v[..]).collect();
            for g in grids.iter_mut() {
                let cells: Vec<usize> = (0..g.cells()).filter(|&i| cell_position(g, i).is_some()).collect();
                let queries: Vec<[T; 4]> = cells
                    .iter()
                    .map(|&i| {
                        let p = cell_position(g, i).unwrap();
                        let sd = d.sqrt();
                        [T::lit(p[0] / h) * sd, T::lit(p[1] / h) * sd, T::lit(p[2] / h) * sd, sd]
                    })
                    .collect();
                let q_rows: Vec<&[T]> = queries.iter().map(|q| &q[..]).collect();
                if q_rows.is_empty() {
                    continue;
                }
                let out = attention_rows(&q_rows, &k_rows, &v_rows)?;
                for (&i, row) in cells.iter().zip(out) {
                    g.cell_mut(i)[LAT].copy_from_slice(&row);
                }
            }
        }
        Ok(())
    }

    fn decode(&self, grid: &FeatureGrid<T>, view: &EditView<T>) -> Result<Image<T>, EditorError> {
        let img = &view.image;
        let (ch, cw) = self.layout(img.width, img.height);
        if grid.dim != DIM || grid.cells_h != ch || grid.cells_w != cw {
            return Err(EditorError::Shape("grid does not match the view".into()));
        }
        let s = T::of_usize(grid.stride);
        let half = T::lit(0.5);
        let mut out = img.clone();
        for y in 0..img.height {
            let fy = (T::of_usize(y) + half) / s - half;
            let (r0, r1, ty) = bracket(fy, ch);
            for x in 0..img.width {
                let fx = (T::of_usize(x) + half) / s - half;
                let (c0, c1, tx) = bracket(fx, cw);
                let mut wsum = T::zero();
                let mut lat = [T::zero(); 4];
                for (r, wy) in [(r0, T::one() - ty), (r1, ty)] {
                    for (c, wx) in [(c0, T::one() - tx), (c1, tx)] {
                        let cell = grid.cell_rc(r, c);
                        let w = wy * wx * cell[POS.start + 3];
                        if w > T::zero() {
                            wsum += w;
                            for (l, &v) in lat.iter_mut().zip(&cell[LAT]) {
                                *l += w * v;
                            }
                        }
                    }
                }
                if !(wsum > T::zero()) {
                    continue;
                }
                let amount = lat[3] / wsum;
                let src = Vector3::new(img.get(x, y, 0), img.get(x, y, 1), img.get(x, y, 2));
                let l = luminance(&src);
                for k in 0..3 {
                    let target = l * lat[k] / wsum;
                    out.set(x, y, k, src[k] + amount * (target - src[k]));
                }
            }
        }
        Ok(out)
    }

    fn match_channels(&self) -> Range<usize> {
        DESC
    }
}

/// Neighboring cell indices and interpolation weight for continuous cell
/// coordinate `f`, clamped at the borders.
fn bracket<T: Real>(f: T, n: usize) -> (usize, usize, T) {
    if !(f > T::zero()) {
        return (0, 0, T::zero());
    }
    let i0 = f.floor().as_f64() as usize;
    if i0 + 1 >= n {
        return (n - 1, n - 1, T::zero());
    }
    (i0, i0 + 1, f - T::of_usize(i0))
}

/// Leaves every image untouched; features are those of [`MockEditor`] so the
/// matching path is still exercised.
#[derive(Debug, Clone, Default)]
pub struct IdentityEditor {
    pub features: MockEditor,
}

impl<T: Real> Editor<T> for IdentityEditor {
    fn extract(&self, view: &EditView<T>) -> Result<FeatureGrid<T>, EditorError> {
        self.features.extract(view)
    }

    fn transform(&self, _: &mut [FeatureGrid<T>], _: &[EditView<T>], spec: &EditSpec, _: T) -> Result<(), EditorError> {
        spec.validate()
    }

    fn decode(&self, _: &FeatureGrid<T>, view: &EditView<T>) -> Result<Image<T>, EditorError> {
        Ok(view.image.clone())
    }

    fn match_channels(&self) -> Range<usize> {
        DESC
    }
}
