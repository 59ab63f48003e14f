//! Multi-view consistent editing.
//!
//! Views are sorted along the camera trajectory, a random subset of key views
//! is edited jointly (the editor couples them with cross-view attention), and
//! every other view receives the edited key features through
//! epipolar-constrained correspondences with its two nearest key views.

mod attention;
mod editors;
mod matching;
mod spec;

use std::ops::Range;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{fundamental_matrix, nearest_key_views, sort_cameras, view_angle, Camera, GeometryError};
use crate::image::{Image, ImageError};
use crate::scalar::Real;

pub use attention::{attention_rows, attention_weights, st_attention};
pub use editors::{luminance, Editor, IdentityEditor, MockEditor, MockEditorConfig};
pub use matching::{cosine_distance, match_epipolar, match_unconstrained, CellMatch, MatchFlag};
pub use spec::{EditKind, EditSpec, PerViewRandom, RecolorByWorldPosition, StyleTint};

#[derive(Debug, Error)]
pub enum EditorError {
    #[error("feature grids differ: {0}")]
    Shape(String),
    #[error("invalid edit spec: {0}")]
    Spec(String),
    #[error("view sequence: {0}")]
    Sequence(String),
    /// A failure inside the editor while processing one view.
    #[error("view {index}: {source}")]
    View {
        index: usize,
        #[source]
        source: Box<EditorError>,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// A `cells_h × cells_w × dim` feature map. Cell `(r, c)` sits at pixel
/// `((c + 0.5)·stride, (r + 0.5)·stride)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T: Real> {
    pub cells_h: usize,
    pub cells_w: usize,
    pub dim: usize,
    pub stride: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn zeros(cells_h: usize, cells_w: usize, dim: usize, stride: usize) -> Self {
        Self { cells_h, cells_w, dim, stride, data: vec![T::zero(); cells_h * cells_w * dim] }
    }

    pub fn cells(&self) -> usize {
        self.cells_h * self.cells_w
    }

    pub fn cell(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cell_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cell_rc(&self, r: usize, c: usize) -> &[T] {
        self.cell(r * self.cells_w + c)
    }

    pub fn pixel_center(&self, i: usize) -> Vector2<T> {
        let (r, c) = (i / self.cells_w, i % self.cells_w);
        let s = T::of_usize(self.stride);
        let half = T::lit(0.5);
        Vector2::new((T::of_usize(c) + half) * s, (T::of_usize(r) + half) * s)
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.cells_h == other.cells_h && self.cells_w == other.cells_w && self.dim == other.dim && self.stride == other.stride
    }

    pub fn check_layout(&self, other: &Self) -> Result<(), EditorError> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(EditorError::Shape(format!(
                "{}x{}x{} (stride {}) vs {}x{}x{} (stride {})",
                self.cells_h, self.cells_w, self.dim, self.stride, other.cells_h, other.cells_w, other.dim, other.stride
            )))
        }
    }

    /// Copy restricted to channels `range`.
    pub fn channels(&self, range: Range<usize>) -> Self {
        let dim = range.len();
        let mut out = Self::zeros(self.cells_h, self.cells_w, dim, self.stride);
        for i in 0..self.cells() {
            out.cell_mut(i).copy_from_slice(&self.cell(i)[range.clone()]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// As an image with one channel per feature (for the raw float format).
    pub fn to_image(&self) -> Image<T> {
        Image { width: self.cells_w, height: self.cells_h, channels: self.dim, data: self.data.clone() }
    }

    pub fn from_image(img: &Image<T>, stride: usize) -> Self {
        Self { cells_h: img.height, cells_w: img.width, dim: img.channels, stride, data: img.data.clone() }
    }
}

/// One view handed to an editor.
#[derive(Debug, Clone)]
pub struct EditView<T: Real> {
    /// Position of the view in the caller's camera list.
    pub index: usize,
    pub camera: Camera<T>,
    pub image: Image<T>,
    /// Depth rendered from the unedited scene; values `>= far` mean empty.
    pub depth: Image<T>,
    pub far: T,
    /// Distinguishes repeated edits of the same view.
    pub nonce: u64,
}

/// Views in camera-trajectory order.
#[derive(Debug, Clone)]
pub struct ViewSequence<T: Real> {
    pub views: Vec<EditView<T>>,
    /// `order[k]` is the index into `views` of the `k`-th view along the
    /// trajectory.
    pub order: Vec<usize>,
}

impl<T: Real> ViewSequence<T> {
    pub fn new(views: Vec<EditView<T>>) -> Result<Self, EditorError> {
        if views.is_empty() {
            return Err(EditorError::Sequence("no views".into()));
        }
        let (w, h) = (views[0].image.width, views[0].image.height);
        for v in &views {
            if v.image.width != w || v.image.height != h || v.depth.width != w || v.depth.height != h {
                return Err(EditorError::Sequence(format!("view {} differs in size", v.index)));
            }
            if v.camera.width() != w || v.camera.height() != h {
                return Err(EditorError::Sequence(format!("view {} camera does not match its image", v.index)));
            }
        }
        let cams: Vec<Camera<T>> = views.iter().map(|v| v.camera.clone()).collect();
        let order = sort_cameras(&cams);
        Ok(Self { views, order })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn cameras(&self) -> Vec<Camera<T>> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }
}

/// One keyframe drawn uniformly from each consecutive block of `density`
/// positions; `ceil(count / density)` keys in ascending order.
pub fn select_key_views(count: usize, density: usize, seed: u64) -> Vec<usize> {
    let density = density.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count.div_ceil(density))
        .map(|b| {
            let lo = b * density;
            let hi = ((b + 1) * density).min(count);
            rng.gen_range(lo..hi)
        })
        .collect()
}

/// One weighted correspondence of a non-key cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub key_view: usize,
    pub row: usize,
    pub col: usize,
    pub weight: f64,
    pub flag: MatchFlag,
}

/// Per-cell matches of a non-key view into its two nearest key views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceMap {
    pub cells_h: usize,
    pub cells_w: usize,
    pub entries: Vec<[Correspondence; 2]>,
}

impl CorrespondenceMap {
    pub fn flagged(&self) -> usize {
        self.entries
            .iter()
            .flatten()
            .filter(|c| c.weight > 0.0 && matches!(c.flag, MatchFlag::Fallback | MatchFlag::Epipole))
            .count()
    }
}

const ANGLE_EPS: f64 = 1e-6;

/// Inverse-angle weights `w_i ∝ 1 / (θ_i + 1e-6)`, normalized.
pub fn blend_weights<T: Real>(theta1: T, theta2: T) -> (T, T) {
    let eps = T::lit(ANGLE_EPS);
    let a = T::one() / (theta1 + eps);
    let b = T::one() / (theta2 + eps);
    (a / (a + b), b / (a + b))
}

/// Settings for correspondence search during injection.
#[derive(Debug, Clone)]
pub struct MatchSettings {
    /// Band half-width in pixels.
    pub band: f64,
    pub epipolar: bool,
    /// Feature channels compared by the cosine distance.
    pub channels: Range<usize>,
}

/// Replaces every cell of view `t` with the inverse-angle blend of its
/// matches in the two nearest edited key views.
pub fn inject_features<T: Real>(
    t: usize,
    feat_t: &FeatureGrid<T>,
    key_feats: &[(usize, FeatureGrid<T>)],
    cameras: &[Camera<T>],
    settings: &MatchSettings,
) -> Result<(FeatureGrid<T>, CorrespondenceMap), EditorError> {
    let keys: Vec<usize> = key_feats.iter().map(|(k, _)| *k).collect();
    let (k1, k2) = nearest_key_views(t, &keys, cameras)?;
    let grid_of = |k: usize| &key_feats.iter().find(|(i, _)| *i == k).expect("key present").1;
    let (g1, g2) = (grid_of(k1), grid_of(k2));
    feat_t.check_layout(g1)?;
    feat_t.check_layout(g2)?;
    let (w1, w2) = if k1 == k2 {
        (T::one(), T::zero())
    } else {
        blend_weights(view_angle(&cameras[t], &cameras[k1]), view_angle(&cameras[t], &cameras[k2]))
    };
    let query = feat_t.channels(settings.channels.clone());
    let band = T::lit(settings.band);
    let find = |k: usize, g: &FeatureGrid<T>| -> Result<Vec<CellMatch>, EditorError> {
        let target = g.channels(settings.channels.clone());
        if settings.epipolar {
            let f = fundamental_matrix(&cameras[t], &cameras[k])?;
            match_epipolar(&query, &target, &f, band)
        } else {
            match_unconstrained(&query, &target)
        }
    };
    let m1 = find(k1, g1)?;
    let m2 = if k1 == k2 { m1.clone() } else { find(k2, g2)? };
    let mut out = feat_t.clone();
    let mut entries = Vec::with_capacity(feat_t.cells());
    for i in 0..feat_t.cells() {
        let (a, b) = (m1[i], m2[i]);
        let (fa, fb) = (g1.cell(a.cell), g2.cell(b.cell));
        for (o, (&x, &y)) in out.cell_mut(i).iter_mut().zip(fa.iter().zip(fb)) {
            *o = w1 * x + w2 * y;
        }
        let entry = |k: usize, m: CellMatch, w: T| Correspondence {
            key_view: k,
            row: m.cell / g1.cells_w,
            col: m.cell % g1.cells_w,
            weight: w.as_f64(),
            flag: m.flag,
        };
        entries.push([entry(k1, a, w1), entry(k2, b, w2)]);
    }
    Ok((out, CorrespondenceMap { cells_h: feat_t.cells_h, cells_w: feat_t.cells_w, entries }))
}

#[derive(Debug, Clone)]
pub struct SequenceOptions {
    /// One key view per this many consecutive views.
    pub key_density: usize,
    /// Band half-width in feature-cell strides.
    pub band_strides: f64,
    pub epipolar: bool,
    pub seed: u64,
    /// Edit strength forwarded to the editor.
    pub strength: f64,
}

impl Default for SequenceOptions {
    fn default() -> Self {
        Self { key_density: 5, band_strides: 1.5, epipolar: true, seed: 0, strength: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct SequenceEdit<T: Real> {
    /// Edited images indexed like the input views.
    pub images: Vec<Image<T>>,
    /// Key views as indices into the input views.
    pub keys: Vec<usize>,
    pub correspondences: Vec<(usize, CorrespondenceMap)>,
}

impl<T: Real> SequenceEdit<T> {
    pub fn flagged(&self) -> usize {
        self.correspondences.iter().map(|(_, c)| c.flagged()).sum()
    }
}

fn tag(index: usize) -> impl Fn(EditorError) -> EditorError {
    move |e| EditorError::View { index, source: Box::new(e) }
}

/// Key-view joint editing followed by feature injection into all other
/// views.
pub fn edit_sequence<T: Real, E: Editor<T> + ?Sized>(
    seq: &ViewSequence<T>,
    spec: &EditSpec,
    editor: &E,
    opts: &SequenceOptions,
) -> Result<SequenceEdit<T>, EditorError> {
    spec.validate()?;
    let n = seq.len();
    let key_positions = select_key_views(n, opts.key_density, opts.seed);
    let mut keys: Vec<usize> = key_positions.iter().map(|&p| seq.order[p]).collect();
    keys.sort_unstable();
    let strength = T::lit(opts.strength);

    let mut key_grids = Vec::with_capacity(keys.len());
    for &k in &keys {
        key_grids.push(editor.extract(&seq.views[k]).map_err(tag(k))?);
    }
    let key_views: Vec<EditView<T>> = keys.iter().map(|&k| seq.views[k].clone()).collect();
    editor.transform(&mut key_grids, &key_views, spec, strength)?;
    let key_feats: Vec<(usize, FeatureGrid<T>)> = keys.iter().copied().zip(key_grids).collect();

    let cameras = seq.cameras();
    let stride = key_feats[0].1.stride;
    let settings = MatchSettings {
        band: opts.band_strides * stride as f64,
        epipolar: opts.epipolar,
        channels: editor.match_channels(),
    };
    let results: Vec<Result<(Image<T>, Option<CorrespondenceMap>), EditorError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let view = &seq.views[i];
            if let Some((_, g)) = key_feats.iter().find(|(k, _)| *k == i) {
                return Ok((editor.decode(g, view).map_err(tag(i))?, None));
            }
            let feat = editor.extract(view).map_err(tag(i))?;
            let (injected, map) = inject_features(i, &feat, &key_feats, &cameras, &settings).map_err(tag(i))?;
            Ok((editor.decode(&injected, view).map_err(tag(i))?, Some(map)))
        })
        .collect();
    let mut images = Vec::with_capacity(n);
    let mut correspondences = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (img, map) = r?;
        images.push(img);
        if let Some(m) = map {
            correspondences.push((i, m));
        }
    }
    Ok(SequenceEdit { images, keys, correspondences })
}

/// Edits every view on its own, without key views or injection.
pub fn edit_independent<T: Real, E: Editor<T> + ?Sized>(
    views: &[EditView<T>],
    spec: &EditSpec,
    editor: &E,
    strength: f64,
) -> Result<Vec<Image<T>>, EditorError> {
    spec.validate()?;
    views
        .par_iter()
        .map(|v| edit_single(v, spec, editor, strength).map_err(tag(v.index)))
        .collect()
}

pub fn edit_single<T: Real, E: Editor<T> + ?Sized>(
    view: &EditView<T>,
    spec: &EditSpec,
    editor: &E,
    strength: f64,
) -> Result<Image<T>, EditorError> {
    let mut grids = vec![editor.extract(view)?];
    editor.transform(&mut grids, std::slice::from_ref(view), spec, T::lit(strength))?;
    editor.decode(&grids[0], view)
}
