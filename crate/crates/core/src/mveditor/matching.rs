use std::cmp::Ordering;

use nalgebra::{Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use super::{EditorError, FeatureGrid};
use crate::geometry::{epipolar_line, point_line_distance, EpipolarLine};
use crate::scalar::Real;

/// How a match was selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchFlag {
    /// Best cosine match inside the epipolar band.
    Band,
    /// No usable candidate in the band; nearest cell to the line.
    Fallback,
    /// The query sits at the epipole; unconstrained best match.
    Epipole,
    /// Matching without the epipolar constraint.
    Unconstrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellMatch {
    /// Row-major cell index in the target grid.
    pub cell: usize,
    pub flag: MatchFlag,
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

/// `1 - a·b / (|a||b|)`; `None` if either vector has zero norm.
pub fn cosine_distance<T: Real>(a: &[T], b: &[T]) -> Option<T> {
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return None;
    }
    let dot = a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    Some(T::one() - dot / (na * nb))
}

fn cmp<T: Real>(a: T, b: T) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Best cosine match among all target cells, ties by index. `None` when the
/// query or every target has zero norm.
fn argmin_all<T: Real>(query: &[T], target: &FeatureGrid<T>) -> Option<usize> {
    let mut best: Option<(T, usize)> = None;
    for j in 0..target.cells() {
        if let Some(d) = cosine_distance(query, target.cell(j)) {
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
    }
    best.map(|(_, j)| j)
}

/// Target cells whose centers may lie within `band` of `line`, row by row:
/// the exact column interval, widened by one cell on each side.
fn band_cells<T: Real>(line: &EpipolarLine<T>, target: &FeatureGrid<T>, band: T) -> Vec<usize> {
    let s = T::of_usize(target.stride);
    let half = T::lit(0.5);
    let last = target.cells_w as i64 - 1;
    let mut out = Vec::new();
    for r in 0..target.cells_h {
        let y = (T::of_usize(r) + half) * s;
        let (lo, hi) = if line.a.abs() > T::lit(1e-12) {
            let x0 = (-line.c - line.b * y - band) / line.a;
            let x1 = (-line.c - line.b * y + band) / line.a;
            let (x0, x1) = if x0 <= x1 { (x0, x1) } else { (x1, x0) };
            let c0 = (x0 / s - half).floor().as_f64() - 1.0;
            let c1 = (x1 / s - half).ceil().as_f64() + 1.0;
            (c0.max(0.0).min(last as f64 + 1.0) as i64, c1.min(last as f64).max(-1.0) as i64)
        } else {
            (0, last)
        };
        for c in lo..=hi {
            out.push(r * target.cells_w + c as usize);
        }
    }
    out
}

/// Per-cell correspondence from `feat_t` into `feat_k` under the epipolar
/// constraint of `f` (pixels of view `t` to lines in view `k`).
///
/// Candidates are cells whose pixel centers lie within `band` pixels of the
/// line. The winner minimizes cosine distance, then line distance, then cell
/// index. Without a usable candidate (empty band, or zero-norm features) the
/// cell nearest the line is returned as [`MatchFlag::Fallback`]; at the
/// epipole the unconstrained best match is returned as
/// [`MatchFlag::Epipole`].
pub fn match_epipolar<T: Real>(
    feat_t: &FeatureGrid<T>,
    feat_k: &FeatureGrid<T>,
    f: &Matrix3<T>,
    band: T,
) -> Result<Vec<CellMatch>, EditorError> {
    feat_t.check_layout(feat_k)?;
    if !(band > T::zero()) {
        return Err(EditorError::Shape("band must be positive".into()));
    }
    let mut out = Vec::with_capacity(feat_t.cells());
    for i in 0..feat_t.cells() {
        let q = feat_t.cell(i);
        let u: Vector2<T> = feat_t.pixel_center(i);
        let Some(line) = epipolar_line(f, &u) else {
            let cell = argmin_all(q, feat_k).unwrap_or(0);
            out.push(CellMatch { cell, flag: MatchFlag::Epipole });
            continue;
        };
        let mut best: Option<(T, T, usize)> = None;
        let mut nearest: Option<(T, usize)> = None;
        for j in band_cells(&line, feat_k, band) {
            let dist = point_line_distance(&line, &feat_k.pixel_center(j));
            if dist > band {
                continue;
            }
            let Some(d) = cosine_distance(q, feat_k.cell(j)) else { continue };
            let better = match best {
                None => true,
                Some((bd, bl, bj)) => cmp(d, bd).then(cmp(dist, bl)).then(j.cmp(&bj)) == Ordering::Less,
            };
            if better {
                best = Some((d, dist, j));
            }
        }
        if let Some((_, _, j)) = best {
            out.push(CellMatch { cell: j, flag: MatchFlag::Band });
            continue;
        }
        for j in 0..feat_k.cells() {
            let dist = point_line_distance(&line, &feat_k.pixel_center(j));
            if nearest.is_none_or(|(nd, _)| dist < nd) {
                nearest = Some((dist, j));
            }
        }
        out.push(CellMatch { cell: nearest.map_or(0, |(_, j)| j), flag: MatchFlag::Fallback });
    }
    Ok(out)
}

/// Best cosine match over the whole target grid (ties by index).
pub fn match_unconstrained<T: Real>(feat_t: &FeatureGrid<T>, feat_k: &FeatureGrid<T>) -> Result<Vec<CellMatch>, EditorError> {
    feat_t.check_layout(feat_k)?;
    Ok((0..feat_t.cells())
        .map(|i| CellMatch { cell: argmin_all(feat_t.cell(i), feat_k).unwrap_or(0), flag: MatchFlag::Unconstrained })
        .collect())
}
