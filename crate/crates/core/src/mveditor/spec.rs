use serde::{Deserialize, Serialize};

use super::EditorError;

/// A deterministic edit, serialized as `{"kind": ..., "parameters": {...}, "seed": n}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSpec {
    #[serde(flatten)]
    pub kind: EditKind,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "parameters", rename_all = "kebab-case")]
pub enum EditKind {
    RecolorByWorldPosition(RecolorByWorldPosition),
    StyleTint(StyleTint),
    PerViewRandom(PerViewRandom),
}

/// Chroma blended from `chroma_a` to `chroma_b` across a slab of `width`
/// scene units centered at `center` along `axis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecolorByWorldPosition {
    pub axis: [f64; 3],
    pub center: f64,
    pub width: f64,
    pub chroma_a: [f64; 3],
    pub chroma_b: [f64; 3],
}

/// The same chroma everywhere, blended in by `amount`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleTint {
    pub tint: [f64; 3],
    pub amount: f64,
}

/// A random per-view chroma jitter of relative size `amplitude`, optionally
/// applied on top of a position recolor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerViewRandom {
    pub amplitude: f64,
    #[serde(default)]
    pub base: Option<RecolorByWorldPosition>,
}

fn positive_color(name: &str, c: &[f64; 3]) -> Result<(), EditorError> {
    if c.iter().all(|v| v.is_finite() && *v > 0.0) {
        Ok(())
    } else {
        Err(EditorError::Spec(format!("{name} components must be finite and positive")))
    }
}

impl RecolorByWorldPosition {
    pub fn validate(&self) -> Result<(), EditorError> {
        let n = self.axis.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(EditorError::Spec("axis must be a nonzero finite vector".into()));
        }
        if !(self.width > 0.0 && self.width.is_finite() && self.center.is_finite()) {
            return Err(EditorError::Spec("width must be positive and center finite".into()));
        }
        positive_color("chroma_a", &self.chroma_a)?;
        positive_color("chroma_b", &self.chroma_b)
    }

    /// Unnormalized chroma at world position `p`.
    pub fn chroma_at(&self, p: [f64; 3]) -> [f64; 3] {
        let n = self.axis.iter().map(|v| v * v).sum::<f64>().sqrt();
        let along = (0..3).map(|i| p[i] * self.axis[i] / n).sum::<f64>();
        let s = ((along - self.center) / self.width + 0.5).clamp(0.0, 1.0);
        std::array::from_fn(|i| self.chroma_a[i] * (1.0 - s) + self.chroma_b[i] * s)
    }
}

impl EditSpec {
    pub fn validate(&self) -> Result<(), EditorError> {
        match &self.kind {
            EditKind::RecolorByWorldPosition(r) => r.validate(),
            EditKind::StyleTint(t) => {
                positive_color("tint", &t.tint)?;
                if (0.0..=1.0).contains(&t.amount) {
                    Ok(())
                } else {
                    Err(EditorError::Spec("amount must lie in [0, 1]".into()))
                }
            }
            EditKind::PerViewRandom(r) => {
                if !(0.0..1.0).contains(&r.amplitude) {
                    return Err(EditorError::Spec("amplitude must lie in [0, 1)".into()));
                }
                r.base.as_ref().map_or(Ok(()), |b| b.validate())
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self, EditorError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| EditorError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// The position-dependent recolor underlying this edit, if any.
    pub fn recolor(&self) -> Option<&RecolorByWorldPosition> {
        match &self.kind {
            EditKind::RecolorByWorldPosition(r) => Some(r),
            EditKind::PerViewRandom(r) => r.base.as_ref(),
            EditKind::StyleTint(_) => None,
        }
    }
}
