use super::{EditorError, FeatureGrid};
use crate::scalar::Real;

/// Softmax attention probabilities `softmax(q · kᵀ / √d)` for one query.
pub fn attention_weights<T: Real>(query: &[T], keys: &[&[T]]) -> Vec<T> {
    let scale = T::one() / T::of_usize(query.len().max(1)).sqrt();
    let logits: Vec<T> = keys
        .iter()
        .map(|k| query.iter().zip(k.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b) * scale)
        .collect();
    let max = logits.iter().copied().fold(T::min_value().unwrap_or(-T::one() / T::default_epsilon()), |a, b| a.max(b));
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / total).collect()
}

/// Attention over explicit rows: output row `i` is
/// `Σ_j softmax_j(q_i · k_j / √d) v_j`.
pub fn attention_rows<T: Real>(queries: &[&[T]], keys: &[&[T]], values: &[&[T]]) -> Result<Vec<Vec<T>>, EditorError> {
    if keys.len() != values.len() || keys.is_empty() {
        return Err(EditorError::Shape(format!("{} keys for {} values", keys.len(), values.len())));
    }
    let d = queries.first().map_or(0, |q| q.len());
    if queries.iter().any(|q| q.len() != d) || keys.iter().any(|k| k.len() != d) {
        return Err(EditorError::Shape("query and key dimensions differ".into()));
    }
    let dv = values[0].len();
    if values.iter().any(|v| v.len() != dv) {
        return Err(EditorError::Shape("value rows differ in dimension".into()));
    }
    Ok(queries
        .iter()
        .map(|q| {
            let w = attention_weights(q, keys);
            let mut out = vec![T::zero(); dv];
            for (wj, v) in w.iter().zip(values) {
                for (o, &x) in out.iter_mut().zip(v.iter()) {
                    *o += *wj * x;
                }
            }
            out
        })
        .collect())
}

/// Cross-view attention for view `t`: its queries attend to the keys and
/// values of every cell of every grid in `keys` / `values`.
pub fn st_attention<T: Real>(
    queries: &[FeatureGrid<T>],
    keys: &[FeatureGrid<T>],
    values: &[FeatureGrid<T>],
    t: usize,
) -> Result<FeatureGrid<T>, EditorError> {
    let q = queries
        .get(t)
        .ok_or_else(|| EditorError::Shape(format!("view {t} not among {} query grids", queries.len())))?;
    if keys.len() != values.len() || keys.is_empty() {
        return Err(EditorError::Shape("key and value lists differ".into()));
    }
    for g in queries.iter().chain(keys) {
        if g.cells_h != q.cells_h || g.cells_w != q.cells_w || g.dim != q.dim {
            return Err(EditorError::Shape("query/key grids must share shape and dimension".into()));
        }
    }
    let dv = values[0].dim;
    if values.iter().any(|v| v.dim != dv || v.cells() != q.cells()) {
        return Err(EditorError::Shape("value grids must share shape".into()));
    }
    let q_rows: Vec<&[T]> = (0..q.cells()).map(|i| q.cell(i)).collect();
    let k_rows: Vec<&[T]> = keys.iter().flat_map(|g| (0..g.cells()).map(move |i| g.cell(i))).collect();
    let v_rows: Vec<&[T]> = values.iter().flat_map(|g| (0..g.cells()).map(move |i| g.cell(i))).collect();
    let rows = attention_rows(&q_rows, &k_rows, &v_rows)?;
    let mut out = FeatureGrid::zeros(q.cells_h, q.cells_w, dv, q.stride);
    for (i, r) in rows.iter().enumerate() {
        out.cell_mut(i).copy_from_slice(r);
    }
    Ok(out)
}
