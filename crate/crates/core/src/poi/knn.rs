use crate::error::{Error, Result};

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    dx * dx + dy * dy
}

/// The `k` points closest to `points[i]`, excluding `i`, by Euclidean
/// distance with ties broken by lower index.
pub fn knn_neighbors(points: &[(f64, f64)], i: usize, k: usize) -> Result<Vec<usize>> {
    if i >= points.len() {
        return Err(Error::Invalid(format!("point {i} out of range for {} points", points.len())));
    }
    if k >= points.len() {
        return Err(Error::Invalid(format!("k = {k} needs more than {} points", points.len())));
    }
    let mut cand: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, &p)| (dist2(points[i], p), j))
        .collect();
    if k < cand.len() {
        cand.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cand.truncate(k);
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(cand.into_iter().map(|(_, j)| j).collect())
}

/// Neighbor lists for every point.
pub fn all_knn(points: &[(f64, f64)], k: usize) -> Result<Vec<Vec<usize>>> {
    (0..points.len()).map(|i| knn_neighbors(points, i, k)).collect()
}
