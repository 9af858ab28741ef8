use super::library::{EmbeddingRecord, Level};
use crate::error::{Error, Result};

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Exhaustive cosine search. Scores descend; ties go to the lower region id.
/// Stored zero vectors score 0.
pub fn top_k_similar(records: &[EmbeddingRecord], query: &[f64], k: usize, level: Option<Level>) -> Result<Vec<(usize, f64)>> {
    let qn = norm(query.iter().copied());
    if qn == 0.0 || !qn.is_finite() {
        return Err(Error::Invalid("query vector has zero or non-finite norm".into()));
    }
    let pool: Vec<&EmbeddingRecord> = records.iter().filter(|r| level.is_none_or(|l| r.level == l)).collect();
    if k > pool.len() {
        return Err(Error::Invalid(format!("k = {k} exceeds the {} candidate records", pool.len())));
    }
    let mut scored = Vec::with_capacity(pool.len());
    for r in pool {
        if r.vector.len() != query.len() {
            return Err(Error::Shape(format!("query has dimension {}, library {}", query.len(), r.vector.len())));
        }
        let rn = norm(r.vector.iter().map(|&v| f64::from(v)));
        let dot: f64 = r.vector.iter().zip(query).map(|(&a, b)| f64::from(a) * b).sum();
        scored.push((r.region_id, if rn == 0.0 { 0.0 } else { dot / (rn * qn) }));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}
