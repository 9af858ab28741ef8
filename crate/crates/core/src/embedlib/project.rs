use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `n` rows of `(x, y)`.
    pub coords: Vec<[f64; 2]>,
    /// The two principal axes.
    pub axes: [Vec<f64>; 2],
    /// Eigenvalues of the centered scatter matrix, descending.
    pub eigenvalues: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Projects onto the top two principal components. Each axis is signed so its
/// largest-magnitude loading is positive. One-dimensional input gets `y = 0`.
pub fn project_2d(vectors: &[Vec<f64>]) -> Result<Projection> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::Invalid("projection needs at least two vectors".into()));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d || v.iter().any(|x| !x.is_finite())) {
        return Err(Error::Invalid("vectors must share a positive dimension and be finite".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let eig = SymmetricEigen::new(x.transpose() * &x);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Vec<f64> {
        let Some(&c) = order.get(k) else {
            return vec![0.0; d];
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v.iter().enumerate().fold(0, |b, (i, x)| if x.abs() > v[b].abs() { i } else { b });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let axes = [axis(0), axis(1)];
    let coords = (0..n)
        .map(|i| {
            let row = x.row(i);
            let dot = |a: &[f64]| row.iter().zip(a).map(|(p, q)| p * q).sum::<f64>();
            [dot(&axes[0]), dot(&axes[1])]
        })
        .collect();
    Ok(Projection {
        coords,
        axes,
        eigenvalues: order.iter().map(|&c| eig.eigenvalues[c].max(0.0)).collect(),
        mean,
    })
}

/// `region_id,x,y,cluster`
pub fn write_projection_csv(path: &Path, region_ids: &[usize], p: &Projection, clusters: &[usize]) -> Result<()> {
    if region_ids.len() != p.coords.len() || clusters.len() != p.coords.len() {
        return Err(Error::Invalid("projection, ids and clusters differ in length".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["region_id", "x", "y", "cluster"])?;
    for ((id, c), k) in region_ids.iter().zip(&p.coords).zip(clusters) {
        w.write_record([id.to_string(), c[0].to_string(), c[1].to_string(), k.to_string()])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}
