//! How well per-type embeddings separate: Gaussian Bhattacharyya distance
//! between type clusters and the mean silhouette.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    /// Symmetric, zero diagonal.
    pub matrix: Vec<Vec<f64>>,
    pub min: f64,
    pub mean: f64,
}

fn moments(xs: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = xs.len();
    if n < 2 {
        return Err(Error::InvalidInput("need at least two samples per type".into()));
    }
    let d = xs[0].len();
    if xs.iter().any(|x| x.len() != d) {
        return Err(Error::InvalidInput("ragged embeddings".into()));
    }
    let mut mu = DVector::zeros(d);
    for x in xs {
        mu += DVector::from_column_slice(x);
    }
    mu /= n as f64;
    let mut s = DMatrix::zeros(d, d);
    for x in xs {
        let c = DVector::from_column_slice(x) - &mu;
        s += &c * c.transpose();
    }
    s /= (n - 1) as f64;
    for i in 0..d {
        s[(i, i)] += RIDGE;
    }
    Ok((mu, s))
}

fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let ch = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("covariance is not positive definite".into()))?;
    Ok(2.0 * ch.l().diagonal().iter().map(|x| x.ln()).sum::<f64>())
}

/// `1/8 dmu' S^-1 dmu + 1/2 ln(det S / sqrt(det S1 det S2))`, `S = (S1+S2)/2`.
pub fn gaussian_bhattacharyya(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let s = (s1 + s2) * 0.5;
    let dm = mu1 - mu2;
    let ch = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("pooled covariance is not positive definite".into()))?;
    let sol = ch.solve(&dm);
    let maha = dm.dot(&sol);
    let ld = log_det_spd(&s)?;
    let (l1, l2) = (log_det_spd(s1)?, log_det_spd(s2)?);
    Ok((0.125 * maha + 0.5 * (ld - 0.5 * (l1 + l2))).max(0.0))
}

/// Pairwise distances between the Gaussian fits of each group.
pub fn bhattacharyya(groups: &[Vec<Vec<f64>>]) -> Result<Separability> {
    if groups.len() < 2 {
        return Err(Error::InvalidInput("need at least two groups".into()));
    }
    let fits = groups.iter().map(|g| moments(g)).collect::<Result<Vec<_>>>()?;
    let k = fits.len();
    let mut matrix = vec![vec![0.0; k]; k];
    let mut off = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            let d = gaussian_bhattacharyya(&fits[i].0, &fits[i].1, &fits[j].0, &fits[j].1)?;
            matrix[i][j] = d;
            matrix[j][i] = d;
            off.push(d);
        }
    }
    Ok(Separability {
        min: off.iter().copied().fold(f64::INFINITY, f64::min),
        mean: off.iter().sum::<f64>() / off.len() as f64,
        matrix,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette with Euclidean distances. Members of singleton clusters
/// score zero. Fewer than two distinct labels is degenerate and scores zero.
pub fn silhouette(xs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if xs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: labels.len(),
        });
    }
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        log::warn!("silhouette with a single cluster is undefined; reporting 0");
        return Ok(0.0);
    }
    let k = ids.len();
    let pos = |l: usize| ids.binary_search(&l).unwrap();
    let sizes: Vec<usize> = (0..k).map(|c| labels.iter().filter(|&&l| pos(l) == c).count()).collect();
    let mut total = 0.0;
    for i in 0..xs.len() {
        let ci = pos(labels[i]);
        if sizes[ci] < 2 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..xs.len() {
            if i != j {
                sums[pos(labels[j])] += dist(&xs[i], &xs[j]);
            }
        }
        let a = sums[ci] / (sizes[ci] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != ci)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / xs.len() as f64)
}
