//! Two-component principal projection of latent dumps.

use anyhow::{bail, Result};
use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// Unit principal axes, largest variance first.
    pub axes: [Vec<f64>; 2],
    /// Variance captured along each axis.
    pub variance: [f64; 2],
    pub total_variance: f64,
    pub coords: Vec<[f64; 2]>,
}

/// Projects `points` onto their top two principal axes. Each axis is
/// signed so that its largest-magnitude component is positive, which keeps
/// the output stable across platforms.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Projection> {
    let n = points.len();
    let Some(d) = points.first().map(Vec::len) else {
        bail!("no points to project");
    };
    if d < 2 || points.iter().any(|p| p.len() != d) {
        bail!("points must share a width of at least 2");
    }
    let mut mean = vec![0.0; d];
    for p in points {
        mean.iter_mut().zip(p).for_each(|(m, x)| *m += x / n as f64);
    }
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |acc, c| if c.abs() > acc.abs() { c } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        v
    };
    let axes = [axis(0), axis(1)];
    let coords = (0..n)
        .map(|i| {
            let row = x.row(i);
            let dot = |a: &[f64]| row.iter().zip(a).map(|(r, c)| r * c).sum::<f64>();
            [dot(&axes[0]), dot(&axes[1])]
        })
        .collect();
    Ok(Projection {
        mean,
        variance: [eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]].max(0.0)],
        total_variance: eig.eigenvalues.iter().map(|v| v.max(0.0)).sum(),
        axes,
        coords,
    })
}
