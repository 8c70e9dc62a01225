//! Two-dimensional projection of embeddings and a scatter-plot writer.

use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::{Error, Result};

/// Projects rows onto their two leading principal components. Each axis is
/// signed so that its largest-magnitude loading is positive, which makes the
/// result a deterministic function of the input.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Empty("projection needs at least two points".into()));
    }
    let d = rows[0].len();
    if d < 2 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Config("projection needs equal-length rows of width >= 2".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let (a, b) = (axis(0), axis(1));
    Ok((0..n)
        .map(|i| {
            let row = x.row(i);
            let p = |v: &[f64]| row.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
            [p(&a), p(&b)]
        })
        .collect())
}

fn color(label: usize, classes: usize) -> Rgb<u8> {
    let h = label as f64 / classes.max(1) as f64 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let c = |v: f64| (40.0 + 200.0 * v) as u8;
    Rgb([c(r), c(g), c(b)])
}

/// Writes a `size x size` PNG with one 3x3 dot per point, coloured by label.
pub fn scatter_png(points: &[[f64; 2]], labels: &[usize], classes: usize, size: u32, path: &Path) -> Result<()> {
    if points.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "scatter labels".into(),
            expected: points.len(),
            got: labels.len(),
        });
    }
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let range = |k: usize| {
        let lo = points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-12))
    };
    let (rx, ry) = (range(0), range(1));
    let margin = 8.0;
    let span = size as f64 - 2.0 * margin;
    for (p, &l) in points.iter().zip(labels) {
        let px = (margin + (p[0] - rx.0) / rx.1 * span).round() as i64;
        let py = (margin + (1.0 - (p[1] - ry.0) / ry.1) * span).round() as i64;
        for dx in -1..=1 {
            for dy in -1..=1 {
                let (x, y) = (px + dx, py + dy);
                if x >= 0 && y >= 0 && x < size as i64 && y < size as i64 {
                    img.put_pixel(x as u32, y as u32, color(l, classes));
                }
            }
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}
