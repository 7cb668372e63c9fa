use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Projects vectors onto the top two principal axes of their sample
/// covariance. Each axis is signed so its first nonzero loading is positive.
pub fn pca_2d(vectors: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least 3 vectors, got {n}"
        )));
    }
    let dim = vectors[0].len();
    if dim < 2 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape(
            "PCA inputs must share a width of at least 2".into(),
        ));
    }
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |r, c| vectors[r][c] - mean[c]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut axes = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        let mut axis = eig.eigenvectors.column(k).into_owned();
        if eig.eigenvalues[k] <= 1e-14 * scale.max(1e-300) {
            // no variance along this axis: project to zero
            axis.fill(0.0);
        } else if let Some(first) = axis.iter().copied().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                axis.neg_mut();
            }
        }
        axes.push(axis);
    }
    Ok((0..n)
        .map(|r| {
            let row = centered.row(r);
            [row.dot(&axes[0].transpose()), row.dot(&axes[1].transpose())]
        })
        .collect())
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette coefficient of a labelled point set (Euclidean). Points
/// alone in their cluster contribute 0.
pub fn silhouette_score<P: AsRef<[f64]>>(points: &[P], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Shape("one label per point required".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::InvalidArgument(
            "silhouette needs at least two clusters".into(),
        ));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; k];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += euclidean(p.as_ref(), q.as_ref());
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_vectors_project_to_origin() {
        let v = vec![vec![1.0, 2.0, 3.0]; 5];
        for p in pca_2d(&v).unwrap() {
            assert_eq!(p, [0.0, 0.0]);
        }
    }

    #[test]
    fn planar_data_preserves_distances() {
        let pts = [[1.0, 0.5], [-2.0, 0.3], [0.4, -1.7], [0.6, 0.9]];
        let mean = pts
            .iter()
            .fold([0.0, 0.0], |a, p| [a[0] + p[0] / 4.0, a[1] + p[1] / 4.0]);
        let v: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| vec![p[0] - mean[0], p[1] - mean[1]])
            .collect();
        let proj = pca_2d(&v).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d0 = ((v[i][0] - v[j][0]).powi(2) + (v[i][1] - v[j][1]).powi(2)).sqrt();
                let d1 =
                    ((proj[i][0] - proj[j][0]).powi(2) + (proj[i][1] - proj[j][1]).powi(2)).sqrt();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn too_few_vectors() {
        assert!(pca_2d(&[vec![1.0, 2.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn silhouette_two_clusters() {
        let pts = [[0.0], [1.0], [4.0], [5.0]];
        let s = silhouette_score(&pts, &[0, 0, 1, 1]).unwrap();
        assert!((s - 47.0 / 63.0).abs() < 1e-12);
        let swapped = silhouette_score(&pts, &[0, 1, 0, 1]).unwrap();
        assert!(swapped < 0.0);
        assert!(silhouette_score(&pts, &[0, 0, 0, 0]).is_err());
    }
}
