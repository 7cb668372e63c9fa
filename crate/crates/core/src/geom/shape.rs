use nalgebra::{Matrix3, SymmetricEigen};

use super::Conformation;
use crate::error::{Error, Result};

/// `(1/N) sum (r_i - r_mean)(r_i - r_mean)^T`.
pub fn gyration_tensor(c: &Conformation) -> Matrix3<f64> {
    let mean = c.centroid();
    let mut s = Matrix3::zeros();
    for p in c.coords() {
        let d = p - mean;
        s += d * d.transpose();
    }
    s / c.len().max(1) as f64
}

/// Eigenvalues of the gyration tensor, descending and clipped at zero.
pub fn gyration_eigenvalues(c: &Conformation) -> [f64; 3] {
    let eig = SymmetricEigen::new(gyration_tensor(c));
    let mut l = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    l.sort_by(|a, b| b.total_cmp(a));
    l.map(|x| x.max(0.0))
}

/// Asphericity in `[0, 1]`: 0 for spherically symmetric point sets, 1 for
/// collinear ones.
pub fn asphericity(c: &Conformation) -> Result<f64> {
    let [l1, l2, l3] = gyration_eigenvalues(c);
    let trace = l1 + l2 + l3;
    // relative to the spread so that scale does not matter
    let scale = c
        .coords()
        .iter()
        .map(|p| p.norm_squared())
        .fold(0.0, f64::max)
        .max(1.0);
    if trace <= 1e-14 * scale {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let num = (l1 - l2).powi(2) + (l1 - l3).powi(2) + (l2 - l3).powi(2);
    Ok((num / (2.0 * trace * trace)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_point_is_zero_tensor() {
        let c = Conformation::from_rows(&[[1.0, 2.0, 3.0]; 4]);
        assert!(gyration_tensor(&c).norm() < 1e-15);
        assert!(asphericity(&c).is_err());
    }

    #[test]
    fn x_axis_points() {
        let c = Conformation::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let [l1, l2, l3] = gyration_eigenvalues(&c);
        assert!(l1 > 0.0);
        assert!(l2.abs() < 1e-15 && l3.abs() < 1e-15);
        assert!((asphericity(&c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cube_and_octahedron_are_spherical() {
        let mut cube = Vec::new();
        for x in [-1.0, 1.0] {
            for y in [-1.0, 1.0] {
                for z in [-1.0, 1.0] {
                    cube.push([x, y, z]);
                }
            }
        }
        let c = Conformation::from_rows(&cube);
        let [l1, l2, l3] = gyration_eigenvalues(&c);
        assert!((l1 - l2).abs() < 1e-12 && (l2 - l3).abs() < 1e-12);
        let oct = Conformation::from_rows(&[
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ]);
        assert!(asphericity(&oct).unwrap() < 1e-12);
    }

    #[test]
    fn planar_square_is_quarter() {
        let sq = Conformation::from_rows(&[
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, -1.0, 0.0],
        ]);
        assert!((asphericity(&sq).unwrap() - 0.25).abs() < 1e-12);
    }
}
