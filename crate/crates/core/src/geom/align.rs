//! Kabsch superposition and RMSD.

use nalgebra::Matrix3;

use super::{Conformation, Vec3};
use crate::error::{Error, Result};

/// Optimal proper rotation `r` and translation `t` such that `r * b_i + t`
/// best matches `a_i` in the least-squares sense.
pub fn kabsch_superpose(a: &Conformation, b: &Conformation) -> Result<(Matrix3<f64>, Vec3)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "atom counts differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot align empty conformations".into(),
        ));
    }
    let ca = a.centroid();
    let cb = b.centroid();
    let mut h = Matrix3::zeros();
    for (p, q) in b.coords().iter().zip(a.coords()) {
        h += (p - cb) * (q - ca).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::NonFinite("SVD failed".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::NonFinite("SVD failed".into()))?;
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, if d < 0.0 { -1.0 } else { 1.0 }));
    let r = v * correction * u.transpose();
    let t = ca - r * cb;
    Ok((r, t))
}

/// Minimal RMSD over proper rotations and translations (no reflections).
pub fn kabsch_rmsd(a: &Conformation, b: &Conformation) -> Result<f64> {
    let (r, t) = kabsch_superpose(a, b)?;
    let sum: f64 = a
        .coords()
        .iter()
        .zip(b.coords())
        .map(|(p, q)| (p - (r * q + t)).norm_squared())
        .sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// Symmetric matrix of pairwise Kabsch RMSDs.
pub fn pairwise_rmsd(confs: &[Conformation]) -> Result<Vec<Vec<f64>>> {
    let k = confs.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let r = kabsch_rmsd(&confs[i], &confs[j])?;
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    Ok(m)
}

/// Mean Kabsch RMSD over all unordered pairs.
pub fn icrmsd(confs: &[Conformation]) -> Result<f64> {
    if confs.len() < 2 {
        return Err(Error::InvalidArgument(
            "icRMSD needs at least 2 conformations".into(),
        ));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..confs.len() {
        for j in i + 1..confs.len() {
            sum += kabsch_rmsd(&confs[i], &confs[j])?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};

    fn sample() -> Conformation {
        Conformation::from_rows(&[
            [0.0, 0.0, 0.0],
            [1.5, 0.1, -0.2],
            [2.0, 1.4, 0.3],
            [3.4, 1.6, 1.0],
            [-0.6, -0.9, 0.8],
        ])
    }

    #[test]
    fn identical_is_zero() {
        let a = sample();
        assert!(kabsch_rmsd(&a, &a).unwrap() < 1e-12);
    }

    #[test]
    fn rigid_motion_is_invisible() {
        let a = sample();
        let axis = Unit::new_normalize(Vec3::new(0.3, -1.0, 0.7));
        let rot = Rotation3::from_axis_angle(&axis, 2.2);
        let b = a.transformed(rot.matrix(), &Vec3::new(4.0, -2.0, 9.0));
        assert!(kabsch_rmsd(&a, &b).unwrap() < 1e-9);
        assert!(kabsch_rmsd(&b, &a).unwrap() < 1e-9);
    }

    #[test]
    fn mirror_image_not_matched() {
        let a = sample();
        let mirror = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        let b = a.transformed(&mirror, &Vec3::zeros());
        assert!(kabsch_rmsd(&a, &b).unwrap() > 1e-3);
    }

    #[test]
    fn atom_count_mismatch() {
        let a = sample();
        let b = Conformation::from_rows(&[[0.0; 3]]);
        assert!(kabsch_rmsd(&a, &b).is_err());
    }

    #[test]
    fn icrmsd_pairs() {
        let a = sample();
        let b = a.scaled(1.1);
        let c = a.scaled(0.8);
        let same = icrmsd(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert!(same < 1e-12);
        let two = icrmsd(&[a.clone(), b.clone()]).unwrap();
        assert!((two - kabsch_rmsd(&a, &b).unwrap()).abs() < 1e-15);
        let three = icrmsd(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let direct = (kabsch_rmsd(&a, &b).unwrap()
            + kabsch_rmsd(&a, &c).unwrap()
            + kabsch_rmsd(&b, &c).unwrap())
            / 3.0;
        assert!((three - direct).abs() < 1e-15);
        assert!(icrmsd(&[a]).is_err());
    }
}
