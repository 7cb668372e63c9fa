//! Geometry: internal coordinates, Cartesian reconstruction, alignment and
//! shape descriptors.
//!
//! Dihedral sign convention used everywhere in this crate: for points
//! `a, b, c, d` with `b1 = b - a`, `b2 = c - b`, `b3 = d - c`,
//! `psi = atan2(b2_hat . (n1 x n2), n1 . n2)` where `n1 = b1 x b2` and
//! `n2 = b2 x b3`. With this convention
//! `(0,1,0), (0,0,0), (1,0,0), (1,0,1)` has torsion `+pi/2`.

mod align;
mod internal;
mod pca;
mod shape;
mod zmatrix;

pub use align::{icrmsd, kabsch_rmsd, kabsch_superpose, pairwise_rmsd};
pub use internal::{enumerate_tuples, extract_internal, InternalCoordinates, TupleSet};
pub use pca::{pca_2d, silhouette_score};
pub use shape::{asphericity, gyration_eigenvalues, gyration_tensor};
pub use zmatrix::{
    build_placement_plan, place_atom, to_cartesian, Placement, PlacementPlan, References,
};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::molgraph::inverse_permutation;

pub type Vec3 = Vector3<f64>;

/// Arms and axes shorter than this (Å) count as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-8;

/// Cartesian coordinates in Å, one row per atom.
#[derive(Debug, Clone, PartialEq)]
pub struct Conformation {
    coords: Vec<Vec3>,
}

impl Conformation {
    pub fn new(coords: Vec<Vec3>) -> Self {
        Conformation { coords }
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Self {
        Conformation {
            coords: rows.iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect(),
        }
    }

    pub fn coords(&self) -> &[Vec3] {
        &self.coords
    }

    pub fn coords_mut(&mut self) -> &mut [Vec3] {
        &mut self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn centroid(&self) -> Vec3 {
        let sum: Vec3 = self.coords.iter().sum();
        sum / self.coords.len().max(1) as f64
    }

    /// Reorders atoms the same way as [`MolecularGraph::permuted`](crate::molgraph::MolecularGraph::permuted).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        inverse_permutation(order, self.coords.len())?;
        Ok(Conformation {
            coords: order.iter().map(|&old| self.coords[old]).collect(),
        })
    }

    /// `r -> rotation * r + translation` for every atom.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vec3) -> Self {
        Conformation {
            coords: self
                .coords
                .iter()
                .map(|p| rotation * p + translation)
                .collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Conformation {
            coords: self.coords.iter().map(|p| p * factor).collect(),
        }
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        (self.coords[i] - self.coords[j]).norm()
    }
}

/// Angle at vertex `b` in `[0, pi]`.
pub fn bond_angle(a: &Vec3, b: &Vec3, c: &Vec3) -> Result<f64> {
    let u = a - b;
    let v = c - b;
    let (nu, nv) = (u.norm(), v.norm());
    if nu < DEGENERACY_TOL || nv < DEGENERACY_TOL {
        return Err(Error::Degenerate("zero-length arm in bond angle".into()));
    }
    // atan2 form stays accurate near 0 and pi
    Ok(u.cross(&v).norm().atan2(u.dot(&v)))
}

/// Signed torsion in `(-pi, pi]`, see the module docs for the convention.
pub fn dihedral_angle(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> Result<f64> {
    let b1 = b - a;
    let b2 = c - b;
    let b3 = d - c;
    let axis = b2.norm();
    if axis < DEGENERACY_TOL {
        return Err(Error::Degenerate("zero-length dihedral axis".into()));
    }
    let n1 = b1.cross(&b2);
    let n2 = b2.cross(&b3);
    if n1.norm() < DEGENERACY_TOL * axis || n2.norm() < DEGENERACY_TOL * axis {
        return Err(Error::Degenerate("dihedral arm collinear with axis".into()));
    }
    let y = (b2 / axis).dot(&n1.cross(&n2));
    let x = n1.dot(&n2);
    let psi = y.atan2(x);
    // atan2 returns -pi for (-0, negative); fold onto +pi
    Ok(if psi <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        psi
    })
}

/// Maps any angle onto `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut y = x.rem_euclid(TAU);
    if y > PI {
        y -= TAU;
    }
    y
}
