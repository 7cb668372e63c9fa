use std::collections::HashMap;

use super::{bond_angle, dihedral_angle, Conformation};
use crate::error::{Error, Result};
use crate::molgraph::MolecularGraph;

/// Index tuples of all bond lengths, bond angles and proper dihedrals.
///
/// Orientation is canonical: distances `(i, j)` with `i < j`, angles
/// `(i, j, k)` with `i < k`, dihedrals `(i, j, k, l)` with `j < k`. Each list
/// is sorted lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TupleSet {
    pub distances: Vec<[usize; 2]>,
    pub angles: Vec<[usize; 3]>,
    pub dihedrals: Vec<[usize; 4]>,
}

impl TupleSet {
    pub fn len(&self) -> usize {
        self.distances.len() + self.angles.len() + self.dihedrals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sort(&mut self) {
        self.distances.sort_unstable();
        self.angles.sort_unstable();
        self.dihedrals.sort_unstable();
    }
}

pub fn canonical_distance(i: usize, j: usize) -> [usize; 2] {
    if i < j {
        [i, j]
    } else {
        [j, i]
    }
}

pub fn canonical_angle(i: usize, j: usize, k: usize) -> [usize; 3] {
    if i < k {
        [i, j, k]
    } else {
        [k, j, i]
    }
}

pub fn canonical_dihedral(i: usize, j: usize, k: usize, l: usize) -> [usize; 4] {
    if j < k {
        [i, j, k, l]
    } else {
        [l, k, j, i]
    }
}

/// Enumerates every bonded pair, every path `i-j-k` and every path `i-j-k-l`
/// of four distinct atoms.
pub fn enumerate_tuples(g: &MolecularGraph) -> TupleSet {
    let mut set = TupleSet::default();
    for b in g.bonds() {
        set.distances.push(canonical_distance(b.i, b.j));
    }
    for j in 0..g.num_atoms() {
        let nbrs = g.neighbors(j);
        for (a, &i) in nbrs.iter().enumerate() {
            for &k in &nbrs[a + 1..] {
                set.angles.push([i, j, k]);
            }
        }
    }
    for b in g.bonds() {
        let [j, k] = canonical_distance(b.i, b.j);
        for &i in g.neighbors(j) {
            if i == k {
                continue;
            }
            for &l in g.neighbors(k) {
                if l == j || l == i {
                    continue;
                }
                set.dihedrals.push([i, j, k, l]);
            }
        }
    }
    set.sort();
    set
}

/// Values for a [`TupleSet`]: lengths in Å, angles in `[0, pi]`, torsions in `(-pi, pi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InternalCoordinates {
    pub tuples: TupleSet,
    pub distances: Vec<f64>,
    pub angles: Vec<f64>,
    pub dihedrals: Vec<f64>,
}

impl InternalCoordinates {
    pub fn n_distances(&self) -> usize {
        self.distances.len()
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn n_dihedrals(&self) -> usize {
        self.dihedrals.len()
    }

    /// N_Xi = N_D + N_Phi + N_Psi.
    pub fn total(&self) -> usize {
        self.n_distances() + self.n_angles() + self.n_dihedrals()
    }

    pub fn is_consistent(&self) -> bool {
        self.tuples.distances.len() == self.distances.len()
            && self.tuples.angles.len() == self.angles.len()
            && self.tuples.dihedrals.len() == self.dihedrals.len()
    }

    /// Lookup tables keyed by canonical tuple.
    pub fn index(&self) -> CoordinateIndex<'_> {
        CoordinateIndex {
            ic: self,
            distances: self
                .tuples
                .distances
                .iter()
                .enumerate()
                .map(|(n, t)| (*t, n))
                .collect(),
            angles: self
                .tuples
                .angles
                .iter()
                .enumerate()
                .map(|(n, t)| (*t, n))
                .collect(),
            dihedrals: self
                .tuples
                .dihedrals
                .iter()
                .enumerate()
                .map(|(n, t)| (*t, n))
                .collect(),
        }
    }

    /// Returns a copy with tuples (and values) in sorted order.
    pub fn sorted(&self) -> InternalCoordinates {
        fn sort_pairs<T: Ord + Copy>(tuples: &[T], values: &[f64]) -> (Vec<T>, Vec<f64>) {
            let mut idx: Vec<usize> = (0..tuples.len()).collect();
            idx.sort_by(|&a, &b| tuples[a].cmp(&tuples[b]));
            (
                idx.iter().map(|&i| tuples[i]).collect(),
                idx.iter().map(|&i| values[i]).collect(),
            )
        }
        let (dt, dv) = sort_pairs(&self.tuples.distances, &self.distances);
        let (at, av) = sort_pairs(&self.tuples.angles, &self.angles);
        let (ht, hv) = sort_pairs(&self.tuples.dihedrals, &self.dihedrals);
        InternalCoordinates {
            tuples: TupleSet {
                distances: dt,
                angles: at,
                dihedrals: ht,
            },
            distances: dv,
            angles: av,
            dihedrals: hv,
        }
    }
}

pub struct CoordinateIndex<'a> {
    ic: &'a InternalCoordinates,
    distances: HashMap<[usize; 2], usize>,
    angles: HashMap<[usize; 3], usize>,
    dihedrals: HashMap<[usize; 4], usize>,
}

impl CoordinateIndex<'_> {
    pub fn distance(&self, i: usize, j: usize) -> Result<f64> {
        let t = canonical_distance(i, j);
        self.distances
            .get(&t)
            .map(|&n| self.ic.distances[n])
            .ok_or_else(|| Error::MissingCoordinate(format!("distance {t:?}")))
    }

    pub fn angle(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        let t = canonical_angle(i, j, k);
        self.angles
            .get(&t)
            .map(|&n| self.ic.angles[n])
            .ok_or_else(|| Error::MissingCoordinate(format!("angle {t:?}")))
    }

    /// Torsions are unchanged by reversing the tuple, so either orientation works.
    pub fn dihedral(&self, i: usize, j: usize, k: usize, l: usize) -> Result<f64> {
        let t = canonical_dihedral(i, j, k, l);
        self.dihedrals
            .get(&t)
            .map(|&n| self.ic.dihedrals[n])
            .ok_or_else(|| Error::MissingCoordinate(format!("dihedral {t:?}")))
    }
}

pub fn extract_internal(g: &MolecularGraph, c: &Conformation) -> Result<InternalCoordinates> {
    if c.len() != g.num_atoms() {
        return Err(Error::Shape(format!(
            "conformation has {} atoms, graph has {}",
            c.len(),
            g.num_atoms()
        )));
    }
    let tuples = enumerate_tuples(g);
    let p = c.coords();
    let distances = tuples
        .distances
        .iter()
        .map(|&[i, j]| {
            let d = (p[i] - p[j]).norm();
            if d < super::DEGENERACY_TOL {
                Err(Error::Degenerate(format!(
                    "coincident bonded atoms ({i}, {j})"
                )))
            } else {
                Ok(d)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let angles = tuples
        .angles
        .iter()
        .map(|&[i, j, k]| {
            bond_angle(&p[i], &p[j], &p[k])
                .map_err(|e| Error::Degenerate(format!("angle ({i}, {j}, {k}): {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let dihedrals = tuples
        .dihedrals
        .iter()
        .map(|&[i, j, k, l]| {
            dihedral_angle(&p[i], &p[j], &p[k], &p[l])
                .map_err(|e| Error::Degenerate(format!("dihedral ({i}, {j}, {k}, {l}): {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InternalCoordinates {
        tuples,
        distances,
        angles,
        dihedrals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::molgraph::{Atom, Bond, BondOrder, Element};
    use std::f64::consts::FRAC_PI_2;

    fn chain(n: usize) -> MolecularGraph {
        let atoms = vec![Atom::new(Element::C); n];
        let bonds = (1..n)
            .map(|i| Bond::new(i - 1, i, BondOrder::Single))
            .collect();
        MolecularGraph::new(atoms, bonds).unwrap()
    }

    #[test]
    fn chain_counts() {
        let t3 = enumerate_tuples(&chain(3));
        assert_eq!(
            (t3.distances.len(), t3.angles.len(), t3.dihedrals.len()),
            (2, 1, 0)
        );
        let t4 = enumerate_tuples(&chain(4));
        assert_eq!(
            (t4.distances.len(), t4.angles.len(), t4.dihedrals.len()),
            (3, 2, 1)
        );
        assert_eq!(t4.dihedrals, vec![[0, 1, 2, 3]]);
    }

    #[test]
    fn three_ring_has_no_dihedrals() {
        let atoms = vec![Atom::new(Element::C); 3];
        let bonds = vec![
            Bond::new(0, 1, BondOrder::Single),
            Bond::new(1, 2, BondOrder::Single),
            Bond::new(0, 2, BondOrder::Single),
        ];
        let g = MolecularGraph::new(atoms, bonds).unwrap();
        let t = enumerate_tuples(&g);
        assert_eq!(
            (t.distances.len(), t.angles.len(), t.dihedrals.len()),
            (3, 3, 0)
        );
    }

    #[test]
    fn tetrahedral_methane() {
        let atoms = std::iter::once(Atom::new(Element::C))
            .chain(std::iter::repeat_n(Atom::new(Element::H), 4))
            .collect();
        let bonds = (1..5).map(|i| Bond::new(0, i, BondOrder::Single)).collect();
        let g = MolecularGraph::new(atoms, bonds).unwrap();
        let s = 1.09 / 3f64.sqrt();
        let c = Conformation::new(vec![
            Vec3::zeros(),
            Vec3::new(s, s, s),
            Vec3::new(s, -s, -s),
            Vec3::new(-s, s, -s),
            Vec3::new(-s, -s, s),
        ]);
        let ic = extract_internal(&g, &c).unwrap();
        assert_eq!(ic.n_distances(), 4);
        assert_eq!(ic.n_angles(), 6);
        assert_eq!(ic.n_dihedrals(), 0);
        for d in &ic.distances {
            assert!((d - 1.09).abs() < 1e-12);
        }
        let tet = (-1.0f64 / 3.0).acos();
        assert!((tet - 1.9106).abs() < 1e-4);
        for a in &ic.angles {
            assert!((a - tet).abs() < 1e-12);
        }
    }

    #[test]
    fn right_angle_fixture() {
        let g = chain(3);
        let c = Conformation::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.5, 0.0]]);
        let ic = extract_internal(&g, &c).unwrap();
        assert_eq!(ic.angles.len(), 1);
        assert!((ic.angles[0] - FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn degenerate_geometry_names_tuple() {
        let g = chain(3);
        let c = Conformation::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let err = extract_internal(&g, &c).unwrap_err();
        assert!(err.to_string().contains("(1, 2)"), "{err}");
    }
}
