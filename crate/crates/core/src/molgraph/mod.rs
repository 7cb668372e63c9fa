//! Molecular graph data model and atom/bond featurization.
//!
//! A [`MolecularGraph`] is the conformation-independent description of a
//! molecule: atoms as nodes, bonds as undirected edges. Hydrogens are explicit
//! nodes because every atom has to be placed when rebuilding coordinates.

mod io;

pub use io::{
    parse_molfile, parse_multi_xyz, parse_sdf, parse_xyz, parse_xyz_with, read_xyz_frames,
    write_molfile, write_multi_xyz, write_xyz, BondInference,
};

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Elements the featurizer knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    H,
    C,
    N,
    O,
    F,
    S,
    Cl,
}

impl Element {
    pub const ALL: [Element; 7] = [
        Element::H,
        Element::C,
        Element::N,
        Element::O,
        Element::F,
        Element::S,
        Element::Cl,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Element::H => "H",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::F => "F",
            Element::S => "S",
            Element::Cl => "Cl",
        }
    }

    /// Parses a symbol case-insensitively ("CL", "cl" and "Cl" all work).
    pub fn from_symbol(s: &str) -> Result<Element> {
        let s = s.trim();
        Element::ALL
            .iter()
            .copied()
            .find(|e| e.symbol().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownElement(s.to_string()))
    }

    /// Single-bond covalent radius in Å (Cordero et al. values).
    pub fn covalent_radius(self) -> f64 {
        match self {
            Element::H => 0.31,
            Element::C => 0.76,
            Element::N => 0.71,
            Element::O => 0.66,
            Element::F => 0.57,
            Element::S => 1.05,
            Element::Cl => 1.02,
        }
    }

    pub fn is_heavy(self) -> bool {
        self != Element::H
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

pub const MIN_CHARGE: i8 = -2;
pub const MAX_CHARGE: i8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Atom {
    pub element: Element,
    pub formal_charge: i8,
}

impl Atom {
    pub fn new(element: Element) -> Self {
        Atom {
            element,
            formal_charge: 0,
        }
    }

    pub fn with_charge(element: Element, formal_charge: i8) -> Result<Self> {
        if !(MIN_CHARGE..=MAX_CHARGE).contains(&formal_charge) {
            return Err(Error::UnsupportedCharge(formal_charge));
        }
        Ok(Atom {
            element,
            formal_charge,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub const ALL: [BondOrder; 4] = [
        BondOrder::Single,
        BondOrder::Double,
        BondOrder::Triple,
        BondOrder::Aromatic,
    ];

    /// MOL V2000 bond type code.
    pub fn mol_code(self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }

    pub fn from_mol_code(code: u8) -> Option<BondOrder> {
        match code {
            1 => Some(BondOrder::Single),
            2 => Some(BondOrder::Double),
            3 => Some(BondOrder::Triple),
            4 => Some(BondOrder::Aromatic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: BondOrder,
}

impl Bond {
    pub fn new(i: usize, j: usize, order: BondOrder) -> Self {
        Bond { i, j, order }
    }

    /// The atom pair with the lower index first.
    pub fn key(&self) -> (usize, usize) {
        (self.i.min(self.j), self.i.max(self.j))
    }
}

/// Problems found by [`MolecularGraph::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    TooFewAtoms(usize),
    SelfBond { bond: usize, atom: usize },
    AtomOutOfRange { bond: usize, atom: usize },
    DuplicateBond { i: usize, j: usize },
    Disconnected { components: usize },
    ChargeOutOfRange { atom: usize, charge: i8 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewAtoms(n) => write!(f, "graph has {n} atoms, need at least 2"),
            Violation::SelfBond { bond, atom } => {
                write!(f, "bond {bond} joins atom {atom} to itself")
            }
            Violation::AtomOutOfRange { bond, atom } => {
                write!(f, "bond {bond} references missing atom {atom}")
            }
            Violation::DuplicateBond { i, j } => write!(f, "duplicate bond ({i}, {j})"),
            Violation::Disconnected { components } => {
                write!(f, "graph has {components} connected components")
            }
            Violation::ChargeOutOfRange { atom, charge } => {
                write!(f, "atom {atom} has unsupported charge {charge}")
            }
        }
    }
}

/// The molecular graph: atoms, bonds and per-atom sorted neighbor lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MolecularGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    adjacency: Vec<Vec<usize>>,
}

impl MolecularGraph {
    /// Builds a graph and rejects it if [`validate`](Self::validate) reports anything.
    pub fn new(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Result<Self> {
        for (b, bond) in bonds.iter().enumerate() {
            for atom in [bond.i, bond.j] {
                if atom >= atoms.len() {
                    return Err(Error::AtomOutOfRange {
                        bond: b,
                        atom,
                        count: atoms.len(),
                    });
                }
            }
        }
        let g = Self::new_unchecked(atoms, bonds);
        let violations = g.validate();
        if let Some(v) = violations.first() {
            return Err(match v {
                Violation::Disconnected { components } => Error::Disconnected {
                    components: *components,
                },
                other => Error::InvalidGraph(other.to_string()),
            });
        }
        Ok(g)
    }

    /// Builds the adjacency lists without any checks. Out-of-range bonds are
    /// left out of the adjacency (they still show up in `validate`).
    pub fn new_unchecked(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Self {
        let mut adjacency = vec![Vec::new(); atoms.len()];
        for b in &bonds {
            if b.i < atoms.len() && b.j < atoms.len() && b.i != b.j {
                adjacency[b.i].push(b.j);
                adjacency[b.j].push(b.i);
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        MolecularGraph {
            atoms,
            bonds,
            adjacency,
        }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn num_bonds(&self) -> usize {
        self.bonds.len()
    }

    /// Sorted neighbor indices of atom `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn are_bonded(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].binary_search(&j).is_ok()
    }

    pub fn bond_between(&self, i: usize, j: usize) -> Option<&Bond> {
        let key = (i.min(j), i.max(j));
        self.bonds.iter().find(|b| b.key() == key)
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.atoms.len();
        if n < 2 {
            out.push(Violation::TooFewAtoms(n));
        }
        for (idx, a) in self.atoms.iter().enumerate() {
            if !(MIN_CHARGE..=MAX_CHARGE).contains(&a.formal_charge) {
                out.push(Violation::ChargeOutOfRange {
                    atom: idx,
                    charge: a.formal_charge,
                });
            }
        }
        let mut seen = BTreeSet::new();
        for (b, bond) in self.bonds.iter().enumerate() {
            if bond.i >= n || bond.j >= n {
                let atom = if bond.i >= n { bond.i } else { bond.j };
                out.push(Violation::AtomOutOfRange { bond: b, atom });
                continue;
            }
            if bond.i == bond.j {
                out.push(Violation::SelfBond {
                    bond: b,
                    atom: bond.i,
                });
                continue;
            }
            let key = bond.key();
            if !seen.insert(key) {
                out.push(Violation::DuplicateBond { i: key.0, j: key.1 });
            }
        }
        if n > 0 {
            let components = self.connected_components();
            if components > 1 {
                out.push(Violation::Disconnected { components });
            }
        }
        out
    }

    fn connected_components(&self) -> usize {
        let n = self.atoms.len();
        let mut seen = vec![false; n];
        let mut components = 0;
        for start in 0..n {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(a) = queue.pop_front() {
                for &b in &self.adjacency[a] {
                    if !seen[b] {
                        seen[b] = true;
                        queue.push_back(b);
                    }
                }
            }
        }
        components
    }

    /// Relabels atoms: atom `order[k]` of `self` becomes atom `k` of the result.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.atoms.len();
        let inverse = inverse_permutation(order, n)?;
        let atoms = order.iter().map(|&old| self.atoms[old]).collect();
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond::new(inverse[b.i], inverse[b.j], b.order))
            .collect();
        Ok(Self::new_unchecked(atoms, bonds))
    }

    /// Shortest-path bond counts from `source` to every atom (`usize::MAX` if unreachable).
    pub fn graph_distances(&self, source: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.atoms.len()];
        dist[source] = 0;
        let mut queue = VecDeque::from([source]);
        while let Some(a) = queue.pop_front() {
            for &b in &self.adjacency[a] {
                if dist[b] == usize::MAX {
                    dist[b] = dist[a] + 1;
                    queue.push_back(b);
                }
            }
        }
        dist
    }
}

/// Inverts `order` (new -> old) into old -> new, checking it is a permutation of `0..n`.
pub fn inverse_permutation(order: &[usize], n: usize) -> Result<Vec<usize>> {
    if order.len() != n {
        return Err(Error::InvalidArgument(format!(
            "permutation has length {}, expected {n}",
            order.len()
        )));
    }
    let mut inverse = vec![usize::MAX; n];
    for (new, &old) in order.iter().enumerate() {
        if old >= n || inverse[old] != usize::MAX {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
        inverse[old] = new;
    }
    Ok(inverse)
}

/// One-hot layout for atom and bond features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub elements: Vec<Element>,
    pub charges: Vec<i8>,
    pub bond_orders: Vec<BondOrder>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            elements: Element::ALL.to_vec(),
            charges: (MIN_CHARGE..=MAX_CHARGE).collect(),
            bond_orders: BondOrder::ALL.to_vec(),
        }
    }
}

impl FeatureConfig {
    /// Atom feature width F_v.
    pub fn atom_width(&self) -> usize {
        self.elements.len() + self.charges.len()
    }

    /// Bond feature width F_e.
    pub fn bond_width(&self) -> usize {
        self.bond_orders.len()
    }

    /// Number of one-hot segments in an atom row (each row sums to this).
    pub fn atom_segments(&self) -> usize {
        2
    }
}

/// Atom feature matrix `[N x F_v]`: element one-hot followed by charge one-hot.
pub fn featurize_atoms(g: &MolecularGraph, cfg: &FeatureConfig) -> Result<Tensor> {
    let width = cfg.atom_width();
    let mut data = vec![0.0; g.num_atoms() * width];
    for (row, atom) in g.atoms().iter().enumerate() {
        let e = cfg
            .elements
            .iter()
            .position(|&x| x == atom.element)
            .ok_or_else(|| Error::UnknownElement(atom.element.symbol().into()))?;
        let c = cfg
            .charges
            .iter()
            .position(|&x| x == atom.formal_charge)
            .ok_or(Error::UnsupportedCharge(atom.formal_charge))?;
        data[row * width + e] = 1.0;
        data[row * width + cfg.elements.len() + c] = 1.0;
    }
    Ok(Tensor::from_vec(g.num_atoms(), width, data))
}

/// Bond feature matrix `[|E| x F_e]`, one row per bond in graph order.
pub fn featurize_bonds(g: &MolecularGraph, cfg: &FeatureConfig) -> Result<Tensor> {
    let width = cfg.bond_width();
    let mut data = vec![0.0; g.num_bonds() * width];
    for (row, bond) in g.bonds().iter().enumerate() {
        let o = cfg
            .bond_orders
            .iter()
            .position(|&x| x == bond.order)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("bond order {:?} not in feature config", bond.order))
            })?;
        data[row * width + o] = 1.0;
    }
    Ok(Tensor::from_vec(g.num_bonds(), width, data))
}
