//! Deterministic synthetic molecules and conformers.
//!
//! Templates are chains of 4 to 12 heavy atoms with an optional heteroatom
//! end, methyl branches and a terminal planar ring, with explicit hydrogens.
//! Atoms are numbered breadth-first from the chain end (hydrogens after all
//! heavy atoms), and the substituents of every center are placed in index
//! order with one fixed handedness. Conformers use ideal bond angles, jittered
//! bond lengths and staggered rotamers with small torsional noise.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geom::{bond_angle, place_atom, Conformation, Vec3};
use crate::molgraph::{parse_sdf, write_molfile, Atom, Bond, BondOrder, Element, MolecularGraph};

/// Tetrahedral angle `arccos(-1/3)`.
pub fn tetrahedral_angle() -> f64 {
    (-1.0f64 / 3.0).acos()
}

/// Staggered torsion centers.
pub const ROTAMERS: [f64; 3] = [-PI / 3.0, PI / 3.0, PI];
pub const TORSION_JITTER: f64 = 0.05;
pub const LENGTH_JITTER: f64 = 0.01;
pub const AROMATIC_LENGTH: f64 = 1.39;
/// Nonbonded pairs closer than this count as clashes.
pub const CLASH_DISTANCE: f64 = 0.7;
/// Contact distance of the strain score's repulsive term.
pub const CONTACT_DISTANCE: f64 = 1.8;

/// Ideal single-bond length in Å.
pub fn ideal_length(a: Element, b: Element, order: BondOrder) -> f64 {
    use Element::*;
    if order == BondOrder::Aromatic {
        return AROMATIC_LENGTH;
    }
    let (x, y) = if a <= b { (a, b) } else { (b, a) };
    match (x, y) {
        (C, C) => 1.54,
        (H, C) => 1.09,
        (C, O) => 1.43,
        (C, N) => 1.47,
        (C, F) => 1.35,
        (C, Cl) => 1.77,
        (C, S) => 1.82,
        (H, O) => 0.96,
        (H, N) => 1.01,
        (H, S) => 1.34,
        _ => x.covalent_radius() + y.covalent_radius(),
    }
}

fn valence(e: Element) -> usize {
    match e {
        Element::C => 4,
        Element::N => 3,
        Element::O | Element::S => 2,
        Element::H | Element::F | Element::Cl => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RingKind {
    /// Six-membered aromatic carbon ring.
    Phenyl,
    /// Five-membered aromatic ring with the oxygen next to the attachment atom.
    Furyl,
}

impl RingKind {
    fn elements(self) -> Vec<Element> {
        match self {
            RingKind::Phenyl => vec![Element::C; 6],
            RingKind::Furyl => vec![Element::C, Element::O, Element::C, Element::C, Element::C],
        }
    }
}

/// Topology of a template molecule.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    /// Number of chain atoms, including the end atom.
    pub length: usize,
    /// Element of chain atom 0 (the other chain atoms are carbon).
    pub end: Element,
    /// Chain positions carrying a methyl branch (interior positions only).
    pub branches: Vec<usize>,
    /// Ring attached to the last chain atom.
    pub ring: Option<RingKind>,
}

impl ChainSpec {
    pub fn alkane(length: usize) -> Self {
        ChainSpec {
            length,
            end: Element::C,
            branches: vec![],
            ring: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.length) {
            return Err(Error::InvalidArgument(format!(
                "chain length {} outside 2..=16",
                self.length
            )));
        }
        if !matches!(
            self.end,
            Element::C | Element::N | Element::O | Element::S | Element::F | Element::Cl
        ) {
            return Err(Error::InvalidArgument(format!(
                "unsupported chain end {}",
                self.end
            )));
        }
        let last = if self.ring.is_some() {
            self.length
        } else {
            self.length - 1
        };
        for &b in &self.branches {
            if b == 0 || b >= last {
                return Err(Error::InvalidArgument(format!(
                    "branch position {b} is not interior"
                )));
            }
        }
        let mut sorted = self.branches.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.branches.len() {
            return Err(Error::InvalidArgument("duplicate branch position".into()));
        }
        Ok(())
    }
}

/// Where an atom's substituents come from during construction.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Torsion {
    /// No torsional freedom (no reference atom or a planar ring).
    Fixed,
    /// Three-fold symmetric rotor; always built at the canonical staggered value.
    Symmetric,
    /// Free rotor; index into the rotamer vector.
    Free(usize),
}

/// A molecule together with the data needed to build its conformers.
#[derive(Debug, Clone)]
pub struct Template {
    pub spec: ChainSpec,
    pub graph: MolecularGraph,
    parent: Vec<Option<usize>>,
    ring: Vec<usize>,
    torsion: Vec<Torsion>,
    n_free: usize,
}

impl Template {
    pub fn new(spec: ChainSpec) -> Result<Self> {
        spec.validate()?;
        // heavy skeleton with ordered neighbor lists
        let mut elems: Vec<Element> = Vec::new();
        let mut adj: Vec<Vec<usize>> = Vec::new();
        let mut aromatic: Vec<(usize, usize)> = Vec::new();
        let add = |e: Element, elems: &mut Vec<Element>, adj: &mut Vec<Vec<usize>>| {
            elems.push(e);
            adj.push(Vec::new());
            elems.len() - 1
        };
        let chain: Vec<usize> = (0..spec.length)
            .map(|k| {
                add(
                    if k == 0 { spec.end } else { Element::C },
                    &mut elems,
                    &mut adj,
                )
            })
            .collect();
        for w in chain.windows(2) {
            adj[w[0]].push(w[1]);
            adj[w[1]].push(w[0]);
        }
        let mut ring_nodes = Vec::new();
        if let Some(kind) = spec.ring {
            let es = kind.elements();
            ring_nodes = es.iter().map(|&e| add(e, &mut elems, &mut adj)).collect();
            let m = ring_nodes.len();
            let last = *chain.last().unwrap();
            adj[last].push(ring_nodes[0]);
            adj[ring_nodes[0]].push(last);
            adj[ring_nodes[0]].push(ring_nodes[1]);
            adj[ring_nodes[0]].push(ring_nodes[m - 1]);
            adj[ring_nodes[1]].push(ring_nodes[0]);
            adj[ring_nodes[m - 1]].push(ring_nodes[0]);
            for k in 1..m - 1 {
                let (a, b) = (ring_nodes[k], ring_nodes[k + 1]);
                adj[a].push(b);
                adj[b].push(a);
            }
            for k in 0..m {
                let (a, b) = (ring_nodes[k], ring_nodes[(k + 1) % m]);
                aromatic.push((a.min(b), a.max(b)));
            }
        }
        for &b in &spec.branches {
            let node = add(Element::C, &mut elems, &mut adj);
            adj[chain[b]].push(node);
            adj[node].push(chain[b]);
        }
        // breadth-first numbering
        let nh = elems.len();
        let mut new_index = vec![usize::MAX; nh];
        let mut order = Vec::with_capacity(nh);
        let mut queue = VecDeque::from([0usize]);
        new_index[0] = 0;
        order.push(0);
        while let Some(a) = queue.pop_front() {
            for &b in &adj[a] {
                if new_index[b] == usize::MAX {
                    new_index[b] = order.len();
                    order.push(b);
                    queue.push_back(b);
                }
            }
        }
        let ring_set: Vec<bool> = (0..nh).map(|a| ring_nodes.contains(&a)).collect();
        let mut atoms: Vec<Atom> = order.iter().map(|&o| Atom::new(elems[o])).collect();
        let mut bonds = Vec::new();
        for (a, list) in adj.iter().enumerate() {
            for &b in list {
                if a < b {
                    let key = (a.min(b), a.max(b));
                    let order = if aromatic.contains(&key) {
                        BondOrder::Aromatic
                    } else {
                        BondOrder::Single
                    };
                    bonds.push(Bond::new(new_index[a], new_index[b], order));
                }
            }
        }
        let mut ring: Vec<usize> = Vec::new();
        for &r in &ring_nodes {
            ring.push(new_index[r]);
        }
        // hydrogens, grouped per heavy atom in index order
        for (new, &old) in order.iter().enumerate() {
            let e = elems[old];
            let cap = if ring_set[old] {
                valence(e).min(3)
            } else {
                valence(e)
            };
            let missing = cap.saturating_sub(adj[old].len());
            for _ in 0..missing {
                atoms.push(Atom::new(Element::H));
                bonds.push(Bond::new(new, atoms.len() - 1, BondOrder::Single));
            }
        }
        bonds.sort_by_key(|b| b.key());
        let graph = MolecularGraph::new(atoms, bonds)?;
        let n = graph.num_atoms();

        let mut parent = vec![None; n];
        for a in 1..n {
            parent[a] = graph.neighbors(a).first().copied().filter(|&p| p < a);
        }
        let mut torsion = vec![Torsion::Fixed; n];
        let mut n_free = 0;
        let is_h = |a: usize| graph.atoms()[a].element == Element::H;
        for c in 1..n {
            let Some(p) = parent[c] else { continue };
            let in_ring_interior = ring.contains(&c) && c != ring[0];
            let children: Vec<usize> = graph
                .neighbors(c)
                .iter()
                .copied()
                .filter(|&x| x != p)
                .collect();
            let others: Vec<usize> = graph
                .neighbors(p)
                .iter()
                .copied()
                .filter(|&x| x != c)
                .collect();
            if in_ring_interior || children.is_empty() || others.is_empty() {
                continue;
            }
            let three_h = |v: &[usize]| v.len() == 3 && v.iter().all(|&x| is_h(x));
            torsion[c] = if three_h(&children) || three_h(&others) {
                Torsion::Symmetric
            } else {
                n_free += 1;
                Torsion::Free(n_free - 1)
            };
        }
        Ok(Template {
            spec,
            graph,
            parent,
            ring,
            torsion,
            n_free,
        })
    }

    /// Number of free rotors (length of the rotamer vector).
    pub fn num_free_torsions(&self) -> usize {
        self.n_free
    }

    /// Builds a conformer. `torsions` holds one base value per free rotor;
    /// torsional and bond-length noise come from `rng`.
    pub fn build<R: Rng + ?Sized>(&self, torsions: &[f64], rng: &mut R) -> Result<Conformation> {
        if torsions.len() != self.n_free {
            return Err(Error::Shape(format!(
                "template has {} free torsions, got {}",
                self.n_free,
                torsions.len()
            )));
        }
        let g = &self.graph;
        let n = g.num_atoms();
        let tor_noise = Normal::new(0.0, TORSION_JITTER).expect("valid normal");
        let len_noise = Normal::new(0.0, LENGTH_JITTER).expect("valid normal");
        let length = |a: usize, b: usize, rng: &mut R| {
            let order = g.bond_between(a, b).map_or(BondOrder::Single, |b| b.order);
            ideal_length(g.atoms()[a].element, g.atoms()[b].element, order) + len_noise.sample(rng)
        };
        let tetra = tetrahedral_angle();
        let mut pos: Vec<Option<Vec3>> = vec![None; n];
        let at = |pos: &[Option<Vec3>], a: usize| pos[a].expect("reference placed");
        let unplaced = |pos: &[Option<Vec3>], c: usize| -> Vec<usize> {
            g.neighbors(c)
                .iter()
                .copied()
                .filter(|&x| pos[x].is_none())
                .collect()
        };
        let mut ring_center = None;

        pos[0] = Some(Vec3::zeros());
        for c in 0..n {
            let kids = unplaced(&pos, c);
            if kids.is_empty() {
                continue;
            }
            let pc = at(&pos, c);
            if c == 0 {
                let n0 = kids[0];
                pos[n0] = Some(Vec3::new(length(0, n0, rng), 0.0, 0.0));
                let dummy = Vec3::new(1.0, 1.0, 0.0);
                for (k, &x) in kids[1..].iter().enumerate() {
                    let t = PI + k as f64 * 2.0 * PI / 3.0;
                    pos[x] = Some(place_atom(
                        &dummy,
                        &at(&pos, n0),
                        &pc,
                        length(0, x, rng),
                        tetra,
                        t,
                    )?);
                }
                continue;
            }
            let p = self.parent[c].expect("non-root atom has a parent");
            let pp = at(&pos, p);
            let refpt = g
                .neighbors(p)
                .iter()
                .copied()
                .find(|&x| x != c && pos[x].is_some())
                .map(|x| at(&pos, x))
                .unwrap_or_else(|| {
                    let axis = (pc - pp).normalize();
                    let trial = if axis.x.abs() < 0.9 {
                        Vec3::x()
                    } else {
                        Vec3::y()
                    };
                    pp + trial.cross(&axis)
                });
            let base = match self.torsion[c] {
                Torsion::Fixed => PI,
                Torsion::Symmetric => PI + tor_noise.sample(rng),
                Torsion::Free(k) => torsions[k] + tor_noise.sample(rng),
            };
            if let Some(&ipso) = self.ring.first() {
                if c == ipso {
                    let m = self.ring.len();
                    let theta = 2.0 * PI / m as f64;
                    let exterior = PI - theta / 2.0;
                    let first = place_atom(&refpt, &pp, &pc, AROMATIC_LENGTH, exterior, base)?;
                    let radius = AROMATIC_LENGTH / (2.0 * (PI / m as f64).sin());
                    let u = (pc - pp).normalize();
                    let center = pc + u * radius;
                    let d = first - pc;
                    let e2 = (d - u * d.dot(&u)).normalize();
                    for (k, &r) in self.ring.iter().enumerate().skip(1) {
                        let a = theta * k as f64;
                        pos[r] = Some(center + (-u * a.cos() + e2 * a.sin()) * radius);
                    }
                    ring_center = Some(center);
                    continue;
                }
                if self.ring.contains(&c) {
                    let center = ring_center.expect("ring placed with its first atom");
                    let out = (pc - center).normalize();
                    for x in kids {
                        pos[x] = Some(pc + out * length(c, x, rng));
                    }
                    continue;
                }
            }
            let children = g.neighbors(c).iter().copied().filter(|&x| x != p);
            for (k, x) in children.enumerate() {
                if pos[x].is_some() {
                    return Err(Error::InvalidGraph(format!(
                        "atom {x} reached twice while building"
                    )));
                }
                let t = base + k as f64 * 2.0 * PI / 3.0;
                pos[x] = Some(place_atom(&refpt, &pp, &pc, length(c, x, rng), tetra, t)?);
            }
        }
        let coords = pos
            .into_iter()
            .map(|p| p.ok_or_else(|| Error::InvalidGraph("atom left unplaced".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Conformation::new(coords))
    }

    /// Draws rotamers until the conformer has no close nonbonded contacts;
    /// falls back to the all-anti conformer.
    pub fn random_conformer<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Conformation> {
        for _ in 0..200 {
            let t: Vec<f64> = (0..self.n_free)
                .map(|_| ROTAMERS[rng.random_range(0..3)])
                .collect();
            let c = self.build(&t, rng)?;
            if min_contact(&c, &self.graph) >= CONTACT_DISTANCE {
                return Ok(c);
            }
        }
        let c = self.build(&vec![PI; self.n_free], rng)?;
        if min_contact(&c, &self.graph) >= CONTACT_DISTANCE {
            Ok(c)
        } else {
            Err(Error::Degenerate(
                "template has no contact-free rotamer".into(),
            ))
        }
    }
}

/// Smallest distance between atoms at least three bonds apart.
fn min_contact(c: &Conformation, g: &MolecularGraph) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..g.num_atoms() {
        let gd = g.graph_distances(i);
        for j in i + 1..g.num_atoms() {
            if gd[j] >= 3 {
                best = best.min(c.distance(i, j));
            }
        }
    }
    best
}

/// Random template: chain length 4 to 12 (4 to 8 when a ring is attached),
/// up to two methyl branches.
pub fn random_spec<R: Rng + ?Sized>(rng: &mut R) -> ChainSpec {
    let ring = match rng.random_range(0..10) {
        0 | 1 => Some(RingKind::Phenyl),
        2 => Some(RingKind::Furyl),
        _ => None,
    };
    let length = if ring.is_some() {
        rng.random_range(4..=8)
    } else {
        rng.random_range(4..=12)
    };
    let end = [
        Element::C,
        Element::C,
        Element::O,
        Element::N,
        Element::F,
        Element::Cl,
        Element::S,
    ][rng.random_range(0..7)];
    let last = if ring.is_some() { length } else { length - 1 };
    let mut branches = Vec::new();
    for _ in 0..rng.random_range(0..=2) {
        let b = rng.random_range(1..last);
        if !branches.contains(&b) {
            branches.push(b);
        }
    }
    branches.sort_unstable();
    ChainSpec {
        length,
        end,
        branches,
        ring,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Holdout,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "holdout" => Ok(Split::Holdout),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// A molecule with its conformers.
#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    pub id: String,
    pub split: Split,
    pub graph: MolecularGraph,
    pub conformers: Vec<Conformation>,
}

/// Every tenth molecule (indices 9, 19, ...) is held out.
pub fn split_for(index: usize) -> Split {
    if index % 10 == 9 {
        Split::Holdout
    } else {
        Split::Train
    }
}

/// Per-molecule random stream; molecules are independent of each other.
pub fn molecule_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// `n_molecules` random templates with `confs_per_molecule` conformers each.
pub fn generate_corpus(n_molecules: usize, confs_per_molecule: usize, seed: u64) -> Vec<Molecule> {
    (0..n_molecules)
        .map(|k| {
            let mut rng = molecule_rng(seed, k);
            loop {
                let Ok(t) = Template::new(random_spec(&mut rng)) else {
                    continue;
                };
                let confs: Result<Vec<_>> = (0..confs_per_molecule)
                    .map(|_| t.random_conformer(&mut rng))
                    .collect();
                if let Ok(conformers) = confs {
                    return Molecule {
                        id: format!("mol_{k:04}"),
                        split: split_for(k),
                        graph: t.graph,
                        conformers,
                    };
                }
            }
        })
        .collect()
}

/// Fraction of atom pairs that are not directly bonded and lie closer than
/// 0.7 Å.
pub fn clash_fraction(c: &Conformation, g: &MolecularGraph) -> f64 {
    let n = g.num_atoms().min(c.len());
    let mut pairs = 0usize;
    let mut clashes = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if g.are_bonded(i, j) {
                continue;
            }
            pairs += 1;
            if c.distance(i, j) < CLASH_DISTANCE {
                clashes += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        clashes as f64 / pairs as f64
    }
}

fn aromatic_ring_size(g: &MolecularGraph, start: usize) -> usize {
    let mut seen = vec![false; g.num_atoms()];
    let mut stack = vec![start];
    seen[start] = true;
    let mut count = 0;
    while let Some(a) = stack.pop() {
        count += 1;
        for &b in g.neighbors(a) {
            if !seen[b]
                && g.bond_between(a, b)
                    .is_some_and(|bd| bd.order == BondOrder::Aromatic)
            {
                seen[b] = true;
                stack.push(b);
            }
        }
    }
    count
}

/// Ideal angle at center `j`: polygon angles for planar rings, tetrahedral
/// otherwise.
pub fn ideal_angle(g: &MolecularGraph, i: usize, j: usize, k: usize) -> f64 {
    let aromatic = |a: usize, b: usize| {
        g.bond_between(a, b)
            .is_some_and(|bd| bd.order == BondOrder::Aromatic)
    };
    let ring_nbrs = g.neighbors(j).iter().filter(|&&x| aromatic(j, x)).count();
    if ring_nbrs < 2 {
        return tetrahedral_angle();
    }
    let m = aromatic_ring_size(g, j) as f64;
    let interior = PI - 2.0 * PI / m;
    if aromatic(j, i) && aromatic(j, k) {
        interior
    } else {
        PI - interior / 2.0
    }
}

/// Desk-scale strain proxy: harmonic bond and angle deviations from the
/// ideal table plus a repulsive term for atoms at least three bonds apart.
pub fn strain_energy(c: &Conformation, g: &MolecularGraph) -> Result<f64> {
    if c.len() != g.num_atoms() {
        return Err(Error::Shape(format!(
            "conformation has {} atoms, graph has {}",
            c.len(),
            g.num_atoms()
        )));
    }
    let atoms = g.atoms();
    let mut e = 0.0;
    for b in g.bonds() {
        let d0 = ideal_length(atoms[b.i].element, atoms[b.j].element, b.order);
        e += (c.distance(b.i, b.j) - d0).powi(2) / 0.01;
    }
    let x = c.coords();
    for j in 0..g.num_atoms() {
        let nb = g.neighbors(j);
        for (a, &i) in nb.iter().enumerate() {
            for &k in &nb[a + 1..] {
                let phi = bond_angle(&x[i], &x[j], &x[k])?;
                e += (phi - ideal_angle(g, i, j, k)).powi(2) / 0.05;
            }
        }
    }
    for i in 0..g.num_atoms() {
        let gd = g.graph_distances(i);
        for j in i + 1..g.num_atoms() {
            if gd[j] >= 3 {
                e += (CONTACT_DISTANCE - c.distance(i, j)).max(0.0).powi(2) * 10.0;
            }
        }
    }
    Ok(e)
}

pub const MANIFEST: &str = "manifest.csv";

/// Writes one multi-block MOL file per molecule plus `manifest.csv`
/// (`id,split,conformers`).
pub fn write_corpus(dir: &Path, molecules: &[Molecule]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join(MANIFEST))?);
    writeln!(manifest, "id,split,conformers")?;
    for m in molecules {
        let mut text = String::new();
        for (k, c) in m.conformers.iter().enumerate() {
            text.push_str(&write_molfile(
                &m.graph,
                c,
                &format!("{} conformer {k}", m.id),
            ));
            text.push_str("$$$$\n");
        }
        std::fs::write(dir.join(format!("{}.mol", m.id)), text)?;
        writeln!(manifest, "{},{},{}", m.id, m.split, m.conformers.len())?;
    }
    manifest.flush()?;
    Ok(())
}

/// Reads a corpus directory written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Vec<Molecule>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            line: line_no + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, split, count] = fields[..] else {
            return Err(parse_err(format!(
                "expected 3 manifest fields, found {}",
                fields.len()
            )));
        };
        let split: Split = split.parse()?;
        let count: usize = count
            .parse()
            .map_err(|_| parse_err(format!("bad conformer count `{count}`")))?;
        let blocks = parse_sdf(&std::fs::read_to_string(dir.join(format!("{id}.mol")))?)?;
        if blocks.len() != count {
            return Err(parse_err(format!(
                "{id}: manifest lists {count} conformers, file has {}",
                blocks.len()
            )));
        }
        let mut graph = None;
        let mut conformers = Vec::with_capacity(count);
        for (g, c) in blocks {
            match &graph {
                None => graph = Some(g),
                Some(g0) if *g0 != g => {
                    return Err(Error::InvalidGraph(format!(
                        "{id}: conformers disagree on the molecular graph"
                    )))
                }
                _ => {}
            }
            conformers.push(c);
        }
        let graph = graph.ok_or_else(|| parse_err(format!("{id}: no conformers")))?;
        out.push(Molecule {
            id: id.to_string(),
            split,
            graph,
            conformers,
        });
    }
    Ok(out)
}
