//! Conformation-independent graph encoder: one edge-conditioned convolution
//! followed by stacked single-head graph attention layers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::molgraph::{featurize_atoms, featurize_bonds, FeatureConfig, MolecularGraph};
use crate::nn::{Mlp, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Features and directed edge lists of one graph (or a disjoint union of graphs).
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub atom_feats: Tensor,
    pub bond_feats: Tensor,
    /// Directed message edges `src -> dst`, both directions of every bond.
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// Bond row feeding each directed edge.
    pub edge_bond: Vec<usize>,
}

impl GraphInput {
    pub fn from_graph(g: &MolecularGraph, cfg: &FeatureConfig) -> Result<Self> {
        let atom_feats = featurize_atoms(g, cfg)?;
        let bond_feats = featurize_bonds(g, cfg)?;
        let pairs: Vec<(usize, usize)> = g.bonds().iter().map(|b| (b.i, b.j)).collect();
        Ok(Self::from_parts(atom_feats, bond_feats, &pairs))
    }

    /// Builds an input from raw features and undirected bond pairs (one per bond row).
    pub fn from_parts(atom_feats: Tensor, bond_feats: Tensor, bonds: &[(usize, usize)]) -> Self {
        assert_eq!(
            bonds.len(),
            bond_feats.rows(),
            "one bond feature row per bond"
        );
        let mut src = Vec::with_capacity(2 * bonds.len());
        let mut dst = Vec::with_capacity(2 * bonds.len());
        let mut edge_bond = Vec::with_capacity(2 * bonds.len());
        for (b, &(i, j)) in bonds.iter().enumerate() {
            src.extend([j, i]);
            dst.extend([i, j]);
            edge_bond.extend([b, b]);
        }
        GraphInput {
            atom_feats,
            bond_feats,
            src,
            dst,
            edge_bond,
        }
    }

    pub fn num_atoms(&self) -> usize {
        self.atom_feats.rows()
    }

    /// Disjoint union; also returns each part's atom offset.
    pub fn union(parts: &[&GraphInput]) -> (GraphInput, Vec<usize>) {
        assert!(!parts.is_empty(), "union of no graphs");
        let fv = parts[0].atom_feats.cols();
        let fe = parts[0].bond_feats.cols();
        let mut atoms = Vec::new();
        let mut bonds = Vec::new();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut edge_bond = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        let (mut na, mut nb) = (0, 0);
        for p in parts {
            offsets.push(na);
            atoms.extend_from_slice(p.atom_feats.data());
            bonds.extend_from_slice(p.bond_feats.data());
            src.extend(p.src.iter().map(|&s| s + na));
            dst.extend(p.dst.iter().map(|&d| d + na));
            edge_bond.extend(p.edge_bond.iter().map(|&b| b + nb));
            na += p.num_atoms();
            nb += p.bond_feats.rows();
        }
        let out = GraphInput {
            atom_feats: Tensor::from_vec(na, fv, atoms),
            bond_feats: Tensor::from_vec(nb, fe, bonds),
            src,
            dst,
            edge_bond,
        };
        (out, offsets)
    }

    /// Attention domain: every directed edge plus one self-loop per node.
    fn attention_edges(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.num_atoms();
        let mut src: Vec<usize> = (0..n).collect();
        let mut dst: Vec<usize> = (0..n).collect();
        src.extend_from_slice(&self.src);
        dst.extend_from_slice(&self.dst);
        (src, dst)
    }
}

/// `h'_i = h_i Theta + sum_j f(e_ij) h_j`, where the edge network `f` maps a
/// bond feature row to an `F_h x F_v` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EConv {
    pub theta: ParamId,
    pub edge_mlp: Mlp,
    pub f_in: usize,
    pub f_out: usize,
}

impl EConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_edge: usize,
        f_out: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let theta = store.glorot(format!("{name}.theta"), f_in, f_out, rng);
        let edge_mlp = Mlp::new(
            store,
            &format!("{name}.edge"),
            &[f_edge, hidden, f_out * f_in],
            false,
            rng,
        );
        EConv {
            theta,
            edge_mlp,
            f_in,
            f_out,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        h: Var,
        edges: Var,
        input: &GraphInput,
    ) -> Result<Var> {
        let [n, f] = tape.shape(h);
        if f != self.f_in
            || tape.shape(edges)[0] != input.bond_feats.rows()
            || n != input.num_atoms()
        {
            return Err(Error::Shape(format!(
                "EConv expects {} node features per atom and one edge row per bond",
                self.f_in
            )));
        }
        let self_term = tape.matmul(h, p[self.theta.0]);
        if input.src.is_empty() {
            return Ok(self_term);
        }
        let per_bond = self.edge_mlp.forward(tape, p, edges);
        let per_edge = tape.gather_rows(per_bond, &input.edge_bond);
        let hj = tape.gather_rows(h, &input.src);
        let msg = tape.batched_matvec(per_edge, hj, self.f_out, self.f_in);
        let agg = tape.segment_sum(msg, &input.dst, n);
        Ok(tape.add(self_term, agg))
    }
}

/// Single-head graph attention with self-loops:
/// `h'_i = sum_{j in N(i) + i} alpha_ij Theta h_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gat {
    pub theta: ParamId,
    /// Attention vector of length `2 F_h`, stored as a column.
    pub a: ParamId,
    pub width: usize,
}

impl Gat {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let theta = store.glorot(format!("{name}.theta"), width, width, rng);
        let a = store.glorot(format!("{name}.a"), 2 * width, 1, rng);
        Gat { theta, a, width }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], h: Var, input: &GraphInput) -> Result<Var> {
        self.forward_with_attention(tape, p, h, input)
            .map(|(out, _)| out)
    }

    /// Also returns the attention coefficients, one per attention edge:
    /// self-loops for nodes `0..N` first, then the directed bond edges.
    pub fn forward_with_attention(
        &self,
        tape: &mut Tape,
        p: &[Var],
        h: Var,
        input: &GraphInput,
    ) -> Result<(Var, Var)> {
        let [n, f] = tape.shape(h);
        if f != self.width || n != input.num_atoms() {
            return Err(Error::Shape(format!(
                "GAT expects {} features per atom, got {f}",
                self.width
            )));
        }
        let (src, dst) = input.attention_edges();
        let z = tape.matmul(h, p[self.theta.0]);
        let a_dst = tape.slice_rows(p[self.a.0], 0, self.width);
        let a_src = tape.slice_rows(p[self.a.0], self.width, 2 * self.width);
        let s_dst = tape.matmul(z, a_dst);
        let s_src = tape.matmul(z, a_src);
        let l_dst = tape.gather_rows(s_dst, &dst);
        let l_src = tape.gather_rows(s_src, &src);
        let logits = tape.add(l_dst, l_src);
        let logits = tape.leaky_relu(logits, LEAKY_SLOPE);
        let alpha = tape.segment_softmax(logits, &dst, n)?;
        let zj = tape.gather_rows(z, &src);
        let msg = tape.scale_rows(zj, alpha);
        Ok((tape.segment_sum(msg, &dst, n), alpha))
    }
}

/// EConv followed by `L` GAT layers and a final tanh (when `L > 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEncoder {
    pub econv: EConv,
    pub gats: Vec<Gat>,
}

impl GraphEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        features: &FeatureConfig,
        f_h: usize,
        layers: usize,
        edge_hidden: usize,
        rng: &mut R,
    ) -> Self {
        let econv = EConv::new(
            store,
            "gnn.econv",
            features.atom_width(),
            features.bond_width(),
            f_h,
            edge_hidden,
            rng,
        );
        let gats = (0..layers)
            .map(|l| Gat::new(store, &format!("gnn.gat{l}"), f_h, rng))
            .collect();
        GraphEncoder { econv, gats }
    }

    pub fn width(&self) -> usize {
        self.econv.f_out
    }

    /// Node embeddings `[N x F_h]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], input: &GraphInput) -> Result<Var> {
        let x = tape.constant(input.atom_feats.clone());
        let e = tape.constant(input.bond_feats.clone());
        let mut h = self.econv.forward(tape, p, x, e, input)?;
        for gat in &self.gats {
            h = gat.forward(tape, p, h, input)?;
        }
        if !self.gats.is_empty() {
            h = tape.tanh(h);
        }
        Ok(h)
    }
}

/// Node embeddings of a single graph, evaluated outside any training tape.
pub fn encode_graph(
    enc: &GraphEncoder,
    store: &ParamStore,
    g: &MolecularGraph,
    features: &FeatureConfig,
) -> Result<Tensor> {
    let input = GraphInput::from_graph(g, features)?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let h = enc.forward(&mut tape, &p, &input)?;
    Ok(tape.value(h).clone())
}
