//! Conformation encoder, per-coordinate decoders and the VAE head.
//!
//! The encoder maps every internal coordinate, together with the embeddings
//! of its atoms, to a latent contribution and averages them. Each per-tuple
//! network is symmetrized over tuple reversal, so relabeling atoms (which can
//! flip canonical orientations) leaves the latent vector unchanged.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{
    build_placement_plan, enumerate_tuples, to_cartesian, wrap_angle, Conformation,
    InternalCoordinates, PlacementPlan, TupleSet,
};
use crate::gnn::{GraphEncoder, GraphInput};
use crate::molgraph::{FeatureConfig, MolecularGraph};
use crate::nn::{Linear, Mlp, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub type LatentVector = Vec<f64>;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Ae,
    Vae,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ae" => Ok(Mode::Ae),
            "vae" => Ok(Mode::Vae),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected ae or vae)"
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Node embedding width F_h.
    pub f_h: usize,
    /// Number of GAT layers L.
    pub layers: usize,
    /// Latent width F_z.
    pub f_z: usize,
    /// Hidden width of the EConv edge network.
    pub edge_hidden: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::Ae,
            f_h: 64,
            layers: 3,
            f_z: 32,
            edge_hidden: 32,
            enc_hidden: 128,
            dec_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("f_h", self.f_h),
            ("f_z", self.f_z),
            ("edge_hidden", self.edge_hidden),
            ("enc_hidden", self.enc_hidden),
            ("dec_hidden", self.dec_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// The three coordinate kinds, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Distance,
    Angle,
    Dihedral,
}

impl Kind {
    pub const ALL: [Kind; 3] = [Kind::Distance, Kind::Angle, Kind::Dihedral];

    pub fn arity(self) -> usize {
        match self {
            Kind::Distance => 2,
            Kind::Angle => 3,
            Kind::Dihedral => 4,
        }
    }

    /// Encoder coordinate features: `d`, `(sin phi, cos phi)`, `(sin psi, cos psi)`.
    pub fn coord_width(self) -> usize {
        match self {
            Kind::Distance => 1,
            _ => 2,
        }
    }

    /// Raw decoder outputs before the range-enforcing head.
    pub fn output_width(self) -> usize {
        match self {
            Kind::Dihedral => 2,
            _ => 1,
        }
    }

    /// Decoder label features (sibling ranks of the two terminal atoms).
    pub fn rank_width(self) -> usize {
        match self {
            Kind::Dihedral => 2 * END_WIDTH,
            _ => 0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Distance => "dist",
            Kind::Angle => "angle",
            Kind::Dihedral => "dihedral",
        }
    }
}

const RANK_SLOTS: usize = 3;
/// Value of an active label one-hot.
const LABEL_GAIN: f64 = 8.0;
const CENTER_SLOTS: usize = 4;
const END_WIDTH: usize = RANK_SLOTS + CENTER_SLOTS;

/// Atom indices of one coordinate kind, slot-major: `slots[s][t]` is atom `s`
/// of tuple `t`.
fn slot_indices(tuples: &TupleSet, kind: Kind, offset: usize) -> Vec<Vec<usize>> {
    fn gather<const K: usize>(ts: &[[usize; K]], offset: usize) -> Vec<Vec<usize>> {
        (0..K)
            .map(|s| ts.iter().map(|t| t[s] + offset).collect())
            .collect()
    }
    match kind {
        Kind::Distance => gather(&tuples.distances, offset),
        Kind::Angle => gather(&tuples.angles, offset),
        Kind::Dihedral => gather(&tuples.dihedrals, offset),
    }
}

fn count(tuples: &TupleSet, kind: Kind) -> usize {
    match kind {
        Kind::Distance => tuples.distances.len(),
        Kind::Angle => tuples.angles.len(),
        Kind::Dihedral => tuples.dihedrals.len(),
    }
}

fn values(ic: &InternalCoordinates, kind: Kind) -> &[f64] {
    match kind {
        Kind::Distance => &ic.distances,
        Kind::Angle => &ic.angles,
        Kind::Dihedral => &ic.dihedrals,
    }
}

/// Multiplier on every encoder coordinate feature.
const COORD_GAIN: f64 = 60.0;

/// Encoder coordinate features: the distance in Å, or `(sin, cos)` of an
/// angle, times [`COORD_GAIN`].
fn coord_features(ic: &InternalCoordinates, kind: Kind) -> Tensor {
    let v = values(ic, kind);
    let g = COORD_GAIN;
    match kind {
        Kind::Distance => Tensor::column(v.iter().map(|d| g * d).collect()),
        _ => Tensor::from_vec(
            v.len(),
            2,
            v.iter().flat_map(|a| [g * a.sin(), g * a.cos()]).collect(),
        ),
    }
}

/// Label one-hots for dihedrals `(i, j, k, l)`. For the `j` end: the rank of
/// `i` among the neighbors of `j` other than `k`, and the rank of `k` among
/// all neighbors of `j` (which fixes the handedness of the remaining
/// substituents); likewise for the `k` end. Returns forward and reversed
/// layouts.
pub fn rank_features(g: &MolecularGraph, dihedrals: &[[usize; 4]]) -> (Tensor, Tensor) {
    let rank = |x: usize, center: usize, exclude: usize| {
        let r = g
            .neighbors(center)
            .iter()
            .filter(|&&n| n != exclude && n < x)
            .count();
        r.min(RANK_SLOTS - 1)
    };
    let position = |x: usize, center: usize| {
        let r = g.neighbors(center).iter().filter(|&&n| n < x).count();
        r.min(CENTER_SLOTS - 1)
    };
    let mut fwd = Tensor::zeros(dihedrals.len(), 2 * END_WIDTH);
    let mut rev = Tensor::zeros(dihedrals.len(), 2 * END_WIDTH);
    for (t, &[i, j, k, l]) in dihedrals.iter().enumerate() {
        let first = [rank(i, j, k), RANK_SLOTS + position(k, j)];
        let second = [rank(l, k, j), RANK_SLOTS + position(j, k)];
        for c in first {
            fwd.set(t, c, LABEL_GAIN);
            rev.set(t, END_WIDTH + c, LABEL_GAIN);
        }
        for c in second {
            fwd.set(t, END_WIDTH + c, LABEL_GAIN);
            rev.set(t, c, LABEL_GAIN);
        }
    }
    (fwd, rev)
}

/// Per-tuple network whose first layer is applied to the tuple in both
/// orientations: `h1 = tanh(pre(t)) + tanh(pre(reverse(t)))`, followed by a
/// tanh hidden layer and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleNet {
    pub slots: Vec<ParamId>,
    pub extra: Option<ParamId>,
    pub context: Option<ParamId>,
    pub bias: ParamId,
    pub rest: Mlp,
}

struct TupleInputs<'a> {
    slots: &'a [Vec<usize>],
    extra_fwd: Option<Var>,
    extra_rev: Option<Var>,
    /// Per-molecule context rows and the molecule of each tuple.
    context: Option<(Var, &'a [usize])>,
}

impl TupleNet {
    #[allow(clippy::too_many_arguments)]
    fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        arity: usize,
        f_h: usize,
        extra: usize,
        context: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        // the first layer is one Glorot matrix over the concatenated input
        let fans = [arity * f_h + extra + context, hidden];
        let slots = (0..arity)
            .map(|s| store.glorot_block(format!("{name}.slot{s}"), [f_h, hidden], fans, rng))
            .collect();
        let extra = (extra > 0)
            .then(|| store.glorot_block(format!("{name}.extra"), [extra, hidden], fans, rng));
        let context = (context > 0)
            .then(|| store.glorot_block(format!("{name}.context"), [context, hidden], fans, rng));
        let bias = store.zeros(format!("{name}.bias"), 1, hidden);
        let rest = Mlp::new(
            store,
            &format!("{name}.mlp"),
            &[hidden, hidden, out],
            true,
            rng,
        );
        TupleNet {
            slots,
            extra,
            context,
            bias,
            rest,
        }
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], h: Var, inp: &TupleInputs) -> Var {
        let k = self.slots.len();
        let proj: Vec<Var> = self.slots.iter().map(|w| tape.matmul(h, p[w.0])).collect();
        let orient = |tape: &mut Tape, reversed: bool| {
            let mut acc: Option<Var> = None;
            for (s, &ps) in proj.iter().enumerate() {
                let idx = if reversed {
                    &inp.slots[k - 1 - s]
                } else {
                    &inp.slots[s]
                };
                let g = tape.gather_rows(ps, idx);
                acc = Some(match acc {
                    Some(a) => tape.add(a, g),
                    None => g,
                });
            }
            let mut pre = acc.expect("tuple arity is at least 2");
            let extra = if reversed {
                inp.extra_rev
            } else {
                inp.extra_fwd
            };
            if let (Some(w), Some(x)) = (self.extra, extra) {
                let e = tape.matmul(x, p[w.0]);
                pre = tape.add(pre, e);
            }
            if let (Some(w), Some((ctx, mol))) = (self.context, inp.context) {
                let c = tape.matmul(ctx, p[w.0]);
                let c = tape.gather_rows(c, mol);
                pre = tape.add(pre, c);
            }
            let pre = tape.add_row(pre, p[self.bias.0]);
            tape.tanh(pre)
        };
        let fwd = orient(tape, false);
        let rev = orient(tape, true);
        let h1 = tape.add(fwd, rev);
        self.rest.forward(tape, p, h1)
    }
}

/// Molecule-level data shared by every conformer of a molecule.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub graph: MolecularGraph,
    pub input: GraphInput,
    pub tuples: TupleSet,
    pub ranks: (Tensor, Tensor),
    pub plan: PlacementPlan,
}

impl Prepared {
    pub fn new(graph: &MolecularGraph, features: &FeatureConfig) -> Result<Self> {
        let input = GraphInput::from_graph(graph, features)?;
        let tuples = enumerate_tuples(graph);
        let ranks = rank_features(graph, &tuples.dihedrals);
        let plan = build_placement_plan(graph)?;
        Ok(Prepared {
            graph: graph.clone(),
            input,
            tuples,
            ranks,
            plan,
        })
    }

    pub fn num_atoms(&self) -> usize {
        self.graph.num_atoms()
    }
}

/// Encoder networks rho for the three coordinate kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfEncoder {
    pub nets: Vec<TupleNet>,
}

/// Decoder networks delta for the three coordinate kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfDecoder {
    pub nets: Vec<TupleNet>,
}

/// Linear map from the pooled encoding to `log sigma^2`; the mean is the
/// pooled encoding itself.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeHead {
    pub logvar: Linear,
}

/// Tape handles produced by a batched forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub mu: Var,
    pub logvar: Option<Var>,
    pub z: Var,
    /// Decoded coordinates per kind (`None` when the batch has none of that kind).
    pub pred: [Option<Var>; 3],
    /// Molecule of every decoded tuple, per kind.
    pub owner: [Vec<usize>; 3],
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub features: FeatureConfig,
    pub store: ParamStore,
    pub gnn: GraphEncoder,
    pub encoder: ConfEncoder,
    pub decoder: ConfDecoder,
    pub head: Option<VaeHead>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let features = FeatureConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gnn = GraphEncoder::new(
            &mut store,
            &features,
            config.f_h,
            config.layers,
            config.edge_hidden,
            &mut rng,
        );
        let encoder = ConfEncoder {
            nets: Kind::ALL
                .iter()
                .map(|&k| {
                    TupleNet::new(
                        &mut store,
                        &format!("enc.{}", k.name()),
                        k.arity(),
                        config.f_h,
                        k.coord_width(),
                        0,
                        config.enc_hidden,
                        config.f_z,
                        &mut rng,
                    )
                })
                .collect(),
        };
        let decoder = ConfDecoder {
            nets: Kind::ALL
                .iter()
                .map(|&k| {
                    TupleNet::new(
                        &mut store,
                        &format!("dec.{}", k.name()),
                        k.arity(),
                        config.f_h,
                        k.rank_width(),
                        config.f_z,
                        config.dec_hidden,
                        k.output_width(),
                        &mut rng,
                    )
                })
                .collect(),
        };
        // created last so that AE and VAE share every other initial value
        let head = (config.mode == Mode::Vae).then(|| VaeHead {
            logvar: Linear::new(
                &mut store,
                "vae.logvar",
                config.f_z,
                config.f_z,
                true,
                &mut rng,
            ),
        });
        Ok(Model {
            config,
            features,
            store,
            gnn,
            encoder,
            decoder,
            head,
        })
    }

    pub fn f_z(&self) -> usize {
        self.config.f_z
    }

    pub fn prepare(&self, g: &MolecularGraph) -> Result<Prepared> {
        Prepared::new(g, &self.features)
    }

    /// Graph encoding followed by per-molecule standardization of every
    /// embedding column, which is what the tuple networks read.
    fn embed(
        &self,
        tape: &mut Tape,
        p: &[Var],
        input: &GraphInput,
        offsets: &[usize],
    ) -> Result<Var> {
        let h = self.gnn.forward(tape, p, input)?;
        let n = input.num_atoms();
        let b = offsets.len();
        let mut owner = vec![0usize; n];
        for (m, &start) in offsets.iter().enumerate() {
            let end = offsets.get(m + 1).copied().unwrap_or(n);
            owner[start..end].iter_mut().for_each(|o| *o = m);
        }
        Ok(standardize(tape, h, &owner, b))
    }

    /// Pooled encoder output `(1/N_Xi) sum rho` for each item, `[B x F_z]`.
    fn pool(
        &self,
        tape: &mut Tape,
        p: &[Var],
        h: Var,
        items: &[(&Prepared, &InternalCoordinates)],
        offsets: &[usize],
    ) -> Result<Var> {
        let b = items.len();
        let mut total: Option<Var> = None;
        for (ki, &kind) in Kind::ALL.iter().enumerate() {
            let mut slots = vec![Vec::new(); kind.arity()];
            let mut owner = Vec::new();
            let mut feats = Vec::new();
            let mut rows = 0;
            for (m, (_, ic)) in items.iter().enumerate() {
                for (s, idx) in slot_indices(&ic.tuples, kind, offsets[m])
                    .into_iter()
                    .enumerate()
                {
                    slots[s].extend(idx);
                }
                let f = coord_features(ic, kind);
                rows += f.rows();
                owner.extend(std::iter::repeat_n(m, f.rows()));
                feats.extend(f.into_vec());
            }
            if rows == 0 {
                continue;
            }
            let x = tape.constant(Tensor::from_vec(rows, kind.coord_width(), feats));
            let inp = TupleInputs {
                slots: &slots,
                extra_fwd: Some(x),
                extra_rev: Some(x),
                context: None,
            };
            let rho = self.encoder.nets[ki].forward(tape, p, h, &inp);
            let s = tape.segment_sum(rho, &owner, b);
            total = Some(match total {
                Some(t) => tape.add(t, s),
                None => s,
            });
        }
        let total = total
            .ok_or_else(|| Error::InvalidArgument("no internal coordinates to encode".into()))?;
        let inv = items
            .iter()
            .map(|(_, ic)| {
                let n = ic.total();
                if n == 0 {
                    Err(Error::InvalidArgument(
                        "no internal coordinates to encode".into(),
                    ))
                } else {
                    Ok(1.0 / n as f64)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let inv = tape.constant(Tensor::column(inv));
        Ok(tape.scale_rows(total, inv))
    }

    /// Decoded coordinates for every tuple of every item, given `z` `[B x F_z]`.
    fn decode_tuples(
        &self,
        tape: &mut Tape,
        p: &[Var],
        h: Var,
        z: Var,
        mols: &[&Prepared],
        offsets: &[usize],
    ) -> ([Option<Var>; 3], [Vec<usize>; 3]) {
        let mut pred = [None, None, None];
        let mut owners: [Vec<usize>; 3] = Default::default();
        for (ki, &kind) in Kind::ALL.iter().enumerate() {
            let mut slots = vec![Vec::new(); kind.arity()];
            let mut owner = Vec::new();
            let mut rank_f = Vec::new();
            let mut rank_r = Vec::new();
            for (m, mol) in mols.iter().enumerate() {
                for (s, idx) in slot_indices(&mol.tuples, kind, offsets[m])
                    .into_iter()
                    .enumerate()
                {
                    slots[s].extend(idx);
                }
                owner.extend(std::iter::repeat_n(m, count(&mol.tuples, kind)));
                if kind == Kind::Dihedral {
                    rank_f.extend_from_slice(mol.ranks.0.data());
                    rank_r.extend_from_slice(mol.ranks.1.data());
                }
            }
            let rows = owner.len();
            if rows == 0 {
                owners[ki] = owner;
                continue;
            }
            let (ef, er) = if kind.rank_width() > 0 {
                let w = kind.rank_width();
                (
                    Some(tape.constant(Tensor::from_vec(rows, w, rank_f))),
                    Some(tape.constant(Tensor::from_vec(rows, w, rank_r))),
                )
            } else {
                (None, None)
            };
            let inp = TupleInputs {
                slots: &slots,
                extra_fwd: ef,
                extra_rev: er,
                context: Some((z, &owner)),
            };
            let raw = self.decoder.nets[ki].forward(tape, p, h, &inp);
            pred[ki] = Some(match kind {
                Kind::Distance => tape.softplus(raw),
                Kind::Angle => {
                    let s = tape.sigmoid(raw);
                    tape.scale(s, PI)
                }
                Kind::Dihedral => {
                    let s = tape.slice_cols(raw, 0, 1);
                    let c = tape.slice_cols(raw, 1, 2);
                    tape.atan2(s, c)
                }
            });
            owners[ki] = owner;
        }
        (pred, owners)
    }

    /// Full encode/decode pass over a batch of `(molecule, conformer)` items.
    ///
    /// In VAE mode `noise` (`[B x F_z]`) drives the reparameterization; `None`
    /// decodes from the mean.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        items: &[(&Prepared, &InternalCoordinates)],
        noise: Option<&Tensor>,
    ) -> Result<Forward> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for (mol, ic) in items {
            if ic.tuples != mol.tuples || !ic.is_consistent() {
                return Err(Error::Shape(
                    "internal coordinates do not match the molecule's tuples".into(),
                ));
            }
        }
        let inputs: Vec<&GraphInput> = items.iter().map(|(m, _)| &m.input).collect();
        let (input, offsets) = GraphInput::union(&inputs);
        let h = self.embed(tape, p, &input, &offsets)?;
        let mu = self.pool(tape, p, h, items, &offsets)?;
        let (logvar, z) = match &self.head {
            None => (None, mu),
            Some(head) => {
                let lv = head.logvar.forward(tape, p, mu);
                let lv = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
                let z = match noise {
                    Some(eps) => reparameterize_on_tape(tape, mu, lv, eps)?,
                    None => mu,
                };
                (Some(lv), z)
            }
        };
        let mols: Vec<&Prepared> = items.iter().map(|(m, _)| *m).collect();
        let (pred, owner) = self.decode_tuples(tape, p, h, z, &mols, &offsets);
        Ok(Forward {
            mu,
            logvar,
            z,
            pred,
            owner,
        })
    }

    /// Node embeddings of one molecule.
    pub fn node_embeddings(&self, mol: &Prepared) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let h = self.gnn.forward(&mut tape, &p, &mol.input)?;
        Ok(tape.value(h).clone())
    }

    /// `(mu, log sigma^2)`; the second is `None` in AE mode. Tuples are put in
    /// canonical order first, so any ordering of `ic` gives the same result.
    pub fn encode(
        &self,
        mol: &Prepared,
        ic: &InternalCoordinates,
    ) -> Result<(LatentVector, Option<LatentVector>)> {
        let ic = ic.sorted();
        if !ic.is_consistent() {
            return Err(Error::Shape(
                "internal coordinate values and tuples differ in length".into(),
            ));
        }
        let n = mol.num_atoms();
        let max_atom = ic
            .tuples
            .distances
            .iter()
            .flatten()
            .chain(ic.tuples.angles.iter().flatten())
            .chain(ic.tuples.dihedrals.iter().flatten())
            .copied()
            .max();
        if max_atom.is_some_and(|a| a >= n) {
            return Err(Error::Shape(format!(
                "tuple atom index out of range for {n} atoms"
            )));
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let h = self.embed(&mut tape, &p, &mol.input, &[0])?;
        let mu = self.pool(&mut tape, &p, h, &[(mol, &ic)], &[0])?;
        let logvar = self.head.as_ref().map(|head| {
            let lv = head.logvar.forward(&mut tape, &p, mu);
            let lv = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
            tape.value(lv).data().to_vec()
        });
        Ok((tape.value(mu).data().to_vec(), logvar))
    }

    /// Latent mean of a conformation.
    pub fn encode_conformation(&self, mol: &Prepared, c: &Conformation) -> Result<LatentVector> {
        let ic = crate::geom::extract_internal(&mol.graph, c)?;
        Ok(self.encode(mol, &ic)?.0)
    }

    /// Decoded internal coordinates for all of the molecule's tuples.
    pub fn decode_internal(&self, mol: &Prepared, z: &[f64]) -> Result<InternalCoordinates> {
        if z.len() != self.f_z() {
            return Err(Error::Shape(format!(
                "latent vector has width {}, model expects {}",
                z.len(),
                self.f_z()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent vector".into()));
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let h = self.embed(&mut tape, &p, &mol.input, &[0])?;
        let zv = tape.constant(Tensor::row_vector(z.to_vec()));
        let (pred, _) = self.decode_tuples(&mut tape, &p, h, zv, &[mol], &[0]);
        let take = |v: Option<Var>| v.map(|v| tape.value(v).data().to_vec()).unwrap_or_default();
        Ok(InternalCoordinates {
            tuples: mol.tuples.clone(),
            distances: take(pred[0]),
            angles: take(pred[1]),
            dihedrals: take(pred[2]).into_iter().map(wrap_angle).collect(),
        })
    }

    /// Graph encoding, decoding and Cartesian reconstruction along the placement plan.
    pub fn reconstruct(&self, mol: &Prepared, z: &[f64]) -> Result<Conformation> {
        let ic = self.decode_internal(mol, z)?;
        to_cartesian(&mol.plan, &ic)
    }
}

/// Centers every column of `h` within each segment and divides it by
/// `sqrt(var + STANDARDIZE_EPS)`, so near-constant columns stay small.
fn standardize(tape: &mut Tape, h: Var, owner: &[usize], segments: usize) -> Var {
    let mut counts = vec![0usize; segments];
    for &o in owner {
        counts[o] += 1;
    }
    let inv = tape.constant(Tensor::column(
        counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect(),
    ));
    let sum = tape.segment_sum(h, owner, segments);
    let mean = tape.scale_rows(sum, inv);
    let mean = tape.gather_rows(mean, owner);
    let centered = tape.sub(h, mean);
    let sq = tape.square(centered);
    let var = tape.segment_sum(sq, owner, segments);
    let var = tape.scale_rows(var, inv);
    let var = tape.add_scalar(var, STANDARDIZE_EPS);
    let log = tape.log(var);
    let half = tape.scale(log, -0.5);
    let inv_std = tape.exp(half);
    let inv_std = tape.gather_rows(inv_std, owner);
    tape.mul(centered, inv_std)
}

const STANDARDIZE_EPS: f64 = 0.1;

/// Reconstructs a conformation of `g` from `z`.
pub fn reconstruct(model: &Model, g: &MolecularGraph, z: &[f64]) -> Result<Conformation> {
    model.reconstruct(&model.prepare(g)?, z)
}

/// `z = mu + exp(logvar / 2) * noise`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], noise: &[f64]) -> Result<LatentVector> {
    if mu.len() != logvar.len() || mu.len() != noise.len() {
        return Err(Error::Shape(
            "mu, logvar and noise must have equal widths".into(),
        ));
    }
    Ok(mu
        .iter()
        .zip(logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

pub(crate) fn reparameterize_on_tape(
    tape: &mut Tape,
    mu: Var,
    logvar: Var,
    noise: &Tensor,
) -> Result<Var> {
    if tape.shape(mu) != noise.shape() {
        return Err(Error::Shape(format!(
            "noise shape {:?} does not match latent {:?}",
            noise.shape(),
            tape.shape(mu)
        )));
    }
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let eps = tape.constant(noise.clone());
    let scaled = tape.mul(std, eps);
    Ok(tape.add(mu, scaled))
}

/// `z ~ N(0, I)`, deterministic in `seed`.
pub fn sample_prior(seed: u64, f_z: usize) -> LatentVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_normal(&mut rng, f_z)
}

/// `count` prior draws from one seeded stream.
pub fn prior_samples(seed: u64, count: usize, f_z: usize) -> Vec<LatentVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_normal(&mut rng, f_z)).collect()
}

pub fn sample_normal<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::extract_internal;
    use crate::molgraph::{Atom, Bond, BondOrder, Element};

    pub(crate) fn small_config(mode: Mode) -> ModelConfig {
        ModelConfig {
            mode,
            f_h: 6,
            layers: 2,
            f_z: 4,
            edge_hidden: 5,
            enc_hidden: 7,
            dec_hidden: 7,
        }
    }

    fn ethane() -> (MolecularGraph, Conformation) {
        let text = include_str!("../tests/fixtures/ethane.mol");
        crate::molgraph::parse_molfile(text).unwrap()
    }

    #[test]
    fn decoder_heads_stay_in_range() {
        let (g, _) = ethane();
        for seed in 0..5 {
            let model = Model::new(small_config(Mode::Ae), seed).unwrap();
            let mol = model.prepare(&g).unwrap();
            let z = sample_prior(seed + 100, 4)
                .iter()
                .map(|v| v * 20.0)
                .collect::<Vec<_>>();
            let ic = model.decode_internal(&mol, &z).unwrap();
            assert_eq!(
                (ic.n_distances(), ic.n_angles(), ic.n_dihedrals()),
                (7, 12, 9)
            );
            assert!(ic.distances.iter().all(|&d| d > 0.0));
            assert!(ic.angles.iter().all(|&a| a > 0.0 && a < PI));
            assert!(ic.dihedrals.iter().all(|&d| d > -PI && d <= PI));
        }
    }

    #[test]
    fn dihedral_head_uses_atan2_of_sine_then_cosine() {
        let mut t = Tape::new();
        let raw = t.constant(Tensor::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]));
        let s = t.slice_cols(raw, 0, 1);
        let c = t.slice_cols(raw, 1, 2);
        let psi = t.atan2(s, c);
        assert_eq!(t.value(psi).data(), &[0.0, PI / 2.0]);
    }

    #[test]
    fn tuple_order_does_not_change_latent() {
        let (g, c) = ethane();
        let model = Model::new(small_config(Mode::Ae), 3).unwrap();
        let mol = model.prepare(&g).unwrap();
        let ic = extract_internal(&g, &c).unwrap();
        let mut shuffled = ic.clone();
        shuffled.tuples.dihedrals.reverse();
        shuffled.dihedrals.reverse();
        shuffled.tuples.angles.rotate_left(5);
        shuffled.angles.rotate_left(5);
        shuffled.tuples.distances.swap(0, 6);
        shuffled.distances.swap(0, 6);
        assert_eq!(
            model.encode(&mol, &ic).unwrap(),
            model.encode(&mol, &shuffled).unwrap()
        );
    }

    #[test]
    fn latent_is_mean_of_contributions() {
        // A-B-C-D restricted to one coordinate of each kind
        let atoms = vec![
            Atom::new(Element::C),
            Atom::new(Element::O),
            Atom::new(Element::N),
            Atom::new(Element::C),
        ];
        let bonds = (1..4)
            .map(|i| Bond::new(i - 1, i, BondOrder::Single))
            .collect();
        let g = MolecularGraph::new(atoms, bonds).unwrap();
        let model = Model::new(small_config(Mode::Ae), 4).unwrap();
        let mol = model.prepare(&g).unwrap();
        let one = |d: bool, a: bool, h: bool| InternalCoordinates {
            tuples: TupleSet {
                distances: if d { vec![[1, 2]] } else { vec![] },
                angles: if a { vec![[0, 1, 2]] } else { vec![] },
                dihedrals: if h { vec![[0, 1, 2, 3]] } else { vec![] },
            },
            distances: if d { vec![1.4] } else { vec![] },
            angles: if a { vec![1.9] } else { vec![] },
            dihedrals: if h { vec![-2.1] } else { vec![] },
        };
        let all = model.encode(&mol, &one(true, true, true)).unwrap().0;
        let d = model.encode(&mol, &one(true, false, false)).unwrap().0;
        let a = model.encode(&mol, &one(false, true, false)).unwrap().0;
        let h = model.encode(&mol, &one(false, false, true)).unwrap().0;
        for k in 0..4 {
            assert!((all[k] - (d[k] + a[k] + h[k]) / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn relabeling_does_not_change_latent() {
        let (g, c) = ethane();
        let model = Model::new(small_config(Mode::Ae), 5).unwrap();
        let z = model
            .encode_conformation(&model.prepare(&g).unwrap(), &c)
            .unwrap();
        let order = [3, 7, 1, 0, 5, 2, 6, 4];
        let gp = g.permuted(&order).unwrap();
        let cp = c.permuted(&order).unwrap();
        let zp = model
            .encode_conformation(&model.prepare(&gp).unwrap(), &cp)
            .unwrap();
        for (a, b) in z.iter().zip(&zp) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_coordinates_rejected() {
        let (g, _) = ethane();
        let model = Model::new(small_config(Mode::Ae), 6).unwrap();
        let mol = model.prepare(&g).unwrap();
        let empty = InternalCoordinates {
            tuples: TupleSet::default(),
            distances: vec![],
            angles: vec![],
            dihedrals: vec![],
        };
        assert!(model.encode(&mol, &empty).is_err());
    }

    #[test]
    fn reparameterize_examples() {
        let mu = [0.5, -1.0];
        assert_eq!(
            reparameterize(&mu, &[0.3, -2.0], &[0.0, 0.0]).unwrap(),
            mu.to_vec()
        );
        assert_eq!(
            reparameterize(&mu, &[0.0, 0.0], &[1.5, 2.0]).unwrap(),
            vec![2.0, 1.0]
        );
        assert!(reparameterize(&mu, &[0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn reparameterize_monte_carlo_mean() {
        let mu = [0.7, -0.2, 1.5];
        let logvar = [0.0, -1.0, 0.8];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut sum = [0.0; 3];
        for _ in 0..n {
            let z = reparameterize(&mu, &logvar, &sample_normal(&mut rng, 3)).unwrap();
            for k in 0..3 {
                sum[k] += z[k];
            }
        }
        for k in 0..3 {
            let sigma = (0.5 * logvar[k]).exp();
            assert!((sum[k] / n as f64 - mu[k]).abs() < 3.0 * sigma / (n as f64).sqrt());
        }
    }

    #[test]
    fn prior_samples() {
        assert_eq!(sample_prior(1, 8), sample_prior(1, 8));
        assert_ne!(sample_prior(1, 8), sample_prior(2, 8));
        let f = 4;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<Vec<f64>> = (0..n).map(|_| sample_normal(&mut rng, f)).collect();
        for k in 0..f {
            let mean = draws.iter().map(|d| d[k]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn reconstruct_is_deterministic() {
        let (g, _) = ethane();
        let model = Model::new(small_config(Mode::Vae), 7).unwrap();
        let z = sample_prior(3, 4);
        let a = reconstruct(&model, &g, &z).unwrap();
        let b = reconstruct(&model, &g, &z).unwrap();
        assert_eq!(a, b);
        assert!(reconstruct(&model, &g, &z[..3]).is_err());
    }

    #[test]
    fn rank_features_follow_sibling_order() {
        let (g, _) = ethane();
        let t = enumerate_tuples(&g);
        let (fwd, rev) = rank_features(&g, &t.dihedrals);
        assert_eq!(fwd.cols(), Kind::Dihedral.rank_width());
        for (row, &[i, j, k, l]) in t.dihedrals.iter().enumerate() {
            let ri = g
                .neighbors(j)
                .iter()
                .filter(|&&n| n != k)
                .position(|&n| n == i)
                .unwrap();
            let rl = g
                .neighbors(k)
                .iter()
                .filter(|&&n| n != j)
                .position(|&n| n == l)
                .unwrap();
            let pk = g.neighbors(j).iter().position(|&n| n == k).unwrap();
            let pj = g.neighbors(k).iter().position(|&n| n == j).unwrap();
            assert_eq!(fwd.get(row, ri), LABEL_GAIN);
            assert_eq!(fwd.get(row, 3 + pk), LABEL_GAIN);
            assert_eq!(fwd.get(row, 7 + rl), LABEL_GAIN);
            assert_eq!(fwd.get(row, 10 + pj), LABEL_GAIN);
            assert_eq!(rev.get(row, rl), LABEL_GAIN);
            assert_eq!(rev.get(row, 3 + pj), LABEL_GAIN);
            assert_eq!(rev.get(row, 7 + ri), LABEL_GAIN);
            assert_eq!(rev.get(row, 10 + pk), LABEL_GAIN);
            assert_eq!(fwd.row(row).iter().sum::<f64>(), 4.0 * LABEL_GAIN);
        }
    }
}
