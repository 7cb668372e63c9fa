//! Named parameter storage and the small dense layers built on the tape.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Index of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    /// Uniform Glorot initialization with `fan_in = rows`, `fan_out = cols`.
    pub fn glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        self.add(name, glorot(rows, cols, rng))
    }

    /// A `rows x cols` block of a Glorot matrix with the given total fans,
    /// for layers whose input is split over several arrays.
    pub fn glorot_block<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        [rows, cols]: [usize; 2],
        [fan_in, fan_out]: [usize; 2],
        rng: &mut R,
    ) -> ParamId {
        self.add(
            name,
            uniform(rows, cols, glorot_limit(fan_in, fan_out), rng),
        )
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Replaces every array; shapes must match.
    pub fn set_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter arrays, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (k, (old, new)) in self.values.iter().zip(&values).enumerate() {
            if old.shape() != new.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?}, got {:?}",
                    self.names[k],
                    old.shape(),
                    new.shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }

    /// Records every parameter on the tape; the result is indexed by `ParamId.0`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values
            .iter()
            .enumerate()
            .map(|(k, v)| tape.param(k, v))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    uniform(rows, cols, glorot_limit(rows, cols), rng)
}

fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out).max(1) as f64).sqrt()
}

fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, limit: f64, rng: &mut R) -> Tensor {
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| dist.sample(rng)).collect(),
    )
}

/// `x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.glorot(format!("{name}.w"), input, output, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), 1, output));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Var {
        let y = tape.matmul(x, p[self.w.0]);
        match self.b {
            Some(b) => tape.add_row(y, p[b.0]),
            None => y,
        }
    }
}

/// Stack of [`Linear`] layers with tanh between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::new(store, &format!("{name}.{k}"), w[0], w[1], bias, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Var {
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h);
            if k + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = glorot(10, 20, &mut rng);
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= limit));
        assert!(t.data().iter().any(|v| v.abs() > limit / 2.0));
    }

    #[test]
    fn mlp_shapes_and_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 5, 2], true, &mut rng);
        assert_eq!(store.len(), 4);
        assert_eq!(store.name(mlp.layers[1].w), "m.1.w");
        assert!(store
            .get(mlp.layers[0].b.unwrap())
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(4, 3));
        let y = mlp.forward(&mut tape, &p, x);
        assert_eq!(tape.shape(y), [4, 2]);
    }

    #[test]
    fn set_values_checks_shapes() {
        let mut store = ParamStore::new();
        store.zeros("a", 2, 2);
        assert!(store.set_values(vec![Tensor::zeros(2, 3)]).is_err());
        assert!(store.set_values(vec![Tensor::filled(2, 2, 1.0)]).is_ok());
        assert_eq!(store.num_scalars(), 4);
    }
}
