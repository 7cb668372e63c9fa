//! Reconstruction loss, VAE objective, the optimization loop and evaluation.

mod adam;
mod checkpoint;
mod eval;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use eval::{
    evaluate, summarize, write_summary_csv, EvalOptions, EvalReport, ExampleEval, MoleculeEval,
    Summary, SUMMARY_HEADER,
};

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{sample_normal, Forward, Mode, Model, ModelConfig, Prepared};
use crate::datagen::Molecule;
use crate::error::{Error, Result};
use crate::geom::{extract_internal, Conformation, InternalCoordinates};
use crate::tensor::{Tape, Tensor, Var};

/// Training hyperparameters; every field has a default and can be given in a
/// TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// KL weight beta (VAE only).
    pub kl_weight: f64,
    /// Fraction of `max_steps` over which beta ramps linearly from 0.
    pub kl_warmup: f64,
    /// Molecule-conformer pairs per step.
    pub batch_size: usize,
    pub max_steps: u64,
    /// Holdout evaluation interval in steps.
    pub eval_every: u64,
    pub seed: u64,
    /// Draw reparameterization noise in VAE mode; when false the mean is decoded.
    pub sample_noise: bool,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            kl_weight: 0.01,
            kl_warmup: 0.1,
            batch_size: 16,
            max_steps: 2000,
            eval_every: 200,
            seed: 0,
            sample_noise: true,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("lr", self.lr, self.lr >= 0.0),
            ("eps", self.eps, self.eps > 0.0),
            ("kl_weight", self.kl_weight, self.kl_weight >= 0.0),
        ];
        for (name, v, ok) in positive {
            if !ok || !v.is_finite() {
                return Err(Error::Config(format!("{name} out of range")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.kl_warmup) {
            return Err(Error::Config("kl_warmup must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.threads == 0 {
            return Err(Error::Config(
                "batch_size, eval_every and threads must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// KL weight at `step` under the linear warmup.
    pub fn beta_at(&self, step: u64) -> f64 {
        let warm = (self.kl_warmup * self.max_steps as f64).ceil();
        if warm <= 0.0 {
            self.kl_weight
        } else {
            self.kl_weight * (step as f64 / warm).min(1.0)
        }
    }
}

/// Loss terms for one pair or averaged over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub distance_term: f64,
    pub angle_term: f64,
    pub dihedral_term: f64,
    /// `distance_term + angle_term + dihedral_term`.
    pub total: f64,
    pub kl_term: f64,
    /// `total + beta * kl_term` (VAE) or `total` (AE).
    pub weighted_total: f64,
}

/// Squared periodic distance `min(d, 2 pi - d)^2` with `d = |a - b|` taken
/// modulo `2 pi`.
pub fn periodic_sq(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(2.0 * PI);
    let m = d.min(2.0 * PI - d);
    m * m
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

/// Mean squared errors per kind; the dihedral term is periodic.
pub fn reconstruction_loss(
    truth: &InternalCoordinates,
    pred: &InternalCoordinates,
) -> Result<LossBreakdown> {
    if truth.tuples != pred.tuples || !truth.is_consistent() || !pred.is_consistent() {
        return Err(Error::Shape(
            "predicted and true coordinates cover different tuples".into(),
        ));
    }
    let d = mean(
        truth
            .distances
            .iter()
            .zip(&pred.distances)
            .map(|(a, b)| (a - b) * (a - b)),
    );
    let a = mean(
        truth
            .angles
            .iter()
            .zip(&pred.angles)
            .map(|(a, b)| (a - b) * (a - b)),
    );
    let h = mean(
        truth
            .dihedrals
            .iter()
            .zip(&pred.dihedrals)
            .map(|(a, b)| periodic_sq(*a, *b)),
    );
    let total = d + a + h;
    Ok(LossBreakdown {
        distance_term: d,
        angle_term: a,
        dihedral_term: h,
        total,
        kl_term: 0.0,
        weighted_total: total,
    })
}

/// `0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2)`.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(Error::Shape("mu and logvar widths differ".into()));
    }
    Ok(0.5
        * mu.iter()
            .zip(logvar)
            .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
            .sum::<f64>())
}

/// Handles of the loss graph.
pub struct LossVars {
    pub weighted: Var,
    pub terms: [Option<Var>; 3],
    pub kl: Option<Var>,
}

/// Records the batch objective: per-pair means summed over pairs and divided
/// by `denom` (the full batch size when a batch is split across workers).
pub fn loss_on_tape(
    tape: &mut Tape,
    fwd: &Forward,
    items: &[(&Prepared, &InternalCoordinates)],
    beta: f64,
    denom: usize,
) -> LossVars {
    let b = items.len();
    let scale = 1.0 / denom as f64;
    let mut terms = [None, None, None];
    let mut weighted: Option<Var> = None;
    for k in 0..3 {
        let Some(pred) = fwd.pred[k] else { continue };
        let truth: Vec<f64> = items
            .iter()
            .flat_map(|(_, ic)| match k {
                0 => ic.distances.iter(),
                1 => ic.angles.iter(),
                _ => ic.dihedrals.iter(),
            })
            .copied()
            .collect();
        let t = tape.constant(Tensor::column(truth));
        let diff = tape.sub(pred, t);
        let err = if k == 2 {
            let a = tape.abs(diff);
            let neg = tape.scale(a, -1.0);
            let wrapped = tape.add_scalar(neg, 2.0 * PI);
            tape.min(a, wrapped)
        } else {
            diff
        };
        let sq = tape.square(err);
        let per_pair = tape.segment_sum(sq, &fwd.owner[k], b);
        let mut counts = vec![0usize; b];
        for &m in &fwd.owner[k] {
            counts[m] += 1;
        }
        let inv = tape.constant(Tensor::column(
            counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect(),
        ));
        let means = tape.scale_rows(per_pair, inv);
        let s = tape.sum(means);
        let term = tape.scale(s, scale);
        terms[k] = Some(term);
        weighted = Some(match weighted {
            Some(w) => tape.add(w, term),
            None => term,
        });
    }
    let kl = fwd.logvar.map(|lv| {
        let mu2 = tape.square(fwd.mu);
        let var = tape.exp(lv);
        let a = tape.add(mu2, var);
        let a = tape.sub(a, lv);
        let a = tape.add_scalar(a, -1.0);
        let s = tape.sum(a);
        tape.scale(s, 0.5 * scale)
    });
    let mut weighted = weighted.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    if let Some(kl) = kl {
        if beta != 0.0 {
            let w = tape.scale(kl, beta);
            weighted = tape.add(weighted, w);
        }
    }
    LossVars {
        weighted,
        terms,
        kl,
    }
}

/// Molecules with precomputed graph data and per-conformer internal coordinates.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub ids: Vec<String>,
    pub molecules: Vec<Prepared>,
    pub conformers: Vec<Vec<Conformation>>,
    pub examples: Vec<Example>,
}

#[derive(Debug, Clone)]
pub struct Example {
    pub mol: usize,
    pub conformer: usize,
    pub ic: InternalCoordinates,
}

impl PreparedSet {
    pub fn new(model: &Model, molecules: &[Molecule]) -> Result<Self> {
        let mut set = PreparedSet {
            ids: vec![],
            molecules: vec![],
            conformers: vec![],
            examples: vec![],
        };
        for m in molecules {
            let prepared = model.prepare(&m.graph)?;
            let mi = set.molecules.len();
            for (ci, c) in m.conformers.iter().enumerate() {
                set.examples.push(Example {
                    mol: mi,
                    conformer: ci,
                    ic: extract_internal(&m.graph, c)?,
                });
            }
            set.ids.push(m.id.clone());
            set.molecules.push(prepared);
            set.conformers.push(m.conformers.clone());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn item(&self, e: usize) -> (&Prepared, &InternalCoordinates) {
        let ex = &self.examples[e];
        (&self.molecules[ex.mol], &ex.ic)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_SHUFFLE: u64 = 1 << 40;
const STREAM_NOISE: u64 = 2 << 40;

/// Example indices used at `step`: consecutive slices of a per-epoch shuffle.
pub fn batch_for_step(n_examples: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = n_examples.div_ceil(batch_size).max(1) as u64;
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize;
    let mut order: Vec<usize> = (0..n_examples).collect();
    order.shuffle(&mut stream_rng(seed, STREAM_SHUFFLE + epoch));
    order[pos * batch_size..((pos + 1) * batch_size).min(n_examples)].to_vec()
}

/// Gradients (store order) and loss terms for a slice of a batch.
fn chunk_gradients(
    model: &Model,
    items: &[(&Prepared, &InternalCoordinates)],
    noise: Option<&Tensor>,
    beta: f64,
    denom: usize,
) -> Result<(Vec<Option<Tensor>>, LossBreakdown)> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let fwd = model.forward(&mut tape, &p, items, noise)?;
    let lv = loss_on_tape(&mut tape, &fwd, items, beta, denom);
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let parts = LossBreakdown {
        distance_term: val(lv.terms[0]),
        angle_term: val(lv.terms[1]),
        dihedral_term: val(lv.terms[2]),
        total: val(lv.terms[0]) + val(lv.terms[1]) + val(lv.terms[2]),
        kl_term: val(lv.kl),
        weighted_total: tape.value(lv.weighted).item(),
    };
    let grads = tape.backward(lv.weighted)?;
    let mut out = vec![None; model.store.len()];
    for (id, g) in grads.param_grads() {
        out[id] = Some(g.clone());
    }
    Ok((out, parts))
}

/// Model, optimizer state and step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
    pub config: TrainConfig,
}

/// One metrics row, written after every holdout evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_rmsd_median: f64,
    pub kl: f64,
}

pub const METRICS_HEADER: &str = "step,train_loss,eval_loss,eval_rmsd_median,kl";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.train_loss, self.eval_loss, self.eval_rmsd_median, self.kl
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub best_step: u64,
    pub best_eval_loss: f64,
    pub best: Checkpoint,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let adam = Adam::new(config.adam(), &model.store);
        Ok(Trainer {
            model,
            adam,
            step: 0,
            config,
        })
    }

    /// Continues from a checkpoint; the architecture comes from the checkpoint.
    pub fn resume(ck: &Checkpoint, mut config: TrainConfig) -> Result<Self> {
        config.model = ck.model.clone();
        config.validate()?;
        let model = ck.to_model()?;
        let adam = match &ck.adam {
            Some(a) => Adam {
                config: config.adam(),
                ..a.clone()
            },
            None => Adam::new(config.adam(), &model.store),
        };
        Ok(Trainer {
            model,
            adam,
            step: ck.step,
            config,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.step, Some(&self.adam))
    }

    /// Reparameterization noise for the batch at the current step.
    fn noise(&self, rows: usize) -> Option<Tensor> {
        if self.model.config.mode != Mode::Vae || !self.config.sample_noise {
            return None;
        }
        let f_z = self.model.f_z();
        let mut rng = stream_rng(self.config.seed, STREAM_NOISE + self.step);
        Some(Tensor::from_vec(
            rows,
            f_z,
            sample_normal(&mut rng, rows * f_z),
        ))
    }

    /// One optimizer update on an explicit batch of example indices.
    pub fn train_step(&mut self, set: &PreparedSet, batch: &[usize]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let beta = self.config.beta_at(self.step);
        let items: Vec<_> = batch.iter().map(|&e| set.item(e)).collect();
        let noise = self.noise(items.len());
        let threads = self.config.threads.min(items.len()).max(1);
        let chunk = items.len().div_ceil(threads);
        let ranges: Vec<(usize, usize)> = (0..items.len())
            .step_by(chunk)
            .map(|s| (s, (s + chunk).min(items.len())))
            .collect();
        let f_z = self.model.f_z();
        let model = &self.model;
        let results = crate::parallel::map_ordered(&ranges, threads, |&(s, e)| {
            let rows = noise
                .as_ref()
                .map(|n| Tensor::from_vec(e - s, f_z, n.data()[s * f_z..e * f_z].to_vec()));
            chunk_gradients(model, &items[s..e], rows.as_ref(), beta, items.len())
        });
        let mut grads: Vec<Option<Tensor>> = vec![None; self.model.store.len()];
        let mut parts = LossBreakdown::default();
        for r in results {
            let (g, lb) = r?;
            for (acc, gi) in grads.iter_mut().zip(g) {
                match (acc.as_mut(), gi) {
                    (Some(a), Some(gi)) => a
                        .data_mut()
                        .iter_mut()
                        .zip(gi.data())
                        .for_each(|(x, y)| *x += y),
                    (None, Some(gi)) => *acc = Some(gi),
                    _ => {}
                }
            }
            parts.distance_term += lb.distance_term;
            parts.angle_term += lb.angle_term;
            parts.dihedral_term += lb.dihedral_term;
            parts.total += lb.total;
            parts.kl_term += lb.kl_term;
            parts.weighted_total += lb.weighted_total;
        }
        if !parts.weighted_total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss or gradient at step {} (loss {})",
                self.step, parts.weighted_total
            )));
        }
        self.adam.step(&mut self.model.store, &grads)?;
        self.step += 1;
        Ok(parts)
    }

    /// One update on the scheduled batch for the current step.
    pub fn step_scheduled(&mut self, set: &PreparedSet) -> Result<LossBreakdown> {
        if set.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let batch = batch_for_step(
            set.len(),
            self.config.batch_size,
            self.config.seed,
            self.step,
        );
        self.train_step(set, &batch)
    }

    /// Trains until `max_steps`, evaluating on `holdout` every `eval_every`
    /// steps (and at the end). Metrics rows are appended to `metrics_path`
    /// when given; the parameters with the lowest holdout loss are kept.
    pub fn run(
        &mut self,
        train: &PreparedSet,
        holdout: &PreparedSet,
        metrics_path: Option<&Path>,
    ) -> Result<TrainOutcome> {
        let mut metrics = Vec::new();
        let mut best: Option<(u64, f64, Checkpoint)> = None;
        let mut acc = (0.0, 0.0, 0usize);
        let mut file = match metrics_path {
            Some(p) => {
                let fresh = !p.exists() || std::fs::metadata(p)?.len() == 0;
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)?;
                if fresh {
                    writeln!(f, "{METRICS_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        while self.step < self.config.max_steps {
            let lb = self.step_scheduled(train)?;
            acc.0 += lb.weighted_total;
            acc.1 += lb.kl_term;
            acc.2 += 1;
            if self.step.is_multiple_of(self.config.eval_every) || self.step == self.config.max_steps {
                let (eval_loss, rmsd) = if holdout.is_empty() {
                    (f64::NAN, f64::NAN)
                } else {
                    let report = evaluate(
                        &self.model,
                        holdout,
                        &EvalOptions {
                            threads: self.config.threads,
                            ..Default::default()
                        },
                    )?;
                    (report.mean_loss(), report.median_rmsd())
                };
                let row = MetricsRow {
                    step: self.step,
                    train_loss: acc.0 / acc.2 as f64,
                    eval_loss,
                    eval_rmsd_median: rmsd,
                    kl: acc.1 / acc.2 as f64,
                };
                acc = (0.0, 0.0, 0);
                if let Some(f) = file.as_mut() {
                    writeln!(f, "{}", row.csv())?;
                }
                metrics.push(row);
                let better = match &best {
                    None => true,
                    Some((_, l, _)) => eval_loss < *l || (l.is_nan() && !eval_loss.is_nan()),
                };
                if better {
                    best = Some((self.step, eval_loss, self.checkpoint()));
                }
            }
        }
        let (best_step, best_eval_loss, best) =
            best.unwrap_or_else(|| (self.step, f64::NAN, self.checkpoint()));
        Ok(TrainOutcome {
            metrics,
            best_step,
            best_eval_loss,
            best,
        })
    }
}
