use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{reconstruction_loss, LossBreakdown, PreparedSet};
use crate::codec::{sample_normal, Mode, Model};
use crate::datagen::clash_fraction;
use crate::error::Result;
use crate::geom::{
    icrmsd, kabsch_rmsd, to_cartesian, wrap_angle, Conformation, InternalCoordinates,
};
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Prior samples decoded per molecule for the icRMSD diversity measure
    /// (VAE only; 0 disables sampling).
    pub samples: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            samples: 0,
            seed: 0,
            threads: 1,
        }
    }
}

/// One reconstructed conformer. `rmsd` is infinite when the decoded
/// coordinates cannot be placed.
#[derive(Debug, Clone)]
pub struct ExampleEval {
    pub mol: usize,
    pub conformer: usize,
    pub loss: LossBreakdown,
    pub rmsd: f64,
    pub clash_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct MoleculeEval {
    pub id: String,
    pub mean_loss: f64,
    pub median_rmsd: f64,
    /// Mean pairwise RMSD over the decoded prior samples.
    pub sample_icrmsd: Option<f64>,
    /// Decoded prior samples (failed placements are skipped).
    pub samples: Vec<Conformation>,
    pub failed_samples: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub examples: Vec<ExampleEval>,
    pub molecules: Vec<MoleculeEval>,
}

/// Count, mean, median and percentiles of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p10: f64,
    pub p25: f64,
    pub p75: f64,
    pub p90: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let (a, b) = (sorted[lo], sorted[hi]);
    if lo == hi || a == b {
        a
    } else {
        a + (b - a) * (pos - lo as f64)
    }
}

/// Summary statistics with linear interpolation between order statistics.
pub fn summarize(values: &[f64]) -> Summary {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mean = if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    };
    Summary {
        count: v.len(),
        mean,
        median: percentile(&v, 0.5),
        p10: percentile(&v, 0.1),
        p25: percentile(&v, 0.25),
        p75: percentile(&v, 0.75),
        p90: percentile(&v, 0.9),
    }
}

impl EvalReport {
    pub fn mean_loss(&self) -> f64 {
        summarize(
            &self
                .examples
                .iter()
                .map(|e| e.loss.total)
                .collect::<Vec<_>>(),
        )
        .mean
    }

    pub fn median_rmsd(&self) -> f64 {
        summarize(&self.examples.iter().map(|e| e.rmsd).collect::<Vec<_>>()).median
    }

    /// Rows `(metric, summary)` in the order written to the summary CSV.
    pub fn summaries(&self) -> Vec<(&'static str, Summary)> {
        let col = |f: &dyn Fn(&ExampleEval) -> f64| {
            summarize(&self.examples.iter().map(f).collect::<Vec<_>>())
        };
        let mut rows = vec![
            ("loss", col(&|e| e.loss.total)),
            ("distance_term", col(&|e| e.loss.distance_term)),
            ("angle_term", col(&|e| e.loss.angle_term)),
            ("dihedral_term", col(&|e| e.loss.dihedral_term)),
            ("rmsd", col(&|e| e.rmsd)),
            ("clash_fraction", col(&|e| e.clash_fraction)),
        ];
        let ic: Vec<f64> = self
            .molecules
            .iter()
            .filter_map(|m| m.sample_icrmsd)
            .collect();
        if !ic.is_empty() {
            rows.push(("sample_icrmsd", summarize(&ic)));
        }
        rows
    }
}

pub const SUMMARY_HEADER: &str = "metric,count,mean,median,p10,p25,p75,p90";

/// Writes the summary table: one row per metric.
pub fn write_summary_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{SUMMARY_HEADER}")?;
    for (name, s) in report.summaries() {
        writeln!(
            f,
            "{name},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            s.count, s.mean, s.median, s.p10, s.p25, s.p75, s.p90
        )?;
    }
    f.flush()?;
    Ok(())
}

fn eval_molecule(
    model: &Model,
    set: &PreparedSet,
    mol: usize,
    opts: &EvalOptions,
) -> Result<(Vec<ExampleEval>, MoleculeEval)> {
    let prepared = &set.molecules[mol];
    let exs: Vec<usize> = (0..set.examples.len())
        .filter(|&e| set.examples[e].mol == mol)
        .collect();
    let mut examples = Vec::with_capacity(exs.len());
    if !exs.is_empty() {
        let items: Vec<_> = exs.iter().map(|&e| set.item(e)).collect();
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let fwd = model.forward(&mut tape, &p, &items, None)?;
        let mut per = vec![[Vec::new(), Vec::new(), Vec::new()]; items.len()];
        for k in 0..3 {
            if let Some(v) = fwd.pred[k] {
                for (&o, &x) in fwd.owner[k].iter().zip(tape.value(v).data()) {
                    per[o][k].push(if k == 2 { wrap_angle(x) } else { x });
                }
            }
        }
        for ((&e, [d, a, h]), (_, truth)) in exs.iter().zip(per).zip(&items) {
            let ex = &set.examples[e];
            let pred = InternalCoordinates {
                tuples: prepared.tuples.clone(),
                distances: d,
                angles: a,
                dihedrals: h,
            };
            let loss = reconstruction_loss(truth, &pred)?;
            let (rmsd, clash) = match to_cartesian(&prepared.plan, &pred) {
                Ok(c) => (
                    kabsch_rmsd(&c, &set.conformers[mol][ex.conformer]).unwrap_or(f64::INFINITY),
                    clash_fraction(&c, &prepared.graph),
                ),
                Err(_) => (f64::INFINITY, 1.0),
            };
            examples.push(ExampleEval {
                mol,
                conformer: ex.conformer,
                loss,
                rmsd,
                clash_fraction: clash,
            });
        }
    }
    let mut samples = Vec::new();
    let mut failed = 0;
    if opts.samples > 0 && model.config.mode == Mode::Vae {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(mol as u64);
        for _ in 0..opts.samples {
            let z = sample_normal(&mut rng, model.f_z());
            match model.reconstruct(prepared, &z) {
                Ok(c) if c.is_finite() => samples.push(c),
                _ => failed += 1,
            }
        }
    }
    let sample_icrmsd = if samples.len() >= 2 {
        Some(icrmsd(&samples)?)
    } else {
        None
    };
    let loss = summarize(&examples.iter().map(|e| e.loss.total).collect::<Vec<_>>()).mean;
    let rmsd = summarize(&examples.iter().map(|e| e.rmsd).collect::<Vec<_>>()).median;
    Ok((
        examples,
        MoleculeEval {
            id: set.ids[mol].clone(),
            mean_loss: loss,
            median_rmsd: rmsd,
            sample_icrmsd,
            samples,
            failed_samples: failed,
        },
    ))
}

/// Reconstruction loss and Kabsch RMSD for every example (decoded from the
/// latent mean), plus prior-sample diversity per molecule when requested.
pub fn evaluate(model: &Model, set: &PreparedSet, opts: &EvalOptions) -> Result<EvalReport> {
    let mols: Vec<usize> = (0..set.molecules.len()).collect();
    let results =
        crate::parallel::map_ordered(&mols, opts.threads, |&m| eval_molecule(model, set, m, opts));
    let mut report = EvalReport {
        examples: vec![],
        molecules: vec![],
    };
    for r in results {
        let (ex, m) = r?;
        report.examples.extend(ex);
        report.molecules.push(m);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let s = summarize(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!(s.count, 5);
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.median, 3.0);
        assert_eq!(s.p25, 2.0);
        assert!((s.p10 - 1.4).abs() < 1e-12);
        assert!(summarize(&[]).median.is_nan());
        assert_eq!(summarize(&[1.0, f64::INFINITY]).median, f64::INFINITY);
    }
}
