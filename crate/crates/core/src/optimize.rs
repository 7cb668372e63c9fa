//! Particle swarm optimization over the conformation latent space.
//!
//! Canonical global-best PSO, maximizing. Scores are computed for a whole
//! swarm at once (optionally in parallel) and the velocity/position update is
//! a single-threaded step, so a run is a pure function of the seed.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{sample_normal, Model, Prepared};
use crate::error::{Error, Result};
use crate::geom::{asphericity, gyration_eigenvalues, Conformation};
use crate::parallel::map_ordered;

type ScoreFn = dyn Fn(&Conformation) -> f64 + Send + Sync;

/// Named conformation score; higher is better.
#[derive(Clone)]
pub struct Objective {
    pub name: String,
    f: Arc<ScoreFn>,
}

impl fmt::Debug for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Objective")
            .field("name", &self.name)
            .finish()
    }
}

impl Objective {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(&Conformation) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Objective {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn score(&self, c: &Conformation) -> f64 {
        (self.f)(c)
    }
}

/// Asphericity of the conformation (degenerate inputs score negative infinity).
pub fn asphericity_objective() -> Objective {
    Objective::new("asphericity", |c| {
        asphericity(c).unwrap_or(f64::NEG_INFINITY)
    })
}

/// Radius of gyration in Å.
pub fn radius_of_gyration_objective() -> Objective {
    Objective::new("radius_of_gyration", |c| {
        gyration_eigenvalues(c).iter().sum::<f64>().max(0.0).sqrt()
    })
}

/// Negative radius of gyration (rewards compact conformations).
pub fn compactness_objective() -> Objective {
    let rg = radius_of_gyration_objective();
    Objective::new("compactness", move |c| -rg.score(c))
}

/// Weighted sum of objectives.
pub fn combined_objective(parts: Vec<(Objective, f64)>) -> Objective {
    let name = parts
        .iter()
        .map(|(o, w)| format!("{w}*{}", o.name))
        .collect::<Vec<_>>()
        .join("+");
    Objective::new(name, move |c| {
        parts
            .iter()
            .map(|(o, w)| if *w == 0.0 { 0.0 } else { w * o.score(c) })
            .sum()
    })
}

pub const OBJECTIVE_NAMES: [&str; 3] = ["asphericity", "radius_of_gyration", "compactness"];

pub fn objective_by_name(name: &str) -> Result<Objective> {
    match name {
        "asphericity" => Ok(asphericity_objective()),
        "radius_of_gyration" => Ok(radius_of_gyration_objective()),
        "compactness" => Ok(compactness_objective()),
        other => Err(Error::InvalidArgument(format!(
            "unknown objective `{other}`; available: {}",
            OBJECTIVE_NAMES.join(", ")
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwarmConfig {
    pub particles: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    /// Per-component velocity bound.
    pub velocity_clamp: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Latent norm beyond which the soft penalty applies.
    pub norm_bound: f64,
    /// Weight of `max(0, |z| - norm_bound)^2` subtracted from every score.
    pub norm_penalty: f64,
    pub threads: usize,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        SwarmConfig {
            particles: 30,
            inertia: 0.72,
            cognitive: 1.49,
            social: 1.49,
            velocity_clamp: 0.5,
            iterations: 100,
            seed: 0,
            norm_bound: 5.0,
            norm_penalty: 0.1,
            threads: 1,
        }
    }
}

impl SwarmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.particles == 0 || self.threads == 0 {
            return bad("particle and thread counts must be positive");
        }
        if !(self.inertia > 0.0 && self.inertia < 1.0) {
            return bad("inertia must lie in (0, 1)");
        }
        if !(self.cognitive >= 0.0 && self.social >= 0.0 && self.velocity_clamp > 0.0) {
            return bad("coefficients must be nonnegative and the velocity clamp positive");
        }
        if !(self.norm_penalty >= 0.0 && self.norm_bound >= 0.0) {
            return bad("norm penalty settings must be nonnegative");
        }
        Ok(())
    }

    /// `norm_penalty * max(0, |z| - norm_bound)^2`.
    pub fn penalty(&self, z: &[f64]) -> f64 {
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.norm_penalty * (norm - self.norm_bound).max(0.0).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub best_position: Vec<f64>,
    pub best_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    pub best_score: f64,
    pub best_z: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SwarmResult {
    /// Global best after initialization (iteration 0) and after every update.
    pub trajectory: Vec<TrajectoryPoint>,
    pub particles: Vec<Particle>,
}

impl SwarmResult {
    pub fn best(&self) -> &TrajectoryPoint {
        self.trajectory
            .last()
            .expect("trajectory holds the initial swarm")
    }

    pub fn initial(&self) -> &TrajectoryPoint {
        &self.trajectory[0]
    }
}

fn sanitize(s: f64) -> f64 {
    if s.is_nan() {
        f64::NEG_INFINITY
    } else {
        s
    }
}

/// Maximizes `score(z)` minus the norm penalty. NaN scores count as
/// negative infinity.
pub fn pso_maximize<F>(dim: usize, cfg: &SwarmConfig, score: F) -> Result<SwarmResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    if dim == 0 {
        return Err(Error::InvalidArgument(
            "latent dimension must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let v = cfg.velocity_clamp;
    let eval = |xs: &[Vec<f64>]| -> Vec<f64> {
        map_ordered(xs, cfg.threads, |x| sanitize(score(x) - cfg.penalty(x)))
    };
    let positions: Vec<Vec<f64>> = (0..cfg.particles)
        .map(|_| sample_normal(&mut rng, dim))
        .collect();
    let velocities: Vec<Vec<f64>> = (0..cfg.particles)
        .map(|_| (0..dim).map(|_| rng.random_range(-v..=v)).collect())
        .collect();
    let scores = eval(&positions);
    let mut swarm: Vec<Particle> = positions
        .into_iter()
        .zip(velocities)
        .zip(&scores)
        .map(|((x, vel), &s)| Particle {
            best_position: x.clone(),
            position: x,
            velocity: vel,
            best_score: s,
        })
        .collect();
    let mut g = 0;
    for (k, p) in swarm.iter().enumerate() {
        if p.best_score > swarm[g].best_score {
            g = k;
        }
    }
    let mut gbest = (swarm[g].best_position.clone(), swarm[g].best_score);
    let mut trajectory = vec![TrajectoryPoint {
        iteration: 0,
        best_score: gbest.1,
        best_z: gbest.0.clone(),
    }];

    for it in 1..=cfg.iterations {
        for p in swarm.iter_mut() {
            for d in 0..dim {
                let r1: f64 = rng.random();
                let r2: f64 = rng.random();
                let vel = cfg.inertia * p.velocity[d]
                    + cfg.cognitive * r1 * (p.best_position[d] - p.position[d])
                    + cfg.social * r2 * (gbest.0[d] - p.position[d]);
                p.velocity[d] = vel.clamp(-v, v);
                p.position[d] += p.velocity[d];
            }
        }
        let xs: Vec<Vec<f64>> = swarm.iter().map(|p| p.position.clone()).collect();
        let scores = eval(&xs);
        for (p, s) in swarm.iter_mut().zip(scores) {
            if s > p.best_score {
                p.best_score = s;
                p.best_position = p.position.clone();
            }
            if s > gbest.1 {
                gbest = (p.position.clone(), s);
            }
        }
        let prev = trajectory
            .last()
            .map_or(f64::NEG_INFINITY, |t| t.best_score);
        debug_assert!(gbest.1 >= prev);
        trajectory.push(TrajectoryPoint {
            iteration: it,
            best_score: gbest.1,
            best_z: gbest.0.clone(),
        });
    }
    Ok(SwarmResult {
        trajectory,
        particles: swarm,
    })
}

/// Result of optimizing a molecule's conformation.
#[derive(Debug, Clone)]
pub struct ConformationSearch {
    pub swarm: SwarmResult,
    /// Decoded conformation at the final global best.
    pub best: Conformation,
    /// Objective value (without the norm penalty) of `best`.
    pub best_objective: f64,
    /// Objective value of the initial swarm's best particle.
    pub initial_objective: f64,
}

/// PSO where every latent point is scored by `obj(reconstruct(model, g, z))`;
/// reconstruction failures score negative infinity.
pub fn pso_optimize(
    model: &Model,
    mol: &Prepared,
    obj: &Objective,
    cfg: &SwarmConfig,
) -> Result<ConformationSearch> {
    let score = |z: &[f64]| match model.reconstruct(mol, z) {
        Ok(c) if c.is_finite() => obj.score(&c),
        _ => f64::NEG_INFINITY,
    };
    let swarm = pso_maximize(model.f_z(), cfg, score)?;
    let best = model.reconstruct(mol, &swarm.best().best_z)?;
    let best_objective = obj.score(&best);
    let initial_objective = score(&swarm.initial().best_z);
    Ok(ConformationSearch {
        swarm,
        best,
        best_objective,
        initial_objective,
    })
}

/// `iteration,best_score,z0,z1,...`
pub fn write_trajectory_csv(result: &SwarmResult, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let dim = result.best().best_z.len();
    let header: Vec<String> = ["iteration".to_string(), "best_score".to_string()]
        .into_iter()
        .chain((0..dim).map(|d| format!("z{d}")))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    for t in &result.trajectory {
        let z: Vec<String> = t.best_z.iter().map(|v| format!("{v:.8}")).collect();
        writeln!(f, "{},{:.8},{}", t.iteration, t.best_score, z.join(","))?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bowl(target: Vec<f64>) -> impl Fn(&[f64]) -> f64 + Sync {
        move |z: &[f64]| {
            -z.iter()
                .zip(&target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        }
    }

    #[test]
    fn zero_iterations_returns_initial_best() {
        let cfg = SwarmConfig {
            iterations: 0,
            particles: 7,
            ..Default::default()
        };
        let r = pso_maximize(3, &cfg, bowl(vec![0.5; 3])).unwrap();
        assert_eq!(r.trajectory.len(), 1);
        let best = r
            .particles
            .iter()
            .map(|p| p.best_score)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.best().best_score, best);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target: Vec<f64> = (0..8).map(|k| 0.3 * k as f64 - 1.0).collect();
        let cfg = SwarmConfig {
            iterations: 200,
            seed: 4,
            ..Default::default()
        };
        let r = pso_maximize(8, &cfg, bowl(target)).unwrap();
        assert!(r.best().best_score > -1e-2, "{}", r.best().best_score);
    }

    #[test]
    fn monotone_and_deterministic() {
        let cfg = SwarmConfig {
            iterations: 40,
            seed: 9,
            ..Default::default()
        };
        let f = |z: &[f64]| (3.0 * z[0]).sin() + z[1].cos() - 0.1 * z[2].abs();
        let a = pso_maximize(4, &cfg, f).unwrap();
        let b = pso_maximize(4, &cfg, f).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        for w in a.trajectory.windows(2) {
            assert!(w[1].best_score >= w[0].best_score);
        }
        for p in &a.particles {
            assert!(p.position.iter().all(|v| v.is_finite()));
            assert!(p.velocity.iter().all(|v| v.abs() <= cfg.velocity_clamp));
        }
    }

    #[test]
    fn nan_scores_are_never_best() {
        let cfg = SwarmConfig {
            iterations: 5,
            particles: 4,
            ..Default::default()
        };
        let r = pso_maximize(
            2,
            &cfg,
            |z: &[f64]| if z[0] > 0.0 { f64::NAN } else { z[0] },
        )
        .unwrap();
        assert!(!r.best().best_score.is_nan());
    }

    #[test]
    fn penalty_outside_the_ball() {
        let cfg = SwarmConfig::default();
        assert_eq!(cfg.penalty(&[3.0, 4.0]), 0.0);
        assert!((cfg.penalty(&[6.0, 8.0]) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn objective_examples() {
        let line = Conformation::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let octa = Conformation::from_rows(&[
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ]);
        let a = asphericity_objective();
        assert!((a.score(&line) - 1.0).abs() < 1e-12);
        assert!(a.score(&octa).abs() < 1e-12);

        let one = combined_objective(vec![(asphericity_objective(), 1.0)]);
        assert_eq!(one.score(&line), a.score(&line));
        let second = combined_objective(vec![
            (asphericity_objective(), 0.0),
            (radius_of_gyration_objective(), 1.0),
        ]);
        assert_eq!(
            second.score(&octa),
            radius_of_gyration_objective().score(&octa)
        );
        let sa = Objective::new("a", |_| 0.25);
        let sb = Objective::new("b", |_| -1.5);
        let mix = combined_objective(vec![(sa, 2.0), (sb, 3.0)]);
        assert!((mix.score(&line) - (2.0 * 0.25 + 3.0 * -1.5)).abs() < 1e-12);
    }

    #[test]
    fn objective_lookup() {
        assert_eq!(
            objective_by_name("asphericity").unwrap().name,
            "asphericity"
        );
        let err = objective_by_name("qed").unwrap_err().to_string();
        assert!(err.contains("asphericity") && err.contains("compactness"));
    }
}
