//! `confae` command-line interface.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use confae::codec::{prior_samples, Mode, Model, Prepared};
use confae::datagen::{generate_corpus, read_corpus, write_corpus, Molecule, Split};
use confae::geom::{icrmsd, kabsch_rmsd, pca_2d, Conformation};
use confae::molgraph::{
    parse_molfile, read_xyz_frames, write_multi_xyz, write_xyz, Element, MolecularGraph,
};
use confae::optimize::{objective_by_name, pso_optimize, write_trajectory_csv, SwarmConfig};
use confae::training::{
    evaluate, write_summary_csv, Checkpoint, EvalOptions, PreparedSet, TrainConfig, Trainer,
    SUMMARY_HEADER,
};

const FORMATS: &str = "\
File formats:
  corpus      directory of <id>.mol files (conformers separated by $$$$) and
              manifest.csv with columns id,split,conformers
  z CSV       one row of comma-separated latent components
  XYZ         atom count, comment line, `symbol x y z` rows (Å); multi-XYZ
              files concatenate frames
  metrics     step,train_loss,eval_loss,eval_rmsd_median,kl
  summary     metric,count,mean,median,p10,p25,p75,p90 with one row per
              metric: loss, distance_term, angle_term, dihedral_term, rmsd,
              clash_fraction and (with --samples) sample_icrmsd
  trajectory  iteration,best_score,z0,...
  latent PCA  index,pc1,pc2

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.";

#[derive(Parser)]
#[command(name = "confae", version, about = "Conformation autoencoder toolkit", after_help = FORMATS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of molecules and conformers.
    Datagen(DatagenArgs),
    /// Train an AE or VAE on a corpus; writes checkpoints and a metrics CSV.
    Train(TrainArgs),
    /// Encode a conformation into its latent vector (CSV row).
    Encode(EncodeArgs),
    /// Decode a latent vector into an XYZ conformation.
    Decode(DecodeArgs),
    /// Decode prior samples into a multi-XYZ file and report their icRMSD.
    Sample(SampleArgs),
    /// Evaluate a checkpoint on the holdout split of a corpus.
    Eval(EvalArgs),
    /// Optimize a conformation objective in latent space with particle swarms.
    Optimize(OptimizeArgs),
    /// Project the latent vectors of a set of conformers onto two principal axes.
    LatentPca(LatentPcaArgs),
}

#[derive(Args)]
struct Threads {
    /// Worker threads for per-molecule parallelism.
    #[arg(long, env = "CONFAE_THREADS", default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
}

#[derive(Args)]
struct DatagenArgs {
    /// Number of molecules.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Conformers per molecule.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// TOML training configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoint.bin, best.bin, metrics.csv and config.toml.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint; its step count carries over.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// ae or vae.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    kl_weight: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    threads: Threads,
}

#[derive(Args)]
struct MoleculeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// MOL file defining the molecular graph (and default coordinates).
    #[arg(long)]
    molfile: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    mol: MoleculeArgs,
    /// Coordinates in the MOL file's atom order; defaults to the MOL coordinates.
    #[arg(long)]
    xyz: Option<PathBuf>,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    mol: MoleculeArgs,
    /// CSV file holding the latent vector.
    #[arg(long)]
    z: PathBuf,
    /// Output XYZ (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reference XYZ; the Kabsch RMSD to the decoded conformation is reported.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    mol: MoleculeArgs,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output multi-XYZ file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Summary CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Prior samples per molecule for the icRMSD row (VAE checkpoints).
    #[arg(long, default_value_t = 0)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    threads: Threads,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    mol: MoleculeArgs,
    /// Objective name (asphericity, radius_of_gyration, compactness).
    #[arg(long, default_value = "asphericity")]
    objective: String,
    #[arg(long, default_value_t = 30)]
    particles: usize,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value_t = 0.72)]
    inertia: f64,
    #[arg(long, default_value_t = 1.49)]
    cognitive: f64,
    #[arg(long, default_value_t = 1.49)]
    social: f64,
    #[arg(long, default_value_t = 0.5)]
    velocity_clamp: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for trajectory.csv and best.xyz.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    threads: Threads,
}

#[derive(Args)]
struct LatentPcaArgs {
    #[command(flatten)]
    mol: MoleculeArgs,
    /// Multi-XYZ file of conformers in the MOL file's atom order.
    #[arg(long)]
    conformers: PathBuf,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<confae::Error> for Failure {
    fn from(e: confae::Error) -> Self {
        use confae::Error as E;
        match e {
            e if e.is_numeric() => Failure::Numeric(e.to_string()),
            e @ (E::InvalidArgument(_) | E::Config(_)) => Failure::Usage(e.to_string()),
            e => Failure::Data(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::Data(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text)
        .map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Data(format!("cannot create {}: {e}", dir.display())))
}

fn load_model(path: &Path) -> CliResult<Model> {
    Ok(Checkpoint::load(path)?.to_model()?)
}

fn load_molecule(args: &MoleculeArgs) -> CliResult<(Model, Prepared, Conformation)> {
    let model = load_model(&args.checkpoint)?;
    let (graph, coords) = parse_molfile(&read(&args.molfile)?)?;
    let prepared = model.prepare(&graph)?;
    Ok((model, prepared, coords))
}

/// Checks that an XYZ frame lists the graph's atoms in the same order.
fn matching_coords(
    g: &MolecularGraph,
    frame: (Vec<Element>, Conformation),
    what: &str,
) -> CliResult<Conformation> {
    let (elements, c) = frame;
    if elements.len() != g.num_atoms() {
        return Err(Failure::Data(format!(
            "{what} has {} atoms but the molecule has {}",
            elements.len(),
            g.num_atoms()
        )));
    }
    if let Some(k) = (0..g.num_atoms()).find(|&k| elements[k] != g.atoms()[k].element) {
        return Err(Failure::Data(format!(
            "{what}: element of atom {} differs from the MOL file",
            k + 1
        )));
    }
    Ok(c)
}

/// The single frame of an XYZ file.
fn single_frame(path: &Path) -> CliResult<(Vec<Element>, Conformation)> {
    let mut frames = read_xyz_frames(&read(path)?)?;
    if frames.len() != 1 {
        return Err(Failure::Data(format!(
            "{} holds {} XYZ frames, expected 1",
            path.display(),
            frames.len()
        )));
    }
    Ok(frames.remove(0))
}

fn csv_row(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_z(text: &str) -> CliResult<Vec<f64>> {
    let line = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('z'))
        .ok_or_else(|| Failure::Data("latent CSV is empty".into()))?;
    line.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Failure::Data(format!("bad latent component `{t}`")))
        })
        .collect()
}

fn datagen(a: DatagenArgs) -> CliResult {
    let corpus = generate_corpus(a.n as usize, a.k as usize, a.seed);
    write_corpus(&a.out_dir, &corpus)?;
    let holdout = corpus.iter().filter(|m| m.split == Split::Holdout).count();
    println!(
        "wrote {} molecules ({} holdout) to {}",
        corpus.len(),
        holdout,
        a.out_dir.display()
    );
    Ok(())
}

fn split(corpus: Vec<Molecule>, which: Split) -> Vec<Molecule> {
    corpus.into_iter().filter(|m| m.split == which).collect()
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = a.mode {
        cfg.model.mode = m;
    }
    if let Some(v) = a.max_steps {
        cfg.max_steps = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = a.kl_weight {
        cfg.kl_weight = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.threads = a.threads.threads as usize;
    cfg.validate()?;

    let corpus = read_corpus(&a.corpus)?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?, cfg)?,
        None => Trainer::new(cfg)?,
    };
    let train_set = PreparedSet::new(&trainer.model, &split(corpus.clone(), Split::Train))?;
    let holdout_set = PreparedSet::new(&trainer.model, &split(corpus, Split::Holdout))?;
    if train_set.is_empty() {
        return Err(Failure::Data("corpus has no training conformers".into()));
    }
    create_dir(&a.out)?;
    write(&a.out.join("config.toml"), &trainer.config.to_toml()?)?;
    let start = trainer.step;
    let outcome = trainer.run(&train_set, &holdout_set, Some(&a.out.join("metrics.csv")))?;
    trainer.checkpoint().save(&a.out.join("checkpoint.bin"))?;
    outcome.best.save(&a.out.join("best.bin"))?;
    println!(
        "trained steps {}..{}; best holdout loss {:.6} at step {}",
        start, trainer.step, outcome.best_eval_loss, outcome.best_step
    );
    Ok(())
}

fn encode(a: EncodeArgs) -> CliResult {
    let (model, mol, coords) = load_molecule(&a.mol)?;
    let coords = match &a.xyz {
        Some(p) => matching_coords(&mol.graph, single_frame(p)?, "XYZ input")?,
        None => coords,
    };
    let z = model.encode_conformation(&mol, &coords)?;
    emit(a.out.as_deref(), &format!("{}\n", csv_row(&z)))
}

fn decode(a: DecodeArgs) -> CliResult {
    let (model, mol, _) = load_molecule(&a.mol)?;
    let z = parse_z(&read(&a.z)?)?;
    let c = model.reconstruct(&mol, &z)?;
    if let Some(r) = &a.reference {
        let reference = matching_coords(&mol.graph, single_frame(r)?, "reference XYZ")?;
        eprintln!("rmsd {:.6}", kabsch_rmsd(&c, &reference)?);
    }
    emit(a.out.as_deref(), &write_xyz(&mol.graph, &c, "decoded"))
}

fn sample(a: SampleArgs) -> CliResult {
    let (model, mol, _) = load_molecule(&a.mol)?;
    let mut samples = Vec::new();
    let mut failed = 0;
    for z in prior_samples(a.seed, a.count as usize, model.f_z()) {
        match model.reconstruct(&mol, &z) {
            Ok(c) if c.is_finite() => samples.push(c),
            Ok(_) => failed += 1,
            Err(e) if e.is_numeric() => failed += 1,
            Err(e) => return Err(e.into()),
        }
    }
    let text = write_multi_xyz(
        &mol.graph,
        samples
            .iter()
            .enumerate()
            .map(|(k, c)| (c, format!("sample {k}"))),
    );
    write(&a.out, &text)?;
    let ic = if samples.len() >= 2 {
        icrmsd(&samples)?
    } else {
        f64::NAN
    };
    println!("samples,failed,icrmsd");
    println!("{},{},{:.6}", samples.len(), failed, ic);
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let model = load_model(&a.checkpoint)?;
    let holdout = split(read_corpus(&a.corpus)?, Split::Holdout);
    if holdout.is_empty() {
        return Err(Failure::Data("corpus has no holdout molecules".into()));
    }
    let set = PreparedSet::new(&model, &holdout)?;
    let opts = EvalOptions {
        samples: a.samples,
        seed: a.seed,
        threads: a.threads.threads as usize,
    };
    let report = evaluate(&model, &set, &opts)?;
    write_summary_csv(&report, &a.out)?;
    println!("{SUMMARY_HEADER}");
    print!(
        "{}",
        read(&a.out)?
            .lines()
            .skip(1)
            .map(|l| format!("{l}\n"))
            .collect::<String>()
    );
    Ok(())
}

fn optimize(a: OptimizeArgs) -> CliResult {
    let objective = objective_by_name(&a.objective)?;
    let (model, mol, _) = load_molecule(&a.mol)?;
    let cfg = SwarmConfig {
        particles: a.particles,
        inertia: a.inertia,
        cognitive: a.cognitive,
        social: a.social,
        velocity_clamp: a.velocity_clamp,
        iterations: a.iterations,
        seed: a.seed,
        threads: a.threads.threads as usize,
        ..Default::default()
    };
    let result = pso_optimize(&model, &mol, &objective, &cfg)?;
    create_dir(&a.out_dir)?;
    write_trajectory_csv(&result.swarm, &a.out_dir.join("trajectory.csv"))?;
    let comment = format!("{} {:.6}", objective.name, result.best_objective);
    write(
        &a.out_dir.join("best.xyz"),
        &write_xyz(&mol.graph, &result.best, &comment),
    )?;
    println!(
        "{}: initial best {:.6}, final best {:.6}",
        objective.name, result.initial_objective, result.best_objective
    );
    Ok(())
}

fn latent_pca(a: LatentPcaArgs) -> CliResult {
    let (model, mol, _) = load_molecule(&a.mol)?;
    let frames = read_xyz_frames(&read(&a.conformers)?)?;
    let mut zs = Vec::with_capacity(frames.len());
    for (k, frame) in frames.into_iter().enumerate() {
        let c = matching_coords(&mol.graph, frame, &format!("conformer {}", k + 1))?;
        zs.push(model.encode_conformation(&mol, &c)?);
    }
    let proj = pca_2d(&zs)?;
    let mut text = String::from("index,pc1,pc2\n");
    for (k, p) in proj.iter().enumerate() {
        text.push_str(&format!("{k},{},{}\n", p[0], p[1]));
    }
    emit(a.out.as_deref(), &text)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Datagen(a) => datagen(a),
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Optimize(a) => optimize(a),
        Command::LatentPca(a) => latent_pca(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
