//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! error.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{run_eval, Clock, EvalSpec, WallClock};
use crate::datagen::{gen_dataset, load_dataset, load_instances, DatasetConfig};
use crate::env::{Instance, ProblemKind, Solution};
use crate::model::{EncoderConfig, Model, ModelConfig};
use crate::oracle::solve_exact;
use crate::search::{beam_search, greedy_rollout, lns_run, LnsConfig};
use crate::train::{train_base, train_recurrent, TrainConfig};

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser, Debug)]
#[command(name = "rnco", version, about = "Recurrent construction policies for routing problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset of random instances, optionally with expert labels.
    GenData(GenData),
    /// Solve instances exactly.
    SolveOracle(SolveOracle),
    /// Train the base encoder and decoder.
    TrainBase(TrainBase),
    /// Train the recurrent encoder on top of a frozen base model.
    TrainRecurrent(TrainRecurrent),
    /// Evaluate models against reference objectives.
    Eval(Eval),
    /// Solve instances with greedy decoding or beam search.
    Solve(Solve),
    /// Improve beam-search solutions with large neighborhood search.
    Lns(Lns),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    problem: ProblemKind,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: u64,
    /// Solve every instance exactly and store expert trajectories.
    #[arg(long)]
    labels: bool,
    /// CVRP vehicle capacity (required when the size has no default).
    #[arg(long)]
    capacity: Option<u32>,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SolveOracle {
    /// Instance file (JSON lines) or dataset directory.
    #[arg(long)]
    input: PathBuf,
    /// Solutions as JSON lines.
    #[arg(long)]
    out: PathBuf,
}

/// Model and training settings; every field is optional.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(default)]
struct ConfigFile {
    base: Option<EncoderConfig>,
    recurrent: Option<EncoderConfig>,
    train: TrainConfig,
}

#[derive(Args, Debug)]
struct TrainCommon {
    /// Labelled training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Labelled validation dataset directory.
    #[arg(long)]
    val: PathBuf,
    /// JSON file with `base`, `recurrent` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss and validation CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    verbose: bool,
}

#[derive(Args, Debug)]
struct TrainBase {
    #[command(flatten)]
    common: TrainCommon,
}

#[derive(Args, Debug)]
struct TrainRecurrent {
    #[command(flatten)]
    common: TrainCommon,
    /// Trained base checkpoint directory.
    #[arg(long)]
    base: PathBuf,
    /// BPTT horizon; overrides the config file.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct Eval {
    /// Checkpoint directories.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    /// Labelled dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    beam: Vec<usize>,
    /// Also evaluate the exact oracle.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Solve {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    /// Instance file (JSON lines) or dataset directory.
    #[arg(long)]
    input: PathBuf,
    /// Solutions as JSON lines.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-instance solve times.
    #[arg(long)]
    times_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Lns {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    n_sub: usize,
    #[arg(long)]
    t_max: usize,
    #[arg(long)]
    budget_secs: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    k_init: usize,
    #[arg(long, default_value_t = 1000)]
    k_sub: usize,
    #[arg(long, default_value_t = 16)]
    b_init: usize,
    #[arg(long, default_value_t = 16)]
    b_sub: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    trace_csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_instances(path: &Path) -> CliResult<Vec<Instance>> {
    if path.is_dir() {
        Ok(load_dataset(path)?.instances)
    } else {
        Ok(load_instances(path)?)
    }
}

fn write_solutions(path: &Path, sols: &[Solution]) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in sols {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_config(path: Option<&Path>) -> CliResult<ConfigFile> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(ConfigFile::default()),
    }
}

fn labelled(dir: &Path) -> CliResult<(Vec<Instance>, Vec<crate::oracle::Trajectory>)> {
    let d = load_dataset(dir)?;
    let t = d
        .trajectories
        .ok_or_else(|| format!("{} has no expert trajectories", dir.display()))?;
    Ok((d.instances, t))
}

fn validation_set(dir: &Path) -> CliResult<Vec<(Instance, f64)>> {
    let (inst, traj) = labelled(dir)?;
    Ok(inst.into_iter().zip(traj).map(|(i, t)| (i, t.objective)).collect())
}

fn train_settings(common: &TrainCommon) -> CliResult<(ConfigFile, TrainConfig)> {
    let file = read_config(common.config.as_deref())?;
    let mut tc = file.train.clone();
    if let Some(s) = common.seed {
        tc.seed = s;
    }
    tc.verbose |= common.verbose;
    Ok((file, tc))
}

fn finish_training(model: &Model<f32>, report: &crate::train::TrainReport, common: &TrainCommon, checksum: String) -> CliResult<()> {
    let mut model = model.clone();
    model.meta.dataset_checksum = Some(checksum);
    model.save(&common.out)?;
    if let Some(csv) = &common.csv {
        report.write_csv(File::create(csv)?)?;
    }
    println!(
        "best validation gap {:.4}% at epoch {} of {}",
        report.best_val_gap,
        report.best_epoch,
        report.epochs.len()
    );
    Ok(())
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData(a) => {
            let m = gen_dataset(
                &DatasetConfig {
                    kind: a.problem,
                    n: a.n,
                    count: a.count,
                    seed: a.seed,
                    capacity: a.capacity,
                    labels: a.labels,
                    split: a.split,
                },
                &a.out,
            )?;
            println!("wrote {} {} instances to {} (sha256 {})", m.count, m.kind, a.out.display(), m.checksum);
        }
        Command::SolveOracle(a) => {
            let inst = read_instances(&a.input)?;
            let sols = inst.iter().map(solve_exact).collect::<Result<Vec<_>, _>>()?;
            write_solutions(&a.out, &sols)?;
            let mean = sols.iter().map(|s| s.objective).sum::<f64>() / sols.len().max(1) as f64;
            println!("solved {} instances, mean objective {mean:.6}", sols.len());
        }
        Command::TrainBase(a) => {
            let (file, tc) = train_settings(&a.common)?;
            let data = load_dataset(&a.common.data)?;
            let traj = data.trajectories.as_ref().ok_or("training data has no expert trajectories")?;
            let pairs: Vec<_> = data.instances.iter().zip(traj).collect();
            let val = validation_set(&a.common.val)?;
            let mut cfg = ModelConfig::small(data.manifest.kind);
            cfg.recurrent = None;
            if let Some(b) = file.base {
                cfg.base = b;
            }
            let mut model = Model::<f32>::init(cfg, tc.seed)?;
            let report = train_base(&mut model, &pairs, &val, &tc)?;
            finish_training(&model, &report, &a.common, data.manifest.checksum.clone())?;
        }
        Command::TrainRecurrent(a) => {
            let (file, mut tc) = train_settings(&a.common)?;
            if let Some(k) = a.k {
                tc.k = k;
            }
            let mut model = Model::load(&a.base)?;
            if model.has_recurrent() {
                return Err("base checkpoint already has a recurrent encoder".into());
            }
            let r = file.recurrent.unwrap_or(EncoderConfig::new(1, 32, 64, 4));
            model.attach_recurrent(r, tc.seed)?;
            let data = load_dataset(&a.common.data)?;
            if data.manifest.kind != model.kind() {
                return Err(format!("{} data for a {} model", data.manifest.kind, model.kind()).into());
            }
            let traj = data.trajectories.as_ref().ok_or("training data has no expert trajectories")?;
            let pairs: Vec<_> = data.instances.iter().zip(traj).collect();
            let val = validation_set(&a.common.val)?;
            let report = train_recurrent(&mut model, &pairs, &val, &tc)?;
            finish_training(&model, &report, &a.common, data.manifest.checksum.clone())?;
        }
        Command::Eval(a) => {
            let data = load_dataset(&a.data)?;
            let refs: Vec<f64> = match &data.trajectories {
                Some(t) => t.iter().map(|t| t.objective).collect(),
                None if data.instances.is_empty() => Vec::new(),
                None => return Err("evaluation data needs reference objectives (generate with --labels)".into()),
            };
            let models = a.models.iter().map(|p| Model::load(p)).collect::<Result<Vec<_>, _>>()?;
            let refs_m: Vec<&Model<f32>> = models.iter().collect();
            let spec = EvalSpec {
                ks: a.k,
                beams: a.beam,
                oracle: a.oracle,
            };
            let report = run_eval(&refs_m, &data.instances, &refs, &spec, &mut WallClock::default())?;
            report.write_csv(File::create(&a.out)?)?;
            for g in report.aggregate() {
                println!(
                    "{:<7} L_E={} L_U={} d={:<4} k={:<4} beam={:<3} n={:<5} gap {:>8.4}%  time {:.6}s  base/rec calls {}/{}",
                    g.method, g.l_e, g.l_u, g.d, g.k, g.beam, g.count, g.mean_gap, g.mean_time_s, g.base_calls, g.rec_calls
                );
            }
        }
        Command::Solve(a) => {
            let model = Model::load(&a.model)?;
            let inst = read_instances(&a.input)?;
            let mut clock = WallClock::default();
            let mut sols = Vec::new();
            let mut times = Vec::new();
            for i in &inst {
                let t0 = clock.now();
                let r = if a.beam <= 1 {
                    greedy_rollout(&model, i, a.k)?
                } else {
                    beam_search(&model, i, a.k, a.beam)?
                };
                times.push(clock.now() - t0);
                sols.push(r.solution);
            }
            if let Some(p) = &a.out {
                write_solutions(p, &sols)?;
            }
            if let Some(p) = &a.times_csv {
                let mut w = csv::Writer::from_path(p)?;
                w.write_record(["instance_id", "objective", "time_s"])?;
                for (id, (s, t)) in sols.iter().zip(&times).enumerate() {
                    w.write_record([id.to_string(), s.objective.to_string(), t.to_string()])?;
                }
                w.flush()?;
            }
            let mean = sols.iter().map(|s| s.objective).sum::<f64>() / sols.len().max(1) as f64;
            println!("solved {} instances, mean objective {mean:.6}", sols.len());
        }
        Command::Lns(a) => {
            let model = Model::load(&a.model)?;
            let inst = read_instances(&a.input)?;
            let cfg = LnsConfig {
                k_init: a.k_init,
                k_sub: a.k_sub,
                b_init: a.b_init,
                b_sub: a.b_sub,
                t_max: a.t_max,
                n_sub: a.n_sub,
                seed: a.seed,
                budget_secs: a.budget_secs,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let mut trace = a.trace_csv.as_ref().map(csv::Writer::from_path).transpose()?;
            if let Some(w) = trace.as_mut() {
                w.write_record(["instance_id", "iteration", "elapsed_s", "objective"])?;
            }
            let mut sols = Vec::new();
            for (id, i) in inst.iter().enumerate() {
                let r = lns_run(&model, i, &cfg, &mut rng)?;
                if let Some(w) = trace.as_mut() {
                    for row in &r.trace {
                        w.write_record([
                            id.to_string(),
                            row.iteration.to_string(),
                            row.elapsed_s.to_string(),
                            row.objective.to_string(),
                        ])?;
                    }
                }
                println!(
                    "instance {id}: {:.6} -> {:.6}",
                    r.trace[0].objective, r.solution.objective
                );
                sols.push(r.solution);
            }
            if let Some(w) = trace.as_mut() {
                w.flush()?;
            }
            if let Some(p) = &a.out {
                write_solutions(p, &sols)?;
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
