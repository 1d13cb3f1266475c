//! Random instances and labelled datasets on disk.
//!
//! A dataset directory holds `instances.jsonl`, optionally `trajectories.jsonl`
//! (expert actions from the exact oracles) and `manifest.json`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{Instance, ProblemKind};
use crate::oracle::{extract_trajectory, solve_exact, OracleError, Trajectory};

pub const FORMAT_VERSION: u32 = 1;
pub const OP_DISTANCE_LIMIT: f64 = 4.0;
/// Capacity used for small CVRP instances when none is given.
pub const SMALL_CAPACITY: u32 = 30;

const INSTANCES_FILE: &str = "instances.jsonl";
const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{file}:{line}: {msg}")]
    Parse { file: PathBuf, line: usize, msg: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("checksum mismatch: manifest has {expected}, files hash to {actual}")]
    Checksum { expected: String, actual: String },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Vehicle capacity for CVRP with `n` customers: the standard table for
/// large sizes and [`SMALL_CAPACITY`] for 8 to 20 customers.
pub fn default_capacity(n: usize) -> Option<u32> {
    match n {
        100 => Some(50),
        200 => Some(70),
        500 => Some(130),
        1000 => Some(230),
        8..=20 => Some(SMALL_CAPACITY),
        _ => None,
    }
}

/// Prize of every customer: `1 + floor(99 · d(0,i) / max_j d(0,j))`.
pub fn distance_prizes(coords: &[[f64; 2]]) -> Vec<u32> {
    let d0 = |c: &[f64; 2]| ((c[0] - coords[0][0]).powi(2) + (c[1] - coords[0][1]).powi(2)).sqrt();
    let max = coords[1..].iter().map(d0).fold(0.0, f64::max);
    coords[1..]
        .iter()
        .map(|c| if max > 0.0 { 1 + (99.0 * d0(c) / max).floor() as u32 } else { 1 })
        .collect()
}

/// Draws one instance with `n` cities (TSP) or `n` customers plus a depot.
pub fn gen_instance<R: Rng>(kind: ProblemKind, n: usize, capacity: Option<u32>, rng: &mut R) -> Result<Instance, DatagenError> {
    if n < 2 {
        return Err(DatagenError::Config(format!("instance size {n} below 2")));
    }
    let mut points = |m: usize| -> Vec<[f64; 2]> { (0..m).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect() };
    Ok(match kind {
        ProblemKind::Tsp => Instance::tsp(points(n)),
        ProblemKind::Cvrp => {
            let q = capacity
                .or_else(|| default_capacity(n))
                .ok_or_else(|| DatagenError::Config(format!("no default capacity for {n} customers; pass one")))?;
            if q < 10 {
                return Err(DatagenError::Config(format!("capacity {q} below the largest demand")));
            }
            let coords = points(n + 1);
            let demands: Vec<u32> = (0..n).map(|_| rng.gen_range(1..=10)).collect();
            Instance::cvrp(coords, &demands, q)
        }
        ProblemKind::Op => {
            let coords = points(n + 1);
            let prizes = distance_prizes(&coords);
            Instance::op(coords, &prizes, OP_DISTANCE_LIMIT)
        }
    })
}

/// Instance `index` of the dataset with `seed`: each index draws from its own
/// stream of the seeded generator.
pub fn nth_instance(kind: ProblemKind, n: usize, capacity: Option<u32>, seed: u64, index: usize) -> Result<Instance, DatagenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    Ok(gen_instance(kind, n, capacity, &mut rng)?.with_seed(seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: ProblemKind,
    pub n: usize,
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub capacity: Option<u32>,
    pub labels: bool,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub kind: ProblemKind,
    pub n: usize,
    pub count: usize,
    pub seed: u64,
    pub capacity: Option<u32>,
    pub distance_limit: Option<f64>,
    pub split: String,
    pub labeled: bool,
    pub checksum: String,
}

/// A loaded dataset. `trajectories[i]` labels `instances[i]` when present.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub instances: Vec<Instance>,
    pub trajectories: Option<Vec<Trajectory>>,
}

impl Dataset {
    /// Instances paired with their expert trajectories.
    pub fn labeled(&self) -> Result<Vec<(&Instance, &Trajectory)>, DatagenError> {
        let t = self
            .trajectories
            .as_ref()
            .ok_or_else(|| DatagenError::Config("dataset has no trajectories".into()))?;
        Ok(self.instances.iter().zip(t).collect())
    }
}

/// Generates instances (and expert labels) in memory.
pub fn generate(cfg: &DatasetConfig) -> Result<(Vec<Instance>, Option<Vec<Trajectory>>), DatagenError> {
    let mut instances = Vec::with_capacity(cfg.count);
    let mut trajectories = cfg.labels.then(|| Vec::with_capacity(cfg.count));
    for i in 0..cfg.count {
        let inst = nth_instance(cfg.kind, cfg.n, cfg.capacity, cfg.seed, i)?;
        if let Some(ts) = trajectories.as_mut() {
            let sol = solve_exact(&inst)?;
            let mut t = extract_trajectory(&inst, &sol)?;
            t.instance_id = i;
            ts.push(t);
        }
        instances.push(inst);
    }
    Ok((instances, trajectories))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatagenError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatagenError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatagenError::Parse {
            file: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// SHA-256 over the instance file followed by the trajectory file, if any.
pub fn dataset_checksum(dir: &Path) -> Result<String, DatagenError> {
    let mut h = Sha256::new();
    h.update(fs::read(dir.join(INSTANCES_FILE))?);
    let t = dir.join(TRAJECTORIES_FILE);
    if t.exists() {
        h.update(fs::read(t)?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes the dataset for `cfg` into `dir` and returns its manifest.
pub fn gen_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<DatasetManifest, DatagenError> {
    let (instances, trajectories) = generate(cfg)?;
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(INSTANCES_FILE), &instances)?;
    let traj_path = dir.join(TRAJECTORIES_FILE);
    match &trajectories {
        Some(t) => write_jsonl(&traj_path, t)?,
        None if traj_path.exists() => fs::remove_file(&traj_path)?,
        None => {}
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        kind: cfg.kind,
        n: cfg.n,
        count: cfg.count,
        seed: cfg.seed,
        capacity: instances.first().filter(|i| i.kind == ProblemKind::Cvrp).map(|i| i.capacity),
        distance_limit: (cfg.kind == ProblemKind::Op).then_some(OP_DISTANCE_LIMIT),
        split: cfg.split.clone(),
        labeled: cfg.labels,
        checksum: dataset_checksum(dir)?,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::from)?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest, DatagenError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(DatagenError::Manifest(format!("{} not found", path.display())));
    }
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| DatagenError::Parse {
        file: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DatagenError::Manifest(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads and verifies a dataset directory written by [`gen_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset, DatagenError> {
    let manifest = load_manifest(dir)?;
    let actual = dataset_checksum(dir)?;
    if actual != manifest.checksum {
        return Err(DatagenError::Checksum {
            expected: manifest.checksum,
            actual,
        });
    }
    let instances: Vec<Instance> = read_jsonl(&dir.join(INSTANCES_FILE))?;
    let trajectories = if manifest.labeled {
        Some(read_jsonl::<Trajectory>(&dir.join(TRAJECTORIES_FILE))?)
    } else {
        None
    };
    if instances.len() != manifest.count || trajectories.as_ref().is_some_and(|t| t.len() != instances.len()) {
        return Err(DatagenError::Manifest("record counts do not match the manifest".into()));
    }
    if let Some(t) = trajectories.as_ref().and_then(|ts| ts.iter().enumerate().find(|(i, t)| t.instance_id != *i)) {
        return Err(DatagenError::Manifest(format!("trajectory {} is out of order", t.0)));
    }
    Ok(Dataset {
        manifest,
        instances,
        trajectories,
    })
}

/// Reads a plain instance file (one JSON object per line).
pub fn load_instances(path: &Path) -> Result<Vec<Instance>, DatagenError> {
    let instances: Vec<Instance> = read_jsonl(path)?;
    for (i, inst) in instances.iter().enumerate() {
        inst.validate().map_err(|e| DatagenError::Parse {
            file: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
    }
    Ok(instances)
}

pub fn save_instances(path: &Path, instances: &[Instance]) -> Result<(), DatagenError> {
    write_jsonl(path, instances)
}
