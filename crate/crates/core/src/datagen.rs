//! Synthetic snapshot data: a three-gene toggle-switch SDE with proliferation,
//! an unbalanced Gaussian mixture, and the on-disk snapshot format.
//!
//! A dataset directory holds `manifest.json` and one `snapshot_<k>.csv` per
//! time point. Each CSV starts with a header: an optional `growth` column, a
//! `time` column, then `x0 … x{d-1}`. Numbers are written in shortest
//! round-trip form, so save followed by load is bit-exact.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("population reached {population} cells at t = {time}, above the cap of {cap}; lower alpha_g or raise max_population")]
    PopulationCap { population: usize, cap: usize, time: f64 },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    /// `n × d`, uniformly weighted.
    pub points: Array2<f64>,
    /// Ground-truth growth rate per point, when the generator knows it.
    pub growth: Option<Vec<f64>>,
}

impl Snapshot {
    pub fn count(&self) -> usize {
        self.points.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub snapshots: Vec<Snapshot>,
    pub seed: Option<u64>,
    /// Generator parameters, kept for provenance.
    pub generator: serde_json::Value,
}

impl SnapshotSet {
    pub fn dim(&self) -> usize {
        self.snapshots.first().map_or(0, |s| s.points.ncols())
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.snapshots.iter().map(Snapshot::count).collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let d = self.dim();
        if d == 0 {
            return Err(DataError::Manifest("no snapshots or zero dimension".into()));
        }
        for w in self.snapshots.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(DataError::Manifest("times must increase strictly".into()));
            }
        }
        for s in &self.snapshots {
            if s.points.ncols() != d {
                return Err(DataError::Manifest("snapshots differ in dimension".into()));
            }
            if s.growth.as_ref().is_some_and(|g| g.len() != s.count()) {
                return Err(DataError::Manifest("growth length differs from point count".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneSimParams {
    pub alpha: [f64; 3],
    pub beta: f64,
    pub gamma: [f64; 3],
    pub delta: [f64; 3],
    pub eta: [f64; 3],
    pub alpha_g: f64,
    pub dt_sim: f64,
    pub division_jitter: f64,
    pub record_times: Vec<f64>,
    /// Initial clusters as (center, count); cells are drawn around the center
    /// with per-gene standard deviation `init_std`.
    pub clusters: Vec<([f64; 3], usize)>,
    pub init_std: f64,
    pub max_population: usize,
}

impl Default for GeneSimParams {
    fn default() -> Self {
        Self {
            alpha: [1.0, 1.0, 1.0],
            beta: 0.3,
            gamma: [1.0, 1.0, 1.0],
            delta: [0.4, 0.4, 1.0],
            eta: [0.05, 0.05, 0.01],
            alpha_g: 0.06,
            dt_sim: 0.01,
            division_jitter: 0.02,
            record_times: vec![0.0, 8.0, 16.0, 24.0, 32.0],
            clusters: vec![([0.3, 0.6, 0.0], 200), ([2.2, 0.2, 0.0], 200)],
            init_std: 0.1,
            max_population: 200_000,
        }
    }
}

impl GeneSimParams {
    pub fn validate(&self) -> Result<(), DataError> {
        let rates = self.alpha.iter().chain(&self.gamma).chain(&self.delta).chain(&self.eta).chain([
            &self.beta,
            &self.alpha_g,
            &self.division_jitter,
            &self.init_std,
        ]);
        if rates.into_iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(DataError::Params("rates must be finite and nonnegative".into()));
        }
        if !(self.dt_sim > 0.0) {
            return Err(DataError::Params("dt_sim must be positive".into()));
        }
        if self.record_times.is_empty() || self.record_times[0] < 0.0 {
            return Err(DataError::Params("record_times must be nonempty and nonnegative".into()));
        }
        if self.record_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(DataError::Params("record_times must increase".into()));
        }
        if self.clusters.iter().all(|(_, n)| *n == 0) {
            return Err(DataError::Params("initial population is empty".into()));
        }
        Ok(())
    }

    /// Growth law `α_g X₂² / (1 + X₂²)`.
    pub fn growth_rate(&self, x2: f64) -> f64 {
        self.alpha_g * x2 * x2 / (1.0 + x2 * x2)
    }

    /// Deterministic part of the dynamics.
    pub fn drift(&self, x: &[f64; 3]) -> [f64; 3] {
        let [a1, a2, a3] = self.alpha;
        let [g1, g2, g3] = self.gamma;
        let [d1, d2, d3] = self.delta;
        let b = self.beta;
        let (s1, s2, s3) = (x[0] * x[0], x[1] * x[1], x[2] * x[2]);
        [
            (a1 * s1 + b) / (1.0 + a1 * s1 + g2 * s2 + g3 * s3 + b) - d1 * x[0],
            (a2 * s2 + b) / (1.0 + g1 * s1 + a2 * s2 + g3 * s3 + b) - d2 * x[1],
            a3 * s3 / (1.0 + a3 * s3) - d3 * x[2],
        ]
    }
}

/// Full output of the gene simulator.
#[derive(Debug, Clone)]
pub struct GeneSimulation {
    /// `(X₁, X₂)` projection with true growth per cell.
    pub snapshots: SnapshotSet,
    /// Full three-gene states at each record time.
    pub states: Vec<Vec<[f64; 3]>>,
    /// Initial cluster of each recorded cell.
    pub lineage: Vec<Vec<usize>>,
    /// `(t, population, mean growth rate)` after every step.
    pub trace: Vec<(f64, usize, f64)>,
}

struct Cell {
    x: [f64; 3],
    cluster: usize,
    rng: ChaCha8Rng,
}

fn cell_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Euler–Maruyama simulation with Bernoulli divisions. Every cell owns an
/// RNG stream keyed by its id, so the result does not depend on the thread
/// count.
pub fn simulate_gene(params: &GeneSimParams, seed: u64) -> Result<GeneSimulation, DataError> {
    params.validate()?;
    let dt = params.dt_sim;
    let sqrt_dt = dt.sqrt();
    let mut next_id: u64 = 0;
    let mut cells: Vec<Cell> = Vec::new();
    for (k, (center, count)) in params.clusters.iter().enumerate() {
        for _ in 0..*count {
            let mut rng = cell_rng(seed, next_id);
            next_id += 1;
            let mut x = *center;
            for v in &mut x {
                let z: f64 = rng.sample(StandardNormal);
                *v = (*v + params.init_std * z).max(0.0);
            }
            cells.push(Cell { x, cluster: k, rng });
        }
    }

    let record_steps: Vec<u64> = params.record_times.iter().map(|t| (t / dt).round() as u64).collect();
    let total_steps = *record_steps.last().unwrap();
    let mut states = Vec::new();
    let mut lineage = Vec::new();
    let mut trace = Vec::with_capacity(total_steps as usize);
    let mut next_record = 0;

    for step in 0..=total_steps {
        while next_record < record_steps.len() && record_steps[next_record] == step {
            states.push(cells.iter().map(|c| c.x).collect::<Vec<_>>());
            lineage.push(cells.iter().map(|c| c.cluster).collect::<Vec<_>>());
            next_record += 1;
        }
        if step == total_steps {
            break;
        }
        let divides: Vec<bool> = cells
            .par_iter_mut()
            .map(|cell| {
                let f = params.drift(&cell.x);
                for k in 0..3 {
                    let z: f64 = cell.rng.sample(StandardNormal);
                    cell.x[k] = (cell.x[k] + f[k] * dt + params.eta[k] * sqrt_dt * z).max(0.0);
                }
                let p = (params.growth_rate(cell.x[1]) * dt).clamp(0.0, 1.0);
                cell.rng.gen::<f64>() < p
            })
            .collect();
        let parents: Vec<usize> = (0..cells.len()).filter(|&i| divides[i]).collect();
        for i in parents {
            let mut rng = cell_rng(seed, next_id);
            next_id += 1;
            let mut x = cells[i].x;
            for v in &mut x {
                let z: f64 = rng.sample(StandardNormal);
                *v = (*v + params.division_jitter * z).max(0.0);
            }
            let cluster = cells[i].cluster;
            cells.push(Cell { x, cluster, rng });
        }
        let time = (step + 1) as f64 * dt;
        if cells.len() > params.max_population {
            return Err(DataError::PopulationCap { population: cells.len(), cap: params.max_population, time });
        }
        let mean_g = cells.iter().map(|c| params.growth_rate(c.x[1])).sum::<f64>() / cells.len() as f64;
        trace.push((time, cells.len(), mean_g));
    }

    let snapshots = params
        .record_times
        .iter()
        .zip(&states)
        .map(|(&time, cells)| {
            let mut points = Array2::zeros((cells.len(), 2));
            for (r, x) in cells.iter().enumerate() {
                points[[r, 0]] = x[0];
                points[[r, 1]] = x[1];
            }
            Snapshot { time, points, growth: Some(cells.iter().map(|x| params.growth_rate(x[1])).collect()) }
        })
        .collect();
    Ok(GeneSimulation {
        snapshots: SnapshotSet { snapshots, seed: Some(seed), generator: serde_json::json!({ "gene": params }) },
        states,
        lineage,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    /// Leading coordinates of the mean; the rest are zero.
    pub mean: Vec<f64>,
    /// Isotropic standard deviation.
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSpec {
    pub dim: usize,
    pub times: [f64; 2],
    pub initial: Vec<MixtureComponent>,
    #[serde(rename = "final")]
    pub final_: Vec<MixtureComponent>,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self::with_dim(10)
    }
}

impl MixtureSpec {
    /// An upper component that grows tenfold and a lower one that splits in
    /// two without net growth: 100 + 400 points, then 1000 + 200 + 200.
    pub fn with_dim(dim: usize) -> Self {
        let c = |mean: &[f64], count| MixtureComponent { mean: mean.to_vec(), std: 0.2, count };
        Self {
            dim,
            times: [0.0, 1.0],
            initial: vec![c(&[0.0, 1.0], 100), c(&[0.0, -1.0], 400)],
            final_: vec![c(&[0.0, 1.0], 1000), c(&[-1.0, -1.5], 200), c(&[1.0, -1.5], 200)],
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.dim < 2 {
            return Err(DataError::Params("mixture dimension must be at least 2".into()));
        }
        if !(self.times[1] > self.times[0]) {
            return Err(DataError::Params("mixture times must increase".into()));
        }
        for c in self.initial.iter().chain(&self.final_) {
            if c.mean.len() > self.dim {
                return Err(DataError::Params("component mean longer than dim".into()));
            }
            if !(c.std >= 0.0) {
                return Err(DataError::Params("component std must be nonnegative".into()));
            }
        }
        if self.initial.iter().map(|c| c.count).sum::<usize>() == 0
            || self.final_.iter().map(|c| c.count).sum::<usize>() == 0
        {
            return Err(DataError::Params("each snapshot needs points".into()));
        }
        Ok(())
    }

    /// Component index of every point in snapshot `which` (0 or 1), in the
    /// order produced by [`gaussian_mixture_snapshots`].
    pub fn labels(&self, which: usize) -> Vec<usize> {
        let comps = if which == 0 { &self.initial } else { &self.final_ };
        comps.iter().enumerate().flat_map(|(k, c)| std::iter::repeat_n(k, c.count)).collect()
    }
}

/// Two snapshots with exactly the requested per-component counts, points
/// grouped by component.
pub fn gaussian_mixture_snapshots(spec: &MixtureSpec, seed: u64) -> Result<SnapshotSet, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |comps: &[MixtureComponent]| {
        let n: usize = comps.iter().map(|c| c.count).sum();
        let mut pts = Array2::zeros((n, spec.dim));
        let mut row = 0;
        for c in comps {
            for _ in 0..c.count {
                for k in 0..spec.dim {
                    let mean = c.mean.get(k).copied().unwrap_or(0.0);
                    let z: f64 = rng.sample(StandardNormal);
                    pts[[row, k]] = mean + c.std * z;
                }
                row += 1;
            }
        }
        pts
    };
    let first = draw(&spec.initial);
    let second = draw(&spec.final_);
    Ok(SnapshotSet {
        snapshots: vec![
            Snapshot { time: spec.times[0], points: first, growth: None },
            Snapshot { time: spec.times[1], points: second, growth: None },
        ],
        seed: Some(seed),
        generator: serde_json::json!({ "gaussian_mixture": spec }),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dim: usize,
    pub times: Vec<f64>,
    pub counts: Vec<usize>,
    pub has_growth: bool,
    pub seed: Option<u64>,
    pub generator: serde_json::Value,
}

pub fn snapshot_file_name(k: usize) -> String {
    format!("snapshot_{k}.csv")
}

pub fn save_snapshots(set: &SnapshotSet, dir: &Path) -> Result<(), DataError> {
    set.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let has_growth = set.snapshots.iter().all(|s| s.growth.is_some());
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dim: set.dim(),
        times: set.times(),
        counts: set.counts(),
        has_growth,
        seed: set.seed,
        generator: set.generator.clone(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(io_err(&path))?;
    for (k, snap) in set.snapshots.iter().enumerate() {
        let mut text = String::new();
        let mut header: Vec<String> = Vec::new();
        if has_growth {
            header.push("growth".into());
        }
        header.push("time".into());
        header.extend((0..set.dim()).map(|i| format!("x{i}")));
        text.push_str(&header.join(","));
        text.push('\n');
        for (r, row) in snap.points.rows().into_iter().enumerate() {
            let mut fields: Vec<String> = Vec::with_capacity(row.len() + 2);
            if let (true, Some(g)) = (has_growth, &snap.growth) {
                fields.push(format!("{}", g[r]));
            }
            fields.push(format!("{}", snap.time));
            fields.extend(row.iter().map(|v| format!("{v}")));
            text.push_str(&fields.join(","));
            text.push('\n');
        }
        let path = dir.join(snapshot_file_name(k));
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn load_snapshots(dir: &Path) -> Result<SnapshotSet, DataError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DataError::Manifest(format!("unsupported format version {}", manifest.format_version)));
    }
    if manifest.times.len() != manifest.counts.len() {
        return Err(DataError::Manifest("times and counts differ in length".into()));
    }
    let mut snapshots = Vec::with_capacity(manifest.times.len());
    for (k, (&time, &count)) in manifest.times.iter().zip(&manifest.counts).enumerate() {
        let path = dir.join(snapshot_file_name(k));
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let snap = parse_snapshot(&text, &snapshot_file_name(k), manifest.dim, manifest.has_growth)?;
        if snap.count() != count {
            return Err(DataError::Manifest(format!(
                "{}: {} rows but manifest says {count}",
                snapshot_file_name(k),
                snap.count()
            )));
        }
        if snap.time.to_bits() != time.to_bits() && snap.count() > 0 {
            return Err(DataError::Manifest(format!(
                "{}: time {} but manifest says {time}",
                snapshot_file_name(k),
                snap.time
            )));
        }
        snapshots.push(Snapshot { time, ..snap });
    }
    let set = SnapshotSet { snapshots, seed: manifest.seed, generator: manifest.generator };
    set.validate()?;
    Ok(set)
}

fn parse_snapshot(text: &str, file: &str, dim: usize, has_growth: bool) -> Result<Snapshot, DataError> {
    let err = |line: usize, msg: String| DataError::Parse { file: file.to_string(), line, msg };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let mut expected: Vec<String> = Vec::new();
    if has_growth {
        expected.push("growth".into());
    }
    expected.push("time".into());
    expected.extend((0..dim).map(|i| format!("x{i}")));
    if !cols.contains(&"time") {
        return Err(err(1, "missing `time` column".into()));
    }
    if cols != expected {
        return Err(err(1, format!("header {:?}, expected {:?}", cols, expected)));
    }
    let offset = usize::from(has_growth);
    let mut data = Vec::new();
    let mut growth = Vec::new();
    let mut time = None;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected.len() {
            return Err(err(lineno, format!("{} fields, expected {}", fields.len(), expected.len())));
        }
        let parse = |col: usize| -> Result<f64, DataError> {
            fields[col].trim().parse::<f64>().map_err(|e| err(lineno, format!("field `{}`: {e}", expected[col])))
        };
        if has_growth {
            growth.push(parse(0)?);
        }
        let t = parse(offset)?;
        match time {
            None => time = Some(t),
            Some(t0) if t0 != t => return Err(err(lineno, format!("time {t} differs from {t0} earlier in the file"))),
            _ => {}
        }
        for c in 0..dim {
            let v = parse(offset + 1 + c)?;
            if !v.is_finite() {
                return Err(err(lineno, format!("field `x{c}` is not finite")));
            }
            data.push(v);
        }
    }
    let n = data.len() / dim.max(1);
    Ok(Snapshot {
        time: time.unwrap_or(f64::NAN),
        points: Array2::from_shape_vec((n, dim), data).expect("row lengths checked"),
        growth: has_growth.then_some(growth),
    })
}
