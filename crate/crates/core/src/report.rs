//! Experiment configuration, sweep orchestration, summaries and artifacts.
//!
//! A config names a data source, a partition, a training setup and the sweep
//! axes. Every `(algorithm, eta, lambda, seed)` cell runs
//! partition, train, evaluate and summarize; data depend on the seed only, so
//! cells that share a seed see the same federation.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    load_embeddings, mirrored_counts, partition, partition_fixed, read_csv_samples, split_pool, synth_gaussian,
    ClientDataset, CsvSchema, PartitionSpec, Sample, Standardizer, SynthSpec,
};
use crate::error::{Error, Result};
use crate::fedengine::{evaluate, train, Algorithm, FairFLConfig, RoundLog};
use crate::numerics::{streams, Rng};

pub use crate::fedengine::MetricsRecord;

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "FAIRFL_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Csv,
    Embeddings,
    Synth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: SourceKind,
    /// Data file for `csv` and `embeddings`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Separate test file; without it the pool is split by `test_fraction`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Test shard size relative to each client's training shard, keeping its
    /// group proportions.
    #[serde(default = "default_test_ratio")]
    pub test_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSchema>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

fn default_test_fraction() -> f64 {
    0.3
}

fn default_test_ratio() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Defaults to `[train.algorithm]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithms: Option<Vec<Algorithm>>,
    /// Defaults to `[train.eta]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<Vec<f64>>,
    /// Defaults to `[train.lambda]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    /// Defaults to `[train.seed]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub parallel_cells: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub partition: PartitionSpec,
    pub train: FairFLConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("fairfl-out")
}

/// One sweep cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellKey {
    pub algorithm: Algorithm,
    pub eta: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl CellKey {
    pub fn name(&self) -> String {
        format!("{}_eta{}_lambda{}_seed{}", self.algorithm, self.eta, self.lambda, self.seed)
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization, in hex.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml_string()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let d = &self.data;
        match d.source {
            SourceKind::Csv | SourceKind::Embeddings if d.path.is_none() => {
                return bad(format!("data.path is required for source {:?}", d.source))
            }
            SourceKind::Csv if d.csv.is_none() => return bad("data.csv section is required for source csv".into()),
            SourceKind::Synth => match &d.synth {
                None => return bad("data.synth section is required for source synth".into()),
                Some(spec) => spec.validate()?,
            },
            _ => {}
        }
        if d.source != SourceKind::Synth && d.synth.is_some() {
            return bad("data.synth is only valid with source synth".into());
        }
        if d.source != SourceKind::Csv && d.csv.is_some() {
            return bad("data.csv is only valid with source csv".into());
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return bad(format!("data.test_fraction={} must lie in [0, 1)", d.test_fraction));
        }
        if !(d.test_ratio > 0.0 && d.test_ratio.is_finite()) {
            return bad(format!("data.test_ratio={} must be positive", d.test_ratio));
        }
        if d.test_path.is_none() && d.test_fraction == 0.0 {
            return bad("data.test_fraction must be positive without data.test_path".into());
        }
        self.partition.validate()?;
        self.train.validate()?;
        let s = &self.sweep;
        for (name, empty) in [
            ("algorithms", s.algorithms.as_ref().is_some_and(Vec::is_empty)),
            ("eta", s.eta.as_ref().is_some_and(Vec::is_empty)),
            ("lambda", s.lambda.as_ref().is_some_and(Vec::is_empty)),
            ("seeds", s.seeds.as_ref().is_some_and(Vec::is_empty)),
        ] {
            if empty {
                return bad(format!("sweep.{name} must not be empty"));
            }
        }
        for cell in self.cells() {
            self.cell_config(&cell).validate()?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.sweep.seeds.clone().unwrap_or_else(|| vec![self.train.seed])
    }

    /// Cells in sweep order: algorithm, then eta, lambda, seed.
    pub fn cells(&self) -> Vec<CellKey> {
        let algorithms = self.sweep.algorithms.clone().unwrap_or_else(|| vec![self.train.algorithm]);
        let etas = self.sweep.eta.clone().unwrap_or_else(|| vec![self.train.fairness.eta]);
        let lambdas = self.sweep.lambda.clone().unwrap_or_else(|| vec![self.train.lambda]);
        let seeds = self.seeds();
        let mut out = Vec::new();
        for &algorithm in &algorithms {
            for &eta in &etas {
                for &lambda in &lambdas {
                    for &seed in &seeds {
                        out.push(CellKey {
                            algorithm,
                            eta,
                            lambda,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn cell_config(&self, cell: &CellKey) -> FairFLConfig {
        let mut cfg = self.train.clone();
        cfg.algorithm = cell.algorithm;
        cfg.fairness.eta = cell.eta;
        cfg.lambda = cell.lambda;
        cfg.seed = cell.seed;
        cfg
    }
}

/// Training and test shards, aligned by client index.
#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    pub train: Vec<ClientDataset>,
    pub test: Vec<ClientDataset>,
}

fn load_pool(data: &DataConfig, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut split_rng = Rng::derive(seed, streams::SPLIT);
    let read = |path: &Path| -> Result<Vec<Sample>> {
        match data.source {
            SourceKind::Csv => read_csv_samples(path, data.csv.as_ref().expect("validated")),
            _ => load_embeddings(path),
        }
    };
    let (mut train, mut test) = match data.source {
        SourceKind::Synth => {
            let spec = data.synth.as_ref().expect("validated");
            let pool = synth_gaussian(spec, &mut Rng::derive(seed, streams::SYNTH))?;
            split_pool(pool, data.test_fraction, &mut split_rng)
        }
        _ => {
            let pool = read(data.path.as_deref().expect("validated"))?;
            match &data.test_path {
                Some(p) => (pool, read(p)?),
                None => split_pool(pool, data.test_fraction, &mut split_rng),
            }
        }
    };
    if data.source == SourceKind::Csv {
        let st = Standardizer::fit_samples(&train);
        for s in train.iter_mut().chain(test.iter_mut()) {
            st.apply(&mut s.x)?;
        }
    }
    Ok((train, test))
}

/// Builds the federation for one seed: load or generate, split, partition
/// the training pool, then draw test shards mirroring each client's group
/// proportions.
pub fn prepare_federation(cfg: &ExperimentConfig, seed: u64) -> Result<Federation> {
    let (train_pool, test_pool) = load_pool(&cfg.data, seed)?;
    let part_rng = Rng::derive(seed, streams::PARTITION);
    let train = partition(&train_pool, &cfg.partition, &mut part_rng.substream(0))?;
    let counts = mirrored_counts(&train, cfg.data.test_ratio);
    let test = partition_fixed(&test_pool, &counts, &mut part_rng.substream(1))?;
    Ok(Federation { train, test })
}

/// Worst-case and average metrics across clients. Fairness uses the
/// sum-over-labels DDP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub worst_acc: f64,
    pub worst_ddp: f64,
    pub avg_acc: f64,
    pub avg_ddp: f64,
}

impl Summary {
    pub fn worst_err(&self) -> f64 {
        1.0 - self.worst_acc
    }

    pub fn avg_err(&self) -> f64 {
        1.0 - self.avg_acc
    }
}

pub fn summarize(records: &[MetricsRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::EmptyInput { op: "summarize" });
    }
    let n = records.len() as f64;
    Ok(Summary {
        worst_acc: records.iter().map(|r| r.acc).fold(f64::INFINITY, f64::min),
        worst_ddp: records.iter().map(|r| r.ddp_sum).fold(f64::NEG_INFINITY, f64::max),
        avg_acc: records.iter().map(|r| r.acc).sum::<f64>() / n,
        avg_ddp: records.iter().map(|r| r.ddp_sum).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: Algorithm,
    pub eta: f64,
    pub lambda: f64,
    pub seed: u64,
    pub summary: Summary,
    pub clients: Vec<MetricsRecord>,
    /// Path of the per-client JSON file, relative to the output directory.
    pub blob: String,
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    algorithm: &'a str,
    eta: f64,
    lambda: f64,
    seed: u64,
    worst_err: f64,
    worst_ddp: f64,
    avg_err: f64,
    avg_ddp: f64,
    clients: &'a str,
}

/// Writes the trade-off table for rows of a single algorithm, sorted by
/// `(eta, lambda, seed)`.
pub fn emit_tradeoff_csv(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(first) = rows.first() {
        if rows.iter().any(|r| r.algorithm != first.algorithm) {
            return Err(Error::invalid("trade-off rows", "rows mix algorithms"));
        }
    }
    let mut sorted: Vec<&SummaryRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        a.eta
            .total_cmp(&b.eta)
            .then(a.lambda.total_cmp(&b.lambda))
            .then(a.seed.cmp(&b.seed))
    });
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record([
        "algorithm", "eta", "lambda", "seed", "worst_err", "worst_ddp", "avg_err", "avg_ddp", "clients",
    ])?;
    for r in sorted {
        w.serialize(CsvRow {
            algorithm: r.algorithm.name(),
            eta: r.eta,
            lambda: r.lambda,
            seed: r.seed,
            worst_err: r.summary.worst_err(),
            worst_ddp: r.summary.worst_ddp,
            avg_err: r.summary.avg_err(),
            avg_ddp: r.summary.avg_ddp,
            clients: &r.blob,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains and evaluates one cell on a prepared federation.
pub fn run_cell(cfg: &ExperimentConfig, cell: &CellKey, fed: &Federation) -> Result<(SummaryRow, Vec<RoundLog>)> {
    let train_cfg = cfg.cell_config(cell);
    let (state, logs) = train(&fed.train, &train_cfg)?;
    let clients = evaluate(&state, &fed.test, &train_cfg)?;
    let summary = summarize(&clients)?;
    Ok((
        SummaryRow {
            algorithm: cell.algorithm,
            eta: cell.eta,
            lambda: cell.lambda,
            seed: cell.seed,
            summary,
            clients,
            blob: format!("clients/{}.json", cell.name()),
        },
        logs,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFailure {
    pub cell: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentOutcome {
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<CellFailure>,
    /// Trade-off CSV paths, one per algorithm.
    pub csv_paths: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_sha256: String,
    seeds: Vec<u64>,
    cells: Vec<String>,
    failures: &'a [CellFailure],
    config: String,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn jsonl(logs: &[RoundLog]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for log in logs {
        serde_json::to_writer(&mut out, log)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn execute_cell(cfg: &ExperimentConfig, cell: &CellKey, fed: &Result<Federation>) -> Result<SummaryRow> {
    let fed = fed.as_ref().map_err(|e| Error::Invalid {
        what: "federation",
        msg: e.to_string(),
    })?;
    let (row, logs) = run_cell(cfg, cell, fed)?;
    let out = &cfg.output_dir;
    write_file(&out.join("rounds").join(format!("{}.jsonl", cell.name())), &jsonl(&logs)?)?;
    write_file(&out.join(&row.blob), &serde_json::to_vec_pretty(&row.clients)?)?;
    Ok(row)
}

/// Runs every cell and writes all artifacts under `cfg.output_dir`. A failing
/// cell is logged and skipped.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let seeds: Vec<u64> = cfg.seeds().into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    let feds: Vec<(u64, Result<Federation>)> = seeds.iter().map(|&s| (s, prepare_federation(cfg, s))).collect();
    let fed_for = |seed: u64| &feds.iter().find(|(s, _)| *s == seed).expect("seed prepared").1;

    let cells = cfg.cells();
    let results: Vec<Result<SummaryRow>> = if cfg.sweep.parallel_cells {
        cells.par_iter().map(|c| execute_cell(cfg, c, fed_for(c.seed))).collect()
    } else {
        cells.iter().map(|c| execute_cell(cfg, c, fed_for(c.seed))).collect()
    };

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (cell, result) in cells.iter().zip(results) {
        match result {
            Ok(row) => rows.push(row),
            Err(e) => {
                eprintln!("cell {} failed: {e}", cell.name());
                failures.push(CellFailure {
                    cell: cell.name(),
                    error: e.to_string(),
                });
            }
        }
    }

    let mut csv_paths = Vec::new();
    let algorithms: Vec<Algorithm> = cells.iter().fold(Vec::new(), |mut acc, c| {
        if !acc.contains(&c.algorithm) {
            acc.push(c.algorithm);
        }
        acc
    });
    for alg in algorithms {
        let subset: Vec<SummaryRow> = rows.iter().filter(|r| r.algorithm == alg).cloned().collect();
        let path = out.join(format!("tradeoff_{alg}.csv"));
        emit_tradeoff_csv(&subset, &path)?;
        csv_paths.push(path);
    }

    let manifest = Manifest {
        config_sha256: cfg.hash()?,
        seeds,
        cells: cells.iter().map(CellKey::name).collect(),
        failures: &failures,
        config: cfg.to_toml_string()?,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_file(&out.join("manifest.json"), &bytes)?;
    let mut summary = fs::File::create(out.join("summary.jsonl")).map_err(|e| Error::io(out, e))?;
    for row in &rows {
        let mut line = serde_json::to_vec(row)?;
        line.push(b'\n');
        summary.write_all(&line).map_err(|e| Error::io(out, e))?;
    }

    Ok(ExperimentOutcome {
        rows,
        failures,
        csv_paths,
    })
}

/// Runs `f` on a pool capped by `FAIRFL_THREADS` when it is set.
pub fn with_worker_cap<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(f()),
        Ok(raw) => {
            let n: usize = raw
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={raw} must be a positive integer")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}
