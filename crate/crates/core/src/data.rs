//! Samples, client shards, ingestion and heterogeneous partitioning.
//!
//! Embedding file layout (all integers little-endian):
//!
//! ```text
//! offset  size     field
//! 0       4        magic  b"FFLE"
//! 4       4        n      u32, number of rows
//! 8       4        d      u32, feature dimension
//! 12      4*n*d    x      f32, row-major
//! ..      n        s      u8 in {0,1}
//! ..      n        y      u8 in {0,1}
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"FFLE";
const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub s: u8,
    pub y: u8,
}

impl Sample {
    pub fn new(x: Vec<f64>, s: u8, y: u8) -> Result<Self> {
        if s > 1 || y > 1 {
            return Err(Error::invalid("sample", format!("s={s}, y={y} must be binary")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sample", "non-finite feature"));
        }
        Ok(Self { x, s, y })
    }
}

/// One client's shard.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub samples: Vec<Sample>,
}

impl ClientDataset {
    pub fn new(client_id: usize, samples: Vec<Sample>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::EmptyInput { op: "ClientDataset" });
        };
        let d = first.x.len();
        if let Some(bad) = samples.iter().find(|s| s.x.len() != d) {
            return Err(Error::DimMismatch {
                op: "ClientDataset",
                left: d,
                right: bad.x.len(),
            });
        }
        Ok(Self { client_id, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    /// Number of samples with s=0 and s=1.
    pub fn group_counts(&self) -> [usize; 2] {
        group_counts(&self.samples)
    }

    pub fn require_both_groups(&self) -> Result<()> {
        let counts = self.group_counts();
        for g in 0..2u8 {
            if counts[g as usize] == 0 {
                return Err(Error::MissingGroup { group: g });
            }
        }
        Ok(())
    }
}

pub fn group_counts(samples: &[Sample]) -> [usize; 2] {
    samples.iter().fold([0, 0], |mut c, s| {
        c[s.s as usize] += 1;
        c
    })
}

/// Column selection for [`load_csv`]. An empty `features` list means every
/// column other than `s_column` and `y_column`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    #[serde(default)]
    pub features: Vec<String>,
    pub s_column: String,
    pub y_column: String,
}

/// Per-column affine standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// `None` marks a column whose variance fell under the floor; it maps to 0.
    pub std: Vec<Option<f64>>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((acc, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let v = v / n;
                (v >= VARIANCE_FLOOR).then(|| v.sqrt())
            })
            .collect();
        Self { mean, std }
    }

    pub fn fit_samples(samples: &[Sample]) -> Self {
        let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
        Self::fit(&rows)
    }

    pub fn apply(&self, x: &mut [f64]) -> Result<()> {
        if x.len() != self.mean.len() {
            return Err(Error::DimMismatch {
                op: "Standardizer::apply",
                left: self.mean.len(),
                right: x.len(),
            });
        }
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = match s {
                Some(s) => (*v - m) / s,
                None => 0.0,
            };
        }
        Ok(())
    }
}

/// Samples loaded from CSV together with the fitted standardization.
#[derive(Debug, Clone)]
pub struct CsvData {
    pub samples: Vec<Sample>,
    pub standardizer: Standardizer,
}

fn parse_binary(path: &Path, row: usize, column: &str, raw: &str) -> Result<u8> {
    match raw.trim() {
        "0" | "0.0" => Ok(0),
        "1" | "1.0" => Ok(1),
        other => Err(Error::NonBinary {
            path: path.to_path_buf(),
            row,
            column: column.to_string(),
            value: other.to_string(),
        }),
    }
}

fn read_csv_raw(path: &Path, schema: &CsvSchema) -> Result<(Vec<Vec<f64>>, Vec<u8>, Vec<u8>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            ),
            _ => Error::Csv(e),
        })?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("missing column `{name}`"),
        })
    };
    let s_idx = find(&schema.s_column)?;
    let y_idx = find(&schema.y_column)?;
    let feature_idx: Vec<usize> = if schema.features.is_empty() {
        (0..headers.len()).filter(|&i| i != s_idx && i != y_idx).collect()
    } else {
        schema.features.iter().map(|f| find(f)).collect::<Result<_>>()?
    };

    let mut xs = Vec::new();
    let mut ss = Vec::new();
    let mut ys = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Row numbers count the header as row 1.
        let row = i + 2;
        let record = record.map_err(|e| Error::MalformedRow {
            path: path.to_path_buf(),
            row,
            msg: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                row,
                msg: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let x = feature_idx
            .iter()
            .map(|&j| {
                let raw = &record[j];
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::MalformedRow {
                        path: path.to_path_buf(),
                        row,
                        msg: format!("column `{}`: cannot parse `{raw}` as a finite number", &headers[j]),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        ss.push(parse_binary(path, row, &schema.s_column, &record[s_idx])?);
        ys.push(parse_binary(path, row, &schema.y_column, &record[y_idx])?);
        xs.push(x);
    }
    Ok((xs, ss, ys))
}

fn assemble(xs: Vec<Vec<f64>>, ss: Vec<u8>, ys: Vec<u8>) -> Vec<Sample> {
    xs.into_iter()
        .zip(ss)
        .zip(ys)
        .map(|((x, s), y)| Sample { x, s, y })
        .collect()
}

/// Loads a CSV without standardization.
pub fn read_csv_samples(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Vec<Sample>> {
    let (xs, ss, ys) = read_csv_raw(path.as_ref(), schema)?;
    Ok(assemble(xs, ss, ys))
}

/// Loads a CSV training split and standardizes features over it.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<CsvData> {
    let path = path.as_ref();
    let (mut xs, ss, ys) = read_csv_raw(path, schema)?;
    let standardizer = Standardizer::fit(&xs);
    for x in &mut xs {
        standardizer.apply(x)?;
    }
    Ok(CsvData {
        samples: assemble(xs, ss, ys),
        standardizer,
    })
}

/// Loads a CSV split (typically test) using statistics fitted elsewhere.
pub fn load_csv_with(
    path: impl AsRef<Path>,
    schema: &CsvSchema,
    standardizer: &Standardizer,
) -> Result<Vec<Sample>> {
    let (mut xs, ss, ys) = read_csv_raw(path.as_ref(), schema)?;
    for x in &mut xs {
        standardizer.apply(x)?;
    }
    Ok(assemble(xs, ss, ys))
}

/// Reads the binary embedding format. Features are widened to f64 as-is.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(path, &bytes)
}

fn decode_embeddings(path: &Path, bytes: &[u8]) -> Result<Vec<Sample>> {
    const HEADER: usize = 12;
    if bytes.len() < HEADER {
        return Err(Error::EmbeddingLength {
            path: path.to_path_buf(),
            expected: HEADER,
            found: bytes.len(),
        });
    }
    if bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "bad magic, expected FFLE".into(),
        });
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let n = read_u32(4);
    let d = read_u32(8);
    let expected = HEADER + 4 * n * d + 2 * n;
    if bytes.len() != expected {
        return Err(Error::EmbeddingLength {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let floats = &bytes[HEADER..HEADER + 4 * n * d];
    let s_bytes = &bytes[HEADER + 4 * n * d..HEADER + 4 * n * d + n];
    let y_bytes = &bytes[HEADER + 4 * n * d + n..];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = floats[i * 4 * d..(i + 1) * 4 * d]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect::<Vec<_>>();
        let (s, y) = (s_bytes[i], y_bytes[i]);
        for (column, value) in [("s", s), ("y", y)] {
            if value > 1 {
                return Err(Error::NonBinary {
                    path: path.to_path_buf(),
                    row: i,
                    column: column.into(),
                    value: value.to_string(),
                });
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("row {i}: non-finite feature"),
            });
        }
        out.push(Sample { x, s, y });
    }
    Ok(out)
}

pub fn encode_embeddings(samples: &[Sample]) -> Result<Vec<u8>> {
    let d = samples.first().map_or(0, |s| s.x.len());
    let mut out = Vec::with_capacity(12 + samples.len() * (4 * d + 2));
    out.extend_from_slice(&EMBEDDING_MAGIC);
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for s in samples {
        if s.x.len() != d {
            return Err(Error::DimMismatch {
                op: "encode_embeddings",
                left: d,
                right: s.x.len(),
            });
        }
        for v in &s.x {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out.extend(samples.iter().map(|s| s.s));
    out.extend(samples.iter().map(|s| s.y));
    Ok(out)
}

pub fn write_embeddings(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embeddings(samples)?).map_err(|e| Error::io(path, e))
}

/// Writes samples as CSV with columns `f1..fd,s,y`.
pub fn write_csv(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(Error::Csv)?;
    let d = samples.first().map_or(0, |s| s.x.len());
    let mut header: Vec<String> = (1..=d).map(|i| format!("f{i}")).collect();
    header.push("s".into());
    header.push("y".into());
    w.write_record(&header)?;
    for s in samples {
        let mut rec: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
        rec.push(s.s.to_string());
        rec.push(s.y.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Gaussian class-conditional generator: `s ~ Bern(p_s1)`,
/// `y ~ Bern(p_y1_s{s})`, `x ~ N(mean_y{y}_s{s}, sigma^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub sigma: f64,
    pub p_s1: f64,
    pub p_y1_s0: f64,
    pub p_y1_s1: f64,
    pub mean_y0_s0: Vec<f64>,
    pub mean_y0_s1: Vec<f64>,
    pub mean_y1_s0: Vec<f64>,
    pub mean_y1_s1: Vec<f64>,
}

impl SynthSpec {
    pub fn dim(&self) -> usize {
        self.mean_y0_s0.len()
    }

    fn mean(&self, y: u8, s: u8) -> &[f64] {
        match (y, s) {
            (0, 0) => &self.mean_y0_s0,
            (0, _) => &self.mean_y0_s1,
            (_, 0) => &self.mean_y1_s0,
            _ => &self.mean_y1_s1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::invalid("synth spec", "feature dimension must be positive"));
        }
        for (y, s) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let m = self.mean(y, s);
            if m.len() != d {
                return Err(Error::invalid(
                    "synth spec",
                    format!("mean_y{y}_s{s} has length {}, expected {d}", m.len()),
                ));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("synth spec", format!("mean_y{y}_s{s} is not finite")));
            }
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("synth spec", "sigma must be positive"));
        }
        for (name, p) in [("p_s1", self.p_s1), ("p_y1_s0", self.p_y1_s0), ("p_y1_s1", self.p_y1_s1)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid("synth spec", format!("{name}={p} outside [0,1]")));
            }
        }
        Ok(())
    }
}

pub fn synth_gaussian(spec: &SynthSpec, rng: &mut Rng) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let s = rng.bernoulli(spec.p_s1) as u8;
        let p_y = if s == 0 { spec.p_y1_s0 } else { spec.p_y1_s1 };
        let y = rng.bernoulli(p_y) as u8;
        let x = spec
            .mean(y, s)
            .iter()
            .map(|m| m + spec.sigma * rng.normal())
            .collect();
        out.push(Sample { x, s, y });
    }
    Ok(out)
}

/// Two-mode Dirichlet mixture over the binary sensitive attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirichletSpec {
    pub clients: usize,
    pub samples_per_client: usize,
    pub alpha_under: f64,
    pub alpha_over: f64,
    pub fraction_under: f64,
    /// Target share of s=1 for under-represented clients.
    #[serde(default = "default_under_share")]
    pub under_share_s1: f64,
    /// Target share of s=1 for over-represented clients.
    #[serde(default = "default_over_share")]
    pub over_share_s1: f64,
}

fn default_under_share() -> f64 {
    0.8
}

fn default_over_share() -> f64 {
    0.2
}

impl DirichletSpec {
    pub fn under_clients(&self) -> usize {
        ((self.fraction_under * self.clients as f64) - 1e-9).ceil().max(0.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum PartitionSpec {
    /// Exact `[count_s0, count_s1]` per client.
    Fixed { counts: Vec<[usize; 2]> },
    Dirichlet(DirichletSpec),
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            PartitionSpec::Fixed { counts } => {
                if counts.is_empty() {
                    return Err(Error::invalid("partition", "no clients"));
                }
                if let Some((i, _)) = counts.iter().enumerate().find(|(_, c)| c[0] == 0 || c[1] == 0) {
                    return Err(Error::invalid(
                        "partition",
                        format!("client {i} must receive at least one sample of each group"),
                    ));
                }
            }
            PartitionSpec::Dirichlet(d) => {
                if d.clients == 0 {
                    return Err(Error::invalid("partition", "no clients"));
                }
                if d.samples_per_client < 2 {
                    return Err(Error::invalid("partition", "samples_per_client must be at least 2"));
                }
                for (name, a) in [("alpha_under", d.alpha_under), ("alpha_over", d.alpha_over)] {
                    if !(a > 0.0 && a.is_finite()) {
                        return Err(Error::invalid("partition", format!("{name} must be positive")));
                    }
                }
                for (name, p) in [
                    ("fraction_under", d.fraction_under),
                    ("under_share_s1", d.under_share_s1),
                    ("over_share_s1", d.over_share_s1),
                ] {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::invalid("partition", format!("{name}={p} outside [0,1]")));
                    }
                }
                for (name, p) in [("under_share_s1", d.under_share_s1), ("over_share_s1", d.over_share_s1)] {
                    if p == 0.0 || p == 1.0 {
                        return Err(Error::invalid("partition", format!("{name} must lie strictly inside (0,1)")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Draws disjoint shards with exact per-group counts, sampling within each
/// group uniformly at random.
pub fn partition_fixed(data: &[Sample], counts: &[[usize; 2]], rng: &mut Rng) -> Result<Vec<ClientDataset>> {
    PartitionSpec::Fixed { counts: counts.to_vec() }.validate()?;
    let mut pools: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, s) in data.iter().enumerate() {
        pools[s.s as usize].push(i);
    }
    for g in 0..2u8 {
        let requested: usize = counts.iter().map(|c| c[g as usize]).sum();
        let available = pools[g as usize].len();
        if requested > available {
            return Err(Error::InsufficientSamples {
                group: g,
                requested,
                available,
            });
        }
    }
    for pool in &mut pools {
        rng.shuffle(pool);
    }
    let mut cursor = [0usize; 2];
    counts
        .iter()
        .enumerate()
        .map(|(client_id, c)| {
            let mut idx = Vec::with_capacity(c[0] + c[1]);
            for g in 0..2 {
                idx.extend_from_slice(&pools[g][cursor[g]..cursor[g] + c[g]]);
                cursor[g] += c[g];
            }
            idx.sort_unstable();
            ClientDataset::new(client_id, idx.into_iter().map(|i| data[i].clone()).collect())
        })
        .collect()
}

/// Per-client group counts drawn from the two-mode Beta mixture, clamped so
/// each group keeps at least one sample.
pub fn dirichlet_counts(spec: &DirichletSpec, rng: &mut Rng) -> Result<Vec<[usize; 2]>> {
    PartitionSpec::Dirichlet(spec.clone()).validate()?;
    let n = spec.samples_per_client;
    let under = spec.under_clients();
    (0..spec.clients)
        .map(|i| {
            let (alpha, target) = if i < under {
                (spec.alpha_under, spec.under_share_s1)
            } else {
                (spec.alpha_over, spec.over_share_s1)
            };
            let p = rng.beta(alpha * target, alpha * (1.0 - target))?;
            let n1 = ((p * n as f64).round() as usize).clamp(1, n - 1);
            Ok([n - n1, n1])
        })
        .collect()
}

pub fn partition_dirichlet(data: &[Sample], spec: &DirichletSpec, rng: &mut Rng) -> Result<Vec<ClientDataset>> {
    let counts = dirichlet_counts(spec, rng)?;
    partition_fixed(data, &counts, rng)
}

pub fn partition(data: &[Sample], spec: &PartitionSpec, rng: &mut Rng) -> Result<Vec<ClientDataset>> {
    match spec {
        PartitionSpec::Fixed { counts } => partition_fixed(data, counts, rng),
        PartitionSpec::Dirichlet(d) => partition_dirichlet(data, d, rng),
    }
}

/// Test-shard counts that preserve each client's training group proportions,
/// scaled by `ratio` (at least one sample per group).
pub fn mirrored_counts(clients: &[ClientDataset], ratio: f64) -> Vec<[usize; 2]> {
    clients
        .iter()
        .map(|c| {
            let g = c.group_counts();
            [
                ((g[0] as f64 * ratio).round() as usize).max(1),
                ((g[1] as f64 * ratio).round() as usize).max(1),
            ]
        })
        .collect()
}

/// Random split of a pool into `(train, test)` with `test_fraction` of the
/// samples going to test.
pub fn split_pool(samples: Vec<Sample>, test_fraction: f64, rng: &mut Rng) -> (Vec<Sample>, Vec<Sample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    rng.shuffle(&mut idx);
    let n_test = (samples.len() as f64 * test_fraction).round() as usize;
    let mut is_test = vec![false; samples.len()];
    for &i in &idx[..n_test.min(samples.len())] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, t) in samples.into_iter().zip(is_test) {
        if t {
            test.push(s)
        } else {
            train.push(s)
        }
    }
    (train, test)
}
