//! Command-line front end: data generation, partitioning, training,
//! evaluation, sweeps and the discrete fairness oracle.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fairfl::data::{synth_gaussian, write_csv, write_embeddings};
use fairfl::fedengine::{evaluate, train, Algorithm, FederationState};
use fairfl::model::{load_checkpoint, save_checkpoint};
use fairfl::numerics::{streams, Rng};
use fairfl::oracle::{fair_optimal_risk_closed_form, fair_optimum_grid, parity_gap_bound, DiscreteInstance};
use fairfl::report::{prepare_federation, run_experiment, summarize, with_worker_cap, ExperimentConfig};
use fairfl::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "fairfl", version, about = "Federated learning with client-level demographic parity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the synthetic pool described by `[data.synth]` (.csv or binary embeddings by extension).
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
    /// Write per-client train/test shards as CSV.
    Partition {
        #[command(flatten)]
        common: Common,
    },
    /// Train one configuration and save checkpoints plus round logs.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate saved checkpoints on the configured test shards.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`.
        #[arg(long)]
        checkpoints: PathBuf,
    },
    /// Run every sweep cell; writes trade-off CSVs, JSON-lines logs and a manifest.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Fair optimum of one instance, or the gap bound over several clients.
    Oracle {
        /// Instance JSON `{"x_size": n, "table": [...]}`; repeat for a client family.
        #[arg(long = "instance", required = true)]
        instances: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        epsilon: f64,
        #[arg(long = "grid-n", default_value_t = 101)]
        grid_n: usize,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the training seed and the sweep seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[arg(long, allow_negative_numbers = true)]
    eta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.sweep.seeds = Some(vec![seed]);
        }
        if let Some(alg) = self.algorithm {
            cfg.train.algorithm = alg;
            cfg.sweep.algorithms = None;
        }
        if let Some(eta) = self.eta {
            cfg.train.fairness.eta = eta;
            cfg.sweep.eta = None;
        }
        if let Some(lambda) = self.lambda {
            cfg.train.lambda = lambda;
            cfg.sweep.lambda = None;
        }
        if let Some(rounds) = self.rounds {
            cfg.train.rounds = rounds;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn gen_synth(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let spec = cfg
        .data
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("gen-synth needs source = \"synth\"".into()))?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("synth.csv"));
    let samples = synth_gaussian(spec, &mut Rng::derive(cfg.train.seed, streams::SYNTH))?;
    if out.extension().is_some_and(|e| e == "csv") {
        write_csv(&out, &samples)?;
    } else {
        write_embeddings(&out, &samples)?;
    }
    print_json(&json!({ "path": out, "samples": samples.len(), "dim": spec.dim() }))
}

fn partition_cmd(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let fed = prepare_federation(&cfg, cfg.train.seed)?;
    let mut shards = Vec::new();
    for (tr, te) in fed.train.iter().zip(&fed.test) {
        let train_path = cfg.output_dir.join(format!("client{}_train.csv", tr.client_id));
        let test_path = cfg.output_dir.join(format!("client{}_test.csv", te.client_id));
        fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
        write_csv(&train_path, &tr.samples)?;
        write_csv(&test_path, &te.samples)?;
        shards.push(json!({
            "client_id": tr.client_id,
            "train_counts": tr.group_counts(),
            "test_counts": te.group_counts(),
        }));
    }
    print_json(&json!({ "seed": cfg.train.seed, "clients": shards }))
}

fn train_cmd(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let fed = prepare_federation(&cfg, cfg.train.seed)?;
    let (state, logs) = train(&fed.train, &cfg.train)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(dir.join("global.ffm"), &state.global)?;
    for (i, model) in state.personalized.iter().enumerate() {
        save_checkpoint(dir.join(format!("client{i}.ffm")), model)?;
    }
    let mut lines = Vec::new();
    for log in &logs {
        serde_json::to_writer(&mut lines, log)?;
        lines.push(b'\n');
    }
    write(&dir.join("rounds.jsonl"), &lines)?;
    let records = evaluate(&state, &fed.test, &cfg.train)?;
    print_json(&json!({
        "algorithm": cfg.train.algorithm,
        "rounds": state.round,
        "checkpoints": dir,
        "summary": summarize(&records)?,
    }))
}

fn evaluate_cmd(common: &Common, checkpoints: &Path) -> Result<()> {
    let cfg = common.load()?;
    let fed = prepare_federation(&cfg, cfg.train.seed)?;
    let global = load_checkpoint(checkpoints.join("global.ffm"))?;
    let personalized = (0..fed.test.len())
        .map(|i| load_checkpoint(checkpoints.join(format!("client{i}.ffm"))))
        .collect::<Result<Vec<_>>>()?;
    let state = FederationState {
        global,
        personalized,
        round: cfg.train.rounds,
    };
    let records = evaluate(&state, &fed.test, &cfg.train)?;
    let report = json!({ "summary": summarize(&records)?, "clients": records });
    if let Some(out) = &common.out {
        write(&out.join("metrics.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    print_json(&report)
}

fn sweep_cmd(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let outcome = run_experiment(&cfg)?;
    print_json(&json!({
        "output_dir": cfg.output_dir,
        "cells": outcome.rows.len() + outcome.failures.len(),
        "failed": outcome.failures,
        "csv": outcome.csv_paths,
    }))
}

fn oracle_cmd(instances: &[PathBuf], epsilon: f64, grid_n: usize, out: Option<&Path>) -> Result<()> {
    let loaded = instances.iter().map(DiscreteInstance::load).collect::<Result<Vec<_>>>()?;
    let report = if let [inst] = loaded.as_slice() {
        let opt = fair_optimum_grid(inst, epsilon, grid_n)?;
        let closed = match fair_optimal_risk_closed_form(inst) {
            Ok(risk) => json!({ "risk": risk, "difference": opt.risk - risk }),
            Err(e) => json!({ "unavailable": e.to_string() }),
        };
        json!({ "fair_optimum": opt, "closed_form": if epsilon == 0.0 { closed } else { json!(null) } })
    } else {
        json!({ "gap_bound": parity_gap_bound(&loaded, grid_n)? })
    };
    if let Some(path) = out {
        write(path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    print_json(&report)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynth { common } => gen_synth(common),
        Command::Partition { common } => partition_cmd(common),
        Command::Train { common } => train_cmd(common),
        Command::Evaluate { common, checkpoints } => evaluate_cmd(common, checkpoints),
        Command::Sweep { common } => sweep_cmd(common),
        Command::Oracle {
            instances,
            epsilon,
            grid_n,
            out,
        } => oracle_cmd(instances, *epsilon, *grid_n, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match with_worker_cap(|| run(cli)).and_then(|r| r) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
