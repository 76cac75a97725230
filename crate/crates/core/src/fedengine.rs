//! Federated optimization: local-only training, FedAvg, pFedMe and pFedFair.
//!
//! All client work in a round is independent and runs on the rayon pool; the
//! server always reduces client results in ascending `client_id` order, so
//! serial and parallel runs produce identical weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Sample};
use crate::error::{Error, Result};
use crate::fairness::{ddp_gap, ddp_hard, fair_objective, npr, FairnessPenaltyConfig};
use crate::model::{bce, bce_loss_and_grad, Architecture, LossReport, ModelParams};
use crate::numerics::{norm, stream_key, streams, Rng};

/// Weight norms above this abort training.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Local,
    FedAvg,
    PFedMe,
    PFedFair,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Local => "local",
            Algorithm::FedAvg => "fedavg",
            Algorithm::PFedMe => "pfedme",
            Algorithm::PFedFair => "pfedfair",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Algorithm::Local),
            "fedavg" => Ok(Algorithm::FedAvg),
            "pfedme" => Ok(Algorithm::PFedMe),
            "pfedfair" => Ok(Algorithm::PFedFair),
            other => Err(Error::invalid(
                "algorithm",
                format!("`{other}` (expected local, fedavg, pfedme or pfedfair)"),
            )),
        }
    }
}

/// Objective minimized by the personalized (proximal) models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerObjective {
    /// BCE plus the fairness penalty.
    #[default]
    Fair,
    /// BCE only.
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairFLConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    /// Server-side step `alpha` (pFedMe, pFedFair).
    pub outer_lr: f64,
    /// Local/proximal steps per round.
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Weight of the personalized fair term in pFedFair.
    pub lambda: f64,
    /// Moreau proximity weight.
    pub gamma: f64,
    #[serde(flatten)]
    pub fairness: FairnessPenaltyConfig,
    pub seed: u64,
    pub architecture: Architecture,
    #[serde(default)]
    pub inner_objective: InnerObjective,
    /// Fraction of clients sampled each round.
    #[serde(default = "default_participation")]
    pub participation: f64,
}

fn default_participation() -> f64 {
    1.0
}

impl Default for FairFLConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::PFedFair,
            rounds: 50,
            outer_lr: 0.5,
            inner_steps: 10,
            inner_lr: 0.1,
            lambda: 0.4,
            gamma: 1.0,
            fairness: FairnessPenaltyConfig::default(),
            seed: 0,
            architecture: Architecture::Linear,
            inner_objective: InnerObjective::Fair,
            participation: 1.0,
        }
    }
}

impl FairFLConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("training config", msg));
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1".into());
        }
        for (name, v) in [("outer_lr", self.outer_lr), ("inner_lr", self.inner_lr), ("gamma", self.gamma)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name}={v} must be positive"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda={} must be >= 0", self.lambda));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!("participation={} must lie in (0, 1]", self.participation));
        }
        if let Architecture::Mlp { hidden } = &self.architecture {
            if hidden.is_empty() || hidden.contains(&0) {
                return bad("mlp hidden widths must be nonempty and positive".into());
            }
        }
        self.fairness.validate()
    }

    fn inner_penalty(&self) -> FairnessPenaltyConfig {
        match self.inner_objective {
            InnerObjective::Fair => self.fairness,
            InnerObjective::Clean => FairnessPenaltyConfig {
                eta: 0.0,
                ..self.fairness
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationState {
    pub global: ModelParams,
    /// One model per client: the proximal model for pFedMe/pFedFair, the
    /// client's own model for local training, the last local iterate for
    /// FedAvg.
    pub personalized: Vec<ModelParams>,
    pub round: usize,
}

impl FederationState {
    pub fn init(cfg: &FairFLConfig, input_dim: usize, clients: usize) -> Self {
        let mut rng = Rng::derive(cfg.seed, streams::INIT);
        let global = ModelParams::init(cfg.architecture.clone(), input_dim, &mut rng);
        Self {
            personalized: vec![global.clone(); clients],
            global,
            round: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundLog {
    pub client_id: usize,
    pub train_loss: f64,
    pub fair_penalty: Option<f64>,
    /// `||w~_i - w||`
    pub step_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub clients: Vec<ClientRoundLog>,
    pub global_norm: f64,
}

/// Something with a value and gradient at a weight vector.
pub trait Objective {
    fn evaluate(&self, w: &ModelParams) -> Result<LossReport>;
}

/// A client's fair (or clean, when `eta == 0`) empirical loss.
pub struct ClientObjective<'a> {
    pub samples: &'a [Sample],
    pub penalty: FairnessPenaltyConfig,
}

impl Objective for ClientObjective<'_> {
    fn evaluate(&self, w: &ModelParams) -> Result<LossReport> {
        Ok(fair_objective(w, self.samples, &self.penalty)?.report)
    }
}

fn check_weights(w: &ModelParams, what: &str) -> Result<()> {
    let n = w.norm();
    if !n.is_finite() || n > DIVERGENCE_NORM {
        return Err(Error::Divergence {
            round: 0,
            client: 0,
            detail: format!("{what} weight norm {n:e} exceeds {DIVERGENCE_NORM:e}"),
        });
    }
    Ok(())
}

fn locate(err: Error, round: usize, client: usize) -> Error {
    match err {
        Error::Divergence { detail, .. } => Error::Divergence { round, client, detail },
        other => other,
    }
}

/// `steps` iterations of gradient descent with step `lr` on
/// `objective(w) + gamma/2 ||w - anchor||^2`, starting at `anchor`.
pub fn prox_descent<O: Objective>(
    anchor: &ModelParams,
    objective: &O,
    gamma: f64,
    steps: usize,
    lr: f64,
) -> Result<ModelParams> {
    let mut w = anchor.clone();
    for _ in 0..steps {
        let g = objective.evaluate(&w)?.gradient;
        for ((wi, gi), ai) in w.weights.iter_mut().zip(&g).zip(&anchor.weights) {
            *wi -= lr * (gi + gamma * (*wi - ai));
        }
        check_weights(&w, "proximal")?;
    }
    Ok(w)
}

/// Personalized model `argmin_w L_i(w) + gamma/2 ||w - global||^2`,
/// approximated by `inner_steps` GD steps.
pub fn moreau_argmin(global: &ModelParams, client: &ClientDataset, cfg: &FairFLConfig) -> Result<ModelParams> {
    let objective = ClientObjective {
        samples: &client.samples,
        penalty: cfg.inner_penalty(),
    };
    prox_descent(global, &objective, cfg.gamma, cfg.inner_steps, cfg.inner_lr)
}

/// `steps` plain GD steps on the client's fair loss. Returns the final
/// weights and the objective report at the starting point.
fn local_descent(
    start: &ModelParams,
    samples: &[Sample],
    penalty: &FairnessPenaltyConfig,
    steps: usize,
    lr: f64,
) -> Result<(ModelParams, f64, Option<f64>)> {
    let mut w = start.clone();
    let mut first = None;
    for _ in 0..steps {
        let r = fair_objective(&w, samples, penalty)?;
        first.get_or_insert((r.report.mean_loss, r.penalty));
        for (wi, gi) in w.weights.iter_mut().zip(&r.report.gradient) {
            *wi -= lr * gi;
        }
        check_weights(&w, "local")?;
    }
    let (loss, pen) = first.unwrap_or((f64::NAN, None));
    Ok((w, loss, pen))
}

fn diff_norm(a: &ModelParams, b: &ModelParams) -> f64 {
    let d: Vec<f64> = a.weights.iter().zip(&b.weights).map(|(x, y)| x - y).collect();
    norm(&d)
}

struct ClientStep {
    client_id: usize,
    updated: ModelParams,
    personal: ModelParams,
    log: ClientRoundLog,
}

fn participants(clients: &[ClientDataset], cfg: &FairFLConfig, round: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..clients.len()).collect();
    if cfg.participation < 1.0 {
        let k = ((cfg.participation * clients.len() as f64).ceil() as usize).clamp(1, clients.len());
        let mut rng = Rng::derive(cfg.seed, stream_key(&[streams::PARTICIPATION, round as u64]));
        rng.shuffle(&mut idx);
        idx.truncate(k);
        idx.sort_unstable_by_key(|&i| clients[i].client_id);
    }
    idx
}

fn run_round<F>(state: &FederationState, clients: &[ClientDataset], cfg: &FairFLConfig, step: F) -> Result<(FederationState, RoundLog)>
where
    F: Fn(&ClientDataset, usize) -> Result<ClientStep> + Sync,
{
    cfg.validate()?;
    check_clients(clients, cfg)?;
    let round = state.round + 1;
    let chosen = participants(clients, cfg, round);
    let mut steps: Vec<(usize, ClientStep)> = chosen
        .par_iter()
        .map(|&i| {
            step(&clients[i], i)
                .map(|s| (i, s))
                .map_err(|e| locate(e, round, clients[i].client_id))
        })
        .collect::<Result<_>>()?;
    steps.sort_by_key(|(_, s)| s.client_id);

    let mut global = vec![0.0; state.global.len()];
    for (_, s) in &steps {
        for (g, w) in global.iter_mut().zip(&s.updated.weights) {
            *g += w;
        }
    }
    let m = steps.len() as f64;
    global.iter_mut().for_each(|g| *g /= m);
    let global = state.global.with_weights(global);
    check_weights(&global, "global").map_err(|e| locate(e, round, usize::MAX))?;

    let mut personalized = state.personalized.clone();
    let mut logs = Vec::with_capacity(steps.len());
    for (i, s) in steps {
        personalized[i] = s.personal;
        logs.push(s.log);
    }
    let log = RoundLog {
        round,
        clients: logs,
        global_norm: global.norm(),
    };
    Ok((
        FederationState {
            global,
            personalized,
            round,
        },
        log,
    ))
}

/// FedAvg: `inner_steps` GD steps with `inner_lr` on each client's fair loss
/// from the global weights, then an unweighted average.
pub fn fedavg_round(state: &FederationState, clients: &[ClientDataset], cfg: &FairFLConfig) -> Result<(FederationState, RoundLog)> {
    run_round(state, clients, cfg, |client, _| {
        let (w, loss, pen) = local_descent(&state.global, &client.samples, &cfg.fairness, cfg.inner_steps, cfg.inner_lr)?;
        Ok(ClientStep {
            client_id: client.client_id,
            log: ClientRoundLog {
                client_id: client.client_id,
                train_loss: loss,
                fair_penalty: pen,
                step_norm: diff_norm(&w, &state.global),
            },
            personal: w.clone(),
            updated: w,
        })
    })
}

/// pFedMe: each client solves the proximal problem on its full fair loss and
/// moves the global weights along the envelope gradient
/// `gamma (w - w_i)`. `lambda` plays no role.
pub fn pfedme_round(state: &FederationState, clients: &[ClientDataset], cfg: &FairFLConfig) -> Result<(FederationState, RoundLog)> {
    let inner = FairFLConfig {
        inner_objective: InnerObjective::Fair,
        ..cfg.clone()
    };
    run_round(state, clients, cfg, |client, _| {
        let w = &state.global;
        let personal = moreau_argmin(w, client, &inner)?;
        let at_personal = fair_objective(&personal, &client.samples, &cfg.fairness)?;
        let updated: Vec<f64> = w
            .weights
            .iter()
            .zip(&personal.weights)
            .map(|(wj, pj)| wj - cfg.outer_lr * (cfg.gamma * (wj - pj)))
            .collect();
        let updated = w.with_weights(updated);
        Ok(ClientStep {
            client_id: client.client_id,
            log: ClientRoundLog {
                client_id: client.client_id,
                train_loss: at_personal.report.mean_loss,
                fair_penalty: at_personal.penalty,
                step_norm: diff_norm(&updated, w),
            },
            personal,
            updated,
        })
    })
}

/// pFedFair: the global weights follow the clean-loss gradient plus
/// `lambda` times the envelope gradient of the personalized fair objective.
pub fn pfedfair_round(state: &FederationState, clients: &[ClientDataset], cfg: &FairFLConfig) -> Result<(FederationState, RoundLog)> {
    run_round(state, clients, cfg, |client, _| {
        let w = &state.global;
        let clean = bce_loss_and_grad(w, &client.samples)?;
        let personal = moreau_argmin(w, client, cfg)?;
        let penalty = if cfg.fairness.eta > 0.0 {
            fair_objective(&personal, &client.samples, &cfg.fairness)?.penalty
        } else {
            None
        };
        let updated: Vec<f64> = w
            .weights
            .iter()
            .zip(&clean.gradient)
            .zip(&personal.weights)
            .map(|((wj, gj), pj)| {
                let g_fair = cfg.gamma * (wj - pj);
                wj - cfg.outer_lr * (gj + cfg.lambda * g_fair)
            })
            .collect();
        let updated = w.with_weights(updated);
        Ok(ClientStep {
            client_id: client.client_id,
            log: ClientRoundLog {
                client_id: client.client_id,
                train_loss: clean.mean_loss,
                fair_penalty: penalty,
                step_norm: diff_norm(&updated, w),
            },
            personal,
            updated,
        })
    })
}

/// Local-only training: every client continues from its own model for
/// `inner_steps` steps; no communication.
pub fn local_round(state: &FederationState, clients: &[ClientDataset], cfg: &FairFLConfig) -> Result<(FederationState, RoundLog)> {
    cfg.validate()?;
    check_clients(clients, cfg)?;
    let round = state.round + 1;
    let results: Vec<(ModelParams, ClientRoundLog)> = clients
        .par_iter()
        .enumerate()
        .map(|(i, client)| {
            let start = &state.personalized[i];
            let (w, loss, pen) = local_descent(start, &client.samples, &cfg.fairness, cfg.inner_steps, cfg.inner_lr)
                .map_err(|e| locate(e, round, client.client_id))?;
            let log = ClientRoundLog {
                client_id: client.client_id,
                train_loss: loss,
                fair_penalty: pen,
                step_norm: diff_norm(&w, start),
            };
            Ok((w, log))
        })
        .collect::<Result<_>>()?;
    let (personalized, clients_log): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let log = RoundLog {
        round,
        clients: clients_log,
        global_norm: state.global.norm(),
    };
    Ok((
        FederationState {
            global: state.global.clone(),
            personalized,
            round,
        },
        log,
    ))
}

fn check_clients(clients: &[ClientDataset], cfg: &FairFLConfig) -> Result<()> {
    let first = clients.first().ok_or(Error::EmptyInput { op: "train" })?;
    let d = first.dim();
    for c in clients {
        if c.is_empty() {
            return Err(Error::EmptyInput { op: "client shard" });
        }
        if c.dim() != d {
            return Err(Error::DimMismatch {
                op: "client feature dimension",
                left: d,
                right: c.dim(),
            });
        }
        if cfg.fairness.eta > 0.0 {
            c.require_both_groups()?;
        }
    }
    Ok(())
}

pub fn round(state: &FederationState, clients: &[ClientDataset], cfg: &FairFLConfig) -> Result<(FederationState, RoundLog)> {
    match cfg.algorithm {
        Algorithm::Local => local_round(state, clients, cfg),
        Algorithm::FedAvg => fedavg_round(state, clients, cfg),
        Algorithm::PFedMe => pfedme_round(state, clients, cfg),
        Algorithm::PFedFair => pfedfair_round(state, clients, cfg),
    }
}

/// Runs `cfg.rounds` rounds from a seeded initialization.
pub fn train(clients: &[ClientDataset], cfg: &FairFLConfig) -> Result<(FederationState, Vec<RoundLog>)> {
    cfg.validate()?;
    check_clients(clients, cfg)?;
    let mut state = FederationState::init(cfg, clients[0].dim(), clients.len());
    let mut logs = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let (next, log) = round(&state, clients, cfg)?;
        state = next;
        logs.push(log);
    }
    Ok((state, logs))
}

/// Per-client test metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub client_id: usize,
    pub acc: f64,
    pub test_error: f64,
    /// Sum-over-labels DDP in `[0, 2]`.
    pub ddp_sum: f64,
    /// Positive-rate gap in `[0, 1]`.
    pub ddp_gap: f64,
    pub npr0: f64,
    pub npr1: f64,
    /// Overall negative prediction rate on the shard.
    pub npr: f64,
    pub bce: f64,
}

/// Metrics of `model` on one shard.
pub fn client_metrics(model: &ModelParams, client: &ClientDataset) -> Result<MetricsRecord> {
    if client.is_empty() {
        return Err(Error::EmptyInput { op: "evaluate" });
    }
    let n = client.len();
    let logits = model.logits(&client.samples)?;
    let preds: Vec<u8> = logits.iter().map(|&z| crate::model::predict_logit(z)).collect();
    let s: Vec<u8> = client.samples.iter().map(|x| x.s).collect();
    let correct = preds.iter().zip(&client.samples).filter(|(p, x)| **p == x.y).count();
    let loss = logits.iter().zip(&client.samples).fold(0.0, |a, (&z, x)| a + bce(z, x.y)) / n as f64;
    Ok(MetricsRecord {
        client_id: client.client_id,
        acc: correct as f64 / n as f64,
        test_error: (n - correct) as f64 / n as f64,
        ddp_sum: ddp_hard(&preds, &s)?,
        ddp_gap: ddp_gap(&preds, &s)?,
        npr0: npr(&preds, &s, 0)?,
        npr1: npr(&preds, &s, 1)?,
        npr: preds.iter().filter(|&&p| p == 0).count() as f64 / n as f64,
        bce: loss,
    })
}

/// The model a client would deploy under `algorithm`.
pub fn deployed_model(state: &FederationState, algorithm: Algorithm, index: usize) -> &ModelParams {
    match algorithm {
        Algorithm::FedAvg => &state.global,
        _ => &state.personalized[index],
    }
}

pub fn evaluate(state: &FederationState, test_clients: &[ClientDataset], cfg: &FairFLConfig) -> Result<Vec<MetricsRecord>> {
    if test_clients.len() != state.personalized.len() {
        return Err(Error::DimMismatch {
            op: "evaluate: test shards vs clients",
            left: state.personalized.len(),
            right: test_clients.len(),
        });
    }
    test_clients
        .iter()
        .enumerate()
        .map(|(i, c)| client_metrics(deployed_model(state, cfg.algorithm, i), c))
        .collect()
}
