use fairfl::data::{partition_fixed, synth_gaussian, ClientDataset, SynthSpec};
use fairfl::fairness::{fair_objective, FairnessPenaltyConfig};
use fairfl::fedengine::{
    evaluate, fedavg_round, moreau_argmin, pfedfair_round, pfedme_round, train, Algorithm, FairFLConfig, FederationState,
};
use fairfl::model::{bce_loss_and_grad, Architecture, ModelParams};
use fairfl::numerics::Rng;
use fairfl::report::{summarize, ExperimentConfig};

fn spec(n: usize, d: usize) -> SynthSpec {
    let mean = |y: f64, s: f64| {
        let mut v = vec![0.0; d];
        v[0] = y;
        v[1] = s;
        v
    };
    SynthSpec {
        n,
        sigma: 1.0,
        p_s1: 0.5,
        p_y1_s0: 0.3,
        p_y1_s1: 0.7,
        mean_y0_s0: mean(-1.0, -1.0),
        mean_y0_s1: mean(-1.0, 1.0),
        mean_y1_s0: mean(1.0, -1.0),
        mean_y1_s1: mean(1.0, 1.0),
    }
}

/// Clients with alternating majority groups.
fn federation(seed: u64, counts: &[[usize; 2]]) -> Vec<ClientDataset> {
    let pool = synth_gaussian(&spec(4000, 4), &mut Rng::derive(seed, 11)).unwrap();
    partition_fixed(&pool, counts, &mut Rng::derive(seed, 12)).unwrap()
}

fn small() -> Vec<ClientDataset> {
    federation(3, &[[40, 10], [10, 40], [10, 40]])
}

fn cfg(algorithm: Algorithm) -> FairFLConfig {
    FairFLConfig {
        algorithm,
        rounds: 10,
        outer_lr: 0.5,
        inner_steps: 5,
        inner_lr: 0.1,
        lambda: 0.4,
        gamma: 1.0,
        fairness: FairnessPenaltyConfig { eta: 0.9, bandwidth_h: 0.1 },
        seed: 7,
        ..FairFLConfig::default()
    }
}

fn bits(m: &ModelParams) -> Vec<u64> {
    m.weights.iter().map(|w| w.to_bits()).collect()
}

fn max_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    a.weights.iter().zip(&b.weights).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn trajectory(clients: &[ClientDataset], c: &FairFLConfig) -> Vec<Vec<u64>> {
    let mut state = FederationState::init(c, clients[0].dim(), clients.len());
    let mut out = vec![bits(&state.global)];
    for _ in 0..c.rounds {
        state = fairfl::fedengine::round(&state, clients, c).unwrap().0;
        out.push(bits(&state.global));
    }
    out
}

#[test]
fn zero_lambda_pfedfair_is_one_step_fedavg_bitwise() {
    let clients = small();
    let pff = FairFLConfig { lambda: 0.0, ..cfg(Algorithm::PFedFair) };
    let fa = FairFLConfig {
        inner_steps: 1,
        inner_lr: pff.outer_lr,
        fairness: FairnessPenaltyConfig { eta: 0.0, ..pff.fairness },
        ..cfg(Algorithm::FedAvg)
    };
    assert_eq!(trajectory(&clients, &pff), trajectory(&clients, &fa));
}

#[test]
fn single_client_zero_lambda_is_local_gd() {
    let clients = federation(4, &[[30, 30]]);
    let pff = FairFLConfig { lambda: 0.0, ..cfg(Algorithm::PFedFair) };
    let local = FairFLConfig {
        inner_steps: 1,
        inner_lr: pff.outer_lr,
        fairness: FairnessPenaltyConfig { eta: 0.0, ..pff.fairness },
        ..cfg(Algorithm::Local)
    };
    let (a, _) = train(&clients, &pff).unwrap();
    let (b, _) = train(&clients, &local).unwrap();
    assert_eq!(bits(&a.global), bits(&b.personalized[0]));
}

#[test]
fn stiff_prox_pfedfair_tracks_scaled_fedavg() {
    // With gamma * inner_lr = 1 one inner step lands on w - g/gamma, so the
    // envelope gradient equals the clean gradient and the update becomes
    // w - alpha (1 + lambda) g.
    let clients = small();
    let pff = FairFLConfig {
        gamma: 1e8,
        inner_lr: 1e-8,
        inner_steps: 1,
        fairness: FairnessPenaltyConfig { eta: 0.0, bandwidth_h: 0.1 },
        ..cfg(Algorithm::PFedFair)
    };
    let fa = FairFLConfig {
        inner_steps: 1,
        inner_lr: pff.outer_lr * (1.0 + pff.lambda),
        fairness: pff.fairness,
        ..cfg(Algorithm::FedAvg)
    };
    let (a, _) = train(&clients, &pff).unwrap();
    let (b, _) = train(&clients, &fa).unwrap();
    assert!(max_diff(&a.global, &b.global) < 1e-6, "{}", max_diff(&a.global, &b.global));
}

#[test]
fn client_order_does_not_change_the_global_model() {
    let clients = small();
    let mut reversed = clients.clone();
    reversed.reverse();
    for alg in [Algorithm::FedAvg, Algorithm::PFedMe, Algorithm::PFedFair] {
        let c = cfg(alg);
        let state = FederationState::init(&c, clients[0].dim(), clients.len());
        let (a, _) = fairfl::fedengine::round(&state, &clients, &c).unwrap();
        let (b, _) = fairfl::fedengine::round(&state, &reversed, &c).unwrap();
        assert_eq!(bits(&a.global), bits(&b.global), "{alg}");
    }
}

#[test]
fn single_worker_matches_default_pool() {
    let clients = small();
    for alg in [Algorithm::Local, Algorithm::FedAvg, Algorithm::PFedMe, Algorithm::PFedFair] {
        let c = cfg(alg);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let (serial, serial_logs) = pool.install(|| train(&clients, &c)).unwrap();
        let (par, par_logs) = train(&clients, &c).unwrap();
        assert_eq!(serial, par, "{alg}");
        assert_eq!(serial_logs, par_logs, "{alg}");
    }
}

#[test]
fn same_seed_same_logs() {
    let clients = small();
    let c = cfg(Algorithm::PFedFair);
    let (a, la) = train(&clients, &c).unwrap();
    let (b, lb) = train(&clients, &c).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(la.len(), c.rounds);
    let other = train(&clients, &FairFLConfig { seed: 8, ..c }).unwrap().0;
    assert_ne!(bits(&other.global), bits(&a.global));
}

#[test]
fn zero_rounds_returns_initial_state() {
    let clients = small();
    let c = FairFLConfig { rounds: 0, ..cfg(Algorithm::PFedFair) };
    let (state, logs) = train(&clients, &c).unwrap();
    assert!(logs.is_empty());
    assert_eq!(state, FederationState::init(&c, clients[0].dim(), clients.len()));
}

#[test]
fn loose_prox_approaches_local_erm() {
    let clients = federation(6, &[[300, 300]]);
    let client = &clients[0];
    let c = FairFLConfig {
        gamma: 1e-6,
        inner_steps: 20_000,
        inner_lr: 0.5,
        fairness: FairnessPenaltyConfig { eta: 0.0, bandwidth_h: 0.1 },
        ..cfg(Algorithm::Local)
    };
    let start = FederationState::init(&c, client.dim(), 1);
    let prox = moreau_argmin(&start.global, client, &c).unwrap();
    let local = train(std::slice::from_ref(client), &FairFLConfig { rounds: 1, ..c.clone() }).unwrap().0;
    assert!(max_diff(&prox, &local.personalized[0]) < 1e-3, "{}", max_diff(&prox, &local.personalized[0]));
    // And it sits near a stationary point of the clean loss.
    let g = bce_loss_and_grad(&prox, &client.samples).unwrap().gradient;
    assert!(g.iter().all(|v| v.abs() < 1e-2), "{g:?}");
}

#[test]
fn identical_clients_average_to_single_client_run() {
    let base = federation(5, &[[30, 20]]);
    // Two copies: summing and halving is exact, so the runs agree bitwise.
    let copies: Vec<ClientDataset> = (0..2)
        .map(|i| ClientDataset::new(i, base[0].samples.clone()).unwrap())
        .collect();
    let c = cfg(Algorithm::FedAvg);
    let (one, _) = train(&base, &c).unwrap();
    let (two, _) = train(&copies, &c).unwrap();
    assert_eq!(bits(&one.global), bits(&two.global));
}

#[test]
fn one_clean_step_is_mean_gradient_step() {
    let clients = small();
    let c = FairFLConfig {
        inner_steps: 1,
        fairness: FairnessPenaltyConfig { eta: 0.0, bandwidth_h: 0.1 },
        ..cfg(Algorithm::FedAvg)
    };
    let state = FederationState::init(&c, clients[0].dim(), clients.len());
    let (next, _) = fedavg_round(&state, &clients, &c).unwrap();
    let grads: Vec<Vec<f64>> = clients
        .iter()
        .map(|k| bce_loss_and_grad(&state.global, &k.samples).unwrap().gradient)
        .collect();
    for (j, w) in state.global.weights.iter().enumerate() {
        let mean = grads.iter().map(|g| g[j]).sum::<f64>() / grads.len() as f64;
        assert!((next.global.weights[j] - (w - c.inner_lr * mean)).abs() < 1e-12);
    }
}

#[test]
fn stiff_prox_pfedme_takes_a_fair_gradient_step() {
    // The envelope gradient tends to the fair-loss gradient as gamma grows,
    // so the server step approaches w - alpha * mean grad.
    let clients = small();
    let c = FairFLConfig {
        gamma: 1e8,
        inner_lr: 1e-8,
        inner_steps: 1,
        ..cfg(Algorithm::PFedMe)
    };
    let state = FederationState::init(&c, clients[0].dim(), clients.len());
    let (next, _) = pfedme_round(&state, &clients, &c).unwrap();
    let grads: Vec<Vec<f64>> = clients
        .iter()
        .map(|k| fair_objective(&state.global, &k.samples, &c.fairness).unwrap().report.gradient)
        .collect();
    for (j, w) in state.global.weights.iter().enumerate() {
        let mean = grads.iter().map(|g| g[j]).sum::<f64>() / grads.len() as f64;
        assert!((next.global.weights[j] - (w - c.outer_lr * mean)).abs() < 1e-6);
    }
    for p in &next.personalized {
        assert!(max_diff(p, &state.global) < 1e-6);
    }
}

#[test]
fn pfedme_ignores_lambda() {
    let clients = small();
    let a = train(&clients, &FairFLConfig { lambda: 0.0, ..cfg(Algorithm::PFedMe) }).unwrap();
    let b = train(&clients, &FairFLConfig { lambda: 5.0, ..cfg(Algorithm::PFedMe) }).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pfedfair_round_stores_personal_models() {
    let clients = small();
    let c = cfg(Algorithm::PFedFair);
    let state = FederationState::init(&c, clients[0].dim(), clients.len());
    let (next, log) = pfedfair_round(&state, &clients, &c).unwrap();
    for (i, k) in clients.iter().enumerate() {
        let expect = moreau_argmin(&state.global, k, &c).unwrap();
        assert_eq!(bits(&next.personalized[i]), bits(&expect));
    }
    assert!(log.clients.iter().all(|l| l.fair_penalty.is_some()));
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn personalized_ddp_falls_with_eta() {
    let etas = [0.0, 0.3, 0.6, 0.9];
    let mut per_eta = vec![Vec::new(); etas.len()];
    for seed in 1..=5 {
        let train_set = federation(seed, &[[160, 40], [40, 160], [40, 160]]);
        let test_set = federation(seed + 100, &[[800, 200], [200, 800], [200, 800]]);
        for (k, &eta) in etas.iter().enumerate() {
            let c = FairFLConfig {
                rounds: 10,
                inner_steps: 100,
                fairness: FairnessPenaltyConfig { eta, bandwidth_h: 0.5 },
                seed,
                ..cfg(Algorithm::PFedFair)
            };
            let (state, _) = train(&train_set, &c).unwrap();
            let rows = evaluate(&state, &test_set, &c).unwrap();
            per_eta[k].push(summarize(&rows).unwrap().worst_ddp);
        }
    }
    let medians: Vec<f64> = per_eta.into_iter().map(median).collect();
    let inversions = medians.windows(2).filter(|p| p[1] > p[0]).count();
    assert!(inversions <= 1, "{medians:?}");
    assert!(medians[3] < medians[0], "{medians:?}");
}

#[test]
fn shipped_configs_round_trip() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap();
            cfg.validate().unwrap();
            let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
            assert_eq!(cfg, again, "{}", path.display());
            seen += 1;
        }
    }
    assert!(seen > 0);
}

#[test]
fn linear_and_mlp_both_train() {
    let clients = small();
    for arch in [Architecture::Linear, Architecture::Mlp { hidden: vec![8] }] {
        let c = FairFLConfig { architecture: arch, ..cfg(Algorithm::PFedFair) };
        let (state, _) = train(&clients, &c).unwrap();
        let rows = evaluate(&state, &clients, &c).unwrap();
        assert!(rows.iter().all(|r| r.acc > 0.5 && (r.acc + r.test_error - 1.0).abs() < 1e-12));
    }
}
