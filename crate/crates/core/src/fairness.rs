//! Demographic parity measurement and the kernel-smoothed DDP penalty.
//!
//! DDP follows the sum-over-labels form
//! `sum_y |P(yhat=y | s=0) - P(yhat=y | s=1)|`, which for binary labels is
//! twice the positive-rate gap and ranges over `[0, 2]`. Many papers report
//! the single-label gap instead; [`ddp_gap`] returns that half.
//!
//! The smoothed penalty replaces the hard indicator `1[z > 0]` with
//! `Phi(z / h)`, giving per-group rates `r(s) = mean_{j in s} Phi(z_j / h)`
//! and penalty `2 |r(0) - r(1)|`.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{bce_loss_and_grad, LossReport, ModelParams};
use crate::numerics::{normal_cdf, normal_pdf};

pub const DEFAULT_BANDWIDTH: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairnessPenaltyConfig {
    /// Penalty weight.
    pub eta: f64,
    /// Kernel bandwidth on the logit scale.
    #[serde(default = "default_bandwidth")]
    pub bandwidth_h: f64,
}

fn default_bandwidth() -> f64 {
    DEFAULT_BANDWIDTH
}

impl Default for FairnessPenaltyConfig {
    fn default() -> Self {
        Self {
            eta: 0.0,
            bandwidth_h: DEFAULT_BANDWIDTH,
        }
    }
}

impl FairnessPenaltyConfig {
    pub fn new(eta: f64) -> Self {
        Self {
            eta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("fairness config", format!("eta={} must be >= 0", self.eta)));
        }
        if !(self.bandwidth_h > 0.0 && self.bandwidth_h.is_finite()) {
            return Err(Error::invalid(
                "fairness config",
                format!("bandwidth_h={} must be > 0", self.bandwidth_h),
            ));
        }
        Ok(())
    }
}

/// Per-group positive rates (hard or smoothed) with group sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub rate: [f64; 2],
    pub count: [usize; 2],
}

fn hard_rates(predictions: &[u8], s: &[u8]) -> Result<GroupRates> {
    if predictions.len() != s.len() {
        return Err(Error::DimMismatch {
            op: "group rates",
            left: predictions.len(),
            right: s.len(),
        });
    }
    let mut pos = [0usize; 2];
    let mut count = [0usize; 2];
    for (&p, &g) in predictions.iter().zip(s) {
        count[g as usize] += 1;
        pos[g as usize] += p as usize;
    }
    for g in 0..2u8 {
        if count[g as usize] == 0 {
            return Err(Error::MissingGroup { group: g });
        }
    }
    Ok(GroupRates {
        rate: [pos[0] as f64 / count[0] as f64, pos[1] as f64 / count[1] as f64],
        count,
    })
}

/// DDP as the sum over both labels, in `[0, 2]`.
pub fn ddp_hard(predictions: &[u8], s: &[u8]) -> Result<f64> {
    let r = hard_rates(predictions, s)?.rate;
    // |P(1|0)-P(1|1)| + |P(0|0)-P(0|1)|
    Ok((r[0] - r[1]).abs() + ((1.0 - r[0]) - (1.0 - r[1])).abs())
}

/// Absolute positive-rate gap, in `[0, 1]`.
pub fn ddp_gap(predictions: &[u8], s: &[u8]) -> Result<f64> {
    let r = hard_rates(predictions, s)?.rate;
    Ok((r[0] - r[1]).abs())
}

/// Negative prediction rate `P(yhat = 0 | s = group)`.
pub fn npr(predictions: &[u8], s: &[u8], group: u8) -> Result<f64> {
    if predictions.len() != s.len() {
        return Err(Error::DimMismatch {
            op: "npr",
            left: predictions.len(),
            right: s.len(),
        });
    }
    let (neg, n) = predictions
        .iter()
        .zip(s)
        .filter(|(_, &g)| g == group)
        .fold((0usize, 0usize), |(neg, n), (&p, _)| (neg + (p == 0) as usize, n + 1));
    if n == 0 {
        return Err(Error::MissingGroup { group });
    }
    Ok(neg as f64 / n as f64)
}

/// Smoothed penalty value, its gradient, and the smoothed group rates.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyReport {
    pub penalty: f64,
    pub gradient: Vec<f64>,
    pub rates: GroupRates,
}

/// Smoothed rates and the per-sample coefficients `d penalty / d z_j`.
fn smoothed_terms(logits: &[f64], samples: &[Sample], h: f64) -> Result<(f64, GroupRates, Vec<f64>)> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid("bandwidth", format!("h={h} must be > 0")));
    }
    let mut count = [0usize; 2];
    let mut sum = [0.0f64; 2];
    for (&z, s) in logits.iter().zip(samples) {
        count[s.s as usize] += 1;
        sum[s.s as usize] += normal_cdf(z / h);
    }
    for g in 0..2u8 {
        if count[g as usize] == 0 {
            return Err(Error::MissingGroup { group: g });
        }
    }
    let rate = [sum[0] / count[0] as f64, sum[1] / count[1] as f64];
    let diff = rate[0] - rate[1];
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    let coeffs = logits
        .iter()
        .zip(samples)
        .map(|(&z, s)| {
            let dir = if s.s == 0 { 1.0 } else { -1.0 };
            2.0 * sign * dir * normal_pdf(z / h) / (h * count[s.s as usize] as f64)
        })
        .collect();
    Ok((2.0 * diff.abs(), GroupRates { rate, count }, coeffs))
}

pub fn smoothed_rates(params: &ModelParams, samples: &[Sample], h: f64) -> Result<GroupRates> {
    let logits = params.logits(samples)?;
    Ok(smoothed_terms(&logits, samples, h)?.1)
}

pub fn kde_ddp_penalty_and_grad(params: &ModelParams, samples: &[Sample], h: f64) -> Result<PenaltyReport> {
    let logits = params.logits(samples)?;
    let (penalty, rates, coeffs) = smoothed_terms(&logits, samples, h)?;
    Ok(PenaltyReport {
        penalty,
        gradient: params.logit_grad_combination(samples, &coeffs)?,
        rates,
    })
}

/// Components of the fair objective `bce + eta * penalty`.
#[derive(Debug, Clone, PartialEq)]
pub struct FairLossReport {
    pub bce: f64,
    /// `None` when `eta == 0` and the penalty was not evaluated.
    pub penalty: Option<f64>,
    pub report: LossReport,
}

/// Evaluates the fair objective. With `eta == 0` this is exactly
/// [`bce_loss_and_grad`] and the penalty is skipped.
pub fn fair_objective(params: &ModelParams, samples: &[Sample], cfg: &FairnessPenaltyConfig) -> Result<FairLossReport> {
    cfg.validate()?;
    if cfg.eta == 0.0 {
        let report = bce_loss_and_grad(params, samples)?;
        return Ok(FairLossReport {
            bce: report.mean_loss,
            penalty: None,
            report,
        });
    }
    let base = bce_loss_and_grad(params, samples)?;
    let pen = kde_ddp_penalty_and_grad(params, samples, cfg.bandwidth_h)?;
    let gradient = base
        .gradient
        .iter()
        .zip(&pen.gradient)
        .map(|(g, p)| g + cfg.eta * p)
        .collect();
    Ok(FairLossReport {
        bce: base.mean_loss,
        penalty: Some(pen.penalty),
        report: LossReport {
            mean_loss: base.mean_loss + cfg.eta * pen.penalty,
            gradient,
        },
    })
}

pub fn fair_loss_and_grad(params: &ModelParams, samples: &[Sample], cfg: &FairnessPenaltyConfig) -> Result<LossReport> {
    Ok(fair_objective(params, samples, cfg)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::numerics::Rng;

    fn random_set(n: usize, d: usize, rng: &mut Rng) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                x: (0..d).map(|_| rng.normal()).collect(),
                s: (i % 2) as u8,
                y: rng.bernoulli(0.5) as u8,
            })
            .collect()
    }

    #[test]
    fn ddp_examples() {
        assert_eq!(ddp_hard(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 2.0);
        assert_eq!(ddp_hard(&[1, 1, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0);
        // Positive rates 0.75 vs 0.25.
        let preds = [1, 1, 1, 0, 1, 0, 0, 0];
        let s = [0, 0, 0, 0, 1, 1, 1, 1];
        assert_eq!(ddp_hard(&preds, &s).unwrap(), 1.0);
        assert_eq!(ddp_gap(&preds, &s).unwrap(), 0.5);
        assert!(matches!(ddp_hard(&[1, 0], &[0, 0]), Err(Error::MissingGroup { group: 1 })));
    }

    #[test]
    fn npr_examples() {
        assert!((npr(&[0, 0, 1], &[0, 0, 0], 0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(npr(&[1, 1, 1], &[0, 1, 0], 1).unwrap(), 0.0);
        let preds = [0, 1, 1, 0, 1];
        let s = [1, 1, 0, 1, 1];
        let pos = preds.iter().zip(&s).filter(|(_, &g)| g == 1).map(|(&p, _)| p as f64).sum::<f64>() / 4.0;
        assert_eq!(npr(&preds, &s, 1).unwrap() + pos, 1.0);
        assert!(npr(&[1], &[0], 1).is_err());
    }

    #[test]
    fn symmetric_groups_have_zero_penalty() {
        let p = ModelParams::from_weights(Architecture::Linear, 1, vec![1.0, 0.0]).unwrap();
        let data = vec![
            Sample { x: vec![0.3], s: 0, y: 0 },
            Sample { x: vec![0.3], s: 1, y: 1 },
            Sample { x: vec![-1.0], s: 0, y: 1 },
            Sample { x: vec![-1.0], s: 1, y: 0 },
        ];
        let r = kde_ddp_penalty_and_grad(&p, &data, 0.1).unwrap();
        assert_eq!(r.penalty, 0.0);
        assert!(r.gradient.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn saturated_penalty() {
        let p = ModelParams::from_weights(Architecture::Linear, 1, vec![1.0, 0.0]).unwrap();
        let data = vec![Sample { x: vec![0.0], s: 0, y: 0 }, Sample { x: vec![40.0], s: 1, y: 1 }];
        let r = kde_ddp_penalty_and_grad(&p, &data, 0.1).unwrap();
        assert!((r.penalty - 1.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let h = 0.1;
        for seed in 0..5 {
            let mut rng = Rng::derive(seed, 77);
            let data = random_set(30, 3, &mut rng);
            // Scale weights down so logits sit inside the kernel's support.
            let mut p = ModelParams::init(Architecture::Linear, 3, &mut rng);
            p.weights.iter_mut().for_each(|w| *w *= 0.1);
            let g = kde_ddp_penalty_and_grad(&p, &data, h).unwrap().gradient;
            let step = 1e-5;
            for i in 0..p.len() {
                let mut a = p.clone();
                a.weights[i] += step;
                let mut b = p.clone();
                b.weights[i] -= step;
                let fd = (kde_ddp_penalty_and_grad(&a, &data, h).unwrap().penalty
                    - kde_ddp_penalty_and_grad(&b, &data, h).unwrap().penalty)
                    / (2.0 * step);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-7);
                assert!(rel < 1e-4, "seed {seed} coord {i}: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn small_bandwidth_recovers_hard_ddp() {
        let logits = [-2.0, -0.5, 0.3, 1.1, -0.7, 0.2, 0.9, 2.5, -1.3, 0.05];
        let samples: Vec<Sample> = logits
            .iter()
            .enumerate()
            .map(|(i, &z)| Sample { x: vec![z], s: (i >= 4) as u8, y: 0 })
            .collect();
        let p = ModelParams::from_weights(Architecture::Linear, 1, vec![1.0, 0.0]).unwrap();
        let smooth = kde_ddp_penalty_and_grad(&p, &samples, 1e-4).unwrap().penalty;
        let preds = p.predictions(&samples).unwrap();
        let s: Vec<u8> = samples.iter().map(|x| x.s).collect();
        assert!((smooth - ddp_hard(&preds, &s).unwrap()).abs() < 1e-3);
    }

    #[test]
    fn eta_zero_is_plain_bce_and_eta_is_linear() {
        let mut rng = Rng::derive(4, 4);
        let data = random_set(25, 3, &mut rng);
        let p = ModelParams::init(Architecture::Linear, 3, &mut rng);
        let base = bce_loss_and_grad(&p, &data).unwrap();
        assert_eq!(fair_loss_and_grad(&p, &data, &FairnessPenaltyConfig::new(0.0)).unwrap(), base);

        let pen = kde_ddp_penalty_and_grad(&p, &data, DEFAULT_BANDWIDTH).unwrap();
        let fair = fair_loss_and_grad(&p, &data, &FairnessPenaltyConfig::new(0.4)).unwrap();
        assert!((fair.mean_loss - (base.mean_loss + 0.4 * pen.penalty)).abs() < 1e-12);
        for i in 0..p.len() {
            assert!((fair.gradient[i] - (base.gradient[i] + 0.4 * pen.gradient[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(FairnessPenaltyConfig { eta: -0.1, bandwidth_h: 0.1 }.validate().is_err());
        assert!(FairnessPenaltyConfig { eta: 0.1, bandwidth_h: 0.0 }.validate().is_err());
    }
}
