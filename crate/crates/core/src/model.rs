//! Linear and tanh-MLP binary classifiers over a flat weight vector.
//!
//! Weights are laid out layer by layer; each layer stores its
//! `out x in` matrix row-major followed by its `out` biases. A linear model
//! is the single layer `d -> 1`, i.e. `[w_1..w_d, b]`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::numerics::{norm, sigmoid, Rng};

const PROB_CLIP: f64 = 1e-12;
const CHECKPOINT_MAGIC: [u8; 4] = *b"FFLM";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Architecture {
    Linear,
    Mlp { hidden: Vec<usize> },
}

impl Architecture {
    /// Layer widths from input to the scalar output.
    pub fn widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        if let Architecture::Mlp { hidden } = self {
            w.extend_from_slice(hidden);
        }
        w.push(1);
        w
    }

    pub fn num_params(&self, input_dim: usize) -> usize {
        self.widths(input_dim).windows(2).map(|p| p[1] * (p[0] + 1)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    input_dim: usize,
    pub weights: Vec<f64>,
}

/// Mean loss and its gradient with respect to the flat weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub mean_loss: f64,
    pub gradient: Vec<f64>,
}

impl ModelParams {
    pub fn from_weights(arch: Architecture, input_dim: usize, weights: Vec<f64>) -> Result<Self> {
        let want = arch.num_params(input_dim);
        if weights.len() != want {
            return Err(Error::DimMismatch {
                op: "ModelParams::from_weights",
                left: want,
                right: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("model weights", "non-finite entry"));
        }
        Ok(Self { arch, input_dim, weights })
    }

    pub fn zeros(arch: Architecture, input_dim: usize) -> Self {
        let n = arch.num_params(input_dim);
        Self { arch, input_dim, weights: vec![0.0; n] }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias.
    pub fn init(arch: Architecture, input_dim: usize, rng: &mut Rng) -> Self {
        let mut weights = Vec::with_capacity(arch.num_params(input_dim));
        for pair in arch.widths(input_dim).windows(2) {
            let (fan_in, out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for _ in 0..out * (fan_in + 1) {
                weights.push(rng.uniform_range(-bound, bound));
            }
        }
        Self { arch, input_dim, weights }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.weights)
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Self {
        debug_assert_eq!(weights.len(), self.weights.len());
        Self {
            arch: self.arch.clone(),
            input_dim: self.input_dim,
            weights,
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimMismatch {
                op: "forward",
                left: self.input_dim,
                right: x.len(),
            });
        }
        Ok(())
    }

    /// Logit `f_w(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        if self.arch == Architecture::Linear {
            let d = self.input_dim;
            let w = &self.weights;
            return Ok(w[..d].iter().zip(x).fold(0.0, |a, (wi, xi)| a + wi * xi) + w[d]);
        }
        let mut acts = Vec::new();
        Ok(self.trace(x, &mut acts))
    }

    /// Runs the network, leaving each layer's input activations in `acts`
    /// (`acts[0] = x`). Returns the output logit.
    fn trace(&self, x: &[f64], acts: &mut Vec<Vec<f64>>) -> f64 {
        let widths = self.arch.widths(self.input_dim);
        let layers = widths.len() - 1;
        acts.clear();
        acts.push(x.to_vec());
        let mut offset = 0;
        let mut logit = 0.0;
        for l in 0..layers {
            let (fan_in, out) = (widths[l], widths[l + 1]);
            let w = &self.weights[offset..offset + out * fan_in];
            let b = &self.weights[offset + out * fan_in..offset + out * (fan_in + 1)];
            offset += out * (fan_in + 1);
            let input = &acts[l];
            let pre: Vec<f64> = (0..out)
                .map(|o| {
                    w[o * fan_in..(o + 1) * fan_in]
                        .iter()
                        .zip(input)
                        .fold(0.0, |a, (wi, xi)| a + wi * xi)
                        + b[o]
                })
                .collect();
            if l + 1 == layers {
                logit = pre[0];
            } else {
                acts.push(pre.into_iter().map(f64::tanh).collect());
            }
        }
        logit
    }

    /// Adds `coeff * d(logit)/dw` at `x` into `grad`.
    fn accumulate_logit_grad(&self, x: &[f64], coeff: f64, grad: &mut [f64], acts: &mut Vec<Vec<f64>>) {
        if self.arch == Architecture::Linear {
            let d = self.input_dim;
            for (g, xi) in grad[..d].iter_mut().zip(x) {
                *g += coeff * xi;
            }
            grad[d] += coeff;
            return;
        }
        self.trace(x, acts);
        let widths = self.arch.widths(self.input_dim);
        let layers = widths.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += widths[l + 1] * (widths[l] + 1);
        }
        // delta = d(coeff * logit)/d(pre-activation) of the current layer.
        let mut delta = vec![coeff];
        for l in (0..layers).rev() {
            let (fan_in, out) = (widths[l], widths[l + 1]);
            let o = offsets[l];
            let input = &acts[l];
            for (k, dk) in delta.iter().enumerate() {
                let row = &mut grad[o + k * fan_in..o + (k + 1) * fan_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += dk * a;
                }
                grad[o + out * fan_in + k] += dk;
            }
            if l == 0 {
                break;
            }
            let w = &self.weights[o..o + out * fan_in];
            delta = (0..fan_in)
                .map(|j| {
                    let back = delta
                        .iter()
                        .enumerate()
                        .fold(0.0, |a, (k, dk)| a + dk * w[k * fan_in + j]);
                    let t = input[j];
                    back * (1.0 - t * t)
                })
                .collect();
        }
    }

    /// `sum_j coeffs[j] * grad_w f_w(x_j)`, accumulated in sample order.
    pub fn logit_grad_combination(&self, samples: &[Sample], coeffs: &[f64]) -> Result<Vec<f64>> {
        if samples.len() != coeffs.len() {
            return Err(Error::DimMismatch {
                op: "logit_grad_combination",
                left: samples.len(),
                right: coeffs.len(),
            });
        }
        let mut grad = vec![0.0; self.weights.len()];
        let mut acts = Vec::new();
        for (s, &c) in samples.iter().zip(coeffs) {
            self.check_input(&s.x)?;
            if c != 0.0 {
                self.accumulate_logit_grad(&s.x, c, &mut grad, &mut acts);
            }
        }
        Ok(grad)
    }

    pub fn logits(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        samples.iter().map(|s| self.forward(&s.x)).collect()
    }

    pub fn predict(&self, x: &[f64]) -> Result<u8> {
        Ok(predict_logit(self.forward(x)?))
    }

    pub fn predictions(&self, samples: &[Sample]) -> Result<Vec<u8>> {
        samples.iter().map(|s| self.predict(&s.x)).collect()
    }
}

/// 1 iff the logit is strictly positive; a logit of exactly 0 predicts 0.
pub fn predict_logit(z: f64) -> u8 {
    (z > 0.0) as u8
}

/// Per-sample binary cross-entropy with clipped probabilities.
pub fn bce(z: f64, y: u8) -> f64 {
    let p = sigmoid(z).clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean BCE and its analytic gradient over `samples`.
pub fn bce_loss_and_grad(params: &ModelParams, samples: &[Sample]) -> Result<LossReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput { op: "bce_loss_and_grad" });
    }
    let n = samples.len() as f64;
    let logits = params.logits(samples)?;
    let mut loss = 0.0;
    let coeffs: Vec<f64> = logits
        .iter()
        .zip(samples)
        .map(|(&z, s)| {
            loss += bce(z, s.y);
            (sigmoid(z) - s.y as f64) / n
        })
        .collect();
    Ok(LossReport {
        mean_loss: loss / n,
        gradient: params.logit_grad_combination(samples, &coeffs)?,
    })
}

/// Misclassification rate under [`predict_logit`].
pub fn zero_one_risk(params: &ModelParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput { op: "zero_one_risk" });
    }
    let wrong = samples
        .iter()
        .map(|s| params.predict(&s.x).map(|p| (p != s.y) as usize))
        .sum::<Result<usize>>()?;
    Ok(wrong as f64 / samples.len() as f64)
}

/// Checkpoint layout (little-endian):
/// `b"FFLM"`, u32 kind (0 linear, 1 mlp), u32 input_dim, u32 hidden count,
/// u32 per hidden width, u32 weight count, then f64 weights.
pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    let hidden: &[usize] = match &params.arch {
        Architecture::Linear => &[],
        Architecture::Mlp { hidden } => hidden,
    };
    let kind = matches!(params.arch, Architecture::Mlp { .. }) as u32;
    for v in [kind, params.input_dim as u32, hidden.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for h in hidden {
        out.extend_from_slice(&(*h as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.weights.len() as u32).to_le_bytes());
    for w in &params.weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let bad = |msg: &str| Error::invalid("checkpoint", msg.to_string());
    if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing FFLM header"));
    }
    let mut at = 4;
    let mut next_u32 = |bytes: &[u8]| -> Result<usize> {
        let v = bytes
            .get(at..at + 4)
            .ok_or_else(|| bad("truncated header"))?;
        at += 4;
        Ok(u32::from_le_bytes(v.try_into().unwrap()) as usize)
    };
    let kind = next_u32(bytes)?;
    let input_dim = next_u32(bytes)?;
    let n_hidden = next_u32(bytes)?;
    let hidden = (0..n_hidden).map(|_| next_u32(bytes)).collect::<Result<Vec<_>>>()?;
    let n_weights = next_u32(bytes)?;
    let arch = match kind {
        0 if hidden.is_empty() => Architecture::Linear,
        1 => Architecture::Mlp { hidden },
        _ => return Err(bad("unknown architecture kind")),
    };
    let body = &bytes[at..];
    if body.len() != 8 * n_weights {
        return Err(bad(&format!(
            "expected {} weight bytes, found {}",
            8 * n_weights,
            body.len()
        )));
    }
    let weights = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ModelParams::from_weights(arch, input_dim, weights)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(x: Vec<f64>, s: u8, y: u8) -> Sample {
        Sample { x, s, y }
    }

    fn random_set(n: usize, d: usize, rng: &mut Rng) -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let x = (0..d).map(|_| rng.normal()).collect();
                sample(x, rng.bernoulli(0.5) as u8, rng.bernoulli(0.5) as u8)
            })
            .collect()
    }

    #[test]
    fn linear_forward_examples() {
        let p = ModelParams::from_weights(Architecture::Linear, 2, vec![1.0, -1.0, 0.0]).unwrap();
        assert_eq!(p.forward(&[2.0, 1.0]).unwrap(), 1.0);
        let z = ModelParams::zeros(Architecture::Linear, 2);
        assert_eq!(z.forward(&[5.0, -3.0]).unwrap(), 0.0);
        assert!(matches!(p.forward(&[1.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn mlp_forward_matches_hand_computation() {
        // 2 -> 2 -> 1, tanh hidden.
        let arch = Architecture::Mlp { hidden: vec![2] };
        let w = vec![
            0.5, -0.25, // hidden unit 0
            0.1, 0.2, // hidden unit 1
            0.05, -0.1, // hidden biases
            1.5, -2.0, // output weights
            0.3, // output bias
        ];
        let p = ModelParams::from_weights(arch, 2, w).unwrap();
        let x = [0.8, -1.2];
        let h0 = (0.5 * 0.8 + -0.25 * -1.2 + 0.05f64).tanh();
        let h1 = (0.1 * 0.8 + 0.2 * -1.2 - 0.1f64).tanh();
        let want = 1.5 * h0 - 2.0 * h1 + 0.3;
        assert!((p.forward(&x).unwrap() - want).abs() < 1e-12);
        assert_eq!(p.forward(&x).unwrap().to_bits(), p.forward(&x).unwrap().to_bits());
    }

    #[test]
    fn predict_tie_rule() {
        assert_eq!(predict_logit(1.0), 1);
        assert_eq!(predict_logit(0.0), 0);
        assert_eq!(predict_logit(-0.3), 0);
    }

    #[test]
    fn bce_values() {
        assert!((bce(0.0, 1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce(60.0, 1) < 2e-12);
        assert!(bce(-60.0, 0) < 2e-12);
        // Clipped: confident mistakes stay finite.
        assert!((bce(-1e4, 1) - (-PROB_CLIP.ln())).abs() < 1e-9);
        let p = ModelParams::from_weights(Architecture::Linear, 1, vec![100.0, 0.0]).unwrap();
        let data = vec![sample(vec![1.0], 0, 1), sample(vec![-1.0], 1, 0)];
        assert!(bce_loss_and_grad(&p, &data).unwrap().mean_loss < 2e-12);
    }

    fn fd_check(params: &ModelParams, data: &[Sample]) -> f64 {
        let g = bce_loss_and_grad(params, data).unwrap().gradient;
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.weights[i] += h;
            let mut minus = params.clone();
            minus.weights[i] -= h;
            let fd = (bce_loss_and_grad(&plus, data).unwrap().mean_loss
                - bce_loss_and_grad(&minus, data).unwrap().mean_loss)
                / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-7);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = Rng::derive(seed, 0);
            let data = random_set(20, 4, &mut rng);
            let lin = ModelParams::init(Architecture::Linear, 4, &mut rng);
            assert!(fd_check(&lin, &data) < 1e-5, "linear seed {seed}");
            let mlp = ModelParams::init(Architecture::Mlp { hidden: vec![5, 3] }, 4, &mut rng);
            assert!(fd_check(&mlp, &data) < 1e-5, "mlp seed {seed}");
        }
    }

    #[test]
    fn linear_bce_is_convex_along_segments() {
        let mut rng = Rng::derive(21, 0);
        let data = random_set(30, 3, &mut rng);
        for _ in 0..20 {
            let a = ModelParams::init(Architecture::Linear, 3, &mut rng);
            let mut b = ModelParams::init(Architecture::Linear, 3, &mut rng);
            b.weights.iter_mut().for_each(|w| *w *= 4.0);
            let la = bce_loss_and_grad(&a, &data).unwrap().mean_loss;
            let lb = bce_loss_and_grad(&b, &data).unwrap().mean_loss;
            for k in 0..=10 {
                let t = k as f64 / 10.0;
                let w: Vec<f64> = a.weights.iter().zip(&b.weights).map(|(x, y)| (1.0 - t) * x + t * y).collect();
                let l = bce_loss_and_grad(&a.with_weights(w), &data).unwrap().mean_loss;
                assert!(l <= (1.0 - t) * la + t * lb + 1e-9);
            }
        }
    }

    #[test]
    fn zero_one_examples() {
        let p = ModelParams::from_weights(Architecture::Linear, 1, vec![1.0, 0.0]).unwrap();
        let right = vec![sample(vec![1.0], 0, 1), sample(vec![-1.0], 0, 0)];
        let wrong = vec![sample(vec![1.0], 0, 0), sample(vec![-1.0], 0, 1)];
        assert_eq!(zero_one_risk(&p, &right).unwrap(), 0.0);
        assert_eq!(zero_one_risk(&p, &wrong).unwrap(), 1.0);
        let half: Vec<Sample> = right.iter().chain(&wrong).cloned().collect();
        assert_eq!(zero_one_risk(&p, &half).unwrap(), 0.5);
        assert!(zero_one_risk(&p, &[]).is_err());
    }

    #[test]
    fn init_respects_fan_in_bounds_and_layout() {
        let arch = Architecture::Mlp { hidden: vec![256, 256, 256, 256] };
        assert_eq!(arch.num_params(64), 256 * 65 + 3 * 256 * 257 + 257);
        let p = ModelParams::init(Architecture::Mlp { hidden: vec![8] }, 16, &mut Rng::derive(1, 2));
        assert_eq!(p.len(), 8 * 17 + 9);
        assert!(p.weights[..8 * 17].iter().all(|w| w.abs() <= 0.25));
        assert!(p.weights[8 * 17..].iter().all(|w| w.abs() <= 1.0 / 8f64.sqrt()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ModelParams::init(Architecture::Mlp { hidden: vec![3, 2] }, 4, &mut Rng::derive(3, 3));
        assert_eq!(decode_checkpoint(&encode_checkpoint(&p)).unwrap(), p);
        let l = ModelParams::init(Architecture::Linear, 7, &mut Rng::derive(3, 4));
        let bytes = encode_checkpoint(&l);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), l);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }
}
