//! Numerical kernels: two fixed scorer architectures with closed-form
//! gradients, a central-difference gradient oracle, and SGD/Adam.
//!
//! Parameters live in one flat buffer per scorer. The layout is
//!
//! ```text
//! Linear { input: d }            [ w (d) | b ]
//! Mlp2   { input: d, hidden: h } [ W1 (h x d, row-major) | b1 (h) | w2 (h) | b2 ]
//! ```
//!
//! and a [`Gradient`] uses exactly the same layout, so optimizers and the
//! finite-difference oracle work coordinate-wise without knowing the shape.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::ops::Deref;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// A finite, non-empty feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RealVector(Vec<f64>);

impl RealVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector".into()));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for RealVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Scorer architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    Linear { input: usize },
    Mlp2 { input: usize, hidden: usize },
}

impl Arch {
    pub fn input_dim(&self) -> usize {
        match *self {
            Arch::Linear { input } | Arch::Mlp2 { input, .. } => input,
        }
    }

    pub fn num_params(&self) -> usize {
        match *self {
            Arch::Linear { input } => input + 1,
            Arch::Mlp2 { input, hidden } => hidden * input + 2 * hidden + 1,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Arch::Linear { input } => input >= 1,
            Arch::Mlp2 { input, hidden } => input >= 1 && hidden >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("degenerate architecture {self:?}")))
        }
    }
}

/// Parameters of a scalar scorer: `Linear` computes `w.x + b`, `Mlp2`
/// computes `w2.tanh(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    arch: Arch,
    values: Vec<f64>,
}

impl ScorerParams {
    pub fn zeros(arch: Arch) -> Self {
        Self {
            arch,
            values: vec![0.0; arch.num_params()],
        }
    }

    pub fn from_values(arch: Arch, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.num_params() {
            return Err(Error::DimensionMismatch {
                expected: arch.num_params(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scorer parameters".into()));
        }
        Ok(Self { arch, values })
    }

    pub fn linear(w: &[f64], b: f64) -> Result<Self> {
        let mut values = w.to_vec();
        values.push(b);
        Self::from_values(Arch::Linear { input: w.len() }, values)
    }

    /// `w1` holds one row of input weights per hidden unit.
    pub fn mlp2(w1: &[Vec<f64>], b1: &[f64], w2: &[f64], b2: f64) -> Result<Self> {
        let hidden = w1.len();
        let input = w1.first().map_or(0, Vec::len);
        if b1.len() != hidden || w2.len() != hidden || w1.iter().any(|r| r.len() != input) {
            return Err(Error::InvalidConfig("ragged Mlp2 parameter blocks".into()));
        }
        let mut values = Vec::with_capacity(hidden * input + 2 * hidden + 1);
        for row in w1 {
            values.extend_from_slice(row);
        }
        values.extend_from_slice(b1);
        values.extend_from_slice(w2);
        values.push(b2);
        Self::from_values(Arch::Mlp2 { input, hidden }, values)
    }

    /// Weights i.i.d. normal with std `0.1 / sqrt(fan_in)`; biases start at zero.
    pub fn init(arch: Arch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = Self::zeros(arch);
        match arch {
            Arch::Linear { input } => {
                fill_normal(&mut params.values[..input], 0.1 / (input as f64).sqrt(), rng);
            }
            Arch::Mlp2 { input, hidden } => {
                let w1_end = hidden * input;
                fill_normal(&mut params.values[..w1_end], 0.1 / (input as f64).sqrt(), rng);
                let w2 = w1_end + hidden..w1_end + 2 * hidden;
                fill_normal(&mut params.values[w2], 0.1 / (hidden as f64).sqrt(), rng);
            }
        }
        Ok(params)
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Raw coordinate access, used by the finite-difference oracle.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn fill_normal(out: &mut [f64], std: f64, rng: &mut Rng) {
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    for v in out {
        *v = normal.sample(rng);
    }
}

/// Derivative of a scorer output with respect to its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    arch: Arch,
    values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(arch: Arch) -> Self {
        Self {
            arch,
            values: vec![0.0; arch.num_params()],
        }
    }

    pub fn from_values(arch: Arch, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.num_params() {
            return Err(Error::DimensionMismatch {
                expected: arch.num_params(),
                got: values.len(),
            });
        }
        Ok(Self { arch, values })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        debug_assert_eq!(self.arch, other.arch);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn check_input(params: &ScorerParams, x: &[f64]) -> Result<()> {
    let expected = params.arch.input_dim();
    if x.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: x.len(),
        });
    }
    Ok(())
}

/// Scorer output for one input.
pub fn score(params: &ScorerParams, x: &[f64]) -> Result<f64> {
    check_input(params, x)?;
    Ok(forward(params, x))
}

/// Scorer output together with its parameter gradient.
pub fn score_grad(params: &ScorerParams, x: &[f64]) -> Result<(f64, Gradient)> {
    check_input(params, x)?;
    let mut grad = Gradient::zeros(params.arch);
    let s = accumulate_grad(params, x, 1.0, &mut grad);
    Ok((s, grad))
}

/// Unchecked forward pass; callers guarantee `x.len() == input_dim`.
pub(crate) fn forward(params: &ScorerParams, x: &[f64]) -> f64 {
    let v = &params.values;
    match params.arch {
        Arch::Linear { input } => dot(&v[..input], x) + v[input],
        Arch::Mlp2 { input, hidden } => {
            let (w1, rest) = v.split_at(hidden * input);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(hidden);
            let mut out = b2[0];
            for j in 0..hidden {
                let pre = dot(&w1[j * input..(j + 1) * input], x) + b1[j];
                out += w2[j] * pre.tanh();
            }
            out
        }
    }
}

/// Adds `coef * d score / d params` into `grad` and returns the score.
pub(crate) fn accumulate_grad(params: &ScorerParams, x: &[f64], coef: f64, grad: &mut Gradient) -> f64 {
    debug_assert_eq!(params.arch, grad.arch);
    let v = &params.values;
    let g = &mut grad.values;
    match params.arch {
        Arch::Linear { input } => {
            for (gi, xi) in g[..input].iter_mut().zip(x) {
                *gi += coef * xi;
            }
            g[input] += coef;
            dot(&v[..input], x) + v[input]
        }
        Arch::Mlp2 { input, hidden } => {
            let w1_end = hidden * input;
            let b1_off = w1_end;
            let w2_off = w1_end + hidden;
            let b2_off = w1_end + 2 * hidden;
            let mut out = v[b2_off];
            g[b2_off] += coef;
            for j in 0..hidden {
                let row = j * input..(j + 1) * input;
                let a = (dot(&v[row.clone()], x) + v[b1_off + j]).tanh();
                let w2j = v[w2_off + j];
                out += w2j * a;
                g[w2_off + j] += coef * a;
                let back = coef * w2j * (1.0 - a * a);
                if back != 0.0 {
                    g[b1_off + j] += back;
                    for (gi, xi) in g[row].iter_mut().zip(x) {
                        *gi += back * xi;
                    }
                }
            }
            out
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central-difference gradient of `objective` at `params`, one coordinate at
/// a time.
pub fn finite_diff_grad<F>(params: &ScorerParams, mut objective: F, eps: f64) -> Gradient
where
    F: FnMut(&ScorerParams) -> f64,
{
    let mut probe = params.clone();
    let mut grad = Gradient::zeros(params.arch);
    for i in 0..params.values.len() {
        let orig = params.values[i];
        probe.values[i] = orig + eps;
        let up = objective(&probe);
        probe.values[i] = orig - eps;
        let down = objective(&probe);
        probe.values[i] = orig;
        grad.values[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Largest coordinate-wise relative error between two gradients, with an
/// absolute floor on the denominator.
pub fn max_relative_error(a: &Gradient, b: &Gradient, abs_floor: f64) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(abs_floor))
        .fold(0.0, f64::max)
}

/// Serializable optimizer choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerConfig::Sgd { .. } => OptimizerConfig::Sgd { lr },
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => OptimizerConfig::Adam { lr, beta1, beta2, eps },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr } => lr >= 0.0 && lr.is_finite(),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr >= 0.0
                    && lr.is_finite()
                    && beta1 > 0.0
                    && beta1 < 1.0
                    && beta2 > 0.0
                    && beta2 < 1.0
                    && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad optimizer settings {self:?}")))
        }
    }
}

/// Optimizer with its running state.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Gradient,
        v: Gradient,
        t: u64,
    },
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, arch: Arch) -> Self {
        match config {
            OptimizerConfig::Sgd { lr } => OptimizerState::Sgd { lr },
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => OptimizerState::Adam {
                lr,
                beta1,
                beta2,
                eps,
                m: Gradient::zeros(arch),
                v: Gradient::zeros(arch),
                t: 0,
            },
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerState::Sgd { lr } | OptimizerState::Adam { lr, .. } => lr,
        }
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match self {
            OptimizerState::Sgd { lr } | OptimizerState::Adam { lr, .. } => *lr = new_lr,
        }
    }

    /// Descends `params` along `grad` in place.
    pub fn step(&mut self, params: &mut ScorerParams, grad: &Gradient) -> Result<()> {
        if params.arch != grad.arch {
            return Err(Error::ShapeMismatch);
        }
        if let Some(i) = grad.values.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient coordinate {i}")));
        }
        match self {
            OptimizerState::Sgd { lr } => {
                if *lr != 0.0 {
                    for (p, g) in params.values.iter_mut().zip(&grad.values) {
                        *p -= *lr * g;
                    }
                }
            }
            OptimizerState::Adam { lr, beta1, beta2, eps, m, v, t } => {
                if m.arch != params.arch {
                    return Err(Error::ShapeMismatch);
                }
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for (((p, g), mi), vi) in params
                    .values
                    .iter_mut()
                    .zip(&grad.values)
                    .zip(m.values.iter_mut())
                    .zip(v.values.iter_mut())
                {
                    *mi = *beta1 * *mi + (1.0 - *beta1) * g;
                    *vi = *beta2 * *vi + (1.0 - *beta2) * g * g;
                    if *lr != 0.0 {
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *p -= *lr * m_hat / (v_hat.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Value-style optimizer step: consumes the state and parameters and
/// returns their successors.
pub fn opt_step(
    mut state: OptimizerState,
    mut params: ScorerParams,
    grad: &Gradient,
) -> Result<(OptimizerState, ScorerParams)> {
    state.step(&mut params, grad)?;
    Ok((state, params))
}

/// Numerically stable logistic function.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(z))`, stable for large |z|.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Log-softmax of `logits`, computed with max subtraction.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Softmax of `logits`, computed with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Inverse-CDF draw from a normalized probability vector given a uniform
/// variate in [0, 1).
pub fn categorical_from_uniform(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left the cumulative sum a hair below u: take the last
    // candidate with positive mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// One categorical draw from `probs`.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    categorical_from_uniform(probs, rng.random::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn random_mlp(seed: u64, input: usize, hidden: usize) -> ScorerParams {
        let mut rng = seeded(seed);
        let mut p = ScorerParams::zeros(Arch::Mlp2 { input, hidden });
        fill_normal(p.values_mut(), 0.7, &mut rng);
        p
    }

    fn random_input(seed: u64, dim: usize) -> Vec<f64> {
        let mut x = vec![0.0; dim];
        fill_normal(&mut x, 1.0, &mut seeded(seed));
        x
    }

    /// Straight re-implementation of the two-layer forward pass from the
    /// nested-row form.
    fn naive_mlp(w1: &[Vec<f64>], b1: &[f64], w2: &[f64], b2: f64, x: &[f64]) -> f64 {
        let mut out = b2;
        for j in 0..w1.len() {
            let mut pre = b1[j];
            for k in 0..x.len() {
                pre += w1[j][k] * x[k];
            }
            out += w2[j] * pre.tanh();
        }
        out
    }

    #[test]
    fn linear_score_is_affine() {
        let p = ScorerParams::linear(&[1.0, 2.0], 0.5).unwrap();
        assert_eq!(score(&p, &[1.0, 1.0]).unwrap(), 3.5);
    }

    #[test]
    fn zero_mlp_returns_output_bias() {
        let mut p = ScorerParams::zeros(Arch::Mlp2 { input: 3, hidden: 4 });
        *p.values_mut().last_mut().unwrap() = 0.7;
        assert_eq!(score(&p, &[5.0, -2.0, 9.0]).unwrap(), 0.7);
        let (_, g) = score_grad(&p, &[5.0, -2.0, 9.0]).unwrap();
        assert_eq!(*g.values().last().unwrap(), 1.0);
        assert!(g.values()[..g.values().len() - 1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_forward_matches_naive_oracle() {
        let (d, h) = (5, 6);
        let mut rng = seeded(3);
        let mut w1 = vec![vec![0.0; d]; h];
        for row in &mut w1 {
            fill_normal(row, 0.8, &mut rng);
        }
        let mut b1 = vec![0.0; h];
        let mut w2 = vec![0.0; h];
        fill_normal(&mut b1, 0.5, &mut rng);
        fill_normal(&mut w2, 0.5, &mut rng);
        let p = ScorerParams::mlp2(&w1, &b1, &w2, -0.3).unwrap();
        let x = random_input(7, d);
        let expected = naive_mlp(&w1, &b1, &w2, -0.3, &x);
        assert!((score(&p, &x).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = ScorerParams::linear(&[1.0, 2.0], 0.0).unwrap();
        assert!(matches!(
            score(&p, &[1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert!(score_grad(&p, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn linear_gradient_is_the_input() {
        let p = ScorerParams::linear(&[0.3, -1.0, 2.0], 0.1).unwrap();
        let (_, g) = score_grad(&p, &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(g.values(), &[4.0, 5.0, 6.0, 1.0]);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let p = random_mlp(seed, 6, 5);
            let x = random_input(seed + 100, 6);
            let (_, g) = score_grad(&p, &x).unwrap();
            let fd = finite_diff_grad(&p, |q| score(q, &x).unwrap(), 1e-5);
            assert!(max_relative_error(&g, &fd, 1e-6) < 1e-4, "seed {seed}");
        }
    }

    #[test]
    fn score_is_bit_reproducible() {
        let p = random_mlp(11, 4, 3);
        let x = random_input(12, 4);
        let a = score_grad(&p, &x).unwrap();
        let b = score_grad(&p, &x).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn finite_diff_of_constant_and_quadratic() {
        let p = ScorerParams::linear(&[3.0, 1.0], 0.0).unwrap();
        let zero = finite_diff_grad(&p, |_| 4.2, 1e-4);
        assert!(zero.values().iter().all(|&v| v == 0.0));
        let quad = finite_diff_grad(&p, |q| q.values()[0].powi(2), 1e-4);
        assert!((quad.values()[0] - 6.0).abs() < 1e-7);
        assert_eq!(quad.values()[1], 0.0);
    }

    #[test]
    fn sgd_steps_are_linear() {
        let p0 = ScorerParams::linear(&[1.0, 2.0], 3.0).unwrap();
        let arch = p0.arch();
        let g1 = Gradient::from_values(arch, vec![0.5, -1.0, 2.0]).unwrap();
        let g2 = Gradient::from_values(arch, vec![1.5, 0.25, -1.0]).unwrap();
        let mut opt = OptimizerState::new(OptimizerConfig::Sgd { lr: 0.1 }, arch);
        let mut p = p0.clone();
        opt.step(&mut p, &Gradient::zeros(arch)).unwrap();
        assert_eq!(p, p0);
        opt.step(&mut p, &g1).unwrap();
        opt.step(&mut p, &g2).unwrap();
        for i in 0..3 {
            let expected = p0.values()[i] - 0.1 * (g1.values()[i] + g2.values()[i]);
            assert!((p.values()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let arch = Arch::Linear { input: 3 };
        let p0 = ScorerParams::zeros(arch);
        let g = Gradient::from_values(arch, vec![0.3, -2.0, 1e-3, 0.5]).unwrap();
        let state = OptimizerState::new(OptimizerConfig::adam(0.01), arch);
        let (state, p1) = opt_step(state, p0, &g).unwrap();
        for (i, &gi) in g.values().iter().enumerate() {
            // m_hat = g, v_hat = g^2 after bias correction.
            let expected = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((p1.values()[i] - expected).abs() < 1e-12);
        }
        assert!(matches!(state, OptimizerState::Adam { t: 1, .. }));
    }

    #[test]
    fn adam_counts_steps() {
        let arch = Arch::Linear { input: 1 };
        let mut p = ScorerParams::zeros(arch);
        let mut opt = OptimizerState::new(OptimizerConfig::adam(0.1), arch);
        let g = Gradient::from_values(arch, vec![1.0, 1.0]).unwrap();
        for _ in 0..5 {
            opt.step(&mut p, &g).unwrap();
        }
        assert!(matches!(opt, OptimizerState::Adam { t: 5, .. }));
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let arch = Arch::Linear { input: 1 };
        let mut p = ScorerParams::zeros(arch);
        let g = Gradient::from_values(arch, vec![f64::NAN, 0.0]).unwrap();
        let mut opt = OptimizerState::new(OptimizerConfig::Sgd { lr: 0.1 }, arch);
        assert!(matches!(opt.step(&mut p, &g), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_lr_is_identity_for_both_optimizers() {
        let p0 = random_mlp(5, 3, 2);
        let mut g = Gradient::zeros(p0.arch());
        fill_normal(g.values_mut(), 1.0, &mut seeded(6));
        for cfg in [OptimizerConfig::Sgd { lr: 0.0 }, OptimizerConfig::adam(0.0)] {
            let mut p = p0.clone();
            let mut opt = OptimizerState::new(cfg, p.arch());
            opt.step(&mut p, &g).unwrap();
            assert_eq!(p, p0);
        }
    }

    #[test]
    fn logistic_and_softplus_are_stable() {
        assert_eq!(logistic(0.0), 0.5);
        assert!((logistic(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!(logistic(-800.0) >= 0.0 && logistic(800.0) <= 1.0);
        assert!((softplus(-2.0) - 0.126_928_011_042_972_6).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn init_uses_fan_in_scaled_weights() {
        let arch = Arch::Mlp2 { input: 100, hidden: 50 };
        let p = ScorerParams::init(arch, &mut seeded(1)).unwrap();
        let w1 = &p.values()[..5000];
        let var = w1.iter().map(|v| v * v).sum::<f64>() / w1.len() as f64;
        assert!((var.sqrt() - 0.01).abs() < 0.001);
        assert_eq!(*p.values().last().unwrap(), 0.0);
    }
}
