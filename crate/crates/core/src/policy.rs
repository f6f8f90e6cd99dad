//! Softmax response policy over each query's candidate set.
//!
//! `pi(y|x) = softmax_y(score(theta, phi(x, y)) / T)`. Every method-specific
//! loss is expressed through its derivative with respect to the logits
//! `z_y = score_y / T`, and [`Policy::accumulate_logit_grad`] chains that
//! back to the scorer parameters.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{self, categorical_from_uniform, log_softmax, softmax, Gradient, RealVector, ScorerParams};
use crate::rng::Rng;
use crate::world::{QueryId, ResponseId, World};

/// Joint (query, response) feature `[x, y, x*y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFeature(pub RealVector);

pub fn joint_feature(world: &World, x: QueryId, y: ResponseId) -> Result<JointFeature> {
    world.check_response(x, y)?;
    Ok(JointFeature(RealVector::new(world.joint_feature(x, y).to_vec())?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub params: ScorerParams,
    pub temperature: f64,
}

impl Policy {
    pub fn new(params: ScorerParams, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidConfig("policy temperature must be positive".into()));
        }
        Ok(Self { params, temperature })
    }

    fn check_world(&self, world: &World) -> Result<()> {
        let expected = world.joint_dim();
        let got = self.params.arch().input_dim();
        if expected != got {
            return Err(Error::DimensionMismatch { expected, got });
        }
        Ok(())
    }

    /// Tempered logits `score / T` for every candidate of `x`.
    pub fn logits(&self, world: &World, x: QueryId) -> Result<Vec<f64>> {
        self.check_world(world)?;
        world.check_query(x)?;
        Ok((0..world.n_candidates())
            .map(|r| numcore::forward(&self.params, world.joint_feature(x, ResponseId(r))) / self.temperature)
            .collect())
    }

    pub fn response_probs(&self, world: &World, x: QueryId) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(world, x)?))
    }

    pub fn log_probs(&self, world: &World, x: QueryId) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.logits(world, x)?))
    }

    pub fn log_prob(&self, world: &World, x: QueryId, y: ResponseId) -> Result<f64> {
        world.check_response(x, y)?;
        Ok(self.log_probs(world, x)?[y.0])
    }

    /// `S` i.i.d. draws from `pi(.|x)`.
    pub fn sample_responses(&self, world: &World, x: QueryId, count: usize, rng: &mut Rng) -> Result<Vec<ResponseId>> {
        if count == 0 {
            return Err(Error::InvalidConfig("sample count must be at least 1".into()));
        }
        let probs = self.response_probs(world, x)?;
        Ok((0..count)
            .map(|_| ResponseId(categorical_from_uniform(&probs, rng.random::<f64>())))
            .collect())
    }

    /// Adds `sum_y dz[y] * d z_y / d theta` into `grad`.
    pub(crate) fn accumulate_logit_grad(&self, world: &World, x: QueryId, dz: &[f64], grad: &mut Gradient) {
        let inv_t = 1.0 / self.temperature;
        for (r, &c) in dz.iter().enumerate() {
            if c != 0.0 {
                numcore::accumulate_grad(&self.params, world.joint_feature(x, ResponseId(r)), c * inv_t, grad);
            }
        }
    }

    /// Exact gradient of `ln pi(y|x)` with respect to the scorer parameters.
    pub fn log_prob_grad(&self, world: &World, x: QueryId, y: ResponseId) -> Result<Gradient> {
        world.check_response(x, y)?;
        let dz = log_prob_logit_grad(&self.response_probs(world, x)?, y);
        let mut grad = Gradient::zeros(self.params.arch());
        self.accumulate_logit_grad(world, x, &dz, &mut grad);
        Ok(grad)
    }

    /// Mean over `queries` of the exact `KL[pi(.|x) || reference(.|x)]`.
    pub fn kl_to(&self, reference: &Policy, world: &World, queries: &[QueryId]) -> Result<f64> {
        if queries.is_empty() {
            return Err(Error::Empty("query set for KL"));
        }
        let mut total = 0.0;
        for &x in queries {
            total += kl_divergence(&self.log_probs(world, x)?, &reference.log_probs(world, x)?);
        }
        Ok(total / queries.len() as f64)
    }
}

/// Derivative of `ln softmax(z)_y` with respect to `z`: `e_y - pi`.
pub(crate) fn log_prob_logit_grad(probs: &[f64], y: ResponseId) -> Vec<f64> {
    let mut dz: Vec<f64> = probs.iter().map(|p| -p).collect();
    dz[y.0] += 1.0;
    dz
}

/// `KL[p || q]` from log-probabilities.
pub fn kl_divergence(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum::<f64>()
        .max(0.0)
}

/// Derivative of `KL[softmax(z) || q]` with respect to `z`:
/// `pi_j (f_j - E_pi f)` where `f = ln pi - ln q`.
pub(crate) fn kl_logit_grad(log_p: &[f64], log_q: &[f64]) -> Vec<f64> {
    let f: Vec<f64> = log_p.iter().zip(log_q).map(|(a, b)| a - b).collect();
    let mean: f64 = log_p.iter().zip(&f).map(|(lp, fi)| lp.exp() * fi).sum();
    log_p.iter().zip(&f).map(|(lp, fi)| lp.exp() * (fi - mean)).collect()
}
