//! Policy-update methods driven by reward-scored samples.
//!
//! Each method is a loss over log-probabilities of candidates, so its
//! gradient is assembled per query as a logit derivative `dz` and chained
//! through the policy scorer. For a loss of the form `sum_y c_y ln pi(y)`
//! the logit derivative is `c - (sum c) pi`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::ops::Deref;

use crate::error::{Error, Result};
use crate::numcore::{logistic, softplus, Gradient, OptimizerConfig, OptimizerState};
use crate::policy::{kl_divergence, kl_logit_grad, Policy};
use crate::reward::RewardModel;
use crate::rng::Rng;
use crate::world::{argmax, GoldenExample, QueryId, ResponseId, World};

/// Samples drawn for one query and their rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredQuery {
    pub query: QueryId,
    pub samples: Vec<ResponseId>,
    pub rewards: Vec<f64>,
}

impl ScoredQuery {
    /// Sample index with the highest reward; ties go to the lowest index.
    pub fn best(&self) -> usize {
        argmax(&self.rewards)
    }

    /// Sample index with the lowest reward; ties go to the lowest index.
    pub fn worst(&self) -> usize {
        let mut worst = 0;
        for (i, &r) in self.rewards.iter().enumerate() {
            if r < self.rewards[worst] {
                worst = i;
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredBatch {
    pub items: Vec<ScoredQuery>,
}

impl Deref for ScoredBatch {
    type Target = [ScoredQuery];

    fn deref(&self) -> &[ScoredQuery] {
        &self.items
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlignMethod {
    Rjs,
    Rrhf {
        #[serde(default = "default_rrhf_lambda")]
        lambda: f64,
    },
    Dpo {
        #[serde(default = "default_beta")]
        beta: f64,
    },
    GoldenSft,
    ExactPg {
        #[serde(default = "default_beta")]
        beta: f64,
    },
}

pub const DEFAULT_RRHF_LAMBDA: f64 = 2.0;
pub const DEFAULT_BETA: f64 = 0.5;

fn default_rrhf_lambda() -> f64 {
    DEFAULT_RRHF_LAMBDA
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

impl AlignMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AlignMethod::Rjs => "rjs",
            AlignMethod::Rrhf { .. } => "rrhf",
            AlignMethod::Dpo { .. } => "dpo",
            AlignMethod::GoldenSft => "golden_sft",
            AlignMethod::ExactPg { .. } => "exact_pg",
        }
    }

    pub fn needs_pairs(&self) -> bool {
        matches!(self, AlignMethod::Rrhf { .. } | AlignMethod::Dpo { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn with_lr(self, lr: f64) -> OptimizerConfig {
        match self {
            OptimizerKind::Sgd => OptimizerConfig::Sgd { lr },
            OptimizerKind::Adam => OptimizerConfig::adam(lr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub method: AlignMethod,
    pub lr: f64,
    pub epochs: usize,
    /// Queries per gradient step.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            method: AlignMethod::Rjs,
            lr: 0.3,
            epochs: 1,
            batch_size: 32,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("align lr must be non-negative, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("align epochs and batch_size must be positive".into());
        }
        match self.method {
            AlignMethod::Rrhf { lambda } if !(lambda >= 0.0) => bad("rrhf lambda must be non-negative".into()),
            AlignMethod::Dpo { beta } | AlignMethod::ExactPg { beta } if !(beta > 0.0 && beta.is_finite()) => {
                bad("beta must be positive".into())
            }
            _ => Ok(()),
        }
    }
}

/// Draws `S` policy samples per query and scores them with the reward model.
pub fn score_batch(
    policy: &Policy,
    rm: &RewardModel,
    world: &World,
    queries: &[QueryId],
    samples_per_query: usize,
    rng: &mut Rng,
) -> Result<ScoredBatch> {
    let mut items = Vec::with_capacity(queries.len());
    for &x in queries {
        let samples = policy.sample_responses(world, x, samples_per_query, rng)?;
        let rewards = samples
            .iter()
            .map(|&y| rm.reward(world, x, y))
            .collect::<Result<Vec<_>>>()?;
        items.push(ScoredQuery { query: x, samples, rewards });
    }
    Ok(ScoredBatch { items })
}

/// Logit derivative of `sum_y c_y ln softmax(z)_y`.
fn linear_logp_dz(probs: &[f64], coef: &[f64]) -> Vec<f64> {
    let total: f64 = coef.iter().sum();
    coef.iter().zip(probs).map(|(c, p)| c - total * p).collect()
}

fn check_batch(world: &World, batch: &[ScoredQuery], min_samples: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("scored batch"));
    }
    for item in batch {
        if item.samples.len() != item.rewards.len() {
            return Err(Error::InvalidConfig("samples and rewards are misaligned".into()));
        }
        if item.samples.len() < min_samples {
            return Err(Error::InvalidConfig(format!("method needs at least {min_samples} samples per query")));
        }
        for &y in &item.samples {
            world.check_response(item.query, y)?;
        }
    }
    Ok(())
}

/// Rejection sampling: `-mean ln pi(y_best | x)`.
pub fn rjs_loss(policy: &Policy, world: &World, batch: &[ScoredQuery]) -> Result<(f64, Gradient)> {
    check_batch(world, batch, 1)?;
    let n = batch.len() as f64;
    let mut grad = Gradient::zeros(policy.params.arch());
    let mut loss = 0.0;
    for item in batch {
        let logp = policy.log_probs(world, item.query)?;
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let best = item.samples[item.best()];
        loss -= logp[best.0];
        let mut coef = vec![0.0; probs.len()];
        coef[best.0] = -1.0 / n;
        policy.accumulate_logit_grad(world, item.query, &linear_logp_dz(&probs, &coef), &mut grad);
    }
    Ok((loss / n, grad))
}

/// RRHF: per query, the mean over reward-ordered sample pairs `(w, l)` of
/// `ReLU(ln pi(l) - ln pi(w))`, plus `lambda * -ln pi(y_best)`; averaged
/// over queries. The ReLU subgradient at zero is zero.
pub fn rrhf_loss(policy: &Policy, world: &World, batch: &[ScoredQuery], lambda: f64) -> Result<(f64, Gradient)> {
    check_batch(world, batch, 2)?;
    let n = batch.len() as f64;
    let mut grad = Gradient::zeros(policy.params.arch());
    let mut loss = 0.0;
    for item in batch {
        let logp = policy.log_probs(world, item.query)?;
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let mut coef = vec![0.0; probs.len()];

        let mut ordered = Vec::new();
        for (i, &ri) in item.rewards.iter().enumerate() {
            for (j, &rj) in item.rewards.iter().enumerate() {
                if ri > rj {
                    ordered.push((item.samples[i], item.samples[j]));
                }
            }
        }
        if !ordered.is_empty() {
            let m = ordered.len() as f64;
            let mut rank_term = 0.0;
            for &(w, l) in &ordered {
                let margin = logp[l.0] - logp[w.0];
                if margin > 0.0 {
                    rank_term += margin;
                    coef[l.0] += 1.0 / (m * n);
                    coef[w.0] -= 1.0 / (m * n);
                }
            }
            loss += rank_term / m;
        }

        let best = item.samples[item.best()];
        loss -= lambda * logp[best.0];
        coef[best.0] -= lambda / n;
        policy.accumulate_logit_grad(world, item.query, &linear_logp_dz(&probs, &coef), &mut grad);
    }
    Ok((loss / n, grad))
}

/// Inner DPO logit for the (best, worst) pair of a query, or `None` when all
/// rewards tie.
pub fn dpo_logit(policy: &Policy, reference: &Policy, world: &World, item: &ScoredQuery, beta: f64) -> Result<Option<f64>> {
    let (bi, wi) = (item.best(), item.worst());
    if item.rewards[bi] == item.rewards[wi] {
        return Ok(None);
    }
    let (yw, yl) = (item.samples[bi], item.samples[wi]);
    let logp = policy.log_probs(world, item.query)?;
    let logr = reference.log_probs(world, item.query)?;
    Ok(Some(beta * ((logp[yw.0] - logr[yw.0]) - (logp[yl.0] - logr[yl.0]))))
}

/// DPO on the (highest-reward, lowest-reward) sample pair of each query:
/// mean `-ln sigma(beta * [ln pi/pi_ref (y_w) - ln pi/pi_ref (y_l)])`.
/// Queries whose rewards all tie are skipped.
pub fn dpo_loss(policy: &Policy, reference: &Policy, world: &World, batch: &[ScoredQuery], beta: f64) -> Result<(f64, Gradient)> {
    check_batch(world, batch, 2)?;
    let mut grad = Gradient::zeros(policy.params.arch());
    let mut terms = Vec::new();
    for item in batch {
        if let Some(h) = dpo_logit(policy, reference, world, item, beta)? {
            terms.push((item, h));
        }
    }
    if terms.is_empty() {
        return Ok((0.0, grad));
    }
    let n = terms.len() as f64;
    let mut loss = 0.0;
    for (item, h) in terms {
        loss += softplus(-h);
        let probs = policy.response_probs(world, item.query)?;
        let (yw, yl) = (item.samples[item.best()], item.samples[item.worst()]);
        let d = -logistic(-h) * beta / n;
        let mut coef = vec![0.0; probs.len()];
        coef[yw.0] += d;
        coef[yl.0] -= d;
        policy.accumulate_logit_grad(world, item.query, &linear_logp_dz(&probs, &coef), &mut grad);
    }
    Ok((loss / n, grad))
}

/// Supervised fine-tuning on golden responses: `-mean ln pi(y_gold | x)`.
pub fn golden_sft_loss(policy: &Policy, world: &World, golden_set: &[GoldenExample]) -> Result<(f64, Gradient)> {
    if golden_set.is_empty() {
        return Err(Error::Empty("golden set"));
    }
    let n = golden_set.len() as f64;
    let mut grad = Gradient::zeros(policy.params.arch());
    let mut loss = 0.0;
    for g in golden_set {
        world.check_response(g.query, g.golden_response)?;
        let logp = policy.log_probs(world, g.query)?;
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        loss -= logp[g.golden_response.0];
        let mut coef = vec![0.0; probs.len()];
        coef[g.golden_response.0] = -1.0 / n;
        policy.accumulate_logit_grad(world, g.query, &linear_logp_dz(&probs, &coef), &mut grad);
    }
    Ok((loss / n, grad))
}

/// KL-regularized expected reward, by exact enumeration of candidates:
/// `mean_x [ sum_y pi(y|x) r(x,y) - beta KL(pi(.|x) || pi_ref(.|x)) ]`.
pub fn exact_pg_objective(
    policy: &Policy,
    reference: &Policy,
    rm: &RewardModel,
    world: &World,
    queries: &[QueryId],
    beta: f64,
) -> Result<(f64, Gradient)> {
    if queries.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let n = queries.len() as f64;
    let mut grad = Gradient::zeros(policy.params.arch());
    let mut total = 0.0;
    for &x in queries {
        let logp = policy.log_probs(world, x)?;
        let logr = reference.log_probs(world, x)?;
        let rewards = rm.rewards(world, x)?;
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let mean_r: f64 = probs.iter().zip(&rewards).map(|(p, r)| p * r).sum();
        total += mean_r - beta * kl_divergence(&logp, &logr);
        let kl_dz = kl_logit_grad(&logp, &logr);
        let dz: Vec<f64> = probs
            .iter()
            .zip(&rewards)
            .zip(&kl_dz)
            .map(|((p, r), k)| (p * (r - mean_r) - beta * k) / n)
            .collect();
        policy.accumulate_logit_grad(world, x, &dz, &mut grad);
    }
    Ok((total / n, grad))
}

/// Loss form of [`exact_pg_objective`] (its negation), for descent.
pub fn exact_pg_loss(
    policy: &Policy,
    reference: &Policy,
    rm: &RewardModel,
    world: &World,
    queries: &[QueryId],
    beta: f64,
) -> Result<(f64, Gradient)> {
    let (obj, mut grad) = exact_pg_objective(policy, reference, rm, world, queries, beta)?;
    grad.scale(-1.0);
    Ok((-obj, grad))
}

fn single_step(policy: &Policy, config: &AlignConfig, grad: &Gradient) -> Result<Policy> {
    let mut next = policy.clone();
    let mut opt = OptimizerState::new(config.optimizer.with_lr(config.lr), policy.params.arch());
    opt.step(&mut next.params, grad)?;
    Ok(next)
}

/// One optimizer step on the RJS loss of `batch`.
pub fn rjs_update(policy: &Policy, world: &World, batch: &[ScoredQuery], config: &AlignConfig) -> Result<Policy> {
    let (_, g) = rjs_loss(policy, world, batch)?;
    single_step(policy, config, &g)
}

pub fn rrhf_update(policy: &Policy, world: &World, batch: &[ScoredQuery], config: &AlignConfig) -> Result<Policy> {
    let AlignMethod::Rrhf { lambda } = config.method else {
        return Err(Error::InvalidConfig("rrhf_update needs an Rrhf config".into()));
    };
    let (_, g) = rrhf_loss(policy, world, batch, lambda)?;
    single_step(policy, config, &g)
}

pub fn dpo_update(
    policy: &Policy,
    reference: &Policy,
    world: &World,
    batch: &[ScoredQuery],
    config: &AlignConfig,
) -> Result<Policy> {
    let AlignMethod::Dpo { beta } = config.method else {
        return Err(Error::InvalidConfig("dpo_update needs a Dpo config".into()));
    };
    let (_, g) = dpo_loss(policy, reference, world, batch, beta)?;
    single_step(policy, config, &g)
}

pub fn golden_sft_update(policy: &Policy, world: &World, golden_set: &[GoldenExample], config: &AlignConfig) -> Result<Policy> {
    let (_, g) = golden_sft_loss(policy, world, golden_set)?;
    single_step(policy, config, &g)
}

pub fn exact_pg_update(
    policy: &Policy,
    rm: &RewardModel,
    reference: &Policy,
    world: &World,
    queries: &[QueryId],
    config: &AlignConfig,
) -> Result<Policy> {
    let AlignMethod::ExactPg { beta } = config.method else {
        return Err(Error::InvalidConfig("exact_pg_update needs an ExactPg config".into()));
    };
    let (_, g) = exact_pg_loss(policy, reference, rm, world, queries, beta)?;
    single_step(policy, config, &g)
}

/// Training data for one alignment phase.
#[derive(Debug, Clone, Copy)]
pub enum AlignData<'a> {
    Scored(&'a ScoredBatch),
    Golden(&'a [GoldenExample]),
    Queries { queries: &'a [QueryId], rm: &'a RewardModel },
}

impl AlignData<'_> {
    fn len(&self) -> usize {
        match self {
            AlignData::Scored(b) => b.len(),
            AlignData::Golden(g) => g.len(),
            AlignData::Queries { queries, .. } => queries.len(),
        }
    }
}

/// Loss of `method` on the subset `idx` of `data`.
fn method_loss(
    method: AlignMethod,
    policy: &Policy,
    reference: &Policy,
    world: &World,
    data: AlignData<'_>,
    idx: &[usize],
) -> Result<(f64, Gradient)> {
    match (method, data) {
        (AlignMethod::Rjs, AlignData::Scored(b)) => rjs_loss(policy, world, &pick(b, idx)),
        (AlignMethod::Rrhf { lambda }, AlignData::Scored(b)) => rrhf_loss(policy, world, &pick(b, idx), lambda),
        (AlignMethod::Dpo { beta }, AlignData::Scored(b)) => dpo_loss(policy, reference, world, &pick(b, idx), beta),
        (AlignMethod::GoldenSft, AlignData::Golden(g)) => golden_sft_loss(policy, world, &pick(g, idx)),
        (AlignMethod::ExactPg { beta }, AlignData::Queries { queries, rm }) => {
            exact_pg_loss(policy, reference, rm, world, &pick(queries, idx), beta)
        }
        (m, _) => Err(Error::InvalidConfig(format!("{} cannot train on the supplied data", m.name()))),
    }
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Runs `config.epochs` passes of mini-batch steps at learning rate `lr`,
/// reshuffling the data each epoch. Returns the new policy and the loss of
/// every step. `round` is only used to label divergence errors.
pub fn align_policy(
    policy: &Policy,
    reference: &Policy,
    world: &World,
    data: AlignData<'_>,
    config: &AlignConfig,
    lr: f64,
    round: usize,
    rng: &mut Rng,
) -> Result<(Policy, Vec<f64>)> {
    config.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Empty("alignment data"));
    }
    let mut current = policy.clone();
    let mut opt = OptimizerState::new(config.optimizer.with_lr(lr), policy.params.arch());
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let step = losses.len();
            let (loss, grad) = method_loss(config.method, &current, reference, world, data, chunk)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Diverged {
                    round,
                    step,
                    what: "policy loss",
                });
            }
            opt.step(&mut current.params, &grad)?;
            if !current.params.is_finite() {
                return Err(Error::Diverged {
                    round,
                    step,
                    what: "policy parameters",
                });
            }
            losses.push(loss);
        }
    }
    Ok((current, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_and_worst_break_ties_low() {
        let item = ScoredQuery {
            query: QueryId(0),
            samples: vec![ResponseId(3), ResponseId(1), ResponseId(2), ResponseId(0)],
            rewards: vec![0.1, 0.9, 0.9, 0.1],
        };
        assert_eq!(item.best(), 1);
        assert_eq!(item.worst(), 0);
        let r = ScoredQuery {
            rewards: vec![0.1, 0.9, 0.3],
            samples: vec![ResponseId(0); 3],
            query: QueryId(0),
        };
        assert_eq!(r.best(), 1);
    }

    #[test]
    fn linear_logp_dz_has_zero_sum() {
        let dz = linear_logp_dz(&[0.2, 0.3, 0.5], &[1.0, -0.5, 0.25]);
        assert!(dz.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(AlignConfig::default().validate().is_ok());
        let bad = AlignConfig {
            method: AlignMethod::Dpo { beta: 0.0 },
            ..AlignConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AlignConfig {
            epochs: 0,
            ..AlignConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
