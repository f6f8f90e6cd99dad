//! Reward model, Bradley-Terry preference probability, the ranking-loss
//! family used to train reward models, and reward-model evaluation.
//!
//! The adversarial reward objective pairs each golden response with a policy
//! sample and asks the model to widen their reward gap, while a weighted
//! ranking loss on annotated pairs keeps `Q_phi` close to the ground-truth
//! preference law:
//!
//! ```text
//! L_bt   = L_rank(D_apo) + beta2 * L_rank(D_p)
//! L_wgan = mean_{D_apo}[r(sample) - r(golden)] + beta2 * L_rank(D_p)
//! L_gail = L_rank(D_apo)
//! ```
//!
//! Up to the constant entropy of the true preference law, `L_rank(D_p)` is
//! the forward KL between true and predicted preferences, so `beta2` plays
//! the role of its Lagrange multiplier.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{self, logistic, softplus, Gradient, ScorerParams};
use crate::rng::Rng;
use crate::world::{PreferencePair, QueryId, ResponseId, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub params: ScorerParams,
}

/// Golden response versus a policy sample for the same query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApoTriplet {
    pub query: QueryId,
    pub golden: ResponseId,
    pub sample: ResponseId,
}

impl RewardModel {
    pub fn new(params: ScorerParams) -> Self {
        Self { params }
    }

    fn check_world(&self, world: &World) -> Result<()> {
        let expected = world.joint_dim();
        let got = self.params.arch().input_dim();
        if expected != got {
            return Err(Error::DimensionMismatch { expected, got });
        }
        Ok(())
    }

    pub fn reward(&self, world: &World, x: QueryId, y: ResponseId) -> Result<f64> {
        self.check_world(world)?;
        world.check_response(x, y)?;
        Ok(self.reward_unchecked(world, x, y))
    }

    pub(crate) fn reward_unchecked(&self, world: &World, x: QueryId, y: ResponseId) -> f64 {
        numcore::forward(&self.params, world.joint_feature(x, y))
    }

    /// Rewards of every candidate of `x`.
    pub fn rewards(&self, world: &World, x: QueryId) -> Result<Vec<f64>> {
        self.check_world(world)?;
        world.check_query(x)?;
        Ok((0..world.n_candidates())
            .map(|r| self.reward_unchecked(world, x, ResponseId(r)))
            .collect())
    }

    /// `Q_phi(y > y2 | x) = sigma(r(x, y) - r(x, y2))`.
    pub fn pref_prob(&self, world: &World, x: QueryId, y: ResponseId, y2: ResponseId) -> Result<f64> {
        Ok(logistic(self.reward(world, x, y)? - self.reward(world, x, y2)?))
    }
}

/// Accumulates the summed Bradley-Terry loss `-ln sigma(r_w - r_l)` over
/// `items`, adding `weight * d/dphi` of each term into `grad`. Items whose
/// two responses coincide contribute `ln 2` and no gradient.
fn bt_accumulate<I>(rm: &RewardModel, world: &World, items: I, weight: f64, grad: &mut Gradient) -> f64
where
    I: IntoIterator<Item = (QueryId, ResponseId, ResponseId)>,
{
    let mut total = 0.0;
    for (x, w, l) in items {
        if w == l {
            total += std::f64::consts::LN_2;
            continue;
        }
        let rw = rm.reward_unchecked(world, x, w);
        let rl = rm.reward_unchecked(world, x, l);
        let gap = rw - rl;
        total += softplus(-gap);
        let coef = -logistic(-gap) * weight;
        numcore::accumulate_grad(&rm.params, world.joint_feature(x, w), coef, grad);
        numcore::accumulate_grad(&rm.params, world.joint_feature(x, l), -coef, grad);
    }
    total
}

fn check_pairs(rm: &RewardModel, world: &World, pairs: &[PreferencePair]) -> Result<()> {
    rm.check_world(world)?;
    if pairs.is_empty() {
        return Err(Error::Empty("preference pairs"));
    }
    pairs.iter().try_for_each(|p| world.check_pair(p))
}

fn check_triplets(rm: &RewardModel, world: &World, triplets: &[ApoTriplet]) -> Result<()> {
    rm.check_world(world)?;
    if triplets.is_empty() {
        return Err(Error::Empty("APO triplets"));
    }
    for t in triplets {
        world.check_response(t.query, t.golden)?;
        world.check_response(t.query, t.sample)?;
    }
    Ok(())
}

fn pair_items(pairs: &[PreferencePair]) -> impl Iterator<Item = (QueryId, ResponseId, ResponseId)> + '_ {
    pairs.iter().map(|p| (p.query, p.winner, p.loser))
}

fn triplet_items(triplets: &[ApoTriplet]) -> impl Iterator<Item = (QueryId, ResponseId, ResponseId)> + '_ {
    triplets.iter().map(|t| (t.query, t.golden, t.sample))
}

/// Mean Bradley-Terry ranking loss over annotated pairs, with its gradient.
pub fn rank_loss(rm: &RewardModel, world: &World, pairs: &[PreferencePair]) -> Result<(f64, Gradient)> {
    check_pairs(rm, world, pairs)?;
    let n = pairs.len() as f64;
    let mut grad = Gradient::zeros(rm.params.arch());
    let loss = bt_accumulate(rm, world, pair_items(pairs), 1.0 / n, &mut grad) / n;
    Ok((loss, grad))
}

/// Ranking loss on golden-vs-sample triplets, golden as the winner.
pub fn triplet_rank_loss(rm: &RewardModel, world: &World, d_apo: &[ApoTriplet]) -> Result<(f64, Gradient)> {
    check_triplets(rm, world, d_apo)?;
    let n = d_apo.len() as f64;
    let mut grad = Gradient::zeros(rm.params.arch());
    let loss = bt_accumulate(rm, world, triplet_items(d_apo), 1.0 / n, &mut grad) / n;
    Ok((loss, grad))
}

/// Adversarial reward loss in Bradley-Terry form:
/// `L_rank(D_apo) + beta2 * L_rank(D_p)`.
pub fn apo_rm_loss(
    rm: &RewardModel,
    world: &World,
    d_apo: &[ApoTriplet],
    d_p: &[PreferencePair],
    beta2: f64,
) -> Result<(f64, Gradient)> {
    check_beta2(beta2)?;
    let (l_apo, mut grad) = triplet_rank_loss(rm, world, d_apo)?;
    let (l_p, g_p) = rank_loss(rm, world, d_p)?;
    grad.add_scaled(&g_p, beta2);
    Ok((l_apo + beta2 * l_p, grad))
}

/// Un-squashed reward-gap form:
/// `mean_{D_apo}[r(sample) - r(golden)] + beta2 * L_rank(D_p)`.
pub fn wgan_rm_loss(
    rm: &RewardModel,
    world: &World,
    d_apo: &[ApoTriplet],
    d_p: &[PreferencePair],
    beta2: f64,
) -> Result<(f64, Gradient)> {
    check_beta2(beta2)?;
    check_triplets(rm, world, d_apo)?;
    let (l_p, g_p) = rank_loss(rm, world, d_p)?;
    let n = d_apo.len() as f64;
    let mut grad = Gradient::zeros(rm.params.arch());
    let mut gap_sum = 0.0;
    for t in d_apo {
        if t.golden == t.sample {
            continue;
        }
        let rs = numcore::accumulate_grad(&rm.params, world.joint_feature(t.query, t.sample), 1.0 / n, &mut grad);
        let rg = numcore::accumulate_grad(&rm.params, world.joint_feature(t.query, t.golden), -1.0 / n, &mut grad);
        gap_sum += rs - rg;
    }
    grad.add_scaled(&g_p, beta2);
    Ok((gap_sum / n + beta2 * l_p, grad))
}

/// Ablation without the preference regularizer: `L_rank(D_apo)` alone.
pub fn gail_rm_loss(rm: &RewardModel, world: &World, d_apo: &[ApoTriplet]) -> Result<(f64, Gradient)> {
    triplet_rank_loss(rm, world, d_apo)
}

fn check_beta2(beta2: f64) -> Result<()> {
    if beta2 >= 0.0 && beta2.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("beta2 must be non-negative, got {beta2}")))
    }
}

/// Fraction of pairs whose winner gets the strictly higher reward. Ties
/// count as errors.
pub fn accuracy(rm: &RewardModel, world: &World, pairs: &[PreferencePair]) -> Result<f64> {
    check_pairs(rm, world, pairs)?;
    let correct = pairs
        .iter()
        .filter(|p| rm.reward_unchecked(world, p.query, p.winner) > rm.reward_unchecked(world, p.query, p.loser))
        .count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// One reliability bin covering predicted probabilities in `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean predicted probability; `None` for an empty bin.
    pub mean_predicted: Option<f64>,
    /// Observed rate of the first response winning; `None` for an empty bin.
    pub empirical_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
}

impl CalibrationReport {
    /// Bins `(predicted probability, first-won)` observations into `n_bins`
    /// equal-width bins and computes `sum_b |D_b|/N * |o_b - e_b|`.
    pub fn from_predictions(predictions: &[(f64, bool)], n_bins: usize) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Empty("calibration predictions"));
        }
        if n_bins == 0 {
            return Err(Error::InvalidConfig("calibration needs at least one bin".into()));
        }
        let mut counts = vec![0usize; n_bins];
        let mut pred_sum = vec![0.0; n_bins];
        let mut wins = vec![0usize; n_bins];
        for &(q, won) in predictions {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::InvalidConfig(format!("predicted probability {q} outside [0, 1]")));
            }
            let b = ((q * n_bins as f64).floor() as usize).min(n_bins - 1);
            counts[b] += 1;
            pred_sum[b] += q;
            wins[b] += usize::from(won);
        }
        let total = predictions.len() as f64;
        let mut ece = 0.0;
        let bins = (0..n_bins)
            .map(|b| {
                let (mean_predicted, empirical_rate) = if counts[b] > 0 {
                    let e = pred_sum[b] / counts[b] as f64;
                    let o = wins[b] as f64 / counts[b] as f64;
                    ece += counts[b] as f64 / total * (o - e).abs();
                    (Some(e), Some(o))
                } else {
                    (None, None)
                };
                CalibrationBin {
                    lower: b as f64 / n_bins as f64,
                    upper: (b + 1) as f64 / n_bins as f64,
                    count: counts[b],
                    mean_predicted,
                    empirical_rate,
                }
            })
            .collect();
        Ok(Self { bins, ece })
    }
}

/// Expected calibration error of `Q_phi` on `pairs`. Each pair is presented
/// winner-first or loser-first by a seeded coin so predictions span the
/// whole unit interval.
pub fn ece(rm: &RewardModel, world: &World, pairs: &[PreferencePair], n_bins: usize, rng: &mut Rng) -> Result<CalibrationReport> {
    check_pairs(rm, world, pairs)?;
    let predictions: Vec<(f64, bool)> = pairs
        .iter()
        .map(|p| {
            let gap = rm.reward_unchecked(world, p.query, p.winner) - rm.reward_unchecked(world, p.query, p.loser);
            if rng.random::<bool>() {
                (logistic(gap), true)
            } else {
                (logistic(-gap), false)
            }
        })
        .collect();
    CalibrationReport::from_predictions(&predictions, n_bins)
}
