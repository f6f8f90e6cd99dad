//! Alternating reward-model / policy optimization and its evaluation.
//!
//! Each round first refits the reward model against golden responses versus
//! fresh samples of the current policy (when the adversarial step is
//! enabled), then samples the policy on its training queries, scores the
//! samples with that reward model, and runs one alignment phase. With the
//! adversarial step disabled the reward model is fitted once on annotated
//! pairs and frozen, which is the baseline condition.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::align::{align_policy, score_batch, AlignConfig, AlignData, AlignMethod, OptimizerKind};
use crate::error::{Error, Result};
use crate::numcore::{categorical_from_uniform, Arch, OptimizerState, ScorerParams};
use crate::policy::Policy;
use crate::reward::{accuracy, apo_rm_loss, ece, gail_rm_loss, rank_loss, wgan_rm_loss, ApoTriplet, RewardModel};
use crate::rng::{stream, Rng, Stream};
use crate::world::{
    build_pref_dataset, gen_world, golden_response, make_split, DataSplit, GoldenExample, PreferencePair, QueryId,
    ResponseId, SplitRatios, World, WorldConfig,
};

pub const LOG_SCHEMA: &str = "apolab-log/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmInitMode {
    /// Refit from the stored base initialization on all D_APO collected so far.
    FreshFromBase,
    /// Continue from the previous round's parameters on the newest D_APO.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmVariant {
    BtForm,
    WganForm,
    GailForm,
    NoApoSamples,
}

impl RmVariant {
    pub fn name(&self) -> &'static str {
        match self {
            RmVariant::BtForm => "bt_form",
            RmVariant::WganForm => "wgan_form",
            RmVariant::GailForm => "gail_form",
            RmVariant::NoApoSamples => "no_apo_samples",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: SplitRatios,
    /// Annotated pairs (D_P) drawn from the reward-model training queries.
    pub n_pref_pairs: usize,
    pub n_dev_pairs: usize,
    pub n_test_pairs: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: SplitRatios::default(),
            n_pref_pairs: 250,
            n_dev_pairs: 2000,
            n_test_pairs: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerKind {
    Linear,
    Mlp2 { hidden: usize },
}

impl ScorerKind {
    pub fn arch(&self, input: usize) -> Arch {
        match *self {
            ScorerKind::Linear => Arch::Linear { input },
            ScorerKind::Mlp2 { hidden } => Arch::Mlp2 { input, hidden },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub scorer: ScorerKind,
    pub temperature: f64,
    /// Epochs of supervised warm-up on the winners of D_P, which turns the
    /// random initialization into the SFT-analog starting policy. Zero keeps
    /// the near-uniform initialization. Warm-up uses plain SGD.
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            scorer: ScorerKind::Linear,
            temperature: 1.0,
            warmup_epochs: 5,
            warmup_lr: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Annotated pairs per gradient step.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for RmConfig {
    fn default() -> Self {
        Self {
            hidden: crate::world::DEFAULT_RM_HIDDEN,
            lr: 0.01,
            epochs: 20,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Policy draws per test query for the utility estimate.
    pub n_samples: usize,
    /// Policy-sampled, oracle-labelled pairs for the shift witness.
    pub n_shift_pairs: usize,
    pub ece_bins: usize,
    /// Golden-utility margin below which a comparison is a tie.
    pub tie_eps: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 128,
            n_shift_pairs: 4000,
            ece_bins: 10,
            tie_eps: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run label; becomes `run_id` in metrics files.
    pub tag: String,
    pub seed: u64,
    /// World seed; defaults to `seed` so replicates vary the world too.
    pub world_seed: Option<u64>,
    pub world: WorldConfig,
    pub split: SplitConfig,
    pub policy: PolicyConfig,
    pub method: AlignConfig,
    pub apo_enabled: bool,
    pub beta2: f64,
    pub rounds: usize,
    /// Samples per query, for both D_APO and alignment batches.
    pub samples_per_query: usize,
    pub rm: RmConfig,
    pub rm_init_mode: RmInitMode,
    pub rm_variant: RmVariant,
    /// Per-round multipliers of `method.lr`; the last entry repeats, and an
    /// empty schedule means a constant rate.
    pub lr_schedule: Vec<f64>,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tag: "run".into(),
            seed: 1,
            world_seed: None,
            world: WorldConfig::default(),
            split: SplitConfig::default(),
            policy: PolicyConfig::default(),
            method: AlignConfig::default(),
            apo_enabled: true,
            beta2: 10.0,
            rounds: 3,
            samples_per_query: 4,
            rm: RmConfig::default(),
            rm_init_mode: RmInitMode::FreshFromBase,
            rm_variant: RmVariant::BtForm,
            lr_schedule: Vec::new(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.world.validate()?;
        self.method.validate()?;
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.samples_per_query == 0 || (self.method.method.needs_pairs() && self.samples_per_query < 2) {
            return bad(format!("{} needs more samples per query", self.method.method.name()));
        }
        if !(self.beta2 >= 0.0 && self.beta2.is_finite()) {
            return bad("beta2 must be non-negative".into());
        }
        if self.rm.hidden == 0 || self.rm.hidden >= self.world.golden_hidden {
            return bad("reward-model width must be positive and below the golden width".into());
        }
        if self.rm.batch_size == 0 || !(self.rm.lr >= 0.0 && self.rm.lr.is_finite()) {
            return bad("bad reward-model training settings".into());
        }
        if let ScorerKind::Mlp2 { hidden: 0 } = self.policy.scorer {
            return bad("policy hidden width must be positive".into());
        }
        if !(self.policy.warmup_lr >= 0.0 && self.policy.warmup_lr.is_finite()) {
            return bad("policy warmup_lr must be non-negative".into());
        }
        if !(self.policy.temperature > 0.0) {
            return bad("policy temperature must be positive".into());
        }
        if self.lr_schedule.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            return bad("lr_schedule entries must be non-negative".into());
        }
        if self.split.n_pref_pairs == 0 || self.split.n_dev_pairs == 0 || self.split.n_test_pairs == 0 {
            return bad("preference, dev and test pair counts must be positive".into());
        }
        if self.eval.n_samples == 0 || self.eval.n_shift_pairs == 0 || self.eval.ece_bins == 0 {
            return bad("evaluation sizes must be positive".into());
        }
        if !(self.eval.tie_eps > 0.0) {
            return bad("tie_eps must be positive".into());
        }
        Ok(())
    }

    pub fn world_seed(&self) -> u64 {
        self.world_seed.unwrap_or(self.seed)
    }

    /// Learning rate of the alignment phase in 1-based `round`.
    pub fn lr_for_round(&self, round: usize) -> f64 {
        let mult = match self.lr_schedule.len() {
            0 => 1.0,
            n => self.lr_schedule[(round - 1).min(n - 1)],
        };
        self.method.lr * mult
    }
}

/// The world and every fixed dataset a run uses.
#[derive(Debug, Clone)]
pub struct Lab {
    pub world: World,
    pub split: DataSplit,
    pub d_p: Vec<PreferencePair>,
    pub golden_set: Vec<GoldenExample>,
}

/// Generates the world, its split, D_P (from reward-model training queries)
/// and one golden response per reward-model training query.
pub fn prepare_lab(world_config: &WorldConfig, split: &SplitConfig, world_seed: u64, data_seed: u64) -> Result<Lab> {
    let world = gen_world(world_config, world_seed)?;
    let data_split = make_split(&world, &split.ratios, split.n_dev_pairs, split.n_test_pairs, data_seed)?;
    let d_p = build_pref_dataset(
        &world,
        &data_split.rm_train_queries,
        split.n_pref_pairs,
        &mut stream(data_seed, Stream::PreferencePairs),
    )?;
    let mut rng = stream(data_seed, Stream::GoldenSet);
    let golden_set = data_split
        .rm_train_queries
        .iter()
        .map(|&q| golden_response(&world, q, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Lab {
        world,
        split: data_split,
        d_p,
        golden_set,
    })
}

/// Pairs each golden response with `S` fresh samples of the policy.
pub fn build_apo_set(
    policy: &Policy,
    world: &World,
    golden_set: &[GoldenExample],
    samples_per_query: usize,
    rng: &mut Rng,
) -> Result<Vec<ApoTriplet>> {
    if golden_set.is_empty() {
        return Err(Error::Empty("golden set"));
    }
    let mut out = Vec::with_capacity(golden_set.len() * samples_per_query);
    for g in golden_set {
        for sample in policy.sample_responses(world, g.query, samples_per_query, rng)? {
            out.push(ApoTriplet {
                query: g.query,
                golden: g.golden_response,
                sample,
            });
        }
    }
    Ok(out)
}

/// Mini-batch training of a reward model on the selected loss variant.
///
/// One epoch walks the annotated pairs in shuffled batches of
/// `config.batch_size`; the triplets are spread over the same number of
/// steps so both sets are covered once per epoch. Variants without D_P step
/// through the triplets alone.
#[allow(clippy::too_many_arguments)]
pub fn train_rm(
    init: &RewardModel,
    world: &World,
    d_apo: &[ApoTriplet],
    d_p: &[PreferencePair],
    variant: RmVariant,
    beta2: f64,
    config: &RmConfig,
    round: usize,
    rng: &mut Rng,
) -> Result<(RewardModel, Vec<f64>)> {
    let uses_pairs = !matches!(variant, RmVariant::GailForm);
    let uses_triplets = !matches!(variant, RmVariant::NoApoSamples);
    if uses_pairs && d_p.is_empty() {
        return Err(Error::InvalidConfig(format!("{} needs annotated pairs", variant.name())));
    }
    if uses_triplets && d_apo.is_empty() {
        return Err(Error::InvalidConfig(format!("{} needs APO triplets", variant.name())));
    }

    let mut rm = init.clone();
    let mut losses = Vec::new();
    if config.epochs == 0 {
        return Ok((rm, losses));
    }
    let n_steps = if uses_pairs {
        d_p.len().div_ceil(config.batch_size)
    } else {
        d_apo.len().div_ceil(config.batch_size)
    };
    let apo_chunk = if uses_triplets { d_apo.len().div_ceil(n_steps) } else { 0 };

    let mut opt = OptimizerState::new(config.optimizer.with_lr(config.lr), rm.params.arch());
    let mut p_order: Vec<usize> = (0..d_p.len()).collect();
    let mut a_order: Vec<usize> = (0..d_apo.len()).collect();
    for _ in 0..config.epochs {
        p_order.shuffle(rng);
        a_order.shuffle(rng);
        for s in 0..n_steps {
            let p_batch: Vec<PreferencePair> = if uses_pairs {
                let lo = s * config.batch_size;
                p_order[lo..(lo + config.batch_size).min(d_p.len())].iter().map(|&i| d_p[i]).collect()
            } else {
                Vec::new()
            };
            let a_batch: Vec<ApoTriplet> = if uses_triplets {
                let lo = (s * apo_chunk).min(d_apo.len());
                a_order[lo..(lo + apo_chunk).min(d_apo.len())].iter().map(|&i| d_apo[i]).collect()
            } else {
                Vec::new()
            };
            // The last steps can run out of triplets when the chunks do not
            // divide evenly; fall back to the pair loss alone.
            let (loss, grad) = match variant {
                RmVariant::NoApoSamples => rank_loss(&rm, world, &p_batch)?,
                RmVariant::GailForm => gail_rm_loss(&rm, world, &a_batch)?,
                _ if a_batch.is_empty() => {
                    let (l, mut g) = rank_loss(&rm, world, &p_batch)?;
                    g.scale(beta2);
                    (beta2 * l, g)
                }
                RmVariant::BtForm => apo_rm_loss(&rm, world, &a_batch, &p_batch, beta2)?,
                RmVariant::WganForm => wgan_rm_loss(&rm, world, &a_batch, &p_batch, beta2)?,
            };
            let step = losses.len();
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Diverged {
                    round,
                    step,
                    what: "reward-model loss",
                });
            }
            opt.step(&mut rm.params, &grad)?;
            losses.push(loss);
        }
    }
    Ok((rm, losses))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub mean_true_utility: f64,
    pub kl_to_ref: f64,
}

fn draw_eval_samples(
    policy: &Policy,
    world: &World,
    queries: &[QueryId],
    n_samples: usize,
    rng: &mut Rng,
) -> Result<Vec<(QueryId, ResponseId)>> {
    let mut out = Vec::with_capacity(queries.len() * n_samples);
    for &x in queries {
        for y in policy.sample_responses(world, x, n_samples, rng)? {
            out.push((x, y));
        }
    }
    Ok(out)
}

/// Mean golden utility of `n_samples` policy draws per test query, and the
/// exact KL to the reference averaged over the same queries.
pub fn evaluate_policy(
    policy: &Policy,
    reference: &Policy,
    world: &World,
    test_queries: &[QueryId],
    n_samples: usize,
    rng: &mut Rng,
) -> Result<PolicyEval> {
    if test_queries.is_empty() {
        return Err(Error::Empty("test queries"));
    }
    let draws = draw_eval_samples(policy, world, test_queries, n_samples, rng)?;
    let mean_true_utility = draws.iter().map(|&(x, y)| world.utility(x, y)).sum::<f64>() / draws.len() as f64;
    Ok(PolicyEval {
        mean_true_utility,
        kl_to_ref: policy.kl_to(reference, world, test_queries)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub win: f64,
    pub lose: f64,
    pub tie: f64,
}

/// Oracle judge: one response per query from each policy, compared by golden
/// utility with a tie margin. Both draws use the same uniform variate
/// (inverse-CDF coupling), so identical policies always tie.
pub fn win_rate(
    policy_a: &Policy,
    policy_b: &Policy,
    world: &World,
    queries: &[QueryId],
    rng: &mut Rng,
    tie_eps: f64,
) -> Result<WinRate> {
    if queries.is_empty() {
        return Err(Error::Empty("queries for win rate"));
    }
    if !(tie_eps > 0.0) {
        return Err(Error::InvalidConfig("tie_eps must be positive".into()));
    }
    let (mut win, mut lose) = (0usize, 0usize);
    for &x in queries {
        let u = rng.random::<f64>();
        let ya = categorical_from_uniform(&policy_a.response_probs(world, x)?, u);
        let yb = categorical_from_uniform(&policy_b.response_probs(world, x)?, u);
        let gap = world.utility(x, ResponseId(ya)) - world.utility(x, ResponseId(yb));
        if gap > tie_eps {
            win += 1;
        } else if gap < -tie_eps {
            lose += 1;
        }
    }
    let n = queries.len() as f64;
    let (win, lose) = (win as f64 / n, lose as f64 / n);
    Ok(WinRate {
        win,
        lose,
        tie: 1.0 - win - lose,
    })
}

/// Fresh oracle-labelled pairs of two distinct policy samples: a uniform
/// query, `y ~ pi`, then `y2 ~ pi` conditioned on `y2 != y`.
pub fn policy_pairs(policy: &Policy, world: &World, queries: &[QueryId], n_pairs: usize, rng: &mut Rng) -> Result<Vec<PreferencePair>> {
    if queries.is_empty() {
        return Err(Error::Empty("queries for policy pairs"));
    }
    let mut out = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let x = queries[rng.random_range(0..queries.len())];
        let mut probs = policy.response_probs(world, x)?;
        let y = categorical_from_uniform(&probs, rng.random::<f64>());
        probs[y] = 0.0;
        let rest: f64 = probs.iter().sum();
        let y2 = if rest > 0.0 {
            probs.iter_mut().for_each(|p| *p /= rest);
            categorical_from_uniform(&probs, rng.random::<f64>())
        } else {
            // All mass sat on y; any other candidate is as likely as the next.
            let mut alt = rng.random_range(0..world.n_candidates() - 1);
            if alt >= y {
                alt += 1;
            }
            alt
        };
        out.push(crate::world::annotate_pair(world, x, ResponseId(y), ResponseId(y2), rng)?);
    }
    Ok(out)
}

/// Per-round measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub round: usize,
    pub rm_dev_acc: f64,
    pub rm_test_acc: f64,
    pub rm_dev_ece: f64,
    pub rm_test_ece: f64,
    /// Mean golden utility of policy samples on test queries.
    pub policy_true_utility: f64,
    /// Mean reward of the same samples under the round's reward model.
    pub policy_rm_reward: f64,
    pub kl_to_ref: f64,
    pub win: f64,
    pub lose: f64,
    pub tie: f64,
    /// Accuracy of the round's reward model on pairs sampled from the policy.
    pub rm_shift_acc: f64,
    /// Accuracy of the frozen base reward model on the same pairs.
    pub base_rm_shift_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentLog {
    pub schema: String,
    pub config: ExperimentConfig,
    /// Measurements before any update (the initial policy with the base
    /// reward model).
    pub initial: EpochMetrics,
    pub rounds: Vec<EpochMetrics>,
    /// Reward-model parameters in effect at the end of every round.
    pub rm_history: Vec<ScorerParams>,
    /// Policy parameters at the end of every round.
    pub policy_history: Vec<ScorerParams>,
    pub base_rm: RewardModel,
    pub final_rm: RewardModel,
    pub final_policy: Policy,
}

/// Progress notifications emitted during a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Prepared {
        rm_train_queries: usize,
        llm_train_queries: usize,
        test_queries: usize,
        pref_pairs: usize,
        golden: usize,
    },
    RewardModelTrained {
        round: usize,
        variant: String,
        triplets: usize,
        steps: usize,
        final_loss: f64,
    },
    PolicyAligned {
        round: usize,
        method: String,
        lr: f64,
        steps: usize,
        final_loss: f64,
    },
    Metrics(EpochMetrics),
}

struct Measured<'a> {
    lab: &'a Lab,
    config: &'a ExperimentConfig,
    reference: &'a Policy,
    base_rm: &'a RewardModel,
}

impl Measured<'_> {
    fn measure(&self, round: usize, policy: &Policy, rm: &RewardModel) -> Result<EpochMetrics> {
        let (lab, cfg, seed) = (self.lab, self.config, self.config.seed);
        let world = &lab.world;
        let test_q = &lab.split.test_queries;
        let bins = cfg.eval.ece_bins;
        let dev_ece = ece(rm, world, &lab.split.dev_pairs, bins, &mut stream(seed, Stream::Calibration))?;
        let test_ece = ece(rm, world, &lab.split.test_pairs, bins, &mut stream(seed, Stream::Calibration))?;

        let draws = draw_eval_samples(policy, world, test_q, cfg.eval.n_samples, &mut stream(seed, Stream::Eval(round)))?;
        let n = draws.len() as f64;
        let policy_true_utility = draws.iter().map(|&(x, y)| world.utility(x, y)).sum::<f64>() / n;
        let policy_rm_reward = draws.iter().map(|&(x, y)| rm.reward_unchecked(world, x, y)).sum::<f64>() / n;
        let wins = win_rate(
            policy,
            self.reference,
            world,
            test_q,
            &mut stream(seed, Stream::WinRate(round)),
            cfg.eval.tie_eps,
        )?;
        let shift = policy_pairs(policy, world, test_q, cfg.eval.n_shift_pairs, &mut stream(seed, Stream::ShiftPairs(round)))?;
        Ok(EpochMetrics {
            round,
            rm_dev_acc: accuracy(rm, world, &lab.split.dev_pairs)?,
            rm_test_acc: accuracy(rm, world, &lab.split.test_pairs)?,
            rm_dev_ece: dev_ece.ece,
            rm_test_ece: test_ece.ece,
            policy_true_utility,
            policy_rm_reward,
            kl_to_ref: policy.kl_to(self.reference, world, test_q)?,
            win: wins.win,
            lose: wins.lose,
            tie: wins.tie,
            rm_shift_acc: accuracy(rm, world, &shift)?,
            base_rm_shift_acc: accuracy(self.base_rm, world, &shift)?,
        })
    }
}

/// Initial (reference) policy and the base reward-model initialization.
pub fn initial_models(config: &ExperimentConfig, lab: &Lab) -> Result<(Policy, RewardModel)> {
    let world = &lab.world;
    let input = world.joint_dim();
    let mut policy = Policy::new(
        ScorerParams::init(config.policy.scorer.arch(input), &mut stream(config.seed, Stream::PolicyInit))?,
        config.policy.temperature,
    )?;
    if config.policy.warmup_epochs > 0 {
        let winners: Vec<GoldenExample> = lab
            .d_p
            .iter()
            .map(|p| GoldenExample {
                query: p.query,
                golden_response: p.winner,
            })
            .collect();
        let warmup = AlignConfig {
            method: AlignMethod::GoldenSft,
            lr: config.policy.warmup_lr,
            epochs: config.policy.warmup_epochs,
            batch_size: config.method.batch_size,
            optimizer: OptimizerKind::Sgd,
        };
        let lr = warmup.lr;
        policy = align_policy(
            &policy,
            &policy,
            world,
            AlignData::Golden(&winners),
            &warmup,
            lr,
            0,
            &mut stream(config.seed, Stream::PolicyWarmup),
        )?
        .0;
    }
    let rm = RewardModel::new(ScorerParams::init(
        Arch::Mlp2 {
            input,
            hidden: config.rm.hidden,
        },
        &mut stream(config.seed, Stream::RmInit),
    )?);
    Ok((policy, rm))
}

/// Fits the base reward model on D_P alone.
pub fn train_base_rm(config: &ExperimentConfig, lab: &Lab, init: &RewardModel) -> Result<RewardModel> {
    let (rm, _) = train_rm(
        init,
        &lab.world,
        &[],
        &lab.d_p,
        RmVariant::NoApoSamples,
        config.beta2,
        &config.rm,
        0,
        &mut stream(config.seed, Stream::BaseRmTrain),
    )?;
    Ok(rm)
}

pub fn run_apo(config: &ExperimentConfig) -> Result<ExperimentLog> {
    run_apo_observed(config, |_| {})
}

/// Runs the experiment, reporting progress through `on_event`.
pub fn run_apo_observed<F: FnMut(&Event)>(config: &ExperimentConfig, on_event: F) -> Result<ExperimentLog> {
    config.validate()?;
    let lab = prepare_lab(&config.world, &config.split, config.world_seed(), config.seed)?;
    run_on_lab(config, &lab, on_event)
}

/// Runs the experiment on an already prepared lab.
pub fn run_on_lab<F: FnMut(&Event)>(config: &ExperimentConfig, lab: &Lab, mut on_event: F) -> Result<ExperimentLog> {
    config.validate()?;
    let world = &lab.world;
    on_event(&Event::Prepared {
        rm_train_queries: lab.split.rm_train_queries.len(),
        llm_train_queries: lab.split.llm_train_queries.len(),
        test_queries: lab.split.test_queries.len(),
        pref_pairs: lab.d_p.len(),
        golden: lab.golden_set.len(),
    });

    let (reference, rm_init) = initial_models(config, lab)?;
    let base_rm = train_base_rm(config, lab, &rm_init)?;
    let measured = Measured {
        lab,
        config,
        reference: &reference,
        base_rm: &base_rm,
    };

    let initial = measured.measure(0, &reference, &base_rm)?;
    let mut policy = reference.clone();
    let mut rm = base_rm.clone();
    let mut all_apo: Vec<ApoTriplet> = Vec::new();
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut rm_history = Vec::with_capacity(config.rounds);
    let mut policy_history = Vec::with_capacity(config.rounds);

    for round in 1..=config.rounds {
        if config.apo_enabled {
            let fresh = build_apo_set(
                &policy,
                world,
                &lab.golden_set,
                config.samples_per_query,
                &mut stream(config.seed, Stream::ApoSamples(round)),
            )?;
            let (init, triplets) = match config.rm_init_mode {
                RmInitMode::FreshFromBase => {
                    all_apo.extend_from_slice(&fresh);
                    (&rm_init, all_apo.as_slice())
                }
                RmInitMode::Sequential => (&rm, fresh.as_slice()),
            };
            let (next, losses) = train_rm(
                init,
                world,
                triplets,
                &lab.d_p,
                config.rm_variant,
                config.beta2,
                &config.rm,
                round,
                &mut stream(config.seed, Stream::RmTrain(round)),
            )?;
            on_event(&Event::RewardModelTrained {
                round,
                variant: config.rm_variant.name().into(),
                triplets: triplets.len(),
                steps: losses.len(),
                final_loss: losses.last().copied().unwrap_or(f64::NAN),
            });
            rm = next;
        }

        let lr = config.lr_for_round(round);
        let batch;
        let data = match config.method.method {
            AlignMethod::GoldenSft => AlignData::Golden(&lab.golden_set),
            AlignMethod::ExactPg { .. } => AlignData::Queries {
                queries: &lab.split.llm_train_queries,
                rm: &rm,
            },
            _ => {
                batch = score_batch(
                    &policy,
                    &rm,
                    world,
                    &lab.split.llm_train_queries,
                    config.samples_per_query,
                    &mut stream(config.seed, Stream::AlignSamples(round)),
                )?;
                AlignData::Scored(&batch)
            }
        };
        let (next, losses) = align_policy(
            &policy,
            &reference,
            world,
            data,
            &config.method,
            lr,
            round,
            &mut stream(config.seed, Stream::AlignShuffle(round)),
        )?;
        on_event(&Event::PolicyAligned {
            round,
            method: config.method.method.name().into(),
            lr,
            steps: losses.len(),
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
        });
        policy = next;

        let metrics = measured.measure(round, &policy, &rm)?;
        on_event(&Event::Metrics(metrics.clone()));
        rounds.push(metrics);
        rm_history.push(rm.params.clone());
        policy_history.push(policy.params.clone());
    }

    Ok(ExperimentLog {
        schema: LOG_SCHEMA.into(),
        config: config.clone(),
        initial,
        rounds,
        rm_history,
        policy_history,
        base_rm,
        final_rm: rm,
        final_policy: policy,
    })
}
