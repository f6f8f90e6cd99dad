//! Run-to-convergence checks of the alignment and reward-model updates.

mod support;

use apolab::align::{exact_pg_loss, golden_sft_update, AlignConfig, AlignMethod, OptimizerKind};
use apolab::apo::{train_rm, RmConfig, RmVariant};
use apolab::numcore::{Arch, OptimizerConfig, OptimizerState, ScorerParams};
use apolab::policy::Policy;
use apolab::reward::{accuracy, ApoTriplet, RewardModel};
use apolab::rng::seeded;
use apolab::world::{gen_world, GoldenExample, World, PreferencePair, QueryId, ResponseId, WorldConfig};
use support::{spread_params, tiny_world};


#[test]
fn golden_sft_drives_the_golden_probability_to_one() {
    let cfg = WorldConfig { dim: 3, n_queries: 1, n_candidates: 2, ..WorldConfig::default() };
    let world = gen_world(&cfg, 4).unwrap();
    let mut policy = Policy::new(ScorerParams::init(Arch::Linear { input: world.joint_dim() }, &mut seeded(1)).unwrap(), 1.0).unwrap();
    let golden = [GoldenExample { query: QueryId(0), golden_response: ResponseId(1) }];
    let config = AlignConfig { method: AlignMethod::GoldenSft, lr: 0.5, epochs: 1, batch_size: 1, optimizer: OptimizerKind::Sgd };
    let mut probs = Vec::new();
    for _ in 0..400 {
        probs.push(policy.response_probs(&world, QueryId(0)).unwrap()[1]);
        policy = golden_sft_update(&policy, &world, &golden, &config).unwrap();
    }
    assert!(probs[10..].windows(2).all(|w| w[1] >= w[0]), "not monotone after burn-in");
    assert!(*probs.last().unwrap() > 0.99);
}

/// One query whose candidates have one-hot features, so a linear policy is
/// a tabular softmax over candidates.
fn tabular_world(k: usize) -> World {
    let config = WorldConfig { dim: k, n_queries: 1, n_candidates: k, golden_hidden: 17, ..WorldConfig::default() };
    let mut candidates = vec![0.0; k * k];
    for y in 0..k {
        candidates[y * k + y] = 1.0;
    }
    let golden = ScorerParams::zeros(Arch::Mlp2 { input: config.joint_dim(), hidden: 17 });
    World::from_parts(config, 0, vec![0.0; k], candidates, golden).unwrap()
}

fn run_exact_pg(world: &World, rm: &RewardModel, reference: &Policy, start: Policy, beta: f64, steps: usize) -> Policy {
    let queries: Vec<QueryId> = world.all_queries().collect();
    let mut policy = start;
    let mut opt = OptimizerState::new(OptimizerConfig::Sgd { lr: 0.5 }, policy.params.arch());
    for _ in 0..steps {
        let (_, g) = exact_pg_loss(&policy, reference, rm, world, &queries, beta).unwrap();
        opt.step(&mut policy.params, &g).unwrap();
    }
    policy
}

#[test]
fn unregularized_exact_pg_concentrates_on_the_reward_argmax() {
    let world = tabular_world(6);
    let input = world.joint_dim();
    for seed in 0..10 {
        let rm = RewardModel::new(spread_params(Arch::Linear { input }, 10.0, &mut seeded(seed)));
        let uniform = Policy::new(ScorerParams::zeros(Arch::Linear { input }), 1.0).unwrap();
        let policy = run_exact_pg(&world, &rm, &uniform, uniform.clone(), 0.0, 5000);
        let rewards = rm.rewards(&world, QueryId(0)).unwrap();
        let best = (0..rewards.len()).max_by(|&a, &b| rewards[a].total_cmp(&rewards[b])).unwrap();
        let p = policy.response_probs(&world, QueryId(0)).unwrap()[best];
        assert!(p > 0.95, "seed {seed}: {p}");
    }
}

#[test]
fn heavily_regularized_exact_pg_stays_at_the_reference() {
    let world = tiny_world(21);
    let input = world.joint_dim();
    let rm = RewardModel::new(spread_params(Arch::Linear { input }, 10.0, &mut seeded(2)));
    let reference = Policy::new(spread_params(Arch::Linear { input }, 5.0, &mut seeded(3)), 1.0).unwrap();
    let start = Policy::new(ScorerParams::zeros(Arch::Linear { input }), 1.0).unwrap();
    let queries: Vec<QueryId> = world.all_queries().collect();
    let mut policy = start;
    let mut opt = OptimizerState::new(OptimizerConfig::adam(0.01), policy.params.arch());
    for _ in 0..500 {
        let (_, g) = exact_pg_loss(&policy, &reference, &rm, &world, &queries, 1e3).unwrap();
        opt.step(&mut policy.params, &g).unwrap();
    }
    let kl = policy.kl_to(&reference, &world, &queries).unwrap();
    assert!(kl < 1e-3, "KL {kl}");
}

#[test]
fn bt_form_fits_a_separable_set() {
    let world = tiny_world(5);
    let input = world.joint_dim();
    // Labels come from a teacher of the trained architecture, so a perfect
    // ranking exists and the pairs carry no noise.
    let teacher = RewardModel::new(spread_params(Arch::Mlp2 { input, hidden: 4 }, 10.0, &mut seeded(9)));
    let order = |q: usize, a: usize, b: usize| {
        let (ra, rb) = (teacher.reward(&world, QueryId(q), ResponseId(a)).unwrap(), teacher.reward(&world, QueryId(q), ResponseId(b)).unwrap());
        if ra > rb { (ResponseId(a), ResponseId(b)) } else { (ResponseId(b), ResponseId(a)) }
    };
    let pairs: Vec<PreferencePair> = [(0, 0, 1), (0, 2, 3), (1, 1, 4), (2, 0, 3), (3, 2, 4), (4, 1, 2), (5, 0, 4), (5, 1, 3)]
        .iter()
        .map(|&(q, a, b)| {
            let (winner, loser) = order(q, a, b);
            PreferencePair { query: QueryId(q), winner, loser }
        })
        .collect();
    let triplets: Vec<ApoTriplet> = pairs.iter().map(|p| ApoTriplet { query: p.query, golden: p.winner, sample: p.loser }).collect();
    let init = RewardModel::new(ScorerParams::init(Arch::Mlp2 { input, hidden: 4 }, &mut seeded(1)).unwrap());
    let config = RmConfig { hidden: 4, lr: 0.05, epochs: 400, batch_size: 8, optimizer: OptimizerKind::Adam };
    let (rm, losses) = train_rm(&init, &world, &triplets, &pairs, RmVariant::BtForm, 10.0, &config, 1, &mut seeded(2)).unwrap();
    assert_eq!(accuracy(&rm, &world, &pairs).unwrap(), 1.0);
    assert!(losses.last().unwrap() < &losses[0]);
}

#[test]
fn zero_epochs_return_the_initialization() {
    let world = tiny_world(6);
    let init = RewardModel::new(ScorerParams::init(Arch::Mlp2 { input: world.joint_dim(), hidden: 4 }, &mut seeded(1)).unwrap());
    let pairs = apolab::world::build_pref_dataset(&world, &[QueryId(0)], 5, &mut seeded(3)).unwrap();
    let config = RmConfig { epochs: 0, ..RmConfig::default() };
    let (rm, losses) = train_rm(&init, &world, &[], &pairs, RmVariant::NoApoSamples, 10.0, &config, 1, &mut seeded(2)).unwrap();
    assert_eq!(rm, init);
    assert!(losses.is_empty());
}

#[test]
fn training_is_deterministic_and_checks_its_data() {
    let world = tiny_world(6);
    let init = RewardModel::new(ScorerParams::init(Arch::Mlp2 { input: world.joint_dim(), hidden: 4 }, &mut seeded(1)).unwrap());
    let pairs = apolab::world::build_pref_dataset(&world, &[QueryId(0), QueryId(3)], 20, &mut seeded(3)).unwrap();
    let trip = [ApoTriplet { query: QueryId(1), golden: ResponseId(0), sample: ResponseId(2) }];
    let config = RmConfig { hidden: 4, ..RmConfig::default() };
    let a = train_rm(&init, &world, &trip, &pairs, RmVariant::BtForm, 10.0, &config, 1, &mut seeded(2)).unwrap();
    let b = train_rm(&init, &world, &trip, &pairs, RmVariant::BtForm, 10.0, &config, 1, &mut seeded(2)).unwrap();
    assert_eq!(a, b);
    assert!(train_rm(&init, &world, &[], &pairs, RmVariant::GailForm, 10.0, &config, 1, &mut seeded(2)).is_err());
    assert!(train_rm(&init, &world, &trip, &[], RmVariant::BtForm, 10.0, &config, 1, &mut seeded(2)).is_err());
}
