//! Synthetic preference environment.
//!
//! A world holds query features, a fixed candidate set per query, and a
//! hidden golden utility `u*` (a frozen two-layer scorer over the joint
//! query-response feature). Ground-truth preferences are Bradley-Terry in
//! `u*`; golden responses are drawn from a low-temperature softmax of `u*`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{self, fill_normal, logistic, softmax, Arch, ScorerParams};
use crate::rng::Rng;

/// Default hidden width of learnable reward models. The golden utility must
/// be strictly wider so the reward model can never represent it exactly.
pub const DEFAULT_RM_HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryId(pub usize);

/// Index of a response within its query's candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResponseId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Feature dimension of queries and responses.
    pub dim: usize,
    pub n_queries: usize,
    /// Candidates per query (K).
    pub n_candidates: usize,
    /// Hidden width of the golden utility (H*).
    pub golden_hidden: usize,
    pub feature_scale: f64,
    /// Output weight scale of the golden utility; sets how decisive
    /// ground-truth preferences are.
    pub utility_scale: f64,
    /// Temperature of the golden-response sampler.
    pub tau_gold: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            n_queries: 1000,
            n_candidates: 16,
            golden_hidden: 64,
            feature_scale: 1.0,
            utility_scale: 2.0,
            tau_gold: 0.5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.dim == 0 || self.n_queries == 0 {
            return bad("dim and n_queries must be positive");
        }
        if self.n_candidates < 2 {
            return bad("each query needs at least two candidates");
        }
        if self.golden_hidden <= DEFAULT_RM_HIDDEN {
            return bad("golden_hidden must exceed the default reward-model width");
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return bad("feature_scale must be positive");
        }
        if !(self.utility_scale > 0.0 && self.utility_scale.is_finite()) {
            return bad("utility_scale must be positive");
        }
        if !(self.tau_gold > 0.0 && self.tau_gold.is_finite()) {
            return bad("tau_gold must be positive");
        }
        Ok(())
    }

    /// Dimension of the joint (query, response) feature.
    pub fn joint_dim(&self) -> usize {
        3 * self.dim
    }
}

/// Annotated comparison: `winner` was preferred over `loser` for `query`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub query: QueryId,
    pub winner: ResponseId,
    pub loser: ResponseId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenExample {
    pub query: QueryId,
    pub golden_response: ResponseId,
}

/// Proportions of the query pool given to reward-model training, policy
/// training, and testing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub rm_train: f64,
    pub llm_train: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            rm_train: 0.2,
            llm_train: 0.66,
            test: 0.14,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSplit {
    pub rm_train_queries: Vec<QueryId>,
    pub llm_train_queries: Vec<QueryId>,
    pub dev_pairs: Vec<PreferencePair>,
    pub test_pairs: Vec<PreferencePair>,
    pub test_queries: Vec<QueryId>,
}

/// The immutable synthetic environment.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    seed: u64,
    queries: Vec<f64>,
    candidates: Vec<f64>,
    golden: ScorerParams,
    // Derived caches, rebuilt from the fields above.
    joint: Vec<f64>,
    utility: Vec<f64>,
}

impl PartialEq for World {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.seed == other.seed
            && bits_eq(&self.queries, &other.queries)
            && bits_eq(&self.candidates, &other.candidates)
            && bits_eq(self.golden.values(), other.golden.values())
            && self.golden.arch() == other.golden.arch()
    }
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Draws a world: features i.i.d. `N(0, feature_scale^2)`, golden first-layer
/// weights `N(0, 1/fan_in)`, hidden biases `N(0, 0.25)`, and output weights
/// `N(0, utility_scale^2 / H*)`.
pub fn gen_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let mut rng = crate::rng::stream(seed, crate::rng::Stream::World);
    let (n, k, d) = (config.n_queries, config.n_candidates, config.dim);

    let mut queries = vec![0.0; n * d];
    fill_normal(&mut queries, config.feature_scale, &mut rng);
    let mut candidates = vec![0.0; n * k * d];
    fill_normal(&mut candidates, config.feature_scale, &mut rng);

    let input = config.joint_dim();
    let hidden = config.golden_hidden;
    let mut golden = ScorerParams::zeros(Arch::Mlp2 { input, hidden });
    {
        let v = golden.values_mut();
        let w1_end = hidden * input;
        fill_normal(&mut v[..w1_end], 1.0 / (input as f64).sqrt(), &mut rng);
        fill_normal(&mut v[w1_end..w1_end + hidden], 0.5, &mut rng);
        fill_normal(
            &mut v[w1_end + hidden..w1_end + 2 * hidden],
            config.utility_scale / (hidden as f64).sqrt(),
            &mut rng,
        );
    }
    World::from_parts(config.clone(), seed, queries, candidates, golden)
}

impl World {
    /// Assembles a world from stored parts, validating shapes and rebuilding
    /// the feature and utility caches.
    pub fn from_parts(
        config: WorldConfig,
        seed: u64,
        queries: Vec<f64>,
        candidates: Vec<f64>,
        golden: ScorerParams,
    ) -> Result<World> {
        config.validate()?;
        let (n, k, d) = (config.n_queries, config.n_candidates, config.dim);
        if queries.len() != n * d {
            return Err(Error::DimensionMismatch {
                expected: n * d,
                got: queries.len(),
            });
        }
        if candidates.len() != n * k * d {
            return Err(Error::DimensionMismatch {
                expected: n * k * d,
                got: candidates.len(),
            });
        }
        if queries.iter().chain(&candidates).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("world features".into()));
        }
        if golden.arch().input_dim() != config.joint_dim() || !matches!(golden.arch(), Arch::Mlp2 { .. }) {
            return Err(Error::InvalidConfig("golden utility shape does not match world".into()));
        }

        let jd = 3 * d;
        let mut joint = vec![0.0; n * k * jd];
        for q in 0..n {
            let x = &queries[q * d..(q + 1) * d];
            for r in 0..k {
                let y = &candidates[(q * k + r) * d..(q * k + r + 1) * d];
                let out = &mut joint[(q * k + r) * jd..(q * k + r + 1) * jd];
                out[..d].copy_from_slice(x);
                out[d..2 * d].copy_from_slice(y);
                for i in 0..d {
                    out[2 * d + i] = x[i] * y[i];
                }
            }
        }
        let utility: Vec<f64> = joint.chunks_exact(jd).map(|z| numcore::forward(&golden, z)).collect();
        if utility.iter().any(|u| !u.is_finite()) {
            return Err(Error::NonFinite("golden utility".into()));
        }
        Ok(World {
            config,
            seed,
            queries,
            candidates,
            golden,
            joint,
            utility,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_queries(&self) -> usize {
        self.config.n_queries
    }

    pub fn n_candidates(&self) -> usize {
        self.config.n_candidates
    }

    pub fn joint_dim(&self) -> usize {
        self.config.joint_dim()
    }

    pub fn golden(&self) -> &ScorerParams {
        &self.golden
    }

    /// Flat query feature matrix, `n_queries x dim`.
    pub fn query_matrix(&self) -> &[f64] {
        &self.queries
    }

    /// Flat candidate feature matrix, `(n_queries * K) x dim`.
    pub fn candidate_matrix(&self) -> &[f64] {
        &self.candidates
    }

    pub fn all_queries(&self) -> impl Iterator<Item = QueryId> {
        (0..self.config.n_queries).map(QueryId)
    }

    pub fn check_query(&self, q: QueryId) -> Result<()> {
        if q.0 < self.config.n_queries {
            Ok(())
        } else {
            Err(Error::UnknownQuery(q.0))
        }
    }

    pub fn check_response(&self, q: QueryId, r: ResponseId) -> Result<()> {
        self.check_query(q)?;
        if r.0 < self.config.n_candidates {
            Ok(())
        } else {
            Err(Error::UnknownResponse {
                query: q.0,
                response: r.0,
            })
        }
    }

    pub fn check_pair(&self, pair: &PreferencePair) -> Result<()> {
        self.check_response(pair.query, pair.winner)?;
        self.check_response(pair.query, pair.loser)?;
        if pair.winner == pair.loser {
            return Err(Error::SameResponse(pair.winner.0));
        }
        Ok(())
    }

    pub fn query_features(&self, q: QueryId) -> &[f64] {
        let d = self.config.dim;
        &self.queries[q.0 * d..(q.0 + 1) * d]
    }

    pub fn response_features(&self, q: QueryId, r: ResponseId) -> &[f64] {
        let (k, d) = (self.config.n_candidates, self.config.dim);
        let row = q.0 * k + r.0;
        &self.candidates[row * d..(row + 1) * d]
    }

    /// Cached joint feature `[x, y, x*y]` of a (query, response) pair.
    pub fn joint_feature(&self, q: QueryId, r: ResponseId) -> &[f64] {
        let jd = self.joint_dim();
        let row = q.0 * self.config.n_candidates + r.0;
        &self.joint[row * jd..(row + 1) * jd]
    }

    /// Golden utility `u*(x, y)`.
    pub fn utility(&self, q: QueryId, r: ResponseId) -> f64 {
        self.utility[q.0 * self.config.n_candidates + r.0]
    }

    /// Golden utilities of every candidate of `q`.
    pub fn utilities(&self, q: QueryId) -> &[f64] {
        let k = self.config.n_candidates;
        &self.utility[q.0 * k..(q.0 + 1) * k]
    }

    /// Candidate with the highest golden utility.
    pub fn best_response(&self, q: QueryId) -> ResponseId {
        ResponseId(argmax(self.utilities(q)))
    }

    /// Candidate with the lowest golden utility.
    pub fn worst_response(&self, q: QueryId) -> ResponseId {
        let neg: Vec<f64> = self.utilities(q).iter().map(|u| -u).collect();
        ResponseId(argmax(&neg))
    }
}

/// Index of the first maximal entry.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Ground-truth probability that `y` is preferred over `y2` for query `x`.
pub fn true_pref_prob(world: &World, x: QueryId, y: ResponseId, y2: ResponseId) -> Result<f64> {
    world.check_response(x, y)?;
    world.check_response(x, y2)?;
    Ok(logistic(world.utility(x, y) - world.utility(x, y2)))
}

/// Simulated noisy annotation of the pair `(y, y2)`.
pub fn annotate_pair(world: &World, x: QueryId, y: ResponseId, y2: ResponseId, rng: &mut Rng) -> Result<PreferencePair> {
    if y == y2 {
        return Err(Error::SameResponse(y.0));
    }
    let p = true_pref_prob(world, x, y, y2)?;
    let (winner, loser) = if rng.random::<f64>() < p { (y, y2) } else { (y2, y) };
    Ok(PreferencePair {
        query: x,
        winner,
        loser,
    })
}

/// Law of the golden-response sampler for `x`: `softmax(u*(x, .) / tau_gold)`.
pub fn golden_distribution(world: &World, x: QueryId) -> Result<Vec<f64>> {
    world.check_query(x)?;
    let tau = world.config.tau_gold;
    let logits: Vec<f64> = world.utilities(x).iter().map(|u| u / tau).collect();
    Ok(softmax(&logits))
}

pub fn golden_response(world: &World, x: QueryId, rng: &mut Rng) -> Result<GoldenExample> {
    let probs = golden_distribution(world, x)?;
    Ok(GoldenExample {
        query: x,
        golden_response: ResponseId(numcore::sample_categorical(&probs, rng)),
    })
}

/// Partition sizes for `n` queries: the first two parts are rounded, the
/// test part takes the remainder.
pub fn split_sizes(n: usize, ratios: &SplitRatios) -> Result<(usize, usize, usize)> {
    let parts = [ratios.rm_train, ratios.llm_train, ratios.test];
    if parts.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
        return Err(Error::InvalidConfig("split ratios must be non-negative".into()));
    }
    if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig("split ratios must sum to 1".into()));
    }
    let rm = (ratios.rm_train * n as f64).round() as usize;
    let llm = (ratios.llm_train * n as f64).round() as usize;
    if rm + llm > n {
        return Err(Error::InvalidConfig("split ratios overflow the query pool".into()));
    }
    Ok((rm, llm, n - rm - llm))
}

/// Seeded disjoint partition of the world's queries plus annotated dev pairs
/// (from policy-training queries) and test pairs (from test queries).
pub fn make_split(
    world: &World,
    ratios: &SplitRatios,
    n_dev_pairs: usize,
    n_test_pairs: usize,
    seed: u64,
) -> Result<DataSplit> {
    let (n_rm, n_llm, n_test) = split_sizes(world.n_queries(), ratios)?;
    if n_rm == 0 || n_llm == 0 || n_test == 0 {
        return Err(Error::InvalidConfig(format!(
            "split {n_rm}/{n_llm}/{n_test} leaves a partition empty"
        )));
    }
    let mut rng = crate::rng::stream(seed, crate::rng::Stream::Split);
    let mut order: Vec<QueryId> = world.all_queries().collect();
    order.shuffle(&mut rng);

    let mut rm_train_queries = order[..n_rm].to_vec();
    let mut llm_train_queries = order[n_rm..n_rm + n_llm].to_vec();
    let mut test_queries = order[n_rm + n_llm..].to_vec();
    rm_train_queries.sort();
    llm_train_queries.sort();
    test_queries.sort();

    let dev_pairs = build_pref_dataset(world, &llm_train_queries, n_dev_pairs, &mut rng)?;
    let test_pairs = build_pref_dataset(world, &test_queries, n_test_pairs, &mut rng)?;
    Ok(DataSplit {
        rm_train_queries,
        llm_train_queries,
        dev_pairs,
        test_pairs,
        test_queries,
    })
}

/// `n_pairs` annotated comparisons: uniform query, two distinct uniform
/// candidates, then a noisy oracle label.
pub fn build_pref_dataset(world: &World, queries: &[QueryId], n_pairs: usize, rng: &mut Rng) -> Result<Vec<PreferencePair>> {
    if n_pairs == 0 {
        return Ok(Vec::new());
    }
    if queries.is_empty() {
        return Err(Error::Empty("query set for preference pairs"));
    }
    let k = world.n_candidates();
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let q = queries[rng.random_range(0..queries.len())];
        let a = rng.random_range(0..k);
        let mut b = rng.random_range(0..k - 1);
        if b >= a {
            b += 1;
        }
        pairs.push(annotate_pair(world, q, ResponseId(a), ResponseId(b), rng)?);
    }
    Ok(pairs)
}

impl DataSplit {
    pub fn validate(&self, world: &World) -> Result<()> {
        use std::collections::HashSet;
        let rm: HashSet<_> = self.rm_train_queries.iter().collect();
        let llm: HashSet<_> = self.llm_train_queries.iter().collect();
        let test: HashSet<_> = self.test_queries.iter().collect();
        if rm.iter().any(|q| llm.contains(q) || test.contains(q)) || llm.iter().any(|q| test.contains(q)) {
            return Err(Error::InvalidConfig("split partitions overlap".into()));
        }
        for p in &self.dev_pairs {
            world.check_pair(p)?;
            if !llm.contains(&p.query) {
                return Err(Error::InvalidConfig("dev pair outside policy-training queries".into()));
            }
        }
        for p in &self.test_pairs {
            world.check_pair(p)?;
            if !test.contains(&p.query) {
                return Err(Error::InvalidConfig("test pair outside test queries".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small_config() -> WorldConfig {
        WorldConfig {
            dim: 4,
            n_queries: 50,
            n_candidates: 5,
            golden_hidden: 20,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = gen_world(&small_config(), 1).unwrap();
        let b = gen_world(&small_config(), 1).unwrap();
        let c = gen_world(&small_config(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn candidate_count_follows_config() {
        let cfg = WorldConfig {
            n_queries: 200,
            ..WorldConfig::default()
        };
        let w = gen_world(&cfg, 3).unwrap();
        assert_eq!(w.candidate_matrix().len() / cfg.dim, 3200);
    }

    #[test]
    fn invalid_sizes_are_rejected() {
        for cfg in [
            WorldConfig { dim: 0, ..small_config() },
            WorldConfig { n_queries: 0, ..small_config() },
            WorldConfig { n_candidates: 1, ..small_config() },
            WorldConfig { golden_hidden: 16, ..small_config() },
            WorldConfig { tau_gold: 0.0, ..small_config() },
        ] {
            assert!(matches!(gen_world(&cfg, 1), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn preference_probability_complements() {
        let w = gen_world(&small_config(), 4).unwrap();
        let q = QueryId(3);
        for a in 0..5 {
            assert_eq!(true_pref_prob(&w, q, ResponseId(a), ResponseId(a)).unwrap(), 0.5);
            for b in 0..5 {
                let p = true_pref_prob(&w, q, ResponseId(a), ResponseId(b)).unwrap();
                let r = true_pref_prob(&w, q, ResponseId(b), ResponseId(a)).unwrap();
                assert!((p + r - 1.0).abs() < 1e-15);
            }
        }
        assert!(true_pref_prob(&w, QueryId(50), ResponseId(0), ResponseId(1)).is_err());
        assert!(true_pref_prob(&w, q, ResponseId(5), ResponseId(1)).is_err());
    }

    #[test]
    fn annotate_rejects_identical_responses() {
        let w = gen_world(&small_config(), 4).unwrap();
        let err = annotate_pair(&w, QueryId(0), ResponseId(1), ResponseId(1), &mut seeded(0));
        assert!(matches!(err, Err(Error::SameResponse(1))));
    }

    #[test]
    fn split_sizes_follow_ratios() {
        assert_eq!(split_sizes(1000, &SplitRatios::default()).unwrap(), (200, 660, 140));
        let bad = SplitRatios {
            rm_train: 0.5,
            llm_train: 0.6,
            test: 0.1,
        };
        assert!(split_sizes(1000, &bad).is_err());
    }

    #[test]
    fn split_is_disjoint_and_reproducible() {
        let w = gen_world(&WorldConfig::default(), 9).unwrap();
        let s = make_split(&w, &SplitRatios::default(), 300, 200, 5).unwrap();
        assert_eq!(s.rm_train_queries.len(), 200);
        assert_eq!(s.llm_train_queries.len(), 660);
        assert_eq!(s.test_queries.len(), 140);
        assert_eq!(s.dev_pairs.len(), 300);
        s.validate(&w).unwrap();
        assert_eq!(s, make_split(&w, &SplitRatios::default(), 300, 200, 5).unwrap());
    }

    #[test]
    fn infeasible_split_is_rejected() {
        let w = gen_world(&small_config(), 1).unwrap();
        let ratios = SplitRatios {
            rm_train: 0.5,
            llm_train: 0.5,
            test: 0.0,
        };
        assert!(make_split(&w, &ratios, 10, 10, 1).is_err());
        assert!(build_pref_dataset(&w, &[], 5, &mut seeded(1)).is_err());
        assert!(build_pref_dataset(&w, &[], 0, &mut seeded(1)).unwrap().is_empty());
    }

    #[test]
    fn tiny_temperature_golden_is_argmax() {
        let cfg = WorldConfig {
            tau_gold: 1e-9,
            ..small_config()
        };
        let w = gen_world(&cfg, 2).unwrap();
        let mut rng = seeded(8);
        for q in w.all_queries() {
            for _ in 0..20 {
                let g = golden_response(&w, q, &mut rng).unwrap();
                assert_eq!(g.golden_response, w.best_response(q));
            }
        }
    }
}
