//! Cache placement as a Markov decision process.
//!
//! A state is a full placement. Actions nudge one slot's content index up or
//! down by one (modulo the library size) or leave the placement unchanged,
//! giving `2 * S * M + 1` actions per state. The environment responds with
//! the learning-automaton convention: `Reward` (0) when sum MOS does not
//! drop, `Penalty` (1) otherwise.
//!
//! Two learners share the loop: LAQL, where each visited state owns a
//! [`PursuitAutomaton`] that picks its actions, and a plain epsilon-greedy
//! Q-learner used as a baseline.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::automata::{PursuitAutomaton, Response};
use crate::error::{Error, Result};
use crate::netmodel::{
    CachePlacement, ChannelModel, Evaluation, FadingRealization, NetworkScenario, Popularity, QoeParams,
};

const DIGITS: &[u8; 36] = b"0123456789abcdefghijklmnopqrstuvwxyz";

/// Shape of the placement space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub num_bs: usize,
    pub slots: usize,
    pub num_contents: usize,
}

impl Dims {
    pub fn of(scenario: &NetworkScenario) -> Self {
        Dims {
            num_bs: scenario.num_bs(),
            slots: scenario.cache_slots(),
            num_contents: scenario.num_contents(),
        }
    }

    pub fn total_slots(&self) -> usize {
        self.num_bs * self.slots
    }

    pub fn num_actions(&self) -> usize {
        2 * self.total_slots() + 1
    }

    pub fn noop(&self) -> ActionId {
        ActionId(2 * self.total_slots())
    }

    /// `F^(S*M)` when it fits in a `u128`.
    pub fn state_count(&self) -> Option<u128> {
        (self.num_contents as u128).checked_pow(u32::try_from(self.total_slots()).ok()?)
    }

    pub fn random_placement<R: Rng + ?Sized>(&self, rng: &mut R) -> CachePlacement {
        let entries =
            (0..self.total_slots()).map(|_| rng.random_range(0..self.num_contents)).collect();
        CachePlacement::from_flat(self.num_bs, self.slots, self.num_contents, entries)
            .expect("random entries are in range")
    }
}

/// Canonical state encoding: the row-major slot contents read as base-`F`
/// digits, most significant first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey {
    base: u32,
    digits: Box<[u32]>,
}

impl StateKey {
    pub fn digits(&self) -> &[u32] {
        &self.digits
    }

    /// Parses the textual form produced by `Display`.
    pub fn parse(text: &str, dims: Dims) -> Result<Self> {
        let base = dims.num_contents as u32;
        let digits: Vec<u32> = if dims.num_contents <= DIGITS.len() {
            text.chars()
                .map(|c| {
                    c.to_digit(36)
                        .filter(|&d| d < base)
                        .ok_or_else(|| Error::MalformedKey(format!("bad digit {c:?} in {text:?}")))
                })
                .collect::<Result<_>>()?
        } else {
            text.split('.')
                .map(|t| {
                    t.parse::<u32>()
                        .ok()
                        .filter(|&d| d < base)
                        .ok_or_else(|| Error::MalformedKey(format!("bad digit {t:?} in {text:?}")))
                })
                .collect::<Result<_>>()?
        };
        if digits.len() != dims.total_slots() {
            return Err(Error::MalformedKey(format!(
                "{text:?} has {} digits, expected {}",
                digits.len(),
                dims.total_slots()
            )));
        }
        Ok(StateKey { base, digits: digits.into() })
    }

    /// Numeric value of the key, when it fits.
    pub fn index(&self) -> Option<u128> {
        self.digits.iter().try_fold(0u128, |acc, &d| {
            acc.checked_mul(self.base as u128)?.checked_add(d as u128)
        })
    }

    pub fn from_index(index: u128, dims: Dims) -> Result<Self> {
        let base = dims.num_contents as u128;
        let mut digits = vec![0u32; dims.total_slots()];
        let mut rest = index;
        for d in digits.iter_mut().rev() {
            *d = (rest % base) as u32;
            rest /= base;
        }
        if rest != 0 {
            return Err(Error::MalformedKey(format!("index {index} exceeds the state space")));
        }
        Ok(StateKey { base: dims.num_contents as u32, digits: digits.into() })
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.base as usize <= DIGITS.len() {
            for &d in self.digits.iter() {
                write!(f, "{}", DIGITS[d as usize] as char)?;
            }
        } else {
            for (k, d) in self.digits.iter().enumerate() {
                if k > 0 {
                    f.write_str(".")?;
                }
                write!(f, "{d}")?;
            }
        }
        Ok(())
    }
}

pub fn encode_state(placement: &CachePlacement) -> StateKey {
    StateKey {
        base: placement.num_contents() as u32,
        digits: placement.as_slice().iter().map(|&c| c as u32).collect(),
    }
}

pub fn decode_state(key: &StateKey, dims: Dims) -> Result<CachePlacement> {
    if key.base as usize != dims.num_contents || key.digits.len() != dims.total_slots() {
        return Err(Error::MalformedKey(format!(
            "key {key} does not match {}x{} over {} contents",
            dims.num_bs, dims.slots, dims.num_contents
        )));
    }
    CachePlacement::from_flat(
        dims.num_bs,
        dims.slots,
        dims.num_contents,
        key.digits.iter().map(|&d| d as usize).collect(),
    )
}

/// Action index: `2k` increments slot `k`, `2k + 1` decrements it, and
/// `2 * S * M` is the no-op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActionId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionKind {
    Increment(usize),
    Decrement(usize),
    Noop,
}

impl ActionId {
    pub fn kind(self, dims: Dims) -> Result<ActionKind> {
        let n = dims.total_slots();
        match self.0 {
            i if i < 2 * n && i % 2 == 0 => Ok(ActionKind::Increment(i / 2)),
            i if i < 2 * n => Ok(ActionKind::Decrement(i / 2)),
            i if i == 2 * n => Ok(ActionKind::Noop),
            i => Err(Error::InvalidAction { index: i, count: dims.num_actions() }),
        }
    }
}

pub fn apply_action(placement: &CachePlacement, action: ActionId) -> Result<CachePlacement> {
    let dims = Dims {
        num_bs: placement.num_bs(),
        slots: placement.slots(),
        num_contents: placement.num_contents(),
    };
    let f = dims.num_contents;
    let mut next = placement.clone();
    match action.kind(dims)? {
        ActionKind::Increment(k) => {
            let c = next.slot_mut(k);
            *c = (*c + 1) % f;
        }
        ActionKind::Decrement(k) => {
            let c = next.slot_mut(k);
            *c = (*c + f - 1) % f;
        }
        ActionKind::Noop => {}
    }
    Ok(next)
}

/// Environment response for the move `prev -> next`. Infeasible successors
/// are penalized when `infeasible_penalty` is set.
pub fn reward(mos_prev: f64, mos_next: f64, feasible_next: bool, infeasible_penalty: bool) -> Response {
    if infeasible_penalty && !feasible_next {
        return Response::Penalty;
    }
    if mos_next >= mos_prev {
        Response::Reward
    } else {
        Response::Penalty
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Bellman target uses the success indicator `1 - r`.
    Binary,
    /// Bellman target uses the MOS difference.
    Shaped,
}

/// Scalar reward fed to the Bellman update.
pub fn q_reward(response: Response, mos_prev: f64, mos_next: f64, mode: RewardMode) -> f64 {
    match mode {
        RewardMode::Binary => 1.0 - response.bit() as f64,
        RewardMode::Shaped => mos_next - mos_prev,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub learning_rate: f64,
    pub discount: f64,
    /// Exploration rate of the epsilon-greedy baseline.
    pub epsilon: f64,
    pub kappa: u32,
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// An episode ends once the state has stayed unchanged for this many
    /// consecutive steps. `None` always runs the full episode.
    pub stability_window: Option<usize>,
    pub infeasible_penalty: bool,
    pub reward_mode: RewardMode,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            learning_rate: 0.75,
            discount: 0.6,
            epsilon: 0.1,
            kappa: 10,
            episodes: 20,
            steps_per_episode: 500,
            stability_window: Some(500),
            infeasible_penalty: true,
            reward_mode: RewardMode::Binary,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return Err(Error::invalid("agent.learning_rate must lie in (0, 1)"));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::invalid("agent.discount must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::invalid("agent.epsilon must lie in [0, 1]"));
        }
        if self.kappa == 0 {
            return Err(Error::invalid("agent.kappa must be >= 1"));
        }
        if self.stability_window == Some(0) {
            return Err(Error::invalid("agent.stability_window must be >= 1 when set"));
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        self.episodes * self.steps_per_episode
    }
}

/// Sparse action-value table; unvisited entries read as zero.
#[derive(Debug, Clone, Default)]
pub struct QTable {
    n_actions: usize,
    values: HashMap<StateKey, Vec<f64>>,
}

impl QTable {
    pub fn new(n_actions: usize) -> Self {
        QTable { n_actions, values: HashMap::new() }
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, s: &StateKey, a: ActionId) -> f64 {
        self.values.get(s).map_or(0.0, |row| row[a.0])
    }

    pub fn row(&self, s: &StateKey) -> Option<&[f64]> {
        self.values.get(s).map(Vec::as_slice)
    }

    pub fn max_value(&self, s: &StateKey) -> f64 {
        self.values
            .get(s)
            .map_or(0.0, |row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
    }

    /// Greedy action, lowest index on ties.
    pub fn argmax(&self, s: &StateKey) -> ActionId {
        let Some(row) = self.values.get(s) else {
            return ActionId(0);
        };
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        ActionId(best)
    }

    pub fn set(&mut self, s: &StateKey, a: ActionId, value: f64) {
        let n = self.n_actions;
        self.values.entry(s.clone()).or_insert_with(|| vec![0.0; n])[a.0] = value;
    }

    /// `Q(s,a) <- (1 - alpha) Q(s,a) + alpha (r + gamma max_a' Q(s',a'))`.
    pub fn update(
        &mut self,
        s: &StateKey,
        a: ActionId,
        r: f64,
        s_next: &StateKey,
        alpha: f64,
        gamma: f64,
    ) -> f64 {
        let target = r + gamma * self.max_value(s_next);
        let old = self.get(s, a);
        let new = (1.0 - alpha) * old + alpha * target;
        self.set(s, a, new);
        new
    }

    pub fn values(&self) -> impl Iterator<Item = (&StateKey, &[f64])> {
        self.values.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Flat text dump: one `key v0 v1 ...` line per visited state, sorted.
    pub fn to_text(&self) -> String {
        let mut keys: Vec<&StateKey> = self.values.keys().collect();
        keys.sort();
        let mut out = format!("{}\n", self.n_actions);
        for k in keys {
            out.push_str(&k.to_string());
            for v in &self.values[k] {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Fixed scenario, fading and popularity for one placement problem.
#[derive(Debug, Clone)]
pub struct CachingEnv {
    dims: Dims,
    channel: ChannelModel,
    popularity: Popularity,
    qoe: QoeParams,
}

impl CachingEnv {
    pub fn new(
        scenario: &NetworkScenario,
        fading: &FadingRealization,
        popularity: impl Into<Popularity>,
        qoe: QoeParams,
    ) -> Result<Self> {
        let popularity = popularity.into();
        qoe.validate()?;
        let channel = ChannelModel::new(scenario, fading)?;
        channel.check_popularity(&popularity)?;
        Ok(CachingEnv { dims: Dims::of(scenario), channel, popularity, qoe })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn popularity(&self) -> &Popularity {
        &self.popularity
    }

    pub fn qoe(&self) -> &QoeParams {
        &self.qoe
    }

    pub fn channel(&self) -> &ChannelModel {
        &self.channel
    }

    pub fn evaluate(&self, placement: &CachePlacement) -> Result<Evaluation> {
        self.channel.evaluate(placement, &self.popularity, &self.qoe)
    }

    pub fn sum_mos(&self, placement: &CachePlacement) -> Result<f64> {
        Ok(self.evaluate(placement)?.sum_mos)
    }
}

/// Memoizes placement evaluations within one run.
struct Scorer<'a> {
    env: &'a CachingEnv,
    cache: HashMap<StateKey, Evaluation>,
}

impl<'a> Scorer<'a> {
    fn new(env: &'a CachingEnv) -> Self {
        Scorer { env, cache: HashMap::new() }
    }

    fn score(&mut self, key: &StateKey, placement: &CachePlacement) -> Result<Evaluation> {
        if let Some(e) = self.cache.get(key) {
            return Ok(*e);
        }
        let e = self.env.evaluate(placement)?;
        self.cache.insert(key.clone(), e);
        Ok(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    Laql,
    EpsGreedy,
}

impl fmt::Display for Learner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Learner::Laql => "laql",
            Learner::EpsGreedy => "eps_greedy_q",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpsCounter {
    pub iterations: usize,
    pub q_updates: usize,
    pub la_updates: usize,
    /// Distinct placements scored.
    pub evaluations: usize,
    pub episodes_run: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    /// Success indicator of the step: 1 when MOS did not drop (and the
    /// successor was feasible under the penalty rule).
    pub reward: f64,
    pub best_sum_mos: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub learner: Learner,
    pub q_table: QTable,
    /// Per-state automata (LAQL only).
    pub automata: BTreeMap<StateKey, PursuitAutomaton>,
    pub best_placement: CachePlacement,
    pub best_sum_mos: f64,
    pub best_feasible: bool,
    pub reward_curve: Vec<CurvePoint>,
    pub ops: OpsCounter,
}

pub fn train_laql(env: &CachingEnv, config: &AgentConfig, seed: u64) -> Result<TrainOutcome> {
    train(env, config, seed, Learner::Laql)
}

pub fn train_qlearning(env: &CachingEnv, config: &AgentConfig, seed: u64) -> Result<TrainOutcome> {
    train(env, config, seed, Learner::EpsGreedy)
}

/// Tracks the best placement seen, preferring feasible ones when the
/// infeasibility penalty is active.
struct Incumbent {
    placement: CachePlacement,
    eval: Evaluation,
    prefer_feasible: bool,
}

impl Incumbent {
    fn offer(&mut self, placement: &CachePlacement, eval: Evaluation) {
        let better = if self.prefer_feasible && eval.feasible != self.eval.feasible {
            eval.feasible
        } else {
            eval.sum_mos > self.eval.sum_mos
        };
        if better {
            self.placement = placement.clone();
            self.eval = eval;
        }
    }
}

fn train(env: &CachingEnv, config: &AgentConfig, seed: u64, learner: Learner) -> Result<TrainOutcome> {
    config.validate()?;
    let dims = env.dims();
    let n_actions = dims.num_actions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scorer = Scorer::new(env);
    let mut q = QTable::new(n_actions);
    let mut automata: BTreeMap<StateKey, PursuitAutomaton> = BTreeMap::new();
    let mut ops = OpsCounter::default();
    let mut curve = Vec::with_capacity(config.iterations());

    let first = dims.random_placement(&mut rng);
    let first_key = encode_state(&first);
    let first_eval = scorer.score(&first_key, &first)?;
    let mut best = Incumbent {
        placement: first.clone(),
        eval: first_eval,
        prefer_feasible: config.infeasible_penalty,
    };
    let mut start = Some((first, first_key, first_eval));

    for _ in 0..config.episodes {
        let (mut state, mut key, mut eval) = match start.take() {
            Some(s) => s,
            None => {
                let p = dims.random_placement(&mut rng);
                let k = encode_state(&p);
                let e = scorer.score(&k, &p)?;
                best.offer(&p, e);
                (p, k, e)
            }
        };
        ops.episodes_run += 1;
        let mut unchanged = 0usize;
        for _ in 0..config.steps_per_episode {
            let action = match learner {
                Learner::Laql => {
                    if !automata.contains_key(&key) {
                        automata.insert(key.clone(), PursuitAutomaton::new(n_actions, config.kappa)?);
                    }
                    ActionId(automata[&key].select(&mut rng))
                }
                Learner::EpsGreedy => {
                    if rng.random::<f64>() < config.epsilon {
                        ActionId(rng.random_range(0..n_actions))
                    } else {
                        q.argmax(&key)
                    }
                }
            };
            let next = apply_action(&state, action)?;
            let next_key = encode_state(&next);
            let next_eval = scorer.score(&next_key, &next)?;
            let response =
                reward(eval.sum_mos, next_eval.sum_mos, next_eval.feasible, config.infeasible_penalty);
            if learner == Learner::Laql {
                automata
                    .get_mut(&key)
                    .expect("automaton created on selection")
                    .update(action.0, response)?;
                ops.la_updates += 1;
            }
            let r_q = q_reward(response, eval.sum_mos, next_eval.sum_mos, config.reward_mode);
            q.update(&key, action, r_q, &next_key, config.learning_rate, config.discount);
            ops.q_updates += 1;
            ops.iterations += 1;
            best.offer(&next, next_eval);
            curve.push(CurvePoint {
                iteration: ops.iterations,
                reward: 1.0 - response.bit() as f64,
                best_sum_mos: best.eval.sum_mos,
            });

            unchanged = if next_key == key { unchanged + 1 } else { 0 };
            state = next;
            key = next_key;
            eval = next_eval;
            if config.stability_window.is_some_and(|w| unchanged >= w) {
                break;
            }
        }
    }
    ops.evaluations = scorer.cache.len();

    Ok(TrainOutcome {
        learner,
        q_table: q,
        automata,
        best_placement: best.placement,
        best_sum_mos: best.eval.sum_mos,
        best_feasible: best.eval.feasible,
        reward_curve: curve,
        ops,
    })
}

#[derive(Debug, Clone)]
pub struct TestOutcome {
    pub initial: CachePlacement,
    pub best_placement: CachePlacement,
    pub best_sum_mos: f64,
    /// Sum MOS of every state visited, starting with the initial one.
    pub mos_trace: Vec<f64>,
}

/// Runs the trained policy from a random initial placement and returns the
/// best placement encountered. The trained automata are not modified.
pub fn test_stage(
    trained: &TrainOutcome,
    env: &CachingEnv,
    iterations: usize,
    seed: u64,
) -> Result<TestOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = env.dims().random_placement(&mut rng);
    test_stage_from(trained, env, start, iterations, &mut rng)
}

pub fn test_stage_from<R: Rng + ?Sized>(
    trained: &TrainOutcome,
    env: &CachingEnv,
    start: CachePlacement,
    iterations: usize,
    rng: &mut R,
) -> Result<TestOutcome> {
    let n_actions = env.dims().num_actions();
    let mut state = start.clone();
    let mut mos = env.sum_mos(&state)?;
    let mut best = (state.clone(), mos);
    let mut trace = vec![mos];
    for _ in 0..iterations {
        let key = encode_state(&state);
        let action = match trained.learner {
            Learner::Laql => match trained.automata.get(&key) {
                Some(la) => ActionId(la.select(rng)),
                None => ActionId(rng.random_range(0..n_actions)),
            },
            Learner::EpsGreedy => trained.q_table.argmax(&key),
        };
        state = apply_action(&state, action)?;
        mos = env.sum_mos(&state)?;
        trace.push(mos);
        if mos > best.1 {
            best = (state.clone(), mos);
        }
    }
    Ok(TestOutcome { initial: start, best_placement: best.0, best_sum_mos: best.1, mos_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{Point, ScenarioParams};
    use proptest::prelude::*;

    fn dims(m: usize, s: usize, f: usize) -> Dims {
        Dims { num_bs: m, slots: s, num_contents: f }
    }

    fn tiny_env(f: usize) -> CachingEnv {
        if f >= 4 {
            env_with(f, 2, 2)
        } else {
            env_with(f, 1, 1)
        }
    }

    fn env_with(f: usize, m: usize, s: usize) -> CachingEnv {
        let users = (0..10)
            .map(|k| Point::new(200.0 + 370.0 * k as f64, 400.0 + 330.0 * ((k * 7) % 10) as f64))
            .collect();
        let sc = NetworkScenario::new(ScenarioParams {
            bs_positions: [Point::new(1000.0, 2000.0), Point::new(3000.0, 2000.0)][..m].to_vec(),
            user_positions: users,
            tx_power_w: 0.1,
            pathloss_exp: 3.0,
            noise_w: 10f64.powf(-12.5),
            bandwidth_hz: 20.0e6,
            cache_slots: s,
            fronthaul_max_bps: f64::INFINITY,
            min_rate_bps: 0.0,
            num_contents: f,
        })
        .unwrap();
        let w: Vec<f64> = (1..=f).map(|k| (k as f64).powf(-0.8)).collect();
        let total: f64 = w.iter().sum();
        let pop: Vec<f64> = w.iter().map(|x| x / total).collect();
        CachingEnv::new(&sc, &FadingRealization::unit(m, 10), pop, QoeParams::default()).unwrap()
    }

    #[test]
    fn all_first_content_encodes_to_zeros() {
        let x = CachePlacement::new(vec![vec![0, 0], vec![0, 0]], 4).unwrap();
        let k = encode_state(&x);
        assert_eq!(k.to_string(), "0000");
        assert_eq!(k.index(), Some(0));
        assert_eq!(StateKey::parse("0000", dims(2, 2, 4)).unwrap(), k);
    }

    #[test]
    fn malformed_keys() {
        let d = dims(2, 2, 4);
        assert!(StateKey::parse("000", d).is_err());
        assert!(StateKey::parse("0004", d).is_err());
        assert!(StateKey::parse("00x0", d).is_err());
        let k = encode_state(&CachePlacement::new(vec![vec![1, 2]], 4).unwrap());
        assert!(decode_state(&k, d).is_err());
    }

    #[test]
    fn wide_library_keys_use_separators() {
        let d = dims(1, 3, 40);
        let x = CachePlacement::new(vec![vec![39, 0, 12]], 40).unwrap();
        let k = encode_state(&x);
        assert_eq!(k.to_string(), "39.0.12");
        assert_eq!(decode_state(&StateKey::parse("39.0.12", d).unwrap(), d).unwrap(), x);
    }

    #[test]
    fn state_space_size() {
        assert_eq!(dims(10, 4, 10).state_count(), None, "10^40 exceeds u128");
        assert_eq!(dims(10, 3, 10).state_count(), Some(10u128.pow(30)));
        assert_eq!(dims(2, 2, 4).state_count(), Some(256));
    }

    #[test]
    fn random_round_trip() {
        let d = dims(3, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x = d.random_placement(&mut rng);
            let k = encode_state(&x);
            assert_eq!(decode_state(&k, d).unwrap(), x);
            assert_eq!(StateKey::from_index(k.index().unwrap(), d).unwrap(), k);
            assert_eq!(StateKey::parse(&k.to_string(), d).unwrap(), k);
        }
    }

    #[test]
    fn action_semantics() {
        let x = CachePlacement::new(vec![vec![3, 1], vec![0, 2]], 4).unwrap();
        let d = dims(2, 2, 4);
        assert_eq!(d.num_actions(), 9);
        assert_eq!(apply_action(&x, d.noop()).unwrap(), x);
        // Slot 0 holds the last content; +1 wraps to the first.
        assert_eq!(apply_action(&x, ActionId(0)).unwrap().get(0, 0), 0);
        assert_eq!(apply_action(&x, ActionId(5)).unwrap().get(1, 0), 3);
        let there = apply_action(&x, ActionId(6)).unwrap();
        assert_eq!(apply_action(&there, ActionId(7)).unwrap(), x);
        assert!(apply_action(&x, ActionId(9)).is_err());
    }

    #[test]
    fn reward_polarity() {
        assert_eq!(reward(3.0, 3.0, true, true), Response::Reward);
        assert_eq!(reward(3.0, 2.9, true, true), Response::Penalty);
        assert_eq!(reward(3.0, 3.5, false, true), Response::Penalty);
        assert_eq!(reward(3.0, 3.5, false, false), Response::Reward);
    }

    #[test]
    fn q_update_examples() {
        let d = dims(1, 1, 2);
        let s = encode_state(&CachePlacement::new(vec![vec![0]], 2).unwrap());
        let s2 = encode_state(&CachePlacement::new(vec![vec![1]], 2).unwrap());
        let mut q = QTable::new(d.num_actions());
        assert_eq!(q.update(&s, ActionId(0), 1.0, &s2, 0.75, 0.6), 0.75);

        // Fixed point: Q(s,a) = r + gamma max Q(s').
        let mut q = QTable::new(d.num_actions());
        q.set(&s2, ActionId(1), 2.0);
        q.set(&s, ActionId(2), 1.0 + 0.6 * 2.0);
        let before = q.get(&s, ActionId(2));
        assert_eq!(q.update(&s, ActionId(2), 1.0, &s2, 0.75, 0.6), before);
    }

    #[test]
    fn repeated_self_transition_reaches_geometric_limit() {
        // Oracle: Q = sum_k gamma^k = 1 / (1 - gamma).
        let s = encode_state(&CachePlacement::new(vec![vec![0]], 2).unwrap());
        let mut q = QTable::new(3);
        for _ in 0..200 {
            q.update(&s, ActionId(2), 1.0, &s, 0.75, 0.6);
        }
        assert!((q.get(&s, ActionId(2)) - 2.5).abs() < 1e-6);
    }

    #[test]
    fn q_reward_modes() {
        assert_eq!(q_reward(Response::Reward, 1.0, 2.0, RewardMode::Binary), 1.0);
        assert_eq!(q_reward(Response::Penalty, 1.0, 2.0, RewardMode::Binary), 0.0);
        assert_eq!(q_reward(Response::Penalty, 2.0, 1.5, RewardMode::Shaped), -0.5);
    }

    #[test]
    fn single_content_library_is_degenerate() {
        let env = tiny_env(1);
        let cfg = AgentConfig { episodes: 2, steps_per_episode: 50, ..Default::default() };
        let out = train_laql(&env, &cfg, 3).unwrap();
        assert_eq!(out.best_placement.as_slice(), &[0]);
        assert_eq!(out.q_table.len(), 1);
    }

    #[test]
    fn exact_update_accounting_without_early_stop() {
        let env = tiny_env(4);
        let cfg = AgentConfig {
            episodes: 3,
            steps_per_episode: 700,
            stability_window: None,
            ..Default::default()
        };
        for out in [train_laql(&env, &cfg, 9).unwrap(), train_qlearning(&env, &cfg, 9).unwrap()] {
            assert_eq!(out.ops.q_updates, 3 * 700);
            assert_eq!(out.reward_curve.len(), 3 * 700);
        }
    }

    #[test]
    fn training_invariants() {
        let env = tiny_env(4);
        let cfg = AgentConfig { stability_window: None, ..Default::default() };
        let out = train_laql(&env, &cfg, 21).unwrap();
        assert_eq!(out.best_sum_mos, env.sum_mos(&out.best_placement).unwrap());
        for w in out.reward_curve.windows(2) {
            assert!(w[1].best_sum_mos >= w[0].best_sum_mos);
        }
        let bound = 1.0 / (1.0 - cfg.discount);
        for (_, row) in out.q_table.values() {
            assert!(row.iter().all(|&v| (0.0..=bound).contains(&v)));
        }
        for la in out.automata.values() {
            assert_eq!(la.n_actions(), env.dims().num_actions());
            assert!((la.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_q_from_zero_table_takes_first_action() {
        let env = tiny_env(4);
        let q = QTable::new(env.dims().num_actions());
        let x = env.dims().random_placement(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(q.argmax(&encode_state(&x)), ActionId(0));
    }

    #[test]
    fn training_is_deterministic() {
        let env = tiny_env(4);
        let cfg = AgentConfig { episodes: 2, steps_per_episode: 300, ..Default::default() };
        let a = train_qlearning(&env, &cfg, 5).unwrap();
        let b = train_qlearning(&env, &cfg, 5).unwrap();
        assert_eq!(a.reward_curve, b.reward_curve);
        assert_eq!(a.best_placement, b.best_placement);
        let a = train_laql(&env, &cfg, 5).unwrap();
        let b = train_laql(&env, &cfg, 5).unwrap();
        assert_eq!(a.reward_curve, b.reward_curve);
    }

    #[test]
    fn test_stage_basics() {
        let env = tiny_env(4);
        let cfg = AgentConfig { episodes: 2, steps_per_episode: 300, ..Default::default() };
        let trained = train_laql(&env, &cfg, 2).unwrap();
        let zero = test_stage(&trained, &env, 0, 17).unwrap();
        let expect = env.dims().random_placement(&mut ChaCha8Rng::seed_from_u64(17));
        assert_eq!(zero.best_placement, expect);
        assert_eq!(zero.initial, expect);
        let a = test_stage(&trained, &env, 200, 4).unwrap();
        let b = test_stage(&trained, &env, 200, 4).unwrap();
        assert_eq!(a.mos_trace, b.mos_trace);
        assert_eq!(a.best_placement, b.best_placement);
    }

    proptest! {
        #[test]
        fn non_noop_actions_pair_into_inverses(
            m in 1usize..4, s in 1usize..3, f in 1usize..6, seed in any::<u64>()
        ) {
            let d = dims(m, s, f);
            let x = d.random_placement(&mut ChaCha8Rng::seed_from_u64(seed));
            for k in 0..d.total_slots() {
                let up = apply_action(&x, ActionId(2 * k)).unwrap();
                prop_assert_eq!(&apply_action(&up, ActionId(2 * k + 1)).unwrap(), &x);
                let down = apply_action(&x, ActionId(2 * k + 1)).unwrap();
                prop_assert_eq!(&apply_action(&down, ActionId(2 * k)).unwrap(), &x);
            }
        }
    }
}
