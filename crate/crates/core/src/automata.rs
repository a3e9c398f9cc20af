//! Discretized pursuit learning automaton.
//!
//! The automaton keeps an action-probability vector and a maximum-likelihood
//! estimate of each action's reward probability. On a rewarded step every
//! action other than the current best estimate loses a fixed quantum
//! `delta = 1 / (n_actions * kappa)` (floored at zero) and the best action
//! takes the exact complement, so the vector stays normalized. Penalized
//! steps leave the probabilities untouched.

use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};

/// Binary environment response. `Reward` is the 0 response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Response {
    Reward,
    Penalty,
}

impl Response {
    pub fn from_bit(r: u8) -> Result<Self> {
        match r {
            0 => Ok(Response::Reward),
            1 => Ok(Response::Penalty),
            other => Err(Error::invalid(format!("response must be 0 or 1, got {other}"))),
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Response::Reward => 0,
            Response::Penalty => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PursuitAutomaton {
    probs: Vec<f64>,
    reward_counts: Vec<u64>,
    select_counts: Vec<u64>,
    kappa: u32,
    delta: f64,
}

impl PursuitAutomaton {
    pub const DEFAULT_PRIOR_REWARDS: u64 = 1;
    pub const DEFAULT_PRIOR_SELECTIONS: u64 = 2;

    /// Uniform probabilities with the default estimate prior `1/2`.
    pub fn new(n_actions: usize, kappa: u32) -> Result<Self> {
        Self::with_prior(
            n_actions,
            kappa,
            Self::DEFAULT_PRIOR_REWARDS,
            Self::DEFAULT_PRIOR_SELECTIONS,
        )
    }

    pub fn with_prior(n_actions: usize, kappa: u32, prior_u: u64, prior_v: u64) -> Result<Self> {
        if n_actions < 2 {
            return Err(Error::invalid(format!("automaton needs >= 2 actions, got {n_actions}")));
        }
        if kappa == 0 {
            return Err(Error::invalid("resolution kappa must be >= 1"));
        }
        if prior_v == 0 || prior_u > prior_v {
            return Err(Error::invalid("estimate prior needs 0 <= u <= v and v > 0"));
        }
        Ok(PursuitAutomaton {
            probs: vec![1.0 / n_actions as f64; n_actions],
            reward_counts: vec![prior_u; n_actions],
            select_counts: vec![prior_v; n_actions],
            kappa,
            delta: 1.0 / (n_actions as f64 * kappa as f64),
        })
    }

    pub fn n_actions(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn reward_counts(&self) -> &[u64] {
        &self.reward_counts
    }

    pub fn select_counts(&self) -> &[u64] {
        &self.select_counts
    }

    pub fn kappa(&self) -> u32 {
        self.kappa
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn estimate(&self, action: usize) -> f64 {
        self.reward_counts[action] as f64 / self.select_counts[action] as f64
    }

    pub fn estimates(&self) -> Vec<f64> {
        (0..self.n_actions()).map(|i| self.estimate(i)).collect()
    }

    /// Action with the highest reward estimate, lowest index on ties.
    pub fn best_estimate(&self) -> usize {
        let mut best = 0;
        let mut best_d = self.estimate(0);
        for i in 1..self.n_actions() {
            let d = self.estimate(i);
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    /// Inverse-CDF sampling on a single uniform draw.
    pub fn select<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return i;
            }
        }
        // Rounding left u just above the final cumulative sum.
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    pub fn update(&mut self, chosen: usize, response: Response) -> Result<()> {
        let n = self.n_actions();
        if chosen >= n {
            return Err(Error::InvalidAction { index: chosen, count: n });
        }
        self.select_counts[chosen] += 1;
        if response == Response::Reward {
            self.reward_counts[chosen] += 1;
            let h = self.best_estimate();
            let mut others = 0.0;
            for i in 0..n {
                if i != h {
                    self.probs[i] = (self.probs[i] - self.delta).max(0.0);
                    others += self.probs[i];
                }
            }
            self.probs[h] = 1.0 - others;
        }
        Ok(())
    }

    /// The action whose probability reaches `threshold`, if any.
    pub fn converged(&self, threshold: f64) -> Option<usize> {
        self.probs.iter().position(|&p| p >= threshold)
    }

    /// Writes `action,prob,u,v` rows, optionally prefixed by a label column.
    pub fn write_csv<W: Write>(&self, out: W, label: Option<&str>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        match label {
            Some(_) => w.write_record(["label", "action", "prob", "u", "v"])?,
            None => w.write_record(["action", "prob", "u", "v"])?,
        }
        for i in 0..self.n_actions() {
            let row = [
                i.to_string(),
                self.probs[i].to_string(),
                self.reward_counts[i].to_string(),
                self.select_counts[i].to_string(),
            ];
            match label {
                Some(l) => w.write_record(std::iter::once(l.to_string()).chain(row))?,
                None => w.write_record(row)?,
            }
        }
        w.flush()?;
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn set_state(&mut self, probs: Vec<f64>, u: Vec<u64>, v: Vec<u64>, delta: f64) {
        self.probs = probs;
        self.reward_counts = u;
        self.select_counts = v;
        self.delta = delta;
    }
}

/// Stationary Bernoulli environment: action `i` is rewarded with probability
/// `reward_probs[i]`.
#[derive(Debug, Clone)]
pub struct BernoulliEnv {
    pub reward_probs: Vec<f64>,
}

impl BernoulliEnv {
    pub fn respond<R: Rng + ?Sized>(&self, action: usize, rng: &mut R) -> Response {
        if rng.random::<f64>() < self.reward_probs[action] {
            Response::Reward
        } else {
            Response::Penalty
        }
    }

    pub fn best_action(&self) -> usize {
        let mut best = 0;
        for (i, &d) in self.reward_probs.iter().enumerate() {
            if d > self.reward_probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Runs one automaton against `env` for `steps` interactions and returns it.
pub fn run_bernoulli<R: Rng + ?Sized>(
    env: &BernoulliEnv,
    kappa: u32,
    steps: usize,
    rng: &mut R,
) -> Result<PursuitAutomaton> {
    let mut la = PursuitAutomaton::new(env.reward_probs.len(), kappa)?;
    for _ in 0..steps {
        let a = la.select(rng);
        let r = env.respond(a, rng);
        la.update(a, r)?;
    }
    Ok(la)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn construction() {
        let la = PursuitAutomaton::new(5, 10).unwrap();
        assert_eq!(la.delta(), 0.02);
        let la = PursuitAutomaton::new(4, 3).unwrap();
        assert_eq!(la.probs(), &[0.25; 4]);
        assert!(la.estimates().iter().all(|&d| d == 0.5));
        assert!(PursuitAutomaton::new(1, 10).is_err());
        assert!(PursuitAutomaton::new(3, 0).is_err());
    }

    #[test]
    fn rewarded_step_pursues_best_estimate() {
        let mut la = PursuitAutomaton::new(4, 1).unwrap();
        // Action 1 already has the best estimate; delta forced to 0.1.
        la.set_state(vec![0.25; 4], vec![1, 5, 1, 1], vec![2, 6, 2, 2], 0.1);
        la.update(1, Response::Reward).unwrap();
        let expect = [0.15, 0.55, 0.15, 0.15];
        for (p, e) in la.probs().iter().zip(expect) {
            assert!((p - e).abs() < 1e-15, "{:?}", la.probs());
        }
    }

    #[test]
    fn penalty_leaves_probs() {
        let mut la = PursuitAutomaton::new(3, 10).unwrap();
        let before = la.probs().to_vec();
        la.update(2, Response::Penalty).unwrap();
        assert_eq!(la.probs(), &before[..]);
        assert_eq!(la.select_counts()[2], 3);
        assert_eq!(la.reward_counts()[2], 1);
    }

    #[test]
    fn estimate_ratio() {
        let mut la = PursuitAutomaton::new(2, 10).unwrap();
        la.set_state(vec![0.5, 0.5], vec![2, 1], vec![3, 2], 0.05);
        la.update(0, Response::Reward).unwrap();
        assert_eq!(la.reward_counts()[0], 3);
        assert_eq!(la.select_counts()[0], 4);
        assert_eq!(la.estimate(0), 0.75);
    }

    #[test]
    fn update_rejects_bad_index() {
        let mut la = PursuitAutomaton::new(2, 10).unwrap();
        assert!(matches!(la.update(2, Response::Reward), Err(Error::InvalidAction { .. })));
        assert!(Response::from_bit(2).is_err());
    }

    #[test]
    fn degenerate_selection() {
        let mut la = PursuitAutomaton::new(3, 1).unwrap();
        la.set_state(vec![1.0, 0.0, 0.0], vec![1; 3], vec![2; 3], 1.0 / 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| la.select(&mut rng) == 0));
    }

    #[test]
    fn selection_is_deterministic_per_rng_state() {
        let la = PursuitAutomaton::new(7, 4).unwrap();
        let a: Vec<usize> = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..50).map(|_| la.select(&mut rng)).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b: Vec<usize> = (0..50).map(|_| la.select(&mut rng)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_selection_frequencies() {
        // Binomial(1e5, 0.25) has sd ~137, so +-0.01 is ~7 sd.
        let la = PursuitAutomaton::new(4, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 4];
        for _ in 0..100_000 {
            counts[la.select(&mut rng)] += 1;
        }
        for c in counts {
            let f = c as f64 / 1e5;
            assert!((0.24..=0.26).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn converged_thresholds() {
        let mut la = PursuitAutomaton::new(2, 10).unwrap();
        assert_eq!(la.converged(0.95), None);
        la.set_state(vec![0.96, 0.04], vec![1; 2], vec![2; 2], 0.05);
        assert_eq!(la.converged(0.95), Some(0));
        la.set_state(vec![1.0, 0.0], vec![1; 2], vec![2; 2], 0.05);
        assert_eq!(la.converged(1.0), Some(0));
    }

    #[test]
    fn csv_export() {
        let la = PursuitAutomaton::new(2, 10).unwrap();
        let mut buf = Vec::new();
        la.write_csv(&mut buf, None).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "action,prob,u,v\n0,0.5,1,2\n1,0.5,1,2\n");
    }

    #[test]
    fn finds_best_arm_mostly() {
        let env = BernoulliEnv { reward_probs: vec![0.8, 0.2] };
        let hits = (0..20u64)
            .filter(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let la = run_bernoulli(&env, 10, 10_000, &mut rng).unwrap();
                la.probs()[0] > 0.95
            })
            .count();
        assert!(hits >= 18, "{hits}");
    }

    proptest! {
        #[test]
        fn invariants_hold_along_random_runs(
            n in 2usize..8,
            kappa in 1u32..20,
            seed in any::<u64>(),
            steps in 1usize..400,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut la = PursuitAutomaton::new(n, kappa).unwrap();
            prop_assert_eq!(la.delta(), 1.0 / (n as f64 * kappa as f64));
            for _ in 0..steps {
                let a = la.select(&mut rng);
                let r = if rng.random::<bool>() { Response::Reward } else { Response::Penalty };
                let before = la.probs().to_vec();
                la.update(a, r).unwrap();
                let p = la.probs();
                prop_assert!(p.iter().all(|&x| x >= 0.0));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                if r == Response::Reward {
                    let h = la.best_estimate();
                    prop_assert!(p[h] >= before[h]);
                    for i in (0..n).filter(|&i| i != h) {
                        prop_assert!(p[i] <= before[i]);
                    }
                }
                for i in 0..n {
                    prop_assert!(la.reward_counts()[i] <= la.select_counts()[i]);
                }
            }
            let total: u64 = la.select_counts().iter().sum();
            prop_assert_eq!(total, 2 * n as u64 + steps as u64);
        }
    }
}
