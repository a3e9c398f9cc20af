//! Reference placement policies and the exhaustive oracle.

use std::io::{BufRead, Write};
use std::path::Path;

use num_bigint::BigUint;
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::agents::{decode_state, CachingEnv, Dims, StateKey};
use crate::error::{Error, Result};
use crate::netmodel::{CachePlacement, FadingMode, NetworkScenario, Popularity, PopularityView};

pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub placement: CachePlacement,
    pub sum_mos: f64,
    /// False only when no placement satisfies the fronthaul and rate limits;
    /// the unconstrained maximizer is returned in that case.
    pub feasible: bool,
    pub evaluations: u64,
}

/// Best placement by exhaustive enumeration of all `F^(S*M)` states.
/// Feasible placements take precedence; ties go to the lowest state key.
pub fn optimal_exhaustive(env: &CachingEnv, cap: u64) -> Result<OracleResult> {
    let dims = env.dims();
    let count = match dims.state_count() {
        Some(c) if c <= cap as u128 => c as u64,
        _ => {
            return Err(Error::EnumerationTooLarge {
                states: ops_budget(dims.num_contents, dims.slots, dims.num_bs).optimal.to_string(),
                cap,
            })
        }
    };

    // (feasible, score, index); larger is better except for index.
    type Cand = (bool, f64, u64);
    fn better(a: Cand, b: Cand) -> Cand {
        let key = |c: Cand| (c.0, c.1);
        match key(a).partial_cmp(&key(b)) {
            Some(std::cmp::Ordering::Greater) => a,
            Some(std::cmp::Ordering::Less) => b,
            _ => {
                if a.2 <= b.2 {
                    a
                } else {
                    b
                }
            }
        }
    }

    let best = (0..count)
        .into_par_iter()
        .map(|idx| -> Result<Cand> {
            let key = StateKey::from_index(idx as u128, dims)?;
            let e = env.evaluate(&decode_state(&key, dims)?)?;
            Ok((e.feasible, e.sum_mos, idx))
        })
        .try_reduce(|| (false, f64::NEG_INFINITY, u64::MAX), |a, b| Ok(better(a, b)))?;

    let placement = decode_state(&StateKey::from_index(best.2 as u128, dims)?, dims)?;
    Ok(OracleResult { placement, sum_mos: best.1, feasible: best.0, evaluations: count })
}

/// Every base station independently caches the `S` most popular contents,
/// ties to the lower content index.
pub fn non_cooperative(dims: Dims, popularity: &[f64]) -> Result<CachePlacement> {
    if popularity.len() != dims.num_contents {
        return Err(Error::DimensionMismatch {
            expected: dims.num_contents,
            actual: popularity.len(),
        });
    }
    if dims.slots > dims.num_contents {
        return Err(Error::invalid("more cache slots than contents"));
    }
    let mut order: Vec<usize> = (0..dims.num_contents).collect();
    order.sort_by(|&a, &b| popularity[b].total_cmp(&popularity[a]).then(a.cmp(&b)));
    let top = &order[..dims.slots];
    let rows = vec![top.to_vec(); dims.num_bs];
    CachePlacement::new(rows, dims.num_contents)
}

/// Non-cooperative placement where each base station ranks contents by the
/// mean demand of its own associated users (nearest-BS rule). A BS with no
/// associated users falls back to the population mean. With one shared
/// popularity vector this is exactly [`non_cooperative`].
pub fn non_cooperative_local(env: &CachingEnv) -> Result<CachePlacement> {
    let dims = env.dims();
    let pop = env.popularity();
    let global = pop.aggregate();
    let assoc = env.channel().association();
    let mut rows = Vec::with_capacity(dims.num_bs);
    for m in 0..dims.num_bs {
        let users: Vec<usize> = (0..assoc.len()).filter(|&i| assoc[i] == m).collect();
        let local = if users.is_empty() {
            global.clone()
        } else {
            let mut acc = vec![0.0; dims.num_contents];
            for &i in &users {
                for (a, v) in acc.iter_mut().zip(pop.of_user(i)) {
                    *a += v;
                }
            }
            acc.iter().map(|a| a / users.len() as f64).collect()
        };
        rows.push(non_cooperative(Dims { num_bs: 1, ..dims }, &local)?.row(0).to_vec());
    }
    CachePlacement::new(rows, dims.num_contents)
}

/// Each slot drawn uniformly from the library.
pub fn random_placement<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> CachePlacement {
    dims.random_placement(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpsMethod {
    Optimal,
    EpsGreedyQ,
    Laql,
}

/// Operation counts per method: `F^(SM)`, `FSM` and `FSM * 2SM`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpsBudget {
    pub optimal: BigUint,
    pub eps_greedy: BigUint,
    pub laql: BigUint,
}

impl OpsBudget {
    pub fn get(&self, method: OpsMethod) -> &BigUint {
        match method {
            OpsMethod::Optimal => &self.optimal,
            OpsMethod::EpsGreedyQ => &self.eps_greedy,
            OpsMethod::Laql => &self.laql,
        }
    }
}

pub fn ops_budget(num_contents: usize, slots: usize, num_bs: usize) -> OpsBudget {
    let f = BigUint::from(num_contents);
    let sm = slots * num_bs;
    let fsm = &f * BigUint::from(sm);
    OpsBudget {
        optimal: f.pow(sm as u32),
        laql: &fsm * BigUint::from(2 * sm),
        eps_greedy: fsm,
    }
}

/// Hex SHA-256 of a scenario's canonical TOML form.
pub fn scenario_hash(scenario: &NetworkScenario) -> String {
    hex::encode(Sha256::digest(scenario.to_toml_string().as_bytes()))
}

/// Hex SHA-256 of the popularity's exact bit patterns. Per-user tables hash
/// differently from a shared vector with the same entries.
pub fn popularity_hash(popularity: &Popularity) -> String {
    let mut h = Sha256::new();
    if let Popularity::PerUser(rows) = popularity {
        h.update(b"per_user");
        h.update((rows.len() as u64).to_le_bytes());
    }
    for row in popularity.rows() {
        for p in row {
            h.update(p.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// CSV cache of oracle results keyed by (scenario hash, popularity hash,
/// fading mode). Columns: `scenario_hash,popularity_hash,fading,placement,sum_mos,feasible,evaluations`.
#[derive(Debug)]
pub struct OracleCache {
    path: std::path::PathBuf,
}

pub const ORACLE_CACHE_HEADER: &str =
    "scenario_hash,popularity_hash,fading,placement,sum_mos,feasible,evaluations";

impl OracleCache {
    pub fn new(path: impl AsRef<Path>) -> Self {
        OracleCache { path: path.as_ref().to_path_buf() }
    }

    pub fn lookup(
        &self,
        scenario_hash: &str,
        popularity_hash: &str,
        fading: FadingMode,
        dims: Dims,
    ) -> Result<Option<OracleResult>> {
        let file = match std::fs::File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let fading = fading.to_string();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate().skip(1) {
            let line = line?;
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 7 {
                return Err(Error::Parse { line: n + 1, message: "expected 7 columns".into() });
            }
            if cols[0] == scenario_hash && cols[1] == popularity_hash && cols[2] == fading {
                let bad = |m: &str| Error::Parse { line: n + 1, message: m.to_string() };
                let key = StateKey::parse(cols[3], dims)?;
                return Ok(Some(OracleResult {
                    placement: decode_state(&key, dims)?,
                    sum_mos: cols[4].parse().map_err(|_| bad("bad sum_mos"))?,
                    feasible: cols[5].parse().map_err(|_| bad("bad feasible flag"))?,
                    evaluations: cols[6].parse().map_err(|_| bad("bad evaluation count"))?,
                }));
            }
        }
        Ok(None)
    }

    pub fn store(
        &self,
        scenario_hash: &str,
        popularity_hash: &str,
        fading: FadingMode,
        result: &OracleResult,
    ) -> Result<()> {
        let fresh = !self.path.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        if fresh {
            writeln!(f, "{ORACLE_CACHE_HEADER}")?;
        }
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            scenario_hash,
            popularity_hash,
            fading,
            crate::agents::encode_state(&result.placement),
            result.sum_mos,
            result.feasible,
            result.evaluations
        )?;
        Ok(())
    }
}
