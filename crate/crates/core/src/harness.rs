//! Experiment orchestration.
//!
//! A trial generates ground-truth mobility and popularity for one seed,
//! trains the two forecasters on the history part, and then, slot by slot,
//! lets every placement method plan against the forecast before scoring the
//! placement against the true next-slot state. Sweeps repeat trials over a
//! grid of transmit powers, BS counts or user counts. Trials run in
//! parallel; everything inside a trial is sequential and seeded, so outputs
//! are a pure function of the configuration and seeds.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{train_laql, train_qlearning, AgentConfig, CachingEnv, Dims, TrainOutcome};
use crate::automata::{run_bernoulli, BernoulliEnv};
use crate::baselines::{
    non_cooperative_local, optimal_exhaustive, random_placement, scenario_hash, popularity_hash,
    OracleCache, OracleResult, DEFAULT_ENUMERATION_CAP,
};
use crate::demand::{
    regional_popularity, rotated_zipf, synthetic_walk, windowize, zipf_popularity, Bounds,
    MinMaxScaler, PopularitySeries, Trajectory, WindowedDataset, POPULARITY_FLOOR,
};
use crate::error::{Error, Result};
use crate::netmodel::{
    dbm_to_watts, CachePlacement, ChannelModel, FadingMode, FadingRealization, NetworkScenario,
    Point, Popularity, QoeParams, ScenarioParams, MIN_SEPARATION_M,
};
use crate::predictor::{train, Mlp, TrainConfig, TrainReport, MOBILITY_SHAPE, POPULARITY_SHAPE};

/// Placement methods compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Optimal,
    Laql,
    EpsGreedyQ,
    NonCooperative,
    Random,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Optimal, Method::Laql, Method::EpsGreedyQ, Method::NonCooperative, Method::Random];

    pub fn name(self) -> &'static str {
        match self {
            Method::Optimal => "optimal",
            Method::Laql => "laql",
            Method::EpsGreedyQ => "eps_greedy_q",
            Method::NonCooperative => "non_cooperative",
            Method::Random => "random",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Parses a comma-separated method list.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let mut out: Vec<Method> =
        list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::Config("method list is empty".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopularityMode {
    /// One popularity vector for every user.
    Shared,
    /// Each BS cell has its own rotated Zipf ranking.
    Regional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_contents: usize,
    pub num_bs: usize,
    pub num_users: usize,
    pub cache_slots: usize,
    pub bandwidth_hz: f64,
    pub tx_power_dbm: f64,
    pub pathloss_exp: f64,
    pub noise_dbm: f64,
    pub region_side_m: f64,
    pub fronthaul_max_bps: f64,
    pub min_rate_bps: f64,
    pub fading: FadingMode,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            num_contents: 10,
            num_bs: 2,
            num_users: 100,
            cache_slots: 4,
            bandwidth_hz: 20e6,
            tx_power_dbm: 20.0,
            pathloss_exp: 3.0,
            noise_dbm: -95.0,
            region_side_m: 4000.0,
            fronthaul_max_bps: f64::INFINITY,
            min_rate_bps: 0.0,
            fading: FadingMode::Expectation,
        }
    }
}

impl ScenarioConfig {
    pub fn bounds(&self) -> Bounds {
        Bounds::square(self.region_side_m)
    }

    /// Base stations evenly spaced along the horizontal midline.
    pub fn bs_positions(&self) -> Vec<Point> {
        let side = self.region_side_m;
        (0..self.num_bs)
            .map(|m| Point::new(side * (m as f64 + 0.5) / self.num_bs as f64, side / 2.0))
            .collect()
    }

    pub fn build(&self, users: Vec<Point>) -> Result<NetworkScenario> {
        NetworkScenario::new(ScenarioParams {
            bs_positions: self.bs_positions(),
            user_positions: users,
            tx_power_w: dbm_to_watts(self.tx_power_dbm),
            pathloss_exp: self.pathloss_exp,
            noise_w: dbm_to_watts(self.noise_dbm),
            bandwidth_hz: self.bandwidth_hz,
            cache_slots: self.cache_slots,
            fronthaul_max_bps: self.fronthaul_max_bps,
            min_rate_bps: self.min_rate_bps,
            num_contents: self.num_contents,
        })
    }

    pub fn dims(&self) -> Dims {
        Dims { num_bs: self.num_bs, slots: self.cache_slots, num_contents: self.num_contents }
    }

    fn validate(&self) -> Result<()> {
        if self.num_bs == 0 || self.num_users == 0 || self.num_contents == 0 || self.cache_slots == 0 {
            return Err(Error::Config("scenario counts must all be >= 1".into()));
        }
        if !(self.region_side_m > 2.0 * MIN_SEPARATION_M && self.region_side_m.is_finite()) {
            return Err(Error::Config("scenario.region_side_m must be a finite length > 2 m".into()));
        }
        // Radio parameters are validated by the scenario constructor itself.
        let probe = Point::new(0.0, 0.0);
        self.build(vec![probe]).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandConfig {
    /// Per-axis standard deviation of one mobility step, meters.
    pub step_sigma_m: f64,
    /// Duration of one time step, seconds.
    pub slot_seconds: f64,
    /// Steps of observed history before the first placement slot.
    pub history_len: usize,
    pub zipf_exponent: f64,
    pub jitter_sigma: f64,
    pub popularity_mode: PopularityMode,
}

impl Default for DemandConfig {
    fn default() -> Self {
        DemandConfig {
            step_sigma_m: 50.0,
            slot_seconds: 300.0,
            history_len: 48,
            zipf_exponent: 0.8,
            jitter_sigma: 0.005,
            popularity_mode: PopularityMode::Shared,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub layer_sizes: Vec<usize>,
    pub window_in: usize,
    pub window_out: usize,
    #[serde(default)]
    pub train: TrainConfig,
}

impl PredictorConfig {
    pub fn mobility() -> Self {
        PredictorConfig { layer_sizes: MOBILITY_SHAPE.to_vec(), window_in: 12, window_out: 1, train: TrainConfig::default() }
    }

    pub fn popularity() -> Self {
        PredictorConfig {
            layer_sizes: POPULARITY_SHAPE.to_vec(),
            window_in: 5,
            window_out: 1,
            train: TrainConfig::default(),
        }
    }

    fn validate(&self, feature_dim: usize, what: &str) -> Result<()> {
        self.train.validate()?;
        let (first, last) = match (self.layer_sizes.first(), self.layer_sizes.last()) {
            (Some(&a), Some(&b)) if self.layer_sizes.len() >= 2 => (a, b),
            _ => return Err(Error::Config(format!("{what}.layer_sizes needs >= 2 entries"))),
        };
        if first != self.window_in * feature_dim {
            return Err(Error::Config(format!(
                "{what}.layer_sizes[0] must equal window_in x {feature_dim} = {}",
                self.window_in * feature_dim
            )));
        }
        if last != self.window_out * feature_dim {
            return Err(Error::Config(format!(
                "{what}.layer_sizes output must equal window_out x {feature_dim} = {}",
                self.window_out * feature_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    None,
    TxPower,
    NumBs,
    NumUsers,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::None => "none",
            SweepAxis::TxPower => "tx_power_dbm",
            SweepAxis::NumBs => "num_bs",
            SweepAxis::NumUsers => "num_users",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SweepAxis::None),
            "tx_power" | "tx_power_dbm" => Ok(SweepAxis::TxPower),
            "num_bs" => Ok(SweepAxis::NumBs),
            "num_users" => Ok(SweepAxis::NumUsers),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub tx_power_dbm: Vec<f64>,
    pub num_bs: Vec<usize>,
    pub num_users: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            tx_power_dbm: vec![10.0, 15.0, 20.0, 25.0],
            num_bs: vec![1, 2],
            num_users: vec![25, 50, 100],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    /// Placement slots per trial.
    pub slots: usize,
    pub oracle_cap: u64,
    /// Cells per side of the MOS heatmap grid.
    pub heatmap_resolution: usize,
    /// Keep every n-th training iteration in `reward_curves.csv`.
    pub curve_stride: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: vec![0],
            methods: Method::ALL.to_vec(),
            slots: 1,
            oracle_cap: DEFAULT_ENUMERATION_CAP,
            heatmap_resolution: 20,
            curve_stride: 100,
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Full experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub qoe: QoeParams,
    pub agent: AgentConfig,
    pub demand: DemandConfig,
    pub mobility_net: PredictorConfig,
    pub popularity_net: PredictorConfig,
    pub sweep: SweepConfig,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: ScenarioConfig::default(),
            qoe: QoeParams::default(),
            agent: AgentConfig::default(),
            demand: DemandConfig::default(),
            mobility_net: PredictorConfig::mobility(),
            popularity_net: PredictorConfig::popularity(),
            sweep: SweepConfig::default(),
            run: RunConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.qoe.validate()?;
        self.agent.validate()?;
        let d = &self.demand;
        if !(d.step_sigma_m >= 0.0 && d.step_sigma_m.is_finite()) {
            return Err(Error::Config("demand.step_sigma_m must be finite and >= 0".into()));
        }
        if !(d.slot_seconds > 0.0 && d.slot_seconds.is_finite()) {
            return Err(Error::Config("demand.slot_seconds must be positive".into()));
        }
        if !(d.jitter_sigma >= 0.0 && d.jitter_sigma.is_finite()) {
            return Err(Error::Config("demand.jitter_sigma must be finite and >= 0".into()));
        }
        if !(d.zipf_exponent >= 0.0 && d.zipf_exponent.is_finite()) {
            return Err(Error::Config("demand.zipf_exponent must be finite and >= 0".into()));
        }
        self.mobility_net.validate(2, "mobility_net")?;
        self.popularity_net.validate(1, "popularity_net")?;
        for (net, what) in [(&self.mobility_net, "mobility_net"), (&self.popularity_net, "popularity_net")] {
            if d.history_len < net.window_in + net.window_out {
                return Err(Error::Config(format!(
                    "demand.history_len must be >= {what} window_in + window_out"
                )));
            }
        }
        let r = &self.run;
        if r.seeds.is_empty() {
            return Err(Error::Config("run.seeds is empty".into()));
        }
        if r.methods.is_empty() {
            return Err(Error::Config("run.methods is empty".into()));
        }
        if r.slots == 0 || r.heatmap_resolution == 0 || r.curve_stride == 0 {
            return Err(Error::Config("run.slots, heatmap_resolution and curve_stride must be >= 1".into()));
        }
        for &p in &self.sweep.tx_power_dbm {
            self.at(SweepAxis::TxPower, p)?.scenario.validate()?;
        }
        for &m in &self.sweep.num_bs {
            self.at(SweepAxis::NumBs, m as f64)?.scenario.validate()?;
        }
        for &n in &self.sweep.num_users {
            self.at(SweepAxis::NumUsers, n as f64)?.scenario.validate()?;
        }
        Ok(())
    }

    /// Copy of this config with the sweep axis set to `value`.
    pub fn at(&self, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
        let mut c = self.clone();
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("{} value {value} is not a positive integer", axis.name())))
            }
        };
        match axis {
            SweepAxis::None => {}
            SweepAxis::TxPower => c.scenario.tx_power_dbm = value,
            SweepAxis::NumBs => c.scenario.num_bs = count()?,
            SweepAxis::NumUsers => c.scenario.num_users = count()?,
        }
        Ok(c)
    }

    pub fn sweep_values(&self, axis: SweepAxis) -> Vec<f64> {
        match axis {
            SweepAxis::None => vec![f64::NAN],
            SweepAxis::TxPower => self.sweep.tx_power_dbm.clone(),
            SweepAxis::NumBs => self.sweep.num_bs.iter().map(|&v| v as f64).collect(),
            SweepAxis::NumUsers => self.sweep.num_users.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// One (method, sweep point, seed, slot) result.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: Method,
    pub sweep_axis: SweepAxis,
    /// NaN when not sweeping.
    pub sweep_value: f64,
    pub seed: u64,
    pub slot: usize,
    /// Realized sum MOS against the true next-slot state.
    pub sum_mos: f64,
    /// Sum MOS the method expected from the forecast.
    pub forecast_sum_mos: f64,
    pub placement: CachePlacement,
    pub iterations: usize,
    pub feasible: bool,
    pub fronthaul_ok: bool,
    pub min_rate_ok: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub method: Method,
    pub sweep_value: f64,
    pub seed: u64,
    pub slot: usize,
    pub iteration: usize,
    pub reward: f64,
    pub best_sum_mos: f64,
}

/// Summary of the LAQL automata after training.
#[derive(Debug, Clone, PartialEq)]
pub struct LaRow {
    pub sweep_value: f64,
    pub seed: u64,
    pub slot: usize,
    pub states: usize,
    pub converged_states: usize,
    pub mean_max_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatCell {
    pub method: Method,
    pub seed: u64,
    pub x: f64,
    pub y: f64,
    pub mos: f64,
}

/// Everything a run produces, in deterministic order.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub sweep_axis: Option<SweepAxis>,
    pub records: Vec<RunRecord>,
    pub curves: Vec<CurveRow>,
    pub la: Vec<LaRow>,
    pub heatmap: Vec<HeatCell>,
    pub predictor_reports: Vec<(u64, TrainReport, TrainReport)>,
}

/// Independent sub-seed for a (seed, slot, purpose) triple.
fn derive_seed(seed: u64, slot: usize, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add((slot as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03));
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_TRUTH: u64 = 100;
const TAG_MOBILITY_NET: u64 = 101;
const TAG_POPULARITY_NET: u64 = 102;
const TAG_FADING: u64 = 103;

/// Moves `p` radially out to the minimum separation from every BS.
pub fn keep_clear(p: Point, bs: &[Point]) -> Point {
    let mut q = p;
    for b in bs {
        let d = q.distance(b);
        if d < MIN_SEPARATION_M {
            let (ux, uy) = if d > 0.0 { ((q.x - b.x) / d, (q.y - b.y) / d) } else { (1.0, 0.0) };
            let r = MIN_SEPARATION_M * (1.0 + 1e-9);
            q = Point::new(b.x + ux * r, b.y + uy * r);
        }
    }
    q
}

/// Ground-truth demand for one trial.
#[derive(Debug, Clone)]
pub struct Truth {
    pub trajectories: Vec<Trajectory>,
    /// One series (shared) or one per BS cell (regional).
    pub profiles: Vec<PopularitySeries>,
}

impl Truth {
    pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Truth> {
        let sc = &cfg.scenario;
        let d = &cfg.demand;
        let len = d.history_len + cfg.run.slots;
        let bounds = sc.bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, TAG_TRUTH));
        let trajectories = (0..sc.num_users)
            .map(|_| {
                let start = bounds.uniform_point(&mut rng);
                synthetic_walk(start, len, d.slot_seconds, d.step_sigma_m, &bounds, &mut rng)
            })
            .collect();
        let initial: Vec<Vec<f64>> = match d.popularity_mode {
            PopularityMode::Shared => vec![zipf_popularity(sc.num_contents, d.zipf_exponent)],
            PopularityMode::Regional => (0..sc.num_bs)
                .map(|m| rotated_zipf(sc.num_contents, d.zipf_exponent, m * sc.num_contents / sc.num_bs))
                .collect(),
        };
        let profiles = initial
            .into_iter()
            .map(|p| PopularitySeries::generate(p, len, d.jitter_sigma, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Truth { trajectories, profiles })
    }

    pub fn positions_at(&self, k: usize) -> Vec<Point> {
        self.trajectories.iter().map(|t| t.samples()[k].pos).collect()
    }

    pub fn profiles_at(&self, k: usize) -> Vec<Vec<f64>> {
        self.profiles.iter().map(|s| s.steps()[k].clone()).collect()
    }
}

/// Combines per-cell profiles with user positions into a popularity table.
pub fn popularity_for(
    mode: PopularityMode,
    users: &[Point],
    bs: &[Point],
    profiles: &[Vec<f64>],
) -> Result<Popularity> {
    match mode {
        PopularityMode::Shared => Ok(Popularity::Shared(profiles[0].clone())),
        PopularityMode::Regional => regional_popularity(users, bs, profiles),
    }
}

/// Trained forecasters with their scalers.
#[derive(Debug, Clone)]
pub struct Forecasters {
    pub mobility: Mlp,
    pub mobility_scaler: MinMaxScaler,
    pub mobility_report: TrainReport,
    pub popularity: Mlp,
    pub popularity_scaler: MinMaxScaler,
    pub popularity_report: TrainReport,
}

impl Forecasters {
    /// Trains both networks on the first `history_len` steps of `truth`.
    pub fn train(cfg: &ExperimentConfig, truth: &Truth, seed: u64) -> Result<Forecasters> {
        let h = cfg.demand.history_len;
        let mob = &cfg.mobility_net;
        let pop = &cfg.popularity_net;

        let hist_rows: Vec<Vec<Vec<f64>>> =
            truth.trajectories.iter().map(|t| t.features()[..h].to_vec()).collect();
        let mobility_scaler = MinMaxScaler::fit(&hist_rows.concat())?;
        let mut mdata = WindowedDataset::default();
        for rows in &hist_rows {
            mdata.extend(windowize(rows, mob.window_in, mob.window_out, &mobility_scaler)?)?;
        }
        let mut mobility = Mlp::init(&mob.layer_sizes, derive_seed(seed, 0, TAG_MOBILITY_NET))?;
        let mobility_report = train(&mut mobility, &mdata, &mob.train)?;

        let pop_rows: Vec<Vec<Vec<f64>>> = truth
            .profiles
            .iter()
            .flat_map(|s| (0..s.num_contents()).map(|f| s.content_rows(f)[..h].to_vec()))
            .collect();
        let popularity_scaler = MinMaxScaler::fit(&pop_rows.concat())?;
        let mut pdata = WindowedDataset::default();
        for rows in &pop_rows {
            pdata.extend(windowize(rows, pop.window_in, pop.window_out, &popularity_scaler)?)?;
        }
        let mut popularity = Mlp::init(&pop.layer_sizes, derive_seed(seed, 0, TAG_POPULARITY_NET))?;
        let popularity_report = train(&mut popularity, &pdata, &pop.train)?;

        Ok(Forecasters {
            mobility,
            mobility_scaler,
            mobility_report,
            popularity,
            popularity_scaler,
            popularity_report,
        })
    }

    /// One-step position forecast for step `k` from the preceding window.
    pub fn positions(&self, cfg: &ExperimentConfig, truth: &Truth, k: usize) -> Result<Vec<Point>> {
        let w = cfg.mobility_net.window_in;
        let bounds = cfg.scenario.bounds();
        let bs = cfg.scenario.bs_positions();
        truth
            .trajectories
            .iter()
            .map(|t| {
                let rows = &t.features()[k - w..k];
                let x: Vec<f64> = self.mobility_scaler.scale_window(&rows.concat());
                let y = self.mobility_scaler.unscale_window(&self.mobility.forward(&x)?);
                let p = Point::new(
                    y[0].clamp(bounds.min_x, bounds.max_x),
                    y[1].clamp(bounds.min_y, bounds.max_y),
                );
                Ok(keep_clear(p, &bs))
            })
            .collect()
    }

    /// One-step popularity forecast for every profile at step `k`,
    /// clamped to the floor and renormalized.
    pub fn profiles(&self, cfg: &ExperimentConfig, truth: &Truth, k: usize) -> Result<Vec<Vec<f64>>> {
        let w = cfg.popularity_net.window_in;
        truth
            .profiles
            .iter()
            .map(|s| {
                let raw: Vec<f64> = (0..s.num_contents())
                    .map(|f| {
                        let x: Vec<f64> =
                            s.steps()[k - w..k].iter().map(|p| self.popularity_scaler.scale(0, p[f])).collect();
                        let y = self.popularity.forward(&x)?[0];
                        Ok(self.popularity_scaler.unscale(0, y).clamp(POPULARITY_FLOOR, 1.0))
                    })
                    .collect::<Result<_>>()?;
                let total: f64 = raw.iter().sum();
                Ok(raw.into_iter().map(|v| v / total).collect())
            })
            .collect()
    }
}

/// Outcome of one method on one slot.
struct Planned {
    placement: CachePlacement,
    forecast_sum_mos: f64,
    iterations: usize,
    trained: Option<TrainOutcome>,
}

fn plan(
    method: Method,
    env: &CachingEnv,
    cfg: &ExperimentConfig,
    seed: u64,
    slot: usize,
) -> Result<Option<Planned>> {
    let sub = derive_seed(seed, slot, method.tag());
    let from_training = |t: TrainOutcome| Planned {
        placement: t.best_placement.clone(),
        forecast_sum_mos: t.best_sum_mos,
        iterations: t.ops.iterations,
        trained: Some(t),
    };
    let planned = match method {
        Method::Laql => from_training(train_laql(env, &cfg.agent, sub)?),
        Method::EpsGreedyQ => from_training(train_qlearning(env, &cfg.agent, sub)?),
        Method::NonCooperative => {
            let placement = non_cooperative_local(env)?;
            let forecast_sum_mos = env.sum_mos(&placement)?;
            Planned { placement, forecast_sum_mos, iterations: 0, trained: None }
        }
        Method::Random => {
            let placement = random_placement(env.dims(), &mut ChaCha8Rng::seed_from_u64(sub));
            let forecast_sum_mos = env.sum_mos(&placement)?;
            Planned { placement, forecast_sum_mos, iterations: 0, trained: None }
        }
        Method::Optimal => match optimal_exhaustive(env, cfg.run.oracle_cap) {
            Ok(r) => Planned {
                placement: r.placement,
                forecast_sum_mos: r.sum_mos,
                iterations: r.evaluations as usize,
                trained: None,
            },
            Err(Error::EnumerationTooLarge { .. }) => return Ok(None),
            Err(e) => return Err(e),
        },
    };
    Ok(Some(planned))
}

/// Methods that will actually run at this config; the oracle is dropped
/// with a log note when the placement space exceeds the cap.
pub fn effective_methods(cfg: &ExperimentConfig, methods: &[Method]) -> Vec<Method> {
    let dims = cfg.scenario.dims();
    let fits = dims.state_count().is_some_and(|n| n <= cfg.run.oracle_cap as u128);
    methods
        .iter()
        .copied()
        .filter(|&m| {
            if m == Method::Optimal && !fits {
                log::info!(
                    "optimal skipped: {}^{} placements exceed the cap of {}",
                    dims.num_contents,
                    dims.total_slots(),
                    cfg.run.oracle_cap
                );
                false
            } else {
                true
            }
        })
        .collect()
}

struct TrialOutput {
    records: Vec<RunRecord>,
    curves: Vec<CurveRow>,
    la: Vec<LaRow>,
    heatmap: Vec<HeatCell>,
    reports: (TrainReport, TrainReport),
}

fn run_trial(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    sweep_value: f64,
    seed: u64,
    methods: &[Method],
    with_heatmap: bool,
) -> Result<TrialOutput> {
    let truth = Truth::generate(cfg, seed)?;
    let nets = Forecasters::train(cfg, &truth, seed)?;
    let sc = &cfg.scenario;
    let bs = sc.bs_positions();
    let mode = cfg.demand.popularity_mode;
    let mut out = TrialOutput {
        records: Vec::new(),
        curves: Vec::new(),
        la: Vec::new(),
        heatmap: Vec::new(),
        reports: (nets.mobility_report.clone(), nets.popularity_report.clone()),
    };

    for slot in 0..cfg.run.slots {
        let k = cfg.demand.history_len + slot;
        let pred_users = nets.positions(cfg, &truth, k)?;
        let pred_profiles = nets.profiles(cfg, &truth, k)?;
        let pred_pop = popularity_for(mode, &pred_users, &bs, &pred_profiles)?;
        let pred_scenario = sc.build(pred_users)?;
        let pred_env = CachingEnv::new(
            &pred_scenario,
            &FadingRealization::unit(sc.num_bs, sc.num_users),
            pred_pop,
            cfg.qoe,
        )?;

        let true_users: Vec<Point> = truth.positions_at(k).into_iter().map(|p| keep_clear(p, &bs)).collect();
        let true_profiles = truth.profiles_at(k);
        let true_pop = popularity_for(mode, &true_users, &bs, &true_profiles)?;
        let true_scenario = sc.build(true_users)?;
        let mut frng = ChaCha8Rng::seed_from_u64(derive_seed(seed, slot, TAG_FADING));
        let fading = FadingRealization::draw(sc.fading, sc.num_bs, sc.num_users, &mut frng);
        let true_channel = ChannelModel::new(&true_scenario, &fading)?;

        let mut planned_for_heatmap = Vec::new();
        for &method in methods {
            let t0 = Instant::now();
            let Some(p) = plan(method, &pred_env, cfg, seed, slot)? else {
                continue;
            };
            let wall = t0.elapsed().as_secs_f64();
            let report = true_channel.check_constraints(&p.placement, &true_pop)?;
            let sum_mos = true_channel.sum_mos(&p.placement, &true_pop, &cfg.qoe)?;
            log::debug!("{method} seed {seed} slot {slot}: {sum_mos:.4} in {wall:.3}s");
            if let Some(t) = &p.trained {
                for c in t.reward_curve.iter().filter(|c| {
                    c.iteration % cfg.run.curve_stride == 0 || c.iteration + 1 == t.reward_curve.len()
                }) {
                    out.curves.push(CurveRow {
                        method,
                        sweep_value,
                        seed,
                        slot,
                        iteration: c.iteration,
                        reward: c.reward,
                        best_sum_mos: c.best_sum_mos,
                    });
                }
                if method == Method::Laql {
                    out.la.push(la_summary(t, sweep_value, seed, slot));
                }
            }
            out.records.push(RunRecord {
                method,
                sweep_axis: axis,
                sweep_value,
                seed,
                slot,
                sum_mos,
                forecast_sum_mos: p.forecast_sum_mos,
                placement: p.placement.clone(),
                iterations: p.iterations,
                feasible: report.feasible,
                fronthaul_ok: report.fronthaul_ok.iter().all(|&b| b),
                min_rate_ok: report.min_rate_ok.iter().all(|&b| b),
                wall_time_s: wall,
            });
            planned_for_heatmap.push((method, p.placement));
        }

        if with_heatmap && slot + 1 == cfg.run.slots {
            for (method, placement) in &planned_for_heatmap {
                out.heatmap.extend(heatmap(cfg, *method, seed, placement, &true_profiles)?);
            }
        }
    }
    Ok(out)
}

fn la_summary(t: &TrainOutcome, sweep_value: f64, seed: u64, slot: usize) -> LaRow {
    let maxes: Vec<f64> =
        t.automata.values().map(|la| la.probs().iter().copied().fold(0.0, f64::max)).collect();
    let states = maxes.len();
    LaRow {
        sweep_value,
        seed,
        slot,
        states,
        converged_states: maxes.iter().filter(|&&p| p >= 0.95).count(),
        mean_max_prob: if states == 0 { 0.0 } else { maxes.iter().sum::<f64>() / states as f64 },
    }
}

/// MOS a probe user would get at each grid cell centre under `placement`.
pub fn heatmap(
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
    placement: &CachePlacement,
    profiles: &[Vec<f64>],
) -> Result<Vec<HeatCell>> {
    let sc = &cfg.scenario;
    let n = cfg.run.heatmap_resolution;
    let side = sc.region_side_m;
    let bs = sc.bs_positions();
    let centres: Vec<Point> = (0..n)
        .flat_map(|j| (0..n).map(move |i| (i, j)))
        .map(|(i, j)| {
            Point::new(side * (i as f64 + 0.5) / n as f64, side * (j as f64 + 0.5) / n as f64)
        })
        .collect();
    let probes: Vec<Point> = centres.iter().map(|&p| keep_clear(p, &bs)).collect();
    let pop = popularity_for(cfg.demand.popularity_mode, &probes, &bs, profiles)?;
    let scenario = sc.build(probes)?;
    let channel = ChannelModel::new(&scenario, &FadingRealization::unit(sc.num_bs, centres.len()))?;
    let ind = crate::netmodel::indicator_matrix(placement);
    let rates = channel.user_rates(&ind, &pop)?;
    Ok(centres
        .iter()
        .zip(rates)
        .map(|(c, r)| HeatCell { method, seed, x: c.x, y: c.y, mos: crate::netmodel::mos(r, &cfg.qoe) })
        .collect())
}

/// Runs every seed at every point of `axis` (a single point for
/// [`SweepAxis::None`]), trials in parallel.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<RunOutput> {
    cfg.validate()?;
    let values = cfg.sweep_values(axis);
    let mut jobs = Vec::new();
    for (pi, &v) in values.iter().enumerate() {
        let point = cfg.at(axis, v)?;
        let methods = effective_methods(&point, &cfg.run.methods);
        for (si, &seed) in cfg.run.seeds.iter().enumerate() {
            jobs.push((point.clone(), v, seed, methods.clone(), pi == 0 && si == 0));
        }
    }
    let started = Instant::now();
    let trials: Vec<TrialOutput> = jobs
        .par_iter()
        .map(|(point, v, seed, methods, hm)| run_trial(point, axis, *v, *seed, methods, *hm))
        .collect::<Result<_>>()?;
    log::info!("{} trials finished in {:.2}s", trials.len(), started.elapsed().as_secs_f64());

    let mut out = RunOutput { sweep_axis: Some(axis), ..Default::default() };
    for (t, job) in trials.into_iter().zip(&jobs) {
        out.records.extend(t.records);
        out.curves.extend(t.curves);
        out.la.extend(t.la);
        out.heatmap.extend(t.heatmap);
        out.predictor_reports.push((job.2, t.reports.0, t.reports.1));
    }
    Ok(out)
}

/// Single-point run over the configured seeds.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunOutput> {
    sweep(cfg, SweepAxis::None)
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn writer(dir: &Path, name: &str) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(dir.join(name))?)
}

/// Writes `runs.csv`, `reward_curves.csv`, `la_convergence.csv` and
/// `mos_heatmap.csv` into `dir`.
pub fn emit_outputs(output: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let axis = output.sweep_axis.unwrap_or(SweepAxis::None).name();

    let mut w = writer(dir, "runs.csv")?;
    w.write_record([
        "method", "sweep_axis", "sweep_value", "seed", "slot", "sum_mos", "forecast_sum_mos",
        "placement", "iterations", "feasible", "fronthaul_ok", "min_rate_ok",
    ])?;
    for r in &output.records {
        w.write_record([
            r.method.name().to_string(),
            r.sweep_axis.name().to_string(),
            fmt_value(r.sweep_value),
            r.seed.to_string(),
            r.slot.to_string(),
            format!("{}", r.sum_mos),
            format!("{}", r.forecast_sum_mos),
            r.placement.to_string(),
            r.iterations.to_string(),
            r.feasible.to_string(),
            r.fronthaul_ok.to_string(),
            r.min_rate_ok.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = writer(dir, "reward_curves.csv")?;
    w.write_record(["method", "sweep_axis", "sweep_value", "seed", "slot", "iteration", "reward", "best_sum_mos"])?;
    for c in &output.curves {
        w.write_record([
            c.method.name().to_string(),
            axis.to_string(),
            fmt_value(c.sweep_value),
            c.seed.to_string(),
            c.slot.to_string(),
            c.iteration.to_string(),
            c.reward.to_string(),
            format!("{}", c.best_sum_mos),
        ])?;
    }
    w.flush()?;

    let mut w = writer(dir, "la_convergence.csv")?;
    w.write_record(["sweep_axis", "sweep_value", "seed", "slot", "states", "converged_states", "mean_max_prob"])?;
    for l in &output.la {
        w.write_record([
            axis.to_string(),
            fmt_value(l.sweep_value),
            l.seed.to_string(),
            l.slot.to_string(),
            l.states.to_string(),
            l.converged_states.to_string(),
            format!("{}", l.mean_max_prob),
        ])?;
    }
    w.flush()?;

    let mut w = writer(dir, "mos_heatmap.csv")?;
    w.write_record(["method", "seed", "x", "y", "mos"])?;
    for h in &output.heatmap {
        w.write_record([
            h.method.name().to_string(),
            h.seed.to_string(),
            format!("{}", h.x),
            format!("{}", h.y),
            format!("{}", h.mos),
        ])?;
    }
    w.flush()?;

    Ok(["runs.csv", "reward_curves.csv", "la_convergence.csv", "mos_heatmap.csv"]
        .iter()
        .map(|n| dir.join(n))
        .collect())
}

/// Median of the realized sum MOS per method.
pub fn median_by_method(records: &[RunRecord]) -> Vec<(Method, f64)> {
    let mut out = Vec::new();
    for m in Method::ALL {
        let mut v: Vec<f64> = records.iter().filter(|r| r.method == m).map(|r| r.sum_mos).collect();
        if !v.is_empty() {
            out.push((m, median(&mut v)));
        }
    }
    out
}

/// Median (mean of the two middle values for even lengths).
pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Exhaustive oracle on the first seed's initial slot, with the CSV cache.
pub fn run_oracle(cfg: &ExperimentConfig, seed: u64, cache_dir: &Path) -> Result<(OracleResult, bool)> {
    cfg.validate()?;
    let truth = Truth::generate(cfg, seed)?;
    let k = cfg.demand.history_len;
    let sc = &cfg.scenario;
    let bs = sc.bs_positions();
    let users: Vec<Point> = truth.positions_at(k).into_iter().map(|p| keep_clear(p, &bs)).collect();
    let pop = popularity_for(cfg.demand.popularity_mode, &users, &bs, &truth.profiles_at(k))?;
    let scenario = sc.build(users)?;
    let mut frng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, TAG_FADING));
    let fading = FadingRealization::draw(sc.fading, sc.num_bs, sc.num_users, &mut frng);
    let env = CachingEnv::new(&scenario, &fading, pop, cfg.qoe)?;

    fs::create_dir_all(cache_dir)?;
    let cache = OracleCache::new(cache_dir.join("oracle_cache.csv"));
    let (sh, ph) = (scenario_hash(&scenario), popularity_hash(env.popularity()));
    // Rayleigh draws depend on the seed, which the cache key does not see.
    let cacheable = sc.fading == FadingMode::Expectation;
    if cacheable {
        if let Some(hit) = cache.lookup(&sh, &ph, sc.fading, env.dims())? {
            return Ok((hit, true));
        }
    }
    let r = optimal_exhaustive(&env, cfg.run.oracle_cap)?;
    if cacheable {
        cache.store(&sh, &ph, sc.fading, &r)?;
    }
    Ok((r, false))
}

/// Forecaster training on a synthetic walk or a GPS trace.
#[derive(Debug, Clone)]
pub struct PredictOutcome {
    pub mobility: Mlp,
    pub mobility_report: TrainReport,
    pub mobility_test_rmse: Option<f64>,
    pub popularity: Mlp,
    pub popularity_report: TrainReport,
    pub popularity_test_rmse: Option<f64>,
}

/// Trains both forecasters on 80% of the series and evaluates on the rest.
/// Mobility uses `trajectories` (GPS or synthetic); popularity uses a
/// generated Zipf drift series of the same length.
pub fn run_predict(
    cfg: &ExperimentConfig,
    trajectories: &[Trajectory],
    seed: u64,
) -> Result<PredictOutcome> {
    cfg.validate()?;
    let mob = &cfg.mobility_net;
    let pop = &cfg.popularity_net;
    let split_rows = |len: usize| (len * 4 / 5).max(1);

    let train_rows: Vec<Vec<f64>> = trajectories
        .iter()
        .flat_map(|t| t.features()[..split_rows(t.len())].to_vec())
        .collect();
    let mscaler = MinMaxScaler::fit(&train_rows)?;
    let (mut mtrain, mut mtest) = (WindowedDataset::default(), WindowedDataset::default());
    for t in trajectories {
        let ds = windowize(&t.features(), mob.window_in, mob.window_out, &mscaler)?;
        let cut = split_rows(t.len()).saturating_sub(mob.window_in + mob.window_out - 1);
        let (a, b) = ds.split_at(cut);
        mtrain.extend(a)?;
        if !b.is_empty() {
            mtest.extend(b)?;
        }
    }
    let mut mobility = Mlp::init(&mob.layer_sizes, derive_seed(seed, 0, TAG_MOBILITY_NET))?;
    let mobility_report = train(&mut mobility, &mtrain, &mob.train)?;
    let mobility_test_rmse =
        if mtest.is_empty() { None } else { Some(crate::predictor::evaluate(&mobility, &mtest)?) };

    let len = trajectories.iter().map(Trajectory::len).max().unwrap_or(0).max(pop.window_in + pop.window_out + 5);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, TAG_TRUTH));
    let series = PopularitySeries::generate(
        zipf_popularity(cfg.scenario.num_contents, cfg.demand.zipf_exponent),
        len,
        cfg.demand.jitter_sigma.max(1e-3),
        &mut rng,
    )?;
    let rows: Vec<Vec<Vec<f64>>> = (0..series.num_contents()).map(|f| series.content_rows(f)).collect();
    let cut_rows = split_rows(len);
    let pscaler = MinMaxScaler::fit(&rows.iter().flat_map(|r| r[..cut_rows].to_vec()).collect::<Vec<_>>())?;
    let (mut ptrain, mut ptest) = (WindowedDataset::default(), WindowedDataset::default());
    for r in &rows {
        let ds = windowize(r, pop.window_in, pop.window_out, &pscaler)?;
        let (a, b) = ds.split_at(cut_rows.saturating_sub(pop.window_in + pop.window_out - 1));
        ptrain.extend(a)?;
        if !b.is_empty() {
            ptest.extend(b)?;
        }
    }
    let mut popularity = Mlp::init(&pop.layer_sizes, derive_seed(seed, 0, TAG_POPULARITY_NET))?;
    let popularity_report = train(&mut popularity, &ptrain, &pop.train)?;
    let popularity_test_rmse =
        if ptest.is_empty() { None } else { Some(crate::predictor::evaluate(&popularity, &ptest)?) };

    Ok(PredictOutcome {
        mobility,
        mobility_report,
        mobility_test_rmse,
        popularity,
        popularity_report,
        popularity_test_rmse,
    })
}

/// Synthetic single-user walk used by `predict` when no GPS file is given.
pub fn synthetic_trace(cfg: &ExperimentConfig, steps: usize, seed: u64) -> Trajectory {
    let bounds = cfg.scenario.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, TAG_TRUTH));
    let start = bounds.uniform_point(&mut rng);
    synthetic_walk(start, steps, cfg.demand.slot_seconds, cfg.demand.step_sigma_m, &bounds, &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaBenchRow {
    pub kappa: u32,
    pub run: usize,
    pub p_best: f64,
    pub converged: bool,
}

/// Repeated pursuit-automaton runs in a stationary Bernoulli environment.
pub fn la_bench(
    reward_probs: &[f64],
    kappas: &[u32],
    runs: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<LaBenchRow>> {
    if reward_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("reward probabilities must lie in [0, 1]"));
    }
    let env = BernoulliEnv { reward_probs: reward_probs.to_vec() };
    let best = env.best_action();
    let jobs: Vec<(u32, usize)> = kappas.iter().flat_map(|&k| (0..runs).map(move |r| (k, r))).collect();
    jobs.par_iter()
        .map(|&(kappa, run)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, run, kappa as u64));
            let la = run_bernoulli(&env, kappa, steps, &mut rng)?;
            let p_best = la.probs()[best];
            Ok(LaBenchRow { kappa, run, p_best, converged: p_best > 0.95 })
        })
        .collect()
}

pub fn write_la_bench(rows: &[LaBenchRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["kappa", "run", "p_best", "converged"])?;
    for r in rows {
        w.write_record([r.kappa.to_string(), r.run.to_string(), format!("{}", r.p_best), r.converged.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
