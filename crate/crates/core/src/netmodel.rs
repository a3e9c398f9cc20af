//! Physical-layer and QoE model for cooperative cache placement.
//!
//! Base stations that cache a requested content transmit it jointly, so their
//! amplitudes add coherently at the user, while base stations that do not
//! cache it act as interferers. The per-user rate is the popularity-weighted
//! Shannon rate over the content library, and the user's mean opinion score
//! (MOS) is a logarithmic function of the web-page delivery delay produced by
//! a TCP slow-start model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Users closer than this to any base station are rejected: the power-law
/// pathloss `r^-alpha` is singular at the origin.
pub const MIN_SEPARATION_M: f64 = 1.0;

/// Raw, unvalidated scenario description. This is the on-disk scenario file
/// schema (TOML), with units carried in the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioParams {
    pub bs_positions: Vec<Point>,
    pub user_positions: Vec<Point>,
    pub tx_power_w: f64,
    pub pathloss_exp: f64,
    pub noise_w: f64,
    pub bandwidth_hz: f64,
    /// Content slots per base station (uniform across base stations).
    pub cache_slots: usize,
    #[serde(default = "infinite")]
    pub fronthaul_max_bps: f64,
    #[serde(default)]
    pub min_rate_bps: f64,
    pub num_contents: usize,
}

fn infinite() -> f64 {
    f64::INFINITY
}

/// A validated deployment: geometry, radio parameters and capacity limits.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkScenario {
    params: ScenarioParams,
    /// Row-major `M x N_u` user/BS distances.
    distances: Vec<f64>,
}

impl NetworkScenario {
    pub fn new(params: ScenarioParams) -> Result<Self> {
        let p = &params;
        if p.bs_positions.is_empty() {
            return Err(Error::invalid("at least one base station is required"));
        }
        if p.user_positions.is_empty() {
            return Err(Error::invalid("at least one user is required"));
        }
        if p.num_contents == 0 {
            return Err(Error::invalid("content library must be non-empty"));
        }
        if p.cache_slots == 0 {
            return Err(Error::invalid("cache_slots must be at least 1"));
        }
        if !(p.pathloss_exp >= 2.0 && p.pathloss_exp.is_finite()) {
            return Err(Error::invalid(format!(
                "pathloss exponent must be >= 2, got {}",
                p.pathloss_exp
            )));
        }
        for (name, v) in [
            ("tx_power_w", p.tx_power_w),
            ("noise_w", p.noise_w),
            ("bandwidth_hz", p.bandwidth_hz),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(p.fronthaul_max_bps > 0.0) {
            return Err(Error::invalid("fronthaul_max_bps must be positive"));
        }
        if !(p.min_rate_bps >= 0.0 && p.min_rate_bps.is_finite()) {
            return Err(Error::invalid("min_rate_bps must be finite and >= 0"));
        }
        let total_slots = p.bs_positions.len() * p.cache_slots;
        if total_slots > p.num_contents {
            return Err(Error::invalid(format!(
                "total cache capacity {total_slots} exceeds library size {} (unit-size contents)",
                p.num_contents
            )));
        }
        let all = p.bs_positions.iter().chain(p.user_positions.iter());
        if all.clone().any(|q| !(q.x.is_finite() && q.y.is_finite())) {
            return Err(Error::invalid("positions must be finite"));
        }

        let mut distances = Vec::with_capacity(p.bs_positions.len() * p.user_positions.len());
        for (m, bs) in p.bs_positions.iter().enumerate() {
            for (i, user) in p.user_positions.iter().enumerate() {
                let d = bs.distance(user);
                if d < MIN_SEPARATION_M {
                    return Err(Error::Colocated { user: i, bs: m, distance: d });
                }
                distances.push(d);
            }
        }
        Ok(NetworkScenario { params, distances })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let params: ScenarioParams =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::new(params)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.params).expect("scenario params always serialize")
    }

    pub fn params(&self) -> &ScenarioParams {
        &self.params
    }

    pub fn num_bs(&self) -> usize {
        self.params.bs_positions.len()
    }

    pub fn num_users(&self) -> usize {
        self.params.user_positions.len()
    }

    pub fn num_contents(&self) -> usize {
        self.params.num_contents
    }

    pub fn cache_slots(&self) -> usize {
        self.params.cache_slots
    }

    pub fn distance(&self, bs: usize, user: usize) -> f64 {
        self.distances[bs * self.num_users() + user]
    }

    /// Serving base station of each user: nearest by Euclidean distance,
    /// ties to the lowest index.
    pub fn association(&self) -> Vec<usize> {
        (0..self.num_users())
            .map(|i| {
                (0..self.num_bs())
                    .fold((0, f64::INFINITY), |(best, bd), m| {
                        let d = self.distance(m, i);
                        if d < bd {
                            (m, d)
                        } else {
                            (best, bd)
                        }
                    })
                    .0
            })
            .collect()
    }

    /// The same deployment with different user positions.
    pub fn with_users(&self, users: Vec<Point>) -> Result<Self> {
        let mut params = self.params.clone();
        params.user_positions = users;
        Self::new(params)
    }
}

/// `M x S` content assignment. Entries are 0-based content indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CachePlacement {
    num_bs: usize,
    slots: usize,
    num_contents: usize,
    entries: Vec<usize>,
}

impl CachePlacement {
    pub fn new(rows: Vec<Vec<usize>>, num_contents: usize) -> Result<Self> {
        let num_bs = rows.len();
        if num_bs == 0 {
            return Err(Error::invalid("placement needs at least one row"));
        }
        let slots = rows[0].len();
        if slots == 0 || rows.iter().any(|r| r.len() != slots) {
            return Err(Error::invalid("placement rows must be non-empty and equal length"));
        }
        let entries: Vec<usize> = rows.into_iter().flatten().collect();
        Self::from_flat(num_bs, slots, num_contents, entries)
    }

    /// Builds from 1-based content labels, as written in scenario files.
    pub fn from_one_based(rows: &[Vec<usize>], num_contents: usize) -> Result<Self> {
        let mut zero = Vec::with_capacity(rows.len());
        for row in rows {
            let mut r = Vec::with_capacity(row.len());
            for &c in row {
                if c == 0 {
                    return Err(Error::invalid("1-based content labels start at 1"));
                }
                r.push(c - 1);
            }
            zero.push(r);
        }
        Self::new(zero, num_contents)
    }

    pub fn from_flat(
        num_bs: usize,
        slots: usize,
        num_contents: usize,
        entries: Vec<usize>,
    ) -> Result<Self> {
        if num_contents == 0 {
            return Err(Error::invalid("content library must be non-empty"));
        }
        if entries.len() != num_bs * slots || entries.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: num_bs * slots,
                actual: entries.len(),
            });
        }
        if let Some(&bad) = entries.iter().find(|&&c| c >= num_contents) {
            return Err(Error::invalid(format!(
                "content index {bad} out of range for library of {num_contents}"
            )));
        }
        Ok(CachePlacement { num_bs, slots, num_contents, entries })
    }

    pub fn num_bs(&self) -> usize {
        self.num_bs
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn num_contents(&self) -> usize {
        self.num_contents
    }

    pub fn get(&self, bs: usize, slot: usize) -> usize {
        self.entries[bs * self.slots + slot]
    }

    /// Row-major slot contents.
    pub fn as_slice(&self) -> &[usize] {
        &self.entries
    }

    pub(crate) fn slot_mut(&mut self, k: usize) -> &mut usize {
        &mut self.entries[k]
    }

    pub fn row(&self, bs: usize) -> &[usize] {
        &self.entries[bs * self.slots..(bs + 1) * self.slots]
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        self.entries.chunks(self.slots).map(<[usize]>::to_vec).collect()
    }

    pub fn fits(&self, scenario: &NetworkScenario) -> bool {
        self.num_bs == scenario.num_bs()
            && self.slots == scenario.cache_slots()
            && self.num_contents == scenario.num_contents()
    }

    fn check_fits(&self, scenario: &NetworkScenario) -> Result<()> {
        if self.fits(scenario) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "placement {}x{} over {} contents does not match scenario {}x{} over {}",
                self.num_bs,
                self.slots,
                self.num_contents,
                scenario.num_bs(),
                scenario.cache_slots(),
                scenario.num_contents()
            )))
        }
    }
}

impl std::fmt::Display for CachePlacement {
    /// Rows separated by `|`, 1-based labels separated by spaces.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (m, row) in self.entries.chunks(self.slots).enumerate() {
            if m > 0 {
                f.write_str("|")?;
            }
            for (k, c) in row.iter().enumerate() {
                if k > 0 {
                    f.write_str(" ")?;
                }
                write!(f, "{}", c + 1)?;
            }
        }
        Ok(())
    }
}

/// Binary BS-by-content membership derived from a placement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndicatorMatrix {
    num_bs: usize,
    num_contents: usize,
    bits: Vec<bool>,
}

impl IndicatorMatrix {
    pub fn get(&self, bs: usize, content: usize) -> bool {
        self.bits[bs * self.num_contents + content]
    }

    pub fn num_bs(&self) -> usize {
        self.num_bs
    }

    pub fn num_contents(&self) -> usize {
        self.num_contents
    }

    /// Number of base stations holding `content`.
    pub fn holders(&self, content: usize) -> usize {
        (0..self.num_bs).filter(|&m| self.get(m, content)).count()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.bits.chunks(self.num_contents).map(|r| r.iter().filter(|&&b| b).count()).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.bits.chunks(self.num_contents).map(|r| r.iter().map(|&b| b as u8).collect()).collect()
    }
}

pub fn indicator_matrix(placement: &CachePlacement) -> IndicatorMatrix {
    let (m_count, f_count) = (placement.num_bs(), placement.num_contents());
    let mut bits = vec![false; m_count * f_count];
    for m in 0..m_count {
        for &c in placement.row(m) {
            bits[m * f_count + c] = true;
        }
    }
    IndicatorMatrix { num_bs: m_count, num_contents: f_count, bits }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FadingMode {
    /// |h| = 1 on every link.
    Expectation,
    /// |h| Rayleigh distributed with unit mean power, E[|h|^2] = 1.
    Rayleigh,
}

impl std::fmt::Display for FadingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FadingMode::Expectation => "expectation",
            FadingMode::Rayleigh => "rayleigh",
        })
    }
}

/// Small-scale fading magnitudes `|h_mi|`, row-major `M x N_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct FadingRealization {
    num_bs: usize,
    num_users: usize,
    magnitudes: Vec<f64>,
}

impl FadingRealization {
    pub fn unit(num_bs: usize, num_users: usize) -> Self {
        FadingRealization { num_bs, num_users, magnitudes: vec![1.0; num_bs * num_users] }
    }

    pub fn rayleigh<R: Rng + ?Sized>(num_bs: usize, num_users: usize, rng: &mut R) -> Self {
        // |h| = sqrt(E) with E ~ Exp(1) gives E[|h|^2] = 1.
        let magnitudes = (0..num_bs * num_users)
            .map(|_| {
                let u: f64 = rng.random();
                (-(1.0 - u).ln()).sqrt()
            })
            .collect();
        FadingRealization { num_bs, num_users, magnitudes }
    }

    pub fn draw<R: Rng + ?Sized>(
        mode: FadingMode,
        num_bs: usize,
        num_users: usize,
        rng: &mut R,
    ) -> Self {
        match mode {
            FadingMode::Expectation => Self::unit(num_bs, num_users),
            FadingMode::Rayleigh => Self::rayleigh(num_bs, num_users, rng),
        }
    }

    pub fn from_magnitudes(num_bs: usize, num_users: usize, magnitudes: Vec<f64>) -> Result<Self> {
        if magnitudes.len() != num_bs * num_users {
            return Err(Error::DimensionMismatch {
                expected: num_bs * num_users,
                actual: magnitudes.len(),
            });
        }
        if magnitudes.iter().any(|h| !(*h >= 0.0 && h.is_finite())) {
            return Err(Error::invalid("fading magnitudes must be finite and >= 0"));
        }
        Ok(FadingRealization { num_bs, num_users, magnitudes })
    }

    pub fn magnitude(&self, bs: usize, user: usize) -> f64 {
        self.magnitudes[bs * self.num_users + user]
    }

    pub fn num_bs(&self) -> usize {
        self.num_bs
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }
}

/// Constants of the web-browsing QoE model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QoeParams {
    /// Round-trip time, seconds.
    pub rtt: f64,
    /// Web page size, bits.
    pub fs: f64,
    /// Maximum segment size, bits.
    pub mss: f64,
    pub c1: f64,
    pub c2: f64,
    pub mos_min: f64,
    pub mos_max: f64,
    /// Lower bound on the modelled delay, seconds.
    pub delay_floor: f64,
}

impl Default for QoeParams {
    fn default() -> Self {
        QoeParams {
            rtt: 0.1,
            fs: 1.0e6,
            mss: 11680.0,
            c1: 1.120,
            c2: 4.6746,
            mos_min: 1.0,
            mos_max: 5.0,
            delay_floor: 1.0e-3,
        }
    }
}

impl QoeParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rtt", self.rtt),
            ("fs", self.fs),
            ("mss", self.mss),
            ("delay_floor", self.delay_floor),
            ("c1", self.c1),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("qoe.{name} must be positive, got {v}")));
            }
        }
        if !self.c2.is_finite() || !(self.mos_min < self.mos_max) {
            return Err(Error::invalid("qoe requires finite c2 and mos_min < mos_max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayBreakdown {
    pub l1: f64,
    pub l2: f64,
    /// Slow-start cycles actually used: `max(0, min(l1, l2))`.
    pub l_effective: f64,
    pub delay: f64,
}

pub fn page_delay(rate: f64, qoe: &QoeParams) -> Result<DelayBreakdown> {
    if !(rate > 0.0) {
        return Err(Error::NonPositiveRate(rate));
    }
    let l1 = (rate * qoe.rtt / qoe.mss + 1.0).log2() - 1.0;
    let l2 = (qoe.fs / (2.0 * qoe.mss) + 1.0).log2() - 1.0;
    let l = l1.min(l2).max(0.0);
    let raw = 3.0 * qoe.rtt + qoe.fs / rate + l * (qoe.mss / rate + qoe.rtt)
        - 2.0 * qoe.mss * (l.exp2() - 1.0) / rate;
    Ok(DelayBreakdown { l1, l2, l_effective: l, delay: raw.max(qoe.delay_floor) })
}

/// Mean opinion score of a user receiving `rate` bit/s, clamped to
/// `[mos_min, mos_max]`. A zero rate scores `mos_min`.
pub fn mos(rate: f64, qoe: &QoeParams) -> f64 {
    match page_delay(rate, qoe) {
        Ok(d) => mos_from_delay(d.delay, qoe),
        Err(_) => qoe.mos_min,
    }
}

pub fn mos_from_delay(delay: f64, qoe: &QoeParams) -> f64 {
    let raw = -qoe.c1 * delay.ln() + qoe.c2;
    raw.clamp(qoe.mos_min, qoe.mos_max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub per_bs_fronthaul_load: Vec<f64>,
    pub per_user_rate: Vec<f64>,
    pub fronthaul_ok: Vec<bool>,
    pub min_rate_ok: Vec<bool>,
    pub feasible: bool,
}

/// Link gains of one scenario under one fading realization, precomputed so
/// that a placement can be scored without recomputing pathloss.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    num_bs: usize,
    num_users: usize,
    num_contents: usize,
    slots: usize,
    bandwidth: f64,
    noise: f64,
    fronthaul_max: f64,
    min_rate: f64,
    /// `sqrt(rho) |h| r^(-alpha/2)`, row-major `M x N_u`.
    amplitude: Vec<f64>,
    /// `rho |h|^2 r^(-alpha)`, row-major `M x N_u`.
    power: Vec<f64>,
    association: Vec<usize>,
}

impl ChannelModel {
    pub fn new(scenario: &NetworkScenario, fading: &FadingRealization) -> Result<Self> {
        let (m_count, n_count) = (scenario.num_bs(), scenario.num_users());
        if fading.num_bs() != m_count || fading.num_users() != n_count {
            return Err(Error::DimensionMismatch {
                expected: m_count * n_count,
                actual: fading.num_bs() * fading.num_users(),
            });
        }
        let p = scenario.params();
        let sqrt_rho = p.tx_power_w.sqrt();
        let mut amplitude = Vec::with_capacity(m_count * n_count);
        let mut power = Vec::with_capacity(m_count * n_count);
        for m in 0..m_count {
            for i in 0..n_count {
                let r = scenario.distance(m, i);
                let h = fading.magnitude(m, i);
                amplitude.push(sqrt_rho * h * r.powf(-p.pathloss_exp / 2.0));
                power.push(p.tx_power_w * h * h * r.powf(-p.pathloss_exp));
            }
        }
        Ok(ChannelModel {
            num_bs: m_count,
            num_users: n_count,
            num_contents: p.num_contents,
            slots: p.cache_slots,
            bandwidth: p.bandwidth_hz,
            noise: p.noise_w,
            fronthaul_max: p.fronthaul_max_bps,
            min_rate: p.min_rate_bps,
            amplitude,
            power,
            association: scenario.association(),
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    /// Nearest-BS index of every user.
    pub fn association(&self) -> &[usize] {
        &self.association
    }

    fn check_placement(&self, ind: &IndicatorMatrix) -> Result<()> {
        if ind.num_bs() != self.num_bs || ind.num_contents() != self.num_contents {
            return Err(Error::DimensionMismatch {
                expected: self.num_bs * self.num_contents,
                actual: ind.num_bs() * ind.num_contents(),
            });
        }
        Ok(())
    }

    pub fn check_popularity<P: PopularityView + ?Sized>(&self, popularity: &P) -> Result<()> {
        if popularity.num_contents() != self.num_contents {
            return Err(Error::DimensionMismatch {
                expected: self.num_contents,
                actual: popularity.num_contents(),
            });
        }
        if let Some(rows) = popularity.num_rows() {
            if rows != self.num_users {
                return Err(Error::DimensionMismatch { expected: self.num_users, actual: rows });
            }
            if let Some(bad) = (0..rows).map(|i| popularity.of_user(i).len()).find(|&l| l != self.num_contents) {
                return Err(Error::DimensionMismatch { expected: self.num_contents, actual: bad });
            }
        }
        Ok(())
    }

    /// Cooperative SINR of `user` for `content`. Zero when no BS holds it.
    pub fn sinr(&self, ind: &IndicatorMatrix, user: usize, content: usize) -> f64 {
        let mut coherent = 0.0;
        let mut interference = 0.0;
        let mut any = false;
        for m in 0..self.num_bs {
            let k = m * self.num_users + user;
            if ind.get(m, content) {
                any = true;
                coherent += self.amplitude[k];
            } else {
                interference += self.power[k];
            }
        }
        if !any {
            return 0.0;
        }
        coherent * coherent / (self.noise + interference)
    }

    /// Per-content spectral efficiency times holder count, `sum_m x_mf log2(1 + SINR)`.
    fn content_gain(&self, ind: &IndicatorMatrix, user: usize, content: usize) -> f64 {
        let holders = ind.holders(content);
        if holders == 0 {
            return 0.0;
        }
        holders as f64 * (1.0 + self.sinr(ind, user, content)).log2()
    }

    pub fn user_rate<P: PopularityView + ?Sized>(
        &self,
        ind: &IndicatorMatrix,
        popularity: &P,
        user: usize,
    ) -> f64 {
        let popularity = popularity.of_user(user);
        let s: f64 = (0..self.num_contents)
            .filter(|&f| popularity[f] != 0.0)
            .map(|f| popularity[f] * self.content_gain(ind, user, f))
            .sum();
        self.bandwidth * s
    }

    pub fn user_rates<P: PopularityView + ?Sized>(
        &self,
        ind: &IndicatorMatrix,
        popularity: &P,
    ) -> Result<Vec<f64>> {
        self.check_placement(ind)?;
        self.check_popularity(popularity)?;
        Ok((0..self.num_users).map(|i| self.user_rate(ind, popularity, i)).collect())
    }

    pub fn sum_mos<P: PopularityView + ?Sized>(
        &self,
        placement: &CachePlacement,
        popularity: &P,
        qoe: &QoeParams,
    ) -> Result<f64> {
        let ind = indicator_matrix(placement);
        Ok(self.user_rates(&ind, popularity)?.into_iter().map(|r| mos(r, qoe)).sum())
    }

    pub fn check_constraints<P: PopularityView + ?Sized>(
        &self,
        placement: &CachePlacement,
        popularity: &P,
    ) -> Result<FeasibilityReport> {
        let ind = indicator_matrix(placement);
        let per_user_rate = self.user_rates(&ind, popularity)?;
        let mut load = vec![0.0; self.num_bs];
        for i in 0..self.num_users {
            let m = self.association[i];
            let popularity = popularity.of_user(i);
            let s: f64 = (0..self.num_contents)
                .filter(|&f| ind.get(m, f))
                .map(|f| popularity[f] * (1.0 + self.sinr(&ind, i, f)).log2())
                .sum();
            load[m] += self.bandwidth * s;
        }
        let fronthaul_ok: Vec<bool> = load.iter().map(|&l| l <= self.fronthaul_max).collect();
        let min_rate_ok: Vec<bool> = per_user_rate.iter().map(|&r| r >= self.min_rate).collect();
        let feasible = fronthaul_ok.iter().chain(min_rate_ok.iter()).all(|&b| b);
        Ok(FeasibilityReport {
            per_bs_fronthaul_load: load,
            per_user_rate,
            fronthaul_ok,
            min_rate_ok,
            feasible,
        })
    }

    /// Scores a placement: sum MOS plus constraint feasibility in one pass.
    pub fn evaluate<P: PopularityView + ?Sized>(
        &self,
        placement: &CachePlacement,
        popularity: &P,
        qoe: &QoeParams,
    ) -> Result<Evaluation> {
        if placement.num_bs() != self.num_bs || placement.slots() != self.slots {
            return Err(Error::DimensionMismatch {
                expected: self.num_bs * self.slots,
                actual: placement.num_bs() * placement.slots(),
            });
        }
        let report = self.check_constraints(placement, popularity)?;
        let sum_mos = report.per_user_rate.iter().map(|&r| mos(r, qoe)).sum();
        Ok(Evaluation { sum_mos, feasible: report.feasible })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub sum_mos: f64,
    pub feasible: bool,
}

pub fn sinr(
    scenario: &NetworkScenario,
    placement: &CachePlacement,
    fading: &FadingRealization,
    user: usize,
    content: usize,
) -> Result<f64> {
    placement.check_fits(scenario)?;
    if user >= scenario.num_users() {
        return Err(Error::invalid(format!("user index {user} out of range")));
    }
    if content >= scenario.num_contents() {
        return Err(Error::invalid(format!("content index {content} out of range")));
    }
    let channel = ChannelModel::new(scenario, fading)?;
    Ok(channel.sinr(&indicator_matrix(placement), user, content))
}

pub fn user_rate<P: PopularityView + ?Sized>(
    scenario: &NetworkScenario,
    placement: &CachePlacement,
    fading: &FadingRealization,
    popularity: &P,
    user: usize,
) -> Result<f64> {
    placement.check_fits(scenario)?;
    if user >= scenario.num_users() {
        return Err(Error::invalid(format!("user index {user} out of range")));
    }
    let channel = ChannelModel::new(scenario, fading)?;
    let ind = indicator_matrix(placement);
    channel.check_popularity(popularity)?;
    Ok(channel.user_rate(&ind, popularity, user))
}

/// Total MOS over all users: the placement objective.
pub fn sum_mos<P: PopularityView + ?Sized>(
    scenario: &NetworkScenario,
    placement: &CachePlacement,
    fading: &FadingRealization,
    popularity: &P,
    qoe: &QoeParams,
) -> Result<f64> {
    placement.check_fits(scenario)?;
    ChannelModel::new(scenario, fading)?.sum_mos(placement, popularity, qoe)
}

pub fn check_constraints<P: PopularityView + ?Sized>(
    scenario: &NetworkScenario,
    placement: &CachePlacement,
    fading: &FadingRealization,
    popularity: &P,
) -> Result<FeasibilityReport> {
    placement.check_fits(scenario)?;
    ChannelModel::new(scenario, fading)?.check_constraints(placement, popularity)
}

/// Content request probabilities, either shared by all users or one vector
/// per user.
pub trait PopularityView {
    fn num_contents(&self) -> usize;
    /// Number of per-user rows, or `None` when one vector serves everyone.
    fn num_rows(&self) -> Option<usize>;
    fn of_user(&self, user: usize) -> &[f64];
}

impl PopularityView for [f64] {
    fn num_contents(&self) -> usize {
        self.len()
    }
    fn num_rows(&self) -> Option<usize> {
        None
    }
    fn of_user(&self, _user: usize) -> &[f64] {
        self
    }
}

impl<const N: usize> PopularityView for [f64; N] {
    fn num_contents(&self) -> usize {
        N
    }
    fn num_rows(&self) -> Option<usize> {
        None
    }
    fn of_user(&self, _user: usize) -> &[f64] {
        self
    }
}

impl PopularityView for Vec<f64> {
    fn num_contents(&self) -> usize {
        self.len()
    }
    fn num_rows(&self) -> Option<usize> {
        None
    }
    fn of_user(&self, _user: usize) -> &[f64] {
        self
    }
}

/// Owned popularity: one vector for everyone, or one per user.
#[derive(Debug, Clone, PartialEq)]
pub enum Popularity {
    Shared(Vec<f64>),
    PerUser(Vec<Vec<f64>>),
}

impl Popularity {
    /// Mean request distribution over users.
    pub fn aggregate(&self) -> Vec<f64> {
        match self {
            Popularity::Shared(p) => p.clone(),
            Popularity::PerUser(rows) => {
                let f = rows.first().map_or(0, Vec::len);
                let mut acc = vec![0.0; f];
                for r in rows {
                    for (a, v) in acc.iter_mut().zip(r) {
                        *a += v;
                    }
                }
                let n = rows.len().max(1) as f64;
                acc.into_iter().map(|a| a / n).collect()
            }
        }
    }

    /// Every distinct vector in row order (one for `Shared`).
    pub fn rows(&self) -> Vec<&[f64]> {
        match self {
            Popularity::Shared(p) => vec![p.as_slice()],
            Popularity::PerUser(rows) => rows.iter().map(Vec::as_slice).collect(),
        }
    }
}

impl From<Vec<f64>> for Popularity {
    fn from(p: Vec<f64>) -> Self {
        Popularity::Shared(p)
    }
}

impl PopularityView for Popularity {
    fn num_contents(&self) -> usize {
        match self {
            Popularity::Shared(p) => p.len(),
            Popularity::PerUser(rows) => rows.first().map_or(0, Vec::len),
        }
    }
    fn num_rows(&self) -> Option<usize> {
        match self {
            Popularity::Shared(_) => None,
            Popularity::PerUser(rows) => Some(rows.len()),
        }
    }
    fn of_user(&self, user: usize) -> &[f64] {
        match self {
            Popularity::Shared(p) => p,
            Popularity::PerUser(rows) => &rows[user],
        }
    }
}

/// `10^((dbm - 30) / 10)` watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(bs: Vec<Point>, users: Vec<Point>, slots: usize, contents: usize) -> ScenarioParams {
        ScenarioParams {
            bs_positions: bs,
            user_positions: users,
            tx_power_w: 0.1,
            pathloss_exp: 3.0,
            noise_w: 10f64.powf(-12.5),
            bandwidth_hz: 20.0e6,
            cache_slots: slots,
            fronthaul_max_bps: f64::INFINITY,
            min_rate_bps: 0.0,
            num_contents: contents,
        }
    }

    fn two_bs(r1: f64, r2: f64, contents: usize) -> NetworkScenario {
        // User at the origin; BS 1 at (r1, 0), BS 2 at (-r2, 0).
        NetworkScenario::new(params(
            vec![Point::new(r1, 0.0), Point::new(-r2, 0.0)],
            vec![Point::new(0.0, 0.0)],
            1,
            contents,
        ))
        .unwrap()
    }

    #[test]
    fn indicator_examples() {
        let p = CachePlacement::from_one_based(&[vec![1, 2], vec![3, 4]], 4).unwrap();
        assert_eq!(indicator_matrix(&p).to_rows(), vec![vec![1, 1, 0, 0], vec![0, 0, 1, 1]]);
        let p = CachePlacement::from_one_based(&[vec![1, 1]], 3).unwrap();
        assert_eq!(indicator_matrix(&p).to_rows(), vec![vec![1, 0, 0]]);
        let p = CachePlacement::from_one_based(&[vec![2], vec![2]], 2).unwrap();
        assert_eq!(indicator_matrix(&p).to_rows(), vec![vec![0, 1], vec![0, 1]]);
    }

    #[test]
    fn placement_rejects_out_of_range() {
        assert!(CachePlacement::new(vec![vec![0, 4]], 4).is_err());
        assert!(CachePlacement::new(vec![vec![0], vec![1, 2]], 4).is_err());
        assert!(CachePlacement::from_one_based(&[vec![0]], 4).is_err());
    }

    #[test]
    fn scenario_rejects_colocated_user() {
        let err = NetworkScenario::new(params(
            vec![Point::new(10.0, 10.0)],
            vec![Point::new(10.5, 10.0)],
            1,
            2,
        ))
        .unwrap_err();
        assert!(matches!(err, Error::Colocated { user: 0, bs: 0, .. }));
    }

    #[test]
    fn scenario_rejects_bad_radio_params() {
        let mut p = params(vec![Point::new(0.0, 0.0)], vec![Point::new(5.0, 0.0)], 1, 2);
        p.pathloss_exp = 1.5;
        assert!(NetworkScenario::new(p.clone()).is_err());
        p.pathloss_exp = 3.0;
        p.tx_power_w = 0.0;
        assert!(NetworkScenario::new(p.clone()).is_err());
        p.tx_power_w = 0.1;
        p.cache_slots = 3;
        assert!(NetworkScenario::new(p).is_err(), "3 slots over 2 contents violates capacity");
    }

    #[test]
    fn scenario_toml_round_trip() {
        let s = two_bs(500.0, 1500.0, 4);
        let back = NetworkScenario::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn single_bs_sinr_is_snr() {
        let s = NetworkScenario::new(params(
            vec![Point::new(300.0, 400.0)],
            vec![Point::new(0.0, 0.0)],
            1,
            2,
        ))
        .unwrap();
        let x = CachePlacement::new(vec![vec![0]], 2).unwrap();
        let fad = FadingRealization::unit(1, 1);
        let got = sinr(&s, &x, &fad, 0, 0).unwrap();
        let p = s.params();
        assert_relative_eq!(got, p.tx_power_w * 500f64.powf(-3.0) / p.noise_w, max_relative = 1e-14);
        assert_eq!(sinr(&s, &x, &fad, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn full_cooperation_has_no_interference() {
        let s = two_bs(500.0, 1500.0, 2);
        let x = CachePlacement::new(vec![vec![0], vec![0]], 2).unwrap();
        let fad = FadingRealization::unit(2, 1);
        let p = s.params();
        let amp = p.tx_power_w.sqrt() * (500f64.powf(-1.5) + 1500f64.powf(-1.5));
        assert_eq!(sinr(&s, &x, &fad, 0, 0).unwrap(), amp * amp / p.noise_w);
    }

    #[test]
    fn sinr_golden_two_bs() {
        // Reference computed independently:
        // 0.1*500^-3 / (0.1*1500^-3 + 10^-12.5)
        let s = two_bs(500.0, 1500.0, 2);
        let x = CachePlacement::new(vec![vec![0], vec![1]], 2).unwrap();
        let fad = FadingRealization::unit(2, 1);
        assert_relative_eq!(
            sinr(&s, &x, &fad, 0, 0).unwrap(),
            26.714880440067283,
            max_relative = 1e-12
        );
    }

    #[test]
    fn rate_reductions() {
        let s = NetworkScenario::new(params(
            vec![Point::new(300.0, 400.0)],
            vec![Point::new(0.0, 0.0)],
            1,
            1,
        ))
        .unwrap();
        let x = CachePlacement::new(vec![vec![0]], 1).unwrap();
        let fad = FadingRealization::unit(1, 1);
        let snr = sinr(&s, &x, &fad, 0, 0).unwrap();
        let r = user_rate(&s, &x, &fad, &[1.0], 0).unwrap();
        assert_relative_eq!(r, 20.0e6 * (1.0 + snr).log2(), max_relative = 1e-14);

        // Nothing relevant cached: content 1 has zero popularity.
        let s2 = two_bs(500.0, 1500.0, 2);
        let x2 = CachePlacement::new(vec![vec![1], vec![1]], 2).unwrap();
        let r0 = user_rate(&s2, &x2, &FadingRealization::unit(2, 1), &[1.0, 0.0], 0).unwrap();
        assert_eq!(r0, 0.0);
    }

    #[test]
    fn rate_uses_popularity_length() {
        let s = two_bs(500.0, 1500.0, 2);
        let x = CachePlacement::new(vec![vec![0], vec![1]], 2).unwrap();
        assert!(user_rate(&s, &x, &FadingRealization::unit(2, 1), &[1.0], 0).is_err());
    }

    #[test]
    fn delay_when_page_fits_one_cycle() {
        let q = QoeParams { fs: 2.0 * 11680.0, ..QoeParams::default() };
        let d = page_delay(5.0e6, &q).unwrap();
        assert_eq!(d.l2, 0.0);
        assert_eq!(d.l_effective, 0.0);
        assert_relative_eq!(d.delay, 3.0 * q.rtt + q.fs / 5.0e6, max_relative = 1e-15);
    }

    #[test]
    fn delay_high_rate_limit() {
        let q = QoeParams::default();
        let d = page_delay(1.0e15, &q).unwrap();
        assert!(d.l1 > d.l2);
        assert_relative_eq!(d.delay, 3.0 * q.rtt + d.l2 * q.rtt, max_relative = 1e-6);
    }

    #[test]
    fn delay_golden() {
        // rate 1e6, RTT 0.1, FS 1e6, MSS 11680; hand evaluation of the
        // slow-start delay formula.
        let d = page_delay(1.0e6, &QoeParams::default()).unwrap();
        assert_relative_eq!(d.l1, 2.257258667329635, max_relative = 1e-13);
        assert_relative_eq!(d.l2, 4.453129664600315, max_relative = 1e-13);
        assert_eq!(d.l_effective, d.l1);
        assert_relative_eq!(d.delay, 1.4637706479673738, max_relative = 1e-13);
    }

    #[test]
    fn delay_rejects_zero_rate() {
        assert!(matches!(page_delay(0.0, &QoeParams::default()), Err(Error::NonPositiveRate(_))));
        assert!(page_delay(-1.0, &QoeParams::default()).is_err());
    }

    #[test]
    fn mos_anchors() {
        let q = QoeParams::default();
        assert_eq!(mos_from_delay(1.0, &q), 4.6746);
        assert_eq!(mos(0.0, &q), 1.0);
        assert_relative_eq!(mos(1.0e6, &q), 4.247862368912963, max_relative = 1e-13);
    }

    #[test]
    fn mos_monotone_on_grid() {
        let q = QoeParams::default();
        let grid: Vec<f64> = (0..100).map(|k| 10f64.powf(4.0 + 4.0 * k as f64 / 99.0)).collect();
        let scores: Vec<f64> = grid.iter().map(|&r| mos(r, &q)).collect();
        for w in scores.windows(2) {
            assert!(w[1] >= w[0], "{:?}", w);
        }
        assert!(scores.iter().all(|&m| (1.0..=5.0).contains(&m)));
    }

    #[test]
    fn sum_mos_singleton_and_duplicate_users() {
        let mk = |users: Vec<Point>| {
            NetworkScenario::new(params(
                vec![Point::new(0.0, 0.0), Point::new(2000.0, 0.0)],
                users,
                1,
                3,
            ))
            .unwrap()
        };
        let x = CachePlacement::new(vec![vec![0], vec![1]], 3).unwrap();
        let pop = [0.5, 0.3, 0.2];
        let q = QoeParams::default();
        let u = Point::new(1500.0, 900.0);
        let one = mk(vec![u]);
        let two = mk(vec![u, u]);
        let m1 = sum_mos(&one, &x, &FadingRealization::unit(2, 1), &pop, &q).unwrap();
        let rate = user_rate(&one, &x, &FadingRealization::unit(2, 1), &pop, 0).unwrap();
        assert_eq!(m1, mos(rate, &q));
        let m2 = sum_mos(&two, &x, &FadingRealization::unit(2, 2), &pop, &q).unwrap();
        assert_eq!(m2, 2.0 * m1);
    }

    #[test]
    fn vacuous_constraints_are_feasible() {
        let s = two_bs(500.0, 1500.0, 2);
        let x = CachePlacement::new(vec![vec![0], vec![1]], 2).unwrap();
        let rep = check_constraints(&s, &x, &FadingRealization::unit(2, 1), &[0.6, 0.4]).unwrap();
        assert!(rep.feasible);
    }

    #[test]
    fn zero_rate_users_fail_min_rate() {
        let mut p = params(
            vec![Point::new(0.0, 0.0)],
            vec![Point::new(100.0, 0.0), Point::new(0.0, 300.0)],
            1,
            2,
        );
        p.min_rate_bps = 1.0;
        let s = NetworkScenario::new(p).unwrap();
        let x = CachePlacement::new(vec![vec![1]], 2).unwrap();
        let rep = check_constraints(&s, &x, &FadingRealization::unit(1, 2), &[1.0, 0.0]).unwrap();
        assert_eq!(rep.min_rate_ok, vec![false, false]);
        assert!(!rep.feasible);
    }

    #[test]
    fn fronthaul_flags_bs_above_half_peak() {
        let bs = vec![Point::new(1000.0, 2000.0), Point::new(3000.0, 2000.0)];
        let users: Vec<Point> = (0..12)
            .map(|k| Point::new(150.0 + 300.0 * k as f64, 1000.0 + 170.0 * (k % 5) as f64))
            .collect();
        let base = params(bs, users, 2, 5);
        let pop = [0.4, 0.25, 0.15, 0.12, 0.08];
        let x = CachePlacement::new(vec![vec![0, 1], vec![2, 0]], 5).unwrap();
        let s = NetworkScenario::new(base.clone()).unwrap();
        let fad = FadingRealization::unit(2, 12);
        let open = check_constraints(&s, &x, &fad, &pop).unwrap();
        let peak = open.per_bs_fronthaul_load.iter().cloned().fold(0.0, f64::max);
        let limit = 0.5 * peak;
        let tight = NetworkScenario::new(ScenarioParams { fronthaul_max_bps: limit, ..base })
            .unwrap();
        let rep = check_constraints(&tight, &x, &fad, &pop).unwrap();
        let expected: Vec<bool> = open.per_bs_fronthaul_load.iter().map(|&l| l <= limit).collect();
        assert_eq!(rep.fronthaul_ok, expected);
        assert_eq!(rep.per_bs_fronthaul_load, open.per_bs_fronthaul_load);
        assert!(!rep.feasible);
    }

    #[test]
    fn association_nearest_with_low_index_ties() {
        let s = NetworkScenario::new(params(
            vec![Point::new(-100.0, 0.0), Point::new(100.0, 0.0)],
            vec![Point::new(0.0, 0.0), Point::new(90.0, 0.0)],
            1,
            2,
        ))
        .unwrap();
        assert_eq!(s.association(), vec![0, 1]);
    }

    #[test]
    fn dbm_conversions() {
        assert_relative_eq!(dbm_to_watts(20.0), 0.1, max_relative = 1e-15);
        assert_relative_eq!(dbm_to_watts(-95.0), 10f64.powf(-12.5), max_relative = 1e-14);
    }

    #[test]
    fn rayleigh_unit_power() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let f = FadingRealization::rayleigh(10, 10_000, &mut rng);
        let mean_sq: f64 = f.magnitudes.iter().map(|h| h * h).sum::<f64>() / 1.0e5;
        assert!((mean_sq - 1.0).abs() < 0.02, "{mean_sq}");
        assert!(f.magnitudes.iter().all(|&h| h >= 0.0));
    }

    fn arb_setup() -> impl Strategy<Value = (NetworkScenario, CachePlacement, Vec<f64>)> {
        (2usize..4, 1usize..3, 1usize..6).prop_flat_map(|(m, s, n)| {
            let f = m * s + 1;
            (
                prop::collection::vec((0.0..4000.0f64, 0.0..4000.0f64), m),
                prop::collection::vec((0.0..4000.0f64, 0.0..4000.0f64), n),
                prop::collection::vec(0..f, m * s),
                prop::collection::vec(0.01..1.0f64, f),
            )
                .prop_filter_map("colocated", move |(bs, us, entries, w)| {
                    let total: f64 = w.iter().sum();
                    let pop = w.iter().map(|x| x / total).collect();
                    let sc = NetworkScenario::new(params(
                        bs.into_iter().map(|(x, y)| Point::new(x, y)).collect(),
                        us.into_iter().map(|(x, y)| Point::new(x, y)).collect(),
                        s,
                        f,
                    ))
                    .ok()?;
                    let x = CachePlacement::from_flat(m, s, f, entries).ok()?;
                    Some((sc, x, pop))
                })
        })
    }

    proptest! {
        #[test]
        fn sum_mos_permutation_invariant((sc, x, pop) in arb_setup(), rot in 0usize..5) {
            let q = QoeParams::default();
            let fad = FadingRealization::unit(sc.num_bs(), sc.num_users());
            let base = sum_mos(&sc, &x, &fad, &pop, &q).unwrap();
            // Rotate users.
            let mut users = sc.params().user_positions.clone();
            let k = rot % users.len();
            users.rotate_left(k);
            let sc2 = sc.with_users(users).unwrap();
            let m2 = sum_mos(&sc2, &x, &fad, &pop, &q).unwrap();
            prop_assert!((base - m2).abs() <= 1e-9 * base.abs());
            // Reverse slots within each row.
            let rows: Vec<Vec<usize>> =
                x.rows().into_iter().map(|mut r| { r.reverse(); r }).collect();
            let x2 = CachePlacement::new(rows, x.num_contents()).unwrap();
            prop_assert_eq!(base, sum_mos(&sc, &x2, &fad, &pop, &q).unwrap());
            let per_user = base / sc.num_users() as f64;
            prop_assert!((1.0..=5.0).contains(&per_user));
        }

        #[test]
        fn indicator_rows_bounded_by_capacity((sc, x, _pop) in arb_setup()) {
            let ind = indicator_matrix(&x);
            prop_assert!(ind.row_sums().iter().all(|&r| r <= sc.cache_slots()));
        }

        #[test]
        fn adding_holder_helps_signal((sc, x, _pop) in arb_setup(), user in 0usize..6, slot in 0usize..8) {
            let fad = FadingRealization::unit(sc.num_bs(), sc.num_users());
            let ch = ChannelModel::new(&sc, &fad).unwrap();
            let user = user % sc.num_users();
            let content = x.as_slice()[slot % x.as_slice().len()];
            let ind = indicator_matrix(&x);
            // Put `content` into a BS that lacks it.
            if let Some(m) = (0..sc.num_bs()).find(|&m| !ind.get(m, content)) {
                let mut y = x.clone();
                *y.slot_mut(m * y.slots()) = content;
                let ind2 = indicator_matrix(&y);
                let (num1, int1) = parts(&ch, &ind, user, content);
                let (num2, int2) = parts(&ch, &ind2, user, content);
                prop_assert!(num2 >= num1);
                prop_assert!(int2 <= int1);
            }
        }

        #[test]
        fn delay_cycles_bounded(rate in 1.0e3..1.0e10f64) {
            let d = page_delay(rate, &QoeParams::default()).unwrap();
            prop_assert!(d.l2 >= 0.0);
            prop_assert!(d.l_effective >= 0.0 && d.l_effective <= d.l2);
            prop_assert!(d.delay >= 1.0e-3);
        }
    }

    fn parts(ch: &ChannelModel, ind: &IndicatorMatrix, user: usize, content: usize) -> (f64, f64) {
        let mut amp = 0.0;
        let mut int = 0.0;
        for m in 0..ch.num_bs {
            let k = m * ch.num_users + user;
            if ind.get(m, content) {
                amp += ch.amplitude[k];
            } else {
                int += ch.power[k];
            }
        }
        (amp * amp, int)
    }
}
