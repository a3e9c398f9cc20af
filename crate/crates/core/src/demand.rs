//! Exogenous demand: user mobility and content popularity.
//!
//! Users follow a Gaussian random walk reflected at the region boundary.
//! Popularity starts from a Zipf-like vector and drifts by clamped,
//! renormalized Gaussian jitter. Both series can be cut into sliding
//! windows for the forecasting networks. GPS traces are read from
//! `timestamp,latitude,longitude` CSV and projected onto local planar meters.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{Point, Popularity};

/// Mean Earth radius, meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Popularity entries are clamped to at least this value before renormalizing.
pub const POPULARITY_FLOOR: f64 = 1e-4;

/// Axis-aligned rectangle in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Bounds {
    pub fn square(side: f64) -> Self {
        Bounds { min_x: 0.0, min_y: 0.0, max_x: side, max_y: side }
    }

    pub fn contains(&self, p: Point) -> bool {
        (self.min_x..=self.max_x).contains(&p.x) && (self.min_y..=self.max_y).contains(&p.y)
    }

    pub fn uniform_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        Point::new(
            self.min_x + (self.max_x - self.min_x) * rng.random::<f64>(),
            self.min_y + (self.max_y - self.min_y) * rng.random::<f64>(),
        )
    }
}

/// Folds `v` back into `[lo, hi]` by mirror reflection at both edges.
fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let t = (v - lo).rem_euclid(2.0 * span);
    lo + if t > span { 2.0 * span - t } else { t }
}

pub fn random_walk_step<R: Rng + ?Sized>(
    pos: Point,
    step_sigma: f64,
    bounds: &Bounds,
    rng: &mut R,
) -> Point {
    if step_sigma == 0.0 {
        return pos;
    }
    let n = Normal::new(0.0, step_sigma).expect("finite non-negative sigma");
    Point::new(
        reflect(pos.x + n.sample(rng), bounds.min_x, bounds.max_x),
        reflect(pos.y + n.sample(rng), bounds.min_y, bounds.max_y),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectorySource {
    Synthetic,
    GpsCsv,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    /// Seconds.
    pub t: f64,
    pub pos: Point,
}

/// Time-ordered positions of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    samples: Vec<TrackPoint>,
    source: TrajectorySource,
}

impl Trajectory {
    pub fn new(samples: Vec<TrackPoint>, source: TrajectorySource) -> Result<Self> {
        if samples.iter().any(|s| !(s.t.is_finite() && s.pos.x.is_finite() && s.pos.y.is_finite())) {
            return Err(Error::invalid("trajectory samples must be finite"));
        }
        if samples.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(Error::invalid("trajectory timestamps must be strictly increasing"));
        }
        Ok(Trajectory { samples, source })
    }

    pub fn samples(&self) -> &[TrackPoint] {
        &self.samples
    }

    pub fn source(&self) -> TrajectorySource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positions(&self) -> Vec<Point> {
        self.samples.iter().map(|s| s.pos).collect()
    }

    /// `[x, y]` feature rows.
    pub fn features(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| vec![s.pos.x, s.pos.y]).collect()
    }

    pub fn centroid(&self) -> Point {
        let n = self.samples.len().max(1) as f64;
        let (sx, sy) = self.samples.iter().fold((0.0, 0.0), |(a, b), s| (a + s.pos.x, b + s.pos.y));
        Point::new(sx / n, sy / n)
    }
}

/// Synthetic random-walk trajectory of `steps` positions `dt` seconds apart.
pub fn synthetic_walk<R: Rng + ?Sized>(
    start: Point,
    steps: usize,
    dt: f64,
    step_sigma: f64,
    bounds: &Bounds,
    rng: &mut R,
) -> Trajectory {
    let mut samples = Vec::with_capacity(steps);
    let mut pos = start;
    for k in 0..steps {
        if k > 0 {
            pos = random_walk_step(pos, step_sigma, bounds, rng);
        }
        samples.push(TrackPoint { t: k as f64 * dt, pos });
    }
    Trajectory { samples, source: TrajectorySource::Synthetic }
}

/// `p_f ∝ f^-exponent` for `f = 1..=F`, normalized.
pub fn zipf_popularity(num_contents: usize, exponent: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=num_contents).map(|f| (f as f64).powf(-exponent)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Zipf vector whose ranking is rotated by `shift`: content `shift` (0-based)
/// is the most popular, then `shift + 1`, wrapping around.
pub fn rotated_zipf(num_contents: usize, exponent: f64, shift: usize) -> Vec<f64> {
    let base = zipf_popularity(num_contents, exponent);
    (0..num_contents).map(|f| base[(f + num_contents - shift % num_contents.max(1)) % num_contents]).collect()
}

/// One Zipf ranking per base station, rotated by `m * F / M` so that
/// neighbouring cells favour different contents.
pub fn regional_profiles(num_bs: usize, num_contents: usize, exponent: f64) -> Vec<Vec<f64>> {
    (0..num_bs).map(|m| rotated_zipf(num_contents, exponent, m * num_contents / num_bs.max(1))).collect()
}

/// Per-user popularity: each user requests according to the profile of its
/// nearest base station (lowest index on ties).
pub fn regional_popularity(users: &[Point], bs: &[Point], profiles: &[Vec<f64>]) -> Result<Popularity> {
    if profiles.len() != bs.len() {
        return Err(Error::DimensionMismatch { expected: bs.len(), actual: profiles.len() });
    }
    if bs.is_empty() {
        return Err(Error::invalid("at least one base station is required"));
    }
    let rows = users
        .iter()
        .map(|u| {
            let m = (0..bs.len())
                .min_by(|&a, &b| u.distance(&bs[a]).total_cmp(&u.distance(&bs[b])).then(a.cmp(&b)))
                .expect("non-empty");
            profiles[m].clone()
        })
        .collect();
    Ok(Popularity::PerUser(rows))
}

pub fn validate_popularity(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid("popularity vector is empty"));
    }
    let open = p.len() == 1 || p.iter().all(|&x| x > 0.0 && x < 1.0);
    if !open || p.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("popularity entries must lie in (0, 1)"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("popularity sums to {s}, not 1")));
    }
    Ok(())
}

pub fn popularity_step<R: Rng + ?Sized>(p: &[f64], jitter_sigma: f64, rng: &mut R) -> Vec<f64> {
    if jitter_sigma == 0.0 {
        return p.to_vec();
    }
    let n = Normal::new(0.0, jitter_sigma).expect("finite non-negative sigma");
    let jittered: Vec<f64> =
        p.iter().map(|&x| (x + n.sample(rng)).clamp(POPULARITY_FLOOR, 1.0)).collect();
    let total: f64 = jittered.iter().sum();
    jittered.into_iter().map(|x| x / total).collect()
}

/// Time-ordered popularity vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularitySeries {
    steps: Vec<Vec<f64>>,
}

impl PopularitySeries {
    pub fn new(steps: Vec<Vec<f64>>) -> Result<Self> {
        let f = steps.first().map_or(0, Vec::len);
        for s in &steps {
            if s.len() != f {
                return Err(Error::DimensionMismatch { expected: f, actual: s.len() });
            }
            validate_popularity(s)?;
        }
        Ok(PopularitySeries { steps })
    }

    /// `len` steps of jittered drift starting from `initial`.
    pub fn generate<R: Rng + ?Sized>(
        initial: Vec<f64>,
        len: usize,
        jitter_sigma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        validate_popularity(&initial)?;
        let mut steps = Vec::with_capacity(len);
        let mut cur = initial;
        for k in 0..len {
            if k > 0 {
                cur = popularity_step(&cur, jitter_sigma, rng);
            }
            steps.push(cur.clone());
        }
        Ok(PopularitySeries { steps })
    }

    pub fn steps(&self) -> &[Vec<f64>] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn num_contents(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }

    /// Series of content `f` as one-feature rows.
    pub fn content_rows(&self, f: usize) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| vec![s[f]]).collect()
    }
}

/// Per-feature min-max scaling to `[0, 1]`. Constant features map to 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyDataset)?;
        let mut min = first.clone();
        let mut max = first.clone();
        for r in rows {
            if r.len() != min.len() {
                return Err(Error::DimensionMismatch { expected: min.len(), actual: r.len() });
            }
            for (j, &v) in r.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(MinMaxScaler { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn scale(&self, feature: usize, v: f64) -> f64 {
        let span = self.max[feature] - self.min[feature];
        if span > 0.0 {
            (v - self.min[feature]) / span
        } else {
            0.5
        }
    }

    pub fn unscale(&self, feature: usize, v: f64) -> f64 {
        let span = self.max[feature] - self.min[feature];
        if span > 0.0 {
            self.min[feature] + v * span
        } else {
            self.min[feature]
        }
    }

    /// Scales a flattened window of `k * dim` values.
    pub fn scale_window(&self, flat: &[f64]) -> Vec<f64> {
        flat.iter().enumerate().map(|(k, &v)| self.scale(k % self.dim(), v)).collect()
    }

    pub fn unscale_window(&self, flat: &[f64]) -> Vec<f64> {
        flat.iter().enumerate().map(|(k, &v)| self.unscale(k % self.dim(), v)).collect()
    }
}

/// Supervised samples cut from a series: each input is `window_in`
/// consecutive rows flattened, each target the following `window_out` rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WindowedDataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub window_in: usize,
    pub window_out: usize,
    pub feature_dim: usize,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Appends another dataset with the same window shape.
    pub fn extend(&mut self, other: WindowedDataset) -> Result<()> {
        if self.is_empty() && self.feature_dim == 0 {
            *self = other;
            return Ok(());
        }
        if (other.window_in, other.window_out, other.feature_dim)
            != (self.window_in, self.window_out, self.feature_dim)
        {
            return Err(Error::invalid("cannot merge datasets with different window shapes"));
        }
        self.inputs.extend(other.inputs);
        self.targets.extend(other.targets);
        Ok(())
    }

    /// Splits off the first `n` samples as the training part.
    pub fn split_at(&self, n: usize) -> (WindowedDataset, WindowedDataset) {
        let n = n.min(self.len());
        let part = |r: std::ops::Range<usize>| WindowedDataset {
            inputs: self.inputs[r.clone()].to_vec(),
            targets: self.targets[r].to_vec(),
            window_in: self.window_in,
            window_out: self.window_out,
            feature_dim: self.feature_dim,
        };
        (part(0..n), part(n..self.len()))
    }
}

/// Stride-1 sliding windows over `rows`, scaled by `scaler`.
pub fn windowize(
    rows: &[Vec<f64>],
    window_in: usize,
    window_out: usize,
    scaler: &MinMaxScaler,
) -> Result<WindowedDataset> {
    if window_in == 0 || window_out == 0 {
        return Err(Error::invalid("window sizes must be >= 1"));
    }
    let needed = window_in + window_out;
    if rows.len() < needed {
        return Err(Error::SeriesTooShort { len: rows.len(), needed });
    }
    let dim = scaler.dim();
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, actual: bad.len() });
    }
    let scaled: Vec<Vec<f64>> =
        rows.iter().map(|r| r.iter().enumerate().map(|(j, &v)| scaler.scale(j, v)).collect()).collect();
    let count = rows.len() - needed + 1;
    let mut inputs = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    for k in 0..count {
        inputs.push(scaled[k..k + window_in].concat());
        targets.push(scaled[k + window_in..k + needed].concat());
    }
    Ok(WindowedDataset { inputs, targets, window_in, window_out, feature_dim: dim })
}

/// Windows over a trajectory's `(x, y)` rows.
pub fn windowize_trajectory(
    traj: &Trajectory,
    window_in: usize,
    window_out: usize,
    scaler: &MinMaxScaler,
) -> Result<WindowedDataset> {
    windowize(&traj.features(), window_in, window_out, scaler)
}

/// Windows over every content's popularity series, pooled into one dataset
/// with a single shared feature.
pub fn windowize_popularity(
    series: &PopularitySeries,
    window_in: usize,
    window_out: usize,
    scaler: &MinMaxScaler,
) -> Result<WindowedDataset> {
    let mut out = WindowedDataset::default();
    for f in 0..series.num_contents() {
        out.extend(windowize(&series.content_rows(f), window_in, window_out, scaler)?)?;
    }
    Ok(out)
}

/// Result of reading a GPS CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct GpsTrace {
    pub trajectories: Vec<Trajectory>,
    /// Rows dropped because their timestamp did not increase.
    pub dropped_rows: usize,
    /// Projection origin (latitude, longitude) in degrees: the trace centroid.
    pub origin: (f64, f64),
}

fn parse_timestamp(s: &str) -> Option<f64> {
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp() as f64 + dt.timestamp_subsec_nanos() as f64 * 1e-9);
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            let u = dt.and_utc();
            return Some(u.timestamp() as f64 + u.timestamp_subsec_nanos() as f64 * 1e-9);
        }
    }
    None
}

/// Reads `timestamp,latitude,longitude[,user]` rows.
///
/// Coordinates are projected equirectangularly about the centroid of all
/// rows, so every trajectory in the file shares one planar frame. Rows whose
/// timestamp does not exceed the previous kept row of the same user are
/// dropped and counted.
pub fn load_gps_csv(path: impl AsRef<Path>) -> Result<GpsTrace> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(Error::EmptyDataset),
    };
    let cols: Vec<String> = header.split(',').map(|c| c.trim().to_ascii_lowercase()).collect();
    let has_user = match cols.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["timestamp", "latitude", "longitude"] => false,
        ["timestamp", "latitude", "longitude", "user"] => true,
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header timestamp,latitude,longitude[,user], got {header:?}"),
            })
        }
    };

    // (user, t, lat, lon) in file order.
    let mut rows: Vec<(String, f64, f64, f64)> = Vec::new();
    for (k, line) in lines.enumerate() {
        let line_no = k + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let want = if has_user { 4 } else { 3 };
        if fields.len() != want {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {want} fields, got {}", fields.len()),
            });
        }
        let bad = |what: &str| Error::Parse { line: line_no, message: format!("bad {what}") };
        let t = parse_timestamp(fields[0]).ok_or_else(|| bad("timestamp"))?;
        let lat: f64 = fields[1].parse().map_err(|_| bad("latitude"))?;
        let lon: f64 = fields[2].parse().map_err(|_| bad("longitude"))?;
        if !(lat.is_finite() && (-90.0..=90.0).contains(&lat)) {
            return Err(bad("latitude"));
        }
        if !(lon.is_finite() && (-180.0..=180.0).contains(&lon)) {
            return Err(bad("longitude"));
        }
        let user = if has_user { fields[3].to_string() } else { String::new() };
        rows.push((user, t, lat, lon));
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let n = rows.len() as f64;
    let lat0 = rows.iter().map(|r| r.2).sum::<f64>() / n;
    let lon0 = rows.iter().map(|r| r.3).sum::<f64>() / n;
    let (scale_y, scale_x) = projection_scales(lat0);

    let mut users: Vec<String> = Vec::new();
    let mut tracks: Vec<Vec<TrackPoint>> = Vec::new();
    let mut dropped = 0;
    for (user, t, lat, lon) in rows {
        let idx = match users.iter().position(|u| *u == user) {
            Some(i) => i,
            None => {
                users.push(user);
                tracks.push(Vec::new());
                users.len() - 1
            }
        };
        let track = &mut tracks[idx];
        if track.last().is_some_and(|p| t <= p.t) {
            dropped += 1;
            continue;
        }
        track.push(TrackPoint {
            t,
            pos: Point::new((lon - lon0) * scale_x, (lat - lat0) * scale_y),
        });
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} GPS rows with non-increasing timestamps");
    }
    let trajectories = tracks
        .into_iter()
        .map(|samples| Trajectory { samples, source: TrajectorySource::GpsCsv })
        .collect();
    Ok(GpsTrace { trajectories, dropped_rows: dropped, origin: (lat0, lon0) })
}

/// Meters per degree of latitude and of longitude at `lat0`.
fn projection_scales(lat0: f64) -> (f64, f64) {
    let m_per_deg = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
    (m_per_deg, m_per_deg * lat0.to_radians().cos())
}

/// Writes trajectories as GPS CSV around `origin` (latitude, longitude).
///
/// Planar coordinates are re-centred on the centroid of all samples before
/// projection, so [`load_gps_csv`] recovers them in the same centroid frame.
/// A `user` column is added when more than one trajectory is written.
pub fn write_gps_csv(
    path: impl AsRef<Path>,
    trajectories: &[Trajectory],
    origin: (f64, f64),
) -> Result<()> {
    let all: Vec<&TrackPoint> = trajectories.iter().flat_map(|t| t.samples.iter()).collect();
    let n = all.len().max(1) as f64;
    let cx = all.iter().map(|p| p.pos.x).sum::<f64>() / n;
    let cy = all.iter().map(|p| p.pos.y).sum::<f64>() / n;
    let (scale_y, scale_x) = projection_scales(origin.0);
    let multi = trajectories.len() > 1;

    let mut out = std::io::BufWriter::new(File::create(path)?);
    if multi {
        writeln!(out, "timestamp,latitude,longitude,user")?;
    } else {
        writeln!(out, "timestamp,latitude,longitude")?;
    }
    for (u, traj) in trajectories.iter().enumerate() {
        for s in &traj.samples {
            let lat = origin.0 + (s.pos.y - cy) / scale_y;
            let lon = origin.1 + (s.pos.x - cx) / scale_x;
            if multi {
                writeln!(out, "{},{},{},{}", s.t, lat, lon, u)?;
            } else {
                writeln!(out, "{},{},{}", s.t, lat, lon)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
