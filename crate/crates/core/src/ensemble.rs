//! Emitter ensembles, the voltage to ZPL-frequency tuning law, and channel
//! reachability on a uniform frequency comb.
//!
//! Frequencies are in GHz and are offsets from the grid origin unless stated
//! otherwise. Linewidths are in MHz, positions in micrometers.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numfmt::sig9;
use crate::rng::rng_from_seed;

pub const ENSEMBLE_SCHEMA_VERSION: u32 = 1;

/// Bisection stops once the frequency residual is below this (GHz).
pub const BISECTION_TOL_GHZ: f64 = 1e-6;

/// Transform-limited SnV linewidth in MHz.
pub const TRANSFORM_LIMIT_MHZ: f64 = 30.0;

/// One quantum emitter's spectral identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emitter {
    pub id: u64,
    pub x_um: f64,
    pub y_um: f64,
    /// Zero-bias ZPL frequency offset from the grid origin, GHz.
    pub f0: f64,
    /// Maximum spectral tuning range, GHz.
    pub delta_vm: f64,
    /// PLE linewidth including spectral diffusion, MHz.
    pub linewidth: f64,
    /// Spin-transition splitting under magnetic bias, GHz.
    pub splitting: f64,
    pub brightness: f64,
}

impl Emitter {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_vm >= 0.0) {
            return Err(Error::Domain(format!("emitter {}: delta_vm < 0", self.id)));
        }
        if !(self.linewidth > 0.0) {
            return Err(Error::Domain(format!("emitter {}: linewidth <= 0", self.id)));
        }
        if !(self.splitting >= 0.0) {
            return Err(Error::Domain(format!("emitter {}: splitting < 0", self.id)));
        }
        if !(self.brightness >= 0.0) {
            return Err(Error::Domain(format!("emitter {}: brightness < 0", self.id)));
        }
        Ok(())
    }

    /// Linewidth converted to GHz.
    pub fn linewidth_ghz(&self) -> f64 {
        self.linewidth * 1e-3
    }
}

/// Piecewise-linear empirical CDF given as `(value, cumulative probability)` knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmpiricalCdf {
    pub knots: Vec<(f64, f64)>,
}

impl EmpiricalCdf {
    /// Linewidth model in MHz: 20% at or below 60 MHz, 35% at or below 200 MHz,
    /// floored at the transform limit and capped at 1 GHz.
    pub fn default_linewidth() -> Self {
        Self::linewidth_with_cap(1000.0)
    }

    pub fn linewidth_with_cap(cap_mhz: f64) -> Self {
        Self {
            knots: vec![
                (TRANSFORM_LIMIT_MHZ, 0.0),
                (2.0 * TRANSFORM_LIMIT_MHZ, 0.20),
                (200.0, 0.35),
                (cap_mhz, 1.0),
            ],
        }
    }

    /// Splitting model in GHz: 80% of splittings at or above 0.6 GHz, capped at 3 GHz.
    pub fn default_splitting() -> Self {
        Self::splitting_with_cap(3.0)
    }

    pub fn splitting_with_cap(cap_ghz: f64) -> Self {
        Self {
            knots: vec![(0.0, 0.0), (0.6, 0.20), (cap_ghz, 1.0)],
        }
    }

    /// Degenerate distribution at `value`.
    pub fn constant(value: f64) -> Self {
        Self {
            knots: vec![(value, 0.0), (value, 1.0)],
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        let k = &self.knots;
        if k.len() < 2 {
            return Err(Error::Config(format!("{what}: CDF needs at least two knots")));
        }
        if k[0].1 != 0.0 || k[k.len() - 1].1 != 1.0 {
            return Err(Error::Config(format!(
                "{what}: CDF must start at probability 0 and end at 1"
            )));
        }
        for w in k.windows(2) {
            if !(w[1].0 >= w[0].0) || !(w[1].1 >= w[0].1) {
                return Err(Error::Config(format!("{what}: CDF knots must be non-decreasing")));
            }
        }
        if k.iter().any(|&(v, p)| !v.is_finite() || !p.is_finite()) {
            return Err(Error::Config(format!("{what}: CDF knots must be finite")));
        }
        Ok(())
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let k = &self.knots;
        if x < k[0].0 {
            return 0.0;
        }
        for w in k.windows(2) {
            let ((x0, p0), (x1, p1)) = (w[0], w[1]);
            if x <= x1 {
                if x1 == x0 {
                    return p1;
                }
                return p0 + (p1 - p0) * (x - x0) / (x1 - x0);
            }
        }
        1.0
    }

    /// Inverse CDF for `u` in [0, 1].
    pub fn quantile(&self, u: f64) -> f64 {
        let k = &self.knots;
        let u = u.clamp(0.0, 1.0);
        for w in k.windows(2) {
            let ((x0, p0), (x1, p1)) = (w[0], w[1]);
            if u <= p1 && p1 > p0 {
                return x0 + (x1 - x0) * (u - p0) / (p1 - p0);
            }
        }
        k[k.len() - 1].0
    }
}

/// Spatial layout of sampled emitters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    /// Uniform over the field of view.
    Uniform,
    /// Square lattice of sites with `pitch_um` spacing starting one pitch from
    /// the origin, each site jittered uniformly by up to `jitter_um`.
    Lattice { pitch_um: f64, jitter_um: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_qubit: usize,
    /// Inhomogeneous range, GHz.
    pub v_inh: f64,
    /// Mean of the half-normal tuning range, GHz. Exactly one of
    /// `mean_tuning` and `tuning_sigma` is set.
    pub mean_tuning: Option<f64>,
    /// Standard deviation of the zero-mean Gaussian whose absolute value is the tuning range.
    pub tuning_sigma: Option<f64>,
    pub linewidth_model: EmpiricalCdf,
    pub splitting_model: EmpiricalCdf,
    pub fov_width_um: f64,
    pub fov_height_um: f64,
    pub placement: Placement,
    pub brightness_min: f64,
    pub brightness_max: f64,
    pub rng_seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_qubit: 100,
            v_inh: 20.0,
            mean_tuning: Some(2.0),
            tuning_sigma: None,
            linewidth_model: EmpiricalCdf::default_linewidth(),
            splitting_model: EmpiricalCdf::default_splitting(),
            fov_width_um: 12.8,
            fov_height_um: 12.8,
            placement: Placement::Uniform,
            brightness_min: 0.5,
            brightness_max: 1.0,
            rng_seed: 0,
        }
    }
}

/// E|N(0, sigma)| = sigma * sqrt(2 / pi).
pub fn half_normal_mean(sigma: f64) -> f64 {
    sigma * (2.0 / PI).sqrt()
}

pub fn half_normal_sigma(mean: f64) -> f64 {
    mean * (PI / 2.0).sqrt()
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_inh > 0.0) || !self.v_inh.is_finite() {
            return Err(Error::Config("v_inh must be positive".into()));
        }
        match (self.mean_tuning, self.tuning_sigma) {
            (Some(m), None) if m >= 0.0 && m.is_finite() => {}
            (None, Some(s)) if s >= 0.0 && s.is_finite() => {}
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "set exactly one of mean_tuning and tuning_sigma".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "one of mean_tuning and tuning_sigma is required".into(),
                ))
            }
            _ => return Err(Error::Config("tuning range parameter must be >= 0".into())),
        }
        self.linewidth_model.validate("linewidth_model")?;
        self.splitting_model.validate("splitting_model")?;
        if self.linewidth_model.knots[0].0 <= 0.0 {
            return Err(Error::Config("linewidth_model must be positive".into()));
        }
        if self.splitting_model.knots[0].0 < 0.0 {
            return Err(Error::Config("splitting_model must be non-negative".into()));
        }
        if !(self.fov_width_um > 0.0 && self.fov_height_um > 0.0) {
            return Err(Error::Config("field of view must be positive".into()));
        }
        if let Placement::Lattice { pitch_um, jitter_um } = self.placement {
            if !(pitch_um > 0.0) || !(jitter_um >= 0.0) {
                return Err(Error::Config("lattice pitch must be > 0 and jitter >= 0".into()));
            }
        }
        if !(self.brightness_min >= 0.0 && self.brightness_max >= self.brightness_min) {
            return Err(Error::Config("need 0 <= brightness_min <= brightness_max".into()));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        match (self.mean_tuning, self.tuning_sigma) {
            (_, Some(s)) => s,
            (Some(m), None) => half_normal_sigma(m),
            (None, None) => 0.0,
        }
    }

    pub fn mean(&self) -> f64 {
        match (self.mean_tuning, self.tuning_sigma) {
            (Some(m), _) => m,
            (None, Some(s)) => half_normal_mean(s),
            (None, None) => 0.0,
        }
    }

    /// Same config with the mean tuning range replaced.
    pub fn with_mean_tuning(&self, mean: f64) -> Self {
        Self {
            mean_tuning: Some(mean),
            tuning_sigma: None,
            ..self.clone()
        }
    }
}

/// Draws `config.n_qubit` emitters.
///
/// Each emitter consumes the same fixed sequence of draws regardless of the
/// tuning scale or placement, so two configs differing only in `mean_tuning`
/// produce emitters with identical `f0` and tuning ranges scaled by the same
/// factor.
pub fn sample_ensemble(config: &EnsembleConfig) -> Result<Vec<Emitter>> {
    config.validate()?;
    let mut rng = rng_from_seed(config.rng_seed);
    let sigma = config.sigma();
    let cols = (config.n_qubit as f64).sqrt().ceil().max(1.0) as usize;

    let mut out = Vec::with_capacity(config.n_qubit);
    for i in 0..config.n_qubit {
        let f0 = rng.random::<f64>() * config.v_inh;
        let z: f64 = rng.sample(StandardNormal);
        let u_lw: f64 = rng.random();
        let u_split: f64 = rng.random();
        let u_x: f64 = rng.random();
        let u_y: f64 = rng.random();
        let u_b: f64 = rng.random();

        let (x_um, y_um) = match config.placement {
            Placement::Uniform => (u_x * config.fov_width_um, u_y * config.fov_height_um),
            Placement::Lattice { pitch_um, jitter_um } => {
                let (col, row) = (i % cols, i / cols);
                (
                    (col + 1) as f64 * pitch_um + jitter_um * (2.0 * u_x - 1.0),
                    (row + 1) as f64 * pitch_um + jitter_um * (2.0 * u_y - 1.0),
                )
            }
        };

        out.push(Emitter {
            id: i as u64,
            x_um,
            y_um,
            f0,
            delta_vm: (z * sigma).abs(),
            linewidth: config.linewidth_model.quantile(u_lw),
            splitting: config.splitting_model.quantile(u_split),
            brightness: config.brightness_min
                + u_b * (config.brightness_max - config.brightness_min),
        });
    }
    Ok(out)
}

/// The uniform channel comb `f(k) = v0 + k * delta_v`, `k = 1..=k_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrequencyGrid {
    pub v0: f64,
    pub delta_v: f64,
    pub k_max: u32,
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        Self {
            v0: 0.0,
            delta_v: 2.0,
            k_max: 11,
        }
    }
}

impl FrequencyGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_v > 0.0) || !self.v0.is_finite() {
            return Err(Error::Config("grid delta_v must be positive".into()));
        }
        if self.k_max < 1 {
            return Err(Error::Config("grid k_max must be >= 1".into()));
        }
        Ok(())
    }

    pub fn channel_frequency(&self, k: u32) -> f64 {
        self.v0 + k as f64 * self.delta_v
    }

    pub fn channels(&self) -> impl Iterator<Item = u32> {
        1..=self.k_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Up => 1.0,
            Direction::Down => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    /// Interval `[f0, f0 + delta_vm]` (direction-ordered); zero bias sits at `f0`.
    OneSided,
    /// Interval `[f0 - delta_vm/2, f0 + delta_vm/2]`; zero bias sits at the
    /// lower edge (direction-ordered) so `f0` is the interval center.
    Symmetric,
}

/// Voltage to frequency law `f(V) = start + dir * delta_vm * (V / v_max)^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningLaw {
    pub v_max: f64,
    pub exponent: f64,
    pub direction: Direction,
    pub mode: TuningMode,
}

impl Default for TuningLaw {
    fn default() -> Self {
        Self {
            v_max: 40.0,
            exponent: 2.0,
            direction: Direction::Up,
            mode: TuningMode::OneSided,
        }
    }
}

impl TuningLaw {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_max > 0.0) || !self.v_max.is_finite() {
            return Err(Error::Config("v_max must be positive".into()));
        }
        if !(self.exponent > 0.0) || !self.exponent.is_finite() {
            return Err(Error::Config("tuning exponent must be positive".into()));
        }
        Ok(())
    }

    fn start(&self, e: &Emitter) -> f64 {
        match self.mode {
            TuningMode::OneSided => e.f0,
            TuningMode::Symmetric => e.f0 - self.direction.sign() * e.delta_vm / 2.0,
        }
    }

    /// `(lo, hi)` of the frequencies the emitter reaches on `[0, v_max]`.
    pub fn interval(&self, e: &Emitter) -> (f64, f64) {
        let a = self.start(e);
        let b = a + self.direction.sign() * e.delta_vm;
        (a.min(b), a.max(b))
    }

    fn eval(&self, e: &Emitter, v: f64) -> f64 {
        self.start(e) + self.direction.sign() * e.delta_vm * (v / self.v_max).powf(self.exponent)
    }
}

pub fn frequency_at_voltage(e: &Emitter, law: &TuningLaw, v: f64) -> Result<f64> {
    if !(0.0..=law.v_max).contains(&v) {
        return Err(Error::Domain(format!(
            "voltage {v} V outside [0, {}] V",
            law.v_max
        )));
    }
    Ok(law.eval(e, v))
}

/// Inverts the tuning law by bisection on `[0, v_max]`.
pub fn voltage_for_frequency(e: &Emitter, law: &TuningLaw, f_target: f64) -> Result<f64> {
    let (lo, hi) = law.interval(e);
    if !(f_target >= lo && f_target <= hi) {
        return Err(Error::Unreachable {
            target: f_target,
            lo,
            hi,
        });
    }
    let sign = law.direction.sign();
    // residual is increasing in v
    let residual = |v: f64| sign * (law.eval(e, v) - f_target);

    if residual(0.0) >= 0.0 {
        return Ok(0.0);
    }
    if residual(law.v_max) <= 0.0 {
        return Ok(law.v_max);
    }

    let (mut a, mut b) = (0.0, law.v_max);
    let mut mid = 0.5 * (a + b);
    for _ in 0..200 {
        mid = 0.5 * (a + b);
        let r = residual(mid);
        if r.abs() < 0.1 * BISECTION_TOL_GHZ || b - a < f64::EPSILON * law.v_max {
            break;
        }
        if r < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(mid)
}

/// Channel indices whose frequency lies inside the emitter's closed tuning interval.
pub fn reachable_channels(e: &Emitter, law: &TuningLaw, grid: &FrequencyGrid) -> Vec<u32> {
    let (lo, hi) = law.interval(e);
    reachable_in_interval(lo, hi, grid)
}

pub(crate) fn reachable_in_interval(lo: f64, hi: f64, grid: &FrequencyGrid) -> Vec<u32> {
    let first = ((lo - grid.v0) / grid.delta_v).ceil() - 1.0;
    let last = ((hi - grid.v0) / grid.delta_v).floor() + 1.0;
    if last < 1.0 || first > grid.k_max as f64 {
        return Vec::new();
    }
    let first = first.max(1.0) as u32;
    let last = last.min(grid.k_max as f64) as u32;
    (first..=last)
        .filter(|&k| {
            let f = grid.channel_frequency(k);
            f >= lo && f <= hi
        })
        .collect()
}

/// `{schema_version, config, emitters}` on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDocument {
    pub schema_version: u32,
    pub config: EnsembleConfig,
    pub emitters: Vec<Emitter>,
}

impl EnsembleDocument {
    pub fn new(config: EnsembleConfig, emitters: Vec<Emitter>) -> Self {
        Self {
            schema_version: ENSEMBLE_SCHEMA_VERSION,
            config,
            emitters,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(s)?;
        if doc.schema_version != ENSEMBLE_SCHEMA_VERSION {
            return Err(Error::Serde(format!(
                "unsupported ensemble schema_version {}",
                doc.schema_version
            )));
        }
        Ok(doc)
    }
}

pub const ENSEMBLE_CSV_HEADER: [&str; 8] = [
    "id",
    "x_um",
    "y_um",
    "f0_ghz",
    "delta_vm_ghz",
    "linewidth_mhz",
    "splitting_ghz",
    "brightness",
];

pub fn write_ensemble_csv<W: Write>(emitters: &[Emitter], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(ENSEMBLE_CSV_HEADER)?;
    for e in emitters {
        wr.write_record([
            e.id.to_string(),
            sig9(e.x_um),
            sig9(e.y_um),
            sig9(e.f0),
            sig9(e.delta_vm),
            sig9(e.linewidth),
            sig9(e.splitting),
            sig9(e.brightness),
        ])?;
    }
    wr.flush().map_err(|e| Error::Serde(e.to_string()))?;
    Ok(())
}

#[derive(Deserialize)]
struct EmitterRow {
    id: u64,
    x_um: f64,
    y_um: f64,
    f0_ghz: f64,
    delta_vm_ghz: f64,
    linewidth_mhz: f64,
    splitting_ghz: f64,
    brightness: f64,
}

pub fn read_ensemble_csv<R: Read>(r: R) -> Result<Vec<Emitter>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    if header.iter().ne(ENSEMBLE_CSV_HEADER.iter().copied()) {
        return Err(Error::Parse {
            row: 1,
            msg: format!("expected header {}", ENSEMBLE_CSV_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in rd.deserialize::<EmitterRow>() {
        let r = row?;
        let e = Emitter {
            id: r.id,
            x_um: r.x_um,
            y_um: r.y_um,
            f0: r.f0_ghz,
            delta_vm: r.delta_vm_ghz,
            linewidth: r.linewidth_mhz,
            splitting: r.splitting_ghz,
            brightness: r.brightness,
        };
        e.validate().map_err(|err| Error::Parse {
            row: out.len() + 2,
            msg: err.to_string(),
        })?;
        out.push(e);
    }
    Ok(out)
}
