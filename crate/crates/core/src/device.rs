// SPDX-License-Identifier: Apache-2.0

//! Device physics: cycle-to-cycle read noise, programming error, and
//! stretched-exponential charge decay of a charge-trap memory cell.
//!
//! Currents are normalized; the usable window is a [`CurrentRange`]
//! (default `[0.1, 1.0]`). Spreads (`sigma_i0`, `sigma_iinf`, `sigma_syn`
//! for additive noise) are fractions of that window's span.
//!
//! Decay follows
//!
//! ```text
//! I(t)  = I0  + (I_inf  - I0 ) * (1 - exp(-(t/tau)^(T/T0)))
//! sI(t) = sI0 + (sI_inf - sI0) * (1 - exp(-(t/tau)^(T/T0)))
//! ```
//!
//! Programmed and drifted currents are physical device states and are
//! clipped to the window. Read noise is a transient on the analog read and
//! is never clipped. Drift-induced spread is independent of the programming
//! error and is added in quadrature: a device aged to `t` receives a fresh
//! Gaussian increment of `sqrt(sI(t)^2 - sI0^2)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Boltzmann constant in eV/K.
pub const BOLTZMANN_EV_PER_K: f64 = 8.617_333_262e-5;

/// Normalized device current window `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurrentRange {
    pub min: f64,
    pub max: f64,
}

impl Default for CurrentRange {
    fn default() -> Self {
        Self { min: 0.1, max: 1.0 }
    }
}

impl CurrentRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::param(format!(
                "current range [{min}, {max}] must satisfy min < max"
            )));
        }
        Ok(Self { min, max })
    }

    #[inline]
    pub fn span(&self) -> f64 {
        self.max - self.min
    }

    #[inline]
    pub fn clip(&self, i: f64) -> f64 {
        i.clamp(self.min, self.max)
    }

    pub fn contains(&self, i: f64) -> bool {
        (self.min..=self.max).contains(&i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// Spread fixed as a fraction of the current window; independent of the
    /// device state (thermal-like).
    Additive,
    /// Spread proportional to the instantaneous device current (shot-like).
    Proportional,
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::Additive => "additive",
            NoiseKind::Proportional => "proportional",
        })
    }
}

/// Cycle-to-cycle read noise.
///
/// Noise is redrawn on every vector-matrix multiplication, i.e. per input
/// vector, which is the most pessimistic reading of "per read".
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sigma_syn: f64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, sigma_syn: f64) -> Result<Self> {
        if !(sigma_syn.is_finite() && sigma_syn >= 0.0) {
            return Err(Error::param(format!(
                "sigma_syn = {sigma_syn} must be >= 0"
            )));
        }
        Ok(Self { kind, sigma_syn })
    }

    pub fn none() -> Self {
        Self {
            kind: NoiseKind::Additive,
            sigma_syn: 0.0,
        }
    }

    pub fn is_noiseless(&self) -> bool {
        self.sigma_syn == 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayMode {
    /// Every device shifts by the same amount regardless of its programmed
    /// current; the shift is `uniform_drift_delta_inf` at saturation.
    UniformMeasured,
    /// Every device relaxes toward a shared `i_inf` with a common time
    /// constant, so devices further from `i_inf` move more.
    NonUniformCycled,
}

impl std::fmt::Display for DecayMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecayMode::UniformMeasured => "uniform-measured",
            DecayMode::NonUniformCycled => "non-uniform-cycled",
        })
    }
}

/// Stretched-exponential retention model parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayParams {
    pub mode: DecayMode,
    /// Saturated current (used in `NonUniformCycled` mode).
    pub i_inf: f64,
    /// Decay time constant in hours.
    pub tau_hours: f64,
    /// Stretch reference temperature in kelvin.
    pub t0_kelvin: f64,
    /// Operating temperature in kelvin.
    pub temperature_kelvin: f64,
    /// Initial programming spread, fraction of the current span.
    pub sigma_i0: f64,
    /// Saturated spread, fraction of the current span.
    pub sigma_iinf: f64,
    /// Common-mode shift at saturation (`UniformMeasured` mode only).
    pub uniform_drift_delta_inf: f64,
}

/// Hours in a day; the measured device's decay constant.
pub const ONE_DAY_HOURS: f64 = 24.0;

/// Stretch reference temperature of the cycled-device fit.
pub const T0_KELVIN: f64 = 2500.0;

/// Default operating temperature (stretch exponent 300/2500 = 0.12).
pub const ROOM_TEMPERATURE_KELVIN: f64 = 300.0;

impl DecayParams {
    /// No programming error and no drift.
    pub fn ideal() -> Self {
        Self {
            mode: DecayMode::UniformMeasured,
            i_inf: 1.0,
            tau_hours: ONE_DAY_HOURS,
            t0_kelvin: T0_KELVIN,
            temperature_kelvin: ROOM_TEMPERATURE_KELVIN,
            sigma_i0: 0.0,
            sigma_iinf: 0.0,
            uniform_drift_delta_inf: 0.0,
        }
    }

    /// Fabricated-array fit: uniform drift with `tau` = 1 day and a spread
    /// growing from 0.4% of the span to 0.8% after 24 hours.
    pub fn measured() -> Self {
        Self::measured_with_one_day_spread(0.008)
    }

    /// The measured fit with the 24-hour spread replaced by `sigma_one_day`
    /// (same 0.4% initial spread), used for hypothetical inferior devices.
    pub fn measured_with_one_day_spread(sigma_one_day: f64) -> Self {
        let mut p = Self {
            sigma_i0: 0.004,
            ..Self::ideal()
        };
        p.sigma_iinf = sigma_inf_from_point(p.sigma_i0, sigma_one_day, ONE_DAY_HOURS, &p);
        p
    }

    /// Cycled-device fit: non-uniform relaxation toward the top of `range`
    /// with `tau = tau0 exp(E_T / kT)`, `tau0 = 8e-12 h`, `E_T = 0.85 eV`.
    pub fn cycled(range: CurrentRange) -> Self {
        let measured = Self::measured();
        Self {
            mode: DecayMode::NonUniformCycled,
            i_inf: range.max,
            tau_hours: thermal_tau(8.0e-12, 0.85, ROOM_TEMPERATURE_KELVIN)
                .expect("constants are positive"),
            sigma_i0: measured.sigma_i0,
            sigma_iinf: measured.sigma_iinf,
            ..Self::ideal()
        }
    }

    /// Stretch exponent `T / T0`.
    pub fn beta(&self) -> f64 {
        self.temperature_kelvin / self.t0_kelvin
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::param(format!("{name} = {v} must be positive")))
            }
        };
        positive("tau", self.tau_hours)?;
        positive("T0", self.t0_kelvin)?;
        positive("T", self.temperature_kelvin)?;
        if !(self.sigma_i0 >= 0.0 && self.sigma_i0 <= self.sigma_iinf) {
            return Err(Error::param(format!(
                "spreads must satisfy 0 <= sigma_i0 ({}) <= sigma_iinf ({})",
                self.sigma_i0, self.sigma_iinf
            )));
        }
        let beta = self.beta();
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::param(format!(
                "stretch exponent T/T0 = {beta} outside (0, 1]"
            )));
        }
        if !self.i_inf.is_finite() || !self.uniform_drift_delta_inf.is_finite() {
            return Err(Error::param("i_inf and uniform drift must be finite"));
        }
        Ok(())
    }

    /// Fraction of the way to saturation, `1 - exp(-(t/tau)^beta)`.
    pub fn progress(&self, t_hours: f64) -> Result<f64> {
        if !(t_hours >= 0.0) {
            return Err(Error::param(format!("time {t_hours} h must be >= 0")));
        }
        Ok(-(-(t_hours / self.tau_hours).powf(self.beta())).exp_m1())
    }
}

/// Saturated spread that makes the spread curve pass through `sigma_at`
/// at time `t_hours`.
pub fn sigma_inf_from_point(sigma_i0: f64, sigma_at: f64, t_hours: f64, p: &DecayParams) -> f64 {
    let f = p.progress(t_hours).unwrap_or(f64::NAN);
    sigma_i0 + (sigma_at - sigma_i0) / f
}

/// Thermally activated decay constant `tau0 * exp(E_T / (k T))` in hours.
pub fn thermal_tau(tau0_hours: f64, activation_ev: f64, temperature_kelvin: f64) -> Result<f64> {
    if !(tau0_hours > 0.0 && temperature_kelvin > 0.0 && activation_ev >= 0.0) {
        return Err(Error::param(format!(
            "thermal_tau needs tau0 > 0, E_T >= 0, T > 0 (got {tau0_hours}, {activation_ev}, {temperature_kelvin})"
        )));
    }
    Ok(tau0_hours * (activation_ev / (BOLTZMANN_EV_PER_K * temperature_kelvin)).exp())
}

/// Mean current after `t_hours` of retention, starting from `i0`.
pub fn decay_mean(i0: f64, t_hours: f64, p: &DecayParams) -> Result<f64> {
    let f = p.progress(t_hours)?;
    Ok(match p.mode {
        DecayMode::UniformMeasured => i0 + p.uniform_drift_delta_inf * f,
        DecayMode::NonUniformCycled => i0 + (p.i_inf - i0) * f,
    })
}

/// Device-to-device spread after `t_hours`, as a fraction of the span.
pub fn decay_spread(t_hours: f64, p: &DecayParams) -> Result<f64> {
    let f = p.progress(t_hours)?;
    Ok(p.sigma_i0 + (p.sigma_iinf - p.sigma_i0) * f)
}

/// Spread added by drift on top of the programming error, as a fraction of
/// the span: `sqrt(max(0, sI(t)^2 - sI0^2))`.
pub fn drift_increment_sigma(t_hours: f64, p: &DecayParams) -> Result<f64> {
    let s = decay_spread(t_hours, p)?;
    Ok((s * s - p.sigma_i0 * p.sigma_i0).max(0.0).sqrt())
}

/// Programs one device to `target`, with Gaussian programming error of
/// `sigma_i0 * span`; the result is clipped to the window.
pub fn sample_programmed_current(
    target: f64,
    p: &DecayParams,
    range: CurrentRange,
    rng: &mut RngStream,
) -> f64 {
    let noise = p.sigma_i0 * range.span() * rng.normal();
    range.clip(target + noise)
}

/// Ages one device programmed at `i_programmed` by `t_hours`.
pub fn sample_drifted_current(
    i_programmed: f64,
    t_hours: f64,
    p: &DecayParams,
    range: CurrentRange,
    rng: &mut RngStream,
) -> Result<f64> {
    let mean = decay_mean(i_programmed, t_hours, p)?;
    let sigma = drift_increment_sigma(t_hours, p)? * range.span();
    Ok(range.clip(mean + sigma * rng.normal()))
}

/// One noisy read of every current in `currents`. Fresh draws on each call;
/// the result is not clipped.
pub fn apply_read_noise(
    currents: &Tensor,
    range: CurrentRange,
    spec: &NoiseSpec,
    rng: &mut RngStream,
) -> Tensor {
    if spec.is_noiseless() {
        return currents.clone();
    }
    let sigma = spec.sigma_syn;
    let span = range.span();
    match spec.kind {
        NoiseKind::Additive => currents.map(|i| i + sigma * span * rng.normal()),
        NoiseKind::Proportional => {
            let mut out = currents.clone();
            for i in out.data_mut() {
                *i += sigma * i.abs() * rng.normal();
            }
            out
        }
    }
}

/// Device-parameter file: the current window plus the retention model.
///
/// ```toml
/// mode = "non-uniform-cycled"      # or "uniform-measured"
/// i_min = 0.1
/// i_max = 1.0
/// i_inf = 1.0                      # optional, defaults to i_max
/// tau_hours = 24.0                 # or tau0_hours + activation_energy_ev
/// t0_kelvin = 2500.0
/// temperature_kelvin = 300.0
/// sigma_i0 = 0.004
/// sigma_iinf = 0.0103
/// uniform_drift_delta_inf = 0.0    # optional
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceFile {
    pub mode: DecayMode,
    #[serde(default = "default_i_min")]
    pub i_min: f64,
    #[serde(default = "default_i_max")]
    pub i_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_inf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_hours: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau0_hours: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_energy_ev: Option<f64>,
    #[serde(default = "default_t0")]
    pub t0_kelvin: f64,
    #[serde(default = "default_temperature")]
    pub temperature_kelvin: f64,
    #[serde(default)]
    pub sigma_i0: f64,
    #[serde(default)]
    pub sigma_iinf: f64,
    #[serde(default)]
    pub uniform_drift_delta_inf: f64,
}

fn default_i_min() -> f64 {
    CurrentRange::default().min
}
fn default_i_max() -> f64 {
    CurrentRange::default().max
}
fn default_t0() -> f64 {
    T0_KELVIN
}
fn default_temperature() -> f64 {
    ROOM_TEMPERATURE_KELVIN
}

/// A device model resolved from a [`DeviceFile`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeviceParams {
    pub range: CurrentRange,
    pub decay: DecayParams,
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self {
            range: CurrentRange::default(),
            decay: DecayParams::ideal(),
        }
    }
}

impl DeviceParams {
    pub fn new(range: CurrentRange, decay: DecayParams) -> Result<Self> {
        decay.validate()?;
        Ok(Self { range, decay })
    }

    pub fn from_file(file: &DeviceFile) -> Result<Self> {
        let range = CurrentRange::new(file.i_min, file.i_max)?;
        let tau_hours = match (file.tau_hours, file.tau0_hours, file.activation_energy_ev) {
            (Some(tau), None, None) => tau,
            (None, Some(tau0), Some(e_t)) => thermal_tau(tau0, e_t, file.temperature_kelvin)?,
            _ => return Err(Error::config(
                "device file needs either tau_hours or both tau0_hours and activation_energy_ev",
            )),
        };
        let decay = DecayParams {
            mode: file.mode,
            i_inf: file.i_inf.unwrap_or(range.max),
            tau_hours,
            t0_kelvin: file.t0_kelvin,
            temperature_kelvin: file.temperature_kelvin,
            sigma_i0: file.sigma_i0,
            sigma_iinf: file.sigma_iinf,
            uniform_drift_delta_inf: file.uniform_drift_delta_inf,
        };
        Self::new(range, decay)
    }

    pub fn to_file(&self) -> DeviceFile {
        DeviceFile {
            mode: self.decay.mode,
            i_min: self.range.min,
            i_max: self.range.max,
            i_inf: Some(self.decay.i_inf),
            tau_hours: Some(self.decay.tau_hours),
            tau0_hours: None,
            activation_energy_ev: None,
            t0_kelvin: self.decay.t0_kelvin,
            temperature_kelvin: self.decay.temperature_kelvin,
            sigma_i0: self.decay.sigma_i0,
            sigma_iinf: self.decay.sigma_iinf,
            uniform_drift_delta_inf: self.decay.uniform_drift_delta_inf,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: DeviceFile =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_file(&file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(&self.to_file())
            .map_err(|e| Error::config(format!("serializing device file: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
