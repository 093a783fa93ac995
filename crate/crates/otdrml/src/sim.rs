//! OTDR trace synthesis: detected pulse shaping and calibrated-noise traces.
//!
//! A trace models a fiber with a single reflective event over a flat zero
//! baseline (Rayleigh backscatter is neglected). The event pulse is a
//! rectangular optical pulse of width `pulse_width_s`, low-pass filtered by
//! a Bessel filter of bandwidth `bessel_bandwidth_hz`, detected by a
//! square-law photodiode, and sampled at the two-way interval
//! Δt = 2·group_index·sample_spacing_m / c. White Gaussian noise of a
//! standard deviation calibrated to the requested SNR is added at the TIA.
//!
//! SNR follows the event-region energy definition
//!
//! ```text
//! SNR_dB = 10·log10( Σ_event (A·template[n])² / (K·σ²) ),   K = extent_samples
//! ```
//!
//! so `σ² = A²·Σ template² / (K · 10^(SNR_dB/10))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OtdrError, Result};
use crate::filter::design_bessel_lowpass;
use crate::util::derive_seed;

pub const SPEED_OF_LIGHT_M_S: f64 = 2.997_924_58e8;

/// Oversampling factor of the internal fine grid on which the pulse is
/// shaped before decimation to the trace sample rate.
pub const OVERSAMPLE: usize = 16;

/// Fraction of the detected peak amplitude below which leading/trailing
/// template samples are trimmed; defines the event extent (-20 dB support
/// in power).
pub const TRIM_FRACTION: f64 = 0.1;

/// Reflectance that maps to unit peak amplitude (~95% power reflection).
pub const REFERENCE_REFLECTANCE_DB: f64 = -0.22;

/// Seed-derivation stream tags (see [`derive_seed`]).
const STREAM_BATCH_PARAMS: u64 = 1;
const STREAM_BATCH_NOISE: u64 = 2;

/// Simulation configuration. Field names match the TOML/JSON config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Optical pulse width T in seconds.
    pub pulse_width_s: f64,
    /// Bessel low-pass bandwidth in Hz; defaults to 0.6 / pulse_width_s.
    /// May be infinite to bypass the filter (test hook).
    pub bessel_bandwidth_hz: f64,
    /// Bessel filter order (1..=8).
    pub bessel_order: usize,
    /// Fiber distance per trace sample, meters.
    pub sample_spacing_m: f64,
    /// Trace length in samples.
    pub trace_len_samples: usize,
    /// Fiber group index (time↔distance conversion).
    pub group_index: f64,
    /// Uniform SNR draw range [low, high] in dB for batch generation.
    pub snr_db_range: [f64; 2],
    /// Uniform reflectance draw range [low, high] in dB for batch generation.
    pub reflectance_db_range: [f64; 2],
    /// Root seed; every trace derives its own stream from it.
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let pulse_width_s = 100e-9;
        SimConfig {
            pulse_width_s,
            bessel_bandwidth_hz: 0.6 / pulse_width_s,
            bessel_order: 4,
            sample_spacing_m: 1.0,
            trace_len_samples: 1000,
            group_index: 1.468,
            snr_db_range: [0.0, 30.0],
            reflectance_db_range: [-45.0, -5.0],
            rng_seed: 42,
        }
    }
}

/// Partial configuration as read from a TOML/JSON file; unset fields fall
/// back to defaults. `bessel_bandwidth_hz` defaults against the *resolved*
/// pulse width.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfigPatch {
    pub pulse_width_s: Option<f64>,
    pub bessel_bandwidth_hz: Option<f64>,
    pub bessel_order: Option<usize>,
    pub sample_spacing_m: Option<f64>,
    pub trace_len_samples: Option<usize>,
    pub group_index: Option<f64>,
    pub snr_db_range: Option<[f64; 2]>,
    pub reflectance_db_range: Option<[f64; 2]>,
    pub rng_seed: Option<u64>,
}

impl SimConfigPatch {
    /// Applies the patch over defaults and validates the result.
    pub fn resolve(&self) -> Result<SimConfig> {
        let defaults = SimConfig::default();
        let pulse_width_s = self.pulse_width_s.unwrap_or(defaults.pulse_width_s);
        let cfg = SimConfig {
            pulse_width_s,
            bessel_bandwidth_hz: self.bessel_bandwidth_hz.unwrap_or(0.6 / pulse_width_s),
            bessel_order: self.bessel_order.unwrap_or(defaults.bessel_order),
            sample_spacing_m: self.sample_spacing_m.unwrap_or(defaults.sample_spacing_m),
            trace_len_samples: self.trace_len_samples.unwrap_or(defaults.trace_len_samples),
            group_index: self.group_index.unwrap_or(defaults.group_index),
            snr_db_range: self.snr_db_range.unwrap_or(defaults.snr_db_range),
            reflectance_db_range: self
                .reflectance_db_range
                .unwrap_or(defaults.reflectance_db_range),
            rng_seed: self.rng_seed.unwrap_or(defaults.rng_seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a patch from TOML or JSON source text.
    pub fn parse(text: &str, format: ConfigFormat) -> Result<Self> {
        match format {
            ConfigFormat::Toml => toml::from_str(text)
                .map_err(|e| OtdrError::Format(format!("config TOML: {e}"))),
            ConfigFormat::Json => serde_json::from_str(text)
                .map_err(|e| OtdrError::Format(format!("config JSON: {e}"))),
        }
    }
}

/// Config file syntax, keyed off the file extension at the CLI layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigFormat {
    Toml,
    Json,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pulse_width_s > 0.0) || !self.pulse_width_s.is_finite() {
            return Err(OtdrError::Config(format!(
                "pulse_width_s must be positive and finite, got {}",
                self.pulse_width_s
            )));
        }
        if !(self.bessel_bandwidth_hz > 0.0) {
            return Err(OtdrError::Config(format!(
                "bessel_bandwidth_hz must be positive, got {}",
                self.bessel_bandwidth_hz
            )));
        }
        if self.bessel_order == 0 || self.bessel_order > 8 {
            return Err(OtdrError::Config(format!(
                "bessel_order must be in 1..=8, got {}",
                self.bessel_order
            )));
        }
        if !(self.sample_spacing_m > 0.0) || !self.sample_spacing_m.is_finite() {
            return Err(OtdrError::Config(format!(
                "sample_spacing_m must be positive and finite, got {}",
                self.sample_spacing_m
            )));
        }
        if !(self.group_index > 0.0) || !self.group_index.is_finite() {
            return Err(OtdrError::Config(format!(
                "group_index must be positive and finite, got {}",
                self.group_index
            )));
        }
        if self.trace_len_samples == 0 {
            return Err(OtdrError::Config("trace_len_samples must be positive".into()));
        }
        let [snr_lo, snr_hi] = self.snr_db_range;
        if !(snr_lo.is_finite() && snr_hi.is_finite() && snr_lo <= snr_hi) {
            return Err(OtdrError::Config(format!(
                "snr_db_range must be finite with low <= high, got [{snr_lo}, {snr_hi}]"
            )));
        }
        let [r_lo, r_hi] = self.reflectance_db_range;
        if !(r_lo.is_finite() && r_hi.is_finite() && r_lo <= r_hi) {
            return Err(OtdrError::Config(format!(
                "reflectance_db_range must be finite with low <= high, got [{r_lo}, {r_hi}]"
            )));
        }
        Ok(())
    }

    /// Two-way sampling interval Δt = 2·n·Δz/c, seconds per sample.
    pub fn sample_interval_s(&self) -> f64 {
        2.0 * self.group_index * self.sample_spacing_m / SPEED_OF_LIGHT_M_S
    }

    /// Peak amplitude for a given reflectance: unity at the reference
    /// reflectance of ~95% reflection.
    pub fn amplitude_for_reflectance(&self, reflectance_db: f64) -> f64 {
        10f64.powf((reflectance_db - REFERENCE_REFLECTANCE_DB) / 10.0)
    }

    /// Largest noise-free peak amplitude this config can generate — the
    /// global normalization max for datasets.
    pub fn max_amplitude(&self) -> f64 {
        self.amplitude_for_reflectance(self.reflectance_db_range[1])
    }
}

/// Noise-free detected pulse shape at the trace sample rate, unit peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseTemplate {
    /// Amplitude samples over the trimmed event extent; max = 1.0.
    pub samples: Vec<f64>,
    /// Event extent K in samples (= samples.len()).
    pub extent_samples: usize,
    /// Fractional index of the pulse peak within `samples`, from parabolic
    /// refinement on the fine grid.
    pub peak_offset_samples: f64,
}

impl PulseTemplate {
    /// Σ samples² — the event energy factor in the SNR definition.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }
}

/// Builds the detected (post-squaring) pulse template for a configuration.
///
/// Pipeline: rectangular pulse on a 16× fine grid → discrete Bessel
/// low-pass → square-law detection → decimation to the trace rate →
/// support trim at [`TRIM_FRACTION`] of peak → peak normalization.
/// An infinite bandwidth bypasses the filter and yields an ideal
/// ⌈T/Δt⌉-sample rectangle.
pub fn build_pulse_template(cfg: &SimConfig) -> Result<PulseTemplate> {
    cfg.validate()?;
    let dt = cfg.sample_interval_s();

    if cfg.bessel_bandwidth_hz.is_infinite() {
        let extent = (cfg.pulse_width_s / dt - 1e-12).ceil().max(1.0) as usize;
        if extent > cfg.trace_len_samples {
            return Err(OtdrError::Config(format!(
                "pulse extent {extent} exceeds trace length {}",
                cfg.trace_len_samples
            )));
        }
        return Ok(PulseTemplate {
            samples: vec![1.0; extent],
            extent_samples: extent,
            peak_offset_samples: (extent - 1) as f64 / 2.0,
        });
    }

    let dt_fine = dt / OVERSAMPLE as f64;
    let filt = design_bessel_lowpass(cfg.bessel_order, cfg.bessel_bandwidth_hz, 1.0 / dt_fine)?;
    let n_on = ((cfg.pulse_width_s / dt_fine) - 1e-12).ceil().max(1.0) as usize;

    // The response horizon starts at 10 pulse widths and doubles until the
    // trimmed support is comfortably inside it.
    let mut horizon = (10.0 * cfg.pulse_width_s / dt_fine).round() as usize;
    horizon = horizon.max(n_on + OVERSAMPLE);
    for attempt in 0..7 {
        let mut x = vec![0.0f64; horizon];
        for v in x.iter_mut().take(n_on.min(horizon)) {
            *v = 1.0;
        }
        let mut q = filt.apply(&x);
        for v in q.iter_mut() {
            *v = *v * *v;
        }

        let decimated: Vec<f64> = q.iter().step_by(OVERSAMPLE).copied().collect();
        let peak = decimated.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(peak > 0.0) {
            return Err(OtdrError::Config(
                "filtered pulse has non-positive peak; check bandwidth and order".into(),
            ));
        }
        let thresh = TRIM_FRACTION * peak;
        let first = decimated.iter().position(|&v| v >= thresh);
        let last = decimated.iter().rposition(|&v| v >= thresh);
        let (first, last) = match (first, last) {
            (Some(f), Some(l)) if l >= f => (f, l),
            _ => {
                return Err(OtdrError::Config("pulse support is empty after trim".into()));
            }
        };

        // If the support reaches the end of the horizon the response has
        // not decayed yet — enlarge and retry.
        if last + 2 >= decimated.len() && attempt < 6 {
            horizon *= 2;
            continue;
        }
        if last + 2 >= decimated.len() {
            return Err(OtdrError::Config(
                "pulse response does not decay within the simulation horizon".into(),
            ));
        }

        let extent = last - first + 1;
        if extent > cfg.trace_len_samples {
            return Err(OtdrError::Config(format!(
                "pulse extent {extent} exceeds trace length {}",
                cfg.trace_len_samples
            )));
        }

        let samples: Vec<f64> = decimated[first..=last].iter().map(|v| v / peak).collect();

        // Peak location from the fine grid, refined by a 3-point parabola.
        let ip = q
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let peak_fine = if ip > 0 && ip + 1 < q.len() {
            let (y0, y1, y2) = (q[ip - 1], q[ip], q[ip + 1]);
            let denom = y0 - 2.0 * y1 + y2;
            if denom.abs() > 0.0 {
                ip as f64 + 0.5 * (y0 - y2) / denom
            } else {
                ip as f64
            }
        } else {
            ip as f64
        };
        let peak_offset_samples = peak_fine / OVERSAMPLE as f64 - first as f64;

        return Ok(PulseTemplate { samples, extent_samples: extent, peak_offset_samples });
    }
    unreachable!("horizon loop always returns");
}

/// One simulated OTDR trace with ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    /// Detected power samples (normalized linear units).
    pub samples: Vec<f64>,
    /// Ground-truth event peak position, meters.
    pub event_position_m: f64,
    /// Ground-truth event peak position, fractional sample index.
    pub event_position_idx: f64,
    /// First sample index of the event extent (template start).
    pub event_start_idx: usize,
    /// Ground-truth reflectance, dB.
    pub reflectance_db: f64,
    /// SNR used for noise calibration (Eq. definition above), dB.
    pub snr_db: f64,
    /// Noise stream seed; with the generation parameters it reproduces the
    /// trace bit-exactly.
    pub seed: u64,
}

impl Trace {
    /// Event extent [start, end) given a template.
    pub fn event_span(&self, template: &PulseTemplate) -> (usize, usize) {
        (self.event_start_idx, self.event_start_idx + template.extent_samples)
    }
}

/// Noise standard deviation satisfying the SNR definition for peak
/// amplitude `a` and a given template.
pub fn noise_sigma(template: &PulseTemplate, a: f64, snr_db: f64) -> f64 {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return 0.0;
    }
    let snr_lin = 10f64.powf(snr_db / 10.0);
    (a * a * template.energy() / (template.extent_samples as f64 * snr_lin)).sqrt()
}

/// Simulates one trace with an already-built template.
///
/// `position_m` is the requested event-peak position; the template is
/// placed on the sample grid at the start index that brings the peak
/// closest to it (within half a sample), and the achieved position is the
/// one stored in the returned trace.
pub fn simulate_trace_with(
    cfg: &SimConfig,
    template: &PulseTemplate,
    snr_db: f64,
    reflectance_db: f64,
    position_m: f64,
    seed: u64,
) -> Result<Trace> {
    let n = cfg.trace_len_samples;
    let ext = template.extent_samples;
    let requested_idx = position_m / cfg.sample_spacing_m;
    let start = (requested_idx - template.peak_offset_samples).round();
    if !(start >= 0.0) || start as usize + ext > n {
        return Err(OtdrError::Placement(format!(
            "event at {position_m} m (start index {start}) does not fit the \
             {ext}-sample pulse in a {n}-sample trace"
        )));
    }
    let start = start as usize;
    if !snr_db.is_finite() && !(snr_db.is_infinite() && snr_db > 0.0) {
        return Err(OtdrError::Config(format!("snr_db must be finite or +inf, got {snr_db}")));
    }

    let a = cfg.amplitude_for_reflectance(reflectance_db);
    let sigma = noise_sigma(template, a, snr_db);

    let mut samples = vec![0.0f64; n];
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in samples.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = sigma * z;
        }
    }
    for (i, &t) in template.samples.iter().enumerate() {
        samples[start + i] += a * t;
    }

    let event_position_idx = start as f64 + template.peak_offset_samples;
    Ok(Trace {
        samples,
        event_position_m: event_position_idx * cfg.sample_spacing_m,
        event_position_idx,
        event_start_idx: start,
        reflectance_db,
        snr_db,
        seed,
    })
}

/// Simulates one trace (builds the template internally; prefer
/// [`simulate_trace_with`] plus a cached template in loops).
pub fn simulate_trace(
    cfg: &SimConfig,
    snr_db: f64,
    reflectance_db: f64,
    position_m: f64,
    seed: u64,
) -> Result<Trace> {
    let template = build_pulse_template(cfg)?;
    simulate_trace_with(cfg, &template, snr_db, reflectance_db, position_m, seed)
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws the per-trace generation parameters for batch index `i`.
fn draw_trace_params(
    cfg: &SimConfig,
    template: &PulseTemplate,
    i: u64,
) -> (f64, f64, f64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &[STREAM_BATCH_PARAMS, i]));
    let snr_db = uniform_in(&mut rng, cfg.snr_db_range[0], cfg.snr_db_range[1]);
    let reflectance_db =
        uniform_in(&mut rng, cfg.reflectance_db_range[0], cfg.reflectance_db_range[1]);
    let max_start = cfg.trace_len_samples - template.extent_samples;
    let start = rng.random_range(0..=max_start);
    let position_m =
        (start as f64 + template.peak_offset_samples) * cfg.sample_spacing_m;
    let noise_seed = derive_seed(cfg.rng_seed, &[STREAM_BATCH_NOISE, i]);
    (snr_db, reflectance_db, position_m, noise_seed)
}

/// Simulates `n_traces` traces with SNR, reflectance, and position drawn
/// uniformly from the configured ranges.
///
/// Every trace derives its own RNG streams from `(cfg.rng_seed, index)`,
/// so results are bit-identical regardless of thread count.
pub fn simulate_batch(cfg: &SimConfig, n_traces: usize) -> Result<Vec<Trace>> {
    if n_traces == 0 {
        return Err(OtdrError::Config("n_traces must be >= 1".into()));
    }
    let template = build_pulse_template(cfg)?;
    (0..n_traces)
        .into_par_iter()
        .map(|i| {
            let (snr_db, reflectance_db, position_m, noise_seed) =
                draw_trace_params(cfg, &template, i as u64);
            simulate_trace_with(cfg, &template, snr_db, reflectance_db, position_m, noise_seed)
        })
        .collect()
}

/// Monte Carlo re-estimation of the calibrated SNR: generates `n_traces`
/// at a fixed `snr_db` (random reflectance and position), measures the
/// event-region noise-to-signal energy ratio against the known noise-free
/// signal, and converts the mean ratio back to dB.
pub fn estimate_snr_mc(cfg: &SimConfig, snr_db: f64, n_traces: usize) -> Result<f64> {
    if n_traces == 0 {
        return Err(OtdrError::Config("n_traces must be >= 1".into()));
    }
    let template = build_pulse_template(cfg)?;
    let ratios: Vec<f64> = (0..n_traces)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let (_, reflectance_db, position_m, noise_seed) =
                draw_trace_params(cfg, &template, i as u64);
            let trace = simulate_trace_with(
                cfg,
                &template,
                snr_db,
                reflectance_db,
                position_m,
                noise_seed,
            )?;
            let a = cfg.amplitude_for_reflectance(reflectance_db);
            let (s0, s1) = trace.event_span(&template);
            let mut noise_energy = 0.0;
            for (i, &v) in trace.samples[s0..s1].iter().enumerate() {
                let resid = v - a * template.samples[i];
                noise_energy += resid * resid;
            }
            Ok(noise_energy / (a * a * template.energy()))
        })
        .collect::<Result<_>>()?;
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    if !(mean_ratio > 0.0) {
        return Err(OtdrError::Calibration(
            "noise-to-signal ratio is zero; cannot estimate SNR".into(),
        ));
    }
    Ok(-10.0 * mean_ratio.log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULT_TEMPLATE: [f64; 11] = [
        0.3860608687190107,
        0.7524344898324766,
        0.9523300759103275,
        1.0,
        0.9930351906723318,
        0.9837061553990093,
        0.9815896163638087,
        0.9827292729889442,
        0.9507297944411056,
        0.6201658767522907,
        0.20432840363120996,
    ];

    fn fwhm_samples(t: &PulseTemplate) -> f64 {
        let half = 0.5;
        let s = &t.samples;
        let mut left = None;
        for i in 1..s.len() {
            if s[i - 1] < half && s[i] >= half {
                left = Some((i - 1) as f64 + (half - s[i - 1]) / (s[i] - s[i - 1]));
                break;
            }
        }
        let mut right = None;
        for i in (1..s.len()).rev() {
            if s[i] < half && s[i - 1] >= half {
                right = Some((i - 1) as f64 + (s[i - 1] - half) / (s[i - 1] - s[i]));
                break;
            }
        }
        // Edge samples above half-max extend the width to the boundary.
        let l = left.unwrap_or(0.0);
        let r = right.unwrap_or((s.len() - 1) as f64);
        r - l
    }

    #[test]
    fn default_template_is_frozen() {
        let cfg = SimConfig::default();
        let t = build_pulse_template(&cfg).unwrap();
        assert_eq!(t.extent_samples, 11);
        assert_eq!(t.samples.len(), 11);
        for (got, want) in t.samples.iter().zip(DEFAULT_TEMPLATE) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        assert!((t.peak_offset_samples - 3.153563996903097).abs() < 1e-9);
        assert!((t.energy() - 7.835447871611512).abs() < 1e-9);
    }

    #[test]
    fn alternate_config_template_is_frozen() {
        let cfg = SimConfig {
            pulse_width_s: 50e-9,
            bessel_bandwidth_hz: 0.6 / 50e-9,
            bessel_order: 2,
            sample_spacing_m: 0.5,
            ..SimConfig::default()
        };
        let t = build_pulse_template(&cfg).unwrap();
        assert_eq!(t.extent_samples, 12);
        assert!((t.peak_offset_samples - 7.792554783612138).abs() < 1e-9);
        assert!((t.energy() - 6.814387873932352).abs() < 1e-9);
        assert!((t.samples[0] - 0.15965749741021792).abs() < 1e-9);
        assert_eq!(t.samples[8], 1.0);
        assert!((t.samples[11] - 0.17891123151761515).abs() < 1e-9);
    }

    #[test]
    fn template_fwhm_matches_pulse_span() {
        // c·T/(2n) at T=100 ns, n=1.468 ≈ 10.21 m ⇒ 10.21 samples at 1 m.
        let cfg = SimConfig::default();
        let t = build_pulse_template(&cfg).unwrap();
        let span = SPEED_OF_LIGHT_M_S * cfg.pulse_width_s / (2.0 * cfg.group_index);
        let span_samples = span / cfg.sample_spacing_m;
        let fwhm = fwhm_samples(&t);
        assert!(
            (fwhm - span_samples).abs() <= 0.2 * span_samples,
            "FWHM {fwhm} outside ±20% of {span_samples}"
        );
    }

    #[test]
    fn infinite_bandwidth_bypasses_filter() {
        let cfg = SimConfig { bessel_bandwidth_hz: f64::INFINITY, ..SimConfig::default() };
        let t = build_pulse_template(&cfg).unwrap();
        let want_ext = (cfg.pulse_width_s / cfg.sample_interval_s() - 1e-12).ceil() as usize;
        assert_eq!(t.extent_samples, want_ext);
        assert!(t.samples.iter().all(|&v| v == 1.0));
        let t2 = build_pulse_template(&cfg).unwrap();
        assert_eq!(t, t2);
    }

    #[test]
    fn template_is_deterministic() {
        let cfg = SimConfig::default();
        assert_eq!(build_pulse_template(&cfg).unwrap(), build_pulse_template(&cfg).unwrap());
    }

    #[test]
    fn template_peak_is_normalized() {
        for order in [1, 2, 4, 6, 8] {
            let cfg = SimConfig { bessel_order: order, ..SimConfig::default() };
            let t = build_pulse_template(&cfg).unwrap();
            let peak = t.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(peak, 1.0, "order {order}");
            assert!(t.energy() > 0.0);
            assert!(t.peak_offset_samples >= 0.0);
            assert!(t.peak_offset_samples < t.extent_samples as f64);
        }
    }

    #[test]
    fn oversized_pulse_is_a_config_error() {
        let cfg = SimConfig { trace_len_samples: 8, ..SimConfig::default() };
        match build_pulse_template(&cfg) {
            Err(OtdrError::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn zero_noise_trace_is_pure_scaled_template() {
        let cfg = SimConfig::default();
        let t = build_pulse_template(&cfg).unwrap();
        let trace =
            simulate_trace_with(&cfg, &t, f64::INFINITY, -12.0, 500.0, 7).unwrap();
        let a = cfg.amplitude_for_reflectance(-12.0);
        let (s0, s1) = trace.event_span(&t);
        for (i, &v) in trace.samples.iter().enumerate() {
            if i >= s0 && i < s1 {
                assert!((v - a * t.samples[i - s0]).abs() < 1e-15);
            } else {
                assert_eq!(v, 0.0);
            }
        }
        // Argmax lands on the rounded ground-truth index.
        let argmax =
            trace.samples.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        assert_eq!(argmax, trace.event_position_idx.round() as usize);
        // Requested and achieved positions agree within half a sample.
        assert!((trace.event_position_m - 500.0).abs() <= 0.5 * cfg.sample_spacing_m);
    }

    #[test]
    fn signal_energy_is_position_invariant() {
        let cfg = SimConfig::default();
        let t = build_pulse_template(&cfg).unwrap();
        let energy_at = |pos: f64| {
            let tr = simulate_trace_with(&cfg, &t, f64::INFINITY, -20.0, pos, 0).unwrap();
            tr.samples.iter().map(|v| v * v).sum::<f64>()
        };
        let e0 = energy_at(10.0);
        for pos in [123.0, 500.0, 988.0] {
            let e = energy_at(pos);
            assert!(((e - e0) / e0).abs() < 1e-12, "energy varies with position: {e} vs {e0}");
        }
    }

    #[test]
    fn out_of_bounds_placement_is_rejected() {
        let cfg = SimConfig::default();
        let t = build_pulse_template(&cfg).unwrap();
        for pos in [-5.0, 0.0, 997.0, 1500.0] {
            match simulate_trace_with(&cfg, &t, 10.0, -10.0, pos, 0) {
                Err(OtdrError::Placement(_)) => {}
                other => panic!("position {pos}: expected placement error, got {other:?}"),
            }
        }
        // First valid start: peak at peak_offset.
        let pos = t.peak_offset_samples * cfg.sample_spacing_m;
        assert!(simulate_trace_with(&cfg, &t, 10.0, -10.0, pos, 0).is_ok());
    }

    #[test]
    fn traces_are_seed_deterministic() {
        let cfg = SimConfig::default();
        let t = build_pulse_template(&cfg).unwrap();
        let a = simulate_trace_with(&cfg, &t, 5.0, -20.0, 321.0, 99).unwrap();
        let b = simulate_trace_with(&cfg, &t, 5.0, -20.0, 321.0, 99).unwrap();
        assert_eq!(a, b);
        let c = simulate_trace_with(&cfg, &t, 5.0, -20.0, 321.0, 100).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn batch_is_deterministic_and_well_formed() {
        let cfg = SimConfig { rng_seed: 11, trace_len_samples: 200, ..SimConfig::default() };
        let a = simulate_batch(&cfg, 50).unwrap();
        let b = simulate_batch(&cfg, 50).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        let t = build_pulse_template(&cfg).unwrap();
        for tr in &a {
            assert!(tr.samples.iter().all(|v| v.is_finite()));
            assert!(tr.event_position_idx >= 0.0);
            assert!(tr.event_position_idx < cfg.trace_len_samples as f64);
            assert!(tr.event_start_idx + t.extent_samples <= cfg.trace_len_samples);
            assert!(tr.snr_db >= cfg.snr_db_range[0] && tr.snr_db <= cfg.snr_db_range[1]);
            assert!(
                tr.reflectance_db >= cfg.reflectance_db_range[0]
                    && tr.reflectance_db <= cfg.reflectance_db_range[1]
            );
        }
        let single = simulate_batch(&cfg, 1).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn batch_snr_distribution_is_uniform() {
        let cfg = SimConfig { trace_len_samples: 64, rng_seed: 5, ..SimConfig::default() };
        let traces = simulate_batch(&cfg, 5000).unwrap();
        let mut snrs: Vec<f64> = traces.iter().map(|t| t.snr_db).collect();
        snrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = snrs.len() as f64;
        let mut ks = 0.0f64;
        for (i, &s) in snrs.iter().enumerate() {
            let cdf = (s - 0.0) / 30.0;
            let emp_hi = (i + 1) as f64 / n;
            let emp_lo = i as f64 / n;
            ks = ks.max((cdf - emp_lo).abs()).max((emp_hi - cdf).abs());
        }
        assert!(ks < 0.025, "KS statistic {ks} too large for uniform SNR");
    }

    #[test]
    fn noise_is_white() {
        let cfg = SimConfig { trace_len_samples: 20000, ..SimConfig::default() };
        let t = build_pulse_template(&cfg).unwrap();
        let tr = simulate_trace_with(&cfg, &t, 10.0, -20.0, 10000.0, 3).unwrap();
        let a = cfg.amplitude_for_reflectance(-20.0);
        let (s0, s1) = tr.event_span(&t);
        let noise: Vec<f64> = tr
            .samples
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if i >= s0 && i < s1 {
                    v - a * t.samples[i - s0]
                } else {
                    v
                }
            })
            .collect();
        let n = noise.len() as f64;
        let var: f64 = noise.iter().map(|v| v * v).sum::<f64>() / n;
        let bound = 4.0 / n.sqrt();
        for lag in 1..=10 {
            let cov: f64 = noise[..noise.len() - lag]
                .iter()
                .zip(&noise[lag..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / n;
            let rho = cov / var;
            assert!(rho.abs() < bound, "lag {lag}: autocorrelation {rho} exceeds {bound}");
        }
    }

    #[test]
    fn mc_snr_estimate_recovers_requested_value() {
        let cfg = SimConfig { trace_len_samples: 64, rng_seed: 17, ..SimConfig::default() };
        for snr in [0.0, 20.0] {
            let est = estimate_snr_mc(&cfg, snr, 10_000).unwrap();
            assert!((est - snr).abs() < 0.1, "requested {snr} dB, estimated {est} dB");
        }
    }

    #[test]
    fn noise_sigma_matches_snr_definition() {
        let cfg = SimConfig::default();
        let t = build_pulse_template(&cfg).unwrap();
        let a = cfg.amplitude_for_reflectance(-10.0);
        for snr in [0.0, 7.0, 30.0] {
            let sigma = noise_sigma(&t, a, snr);
            let snr_back = 10.0
                * (a * a * t.energy() / (t.extent_samples as f64 * sigma * sigma)).log10();
            assert!((snr_back - snr).abs() < 1e-12);
        }
        assert_eq!(noise_sigma(&t, a, f64::INFINITY), 0.0);
    }

    #[test]
    fn reference_reflectance_maps_to_unit_amplitude() {
        let cfg = SimConfig::default();
        assert!((cfg.amplitude_for_reflectance(REFERENCE_REFLECTANCE_DB) - 1.0).abs() < 1e-15);
        // -5 dB upper bound of the default range: the normalization max.
        assert!((cfg.max_amplitude() - 10f64.powf((-5.0 + 0.22) / 10.0)).abs() < 1e-15);
    }

    #[test]
    fn config_patch_resolves_dependent_defaults() {
        let patch =
            SimConfigPatch::parse("pulse_width_s = 5e-8\n", ConfigFormat::Toml).unwrap();
        let cfg = patch.resolve().unwrap();
        assert_eq!(cfg.pulse_width_s, 5e-8);
        assert!((cfg.bessel_bandwidth_hz - 0.6 / 5e-8).abs() < 1e-6);
        assert_eq!(cfg.bessel_order, 4);

        let patch = SimConfigPatch::parse(
            r#"{"bessel_bandwidth_hz": 4.0e6, "rng_seed": 9}"#,
            ConfigFormat::Json,
        )
        .unwrap();
        let cfg = patch.resolve().unwrap();
        assert_eq!(cfg.bessel_bandwidth_hz, 4.0e6);
        assert_eq!(cfg.rng_seed, 9);
        assert_eq!(cfg.pulse_width_s, 100e-9);
    }

    #[test]
    fn config_patch_rejects_unknown_fields_and_bad_values() {
        assert!(SimConfigPatch::parse("pulse_w = 1e-7\n", ConfigFormat::Toml).is_err());
        let patch =
            SimConfigPatch::parse("snr_db_range = [10.0, 3.0]\n", ConfigFormat::Toml).unwrap();
        assert!(matches!(patch.resolve(), Err(OtdrError::Config(_))));
        let patch = SimConfigPatch::parse("bessel_order = 11\n", ConfigFormat::Toml).unwrap();
        assert!(matches!(patch.resolve(), Err(OtdrError::Config(_))));
    }

    #[test]
    fn infinite_bandwidth_parses_from_toml() {
        let patch =
            SimConfigPatch::parse("bessel_bandwidth_hz = inf\n", ConfigFormat::Toml).unwrap();
        let cfg = patch.resolve().unwrap();
        assert!(cfg.bessel_bandwidth_hz.is_infinite());
    }
}
