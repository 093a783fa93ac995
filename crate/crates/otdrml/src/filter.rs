//! Discrete Bessel low-pass filter design and single-channel IIR filtering.
//!
//! The analog prototype uses delay-normalized (Thomson) Bessel poles — the
//! roots of the reverse Bessel polynomial θ_n, which give maximally flat
//! group delay and unit nominal delay at cutoff 1 rad/s. The discrete filter
//! is obtained by frequency-prewarping the cutoff, scaling the prototype,
//! and applying the bilinear transform with all zeros mapped to z = -1.

use num_complex::Complex64;

use crate::error::{OtdrError, Result};

/// Delay-normalized Bessel poles for orders 1..=8, stored as (re, im) with
/// im ≥ 0; conjugates are implied, and odd orders carry one real pole
/// (im = 0). Roots of the reverse Bessel polynomial θ_n(s).
const BESSEL_DELAY_POLES: [&[(f64, f64)]; 8] = [
    &[(-1.0, 0.0)],
    &[(-1.5, 0.8660254037844386)],
    &[(-2.3221853546260856, 0.0), (-1.838907322686957, 1.7543809597837212)],
    &[(-2.1037893971796273, 2.657418041856752), (-2.896210602820372, 0.8672341289345038)],
    &[
        (-3.6467385953296434, 0.0),
        (-2.324674303181645, 3.571022920337976),
        (-3.3519563991535333, 1.7426614161831975),
    ],
    &[
        (-2.515932247810821, 4.492672953653943),
        (-3.7357083563258144, 2.6262723114471256),
        (-4.248359395863364, 0.8675096732313656),
    ],
    &[
        (-4.971786858527936, 0.0),
        (-2.6856768789432657, 5.420694130716749),
        (-4.070139163638137, 3.5171740477097533),
        (-4.758290528154629, 1.7392860611305365),
    ],
    &[
        (-2.8389839488976314, 6.353911298604878),
        (-4.368289217202402, 4.414442500471539),
        (-5.204840790636882, 2.616175152642527),
        (-5.587886043263086, 0.8676144453527865),
    ],
];

/// Full complex pole set (conjugates expanded) of the delay-normalized
/// analog Bessel prototype.
pub fn bessel_delay_poles(order: usize) -> Result<Vec<Complex64>> {
    if order == 0 || order > BESSEL_DELAY_POLES.len() {
        return Err(OtdrError::Config(format!(
            "bessel order must be in 1..={}, got {order}",
            BESSEL_DELAY_POLES.len()
        )));
    }
    let mut poles = Vec::with_capacity(order);
    for &(re, im) in BESSEL_DELAY_POLES[order - 1] {
        if im == 0.0 {
            poles.push(Complex64::new(re, 0.0));
        } else {
            poles.push(Complex64::new(re, im));
            poles.push(Complex64::new(re, -im));
        }
    }
    debug_assert_eq!(poles.len(), order);
    Ok(poles)
}

/// Transfer-function coefficients of a discrete filter, in descending
/// powers of z (equivalently ascending powers of z⁻¹), with `a[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteFilter {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

/// Expands a monic polynomial from its roots: returns coefficients in
/// descending powers, length roots.len() + 1, leading coefficient 1.
fn poly_from_roots(roots: &[Complex64]) -> Vec<Complex64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        coeffs.push(Complex64::new(0.0, 0.0));
        for i in (1..coeffs.len()).rev() {
            let prev = coeffs[i - 1];
            coeffs[i] = coeffs[i] - r * prev;
        }
    }
    coeffs
}

/// Designs a discrete low-pass Bessel filter of the given order via the
/// bilinear transform with cutoff prewarping.
///
/// `cutoff_hz` must satisfy 0 < cutoff < sample_rate/2.
pub fn design_bessel_lowpass(
    order: usize,
    cutoff_hz: f64,
    sample_rate_hz: f64,
) -> Result<DiscreteFilter> {
    if !(cutoff_hz > 0.0) || !cutoff_hz.is_finite() {
        return Err(OtdrError::Config(format!(
            "cutoff must be positive and finite, got {cutoff_hz}"
        )));
    }
    if !(sample_rate_hz > 0.0) || !sample_rate_hz.is_finite() {
        return Err(OtdrError::Config(format!(
            "sample rate must be positive and finite, got {sample_rate_hz}"
        )));
    }
    if cutoff_hz >= 0.5 * sample_rate_hz {
        return Err(OtdrError::Config(format!(
            "cutoff {cutoff_hz} Hz must be below Nyquist ({} Hz)",
            0.5 * sample_rate_hz
        )));
    }

    let proto = bessel_delay_poles(order)?;

    // Prewarp the cutoff so the bilinear transform lands it exactly, then
    // scale the unit prototype to that analog frequency.
    let warped = 2.0 * sample_rate_hz * (std::f64::consts::PI * cutoff_hz / sample_rate_hz).tan();
    let analog_poles: Vec<Complex64> = proto.iter().map(|p| p * warped).collect();

    // Prototype gain for unit DC response: k = Π(-p). Real by conjugate
    // symmetry.
    let k_analog: Complex64 = analog_poles.iter().fold(Complex64::new(1.0, 0.0), |acc, p| acc * -p);
    let k_analog = k_analog.re;

    // Bilinear transform: p_d = (2fs + p)/(2fs - p); all n zeros at z = -1.
    let fs2 = 2.0 * sample_rate_hz;
    let digital_poles: Vec<Complex64> = analog_poles
        .iter()
        .map(|p| (Complex64::new(fs2, 0.0) + p) / (Complex64::new(fs2, 0.0) - p))
        .collect();
    // Gain maps by k_d = k·Π 1/(2fs - p); real by conjugate symmetry.
    let denom: Complex64 = analog_poles
        .iter()
        .fold(Complex64::new(1.0, 0.0), |acc, p| acc * (Complex64::new(fs2, 0.0) - p));
    let k_digital = k_analog / denom.re;

    // b(z) = k_d·(z+1)^n, a(z) = Π(z - p_d), both in descending powers.
    let minus_ones = vec![Complex64::new(-1.0, 0.0); order];
    let b: Vec<f64> = poly_from_roots(&minus_ones).iter().map(|c| k_digital * c.re).collect();
    let a_c = poly_from_roots(&digital_poles);
    let a: Vec<f64> = a_c
        .iter()
        .map(|c| {
            debug_assert!(c.im.abs() < 1e-9 * (1.0 + c.re.abs()), "non-real denominator");
            c.re
        })
        .collect();

    Ok(DiscreteFilter { b, a })
}

impl DiscreteFilter {
    /// Applies the filter to a signal with zero initial conditions
    /// (direct form II transposed).
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        lfilter(&self.b, &self.a, x)
    }

    /// Frequency response magnitude at normalized frequency `w` rad/sample.
    pub fn gain_at(&self, w: f64) -> f64 {
        let z = Complex64::new(0.0, -w).exp();
        let mut num = Complex64::new(0.0, 0.0);
        let mut den = Complex64::new(0.0, 0.0);
        let mut zk = Complex64::new(1.0, 0.0);
        for k in 0..self.b.len().max(self.a.len()) {
            if k < self.b.len() {
                num += self.b[k] * zk;
            }
            if k < self.a.len() {
                den += self.a[k] * zk;
            }
            zk *= z;
        }
        (num / den).norm()
    }
}

/// IIR/FIR filtering with zero initial state, direct form II transposed;
/// `a[0]` must be 1.
pub fn lfilter(b: &[f64], a: &[f64], x: &[f64]) -> Vec<f64> {
    assert!(!b.is_empty() && !a.is_empty(), "empty coefficients");
    assert!((a[0] - 1.0).abs() < 1e-12, "a[0] must be normalized to 1");
    let n = b.len().max(a.len());
    let mut bb = b.to_vec();
    bb.resize(n, 0.0);
    let mut aa = a.to_vec();
    aa.resize(n, 0.0);

    let mut state = vec![0.0f64; n.saturating_sub(1)];
    let mut y = Vec::with_capacity(x.len());
    for &xi in x {
        let yi = bb[0].mul_add(xi, *state.first().unwrap_or(&0.0));
        for j in 0..state.len() {
            let next = if j + 1 < state.len() { state[j + 1] } else { 0.0 };
            state[j] = bb[j + 1].mul_add(xi, next) - aa[j + 1] * yi;
        }
        y.push(yi);
    }
    y
}
