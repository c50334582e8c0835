//! Prototype filter and composite pulse construction.
//!
//! The prototype h is a truncated square-root raised cosine with symbol
//! interval T, normalized to unit energy on the sample grid so that the
//! matched cascade rho = h * h peaks at exactly 1. All continuous-time
//! formulas are realized on the grid t = m / (P*L/T), which oversamples the
//! occupied band by at least 2x.

use num_complex::Complex64;
use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};

use crate::codes::SpreadingCode;
use crate::signal::{conj_reverse, convolve, IqSignal};
use crate::{Error, Result};

/// Largest tolerated |rho(nT)| / rho(0) for n != 0.
pub const NYQUIST_TOL: f64 = 1e-4;
/// Largest tolerated cross-term magnitude relative to the aligned peak.
pub const ICI_TOL: f64 = 1e-3;

/// Grid and band geometry shared by every waveform operation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WaveformConfig {
    /// Non-overlapped subcarrier count (band spacing 2/T).
    pub n: usize,
    /// Overlapped subcarrier count, always 2n (band spacing 1/T).
    pub l: usize,
    /// Symbol interval in seconds, 1.0 by convention.
    pub t: f64,
    /// Prototype roll-off, in (0, 1].
    pub alpha: f64,
    /// Prototype half-support in units of T.
    pub span_symbols: usize,
    /// Samples per chip; sample rate = p*l/T.
    pub p: usize,
}

impl Default for WaveformConfig {
    fn default() -> Self {
        Self::with_n(64)
    }
}

impl WaveformConfig {
    /// Standard geometry for a given subcarrier count: l = 2n, T = 1,
    /// full roll-off, 16-symbol half-support, 2 samples per chip.
    pub fn with_n(n: usize) -> Self {
        WaveformConfig {
            n,
            l: 2 * n,
            t: 1.0,
            alpha: 1.0,
            span_symbols: 16,
            p: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.l != 2 * self.n {
            return Err(Error::BadConfig(format!(
                "need l = 2n with n > 0, got n={} l={}",
                self.n, self.l
            )));
        }
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(Error::BadConfig(format!("symbol interval {} s", self.t)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::BadConfig(format!(
                "roll-off must lie in (0,1], got {}",
                self.alpha
            )));
        }
        if self.span_symbols < 4 {
            return Err(Error::BadConfig(format!(
                "half-support of {} symbols is too short, need at least 4",
                self.span_symbols
            )));
        }
        if self.p < 2 {
            return Err(Error::BadConfig(format!(
                "oversampling {} is below the critical 2 samples per chip",
                self.p
            )));
        }
        Ok(())
    }

    /// Samples per second.
    pub fn sample_rate(&self) -> f64 {
        (self.p * self.l) as f64 / self.t
    }

    /// Samples per symbol interval T.
    pub fn samples_per_symbol(&self) -> usize {
        self.p * self.l
    }

    /// One-sided edge of the occupied band, (l + alpha) / (2T).
    pub fn band_edge(&self) -> f64 {
        (self.l as f64 + self.alpha) / (2.0 * self.t)
    }

    /// Non-overlapped grid: (2k - n + 1) / T, spacing 2/T.
    pub fn fmt_freqs(&self) -> Vec<f64> {
        (0..self.n)
            .map(|k| (2.0 * k as f64 - self.n as f64 + 1.0) / self.t)
            .collect()
    }

    /// Overlapped grid: (k - n + 1/2) / T, spacing 1/T.
    pub fn ofmt_freqs(&self) -> Vec<f64> {
        (0..self.l)
            .map(|k| (k as f64 - self.n as f64 + 0.5) / self.t)
            .collect()
    }
}

/// Prototype and its composite responses on a shared grid.
#[derive(Debug, Clone)]
pub struct PulseBank {
    pub cfg: WaveformConfig,
    /// Real square-root Nyquist prototype, unit energy.
    pub h: IqSignal,
    /// Matched cascade h * h; Nyquist for interval T.
    pub rho: IqSignal,
    /// Adjacent-band overlap pulse h * (h e^{j2pi t/T}).
    pub d: IqSignal,
    pub fmt_freqs: Vec<f64>,
    pub ofmt_freqs: Vec<f64>,
    /// Achieved max |rho(nT)| / rho(0), n != 0; always <= NYQUIST_TOL.
    pub nyquist_leakage: f64,
}

/// Square-root raised cosine, unnormalized, with removable singularities
/// at t = 0 and |t| = T/(4 alpha) evaluated by their limits.
fn srrc(t: f64, t_sym: f64, alpha: f64) -> f64 {
    let x = t / t_sym;
    if x.abs() < 1e-12 {
        return 1.0 - alpha + 4.0 * alpha / PI;
    }
    let fourax = 4.0 * alpha * x;
    let den = 1.0 - fourax * fourax;
    if den.abs() < 1e-9 {
        let arg = PI / (4.0 * alpha);
        return alpha
            * FRAC_1_SQRT_2
            * ((1.0 + 2.0 / PI) * arg.sin() + (1.0 - 2.0 / PI) * arg.cos());
    }
    ((PI * x * (1.0 - alpha)).sin() + fourax * (PI * x * (1.0 + alpha)).cos()) / (PI * x * den)
}

/// Sum of unit tones sin(pi l x) / sin(pi x), x in units of T; peaks of
/// magnitude l at integer x, exact zeros at the other multiples of 1/l.
pub fn dirichlet(l: usize, x: f64) -> f64 {
    let n = x.round();
    if x == n {
        // limit l * (-1)^(n (l+1))
        let flips = (n as i64) * (l as i64 + 1);
        return if flips.rem_euclid(2) == 0 {
            l as f64
        } else {
            -(l as f64)
        };
    }
    (PI * l as f64 * x).sin() / (PI * x).sin()
}

/// Weighted tone sum sum_k w_k e^{j2pi f_k t} over the given grid.
pub fn tone_sum(
    freqs: &[f64],
    weights: &[Complex64],
    len: usize,
    sample_rate: f64,
    origin_index: usize,
) -> Vec<Complex64> {
    assert_eq!(freqs.len(), weights.len());
    let mut out = vec![Complex64::new(0.0, 0.0); len];
    for (f, w) in freqs.iter().zip(weights) {
        for (m, v) in out.iter_mut().enumerate() {
            let t = (m as f64 - origin_index as f64) / sample_rate;
            *v += w * Complex64::from_polar(1.0, TAU * f * t);
        }
    }
    out
}

/// Build the prototype and its composite responses.
///
/// Fails when truncation at the configured span leaves more than
/// NYQUIST_TOL of inter-symbol leakage in rho.
pub fn design_prototype(cfg: WaveformConfig) -> Result<PulseBank> {
    cfg.validate()?;
    let fs = cfg.sample_rate();
    let half = cfg.span_symbols * cfg.samples_per_symbol();
    let mut h: Vec<f64> = (0..2 * half + 1)
        .map(|m| srrc((m as f64 - half as f64) / fs, cfg.t, cfg.alpha))
        .collect();
    let scale = 1.0 / h.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut h {
        *v *= scale;
    }
    let h = IqSignal::new(
        h.into_iter().map(|v| Complex64::new(v, 0.0)).collect(),
        fs,
        half,
    )?;

    let rho = convolve(&h, &h)?;
    let spt = cfg.samples_per_symbol();
    let rho0 = rho.samples[rho.origin_index].re;
    let mut leakage = 0.0f64;
    for n in 1..=2 * cfg.span_symbols {
        let off = n * spt;
        leakage = leakage.max(rho.samples[rho.origin_index + off].norm() / rho0);
        leakage = leakage.max(rho.samples[rho.origin_index - off].norm() / rho0);
    }
    if leakage > NYQUIST_TOL {
        return Err(Error::DesignFailure {
            leakage,
            tol: NYQUIST_TOL,
        });
    }

    let shifted = IqSignal::new(
        h.samples
            .iter()
            .enumerate()
            .map(|(m, v)| v * Complex64::from_polar(1.0, TAU * h.time_at(m) / cfg.t))
            .collect(),
        fs,
        h.origin_index,
    )?;
    let d = convolve(&h, &shifted)?;

    Ok(PulseBank {
        cfg,
        fmt_freqs: cfg.fmt_freqs(),
        ofmt_freqs: cfg.ofmt_freqs(),
        h,
        rho,
        d,
        nyquist_leakage: leakage,
    })
}

/// Adjacent-band overlap pulse, verified to be zero-phase: d(t) e^{-j pi t/T}
/// must be real and even to 1e-9 of the peak.
pub fn compute_d(bank: &PulseBank) -> Result<IqSignal> {
    let d = &bank.d;
    let peak = d
        .samples
        .iter()
        .map(|v| v.norm())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let n = d.len();
    let mut residual = 0.0f64;
    for m in 0..n {
        let rot = d.samples[m] * Complex64::from_polar(1.0, -PI * d.time_at(m) / bank.cfg.t);
        let mirror = d.samples[n - 1 - m]
            * Complex64::from_polar(1.0, -PI * d.time_at(n - 1 - m) / bank.cfg.t);
        residual = residual.max(rot.im.abs());
        residual = residual.max((rot - mirror).norm() / 2.0);
    }
    if residual > 1e-9 * peak {
        return Err(Error::DesignFailure {
            leakage: residual / peak,
            tol: 1e-9,
        });
    }
    Ok(d.clone())
}

/// Spread pulse sum_k gamma_k h(t) e^{j2pi fbar_k t}, realized as h times
/// the code's tone sum.
pub fn ofmt_pulse(bank: &PulseBank, code: &SpreadingCode) -> Result<IqSignal> {
    if code.len() != bank.cfg.l {
        return Err(Error::LengthMismatch {
            expected: bank.cfg.l,
            got: code.len(),
        });
    }
    modulated_sum(bank, &bank.ofmt_freqs, &code.gamma)
}

/// Worst-case transmit PAPR of one isolated code interval: the spread
/// pulse's peak power over the average power of a stream sending unit
/// symbols at the interval rate. A long random frame peaks above this
/// figure by whatever its overlap pile-up adds (about a dB at full span).
pub fn pulse_papr_db(bank: &PulseBank, code: &SpreadingCode) -> Result<f64> {
    let p = ofmt_pulse(bank, code)?;
    let peak = p
        .samples
        .iter()
        .map(|v| v.norm_sqr())
        .fold(0.0f64, f64::max);
    let energy: f64 = p.samples.iter().map(|v| v.norm_sqr()).sum();
    Ok(10.0 * (peak * bank.cfg.samples_per_symbol() as f64 / energy).log10())
}

/// Non-overlapped counterpart on the 2/T grid, with explicit gains.
pub fn fmt_pulse(bank: &PulseBank, gamma: &[Complex64]) -> Result<IqSignal> {
    if gamma.len() != bank.cfg.n {
        return Err(Error::LengthMismatch {
            expected: bank.cfg.n,
            got: gamma.len(),
        });
    }
    modulated_sum(bank, &bank.fmt_freqs, gamma)
}

fn modulated_sum(bank: &PulseBank, freqs: &[f64], gamma: &[Complex64]) -> Result<IqSignal> {
    let h = &bank.h;
    let tones = tone_sum(freqs, gamma, h.len(), h.sample_rate, h.origin_index);
    IqSignal::new(
        h.samples.iter().zip(tones).map(|(a, b)| a * b).collect(),
        h.sample_rate,
        h.origin_index,
    )
}

/// Code-independent part of the matched-filter response: the Dirichlet
/// comb times rho. Peak l at t = 0, zeros every T/l elsewhere.
pub fn aligned_term(bank: &PulseBank) -> IqSignal {
    let rho = &bank.rho;
    let l = bank.cfg.l;
    IqSignal::new(
        rho.samples
            .iter()
            .enumerate()
            .map(|(m, v)| v * dirichlet(l, rho.time_at(m) / bank.cfg.t))
            .collect(),
        rho.sample_rate,
        rho.origin_index,
    )
    .expect("grid preserved")
}

fn adjacent_brackets(gamma: &[Complex64]) -> Vec<Complex64> {
    gamma
        .windows(2)
        .map(|w| {
            let z = w[0].conj() * w[1];
            Complex64::new(2.0 * z.re, 0.0)
        })
        .collect()
}

/// Adjacent-band interference term: d(t) weighted by the gain brackets
/// 2 Re{gamma*_k gamma_{k+1}} on the lower frequency of each pair.
/// Identically zero for any code built from binary chips.
pub fn cross_term(bank: &PulseBank, code: &SpreadingCode) -> Result<IqSignal> {
    if code.len() != bank.cfg.l {
        return Err(Error::LengthMismatch {
            expected: bank.cfg.l,
            got: code.len(),
        });
    }
    let d = &bank.d;
    let brackets = adjacent_brackets(&code.gamma);
    let tones = tone_sum(
        &bank.ofmt_freqs[..bank.cfg.l - 1],
        &brackets,
        d.len(),
        d.sample_rate,
        d.origin_index,
    );
    IqSignal::new(
        d.samples.iter().zip(tones).map(|(a, b)| a * b).collect(),
        d.sample_rate,
        d.origin_index,
    )
}

/// Cross term evaluated the long way: explicit per-band pulses convolved
/// pairwise. Oracle for the factored form above.
pub fn cross_term_direct(bank: &PulseBank, gamma: &[Complex64]) -> Result<IqSignal> {
    if gamma.len() != bank.cfg.l {
        return Err(Error::LengthMismatch {
            expected: bank.cfg.l,
            got: gamma.len(),
        });
    }
    let h = &bank.h;
    let band = |k: usize| -> IqSignal {
        IqSignal::new(
            h.samples
                .iter()
                .enumerate()
                .map(|(m, v)| {
                    v * Complex64::from_polar(1.0, TAU * bank.ofmt_freqs[k] * h.time_at(m))
                })
                .collect(),
            h.sample_rate,
            h.origin_index,
        )
        .expect("grid preserved")
    };
    let mut acc: Option<IqSignal> = None;
    for k in 0..bank.cfg.l - 1 {
        let weight = gamma[k] * gamma[k + 1].conj() + gamma[k].conj() * gamma[k + 1];
        let pair = convolve(&band(k), &band(k + 1))?;
        match &mut acc {
            None => {
                let mut first = pair;
                for v in &mut first.samples {
                    *v *= weight;
                }
                acc = Some(first);
            }
            Some(sum) => {
                for (s, p) in sum.samples.iter_mut().zip(&pair.samples) {
                    *s += weight * p;
                }
            }
        }
    }
    Ok(acc.expect("l >= 2"))
}

/// Full matched-filter composite gbar * gbar^*(-t). For an ICI-free code
/// this collapses to the aligned term within truncation leakage.
pub fn system_response(bank: &PulseBank, code: &SpreadingCode) -> Result<IqSignal> {
    let g = ofmt_pulse(bank, code)?;
    convolve(&g, &conj_reverse(&g))
}
