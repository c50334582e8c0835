//! Complex baseband sample buffers and envelope measurements.
//!
//! An `IqSignal` carries its sample rate and the index of the sample at
//! t = 0, so convolution and filter-bank sampling stay aligned without any
//! external bookkeeping. The symbol interval is T = 1.0 s by convention.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::{fft, Error, Result};

/// Complex baseband signal on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct IqSignal {
    pub samples: Vec<Complex64>,
    /// Samples per second; P·L/T for waveform-grid signals.
    pub sample_rate: f64,
    /// Index of the sample at t = 0.
    pub origin_index: usize,
}

impl IqSignal {
    pub fn new(samples: Vec<Complex64>, sample_rate: f64, origin_index: usize) -> Result<Self> {
        let s = Self {
            samples,
            sample_rate,
            origin_index,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::BadConfig(format!(
                "sample_rate must be positive, got {}",
                self.sample_rate
            )));
        }
        if self.origin_index >= self.samples.len() {
            return Err(Error::BadConfig(format!(
                "origin_index {} outside [0, {})",
                self.origin_index,
                self.samples.len()
            )));
        }
        if self.samples.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::BadConfig("non-finite sample".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Time of sample `idx` in seconds.
    pub fn time_at(&self, idx: usize) -> f64 {
        (idx as f64 - self.origin_index as f64) / self.sample_rate
    }

    /// Mean of |x|² over the buffer.
    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|v| v.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }

    /// Sum of |x|² over the buffer (discrete energy).
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v.norm_sqr()).sum()
    }
}

/// Full linear convolution; output origin preserves t = 0 alignment.
pub fn convolve(a: &IqSignal, b: &IqSignal) -> Result<IqSignal> {
    if a.sample_rate != b.sample_rate {
        return Err(Error::RateMismatch(a.sample_rate, b.sample_rate));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("convolution of empty signal"));
    }
    let samples = if a.len().min(b.len()) <= 32 {
        convolve_direct(&a.samples, &b.samples)
    } else {
        fft::fft_convolve(&a.samples, &b.samples)
    };
    IqSignal::new(samples, a.sample_rate, a.origin_index + b.origin_index)
}

/// O(n·m) reference convolution; also the oracle the FFT path is tested against.
pub fn convolve_direct(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); a.len() + b.len() - 1];
    for (i, &va) in a.iter().enumerate() {
        for (j, &vb) in b.iter().enumerate() {
            out[i + j] += va * vb;
        }
    }
    out
}

/// Conjugate time reversal x*(-t); realizes matched filters h*(-t).
pub fn conj_reverse(x: &IqSignal) -> IqSignal {
    let samples: Vec<Complex64> = x.samples.iter().rev().map(|v| v.conj()).collect();
    IqSignal {
        samples,
        sample_rate: x.sample_rate,
        origin_index: x.len() - 1 - x.origin_index,
    }
}

/// max |x| / RMS(|x|); ≥ 1 for any non-degenerate signal.
pub fn crest_factor(x: &IqSignal) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::UndefinedMetric("crest factor of empty signal"));
    }
    let peak = x.samples.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let rms = x.mean_power().sqrt();
    if rms == 0.0 {
        return Err(Error::UndefinedMetric("crest factor of all-zero signal"));
    }
    Ok(peak / rms)
}

/// 10·log10(max|x|² / mean|x|²) = 20·log10(crest).
pub fn papr_db(x: &IqSignal) -> Result<f64> {
    Ok(20.0 * crest_factor(x)?.log10())
}

#[derive(Serialize, Deserialize)]
struct IqHeader {
    sample_rate: f64,
    origin_index: usize,
    length: usize,
}

/// Writes little-endian interleaved f32 I/Q pairs plus a `<path>.json` sidecar header.
pub fn write_iq(path: &Path, x: &IqSignal) -> Result<()> {
    let mut buf = Vec::with_capacity(x.len() * 8);
    for v in &x.samples {
        buf.extend_from_slice(&(v.re as f32).to_le_bytes());
        buf.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    let header = IqHeader {
        sample_rate: x.sample_rate,
        origin_index: x.origin_index,
        length: x.len(),
    };
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&header)?,
    )?;
    Ok(())
}

/// Reads the format written by [`write_iq`].
pub fn read_iq(path: &Path) -> Result<IqSignal> {
    let header: IqHeader = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() != header.length * 8 {
        return Err(Error::BadConfig(format!(
            "iq payload is {} bytes, header says {}",
            buf.len(),
            header.length * 8
        )));
    }
    let samples = buf
        .chunks_exact(8)
        .map(|c| {
            Complex64::new(
                f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64,
                f32::from_le_bytes([c[4], c[5], c[6], c[7]]) as f64,
            )
        })
        .collect();
    IqSignal::new(samples, header.sample_rate, header.origin_index)
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
