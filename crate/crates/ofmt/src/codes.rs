//! Spreading codes, their quarter-turn gain structure, multi-code sets,
//! and cross-correlation analysis.
//!
//! A binary chip vector zeta in {-1,+1}^L induces complex gains
//! gamma_k = e^{j phi} j^k zeta_k. These are exactly the unit-amplitude
//! gains whose adjacent-band brackets 2 Re{gamma*_k gamma_{k+1}} all
//! vanish, which is what keeps the matched composite free of
//! inter-carrier interference.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::signal::IqSignal;
use crate::{fft, Error, Result};

/// Largest adjacent-gain bracket accepted as interference-free.
pub const ICI_RESIDUAL_TOL: f64 = 1e-9;

/// Binary spreading sequence with its derived complex gains.
#[derive(Debug, Clone, PartialEq)]
pub struct SpreadingCode {
    /// Chips in {-1, +1}.
    pub zeta: Vec<i8>,
    /// Global phase in radians, 0 by convention.
    pub phi: f64,
    /// gamma_k = e^{j phi} j^k zeta_k, always unit amplitude.
    pub gamma: Vec<Complex64>,
}

impl SpreadingCode {
    pub fn len(&self) -> usize {
        self.zeta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zeta.is_empty()
    }
}

/// Quarter-turn ladder 1, j, -1, -j, ... as exact Gaussian integers.
pub(crate) fn quarter_turns(l: usize) -> Vec<Complex64> {
    (0..l)
        .map(|k| match k % 4 {
            0 => Complex64::new(1.0, 0.0),
            1 => Complex64::new(0.0, 1.0),
            2 => Complex64::new(-1.0, 0.0),
            _ => Complex64::new(0.0, -1.0),
        })
        .collect()
}

/// Derive the gain vector for a chip sequence. Rejects entries outside
/// {-1, +1}.
pub fn build_code(zeta: &[i8], phi: f64) -> Result<SpreadingCode> {
    if zeta.iter().any(|z| *z != 1 && *z != -1) {
        return Err(Error::NonBinaryChip);
    }
    let phase = Complex64::from_polar(1.0, phi);
    let gamma = quarter_turns(zeta.len())
        .into_iter()
        .zip(zeta)
        .map(|(b, z)| phase * b * (*z as f64))
        .collect();
    Ok(SpreadingCode {
        zeta: zeta.to_vec(),
        phi,
        gamma,
    })
}

/// Outcome of the adjacent-bracket scan.
#[derive(Debug, Clone, Copy)]
pub struct IciReport {
    /// max_k |gamma*_k gamma_{k+1} + gamma_k gamma*_{k+1}|
    pub max_residual: f64,
    pub pass: bool,
}

/// Scan all adjacent gain brackets. Inputs must be unit amplitude; that
/// premise is what makes the bracket criterion meaningful.
pub fn validate_ici_free(gamma: &[Complex64]) -> Result<IciReport> {
    for g in gamma {
        if (g.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::NonUnitAmplitude(g.norm()));
        }
    }
    let max_residual = gamma
        .windows(2)
        .map(|w| 2.0 * (w[0].conj() * w[1]).re.abs())
        .fold(0.0, f64::max);
    Ok(IciReport {
        max_residual,
        pass: max_residual < ICI_RESIDUAL_TOL,
    })
}

/// Sum of squared nonzero-lag cyclic autocorrelations, computed through
/// the power spectrum and rounded back to the exact integer lattice.
pub fn cyclic_autocorr_cost(zeta: &[i8]) -> f64 {
    let l = zeta.len();
    let mut buf: Vec<Complex64> = zeta
        .iter()
        .map(|z| Complex64::new(*z as f64, 0.0))
        .collect();
    fft::fft_in_place(&mut buf);
    for v in buf.iter_mut() {
        *v = Complex64::new(v.norm_sqr(), 0.0);
    }
    fft::ifft_in_place(&mut buf);
    buf[1..]
        .iter()
        .map(|v| {
            let r = (v.re / l as f64).round();
            r * r
        })
        .sum()
}

/// O(L^2) integer evaluation of the same cost.
pub fn cyclic_autocorr_cost_direct(zeta: &[i8]) -> f64 {
    let l = zeta.len();
    let total: i64 = (1..l)
        .map(|lag| {
            let r: i64 = (0..l)
                .map(|k| zeta[k] as i64 * zeta[(k + lag) % l] as i64)
                .sum();
            r * r
        })
        .sum();
    total as f64
}

/// How the L companion codes of a set are generated from the base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SetKind {
    /// Cyclic rotations of the base chips.
    Circular,
    /// Base chips masked by natural-order Hadamard columns.
    Hadamard,
}

/// A family of L companion codes with M of them active.
#[derive(Debug, Clone)]
pub struct MultiCodeSet {
    pub base: SpreadingCode,
    /// All L companion chip vectors; entry 0 is the base itself.
    pub shifts: Vec<Vec<i8>>,
    /// Number of active codes, a power of two.
    pub active_count: usize,
    /// Unnormalized DFT of the base chips, the correlator's diagonal.
    pub dft_of_base: Vec<Complex64>,
    pub kind: SetKind,
}

impl MultiCodeSet {
    /// Bits carried per interval: log2(M) for the code index plus one
    /// for the sign.
    pub fn bits_per_symbol(&self) -> u32 {
        self.active_count.trailing_zeros() + 1
    }

    /// Indices of the active companions. Circular shifts are spread at
    /// maximal spacing L/M; Hadamard masks take the first M columns, the
    /// only ones that keep the base envelope (columns 0 and 1 act as a
    /// linear phase, higher columns scramble the peak structure).
    pub fn active_indices(&self) -> Vec<usize> {
        let l = self.base.len();
        let m = self.active_count;
        match self.kind {
            SetKind::Circular => (0..m).map(|i| i * l / m).collect(),
            SetKind::Hadamard => (0..m).collect(),
        }
    }

    /// Gain vector of companion `idx`.
    pub fn gains(&self, idx: usize) -> Result<SpreadingCode> {
        build_code(&self.shifts[idx], self.base.phi)
    }
}

fn validate_set_count(m: usize, l: usize) -> Result<()> {
    if m == 0 || !m.is_power_of_two() || m > l {
        return Err(Error::BadConfig(format!(
            "active count must be a power of two within [1, {l}], got {m}"
        )));
    }
    Ok(())
}

fn base_dft(zeta: &[i8]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = zeta
        .iter()
        .map(|z| Complex64::new(*z as f64, 0.0))
        .collect();
    fft::fft_in_place(&mut buf);
    buf
}

/// Set built from all L cyclic rotations of the base.
pub fn make_circular_set(base: &SpreadingCode, m: usize) -> Result<MultiCodeSet> {
    let l = base.len();
    validate_set_count(m, l)?;
    let shifts = (0..l)
        .map(|s| {
            let mut v = Vec::with_capacity(l);
            v.extend_from_slice(&base.zeta[s..]);
            v.extend_from_slice(&base.zeta[..s]);
            v
        })
        .collect();
    Ok(MultiCodeSet {
        base: base.clone(),
        shifts,
        active_count: m,
        dft_of_base: base_dft(&base.zeta),
        kind: SetKind::Circular,
    })
}

/// Set built by masking the base with Hadamard columns; companions are
/// exactly orthogonal. Requires L to be a power of two.
pub fn make_hadamard_set(base: &SpreadingCode, m: usize) -> Result<MultiCodeSet> {
    let l = base.len();
    if !l.is_power_of_two() {
        return Err(Error::NonPowerOfTwo(l));
    }
    validate_set_count(m, l)?;
    let shifts = (0..l)
        .map(|col| {
            (0..l)
                .map(|row| {
                    let sign = if (row & col).count_ones() % 2 == 0 {
                        1
                    } else {
                        -1
                    };
                    base.zeta[row] * sign
                })
                .collect()
        })
        .collect();
    Ok(MultiCodeSet {
        base: base.clone(),
        shifts,
        active_count: m,
        dft_of_base: base_dft(&base.zeta),
        kind: SetKind::Hadamard,
    })
}

/// Histogram of |zeta_i . zeta_j| over all unordered companion pairs.
pub fn cross_corr_histogram(set: &MultiCodeSet) -> BTreeMap<i64, usize> {
    let l = set.base.len();
    let mut hist = BTreeMap::new();
    for i in 0..set.shifts.len() {
        for j in i + 1..set.shifts.len() {
            let dot: i64 = (0..l)
                .map(|k| set.shifts[i][k] as i64 * set.shifts[j][k] as i64)
                .sum();
            *hist.entry(dot.abs()).or_insert(0) += 1;
        }
    }
    hist
}

/// The code's periodic envelope sum_k gamma_k e^{j2pi fbar_k t} sampled
/// `samples_per_period` times over one interval T = 1.
pub fn envelope_signal(code: &SpreadingCode, samples_per_period: usize) -> Result<IqSignal> {
    if code.len() < 2 || samples_per_period < code.len() {
        return Err(Error::BadConfig(format!(
            "need at least 2 chips and L samples per period, got L={} n={}",
            code.len(),
            samples_per_period
        )));
    }
    let freqs: Vec<f64> = (0..code.len())
        .map(|k| k as f64 - code.len() as f64 / 2.0 + 0.5)
        .collect();
    let samples = crate::pulse::tone_sum(
        &freqs,
        &code.gamma,
        samples_per_period,
        samples_per_period as f64,
        0,
    );
    IqSignal::new(samples, samples_per_period as f64, 0)
}

/// On-disk code description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodeFile {
    #[serde(rename = "L")]
    pub l: usize,
    pub phi: f64,
    pub zeta: Vec<i8>,
    pub designer: Designer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
}

/// Which procedure produced a stored code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Designer {
    SaCrest,
    SaCyclic,
    Manual,
}

impl CodeFile {
    pub fn new(code: &SpreadingCode, designer: Designer, seed: Option<u64>, cost: Option<f64>) -> Self {
        CodeFile {
            l: code.len(),
            phi: code.phi,
            zeta: code.zeta.clone(),
            designer,
            seed,
            cost,
        }
    }

    pub fn build(&self) -> Result<SpreadingCode> {
        if self.l != self.zeta.len() {
            return Err(Error::LengthMismatch {
                expected: self.l,
                got: self.zeta.len(),
            });
        }
        build_code(&self.zeta, self.phi)
    }
}

pub fn save_code(path: &Path, file: &CodeFile) -> Result<()> {
    let json = serde_json::to_string_pretty(file)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_code(path: &Path) -> Result<CodeFile> {
    let text = std::fs::read_to_string(path)?;
    let file: CodeFile = serde_json::from_str(&text)?;
    file.build()?;
    Ok(file)
}
