//! The modem: transmit synthesis from data frames, the analysis filter
//! bank with chip estimation, the circulant multi-code correlator, and
//! symbol detection.
//!
//! Conventions. Transmit amplitude carries a sqrt(P) scale so a stream of
//! unit-modulus symbols has unit mean power away from frame edges; the
//! analysis bank divides it back out, making chip estimates unit scale.
//! ChipMatrix keeps the bank outputs with the quarter-turn ladder intact
//! (the correlator strips it via b*), while zeta_hat rows are the fully
//! derotated real parts.

use num_complex::Complex64;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::codes::{quarter_turns, MultiCodeSet, SetKind};
use crate::pulse::{tone_sum, PulseBank};
use crate::signal::IqSignal;
use crate::{fft, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TxMode {
    SingleCodeQpsk,
    MultiCodeBiorthogonal,
}

/// Payload of one code interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SymbolRecord {
    /// Unit-modulus constellation point.
    Qpsk(Complex64),
    /// Active-code slot and antipodal sign.
    Biorthogonal { index: usize, sign: i8 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TxFrame {
    pub mode: TxMode,
    /// One entry per bit, each 0 or 1.
    pub payload_bits: Vec<u8>,
    pub symbols: Vec<SymbolRecord>,
}

/// Bits per interval for a mode: 2 for QPSK, log2(M)+1 for biorthogonal.
pub fn bits_per_interval(mode: TxMode, active_count: usize) -> u32 {
    match mode {
        TxMode::SingleCodeQpsk => 2,
        TxMode::MultiCodeBiorthogonal => active_count.trailing_zeros() + 1,
    }
}

fn qpsk_point(b0: u8, b1: u8) -> Complex64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Complex64::new(
        (1.0 - 2.0 * b0 as f64) * s,
        (1.0 - 2.0 * b1 as f64) * s,
    )
}

impl TxFrame {
    /// Map a bit string onto intervals. QPSK takes bit pairs (first bit
    /// to the real axis, 0 mapping to +). Biorthogonal intervals take a
    /// sign bit (0 maps to +1) followed by the code index, MSB first.
    pub fn from_bits(mode: TxMode, active_count: usize, bits: &[u8]) -> Result<TxFrame> {
        if bits.iter().any(|b| *b > 1) {
            return Err(Error::BadConfig("payload bits must be 0 or 1".into()));
        }
        if mode == TxMode::MultiCodeBiorthogonal && !active_count.is_power_of_two() {
            return Err(Error::BadConfig(format!(
                "biorthogonal signaling needs a power-of-two code count, got {active_count}"
            )));
        }
        let per = bits_per_interval(mode, active_count) as usize;
        if bits.len() % per != 0 {
            return Err(Error::LengthMismatch {
                expected: bits.len().div_ceil(per) * per,
                got: bits.len(),
            });
        }
        let symbols = bits
            .chunks(per)
            .map(|chunk| match mode {
                TxMode::SingleCodeQpsk => SymbolRecord::Qpsk(qpsk_point(chunk[0], chunk[1])),
                TxMode::MultiCodeBiorthogonal => {
                    let sign = if chunk[0] == 0 { 1 } else { -1 };
                    let index = chunk[1..]
                        .iter()
                        .fold(0usize, |acc, b| (acc << 1) | *b as usize);
                    SymbolRecord::Biorthogonal { index, sign }
                }
            })
            .collect();
        Ok(TxFrame {
            mode,
            payload_bits: bits.to_vec(),
            symbols,
        })
    }

    pub fn random(mode: TxMode, active_count: usize, intervals: usize, seed: u64) -> Result<TxFrame> {
        let per = bits_per_interval(mode, active_count) as usize;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let bits: Vec<u8> = (0..intervals * per)
            .map(|_| rng.random::<bool>() as u8)
            .collect();
        TxFrame::from_bits(mode, active_count, &bits)
    }

    pub fn n_intervals(&self) -> usize {
        self.symbols.len()
    }
}

fn bits_to_hex(bits: &[u8]) -> String {
    bits.chunks(4)
        .map(|c| {
            let mut v = 0u8;
            for (i, b) in c.iter().enumerate() {
                v |= b << (3 - i);
            }
            char::from_digit(v as u32, 16).unwrap()
        })
        .collect()
}

fn hex_to_bits(hex: &str, bit_count: usize) -> Result<Vec<u8>> {
    let mut bits = Vec::with_capacity(hex.len() * 4);
    for ch in hex.chars() {
        let v = ch
            .to_digit(16)
            .ok_or_else(|| Error::BadConfig(format!("bad hex digit {ch:?}")))? as u8;
        for i in (0..4).rev() {
            bits.push((v >> i) & 1);
        }
    }
    if bit_count > bits.len() {
        return Err(Error::LengthMismatch {
            expected: bit_count,
            got: bits.len(),
        });
    }
    bits.truncate(bit_count);
    Ok(bits)
}

/// On-disk frame description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FrameFile {
    pub mode: TxMode,
    pub active_count: usize,
    pub bits_hex: String,
    pub bit_count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
}

impl FrameFile {
    pub fn from_frame(frame: &TxFrame, active_count: usize, seed: Option<u64>) -> Self {
        FrameFile {
            mode: frame.mode,
            active_count,
            bits_hex: bits_to_hex(&frame.payload_bits),
            bit_count: frame.payload_bits.len(),
            seed,
        }
    }

    pub fn to_frame(&self) -> Result<TxFrame> {
        let bits = hex_to_bits(&self.bits_hex, self.bit_count)?;
        TxFrame::from_bits(self.mode, self.active_count, &bits)
    }
}

pub fn save_frame(path: &Path, file: &FrameFile) -> Result<()> {
    Ok(std::fs::write(path, serde_json::to_string_pretty(file)?)?)
}

pub fn load_frame(path: &Path) -> Result<FrameFile> {
    let file: FrameFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    file.to_frame()?;
    Ok(file)
}

/// Per-interval (shift index, complex amplitude) pairs for synthesis.
fn frame_gains(set: &MultiCodeSet, frame: &TxFrame) -> Result<Vec<(usize, Complex64)>> {
    let slots = set.active_indices();
    frame
        .symbols
        .iter()
        .map(|sym| match (frame.mode, sym) {
            (TxMode::SingleCodeQpsk, SymbolRecord::Qpsk(s)) => Ok((0usize, *s)),
            (TxMode::MultiCodeBiorthogonal, SymbolRecord::Biorthogonal { index, sign }) => {
                let shift = *slots.get(*index).ok_or(Error::BadConfig(format!(
                    "code index {index} outside the {} active codes",
                    set.active_count
                )))?;
                Ok((shift, Complex64::new(*sign as f64, 0.0)))
            }
            _ => Err(Error::BadConfig("frame mode does not match its symbols".into())),
        })
        .collect()
}

/// Assemble the transmit signal: overlapping spread pulses, one per code
/// interval, amplitude sqrt(P) for unit mean power. Time zero sits at the
/// first interval's sampling instant, so a lone +1 interval reproduces
/// the spread pulse scaled by sqrt(P).
pub fn synthesize(bank: &PulseBank, set: &MultiCodeSet, frame: &TxFrame) -> Result<IqSignal> {
    if frame.symbols.is_empty() {
        return Err(Error::BadConfig("empty frame".into()));
    }
    if set.base.len() != bank.cfg.l {
        return Err(Error::LengthMismatch {
            expected: bank.cfg.l,
            got: set.base.len(),
        });
    }
    let gains = frame_gains(set, frame)?;
    let pl = bank.cfg.samples_per_symbol();
    let period = 2 * pl;
    let fs = bank.cfg.sample_rate();
    let h = &bank.h.samples;
    let support = h.len();
    let origin = bank.h.origin_index;
    let amp = (bank.cfg.p as f64).sqrt();

    // one envelope table per code used by the frame, in absolute time
    let mut tables: Vec<Option<Vec<Complex64>>> = vec![None; set.shifts.len()];
    let freqs = bank.cfg.ofmt_freqs();
    for (shift, _) in &gains {
        if tables[*shift].is_none() {
            let gamma = set.gains(*shift)?.gamma;
            tables[*shift] = Some(tone_sum(&freqs, &gamma, period, fs, 0));
        }
    }

    let n = frame.symbols.len();
    let mut x = vec![Complex64::new(0.0, 0.0); (n - 1) * pl + support];
    for (interval, (shift, s)) in gains.iter().enumerate() {
        let table = tables[*shift].as_ref().unwrap();
        let start = interval * pl;
        // local-time modulation: e^{-j2pi fbar_k nT} = (-1)^n for every k
        let parity = if interval % 2 == 1 { -1.0 } else { 1.0 };
        let scale = amp * parity * s;
        for (u, hv) in h.iter().enumerate() {
            let g = start + u;
            let phase = (g as isize - origin as isize).rem_euclid(period as isize) as usize;
            x[g] += scale * hv.re * table[phase];
        }
    }
    IqSignal::new(x, fs, origin)
}

/// Tone-by-tone synthesis oracle, quadratic in everything.
pub fn synthesize_direct(bank: &PulseBank, set: &MultiCodeSet, frame: &TxFrame) -> Result<IqSignal> {
    let gains = frame_gains(set, frame)?;
    let pl = bank.cfg.samples_per_symbol();
    let fs = bank.cfg.sample_rate();
    let h = &bank.h.samples;
    let origin = bank.h.origin_index;
    let amp = (bank.cfg.p as f64).sqrt();
    let freqs = bank.cfg.ofmt_freqs();

    let n = frame.symbols.len();
    let mut x = vec![Complex64::new(0.0, 0.0); (n - 1) * pl + h.len()];
    for (interval, (shift, s)) in gains.iter().enumerate() {
        let gamma = set.gains(*shift)?.gamma;
        for (u, hv) in h.iter().enumerate() {
            // local time relative to this interval's center
            let t = (u as f64 - origin as f64) / fs;
            let mut tone = Complex64::new(0.0, 0.0);
            for (f, g) in freqs.iter().zip(&gamma) {
                tone += g * Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * f * t);
            }
            x[interval * pl + u] += amp * s * hv.re * tone;
        }
    }
    IqSignal::new(x, fs, origin)
}

/// Analysis bank outputs and chip estimates for a frame.
#[derive(Debug, Clone)]
pub struct ChipMatrix {
    /// Real chip estimates, rows = intervals, columns = the L subcarriers.
    pub zeta_hat: Vec<Vec<f64>>,
    /// Phase-referenced bank outputs with the quarter-turn ladder intact.
    pub complex_raw: Vec<Vec<Complex64>>,
}

impl ChipMatrix {
    pub fn n_intervals(&self) -> usize {
        self.zeta_hat.len()
    }

    pub fn l(&self) -> usize {
        self.zeta_hat.first().map_or(0, Vec::len)
    }
}

fn analyze_extent(bank: &PulseBank, rx: &IqSignal, n_intervals: usize) -> Result<usize> {
    if n_intervals == 0 {
        return Err(Error::BadConfig("need at least one interval".into()));
    }
    if (rx.sample_rate - bank.cfg.sample_rate()).abs() > 1e-9 {
        return Err(Error::RateMismatch(bank.cfg.sample_rate(), rx.sample_rate));
    }
    let pl = bank.cfg.samples_per_symbol();
    let half = bank.h.origin_index;
    if rx.origin_index < half {
        return Err(Error::InsufficientSamples {
            needed: half,
            got: rx.origin_index,
        });
    }
    let needed = rx.origin_index + (n_intervals - 1) * pl + half + 1;
    if rx.len() < needed {
        return Err(Error::InsufficientSamples {
            needed,
            got: rx.len(),
        });
    }
    Ok(pl)
}

/// Run the matched filter bank at the interval sampling instants.
///
/// The per-subcarrier outputs fold into one length-PL inverse transform:
/// every subcarrier shares the window h[v] x[s_n - v] e^{j2pi(1/2-N)v/PL},
/// and subcarrier k reads bin k. `phi` is the code's reference phase,
/// removed here so chip estimates are phase-aligned.
pub fn analyze(bank: &PulseBank, rx: &IqSignal, n_intervals: usize, phi: f64) -> Result<ChipMatrix> {
    let pl = analyze_extent(bank, rx, n_intervals)?;
    let l = bank.cfg.l;
    let half = bank.h.origin_index as isize;
    let h = &bank.h.samples;
    let derotate = Complex64::from_polar(1.0, -phi) / (bank.cfg.p as f64).sqrt();
    let base_phase = 2.0 * std::f64::consts::PI * (0.5 - bank.cfg.n as f64) / pl as f64;
    let ladder = quarter_turns(l);

    let mut zeta_hat = Vec::with_capacity(n_intervals);
    let mut complex_raw = Vec::with_capacity(n_intervals);
    let mut folded = vec![Complex64::new(0.0, 0.0); pl];
    for n in 0..n_intervals {
        folded.fill(Complex64::new(0.0, 0.0));
        let center = (rx.origin_index + n * pl) as isize;
        for (u, hv) in h.iter().enumerate() {
            let v = u as isize - half;
            let r = v.rem_euclid(pl as isize) as usize;
            let x = rx.samples[(center - v) as usize];
            folded[r] += hv.re * x * Complex64::from_polar(1.0, base_phase * v as f64);
        }
        fft::ifft_in_place(&mut folded);
        let raw: Vec<Complex64> = folded[..l].iter().map(|y| derotate * y).collect();
        let chips: Vec<f64> = raw
            .iter()
            .zip(&ladder)
            .map(|(y, b)| (b.conj() * y).re)
            .collect();
        complex_raw.push(raw);
        zeta_hat.push(chips);
    }
    Ok(ChipMatrix {
        zeta_hat,
        complex_raw,
    })
}

/// Direct per-subcarrier matched filtering, the analysis oracle.
pub fn analyze_direct(
    bank: &PulseBank,
    rx: &IqSignal,
    n_intervals: usize,
    phi: f64,
) -> Result<ChipMatrix> {
    let pl = analyze_extent(bank, rx, n_intervals)?;
    let l = bank.cfg.l;
    let half = bank.h.origin_index as isize;
    let h = &bank.h.samples;
    let fs = bank.cfg.sample_rate();
    let derotate = Complex64::from_polar(1.0, -phi) / (bank.cfg.p as f64).sqrt();
    let freqs = bank.cfg.ofmt_freqs();
    let ladder = quarter_turns(l);

    let mut zeta_hat = Vec::with_capacity(n_intervals);
    let mut complex_raw = Vec::with_capacity(n_intervals);
    for n in 0..n_intervals {
        let center = (rx.origin_index + n * pl) as isize;
        let raw: Vec<Complex64> = (0..l)
            .map(|k| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (u, hv) in h.iter().enumerate() {
                    let v = u as isize - half;
                    let t = v as f64 / fs;
                    acc += hv.re
                        * Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * freqs[k] * t)
                        * rx.samples[(center - v) as usize];
                }
                derotate * acc
            })
            .collect();
        let chips: Vec<f64> = raw
            .iter()
            .zip(&ladder)
            .map(|(y, b)| (b.conj() * y).re)
            .collect();
        complex_raw.push(raw);
        zeta_hat.push(chips);
    }
    Ok(ChipMatrix {
        zeta_hat,
        complex_raw,
    })
}

/// Despread one bank-output row against a chip vector: (1/L) sum of
/// conj(gamma_k) y_k, which equals the data symbol plus noise.
pub fn despread(gamma: &[Complex64], row: &[Complex64]) -> Result<Complex64> {
    if gamma.len() != row.len() {
        return Err(Error::LengthMismatch {
            expected: gamma.len(),
            got: row.len(),
        });
    }
    let acc: Complex64 = gamma.iter().zip(row).map(|(g, y)| g.conj() * y).sum();
    Ok(acc / gamma.len() as f64)
}

/// Correlations of one bank-output row with every companion code.
#[derive(Debug, Clone)]
pub struct CorrelatorOutput {
    /// c[s] correlates with companion shift s; length L.
    pub c: Vec<Complex64>,
    /// Winning active slot and its sign.
    pub detected: (usize, i8),
    /// Winner's |Re| margin over the runner-up among active slots.
    pub soft: f64,
}

fn fill_decision(set: &MultiCodeSet, c: &[Complex64]) -> ((usize, i8), f64) {
    let mut best_slot = 0usize;
    let mut best = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    let mut sign = 1i8;
    for (slot, shift) in set.active_indices().into_iter().enumerate() {
        let re = c[shift].re;
        if re.abs() > best {
            second = best;
            best = re.abs();
            best_slot = slot;
            sign = if re < 0.0 { -1 } else { 1 };
        } else if re.abs() > second {
            second = re.abs();
        }
    }
    if !second.is_finite() {
        second = 0.0;
    }
    ((best_slot, sign), best - second)
}

/// Correlate a bank-output row against all L companions through the
/// circulant identity: strip the ladder, transform, multiply by the
/// conjugated base spectrum, transform back. The transform orders
/// correlations by down-shift, so indices 1..L reverse to match the
/// rotate-left companion convention. Hadamard companions are not cyclic
/// shifts and take the dense path.
pub fn correlate_fft(set: &MultiCodeSet, y_row: &[Complex64]) -> Result<CorrelatorOutput> {
    let l = set.base.len();
    if y_row.len() != l {
        return Err(Error::LengthMismatch {
            expected: l,
            got: y_row.len(),
        });
    }
    if set.kind == SetKind::Hadamard {
        return correlate_dense(set, y_row);
    }
    let ladder = quarter_turns(l);
    let mut buf: Vec<Complex64> = y_row
        .iter()
        .zip(&ladder)
        .map(|(y, b)| b.conj() * y)
        .collect();
    fft::fft_in_place(&mut buf);
    for (v, z) in buf.iter_mut().zip(&set.dft_of_base) {
        *v *= z.conj();
    }
    fft::ifft_in_place(&mut buf);
    let scale = 1.0 / l as f64;
    let c: Vec<Complex64> = (0..l)
        .map(|s| buf[(l - s) % l] * scale)
        .collect();
    let (detected, soft) = fill_decision(set, &c);
    Ok(CorrelatorOutput { c, detected, soft })
}

/// Dense-matrix correlator, the oracle and the Hadamard path.
pub fn correlate_dense(set: &MultiCodeSet, y_row: &[Complex64]) -> Result<CorrelatorOutput> {
    let l = set.base.len();
    if y_row.len() != l {
        return Err(Error::LengthMismatch {
            expected: l,
            got: y_row.len(),
        });
    }
    let ladder = quarter_turns(l);
    let v: Vec<Complex64> = y_row
        .iter()
        .zip(&ladder)
        .map(|(y, b)| b.conj() * y)
        .collect();
    let c: Vec<Complex64> = set
        .shifts
        .iter()
        .map(|zeta| {
            v.iter()
                .zip(zeta)
                .map(|(vk, z)| vk * (*z as f64))
                .sum()
        })
        .collect();
    let (detected, soft) = fill_decision(set, &c);
    Ok(CorrelatorOutput { c, detected, soft })
}

/// Hard decision for one interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Detection {
    Qpsk(Complex64),
    Biorthogonal { index: usize, sign: i8, soft: f64 },
}

impl Detection {
    /// Recover the payload bits this decision carries.
    pub fn bits(&self, mode: TxMode, active_count: usize) -> Vec<u8> {
        match self {
            Detection::Qpsk(p) => vec![(p.re < 0.0) as u8, (p.im < 0.0) as u8],
            Detection::Biorthogonal { index, sign, .. } => {
                let idx_bits = bits_per_interval(mode, active_count) - 1;
                let mut bits = vec![(*sign < 0) as u8];
                for i in (0..idx_bits).rev() {
                    bits.push(((index >> i) & 1) as u8);
                }
                bits
            }
        }
    }
}

/// Decide one interval from its correlator output. Biorthogonal picks the
/// active slot with the largest |Re|, ties toward the lowest index; QPSK
/// slices the base-code despread, which is c[0]/L.
pub fn detect(set: &MultiCodeSet, mode: TxMode, corr: &CorrelatorOutput) -> Detection {
    match mode {
        TxMode::SingleCodeQpsk => {
            let s = corr.c[0] / set.base.len() as f64;
            let inv = std::f64::consts::FRAC_1_SQRT_2;
            Detection::Qpsk(Complex64::new(
                if s.re < 0.0 { -inv } else { inv },
                if s.im < 0.0 { -inv } else { inv },
            ))
        }
        TxMode::MultiCodeBiorthogonal => Detection::Biorthogonal {
            index: corr.detected.0,
            sign: corr.detected.1,
            soft: corr.soft,
        },
    }
}

/// Analyze a frame and detect every interval.
pub fn receive_frame(
    bank: &PulseBank,
    set: &MultiCodeSet,
    mode: TxMode,
    rx: &IqSignal,
    n_intervals: usize,
) -> Result<(Vec<Detection>, ChipMatrix)> {
    let chips = analyze(bank, rx, n_intervals, set.base.phi)?;
    let detections = chips
        .complex_raw
        .iter()
        .map(|row| Ok(detect(set, mode, &correlate_fft(set, row)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((detections, chips))
}
