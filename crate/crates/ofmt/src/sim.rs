//! AWGN channel, closed-form error-rate references, and Monte-Carlo
//! BER/SER experiments over the full synthesize -> clip -> noise ->
//! analyze -> detect chain.
//!
//! Energy accounting. The transmit chain puts unit mean power on the
//! interval grid, so one interval of P*L samples carries energy P*L in
//! sample units and Eb = P*L / (bits per interval). White complex noise
//! of per-sample variance sigma2 then gives Eb/N0 = P*L / (B * sigma2),
//! and the despread decision axis sees SNR = 2*Es/N0 exactly: the
//! quarter-turn ladder leaves adjacent-chip noise correlation purely
//! imaginary, and the R(2) term vanishes at full roll-off, so the real
//! decision statistics match the independent-noise theory curves.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::anneal::{anneal_crest, anneal_cyclic, AnnealConfig};
use crate::clip::{clip, ClipConfig};
use crate::codes::{
    build_code, load_code, make_circular_set, make_hadamard_set, validate_ici_free,
    MultiCodeSet, SetKind, SpreadingCode,
};
use crate::modem::{
    bits_per_interval, receive_frame, synthesize, Detection, SymbolRecord, TxFrame, TxMode,
};
use crate::pulse::{design_prototype, PulseBank, WaveformConfig};
use crate::signal::IqSignal;
use crate::{Error, Result};

/// Intervals synthesized per Monte-Carlo block.
const BLOCK_INTERVALS: usize = 512;
/// Blocks per stopping-check wave. The processed-block set depends only
/// on wave boundaries and aggregated counts, never on thread timing.
const WAVE_BLOCKS: usize = 8;
/// 97.5% standard-normal quantile, for two-sided 95% intervals.
const Z95: f64 = 1.959963984540054;

/// Add circularly-symmetric white Gaussian noise at a despread Eb/N0.
///
/// `l` fixes the interval grid: the sample rate must be an integer
/// multiple P >= 1 of l/T chips per second. Per-sample complex variance
/// is P*L / (bits_per_interval * 10^(ebn0_db/10)); see the module notes
/// for why that lands the requested Eb/N0 on the decision axis. An
/// infinite ebn0_db returns the input unchanged. Deterministic per seed.
pub fn awgn(
    x: &IqSignal,
    ebn0_db: f64,
    bits_per_interval: u32,
    l: usize,
    seed: u64,
) -> Result<IqSignal> {
    if bits_per_interval == 0 {
        return Err(Error::BadConfig("need at least one bit per interval".into()));
    }
    if l == 0 {
        return Err(Error::BadConfig("need a positive subcarrier count".into()));
    }
    if ebn0_db.is_nan() {
        return Err(Error::BadConfig("Eb/N0 is NaN".into()));
    }
    if ebn0_db == f64::INFINITY {
        return Ok(x.clone());
    }
    let t = 1.0;
    let p = x.sample_rate * t / l as f64;
    if p < 1.0 - 1e-9 || (p - p.round()).abs() > 1e-9 {
        return Err(Error::BadConfig(format!(
            "sample rate {} is not an integer oversampling of {l} chips per interval",
            x.sample_rate
        )));
    }
    let samples_per_interval = x.sample_rate * t;
    let ebn0 = 10f64.powf(ebn0_db / 10.0);
    let sigma2 = samples_per_interval / (bits_per_interval as f64 * ebn0);
    let axis = (sigma2 / 2.0).sqrt();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let samples = x
        .samples
        .iter()
        .map(|v| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            v + Complex64::new(axis * re, axis * im)
        })
        .collect();
    IqSignal::new(samples, x.sample_rate, x.origin_index)
}

fn q_func(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Gray-coded QPSK bit error probability, Q(sqrt(2 Eb/N0)).
pub fn theory_qpsk_ber(ebn0_db: f64) -> f64 {
    let ebn0 = 10f64.powf(ebn0_db / 10.0);
    q_func((2.0 * ebn0).sqrt())
}

/// Composite Simpson over n even panels.
fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Refine until the doubled-resolution estimate moves less than 1e-10.
fn integrate_settled<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Result<f64> {
    let mut n = 256;
    let mut prev = simpson(f, a, b, n);
    loop {
        n *= 2;
        let cur = simpson(f, a, b, n);
        if (cur - prev).abs() < 1e-10 {
            return Ok(cur);
        }
        if n >= 1 << 20 {
            return Err(Error::UndefinedMetric(
                "biorthogonal quadrature did not settle",
            ));
        }
        prev = cur;
    }
}

/// Symbol error probability of biorthogonal signaling over M equal-energy
/// orthogonal codes with antipodal signs, carrying log2(M) + 1 bits.
///
/// With the own-slot statistic at gamma = sqrt(2 Es/N0) and unit-variance
/// competitors, P(correct) integrates phi(v - gamma) (1 - 2Q(v))^(M-1)
/// over v > 0. The error probability is accumulated as Q(gamma) plus the
/// positive losing term so deep-tail values survive cancellation. M = 1
/// has no competitors and reduces to the antipodal bound exactly.
pub fn theory_biorth_ser(ebn0_db: f64, m: usize) -> Result<f64> {
    if m == 0 || !m.is_power_of_two() {
        return Err(Error::BadConfig(format!(
            "code count {m} is not a power of two"
        )));
    }
    let bits = m.trailing_zeros() as f64 + 1.0;
    let es = bits * 10f64.powf(ebn0_db / 10.0);
    let gamma = (2.0 * es).sqrt();
    let sign_error = q_func(gamma);
    if m == 1 {
        return Ok(sign_error);
    }
    let competitors = (m - 1) as f64;
    let integrand = move |v: f64| {
        let q = q_func(v);
        let lose = -f64::exp_m1(competitors * f64::ln_1p(-2.0 * q));
        std_normal_pdf(v - gamma) * lose
    };
    Ok(sign_error + integrate_settled(&integrand, 0.0, gamma + 12.0)?)
}

/// Two-sided 95% Wilson score interval; always contains errors/trials.
pub fn wilson_interval(errors: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = errors as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // The ends are exact at the degenerate rates; rounding must not
    // push the bound past the rate itself.
    let lo = if errors == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if errors == trials { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// Where an experiment's spreading code comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodeSource {
    /// JSON code file on disk.
    File(PathBuf),
    /// Explicit chip vector, reference phase zero.
    Chips(Vec<i8>),
    /// Run the annealer first, with the thorough schedule.
    Anneal { cost: DesignCost, seed: u64 },
}

/// Objective selector for inline code design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignCost {
    Crest,
    Cyclic,
}

impl CodeSource {
    pub fn resolve(&self, l: usize) -> Result<SpreadingCode> {
        match self {
            CodeSource::File(path) => load_code(path)?.build(),
            CodeSource::Chips(zeta) => {
                if zeta.len() != l {
                    return Err(Error::LengthMismatch {
                        expected: l,
                        got: zeta.len(),
                    });
                }
                build_code(zeta, 0.0)
            }
            CodeSource::Anneal { cost, seed } => {
                let cfg = AnnealConfig::thorough(*seed);
                let run = match cost {
                    DesignCost::Crest => anneal_crest(l, 16, &cfg)?,
                    DesignCost::Cyclic => anneal_cyclic(l, &cfg)?,
                };
                build_code(&run.best_zeta, 0.0)
            }
        }
    }
}

/// Full description of one Monte-Carlo error-rate experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub waveform: WaveformConfig,
    pub code: CodeSource,
    pub set_kind: SetKind,
    pub mode: TxMode,
    /// Active code count M, 1 for single-code QPSK.
    pub active_count: usize,
    pub ebn0_grid_db: Vec<f64>,
    /// Stop target per grid point; reporting demands at least 100.
    pub min_errors: u64,
    /// Interval budget per grid point; hitting it first censors the row.
    pub max_symbols: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<ClipConfig>,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.waveform.validate()?;
        if self.min_errors < 100 {
            return Err(Error::BadConfig(format!(
                "min_errors {} is below the 100-error reporting floor",
                self.min_errors
            )));
        }
        if self.max_symbols == 0 {
            return Err(Error::BadConfig("max_symbols must be positive".into()));
        }
        if self.ebn0_grid_db.is_empty() {
            return Err(Error::BadConfig("empty Eb/N0 grid".into()));
        }
        if self.ebn0_grid_db.iter().any(|e| !e.is_finite()) {
            return Err(Error::BadConfig("Eb/N0 grid must be finite".into()));
        }
        match self.mode {
            TxMode::SingleCodeQpsk => {
                if self.active_count != 1 {
                    return Err(Error::BadConfig(format!(
                        "single-code QPSK runs with active_count 1, got {}",
                        self.active_count
                    )));
                }
            }
            TxMode::MultiCodeBiorthogonal => {
                if !self.active_count.is_power_of_two() || self.active_count < 2 {
                    return Err(Error::BadConfig(format!(
                        "biorthogonal signaling needs a power-of-two code count >= 2, got {}",
                        self.active_count
                    )));
                }
                if self.active_count > self.waveform.l {
                    return Err(Error::BadConfig(format!(
                        "{} active codes exceed the {} companions",
                        self.active_count, self.waveform.l
                    )));
                }
            }
        }
        if let Some(c) = &self.clip {
            c.validate()?;
        }
        Ok(())
    }

    /// Re-anchor a relative code-file path, for configs loaded from disk.
    pub fn rebase_code_path(&mut self, dir: &Path) {
        if let CodeSource::File(p) = &mut self.code {
            if p.is_relative() {
                *p = dir.join(&p);
            }
        }
    }
}

/// Short hex digest of the serialized config, stamped on every artifact.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_string(cfg)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// What one error counts: a payload bit (QPSK reports BER) or a whole
/// interval decision (biorthogonal reports SER).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorUnit {
    Bit,
    Symbol,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub ebn0_db: f64,
    pub errors: u64,
    pub trials: u64,
    pub rate: f64,
    pub lo95: f64,
    pub hi95: f64,
    /// Set when the interval budget ran out before min_errors.
    pub censored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub unit: ErrorUnit,
    pub rows: Vec<PointRow>,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub wall_seconds: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Counter-style stream derivation: every (point, block, purpose) gets an
/// independent seed from the experiment root, so block results do not
/// depend on scheduling or on how many blocks ran before them.
fn derive_seed(root: u64, point: u64, block: u64, purpose: u64) -> u64 {
    splitmix(splitmix(splitmix(splitmix(root) ^ point) ^ block) ^ purpose)
}

struct Engine<'a> {
    bank: &'a PulseBank,
    set: &'a MultiCodeSet,
    cfg: &'a ExperimentConfig,
    bits: u32,
    block: usize,
    /// Intervals trimmed per frame edge before scoring; the pulse ramp
    /// and clip-threshold transients live there.
    skip: usize,
}

impl Engine<'_> {
    fn counted_per_block(&self) -> usize {
        self.block - 2 * self.skip
    }

    /// Synthesize, impair, and score one block. Returns (errors, trials).
    fn run_block(&self, point: usize, block_idx: u64, ebn0_db: f64) -> Result<(u64, u64)> {
        let frame_seed = derive_seed(self.cfg.seed, point as u64, block_idx, 0);
        let noise_seed = derive_seed(self.cfg.seed, point as u64, block_idx, 1);
        let frame = TxFrame::random(self.cfg.mode, self.cfg.active_count, self.block, frame_seed)?;
        let mut x = synthesize(self.bank, self.set, &frame)?;
        if let Some(cc) = &self.cfg.clip {
            x = clip(&x, cc)?.0;
        }
        let y = awgn(&x, ebn0_db, self.bits, self.cfg.waveform.l, noise_seed)?;
        let (detections, _) = receive_frame(self.bank, self.set, self.cfg.mode, &y, self.block)?;

        let mut errors = 0u64;
        let mut trials = 0u64;
        for n in self.skip..self.block - self.skip {
            match (&detections[n], &frame.symbols[n]) {
                (det @ Detection::Qpsk(_), SymbolRecord::Qpsk(_)) => {
                    let got = det.bits(self.cfg.mode, self.cfg.active_count);
                    let sent = &frame.payload_bits[2 * n..2 * n + 2];
                    errors += got.iter().zip(sent).filter(|(g, s)| g != s).count() as u64;
                    trials += 2;
                }
                (
                    Detection::Biorthogonal { index, sign, .. },
                    SymbolRecord::Biorthogonal { index: ti, sign: ts },
                ) => {
                    errors += (index != ti || sign != ts) as u64;
                    trials += 1;
                }
                _ => unreachable!("detection mode follows the frame mode"),
            }
        }
        Ok((errors, trials))
    }

    fn run_point(&self, point: usize, ebn0_db: f64) -> Result<PointRow> {
        let counted = self.counted_per_block() as u64;
        let max_blocks = self.cfg.max_symbols.div_ceil(counted);
        let mut errors = 0u64;
        let mut trials = 0u64;
        let mut next = 0u64;
        while next < max_blocks && errors < self.cfg.min_errors {
            let upto = (next + WAVE_BLOCKS as u64).min(max_blocks);
            let partials: Vec<(u64, u64)> = (next..upto)
                .into_par_iter()
                .map(|b| self.run_block(point, b, ebn0_db))
                .collect::<Result<_>>()?;
            for (e, t) in partials {
                errors += e;
                trials += t;
            }
            next = upto;
        }
        let rate = errors as f64 / trials as f64;
        let (lo95, hi95) = wilson_interval(errors, trials);
        Ok(PointRow {
            ebn0_db,
            errors,
            trials,
            rate,
            lo95,
            hi95,
            censored: errors < self.cfg.min_errors,
        })
    }
}

/// Run the Monte-Carlo chain over the whole Eb/N0 grid.
///
/// Each point loops 512-interval blocks through synthesize -> (clip) ->
/// awgn -> analyze -> detect, trimming span + 1 intervals per frame edge
/// from scoring, and stops on the wave boundary where min_errors is met
/// or the max_symbols budget runs out (those rows are censored). The
/// report is bit-reproducible for a given config and seed at any worker
/// count. The code must satisfy the ICI-free constraint; anything else
/// voids the experiment's premise.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<TrialReport> {
    let start = Instant::now();
    cfg.validate()?;
    let code = cfg.code.resolve(cfg.waveform.l)?;
    validate_ici_free(&code.gamma)?;
    let set = match cfg.set_kind {
        SetKind::Circular => make_circular_set(&code, cfg.active_count.max(1))?,
        SetKind::Hadamard => make_hadamard_set(&code, cfg.active_count.max(1))?,
    };
    let bank = design_prototype(cfg.waveform)?;
    let skip = cfg.waveform.span_symbols + 1;
    let engine = Engine {
        bank: &bank,
        set: &set,
        cfg,
        bits: bits_per_interval(cfg.mode, cfg.active_count),
        block: BLOCK_INTERVALS.max(6 * skip),
        skip,
    };
    let rows = cfg
        .ebn0_grid_db
        .iter()
        .enumerate()
        .map(|(i, &e)| engine.run_point(i, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialReport {
        unit: match cfg.mode {
            TxMode::SingleCodeQpsk => ErrorUnit::Bit,
            TxMode::MultiCodeBiorthogonal => ErrorUnit::Symbol,
        },
        rows,
        config_hash: config_hash(cfg)?,
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Write the per-point table: ebn0_db,errors,trials,rate,lo95,hi95.
pub fn write_report_csv(path: &Path, report: &TrialReport) -> Result<()> {
    let mut out = String::from("ebn0_db,errors,trials,rate,lo95,hi95\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{:.6e},{:.6e},{:.6e}\n",
            r.ebn0_db, r.errors, r.trials, r.rate, r.lo95, r.hi95
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write the JSON sidecar: the full report, censoring flags included.
pub fn write_report_meta(path: &Path, report: &TrialReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

fn parse_key<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::BadConfig(format!("bad value {value:?} for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_key(key, s))
        .collect()
}

/// Parse an experiment description: JSON when the text opens with a
/// brace, otherwise flat key = value lines mirroring the config field
/// names ('#' comments allowed). Waveform fields sit at top level; the
/// code source is one of code_file / code_chips / code_anneal (the
/// latter with code_seed); a clip_mu_db key enables clipping with the
/// waveform defaults, refinable via clip_iterations, clip_hard_clip_after
/// and clip_band_edge. Unknown keys are listed back as errors.
pub fn parse_experiment_config(text: &str) -> Result<ExperimentConfig> {
    if text.trim_start().starts_with('{') {
        return Ok(serde_json::from_str(text)?);
    }
    let mut n: Option<usize> = None;
    let mut waveform = WaveformConfig::default();
    let mut code: Option<CodeSource> = None;
    let mut code_anneal: Option<DesignCost> = None;
    let mut code_seed = 0u64;
    let mut set_kind = SetKind::Circular;
    let mut mode = TxMode::SingleCodeQpsk;
    let mut active_count = 1usize;
    let mut grid: Option<Vec<f64>> = None;
    let mut min_errors = 100u64;
    let mut max_symbols = 1_000_000u64;
    let mut seed = 0u64;
    let mut clip_mu: Option<f64> = None;
    let mut clip_iterations: Option<usize> = None;
    let mut clip_hard: Option<usize> = None;
    let mut clip_edge: Option<f64> = None;
    let mut unknown = Vec::new();

    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::BadConfig(format!("expected key = value, got {line:?}")));
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "n" => n = Some(parse_key(key, value)?),
            "l" => {
                let l: usize = parse_key(key, value)?;
                n = Some(l / 2);
            }
            "t" => waveform.t = parse_key(key, value)?,
            "alpha" => waveform.alpha = parse_key(key, value)?,
            "span_symbols" => waveform.span_symbols = parse_key(key, value)?,
            "p" => waveform.p = parse_key(key, value)?,
            "mode" => {
                mode = match value {
                    "single-code-qpsk" => TxMode::SingleCodeQpsk,
                    "multi-code-biorthogonal" => TxMode::MultiCodeBiorthogonal,
                    _ => return Err(Error::BadConfig(format!("unknown mode {value:?}"))),
                }
            }
            "set_kind" => {
                set_kind = match value {
                    "circular" => SetKind::Circular,
                    "hadamard" => SetKind::Hadamard,
                    _ => return Err(Error::BadConfig(format!("unknown set_kind {value:?}"))),
                }
            }
            "active_count" => active_count = parse_key(key, value)?,
            "ebn0_grid_db" => grid = Some(parse_list(key, value)?),
            "min_errors" => min_errors = parse_key(key, value)?,
            "max_symbols" => max_symbols = parse_key(key, value)?,
            "seed" => seed = parse_key(key, value)?,
            "code_file" => code = Some(CodeSource::File(PathBuf::from(value))),
            "code_chips" => code = Some(CodeSource::Chips(parse_list(key, value)?)),
            "code_anneal" => {
                code_anneal = Some(match value {
                    "crest" => DesignCost::Crest,
                    "cyclic" => DesignCost::Cyclic,
                    _ => return Err(Error::BadConfig(format!("unknown cost {value:?}"))),
                })
            }
            "code_seed" => code_seed = parse_key(key, value)?,
            "clip_mu_db" => clip_mu = Some(parse_key(key, value)?),
            "clip_iterations" => clip_iterations = Some(parse_key(key, value)?),
            "clip_hard_clip_after" => clip_hard = Some(parse_key(key, value)?),
            "clip_band_edge" => clip_edge = Some(parse_key(key, value)?),
            _ => unknown.push(key.to_string()),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::BadConfig(format!(
            "unknown config keys: {}",
            unknown.join(", ")
        )));
    }
    if let Some(n) = n {
        waveform.n = n;
        waveform.l = 2 * n;
    }
    if let Some(cost) = code_anneal {
        if code.is_some() {
            return Err(Error::BadConfig(
                "give one code source, not both a file/chips and code_anneal".into(),
            ));
        }
        code = Some(CodeSource::Anneal {
            cost,
            seed: code_seed,
        });
    }
    let Some(code) = code else {
        return Err(Error::BadConfig(
            "missing code source: code_file, code_chips, or code_anneal".into(),
        ));
    };
    let clip = clip_mu.map(|mu| {
        let mut c = ClipConfig::for_waveform(&waveform, mu);
        if let Some(i) = clip_iterations {
            c.iterations = i;
        }
        if let Some(h) = clip_hard {
            c.hard_clip_after = h;
        }
        if let Some(e) = clip_edge {
            c.band_edge = e;
        }
        c
    });
    let cfg = ExperimentConfig {
        waveform,
        code,
        set_kind,
        mode,
        active_count,
        ebn0_grid_db: grid
            .ok_or_else(|| Error::BadConfig("missing ebn0_grid_db".into()))?,
        min_errors,
        max_symbols,
        clip,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn small_bank() -> &'static (PulseBank, MultiCodeSet) {
        static BANK: OnceLock<(PulseBank, MultiCodeSet)> = OnceLock::new();
        BANK.get_or_init(|| {
            let bank = design_prototype(WaveformConfig::with_n(8)).unwrap();
            let zeta: Vec<i8> = (0..16).map(|k| if k % 3 == 0 { 1 } else { -1 }).collect();
            let set = make_circular_set(&build_code(&zeta, 0.0).unwrap(), 4).unwrap();
            (bank, set)
        })
    }

    fn unit_signal(len: usize, fs: f64) -> IqSignal {
        IqSignal::new(vec![Complex64::new(1.0, 0.0); len], fs, 0).unwrap()
    }

    fn small_config(mode: TxMode, active_count: usize) -> ExperimentConfig {
        ExperimentConfig {
            waveform: WaveformConfig::with_n(8),
            code: CodeSource::Chips(
                (0..16).map(|k| if k % 3 == 0 { 1 } else { -1 }).collect(),
            ),
            set_kind: SetKind::Circular,
            mode,
            active_count,
            ebn0_grid_db: vec![2.0],
            min_errors: 300,
            max_symbols: 100_000,
            clip: None,
            seed: 9,
        }
    }

    #[test]
    fn awgn_is_deterministic_and_transparent_at_infinite_snr() {
        let x = unit_signal(4096, 32.0);
        let clean = awgn(&x, f64::INFINITY, 2, 16, 5).unwrap();
        assert_eq!(clean.samples, x.samples);

        let a = awgn(&x, 6.0, 2, 16, 5).unwrap();
        let b = awgn(&x, 6.0, 2, 16, 5).unwrap();
        let c = awgn(&x, 6.0, 2, 16, 6).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_ne!(a.samples, c.samples);
        assert!(awgn(&x, f64::NAN, 2, 16, 5).is_err());
        assert!(awgn(&x, 6.0, 0, 16, 5).is_err());
        // fs = 24 gives P = 1.5 chips per sample slot, off the grid.
        let off = unit_signal(64, 24.0);
        assert!(awgn(&off, 6.0, 2, 16, 5).is_err());
    }

    #[test]
    fn awgn_variance_and_circular_symmetry_match_the_request() {
        let n = 1_000_000usize;
        let x = unit_signal(n, 32.0);
        let ebn0_db = 3.0;
        let y = awgn(&x, ebn0_db, 2, 16, 77).unwrap();
        let noise: Vec<Complex64> = y
            .samples
            .iter()
            .zip(&x.samples)
            .map(|(a, b)| a - b)
            .collect();
        let want = 32.0 / (2.0 * 10f64.powf(ebn0_db / 10.0));
        let var = noise.iter().map(|v| v.norm_sqr()).sum::<f64>() / n as f64;
        assert!(
            (var / want - 1.0).abs() < 0.01,
            "complex variance {var:.4} vs {want:.4}"
        );
        // Circular symmetry: real/imag uncorrelated and equal-power.
        let (mut pr, mut pi, mut cross) = (0.0, 0.0, 0.0);
        for v in &noise {
            pr += v.re * v.re;
            pi += v.im * v.im;
            cross += v.re * v.im;
        }
        let corr = cross / (pr * pi).sqrt();
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr {corr:.2e}");
        assert!((pr / pi - 1.0).abs() < 0.02);
    }

    #[test]
    fn qpsk_theory_hits_the_erfc_landmarks() {
        // Q(sqrt(2)) = erfc(1) / 2.
        assert!((theory_qpsk_ber(0.0) - 0.078649603525143) .abs() < 1e-12);
        // Q(4.271) at 9.6 dB, the classic 1e-5 operating point.
        assert!((theory_qpsk_ber(9.6) - 1.0e-5).abs() < 1.0e-6);
        assert_eq!(theory_qpsk_ber(f64::INFINITY), 0.0);
        let mut prev = 1.0;
        for i in 0..=20 {
            let b = theory_qpsk_ber(i as f64 / 2.0);
            assert!(b < prev, "BER must fall with Eb/N0");
            prev = b;
        }
    }

    #[test]
    fn biorth_theory_reduces_to_antipodal_and_decays() {
        for i in 0..=10 {
            let e = i as f64;
            let a = theory_biorth_ser(e, 1).unwrap();
            let b = theory_qpsk_ber(e);
            assert!((a - b).abs() <= 1e-12, "M = 1 is antipodal: {a} vs {b}");
        }
        assert!(theory_biorth_ser(2.0, 3).is_err());
        assert!(theory_biorth_ser(2.0, 0).is_err());
        let mut prev = 1.0;
        for i in 0..=12 {
            let s = theory_biorth_ser(i as f64 / 2.0, 128).unwrap();
            assert!(s < prev, "SER must fall with Eb/N0");
            prev = s;
        }
        assert!(theory_biorth_ser(6.0, 128).unwrap() < 2.5e-6);
    }

    #[test]
    fn biorth_integral_matches_a_trapezoid_oracle() {
        // Re-derive the M = 4 losing probability on a fixed fine grid
        // with a different rule than the library's Simpson refinement.
        let m = 4usize;
        let ebn0_db = 2.0;
        let bits = 3.0;
        let gamma = (2.0 * bits * 10f64.powf(ebn0_db / 10.0)).sqrt();
        let f = |v: f64| {
            let q = 0.5 * libm::erfc(v / std::f64::consts::SQRT_2);
            let lose = 1.0 - (1.0 - 2.0 * q).powi(m as i32 - 1);
            (-0.5 * (v - gamma) * (v - gamma)).exp()
                / (2.0 * std::f64::consts::PI).sqrt()
                * lose
        };
        let (a, b, n) = (0.0, gamma + 12.0, 400_000usize);
        let h = (b - a) / n as f64;
        let mut acc = 0.5 * (f(a) + f(b));
        for i in 1..n {
            acc += f(a + i as f64 * h);
        }
        let oracle = 0.5 * libm::erfc(gamma / std::f64::consts::SQRT_2) + acc * h;
        let got = theory_biorth_ser(ebn0_db, m).unwrap();
        assert!(
            (got - oracle).abs() < 1e-7,
            "integral {got:.9e} vs oracle {oracle:.9e}"
        );
    }

    #[test]
    fn wilson_interval_recovers_the_textbook_value() {
        let (lo, hi) = wilson_interval(10, 100);
        assert!((lo - 0.05522).abs() < 5e-4, "lo {lo:.5}");
        assert!((hi - 0.17437).abs() < 5e-4, "hi {hi:.5}");
        assert_eq!(wilson_interval(0, 0), (0.0, 1.0));
        let (lo, hi) = wilson_interval(0, 50);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0);
    }

    proptest! {
        #[test]
        fn wilson_interval_contains_the_rate(errors in 0u64..1000, extra in 0u64..100_000) {
            let trials = errors + extra.max(1);
            let (lo, hi) = wilson_interval(errors, trials);
            let rate = errors as f64 / trials as f64;
            prop_assert!(lo >= 0.0 && hi <= 1.0 && lo <= hi);
            prop_assert!(lo <= rate && rate <= hi);
        }
    }

    #[test]
    fn noiseless_loopback_is_error_free_in_both_modes() {
        // 1e5 intervals per mode through the real chain, noise off.
        let (bank, set) = small_bank();
        for (mode, m) in [
            (TxMode::SingleCodeQpsk, 1usize),
            (TxMode::MultiCodeBiorthogonal, 4),
        ] {
            let set = match mode {
                TxMode::SingleCodeQpsk => {
                    &make_circular_set(&set.base, 1).unwrap()
                }
                TxMode::MultiCodeBiorthogonal => set,
            };
            let block = 512usize;
            let skip = bank.cfg.span_symbols + 1;
            let mut remaining = 100_000i64;
            let mut block_idx = 0u64;
            while remaining > 0 {
                let frame = TxFrame::random(mode, m, block, 1000 + block_idx).unwrap();
                let x = synthesize(bank, set, &frame).unwrap();
                let (dets, _) = receive_frame(bank, set, mode, &x, block).unwrap();
                for n in skip..block - skip {
                    match (&dets[n], &frame.symbols[n]) {
                        (det @ Detection::Qpsk(_), SymbolRecord::Qpsk(_)) => {
                            let got = det.bits(mode, m);
                            assert_eq!(got[..], frame.payload_bits[2 * n..2 * n + 2]);
                        }
                        (
                            Detection::Biorthogonal { index, sign, .. },
                            SymbolRecord::Biorthogonal { index: ti, sign: ts },
                        ) => {
                            assert_eq!((index, sign), (ti, ts));
                        }
                        _ => unreachable!(),
                    }
                    remaining -= 1;
                }
                block_idx += 1;
            }
        }
    }

    #[test]
    fn qpsk_monte_carlo_sits_inside_wilson_of_theory() {
        let cfg = small_config(TxMode::SingleCodeQpsk, 1);
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.unit, ErrorUnit::Bit);
        let row = &report.rows[0];
        let theory = theory_qpsk_ber(row.ebn0_db);
        assert!(!row.censored);
        assert!(
            row.lo95 <= theory && theory <= row.hi95,
            "theory {theory:.4e} outside [{:.4e}, {:.4e}]",
            row.lo95,
            row.hi95
        );
    }

    #[test]
    fn hadamard_monte_carlo_agrees_with_the_biorthogonal_integral() {
        let mut cfg = small_config(TxMode::MultiCodeBiorthogonal, 4);
        cfg.code = CodeSource::Chips(vec![1; 16]);
        cfg.set_kind = SetKind::Hadamard;
        cfg.ebn0_grid_db = vec![3.0, 5.0];
        cfg.min_errors = 400;
        cfg.max_symbols = 200_000;
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.unit, ErrorUnit::Symbol);
        for row in &report.rows {
            let theory = theory_biorth_ser(row.ebn0_db, 4).unwrap();
            assert!(!row.censored);
            assert!(
                row.lo95 <= theory && theory <= row.hi95,
                "at {} dB theory {theory:.4e} outside [{:.4e}, {:.4e}]",
                row.ebn0_db,
                row.lo95,
                row.hi95
            );
        }
    }

    #[test]
    fn experiments_reproduce_and_censor_exhausted_points() {
        let cfg = small_config(TxMode::SingleCodeQpsk, 1);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.config_hash, b.config_hash);
        for row in &a.rows {
            assert_eq!(row.rate, row.errors as f64 / row.trials as f64);
            assert!(row.lo95 <= row.rate && row.rate <= row.hi95);
        }

        let mut starved = cfg.clone();
        starved.ebn0_grid_db = vec![14.0];
        starved.min_errors = 10_000;
        starved.max_symbols = 2_000;
        let report = run_experiment(&starved).unwrap();
        assert!(report.rows[0].censored);
        assert!(report.rows[0].errors < 10_000);
    }

    #[test]
    fn ici_violations_and_bad_configs_abort() {
        let mut cfg = small_config(TxMode::SingleCodeQpsk, 1);
        cfg.code = CodeSource::Chips(vec![1; 12]);
        assert!(matches!(
            run_experiment(&cfg),
            Err(Error::LengthMismatch { .. })
        ));

        let mut cfg = small_config(TxMode::SingleCodeQpsk, 1);
        cfg.min_errors = 50;
        assert!(run_experiment(&cfg).is_err());
        let mut cfg = small_config(TxMode::SingleCodeQpsk, 1);
        cfg.ebn0_grid_db = vec![f64::INFINITY];
        assert!(run_experiment(&cfg).is_err());
        let mut cfg = small_config(TxMode::MultiCodeBiorthogonal, 6);
        cfg.mode = TxMode::MultiCodeBiorthogonal;
        assert!(run_experiment(&cfg).is_err());
    }

    #[test]
    fn config_text_parses_and_round_trips_through_json() {
        let text = "
            # toy experiment
            n = 8
            mode = multi-code-biorthogonal
            set_kind = hadamard
            active_count = 4
            code_chips = 1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1
            ebn0_grid_db = 3.0, 5.0
            min_errors = 400
            max_symbols = 200000
            clip_mu_db = 4.25
            seed = 2
        ";
        let cfg = parse_experiment_config(text).unwrap();
        assert_eq!(cfg.waveform.l, 16);
        assert_eq!(cfg.active_count, 4);
        assert_eq!(cfg.set_kind, SetKind::Hadamard);
        let clip = cfg.clip.expect("clip_mu_db enables clipping");
        assert_eq!(clip.iterations, 3);
        assert!((clip.band_edge - 8.5).abs() < 1e-12);

        let json = serde_json::to_string(&cfg).unwrap();
        let back = parse_experiment_config(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(config_hash(&back).unwrap(), config_hash(&cfg).unwrap());

        let err = parse_experiment_config("bogus_key = 1\ncode_chips = 1,1\nebn0_grid_db = 1")
            .unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        assert!(parse_experiment_config("n = 8").is_err());
    }

    #[test]
    fn report_files_carry_the_table_and_the_flags() {
        let dir = std::env::temp_dir().join("ofmt-sim-report-test");
        std::fs::create_dir_all(&dir).unwrap();
        let report = TrialReport {
            unit: ErrorUnit::Bit,
            rows: vec![PointRow {
                ebn0_db: 4.0,
                errors: 120,
                trials: 64_000,
                rate: 120.0 / 64_000.0,
                lo95: 1.5e-3,
                hi95: 2.2e-3,
                censored: false,
            }],
            config_hash: "deadbeef00112233".into(),
            seed: 7,
            version: "0.1.0".into(),
            wall_seconds: 1.25,
        };
        let csv = dir.join("rates.csv");
        let meta = dir.join("rates.json");
        write_report_csv(&csv, &report).unwrap();
        write_report_meta(&meta, &report).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("ebn0_db,errors,trials,rate,lo95,hi95\n"));
        assert!(text.lines().nth(1).unwrap().starts_with("4,120,64000,"));
        let back: TrialReport = serde_json::from_str(&std::fs::read_to_string(&meta).unwrap()).unwrap();
        assert_eq!(back, report);
        std::fs::remove_dir_all(&dir).ok();
    }
}
