//! Simulated annealing over binary chip vectors, with a pluggable cost,
//! plus an exhaustive oracle for short lengths.
//!
//! The chain flips X ~ U{1..W} chips per move and applies Metropolis
//! acceptance exp(-delta/temperature) to uphill moves. Temperature drops
//! geometrically once the windowed cost spread settles, and the search
//! stops frozen: the best cost survived several consecutive quenched
//! temperature steps (acceptance under 5 percent) without improving.

use num_complex::Complex64;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::{fft, Error, Result};

/// Hard ceiling on temperature steps; stall detection exits far earlier.
const MAX_TEMP_STEPS: usize = 100_000;
/// Per-temperature iteration cap in units of the equilibrium window.
const CAP_WINDOWS: usize = 25;
/// Acceptance rate below which a temperature step counts as quenched.
const QUENCHED_ACCEPT: f64 = 0.05;
/// Fraction of the initial temperature that forces an exit regardless of
/// acceptance, guarding costs whose moves never stop being accepted.
const TEMP_FLOOR_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealConfig {
    /// Max chips flipped per move.
    pub w: usize,
    pub initial_temp: f64,
    /// Geometric cooling ratio in (0, 1).
    pub cooling_factor: f64,
    /// Cost samples per equilibrium check at one temperature.
    pub equilibrium_window: usize,
    /// Relative windowed std below which the temperature step ends.
    pub equilibrium_std_tol: f64,
    /// Temperature steps with unchanged best cost before exit.
    pub stall_temps: usize,
    pub seed: u64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            w: 2,
            initial_temp: 1.0,
            cooling_factor: 0.95,
            equilibrium_window: 64,
            equilibrium_std_tol: 0.02,
            stall_temps: 10,
            seed: 0,
        }
    }
}

impl AnnealConfig {
    /// Deep-dwell schedule for glassy costs such as the envelope crest at
    /// L = 128, where the default equilibrium tolerance ends temperature
    /// steps after a single window and the chain freezes high. Runs take
    /// on the order of 10 seconds; launch several seeds and keep the best.
    pub fn thorough(seed: u64) -> Self {
        AnnealConfig {
            w: 2,
            initial_temp: 0.2,
            cooling_factor: 0.96,
            equilibrium_window: 512,
            equilibrium_std_tol: 0.0015,
            stall_temps: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w < 1 {
            return Err(Error::BadConfig("need w >= 1".into()));
        }
        if !(self.cooling_factor > 0.0 && self.cooling_factor < 1.0) {
            return Err(Error::BadConfig(format!(
                "cooling factor must lie in (0,1), got {}",
                self.cooling_factor
            )));
        }
        if !(self.initial_temp > 0.0 && self.initial_temp.is_finite()) {
            return Err(Error::BadConfig(format!(
                "initial temperature {}",
                self.initial_temp
            )));
        }
        if self.equilibrium_window < 1 || self.stall_temps < 1 {
            return Err(Error::BadConfig("window and stall counts must be >= 1".into()));
        }
        if !(self.equilibrium_std_tol > 0.0) {
            return Err(Error::BadConfig("equilibrium tolerance must be > 0".into()));
        }
        Ok(())
    }
}

/// One temperature step of the search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub temperature: f64,
    /// Best cost seen so far, non-increasing down the trace.
    pub best_cost: f64,
    /// Accepted / proposed moves at this temperature.
    pub accept_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnealResult {
    pub best_zeta: Vec<i8>,
    pub best_cost: f64,
    pub cost_trace: Vec<TraceRow>,
    /// Total proposals evaluated.
    pub iterations: u64,
    pub seed: u64,
    /// Envelope samples per period when the cost was a crest factor.
    pub cost_grid: Option<usize>,
}

/// Uphill-move acceptance rule; u is a uniform draw from [0, 1).
fn accept_move(delta: f64, temperature: f64, u: f64) -> bool {
    delta <= 0.0 || u < (-delta / temperature).exp()
}

fn checked_cost<F>(cost: &mut F, state: &[i8], iteration: u64) -> Result<f64>
where
    F: FnMut(&[i8]) -> f64,
{
    let c = cost(state);
    if !c.is_finite() {
        return Err(Error::NonFiniteCost(iteration));
    }
    Ok(c)
}

/// Run the annealing chain. Deterministic for a given config and seed.
pub fn anneal<F>(l: usize, mut cost: F, cfg: &AnnealConfig) -> Result<AnnealResult>
where
    F: FnMut(&[i8]) -> f64,
{
    cfg.validate()?;
    if l < 2 {
        return Err(Error::BadConfig(format!("need at least 2 chips, got {l}")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut state: Vec<i8> = (0..l)
        .map(|_| if rng.random::<bool>() { 1 } else { -1 })
        .collect();
    let mut iterations = 0u64;
    let mut current = checked_cost(&mut cost, &state, iterations)?;
    let mut best = current;
    let mut best_zeta = state.clone();
    let mut temperature = cfg.initial_temp;
    let mut trace = Vec::new();
    let mut stall = 0usize;
    let cap = CAP_WINDOWS * cfg.equilibrium_window;
    let mut flips: Vec<usize> = Vec::with_capacity(cfg.w);

    for _ in 0..MAX_TEMP_STEPS {
        let best_entering = best;
        let mut accepted = 0usize;
        let mut proposed = 0usize;
        let mut window: Vec<f64> = Vec::with_capacity(cfg.equilibrium_window);
        loop {
            proposed += 1;
            iterations += 1;
            let x = rng.random_range(1..=cfg.w);
            flips.clear();
            while flips.len() < x {
                let i = rng.random_range(0..l);
                if !flips.contains(&i) {
                    flips.push(i);
                }
            }
            for &i in &flips {
                state[i] = -state[i];
            }
            let candidate = checked_cost(&mut cost, &state, iterations)?;
            let delta = candidate - current;
            if accept_move(delta, temperature, rng.random::<f64>()) {
                current = candidate;
                accepted += 1;
                if candidate < best {
                    best = candidate;
                    best_zeta.copy_from_slice(&state);
                }
            } else {
                for &i in &flips {
                    state[i] = -state[i];
                }
            }
            if window.len() == cfg.equilibrium_window {
                window.remove(0);
            }
            window.push(current);
            if window.len() == cfg.equilibrium_window {
                let mean = window.iter().sum::<f64>() / window.len() as f64;
                let var = window.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>()
                    / window.len() as f64;
                if var.sqrt() <= cfg.equilibrium_std_tol * mean.abs() + 1e-15 {
                    break;
                }
            }
            if proposed >= cap {
                break;
            }
        }
        let accept_rate = accepted as f64 / proposed as f64;
        trace.push(TraceRow {
            temperature,
            best_cost: best,
            accept_rate,
        });
        if best == best_entering && accept_rate < QUENCHED_ACCEPT {
            stall += 1;
            if stall >= cfg.stall_temps {
                break;
            }
        } else {
            stall = 0;
        }
        temperature *= cfg.cooling_factor;
        if temperature < TEMP_FLOOR_RATIO * cfg.initial_temp {
            break;
        }
    }

    debug_assert_eq!(checked_cost(&mut cost, &best_zeta, iterations)?, best);
    Ok(AnnealResult {
        best_zeta,
        best_cost: best,
        cost_trace: trace,
        iterations,
        seed: cfg.seed,
        cost_grid: None,
    })
}

/// Pick an initial temperature that accepts roughly `target` of uphill
/// moves, estimated from 100 random perturbations of a random state.
pub fn calibrate_initial_temp<F>(l: usize, mut cost: F, w: usize, seed: u64, target: f64) -> Result<f64>
where
    F: FnMut(&[i8]) -> f64,
{
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::BadConfig(format!("acceptance target {target}")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x74656d70);
    let mut state: Vec<i8> = (0..l)
        .map(|_| if rng.random::<bool>() { 1 } else { -1 })
        .collect();
    let base = checked_cost(&mut cost, &state, 0)?;
    let mut uphill = Vec::new();
    for it in 0..100u64 {
        let x = rng.random_range(1..=w.max(1));
        let mut flips = Vec::with_capacity(x);
        while flips.len() < x {
            let i = rng.random_range(0..l);
            if !flips.contains(&i) {
                flips.push(i);
            }
        }
        for &i in &flips {
            state[i] = -state[i];
        }
        let c = checked_cost(&mut cost, &state, it + 1)?;
        if c > base {
            uphill.push(c - base);
        }
        for &i in &flips {
            state[i] = -state[i];
        }
    }
    if uphill.is_empty() {
        return Ok(1.0);
    }
    let mean = uphill.iter().sum::<f64>() / uphill.len() as f64;
    Ok(-mean / target.ln())
}

/// Exact minimizer over all chip vectors with the first chip pinned to +1
/// (every cost of interest is invariant to global negation). Ties resolve
/// to the lexicographically smallest vector, counting -1 below +1.
pub fn exhaustive_search<F>(l: usize, mut cost: F) -> Result<(Vec<i8>, f64)>
where
    F: FnMut(&[i8]) -> f64,
{
    if l < 2 {
        return Err(Error::BadConfig(format!("need at least 2 chips, got {l}")));
    }
    if l > 20 {
        return Err(Error::SearchTooLarge(l));
    }
    let mut zeta = vec![1i8; l];
    let mut best: Option<(Vec<i8>, f64)> = None;
    for mask in 0u32..(1 << (l - 1)) {
        for k in 1..l {
            zeta[k] = if mask >> (l - 1 - k) & 1 == 1 { 1 } else { -1 };
        }
        let c = checked_cost(&mut cost, &zeta, mask as u64)?;
        if best.as_ref().map_or(true, |(_, bc)| c < *bc) {
            best = Some((zeta.clone(), c));
        }
    }
    Ok(best.expect("l >= 2 enumerates at least 2 states"))
}

/// Crest factor of the code envelope on a dense periodic grid, evaluated
/// through a zero-padded inverse transform. The half-chip offset of the
/// band center is unimodular and drops out of the magnitudes.
pub struct CrestCost {
    l: usize,
    grid: usize,
    turns: Vec<Complex64>,
    buf: Vec<Complex64>,
}

impl CrestCost {
    /// `oversample` envelope samples per chip; 16 matches the designer's
    /// grid density.
    pub fn new(l: usize, oversample: usize) -> Result<Self> {
        if l < 2 || oversample < 2 {
            return Err(Error::BadConfig(format!(
                "need l >= 2 and oversample >= 2, got l={l} oversample={oversample}"
            )));
        }
        let turns = (0..l)
            .map(|k| match k % 4 {
                0 => Complex64::new(1.0, 0.0),
                1 => Complex64::new(0.0, 1.0),
                2 => Complex64::new(-1.0, 0.0),
                _ => Complex64::new(0.0, -1.0),
            })
            .collect();
        Ok(CrestCost {
            l,
            grid: l * oversample,
            turns,
            buf: vec![Complex64::new(0.0, 0.0); l * oversample],
        })
    }

    pub fn samples_per_period(&self) -> usize {
        self.grid
    }

    pub fn eval(&mut self, zeta: &[i8]) -> f64 {
        assert_eq!(zeta.len(), self.l);
        for (b, (t, z)) in self.buf.iter_mut().zip(self.turns.iter().zip(zeta)) {
            *b = t * (*z as f64);
        }
        for b in &mut self.buf[self.l..] {
            *b = Complex64::new(0.0, 0.0);
        }
        fft::ifft_in_place(&mut self.buf);
        let mut peak = 0.0f64;
        let mut sum = 0.0f64;
        for v in &self.buf {
            let p = v.norm_sqr();
            sum += p;
            peak = peak.max(p);
        }
        (peak / (sum / self.grid as f64)).sqrt()
    }
}

/// Anneal against the dense-grid envelope crest.
pub fn anneal_crest(l: usize, oversample: usize, cfg: &AnnealConfig) -> Result<AnnealResult> {
    let mut crest = CrestCost::new(l, oversample)?;
    let mut result = anneal(l, |z| crest.eval(z), cfg)?;
    result.cost_grid = Some(crest.samples_per_period());
    Ok(result)
}

/// Anneal against the cyclic autocorrelation cost.
pub fn anneal_cyclic(l: usize, cfg: &AnnealConfig) -> Result<AnnealResult> {
    anneal(l, crate::codes::cyclic_autocorr_cost, cfg)
}
