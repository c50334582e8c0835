//! Unitary FFT transform pair and FFT-based linear convolution.
//!
//! Transform lengths are restricted to powers of two; every experiment in
//! this crate uses power-of-two grids, and PSD estimation zero-pads to the
//! next power of two where needed.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::{Error, Result};

thread_local! {
    static PLANS: RefCell<PlanCache> = RefCell::new(PlanCache::default());
}

#[derive(Default)]
struct PlanCache {
    planner: Option<FftPlanner<f64>>,
    forward: HashMap<usize, Arc<dyn Fft<f64>>>,
    inverse: HashMap<usize, Arc<dyn Fft<f64>>>,
}

impl PlanCache {
    fn forward(&mut self, n: usize) -> Arc<dyn Fft<f64>> {
        let planner = self.planner.get_or_insert_with(FftPlanner::new);
        self.forward
            .entry(n)
            .or_insert_with(|| planner.plan_fft_forward(n))
            .clone()
    }

    fn inverse(&mut self, n: usize) -> Arc<dyn Fft<f64>> {
        let planner = self.planner.get_or_insert_with(FftPlanner::new);
        self.inverse
            .entry(n)
            .or_insert_with(|| planner.plan_fft_inverse(n))
            .clone()
    }
}

/// Unnormalized in-place forward DFT, X[m] = sum_k x[k] e^{-j2pi km/n}. Any length.
pub(crate) fn fft_in_place(x: &mut [Complex64]) {
    let plan = PLANS.with(|p| p.borrow_mut().forward(x.len()));
    plan.process(x);
}

/// Unnormalized in-place inverse DFT, x[k] = sum_m X[m] e^{+j2pi km/n}. Any length.
pub(crate) fn ifft_in_place(x: &mut [Complex64]) {
    let plan = PLANS.with(|p| p.borrow_mut().inverse(x.len()));
    plan.process(x);
}

fn require_pow2(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::NonPowerOfTwo(n));
    }
    Ok(())
}

/// Unitary forward FFT (1/sqrt(n) scaling). Length must be a power of two.
pub fn forward_fft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    require_pow2(x.len())?;
    let mut out = x.to_vec();
    fft_in_place(&mut out);
    let scale = 1.0 / (x.len() as f64).sqrt();
    for v in &mut out {
        *v *= scale;
    }
    Ok(out)
}

/// Unitary inverse FFT; `inverse_fft(forward_fft(x)) = x` within 1e-12.
pub fn inverse_fft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    require_pow2(x.len())?;
    let mut out = x.to_vec();
    ifft_in_place(&mut out);
    let scale = 1.0 / (x.len() as f64).sqrt();
    for v in &mut out {
        *v *= scale;
    }
    Ok(out)
}

/// Full linear convolution via zero-padded FFTs.
pub(crate) fn fft_convolve(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut fa = vec![Complex64::ZERO; n];
    let mut fb = vec![Complex64::ZERO; n];
    fa[..a.len()].copy_from_slice(a);
    fb[..b.len()].copy_from_slice(b);
    fft_in_place(&mut fa);
    fft_in_place(&mut fb);
    let scale = 1.0 / n as f64;
    for (va, vb) in fa.iter_mut().zip(&fb) {
        *va *= vb * scale;
    }
    ifft_in_place(&mut fa);
    fa.truncate(out_len);
    fa
}
