//! Thin helpers over `rustfft` for whole-frame spectral processing.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Forward/inverse plan pair of one length. The inverse is normalized by 1/n.
pub struct FftPair {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl FftPair {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        FftPair {
            len,
            forward,
            inverse,
            scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.forward.process_with_scratch(data, &mut self.scratch);
    }

    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.inverse.process_with_scratch(data, &mut self.scratch);
        let s = 1.0 / self.len as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }

    /// Multiplies the spectrum of `data` by `response` (FFT bin order).
    pub fn apply_response(&mut self, data: &mut [Complex64], response: &[Complex64]) {
        self.forward(data);
        for (d, h) in data.iter_mut().zip(response) {
            *d *= h;
        }
        self.inverse(data);
    }
}

/// Angular frequency (rad/s) of each FFT bin for `n` samples at `sample_rate`.
pub fn angular_frequencies(n: usize, sample_rate: f64) -> Vec<f64> {
    let df = sample_rate / n as f64;
    (0..n)
        .map(|k| {
            let k = if k <= (n - 1) / 2 {
                k as f64
            } else {
                k as f64 - n as f64
            };
            2.0 * PI * k * df
        })
        .collect()
}

/// Frequency response of a centered real FIR of odd length over `n` bins.
pub fn centered_fir_response(taps: &[f64], n: usize) -> Result<Vec<Complex64>> {
    if taps.len() % 2 != 1 {
        return Err(Error::invalid("centered FIR must have odd length"));
    }
    if taps.len() > n {
        return Err(Error::invalid("filter longer than signal"));
    }
    let half = taps.len() / 2;
    let mut h = vec![Complex64::new(0.0, 0.0); n];
    for (j, &t) in taps.iter().enumerate() {
        let idx = (j + n - half) % n;
        h[idx] += t;
    }
    let mut pair = FftPair::new(n);
    pair.forward(&mut h);
    Ok(h)
}

/// In-place circular convolution with a centered odd-length FIR.
pub fn circular_filter(signal: &mut [Complex64], taps: &[f64]) -> Result<()> {
    let n = signal.len();
    let h = centered_fir_response(taps, n)?;
    let mut pair = FftPair::new(n);
    pair.apply_response(signal, &h);
    Ok(())
}

/// Band-limited resampling by spectral truncation / zero padding.
/// The signal is treated as periodic; `new_len` must keep the occupied band.
pub fn resample_spectral(signal: &[Complex64], new_len: usize) -> Vec<Complex64> {
    let n = signal.len();
    if new_len == n {
        return signal.to_vec();
    }
    let mut spec = signal.to_vec();
    FftPair::new(n).forward(&mut spec);
    let mut out = vec![Complex64::new(0.0, 0.0); new_len];
    let keep = n.min(new_len);
    let pos = keep.div_ceil(2);
    let neg = keep / 2;
    out[..pos].copy_from_slice(&spec[..pos]);
    for k in 1..=neg {
        out[new_len - k] = spec[n - k];
    }
    let mut pair = FftPair::new(new_len);
    pair.inverse.process_with_scratch(&mut out, &mut pair.scratch);
    let s = 1.0 / n as f64;
    out.iter_mut().for_each(|v| *v *= s);
    out
}
