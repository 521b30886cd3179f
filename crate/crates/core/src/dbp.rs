//! Digital back-propagation baseline and its real-multiplication count.
//!
//! Each span is walked backwards with the split-step kernel shared with the
//! channel simulator (negated attenuation, dispersion and Kerr coefficient).
//! The linear sections run block-wise with overlap-save so that the
//! implementation matches the complexity model; when the FFT block covers
//! the whole frame the result is identical to the simulator's inverse.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{
    linear_response, split_step, step_lengths, Direction, FiberParams, LinearStage, LinkConfig,
    SsfmPropagator, StepCoefficients, SPEED_OF_LIGHT,
};
use crate::dsp::{db_to_linear, DualPolWaveform, PulseShape, SymbolFrame};
use crate::error::{Error, Result};
use crate::fft::{angular_frequencies, resample_spectral, FftPair};
use crate::receiver::{self, EqualizedSymbols, PolSelection};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbpConfig {
    pub steps_per_span: usize,
    pub n_fft: usize,
    pub oversampling: usize,
    pub gamma_scale: f64,
    /// Samples discarded per overlap-save block (half on each side).
    /// `None` selects a default from the per-step dispersive spread.
    pub overlap: Option<usize>,
}

impl Default for DbpConfig {
    fn default() -> Self {
        DbpConfig {
            steps_per_span: 3,
            n_fft: 256,
            oversampling: 2,
            gamma_scale: 1.0,
            overlap: None,
        }
    }
}

impl DbpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_span < 1 {
            return Err(Error::invalid("DBP needs at least one step per span"));
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < 4 {
            return Err(Error::invalid("DBP FFT size must be a power of two >= 4"));
        }
        if self.oversampling < 1 {
            return Err(Error::invalid("oversampling must be at least 1"));
        }
        if let Some(o) = self.overlap {
            if o >= self.n_fft {
                return Err(Error::invalid("overlap must be smaller than the FFT size"));
            }
        }
        Ok(())
    }
}

/// Dispersive impulse-response duration of one DBP step, in seconds.
pub fn dispersive_spread_s(symbol_rate_hz: f64, fiber: &FiberParams, carrier_freq_hz: f64, n_steps: usize) -> f64 {
    let d_si = fiber.dispersion_ps_nm_km.abs() * 1e-6;
    let l_m = fiber.length_km * 1e3;
    1.1 * symbol_rate_hz * SPEED_OF_LIGHT * d_si * l_m / (carrier_freq_hz * carrier_freq_hz * n_steps as f64)
}

/// Real multiplications per recovered symbol of block-wise DBP:
/// `4 Nspan Nstep (n Nfft (log2 Nfft + 1) / (Nfft - N_D + 1) + n)`
/// with `N_D = tau_D * Rs`.
pub fn dbp_rmps(
    n_spans: usize,
    n_steps: usize,
    n_fft: usize,
    oversampling: usize,
    symbol_rate_hz: f64,
    fiber: &FiberParams,
    carrier_freq_hz: f64,
) -> Result<f64> {
    if n_steps == 0 || n_spans == 0 {
        return Err(Error::invalid("span and step counts must be positive"));
    }
    let n_d = dispersive_spread_s(symbol_rate_hz, fiber, carrier_freq_hz, n_steps) * symbol_rate_hz;
    let nfft = n_fft as f64;
    if nfft <= n_d {
        return Err(Error::invalid(format!(
            "FFT size {n_fft} does not exceed the dispersive memory {n_d:.2} symbols"
        )));
    }
    let n = oversampling as f64;
    let per_step = n * nfft * (nfft.log2() + 1.0) / (nfft - n_d + 1.0) + n;
    Ok(4.0 * n_spans as f64 * n_steps as f64 * per_step)
}

/// Block-wise frequency-domain linear stage (overlap-save on a periodic frame).
pub struct OverlapSave {
    n_fft: usize,
    overlap: usize,
    fft: FftPair,
    omega_sq: Vec<f64>,
    sample_rate: f64,
    cache: Vec<((f64, f64), Vec<Complex64>)>,
    block: Vec<Complex64>,
}

impl OverlapSave {
    pub fn new(n_fft: usize, overlap: usize, sample_rate: f64) -> Result<Self> {
        if overlap >= n_fft {
            return Err(Error::invalid("overlap must be smaller than the block"));
        }
        let omega_sq = angular_frequencies(n_fft, sample_rate)
            .into_iter()
            .map(|w| w * w)
            .collect();
        Ok(OverlapSave {
            n_fft,
            overlap,
            fft: FftPair::new(n_fft),
            omega_sq,
            sample_rate,
            cache: Vec::new(),
            block: vec![Complex64::new(0.0, 0.0); n_fft],
        })
    }

    /// Output samples produced per block.
    pub fn payload(&self) -> usize {
        self.n_fft - self.overlap
    }

    fn filter(&mut self, signal: &[Complex64], h: &[Complex64]) -> Vec<Complex64> {
        let n = signal.len();
        let lead = self.overlap / 2;
        let payload = self.payload();
        let mut out = vec![Complex64::new(0.0, 0.0); n];
        let mut start = 0;
        while start < n {
            for (j, b) in self.block.iter_mut().enumerate() {
                let idx = (start + n + j - lead) % n;
                *b = signal[idx];
            }
            self.fft.apply_response(&mut self.block, h);
            let take = payload.min(n - start);
            out[start..start + take].copy_from_slice(&self.block[lead..lead + take]);
            start += take;
        }
        out
    }
}

impl LinearStage for OverlapSave {
    fn apply_linear(&mut self, wave: &mut DualPolWaveform, coef: &StepCoefficients, dz: f64) -> Result<()> {
        if (wave.sample_rate - self.sample_rate).abs() > 1e-9 * self.sample_rate {
            return Err(Error::invalid("waveform sample rate does not match DBP stage"));
        }
        let key = (coef.beta2 * dz, coef.alpha * dz);
        let i = match self.cache.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                self.cache.push((key, linear_response(&self.omega_sq, coef, dz)));
                self.cache.len() - 1
            }
        };
        let h = self.cache[i].1.clone();
        let x = self.filter(&wave.x_pol, &h);
        let y = self.filter(&wave.y_pol, &h);
        wave.x_pol = x;
        wave.y_pol = y;
        Ok(())
    }
}

fn default_overlap(cfg: &DbpConfig, link: &LinkConfig, symbol_rate_hz: f64) -> usize {
    let worst = link
        .spans
        .iter()
        .map(|s| dispersive_spread_s(symbol_rate_hz, s, link.carrier_freq_hz(), cfg.steps_per_span))
        .fold(0.0, f64::max);
    let spread = (worst * symbol_rate_hz * cfg.oversampling as f64).ceil() as usize;
    (4 * spread + 16).next_multiple_of(2).min(cfg.n_fft / 2)
}

/// Resamples a waveform to `sps` samples per symbol by spectral truncation.
pub fn resample_to_sps(wave: &DualPolWaveform, symbol_rate_hz: f64, sps: usize) -> Result<DualPolWaveform> {
    let sps_in = wave.sample_rate / symbol_rate_hz;
    if (sps_in - sps_in.round()).abs() > 1e-9 {
        return Err(Error::invalid("input is not at an integer number of samples per symbol"));
    }
    let n_sym = wave.len() as f64 / sps_in.round();
    let new_len = (n_sym * sps as f64).round() as usize;
    DualPolWaveform::new(
        resample_spectral(&wave.x_pol, new_len),
        resample_spectral(&wave.y_pol, new_len),
        sps as f64 * symbol_rate_hz,
    )
}

/// Back-propagates a received waveform (already at `cfg.oversampling`
/// samples per symbol) through the whole link, spans in reverse order.
pub fn dbp_backpropagate(
    wave: &DualPolWaveform,
    link: &LinkConfig,
    cfg: &DbpConfig,
    symbol_rate_hz: f64,
) -> Result<DualPolWaveform> {
    cfg.validate()?;
    link.validate()?;
    let expected = cfg.oversampling as f64 * symbol_rate_hz;
    if (wave.sample_rate - expected).abs() > 1e-6 * expected {
        return Err(Error::invalid(format!(
            "DBP expects {} samples per symbol, got a {:.3} GSa/s waveform",
            cfg.oversampling,
            wave.sample_rate / 1e9
        )));
    }
    let mut out = wave.clone();
    let mut stage: Box<dyn LinearStage> = if cfg.n_fft >= wave.len() {
        Box::new(SsfmPropagator::new(wave.len(), wave.sample_rate))
    } else {
        let overlap = cfg.overlap.unwrap_or_else(|| default_overlap(cfg, link, symbol_rate_hz));
        Box::new(OverlapSave::new(cfg.n_fft, overlap, wave.sample_rate)?)
    };
    for span in link.spans.iter().rev() {
        out.scale(db_to_linear(-span.loss_db()).sqrt());
        let mut steps = step_lengths(span.length_km, span.length_km / cfg.steps_per_span as f64)?;
        steps.reverse();
        let coef = StepCoefficients::new(span, Direction::Backward, cfg.gamma_scale);
        split_step(stage.as_mut(), &mut out, &coef, &steps)?;
    }
    Ok(out)
}

/// Full DBP receiver: resample to the DBP rate, back-propagate, then
/// matched-filter and decimate. The output still needs normalization.
pub fn dbp_equalize(
    wave: &DualPolWaveform,
    link: &LinkConfig,
    cfg: &DbpConfig,
    shape: &PulseShape,
) -> Result<EqualizedSymbols> {
    let resampled = resample_to_sps(wave, shape.symbol_rate_hz, cfg.oversampling)?;
    let back = dbp_backpropagate(&resampled, link, cfg, shape.symbol_rate_hz)?;
    let rx_shape = PulseShape {
        samples_per_symbol: cfg.oversampling,
        ..*shape
    };
    Ok(receiver::matched_filter_downsample(&back, &rx_shape, None)?.0)
}

/// Q factor (dB) and mean-square symbol error after DBP and normalization.
pub fn dbp_score(
    wave: &DualPolWaveform,
    tx: &SymbolFrame,
    link: &LinkConfig,
    cfg: &DbpConfig,
    shape: &PulseShape,
    sel: PolSelection,
) -> Result<(f64, f64)> {
    let rx = dbp_equalize(wave, link, cfg, shape)?;
    let (rx, _) = receiver::normalize_and_align(&rx, tx)?;
    let q = receiver::metrics(&rx, tx, sel).q_factor_db;
    let mse = sel
        .pols()
        .iter()
        .flat_map(|&p| rx.pol(p).iter().zip(tx.pol(p)))
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        / (sel.pols().len() * tx.len()) as f64;
    Ok((q, mse))
}

/// Golden-section search of the Kerr scaling factor on a training frame.
/// Candidates are ranked by Q, ties (e.g. error-free frames) by lower
/// symbol MSE. Returns the best scale and its Q.
pub fn optimize_gamma_scale(
    wave: &DualPolWaveform,
    tx: &SymbolFrame,
    link: &LinkConfig,
    cfg: &DbpConfig,
    shape: &PulseShape,
    bounds: (f64, f64),
    iterations: usize,
) -> Result<(f64, f64)> {
    let score = |g: f64| -> Result<(f64, f64)> {
        let c = DbpConfig { gamma_scale: g, ..*cfg };
        dbp_score(wave, tx, link, &c, shape, PolSelection::Both)
    };
    let better = |a: (f64, f64), b: (f64, f64)| a.0 > b.0 || (a.0 == b.0 && a.1 < b.1);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = bounds;
    let mut c = hi - ratio * (hi - lo);
    let mut d = lo + ratio * (hi - lo);
    let mut fc = score(c)?;
    let mut fd = score(d)?;
    for _ in 0..iterations {
        if better(fc, fd) {
            hi = d;
            d = c;
            fd = fc;
            c = hi - ratio * (hi - lo);
            fc = score(c)?;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + ratio * (hi - lo);
            fd = score(d)?;
        }
    }
    Ok(if better(fc, fd) { (c, fc.0) } else { (d, fd.0) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{invert_link, propagate_link};
    use crate::dsp::{random_frame, shape_and_upsample};

    #[test]
    fn dbp_complexity_reference_value() {
        let fiber = FiberParams::twc();
        let c = dbp_rmps(9, 3, 256, 2, 34.4e9, &fiber, 193.41e12).unwrap();
        assert!((c.log10() - 3.334).abs() < 0.005, "{}", c.log10());
        let tau = dispersive_spread_s(34.4e9, &fiber, 193.41e12, 3);
        assert!((tau * 1e12 - 14.2).abs() < 0.1);
        assert!((tau * 34.4e9 - 0.49).abs() < 0.01);
        let tau6 = dispersive_spread_s(34.4e9, &fiber, 193.41e12, 6);
        assert!((tau / tau6 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dbp_complexity_rejects_small_fft() {
        let fiber = FiberParams {
            dispersion_ps_nm_km: 2000.0,
            ..FiberParams::twc()
        };
        assert!(dbp_rmps(9, 1, 256, 2, 34.4e9, &fiber, 193.41e12).is_err());
    }

    #[test]
    fn dbp_complexity_grows_with_spans_and_steps() {
        let fiber = FiberParams::twc();
        let mut prev = 0.0;
        for spans in 1..12 {
            let c = dbp_rmps(spans, 3, 256, 2, 34.4e9, &fiber, 193.41e12).unwrap();
            assert!(c > prev);
            prev = c;
        }
        prev = 0.0;
        for steps in 1..40 {
            let c = dbp_rmps(9, steps, 256, 2, 34.4e9, &fiber, 193.41e12).unwrap();
            assert!(c > prev);
            prev = c;
        }
    }

    fn short_link() -> LinkConfig {
        let mut link = LinkConfig::uniform(FiberParams::twc(), 2);
        link.amp_noise_figure_db = None;
        link
    }

    #[test]
    fn full_block_matches_simulator_inverse() {
        let tx = random_frame(1024, 1).unwrap();
        let shape = PulseShape {
            samples_per_symbol: 2,
            ..PulseShape::default()
        };
        let wave = shape_and_upsample(&tx, &shape, Some(4.0)).unwrap();
        let link = short_link();
        let cfg = DbpConfig {
            steps_per_span: 10,
            n_fft: 2048,
            ..DbpConfig::default()
        };
        let rx = propagate_link(&wave, &LinkConfig { ssfm_step_km: 5.0, ..link.clone() }, 0).unwrap();
        let a = dbp_backpropagate(&rx, &link, &cfg, shape.symbol_rate_hz).unwrap();
        let b = invert_link(&rx, &link, 5.0).unwrap();
        let err: f64 = a.x_pol.iter().zip(&b.x_pol).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>() / b.energy();
        assert!(err.sqrt() < 1e-5);
        let back: f64 = a.x_pol.iter().zip(&wave.x_pol).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>() / wave.energy();
        assert!(back.sqrt() < 1e-6);
    }

    #[test]
    fn overlap_save_tracks_full_block() {
        let tx = random_frame(2048, 2).unwrap();
        let shape = PulseShape {
            samples_per_symbol: 2,
            ..PulseShape::default()
        };
        let wave = shape_and_upsample(&tx, &shape, Some(2.0)).unwrap();
        let link = short_link();
        let full = DbpConfig {
            n_fft: 4096,
            ..DbpConfig::default()
        };
        let blocks = DbpConfig::default();
        let a = dbp_backpropagate(&wave, &link, &full, shape.symbol_rate_hz).unwrap();
        let b = dbp_backpropagate(&wave, &link, &blocks, shape.symbol_rate_hz).unwrap();
        let err: f64 = a.x_pol.iter().zip(&b.x_pol).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>() / a.energy();
        assert!(err.sqrt() < 1e-3, "{}", err.sqrt());
    }

    #[test]
    fn zero_gamma_scale_equals_cdc() {
        let tx = random_frame(1024, 3).unwrap();
        let shape = PulseShape::default();
        let wave = shape_and_upsample(&tx, &shape, Some(2.0)).unwrap();
        let link = LinkConfig {
            ssfm_step_km: 5.0,
            ..short_link()
        };
        let rx = propagate_link(&wave, &link, 0).unwrap();
        let cfg = DbpConfig {
            gamma_scale: 0.0,
            n_fft: 4096,
            ..DbpConfig::default()
        };
        let dbp = dbp_equalize(&rx, &link, &cfg, &shape).unwrap();
        let resampled = resample_to_sps(&rx, shape.symbol_rate_hz, 2).unwrap();
        let cdc = receiver::cdc_compensate(&resampled, link.total_length_km(), &link.spans[0]);
        let shape2 = PulseShape {
            samples_per_symbol: 2,
            ..shape
        };
        let (cdc, _) = receiver::matched_filter_downsample(&cdc, &shape2, None).unwrap();
        for (a, b) in dbp.x_pol.iter().zip(&cdc.x_pol) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn rejects_wrong_rate() {
        let tx = random_frame(256, 4).unwrap();
        let shape = PulseShape::default();
        let wave = shape_and_upsample(&tx, &shape, Some(0.0)).unwrap();
        assert!(dbp_backpropagate(&wave, &short_link(), &DbpConfig::default(), shape.symbol_rate_hz).is_err());
    }
}
