//! Receiver-side DSP: dispersion compensation, matched filtering,
//! normalization, noise loading and BER / Q-factor metrics.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_mt::Mt64;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;

use crate::channel::FiberParams;
use crate::dsp::{qam16_decide, DualPolWaveform, Polarization, PulseShape, SymbolFrame};
use crate::error::{Error, Result};
use crate::fft::{angular_frequencies, centered_fir_response, FftPair};

/// Received symbols at one sample per symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqualizedSymbols {
    pub x_pol: Vec<Complex64>,
    pub y_pol: Vec<Complex64>,
}

impl EqualizedSymbols {
    pub fn new(x_pol: Vec<Complex64>, y_pol: Vec<Complex64>) -> Result<Self> {
        if x_pol.len() != y_pol.len() {
            return Err(Error::invalid("polarizations must have equal length"));
        }
        Ok(EqualizedSymbols { x_pol, y_pol })
    }

    pub fn len(&self) -> usize {
        self.x_pol.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_pol.is_empty()
    }

    pub fn pol(&self, pol: Polarization) -> &[Complex64] {
        match pol {
            Polarization::X => &self.x_pol,
            Polarization::Y => &self.y_pol,
        }
    }

    pub fn pol_mut(&mut self, pol: Polarization) -> &mut Vec<Complex64> {
        match pol {
            Polarization::X => &mut self.x_pol,
            Polarization::Y => &mut self.y_pol,
        }
    }
}

impl From<&SymbolFrame> for EqualizedSymbols {
    fn from(f: &SymbolFrame) -> Self {
        EqualizedSymbols {
            x_pol: f.x_pol.clone(),
            y_pol: f.y_pol.clone(),
        }
    }
}

/// Which polarizations enter a BER / Q figure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolSelection {
    /// Errors pooled over both polarizations.
    #[default]
    Both,
    X,
    Y,
}

impl PolSelection {
    pub fn pols(self) -> &'static [Polarization] {
        match self {
            PolSelection::Both => &[Polarization::X, Polarization::Y],
            PolSelection::X => &[Polarization::X],
            PolSelection::Y => &[Polarization::Y],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ber: f64,
    /// `+inf` when no bit errors were observed.
    pub q_factor_db: f64,
    pub n_bits: u64,
}

/// Zero-forcing removal of the dispersion accumulated over `total_length_km`.
pub fn cdc_compensate(wave: &DualPolWaveform, total_length_km: f64, fiber: &FiberParams) -> DualPolWaveform {
    let mut out = wave.clone();
    if total_length_km == 0.0 || wave.is_empty() {
        return out;
    }
    let phase_per_w2 = -fiber.beta2_s2_per_km() / 2.0 * total_length_km;
    let h: Vec<Complex64> = angular_frequencies(wave.len(), wave.sample_rate)
        .into_iter()
        .map(|w| Complex64::from_polar(1.0, phase_per_w2 * w * w))
        .collect();
    let mut fft = FftPair::new(wave.len());
    for pol in out.pols_mut() {
        fft.apply_response(pol, &h);
    }
    out
}

/// Matched RRC filtering and decimation. When `phase` is `None` the
/// decimation phase maximizing the mean symbol energy is chosen.
/// Returns the symbols and the phase used.
pub fn matched_filter_downsample(
    wave: &DualPolWaveform,
    shape: &PulseShape,
    phase: Option<usize>,
) -> Result<(EqualizedSymbols, usize)> {
    let sps = shape.samples_per_symbol;
    let expected_rate = sps as f64 * shape.symbol_rate_hz;
    if (wave.sample_rate - expected_rate).abs() > 1e-6 * expected_rate {
        return Err(Error::invalid("waveform is not at an integer number of samples per symbol"));
    }
    if wave.len() % sps != 0 {
        return Err(Error::invalid("waveform length is not a whole number of symbols"));
    }
    let taps = shape.taps()?;
    let h = centered_fir_response(&taps, wave.len())?;
    let mut fft = FftPair::new(wave.len());
    let mut x = wave.x_pol.clone();
    let mut y = wave.y_pol.clone();
    fft.apply_response(&mut x, &h);
    fft.apply_response(&mut y, &h);
    let energy = |p: usize| -> f64 {
        x.iter()
            .skip(p)
            .step_by(sps)
            .chain(y.iter().skip(p).step_by(sps))
            .map(|s| s.norm_sqr())
            .sum()
    };
    let phase = match phase {
        Some(p) if p >= sps => return Err(Error::invalid("decimation phase out of range")),
        Some(p) => p,
        None => (0..sps)
            .map(|p| (p, energy(p)))
            .fold((0, f64::MIN), |best, c| if c.1 > best.1 { c } else { best })
            .0,
    };
    let pick = |v: &[Complex64]| v.iter().skip(phase).step_by(sps).copied().collect::<Vec<_>>();
    Ok((EqualizedSymbols::new(pick(&x), pick(&y))?, phase))
}

/// Mean symbol energy at each decimation phase after matched filtering.
pub fn phase_energies(wave: &DualPolWaveform, shape: &PulseShape) -> Result<Vec<f64>> {
    (0..shape.samples_per_symbol)
        .map(|p| {
            matched_filter_downsample(wave, shape, Some(p)).map(|(s, _)| {
                s.x_pol.iter().chain(&s.y_pol).map(|v| v.norm_sqr()).sum::<f64>() / s.len() as f64
            })
        })
        .collect()
}

/// Per-polarization complex gain and the circular lag found during alignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    /// Received index `k + lag` holds transmitted symbol `k`.
    pub lag: isize,
    pub scale_x: Complex64,
    pub scale_y: Complex64,
}

/// Circular cross-correlation peak of `rx` against `tx`, pooled over both
/// polarizations. Returns the lag in `(-n/2, n/2]`.
pub fn find_lag(rx: &EqualizedSymbols, tx: &SymbolFrame) -> Result<isize> {
    let n = rx.len();
    if n != tx.len() || n == 0 {
        return Err(Error::invalid("rx and tx frames must have equal nonzero length"));
    }
    let mut fft = FftPair::new(n);
    let mut mag = vec![0.0; n];
    for pol in [Polarization::X, Polarization::Y] {
        let mut a = rx.pol(pol).to_vec();
        let mut b = tx.pol(pol).to_vec();
        fft.forward(&mut a);
        fft.forward(&mut b);
        let mut r: Vec<Complex64> = a.iter().zip(&b).map(|(p, q)| p * q.conj()).collect();
        fft.inverse(&mut r);
        for (m, v) in mag.iter_mut().zip(&r) {
            *m += v.norm();
        }
    }
    let best = mag
        .iter()
        .enumerate()
        .fold((0usize, f64::MIN), |b, (i, &m)| if m > b.1 { (i, m) } else { b })
        .0;
    Ok(if best > n / 2 { best as isize - n as isize } else { best as isize })
}

fn ls_scale(rx: &[Complex64], tx: &[Complex64]) -> Complex64 {
    let num: Complex64 = rx.iter().zip(tx).map(|(r, t)| t.conj() * r).sum();
    let den: f64 = tx.iter().map(|t| t.norm_sqr()).sum();
    num / den
}

/// Integer-lag alignment followed by a least-squares complex gain per
/// polarization, so that the output is the best scalar estimate of `tx`.
pub fn normalize_and_align(rx: &EqualizedSymbols, tx: &SymbolFrame) -> Result<(EqualizedSymbols, Alignment)> {
    let lag = find_lag(rx, tx)?;
    let n = rx.len() as isize;
    let shift = |v: &[Complex64]| -> Vec<Complex64> {
        (0..n).map(|k| v[(k + lag).rem_euclid(n) as usize]).collect()
    };
    let mut x = shift(&rx.x_pol);
    let mut y = shift(&rx.y_pol);
    let scale_x = ls_scale(&x, &tx.x_pol);
    let scale_y = ls_scale(&y, &tx.y_pol);
    if scale_x.norm() == 0.0 || scale_y.norm() == 0.0 || !scale_x.is_finite() || !scale_y.is_finite() {
        return Err(Error::numerical("received frame is uncorrelated with the reference"));
    }
    x.iter_mut().for_each(|s| *s /= scale_x);
    y.iter_mut().for_each(|s| *s /= scale_y);
    Ok((
        EqualizedSymbols::new(x, y)?,
        Alignment {
            lag,
            scale_x,
            scale_y,
        },
    ))
}

/// Bit-error count with Gray hard decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BitErrors {
    pub errors: u64,
    pub bits: u64,
}

impl BitErrors {
    pub fn ber(&self) -> f64 {
        if self.bits == 0 {
            0.0
        } else {
            self.errors as f64 / self.bits as f64
        }
    }
}

impl std::ops::Add for BitErrors {
    type Output = BitErrors;
    fn add(self, o: BitErrors) -> BitErrors {
        BitErrors {
            errors: self.errors + o.errors,
            bits: self.bits + o.bits,
        }
    }
}

pub fn count_bit_errors(rx: &[Complex64], tx: &[Complex64]) -> BitErrors {
    let errors = rx
        .iter()
        .zip(tx)
        .map(|(&r, &t)| {
            let a = qam16_decide(r);
            let b = qam16_decide(t);
            a.iter().zip(&b).filter(|(p, q)| p != q).count() as u64
        })
        .sum();
    BitErrors {
        errors,
        bits: 4 * rx.len().min(tx.len()) as u64,
    }
}

pub fn ber_count(rx: &EqualizedSymbols, tx: &SymbolFrame, sel: PolSelection) -> BitErrors {
    sel.pols()
        .iter()
        .map(|&p| count_bit_errors(rx.pol(p), tx.pol(p)))
        .fold(BitErrors::default(), |a, b| a + b)
}

/// `Q = 20 log10(sqrt(2) * erfcinv(2 BER))` in dB; `+inf` for BER = 0.
pub fn q_from_ber(ber: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&ber) {
        return Err(Error::invalid(format!("BER {ber} outside [0, 0.5)")));
    }
    if ber == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (2f64.sqrt() * erfc_inv(2.0 * ber)).log10())
}

/// BER and Q over the selected polarizations. A BER at or above 0.5 is
/// reported with `Q = -inf`.
pub fn metrics(rx: &EqualizedSymbols, tx: &SymbolFrame, sel: PolSelection) -> Metrics {
    let e = ber_count(rx, tx, sel);
    let ber = e.ber();
    let q_factor_db = q_from_ber(ber).unwrap_or(f64::NEG_INFINITY);
    Metrics {
        ber,
        q_factor_db,
        n_bits: e.bits,
    }
}

/// Adds the noise realization fixed by `seed`, scaled to per-component
/// standard deviation `sigma` (the same draw [`load_noise_to_target_q`] uses).
pub fn add_loading_noise(rx: &EqualizedSymbols, sigma: f64, seed: u64) -> EqualizedSymbols {
    let mut rng = Mt64::seed_from_u64(seed);
    let mut pol = |v: &[Complex64]| -> Vec<Complex64> {
        v.iter()
            .map(|s| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                s + Complex64::new(re, im) * sigma
            })
            .collect()
    };
    let x_pol = pol(&rx.x_pol);
    let y_pol = pol(&rx.y_pol);
    EqualizedSymbols { x_pol, y_pol }
}

pub const NOISE_LOADING_TOLERANCE_DB: f64 = 0.05;

/// Adds white complex Gaussian noise, with standard deviation found by
/// bisection, until the hard-decision Q is within 0.05 dB of `target_q_db`.
/// The noise realization is fixed by `seed`; only its scale is searched.
/// Returns the loaded symbols and the per-component noise deviation.
pub fn load_noise_to_target_q(
    rx: &EqualizedSymbols,
    tx: &SymbolFrame,
    target_q_db: f64,
    seed: u64,
    sel: PolSelection,
) -> Result<(EqualizedSymbols, f64)> {
    let q0 = metrics(rx, tx, sel).q_factor_db;
    if (q0 - target_q_db).abs() <= NOISE_LOADING_TOLERANCE_DB {
        return Ok((rx.clone(), 0.0));
    }
    if target_q_db > q0 {
        return Err(Error::invalid(format!(
            "target Q {target_q_db:.2} dB exceeds the noiseless Q {q0:.2} dB"
        )));
    }
    let loaded = |sigma: f64| add_loading_noise(rx, sigma, seed);
    let q_at = |sigma: f64| metrics(&loaded(sigma), tx, sel).q_factor_db;

    let mut lo = 0.0;
    let mut hi = 0.05;
    while q_at(hi) > target_q_db {
        lo = hi;
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::numerical("noise loading failed to bracket the target Q"));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let q = q_at(mid);
        if (q - target_q_db).abs() <= NOISE_LOADING_TOLERANCE_DB {
            return Ok((loaded(mid), mid));
        }
        if q > target_q_db {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Err(Error::numerical(format!(
        "noise loading could not reach {target_q_db:.2} dB within tolerance"
    )))
}
