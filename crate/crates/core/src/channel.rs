//! Dual-polarization fiber propagation (Manakov equations, symmetric
//! split-step Fourier) and EDFA amplification with ASE noise.
//!
//! Linear operator convention: over a distance `dz` every FFT bin of the
//! field is multiplied by `exp(i * beta2/2 * w^2 * dz - alpha/2 * dz)`,
//! where `w` is the baseband angular frequency of the bin. The Kerr step
//! rotates both polarizations by `(8/9) * gamma * (|Ax|^2 + |Ay|^2) * h_eff`.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_mt::Mt64;
use serde::{Deserialize, Serialize};

use crate::dsp::{db_to_linear, DualPolWaveform};
use crate::error::{Error, Result};
use crate::fft::{angular_frequencies, FftPair};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const PLANCK: f64 = 6.626_070_15e-34;
pub const MANAKOV_FACTOR: f64 = 8.0 / 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiberParams {
    pub alpha_db_per_km: f64,
    pub dispersion_ps_nm_km: f64,
    pub gamma_per_w_km: f64,
    pub length_km: f64,
    pub reference_lambda_nm: f64,
}

impl FiberParams {
    /// TrueWave Classic span: 50 km, 0.23 dB/km, 2.8 ps/(nm km), 2.5 /(W km).
    pub fn twc() -> Self {
        FiberParams {
            alpha_db_per_km: 0.23,
            dispersion_ps_nm_km: 2.8,
            gamma_per_w_km: 2.5,
            length_km: 50.0,
            reference_lambda_nm: 1550.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_km > 0.0) {
            return Err(Error::invalid("fiber length must be positive"));
        }
        if !(self.alpha_db_per_km >= 0.0) {
            return Err(Error::invalid("attenuation must be non-negative"));
        }
        if !(self.reference_lambda_nm > 0.0) {
            return Err(Error::invalid("reference wavelength must be positive"));
        }
        Ok(())
    }

    /// Power attenuation in 1/km.
    pub fn alpha_per_km(&self) -> f64 {
        self.alpha_db_per_km * std::f64::consts::LN_10 / 10.0
    }

    /// Group-velocity dispersion in s^2/km at the reference wavelength.
    pub fn beta2_s2_per_km(&self) -> f64 {
        let lambda = self.reference_lambda_nm * 1e-9;
        let d_si = self.dispersion_ps_nm_km * 1e-6; // s/m^2
        -lambda * lambda * d_si / (2.0 * std::f64::consts::PI * SPEED_OF_LIGHT) * 1e3
    }

    /// Span loss in dB.
    pub fn loss_db(&self) -> f64 {
        self.alpha_db_per_km * self.length_km
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub spans: Vec<FiberParams>,
    /// `None` disables ASE noise.
    pub amp_noise_figure_db: Option<f64>,
    pub ssfm_step_km: f64,
    pub launch_power_dbm: f64,
    pub carrier_freq_thz: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig::uniform(FiberParams::twc(), 9)
    }
}

impl LinkConfig {
    /// `n_spans` identical spans with the reference EDFA/SSFM settings.
    pub fn uniform(fiber: FiberParams, n_spans: usize) -> Self {
        LinkConfig {
            spans: vec![fiber; n_spans],
            amp_noise_figure_db: Some(4.5),
            ssfm_step_km: 1.0,
            launch_power_dbm: 2.0,
            carrier_freq_thz: 193.41,
        }
    }

    pub fn n_spans(&self) -> usize {
        self.spans.len()
    }

    pub fn carrier_freq_hz(&self) -> f64 {
        self.carrier_freq_thz * 1e12
    }

    pub fn total_length_km(&self) -> f64 {
        self.spans.iter().map(|s| s.length_km).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.spans.is_empty() {
            return Err(Error::invalid("link needs at least one span"));
        }
        if !(self.ssfm_step_km > 0.0) {
            return Err(Error::invalid("SSFM step must be positive"));
        }
        if !(self.carrier_freq_thz > 0.0) {
            return Err(Error::invalid("carrier frequency must be positive"));
        }
        let lambda_nm = SPEED_OF_LIGHT / self.carrier_freq_hz() * 1e9;
        for s in &self.spans {
            s.validate()?;
            if (s.reference_lambda_nm - lambda_nm).abs() > 1.0 {
                return Err(Error::invalid(format!(
                    "span reference wavelength {} nm inconsistent with carrier ({lambda_nm:.2} nm)",
                    s.reference_lambda_nm
                )));
            }
            if self.ssfm_step_km > s.length_km {
                return Err(Error::invalid("SSFM step longer than span"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }
}

/// Sign-adjusted coefficients for one pass through a fiber.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    /// Power attenuation, 1/km.
    pub alpha: f64,
    /// s^2/km.
    pub beta2: f64,
    /// Kerr coefficient including the Manakov factor, 1/(W km).
    pub gamma: f64,
}

impl StepCoefficients {
    pub fn new(fiber: &FiberParams, direction: Direction, gamma_scale: f64) -> Self {
        let s = direction.sign();
        StepCoefficients {
            alpha: s * fiber.alpha_per_km(),
            beta2: s * fiber.beta2_s2_per_km(),
            gamma: s * MANAKOV_FACTOR * fiber.gamma_per_w_km * gamma_scale,
        }
    }

    /// Length over which the Kerr phase of a step of length `h` is
    /// accumulated when the step's power is sampled at its midpoint.
    pub fn effective_length(&self, h: f64) -> f64 {
        let a = self.alpha;
        if a.abs() * h < 1e-12 {
            h
        } else {
            2.0 * (a * h / 2.0).sinh() / a
        }
    }
}

/// Split a span into equal steps plus a trailing remainder step.
pub fn step_lengths(length_km: f64, step_km: f64) -> Result<Vec<f64>> {
    if !(step_km > 0.0) {
        return Err(Error::invalid("step must be positive"));
    }
    if step_km > length_km * (1.0 + 1e-12) {
        return Err(Error::invalid(format!(
            "step {step_km} km longer than span {length_km} km"
        )));
    }
    let full = (length_km / step_km + 1e-9).floor() as usize;
    let mut steps = vec![step_km; full];
    let rest = length_km - full as f64 * step_km;
    if rest > 1e-9 * length_km {
        steps.push(rest);
    }
    Ok(steps)
}

/// Kerr phase rotation over effective length `l_eff`.
pub fn kerr_rotate(x: &mut [Complex64], y: &mut [Complex64], gamma: f64, l_eff: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let phi = gamma * (a.norm_sqr() + b.norm_sqr()) * l_eff;
        let rot = Complex64::new(phi.cos(), phi.sin());
        *a *= rot;
        *b *= rot;
    }
}

/// A linear (dispersion + loss) operator acting over a distance.
pub trait LinearStage {
    fn apply_linear(&mut self, wave: &mut DualPolWaveform, coef: &StepCoefficients, dz: f64) -> Result<()>;
}

/// Symmetric split-step over the given step lengths: half linear, full
/// Kerr, half linear. Adjacent linear half-steps are fused, so each step
/// costs one linear and one Kerr operation.
pub fn split_step<S: LinearStage + ?Sized>(
    stage: &mut S,
    wave: &mut DualPolWaveform,
    coef: &StepCoefficients,
    steps: &[f64],
) -> Result<()> {
    let Some(&last) = steps.last() else { return Ok(()) };
    for (i, &h) in steps.iter().enumerate() {
        let lead = if i == 0 { h / 2.0 } else { (steps[i - 1] + h) / 2.0 };
        stage.apply_linear(wave, coef, lead)?;
        kerr_rotate(&mut wave.x_pol, &mut wave.y_pol, coef.gamma, coef.effective_length(h));
    }
    stage.apply_linear(wave, coef, last / 2.0)
}

/// Reusable whole-frame split-step integrator for one signal length and rate.
pub struct SsfmPropagator {
    fft: FftPair,
    omega_sq: Vec<f64>,
    sample_rate: f64,
    cache: Vec<((f64, f64, f64), Vec<Complex64>)>,
}

impl SsfmPropagator {
    pub fn new(len: usize, sample_rate: f64) -> Self {
        let omega_sq = angular_frequencies(len, sample_rate)
            .into_iter()
            .map(|w| w * w)
            .collect();
        SsfmPropagator {
            fft: FftPair::new(len),
            omega_sq,
            sample_rate,
            cache: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.omega_sq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega_sq.is_empty()
    }

    fn check(&self, wave: &DualPolWaveform) -> Result<()> {
        if wave.len() != self.len() {
            return Err(Error::invalid("waveform length does not match propagator"));
        }
        if (wave.sample_rate - self.sample_rate).abs() > 1e-9 * self.sample_rate {
            return Err(Error::invalid("waveform sample rate does not match propagator"));
        }
        Ok(())
    }

    fn response(&mut self, coef: &StepCoefficients, dz: f64) -> usize {
        let key = (coef.alpha * dz, coef.beta2 * dz, dz);
        if let Some(i) = self.cache.iter().position(|(k, _)| *k == key) {
            return i;
        }
        let h = linear_response(&self.omega_sq, coef, dz);
        self.cache.push((key, h));
        self.cache.len() - 1
    }

    pub fn propagate_steps(
        &mut self,
        wave: &mut DualPolWaveform,
        coef: &StepCoefficients,
        steps: &[f64],
    ) -> Result<()> {
        self.check(wave)?;
        split_step(self, wave, coef, steps)
    }

    pub fn propagate_span(
        &mut self,
        wave: &mut DualPolWaveform,
        fiber: &FiberParams,
        step_km: f64,
        direction: Direction,
    ) -> Result<()> {
        fiber.validate()?;
        let mut steps = step_lengths(fiber.length_km, step_km)?;
        if direction == Direction::Backward {
            steps.reverse();
        }
        let coef = StepCoefficients::new(fiber, direction, 1.0);
        self.propagate_steps(wave, &coef, &steps)
    }
}

impl LinearStage for SsfmPropagator {
    fn apply_linear(&mut self, wave: &mut DualPolWaveform, coef: &StepCoefficients, dz: f64) -> Result<()> {
        self.check(wave)?;
        let i = self.response(coef, dz);
        let h = &self.cache[i].1;
        for pol in wave.pols_mut() {
            self.fft.apply_response(pol, h);
        }
        Ok(())
    }
}

/// Transfer function of the linear operator over `dz` km on a grid of
/// squared angular frequencies.
pub fn linear_response(omega_sq: &[f64], coef: &StepCoefficients, dz: f64) -> Vec<Complex64> {
    let amp = (-coef.alpha * dz / 2.0).exp();
    omega_sq
        .iter()
        .map(|&w2| Complex64::from_polar(amp, coef.beta2 / 2.0 * w2 * dz))
        .collect()
}

/// Propagates one span with symmetric split-step integration.
/// `Backward` negates attenuation, dispersion and nonlinearity and walks the
/// steps in reverse order, inverting a noiseless forward pass.
pub fn ssfm_propagate_span(
    wave: &DualPolWaveform,
    fiber: &FiberParams,
    step_km: f64,
    direction: Direction,
) -> Result<DualPolWaveform> {
    let mut out = wave.clone();
    SsfmPropagator::new(wave.len(), wave.sample_rate).propagate_span(&mut out, fiber, step_km, direction)?;
    Ok(out)
}

/// ASE power spectral density per polarization, W/Hz.
pub fn ase_psd(gain_db: f64, nf_db: f64, carrier_freq_hz: f64) -> f64 {
    let g = db_to_linear(gain_db);
    let n_sp = db_to_linear(nf_db) / 2.0;
    (g - 1.0) * PLANCK * carrier_freq_hz * n_sp
}

/// Amplifies by `gain_db` and adds circular complex Gaussian ASE noise to each
/// polarization. `nf_db = None` is a noiseless amplifier.
pub fn edfa_amplify(
    wave: &mut DualPolWaveform,
    gain_db: f64,
    nf_db: Option<f64>,
    carrier_freq_hz: f64,
    seed: u64,
) -> Result<()> {
    if !(gain_db >= 0.0) {
        return Err(Error::invalid("amplifier gain must be non-negative"));
    }
    wave.scale(db_to_linear(gain_db).sqrt());
    let Some(nf) = nf_db else { return Ok(()) };
    let noise_power = ase_psd(gain_db, nf, carrier_freq_hz) * wave.sample_rate;
    let sigma = (noise_power / 2.0).sqrt();
    let mut rng = Mt64::seed_from_u64(seed);
    for pol in wave.pols_mut() {
        for s in pol.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *s += Complex64::new(re * sigma, im * sigma);
        }
    }
    Ok(())
}

/// Deterministic per-stream seed derivation (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Every span is followed by an amplifier that exactly compensates its loss.
pub fn propagate_link(wave: &DualPolWaveform, link: &LinkConfig, seed: u64) -> Result<DualPolWaveform> {
    link.validate()?;
    let mut out = wave.clone();
    let mut prop = SsfmPropagator::new(wave.len(), wave.sample_rate);
    for (i, span) in link.spans.iter().enumerate() {
        prop.propagate_span(&mut out, span, link.ssfm_step_km, Direction::Forward)?;
        edfa_amplify(
            &mut out,
            span.loss_db(),
            link.amp_noise_figure_db,
            link.carrier_freq_hz(),
            derive_seed(seed, i as u64),
        )?;
    }
    Ok(out)
}

/// Noiseless inverse of [`propagate_link`]: undo each amplifier gain and
/// back-propagate the spans in reverse order.
pub fn invert_link(wave: &DualPolWaveform, link: &LinkConfig, step_km: f64) -> Result<DualPolWaveform> {
    link.validate()?;
    let mut out = wave.clone();
    let mut prop = SsfmPropagator::new(wave.len(), wave.sample_rate);
    for span in link.spans.iter().rev() {
        out.scale(db_to_linear(-span.loss_db()).sqrt());
        prop.propagate_span(&mut out, span, step_km, Direction::Backward)?;
    }
    Ok(out)
}
