//! Bit and symbol level primitives: PRBS generation, Gray-coded 16-QAM,
//! root-raised-cosine pulse shaping and power normalization.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_mt::Mt64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::circular_filter;

/// A sequence of bits, one per byte (each entry is 0 or 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitSequence(Vec<u8>);

impl BitSequence {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::invalid("bit sequence must not be empty"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("bits must be 0 or 1"));
        }
        Ok(BitSequence(bits))
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.0
    }
}

/// Transmitted symbols for both polarizations, unit average energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolFrame {
    pub x_pol: Vec<Complex64>,
    pub y_pol: Vec<Complex64>,
}

impl SymbolFrame {
    pub fn new(x_pol: Vec<Complex64>, y_pol: Vec<Complex64>) -> Result<Self> {
        if x_pol.len() != y_pol.len() {
            return Err(Error::invalid("polarizations must have equal length"));
        }
        Ok(SymbolFrame { x_pol, y_pol })
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
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarization {
    X,
    Y,
}

/// Complex baseband field samples (amplitude in sqrt(W)) for both polarizations.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPolWaveform {
    pub x_pol: Vec<Complex64>,
    pub y_pol: Vec<Complex64>,
    pub sample_rate: f64,
}

impl DualPolWaveform {
    pub fn new(x_pol: Vec<Complex64>, y_pol: Vec<Complex64>, sample_rate: f64) -> Result<Self> {
        if x_pol.len() != y_pol.len() {
            return Err(Error::invalid("polarizations must have equal length"));
        }
        if !(sample_rate > 0.0) {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(DualPolWaveform {
            x_pol,
            y_pol,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.x_pol.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_pol.is_empty()
    }

    /// Mean total power `<|x|^2 + |y|^2>` in W.
    pub fn mean_power(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .x_pol
            .iter()
            .chain(&self.y_pol)
            .map(|s| s.norm_sqr())
            .sum();
        sum / self.len() as f64
    }

    /// Total energy `sum |x|^2 + |y|^2` (sample-count units).
    pub fn energy(&self) -> f64 {
        self.x_pol
            .iter()
            .chain(&self.y_pol)
            .map(|s| s.norm_sqr())
            .sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.x_pol.iter_mut().chain(self.y_pol.iter_mut()) {
            *s *= factor;
        }
    }

    pub fn pols_mut(&mut self) -> [&mut Vec<Complex64>; 2] {
        [&mut self.x_pol, &mut self.y_pol]
    }
}

pub fn dbm_to_watt(dbm: f64) -> f64 {
    1e-3 * 10f64.powf(dbm / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Maximal-length Fibonacci tap positions (polynomial exponents) per register order.
fn lfsr_taps(order: u32) -> &'static [u32] {
    match order {
        2 => &[2, 1],
        3 => &[3, 2],
        4 => &[4, 3],
        5 => &[5, 3],
        6 => &[6, 5],
        7 => &[7, 6],
        8 => &[8, 6, 5, 4],
        9 => &[9, 5],
        10 => &[10, 7],
        11 => &[11, 9],
        12 => &[12, 11, 10, 4],
        13 => &[13, 12, 11, 8],
        14 => &[14, 13, 12, 2],
        15 => &[15, 14],
        16 => &[16, 15, 13, 4],
        17 => &[17, 14],
        18 => &[18, 11],
        19 => &[19, 18, 17, 14],
        20 => &[20, 17],
        21 => &[21, 19],
        22 => &[22, 21],
        23 => &[23, 18],
        24 => &[24, 23, 22, 17],
        25 => &[25, 22],
        26 => &[26, 6, 2, 1],
        27 => &[27, 5, 2, 1],
        28 => &[28, 25],
        29 => &[29, 27],
        30 => &[30, 6, 4, 1],
        31 => &[31, 28],
        32 => &[32, 22, 2, 1],
        _ => &[],
    }
}

/// Linear-feedback shift register with a maximal-length polynomial.
#[derive(Debug, Clone)]
pub struct Lfsr {
    state: u64,
    mask: u64,
    tap_mask: u64,
    order: u32,
}

impl Lfsr {
    pub fn new(order: u32, seed: u64) -> Result<Self> {
        if !(2..=32).contains(&order) {
            return Err(Error::invalid(format!("PRBS order {order} outside 2..=32")));
        }
        let mask = (1u64 << order) - 1;
        let state = seed & mask;
        if state == 0 {
            return Err(Error::invalid("PRBS seed must be nonzero in the register width"));
        }
        let tap_mask = lfsr_taps(order)
            .iter()
            .fold(0u64, |m, &t| m | (1u64 << (t - 1)));
        Ok(Lfsr {
            state,
            mask,
            tap_mask,
            order,
        })
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    /// Advances one clock and returns the bit shifted out.
    pub fn next_bit(&mut self) -> u8 {
        let out = ((self.state >> (self.order - 1)) & 1) as u8;
        let feedback = (self.state & self.tap_mask).count_ones() as u64 & 1;
        self.state = ((self.state << 1) | feedback) & self.mask;
        out
    }
}

pub fn prbs_generate(order: u32, seed: u64, n_bits: usize) -> Result<BitSequence> {
    if n_bits == 0 {
        return Err(Error::invalid("n_bits must be positive"));
    }
    let mut lfsr = Lfsr::new(order, seed)?;
    BitSequence::new((0..n_bits).map(|_| lfsr.next_bit()).collect())
}

/// Uniform random bits from a seeded 64-bit Mersenne twister.
pub fn random_bits(n_bits: usize, seed: u64) -> Result<BitSequence> {
    if n_bits == 0 {
        return Err(Error::invalid("n_bits must be positive"));
    }
    let mut rng = Mt64::seed_from_u64(seed);
    let mut bits = Vec::with_capacity(n_bits);
    while bits.len() < n_bits {
        let word: u64 = rng.random();
        let take = (n_bits - bits.len()).min(64);
        bits.extend((0..take).map(|i| ((word >> i) & 1) as u8));
    }
    BitSequence::new(bits)
}

const QAM16_SCALE: f64 = 0.316_227_766_016_837_94; // 1/sqrt(10)

/// Gray code for two bits onto amplitude levels -3, -1, +1, +3.
const GRAY_LEVELS: [f64; 4] = [-3.0, -1.0, 3.0, 1.0];
/// Inverse: level index (0..4 for -3..+3) to the two bits.
const LEVEL_BITS: [[u8; 2]; 4] = [[0, 0], [0, 1], [1, 1], [1, 0]];

pub fn qam16_point(word: [u8; 4]) -> Complex64 {
    let i = GRAY_LEVELS[(word[0] * 2 + word[1]) as usize];
    let q = GRAY_LEVELS[(word[2] * 2 + word[3]) as usize];
    Complex64::new(i, q) * QAM16_SCALE
}

/// Gray-mapped 16-QAM: bits (b0,b1) select the in-phase level and
/// (b2,b3) the quadrature level, with 00,01,11,10 mapping to -3,-1,+1,+3.
pub fn qam16_map(bits: &BitSequence) -> Result<Vec<Complex64>> {
    let b = bits.as_slice();
    if b.len() % 4 != 0 {
        return Err(Error::invalid("bit count must be divisible by 4"));
    }
    Ok(b
        .chunks_exact(4)
        .map(|w| qam16_point([w[0], w[1], w[2], w[3]]))
        .collect())
}

fn level_index(v: f64) -> usize {
    // Boundary values resolve to the lower level.
    let v = v / QAM16_SCALE;
    [-2.0, 0.0, 2.0].iter().filter(|&&t| v > t).count()
}

/// Hard-decision demapping of a single symbol to its 4 bits.
pub fn qam16_decide(s: Complex64) -> [u8; 4] {
    let i = LEVEL_BITS[level_index(s.re)];
    let q = LEVEL_BITS[level_index(s.im)];
    [i[0], i[1], q[0], q[1]]
}

pub fn qam16_demap_hard(symbols: &[Complex64]) -> Vec<u8> {
    symbols.iter().flat_map(|&s| qam16_decide(s)).collect()
}

/// Nearest constellation point of a symbol.
pub fn qam16_slice(s: Complex64) -> Complex64 {
    qam16_point(qam16_decide(s))
}

/// Unnormalized root-raised-cosine impulse response at time `t` in symbol periods.
pub fn rrc_impulse(t: f64, beta: f64) -> f64 {
    if t.abs() < 1e-12 {
        return 1.0 - beta + 4.0 * beta / PI;
    }
    if (t.abs() - 1.0 / (4.0 * beta)).abs() < 1e-12 {
        let a = PI / (4.0 * beta);
        return beta / 2f64.sqrt()
            * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos());
    }
    let num = (PI * t * (1.0 - beta)).sin() + 4.0 * beta * t * (PI * t * (1.0 + beta)).cos();
    let den = PI * t * (1.0 - (4.0 * beta * t).powi(2));
    num / den
}

/// Unit-energy RRC taps of length `span_symbols * samples_per_symbol + 1`.
pub fn rrc_taps(roll_off: f64, span_symbols: usize, samples_per_symbol: usize) -> Result<Vec<f64>> {
    if !(roll_off > 0.0 && roll_off <= 1.0) {
        return Err(Error::invalid("roll-off must lie in (0, 1]"));
    }
    if span_symbols < 8 {
        return Err(Error::invalid("RRC span must be at least 8 symbols"));
    }
    if samples_per_symbol < 2 {
        return Err(Error::invalid("samples per symbol must be at least 2"));
    }
    let half = (span_symbols * samples_per_symbol / 2) as isize;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|k| rrc_impulse(k as f64 / samples_per_symbol as f64, roll_off))
        .collect();
    let norm = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|t| *t /= norm);
    Ok(taps)
}

pub const DEFAULT_RRC_SPAN: usize = 64;

/// Pulse shaping parameters shared by transmitter and matched filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseShape {
    pub samples_per_symbol: usize,
    pub roll_off: f64,
    pub symbol_rate_hz: f64,
    pub span_symbols: usize,
}

impl Default for PulseShape {
    fn default() -> Self {
        PulseShape {
            samples_per_symbol: 8,
            roll_off: 0.1,
            symbol_rate_hz: 34.4e9,
            span_symbols: DEFAULT_RRC_SPAN,
        }
    }
}

impl PulseShape {
    pub fn sample_rate(&self) -> f64 {
        self.samples_per_symbol as f64 * self.symbol_rate_hz
    }

    pub fn taps(&self) -> Result<Vec<f64>> {
        rrc_taps(self.roll_off, self.span_symbols, self.samples_per_symbol)
    }
}

fn zero_stuff(symbols: &[Complex64], sps: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); symbols.len() * sps];
    for (k, &s) in symbols.iter().enumerate() {
        out[k * sps] = s;
    }
    out
}

/// Upsamples by zero stuffing, applies the RRC filter (circularly, the frame
/// is treated as periodic) and scales to the requested total launch power.
/// `launch_power_dbm = None` leaves the filter output unscaled.
pub fn shape_and_upsample(
    frame: &SymbolFrame,
    shape: &PulseShape,
    launch_power_dbm: Option<f64>,
) -> Result<DualPolWaveform> {
    let sps = shape.samples_per_symbol;
    if sps < 2 {
        return Err(Error::invalid("samples per symbol must be at least 2"));
    }
    if frame.is_empty() {
        return Err(Error::invalid("empty symbol frame"));
    }
    let taps = shape.taps()?;
    let mut x = zero_stuff(&frame.x_pol, sps);
    let mut y = zero_stuff(&frame.y_pol, sps);
    circular_filter(&mut x, &taps)?;
    circular_filter(&mut y, &taps)?;
    let mut wave = DualPolWaveform::new(x, y, shape.sample_rate())?;
    if let Some(dbm) = launch_power_dbm {
        let p = wave.mean_power();
        if p > 0.0 {
            wave.scale((dbm_to_watt(dbm) / p).sqrt());
        }
    }
    Ok(wave)
}

/// Random dual-polarization 16-QAM frame from Mersenne-twister bits.
pub fn random_frame(n_symbols: usize, seed: u64) -> Result<SymbolFrame> {
    let bits = random_bits(8 * n_symbols, seed)?;
    let syms = qam16_map(&bits)?;
    let (x, y) = syms.split_at(n_symbols);
    SymbolFrame::new(x.to_vec(), y.to_vec())
}

/// Dual-polarization 16-QAM frame from a PRBS of the given order.
pub fn prbs_frame(n_symbols: usize, order: u32, seed: u64) -> Result<SymbolFrame> {
    let bits = prbs_generate(order, seed, 8 * n_symbols)?;
    let syms = qam16_map(&bits)?;
    let (x, y) = syms.split_at(n_symbols);
    SymbolFrame::new(x.to_vec(), y.to_vec())
}

/// Frame bits in transmission order: x-pol words followed by y-pol words.
pub fn frame_bits(frame: &SymbolFrame) -> Vec<u8> {
    let mut bits = qam16_demap_hard(&frame.x_pol);
    bits.extend(qam16_demap_hard(&frame.y_pol));
    bits
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn all_words() -> Vec<[u8; 4]> {
        (0..16u8)
            .map(|w| [(w >> 3) & 1, (w >> 2) & 1, (w >> 1) & 1, w & 1])
            .collect()
    }

    #[test]
    fn prbs7_repeats_after_127() {
        let b = prbs_generate(7, 1, 254).unwrap();
        let s = b.as_slice();
        assert_eq!(&s[..127], &s[127..]);
    }

    #[test]
    fn prbs_period_is_maximal_up_to_order_20() {
        for order in 2..=20u32 {
            let mut lfsr = Lfsr::new(order, 1).unwrap();
            let start = lfsr.state();
            let mut period = 0u64;
            loop {
                lfsr.next_bit();
                period += 1;
                if lfsr.state() == start {
                    break;
                }
            }
            assert_eq!(period, (1u64 << order) - 1, "order {order}");
        }
    }

    #[test]
    fn prbs3_visits_every_nonzero_state() {
        // x^3 + x^2 + 1 from state 001: 001 -> 010 -> 101 -> 011 -> 111 -> 110 -> 100
        let mut lfsr = Lfsr::new(3, 1).unwrap();
        let mut states = vec![lfsr.state()];
        for _ in 0..6 {
            lfsr.next_bit();
            states.push(lfsr.state());
        }
        assert_eq!(states, vec![1, 2, 5, 3, 7, 6, 4]);
        let mut sorted = states.clone();
        sorted.sort();
        assert_eq!(sorted, (1..8).collect::<Vec<u64>>());
    }

    #[test]
    fn prbs32_has_no_short_period() {
        let b = prbs_generate(32, 1, 1 << 22).unwrap();
        let s = b.as_slice();
        // The register never returns to the seed within 2^22 clocks, so no
        // candidate period p <= 2^21 reproduces the first 4096 bits.
        let mut lfsr = Lfsr::new(32, 1).unwrap();
        for _ in 0..(1u64 << 22) {
            lfsr.next_bit();
            assert_ne!(lfsr.state(), 1);
        }
        assert_ne!(&s[..4096], &s[1 << 21..(1 << 21) + 4096]);
    }

    #[test]
    fn prbs_rejects_bad_args() {
        assert!(prbs_generate(1, 1, 10).is_err());
        assert!(prbs_generate(33, 1, 10).is_err());
        assert!(prbs_generate(7, 0, 10).is_err());
        assert!(prbs_generate(7, 128, 10).is_err());
    }

    #[test]
    fn corner_point_and_energy() {
        let corner = qam16_point([1, 0, 1, 0]);
        assert_relative_eq!(corner.re, 3.0 / 10f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(corner.im, 3.0 / 10f64.sqrt(), epsilon = 1e-15);
        let pts: Vec<_> = all_words().into_iter().map(qam16_point).collect();
        let e = pts.iter().map(|p| p.norm_sqr()).sum::<f64>() / 16.0;
        assert_relative_eq!(e, 1.0, epsilon = 1e-12);
        for i in 0..16 {
            for j in 0..i {
                assert!((pts[i] - pts[j]).norm() > 0.1);
            }
        }
    }

    #[test]
    fn gray_neighbours_differ_in_one_bit() {
        let words = all_words();
        let d_min = 2.0 / 10f64.sqrt();
        for a in &words {
            for b in &words {
                let d = (qam16_point(*a) - qam16_point(*b)).norm();
                if (d - d_min).abs() < 1e-9 {
                    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
                    assert_eq!(diff, 1, "{a:?} vs {b:?}");
                }
            }
        }
    }

    #[test]
    fn demap_inverts_map() {
        for w in all_words() {
            assert_eq!(qam16_decide(qam16_point(w)), w);
        }
        let cell = Complex64::new(0.4, 0.4) / 10f64.sqrt() * 2.0;
        assert_eq!(qam16_slice(cell), Complex64::new(1.0, 1.0) / 10f64.sqrt());
        assert!(BitSequence::new(vec![0, 1, 1]).map(|b| qam16_map(&b)).unwrap().is_err());
    }

    #[test]
    fn boundary_ties_go_to_lower_level() {
        let s = Complex64::new(0.0, 2.0 / 10f64.sqrt());
        let p = qam16_slice(s);
        assert_relative_eq!(p.re, -1.0 / 10f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(p.im, 1.0 / 10f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn rrc_center_and_symmetry() {
        let beta = 0.1;
        assert_relative_eq!(rrc_impulse(0.0, beta), 1.027_323_954_473_516, epsilon = 1e-12);
        let taps = rrc_taps(beta, 64, 8).unwrap();
        assert_eq!(taps.len() % 2, 1);
        let n = taps.len();
        for k in 0..n {
            assert_eq!(taps[k], taps[n - 1 - k]);
        }
        let e: f64 = taps.iter().map(|t| t * t).sum();
        assert_relative_eq!(e, 1.0, epsilon = 1e-12);
        // the singular point t = 1/(4 beta) is continuous
        let t0 = 1.0 / (4.0 * beta);
        assert_relative_eq!(rrc_impulse(t0, beta), rrc_impulse(t0 + 1e-7, beta), epsilon = 1e-5);
    }

    #[test]
    fn rrc_cascade_is_nyquist() {
        let sps = 8;
        let taps = rrc_taps(0.1, 64, sps).unwrap();
        let n = taps.len();
        let rc: Vec<f64> = (0..2 * n - 1)
            .map(|k| {
                (0..n)
                    .filter(|&j| k >= j && k - j < n)
                    .map(|j| taps[j] * taps[k - j])
                    .sum()
            })
            .collect();
        let c = n - 1;
        let peak = rc[c];
        let mut worst = 0f64;
        let mut m = sps;
        while m <= c {
            worst = worst.max((rc[c + m] / peak).abs());
            m += sps;
        }
        assert!(worst < 1e-3, "isi {worst}");
    }

    #[test]
    fn shaping_sets_rate_power_and_impulse() {
        let frame = random_frame(256, 3).unwrap();
        let shape = PulseShape::default();
        let w = shape_and_upsample(&frame, &shape, Some(2.0)).unwrap();
        assert_relative_eq!(w.sample_rate, 275.2e9, max_relative = 1e-12);
        assert_relative_eq!(w.mean_power(), 1.585e-3, max_relative = 5e-3);

        let mut x = vec![Complex64::new(0.0, 0.0); 256];
        x[100] = Complex64::new(1.0, 0.0);
        let single = SymbolFrame::new(x, vec![Complex64::new(0.0, 0.0); 256]).unwrap();
        let w = shape_and_upsample(&single, &shape, None).unwrap();
        let taps = shape.taps().unwrap();
        let half = taps.len() / 2;
        for (j, t) in taps.iter().enumerate() {
            let idx = 800 + j - half;
            assert!((w.x_pol[idx].re - t).abs() < 1e-12);
            assert!(w.x_pol[idx].im.abs() < 1e-12);
        }
    }

    #[test]
    fn shaping_is_linear() {
        let shape = PulseShape::default();
        let a = random_frame(128, 1).unwrap();
        let b = random_frame(128, 2).unwrap();
        let s = SymbolFrame::new(
            a.x_pol.iter().zip(&b.x_pol).map(|(p, q)| p * 2.0 + q).collect(),
            a.y_pol.iter().zip(&b.y_pol).map(|(p, q)| p * 2.0 + q).collect(),
        )
        .unwrap();
        let wa = shape_and_upsample(&a, &shape, None).unwrap();
        let wb = shape_and_upsample(&b, &shape, None).unwrap();
        let ws = shape_and_upsample(&s, &shape, None).unwrap();
        for k in 0..ws.len() {
            assert!((ws.x_pol[k] - (wa.x_pol[k] * 2.0 + wb.x_pol[k])).norm() < 1e-12);
            assert!((ws.y_pol[k] - (wa.y_pol[k] * 2.0 + wb.y_pol[k])).norm() < 1e-12);
        }
    }

    #[test]
    fn random_frame_is_deterministic_and_normalized() {
        let a = random_frame(4096, 9).unwrap();
        let b = random_frame(4096, 9).unwrap();
        assert_eq!(a, b);
        let e = a.x_pol.iter().chain(&a.y_pol).map(|s| s.norm_sqr()).sum::<f64>() / 8192.0;
        assert!((e - 1.0).abs() < 0.05);
    }
}
