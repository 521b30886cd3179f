//! End-to-end experiment pipeline: simulate train/test frames, train
//! per-polarization equalizers, evaluate against the CDC baseline and run the
//! performance-versus-complexity sweep.
//!
//! Dataset files are a small binary container:
//!
//! ```text
//! b"FLDSET01" | u64 LE header length | header JSON | f64 LE payload
//! ```
//!
//! The payload holds, for the train frame then the test frame, the received
//! x and y symbols followed by the transmitted x and y symbols, each as
//! interleaved (re, im) pairs.
//!
//! CSV rows use the fixed column order
//! `topology,rmps,q_db,q_gain_db,ber,seed,epochs` with floats printed to six
//! significant digits.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{derive_seed, propagate_link, LinkConfig};
use crate::complexity::rmps;
use crate::dbp::{dbp_equalize, dbp_rmps, DbpConfig};
use crate::dsp::{random_frame, shape_and_upsample, DualPolWaveform, Polarization, PulseShape, SymbolFrame};
use crate::error::{Error, Result};
use crate::neuro::checkpoint::Checkpoint;
use crate::neuro::{train, window_dataset, window_inputs, EqualizerModel, TrainConfig, TrainReport};
use crate::receiver::{
    add_loading_noise, cdc_compensate, load_noise_to_target_q, matched_filter_downsample, metrics,
    normalize_and_align, EqualizedSymbols, PolSelection,
};
use crate::search::{preset, preset_for_budget, search, Budget, SearchResult, SearchSpace, Strategy};
use crate::topology::{ArchKind, TopologySpec};

pub const SCHEMA_VERSION: u32 = 1;
pub const DATASET_MAGIC: &[u8; 8] = b"FLDSET01";
pub const CSV_HEADER: [&str; 7] = ["topology", "rmps", "q_db", "q_gain_db", "ber", "seed", "epochs"];
pub const DEFAULT_BUDGETS: [f64; 6] = [1e3, 1e4, 1e5, 1e6, 1e7, 1e8];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TxConfig {
    pub symbol_rate_hz: f64,
    pub roll_off: f64,
    pub samples_per_symbol: usize,
    pub rrc_span_symbols: usize,
    pub n_train_symbols: usize,
    pub n_test_symbols: usize,
}

impl Default for TxConfig {
    fn default() -> Self {
        let s = PulseShape::default();
        TxConfig {
            symbol_rate_hz: s.symbol_rate_hz,
            roll_off: s.roll_off,
            samples_per_symbol: s.samples_per_symbol,
            rrc_span_symbols: s.span_symbols,
            n_train_symbols: 1 << 20,
            n_test_symbols: 1 << 18,
        }
    }
}

impl TxConfig {
    pub fn shape(&self) -> PulseShape {
        PulseShape {
            samples_per_symbol: self.samples_per_symbol,
            roll_off: self.roll_off,
            symbol_rate_hz: self.symbol_rate_hz,
            span_symbols: self.rrc_span_symbols,
        }
    }
}

/// What sits after CDC and matched filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EqualizerConfig {
    /// No further equalization.
    Cdc,
    Nn { topology: TopologySpec },
    Preset { label: String, arch: ArchKind },
    Dbp(DbpConfig),
}

impl EqualizerConfig {
    /// The NN topology, if this is a neural equalizer.
    pub fn topology(&self) -> Result<Option<TopologySpec>> {
        match self {
            EqualizerConfig::Nn { topology } => Ok(Some(*topology)),
            EqualizerConfig::Preset { label, arch } => preset(label, *arch).map(Some),
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMode {
    /// Fixed-complexity presets (one per budget decade).
    Preset,
    Random,
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub budgets: Vec<f64>,
    pub archs: Vec<ArchKind>,
    pub mode: SweepMode,
    pub n_trials: usize,
    pub budget_tolerance: f64,
    /// Range of the window half-width `N` explored by the search modes.
    pub search_half_width: (usize, usize),
    /// Reduced-scale training used to score search candidates.
    pub search_train: TrainConfig,
    /// Training symbols used while searching (`None`: the whole frame).
    pub search_train_symbols: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            budgets: DEFAULT_BUDGETS.to_vec(),
            archs: ArchKind::ALL.to_vec(),
            mode: SweepMode::Preset,
            n_trials: 20,
            budget_tolerance: 1.1,
            search_half_width: (1, 50),
            search_train: TrainConfig {
                max_epochs: 50,
                patience_epochs: 10,
                ..TrainConfig::default()
            },
            search_train_symbols: Some(1 << 16),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub link: LinkConfig,
    pub tx: TxConfig,
    pub equalizer: EqualizerConfig,
    pub train: TrainConfig,
    /// Extra Gaussian noise is loaded onto the CDC output until its Q
    /// matches this value.
    pub target_q_db: Option<f64>,
    pub data_seed: u64,
    /// Model seeds (one result per seed).
    pub seeds: Vec<u64>,
    pub polarizations: PolSelection,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            link: LinkConfig::default(),
            tx: TxConfig::default(),
            equalizer: EqualizerConfig::Preset {
                label: "Best".into(),
                arch: ArchKind::CnnBiLstm,
            },
            train: TrainConfig::default(),
            target_q_db: None,
            data_seed: 1,
            seeds: vec![1, 2, 3],
            polarizations: PolSelection::Both,
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(s).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.link.validate()?;
        let tx = &self.tx;
        if tx.samples_per_symbol < 2 || !(tx.symbol_rate_hz > 0.0) || !(0.0..=1.0).contains(&tx.roll_off) {
            return Err(Error::invalid("tx needs sps >= 2, a positive symbol rate and roll-off in [0, 1]"));
        }
        if tx.n_train_symbols == 0 || tx.n_test_symbols == 0 {
            return Err(Error::invalid("frames must contain symbols"));
        }
        self.train.validate()?;
        self.sweep.search_train.validate()?;
        if let Some(t) = self.equalizer.topology()? {
            t.validate()?;
        }
        if let EqualizerConfig::Dbp(d) = &self.equalizer {
            d.validate()?;
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.sweep.budgets.iter().any(|b| !(*b > 0.0)) || !(self.sweep.budget_tolerance >= 1.0) {
            return Err(Error::invalid("budgets must be positive and the tolerance at least 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        sha256_json(self)
    }

    /// Hash of the settings that determine the simulated frames.
    pub fn data_hash(&self) -> String {
        sha256_json(&(
            self.schema_version,
            &self.link,
            &self.tx,
            self.target_q_db,
            self.data_seed,
            self.polarizations,
        ))
    }
}

fn sha256_json<T: Serialize>(v: &T) -> String {
    let json = serde_json::to_string(v).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameRole {
    Train,
    Test,
}

impl FrameRole {
    pub fn seed(self, data_seed: u64) -> u64 {
        derive_seed(data_seed, if self == FrameRole::Train { 1 } else { 2 })
    }

    fn n_symbols(self, cfg: &ExperimentConfig) -> usize {
        match self {
            FrameRole::Train => cfg.tx.n_train_symbols,
            FrameRole::Test => cfg.tx.n_test_symbols,
        }
    }
}

/// Aligned received (after CDC) and transmitted symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub rx: EqualizedSymbols,
    pub tx: SymbolFrame,
}

impl Frames {
    pub fn len(&self) -> usize {
        self.tx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tx.is_empty()
    }

    pub fn slice(&self, r: std::ops::Range<usize>) -> Frames {
        Frames {
            rx: EqualizedSymbols {
                x_pol: self.rx.x_pol[r.clone()].to_vec(),
                y_pol: self.rx.y_pol[r.clone()].to_vec(),
            },
            tx: SymbolFrame {
                x_pol: self.tx.x_pol[r.clone()].to_vec(),
                y_pol: self.tx.y_pol[r].to_vec(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameInfo {
    pub n_symbols: usize,
    pub seed: u64,
    pub decimation_phase: usize,
    pub lag: isize,
    pub noise_seed: u64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub config_hash: String,
    pub data_hash: String,
    pub config: ExperimentConfig,
    pub train: FrameInfo,
    pub test: FrameInfo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub train: Frames,
    pub test: Frames,
}

/// Transmitted frame and the raw received waveform (before any DSP).
pub fn transmit(cfg: &ExperimentConfig, role: FrameRole) -> Result<(SymbolFrame, DualPolWaveform)> {
    let seed = role.seed(cfg.data_seed);
    let tx = random_frame(role.n_symbols(cfg), seed)?;
    let wave = shape_and_upsample(&tx, &cfg.tx.shape(), Some(cfg.link.launch_power_dbm))?;
    let rx = propagate_link(&wave, &cfg.link, derive_seed(seed, 3))?;
    Ok((tx, rx))
}

fn cdc_link(wave: &DualPolWaveform, link: &LinkConfig) -> DualPolWaveform {
    link.spans
        .iter()
        .fold(wave.clone(), |w, s| cdc_compensate(&w, s.length_km, s))
}

/// CDC, matched filter, alignment and optional noise loading of one frame.
pub fn simulate_frame(cfg: &ExperimentConfig, role: FrameRole) -> Result<(Frames, FrameInfo)> {
    let (tx, wave) = transmit(cfg, role)?;
    let (sym, phase) = matched_filter_downsample(&cdc_link(&wave, &cfg.link), &cfg.tx.shape(), None)?;
    let (mut rx, align) = normalize_and_align(&sym, &tx)?;
    let seed = role.seed(cfg.data_seed);
    let noise_seed = derive_seed(seed, 4);
    let mut noise_sigma = 0.0;
    if let Some(q) = cfg.target_q_db {
        (rx, noise_sigma) = load_noise_to_target_q(&rx, &tx, q, noise_seed, cfg.polarizations)?;
    }
    let info = FrameInfo {
        n_symbols: tx.len(),
        seed,
        decimation_phase: phase,
        lag: align.lag,
        noise_seed,
        noise_sigma,
    };
    Ok((Frames { rx, tx }, info))
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (train, ti) = simulate_frame(cfg, FrameRole::Train)?;
    let (test, si) = simulate_frame(cfg, FrameRole::Test)?;
    Ok(Dataset {
        header: DatasetHeader {
            config_hash: cfg.hash(),
            data_hash: cfg.data_hash(),
            config: cfg.clone(),
            train: ti,
            test: si,
        },
        train,
        test,
    })
}

fn put_symbols(buf: &mut Vec<u8>, v: &[Complex64]) {
    for s in v {
        buf.extend_from_slice(&s.re.to_le_bytes());
        buf.extend_from_slice(&s.im.to_le_bytes());
    }
}

fn take_symbols(data: &[u8], pos: &mut usize, n: usize) -> Result<Vec<Complex64>> {
    let end = *pos + 16 * n;
    let bytes = data
        .get(*pos..end)
        .ok_or_else(|| Error::invalid("dataset payload is truncated"))?;
    *pos = end;
    Ok(bytes
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                f64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
            )
        })
        .collect())
}

impl Dataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let n = self.train.len() + self.test.len();
        let mut buf = Vec::with_capacity(16 + header.len() + 64 * n);
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for f in [&self.train, &self.test] {
            for v in [&f.rx.x_pol, &f.rx.y_pol, &f.tx.x_pol, &f.tx.y_pol] {
                put_symbols(&mut buf, v);
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.len() < 16 || &data[..8] != DATASET_MAGIC {
            return Err(Error::invalid("not a dataset file"));
        }
        let hlen = u64::from_le_bytes(data[8..16].try_into().expect("8 bytes")) as usize;
        let hbytes = data
            .get(16..16 + hlen)
            .ok_or_else(|| Error::invalid("dataset header is truncated"))?;
        let header: DatasetHeader = serde_json::from_slice(hbytes)?;
        let mut pos = 16 + hlen;
        let mut frames = |n: usize| -> Result<Frames> {
            let rx = EqualizedSymbols::new(take_symbols(data, &mut pos, n)?, take_symbols(data, &mut pos, n)?)?;
            let tx = SymbolFrame::new(take_symbols(data, &mut pos, n)?, take_symbols(data, &mut pos, n)?)?;
            Ok(Frames { rx, tx })
        };
        let train = frames(header.train.n_symbols)?;
        let test = frames(header.test.n_symbols)?;
        if pos != data.len() {
            return Err(Error::invalid("trailing bytes after the dataset payload"));
        }
        Ok(Dataset { header, train, test })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut data = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut data)?;
        Self::from_bytes(&data)
    }
}

/// Independent models, one per equalized polarization.
#[derive(Debug, Clone)]
pub struct TrainedEqualizer {
    pub models: Vec<(Polarization, EqualizerModel)>,
    /// Per-polarization training reports; empty after [`load`](Self::load).
    pub reports: Vec<TrainReport>,
    pub seed: u64,
    pub epochs: usize,
}

pub const EQUALIZER_SET_FORMAT: &str = "fiberlab-equalizer-set";

#[derive(Serialize, Deserialize)]
struct EqualizerSet {
    format: String,
    version: u32,
    seed: u64,
    epochs: usize,
    models: Vec<(Polarization, Checkpoint)>,
}

impl TrainedEqualizer {
    pub fn spec(&self) -> TopologySpec {
        self.models[0].1.spec
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let set = EqualizerSet {
            format: EQUALIZER_SET_FORMAT.into(),
            version: 1,
            seed: self.seed,
            epochs: self.epochs,
            models: self.models.iter().map(|(p, m)| (*p, Checkpoint::from_model(m))).collect(),
        };
        std::fs::write(path, serde_json::to_string(&set)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let set: EqualizerSet = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if set.format != EQUALIZER_SET_FORMAT || set.version != 1 || set.models.is_empty() {
            return Err(Error::invalid("not an equalizer file"));
        }
        let models = set
            .models
            .into_iter()
            .map(|(p, c)| Ok((p, c.into_model()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainedEqualizer {
            models,
            reports: Vec::new(),
            seed: set.seed,
            epochs: set.epochs,
        })
    }
}

fn half_width(spec: &TopologySpec) -> Result<usize> {
    if spec.n_s % 2 == 0 {
        return Err(Error::invalid("window memory n_s must be odd (2N + 1)"));
    }
    Ok(spec.n_s / 2)
}

fn pol_index(p: Polarization) -> u64 {
    match p {
        Polarization::X => 0,
        Polarization::Y => 1,
    }
}

/// Trains one model per selected polarization; all randomness follows `seed`.
pub fn train_equalizer(
    spec: TopologySpec,
    frames: &Frames,
    cfg: &TrainConfig,
    seed: u64,
    sel: PolSelection,
) -> Result<TrainedEqualizer> {
    let n = half_width(&spec)?;
    let mut models = Vec::new();
    let mut reports = Vec::new();
    for &pol in sel.pols() {
        let data = window_dataset(&frames.rx, &frames.tx, n, pol)?;
        let s = derive_seed(seed, pol_index(pol));
        let mut model = EqualizerModel::new(spec, s)?;
        let tc = TrainConfig {
            seed: derive_seed(s, 1),
            ..*cfg
        };
        reports.push(train(&mut model, &data, &tc)?);
        models.push((pol, model));
    }
    let epochs = reports.iter().map(|r| r.epochs_run).max().unwrap_or(0);
    Ok(TrainedEqualizer {
        models,
        reports,
        seed,
        epochs,
    })
}

/// Q factor, BER and gain over the CDC output on the same symbols.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub q_db: f64,
    pub ber: f64,
    pub cdc_q_db: f64,
    pub q_gain_db: f64,
}

fn score(eq: &EqualizedSymbols, cdc: &EqualizedSymbols, tx: &SymbolFrame, sel: PolSelection) -> Score {
    let m = metrics(eq, tx, sel);
    let c = metrics(cdc, tx, sel);
    Score {
        q_db: m.q_factor_db,
        ber: m.ber,
        cdc_q_db: c.q_factor_db,
        q_gain_db: gain(m.q_factor_db, c.q_factor_db),
    }
}

fn gain(q: f64, base: f64) -> f64 {
    if q == base {
        0.0
    } else {
        q - base
    }
}

/// Applies the equalizer to `frames`. Symbols within `N` of the frame edges
/// lack a full window and are excluded from both the equalized and the CDC
/// figures.
pub fn evaluate_nn(eq: &TrainedEqualizer, frames: &Frames, sel: PolSelection) -> Result<Score> {
    let n = half_width(&eq.spec())?;
    let inputs = window_inputs(&frames.rx, n)?;
    let b = inputs.len_of(ndarray::Axis(0));
    let flat = inputs
        .into_shape_with_order((b, eq.spec().n_s * eq.spec().n_i))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let trimmed = frames.slice(n..n + b);
    let mut out = trimmed.rx.clone();
    for &pol in sel.pols() {
        let (_, model) = eq
            .models
            .iter()
            .find(|(p, _)| *p == pol)
            .ok_or_else(|| Error::invalid(format!("no model for polarization {pol:?}")))?;
        let pred = model.predict_flat(flat.view())?;
        *out.pol_mut(pol) = pred.rows().into_iter().map(|r| Complex64::new(r[0], r[1])).collect();
    }
    Ok(score(&out, &trimmed.rx, &trimmed.tx, sel))
}

/// Re-simulates the test waveform, applies DBP and the same loading noise
/// as the stored CDC frame, and scores against that frame.
pub fn evaluate_dbp(data: &Dataset, dbp: &DbpConfig) -> Result<Score> {
    let cfg = &data.header.config;
    let (tx, wave) = transmit(cfg, FrameRole::Test)?;
    if tx != data.test.tx {
        return Err(Error::invalid("dataset does not match its configuration"));
    }
    let sym = dbp_equalize(&wave, &cfg.link, dbp, &cfg.tx.shape())?;
    let (rx, _) = normalize_and_align(&sym, &tx)?;
    let info = &data.header.test;
    let rx = if info.noise_sigma > 0.0 {
        add_loading_noise(&rx, info.noise_sigma, info.noise_seed)
    } else {
        rx
    };
    Ok(score(&rx, &data.test.rx, &tx, cfg.polarizations))
}

pub fn dbp_complexity(cfg: &ExperimentConfig, dbp: &DbpConfig) -> Result<f64> {
    dbp_rmps(
        cfg.link.n_spans(),
        dbp.steps_per_span,
        dbp.n_fft,
        dbp.oversampling,
        cfg.tx.symbol_rate_hz,
        &cfg.link.spans[0],
        cfg.link.carrier_freq_hz(),
    )
}

/// One output row; see the module docs for the CSV layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub topology: String,
    pub rmps: u64,
    #[serde(with = "extended_float")]
    pub q_db: f64,
    #[serde(with = "extended_float")]
    pub q_gain_db: f64,
    pub ber: f64,
    pub seed: u64,
    pub epochs: usize,
}

impl MetricsRow {
    pub fn new(topology: String, rmps: u64, s: &Score, seed: u64, epochs: usize) -> Self {
        MetricsRow {
            topology,
            rmps,
            q_db: s.q_db,
            q_gain_db: s.q_gain_db,
            ber: s.ber,
            seed,
            epochs,
        }
    }

    fn record(&self) -> [String; 7] {
        [
            self.topology.clone(),
            self.rmps.to_string(),
            fmt_sig6(self.q_db),
            fmt_sig6(self.q_gain_db),
            fmt_sig6(self.ber),
            self.seed.to_string(),
            self.epochs.to_string(),
        ]
    }
}

/// JSON has no infinities; error-free frames have `Q = inf`, so non-finite
/// values travel as strings.
mod extended_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v)
        } else {
            Repr::Text(super::fmt_sig6(*v))
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// `%g`-style formatting with six significant digits.
pub fn fmt_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let strip = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip(mant), exp.abs())
    } else {
        strip(&format!("{:.*}", (5 - exp) as usize, x))
    }
}

pub fn write_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

/// Appends rows to `path`, writing the header only when the file is new
/// or empty.
pub fn append_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let fresh = file.metadata()?.len() == 0;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(CSV_HEADER)?;
    }
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[MetricsRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::invalid(e.to_string()))
}

/// Gnuplot script plotting log10(RMpS) against Q gain, one curve per
/// architecture, from the sweep CSV.
pub fn gnuplot_script(csv_file: &str, archs: &[ArchKind]) -> String {
    let mut s = String::from(
        "set datafile separator ','\nset key top left\nset grid\n\
         set xlabel 'log10(RMpS)'\nset ylabel 'Q-factor gain [dB]'\n",
    );
    let curves: Vec<String> = archs
        .iter()
        .map(|a| {
            format!(
                "\"< awk -F, '$1 ~ /^{a}-/' {csv_file} | sort -t, -k2,2n\" using (log10($2)):4 with linespoints title '{a}'"
            )
        })
        .collect();
    s.push_str("plot ");
    s.push_str(&curves.join(", \\\n     "));
    s.push('\n');
    s
}

/// A sweep cell: one (budget, architecture, seed) combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepCell {
    pub budget: f64,
    pub arch: ArchKind,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepStats {
    pub computed: usize,
    pub cached: usize,
}

pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for &budget in &cfg.sweep.budgets {
        for &arch in &cfg.sweep.archs {
            for &seed in &cfg.seeds {
                cells.push(SweepCell { budget, arch, seed });
            }
        }
    }
    cells
}

fn cell_key(config_hash: &str, cell: &SweepCell) -> String {
    let id = format!("{config_hash}|{}|{}|{}", cell.budget, cell.arch, cell.seed);
    hex::encode(Sha256::digest(id.as_bytes()))
}

/// Searches `arch` topologies on the head of the training frame. Each
/// trial is trained with `cfg.sweep.search_train` on the first
/// `search_train_symbols` symbols and scored by Q on the validation tail of
/// that slice; the per-trial scores are returned alongside the history.
pub fn search_topology(
    cfg: &ExperimentConfig,
    data: &Dataset,
    arch: ArchKind,
    budget: Option<Budget>,
    strategy: Strategy,
    n_trials: usize,
    seed: u64,
) -> Result<(SearchResult, Vec<Score>)> {
    let sel = cfg.polarizations;
    let n_sym = cfg.sweep.search_train_symbols.unwrap_or(usize::MAX).min(data.train.len());
    let frames = data.train.slice(0..n_sym);
    let n_val = ((n_sym as f64) * cfg.sweep.search_train.validation_fraction).ceil() as usize;
    let val = frames.slice(n_sym - n_val.clamp(1, n_sym)..n_sym);
    let mut scores = Vec::new();
    let objective = |spec: &TopologySpec, seed: u64| {
        let eq = train_equalizer(*spec, &frames, &cfg.sweep.search_train, seed, sel)?;
        let s = evaluate_nn(&eq, &val, sel)?;
        scores.push(s);
        Ok((s.q_db, eq.epochs))
    };
    let space = SearchSpace {
        half_width: cfg.sweep.search_half_width,
        ..SearchSpace::new(arch)
    };
    let result = search(&space, objective, budget, strategy, n_trials, seed)?;
    Ok((result, scores))
}

/// Picks (preset or search) a topology for the cell, trains it at full
/// scale and scores it on the test frame.
pub fn run_cell(cfg: &ExperimentConfig, data: &Dataset, cell: &SweepCell) -> Result<MetricsRow> {
    let spec = match cfg.sweep.mode {
        SweepMode::Preset => preset_for_budget(cell.arch, cell.budget)?,
        mode => {
            let strategy = if mode == SweepMode::Random {
                Strategy::Random
            } else {
                Strategy::Surrogate
            };
            let budget = Budget {
                rmps: cell.budget,
                tolerance: cfg.sweep.budget_tolerance,
            };
            search_topology(cfg, data, cell.arch, Some(budget), strategy, cfg.sweep.n_trials, cell.seed)?
                .0
                .best
                .spec
        }
    };
    let eq = train_equalizer(spec, &data.train, &cfg.train, cell.seed, cfg.polarizations)?;
    let s = evaluate_nn(&eq, &data.test, cfg.polarizations)?;
    Ok(MetricsRow::new(spec.tag(), rmps(&spec)?.total, &s, cell.seed, eq.epochs))
}

/// Runs every cell not already in the cache (`jobs` worker threads, each
/// cell single-threaded) and returns all rows in cell order.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    data: &Dataset,
    cache_dir: Option<&Path>,
    jobs: usize,
) -> Result<(Vec<MetricsRow>, SweepStats)> {
    cfg.validate()?;
    if data.header.data_hash != cfg.data_hash() {
        return Err(Error::invalid("dataset was generated with different link or transmitter settings"));
    }
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir)?;
    }
    let hash = cfg.hash();
    let cells = sweep_cells(cfg);
    let cache_path = |c: &SweepCell| -> Option<PathBuf> { cache_dir.map(|d| d.join(format!("{}.json", cell_key(&hash, c)))) };

    let mut rows: Vec<Option<MetricsRow>> = vec![None; cells.len()];
    let mut stats = SweepStats::default();
    for (i, c) in cells.iter().enumerate() {
        if let Some(p) = cache_path(c).filter(|p| p.exists()) {
            rows[i] = Some(serde_json::from_str(&std::fs::read_to_string(p)?)?);
            stats.cached += 1;
        }
    }
    let todo: Vec<usize> = (0..cells.len()).filter(|&i| rows[i].is_none()).collect();
    stats.computed = todo.len();

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<MetricsRow>)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, todo.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&i) = todo.get(k) else { break };
                let r = run_cell(cfg, data, &cells[i]);
                results.lock().expect("no poisoned workers").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("no poisoned workers");
    results.sort_by_key(|r| r.0);
    for (i, r) in results {
        let row = r?;
        if let Some(p) = cache_path(&cells[i]) {
            std::fs::write(p, serde_json::to_string(&row)?)?;
        }
        rows[i] = Some(row);
    }
    Ok((rows.into_iter().map(|r| r.expect("every cell resolved")).collect(), stats))
}
