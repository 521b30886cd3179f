//! Hyper-parameter search over one architecture family, optionally under a
//! real-multiplication budget, plus the reference topology presets.
//!
//! Candidates live in a unit cube; integer sizes map log-uniformly onto
//! their range (so small-budget regions are reachable), continuous
//! parameters linearly. The `Surrogate` strategy fits a Gaussian process to
//! the observed scores and picks the next candidate by expected improvement
//! over a random pool.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_mt::Mt64;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::channel::derive_seed;
use crate::complexity::rmps;
use crate::error::{Error, Result};
use crate::topology::{ArchKind, Architecture, TopologySpec};

const MAX_DRAWS: usize = 200_000;
const POOL_SIZE: usize = 512;
const LOCAL_POOL: usize = 64;
/// Scores above this (e.g. infinite Q of an error-free frame) are clipped
/// before they reach the surrogate.
const SCORE_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub arch: ArchKind,
    /// Window half-width `N`; the memory is `2N + 1`.
    pub half_width: (usize, usize),
    pub nf: (usize, usize),
    pub nk: (usize, usize),
    pub nh: (usize, usize),
    pub n1: (usize, usize),
    pub n2: (usize, usize),
    pub n3: (usize, usize),
    pub nr: (usize, usize),
    pub sparsity: (f64, f64),
    pub leak: (f64, f64),
    pub spectral_radius: (f64, f64),
}

#[derive(Debug, Clone, Copy)]
enum Dim {
    Int(usize, usize),
    Real(f64, f64),
}

impl Dim {
    fn decode_int(self, u: f64) -> usize {
        match self {
            Dim::Int(lo, hi) => {
                let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
                ((a + u.clamp(0.0, 1.0) * (b - a)).exp().round() as usize).clamp(lo, hi)
            }
            Dim::Real(..) => unreachable!(),
        }
    }

    fn decode_real(self, u: f64) -> f64 {
        match self {
            Dim::Real(lo, hi) => lo + u.clamp(0.0, 1.0) * (hi - lo),
            Dim::Int(..) => unreachable!(),
        }
    }
}

impl SearchSpace {
    /// Full ranges for one architecture family.
    pub fn new(arch: ArchKind) -> Self {
        SearchSpace {
            arch,
            half_width: (1, 50),
            nf: (1, 1000),
            nk: (1, 20),
            nh: (1, 1000),
            n1: (1, 1000),
            n2: (1, 1000),
            n3: (1, 1000),
            nr: (1, 1000),
            sparsity: (0.0, 1.0),
            leak: (0.0, 1.0),
            spectral_radius: (0.0, 1.0),
        }
    }

    /// Fixes the window half-width.
    pub fn with_half_width(mut self, n: usize) -> Self {
        self.half_width = (n, n);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ints = [
            self.half_width,
            self.nf,
            self.nk,
            self.nh,
            self.n1,
            self.n2,
            self.n3,
            self.nr,
        ];
        if ints.iter().any(|&(lo, hi)| lo == 0 || lo > hi) {
            return Err(Error::invalid("integer ranges need 1 <= lo <= hi"));
        }
        let reals = [self.sparsity, self.leak, self.spectral_radius];
        if reals.iter().any(|&(lo, hi)| !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi)) {
            return Err(Error::invalid("real ranges must lie in [0, 1] with lo <= hi"));
        }
        Ok(())
    }

    fn dims(&self) -> Vec<Dim> {
        let i = |r: (usize, usize)| Dim::Int(r.0, r.1);
        let f = |r: (f64, f64)| Dim::Real(r.0, r.1);
        let mut d = vec![i(self.half_width)];
        match self.arch {
            ArchKind::Mlp => d.extend([i(self.n1), i(self.n2), i(self.n3)]),
            ArchKind::BiLstm => d.push(i(self.nh)),
            ArchKind::Esn => d.extend([i(self.nr), f(self.sparsity), f(self.leak), f(self.spectral_radius)]),
            ArchKind::CnnMlp => d.extend([i(self.nf), i(self.nk), i(self.n1), i(self.n2)]),
            ArchKind::CnnBiLstm => d.extend([i(self.nf), i(self.nk), i(self.nh)]),
        }
        d
    }

    pub fn n_dims(&self) -> usize {
        self.dims().len()
    }

    /// Maps a unit-cube point to a topology (which may still be invalid,
    /// e.g. a kernel longer than the window).
    pub fn decode(&self, u: &[f64]) -> TopologySpec {
        let d = self.dims();
        let int = |k: usize| d[k].decode_int(u[k]);
        let real = |k: usize| d[k].decode_real(u[k]);
        let arch = match self.arch {
            ArchKind::Mlp => Architecture::Mlp {
                n1: int(1),
                n2: int(2),
                n3: int(3),
            },
            ArchKind::BiLstm => Architecture::BiLstm { nh: int(1) },
            ArchKind::Esn => Architecture::Esn {
                nr: int(1),
                sparsity: real(2),
                leak: real(3),
                spectral_radius: real(4),
            },
            ArchKind::CnnMlp => Architecture::CnnMlp {
                nf: int(1),
                nk: int(2),
                n1: int(3),
                n2: int(4),
            },
            ArchKind::CnnBiLstm => Architecture::CnnBiLstm {
                nf: int(1),
                nk: int(2),
                nh: int(3),
            },
        };
        TopologySpec::new(arch).with_memory(2 * int(0) + 1)
    }
}

/// RMpS budget: a candidate is admitted when `rmps <= tolerance * rmps_limit`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub rmps: f64,
    pub tolerance: f64,
}

impl Budget {
    pub fn new(rmps: f64) -> Self {
        Budget { rmps, tolerance: 1.1 }
    }

    pub fn admits(&self, spec: &TopologySpec) -> bool {
        crate::complexity::within_budget(spec, self.rmps * self.tolerance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub spec: TopologySpec,
    pub rmps: u64,
    /// Validation Q factor in dB (higher is better).
    pub score: f64,
    pub seed: u64,
    pub epochs_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Trial,
    pub history: Vec<Trial>,
}

impl SearchResult {
    /// Best score seen after each trial.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.history
            .iter()
            .scan(f64::NEG_INFINITY, |b, t| {
                *b = b.max(t.score);
                Some(*b)
            })
            .collect()
    }
}

/// Outcome of evaluating one candidate: score and epochs used.
pub type Evaluation = (f64, usize);

fn feasible(space: &SearchSpace, u: &[f64], budget: Option<&Budget>) -> Option<TopologySpec> {
    let spec = space.decode(u);
    spec.validate().ok()?;
    match budget {
        Some(b) if !b.admits(&spec) => None,
        _ => Some(spec),
    }
}

fn draw(space: &SearchSpace, budget: Option<&Budget>, rng: &mut Mt64) -> Result<(Vec<f64>, TopologySpec)> {
    let d = space.n_dims();
    for _ in 0..MAX_DRAWS {
        let u: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        if let Some(spec) = feasible(space, &u, budget) {
            return Ok((u, spec));
        }
    }
    Err(Error::Infeasible(format!(
        "no {} candidate within the budget after {MAX_DRAWS} draws",
        space.arch
    )))
}

/// Runs `n_trials` evaluations. `objective(spec, seed)` must be
/// deterministic given its seed; trial `k` receives `derive_seed(seed, k)`.
pub fn search<F>(
    space: &SearchSpace,
    mut objective: F,
    budget: Option<Budget>,
    strategy: Strategy,
    n_trials: usize,
    seed: u64,
) -> Result<SearchResult>
where
    F: FnMut(&TopologySpec, u64) -> Result<Evaluation>,
{
    space.validate()?;
    if n_trials == 0 {
        return Err(Error::invalid("need at least one trial"));
    }
    let budget = budget.as_ref();
    let mut rng = Mt64::seed_from_u64(seed);
    let n_init = match strategy {
        Strategy::Random => n_trials,
        Strategy::Surrogate => n_trials.min(space.n_dims() + 3),
    };
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(n_trials);
    let mut history: Vec<Trial> = Vec::with_capacity(n_trials);
    for k in 0..n_trials {
        let (u, spec) = if k < n_init {
            draw(space, budget, &mut rng)?
        } else {
            propose(space, budget, &points, &history, &mut rng)?
        };
        let trial_seed = derive_seed(seed, k as u64);
        let (score, epochs_used) = objective(&spec, trial_seed)?;
        if score.is_nan() {
            return Err(Error::numerical(format!("objective returned NaN for {}", spec.describe())));
        }
        history.push(Trial {
            rmps: rmps(&spec)?.total,
            spec,
            score,
            seed: trial_seed,
            epochs_used,
        });
        points.push(u);
    }
    let best = history
        .iter()
        .fold(None::<&Trial>, |b, t| match b {
            Some(b) if b.score >= t.score => Some(b),
            _ => Some(t),
        })
        .expect("at least one trial")
        .clone();
    Ok(SearchResult { best, history })
}

fn propose(
    space: &SearchSpace,
    budget: Option<&Budget>,
    points: &[Vec<f64>],
    history: &[Trial],
    rng: &mut Mt64,
) -> Result<(Vec<f64>, TopologySpec)> {
    let y: Vec<f64> = history.iter().map(|t| t.score.clamp(-SCORE_CAP, SCORE_CAP)).collect();
    let gp = GaussianProcess::fit(points, &y)?;
    let best_idx = (0..y.len()).max_by(|&a, &b| y[a].total_cmp(&y[b])).expect("history");
    let y_best = y[best_idx];
    let seen: Vec<TopologySpec> = history.iter().map(|t| t.spec).collect();

    let mut pool = Vec::with_capacity(POOL_SIZE + LOCAL_POOL);
    for _ in 0..POOL_SIZE {
        pool.push(draw(space, budget, rng)?);
    }
    let jitter = Normal::new(0.0, 0.05).expect("valid sigma");
    for _ in 0..LOCAL_POOL {
        let u: Vec<f64> = points[best_idx]
            .iter()
            .map(|v| (v + jitter.sample(rng)).clamp(0.0, 1.0))
            .collect();
        if let Some(spec) = feasible(space, &u, budget) {
            pool.push((u, spec));
        }
    }
    let mut best: Option<(f64, usize)> = None;
    for (i, (u, spec)) in pool.iter().enumerate() {
        if seen.contains(spec) {
            continue;
        }
        let ei = gp.expected_improvement(u, y_best);
        if best.is_none_or(|(b, _)| ei > b) {
            best = Some((ei, i));
        }
    }
    match best {
        Some((_, i)) => Ok(pool.swap_remove(i)),
        None => Ok(pool.swap_remove(0)),
    }
}

/// Zero-mean GP with a squared-exponential kernel on standardized targets.
/// The length scale is picked from a small grid by marginal likelihood.
struct GaussianProcess {
    x: Vec<Vec<f64>>,
    alpha: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    length: f64,
    mean: f64,
    scale: f64,
}

const NOISE: f64 = 1e-6;

fn sq_exp(a: &[f64], b: &[f64], length: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
    (-0.5 * d2 / (length * length)).exp()
}

impl GaussianProcess {
    fn fit(x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let n = y.len();
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
        let yz = DVector::from_iterator(n, y.iter().map(|v| (v - mean) / scale));
        let mut best: Option<(f64, GaussianProcess)> = None;
        for length in [0.05, 0.1, 0.2, 0.4, 0.8] {
            let k = DMatrix::from_fn(n, n, |i, j| {
                sq_exp(&x[i], &x[j], length) + if i == j { NOISE } else { 0.0 }
            });
            let Some(chol) = k.cholesky() else { continue };
            let alpha = chol.solve(&yz);
            let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
            let lml = -0.5 * yz.dot(&alpha) - 0.5 * log_det;
            if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                best = Some((
                    lml,
                    GaussianProcess {
                        x: x.to_vec(),
                        alpha,
                        chol,
                        length,
                        mean,
                        scale,
                    },
                ));
            }
        }
        best.map(|b| b.1)
            .ok_or_else(|| Error::numerical("surrogate kernel matrix is not positive definite"))
    }

    fn predict(&self, u: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| sq_exp(xi, u, self.length)));
        let mu = k.dot(&self.alpha);
        let v = self.chol.solve(&k);
        let var = (1.0 + NOISE - k.dot(&v)).max(1e-12);
        (self.mean + self.scale * mu, self.scale * var.sqrt())
    }

    fn expected_improvement(&self, u: &[f64], y_best: f64) -> f64 {
        let (mu, sigma) = self.predict(u);
        let xi = 0.01 * self.scale;
        let imp = mu - y_best - xi;
        let z = imp / sigma;
        let cdf = 0.5 * erfc(-z / std::f64::consts::SQRT_2);
        let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        imp * cdf + sigma * pdf
    }
}

/// One reference topology with the complexity printed for it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PresetTopology {
    pub label: &'static str,
    pub spec: TopologySpec,
    pub printed_rmps: &'static str,
}

/// Labels in preset order: the searched optimum, then six complexity levels.
pub const PRESET_LABELS: [&str; 7] = [
    "Best",
    "Topology 1",
    "Topology 2",
    "Topology 3",
    "Topology 4",
    "Topology 5",
    "Topology 6",
];

/// The 35 reference topologies (7 levels x 5 architectures).
pub fn preset_topologies() -> Vec<PresetTopology> {
    use Architecture::*;
    type Row = (usize, usize, usize, &'static str);
    // Per level: CNN+biLSTM (nf, nk, nh), biLSTM nh, ESN nr, CNN+MLP (nf, nk, n1, n2), MLP (n1, n2, n3).
    let cnn_bilstm: [Row; 7] = [
        (244, 10, 226, "2.7E+07"),
        (1, 10, 1, "2.1E+03"),
        (5, 10, 3, "1.3E+04"),
        (20, 10, 10, "1.1E+05"),
        (50, 10, 41, "1.0E+06"),
        (244, 10, 108, "1.0E+07"),
        (400, 10, 455, "1.0E+08"),
    ];
    let bilstm: [(usize, &str); 7] = [
        (226, "1.7E+07"),
        (1, "2.0E+03"),
        (4, "1.2E+04"),
        (16, "1.1E+05"),
        (53, "1.0E+06"),
        (172, "1.0E+07"),
        (550, "1.0E+08"),
    ];
    let esn: [(usize, &str); 7] = [
        (88, "8.6E+04"),
        (6, "2.2E+03"),
        (22, "1.1E+04"),
        (100, "1.1E+05"),
        (350, "1.0E+06"),
        (1150, "1.0E+07"),
        (3660, "1.0E+08"),
    ];
    let cnn_mlp: [(usize, usize, usize, usize, &str); 7] = [
        (470, 10, 456, 467, "7.7E+06"),
        (2, 5, 10, 10, "2.3E+03"),
        (9, 5, 12, 30, "1.1E+04"),
        (50, 9, 30, 100, "1.1E+05"),
        (300, 10, 70, 200, "1.1E+06"),
        (600, 12, 500, 500, "1.0E+07"),
        (1000, 10, 2900, 2200, "1.0E+08"),
    ];
    let mlp: [Row; 7] = [
        (149, 132, 596, "1.2E+05"),
        (10, 10, 25, "2.0E+03"),
        (40, 40, 80, "1.1E+04"),
        (170, 170, 300, "1.1E+05"),
        (600, 600, 900, "1.0E+06"),
        (2100, 2100, 2500, "1.0E+07"),
        (7050, 7050, 7000, "1.0E+08"),
    ];
    let mut out = Vec::with_capacity(35);
    for (lvl, label) in PRESET_LABELS.iter().enumerate() {
        let (nf, nk, nh, p) = cnn_bilstm[lvl];
        out.push((label, CnnBiLstm { nf, nk, nh }, p));
        out.push((label, BiLstm { nh: bilstm[lvl].0 }, bilstm[lvl].1));
        out.push((label, Architecture::esn(esn[lvl].0, 0.18), esn[lvl].1));
        let (nf, nk, n1, n2, p) = cnn_mlp[lvl];
        out.push((label, CnnMlp { nf, nk, n1, n2 }, p));
        let (n1, n2, n3, p) = mlp[lvl];
        out.push((label, Mlp { n1, n2, n3 }, p));
    }
    out.into_iter()
        .map(|(label, arch, printed_rmps)| PresetTopology {
            label,
            spec: TopologySpec::new(arch),
            printed_rmps,
        })
        .collect()
}

/// Looks up a preset by label (case-insensitive; `T3` is accepted for
/// `Topology 3`) and architecture.
pub fn preset(label: &str, arch: ArchKind) -> Result<TopologySpec> {
    let norm = label.trim().to_ascii_lowercase();
    let norm = match norm.strip_prefix('t') {
        Some(d) if d.len() == 1 && d.chars().all(|c| c.is_ascii_digit()) => format!("topology {d}"),
        _ => norm.replace(['_', '-'], " "),
    };
    preset_topologies()
        .into_iter()
        .find(|p| p.label.to_ascii_lowercase() == norm && p.spec.kind() == arch)
        .map(|p| p.spec)
        .ok_or_else(|| Error::invalid(format!("no preset '{label}' for {arch}")))
}

/// The fixed-complexity preset whose level corresponds to a budget decade
/// (`Topology k` for `10^(k+2)`).
pub fn preset_for_budget(arch: ArchKind, budget: f64) -> Result<TopologySpec> {
    let decade = budget.log10().round() as i64;
    if !(3..=8).contains(&decade) || (budget.log10() - decade as f64).abs() > 1e-9 {
        return Err(Error::invalid(format!("no preset level for budget {budget:e}")));
    }
    preset(PRESET_LABELS[(decade - 2) as usize], arch)
}
