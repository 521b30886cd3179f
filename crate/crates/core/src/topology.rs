//! Equalizer topology descriptions shared by the network builder, the
//! complexity calculator and the hyper-parameter search.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default window memory (symbols), input features and outputs.
pub const DEFAULT_N_S: usize = 41;
pub const DEFAULT_N_I: usize = 4;
pub const DEFAULT_N_O: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Tanh,
    Sigmoid,
    LeakyRelu { slope: f64 },
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
            Activation::LeakyRelu { slope } => {
                if z >= 0.0 {
                    z
                } else {
                    slope * z
                }
            }
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::LeakyRelu { slope } => {
                if z >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

/// Number of stored reservoir weights: `round(nr^2 * sparsity)`, halves up.
pub fn reservoir_nonzeros(nr: usize, sparsity: f64) -> usize {
    ((nr * nr) as f64 * sparsity + 0.5).floor() as usize
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Hidden-layer activations. Output layers are always linear.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Activations {
    pub dense: Activation,
    pub conv: Activation,
    pub reservoir: Activation,
}

impl Default for Activations {
    fn default() -> Self {
        Activations {
            dense: Activation::Tanh,
            conv: Activation::LeakyRelu { slope: 0.2 },
            reservoir: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    CnnBiLstm,
    BiLstm,
    Esn,
    CnnMlp,
    Mlp,
}

impl ArchKind {
    pub const ALL: [ArchKind; 5] = [
        ArchKind::CnnBiLstm,
        ArchKind::BiLstm,
        ArchKind::Esn,
        ArchKind::CnnMlp,
        ArchKind::Mlp,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ArchKind::CnnBiLstm => "cnn_bilstm",
            ArchKind::BiLstm => "bilstm",
            ArchKind::Esn => "esn",
            ArchKind::CnnMlp => "cnn_mlp",
            ArchKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '+', ' '], "_");
        ArchKind::ALL
            .into_iter()
            .find(|k| k.label() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown architecture '{s}'")))
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum Architecture {
    Mlp {
        n1: usize,
        n2: usize,
        n3: usize,
    },
    BiLstm {
        nh: usize,
    },
    Esn {
        nr: usize,
        sparsity: f64,
        leak: f64,
        spectral_radius: f64,
    },
    CnnMlp {
        nf: usize,
        nk: usize,
        n1: usize,
        n2: usize,
    },
    CnnBiLstm {
        nf: usize,
        nk: usize,
        nh: usize,
    },
}

impl Architecture {
    pub fn kind(&self) -> ArchKind {
        match self {
            Architecture::Mlp { .. } => ArchKind::Mlp,
            Architecture::BiLstm { .. } => ArchKind::BiLstm,
            Architecture::Esn { .. } => ArchKind::Esn,
            Architecture::CnnMlp { .. } => ArchKind::CnnMlp,
            Architecture::CnnBiLstm { .. } => ArchKind::CnnBiLstm,
        }
    }

    /// Reservoir with the leak rate and spectral radius used throughout.
    pub fn esn(nr: usize, sparsity: f64) -> Self {
        Architecture::Esn {
            nr,
            sparsity,
            leak: 0.57,
            spectral_radius: 0.667,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub arch: Architecture,
    pub n_s: usize,
    pub n_i: usize,
    pub n_o: usize,
    #[serde(default)]
    pub activations: Activations,
    /// Adds gate biases to the LSTM cells (they cost no multiplications).
    #[serde(default)]
    pub lstm_bias: bool,
}

impl TopologySpec {
    pub fn new(arch: Architecture) -> Self {
        TopologySpec {
            arch,
            n_s: DEFAULT_N_S,
            n_i: DEFAULT_N_I,
            n_o: DEFAULT_N_O,
            activations: Activations::default(),
            lstm_bias: false,
        }
    }

    pub fn with_memory(mut self, n_s: usize) -> Self {
        self.n_s = n_s;
        self
    }

    pub fn kind(&self) -> ArchKind {
        self.arch.kind()
    }

    /// Convolution output length for the unpadded, unit-stride layer.
    pub fn conv_out_len(&self) -> Option<usize> {
        match self.arch {
            Architecture::CnnMlp { nk, .. } | Architecture::CnnBiLstm { nk, .. } => {
                self.n_s.checked_sub(nk).map(|d| d + 1)
            }
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_s == 0 || self.n_i == 0 || self.n_o == 0 {
            return Err(Error::invalid("n_s, n_i and n_o must be positive"));
        }
        let positive = |v: &[usize]| v.iter().all(|&c| c >= 1);
        let ok = match self.arch {
            Architecture::Mlp { n1, n2, n3 } => positive(&[n1, n2, n3]),
            Architecture::BiLstm { nh } => nh >= 1,
            Architecture::Esn {
                nr,
                sparsity,
                leak,
                spectral_radius,
            } => {
                if !(0.0..=1.0).contains(&sparsity) {
                    return Err(Error::invalid("reservoir sparsity must lie in [0, 1]"));
                }
                if !(leak > 0.0 && leak <= 1.0) {
                    return Err(Error::invalid("leak rate must lie in (0, 1]"));
                }
                if !(spectral_radius >= 0.0 && spectral_radius.is_finite()) {
                    return Err(Error::invalid("spectral radius must be non-negative"));
                }
                nr >= 1
            }
            Architecture::CnnMlp { nf, nk, n1, n2 } => positive(&[nf, nk, n1, n2]),
            Architecture::CnnBiLstm { nf, nk, nh } => positive(&[nf, nk, nh]),
        };
        if !ok {
            return Err(Error::invalid("all layer sizes must be at least 1"));
        }
        if let Architecture::CnnMlp { nk, .. } | Architecture::CnnBiLstm { nk, .. } = self.arch {
            if nk > self.n_s {
                return Err(Error::invalid(format!(
                    "kernel size {nk} exceeds the window of {} symbols",
                    self.n_s
                )));
            }
        }
        Ok(())
    }

    /// Compact human-readable hyper-parameter list, e.g. `mlp(149,132,596)`.
    /// Compact form, e.g. `mlp(149,132,596)`; a non-default window adds
    /// `@n_s` and non-default ESN leak/radius extend the argument list.
    pub fn describe(&self) -> String {
        let inner = match self.arch {
            Architecture::Mlp { n1, n2, n3 } => format!("{n1},{n2},{n3}"),
            Architecture::BiLstm { nh } => format!("{nh}"),
            Architecture::Esn {
                nr,
                sparsity,
                leak,
                spectral_radius,
            } => {
                if Architecture::esn(nr, sparsity) == self.arch {
                    format!("{nr},{sparsity}")
                } else {
                    format!("{nr},{sparsity},{leak},{spectral_radius}")
                }
            }
            Architecture::CnnMlp { nf, nk, n1, n2 } => format!("{nf},{nk},{n1},{n2}"),
            Architecture::CnnBiLstm { nf, nk, nh } => format!("{nf},{nk},{nh}"),
        };
        let memory = if self.n_s == DEFAULT_N_S {
            String::new()
        } else {
            format!("@{}", self.n_s)
        };
        format!("{}({inner}){memory}", self.kind())
    }

    /// Delimiter-free identifier for CSV cells and file names, e.g.
    /// `mlp-149-132-596` or `mlp-170-170-300-m11`.
    pub fn tag(&self) -> String {
        self.describe()
            .replace(['(', ','], "-")
            .replace(')', "")
            .replace('@', "-m")
    }

    /// Inverse of [`describe`](Self::describe), with default input/output
    /// sizes and activations.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("cannot parse topology '{s}' (expected e.g. mlp(10,10,25)@41)"));
        let s = s.trim();
        let (body, n_s) = match s.split_once('@') {
            Some((b, m)) => (b, m.trim().parse::<usize>().map_err(|_| bad())?),
            None => (s, DEFAULT_N_S),
        };
        let (kind, rest) = body.split_once('(').ok_or_else(bad)?;
        let args = rest.strip_suffix(')').ok_or_else(bad)?;
        let kind = ArchKind::parse(kind.trim())?;
        let v: Vec<&str> = args.split(',').map(str::trim).collect();
        let int = |i: usize| v.get(i).and_then(|x| x.parse::<usize>().ok()).ok_or_else(bad);
        let real = |i: usize| v.get(i).and_then(|x| x.parse::<f64>().ok()).ok_or_else(bad);
        let (arch, n_args) = match kind {
            ArchKind::Mlp => (
                Architecture::Mlp {
                    n1: int(0)?,
                    n2: int(1)?,
                    n3: int(2)?,
                },
                3,
            ),
            ArchKind::BiLstm => (Architecture::BiLstm { nh: int(0)? }, 1),
            ArchKind::Esn if v.len() == 4 => (
                Architecture::Esn {
                    nr: int(0)?,
                    sparsity: real(1)?,
                    leak: real(2)?,
                    spectral_radius: real(3)?,
                },
                4,
            ),
            ArchKind::Esn => (Architecture::esn(int(0)?, real(1)?), 2),
            ArchKind::CnnMlp => (
                Architecture::CnnMlp {
                    nf: int(0)?,
                    nk: int(1)?,
                    n1: int(2)?,
                    n2: int(3)?,
                },
                4,
            ),
            ArchKind::CnnBiLstm => (
                Architecture::CnnBiLstm {
                    nf: int(0)?,
                    nk: int(1)?,
                    nh: int(2)?,
                },
                3,
            ),
        };
        if v.len() != n_args {
            return Err(bad());
        }
        let spec = TopologySpec::new(arch).with_memory(n_s);
        spec.validate()?;
        Ok(spec)
    }
}
