//! Real multiplications per recovered symbol (RMpS) of the equalizer
//! topologies, evaluated exactly in integers.
//!
//! Term names follow the usual layer-by-layer decomposition: `a*` terms
//! belong to the input-facing layer, `b*` to intermediate layers and `c*`
//! to the output stage. Bias additions and activation functions are free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{reservoir_nonzeros, Architecture, TopologySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmpsReport {
    pub topology: TopologySpec,
    pub total: u64,
    pub breakdown: Vec<(String, u64)>,
}

impl RmpsReport {
    fn new(topology: TopologySpec, terms: &[(&str, u64)]) -> Self {
        RmpsReport {
            topology,
            total: terms.iter().map(|t| t.1).sum(),
            breakdown: terms.iter().map(|(n, v)| (n.to_string(), *v)).collect(),
        }
    }
}

/// Configuration of a general 1-D convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub n_i: usize,
    pub n_f: usize,
    pub n_k: usize,
    pub n_s: usize,
    pub padding: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl ConvLayerSpec {
    pub fn new(n_i: usize, n_f: usize, n_k: usize, n_s: usize) -> Self {
        ConvLayerSpec {
            n_i,
            n_f,
            n_k,
            n_s,
            padding: 0,
            dilation: 1,
            stride: 1,
        }
    }

    /// Output length `floor((n_s + 2 pad - dil (n_k - 1) - 1) / stride + 1)`.
    pub fn out_len(&self) -> Result<u64> {
        if self.stride == 0 || self.dilation == 0 || self.n_k == 0 {
            return Err(Error::invalid("stride, dilation and kernel size must be positive"));
        }
        let span = self.dilation * (self.n_k - 1) + 1;
        let padded = self.n_s + 2 * self.padding;
        if span > padded {
            return Err(Error::invalid(format!(
                "kernel spans {span} samples but the padded input has {padded}"
            )));
        }
        Ok(((padded - span) / self.stride + 1) as u64)
    }
}

/// Multiplications of one convolution layer: `n_i n_f n_k L_out`.
pub fn cnn_layer_rmps(spec: &ConvLayerSpec) -> Result<u64> {
    Ok((spec.n_i * spec.n_f * spec.n_k) as u64 * spec.out_len()?)
}

fn bilstm_terms(n_s: u64, n_i: u64, n_h: u64, n_o: u64) -> [u64; 3] {
    [
        2 * n_s * n_h * 4 * n_i,
        2 * n_s * n_h * (4 * n_h + 3),
        2 * n_s * n_h * n_o,
    ]
}

pub fn rmps(spec: &TopologySpec) -> Result<RmpsReport> {
    spec.validate()?;
    let (ns, ni, no) = (spec.n_s as u64, spec.n_i as u64, spec.n_o as u64);
    let report = match spec.arch {
        Architecture::Mlp { n1, n2, n3 } => {
            let (n1, n2, n3) = (n1 as u64, n2 as u64, n3 as u64);
            RmpsReport::new(
                *spec,
                &[
                    ("a1", ns * ni * n1),
                    ("b1", n1 * n2),
                    ("b2", n2 * n3),
                    ("c1", n3 * no),
                ],
            )
        }
        Architecture::BiLstm { nh } => {
            let [a, b, c] = bilstm_terms(ns, ni, nh as u64, no);
            RmpsReport::new(*spec, &[("a2", a), ("b3", b), ("c2", c)])
        }
        Architecture::Esn { nr, sparsity, .. } => {
            let nnz = reservoir_nonzeros(nr, sparsity) as u64;
            let nr = nr as u64;
            RmpsReport::new(
                *spec,
                &[
                    ("a3", ns * ni * nr),
                    ("b4", ns * (nnz + 2 * nr)),
                    ("c3", ns * nr * no),
                ],
            )
        }
        Architecture::CnnMlp { nf, nk, n1, n2 } => {
            let conv = cnn_layer_rmps(&ConvLayerSpec::new(spec.n_i, nf, nk, spec.n_s))?;
            let l = ConvLayerSpec::new(spec.n_i, nf, nk, spec.n_s).out_len()?;
            let (nf, n1, n2) = (nf as u64, n1 as u64, n2 as u64);
            RmpsReport::new(
                *spec,
                &[
                    ("a4", conv),
                    ("b5", l * nf * n1),
                    ("b6", n1 * n2),
                    ("c4", n2 * no),
                ],
            )
        }
        Architecture::CnnBiLstm { nf, nk, nh } => {
            let cs = ConvLayerSpec::new(spec.n_i, nf, nk, spec.n_s);
            let conv = cnn_layer_rmps(&cs)?;
            let [a, b, c] = bilstm_terms(cs.out_len()?, nf as u64, nh as u64, no);
            RmpsReport::new(*spec, &[("a5", conv), ("b7", a + b), ("c5", c)])
        }
    };
    Ok(report)
}

pub fn within_budget(spec: &TopologySpec, budget: f64) -> bool {
    rmps(spec).map(|r| (r.total as f64) <= budget).unwrap_or(false)
}

/// Formats like `1.2E+05`, rounding the exact integer to `digits`
/// significant figures with ties to even (as C's `%.*E` does).
pub fn sci_notation(value: u64, digits: usize) -> String {
    assert!(digits >= 1, "at least one significant digit");
    let width = value.max(1).to_string().len();
    let mut exp = width as i32 - 1;
    let mut mant = if width > digits {
        let div = 10u64.pow((width - digits) as u32);
        let (q, r) = (value / div, value % div);
        if 2 * r > div || (2 * r == div && q % 2 == 1) {
            q + 1
        } else {
            q
        }
    } else {
        value * 10u64.pow((digits - width) as u32)
    };
    if mant == 10u64.pow(digits as u32) {
        mant /= 10;
        exp += 1;
    }
    let m = format!("{mant:0digits$}");
    let (lead, rest) = m.split_at(1);
    let frac = if rest.is_empty() { String::new() } else { format!(".{rest}") };
    format!("{lead}{frac}E+{exp:02}")
}
