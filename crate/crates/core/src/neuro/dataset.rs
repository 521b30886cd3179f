use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::dsp::{Polarization, SymbolFrame};
use crate::error::{Error, Result};
use crate::receiver::EqualizedSymbols;

/// Sliding windows of `M = 2N + 1` received symbols with four features per
/// symbol, `(Re x, Im x, Re y, Im y)`, and the transmitted center symbol of
/// one polarization as the target.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    /// `(B, M, 4)`.
    pub inputs: Array3<f64>,
    /// `(B, 2)`: real and imaginary part.
    pub targets: Array2<f64>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn memory(&self) -> usize {
        self.inputs.len_of(Axis(1))
    }

    /// Inputs flattened to `(B, M * 4)`, step-major.
    pub fn flat_inputs(&self) -> ArrayView2<'_, f64> {
        let (b, m, f) = self.inputs.dim();
        self.inputs
            .view()
            .into_shape_with_order((b, m * f))
            .expect("dataset inputs are contiguous")
    }

    /// Windows `range`, copied.
    pub fn slice(&self, range: std::ops::Range<usize>) -> WindowedDataset {
        WindowedDataset {
            inputs: self.inputs.slice(ndarray::s![range.clone(), .., ..]).to_owned(),
            targets: self.targets.slice(ndarray::s![range, ..]).to_owned(),
        }
    }
}

/// Windowed inputs only, `(len - 2N, 2N + 1, 4)`.
pub fn window_inputs(rx: &EqualizedSymbols, n: usize) -> Result<Array3<f64>> {
    if n == 0 {
        return Err(Error::invalid("window half-width N must be at least 1"));
    }
    let len = rx.len();
    if len <= 2 * n {
        return Err(Error::invalid(format!(
            "frame of {len} symbols is too short for windows of {} symbols",
            2 * n + 1
        )));
    }
    let m = 2 * n + 1;
    let b = len - 2 * n;
    let (x, y) = (rx.pol(Polarization::X), rx.pol(Polarization::Y));
    let mut inputs = Array3::zeros((b, m, 4));
    for k in 0..b {
        for j in 0..m {
            let (sx, sy) = (x[k + j], y[k + j]);
            inputs[[k, j, 0]] = sx.re;
            inputs[[k, j, 1]] = sx.im;
            inputs[[k, j, 2]] = sy.re;
            inputs[[k, j, 3]] = sy.im;
        }
    }
    Ok(inputs)
}

/// Window `k` covers received symbols `k..k + 2N + 1` and targets the
/// transmitted symbol `k + N`; edge symbols without full context are dropped.
pub fn window_dataset(rx: &EqualizedSymbols, tx: &SymbolFrame, n: usize, pol: Polarization) -> Result<WindowedDataset> {
    if rx.len() != tx.len() {
        return Err(Error::invalid("received and transmitted frames differ in length"));
    }
    let inputs = window_inputs(rx, n)?;
    let b = inputs.len_of(Axis(0));
    let t = tx.pol(pol);
    let targets = Array2::from_shape_fn((b, 2), |(k, c)| {
        let s = t[k + n];
        if c == 0 {
            s.re
        } else {
            s.im
        }
    });
    Ok(WindowedDataset { inputs, targets })
}
