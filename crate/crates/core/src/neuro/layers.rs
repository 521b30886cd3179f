//! Dense and 1-D convolution layers on batched row-major activations.
//!
//! Every layer consumes and produces `(batch, features)` matrices; sequence
//! layers interpret a row as `(steps, channels)` in row-major order.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};
use rand_mt::Mt64;

use super::params::{Layout, MulCounter, Slot};
use crate::topology::Activation;

pub(crate) fn add_bias(z: &mut Array2<f64>, b: &[f64]) {
    for mut row in z.rows_mut() {
        for (v, bi) in row.iter_mut().zip(b) {
            *v += bi;
        }
    }
}

pub(crate) fn accumulate_bias_grad(g: &mut [f64], dz: &Array2<f64>) {
    for row in dz.rows() {
        for (gi, d) in g.iter_mut().zip(row) {
            *gi += d;
        }
    }
}

/// Fully connected layer `a = act(x W + b)`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Slot,
    pub b: Option<Slot>,
    pub act: Activation,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    x: Array2<f64>,
    z: Array2<f64>,
}

impl Dense {
    pub fn new(layout: &mut Layout, n_in: usize, n_out: usize, bias: bool, act: Activation) -> Self {
        Dense {
            n_in,
            n_out,
            w: layout.alloc(n_in, n_out),
            b: bias.then(|| layout.alloc(1, n_out)),
            act,
        }
    }

    pub fn init(&self, p: &mut [f64], rng: &mut Mt64) {
        self.w.glorot(p, self.n_in, self.n_out, rng);
        if let Some(b) = self.b {
            b.slice_mut(p).fill(0.0);
        }
    }

    fn pre_activation(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.w.view(p));
        if let Some(b) = self.b {
            add_bias(&mut z, b.slice(p));
        }
        z
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let act = self.act;
        let mut z = self.pre_activation(p, x);
        if act != Activation::Linear {
            z.mapv_inplace(|v| act.apply(v));
        }
        z
    }

    pub fn forward_train(&self, p: &[f64], x: Array2<f64>) -> (Array2<f64>, DenseCache) {
        let z = self.pre_activation(p, x.view());
        let act = self.act;
        let a = z.mapv(|v| act.apply(v));
        (a, DenseCache { x, z })
    }

    pub fn backward(
        &self,
        p: &[f64],
        cache: &DenseCache,
        mut dy: Array2<f64>,
        grads: &mut [f64],
        want_dx: bool,
    ) -> Option<Array2<f64>> {
        if self.act != Activation::Linear {
            let act = self.act;
            dy.zip_mut_with(&cache.z, |d, &z| *d *= act.derivative(z));
        }
        general_mat_mul(1.0, &cache.x.t(), &dy, 1.0, &mut self.w.view_mut(grads));
        if let Some(b) = self.b {
            accumulate_bias_grad(b.slice_mut(grads), &dy);
        }
        want_dx.then(|| dy.dot(&self.w.view(p).t()))
    }

    pub fn forward_counted(&self, p: &[f64], x: &[f64], c: &mut MulCounter) -> Vec<f64> {
        let mut z = c.vec_mat(x, self.w.slice(p), self.n_out);
        if let Some(b) = self.b {
            for (v, bi) in z.iter_mut().zip(b.slice(p)) {
                *v += bi;
            }
        }
        z.iter_mut().for_each(|v| *v = self.act.apply(*v));
        z
    }
}

/// Unpadded, unit-stride, unit-dilation 1-D convolution over a window of
/// `n_s` steps with `n_i` channels, producing `n_s - n_k + 1` steps of
/// `n_f` filters. Implemented as im2col followed by one matrix product.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub n_s: usize,
    pub n_i: usize,
    pub n_f: usize,
    pub n_k: usize,
    /// `(n_k * n_i, n_f)`; row index is `k * n_i + channel`.
    pub w: Slot,
    pub b: Slot,
    pub act: Activation,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    z: Array2<f64>,
}

impl Conv1d {
    pub fn new(layout: &mut Layout, n_s: usize, n_i: usize, n_f: usize, n_k: usize, act: Activation) -> Self {
        assert!(n_k >= 1 && n_k <= n_s, "kernel must fit in the window");
        Conv1d {
            n_s,
            n_i,
            n_f,
            n_k,
            w: layout.alloc(n_k * n_i, n_f),
            b: layout.alloc(1, n_f),
            act,
        }
    }

    pub fn out_len(&self) -> usize {
        self.n_s - self.n_k + 1
    }

    pub fn out_dim(&self) -> usize {
        self.out_len() * self.n_f
    }

    pub fn init(&self, p: &mut [f64], rng: &mut Mt64) {
        self.w.glorot(p, self.n_k * self.n_i, self.n_k * self.n_f, rng);
        self.b.slice_mut(p).fill(0.0);
    }

    fn im2col(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let l = self.out_len();
        let k = self.n_k * self.n_i;
        let mut cols = Array2::zeros((x.nrows() * l, k));
        for (bi, row) in x.rows().into_iter().enumerate() {
            for t in 0..l {
                let src = row.slice(s![t * self.n_i..t * self.n_i + k]);
                cols.row_mut(bi * l + t).assign(&src);
            }
        }
        cols
    }

    fn pre_activation(&self, p: &[f64], cols: &Array2<f64>) -> Array2<f64> {
        let mut z = cols.dot(&self.w.view(p));
        add_bias(&mut z, self.b.slice(p));
        z
    }

    fn fold(&self, a: Array2<f64>, batch: usize) -> Array2<f64> {
        a.into_shape_with_order((batch, self.out_dim()))
            .expect("conv output is contiguous")
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let cols = self.im2col(x);
        let act = self.act;
        let mut z = self.pre_activation(p, &cols);
        z.mapv_inplace(|v| act.apply(v));
        self.fold(z, x.nrows())
    }

    pub fn forward_train(&self, p: &[f64], x: Array2<f64>) -> (Array2<f64>, ConvCache) {
        let cols = self.im2col(x.view());
        let z = self.pre_activation(p, &cols);
        let act = self.act;
        let a = self.fold(z.mapv(|v| act.apply(v)), x.nrows());
        (a, ConvCache { cols, z })
    }

    pub fn backward(
        &self,
        p: &[f64],
        cache: &ConvCache,
        dy: Array2<f64>,
        grads: &mut [f64],
        want_dx: bool,
    ) -> Option<Array2<f64>> {
        let batch = dy.nrows();
        let l = self.out_len();
        let mut dz = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((batch * l, self.n_f))
            .expect("conv gradient is contiguous");
        let act = self.act;
        dz.zip_mut_with(&cache.z, |d, &z| *d *= act.derivative(z));
        general_mat_mul(1.0, &cache.cols.t(), &dz, 1.0, &mut self.w.view_mut(grads));
        accumulate_bias_grad(self.b.slice_mut(grads), &dz);
        if !want_dx {
            return None;
        }
        let dcols = dz.dot(&self.w.view(p).t());
        let k = self.n_k * self.n_i;
        let mut dx = Array2::zeros((batch, self.n_s * self.n_i));
        for (bi, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
            for t in 0..l {
                let mut dst = row.slice_mut(s![t * self.n_i..t * self.n_i + k]);
                dst += &dcols.row(bi * l + t);
            }
        }
        Some(dx)
    }

    pub fn forward_counted(&self, p: &[f64], x: &[f64], c: &mut MulCounter) -> Vec<f64> {
        let k = self.n_k * self.n_i;
        let b = self.b.slice(p);
        let mut out = Vec::with_capacity(self.out_dim());
        for t in 0..self.out_len() {
            let window = &x[t * self.n_i..t * self.n_i + k];
            let z = c.vec_mat(window, self.w.slice(p), self.n_f);
            out.extend(z.iter().zip(b).map(|(v, bi)| self.act.apply(v + bi)));
        }
        out
    }
}
