//! LSTM cells (no peepholes) with back-propagation through time, and the
//! bidirectional wrapper.
//!
//! Gate pre-activations are packed as `[input | forget | output | candidate]`
//! column blocks of width `n_h`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};
use rand_mt::Mt64;

use super::layers::{accumulate_bias_grad, add_bias};
use super::params::{Layout, MulCounter, Slot};
use crate::topology::sigmoid;

/// One LSTM direction over a window of `n_t` steps.
///
/// The hidden state of step `t` is written to columns
/// `t * stride + offset .. + n_h` of the output, which lets two directions
/// share one interleaved `(n_t, 2 n_h)` output without copies.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub n_t: usize,
    pub n_i: usize,
    pub n_h: usize,
    pub wx: Slot,
    pub wh: Slot,
    pub b: Option<Slot>,
    pub reverse: bool,
    stride: usize,
    offset: usize,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    /// Activated gates per processing step, `(batch, 4 n_h)`.
    gates: Vec<Array2<f64>>,
    /// Cell state after each processing step.
    c: Vec<Array2<f64>>,
    /// `tanh` of the cell state after each processing step.
    tc: Vec<Array2<f64>>,
}

impl Lstm {
    pub fn new(layout: &mut Layout, n_t: usize, n_i: usize, n_h: usize, bias: bool, reverse: bool) -> Self {
        Lstm {
            n_t,
            n_i,
            n_h,
            wx: layout.alloc(n_i, 4 * n_h),
            wh: layout.alloc(n_h, 4 * n_h),
            b: bias.then(|| layout.alloc(1, 4 * n_h)),
            reverse,
            stride: n_h,
            offset: 0,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.n_t * self.stride
    }

    pub fn init(&self, p: &mut [f64], rng: &mut Mt64) {
        self.wx.glorot(p, self.n_i, 4 * self.n_h, rng);
        self.wh.glorot(p, self.n_h, 4 * self.n_h, rng);
        if let Some(b) = self.b {
            b.slice_mut(p).fill(0.0);
        }
    }

    fn time_index(&self, step: usize) -> usize {
        if self.reverse {
            self.n_t - 1 - step
        } else {
            step
        }
    }

    fn out_cols(&self, t: usize) -> std::ops::Range<usize> {
        let start = t * self.stride + self.offset;
        start..start + self.n_h
    }

    /// One cell update for a batch: returns `(h_t, C_t, gates)`.
    pub fn step(
        &self,
        p: &[f64],
        x_t: ArrayView2<f64>,
        h_prev: ArrayView2<f64>,
        c_prev: ArrayView2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let nh = self.n_h;
        let mut z = x_t.dot(&self.wx.view(p));
        general_mat_mul(1.0, &h_prev, &self.wh.view(p), 1.0, &mut z);
        if let Some(b) = self.b {
            add_bias(&mut z, b.slice(p));
        }
        let batch = z.nrows();
        let mut h = Array2::zeros((batch, nh));
        let mut c = Array2::zeros((batch, nh));
        for r in 0..batch {
            let zr = z.row_mut(r).into_slice().expect("contiguous gates");
            for v in &mut zr[..3 * nh] {
                *v = sigmoid(*v);
            }
            for v in &mut zr[3 * nh..] {
                *v = v.tanh();
            }
            for j in 0..nh {
                let (i, f, o, g) = (zr[j], zr[nh + j], zr[2 * nh + j], zr[3 * nh + j]);
                let cv = f * c_prev[[r, j]] + i * g;
                c[[r, j]] = cv;
                h[[r, j]] = o * cv.tanh();
            }
        }
        (h, c, z)
    }

    fn run(&self, p: &[f64], x: ArrayView2<f64>, out: &mut ArrayViewMut2<f64>, keep: bool) -> Option<LstmCache> {
        let batch = x.nrows();
        let mut h = Array2::zeros((batch, self.n_h));
        let mut c = Array2::zeros((batch, self.n_h));
        let mut cache = keep.then(|| LstmCache {
            gates: Vec::with_capacity(self.n_t),
            c: Vec::with_capacity(self.n_t),
            tc: Vec::with_capacity(self.n_t),
        });
        for step in 0..self.n_t {
            let t = self.time_index(step);
            let x_t = x.slice(s![.., t * self.n_i..(t + 1) * self.n_i]);
            let (h_new, c_new, gates) = self.step(p, x_t, h.view(), c.view());
            out.slice_mut(s![.., self.out_cols(t)]).assign(&h_new);
            if let Some(cache) = cache.as_mut() {
                cache.tc.push(c_new.mapv(f64::tanh));
                cache.gates.push(gates);
                cache.c.push(c_new.clone());
            }
            h = h_new;
            c = c_new;
        }
        cache
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.out_dim()));
        self.run(p, x, &mut out.view_mut(), false);
        out
    }

    pub fn forward_train(&self, p: &[f64], x: ArrayView2<f64>) -> (Array2<f64>, LstmCache) {
        let mut out = Array2::zeros((x.nrows(), self.out_dim()));
        let cache = self.run(p, x, &mut out.view_mut(), true).expect("cache");
        (out, cache)
    }

    pub fn backward(
        &self,
        p: &[f64],
        x: ArrayView2<f64>,
        cache: &LstmCache,
        dy: ArrayView2<f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        let mut dx = Array2::zeros(x.raw_dim());
        self.backward_into(p, x, cache, dy, grads, Some(&mut dx));
        dx
    }

    /// Back-propagation through time. `dy` holds the loss gradient with
    /// respect to this direction's output columns; `dx` (when given) is
    /// accumulated into.
    fn backward_into(
        &self,
        p: &[f64],
        x: ArrayView2<f64>,
        cache: &LstmCache,
        dy: ArrayView2<f64>,
        grads: &mut [f64],
        mut dx: Option<&mut Array2<f64>>,
    ) {
        let nh = self.n_h;
        let batch = x.nrows();
        let wx = self.wx.view(p);
        let wh = self.wh.view(p);
        let zero = Array2::zeros((batch, nh));
        let mut dh_next = Array2::<f64>::zeros((batch, nh));
        let mut dc_next = Array2::<f64>::zeros((batch, nh));
        let mut dz = Array2::<f64>::zeros((batch, 4 * nh));
        for step in (0..self.n_t).rev() {
            let t = self.time_index(step);
            let gates = &cache.gates[step];
            let tc = &cache.tc[step];
            let c_prev = if step > 0 { &cache.c[step - 1] } else { &zero };
            let dy_t = dy.slice(s![.., self.out_cols(t)]);
            for r in 0..batch {
                let g = gates.row(r);
                for j in 0..nh {
                    let (i, f, o, cand) = (g[j], g[nh + j], g[2 * nh + j], g[3 * nh + j]);
                    let dh = dy_t[[r, j]] + dh_next[[r, j]];
                    let tcv = tc[[r, j]];
                    let d_o = dh * tcv;
                    let dc = dh * o * (1.0 - tcv * tcv) + dc_next[[r, j]];
                    dc_next[[r, j]] = dc * f;
                    dz[[r, j]] = dc * cand * i * (1.0 - i);
                    dz[[r, nh + j]] = dc * c_prev[[r, j]] * f * (1.0 - f);
                    dz[[r, 2 * nh + j]] = d_o * o * (1.0 - o);
                    dz[[r, 3 * nh + j]] = dc * i * (1.0 - cand * cand);
                }
            }
            let x_t = x.slice(s![.., t * self.n_i..(t + 1) * self.n_i]);
            general_mat_mul(1.0, &x_t.t(), &dz, 1.0, &mut self.wx.view_mut(grads));
            if step > 0 {
                // Previous hidden state, rebuilt as o * tanh(C).
                let mut h_prev = cache.tc[step - 1].clone();
                h_prev.zip_mut_with(&cache.gates[step - 1].slice(s![.., 2 * nh..3 * nh]), |a, &o| *a *= o);
                general_mat_mul(1.0, &h_prev.t(), &dz, 1.0, &mut self.wh.view_mut(grads));
            }
            if let Some(b) = self.b {
                accumulate_bias_grad(b.slice_mut(grads), &dz);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let mut dst = dx.slice_mut(s![.., t * self.n_i..(t + 1) * self.n_i]);
                general_mat_mul(1.0, &dz, &wx.t(), 1.0, &mut dst);
            }
            dh_next = dz.dot(&wh.t());
        }
    }

    pub fn forward_counted(&self, p: &[f64], x: &[f64], c: &mut MulCounter, out: &mut [f64]) {
        let nh = self.n_h;
        let mut h = vec![0.0; nh];
        let mut cell = vec![0.0; nh];
        let bias = self.b.map(|b| b.slice(p));
        for step in 0..self.n_t {
            let t = self.time_index(step);
            let mut z = c.vec_mat(&x[t * self.n_i..(t + 1) * self.n_i], self.wx.slice(p), 4 * nh);
            let zh = c.vec_mat(&h, self.wh.slice(p), 4 * nh);
            for (k, v) in z.iter_mut().enumerate() {
                *v += zh[k] + bias.map_or(0.0, |b| b[k]);
            }
            for j in 0..nh {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[nh + j]);
                let o = sigmoid(z[2 * nh + j]);
                let g = z[3 * nh + j].tanh();
                cell[j] = c.mul(f, cell[j]) + c.mul(i, g);
                h[j] = c.mul(o, cell[j].tanh());
            }
            out[self.out_cols(t)].copy_from_slice(&h);
        }
    }
}

/// Forward and time-reversed LSTM whose hidden states are concatenated per
/// step into `(n_t, 2 n_h)` and flattened.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

#[derive(Debug, Clone)]
pub struct BiLstmCache {
    x: Array2<f64>,
    fwd: LstmCache,
    bwd: LstmCache,
}

impl BiLstm {
    pub fn new(layout: &mut Layout, n_t: usize, n_i: usize, n_h: usize, bias: bool) -> Self {
        let mut fwd = Lstm::new(layout, n_t, n_i, n_h, bias, false);
        let mut bwd = Lstm::new(layout, n_t, n_i, n_h, bias, true);
        fwd.stride = 2 * n_h;
        bwd.stride = 2 * n_h;
        bwd.offset = n_h;
        BiLstm { fwd, bwd }
    }

    pub fn out_dim(&self) -> usize {
        self.fwd.out_dim()
    }

    pub fn init(&self, p: &mut [f64], rng: &mut Mt64) {
        self.fwd.init(p, rng);
        self.bwd.init(p, rng);
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.out_dim()));
        self.fwd.run(p, x, &mut out.view_mut(), false);
        self.bwd.run(p, x, &mut out.view_mut(), false);
        out
    }

    pub fn forward_train(&self, p: &[f64], x: Array2<f64>) -> (Array2<f64>, BiLstmCache) {
        let mut out = Array2::zeros((x.nrows(), self.out_dim()));
        let fwd = self.fwd.run(p, x.view(), &mut out.view_mut(), true).expect("cache");
        let bwd = self.bwd.run(p, x.view(), &mut out.view_mut(), true).expect("cache");
        (out, BiLstmCache { x, fwd, bwd })
    }

    pub fn backward(
        &self,
        p: &[f64],
        cache: &BiLstmCache,
        dy: Array2<f64>,
        grads: &mut [f64],
        want_dx: bool,
    ) -> Option<Array2<f64>> {
        let mut dx = want_dx.then(|| Array2::zeros(cache.x.raw_dim()));
        self.fwd
            .backward_into(p, cache.x.view(), &cache.fwd, dy.view(), grads, dx.as_mut());
        self.bwd
            .backward_into(p, cache.x.view(), &cache.bwd, dy.view(), grads, dx.as_mut());
        dx
    }

    pub fn forward_counted(&self, p: &[f64], x: &[f64], c: &mut MulCounter) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim()];
        self.fwd.forward_counted(p, x, c, &mut out);
        self.bwd.forward_counted(p, x, c, &mut out);
        out
    }
}
