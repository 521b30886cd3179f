//! Leaky echo-state network with a frozen sparse reservoir and a linear
//! readout fitted by ridge regression.

use nalgebra::DMatrix;
use ndarray::{s, Array2, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_mt::Mt64;

use super::params::{Layout, MulCounter, Slot};
use crate::error::{Error, Result};
use crate::topology::{reservoir_nonzeros, Activation};

const POWER_ITERATIONS: usize = 50;

/// The reservoir part of the equalizer. Its output is the whole state
/// sequence `[s_1 | s_2 | ... | s_{n_t}]` (time-major), which a linear
/// readout layer maps to the symbol estimate; the readout therefore costs
/// `n_t * n_r * n_o` multiplications, one `n_r x n_o` block per step.
#[derive(Debug, Clone)]
pub struct Esn {
    pub n_t: usize,
    pub n_i: usize,
    pub n_r: usize,
    pub leak: f64,
    pub act: Activation,
    pub spectral_radius: f64,
    pub sparsity: f64,
    /// `(n_i, n_r)` input weights.
    pub w_in: Slot,
    /// Values of the stored reservoir entries, aligned with `w_r_index`.
    pub w_r: Slot,
    /// `(row, col)` of each stored reservoir entry, sorted.
    pub w_r_index: Vec<(u32, u32)>,
}

impl Esn {
    /// The sparsity mask is drawn here, from `mask_seed`, so that a model can
    /// be rebuilt from its spec and seed alone.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layout: &mut Layout,
        n_t: usize,
        n_i: usize,
        n_r: usize,
        sparsity: f64,
        leak: f64,
        spectral_radius: f64,
        act: Activation,
        mask_seed: u64,
    ) -> Self {
        let nnz = reservoir_nonzeros(n_r, sparsity).min(n_r * n_r);
        let mut rng = Mt64::seed_from_u64(mask_seed);
        let mut w_r_index: Vec<(u32, u32)> = sample(&mut rng, n_r * n_r, nnz)
            .into_iter()
            .map(|k| ((k / n_r) as u32, (k % n_r) as u32))
            .collect();
        w_r_index.sort_unstable();
        Esn {
            n_t,
            n_i,
            n_r,
            leak,
            act,
            spectral_radius,
            sparsity,
            w_in: layout.alloc(n_i, n_r),
            w_r: layout.alloc(1, nnz),
            w_r_index,
        }
    }

    pub fn nnz(&self) -> usize {
        self.w_r_index.len()
    }

    pub fn out_dim(&self) -> usize {
        self.n_t * self.n_r
    }

    /// Uniform(-1, 1) input and reservoir weights, the reservoir rescaled to
    /// the requested spectral radius.
    pub fn init(&self, p: &mut [f64], rng: &mut Mt64) {
        for v in self.w_in.slice_mut(p) {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in self.w_r.slice_mut(p) {
            *v = rng.random_range(-1.0..1.0);
        }
        let rho = self.estimate_spectral_radius(p, rng);
        if rho > 1e-12 {
            let k = self.spectral_radius / rho;
            self.w_r.slice_mut(p).iter_mut().for_each(|v| *v *= k);
        }
    }

    fn reservoir_apply(&self, p: &[f64], s: &[f64], out: &mut [f64]) {
        for (&(r, c), &v) in self.w_r_index.iter().zip(self.w_r.slice(p)) {
            out[r as usize] += v * s[c as usize];
        }
    }

    /// Growth rate of `|W^k v|` over the second half of the power iteration,
    /// which also behaves for complex dominant eigenvalue pairs.
    pub fn estimate_spectral_radius(&self, p: &[f64], rng: &mut Mt64) -> f64 {
        let n = self.n_r;
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut log_growth = 0.0;
        let half = POWER_ITERATIONS / 2;
        for it in 0..POWER_ITERATIONS {
            let mut w = vec![0.0; n];
            self.reservoir_apply(p, &v, &mut w);
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            if it >= half {
                log_growth += norm.ln();
            }
            v = w.into_iter().map(|x| x / norm).collect();
        }
        (log_growth / (POWER_ITERATIONS - half) as f64).exp()
    }

    /// State sequences `(B, n_t * n_r)` for a batch of windows `(B, n_t * n_i)`.
    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let batch = x.nrows();
        let nr = self.n_r;
        let w_in = self.w_in.view(p);
        let mut out = Array2::<f64>::zeros((batch, self.out_dim()));
        let mut states = Array2::<f64>::zeros((batch, nr));
        let mut pre = Array2::<f64>::zeros((batch, nr));
        for t in 0..self.n_t {
            let x_t = x.slice(s![.., t * self.n_i..(t + 1) * self.n_i]);
            ndarray::linalg::general_mat_mul(1.0, &x_t, &w_in, 0.0, &mut pre);
            for (mut pr, sr) in pre.rows_mut().into_iter().zip(states.rows()) {
                let pr = pr.as_slice_mut().expect("contiguous");
                self.reservoir_apply(p, sr.as_slice().expect("contiguous"), pr);
            }
            let (mu, act) = (self.leak, self.act);
            states.zip_mut_with(&pre, |s, &z| *s = (1.0 - mu) * *s + mu * act.apply(z));
            out.slice_mut(s![.., t * nr..(t + 1) * nr]).assign(&states);
        }
        out
    }

    pub fn forward_counted(&self, p: &[f64], x: &[f64], c: &mut MulCounter) -> Vec<f64> {
        let nr = self.n_r;
        let mut s = vec![0.0; nr];
        let mut out = Vec::with_capacity(self.out_dim());
        let w_r = self.w_r.slice(p);
        for t in 0..self.n_t {
            let mut pre = c.vec_mat(&x[t * self.n_i..(t + 1) * self.n_i], self.w_in.slice(p), nr);
            for (&(r, col), &v) in self.w_r_index.iter().zip(w_r) {
                pre[r as usize] += c.mul(v, s[col as usize]);
            }
            for (sj, zj) in s.iter_mut().zip(&pre) {
                *sj = c.mul(1.0 - self.leak, *sj) + c.mul(self.leak, self.act.apply(*zj));
            }
            out.extend_from_slice(&s);
        }
        out
    }
}

/// Ridge least-squares readout: `argmin_W |S W - Y|^2 + lambda |W|^2`,
/// solved through the normal equations.
pub fn esn_fit_readout(states: ArrayView2<f64>, targets: ArrayView2<f64>, lambda: f64) -> Result<Array2<f64>> {
    if states.nrows() != targets.nrows() {
        return Err(Error::invalid("states and targets differ in length"));
    }
    ridge_solve(states.t().dot(&states), states.t().dot(&targets), lambda)
}

/// Solves `(G + lambda I) W = R` for the readout given the Gram matrix
/// `G = S^T S` and `R = S^T Y`.
pub fn ridge_solve(gram: Array2<f64>, rhs: Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
    if lambda < 0.0 {
        return Err(Error::invalid("ridge parameter must be non-negative"));
    }
    let n = gram.nrows();
    let mut a = DMatrix::from_fn(n, n, |i, j| gram[[i, j]]);
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    let b = DMatrix::from_fn(n, rhs.ncols(), |i, j| rhs[[i, j]]);
    let sol = match a.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::numerical("ridge system is singular"))?,
    };
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("ridge solution is not finite"));
    }
    Ok(Array2::from_shape_fn((n, rhs.ncols()), |(i, j)| sol[(i, j)]))
}
