use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_mt::Mt64;

/// Location of one weight matrix inside the model's flat parameter vector.
/// Matrices are stored row-major as `(rows, cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.len()]
    }

    pub fn slice_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.offset..self.offset + self.len()]
    }

    pub fn view<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), self.slice(p)).expect("slot shape")
    }

    pub fn view_mut<'a>(&self, p: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        let (r, c) = (self.rows, self.cols);
        ArrayViewMut2::from_shape((r, c), self.slice_mut(p)).expect("slot shape")
    }

    /// Glorot-uniform fill with the given fan-in / fan-out.
    pub fn glorot(&self, p: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut Mt64) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in self.slice_mut(p) {
            *v = rng.random_range(-limit..limit);
        }
    }
}

/// Hands out consecutive slots while a network is being assembled.
#[derive(Debug, Default)]
pub struct Layout {
    len: usize,
}

impl Layout {
    pub fn alloc(&mut self, rows: usize, cols: usize) -> Slot {
        let s = Slot {
            offset: self.len,
            rows,
            cols,
        };
        self.len += rows * cols;
        s
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Real-multiplication counter used by the instrumented per-symbol forward
/// pass. Only products routed through [`MulCounter::mul`] are counted;
/// additions and activation functions are free.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MulCounter {
    pub count: u64,
}

impl MulCounter {
    #[inline]
    pub fn mul(&mut self, a: f64, b: f64) -> f64 {
        self.count += 1;
        a * b
    }

    /// `x · W` for a row vector `x` and a row-major `(x.len(), cols)` matrix.
    pub fn vec_mat(&mut self, x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
        debug_assert_eq!(w.len(), x.len() * cols);
        let mut out = vec![0.0; cols];
        for (i, &xi) in x.iter().enumerate() {
            let row = &w[i * cols..(i + 1) * cols];
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += self.mul(xi, wij);
            }
        }
        out
    }
}
