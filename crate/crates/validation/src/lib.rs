//! Shared helpers for the acceptance run: a tiny criterion runner and
//! numerical oracles.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_mt::Mt64;

/// Outcome of one criterion: pass flag and a one-line detail.
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn check(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

pub struct Criterion {
    pub id: u32,
    pub name: &'static str,
    pub run: fn() -> Outcome,
}

/// Runs the selected criteria (all when `filter` is empty), printing one
/// line each. A panic counts as a failure. Returns the number of failures.
pub fn run_all(criteria: &[Criterion], filter: &[u32]) -> usize {
    let mut failures = 0;
    let mut out = std::io::stdout();
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.contains(&c.id)) {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Outcome::check(false, format!("panicked: {msg}"))
        });
        if !outcome.passed {
            failures += 1;
        }
        let _ = writeln!(
            out,
            "criterion {:>2} [{}] {}: {} ({:.1} s)",
            c.id,
            if outcome.passed { "PASS" } else { "FAIL" },
            c.name,
            outcome.detail,
            t.elapsed().as_secs_f64()
        );
        let _ = out.flush();
    }
    failures
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut Mt64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn random_params(n: usize, rng: &mut Mt64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-0.8..0.8)).collect()
}

/// Largest relative error between analytic gradients of
/// `sum(r * f(p, x))` (w.r.t. parameters and inputs) and central
/// differences with step `1e-4`.
pub fn gradient_error<F, B>(p: &[f64], x: &Array2<f64>, r: &Array2<f64>, f: F, backward: B) -> f64
where
    F: Fn(&[f64], ArrayView2<f64>) -> Array2<f64>,
    B: Fn(&[f64], &Array2<f64>, &Array2<f64>, &mut [f64]) -> Array2<f64>,
{
    let h = 1e-4;
    let loss = |p: &[f64], x: &Array2<f64>| (f(p, x.view()) * r).sum();
    let mut g = vec![0.0; p.len()];
    let dx = backward(p, x, r, &mut g);
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    let mut q = p.to_vec();
    for i in 0..p.len() {
        q[i] = p[i] + h;
        let up = loss(&q, x);
        q[i] = p[i] - h;
        let down = loss(&q, x);
        q[i] = p[i];
        worst = worst.max(rel(g[i], (up - down) / (2.0 * h)));
    }
    let mut xq = x.clone();
    for ((i, j), &v) in x.indexed_iter() {
        xq[[i, j]] = v + h;
        let up = loss(p, &xq);
        xq[[i, j]] = v - h;
        let down = loss(p, &xq);
        xq[[i, j]] = v;
        worst = worst.max(rel(dx[[i, j]], (up - down) / (2.0 * h)));
    }
    worst
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
