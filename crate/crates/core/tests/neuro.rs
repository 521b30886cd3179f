use fiberlab::complexity::rmps;
use fiberlab::dsp::{random_frame, Polarization};
use fiberlab::neuro::checkpoint;
use fiberlab::neuro::*;
use fiberlab::receiver::EqualizedSymbols;
use fiberlab::topology::{Activation, Architecture, TopologySpec};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_mt::Mt64;

fn random_matrix(rows: usize, cols: usize, rng: &mut Mt64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn random_params(n: usize, rng: &mut Mt64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-0.8..0.8)).collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Compares analytic gradients (of `sum(r * f(p, x))`) with central
/// differences; returns the largest relative error over all parameters and
/// inputs.
fn check_gradients<F, B>(p: &[f64], x: &Array2<f64>, r: &Array2<f64>, f: F, backward: B) -> f64
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
    for idx in 0..x.len() {
        let (row, col) = (idx / x.ncols(), idx % x.ncols());
        xq[[row, col]] = x[[row, col]] + h;
        let up = loss(p, &xq);
        xq[[row, col]] = x[[row, col]] - h;
        let down = loss(p, &xq);
        xq[[row, col]] = x[[row, col]];
        worst = worst.max(rel(dx[[row, col]], (up - down) / (2.0 * h)));
    }
    worst
}

#[test]
fn dense_gradients() {
    let mut rng = Mt64::seed_from_u64(1);
    for act in [Activation::Tanh, Activation::Linear, Activation::Sigmoid] {
        let mut layout = Layout::default();
        let d = Dense::new(&mut layout, 5, 4, true, act);
        let p = random_params(layout.len(), &mut rng);
        let x = random_matrix(3, 5, &mut rng);
        let r = random_matrix(3, 4, &mut rng);
        let err = check_gradients(
            &p,
            &x,
            &r,
            |p, x| d.forward(p, x),
            |p, x, r, g| {
                let (_, c) = d.forward_train(p, x.clone());
                d.backward(p, &c, r.clone(), g, true).unwrap()
            },
        );
        assert!(err < 1e-4, "{act:?}: {err}");
    }
}

#[test]
fn conv1d_gradients() {
    let mut rng = Mt64::seed_from_u64(2);
    let mut layout = Layout::default();
    let conv = Conv1d::new(&mut layout, 7, 3, 4, 3, Activation::LeakyRelu { slope: 0.2 });
    let p = random_params(layout.len(), &mut rng);
    let x = random_matrix(2, 21, &mut rng);
    let r = random_matrix(2, conv.out_dim(), &mut rng);
    let err = check_gradients(
        &p,
        &x,
        &r,
        |p, x| conv.forward(p, x),
        |p, x, r, g| {
            let (_, c) = conv.forward_train(p, x.clone());
            conv.backward(p, &c, r.clone(), g, true).unwrap()
        },
    );
    assert!(err < 1e-4, "{err}");
}

fn lstm_gradient_error(n_t: usize, bias: bool, reverse: bool, seed: u64) -> f64 {
    let mut rng = Mt64::seed_from_u64(seed);
    let mut layout = Layout::default();
    let cell = Lstm::new(&mut layout, n_t, 3, 4, bias, reverse);
    let p = random_params(layout.len(), &mut rng);
    let x = random_matrix(2, n_t * 3, &mut rng);
    let r = random_matrix(2, cell.out_dim(), &mut rng);
    check_gradients(
        &p,
        &x,
        &r,
        |p, x| cell.forward(p, x),
        |p, x, r, g| {
            let (_, c) = cell.forward_train(p, x.view());
            cell.backward(p, x.view(), &c, r.view(), g)
        },
    )
}

#[test]
fn lstm_step_gradients() {
    assert!(lstm_gradient_error(1, false, false, 3) < 1e-4);
    assert!(lstm_gradient_error(1, true, false, 4) < 1e-4);
}

#[test]
fn bptt_gradients() {
    assert!(lstm_gradient_error(6, false, false, 5) < 1e-4);
    assert!(lstm_gradient_error(6, true, true, 6) < 1e-4);
    let mut rng = Mt64::seed_from_u64(7);
    let mut layout = Layout::default();
    let bl = BiLstm::new(&mut layout, 5, 2, 3, false);
    let p = random_params(layout.len(), &mut rng);
    let x = random_matrix(2, 10, &mut rng);
    let r = random_matrix(2, bl.out_dim(), &mut rng);
    let err = check_gradients(
        &p,
        &x,
        &r,
        |p, x| bl.forward(p, x),
        |p, x, r, g| {
            let (_, c) = bl.forward_train(p, x.clone());
            bl.backward(p, &c, r.clone(), g, true).unwrap()
        },
    );
    assert!(err < 1e-4, "{err}");
}

fn small_specs() -> Vec<TopologySpec> {
    vec![
        TopologySpec::new(Architecture::Mlp { n1: 4, n2: 3, n3: 5 }).with_memory(3),
        TopologySpec::new(Architecture::BiLstm { nh: 3 }).with_memory(4),
        TopologySpec::new(Architecture::CnnMlp { nf: 3, nk: 2, n1: 4, n2: 3 }).with_memory(5),
        TopologySpec::new(Architecture::CnnBiLstm { nf: 2, nk: 3, nh: 3 }).with_memory(5),
    ]
}

#[test]
fn whole_model_gradients() {
    let mut rng = Mt64::seed_from_u64(8);
    for spec in small_specs() {
        let mut model = EqualizerModel::new(spec, 3).unwrap();
        model.params = random_params(model.n_params(), &mut rng);
        let x = random_matrix(3, model.input_dim(), &mut rng);
        let r = random_matrix(3, 2, &mut rng);
        let base = model.clone();
        let h = 1e-4;
        let loss = |p: &[f64]| {
            let mut m = base.clone();
            m.params = p.to_vec();
            (m.forward(x.view()).unwrap() * &r).sum()
        };
        let (_, caches) = model.forward_train(x.clone()).unwrap();
        let mut g = vec![0.0; model.n_params()];
        model.backward(&caches, r.clone(), &mut g);
        let mut q = model.params.clone();
        for i in 0..q.len() {
            let p0 = q[i];
            q[i] = p0 + h;
            let up = loss(&q);
            q[i] = p0 - h;
            let down = loss(&q);
            q[i] = p0;
            let fd = (up - down) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "{}: param {i}: {} vs {fd}", spec.describe(), g[i]);
        }
    }
}

// Straight-line oracles.

fn oracle_lstm_step(
    wx: &[f64],
    wh: &[f64],
    ni: usize,
    nh: usize,
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let gate = |g: usize, j: usize| {
        let mut z = 0.0;
        for k in 0..ni {
            z += x[k] * wx[k * 4 * nh + g * nh + j];
        }
        for k in 0..nh {
            z += h[k] * wh[k * 4 * nh + g * nh + j];
        }
        z
    };
    let mut h_new = vec![0.0; nh];
    let mut c_new = vec![0.0; nh];
    for j in 0..nh {
        let i = sigmoid(gate(0, j));
        let f = sigmoid(gate(1, j));
        let o = sigmoid(gate(2, j));
        let cand = gate(3, j).tanh();
        c_new[j] = f * c[j] + i * cand;
        h_new[j] = o * c_new[j].tanh();
    }
    (h_new, c_new)
}

#[test]
fn lstm_step_matches_oracle() {
    let mut rng = Mt64::seed_from_u64(9);
    let (ni, nh) = (4, 3);
    let mut layout = Layout::default();
    let cell = Lstm::new(&mut layout, 1, ni, nh, false, false);
    let p = random_params(layout.len(), &mut rng);
    let x = random_matrix(1, ni, &mut rng);
    let h = random_matrix(1, nh, &mut rng);
    let c = random_matrix(1, nh, &mut rng);
    let (h1, c1, _) = cell.step(&p, x.view(), h.view(), c.view());
    let (ho, co) = oracle_lstm_step(
        cell.wx.slice(&p),
        cell.wh.slice(&p),
        ni,
        nh,
        x.as_slice().unwrap(),
        h.as_slice().unwrap(),
        c.as_slice().unwrap(),
    );
    for j in 0..nh {
        assert!((h1[[0, j]] - ho[j]).abs() < 1e-12);
        assert!((c1[[0, j]] - co[j]).abs() < 1e-12);
    }
}

#[test]
fn lstm_trivial_cases() {
    let mut layout = Layout::default();
    let cell = Lstm::new(&mut layout, 1, 2, 3, false, false);
    let p = vec![0.0; layout.len()];
    let x = Array2::from_elem((1, 2), 0.7);
    let zeros = Array2::zeros((1, 3));
    let (h, c, gates) = cell.step(&p, x.view(), zeros.view(), zeros.view());
    assert!(h.iter().chain(c.iter()).all(|v| *v == 0.0));
    assert!(gates.iter().take(9).all(|g| *g == 0.5));
    let cp = Array2::from_elem((1, 3), 1.3);
    let (h, c, _) = cell.step(&p, x.view(), zeros.view(), cp.view());
    for j in 0..3 {
        assert!((c[[0, j]] - 0.65).abs() < 1e-15);
        assert!((h[[0, j]] - 0.5 * 0.65f64.tanh()).abs() < 1e-15);
    }
}

#[test]
fn conv1d_matches_oracle() {
    let mut rng = Mt64::seed_from_u64(10);
    let (ns, ni, nf, nk) = (9, 4, 3, 4);
    let mut layout = Layout::default();
    let conv = Conv1d::new(&mut layout, ns, ni, nf, nk, Activation::LeakyRelu { slope: 0.2 });
    let p = random_params(layout.len(), &mut rng);
    let x = random_matrix(2, ns * ni, &mut rng);
    let y = conv.forward(&p, x.view());
    let (w, b) = (conv.w.slice(&p), conv.b.slice(&p));
    for bi in 0..2 {
        for t in 0..ns - nk + 1 {
            for f in 0..nf {
                let mut z = b[f];
                for k in 0..nk {
                    for i in 0..ni {
                        z += w[(k * ni + i) * nf + f] * x[[bi, (t + k) * ni + i]];
                    }
                }
                let a = if z >= 0.0 { z } else { 0.2 * z };
                assert!((y[[bi, t * nf + f]] - a).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv1d_ones_kernel_is_moving_sum() {
    let mut layout = Layout::default();
    let conv = Conv1d::new(&mut layout, 6, 2, 1, 3, Activation::Linear);
    let mut p = vec![0.0; layout.len()];
    conv.w.slice_mut(&mut p).fill(1.0);
    let x = Array2::from_shape_fn((1, 12), |(_, j)| j as f64);
    let y = conv.forward(&p, x.view());
    assert_eq!(y.ncols(), 4);
    for t in 0..4 {
        let expect: f64 = (2 * t..2 * t + 6).map(|v| v as f64).sum();
        assert_eq!(y[[0, t]], expect);
    }
}

fn esn_layer(nr: usize, leak: f64, seed: u64) -> (Esn, Vec<f64>) {
    let mut layout = Layout::default();
    let esn = Esn::new(&mut layout, 5, 4, nr, 0.5, leak, 0.9, Activation::Tanh, seed);
    let mut p = vec![0.0; layout.len()];
    let mut rng = Mt64::seed_from_u64(seed + 1);
    esn.init(&mut p, &mut rng);
    (esn, p)
}

#[test]
fn esn_matches_oracle() {
    let (esn, p) = esn_layer(4, 0.57, 11);
    let nr = 4;
    let mut dense_wr = vec![0.0; nr * nr];
    for (&(r, c), &v) in esn.w_r_index.iter().zip(esn.w_r.slice(&p)) {
        dense_wr[r as usize * nr + c as usize] = v;
    }
    let w_in = esn.w_in.slice(&p);
    let mut rng = Mt64::seed_from_u64(12);
    let x = random_matrix(3, 20, &mut rng);
    let y = esn.forward(&p, x.view());
    assert_eq!(y.dim(), (3, 5 * nr));
    for b in 0..3 {
        let mut s = vec![0.0; nr];
        for t in 0..5 {
            let mut a = vec![0.0; nr];
            for j in 0..nr {
                let mut z = 0.0;
                for i in 0..4 {
                    z += w_in[i * nr + j] * x[[b, t * 4 + i]];
                }
                for k in 0..nr {
                    z += dense_wr[j * nr + k] * s[k];
                }
                a[j] = z.tanh();
            }
            for j in 0..nr {
                s[j] = (1.0 - 0.57) * s[j] + 0.57 * a[j];
                assert!((y[[b, t * nr + j]] - s[j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn esn_leak_extremes() {
    let mut rng = Mt64::seed_from_u64(13);
    let x = random_matrix(2, 20, &mut rng);
    let (esn, p) = esn_layer(6, 0.0, 14);
    assert!(esn.forward(&p, x.view()).iter().all(|v| *v == 0.0));
    // With leak 1 the state is the activation itself: a one-step window
    // reduces to tanh(x W_in).
    let (esn, p) = esn_layer(6, 1.0, 15);
    let s = esn.forward(&p, x.view()).slice(ndarray::s![.., 0..6]).to_owned();
    let expect = x.slice(ndarray::s![.., 0..4]).dot(&esn.w_in.view(&p)).mapv(f64::tanh);
    assert!((&s - &expect).iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn esn_reservoir_scaled_to_spectral_radius() {
    let mut layout = Layout::default();
    let esn = Esn::new(&mut layout, 41, 4, 60, 0.18, 0.57, 0.667, Activation::Tanh, 3);
    assert_eq!(esn.nnz(), 648);
    let mut p = vec![0.0; layout.len()];
    let mut rng = Mt64::seed_from_u64(4);
    esn.init(&mut p, &mut rng);
    let mut rng = Mt64::seed_from_u64(99);
    let rho = esn.estimate_spectral_radius(&p, &mut rng);
    assert!((rho - 0.667).abs() < 0.05, "{rho}");
}

#[test]
fn ridge_readout() {
    let mut rng = Mt64::seed_from_u64(16);
    let s = random_matrix(10, 5, &mut rng);
    let w = random_matrix(5, 2, &mut rng);
    let y = s.dot(&w);
    let fit = esn_fit_readout(s.view(), y.view(), 0.0).unwrap();
    assert!((&fit - &w).iter().all(|v| v.abs() < 1e-9));
    let big = esn_fit_readout(s.view(), y.view(), 1e12).unwrap();
    assert!(big.iter().all(|v| v.abs() < 1e-9));
    // Normal-equation oracle with a moderate ridge term.
    let lambda = 0.3;
    let fit = esn_fit_readout(s.view(), y.view(), lambda).unwrap();
    let a = nalgebra::DMatrix::from_fn(5, 5, |i, j| {
        (0..10).map(|k| s[[k, i]] * s[[k, j]]).sum::<f64>() + if i == j { lambda } else { 0.0 }
    });
    let b = nalgebra::DMatrix::from_fn(5, 2, |i, j| (0..10).map(|k| s[[k, i]] * y[[k, j]]).sum::<f64>());
    let oracle = a.try_inverse().unwrap() * b;
    for i in 0..5 {
        for j in 0..2 {
            assert!((fit[[i, j]] - oracle[(i, j)]).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_mlp_outputs_zero() {
    let mut model = EqualizerModel::new(TopologySpec::new(Architecture::Mlp { n1: 5, n2: 4, n3: 3 }), 0).unwrap();
    model.params.fill(0.0);
    let x = Array2::from_elem((2, 164), 0.3);
    assert!(model.forward(x.view()).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn linear_single_unit_mlp_is_weighted_sum() {
    let mut spec = TopologySpec::new(Architecture::Mlp { n1: 1, n2: 1, n3: 1 }).with_memory(2);
    spec.activations.dense = Activation::Linear;
    spec.n_o = 1;
    let mut model = EqualizerModel::new(spec, 0).unwrap();
    let n = model.n_params();
    // Layout: w1 (8x1), b1, w2, b2, w3, b3, w_out.
    model.params = vec![0.0; n];
    for (k, v) in model.params[..8].iter_mut().enumerate() {
        *v = k as f64 + 1.0;
    }
    model.params[9] = 1.0;
    model.params[11] = 1.0;
    model.params[13] = 1.0;
    let x = Array2::from_shape_fn((1, 8), |(_, j)| 0.5 * j as f64 - 1.0);
    let expect: f64 = (0..8).map(|j| (j as f64 + 1.0) * (0.5 * j as f64 - 1.0)).sum();
    assert!((model.forward(x.view()).unwrap()[[0, 0]] - expect).abs() < 1e-12);
}

fn reverse_steps(x: &Array2<f64>, n_t: usize, width: usize) -> Array2<f64> {
    Array2::from_shape_fn(x.raw_dim(), |(b, j)| {
        let (t, k) = (j / width, j % width);
        x[[b, (n_t - 1 - t) * width + k]]
    })
}

#[test]
fn bilstm_direction_symmetry() {
    let (n_t, ni, nh) = (6, 4, 3);
    let spec = TopologySpec::new(Architecture::BiLstm { nh }).with_memory(n_t);
    let model = EqualizerModel::new(spec, 21).unwrap();
    let Layer::BiLstm(bl) = &model.layers()[0] else { panic!() };
    let Layer::Dense(out) = &model.layers()[1] else { panic!() };
    let mut swapped = model.clone();
    let (f, b) = (bl.fwd.wx.offset, bl.bwd.wx.offset);
    let cell_len = bl.bwd.wx.offset - bl.fwd.wx.offset;
    let p = &model.params;
    swapped.params[f..f + cell_len].copy_from_slice(&p[b..b + cell_len]);
    swapped.params[b..b + cell_len].copy_from_slice(&p[f..f + cell_len]);
    // The dense layer sees steps in reverse order with halves swapped.
    for t in 0..n_t {
        for half in 0..2 {
            for j in 0..nh {
                for o in 0..2 {
                    let src = (t * 2 * nh + half * nh + j) * 2 + o;
                    let dst = ((n_t - 1 - t) * 2 * nh + (1 - half) * nh + j) * 2 + o;
                    swapped.params[out.w.offset + dst] = p[out.w.offset + src];
                }
            }
        }
    }
    let mut rng = Mt64::seed_from_u64(22);
    let x = random_matrix(3, n_t * ni, &mut rng);
    let y = model.forward(x.view()).unwrap();
    let y_rev = swapped.forward(reverse_steps(&x, n_t, ni).view()).unwrap();
    assert!((&y - &y_rev).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn single_step_bilstm_is_two_cells_and_dense() {
    let nh = 3;
    let spec = TopologySpec::new(Architecture::BiLstm { nh }).with_memory(1);
    let model = EqualizerModel::new(spec, 23).unwrap();
    let Layer::BiLstm(bl) = &model.layers()[0] else { panic!() };
    let Layer::Dense(out) = &model.layers()[1] else { panic!() };
    let p = &model.params;
    let x = vec![0.3, -0.2, 0.9, 0.1];
    let zero = vec![0.0; nh];
    let (hf, _) = oracle_lstm_step(bl.fwd.wx.slice(p), bl.fwd.wh.slice(p), 4, nh, &x, &zero, &zero);
    let (hb, _) = oracle_lstm_step(bl.bwd.wx.slice(p), bl.bwd.wh.slice(p), 4, nh, &x, &zero, &zero);
    let h: Vec<f64> = hf.into_iter().chain(hb).collect();
    let w = out.w.slice(p);
    let y = model.forward(Array2::from_shape_vec((1, 4), x).unwrap().view()).unwrap();
    for o in 0..2 {
        let expect: f64 = (0..2 * nh).map(|j| h[j] * w[j * 2 + o]).sum();
        assert!((y[[0, o]] - expect).abs() < 1e-12);
    }
}

#[test]
fn unit_kernel_identity_conv_is_transparent() {
    let archs = [
        Architecture::CnnMlp { nf: 4, nk: 1, n1: 5, n2: 3 },
        Architecture::CnnBiLstm { nf: 4, nk: 1, nh: 3 },
    ];
    let mut rng = Mt64::seed_from_u64(25);
    let x = random_matrix(2, 12, &mut rng);
    for arch in archs {
        let mut spec = TopologySpec::new(arch).with_memory(3);
        spec.activations.conv = Activation::Linear;
        let mut model = EqualizerModel::new(spec, 24).unwrap();
        let Layer::Conv(conv) = model.layers()[0].clone() else { panic!() };
        let w = conv.w.slice_mut(&mut model.params);
        w.fill(0.0);
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        let y = model.forward(x.view()).unwrap();
        // The remaining layers applied straight to the raw window.
        let mut a = x.clone();
        for l in &model.layers()[1..] {
            a = match l {
                Layer::Dense(d) => d.forward(&model.params, a.view()),
                Layer::BiLstm(b) => b.forward(&model.params, a.view()),
                _ => panic!(),
            };
        }
        assert!((&y - &a).iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn counter_matches_formula_for_random_specs() {
    let mut rng = Mt64::seed_from_u64(26);
    let mut r = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    for _ in 0..3 {
        let n_s = 2 * r(1, 6) + 1;
        let nk = r(1, n_s);
        let specs = [
            Architecture::Mlp { n1: r(1, 30), n2: r(1, 30), n3: r(1, 30) },
            Architecture::BiLstm { nh: r(1, 12) },
            Architecture::Esn { nr: r(1, 40), sparsity: 0.18, leak: 0.57, spectral_radius: 0.667 },
            Architecture::CnnMlp { nf: r(1, 10), nk, n1: r(1, 20), n2: r(1, 20) },
            Architecture::CnnBiLstm { nf: r(1, 8), nk, nh: r(1, 8) },
        ];
        for arch in specs {
            let spec = TopologySpec::new(arch).with_memory(n_s);
            let mut model = EqualizerModel::new(spec, 5).unwrap();
            let window: Vec<f64> = (0..model.input_dim()).map(|k| (k as f64 * 0.37).sin()).collect();
            let y = model.forward_counted(&window).unwrap();
            assert_eq!(model.multiply_counter(), rmps(&spec).unwrap().total, "{}", spec.describe());
            let batch = Array2::from_shape_vec((1, window.len()), window).unwrap();
            let yb = model.forward(batch.view()).unwrap();
            for o in 0..2 {
                assert!((y[o] - yb[[0, o]]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn windowing() {
    let tx = random_frame(5, 1).unwrap();
    let rx = EqualizedSymbols::from(&tx);
    let d = window_dataset(&rx, &tx, 1, Polarization::X).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.memory(), 3);
    for k in 0..3 {
        assert_eq!(d.targets[[k, 0]], tx.x_pol[k + 1].re);
        assert_eq!(d.targets[[k, 1]], tx.x_pol[k + 1].im);
        assert_eq!(d.inputs[[k, 1, 2]], tx.y_pol[k + 1].re);
        assert_eq!(d.inputs[[k, 0, 3]], tx.y_pol[k].im);
    }
    assert!(window_dataset(&rx, &tx, 0, Polarization::X).is_err());
    assert!(window_dataset(&rx, &tx, 3, Polarization::X).is_err());
    let big = random_frame(100, 2).unwrap();
    let d = window_dataset(&EqualizedSymbols::from(&big), &big, 20, Polarization::Y).unwrap();
    assert_eq!(d.memory(), 41);
    assert_eq!(d.len(), 60);
}

#[test]
fn first_adam_step_is_normalized_gradient() {
    let g = [0.5, -2.0, 1e-3, 0.0];
    let mut p = [1.0, 1.0, 1.0, 1.0];
    let mut adam = Adam::new(4, 1e-3);
    adam.step(&mut p, &g);
    for i in 0..4 {
        let expect = 1.0 - 1e-3 * g[i] / (g[i].abs() + 1e-8);
        assert!((p[i] - expect).abs() < 1e-15);
    }
}

#[test]
fn linear_model_converges_to_least_squares() {
    let mut rng = Mt64::seed_from_u64(27);
    let n = 400;
    let x3 = ndarray::Array3::from_shape_fn((n, 2, 4), |_| rng.random_range(-1.0..1.0));
    let a = random_matrix(8, 2, &mut rng);
    let flat = x3.view().into_shape_with_order((n, 8)).unwrap().to_owned();
    let noise = random_matrix(n, 2, &mut rng) * 0.1;
    let targets = flat.dot(&a) + 0.2 + noise;
    let data = WindowedDataset { inputs: x3, targets: targets.clone() };

    // Least-squares fit with intercept via the normal equations.
    let design = nalgebra::DMatrix::from_fn(n, 9, |i, j| if j < 8 { flat[[i, j]] } else { 1.0 });
    let yt = nalgebra::DMatrix::from_fn(n, 2, |i, j| targets[[i, j]]);
    let coef = (design.transpose() * &design).try_inverse().unwrap() * design.transpose() * yt;
    let ls = &design * &coef;

    let mut spec = TopologySpec::new(Architecture::Mlp { n1: 8, n2: 8, n3: 8 }).with_memory(2);
    spec.activations.dense = Activation::Linear;
    let mut model = EqualizerModel::new(spec, 1).unwrap();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        max_epochs: 3000,
        patience_epochs: 3000,
        batch_size: n,
        validation_fraction: 0.0,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &data, &cfg).unwrap();
    let pred = model.predict(&data).unwrap();
    let worst = (0..n)
        .flat_map(|i| (0..2).map(move |j| (i, j)))
        .map(|(i, j)| (pred[[i, j]] - ls[(i, j)]).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-4, "{worst} after {} epochs", report.epochs_run);
    assert!(report.best_val_loss.windows(2).all(|w| w[1] <= w[0]));
}

fn tiny_dataset(seed: u64) -> WindowedDataset {
    tiny_dataset_with(seed, 2)
}

fn tiny_dataset_with(seed: u64, half_width: usize) -> WindowedDataset {
    let tx = random_frame(300, seed).unwrap();
    let mut rx = EqualizedSymbols::from(&tx);
    for (k, v) in rx.pol_mut(Polarization::X).iter_mut().enumerate() {
        *v = *v * num_complex::Complex64::from_polar(1.0, 0.1 * v.norm_sqr()) + 0.01 * (k as f64).sin();
    }
    window_dataset(&rx, &tx, half_width, Polarization::X).unwrap()
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let data = tiny_dataset(3);
    let cfg = TrainConfig {
        max_epochs: 5,
        batch_size: 32,
        seed: 9,
        ..TrainConfig::default()
    };
    let spec = TopologySpec::new(Architecture::CnnBiLstm { nf: 2, nk: 2, nh: 3 }).with_memory(5);
    let mut a = EqualizerModel::new(spec, 4).unwrap();
    let mut b = EqualizerModel::new(spec, 4).unwrap();
    let ra = train(&mut a, &data, &cfg).unwrap();
    let rb = train(&mut b, &data, &cfg).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.params, b.params);
    assert!(ra.val_loss.len() == 5 && ra.train_loss[4] < ra.train_loss[0]);

    let json = checkpoint::to_json(&a).unwrap();
    let back = checkpoint::from_json(&json).unwrap();
    assert_eq!(back.params, a.params);
    assert_eq!(back.spec, a.spec);
    assert_eq!(checkpoint::to_json(&back).unwrap(), json);
}

#[test]
fn reservoir_checkpoint_rebuilds_mask() {
    let data = tiny_dataset(4);
    let spec = TopologySpec::new(Architecture::esn(30, 0.2)).with_memory(5);
    let mut m = EqualizerModel::new(spec, 8).unwrap();
    let report = train(&mut m, &data, &TrainConfig::default()).unwrap();
    assert_eq!(report.epochs_run, 1);
    let back = checkpoint::from_json(&checkpoint::to_json(&m).unwrap()).unwrap();
    assert_eq!(back.predict(&data).unwrap(), m.predict(&data).unwrap());
}

fn reservoir_part(m: &EqualizerModel) -> Vec<f64> {
    let n = match &m.layers()[1] {
        Layer::Dense(d) => d.w.offset,
        _ => unreachable!(),
    };
    m.params[..n].to_vec()
}

#[test]
fn reservoir_readout_is_the_ridge_solution_over_state_sequences() {
    let data = tiny_dataset(6);
    let spec = TopologySpec::new(Architecture::esn(12, 0.3)).with_memory(5);
    let mut m = EqualizerModel::new(spec, 2).unwrap();
    let before = reservoir_part(&m);
    let cfg = TrainConfig { validation_fraction: 0.0, ..TrainConfig::default() };
    train(&mut m, &data, &cfg).unwrap();
    assert_eq!(reservoir_part(&m), before);
    let Layer::Esn(esn) = &m.layers()[0] else { unreachable!() };
    let states = esn.forward(&m.params, data.flat_inputs());
    let w = esn_fit_readout(states.view(), data.targets.view(), cfg.ridge_lambda).unwrap();
    let pred = m.predict(&data).unwrap();
    assert!((&pred - &states.dot(&w)).iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn wide_reservoirs_train_the_readout_by_gradient() {
    // 41 steps x 120 states exceeds the closed-form limit.
    let data = tiny_dataset_with(7, 20);
    let spec = TopologySpec::new(Architecture::esn(120, 0.05)).with_memory(41);
    let mut m = EqualizerModel::new(spec, 3).unwrap();
    let before = reservoir_part(&m);
    let report = train(&mut m, &data, &TrainConfig { max_epochs: 3, ..TrainConfig::default() }).unwrap();
    assert_eq!(report.epochs_run, 3);
    assert!(report.train_loss[2] < report.train_loss[0]);
    assert_eq!(reservoir_part(&m), before);
}

#[test]
fn divergent_training_aborts() {
    let mut data = tiny_dataset(5);
    data.targets.fill(f64::NAN);
    let spec = TopologySpec::new(Architecture::Mlp { n1: 3, n2: 3, n3: 3 }).with_memory(5);
    let mut m = EqualizerModel::new(spec, 1).unwrap();
    let err = train(&mut m, &data, &TrainConfig { max_epochs: 3, ..TrainConfig::default() }).unwrap_err();
    assert!(matches!(err, fiberlab::Error::Numerical(_)));
}
