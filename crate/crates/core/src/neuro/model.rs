use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_mt::Mt64;

use super::dataset::WindowedDataset;
use super::esn::Esn;
use super::layers::{ConvCache, Conv1d, Dense, DenseCache};
use super::lstm::{BiLstm, BiLstmCache};
use super::params::{Layout, MulCounter};
use crate::channel::derive_seed;
use crate::error::{Error, Result};
use crate::topology::{Activation, Architecture, TopologySpec};

const PREDICT_CHUNK: usize = 4096;

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv1d),
    BiLstm(BiLstm),
    Esn(Esn),
}

#[derive(Debug)]
pub enum LayerCache {
    Dense(DenseCache),
    Conv(ConvCache),
    BiLstm(Box<BiLstmCache>),
    /// The reservoir is frozen, so nothing needs keeping.
    Esn,
}

impl Layer {
    fn init(&self, p: &mut [f64], rng: &mut Mt64) {
        match self {
            Layer::Dense(l) => l.init(p, rng),
            Layer::Conv(l) => l.init(p, rng),
            Layer::BiLstm(l) => l.init(p, rng),
            Layer::Esn(l) => l.init(p, rng),
        }
    }

    fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Layer::Dense(l) => l.forward(p, x),
            Layer::Conv(l) => l.forward(p, x),
            Layer::BiLstm(l) => l.forward(p, x),
            Layer::Esn(l) => l.forward(p, x),
        }
    }

    fn forward_counted(&self, p: &[f64], x: &[f64], c: &mut MulCounter) -> Vec<f64> {
        match self {
            Layer::Dense(l) => l.forward_counted(p, x, c),
            Layer::Conv(l) => l.forward_counted(p, x, c),
            Layer::BiLstm(l) => l.forward_counted(p, x, c),
            Layer::Esn(l) => l.forward_counted(p, x, c),
        }
    }
}

/// A complete equalizer: topology, flat parameter vector and the layers that
/// index into it.
#[derive(Debug, Clone)]
pub struct EqualizerModel {
    pub spec: TopologySpec,
    pub params: Vec<f64>,
    pub seed: u64,
    layers: Vec<Layer>,
    multiply_counter: u64,
}

fn build(spec: &TopologySpec, seed: u64) -> (Vec<Layer>, usize) {
    let mut layout = Layout::default();
    let (n_s, n_i, n_o) = (spec.n_s, spec.n_i, spec.n_o);
    let act = spec.activations;
    let out = |layout: &mut Layout, n_in: usize| Layer::Dense(Dense::new(layout, n_in, n_o, false, Activation::Linear));
    let layers = match spec.arch {
        Architecture::Mlp { n1, n2, n3 } => {
            let d1 = Dense::new(&mut layout, n_s * n_i, n1, true, act.dense);
            let d2 = Dense::new(&mut layout, n1, n2, true, act.dense);
            let d3 = Dense::new(&mut layout, n2, n3, true, act.dense);
            let o = out(&mut layout, n3);
            vec![Layer::Dense(d1), Layer::Dense(d2), Layer::Dense(d3), o]
        }
        Architecture::BiLstm { nh } => {
            let bl = BiLstm::new(&mut layout, n_s, n_i, nh, spec.lstm_bias);
            let o = out(&mut layout, bl.out_dim());
            vec![Layer::BiLstm(bl), o]
        }
        Architecture::Esn {
            nr,
            sparsity,
            leak,
            spectral_radius,
        } => {
            let esn = Esn::new(
                &mut layout,
                n_s,
                n_i,
                nr,
                sparsity,
                leak,
                spectral_radius,
                act.reservoir,
                derive_seed(seed, 0xE5),
            );
            let o = out(&mut layout, esn.out_dim());
            vec![Layer::Esn(esn), o]
        }
        Architecture::CnnMlp { nf, nk, n1, n2 } => {
            let conv = Conv1d::new(&mut layout, n_s, n_i, nf, nk, act.conv);
            let d1 = Dense::new(&mut layout, conv.out_dim(), n1, true, act.dense);
            let d2 = Dense::new(&mut layout, n1, n2, true, act.dense);
            let o = out(&mut layout, n2);
            vec![Layer::Conv(conv), Layer::Dense(d1), Layer::Dense(d2), o]
        }
        Architecture::CnnBiLstm { nf, nk, nh } => {
            let conv = Conv1d::new(&mut layout, n_s, n_i, nf, nk, act.conv);
            let bl = BiLstm::new(&mut layout, conv.out_len(), nf, nh, spec.lstm_bias);
            let o = out(&mut layout, bl.out_dim());
            vec![Layer::Conv(conv), Layer::BiLstm(bl), o]
        }
    };
    (layers, layout.len())
}

impl EqualizerModel {
    /// Builds and initializes a model; all randomness derives from `seed`.
    pub fn new(spec: TopologySpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (layers, n) = build(&spec, seed);
        let mut params = vec![0.0; n];
        let mut rng = Mt64::seed_from_u64(derive_seed(seed, 0x1417));
        for l in &layers {
            l.init(&mut params, &mut rng);
        }
        Ok(EqualizerModel {
            spec,
            params,
            seed,
            layers,
            multiply_counter: 0,
        })
    }

    /// Rebuilds a model around stored parameters.
    pub fn from_parts(spec: TopologySpec, seed: u64, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let (layers, n) = build(&spec, seed);
        if params.len() != n {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, topology needs {n}",
                params.len()
            )));
        }
        Ok(EqualizerModel {
            spec,
            params,
            seed,
            layers,
            multiply_counter: 0,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.n_s * self.spec.n_i
    }

    /// Reservoir models train only their readout.
    pub fn is_reservoir(&self) -> bool {
        matches!(self.layers.first(), Some(Layer::Esn(_)))
    }

    pub(crate) fn esn(&self) -> Option<(&Esn, &Dense)> {
        match self.layers.as_slice() {
            [Layer::Esn(e), Layer::Dense(d)] => Some((e, d)),
            _ => None,
        }
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} features per window, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Batched inference on `(B, n_s * n_i)` windows.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut a = self.layers[0].forward(&self.params, x);
        for l in &self.layers[1..] {
            a = l.forward(&self.params, a.view());
        }
        Ok(a)
    }

    /// Forward pass keeping what the backward pass needs.
    pub fn forward_train(&self, x: Array2<f64>) -> Result<(Array2<f64>, Vec<LayerCache>)> {
        self.check_input(&x.view())?;
        let p = &self.params;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut a = x;
        for l in &self.layers {
            let (next, cache) = match l {
                Layer::Dense(d) => {
                    let (y, c) = d.forward_train(p, a);
                    (y, LayerCache::Dense(c))
                }
                Layer::Conv(cv) => {
                    let (y, c) = cv.forward_train(p, a);
                    (y, LayerCache::Conv(c))
                }
                Layer::BiLstm(b) => {
                    let (y, c) = b.forward_train(p, a);
                    (y, LayerCache::BiLstm(Box::new(c)))
                }
                Layer::Esn(e) => (e.forward(p, a.view()), LayerCache::Esn),
            };
            caches.push(cache);
            a = next;
        }
        Ok((a, caches))
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward(&self, caches: &[LayerCache], dy: Array2<f64>, grads: &mut [f64]) {
        let p = &self.params;
        let mut d = dy;
        for (i, (l, c)) in self.layers.iter().zip(caches).enumerate().rev() {
            let want = i > 0;
            let dx = match (l, c) {
                (Layer::Dense(l), LayerCache::Dense(c)) => l.backward(p, c, d, grads, want),
                (Layer::Conv(l), LayerCache::Conv(c)) => l.backward(p, c, d, grads, want),
                (Layer::BiLstm(l), LayerCache::BiLstm(c)) => l.backward(p, c, d, grads, want),
                (Layer::Esn(_), LayerCache::Esn) => None,
                _ => unreachable!("cache does not match layer"),
            };
            match dx {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    /// Instrumented single-window forward pass. Resets the multiply counter
    /// and leaves it at the number of real multiplications spent on this
    /// recovered symbol.
    pub fn forward_counted(&mut self, window: &[f64]) -> Result<Vec<f64>> {
        if window.len() != self.input_dim() {
            return Err(Error::invalid("window length does not match the model input"));
        }
        let mut c = MulCounter::default();
        let mut a = window.to_vec();
        for l in &self.layers {
            a = l.forward_counted(&self.params, &a, &mut c);
        }
        self.multiply_counter = c.count;
        Ok(a)
    }

    pub fn multiply_counter(&self) -> u64 {
        self.multiply_counter
    }

    /// Inference over a whole dataset in fixed-size chunks.
    pub fn predict(&self, data: &WindowedDataset) -> Result<Array2<f64>> {
        self.predict_flat(data.flat_inputs())
    }

    pub fn predict_flat(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let chunks: Result<Vec<Array2<f64>>> = x
            .axis_chunks_iter(Axis(0), PREDICT_CHUNK)
            .map(|c| self.forward(c))
            .collect();
        let chunks = chunks?;
        if chunks.is_empty() {
            return Ok(Array2::zeros((0, self.spec.n_o)));
        }
        let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
        Ok(concatenate(Axis(0), &views).expect("chunks share width"))
    }
}
