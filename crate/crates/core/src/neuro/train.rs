use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_mt::Mt64;
use serde::{Deserialize, Serialize};

use super::dataset::WindowedDataset;
use super::esn::ridge_solve;
use super::model::EqualizerModel;
use crate::channel::derive_seed;
use crate::error::{Error, Result};

/// Largest readout input handled by the closed-form fit.
const MAX_RIDGE_DIM: usize = 4096;
const RIDGE_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    #[default]
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    pub batch_size: usize,
    pub loss: Loss,
    pub seed: u64,
    /// Trailing fraction of the windows held out for early stopping.
    pub validation_fraction: f64,
    /// Ridge parameter of the reservoir readout fit.
    pub ridge_lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 1000,
            patience_epochs: 150,
            batch_size: 4331,
            loss: Loss::Mse,
            seed: 0,
            validation_fraction: 0.1,
            ridge_lambda: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 1)"));
        }
        if self.ridge_lambda < 0.0 {
            return Err(Error::invalid("ridge parameter must be non-negative"));
        }
        Ok(())
    }
}

/// Adam on a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

pub fn mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    /// Loss on the held-out windows (equal to the training loss when no
    /// windows are held out).
    pub val_loss: Vec<f64>,
    pub best_val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

fn split(data: &WindowedDataset, fraction: f64) -> (usize, usize) {
    let n = data.len();
    let n_val = ((n as f64) * fraction).ceil() as usize;
    if n_val == 0 || n_val >= n {
        (n, 0)
    } else {
        (n - n_val, n_val)
    }
}

/// Trains `model` in place and leaves it at the parameters with the best
/// held-out loss.
pub fn train(model: &mut EqualizerModel, data: &WindowedDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let x = data.flat_inputs();
    let (n_train, n_val) = split(data, cfg.validation_fraction);
    let (x_tr, x_val) = x.split_at(Axis(0), n_train);
    let (y_tr, y_val) = data.targets.view().split_at(Axis(0), n_train);

    if model.is_reservoir() {
        if let Some(report) = fit_reservoir(model, (x_tr, y_tr), (x_val, y_val), cfg)? {
            return Ok(report);
        }
    }

    let mut report = TrainReport::default();
    let mut adam = Adam::new(model.n_params(), cfg.learning_rate);
    let mut grads = vec![0.0; model.n_params()];
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut rng = Mt64::seed_from_u64(derive_seed(cfg.seed, 0x5_4FF1E));
    let mut best = (f64::INFINITY, model.params.clone());

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = x_tr.select(Axis(0), batch);
            let yb = y_tr.select(Axis(0), batch);
            let (pred, caches) = model.forward_train(xb)?;
            let loss = mse(pred.view(), yb.view());
            if !loss.is_finite() {
                return Err(Error::numerical(format!(
                    "loss became {loss} in epoch {epoch}; try a lower learning rate"
                )));
            }
            sum += loss * batch.len() as f64;
            let scale = 2.0 / pred.len() as f64;
            let mut dy: Array2<f64> = pred;
            dy.zip_mut_with(&yb, |p, &t| *p = scale * (*p - t));
            grads.fill(0.0);
            model.backward(&caches, dy, &mut grads);
            adam.step(&mut model.params, &grads);
        }
        let train_loss = sum / n_train as f64;
        let val_loss = if n_val > 0 {
            mse(model.predict_flat(x_val)?.view(), y_val)
        } else {
            train_loss
        };
        if !val_loss.is_finite() {
            return Err(Error::numerical(format!("validation loss became {val_loss} in epoch {epoch}")));
        }
        if val_loss < best.0 {
            best = (val_loss, model.params.clone());
            report.best_epoch = epoch;
        }
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        report.best_val_loss.push(best.0);
        report.epochs_run = epoch + 1;
        if epoch - report.best_epoch >= cfg.patience_epochs {
            break;
        }
    }
    model.params = best.1;
    Ok(report)
}

/// Closed-form ridge fit of the readout over the state sequences, with the
/// normal equations accumulated chunk by chunk. Returns `None` when the state
/// dimension is too large for a dense solve; the readout is then trained by
/// the gradient loop, which leaves the reservoir untouched.
fn fit_reservoir(
    model: &mut EqualizerModel,
    train: (ArrayView2<f64>, ArrayView2<f64>),
    val: (ArrayView2<f64>, ArrayView2<f64>),
    cfg: &TrainConfig,
) -> Result<Option<TrainReport>> {
    let (esn, readout) = model.esn().expect("reservoir model");
    let (esn, w) = (esn.clone(), readout.w.clone());
    let dim = esn.out_dim();
    if dim > MAX_RIDGE_DIM {
        // Start the gradient fit from a silent readout, as the ridge fit
        // would at infinite regularization.
        w.slice_mut(&mut model.params).fill(0.0);
        return Ok(None);
    }
    let n_o = train.1.ncols();
    let mut gram = Array2::<f64>::zeros((dim, dim));
    let mut rhs = Array2::<f64>::zeros((dim, n_o));
    for (xc, yc) in train
        .0
        .axis_chunks_iter(Axis(0), RIDGE_CHUNK)
        .zip(train.1.axis_chunks_iter(Axis(0), RIDGE_CHUNK))
    {
        let st = esn.forward(&model.params, xc);
        ndarray::linalg::general_mat_mul(1.0, &st.t(), &st, 1.0, &mut gram);
        ndarray::linalg::general_mat_mul(1.0, &st.t(), &yc, 1.0, &mut rhs);
    }
    let w_o = ridge_solve(gram, rhs, cfg.ridge_lambda)?;
    w.slice_mut(&mut model.params)
        .copy_from_slice(w_o.as_slice().expect("standard layout"));
    let train_loss = mse(model.predict_flat(train.0)?.view(), train.1);
    let val_loss = if val.0.nrows() > 0 {
        mse(model.predict_flat(val.0)?.view(), val.1)
    } else {
        train_loss
    };
    Ok(Some(TrainReport {
        train_loss: vec![train_loss],
        val_loss: vec![val_loss],
        best_val_loss: vec![val_loss],
        best_epoch: 0,
        epochs_run: 1,
    }))
}
