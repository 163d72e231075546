//! Elman RNN, LSTM and GRU forecasters with a dense multi-output readout.
//!
//! A forecaster consumes a window of `window_len` observations (each of
//! `input_dim` values) starting from a zero hidden state, and maps the final
//! hidden state to all `horizon * input_dim` forecast values at once:
//!
//! ```text
//! y = Rᵀ h_m + c          R: hidden_units × (horizon·input_dim)
//! ```
//!
//! Cell equations (gate blocks are stacked row-wise in `w_in`, `w_rec`, `bias`):
//!
//! ```text
//! RNN   h = tanh(W x + U h' + b)
//! LSTM  [i f g o] = [σ σ tanh σ](W x + U h' + b)
//!       c = f⊙c' + i⊙g,  h = o⊙tanh(c)
//! GRU   [z r] = σ(W_zr x + U_zr h' + b_zr)
//!       n = tanh(W_n x + U_n (r⊙h') + b_n)
//!       h = (1−z)⊙h' + z⊙n
//! ```
//!
//! Losses are sums of squared errors over every output entry and every
//! sample of a batch. Gradients are exact (backpropagation through time).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    matvec_acc, matvec_into, matvec_t_acc, outer_acc, Layout, Objective, ParamVector, Vector,
};
use crate::windowing::Sample;

/// Recurrent cell architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Rnn,
    Lstm,
    Gru,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Rnn, CellKind::Lstm, CellKind::Gru];

    /// Number of stacked gate blocks in the input/recurrent matrices.
    pub fn gates(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Rnn => "rnn",
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        })
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" => Ok(CellKind::Rnn),
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::invalid(format!("unknown cell kind '{other}'"))),
        }
    }
}

pub const DEFAULT_HIDDEN_UNITS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cell: CellKind,
    pub input_dim: usize,
    pub hidden_units: usize,
    pub window_len: usize,
    pub horizon: usize,
}

impl ModelConfig {
    pub fn new(cell: CellKind, input_dim: usize, window_len: usize, horizon: usize) -> Self {
        ModelConfig {
            cell,
            input_dim,
            hidden_units: DEFAULT_HIDDEN_UNITS,
            window_len,
            horizon,
        }
    }

    pub fn with_hidden_units(mut self, hidden_units: usize) -> Self {
        self.hidden_units = hidden_units;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("input_dim", self.input_dim),
            ("hidden_units", self.hidden_units),
            ("window_len", self.window_len),
            ("horizon", self.horizon),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn output_len(&self) -> usize {
        self.horizon * self.input_dim
    }

    pub fn input_len(&self) -> usize {
        self.window_len * self.input_dim
    }

    /// Parameter layout; a pure function of the config.
    pub fn layout(&self) -> Layout {
        let h = self.hidden_units;
        let gh = self.cell.gates() * h;
        Layout::new()
            .push("w_in", gh, self.input_dim)
            .push("w_rec", gh, h)
            .push("bias", gh, 1)
            .push("readout", h, self.output_len())
            .push("readout_bias", self.output_len(), 1)
    }
}

/// Borrowed views of the parameter blocks.
struct Weights<'a> {
    w_in: &'a [f64],
    w_rec: &'a [f64],
    bias: &'a [f64],
    readout: &'a [f64],
    readout_bias: &'a [f64],
}

/// Mutable views of the gradient blocks (same order as [`Weights`]).
struct WeightsMut<'a> {
    w_in: &'a mut [f64],
    w_rec: &'a mut [f64],
    bias: &'a mut [f64],
    readout: &'a mut [f64],
    readout_bias: &'a mut [f64],
}

fn split_sizes(cfg: &ModelConfig) -> [usize; 5] {
    let h = cfg.hidden_units;
    let gh = cfg.cell.gates() * h;
    [gh * cfg.input_dim, gh * h, gh, h * cfg.output_len(), cfg.output_len()]
}

fn weights<'a>(cfg: &ModelConfig, p: &'a [f64]) -> Weights<'a> {
    let [a, b, c, d, _] = split_sizes(cfg);
    let (w_in, rest) = p.split_at(a);
    let (w_rec, rest) = rest.split_at(b);
    let (bias, rest) = rest.split_at(c);
    let (readout, readout_bias) = rest.split_at(d);
    Weights {
        w_in,
        w_rec,
        bias,
        readout,
        readout_bias,
    }
}

fn weights_mut<'a>(cfg: &ModelConfig, p: &'a mut [f64]) -> WeightsMut<'a> {
    let [a, b, c, d, _] = split_sizes(cfg);
    let (w_in, rest) = p.split_at_mut(a);
    let (w_rec, rest) = rest.split_at_mut(b);
    let (bias, rest) = rest.split_at_mut(c);
    let (readout, readout_bias) = rest.split_at_mut(d);
    WeightsMut {
        w_in,
        w_rec,
        bias,
        readout,
        readout_bias,
    }
}

#[inline]
fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// Per-step values kept from the forward pass for BPTT.
///
/// `hidden[t]` is the state after step `t` (index 0 is the zero start state);
/// `gates[t]` holds the activated gate values of step `t+1`; `cells` is only
/// populated for LSTM.
struct Trace {
    hidden: Vec<Vec<f64>>,
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
}

fn forward(cfg: &ModelConfig, w: &Weights<'_>, x: &[f64], keep: bool) -> (Vec<f64>, Option<Trace>) {
    let h = cfg.hidden_units;
    let d = cfg.input_dim;
    let gh = cfg.cell.gates() * h;
    let mut state = vec![0.0; h];
    let mut cell = vec![0.0; h];
    let mut pre = vec![0.0; gh];
    let mut trace = keep.then(|| Trace {
        hidden: vec![state.clone()],
        gates: Vec::with_capacity(cfg.window_len),
        cells: if cfg.cell == CellKind::Lstm {
            vec![cell.clone()]
        } else {
            Vec::new()
        },
    });

    for x_t in x.chunks_exact(d) {
        pre.copy_from_slice(w.bias);
        matvec_acc(w.w_in, d, x_t, &mut pre);
        match cfg.cell {
            CellKind::Rnn => {
                matvec_acc(w.w_rec, h, &state, &mut pre);
                for (s, a) in state.iter_mut().zip(&pre) {
                    *s = a.tanh();
                }
            }
            CellKind::Lstm => {
                matvec_acc(w.w_rec, h, &state, &mut pre);
                for j in 0..h {
                    let i = sigmoid(pre[j]);
                    let f = sigmoid(pre[h + j]);
                    let g = pre[2 * h + j].tanh();
                    let o = sigmoid(pre[3 * h + j]);
                    pre[j] = i;
                    pre[h + j] = f;
                    pre[2 * h + j] = g;
                    pre[3 * h + j] = o;
                    cell[j] = f * cell[j] + i * g;
                    state[j] = o * cell[j].tanh();
                }
            }
            CellKind::Gru => {
                // update and reset gates see h'; the candidate sees r⊙h'
                matvec_acc(&w.w_rec[..2 * h * h], h, &state, &mut pre[..2 * h]);
                for a in &mut pre[..2 * h] {
                    *a = sigmoid(*a);
                }
                let gated: Vec<f64> = (0..h).map(|j| pre[h + j] * state[j]).collect();
                matvec_acc(&w.w_rec[2 * h * h..], h, &gated, &mut pre[2 * h..]);
                for j in 0..h {
                    let n = pre[2 * h + j].tanh();
                    pre[2 * h + j] = n;
                    let z = pre[j];
                    state[j] = (1.0 - z) * state[j] + z * n;
                }
            }
        }
        debug_assert!(state.iter().all(|v| v.abs() <= 1.0));
        if let Some(tr) = trace.as_mut() {
            tr.hidden.push(state.clone());
            tr.gates.push(pre.clone());
            if cfg.cell == CellKind::Lstm {
                tr.cells.push(cell.clone());
            }
        }
    }

    let mut out = w.readout_bias.to_vec();
    // readout is hidden × outputs, so y = Rᵀ h
    matvec_t_acc(w.readout, cfg.output_len(), &state, &mut out);
    (out, trace)
}

/// Accumulates d(loss)/d(params) for one sample into `g`, given the
/// gradient `dy` of the loss with respect to the outputs.
fn backward(cfg: &ModelConfig, w: &Weights<'_>, x: &[f64], tr: &Trace, dy: &[f64], g: &mut WeightsMut<'_>) {
    let h = cfg.hidden_units;
    let d = cfg.input_dim;
    let gh = cfg.cell.gates() * h;
    let m = cfg.window_len;
    let out_len = cfg.output_len();

    for (gb, v) in g.readout_bias.iter_mut().zip(dy) {
        *gb += v;
    }
    outer_acc(g.readout, &tr.hidden[m], dy);
    let mut dh = vec![0.0; h];
    matvec_into(w.readout, out_len, dy, &mut dh);

    let mut dc = vec![0.0; h];
    let mut dpre = vec![0.0; gh];
    for t in (0..m).rev() {
        let x_t = &x[t * d..(t + 1) * d];
        let h_prev = &tr.hidden[t];
        let act = &tr.gates[t];
        let mut dh_prev = vec![0.0; h];
        match cfg.cell {
            CellKind::Rnn => {
                let h_t = &tr.hidden[t + 1];
                for j in 0..h {
                    dpre[j] = dh[j] * (1.0 - h_t[j] * h_t[j]);
                }
                outer_acc(g.w_rec, &dpre, h_prev);
                matvec_t_acc(w.w_rec, h, &dpre, &mut dh_prev);
            }
            CellKind::Lstm => {
                let c_prev = &tr.cells[t];
                let c_t = &tr.cells[t + 1];
                for j in 0..h {
                    let (i, f, gg, o) = (act[j], act[h + j], act[2 * h + j], act[3 * h + j]);
                    let tc = c_t[j].tanh();
                    let d_o = dh[j] * tc;
                    let dct = dc[j] + dh[j] * o * (1.0 - tc * tc);
                    let d_i = dct * gg;
                    let d_g = dct * i;
                    let d_f = dct * c_prev[j];
                    dc[j] = dct * f;
                    dpre[j] = d_i * i * (1.0 - i);
                    dpre[h + j] = d_f * f * (1.0 - f);
                    dpre[2 * h + j] = d_g * (1.0 - gg * gg);
                    dpre[3 * h + j] = d_o * o * (1.0 - o);
                }
                outer_acc(g.w_rec, &dpre, h_prev);
                matvec_t_acc(w.w_rec, h, &dpre, &mut dh_prev);
            }
            CellKind::Gru => {
                let mut dr = vec![0.0; h];
                for j in 0..h {
                    let (z, n) = (act[j], act[2 * h + j]);
                    let dz = dh[j] * (n - h_prev[j]);
                    let dn = dh[j] * z;
                    dh_prev[j] = dh[j] * (1.0 - z);
                    dpre[2 * h + j] = dn * (1.0 - n * n);
                    dpre[j] = dz * z * (1.0 - z);
                }
                let gated: Vec<f64> = (0..h).map(|j| act[h + j] * h_prev[j]).collect();
                outer_acc(&mut g.w_rec[2 * h * h..], &dpre[2 * h..], &gated);
                let mut dgated = vec![0.0; h];
                matvec_t_acc(&w.w_rec[2 * h * h..], h, &dpre[2 * h..], &mut dgated);
                for j in 0..h {
                    let r = act[h + j];
                    dr[j] = dgated[j] * h_prev[j];
                    dh_prev[j] += dgated[j] * r;
                    dpre[h + j] = dr[j] * r * (1.0 - r);
                }
                outer_acc(&mut g.w_rec[..2 * h * h], &dpre[..2 * h], h_prev);
                matvec_t_acc(&w.w_rec[..2 * h * h], h, &dpre[..2 * h], &mut dh_prev);
            }
        }
        outer_acc(g.w_in, &dpre, x_t);
        for (b, v) in g.bias.iter_mut().zip(&dpre) {
            *b += v;
        }
        dh = dh_prev;
    }
}

fn check_sample(cfg: &ModelConfig, s: &Sample) -> Result<()> {
    if s.x.len() != cfg.input_len() {
        return Err(Error::DimensionMismatch {
            expected: cfg.input_len(),
            actual: s.x.len(),
        });
    }
    if s.y.len() != cfg.output_len() {
        return Err(Error::DimensionMismatch {
            expected: cfg.output_len(),
            actual: s.y.len(),
        });
    }
    Ok(())
}

fn sample_loss(cfg: &ModelConfig, params: &[f64], s: &Sample) -> f64 {
    let (pred, _) = forward(cfg, &weights(cfg, params), &s.x, false);
    pred.iter().zip(&s.y).map(|(p, y)| (p - y) * (p - y)).sum()
}

/// Sum of squared errors of `batch` under `params`.
pub fn batch_loss_at(cfg: &ModelConfig, params: &ParamVector, batch: &[Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for s in batch {
        check_sample(cfg, s)?;
        total += sample_loss(cfg, params.as_slice(), s);
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("batch loss"));
    }
    Ok(total)
}

/// Exact gradient of [`batch_loss_at`] with respect to `params`.
pub fn batch_grad_at(cfg: &ModelConfig, params: &ParamVector, batch: &[Sample]) -> Result<ParamVector> {
    batch_loss_and_grad_at(cfg, params, batch).map(|(_, g)| g)
}

/// Batch loss and its gradient from a single forward/backward sweep.
pub fn batch_loss_and_grad_at(cfg: &ModelConfig, params: &ParamVector, batch: &[Sample]) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let w = weights(cfg, params.as_slice());
    let mut grad = ParamVector::zeros_like(params);
    let mut loss = 0.0;
    {
        let mut g = weights_mut(cfg, grad.as_mut_slice());
        for s in batch {
            check_sample(cfg, s)?;
            let (pred, trace) = forward(cfg, &w, &s.x, true);
            let dy: Vec<f64> = pred.iter().zip(&s.y).map(|(p, y)| 2.0 * (p - y)).collect();
            loss += dy.iter().map(|v| 0.25 * v * v).sum::<f64>();
            backward(cfg, &w, &s.x, &trace.expect("trace requested"), &dy, &mut g);
        }
    }
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite("batch gradient"));
    }
    Ok((loss, grad))
}

/// A recurrent forecaster: configuration plus flat parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentModel {
    config: ModelConfig,
    params: ParamVector,
}

impl RecurrentModel {
    /// Weights uniform in ±1/√hidden_units, biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(config.layout());
        let bound = 1.0 / (config.hidden_units as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamVector::zeros(layout.clone());
        for block in layout.blocks() {
            if block.name.ends_with("bias") {
                continue;
            }
            for v in &mut params.as_mut_slice()[block.range()] {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        Ok(RecurrentModel { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamVector) -> Result<Self> {
        config.validate()?;
        if params.layout().as_ref() != &config.layout() {
            return Err(Error::LayoutMismatch);
        }
        Ok(RecurrentModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        if !params.same_layout(&self.params) {
            return Err(Error::LayoutMismatch);
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("model parameters"));
        }
        self.params = params;
        Ok(())
    }

    /// Forecast for one input window (`window_len × input_dim`, time-major).
    pub fn predict(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.config.input_len() {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_len(),
                actual: x.len(),
            });
        }
        let (out, _) = forward(&self.config, &weights(&self.config, self.params.as_slice()), x, false);
        Vector::new(out)
    }

    /// Squared error ‖y − f(x)‖² of one sample.
    pub fn loss(&self, s: &Sample) -> Result<f64> {
        check_sample(&self.config, s)?;
        Ok(sample_loss(&self.config, self.params.as_slice(), s))
    }

    pub fn batch_loss(&self, batch: &[Sample]) -> Result<f64> {
        batch_loss_at(&self.config, &self.params, batch)
    }

    pub fn batch_grad(&self, batch: &[Sample]) -> Result<ParamVector> {
        batch_grad_at(&self.config, &self.params, batch)
    }

    /// The batch loss as a function of the parameters.
    pub fn objective<'a>(&'a self, batch: &'a [Sample]) -> BatchObjective<'a> {
        BatchObjective {
            config: &self.config,
            batch,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            cell: self.config.cell,
            input_dim: self.config.input_dim,
            hidden_units: self.config.hidden_units,
            window_len: self.config.window_len,
            horizon: self.config.horizon,
            params: self.params.as_slice().to_vec(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let config = ModelConfig {
            cell: ck.cell,
            input_dim: ck.input_dim,
            hidden_units: ck.hidden_units,
            window_len: ck.window_len,
            horizon: ck.horizon,
        };
        config.validate()?;
        let params = ParamVector::new(Arc::new(config.layout()), ck.params)?;
        RecurrentModel::from_params(config, params)
    }
}

/// Sum-of-squares loss of a fixed batch, viewed as a function of parameters.
#[derive(Clone, Copy)]
pub struct BatchObjective<'a> {
    pub config: &'a ModelConfig,
    pub batch: &'a [Sample],
}

impl Objective for BatchObjective<'_> {
    fn loss(&self, theta: &ParamVector) -> Result<f64> {
        batch_loss_at(self.config, theta, self.batch)
    }

    fn grad(&self, theta: &ParamVector) -> Result<ParamVector> {
        batch_grad_at(self.config, theta, self.batch)
    }
}

/// JSON checkpoint; field order is part of the format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub cell: CellKind,
    pub input_dim: usize,
    pub hidden_units: usize,
    pub window_len: usize,
    pub horizon: usize,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_grad, ParamVector};

    fn random_sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng, t: usize) -> Sample {
        Sample {
            t,
            x: (0..cfg.input_len()).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            y: (0..cfg.output_len()).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        }
    }

    #[test]
    fn layout_size_for_reference_rnn() {
        let cfg = ModelConfig::new(CellKind::Rnn, 1, 48, 5);
        let layout = cfg.layout();
        let shapes: Vec<_> = layout.blocks().iter().map(|b| (b.name.as_str(), b.shape)).collect();
        assert_eq!(
            shapes,
            vec![
                ("w_in", (10, 1)),
                ("w_rec", (10, 10)),
                ("bias", (10, 1)),
                ("readout", (10, 5)),
                ("readout_bias", (5, 1)),
            ]
        );
        assert_eq!(layout.total_len(), 175);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig::new(CellKind::Lstm, 2, 6, 3);
        let a = RecurrentModel::init(cfg, 11).unwrap();
        let b = RecurrentModel::init(cfg, 11).unwrap();
        let c = RecurrentModel::init(cfg, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        let bound = 1.0 / 10f64.sqrt();
        assert!(a.params().as_slice().iter().all(|v| v.abs() <= bound));
        assert!(a.params().block("bias").unwrap().iter().all(|&v| v == 0.0));
        assert!(a.params().block("readout_bias").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_predict_readout_bias() {
        for cell in CellKind::ALL {
            let cfg = ModelConfig::new(cell, 2, 4, 3);
            let model = RecurrentModel::init(cfg, 0).unwrap();
            let zero = ParamVector::zeros(model.params().layout().clone());
            let mut m = model.clone();
            m.set_params(zero.clone()).unwrap();
            let out = m.predict(&[0.3; 8]).unwrap();
            assert!(out.iter().all(|&v| v == 0.0));

            let mut biased = zero;
            let rb = biased.layout().block("readout_bias").unwrap().range();
            for v in &mut biased.as_mut_slice()[rb] {
                *v = 0.7;
            }
            m.set_params(biased).unwrap();
            assert!(m.predict(&[5.0; 8]).unwrap().iter().all(|&v| v == 0.7));
        }
    }

    #[test]
    fn single_unit_rnn_constant_forecast() {
        let cfg = ModelConfig::new(CellKind::Rnn, 1, 5, 2).with_hidden_units(1);
        let layout = Arc::new(cfg.layout());
        let mut p = ParamVector::zeros(layout.clone());
        let rb = layout.block("readout_bias").unwrap().range();
        p.as_mut_slice()[rb].fill(-1.25);
        let m = RecurrentModel::from_params(cfg, p).unwrap();
        assert_eq!(m.predict(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap().as_slice(), &[-1.25, -1.25]);
    }

    /// Straight-line GRU recomputation with explicit per-gate matrices.
    fn gru_reference(cfg: &ModelConfig, p: &[f64], x: &[f64]) -> Vec<f64> {
        let (h, d, o) = (cfg.hidden_units, cfg.input_dim, cfg.output_len());
        let w_in = &p[..3 * h * d];
        let w_rec = &p[3 * h * d..3 * h * d + 3 * h * h];
        let b = &p[3 * h * d + 3 * h * h..3 * h * d + 3 * h * h + 3 * h];
        let r_out = &p[3 * h * d + 3 * h * h + 3 * h..3 * h * d + 3 * h * h + 3 * h + h * o];
        let c = &p[p.len() - o..];
        let w = |gate: usize, j: usize, k: usize| w_in[(gate * h + j) * d + k];
        let u = |gate: usize, j: usize, k: usize| w_rec[(gate * h + j) * h + k];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut state = vec![0.0; h];
        for step in 0..cfg.window_len {
            let xt = &x[step * d..(step + 1) * d];
            let mut z = vec![0.0; h];
            let mut r = vec![0.0; h];
            for j in 0..h {
                let mut az = b[j];
                let mut ar = b[h + j];
                for k in 0..d {
                    az += w(0, j, k) * xt[k];
                    ar += w(1, j, k) * xt[k];
                }
                for k in 0..h {
                    az += u(0, j, k) * state[k];
                    ar += u(1, j, k) * state[k];
                }
                z[j] = sig(az);
                r[j] = sig(ar);
            }
            let mut next = vec![0.0; h];
            for j in 0..h {
                let mut an = b[2 * h + j];
                for k in 0..d {
                    an += w(2, j, k) * xt[k];
                }
                for k in 0..h {
                    an += u(2, j, k) * r[k] * state[k];
                }
                let n = an.tanh();
                next[j] = (1.0 - z[j]) * state[j] + z[j] * n;
            }
            state = next;
        }
        (0..o)
            .map(|j| c[j] + (0..h).map(|i| r_out[i * o + j] * state[i]).sum::<f64>())
            .collect()
    }

    #[test]
    fn gru_matches_reference_recomputation() {
        let cfg = ModelConfig::new(CellKind::Gru, 2, 7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..5 {
            let model = RecurrentModel::init(cfg, seed).unwrap();
            let mut p = model.params().clone();
            // non-zero biases so every term is exercised
            for v in p.as_mut_slice() {
                *v += rng.gen_range(-0.2..0.2);
            }
            let model = RecurrentModel::from_params(cfg, p).unwrap();
            let s = random_sample(&cfg, &mut rng, 0);
            let got = model.predict(&s.x).unwrap();
            let want = gru_reference(&cfg, model.params().as_slice(), &s.x);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn loss_examples() {
        let cfg = ModelConfig::new(CellKind::Rnn, 1, 3, 2);
        let zero = ParamVector::zeros(Arc::new(cfg.layout()));
        let m = RecurrentModel::from_params(cfg, zero).unwrap();
        let s = Sample { t: 3, x: vec![1.0, 2.0, 3.0], y: vec![0.0, 0.0] };
        assert_eq!(m.loss(&s).unwrap(), 0.0);

        let mut p = ParamVector::zeros(Arc::new(cfg.layout()));
        let rb = cfg.layout().block("readout_bias").unwrap().range();
        p.as_mut_slice()[rb].fill(1.0);
        let m = RecurrentModel::from_params(cfg, p).unwrap();
        assert_eq!(m.loss(&s).unwrap(), 2.0);

        let model = RecurrentModel::init(cfg, 3).unwrap();
        let s = Sample { t: 3, x: vec![0.5, -0.1, 0.9], y: vec![0.2, 0.4] };
        let pred = model.predict(&s.x).unwrap();
        let resid = ParamVector::from_slice(&[pred[0] - 0.2, pred[1] - 0.4]).unwrap();
        assert!((model.loss(&s).unwrap() - resid.norm_sq()).abs() < 1e-15);
    }

    #[test]
    fn batch_loss_is_a_sum() {
        let cfg = ModelConfig::new(CellKind::Lstm, 1, 4, 2);
        let model = RecurrentModel::init(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<_> = (0..5).map(|i| random_sample(&cfg, &mut rng, i)).collect();
        let single = model.loss(&batch[0]).unwrap();
        assert_eq!(model.batch_loss(&batch[..1]).unwrap(), single);
        let twice = vec![batch[0].clone(), batch[0].clone()];
        assert!((model.batch_loss(&twice).unwrap() - 2.0 * single).abs() < 1e-14);
        let brute: f64 = batch.iter().map(|s| model.loss(s).unwrap()).sum();
        assert!((model.batch_loss(&batch).unwrap() - brute).abs() < 1e-12);
        assert!(matches!(model.batch_loss(&[]), Err(Error::EmptyBatch)));
        assert!(matches!(model.batch_grad(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let cfg = ModelConfig::new(CellKind::Rnn, 2, 3, 1);
        let model = RecurrentModel::init(cfg, 0).unwrap();
        assert!(matches!(model.predict(&[1.0; 5]), Err(Error::DimensionMismatch { .. })));
        let bad = Sample { t: 3, x: vec![0.0; 6], y: vec![0.0; 3] };
        assert!(model.loss(&bad).is_err());
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        for cell in CellKind::ALL {
            let cfg = ModelConfig::new(cell, 2, 4, 2).with_hidden_units(3);
            let model = RecurrentModel::init(cfg, 8).unwrap();
            let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
            let y = model.predict(&x).unwrap().into_inner();
            let g = model.batch_grad(&[Sample { t: 4, x, y }]).unwrap();
            assert!(g.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gradient_matches_finite_differences_and_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for cell in CellKind::ALL {
            let cfg = ModelConfig::new(cell, 2, 5, 2).with_hidden_units(4);
            let model = RecurrentModel::init(cfg, 1).unwrap();
            let batch: Vec<_> = (0..3).map(|i| random_sample(&cfg, &mut rng, i)).collect();
            let exact = model.batch_grad(&batch).unwrap();
            let obj = model.objective(&batch);
            let fd = finite_difference_grad(|p| obj.loss(p), model.params(), 1e-5).unwrap();
            for (a, b) in exact.as_slice().iter().zip(fd.as_slice()) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
                assert!(rel < 1e-4, "{cell}: {a} vs {b}");
            }

            let g0 = model.batch_grad(&batch[..1]).unwrap();
            let g1 = model.batch_grad(&batch[1..2]).unwrap();
            let g01 = model.batch_grad(&batch[..2]).unwrap();
            for ((a, b), c) in g0.as_slice().iter().zip(g1.as_slice()).zip(g01.as_slice()) {
                assert!((a + b - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_is_deterministic() {
        let cfg = ModelConfig::new(CellKind::Gru, 3, 6, 2);
        let model = RecurrentModel::init(cfg, 4).unwrap();
        let x: Vec<f64> = (0..18).map(|i| (i as f64).cos()).collect();
        assert_eq!(model.predict(&x).unwrap(), model.predict(&x).unwrap());
    }

    #[test]
    fn checkpoint_field_order_and_round_trip() {
        let cfg = ModelConfig::new(CellKind::Gru, 1, 3, 2).with_hidden_units(2);
        let model = RecurrentModel::init(cfg, 9).unwrap();
        let json = model.to_checkpoint().to_json().unwrap();
        let keys = ["\"cell\"", "\"input_dim\"", "\"hidden_units\"", "\"window_len\"", "\"horizon\"", "\"params\""];
        let pos: Vec<usize> = keys.iter().map(|k| json.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(json.contains("\"gru\""));
        let back = RecurrentModel::from_checkpoint(Checkpoint::from_json(&json).unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn checkpoint_rejects_wrong_param_count() {
        let ck = Checkpoint {
            cell: CellKind::Rnn,
            input_dim: 1,
            hidden_units: 2,
            window_len: 3,
            horizon: 1,
            params: vec![0.0; 3],
        };
        assert!(RecurrentModel::from_checkpoint(ck).is_err());
    }
}
