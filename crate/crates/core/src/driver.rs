//! Prequential online loop, offline pre-training, and hyperparameter tuning.
//!
//! Every online step first predicts `ŷ_t` with the current parameters and
//! only then considers an update. The update counter `S` counts samples that
//! became fully observed since the last successful update, capped at the
//! online batch size `b`. When `S == b` the method updates on the batch
//! `I_t = {t−n−b+1, …, t−n}`; POLA variants reset `S` only when the applied
//! factor `β` is positive, so a zero factor makes the next step try again on
//! a batch shifted by one sample.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{fs_select, gd_meta, sigmoid, CandidateSet, GdMetaConfig, MetaState};
use crate::model::{batch_grad_at, RecurrentModel};
use crate::optim::{rmsprop_step, sgd_step, RmspropState};
use crate::windowing::{all_samples, batch_indices, Sample, Series};

/// Default grid for the moving-average window.
pub const Q_GRID: [usize; 5] = [1, 3, 5, 7, 9];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MethodKind {
    PretrainedFrozen,
    OnlineSgd,
    OnlineRmsprop,
    PolaFs,
    PolaGd,
}

impl MethodKind {
    pub const ALL: [MethodKind; 5] = [
        MethodKind::PretrainedFrozen,
        MethodKind::OnlineSgd,
        MethodKind::OnlineRmsprop,
        MethodKind::PolaFs,
        MethodKind::PolaGd,
    ];

    pub fn is_pola(self) -> bool {
        matches!(self, MethodKind::PolaFs | MethodKind::PolaGd)
    }

    pub fn updates(self) -> bool {
        self != MethodKind::PretrainedFrozen
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MethodKind::PretrainedFrozen => "pretrained",
            MethodKind::OnlineSgd => "online-sgd",
            MethodKind::OnlineRmsprop => "online-rmsprop",
            MethodKind::PolaFs => "pola-fs",
            MethodKind::PolaGd => "pola-gd",
        })
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown method '{s}'")))
    }
}

impl From<MethodKind> for String {
    fn from(m: MethodKind) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for MethodKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// A fully specified online method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Maximum learning rate `γ`.
    pub gamma: f64,
    /// Moving-average window for POLA's factor.
    pub q: usize,
    pub candidates: CandidateSet,
    pub gd: GdMetaConfig,
}

impl MethodSpec {
    pub fn new(kind: MethodKind, gamma: f64) -> Self {
        MethodSpec {
            kind,
            gamma,
            q: 1,
            candidates: CandidateSet::default(),
            gd: GdMetaConfig::default(),
        }
    }

    pub fn with_q(mut self, q: usize) -> Self {
        self.q = q;
        self
    }

    pub fn with_gd(mut self, gd: GdMetaConfig) -> Self {
        self.gd = gd;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if self.q == 0 {
            return Err(Error::invalid("q must be at least 1"));
        }
        if self.kind == MethodKind::PolaGd {
            self.gd.validate()?;
        }
        Ok(())
    }

    fn initial_beta(&self) -> f64 {
        match self.kind {
            MethodKind::PretrainedFrozen => 0.0,
            MethodKind::PolaGd => sigmoid(0.0),
            _ => 1.0,
        }
    }
}

/// Offline pre-training settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub num_samples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            num_samples: 700,
            epochs: 500,
            lr: 0.1,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub model: RecurrentModel,
    /// Mean squared error per output entry, averaged over each epoch's
    /// mini-batches (measured before each batch's step).
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD over `samples` with a per-epoch shuffle drawn from `seed`.
///
/// Batches use the mean squared error per output entry, so `lr` does not
/// depend on batch size or horizon.
pub fn pretrain(model: &RecurrentModel, samples: &[Sample], cfg: &PretrainConfig, seed: u64) -> Result<PretrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("pre-training batch size must be at least 1"));
    }
    if samples.len() < cfg.num_samples {
        return Err(Error::invalid(format!(
            "pre-training needs {} samples, only {} available",
            cfg.num_samples,
            samples.len()
        )));
    }
    let train = &samples[..cfg.num_samples];
    let mut model = model.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 || train.is_empty() {
        return Ok(PretrainReport { model, epoch_losses });
    }
    let config = *model.config();
    let out_len = config.output_len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_0ff1_1e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch: Vec<Sample> = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i].clone()));
            let scale = 1.0 / (batch.len() as f64 * out_len);
            let (loss, grad) = crate::model::batch_loss_and_grad_at(&config, model.params(), &batch)?;
            epoch_loss += loss;
            let mut params = model.params().clone();
            params.axpy_in_place(-cfg.lr * scale, &grad)?;
            model.set_params(params)?;
        }
        epoch_losses.push(epoch_loss / (train.len() as f64 * out_len));
    }
    Ok(PretrainReport { model, epoch_losses })
}

/// All samples of a (standardized) series, addressable by their 1-based `t`.
#[derive(Clone, Debug)]
pub struct SampleStream {
    samples: Vec<Sample>,
    window_len: usize,
    horizon: usize,
}

impl SampleStream {
    pub fn new(series: &Series, window_len: usize, horizon: usize) -> Result<Self> {
        Ok(SampleStream {
            samples: all_samples(series, window_len, horizon)?,
            window_len,
            horizon,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Sample `s_t`.
    pub fn at(&self, t: usize) -> &Sample {
        &self.samples[t - self.window_len]
    }

    pub fn first_t(&self) -> usize {
        self.window_len
    }

    pub fn last_t(&self) -> usize {
        self.window_len + self.samples.len() - 1
    }

    /// The `t` of the `i`-th sample (0-based).
    pub fn t_of(&self, i: usize) -> usize {
        self.window_len + i
    }
}

/// Affine map from model space back to original units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaling {
    pub fn identity(dim: usize) -> Self {
        Scaling {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn of(series: &Series) -> Self {
        Scaling {
            mean: series.mean().to_vec(),
            std: series.std().to_vec(),
        }
    }

    fn restore(&self, values: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % d] + self.mean[i % d])
            .collect()
    }
}

/// One online step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// 0-based step within the online phase.
    pub step: usize,
    /// 1-based index of the last observation fed to the model.
    pub t: usize,
    /// Forecast `ŷ_t`, horizon-major, original units.
    pub prediction: Vec<f64>,
    /// Realized `y_t`, original units.
    pub target: Vec<f64>,
    /// Sum of squared errors of this step in original units.
    pub squared_error: f64,
    /// Effective learning rate in force after this step.
    pub gamma_t: f64,
    /// Raw meta estimate when this step ran a meta-stage.
    pub beta_v: Option<f64>,
}

/// A parameter update performed at step `t` with samples `first..=last`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub t: usize,
    pub first: usize,
    pub last: usize,
    pub beta: f64,
    /// Whether the parameters actually moved.
    pub applied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub method: MethodKind,
    pub window_len: usize,
    pub horizon: usize,
    pub dim: usize,
    pub rows: Vec<TraceRow>,
    pub updates: Vec<UpdateEvent>,
}

impl RunTrace {
    pub fn applied_updates(&self) -> usize {
        self.updates.iter().filter(|u| u.applied).count()
    }

    /// Update events whose batch reaches past what was observed at the time.
    pub fn causality_violations(&self) -> Vec<&UpdateEvent> {
        self.updates
            .iter()
            .filter(|u| u.last + self.horizon > u.t || u.first < self.window_len || u.first > u.last)
            .collect()
    }
}

/// Mutable state of one online run.
#[derive(Clone, Debug)]
pub struct DriverState {
    pub model: RecurrentModel,
    /// Samples observed since the last successful update, at most `b`.
    pub counter: usize,
    pub meta: MetaState,
    pub rmsprop: Option<RmspropState>,
    /// Factor applied at the most recent update.
    pub beta: f64,
}

impl DriverState {
    pub fn new(method: &MethodSpec, model: RecurrentModel) -> Result<Self> {
        let rmsprop = (method.kind == MethodKind::OnlineRmsprop).then(|| RmspropState::new(model.params()));
        Ok(DriverState {
            model,
            counter: 0,
            meta: MetaState::new(method.q)?,
            rmsprop,
            beta: method.initial_beta(),
        })
    }
}

/// Prequential run over the samples with `t` in `online`, starting from
/// `start`. Values in the trace are mapped back through `scaling`.
pub fn simulate(
    method: &MethodSpec,
    start: &RecurrentModel,
    stream: &SampleStream,
    online: RangeInclusive<usize>,
    b: usize,
    scaling: &Scaling,
) -> Result<RunTrace> {
    method.validate()?;
    if b < 2 {
        return Err(Error::invalid(format!("online batch size must exceed 1, got {b}")));
    }
    if online.is_empty() || *online.start() < stream.first_t() || *online.end() > stream.last_t() {
        return Err(Error::invalid("online range lies outside the sample stream"));
    }
    let cfg = *start.config();
    let (m, n) = (stream.window_len(), stream.horizon());
    let mut st = DriverState::new(method, start.clone())?;
    let mut rows = Vec::with_capacity(online.clone().count());
    let mut updates = Vec::new();

    for (step, t) in online.enumerate() {
        let sample = stream.at(t);
        let pred = st.model.predict(&sample.x)?;
        let prediction = scaling.restore(&pred);
        let target = scaling.restore(&sample.y);
        let squared_error = prediction.iter().zip(&target).map(|(p, y)| (p - y) * (p - y)).sum();

        // s_{t-n} became fully observed at this step
        st.counter = (st.counter + 1).min(b);
        let mut beta_v = None;
        if method.kind.updates() && st.counter == b && t >= m + n + b - 1 {
            let idx = batch_indices(t, m, n, b)?;
            let batch: Vec<Sample> = idx.all.iter().map(|&i| stream.at(i).clone()).collect();
            let theta = st.model.params().clone();
            let grad = batch_grad_at(&cfg, &theta, &batch)?;
            let beta = match method.kind {
                MethodKind::PretrainedFrozen => unreachable!(),
                MethodKind::OnlineSgd => {
                    st.model.set_params(sgd_step(&theta, &grad, method.gamma, 1.0)?)?;
                    1.0
                }
                MethodKind::OnlineRmsprop => {
                    let state = st.rmsprop.as_ref().expect("rmsprop state");
                    let (next, state) = rmsprop_step(&theta, &grad, state, method.gamma)?;
                    st.model.set_params(next)?;
                    st.rmsprop = Some(state);
                    1.0
                }
                MethodKind::PolaFs | MethodKind::PolaGd => {
                    let (tr, va): (Vec<Sample>, Vec<Sample>) = (
                        idx.train.iter().map(|&i| stream.at(i).clone()).collect(),
                        idx.val.iter().map(|&i| stream.at(i).clone()).collect(),
                    );
                    let train = crate::model::BatchObjective { config: &cfg, batch: &tr };
                    let val = crate::model::BatchObjective { config: &cfg, batch: &va };
                    let bv = if method.kind == MethodKind::PolaFs {
                        fs_select(&train, &val, &theta, method.gamma, &method.candidates)?
                    } else {
                        let (bv, alpha) = gd_meta(&train, &val, &theta, method.gamma, &method.gd, st.meta.alpha)?;
                        st.meta.alpha = alpha;
                        bv
                    };
                    beta_v = Some(bv);
                    let beta = st.meta.smooth_beta(bv)?;
                    st.model.set_params(sgd_step(&theta, &grad, method.gamma, beta)?)?;
                    beta
                }
            };
            st.beta = beta;
            updates.push(UpdateEvent {
                t,
                first: idx.all[0],
                last: *idx.all.last().expect("non-empty batch"),
                beta,
                applied: beta > 0.0 && method.gamma > 0.0,
            });
            if beta > 0.0 {
                st.counter = 0;
            }
        }

        rows.push(TraceRow {
            step,
            t,
            prediction,
            target,
            squared_error,
            gamma_t: method.gamma * st.beta,
            beta_v,
        });
    }

    Ok(RunTrace {
        method: method.kind,
        window_len: m,
        horizon: n,
        dim: cfg.input_dim,
        rows,
        updates,
    })
}

/// Root-mean-square error over all trace entries, per dimension, divided by
/// that dimension's standard deviation, averaged over dimensions.
pub fn normalized_rmse(trace: &RunTrace, std: &[f64]) -> Result<f64> {
    if trace.rows.is_empty() {
        return Err(Error::invalid("empty trace"));
    }
    let d = trace.dim;
    if std.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: std.len(),
        });
    }
    let mut sse = vec![0.0; d];
    let mut count = vec![0usize; d];
    for row in &trace.rows {
        for (i, (p, y)) in row.prediction.iter().zip(&row.target).enumerate() {
            sse[i % d] += (p - y) * (p - y);
            count[i % d] += 1;
        }
    }
    let score = (0..d)
        .map(|k| (sse[k] / count[k] as f64).sqrt() / std[k])
        .sum::<f64>()
        / d as f64;
    if !score.is_finite() {
        return Err(Error::NonFinite("normalized rmse"));
    }
    Ok(score)
}

/// Normalized RMSE against the statistics of the raw series.
pub fn evaluate(trace: &RunTrace, series: &Series) -> Result<f64> {
    normalized_rmse(trace, series.std())
}

/// Shared state for tuning: a model pre-trained on the first two thirds of
/// the pre-training samples, with the last third held out for simulation.
#[derive(Clone, Debug)]
pub struct TuningContext {
    pub warm: RecurrentModel,
    pub validation: RangeInclusive<usize>,
}

impl TuningContext {
    pub fn prepare(start: &RecurrentModel, stream: &SampleStream, cfg: &PretrainConfig, seed: u64) -> Result<Self> {
        let total = cfg.num_samples.min(stream.len());
        if total < 3 {
            return Err(Error::invalid("tuning needs at least 3 pre-training samples"));
        }
        let n_train = total * 2 / 3;
        let warm_cfg = PretrainConfig {
            num_samples: n_train,
            ..*cfg
        };
        let warm = pretrain(start, stream.samples(), &warm_cfg, seed)?.model;
        Ok(TuningContext {
            warm,
            validation: stream.t_of(n_train)..=stream.t_of(total - 1),
        })
    }

    /// Validation score of one method; divergence scores as infinity.
    pub fn score(&self, method: &MethodSpec, stream: &SampleStream, b: usize) -> f64 {
        let d = self.warm.config().input_dim;
        simulate(method, &self.warm, stream, self.validation.clone(), b, &Scaling::identity(d))
            .and_then(|tr| normalized_rmse(&tr, &vec![1.0; d]))
            .unwrap_or(f64::INFINITY)
    }
}

fn argmin_first<T: Copy>(scored: impl IntoIterator<Item = (T, f64)>) -> Option<(T, f64)> {
    let mut best: Option<(T, f64)> = None;
    for (v, s) in scored {
        if best.map_or(true, |(_, bs)| s < bs) {
            best = Some((v, s));
        }
    }
    best
}

/// Picks the maximum learning rate with the lowest validation score;
/// ties go to the smaller rate.
pub fn tune_gamma(
    ctx: &TuningContext,
    method: &MethodSpec,
    stream: &SampleStream,
    candidates: &CandidateSet,
    b: usize,
) -> Result<f64> {
    let mut rates = candidates.rates().to_vec();
    rates.sort_by(f64::total_cmp);
    if rates.len() == 1 {
        return Ok(rates[0]);
    }
    let scored = rates.iter().map(|&g| {
        let spec = MethodSpec { gamma: g, ..method.clone() };
        (g, ctx.score(&spec, stream, b))
    });
    argmin_first(scored)
        .map(|(g, _)| g)
        .ok_or_else(|| Error::invalid("empty candidate set"))
}

/// Picks the moving-average window with the lowest validation score; ties go
/// to the smaller window.
pub fn tune_q(ctx: &TuningContext, method: &MethodSpec, stream: &SampleStream, grid: &[usize], b: usize) -> Result<usize> {
    if !method.kind.is_pola() {
        return Err(Error::invalid(format!("{} has no moving-average window", method.kind)));
    }
    let mut grid = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let scored = grid.iter().map(|&q| {
        let spec = MethodSpec { q, ..method.clone() };
        (q, ctx.score(&spec, stream, b))
    });
    argmin_first(scored)
        .map(|(q, _)| q)
        .ok_or_else(|| Error::invalid("empty q grid"))
}

/// Everything needed to run one method end to end on one series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub pretrain: PretrainConfig,
    pub b: usize,
    pub candidates: CandidateSet,
    pub q_grid: Vec<usize>,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            pretrain: PretrainConfig::default(),
            b: 10,
            candidates: CandidateSet::default(),
            q_grid: Q_GRID.to_vec(),
        }
    }
}

/// First online `t`: the sample right after the pre-training samples.
pub fn online_range(stream: &SampleStream, pretrain: &PretrainConfig) -> Result<RangeInclusive<usize>> {
    if stream.len() <= pretrain.num_samples {
        return Err(Error::invalid(format!(
            "series yields {} samples; pre-training uses {} and leaves none for the online phase",
            stream.len(),
            pretrain.num_samples
        )));
    }
    Ok(stream.t_of(pretrain.num_samples)..=stream.last_t())
}

/// Pre-trains from a seeded initialization and runs `method` online with
/// the given (already tuned) hyperparameters. The series is standardized
/// internally; the trace is in original units.
pub fn run_online(
    method: &MethodSpec,
    series: &Series,
    config: crate::model::ModelConfig,
    protocol: &Protocol,
    seed: u64,
) -> Result<RunTrace> {
    let stream = SampleStream::new(&series.standardized(), config.window_len, config.horizon)?;
    let online = online_range(&stream, &protocol.pretrain)?;
    let start = RecurrentModel::init(config, seed)?;
    let pre = pretrain(&start, stream.samples(), &protocol.pretrain, seed)?;
    simulate(method, &pre.model, &stream, online, protocol.b, &Scaling::of(series))
}
