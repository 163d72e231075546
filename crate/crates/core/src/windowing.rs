//! Sliding-window samples and update-batch index sets.
//!
//! Time indices are 1-based: `z_1` is the first observation and the sample
//! `s_t` has its last input observation at `t`. With history length `m` and
//! horizon `n`,
//!
//! ```text
//! x_t = [z_{t-m+1}, …, z_t]      y_t = [z_{t+1}, …, z_{t+n}]
//! ```
//!
//! so at time `t` the fully observed samples are `s_m, …, s_{t-n}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Vector;

/// A multivariate series with its per-dimension statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    dim: usize,
    data: Vec<f64>,
    mean: Vector,
    std: Vector,
}

impl Series {
    /// Builds a series from observation rows. Every row must have the same
    /// dimension and no dimension may be constant.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or_else(|| Error::invalid("empty series"))?;
        if dim == 0 {
            return Err(Error::invalid("observations must have at least one dimension"));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::invalid(format!(
                    "observation {} has dimension {}, expected {dim}",
                    i + 1,
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Series::from_flat(dim, data)
    }

    pub fn univariate(values: Vec<f64>) -> Result<Self> {
        Series::from_flat(1, values)
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::invalid("series data length must be a positive multiple of its dimension"));
        }
        let data = Vector::new(data)?.into_inner();
        let len = data.len() / dim;
        let mut mean = vec![0.0; dim];
        for row in data.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= len as f64);
        let mut var = vec![0.0; dim];
        for row in data.chunks_exact(dim) {
            for k in 0..dim {
                let c = row[k] - mean[k];
                var[k] += c * c;
            }
        }
        // population convention (1/N)
        let std: Vec<f64> = var.iter().map(|v| (v / len as f64).sqrt()).collect();
        if let Some(k) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::invalid(format!("dimension {k} is constant")));
        }
        Ok(Series {
            dim,
            data,
            mean: Vector::new(mean)?,
            std: Vector::new(std)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Observation `z_t` (1-based).
    pub fn observation(&self, t: usize) -> &[f64] {
        &self.data[(t - 1) * self.dim..t * self.dim]
    }

    /// All observations, time-major.
    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn std(&self) -> &Vector {
        &self.std
    }

    /// Per-dimension z-scores using this series' own statistics.
    pub fn standardized(&self) -> Series {
        let data: Vec<f64> = self
            .data
            .chunks_exact(self.dim)
            .flat_map(|row| {
                row.iter()
                    .zip(self.mean.iter().zip(self.std.iter()))
                    .map(|(v, (m, s))| (v - m) / s)
            })
            .collect();
        Series::from_flat(self.dim, data).expect("standardizing a valid series")
    }
}

/// One `(x_t, y_t)` pair. `x` is `m × d` and `y` is `n × d`, both time-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// 1-based index of the last input observation.
    pub t: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Sample {
    /// 0-based position of the last input observation.
    pub fn position(&self) -> usize {
        self.t - 1
    }
}

pub fn make_sample(series: &Series, t: usize, window_len: usize, horizon: usize) -> Result<Sample> {
    if window_len == 0 || horizon == 0 {
        return Err(Error::invalid("window_len and horizon must be at least 1"));
    }
    if t < window_len {
        return Err(Error::OutOfRange {
            t,
            reason: format!("needs at least {window_len} observations of history"),
        });
    }
    if t + horizon > series.len() {
        return Err(Error::OutOfRange {
            t,
            reason: format!("target runs past the end of a series of length {}", series.len()),
        });
    }
    let d = series.dim();
    let flat = series.as_flat();
    Ok(Sample {
        t,
        x: flat[(t - window_len) * d..t * d].to_vec(),
        y: flat[t * d..(t + horizon) * d].to_vec(),
    })
}

/// Every fully observed sample of the series, in time order.
pub fn all_samples(series: &Series, window_len: usize, horizon: usize) -> Result<Vec<Sample>> {
    let count = count_samples(series.len(), window_len, horizon);
    (window_len..window_len + count)
        .map(|t| make_sample(series, t, window_len, horizon))
        .collect()
}

pub fn count_samples(series_len: usize, window_len: usize, horizon: usize) -> usize {
    (series_len + 1).saturating_sub(window_len + horizon)
}

/// Update batch `I_t` and its meta split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchIndices {
    pub all: Vec<usize>,
    /// Older part, `b − ⌈b/2⌉` samples.
    pub train: Vec<usize>,
    /// Newest `⌈b/2⌉` samples.
    pub val: Vec<usize>,
}

/// `I_t = {t−n−b+1, …, t−n}`, split into the older `b − ⌈b/2⌉` indices for
/// meta-training and the newest `⌈b/2⌉` for meta-validation.
pub fn batch_indices(t: usize, window_len: usize, horizon: usize, b: usize) -> Result<BatchIndices> {
    if b < 2 {
        return Err(Error::invalid(format!("online batch size must exceed 1, got {b}")));
    }
    if t < window_len + horizon + b - 1 {
        return Err(Error::OutOfRange {
            t,
            reason: format!("fewer than {b} observed samples"),
        });
    }
    let last = t - horizon;
    let first = last + 1 - b;
    let n_val = b.div_ceil(2);
    let all: Vec<usize> = (first..=last).collect();
    let (train, val) = all.split_at(b - n_val);
    Ok(BatchIndices {
        train: train.to_vec(),
        val: val.to_vec(),
        all,
    })
}
