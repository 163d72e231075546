//! Dataset loaders and a piecewise-AR generator.
//!
//! * Sunspot: SILSO monthly mean total sunspot number. Whitespace- or
//!   semicolon-separated columns `year month decimal_year value std nobs
//!   flag`; a value of −1 marks a missing month.
//! * Power: UCI individual household electric power consumption,
//!   semicolon-separated minute readings with `?` for missing values,
//!   reduced to daily means of global active power, global intensity and
//!   voltage.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::windowing::Series;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Sunspot,
    Power,
    Synthetic,
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Sunspot => "sunspot",
            DatasetKind::Power => "power",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sunspot" => Ok(DatasetKind::Sunspot),
            "power" => Ok(DatasetKind::Power),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::invalid(format!("unknown dataset '{other}'"))),
        }
    }
}

/// Window geometry of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: DatasetKind,
    pub window_len: usize,
    pub horizon: usize,
    pub dims: usize,
}

impl DatasetSpec {
    /// Four years of monthly history, five months ahead.
    pub fn sunspot() -> Self {
        DatasetSpec {
            name: DatasetKind::Sunspot,
            window_len: 48,
            horizon: 5,
            dims: 1,
        }
    }

    /// Four weeks of daily history, three days ahead.
    pub fn power() -> Self {
        DatasetSpec {
            name: DatasetKind::Power,
            window_len: 28,
            horizon: 3,
            dims: 3,
        }
    }

    pub fn for_kind(kind: DatasetKind) -> Self {
        match kind {
            DatasetKind::Sunspot => DatasetSpec::sunspot(),
            DatasetKind::Power => DatasetSpec::power(),
            DatasetKind::Synthetic => DatasetSpec {
                name: DatasetKind::Synthetic,
                window_len: 24,
                horizon: 3,
                dims: 1,
            },
        }
    }
}

/// A loaded series with one label (date) per observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub series: Series,
    pub labels: Vec<String>,
}

pub const SUNSPOT_FIRST: (i32, u32) = (1749, 1);
pub const SUNSPOT_LAST: (i32, u32) = (2020, 7);
pub const SUNSPOT_LEN: usize = 3259;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

/// Loads the monthly sunspot series restricted to Jan 1749 – Jul 2020.
/// With `strict`, anything other than the full 3259 months is an error.
pub fn load_sunspot(path: impl AsRef<Path>, strict: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut prev: Option<(i32, u32)> = None;
    for (i, line) in open(path)?.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed
            .split(|c: char| c == ';' || c.is_whitespace())
            .filter(|c| !c.is_empty())
            .collect();
        if cols.len() < 4 {
            return Err(parse_err(path, lineno, format!("expected at least 4 columns, found {}", cols.len())));
        }
        let year: i32 = cols[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad year '{}'", cols[0])))?;
        let month: u32 = cols[1]
            .parse()
            .ok()
            .filter(|m| (1..=12).contains(m))
            .ok_or_else(|| parse_err(path, lineno, format!("bad month '{}'", cols[1])))?;
        let value: f64 = cols[3]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| parse_err(path, lineno, format!("bad value '{}'", cols[3])))?;
        if (year, month) < SUNSPOT_FIRST || (year, month) > SUNSPOT_LAST {
            continue;
        }
        if value == -1.0 {
            return Err(parse_err(path, lineno, format!("missing value for {year}-{month:02}")));
        }
        if value < 0.0 {
            return Err(parse_err(path, lineno, format!("negative sunspot number {value}")));
        }
        if let Some((py, pm)) = prev {
            let expected = if pm == 12 { (py + 1, 1) } else { (py, pm + 1) };
            if (year, month) != expected {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("expected {}-{:02}, found {year}-{month:02}", expected.0, expected.1),
                ));
            }
        }
        prev = Some((year, month));
        values.push(value);
        labels.push(format!("{year}-{month:02}"));
    }
    if strict && values.len() != SUNSPOT_LEN {
        return Err(Error::invalid(format!(
            "{}: expected {SUNSPOT_LEN} months from 1749-01 to 2020-07, found {}",
            path.display(),
            values.len()
        )));
    }
    Ok(Dataset {
        series: Series::univariate(values)?,
        labels,
    })
}

pub const POWER_FIRST_DAY: (i32, u32, u32) = (2006, 12, 16);
pub const POWER_LAST_DAY: (i32, u32, u32) = (2010, 11, 26);
/// Column indices of global active power, global intensity and voltage.
const POWER_COLUMNS: [usize; 3] = [2, 5, 4];

fn ymd((y, m, d): (i32, u32, u32)) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid constant date")
}

#[derive(Default, Clone, Copy)]
struct DayAccum {
    sum: [f64; 3],
    count: [usize; 3],
}

/// Loads daily means of the three power variables, forward-filling days
/// (or variables) without any reading. Every calendar day from the first
/// day present in the file up to 26 Nov 2010 gets one observation.
pub fn load_power(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let first_allowed = ymd(POWER_FIRST_DAY);
    let last_allowed = ymd(POWER_LAST_DAY);
    let mut days: BTreeMap<NaiveDate, DayAccum> = BTreeMap::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (lineno == 1 && trimmed.starts_with("Date")) {
            continue;
        }
        let cols: Vec<&str> = trimmed.split(';').collect();
        if cols.len() < 6 {
            return Err(parse_err(path, lineno, format!("expected 9 columns, found {}", cols.len())));
        }
        let date = NaiveDate::parse_from_str(cols[0], "%d/%m/%Y")
            .map_err(|_| parse_err(path, lineno, format!("bad date '{}'", cols[0])))?;
        if date < first_allowed || date > last_allowed {
            continue;
        }
        let acc = days.entry(date).or_default();
        for (k, &c) in POWER_COLUMNS.iter().enumerate() {
            let raw = cols[c].trim();
            if raw == "?" || raw.is_empty() {
                continue;
            }
            let v: f64 = raw
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| parse_err(path, lineno, format!("bad reading '{raw}' in column {}", c + 1)))?;
            acc.sum[k] += v;
            acc.count[k] += 1;
        }
    }
    let first = *days.keys().next().ok_or_else(|| Error::invalid(format!("{}: no readings in range", path.display())))?;
    let last = *days.keys().next_back().expect("non-empty");
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut prev: Option<[f64; 3]> = None;
    for date in first.iter_days().take_while(|d| *d <= last) {
        let acc = days.get(&date).copied().unwrap_or_default();
        let mut row = [0.0; 3];
        for k in 0..3 {
            row[k] = if acc.count[k] > 0 {
                acc.sum[k] / acc.count[k] as f64
            } else {
                match prev {
                    Some(p) => p[k],
                    None => {
                        return Err(Error::invalid(format!(
                            "{}: first day {date} has no readings to forward-fill from",
                            path.display()
                        )))
                    }
                }
            };
        }
        prev = Some(row);
        rows.push(row.to_vec());
        labels.push(date.format("%Y-%m-%d").to_string());
    }
    Ok(Dataset {
        series: Series::new(rows)?,
        labels,
    })
}

/// Writes `label, dim_0, …` rows; values are z-scored when `normalized`.
pub fn write_series_csv(dataset: &Dataset, path: impl AsRef<Path>, normalized: bool) -> Result<()> {
    let path = path.as_ref();
    let series = if normalized {
        dataset.series.standardized()
    } else {
        dataset.series.clone()
    };
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string()];
    header.extend((0..series.dim()).map(|k| format!("dim{k}")));
    w.write_record(&header)?;
    for (label, row) in dataset.labels.iter().zip(series.rows()) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// One stationary stretch of a piecewise AR process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub length: usize,
    pub mean: f64,
    /// `φ_1, …, φ_p` in `x_t − μ = Σ φ_i (x_{t−i} − μ) + ε_t`.
    pub coeffs: Vec<f64>,
    pub noise_sd: f64,
}

/// Whether the AR polynomial `1 − Σ φ_i z^i` has all roots outside the unit
/// circle, via the step-down (Schur–Cohn) recursion.
pub fn ar_is_stable(coeffs: &[f64]) -> bool {
    let mut a: Vec<f64> = coeffs.iter().map(|c| -c).collect();
    while let Some(&k) = a.last() {
        if !(k.abs() < 1.0) {
            return false;
        }
        let p = a.len();
        let denom = 1.0 - k * k;
        let next: Vec<f64> = (0..p - 1).map(|i| (a[i] - k * a[p - 2 - i]) / denom).collect();
        a = next;
    }
    true
}

/// Concatenates AR segments; the history carries over between segments and
/// the process starts from `initial` for every lag.
pub fn gen_synthetic(segments: &[Segment], initial: f64, seed: u64) -> Result<Series> {
    if segments.is_empty() {
        return Err(Error::invalid("no segments"));
    }
    for (i, s) in segments.iter().enumerate() {
        if !ar_is_stable(&s.coeffs) {
            return Err(Error::invalid(format!("segment {i} has unstable AR coefficients {:?}", s.coeffs)));
        }
        if !(s.noise_sd >= 0.0) {
            return Err(Error::invalid(format!("segment {i} has negative noise sd")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<f64> = Vec::new();
    for s in segments {
        for _ in 0..s.length {
            let mut v = s.mean;
            for (lag, phi) in s.coeffs.iter().enumerate() {
                let past = out.len().checked_sub(lag + 1).map_or(initial, |j| out[j]);
                v += phi * (past - s.mean);
            }
            v += s.noise_sd * rng.sample::<f64, _>(StandardNormal);
            out.push(v);
        }
    }
    Series::univariate(out)
}

/// Writes a file in the monthly SILSO layout; used for fixtures.
pub fn write_silso(path: impl AsRef<Path>, start: (i32, u32), values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let (mut y, mut m) = start;
    for v in values {
        let dec = y as f64 + (m as f64 - 0.5) / 12.0;
        writeln!(f, "{y} {m:02} {dec:.3} {v:6.1} {:5.1} {:4} 1", -1.0, -1).map_err(|e| Error::io(path, e))?;
        if m == 12 {
            y += 1;
            m = 1;
        } else {
            m += 1;
        }
    }
    Ok(())
}
