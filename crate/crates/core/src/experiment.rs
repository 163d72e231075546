//! Experiment grids: tuning, concurrent runs and result files.
//!
//! A results directory holds
//!
//! * `manifest.json`: the resolved plan (every γ and q fixed). Executing it
//!   again reproduces all numbers bit for bit.
//! * `summary.csv`: one row per run group with the mean and population std
//!   of the normalized RMSE across seeds.
//! * `runs.csv`: the per-seed scores.
//! * `traces/<group>_seed<s>.csv`: one row per online step.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{gen_synthetic, load_power, load_sunspot, Dataset, DatasetKind, DatasetSpec, Segment};
use crate::driver::{
    evaluate, online_range, pretrain, simulate, tune_gamma, tune_q, MethodKind, MethodSpec, PretrainConfig, RunTrace,
    SampleStream, Scaling, TraceRow, TuningContext, Q_GRID,
};
use crate::error::{Error, Result};
use crate::meta::{CandidateSet, GdMetaConfig};
use crate::model::{CellKind, ModelConfig, RecurrentModel, DEFAULT_HIDDEN_UNITS};

pub const DEFAULT_SEEDS: std::ops::Range<u64> = 0..10;
pub const DEFAULT_B: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    #[serde(default)]
    pub initial: f64,
    #[serde(default)]
    pub seed: u64,
    pub segments: Vec<Segment>,
}

/// Where the series comes from, plus optional window overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    /// Require the full canonical length where one is defined.
    #[serde(default)]
    pub strict: bool,
}

impl DataSource {
    pub fn file(kind: DatasetKind, path: impl Into<PathBuf>) -> Self {
        DataSource {
            kind,
            path: Some(path.into()),
            synthetic: None,
            window_len: None,
            horizon: None,
            strict: false,
        }
    }

    pub fn spec(&self, dims: usize) -> DatasetSpec {
        let base = DatasetSpec::for_kind(self.kind);
        DatasetSpec {
            window_len: self.window_len.unwrap_or(base.window_len),
            horizon: self.horizon.unwrap_or(base.horizon),
            dims,
            ..base
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        let need_path = || {
            self.path
                .as_ref()
                .ok_or_else(|| Error::Config(format!("dataset '{}' needs a data file path", self.kind)))
        };
        match self.kind {
            DatasetKind::Sunspot => load_sunspot(need_path()?, self.strict),
            DatasetKind::Power => load_power(need_path()?),
            DatasetKind::Synthetic => {
                let syn = self
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| Error::Config("synthetic dataset needs [dataset.synthetic] segments".into()))?;
                let series = gen_synthetic(&syn.segments, syn.initial, syn.seed)?;
                let labels = (1..=series.len()).map(|i| i.to_string()).collect();
                Ok(Dataset { series, labels })
            }
        }
    }
}

/// One method line of a config. Missing `gamma`/`q` are tuned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub kind: MethodKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

impl MethodEntry {
    pub fn new(kind: MethodKind) -> Self {
        MethodEntry {
            kind,
            gamma: None,
            q: None,
            k: None,
            eta: None,
        }
    }
}

/// Grid axes; an empty axis means "use the single configured value".
/// `k` and `eta` only multiply POLA-GD entries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default)]
    pub b: Vec<usize>,
    #[serde(default)]
    pub k: Vec<usize>,
    #[serde(default)]
    pub eta: Vec<f64>,
}

fn default_methods() -> Vec<MethodEntry> {
    MethodKind::ALL.into_iter().map(MethodEntry::new).collect()
}
fn default_cells() -> Vec<CellKind> {
    vec![CellKind::Rnn]
}
fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.collect()
}
fn default_b() -> usize {
    DEFAULT_B
}
fn default_hidden() -> usize {
    DEFAULT_HIDDEN_UNITS
}
fn default_candidates() -> Vec<f64> {
    CandidateSet::default().rates().to_vec()
}
fn default_q_grid() -> Vec<usize> {
    Q_GRID.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DataSource,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodEntry>,
    #[serde(default = "default_cells")]
    pub cells: Vec<CellKind>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_b")]
    pub b: usize,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default = "default_hidden")]
    pub hidden_units: usize,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// Grid for the maximum learning rate, also POLA-FS's candidate set.
    #[serde(default = "default_candidates")]
    pub candidates: Vec<f64>,
    #[serde(default = "default_q_grid")]
    pub q_grid: Vec<usize>,
    /// Seed of the model used for tuning; defaults to the first seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(dataset: DataSource) -> Self {
        ExperimentConfig {
            dataset,
            methods: default_methods(),
            cells: default_cells(),
            seeds: default_seeds(),
            b: DEFAULT_B,
            sweep: Sweep::default(),
            hidden_units: DEFAULT_HIDDEN_UNITS,
            pretrain: PretrainConfig::default(),
            candidates: default_candidates(),
            q_grid: default_q_grid(),
            tuning_seed: None,
            workers: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.methods.is_empty() || self.cells.is_empty() {
            return bad("methods and cells must not be empty".into());
        }
        for &b in std::iter::once(&self.b).chain(&self.sweep.b) {
            if b < 2 {
                return bad(format!("online batch size must exceed 1, got {b}"));
            }
        }
        if self.q_grid.is_empty() || self.q_grid.contains(&0) {
            return bad("q grid must be non-empty with positive entries".into());
        }
        CandidateSet::new(self.candidates.clone())?;
        if self.hidden_units == 0 {
            return bad("hidden_units must be positive".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        for m in &self.methods {
            if let Some(g) = m.gamma {
                if !(g >= 0.0 && g.is_finite()) {
                    return bad(format!("{}: gamma must be non-negative", m.kind));
                }
            }
            if m.q == Some(0) {
                return bad(format!("{}: q must be positive", m.kind));
            }
            GdMetaConfig {
                k: m.k.unwrap_or(GdMetaConfig::default().k),
                eta: m.eta.unwrap_or(GdMetaConfig::default().eta),
            }
            .validate()?;
        }
        Ok(())
    }

    /// Run groups before tuning, in output order.
    fn groups(&self) -> Vec<GroupDraft> {
        let bs = if self.sweep.b.is_empty() { vec![self.b] } else { self.sweep.b.clone() };
        let defaults = GdMetaConfig::default();
        let mut out = Vec::new();
        for &cell in &self.cells {
            for &b in &bs {
                for m in &self.methods {
                    let ks = if self.sweep.k.is_empty() || m.kind != MethodKind::PolaGd {
                        vec![m.k.unwrap_or(defaults.k)]
                    } else {
                        self.sweep.k.clone()
                    };
                    let etas = if self.sweep.eta.is_empty() || m.kind != MethodKind::PolaGd {
                        vec![m.eta.unwrap_or(defaults.eta)]
                    } else {
                        self.sweep.eta.clone()
                    };
                    for &k in &ks {
                        for &eta in &etas {
                            out.push(GroupDraft {
                                cell,
                                b,
                                entry: m.clone(),
                                gd: GdMetaConfig { k, eta },
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

struct GroupDraft {
    cell: CellKind,
    b: usize,
    entry: MethodEntry,
    gd: GdMetaConfig,
}

/// A fully resolved run group: one method on one cell at one batch size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunGroup {
    pub label: String,
    pub cell: CellKind,
    pub b: usize,
    pub method: MethodSpec,
    pub tuned_gamma: bool,
    pub tuned_q: bool,
}

fn group_label(cell: CellKind, b: usize, method: &MethodSpec) -> String {
    let mut s = format!("{cell}_{}_b{b}", method.kind);
    if method.kind == MethodKind::PolaGd {
        s.push_str(&format!("_k{}_eta{}", method.gd.k, method.gd.eta));
    }
    s
}

/// Everything needed to execute an experiment without further tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: DataSource,
    pub spec: DatasetSpec,
    pub series_len: usize,
    pub hidden_units: usize,
    pub pretrain: PretrainConfig,
    pub seeds: Vec<u64>,
    pub tuning_seed: u64,
    pub groups: Vec<RunGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn model_config(&self, cell: CellKind) -> ModelConfig {
        ModelConfig::new(cell, self.spec.dims, self.spec.window_len, self.spec.horizon).with_hidden_units(self.hidden_units)
    }
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn stream_of(dataset: &Dataset, spec: &DatasetSpec) -> Result<SampleStream> {
    SampleStream::new(&dataset.series.standardized(), spec.window_len, spec.horizon)
}

/// Loads the data and tunes every open γ and q.
///
/// γ is tuned first with the configured q (1 when open); q is then tuned at
/// that γ. Tuning uses one model per cell, pre-trained from `tuning_seed` on
/// the first two thirds of the pre-training samples.
pub fn plan(config: &ExperimentConfig) -> Result<Manifest> {
    config.validate()?;
    let dataset = config.dataset.load()?;
    let spec = config.dataset.spec(dataset.series.dim());
    let stream = stream_of(&dataset, &spec)?;
    online_range(&stream, &config.pretrain)?;
    let tuning_seed = config.tuning_seed.unwrap_or(config.seeds[0]);
    let candidates = CandidateSet::new(config.candidates.clone())?;
    let drafts = config.groups();

    let manifest_base = Manifest {
        dataset: config.dataset.clone(),
        spec,
        series_len: dataset.series.len(),
        hidden_units: config.hidden_units,
        pretrain: config.pretrain,
        seeds: config.seeds.clone(),
        tuning_seed,
        groups: Vec::new(),
        workers: config.workers,
    };

    let groups = with_pool(config.workers, || -> Result<Vec<RunGroup>> {
        let needs_tuning = |d: &GroupDraft| d.entry.gamma.is_none() || (d.entry.kind.is_pola() && d.entry.q.is_none());
        let mut cells: Vec<CellKind> = Vec::new();
        for d in drafts.iter().filter(|d| needs_tuning(d)) {
            if !cells.contains(&d.cell) {
                cells.push(d.cell);
            }
        }
        let contexts: HashMap<CellKind, TuningContext> = cells
            .par_iter()
            .map(|&cell| {
                let start = RecurrentModel::init(manifest_base.model_config(cell), tuning_seed)?;
                Ok((cell, TuningContext::prepare(&start, &stream, &config.pretrain, tuning_seed)?))
            })
            .collect::<Result<_>>()?;
        drafts
            .par_iter()
            .map(|d| {
                let mut method = MethodSpec::new(d.entry.kind, d.entry.gamma.unwrap_or(0.0))
                    .with_q(d.entry.q.unwrap_or(1))
                    .with_gd(d.gd);
                method.candidates = candidates.clone();
                let (tuned_gamma, tuned_q) = (d.entry.gamma.is_none(), d.entry.kind.is_pola() && d.entry.q.is_none());
                if tuned_gamma {
                    method.gamma = tune_gamma(&contexts[&d.cell], &method, &stream, &candidates, d.b)?;
                }
                if tuned_q {
                    method.q = tune_q(&contexts[&d.cell], &method, &stream, &config.q_grid, d.b)?;
                }
                method.validate()?;
                Ok(RunGroup {
                    label: group_label(d.cell, d.b, &method),
                    cell: d.cell,
                    b: d.b,
                    method,
                    tuned_gamma,
                    tuned_q,
                })
            })
            .collect()
    })??;

    let mut seen = std::collections::HashSet::new();
    for g in &groups {
        if !seen.insert(&g.label) {
            return Err(Error::Config(format!("duplicate run group '{}'", g.label)));
        }
    }
    Ok(Manifest { groups, ..manifest_base })
}

/// Aggregate over seeds for one run group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub method: MethodKind,
    pub cell: CellKind,
    pub b: usize,
    pub k: Option<usize>,
    pub eta: Option<f64>,
    pub gamma: f64,
    pub q: usize,
    pub runs: usize,
    pub mean: f64,
    /// Population standard deviation across seeds.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub manifest: Manifest,
    pub summary: Vec<SummaryRow>,
    /// `(group label, seed, normalized RMSE)` in manifest order.
    pub scores: Vec<(String, u64, f64)>,
}

impl ExperimentResult {
    pub fn row(&self, method: MethodKind, b: usize) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.method == method && r.b == b)
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn trace_path(dir: &Path, label: &str, seed: u64) -> PathBuf {
    dir.join("traces").join(format!("{label}_seed{seed}.csv"))
}

/// Runs every (group, seed) pair of the manifest and writes the results
/// directory. Pre-trained models are shared across groups with the same cell.
pub fn execute(manifest: &Manifest, out_dir: impl AsRef<Path>) -> Result<ExperimentResult> {
    let out_dir = out_dir.as_ref();
    let dataset = manifest.dataset.load()?;
    if dataset.series.len() != manifest.series_len || dataset.series.dim() != manifest.spec.dims {
        return Err(Error::Config(format!(
            "data has {} observations of dimension {}, manifest expects {} of dimension {}",
            dataset.series.len(),
            dataset.series.dim(),
            manifest.series_len,
            manifest.spec.dims
        )));
    }
    if manifest.seeds.is_empty() {
        return Err(Error::Config("manifest lists no seeds".into()));
    }
    let stream = stream_of(&dataset, &manifest.spec)?;
    let online = online_range(&stream, &manifest.pretrain)?;
    let scaling = Scaling::of(&dataset.series);
    fs::create_dir_all(out_dir.join("traces")).map_err(|e| Error::io(out_dir, e))?;

    let mut cells: Vec<CellKind> = Vec::new();
    for g in &manifest.groups {
        if !cells.contains(&g.cell) {
            cells.push(g.cell);
        }
    }
    let jobs: Vec<(usize, u64)> = (0..manifest.groups.len())
        .flat_map(|g| manifest.seeds.iter().map(move |&s| (g, s)))
        .collect();

    let scores = with_pool(manifest.workers, || -> Result<Vec<f64>> {
        let keys: Vec<(CellKind, u64)> = cells
            .iter()
            .flat_map(|&c| manifest.seeds.iter().map(move |&s| (c, s)))
            .collect();
        let models: HashMap<(CellKind, u64), RecurrentModel> = keys
            .par_iter()
            .map(|&(cell, seed)| {
                let start = RecurrentModel::init(manifest.model_config(cell), seed)?;
                Ok(((cell, seed), pretrain(&start, stream.samples(), &manifest.pretrain, seed)?.model))
            })
            .collect::<Result<_>>()?;
        jobs.par_iter()
            .map(|&(g, seed)| {
                let group = &manifest.groups[g];
                let trace = simulate(&group.method, &models[&(group.cell, seed)], &stream, online.clone(), group.b, &scaling)?;
                write_trace(&trace, trace_path(out_dir, &group.label, seed))?;
                evaluate(&trace, &dataset.series)
            })
            .collect()
    })??;

    let summary: Vec<SummaryRow> = manifest
        .groups
        .iter()
        .enumerate()
        .map(|(g, group)| {
            let per_seed = &scores[g * manifest.seeds.len()..(g + 1) * manifest.seeds.len()];
            let (mean, std) = mean_std(per_seed);
            let gd = group.method.kind == MethodKind::PolaGd;
            SummaryRow {
                label: group.label.clone(),
                method: group.method.kind,
                cell: group.cell,
                b: group.b,
                k: gd.then_some(group.method.gd.k),
                eta: gd.then_some(group.method.gd.eta),
                gamma: group.method.gamma,
                q: group.method.q,
                runs: per_seed.len(),
                mean,
                std,
            }
        })
        .collect();
    let scores: Vec<(String, u64, f64)> = jobs
        .iter()
        .zip(&scores)
        .map(|(&(g, s), &v)| (manifest.groups[g].label.clone(), s, v))
        .collect();

    write_summary(&summary, out_dir.join("summary.csv"))?;
    let mut w = csv::Writer::from_path(out_dir.join("runs.csv"))?;
    w.write_record(["label", "seed", "nrmse"])?;
    for (label, seed, v) in &scores {
        w.write_record([label.clone(), seed.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(out_dir, e))?;
    let manifest_path = out_dir.join("manifest.json");
    fs::write(&manifest_path, manifest.to_json()?).map_err(|e| Error::io(&manifest_path, e))?;

    Ok(ExperimentResult {
        manifest: manifest.clone(),
        summary,
        scores,
    })
}

/// Tunes, runs and writes a full experiment.
pub fn run_experiment(config: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<ExperimentResult> {
    execute(&plan(config)?, out_dir)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_summary(rows: &[SummaryRow], path: PathBuf) -> Result<()> {
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["label", "method", "cell", "b", "k", "eta", "gamma", "q", "runs", "mean", "std"])?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.method.to_string(),
            r.cell.to_string(),
            r.b.to_string(),
            opt(r.k),
            opt(r.eta),
            r.gamma.to_string(),
            r.q.to_string(),
            r.runs.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::invalid(format!("bad {what} value '{field}'")))
}

/// Reads `summary.csv` back.
pub fn read_summary(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let opt_parse = |i: usize| -> Result<Option<f64>> {
            if get(i).is_empty() {
                Ok(None)
            } else {
                parse_f64(get(i), "summary").map(Some)
            }
        };
        out.push(SummaryRow {
            label: get(0).to_string(),
            method: get(1).parse()?,
            cell: get(2).parse()?,
            b: parse_f64(get(3), "b")? as usize,
            k: opt_parse(4)?.map(|v| v as usize),
            eta: opt_parse(5)?,
            gamma: parse_f64(get(6), "gamma")?,
            q: parse_f64(get(7), "q")? as usize,
            runs: parse_f64(get(8), "runs")? as usize,
            mean: parse_f64(get(9), "mean")?,
            std: parse_f64(get(10), "std")?,
        });
    }
    Ok(out)
}

fn entry_suffix(i: usize, dim: usize) -> String {
    if dim == 1 {
        format!("h{}", i + 1)
    } else {
        format!("h{}_d{}", i / dim + 1, i % dim + 1)
    }
}

/// Writes `step, timestamp_index, pred_*, target_*, squared_error, gamma_t,
/// beta_v` with lossless float formatting.
pub fn write_trace(trace: &RunTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let entries = trace.horizon * trace.dim;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string(), "timestamp_index".to_string()];
    header.extend((0..entries).map(|i| format!("pred_{}", entry_suffix(i, trace.dim))));
    header.extend((0..entries).map(|i| format!("target_{}", entry_suffix(i, trace.dim))));
    header.extend(["squared_error", "gamma_t", "beta_v"].map(String::from));
    w.write_record(&header)?;
    for row in &trace.rows {
        let mut rec = vec![row.step.to_string(), row.t.to_string()];
        rec.extend(row.prediction.iter().map(f64::to_string));
        rec.extend(row.target.iter().map(f64::to_string));
        rec.push(row.squared_error.to_string());
        rec.push(row.gamma_t.to_string());
        rec.push(opt(row.beta_v));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A trace read back from CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceTable {
    pub horizon: usize,
    pub dim: usize,
    pub rows: Vec<TraceRow>,
}

/// Reads a trace CSV; `dim` fixes how entry columns map to dimensions.
pub fn read_trace(path: impl AsRef<Path>, dim: usize) -> Result<TraceTable> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("missing column '{name}'"),
        })
    };
    let (c_step, c_t) = (col("step")?, col("timestamp_index")?);
    let (c_se, c_gamma, c_beta) = (col("squared_error")?, col("gamma_t")?, col("beta_v")?);
    let pred: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with("pred_")).map(|(i, _)| i).collect();
    let target: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with("target_")).map(|(i, _)| i).collect();
    if pred.is_empty() || pred.len() != target.len() || dim == 0 || pred.len() % dim != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "prediction and target columns missing or inconsistent".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |c: usize| -> Result<f64> {
            rec.get(c).unwrap_or("").parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("bad number in column '{}'", header[c]),
            })
        };
        let beta_raw = rec.get(c_beta).unwrap_or("");
        rows.push(TraceRow {
            step: num(c_step)? as usize,
            t: num(c_t)? as usize,
            prediction: pred.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            target: target.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            squared_error: num(c_se)?,
            gamma_t: num(c_gamma)?,
            beta_v: if beta_raw.is_empty() { None } else { Some(num(c_beta)?) },
        });
    }
    Ok(TraceTable {
        horizon: pred.len() / dim,
        dim,
        rows,
    })
}

/// Centered moving average in valid mode: output `i` averages inputs
/// `i..i+window`, so the result has `len − window + 1` entries.
pub fn moving_average_valid(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window > values.len() {
        return Err(Error::invalid(format!(
            "smoothing window {window} must lie in 1..={}",
            values.len()
        )));
    }
    Ok(values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlotOptions {
    /// Error smoothing window in steps.
    pub smoothing: usize,
    /// 1-based forecast step shown in the prediction file; `None` is the
    /// last step of the horizon.
    pub horizon: Option<usize>,
}

impl Default for PlotOptions {
    fn default() -> Self {
        PlotOptions {
            smoothing: 24,
            horizon: None,
        }
    }
}

/// Writes `plots/<group>_{prediction,error,gamma}.csv` for every group of
/// a results directory.
///
/// * prediction: forecast vs actual at one forecast step (first seed).
/// * error: per-step squared error averaged over seeds, then smoothed; the
///   step column is the center of each window.
/// * gamma: `γ_t` per step, one column per seed.
pub fn emit_plot_data(results: impl AsRef<Path>, opts: &PlotOptions) -> Result<Vec<PathBuf>> {
    let results = results.as_ref();
    let manifest = Manifest::load(results.join("manifest.json"))?;
    let dim = manifest.spec.dims;
    let plots = results.join("plots");
    fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut written = Vec::new();
    for group in &manifest.groups {
        let tables: Vec<TraceTable> = manifest
            .seeds
            .iter()
            .map(|&s| read_trace(trace_path(results, &group.label, s), dim))
            .collect::<Result<_>>()?;
        let first = &tables[0];
        let steps = first.rows.len();
        if tables.iter().any(|t| t.rows.len() != steps) {
            return Err(Error::invalid(format!("{}: traces differ in length", group.label)));
        }
        let h = opts.horizon.unwrap_or(first.horizon);
        if h == 0 || h > first.horizon {
            return Err(Error::invalid(format!("forecast step {h} outside 1..={}", first.horizon)));
        }

        let path = plots.join(format!("{}_prediction.csv", group.label));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["step".to_string(), "timestamp_index".to_string()];
        for kind in ["predicted", "actual"] {
            header.extend((0..dim).map(|k| if dim == 1 { kind.to_string() } else { format!("{kind}_d{}", k + 1) }));
        }
        w.write_record(&header)?;
        for row in &first.rows {
            let span = (h - 1) * dim..h * dim;
            let mut rec = vec![row.step.to_string(), row.t.to_string()];
            rec.extend(row.prediction[span.clone()].iter().map(f64::to_string));
            rec.extend(row.target[span].iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);

        let raw: Vec<f64> = (0..steps)
            .map(|i| tables.iter().map(|t| t.rows[i].squared_error).sum::<f64>() / tables.len() as f64)
            .collect();
        let smooth = moving_average_valid(&raw, opts.smoothing)?;
        let path = plots.join(format!("{}_error.csv", group.label));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["step", "error"])?;
        let offset = (opts.smoothing - 1) / 2;
        for (i, v) in smooth.iter().enumerate() {
            w.write_record([first.rows[i + offset].step.to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);

        let path = plots.join(format!("{}_gamma.csv", group.label));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["step".to_string()];
        header.extend(manifest.seeds.iter().map(|s| format!("seed{s}")));
        w.write_record(&header)?;
        for i in 0..steps {
            let mut rec = vec![first.rows[i].step.to_string()];
            rec.extend(tables.iter().map(|t| t.rows[i].gamma_t.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
