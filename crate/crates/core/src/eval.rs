//! Free-simulation metrics and the benchmark runner.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{benchmark, load_benchmark, DatasetInfo, NormStats, Trajectory};
use crate::error::{Error, Result};
use crate::narx::{fit_narx, narx_free_simulation, NarxConfig, NarxModel};
use crate::ssm::{predict_free_simulation, PrssmParams};
use crate::tensor::{Matrix, SeededRng};
use crate::train::{fit, TrainConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn check_shapes(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!(
            "prediction is {}x{}, truth is {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// `√(mean over steps and dimensions of the squared error)`.
pub fn rmse(pred: &Matrix, truth: &Matrix) -> Result<f64> {
    check_shapes(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::DimensionMismatch("no steps to score".into()));
    }
    let sq: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Negative Gaussian log-density of each step, summed over dimensions and
/// averaged over steps.
pub fn nll(mean: &Matrix, var: &Matrix, truth: &Matrix) -> Result<f64> {
    check_shapes(mean, truth)?;
    check_shapes(var, truth)?;
    if mean.rows() == 0 {
        return Err(Error::DimensionMismatch("no steps to score".into()));
    }
    let mut total = 0.0;
    for t in 0..mean.rows() {
        for k in 0..mean.cols() {
            let v = var.get(t, k);
            if !(v > 0.0) {
                return Err(Error::NonPositiveVariance { step: t });
            }
            let r = truth.get(t, k) - mean.get(t, k);
            total += 0.5 * (LN_2PI + v.ln() + r * r / v);
        }
    }
    Ok(total / mean.rows() as f64)
}

/// Per-step prediction on the original data scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub y_true: Matrix,
    pub y_mean: Matrix,
    pub y_std: Matrix,
}

impl Trace {
    /// CSV with `t` and, per output `k`, `y_true_k,y_mean_k,y_std_k`.
    pub fn to_csv(&self) -> String {
        let dy = self.y_true.cols();
        let mut s = String::from("t");
        for k in 1..=dy {
            let _ = write!(s, ",y_true_{k},y_mean_{k},y_std_{k}");
        }
        s.push('\n');
        for t in 0..self.y_true.rows() {
            let _ = write!(s, "{t}");
            for k in 0..dy {
                let _ = write!(
                    s,
                    ",{},{},{}",
                    self.y_true.get(t, k),
                    self.y_mean.get(t, k),
                    self.y_std.get(t, k)
                );
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores of one prediction over the steps after the warm start.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// On the normalized scale.
    pub rmse: f64,
    /// On the normalized scale.
    pub nll: f64,
    /// On the original scale.
    pub rmse_denormalized: f64,
    pub trace: Trace,
}

/// Scores normalized predictions of `test_norm` from step `warmup` on.
pub fn score(
    mean: &Matrix,
    variance: &Matrix,
    test_norm: &Trajectory,
    stats: &NormStats,
    warmup: usize,
) -> Result<Evaluation> {
    let t = test_norm.len();
    if warmup >= t {
        return Err(Error::TrajectoryTooShort {
            needed: warmup + 1,
            got: t,
        });
    }
    let dy = test_norm.output_dim();
    let tail = |m: &Matrix| m.block(warmup, 0, t - warmup, dy);
    let (pm, pv, truth) = (tail(mean), tail(variance), tail(&test_norm.y));
    let raw_mean = stats.denormalize_outputs(mean);
    let raw_truth = stats.denormalize_outputs(&test_norm.y);
    Ok(Evaluation {
        rmse: rmse(&pm, &truth)?,
        nll: nll(&pm, &pv, &truth)?,
        rmse_denormalized: rmse(&tail(&raw_mean), &tail(&raw_truth))?,
        trace: Trace {
            y_std: stats.denormalize_output_variances(variance).map(f64::sqrt),
            y_mean: raw_mean,
            y_true: raw_truth,
        },
    })
}

/// Free simulation of a PR-SSM on normalized test data. The initial state
/// comes from the recognition model when there is one.
pub fn evaluate_prssm(
    params: &PrssmParams,
    stats: &NormStats,
    test_norm: &Trajectory,
    warmup: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Evaluation> {
    let q = match &params.recognition {
        Some(rec) => rec.recognize(&test_norm.y, &test_norm.u)?,
        None => params.init_state.clone(),
    };
    let sim = predict_free_simulation(params, &test_norm.u, &q, n_samples, &mut SeededRng::new(seed))?;
    score(&sim.mean, &sim.variance, test_norm, stats, warmup)
}

/// Mean-propagation forecast of a NARX model on normalized test data.
pub fn evaluate_narx(
    model: &NarxModel,
    stats: &NormStats,
    test_norm: &Trajectory,
    warmup: usize,
) -> Result<Evaluation> {
    let h = model.config.history();
    let warm = test_norm.y.block(0, 0, h.min(test_norm.len()), test_norm.output_dim());
    let pred = narx_free_simulation(model, &test_norm.u, &warm)?;
    score(&pred.mean, &pred.variance, test_norm, stats, warmup)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "pr-ssm")]
    PrSsm,
    #[serde(rename = "gp-narx")]
    GpNarx,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::PrSsm => "pr-ssm",
            Method::GpNarx => "gp-narx",
        }
    }
}

/// Benchmark settings; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub datasets: Vec<String>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Directory holding `<dataset>.csv` files.
    pub data_dir: PathBuf,
    pub train: TrainConfig,
    /// History lengths are replaced by each dataset's registry value.
    pub narx: NarxConfig,
    pub predict_samples: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            datasets: vec!["drives".into(), "dryer".into()],
            methods: vec![Method::PrSsm, Method::GpNarx],
            seeds: (0..5).collect(),
            data_dir: PathBuf::from("data/benchmarks"),
            train: TrainConfig::default(),
            narx: NarxConfig::default(),
            predict_samples: 100,
        }
    }
}

/// One (method, dataset, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: Method,
    pub dataset: String,
    pub seed: u64,
    /// `Err` holds the failure message.
    pub outcome: std::result::Result<Evaluation, String>,
    pub wall_seconds: f64,
}

/// Mean and sample standard deviation over the successful seeds of a cell group.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub method: Method,
    pub dataset: String,
    pub n_ok: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub nll_mean: f64,
    pub nll_std: f64,
    pub rmse_denormalized_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

/// Mean and sample standard deviation (`n - 1`; zero for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n as f64;
    let s = if n > 1 {
        (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (m, s)
}

impl EvalReport {
    pub fn n_ok(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.is_ok()).count()
    }

    pub fn summaries(&self) -> Vec<Summary> {
        let mut keys: Vec<(Method, String)> = Vec::new();
        for r in &self.rows {
            if !keys.iter().any(|(m, d)| *m == r.method && *d == r.dataset) {
                keys.push((r.method, r.dataset.clone()));
            }
        }
        keys.into_iter()
            .map(|(method, dataset)| {
                let ok: Vec<&Evaluation> = self
                    .rows
                    .iter()
                    .filter(|r| r.method == method && r.dataset == dataset)
                    .filter_map(|r| r.outcome.as_ref().ok())
                    .collect();
                let (rmse_mean, rmse_std) = mean_std(&ok.iter().map(|e| e.rmse).collect::<Vec<_>>());
                let (nll_mean, nll_std) = mean_std(&ok.iter().map(|e| e.nll).collect::<Vec<_>>());
                let (rmse_denormalized_mean, _) = mean_std(&ok.iter().map(|e| e.rmse_denormalized).collect::<Vec<_>>());
                Summary {
                    method,
                    dataset,
                    n_ok: ok.len(),
                    rmse_mean,
                    rmse_std,
                    nll_mean,
                    nll_std,
                    rmse_denormalized_mean,
                }
            })
            .collect()
    }

    /// `method,dataset,seed,rmse,nll,wall_seconds`; failed cells read `failed`.
    pub fn report_csv(&self) -> String {
        let mut s = String::from("method,dataset,seed,rmse,nll,wall_seconds\n");
        for r in &self.rows {
            let (a, b) = match &r.outcome {
                Ok(e) => (e.rmse.to_string(), e.nll.to_string()),
                Err(_) => ("failed".to_string(), "failed".to_string()),
            };
            let _ = writeln!(
                s,
                "{},{},{},{a},{b},{:.3}",
                r.method.name(),
                r.dataset,
                r.seed,
                r.wall_seconds
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("method,dataset,n_ok,rmse_mean,rmse_std,nll_mean,nll_std,rmse_denormalized_mean\n");
        for m in self.summaries() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                m.method.name(),
                m.dataset,
                m.n_ok,
                m.rmse_mean,
                m.rmse_std,
                m.nll_mean,
                m.nll_std,
                m.rmse_denormalized_mean
            );
        }
        s
    }

    /// Writes `report.csv`, `summary.csv`, `failures.txt` and one trace per
    /// successful cell under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        put("report.csv", self.report_csv())?;
        put("summary.csv", self.summary_csv())?;
        let mut failures = String::new();
        for r in &self.rows {
            match &r.outcome {
                Ok(e) => e.trace.write_csv(dir.join(format!(
                    "trace_{}_{}_seed{}.csv",
                    r.method.name(),
                    r.dataset,
                    r.seed
                )))?,
                Err(msg) => {
                    let _ = writeln!(failures, "{} {} seed {}: {msg}", r.method.name(), r.dataset, r.seed);
                }
            }
        }
        put("failures.txt", failures)
    }
}

/// Trains and scores one method on one split.
pub fn run_cell(
    method: Method,
    info: &DatasetInfo,
    train: &Trajectory,
    test: &Trajectory,
    seed: u64,
    config: &BenchmarkConfig,
) -> Result<Evaluation> {
    let stats = NormStats::from_training(&[train])?;
    let train_n = stats.normalize(train)?;
    let test_n = stats.normalize(test)?;
    let warmup = config.train.recognition_window.max(info.history);
    match method {
        Method::PrSsm => {
            let cfg = TrainConfig {
                seed,
                ..config.train.clone()
            };
            let fitted = fit(&[train_n], &cfg)?;
            evaluate_prssm(&fitted.params, &stats, &test_n, warmup, config.predict_samples, seed)
        }
        Method::GpNarx => {
            let cfg = NarxConfig {
                history_y: info.history,
                history_u: info.history,
                seed,
                ..config.narx.clone()
            };
            let model = fit_narx(&train_n, &cfg)?;
            evaluate_narx(&model, &stats, &test_n, warmup)
        }
    }
}

/// Runs every (method, dataset, seed) cell on up to `jobs` threads.
///
/// Cells that fail, including datasets whose files are missing, are kept in
/// the report with their error; the row order is independent of `jobs`.
pub fn run_benchmark(config: &BenchmarkConfig, jobs: usize) -> Result<EvalReport> {
    let mut cells = Vec::new();
    for name in &config.datasets {
        for &method in &config.methods {
            for &seed in &config.seeds {
                cells.push((method, name.clone(), seed));
            }
        }
    }
    let mut splits = Vec::new();
    for name in &config.datasets {
        let split = benchmark(name)
            .ok_or_else(|| format!("unknown dataset '{name}'"))
            .and_then(|info| {
                load_benchmark(&config.data_dir, &info)
                    .map(|(a, b)| (info, a, b))
                    .map_err(|e| e.to_string())
            });
        splits.push((name.clone(), split));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<ReportRow>>> = Mutex::new(vec![None; cells.len()]);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((method, name, seed)) = cells.get(i).cloned() else {
            break;
        };
        let start = Instant::now();
        let split = &splits.iter().find(|(n, _)| *n == name).expect("dataset listed").1;
        let outcome = match split {
            Ok((info, train, test)) => run_cell(method, info, train, test, seed, config).map_err(|e| e.to_string()),
            Err(msg) => Err(msg.clone()),
        };
        if let Err(msg) = &outcome {
            log::warn!("{} on {name} seed {seed} failed: {msg}", method.name());
        }
        let row = ReportRow {
            method,
            dataset: name,
            seed,
            outcome,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        results.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(row);
    };
    let jobs = jobs.clamp(1, cells.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    let rows = results
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .flatten()
        .collect();
    Ok(EvalReport { rows })
}
