//! Trajectories, CSV input and output, normalization, the benchmark registry
//! and a synthetic linear system with its Kalman-filter reference.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, SeededRng};

/// Aligned input and output sequences, one row per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub name: String,
    /// `T x D_u`
    pub u: Matrix,
    /// `T x D_y`
    pub y: Matrix,
}

impl Trajectory {
    pub fn new(name: impl Into<String>, u: Matrix, y: Matrix) -> Result<Self> {
        let name = name.into();
        if u.rows() != y.rows() {
            return Err(Error::DimensionMismatch(format!(
                "trajectory '{name}' has {} input rows and {} output rows",
                u.rows(),
                y.rows()
            )));
        }
        if !u.is_finite() || !y.is_finite() {
            return Err(Error::DimensionMismatch(format!(
                "trajectory '{name}' has non-finite entries"
            )));
        }
        Ok(Trajectory { name, u, y })
    }

    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.u.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.y.cols()
    }

    /// Steps `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Trajectory> {
        if start + len > self.len() {
            return Err(Error::TrajectoryTooShort {
                needed: start + len,
                got: self.len(),
            });
        }
        Ok(Trajectory {
            name: format!("{}[{start}..{}]", self.name, start + len),
            u: self.u.block(start, 0, len, self.input_dim()),
            y: self.y.block(start, 0, len, self.output_dim()),
        })
    }

    /// The first `n` steps and the rest.
    pub fn split(&self, n: usize) -> Result<(Trajectory, Trajectory)> {
        let mut head = self.window(0, n)?;
        let mut tail = self.window(n, self.len() - n)?;
        head.name = format!("{}-train", self.name);
        tail.name = format!("{}-test", self.name);
        Ok((head, tail))
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub u_mean: Vec<f64>,
    pub u_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn channel_stats(m: &Matrix, prefix: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = m.rows() as f64;
    let mut means = Vec::with_capacity(m.cols());
    let mut stds = Vec::with_capacity(m.cols());
    for j in 0..m.cols() {
        let col = m.col(j);
        let mean = col.iter().sum::<f64>() / n;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(std > 0.0) {
            return Err(Error::ZeroVariance {
                channel: format!("{prefix}_{}", j + 1),
            });
        }
        means.push(mean);
        stds.push(std);
    }
    Ok((means, stds))
}

impl NormStats {
    /// Statistics of the training trajectories taken together.
    pub fn from_training(trajs: &[&Trajectory]) -> Result<Self> {
        let first = trajs.first().ok_or_else(|| Error::Config("no training data".into()))?;
        let stack = |pick: fn(&Trajectory) -> &Matrix| {
            let cols = pick(first).cols();
            let data: Vec<f64> = trajs.iter().flat_map(|t| pick(t).data().iter().copied()).collect();
            Matrix::new(
                data.len() / cols.max(1),
                cols,
                if cols == 0 { Vec::new() } else { data },
            )
        };
        let (u_mean, u_std) = channel_stats(&stack(|t| &t.u), "u")?;
        let (y_mean, y_std) = channel_stats(&stack(|t| &t.y), "y")?;
        Ok(NormStats {
            u_mean,
            u_std,
            y_mean,
            y_std,
        })
    }

    /// Statistics that leave data unchanged.
    pub fn identity(input_dim: usize, output_dim: usize) -> Self {
        NormStats {
            u_mean: vec![0.0; input_dim],
            u_std: vec![1.0; input_dim],
            y_mean: vec![0.0; output_dim],
            y_std: vec![1.0; output_dim],
        }
    }

    fn check(&self, traj: &Trajectory) -> Result<()> {
        if traj.input_dim() != self.u_mean.len() || traj.output_dim() != self.y_mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "statistics cover {} inputs and {} outputs, trajectory '{}' has {} and {}",
                self.u_mean.len(),
                self.y_mean.len(),
                traj.name,
                traj.input_dim(),
                traj.output_dim()
            )));
        }
        for (j, s) in self.u_std.iter().enumerate() {
            if !(*s > 0.0) {
                return Err(Error::ZeroVariance {
                    channel: format!("u_{}", j + 1),
                });
            }
        }
        for (j, s) in self.y_std.iter().enumerate() {
            if !(*s > 0.0) {
                return Err(Error::ZeroVariance {
                    channel: format!("y_{}", j + 1),
                });
            }
        }
        Ok(())
    }

    pub fn normalize(&self, traj: &Trajectory) -> Result<Trajectory> {
        self.check(traj)?;
        Ok(Trajectory {
            name: traj.name.clone(),
            u: affine(&traj.u, &self.u_mean, &self.u_std, false),
            y: affine(&traj.y, &self.y_mean, &self.y_std, false),
        })
    }

    pub fn denormalize(&self, traj: &Trajectory) -> Result<Trajectory> {
        self.check(traj)?;
        Ok(Trajectory {
            name: traj.name.clone(),
            u: affine(&traj.u, &self.u_mean, &self.u_std, true),
            y: affine(&traj.y, &self.y_mean, &self.y_std, true),
        })
    }

    /// Output values mapped back to the original scale.
    pub fn denormalize_outputs(&self, y: &Matrix) -> Matrix {
        affine(y, &self.y_mean, &self.y_std, true)
    }

    /// Output variances mapped back to the original scale.
    pub fn denormalize_output_variances(&self, v: &Matrix) -> Matrix {
        Matrix::from_fn(v.rows(), v.cols(), |i, j| v.get(i, j) * self.y_std[j] * self.y_std[j])
    }
}

fn affine(m: &Matrix, mean: &[f64], std: &[f64], inverse: bool) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| {
        if inverse {
            m.get(i, j) * std[j] + mean[j]
        } else {
            (m.get(i, j) - mean[j]) / std[j]
        }
    })
}

/// Reads a trajectory with header `u_1,...,u_Du,y_1,...,y_Dy`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let parse_err = |row: usize, column: String, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(0, String::new(), e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let columns = |prefix: &str| {
        let mut idx = Vec::new();
        while let Some(i) = find(&format!("{prefix}_{}", idx.len() + 1)) {
            idx.push(i);
        }
        idx
    };
    let u_cols = columns("u");
    let y_cols = columns("y");
    if y_cols.is_empty() {
        return Err(Error::MissingColumn {
            path: path.to_path_buf(),
            column: "y_1".into(),
        });
    }
    for h in &headers {
        let known = u_cols.iter().chain(&y_cols).any(|&i| &headers[i] == h);
        if !known {
            let column = if h.starts_with("u_") { "u" } else { "y" };
            let expected = if column == "u" { u_cols.len() } else { y_cols.len() } + 1;
            return Err(Error::MissingColumn {
                path: path.to_path_buf(),
                column: format!("{column}_{expected}"),
            });
        }
    }
    let mut u = Vec::new();
    let mut y = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| parse_err(row, String::new(), e.to_string()))?;
        let cell = |i: usize| -> Result<f64> {
            let raw = record.get(i).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(row, headers[i].clone(), format!("'{raw}' is not a finite number")))
        };
        for &i in &u_cols {
            u.push(cell(i)?);
        }
        for &i in &y_cols {
            y.push(cell(i)?);
        }
        rows += 1;
    }
    let name = path
        .file_stem()
        .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
    Trajectory::new(
        name,
        Matrix::new(rows, u_cols.len(), u),
        Matrix::new(rows, y_cols.len(), y),
    )
}

/// Every `*.csv` file of a directory in file-name order, one experiment each.
pub fn load_csv_dir(dir: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    paths.iter().map(load_csv).collect()
}

/// Writes `traj` in the format read by [`load_csv`].
pub fn write_csv(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = (1..=traj.input_dim())
        .map(|i| format!("u_{i}"))
        .chain((1..=traj.output_dim()).map(|i| format!("y_{i}")))
        .collect();
    let csv_err = |e: csv::Error| Error::Config(format!("CSV encoding failed: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for t in 0..traj.len() {
        let row: Vec<String> = traj
            .u
            .row(t)
            .iter()
            .chain(traj.y.row(t))
            .map(|v| v.to_string())
            .collect();
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("CSV encoding failed: {e}")))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// A benchmark's train/test split and NARX history length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetInfo {
    pub name: &'static str,
    pub n_train: usize,
    pub n_test: usize,
    pub history: usize,
}

pub const BENCHMARKS: [DatasetInfo; 5] = [
    DatasetInfo {
        name: "actuator",
        n_train: 512,
        n_test: 512,
        history: 10,
    },
    DatasetInfo {
        name: "ballbeam",
        n_train: 500,
        n_test: 500,
        history: 10,
    },
    DatasetInfo {
        name: "drives",
        n_train: 250,
        n_test: 250,
        history: 10,
    },
    DatasetInfo {
        name: "furnace",
        n_train: 148,
        n_test: 148,
        history: 3,
    },
    DatasetInfo {
        name: "dryer",
        n_train: 500,
        n_test: 500,
        history: 2,
    },
];

/// Registry entry by case-insensitive name.
pub fn benchmark(name: &str) -> Option<DatasetInfo> {
    BENCHMARKS.iter().copied().find(|b| b.name.eq_ignore_ascii_case(name))
}

/// Loads `<dir>/<name>.csv` and splits it into training and test parts.
pub fn load_benchmark(dir: impl AsRef<Path>, info: &DatasetInfo) -> Result<(Trajectory, Trajectory)> {
    let path = dir.as_ref().join(format!("{}.csv", info.name));
    let full = load_csv(&path)?;
    let needed = info.n_train + info.n_test;
    if full.len() < needed {
        return Err(Error::TrajectoryTooShort {
            needed,
            got: full.len(),
        });
    }
    let full = full.window(0, needed)?;
    let (mut train, mut test) = full.split(info.n_train)?;
    train.name = format!("{}-train", info.name);
    test.name = format!("{}-test", info.name);
    Ok((train, test))
}

/// Linear-Gaussian state-space system driven by first-order filtered noise.
///
/// `x_{t+1} = A x_t + B u_t + w_t`, `y_t = C x_t + v_t`, and
/// `u_{t+1} = a u_t + √(1 - a²) σ_u e_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSsmSpec {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub process_std: f64,
    pub obs_std: f64,
    pub t_train: usize,
    pub t_test: usize,
    /// Pole `a` of the input filter.
    pub input_pole: f64,
    /// Stationary standard deviation `σ_u` of the input.
    pub input_std: f64,
}

impl Default for LinearSsmSpec {
    /// Damped rotation with spectral radius 0.95 and unit static gain.
    fn default() -> Self {
        let (r, th) = (0.95f64, 0.3f64);
        let a = Matrix::from_rows(&[[r * th.cos(), -r * th.sin()], [r * th.sin(), r * th.cos()]]);
        // C (I - A)^{-1} [1, 0]ᵀ, so B can be scaled for unit static gain.
        let (p, q) = (1.0 - a.get(0, 0), -a.get(0, 1));
        let (s, t) = (-a.get(1, 0), 1.0 - a.get(1, 1));
        let gain = t / (p * t - q * s);
        LinearSsmSpec {
            a,
            b: Matrix::from_rows(&[[1.0 / gain], [0.0]]),
            c: Matrix::from_rows(&[[1.0, 0.0]]),
            process_std: 0.02,
            obs_std: 0.05,
            t_train: 600,
            t_test: 300,
            input_pole: 0.0,
            input_std: 1.0,
        }
    }
}

impl LinearSsmSpec {
    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn spectral_radius(&self) -> f64 {
        let n = self.a.rows();
        let a = nalgebra::DMatrix::from_row_slice(n, n, self.a.data());
        a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.rows();
        if self.a.cols() != n || self.b.rows() != n || self.c.cols() != n {
            return Err(Error::DimensionMismatch("A, B and C shapes disagree".into()));
        }
        let rho = self.spectral_radius();
        if !(rho < 1.0) {
            return Err(Error::UnstableSpec(rho));
        }
        if self.process_std < 0.0 || self.obs_std < 0.0 || self.input_std < 0.0 || self.input_pole.abs() >= 1.0 {
            return Err(Error::Config(
                "noise levels must be non-negative and the input pole inside (-1, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Simulates `spec` from `x_0 = 0` and splits the run into train and test parts.
pub fn generate_linear_ssm(spec: &LinearSsmSpec, seed: u64) -> Result<(Trajectory, Trajectory)> {
    spec.validate()?;
    let n = spec.state_dim();
    let (du, dy) = (spec.b.cols(), spec.c.rows());
    let total = spec.t_train + spec.t_test;
    let mut rng = SeededRng::new(seed);
    let drive = (1.0 - spec.input_pole * spec.input_pole).sqrt() * spec.input_std;
    let mut u_now: Vec<f64> = (0..du).map(|_| spec.input_std * rng.normal()).collect();
    let mut x = vec![0.0; n];
    let mut u = Vec::with_capacity(total * du);
    let mut y = Vec::with_capacity(total * dy);
    for _ in 0..total {
        for k in 0..dy {
            let cx: f64 = (0..n).map(|j| spec.c.get(k, j) * x[j]).sum();
            y.push(cx + spec.obs_std * rng.normal());
        }
        u.extend_from_slice(&u_now);
        let next: Vec<f64> = (0..n)
            .map(|i| {
                let ax: f64 = (0..n).map(|j| spec.a.get(i, j) * x[j]).sum();
                let bu: f64 = (0..du).map(|j| spec.b.get(i, j) * u_now[j]).sum();
                ax + bu + spec.process_std * rng.normal()
            })
            .collect();
        x = next;
        u_now = u_now
            .iter()
            .map(|v| spec.input_pole * v + drive * rng.normal())
            .collect();
    }
    let full = Trajectory::new("synthetic", Matrix::new(total, du, u), Matrix::new(total, dy, y))?;
    full.split(spec.t_train)
}

/// Stationary covariance of the state when inputs are treated as unknown.
fn stationary_state_cov(spec: &LinearSsmSpec) -> Matrix {
    let (n, du) = (spec.state_dim(), spec.b.cols());
    let m = n + du;
    let aug = Matrix::from_fn(m, m, |i, j| match (i < n, j < n) {
        (true, true) => spec.a.get(i, j),
        (true, false) => spec.b.get(i, j - n),
        (false, false) if i == j => spec.input_pole,
        _ => 0.0,
    });
    let drive = (1.0 - spec.input_pole.powi(2)) * spec.input_std.powi(2);
    let q = Matrix::from_fn(m, m, |i, j| match (i == j, i < n) {
        (true, true) => spec.process_std.powi(2),
        (true, false) => drive,
        _ => 0.0,
    });
    let mut p = q.clone();
    for _ in 0..5000 {
        let next = aug.matmul(&p).matmul(&aug.transpose()).add(&q);
        let done = next.max_abs_diff(&p) < 1e-14;
        p = next;
        if done {
            break;
        }
    }
    p.block(0, 0, n, n)
}

/// Output RMSE of the true model's mean prediction after a Kalman filter
/// has processed the first `init_window` steps of `test`.
///
/// The filter starts from the stationary state distribution, assimilates
/// `y_0 .. y_{L-1}`, then propagates `x̂_{t+1} = A x̂_t + B u_t` open loop.
/// The error is averaged over steps `L..T`.
pub fn kalman_free_simulation_rmse(spec: &LinearSsmSpec, test: &Trajectory, init_window: usize) -> Result<f64> {
    spec.validate()?;
    let (n, dy) = (spec.state_dim(), spec.c.rows());
    if test.len() <= init_window || init_window == 0 {
        return Err(Error::TrajectoryTooShort {
            needed: init_window + 1,
            got: test.len(),
        });
    }
    let q = Matrix::identity(n).scale(spec.process_std.powi(2));
    let r = Matrix::identity(dy).scale(spec.obs_std.powi(2).max(1e-12));
    let mut x = Matrix::zeros(n, 1);
    let mut p = stationary_state_cov(spec);
    let mut sq = 0.0;
    for t in 0..test.len() {
        let u_t = Matrix::col_vector(test.u.row(t).to_vec());
        let y_t = Matrix::col_vector(test.y.row(t).to_vec());
        if t < init_window {
            let s = spec.c.matmul(&p).matmul(&spec.c.transpose()).add(&r);
            let pct = p.matmul(&spec.c.transpose());
            let gain = s.cholesky()?.cholesky_solve(&pct.transpose()).transpose();
            let innov = y_t.sub(&spec.c.matmul(&x));
            x = x.add(&gain.matmul(&innov));
            p = p.sub(&gain.matmul(&spec.c).matmul(&p));
        } else {
            let e = y_t.sub(&spec.c.matmul(&x));
            sq += e.data().iter().map(|v| v * v).sum::<f64>();
        }
        x = spec.a.matmul(&x).add(&spec.b.matmul(&u_t));
        p = spec.a.matmul(&p).matmul(&spec.a.transpose()).add(&q);
    }
    Ok((sq / ((test.len() - init_window) * dy) as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_a_two_row_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "u_1,y_1\n0.5,1\n-1,2.5\n");
        let t = load_csv(&p).unwrap();
        assert_eq!((t.len(), t.input_dim(), t.output_dim()), (2, 1, 1));
        assert_eq!(t.y.col(0), vec![1.0, 2.5]);
    }

    #[test]
    fn non_numeric_cell_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "u_1,y_1\n0.5,1\n-1,abc\n");
        match load_csv(&p).unwrap_err() {
            Error::Parse { row, column, .. } => assert_eq!((row, column.as_str()), (2, "y_1")),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_output_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "u_1,u_2\n1,2\n");
        assert!(matches!(load_csv(&p), Err(Error::MissingColumn { .. })));
        let p = write(&dir, "b.csv", "u_1,y_2\n1,2\n");
        assert!(matches!(load_csv(&p), Err(Error::MissingColumn { .. })));
    }

    #[test]
    fn normalization_example_and_round_trip() {
        let t = Trajectory::new(
            "t",
            Matrix::col_vector(vec![0.0, 4.0]),
            Matrix::col_vector(vec![1.0, 3.0]),
        )
        .unwrap();
        let s = NormStats::from_training(&[&t]).unwrap();
        assert_eq!((s.y_mean[0], s.y_std[0]), (2.0, 1.0));
        let n = s.normalize(&t).unwrap();
        assert_eq!(n.y.col(0), vec![-1.0, 1.0]);
        let back = s.denormalize(&n).unwrap();
        assert!(back.y.max_abs_diff(&t.y) < 1e-12 && back.u.max_abs_diff(&t.u) < 1e-12);
    }

    #[test]
    fn constant_channel_is_rejected() {
        let t = Trajectory::new(
            "t",
            Matrix::col_vector(vec![1.0, 1.0]),
            Matrix::col_vector(vec![1.0, 3.0]),
        )
        .unwrap();
        assert!(matches!(
            NormStats::from_training(&[&t]),
            Err(Error::ZeroVariance { .. })
        ));
    }

    #[test]
    fn test_data_uses_training_statistics() {
        let train = Trajectory::new(
            "a",
            Matrix::col_vector(vec![0.0, 2.0]),
            Matrix::col_vector(vec![0.0, 2.0]),
        )
        .unwrap();
        let test = Trajectory::new(
            "b",
            Matrix::col_vector(vec![5.0, 7.0]),
            Matrix::col_vector(vec![5.0, 7.0]),
        )
        .unwrap();
        let s = NormStats::from_training(&[&train]).unwrap();
        let n = s.normalize(&test).unwrap();
        assert!(n.y.col(0).iter().sum::<f64>().abs() > 1.0);
    }

    #[test]
    fn registry_splits() {
        let d = benchmark("Drives").unwrap();
        assert_eq!((d.n_train, d.n_test, d.history), (250, 250, 10));
        assert_eq!(benchmark("furnace").unwrap().history, 3);
        assert_eq!(benchmark("dryer").unwrap().history, 2);
        assert!(benchmark("sarcos").is_none());
    }

    #[test]
    fn default_spec_is_stable_with_unit_gain() {
        let s = LinearSsmSpec::default();
        assert!((s.spectral_radius() - 0.95).abs() < 1e-12);
        let i_a = Matrix::identity(2).sub(&s.a);
        let l = nalgebra::DMatrix::from_row_slice(2, 2, i_a.data());
        let inv = l.try_inverse().unwrap();
        let g: f64 = (0..2).map(|j| inv[(0, j)] * s.b.get(j, 0)).sum();
        assert!((g - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unstable_spec_is_rejected() {
        let s = LinearSsmSpec {
            a: Matrix::from_rows(&[[1.01, 0.0], [0.0, 0.5]]),
            ..LinearSsmSpec::default()
        };
        assert!(matches!(generate_linear_ssm(&s, 0), Err(Error::UnstableSpec(_))));
    }

    #[test]
    fn silent_system_outputs_zero() {
        let s = LinearSsmSpec {
            process_std: 0.0,
            obs_std: 0.0,
            input_std: 0.0,
            ..LinearSsmSpec::default()
        };
        let (train, test) = generate_linear_ssm(&s, 3).unwrap();
        assert!(train.y.data().iter().chain(test.y.data()).all(|v| *v == 0.0));
        assert_eq!(kalman_free_simulation_rmse(&s, &test, 16).unwrap(), 0.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = LinearSsmSpec::default();
        assert_eq!(generate_linear_ssm(&s, 1).unwrap(), generate_linear_ssm(&s, 1).unwrap());
        assert_ne!(
            generate_linear_ssm(&s, 1).unwrap().0,
            generate_linear_ssm(&s, 2).unwrap().0
        );
    }

    #[test]
    fn noise_free_kalman_reference_is_exact() {
        let s = LinearSsmSpec {
            process_std: 0.0,
            obs_std: 0.0,
            ..LinearSsmSpec::default()
        };
        let (_, test) = generate_linear_ssm(&s, 4).unwrap();
        assert!(kalman_free_simulation_rmse(&s, &test, 16).unwrap() < 1e-6);
    }

    #[test]
    fn pure_noise_system_reference_is_the_noise_level() {
        let s = LinearSsmSpec {
            a: Matrix::zeros(2, 2),
            process_std: 0.0,
            t_train: 10,
            t_test: 100_000,
            ..LinearSsmSpec::default()
        };
        let (_, test) = generate_linear_ssm(&s, 5).unwrap();
        let rmse = kalman_free_simulation_rmse(&s, &test, 16).unwrap();
        assert!((rmse / s.obs_std - 1.0).abs() < 0.05, "{rmse}");
    }
}
