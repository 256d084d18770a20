//! Sparse GP-NARX baseline.
//!
//! One sparse GP per output dimension maps the regressor
//! `(y_t, ..., y_{t-L_y+1}, u_t, ..., u_{t-L_u+1})` to `y_{t+1}`. Long-range
//! prediction feeds predicted means back into the regressor.

use serde::{Deserialize, Serialize};

use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::kernel::{MeanFn, SeArdKernel};
use crate::sparse_gp::{fit_regression, RegressionOptions, SparseGpDim};
use crate::tensor::{Matrix, SeededRng};

const INIT_NOISE: f64 = 0.1;

/// Configuration of the NARX baseline; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NarxConfig {
    pub history_y: usize,
    pub history_u: usize,
    pub n_inducing: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for NarxConfig {
    fn default() -> Self {
        NarxConfig {
            history_y: 10,
            history_u: 10,
            n_inducing: 100,
            iterations: 1000,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

impl NarxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history_y == 0 || self.history_u == 0 || self.n_inducing == 0 || self.iterations == 0 {
            return Err(Error::Config(
                "history lengths, n_inducing and iterations must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Steps of history needed before the first prediction.
    pub fn history(&self) -> usize {
        self.history_y.max(self.history_u)
    }
}

/// Trained NARX regressors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarxModel {
    pub config: NarxConfig,
    pub output_dim: usize,
    pub input_dim: usize,
    /// One regressor per output dimension.
    pub gps: Vec<SparseGpDim>,
    /// `ln σ²_n` per output dimension.
    pub log_noise: Vec<f64>,
}

/// Regressor for predicting step `t + 1` from histories ending at step `t`.
fn regressor(y: &Matrix, u: &Matrix, t: usize, cfg: &NarxConfig, out: &mut Vec<f64>) {
    for k in 0..cfg.history_y {
        out.extend_from_slice(y.row(t - k));
    }
    for k in 0..cfg.history_u {
        out.extend_from_slice(u.row(t - k));
    }
}

/// Regression inputs and targets built by sliding over `traj`.
pub fn regression_data(traj: &Trajectory, cfg: &NarxConfig) -> Result<(Matrix, Matrix)> {
    let h = cfg.history();
    if traj.len() <= h {
        return Err(Error::TrajectoryTooShort {
            needed: h + 1,
            got: traj.len(),
        });
    }
    let dim = cfg.history_y * traj.output_dim() + cfg.history_u * traj.input_dim();
    let n = traj.len() - h;
    let mut x = Vec::with_capacity(n * dim);
    let mut targets = Vec::with_capacity(n * traj.output_dim());
    for t in h - 1..traj.len() - 1 {
        regressor(&traj.y, &traj.u, t, cfg, &mut x);
        targets.extend_from_slice(traj.y.row(t + 1));
    }
    Ok((Matrix::new(n, dim, x), Matrix::new(n, traj.output_dim(), targets)))
}

/// Fits one sparse GP per output by maximizing the regression bound.
///
/// Inducing inputs start at a random subset of the regressors; the signal
/// variance starts at 1, every squared lengthscale at the regressor
/// dimension and the noise at 0.1. `q(z)` is kept at its optimum for the
/// current hyper-parameters while these follow the bound's gradient.
pub fn fit_narx(traj: &Trajectory, config: &NarxConfig) -> Result<NarxModel> {
    config.validate()?;
    let (x, targets) = regression_data(traj, config)?;
    let n = x.rows();
    let p = config.n_inducing.min(n);
    let mut rng = SeededRng::new(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..p {
        let j = i + rng.below(n - i);
        order.swap(i, j);
    }
    let chosen = &order[..p];
    let dim = x.cols();
    let opts = RegressionOptions {
        iterations: config.iterations,
        learning_rate: config.learning_rate,
        train_hypers: true,
        train_inducing_inputs: true,
        closed_form_q: true,
    };
    let mut gps = Vec::with_capacity(traj.output_dim());
    let mut log_noise = Vec::with_capacity(traj.output_dim());
    for k in 0..traj.output_dim() {
        let y = targets.col(k);
        let gp = SparseGpDim {
            inducing_inputs: Matrix::from_fn(p, dim, |i, j| x.get(chosen[i], j)),
            q_mean: vec![0.0; p],
            q_log_var: vec![0.0; p],
            kernel: SeArdKernel::isotropic(1.0, dim as f64, dim),
            mean_fn: MeanFn::Zero,
            dim: k,
        };
        let fit = fit_regression(gp, INIT_NOISE.ln(), &x, &y, &opts)?;
        log::debug!("narx output {k}: bound {:.4}", fit.elbo);
        gps.push(fit.gp);
        log_noise.push(fit.log_noise);
    }
    Ok(NarxModel {
        config: config.clone(),
        output_dim: traj.output_dim(),
        input_dim: traj.input_dim(),
        gps,
        log_noise,
    })
}

/// Mean-propagation forecast with one-step predictive variances.
#[derive(Debug, Clone, PartialEq)]
pub struct NarxPrediction {
    /// `T x D_y`; the warm-start rows hold the observed values.
    pub mean: Matrix,
    /// `T x D_y` one-step predictive variances including noise.
    pub variance: Matrix,
}

/// Predicts outputs for every step of `u`, using the rows of `y_warm` as
/// the observed outputs of the first steps.
pub fn narx_free_simulation(model: &NarxModel, u: &Matrix, y_warm: &Matrix) -> Result<NarxPrediction> {
    let h = model.config.history();
    let w = y_warm.rows();
    if w < h {
        return Err(Error::WindowTooShort { needed: h, got: w });
    }
    if u.cols() != model.input_dim || y_warm.cols() != model.output_dim {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} inputs and {} outputs, got {} and {}",
            model.input_dim,
            model.output_dim,
            u.cols(),
            y_warm.cols()
        )));
    }
    if u.rows() < w {
        return Err(Error::DimensionMismatch(format!(
            "{} input steps do not cover the {w}-step warm start",
            u.rows()
        )));
    }
    let prepared: Vec<_> = model.gps.iter().map(|g| g.prepare()).collect::<Result<_>>()?;
    let noise: Vec<f64> = model.log_noise.iter().map(|v| v.exp()).collect();
    let t_total = u.rows();
    let dy = model.output_dim;
    let mut mean = Matrix::zeros(t_total, dy);
    let mut variance = Matrix::zeros(t_total, dy);
    for t in 0..w {
        mean.row_mut(t).copy_from_slice(y_warm.row(t));
        variance.row_mut(t).copy_from_slice(&noise);
    }
    let mut reg = Vec::new();
    for t in w..t_total {
        reg.clear();
        regressor(&mean, u, t - 1, &model.config, &mut reg);
        for (k, gp) in prepared.iter().enumerate() {
            let p = gp.predict(&reg)?;
            mean.set(t, k, p.mean);
            variance.set(t, k, p.variance + noise[k]);
        }
    }
    Ok(NarxPrediction { mean, variance })
}
