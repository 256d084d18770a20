//! Initialization, Adam and the two training regimes.
//!
//! Full-gradient training rolls the whole trajectory out from a fixed
//! `q(x_1) = N(0, I)`. Stochastic training draws windows of `subtraj_len`
//! steps, initializes each from the recognition model and rescales the
//! likelihood sum so that the minibatch objective is unbiased for the
//! full-data objective.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::kernel::{MeanFn, SeArdKernel};
use crate::recognition::RecognitionParams;
use crate::sparse_gp::SparseGpDim;
use crate::ssm::{elbo_weighted, minibatch_elbo, DiagGaussian, ElboReport, PrssmParams};
use crate::tensor::{Matrix, SeededRng};

/// Inducing inputs are drawn from `U(-ZETA_RANGE, ZETA_RANGE)`.
pub const ZETA_RANGE: f64 = 2.0;
pub const INIT_Q_MEAN_STD: f64 = 0.05;
pub const INIT_Q_VAR: f64 = 0.01 * 0.01;
pub const INIT_PROCESS_VAR: f64 = 0.002 * 0.002;
pub const INIT_OBS_VAR: f64 = 1.0;
pub const INIT_SIGNAL_VAR: f64 = 0.5 * 0.5;
pub const INIT_LENGTHSCALE_SQ: f64 = 2.0;
pub const RECOGNITION_WEIGHT_STD: f64 = 0.05;
/// Consecutive failed iterations tolerated before training stops.
pub const MAX_CONSECUTIVE_FAILURES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    FullGradient,
    Stochastic,
}

/// Training configuration; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Learning rate is multiplied by this factor every `lr_decay_every` iterations.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Global gradient-norm limit.
    pub grad_clip: f64,
    pub n_samples: usize,
    pub n_inducing: usize,
    pub latent_dim: usize,
    pub batch_size: usize,
    pub subtraj_len: usize,
    pub recognition_window: usize,
    pub recognition_hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Stochastic,
            iterations: 5000,
            learning_rate: 0.01,
            lr_decay: 0.5,
            lr_decay_every: 2000,
            grad_clip: 100.0,
            n_samples: 50,
            n_inducing: 20,
            latent_dim: 4,
            batch_size: 10,
            subtraj_len: 100,
            recognition_window: 16,
            recognition_hidden: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("iterations", self.iterations),
            ("n_samples", self.n_samples),
            ("n_inducing", self.n_inducing),
            ("latent_dim", self.latent_dim),
            ("batch_size", self.batch_size),
            ("subtraj_len", self.subtraj_len),
            ("recognition_window", self.recognition_window),
            ("recognition_hidden", self.recognition_hidden),
            ("lr_decay_every", self.lr_decay_every),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config(
                "learning_rate, lr_decay and grad_clip must be positive".into(),
            ));
        }
        if self.mode == TrainMode::Stochastic && self.recognition_window > self.subtraj_len {
            return Err(Error::Config(format!(
                "recognition_window {} exceeds subtraj_len {}",
                self.recognition_window, self.subtraj_len
            )));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((iteration / self.lr_decay_every) as i32)
    }
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One descent step on `params` along `grad`. A non-finite gradient
    /// leaves both the parameters and the state untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "optimizer tracks {} parameters, got {} values and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Rescales `grad` in place so its Euclidean norm is at most `max_norm`.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Default initialization for a model with the given data dimensions.
///
/// Inducing outputs start at the prior mean of their inputs plus small
/// noise, so the initial transition is close to a random walk.
pub fn init_params(config: &TrainConfig, input_dim: usize, output_dim: usize) -> Result<PrssmParams> {
    config.validate()?;
    let dx = config.latent_dim;
    if output_dim > dx {
        return Err(Error::Config(format!(
            "latent_dim {dx} is smaller than the {output_dim} observed outputs"
        )));
    }
    let p = config.n_inducing;
    let d_in = dx + input_dim;
    let mut rng = SeededRng::new(config.seed);
    let mean_fn = MeanFn::IdentityOnState { state_dim: dx };
    let mut gps = Vec::with_capacity(dx);
    for d in 0..dx {
        let z = Matrix::from_fn(p, d_in, |_, _| rng.uniform_range(-ZETA_RANGE, ZETA_RANGE));
        let prior = mean_fn.mean_vector(&z, d)?;
        let q_mean = prior.iter().map(|m| m + INIT_Q_MEAN_STD * rng.normal()).collect();
        gps.push(SparseGpDim {
            inducing_inputs: z,
            q_mean,
            q_log_var: vec![INIT_Q_VAR.ln(); p],
            kernel: SeArdKernel::isotropic(INIT_SIGNAL_VAR, INIT_LENGTHSCALE_SQ, d_in),
            mean_fn,
            dim: d,
        });
    }
    let recognition = (config.mode == TrainMode::Stochastic).then(|| {
        RecognitionParams::init(
            config.recognition_window,
            config.recognition_hidden,
            output_dim,
            input_dim,
            dx,
            RECOGNITION_WEIGHT_STD,
            &mut rng.substream(1),
        )
    });
    Ok(PrssmParams {
        gps,
        log_process_noise: vec![INIT_PROCESS_VAR.ln(); dx],
        log_obs_noise: vec![INIT_OBS_VAR.ln(); output_dim],
        init_state: DiagGaussian::standard(dx),
        recognition,
    })
}

/// `batch` windows of `len` steps drawn uniformly over all valid
/// (trajectory, start) pairs.
pub fn sample_minibatch(
    trajs: &[Trajectory],
    batch: usize,
    len: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Trajectory>> {
    let counts: Vec<usize> = trajs.iter().map(|t| (t.len() + 1).saturating_sub(len)).collect();
    let total: usize = counts.iter().sum();
    if total == 0 || len == 0 {
        return Err(Error::TrajectoryTooShort {
            needed: len,
            got: trajs.iter().map(Trajectory::len).max().unwrap_or(0),
        });
    }
    (0..batch)
        .map(|_| {
            let mut k = rng.below(total);
            let mut i = 0;
            while k >= counts[i] {
                k -= counts[i];
                i += 1;
            }
            trajs[i].window(k, len)
        })
        .collect()
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub elbo: f64,
    pub loglik: f64,
    pub kl_z: f64,
    pub kl_x1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: PrssmParams,
    /// One entry per successful iteration.
    pub log: Vec<LogEntry>,
}

fn is_recoverable(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFiniteState { .. } | Error::NotPositiveDefinite { .. } | Error::NonFiniteGradient
    )
}

/// Objective and gradient at `params` for iteration `iter`.
pub fn objective(params: &PrssmParams, train: &[Trajectory], config: &TrainConfig, iter: usize) -> Result<ElboReport> {
    let mut rng = SeededRng::new(config.seed).substream(iter as u64 + 2);
    match config.mode {
        TrainMode::FullGradient => {
            let mut total: Option<ElboReport> = None;
            for (i, t) in train.iter().enumerate() {
                let weight = if i == 0 { 1.0 } else { 0.0 };
                let r = elbo_weighted(params, t, config.n_samples, &mut rng, false, weight)?;
                total = Some(match total {
                    None => r,
                    Some(mut acc) => {
                        acc.elbo += r.elbo;
                        acc.expected_loglik += r.expected_loglik;
                        for (a, g) in acc.gradient.iter_mut().zip(&r.gradient) {
                            *a += g;
                        }
                        acc
                    }
                });
            }
            total.ok_or_else(|| Error::Config("no training data".into()))
        }
        TrainMode::Stochastic => {
            let windows = sample_minibatch(train, config.batch_size, config.subtraj_len, &mut rng)?;
            let steps: usize = train.iter().map(Trajectory::len).sum();
            let scale = steps as f64 / (config.batch_size * config.subtraj_len) as f64;
            minibatch_elbo(params, &windows, config.n_samples, &mut rng, scale)
        }
    }
}

/// Maximizes the ELBO with Adam from [`init_params`].
pub fn fit(train: &[Trajectory], config: &TrainConfig) -> Result<FitResult> {
    config.validate()?;
    let first = train.first().ok_or_else(|| Error::Config("no training data".into()))?;
    let params = init_params(config, first.input_dim(), first.output_dim())?;
    fit_from(params, train, config)
}

/// Maximizes the ELBO with Adam starting at `params`.
///
/// In full-gradient mode the initial-state distribution is held fixed.
pub fn fit_from(mut params: PrssmParams, train: &[Trajectory], config: &TrainConfig) -> Result<FitResult> {
    config.validate()?;
    if config.mode == TrainMode::Stochastic {
        if params.recognition.is_none() {
            return Err(Error::Config("stochastic training needs a recognition model".into()));
        }
        if train.iter().all(|t| t.len() < config.subtraj_len) {
            return Err(Error::TrajectoryTooShort {
                needed: config.subtraj_len,
                got: train.iter().map(Trajectory::len).max().unwrap_or(0),
            });
        }
    }
    let frozen = match config.mode {
        TrainMode::FullGradient => params.init_state_range(),
        TrainMode::Stochastic => 0..0,
    };
    let mut flat = params.to_flat();
    let mut adam = AdamState::new(flat.len());
    let mut log = Vec::with_capacity(config.iterations);
    let mut failures = 0;
    for iter in 0..config.iterations {
        let report = objective(&params, train, config, iter).and_then(|r| {
            if r.gradient.iter().all(|g| g.is_finite()) && r.elbo.is_finite() {
                Ok(r)
            } else {
                Err(Error::NonFiniteGradient)
            }
        });
        let report = match report {
            Ok(r) => r,
            Err(e) if is_recoverable(&e) => {
                failures += 1;
                log::warn!("iteration {iter} skipped: {e}");
                if failures >= MAX_CONSECUTIVE_FAILURES {
                    return Err(Error::Diverged(iter));
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        failures = 0;
        let mut step: Vec<f64> = report.gradient.iter().map(|g| -g).collect();
        step[frozen.clone()].iter_mut().for_each(|g| *g = 0.0);
        clip_global_norm(&mut step, config.grad_clip);
        adam.step(&mut flat, &step, config.learning_rate_at(iter))?;
        params.set_flat(&flat)?;
        log.push(LogEntry {
            iter,
            elbo: report.elbo,
            loglik: report.expected_loglik,
            kl_z: report.inducing_kl,
            kl_x1: report.init_state_kl,
        });
        if iter % 100 == 0 {
            log::debug!("iteration {iter}: elbo {:.4}", report.elbo);
        }
    }
    Ok(FitResult { params, log })
}

/// Writes the log as CSV with header `iter,elbo,loglik,kl_z,kl_x1`.
pub fn write_log_csv(path: impl AsRef<Path>, log: &[LogEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iter,elbo,loglik,kl_z,kl_x1\n");
    for e in log {
        out.push_str(&format!("{},{},{},{},{}\n", e.iter, e.elbo, e.loglik, e.kl_z, e.kl_x1));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
