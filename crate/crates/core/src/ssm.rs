//! The probabilistic recurrent state-space model.
//!
//! Latent transitions are one sparse GP per state dimension, driven by the
//! concatenation `x̂_t = (x_t, u_t)`. Sample paths are drawn by
//! reparameterization,
//!
//! ```text
//! x_{t+1,d} = μ_d(x̂_t) + ε √(σ²_d(x̂_t) + σ²_{x,d}),   ε ~ N(0, 1)
//! ```
//!
//! and outputs are the first `D_y` state entries plus Gaussian noise. The
//! training objective is
//!
//! ```text
//! ELBO = Σ_t E[log N(y_t | C x_t, σ²_y)] - Σ_d KL(q(z_d) ‖ p(z_d)) - KL(q(x_1) ‖ N(0, I))
//! ```
//!
//! with the expectation replaced by an average over `N` sample paths.
//!
//! Random draws are consumed in a fixed order: one `R x D_x` matrix for the
//! initial state, then one `R x D_x` matrix per transition, where `R` is the
//! number of simulated rows. The taped rollout and the plain simulation
//! follow the same order, so both see the same paths for the same seed.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::recognition::{RecognitionParams, RecognitionVars};
use crate::sparse_gp::{GpVars, PreparedGp, SparseGpDim, TapedGp};
use crate::tensor::{Adjoints, Matrix, SeededRng, Tape, Var};

/// Gaussian with diagonal covariance, stored as mean and log-variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    /// `N(0, I)` of dimension `dim`.
    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn var(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    /// `KL(self ‖ N(0, I))`.
    pub fn kl_to_standard(&self) -> f64 {
        0.5 * self
            .mean
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
            .sum::<f64>()
    }
}

/// Fixed selector `C = [I, 0]` reading the first `D_y` state entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservationModel {
    pub output_dim: usize,
    pub state_dim: usize,
}

impl ObservationModel {
    pub fn new(output_dim: usize, state_dim: usize) -> Result<Self> {
        if output_dim > state_dim {
            return Err(Error::DimensionMismatch(format!(
                "{output_dim} outputs cannot be read from {state_dim} latent states"
            )));
        }
        Ok(ObservationModel { output_dim, state_dim })
    }

    pub fn apply<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[..self.output_dim]
    }

    pub fn matrix(&self) -> Matrix {
        Matrix::from_fn(self.output_dim, self.state_dim, |i, j| if i == j { 1.0 } else { 0.0 })
    }
}

/// Every trainable quantity of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrssmParams {
    /// One transition GP per latent dimension.
    pub gps: Vec<SparseGpDim>,
    /// `ln σ²_{x,d}`
    pub log_process_noise: Vec<f64>,
    /// `ln σ²_{y,k}`
    pub log_obs_noise: Vec<f64>,
    /// `q(x_1)` used when no recognition model is supplied.
    pub init_state: DiagGaussian,
    pub recognition: Option<RecognitionParams>,
}

/// Tape leaves for one registration of [`PrssmParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub gps: Vec<GpVars>,
    pub log_process_noise: Var,
    pub log_obs_noise: Var,
    pub init_mean: Var,
    pub init_log_var: Var,
    pub recognition: Option<RecognitionVars>,
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub range: Range<usize>,
}

impl PrssmParams {
    pub fn state_dim(&self) -> usize {
        self.gps.len()
    }

    pub fn input_dim(&self) -> usize {
        self.gps.first().map_or(0, |g| g.input_dim()) - self.state_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.log_obs_noise.len()
    }

    pub fn n_inducing(&self) -> usize {
        self.gps.first().map_or(0, |g| g.n_inducing())
    }

    pub fn observation(&self) -> ObservationModel {
        ObservationModel {
            output_dim: self.output_dim(),
            state_dim: self.state_dim(),
        }
    }

    pub fn process_noise(&self) -> Vec<f64> {
        self.log_process_noise.iter().map(|v| v.exp()).collect()
    }

    pub fn obs_noise(&self) -> Vec<f64> {
        self.log_obs_noise.iter().map(|v| v.exp()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let dx = self.state_dim();
        if dx == 0 {
            return Err(Error::DimensionMismatch(
                "model needs at least one latent dimension".into(),
            ));
        }
        ObservationModel::new(self.output_dim(), dx)?;
        let d_in = self.gps[0].input_dim();
        if d_in < dx {
            return Err(Error::DimensionMismatch(format!(
                "GP inputs have {d_in} columns, fewer than the {dx} latent states"
            )));
        }
        for (d, gp) in self.gps.iter().enumerate() {
            gp.validate()?;
            if gp.dim != d || gp.input_dim() != d_in {
                return Err(Error::DimensionMismatch(format!(
                    "GP {d} is inconsistent with the model layout"
                )));
            }
        }
        if self.log_process_noise.len() != dx || self.init_state.dim() != dx || self.init_state.log_var.len() != dx {
            return Err(Error::DimensionMismatch(
                "noise or initial-state length differs from D_x".into(),
            ));
        }
        if let Some(rec) = &self.recognition {
            if rec.state_dim != dx || rec.output_dim != self.output_dim() || rec.input_dim != self.input_dim() {
                return Err(Error::DimensionMismatch(
                    "recognition model does not match the model dimensions".into(),
                ));
            }
        }
        Ok(())
    }

    /// Layout of [`to_flat`](Self::to_flat), group by group.
    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        let mut at = 0;
        let mut push = |name: String, len: usize| {
            out.push(ParamGroup {
                name,
                range: at..at + len,
            });
            at += len;
        };
        for (d, gp) in self.gps.iter().enumerate() {
            push(format!("gp{d}.inducing_inputs"), gp.inducing_inputs.len());
            push(format!("gp{d}.q_mean"), gp.q_mean.len());
            push(format!("gp{d}.q_log_var"), gp.q_log_var.len());
            push(format!("gp{d}.log_signal_var"), 1);
            push(
                format!("gp{d}.log_lengthscales_sq"),
                gp.kernel.log_lengthscales_sq.len(),
            );
        }
        push("log_process_noise".into(), self.log_process_noise.len());
        push("log_obs_noise".into(), self.log_obs_noise.len());
        push("init_state.mean".into(), self.init_state.mean.len());
        push("init_state.log_var".into(), self.init_state.log_var.len());
        if let Some(rec) = &self.recognition {
            push("recognition".into(), rec.n_params());
        }
        out
    }

    /// Flat range covering `q(x_1)`'s mean and log-variance.
    pub fn init_state_range(&self) -> Range<usize> {
        let g = self.groups();
        let start = g.iter().find(|g| g.name == "init_state.mean").map(|g| g.range.start);
        let end = g.iter().find(|g| g.name == "init_state.log_var").map(|g| g.range.end);
        start.unwrap_or(0)..end.unwrap_or(0)
    }

    pub fn n_params(&self) -> usize {
        self.groups().last().map_or(0, |g| g.range.end)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for gp in &self.gps {
            v.extend_from_slice(gp.inducing_inputs.data());
            v.extend_from_slice(&gp.q_mean);
            v.extend_from_slice(&gp.q_log_var);
            v.push(gp.kernel.log_signal_var);
            v.extend_from_slice(&gp.kernel.log_lengthscales_sq);
        }
        v.extend_from_slice(&self.log_process_noise);
        v.extend_from_slice(&self.log_obs_noise);
        v.extend_from_slice(&self.init_state.mean);
        v.extend_from_slice(&self.init_state.log_var);
        if let Some(rec) = &self.recognition {
            v.extend(rec.flat());
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.n_params()
            )));
        }
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|d| *d = it.next().unwrap_or(f64::NAN));
        for gp in &mut self.gps {
            fill(gp.inducing_inputs.data_mut());
            fill(&mut gp.q_mean);
            fill(&mut gp.q_log_var);
            fill(std::slice::from_mut(&mut gp.kernel.log_signal_var));
            fill(&mut gp.kernel.log_lengthscales_sq);
        }
        fill(&mut self.log_process_noise);
        fill(&mut self.log_obs_noise);
        fill(&mut self.init_state.mean);
        fill(&mut self.init_state.log_var);
        if let Some(rec) = &mut self.recognition {
            for slot in rec.flat_mut() {
                *slot = it.next().unwrap_or(f64::NAN);
            }
        }
        Ok(())
    }

    /// Records every parameter as a leaf; recognition weights only when asked.
    pub fn register(&self, tape: &mut Tape, with_recognition: bool) -> ParamVars {
        ParamVars {
            gps: self.gps.iter().map(|g| g.register(tape)).collect(),
            log_process_noise: tape.leaf(Matrix::row_vector(self.log_process_noise.clone())),
            log_obs_noise: tape.leaf(Matrix::row_vector(self.log_obs_noise.clone())),
            init_mean: tape.leaf(Matrix::row_vector(self.init_state.mean.clone())),
            init_log_var: tape.leaf(Matrix::row_vector(self.init_state.log_var.clone())),
            recognition: match (&self.recognition, with_recognition) {
                (Some(rec), true) => Some(rec.register(tape)),
                _ => None,
            },
        }
    }

    fn check_trajectory(&self, traj: &Trajectory) -> Result<()> {
        if traj.len() == 0 {
            return Err(Error::TrajectoryTooShort { needed: 1, got: 0 });
        }
        if traj.output_dim() != self.output_dim() || traj.input_dim() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} inputs and {} outputs, trajectory '{}' has {} and {}",
                self.input_dim(),
                self.output_dim(),
                traj.name,
                traj.input_dim(),
                traj.output_dim()
            )));
        }
        Ok(())
    }
}

impl ParamVars {
    /// Gradient laid out like [`PrssmParams::to_flat`].
    pub fn flat_grad(&self, adj: &Adjoints, params: &PrssmParams) -> Vec<f64> {
        let mut v = Vec::with_capacity(params.n_params());
        for g in &self.gps {
            for var in [
                g.inducing_inputs,
                g.q_mean,
                g.q_log_var,
                g.kernel.log_signal_var,
                g.kernel.log_lengthscales_sq,
            ] {
                v.extend_from_slice(adj.wrt(var).data());
            }
        }
        for var in [
            self.log_process_noise,
            self.log_obs_noise,
            self.init_mean,
            self.init_log_var,
        ] {
            v.extend_from_slice(adj.wrt(var).data());
        }
        if let Some(rec) = &params.recognition {
            match &self.recognition {
                Some(rv) => rv
                    .all()
                    .iter()
                    .for_each(|var| v.extend_from_slice(adj.wrt(*var).data())),
                None => v.extend(std::iter::repeat(0.0).take(rec.n_params())),
            }
        }
        v
    }
}

/// Sample paths recorded on a tape, with the GP moments of every transition.
#[derive(Debug)]
pub struct LatentRollout {
    pub tape: Tape,
    pub vars: ParamVars,
    pub gps: Vec<TapedGp>,
    /// `states[t]` is `N x D_x`.
    pub states: Vec<Var>,
    /// Predictive GP means for `x_{t+1}`, `N x D_x`.
    pub step_means: Vec<Var>,
    /// Predictive GP variances for `x_{t+1}` (process noise excluded), `N x D_x`.
    pub step_variances: Vec<Var>,
}

impl LatentRollout {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_samples(&self) -> usize {
        self.states.first().map_or(0, |s| self.tape.value(*s).rows())
    }

    pub fn state(&self, t: usize) -> &Matrix {
        self.tape.value(self.states[t])
    }
}

/// Output of [`elbo`] and [`minibatch_elbo`].
#[derive(Debug, Clone, PartialEq)]
pub struct ElboReport {
    pub elbo: f64,
    pub expected_loglik: f64,
    pub inducing_kl: f64,
    pub init_state_kl: f64,
    /// Aligned with [`PrssmParams::to_flat`].
    pub gradient: Vec<f64>,
}

struct Paths {
    states: Vec<Var>,
    means: Vec<Var>,
    variances: Vec<Var>,
}

fn build_gps(tape: &mut Tape, params: &PrssmParams, vars: &ParamVars) -> Result<Vec<TapedGp>> {
    params
        .gps
        .iter()
        .zip(&vars.gps)
        .map(|(gp, gv)| TapedGp::build(tape, gp, *gv))
        .collect()
}

/// Rolls `R` rows forward through `inputs.len()` steps. Each entry of
/// `inputs` is either `R x D_u` or a single row shared by all rows.
fn taped_paths(
    tape: &mut Tape,
    vars: &ParamVars,
    gps: &[TapedGp],
    x1_mean: Var,
    x1_log_var: Var,
    inputs: &[Matrix],
    rng: &mut SeededRng,
) -> Result<Paths> {
    let (rows, dx) = tape.value(x1_mean).shape();
    let du = inputs.first().map_or(0, |u| u.cols());
    let eps = tape.leaf(rng.normal_matrix(rows, dx));
    let half = tape.scale(x1_log_var, 0.5);
    let std = tape.exp(half);
    let noise = tape.mul(eps, std);
    let x1 = tape.add(x1_mean, noise);
    check_finite(tape.value(x1), 0)?;

    let mut process = Vec::with_capacity(dx);
    for d in 0..dx {
        let lv = tape.col(vars.log_process_noise, d);
        let v = tape.exp(lv);
        process.push(tape.broadcast(v, rows, 1));
    }

    let mut paths = Paths {
        states: vec![x1],
        means: Vec::with_capacity(inputs.len()),
        variances: Vec::with_capacity(inputs.len()),
    };
    for (t, u) in inputs.iter().enumerate().take(inputs.len().saturating_sub(1)) {
        let x = paths.states[t];
        let xhat = if du == 0 {
            x
        } else {
            let ul = tape.leaf(u.clone());
            let ub = tape.broadcast(ul, rows, du);
            tape.concat_cols(&[x, ub])
        };
        let eps = rng.normal_matrix(rows, dx);
        let mut next = Vec::with_capacity(dx);
        let mut means = Vec::with_capacity(dx);
        let mut vars_d = Vec::with_capacity(dx);
        for (d, gp) in gps.iter().enumerate() {
            let (m, v) = gp.predict(tape, xhat)?;
            let total = tape.add(v, process[d]);
            let sd = tape.sqrt(total);
            let e = tape.leaf(Matrix::col_vector(eps.col(d)));
            let step = tape.mul(e, sd);
            next.push(tape.add(m, step));
            means.push(m);
            vars_d.push(v);
        }
        let x_next = tape.concat_cols(&next);
        check_finite(tape.value(x_next), t + 1)?;
        paths.states.push(x_next);
        paths.means.push(tape.concat_cols(&means));
        paths.variances.push(tape.concat_cols(&vars_d));
    }
    Ok(paths)
}

fn check_finite(m: &Matrix, step: usize) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteState { step })
    }
}

fn input_rows(u: &Matrix) -> Vec<Matrix> {
    (0..u.rows()).map(|t| Matrix::row_vector(u.row(t).to_vec())).collect()
}

/// Differentiable rollout of `n_samples` paths from `q_x1` under inputs `u`.
pub fn rollout(
    params: &PrssmParams,
    u: &Matrix,
    q_x1: &DiagGaussian,
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<LatentRollout> {
    params.validate()?;
    check_rollout_args(params, u, q_x1, n_samples)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let gps = build_gps(&mut tape, params, &vars)?;
    let dx = params.state_dim();
    let m = tape.leaf(Matrix::row_vector(q_x1.mean.clone()));
    let m = tape.broadcast(m, n_samples, dx);
    let lv = tape.leaf(Matrix::row_vector(q_x1.log_var.clone()));
    let lv = tape.broadcast(lv, n_samples, dx);
    let paths = taped_paths(&mut tape, &vars, &gps, m, lv, &input_rows(u), rng)?;
    Ok(LatentRollout {
        tape,
        vars,
        gps,
        states: paths.states,
        step_means: paths.means,
        step_variances: paths.variances,
    })
}

fn check_rollout_args(params: &PrssmParams, u: &Matrix, q_x1: &DiagGaussian, n_samples: usize) -> Result<()> {
    if u.rows() == 0 {
        return Err(Error::TrajectoryTooShort { needed: 1, got: 0 });
    }
    if n_samples == 0 {
        return Err(Error::Config("at least one sample path is required".into()));
    }
    if u.cols() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} inputs, got {}",
            params.input_dim(),
            u.cols()
        )));
    }
    if q_x1.dim() != params.state_dim() || q_x1.log_var.len() != params.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "initial state has dimension {}, model has {}",
            q_x1.dim(),
            params.state_dim()
        )));
    }
    Ok(())
}

/// Sum over steps of per-row Gaussian log-densities, divided by `samples`.
fn taped_loglik(
    tape: &mut Tape,
    states: &[Var],
    targets: &[Matrix],
    log_obs_noise: Var,
    dy: usize,
    samples: usize,
) -> Var {
    let mut total: Option<Var> = None;
    for (x, y) in states.iter().zip(targets) {
        let rows = tape.value(*x).rows();
        let pred = tape.slice(*x, 0, 0, rows, dy);
        let target = tape.leaf(y.clone());
        let ll = tape.gauss_loglik(pred, target, log_obs_noise);
        total = Some(match total {
            Some(acc) => tape.add(acc, ll),
            None => ll,
        });
    }
    let total = total.unwrap_or_else(|| tape.leaf(Matrix::scalar(0.0)));
    tape.scale(total, 1.0 / samples as f64)
}

/// `Σ_t (1/N) Σ_i log N(y_t | C x_t^(i), diag σ²_y)` for a recorded rollout.
pub fn log_likelihood(params: &PrssmParams, rollout: &mut LatentRollout, y: &Matrix) -> Result<f64> {
    if y.rows() != rollout.len() || y.cols() != params.output_dim() {
        return Err(Error::DimensionMismatch(format!(
            "rollout is {} steps of {} outputs, observations are {}x{}",
            rollout.len(),
            params.output_dim(),
            y.rows(),
            y.cols()
        )));
    }
    let n = rollout.n_samples();
    let targets = input_rows(y);
    let states = rollout.states.clone();
    let ll = taped_loglik(
        &mut rollout.tape,
        &states,
        &targets,
        rollout.vars.log_obs_noise,
        params.output_dim(),
        n,
    );
    Ok(rollout.tape.scalar(ll))
}

fn taped_kl_to_standard(tape: &mut Tape, mean: Var, log_var: Var) -> Var {
    let v = tape.exp(log_var);
    let m2 = tape.square(mean);
    let a = tape.add(v, m2);
    let b = tape.sub(a, log_var);
    let b = tape.offset(b, -1.0);
    let s = tape.sum(b);
    tape.scale(s, 0.5)
}

fn finish(
    mut t: Tape,
    vars: &ParamVars,
    gps: &[TapedGp],
    params: &PrssmParams,
    loglik: Var,
    init_kl: Option<Var>,
    inducing_kl_weight: f64,
) -> Result<ElboReport> {
    let mut kl_z = gps[0].kl;
    for g in &gps[1..] {
        kl_z = t.add(kl_z, g.kl);
    }
    let weighted = t.scale(kl_z, inducing_kl_weight);
    let mut obj = t.sub(loglik, weighted);
    if let Some(k) = init_kl {
        obj = t.sub(obj, k);
    }
    let adj = t.backward(obj);
    let gradient = vars.flat_grad(&adj, params);
    Ok(ElboReport {
        elbo: t.scalar(obj),
        expected_loglik: t.scalar(loglik),
        inducing_kl: t.scalar(kl_z),
        init_state_kl: init_kl.map_or(0.0, |k| t.scalar(k)),
        gradient,
    })
}

/// ELBO of a whole trajectory with `q(x_1)` taken from `params.init_state`.
pub fn elbo(
    params: &PrssmParams,
    traj: &Trajectory,
    n_samples: usize,
    rng: &mut SeededRng,
    include_init_kl: bool,
) -> Result<ElboReport> {
    elbo_weighted(params, traj, n_samples, rng, include_init_kl, 1.0)
}

/// [`elbo`] with the inducing KL multiplied by `inducing_kl_weight` in the
/// objective and its gradient. The reported `inducing_kl` is unweighted.
pub(crate) fn elbo_weighted(
    params: &PrssmParams,
    traj: &Trajectory,
    n_samples: usize,
    rng: &mut SeededRng,
    include_init_kl: bool,
    inducing_kl_weight: f64,
) -> Result<ElboReport> {
    params.validate()?;
    params.check_trajectory(traj)?;
    check_rollout_args(params, &traj.u, &params.init_state, n_samples)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let gps = build_gps(&mut tape, params, &vars)?;
    let dx = params.state_dim();
    let m = tape.broadcast(vars.init_mean, n_samples, dx);
    let lv = tape.broadcast(vars.init_log_var, n_samples, dx);
    let paths = taped_paths(&mut tape, &vars, &gps, m, lv, &input_rows(&traj.u), rng)?;
    let ll = taped_loglik(
        &mut tape,
        &paths.states,
        &input_rows(&traj.y),
        vars.log_obs_noise,
        params.output_dim(),
        n_samples,
    );
    let init_kl = include_init_kl.then(|| taped_kl_to_standard(&mut tape, vars.init_mean, vars.init_log_var));
    finish(tape, &vars, &gps, params, ll, init_kl, inducing_kl_weight)
}

/// Minibatch ELBO over equal-length windows with recognized initial states.
///
/// The likelihood sum is multiplied by `loglik_scale`; the KL terms are not.
/// The initial-state KL is the average over windows.
pub fn minibatch_elbo(
    params: &PrssmParams,
    windows: &[Trajectory],
    n_samples: usize,
    rng: &mut SeededRng,
    loglik_scale: f64,
) -> Result<ElboReport> {
    params.validate()?;
    let rec = params
        .recognition
        .as_ref()
        .ok_or_else(|| Error::Config("minibatch training needs a recognition model".into()))?;
    let first = windows.first().ok_or_else(|| Error::Config("empty minibatch".into()))?;
    let len = first.len();
    for w in windows {
        params.check_trajectory(w)?;
        if w.len() != len {
            return Err(Error::DimensionMismatch("minibatch windows differ in length".into()));
        }
    }
    if n_samples == 0 {
        return Err(Error::Config("at least one sample path is required".into()));
    }
    let b = windows.len();
    let rows = b * n_samples;
    let (dx, dy, du) = (params.state_dim(), params.output_dim(), params.input_dim());

    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let rv = vars.recognition.expect("recognition registered");
    let gps = build_gps(&mut tape, params, &vars)?;

    let mut flat = Vec::new();
    for w in windows {
        flat.extend_from_slice(rec.window_row(&w.y, &w.u)?.data());
    }
    let win = tape.leaf(Matrix::new(b, flat.len() / b, flat));
    let (m, lv) = rv.recognize(&mut tape, win, dx);
    let expand = tape.leaf(Matrix::from_fn(
        rows,
        b,
        |r, c| if r / n_samples == c { 1.0 } else { 0.0 },
    ));
    let m_rows = tape.matmul(expand, m);
    let lv_rows = tape.matmul(expand, lv);

    let repeat = |pick: &dyn Fn(&Trajectory, usize) -> &[f64], t: usize, cols: usize| {
        let mut data = Vec::with_capacity(rows * cols);
        for w in windows {
            for _ in 0..n_samples {
                data.extend_from_slice(pick(w, t));
            }
        }
        Matrix::new(rows, cols, data)
    };
    let inputs: Vec<Matrix> = (0..len).map(|t| repeat(&|w, t| w.u.row(t), t, du)).collect();
    let targets: Vec<Matrix> = (0..len).map(|t| repeat(&|w, t| w.y.row(t), t, dy)).collect();

    let paths = taped_paths(&mut tape, &vars, &gps, m_rows, lv_rows, &inputs, rng)?;
    let ll = taped_loglik(&mut tape, &paths.states, &targets, vars.log_obs_noise, dy, n_samples);
    let ll = tape.scale(ll, loglik_scale);
    let kl_sum = taped_kl_to_standard(&mut tape, m, lv);
    let init_kl = tape.scale(kl_sum, 1.0 / b as f64);
    finish(tape, &vars, &gps, params, ll, Some(init_kl), 1.0)
}

/// Plain-value transition model with every GP factorized once.
pub struct PreparedModel<'a> {
    params: &'a PrssmParams,
    gps: Vec<PreparedGp<'a>>,
    process_noise: Vec<f64>,
}

impl<'a> PreparedModel<'a> {
    pub fn new(params: &'a PrssmParams) -> Result<Self> {
        params.validate()?;
        Ok(PreparedModel {
            params,
            gps: params.gps.iter().map(|g| g.prepare()).collect::<Result<_>>()?,
            process_noise: params.process_noise(),
        })
    }

    /// One transition for every row of `x` under the shared input `u`.
    /// Returns the next states and the GP means and variances.
    pub fn step(&self, x: &Matrix, u: &[f64], eps: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        let (rows, dx) = x.shape();
        let du = u.len();
        let xhat = Matrix::from_fn(rows, dx + du, |i, j| if j < dx { x.get(i, j) } else { u[j - dx] });
        let mut next = Matrix::zeros(rows, dx);
        let mut means = Matrix::zeros(rows, dx);
        let mut vars = Matrix::zeros(rows, dx);
        for (d, gp) in self.gps.iter().enumerate() {
            let (m, v) = gp.predict_rows(&xhat)?;
            for i in 0..rows {
                let sd = (v[i] + self.process_noise[d]).sqrt();
                next.set(i, d, m[i] + eps.get(i, d) * sd);
                means.set(i, d, m[i]);
                vars.set(i, d, v[i]);
            }
        }
        Ok((next, means, vars))
    }

    fn initial(&self, q_x1: &DiagGaussian, n: usize, rng: &mut SeededRng) -> Matrix {
        let eps = rng.normal_matrix(n, self.params.state_dim());
        let sd: Vec<f64> = q_x1.log_var.iter().map(|lv| (0.5 * lv).exp()).collect();
        Matrix::from_fn(n, self.params.state_dim(), |i, d| q_x1.mean[d] + eps.get(i, d) * sd[d])
    }

    /// Visits every state matrix of an `n`-path simulation in time order.
    pub fn for_each_state(
        &self,
        u: &Matrix,
        q_x1: &DiagGaussian,
        n: usize,
        rng: &mut SeededRng,
        mut visit: impl FnMut(usize, &Matrix),
    ) -> Result<()> {
        check_rollout_args(self.params, u, q_x1, n)?;
        let mut x = self.initial(q_x1, n, rng);
        check_finite(&x, 0)?;
        visit(0, &x);
        for t in 0..u.rows() - 1 {
            let eps = rng.normal_matrix(n, self.params.state_dim());
            x = self.step(&x, u.row(t), &eps)?.0;
            check_finite(&x, t + 1)?;
            visit(t + 1, &x);
        }
        Ok(())
    }
}

/// All `T` state matrices (`n x D_x`) of a plain simulation.
pub fn simulate_samples(
    params: &PrssmParams,
    u: &Matrix,
    q_x1: &DiagGaussian,
    n: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Matrix>> {
    let model = PreparedModel::new(params)?;
    let mut out = Vec::with_capacity(u.rows());
    model.for_each_state(u, q_x1, n, rng, |_, x| out.push(x.clone()))?;
    Ok(out)
}

/// Per-step output moments of a free simulation, each `T x D_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeSimulation {
    pub mean: Matrix,
    pub variance: Matrix,
}

/// Sample mean and sample variance of `C x_t` plus observation noise.
pub fn predict_free_simulation(
    params: &PrssmParams,
    u: &Matrix,
    q_x1: &DiagGaussian,
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<FreeSimulation> {
    let model = PreparedModel::new(params)?;
    let dy = params.output_dim();
    let obs = params.obs_noise();
    let mut mean = Matrix::zeros(u.rows(), dy);
    let mut variance = Matrix::zeros(u.rows(), dy);
    model.for_each_state(u, q_x1, n_samples, rng, |t, x| {
        for k in 0..dy {
            let col = x.col(k);
            let m = col.iter().sum::<f64>() / n_samples as f64;
            let s = if n_samples > 1 {
                col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n_samples - 1) as f64
            } else {
                0.0
            };
            mean.set(t, k, m);
            variance.set(t, k, s + obs[k]);
        }
    })?;
    Ok(FreeSimulation { mean, variance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{MeanFn, SeArdKernel};

    fn tiny(dx: usize, du: usize, p: usize, seed: u64) -> PrssmParams {
        let mut rng = SeededRng::new(seed);
        let gps = (0..dx)
            .map(|d| {
                let z = Matrix::from_fn(p, dx + du, |_, _| rng.uniform_range(-2.0, 2.0));
                let prior = MeanFn::IdentityOnState { state_dim: dx }.mean_vector(&z, d).unwrap();
                SparseGpDim {
                    q_mean: prior.iter().map(|m| m + 0.3 * rng.normal()).collect(),
                    q_log_var: (0..p).map(|_| -3.0 + 0.2 * rng.normal()).collect(),
                    inducing_inputs: z,
                    kernel: SeArdKernel::isotropic(0.5, 2.0, dx + du),
                    mean_fn: MeanFn::IdentityOnState { state_dim: dx },
                    dim: d,
                }
            })
            .collect();
        PrssmParams {
            gps,
            log_process_noise: vec![(0.05f64).ln(); dx],
            log_obs_noise: vec![(0.2f64).ln(); 1],
            init_state: DiagGaussian {
                mean: vec![0.1; dx],
                log_var: vec![-1.0; dx],
            },
            recognition: None,
        }
    }

    fn traj(t: usize) -> Trajectory {
        Trajectory::new(
            "tiny",
            Matrix::from_fn(t, 1, |i, _| (i as f64 * 0.9).sin()),
            Matrix::from_fn(t, 1, |i, _| 0.3 * (i as f64 * 0.4).cos()),
        )
        .unwrap()
    }

    #[test]
    fn flat_round_trip() {
        let p = tiny(2, 1, 3, 0);
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.n_params());
        let mut q = p.clone();
        q.set_flat(&flat.iter().map(|v| v + 1.0).collect::<Vec<_>>()).unwrap();
        q.set_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn gaussian_loglik_examples() {
        let mut p = tiny(1, 0, 2, 1);
        p.log_obs_noise = vec![0.0];
        let q = DiagGaussian {
            mean: vec![0.7],
            log_var: vec![-80.0],
        };
        let u = Matrix::zeros(1, 0);
        let mut r = rollout(&p, &u, &q, 1, &mut SeededRng::new(0)).unwrap();
        let x = r.state(0).item();
        let ll = log_likelihood(&p, &mut r, &Matrix::scalar(x)).unwrap();
        assert!((ll + 0.918_938_533_204_672_7).abs() < 1e-12);
        let ll = log_likelihood(&p, &mut r, &Matrix::scalar(x + 1.0)).unwrap();
        assert!((ll + 1.418_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_rollout() {
        let p = tiny(2, 1, 3, 2);
        let t = traj(6);
        let a = rollout(&p, &t.u, &p.init_state, 2, &mut SeededRng::new(9)).unwrap();
        let b = rollout(&p, &t.u, &p.init_state, 2, &mut SeededRng::new(9)).unwrap();
        for s in 0..6 {
            assert_eq!(a.state(s), b.state(s));
        }
    }

    #[test]
    fn taped_and_plain_paths_agree() {
        let p = tiny(2, 1, 4, 3);
        let t = traj(8);
        let r = rollout(&p, &t.u, &p.init_state, 3, &mut SeededRng::new(5)).unwrap();
        let plain = simulate_samples(&p, &t.u, &p.init_state, 3, &mut SeededRng::new(5)).unwrap();
        for (s, x) in plain.iter().enumerate() {
            assert!(r.state(s).max_abs_diff(x) < 1e-12);
        }
    }

    #[test]
    fn elbo_bookkeeping_and_nonnegative_kl() {
        let p = tiny(2, 1, 3, 4);
        let rep = elbo(&p, &traj(5), 2, &mut SeededRng::new(1), true).unwrap();
        assert!((rep.elbo + rep.inducing_kl + rep.init_state_kl - rep.expected_loglik).abs() < 1e-10);
        assert!(rep.inducing_kl >= 0.0 && rep.init_state_kl >= 0.0);
        assert_eq!(rep.gradient.len(), p.n_params());
    }

    #[test]
    fn wrong_dimensions_are_rejected() {
        let p = tiny(2, 1, 3, 5);
        let bad = Trajectory::new("bad", Matrix::zeros(4, 2), Matrix::zeros(4, 1)).unwrap();
        assert!(matches!(
            elbo(&p, &bad, 2, &mut SeededRng::new(0), false),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn exploding_dynamics_are_reported() {
        let mut p = tiny(1, 0, 2, 6);
        p.log_process_noise = vec![1e6];
        let u = Matrix::zeros(3, 0);
        let err = rollout(&p, &u, &p.init_state, 2, &mut SeededRng::new(0)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { step: 1 }));
    }

    #[test]
    fn observation_selects_leading_states() {
        let c = ObservationModel::new(1, 3).unwrap();
        assert_eq!(c.apply(&[4.0, 5.0, 6.0]), &[4.0]);
        assert_eq!(c.matrix(), Matrix::from_rows(&[[1.0, 0.0, 0.0]]));
        assert!(ObservationModel::new(3, 2).is_err());
    }

    #[test]
    fn output_variance_includes_observation_noise() {
        let p = tiny(2, 1, 3, 7);
        let t = traj(10);
        let sim = predict_free_simulation(&p, &t.u, &p.init_state, 5, &mut SeededRng::new(2)).unwrap();
        let obs = p.obs_noise()[0];
        assert!(sim.variance.data().iter().all(|v| *v >= obs));
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let p = tiny(2, 1, 3, 8);
        let t = traj(5);
        let eval = |q: &PrssmParams| elbo(q, &t, 2, &mut SeededRng::new(11), true).unwrap();
        let g = eval(&p).gradient;
        let flat = p.to_flat();
        let h = 1e-5;
        for k in 0..flat.len() {
            let mut plus = p.clone();
            let mut f = flat.clone();
            f[k] += h;
            plus.set_flat(&f).unwrap();
            let mut minus = p.clone();
            f[k] -= 2.0 * h;
            minus.set_flat(&f).unwrap();
            let fd = (eval(&plus).elbo - eval(&minus).elbo) / (2.0 * h);
            let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-3);
            assert!(err < 1e-4, "coordinate {k}: analytic {} vs numeric {fd}", g[k]);
        }
    }
}
