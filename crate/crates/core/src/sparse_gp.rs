//! Variational sparse GP with an explicit Gaussian over inducing outputs.
//!
//! For one output dimension `d` the inducing outputs `z_d` at inputs `ζ_d`
//! have variational distribution `q(z_d) = N(μ_d, Σ_d)` with diagonal `Σ_d`.
//! Marginalizing `z_d` gives a Gaussian predictive at a query `x`:
//!
//! ```text
//! α(x) = k(x, ζ) K⁻¹
//! mean = m(x) + α(x) (μ_d - m(ζ))
//! var  = k(x, x) - α(x) (K - Σ_d) α(x)ᵀ
//! ```
//!
//! Both the plain path ([`PreparedGp`]) and the taped path ([`TapedGp`])
//! factor `K = K(ζ, ζ)` once and reduce every prediction to one kernel row,
//! one dot product with `w = K⁻¹ (μ_d - m(ζ))` and one quadratic form with
//! `B = K⁻¹ - K⁻¹ Σ_d K⁻¹`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{KernelVars, MeanFn, SeArdKernel};
use crate::tensor::{gemm, se_kernel_value, Matrix, Tape, Var};
use crate::train::AdamState;

/// Floor applied to predictive variances before any square root.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// One latent dimension's sparse GP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseGpDim {
    /// `P x D` inducing inputs `ζ_d`.
    pub inducing_inputs: Matrix,
    /// Mean `μ_d` of the inducing outputs.
    pub q_mean: Vec<f64>,
    /// Log of the diagonal of `Σ_d`.
    pub q_log_var: Vec<f64>,
    pub kernel: SeArdKernel,
    pub mean_fn: MeanFn,
    /// Which output (latent) dimension this GP models.
    pub dim: usize,
}

/// Gaussian predictive moments at one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpPredictive {
    pub mean: f64,
    pub variance: f64,
}

/// Cached factorization for repeated plain-value predictions.
#[derive(Debug, Clone)]
pub struct PreparedGp<'a> {
    gp: &'a SparseGpDim,
    chol: Matrix,
    weights: Matrix,
    quad: Matrix,
    log_l2: Matrix,
}

impl SparseGpDim {
    pub fn n_inducing(&self) -> usize {
        self.inducing_inputs.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.inducing_inputs.cols()
    }

    pub fn q_var(&self) -> Vec<f64> {
        self.q_log_var.iter().map(|v| v.exp()).collect()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let p = self.n_inducing();
        if p == 0 {
            return Err(Error::DimensionMismatch(
                "sparse GP needs at least one inducing point".into(),
            ));
        }
        if self.q_mean.len() != p || self.q_log_var.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "q(z) has {} means and {} variances for {p} inducing points",
                self.q_mean.len(),
                self.q_log_var.len()
            )));
        }
        if self.kernel.input_dim() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "kernel is {}-dimensional, inducing inputs are {}-dimensional",
                self.kernel.input_dim(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn prior_mean(&self) -> Result<Vec<f64>> {
        self.mean_fn.mean_vector(&self.inducing_inputs, self.dim)
    }

    /// Factorizes `K(ζ, ζ)` and caches the prediction weights.
    pub fn prepare(&self) -> Result<PreparedGp<'_>> {
        self.validate()?;
        let p = self.n_inducing();
        let kzz = self.kernel.matrix(&self.inducing_inputs, &self.inducing_inputs)?;
        let chol = kzz.cholesky()?;
        let prior = self.prior_mean()?;
        let diff = Matrix::col_vector(self.q_mean.iter().zip(&prior).map(|(m, p)| m - p).collect());
        let weights = chol.cholesky_solve(&diff);
        let linv = chol.solve_lower(&Matrix::identity(p), false);
        let kinv = gemm(&linv, true, &linv, false);
        let s = self.q_var();
        let kinv_s = Matrix::from_fn(p, p, |i, j| kinv.get(i, j) * s[j]);
        let quad = kinv.sub(&kinv_s.matmul(&kinv));
        Ok(PreparedGp {
            gp: self,
            chol,
            weights,
            quad,
            log_l2: Matrix::row_vector(self.kernel.log_lengthscales_sq.clone()),
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<GpPredictive> {
        self.prepare()?.predict(x)
    }

    /// `KL(q(z_d) ‖ p(z_d))` with `p(z_d) = N(m(ζ), K(ζ, ζ))`.
    pub fn kl_to_prior(&self) -> Result<f64> {
        let prep = self.prepare()?;
        let p = self.n_inducing();
        let prior = self.prior_mean()?;
        let diff = Matrix::col_vector(self.q_mean.iter().zip(&prior).map(|(m, p)| m - p).collect());
        let a = prep.chol.solve_lower(&diff, false);
        let linv = prep.chol.solve_lower(&Matrix::identity(p), false);
        let s = self.q_var();
        // tr(K⁻¹Σ) = Σ_ij (L⁻¹)_ij² s_j
        let trace: f64 = (0..p)
            .map(|i| (0..p).map(|j| linv.get(i, j).powi(2) * s[j]).sum::<f64>())
            .sum();
        let maha: f64 = a.data().iter().map(|v| v * v).sum();
        let logdet_k: f64 = 2.0 * (0..p).map(|i| prep.chol.get(i, i).ln()).sum::<f64>();
        let logdet_s: f64 = self.q_log_var.iter().sum();
        Ok(0.5 * (trace + maha - p as f64 + logdet_k - logdet_s))
    }

    /// Sets `q(z_d)` to the maximizer of the regression bound for targets
    /// `y` at inputs `x` with noise variance `noise_var`.
    ///
    /// The mean is that of the exact optimal Gaussian; the diagonal
    /// covariance is the reciprocal of the diagonal of its precision
    /// `K⁻¹ + σ⁻² K⁻¹ K_zx K_xz K⁻¹`, which is optimal among diagonals.
    pub fn set_optimal_q(&mut self, x: &Matrix, y: &[f64], noise_var: f64) -> Result<()> {
        self.validate()?;
        if x.rows() != y.len() || x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} inputs for {} targets and a {}-dimensional GP",
                x.rows(),
                x.cols(),
                y.len(),
                self.input_dim()
            )));
        }
        let p = self.n_inducing();
        let l = self
            .kernel
            .matrix(&self.inducing_inputs, &self.inducing_inputs)?
            .cholesky()?;
        let kzx = self.kernel.matrix(&self.inducing_inputs, x)?;
        let mx = self.mean_fn.mean_vector(x, self.dim)?;
        let resid = Matrix::col_vector(y.iter().zip(&mx).map(|(v, m)| v - m).collect());
        // With B = I + σ⁻² L⁻¹ K_zx K_xz L⁻ᵀ the optimal mean is m(ζ) + σ⁻² L B⁻¹ L⁻¹ K_zx r.
        let v = l.solve_lower(&kzx, false);
        let mut b = gemm(&v, false, &v, true).scale(1.0 / noise_var);
        for i in 0..p {
            b.set(i, i, b.get(i, i) + 1.0);
        }
        let lb = b.cholesky()?;
        let w = l.matmul(&lb.cholesky_solve(&v.matmul(&resid))).scale(1.0 / noise_var);
        let prior = self.prior_mean()?;
        self.q_mean = prior.iter().zip(w.data()).map(|(m, d)| m + d).collect();
        let linv = l.solve_lower(&Matrix::identity(p), false);
        let g = l.solve_lower(&v, true);
        self.q_log_var = (0..p)
            .map(|j| {
                let prior_prec: f64 = (0..p).map(|i| linv.get(i, j).powi(2)).sum();
                let data_prec: f64 = g.row(j).iter().map(|e| e * e).sum::<f64>() / noise_var;
                -(prior_prec + data_prec).ln()
            })
            .collect();
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape) -> GpVars {
        GpVars {
            inducing_inputs: tape.leaf(self.inducing_inputs.clone()),
            q_mean: tape.leaf(Matrix::col_vector(self.q_mean.clone())),
            q_log_var: tape.leaf(Matrix::col_vector(self.q_log_var.clone())),
            kernel: self.kernel.register(tape),
        }
    }
}

impl PreparedGp<'_> {
    pub fn gp(&self) -> &SparseGpDim {
        self.gp
    }

    pub fn predict(&self, x: &[f64]) -> Result<GpPredictive> {
        if x.len() != self.gp.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "query has {} entries, GP expects {}",
                x.len(),
                self.gp.input_dim()
            )));
        }
        let (m, v) = self.predict_rows(&Matrix::row_vector(x.to_vec()))?;
        Ok(GpPredictive {
            mean: m[0],
            variance: v[0],
        })
    }

    /// Predictive means and variances at every row of `x`.
    pub fn predict_rows(&self, x: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.cols() != self.gp.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "queries have {} columns, GP expects {}",
                x.cols(),
                self.gp.input_dim()
            )));
        }
        let kx = se_kernel_value(x, &self.gp.inducing_inputs, self.gp.kernel.log_signal_var, &self.log_l2);
        let prior = self.gp.mean_fn.mean_vector(x, self.gp.dim)?;
        let kb = kx.matmul(&self.quad);
        let sf2 = self.gp.kernel.signal_var();
        let w = self.weights.data();
        let mut means = Vec::with_capacity(x.rows());
        let mut vars = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let k = kx.row(i);
            let mean = prior[i] + k.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            let q: f64 = k.iter().zip(kb.row(i)).map(|(a, b)| a * b).sum();
            means.push(mean);
            vars.push((sf2 - q).max(VARIANCE_FLOOR));
        }
        Ok((means, vars))
    }
}

/// Tape leaves holding one GP's trainable quantities.
#[derive(Debug, Clone, Copy)]
pub struct GpVars {
    pub inducing_inputs: Var,
    pub q_mean: Var,
    pub q_log_var: Var,
    pub kernel: KernelVars,
}

/// A GP whose factorization lives on a tape, ready for differentiable predictions.
#[derive(Debug, Clone, Copy)]
pub struct TapedGp {
    pub vars: GpVars,
    mean_fn: MeanFn,
    dim: usize,
    signal_var: Var,
    weights: Var,
    quad: Var,
    /// `KL(q(z_d) ‖ p(z_d))` as a 1x1 node.
    pub kl: Var,
}

impl TapedGp {
    pub fn build(tape: &mut Tape, gp: &SparseGpDim, vars: GpVars) -> Result<TapedGp> {
        gp.validate()?;
        let p = gp.n_inducing();
        let z = vars.inducing_inputs;
        let k = vars.kernel;
        let kzz = tape.se_kernel(z, z, k.log_signal_var, k.log_lengthscales_sq);
        let chol = tape.cholesky(kzz)?;
        let diff = match gp.mean_fn.on_tape(tape, z, gp.dim)? {
            Some(prior) => tape.sub(vars.q_mean, prior),
            None => vars.q_mean,
        };
        let a = tape.tri_solve(chol, diff, false);
        let weights = tape.tri_solve(chol, a, true);

        let eye = tape.leaf(Matrix::identity(p));
        let linv = tape.tri_solve(chol, eye, false);
        let kinv = tape.matmul_t(linv, true, linv, false);
        let s = tape.exp(vars.q_log_var);
        let s_row = tape.transpose(s);
        let s_rows = tape.broadcast(s_row, p, p);
        let kinv_s = tape.mul(kinv, s_rows);
        let ksk = tape.matmul(kinv_s, kinv);
        let quad = tape.sub(kinv, ksk);

        // KL = ½ (tr(K⁻¹Σ) + aᵀa - P + ln|K| - ln|Σ|)
        let kinv_diag = tape.diag_part(kinv);
        let tr_terms = tape.mul(kinv_diag, s);
        let trace = tape.sum(tr_terms);
        let a2 = tape.square(a);
        let maha = tape.sum(a2);
        let ldiag = tape.diag_part(chol);
        let log_ldiag = tape.log(ldiag);
        let half_logdet_k = tape.sum(log_ldiag);
        let logdet_k = tape.scale(half_logdet_k, 2.0);
        let logdet_s = tape.sum(vars.q_log_var);
        let t1 = tape.add(trace, maha);
        let t2 = tape.add(t1, logdet_k);
        let t3 = tape.sub(t2, logdet_s);
        let t4 = tape.offset(t3, -(p as f64));
        let kl = tape.scale(t4, 0.5);

        let signal_var = tape.exp(k.log_signal_var);
        Ok(TapedGp {
            vars,
            mean_fn: gp.mean_fn,
            dim: gp.dim,
            signal_var,
            weights,
            quad,
            kl,
        })
    }

    /// Predictive mean and floored variance columns for the rows of `x`.
    pub fn predict(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let k = self.vars.kernel;
        let kx = tape.se_kernel(x, self.vars.inducing_inputs, k.log_signal_var, k.log_lengthscales_sq);
        let kw = tape.matmul(kx, self.weights);
        let mean = match self.mean_fn.on_tape(tape, x, self.dim)? {
            Some(prior) => tape.add(prior, kw),
            None => kw,
        };
        let n = tape.value(x).rows();
        let q = tape.row_quad(kx, self.quad);
        let sf2 = tape.broadcast(self.signal_var, n, 1);
        let raw = tape.sub(sf2, q);
        let var = tape.clamp_min(raw, VARIANCE_FLOOR);
        Ok((mean, var))
    }
}

/// Variational lower bound for sparse GP regression with Gaussian noise:
/// `Σ_n E_q[log N(y_n | f_n, σ²)] - KL(q(z) ‖ p(z))`.
///
/// `noise_log_var` is a 1x1 node holding `ln σ²`; `targets` is an `n x 1`
/// node. Returns `(elbo, expected_loglik)` nodes.
pub fn regression_elbo(
    tape: &mut Tape,
    gp: &TapedGp,
    inputs: Var,
    targets: Var,
    noise_log_var: Var,
) -> Result<(Var, Var)> {
    let (mean, var) = gp.predict(tape, inputs)?;
    let fit = tape.gauss_loglik(mean, targets, noise_log_var);
    let var_sum = tape.sum(var);
    let neg_lv = tape.neg(noise_log_var);
    let inv_noise = tape.exp(neg_lv);
    let spread = tape.mul(var_sum, inv_noise);
    let half_spread = tape.scale(spread, 0.5);
    let expected = tape.sub(fit, half_spread);
    let elbo = tape.sub(expected, gp.kl);
    Ok((elbo, expected))
}

/// Which groups [`fit_regression`] optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Kernel hyper-parameters and noise variance.
    pub train_hypers: bool,
    pub train_inducing_inputs: bool,
    /// Reset `q(z)` to its optimum before every step instead of following
    /// its gradient.
    pub closed_form_q: bool,
}

/// Result of [`fit_regression`].
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub gp: SparseGpDim,
    pub log_noise: f64,
    /// Bound at the returned parameters.
    pub elbo: f64,
}

fn regression_flat(gp: &SparseGpDim, log_noise: f64) -> Vec<f64> {
    let mut v = gp.inducing_inputs.data().to_vec();
    v.extend_from_slice(&gp.q_mean);
    v.extend_from_slice(&gp.q_log_var);
    v.push(gp.kernel.log_signal_var);
    v.extend_from_slice(&gp.kernel.log_lengthscales_sq);
    v.push(log_noise);
    v
}

fn set_regression_flat(gp: &mut SparseGpDim, flat: &[f64]) -> f64 {
    let mut it = flat.iter().copied();
    let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|d| *d = it.next().unwrap_or(f64::NAN));
    fill(gp.inducing_inputs.data_mut());
    fill(&mut gp.q_mean);
    fill(&mut gp.q_log_var);
    fill(std::slice::from_mut(&mut gp.kernel.log_signal_var));
    fill(&mut gp.kernel.log_lengthscales_sq);
    let mut noise = 0.0;
    fill(std::slice::from_mut(&mut noise));
    noise
}

/// Regression bound and its gradient laid out like the fitter's flat vector.
pub fn regression_elbo_and_grad(gp: &SparseGpDim, log_noise: f64, x: &Matrix, y: &[f64]) -> Result<(f64, Vec<f64>)> {
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} inputs but {} targets",
            x.rows(),
            y.len()
        )));
    }
    let mut tape = Tape::new();
    let vars = gp.register(&mut tape);
    let noise = tape.leaf(Matrix::scalar(log_noise));
    let taped = TapedGp::build(&mut tape, gp, vars)?;
    let xv = tape.leaf(x.clone());
    let yv = tape.leaf(Matrix::col_vector(y.to_vec()));
    let (elbo, _) = regression_elbo(&mut tape, &taped, xv, yv, noise)?;
    let adj = tape.backward(elbo);
    let mut g = Vec::new();
    for v in [
        vars.inducing_inputs,
        vars.q_mean,
        vars.q_log_var,
        vars.kernel.log_signal_var,
        vars.kernel.log_lengthscales_sq,
        noise,
    ] {
        g.extend_from_slice(adj.wrt(v).data());
    }
    Ok((tape.scalar(elbo), g))
}

/// Maximizes the regression bound with Adam.
pub fn fit_regression(
    mut gp: SparseGpDim,
    log_noise: f64,
    x: &Matrix,
    y: &[f64],
    opts: &RegressionOptions,
) -> Result<RegressionFit> {
    gp.validate()?;
    let mut flat = regression_flat(&gp, log_noise);
    let n_z = gp.inducing_inputs.len();
    let p = gp.n_inducing();
    let hyper_start = n_z + 2 * p;
    let mut adam = AdamState::new(flat.len());
    let mut noise = log_noise;
    for _ in 0..opts.iterations {
        if opts.closed_form_q {
            gp.set_optimal_q(x, y, noise.exp())?;
            flat = regression_flat(&gp, noise);
        }
        let (_, g) = regression_elbo_and_grad(&gp, noise, x, y)?;
        let mut step: Vec<f64> = g.iter().map(|v| -v).collect();
        if opts.closed_form_q {
            step[n_z..hyper_start].iter_mut().for_each(|v| *v = 0.0);
        }
        if !opts.train_inducing_inputs {
            step[..n_z].iter_mut().for_each(|v| *v = 0.0);
        }
        if !opts.train_hypers {
            step[hyper_start..].iter_mut().for_each(|v| *v = 0.0);
        }
        adam.step(&mut flat, &step, opts.learning_rate)?;
        noise = set_regression_flat(&mut gp, &flat);
    }
    if opts.closed_form_q {
        gp.set_optimal_q(x, y, noise.exp())?;
    }
    let (elbo, _) = regression_elbo_and_grad(&gp, noise, x, y)?;
    Ok(RegressionFit {
        gp,
        log_noise: noise,
        elbo,
    })
}
