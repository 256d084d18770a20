//! Squared-exponential ARD kernel and the transition mean function.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{se_kernel_value, Matrix, Tape, Var};

/// `k(a, b) = σ_f² exp(-½ Σ_i (a_i - b_i)² / l_i²)`, stored in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeArdKernel {
    /// `ln σ_f²`
    pub log_signal_var: f64,
    /// `ln l_i²`, one per input dimension.
    pub log_lengthscales_sq: Vec<f64>,
}

/// Tape handles for a kernel's hyper-parameters.
#[derive(Debug, Clone, Copy)]
pub struct KernelVars {
    pub log_signal_var: Var,
    pub log_lengthscales_sq: Var,
}

impl SeArdKernel {
    pub fn new(signal_var: f64, lengthscales_sq: &[f64]) -> Self {
        assert!(signal_var > 0.0, "signal variance must be positive");
        assert!(
            lengthscales_sq.iter().all(|l| *l > 0.0),
            "lengthscales must be positive"
        );
        SeArdKernel {
            log_signal_var: signal_var.ln(),
            log_lengthscales_sq: lengthscales_sq.iter().map(|l| l.ln()).collect(),
        }
    }

    /// Same lengthscale in every one of `dim` directions.
    pub fn isotropic(signal_var: f64, lengthscale_sq: f64, dim: usize) -> Self {
        Self::new(signal_var, &vec![lengthscale_sq; dim])
    }

    pub fn input_dim(&self) -> usize {
        self.log_lengthscales_sq.len()
    }

    pub fn signal_var(&self) -> f64 {
        self.log_signal_var.exp()
    }

    pub fn lengthscales_sq(&self) -> Vec<f64> {
        self.log_lengthscales_sq.iter().map(|l| l.exp()).collect()
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "kernel expects {}-dimensional inputs, got {len}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn value(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check(a.len())?;
        self.check(b.len())?;
        let s: f64 = a
            .iter()
            .zip(b)
            .zip(&self.log_lengthscales_sq)
            .map(|((x, y), ll)| (x - y) * (x - y) * (-ll).exp())
            .sum();
        Ok(self.signal_var() * (-0.5 * s).exp())
    }

    /// Covariances between the rows of `a` and the rows of `b`.
    pub fn matrix(&self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        self.check(a.cols())?;
        self.check(b.cols())?;
        let log_l2 = Matrix::row_vector(self.log_lengthscales_sq.clone());
        Ok(se_kernel_value(a, b, self.log_signal_var, &log_l2))
    }

    pub fn register(&self, tape: &mut Tape) -> KernelVars {
        KernelVars {
            log_signal_var: tape.leaf(Matrix::scalar(self.log_signal_var)),
            log_lengthscales_sq: tape.leaf(Matrix::row_vector(self.log_lengthscales_sq.clone())),
        }
    }
}

/// Prior mean of a GP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MeanFn {
    Zero,
    /// For latent dimension `d`, returns the `d`-th entry of the state block
    /// of the input `(x, u)`; the control block is ignored.
    IdentityOnState {
        state_dim: usize,
    },
}

impl MeanFn {
    /// Mean for dimension `d` at every row of `points`.
    pub fn mean_vector(&self, points: &Matrix, d: usize) -> Result<Vec<f64>> {
        match *self {
            MeanFn::Zero => Ok(vec![0.0; points.rows()]),
            MeanFn::IdentityOnState { state_dim } => {
                if d >= state_dim || d >= points.cols() {
                    return Err(Error::IndexOutOfRange {
                        index: d,
                        limit: state_dim.min(points.cols()),
                    });
                }
                Ok(points.col(d))
            }
        }
    }

    pub fn value(&self, point: &[f64], d: usize) -> Result<f64> {
        let m = Matrix::row_vector(point.to_vec());
        Ok(self.mean_vector(&m, d)?[0])
    }

    /// Column of means on the tape, or `None` for the zero mean.
    pub fn on_tape(&self, tape: &mut Tape, points: Var, d: usize) -> Result<Option<Var>> {
        match *self {
            MeanFn::Zero => Ok(None),
            MeanFn::IdentityOnState { state_dim } => {
                let cols = tape.value(points).cols();
                if d >= state_dim || d >= cols {
                    return Err(Error::IndexOutOfRange {
                        index: d,
                        limit: state_dim.min(cols),
                    });
                }
                Ok(Some(tape.col(points, d)))
            }
        }
    }
}
