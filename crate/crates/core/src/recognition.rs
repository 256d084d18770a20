//! Recognition network mapping the first `L` steps of a window to `q(x_1)`.
//!
//! The window is flattened as `[y_1, u_1, y_2, u_2, ...]`, passed through one
//! `tanh` hidden layer and a linear output layer whose `2 D_x` entries are
//! read as the mean and the log-variance of a diagonal Gaussian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::DiagGaussian;
use crate::tensor::{Matrix, SeededRng, Tape, Var};

/// Weights of the two-layer recognition map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionParams {
    pub window: usize,
    pub output_dim: usize,
    pub input_dim: usize,
    pub state_dim: usize,
    /// `L (D_y + D_u) x H`
    pub w1: Matrix,
    /// `1 x H`
    pub b1: Matrix,
    /// `H x 2 D_x`
    pub w2: Matrix,
    /// `1 x 2 D_x`
    pub b2: Matrix,
}

/// Tape leaves for the recognition weights.
#[derive(Debug, Clone, Copy)]
pub struct RecognitionVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl RecognitionParams {
    /// Zero biases and `N(0, weight_std²)` weights.
    pub fn init(
        window: usize,
        hidden: usize,
        output_dim: usize,
        input_dim: usize,
        state_dim: usize,
        weight_std: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let flat = window * (output_dim + input_dim);
        RecognitionParams {
            window,
            output_dim,
            input_dim,
            state_dim,
            w1: rng.normal_matrix(flat, hidden).scale(weight_std),
            b1: Matrix::zeros(1, hidden),
            w2: rng.normal_matrix(hidden, 2 * state_dim).scale(weight_std),
            b2: Matrix::zeros(1, 2 * state_dim),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Flattened first-`L`-step window, one row.
    pub fn window_row(&self, y: &Matrix, u: &Matrix) -> Result<Matrix> {
        let l = self.window;
        let got = y.rows().min(u.rows());
        if got < l {
            return Err(Error::WindowTooShort { needed: l, got });
        }
        if y.cols() != self.output_dim || u.cols() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "recognition expects {} outputs and {} inputs, got {} and {}",
                self.output_dim,
                self.input_dim,
                y.cols(),
                u.cols()
            )));
        }
        let mut row = Vec::with_capacity(l * (self.output_dim + self.input_dim));
        for t in 0..l {
            row.extend_from_slice(y.row(t));
            row.extend_from_slice(u.row(t));
        }
        Ok(Matrix::row_vector(row))
    }

    /// `q(x_1)` for the window made of the first `L` rows of `y` and `u`.
    pub fn recognize(&self, y: &Matrix, u: &Matrix) -> Result<DiagGaussian> {
        let x = self.window_row(y, u)?;
        let h = x.matmul(&self.w1).add(&self.b1).map(f64::tanh);
        let o = h.matmul(&self.w2).add(&self.b2);
        let d = self.state_dim;
        Ok(DiagGaussian {
            mean: o.data()[..d].to_vec(),
            log_var: o.data()[d..].to_vec(),
        })
    }

    pub fn register(&self, tape: &mut Tape) -> RecognitionVars {
        RecognitionVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }

    pub(crate) fn flat(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .data()
            .iter()
            .chain(self.b1.data())
            .chain(self.w2.data())
            .chain(self.b2.data())
    }

    pub(crate) fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .data_mut()
            .iter_mut()
            .chain(self.b1.data_mut())
            .chain(self.w2.data_mut())
            .chain(self.b2.data_mut())
    }
}

impl RecognitionVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Means and log-variances (`B x D_x` each) for a `B`-row batch of flattened windows.
    pub fn recognize(&self, tape: &mut Tape, windows: Var, state_dim: usize) -> (Var, Var) {
        let b = tape.value(windows).rows();
        let hidden = tape.value(self.b1).cols();
        let pre = tape.matmul(windows, self.w1);
        let b1 = tape.broadcast(self.b1, b, hidden);
        let pre = tape.add(pre, b1);
        let h = tape.tanh(pre);
        let out = tape.matmul(h, self.w2);
        let b2 = tape.broadcast(self.b2, b, 2 * state_dim);
        let out = tape.add(out, b2);
        let mean = tape.slice(out, 0, 0, b, state_dim);
        let log_var = tape.slice(out, 0, state_dim, b, state_dim);
        (mean, log_var)
    }
}
