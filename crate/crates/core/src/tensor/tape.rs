//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] walks the record once in reverse and accumulates
//! adjoints. Besides the elementary operations there are a few fused
//! primitives (the squared-exponential kernel, a row-wise quadratic form and
//! a Gaussian log-density) whose hand-written adjoints keep long rollouts
//! cheap.

use super::matrix::{gemm, gemm_into, Matrix};
use crate::error::Result;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Tanh(Var),
    Square(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Broadcast {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Slice {
        a: Var,
        r0: usize,
        c0: usize,
        rows: usize,
        cols: usize,
    },
    ConcatCols(Vec<Var>),
    DiagEmbed(Var),
    DiagPart(Var),
    Cholesky(Var),
    TriSolve {
        l: Var,
        b: Var,
        transpose: bool,
    },
    ClampMin(Var, f64),
    SeKernel {
        x: Var,
        z: Var,
        log_sf2: Var,
        log_l2: Var,
    },
    RowQuad {
        k: Var,
        b: Var,
    },
    GaussLogLik {
        pred: Var,
        target: Var,
        log_var: Var,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Ordered record of evaluated operations.
#[derive(Default, Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Accumulated adjoints after a backward pass.
#[derive(Debug)]
pub struct Adjoints {
    adj: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Adjoints {
    /// Gradient with respect to `v`; exact zeros when `v` does not reach the output.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.adj[v.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.adj[v.0].is_some()
    }
}

fn broadcast_value(a: &Matrix, rows: usize, cols: usize) -> Matrix {
    match a.shape() {
        (r, c) if r == rows && c == cols => a.clone(),
        (1, 1) => Matrix::filled(rows, cols, a.item()),
        (1, c) if c == cols => {
            let mut out = Matrix::zeros(rows, cols);
            for i in 0..rows {
                out.row_mut(i).copy_from_slice(a.row(0));
            }
            out
        }
        (r, 1) if r == rows => Matrix::from_fn(rows, cols, |i, _| a.get(i, 0)),
        (r, c) => panic!("cannot broadcast {r}x{c} to {rows}x{cols}"),
    }
}

fn reduce_to(g: &Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g.clone();
    }
    match shape {
        (1, 1) => Matrix::scalar(g.sum()),
        (1, c) => {
            let mut out = vec![0.0; c];
            for i in 0..g.rows() {
                for (o, v) in out.iter_mut().zip(g.row(i)) {
                    *o += v;
                }
            }
            Matrix::row_vector(out)
        }
        (r, 1) => Matrix::col_vector((0..r).map(|i| g.row(i).iter().sum()).collect()),
        (r, c) => panic!("cannot reduce {:?} to {r}x{c}", g.shape()),
    }
}

fn eval<'a>(op: &Op, val: impl Fn(Var) -> &'a Matrix) -> Result<Matrix> {
    let same = |a: &Matrix, b: &Matrix, what: &str| {
        assert_eq!(a.shape(), b.shape(), "shape mismatch in {what}");
    };
    Ok(match *op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => {
            same(val(a), val(b), "add");
            val(a).add(val(b))
        }
        Op::Sub(a, b) => {
            same(val(a), val(b), "sub");
            val(a).sub(val(b))
        }
        Op::Mul(a, b) => {
            same(val(a), val(b), "mul");
            val(a).hadamard(val(b))
        }
        Op::Scale(a, s) => val(a).scale(s),
        Op::Offset(a, c) => val(a).map(|v| v + c),
        Op::MatMul { a, b, ta, tb } => gemm(val(a), ta, val(b), tb),
        Op::Transpose(a) => val(a).transpose(),
        Op::Exp(a) => val(a).map(f64::exp),
        Op::Log(a) => val(a).map(f64::ln),
        Op::Sqrt(a) => val(a).map(f64::sqrt),
        Op::Tanh(a) => val(a).map(f64::tanh),
        Op::Square(a) => val(a).map(|v| v * v),
        Op::Sum(a) => Matrix::scalar(val(a).sum()),
        Op::SumRows(a) => {
            let m = val(a);
            Matrix::col_vector((0..m.rows()).map(|i| m.row(i).iter().sum()).collect())
        }
        Op::SumCols(a) => reduce_to(val(a), (1, val(a).cols())),
        Op::Broadcast { a, rows, cols } => broadcast_value(val(a), rows, cols),
        Op::Slice { a, r0, c0, rows, cols } => val(a).block(r0, c0, rows, cols),
        Op::ConcatCols(ref parts) => {
            let rows = val(parts[0]).rows();
            let cols: usize = parts.iter().map(|p| val(*p).cols()).sum();
            let mut out = Matrix::zeros(rows, cols);
            for i in 0..rows {
                let row = out.row_mut(i);
                let mut c0 = 0;
                for p in parts {
                    let m = val(*p);
                    assert_eq!(m.rows(), rows, "row mismatch in concat_cols");
                    row[c0..c0 + m.cols()].copy_from_slice(m.row(i));
                    c0 += m.cols();
                }
            }
            out
        }
        Op::DiagEmbed(a) => Matrix::diag(val(a).data()),
        Op::DiagPart(a) => {
            let m = val(a);
            Matrix::col_vector((0..m.rows()).map(|i| m.get(i, i)).collect())
        }
        Op::Cholesky(a) => val(a).cholesky()?,
        Op::TriSolve { l, b, transpose } => val(l).solve_lower(val(b), transpose),
        Op::ClampMin(a, floor) => val(a).map(|v| v.max(floor)),
        Op::SeKernel { x, z, log_sf2, log_l2 } => se_kernel_value(val(x), val(z), val(log_sf2).item(), val(log_l2)),
        Op::RowQuad { k, b } => {
            let k = val(k);
            let kb = gemm(k, false, val(b), false);
            Matrix::col_vector(
                (0..k.rows())
                    .map(|i| k.row(i).iter().zip(kb.row(i)).map(|(a, b)| a * b).sum())
                    .collect(),
            )
        }
        Op::GaussLogLik { pred, target, log_var } => {
            let (p, t, lv) = (val(pred), val(target), val(log_var));
            let mut total = 0.0;
            for i in 0..p.rows() {
                let trow = if t.rows() == 1 { t.row(0) } else { t.row(i) };
                for (k, (pv, tv)) in p.row(i).iter().zip(trow).enumerate() {
                    let l = lv.data()[k];
                    let r = tv - pv;
                    total += -HALF_LN_2PI - 0.5 * l - 0.5 * r * r * (-l).exp();
                }
            }
            Matrix::scalar(total)
        }
    })
}

pub(crate) fn se_kernel_value(x: &Matrix, z: &Matrix, log_sf2: f64, log_l2: &Matrix) -> Matrix {
    let d = x.cols();
    assert_eq!(z.cols(), d, "kernel inputs differ in dimension");
    assert_eq!(log_l2.len(), d, "one lengthscale per input dimension");
    let inv_l2: Vec<f64> = log_l2.data().iter().map(|l| (-l).exp()).collect();
    let sf2 = log_sf2.exp();
    let mut out = Matrix::zeros(x.rows(), z.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            let zj = z.row(j);
            let mut s = 0.0;
            for k in 0..d {
                let diff = xi[k] - zj[k];
                s += diff * diff * inv_l2[k];
            }
            *o = sf2 * (-0.5 * s).exp();
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    fn try_push(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, |v| &self.nodes[v.0].value)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, op: Op) -> Var {
        self.try_push(op).expect("infallible tape operation failed")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.push(Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Adds a constant to every entry.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Offset(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul {
            a,
            b,
            ta: false,
            tb: false,
        })
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        self.push(Op::MatMul { a, b, ta, tb })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.push(Op::Transpose(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.push(Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push(Op::Sqrt(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.push(Op::Square(a))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    /// Per-row sums, as a column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.push(Op::SumRows(a))
    }

    /// Per-column sums, as a row.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        self.push(Op::SumCols(a))
    }

    /// Expands a 1x1, 1xc or rx1 node to `rows x cols`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        if self.value(a).shape() == (rows, cols) {
            return a;
        }
        self.push(Op::Broadcast { a, rows, cols })
    }

    pub fn slice(&mut self, a: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Var {
        let (r, c) = self.value(a).shape();
        assert!(r0 + rows <= r && c0 + cols <= c, "slice out of range");
        self.push(Op::Slice { a, r0, c0, rows, cols })
    }

    /// Column `j` of `a`.
    pub fn col(&mut self, a: Var, j: usize) -> Var {
        let r = self.value(a).rows();
        self.slice(a, 0, j, r, 1)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        if parts.len() == 1 {
            return parts[0];
        }
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    /// Square diagonal matrix from a vector node.
    pub fn diag_embed(&mut self, a: Var) -> Var {
        self.push(Op::DiagEmbed(a))
    }

    /// Diagonal of a square node, as a column.
    pub fn diag_part(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).shape();
        assert_eq!(r, c, "diag_part of non-square node");
        self.push(Op::DiagPart(a))
    }

    /// Lower Cholesky factor; the jitter policy of [`Matrix::cholesky`] applies
    /// and any added jitter is treated as a constant.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        self.try_push(Op::Cholesky(a))
    }

    /// `L⁻¹ B`, or `L⁻ᵀ B` when `transpose`, for lower-triangular `L`.
    pub fn tri_solve(&mut self, l: Var, b: Var, transpose: bool) -> Var {
        self.push(Op::TriSolve { l, b, transpose })
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.push(Op::ClampMin(a, floor))
    }

    /// Squared-exponential ARD kernel matrix between the rows of `x` and `z`.
    ///
    /// `log_sf2` is 1x1 (log signal variance), `log_l2` holds one log squared
    /// lengthscale per input column.
    pub fn se_kernel(&mut self, x: Var, z: Var, log_sf2: Var, log_l2: Var) -> Var {
        self.push(Op::SeKernel { x, z, log_sf2, log_l2 })
    }

    /// Row-wise quadratic form: entry `i` is `k_i B k_iᵀ`.
    pub fn row_quad(&mut self, k: Var, b: Var) -> Var {
        self.push(Op::RowQuad { k, b })
    }

    /// Total Gaussian log-density `Σ log N(target | pred, exp(log_var))`.
    ///
    /// `target` is either the shape of `pred` or a single row repeated for
    /// every row of `pred`; `log_var` holds one log variance per column.
    pub fn gauss_loglik(&mut self, pred: Var, target: Var, log_var: Var) -> Var {
        let (p, t, lv) = (self.value(pred), self.value(target), self.value(log_var));
        assert!(t.cols() == p.cols() && (t.rows() == p.rows() || t.rows() == 1));
        assert_eq!(lv.len(), p.cols());
        self.push(Op::GaussLogLik { pred, target, log_var })
    }

    /// Re-evaluates every recorded operation from the leaves.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => eval(op, |v| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Gradients of the scalar `output` with respect to each of `inputs`.
    pub fn grad(&self, output: Var, inputs: &[Var]) -> Vec<Matrix> {
        let adj = self.backward(output);
        inputs.iter().map(|v| adj.wrt(*v)).collect()
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Adjoints {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let n = output.0 + 1;
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Matrix::scalar(1.0));
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Adjoints {
            adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[i].value;
        match self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(adj, a, g.clone());
                acc(adj, b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(adj, a, g.clone());
                acc(adj, b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(adj, a, g.hadamard(val(b)));
                acc(adj, b, g.hadamard(val(a)));
            }
            Op::Scale(a, s) => acc(adj, a, g.scale(s)),
            Op::Offset(a, _) => acc(adj, a, g.clone()),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(a), val(b));
                let ga = if ta {
                    gemm(bv, tb, g, true)
                } else {
                    gemm(g, false, bv, !tb)
                };
                let gb = if tb {
                    gemm(g, true, av, ta)
                } else {
                    gemm(av, !ta, g, false)
                };
                acc(adj, a, ga);
                acc(adj, b, gb);
            }
            Op::Transpose(a) => acc(adj, a, g.transpose()),
            Op::Exp(a) => acc(adj, a, g.hadamard(out)),
            Op::Log(a) => acc(adj, a, g.zip_map(val(a), |g, x| g / x)),
            Op::Sqrt(a) => acc(adj, a, g.zip_map(out, |g, y| g / (2.0 * y))),
            Op::Tanh(a) => acc(adj, a, g.zip_map(out, |g, y| g * (1.0 - y * y))),
            Op::Square(a) => acc(adj, a, g.zip_map(val(a), |g, x| 2.0 * g * x)),
            Op::Sum(a) => {
                let (r, c) = val(a).shape();
                acc(adj, a, Matrix::filled(r, c, g.item()));
            }
            Op::SumRows(a) | Op::SumCols(a) => {
                let (r, c) = val(a).shape();
                acc(adj, a, broadcast_value(g, r, c));
            }
            Op::Broadcast { a, .. } => acc(adj, a, reduce_to(g, val(a).shape())),
            Op::Slice { a, r0, c0, rows, cols } => {
                let (r, c) = val(a).shape();
                let mut ga = Matrix::zeros(r, c);
                for k in 0..rows {
                    ga.row_mut(r0 + k)[c0..c0 + cols].copy_from_slice(g.row(k));
                }
                acc(adj, a, ga);
            }
            Op::ConcatCols(ref parts) => {
                let mut c0 = 0;
                for p in parts {
                    let cols = val(*p).cols();
                    acc(adj, *p, g.block(0, c0, g.rows(), cols));
                    c0 += cols;
                }
            }
            Op::DiagEmbed(a) => {
                let (r, c) = val(a).shape();
                let d: Vec<f64> = (0..r * c).map(|k| g.get(k, k)).collect();
                acc(adj, a, Matrix::new(r, c, d));
            }
            Op::DiagPart(a) => acc(adj, a, Matrix::diag(g.data())),
            Op::Cholesky(a) => acc(adj, a, cholesky_adjoint(out, g)),
            Op::TriSolve { l, b, transpose } => {
                let lv = val(l);
                if !transpose {
                    // X = L⁻¹B: B̄ = L⁻ᵀX̄, L̄ = -B̄Xᵀ
                    let gb = lv.solve_lower(g, true);
                    let gl = gemm(&gb, false, out, true).scale(-1.0).lower_triangle();
                    acc(adj, b, gb);
                    acc(adj, l, gl);
                } else {
                    // X = L⁻ᵀB: B̄ = L⁻¹X̄, L̄ = -X B̄ᵀ
                    let gb = lv.solve_lower(g, false);
                    let gl = gemm(out, false, &gb, true).scale(-1.0).lower_triangle();
                    acc(adj, b, gb);
                    acc(adj, l, gl);
                }
            }
            Op::ClampMin(a, floor) => acc(adj, a, g.zip_map(val(a), |g, x| if x > floor { g } else { 0.0 })),
            Op::SeKernel { x, z, log_sf2, log_l2 } => {
                let (gx, gz, gs, gl) = se_kernel_adjoint(val(x), val(z), val(log_l2), out, g);
                acc(adj, x, gx);
                acc(adj, z, gz);
                acc(adj, log_sf2, Matrix::scalar(gs));
                let shape = val(log_l2).shape();
                acc(adj, log_l2, Matrix::new(shape.0, shape.1, gl));
            }
            Op::RowQuad { k, b } => {
                let (kv, bv) = (val(k), val(b));
                let mut gk_rows = kv.clone();
                for r in 0..kv.rows() {
                    let s = g.get(r, 0);
                    for v in gk_rows.row_mut(r) {
                        *v *= s;
                    }
                }
                // K̄ = diag(g) K (B + Bᵀ), B̄ = Kᵀ diag(g) K
                let mut gk = gemm(&gk_rows, false, bv, false);
                gemm_into(1.0, &gk_rows, false, bv, true, 1.0, &mut gk);
                let gb = gemm(kv, true, &gk_rows, false);
                acc(adj, k, gk);
                acc(adj, b, gb);
            }
            Op::GaussLogLik { pred, target, log_var } => {
                let s = g.item();
                let (p, t, lv) = (val(pred), val(target), val(log_var));
                let inv: Vec<f64> = lv.data().iter().map(|l| (-l).exp()).collect();
                let mut gp = Matrix::zeros(p.rows(), p.cols());
                let mut gt = Matrix::zeros(t.rows(), t.cols());
                let mut glv = vec![0.0; lv.len()];
                for i in 0..p.rows() {
                    let ti = if t.rows() == 1 { 0 } else { i };
                    for k in 0..p.cols() {
                        let r = t.get(ti, k) - p.get(i, k);
                        let d = s * r * inv[k];
                        gp.set(i, k, d);
                        gt.set(ti, k, gt.get(ti, k) - d);
                        glv[k] += s * (-0.5 + 0.5 * r * r * inv[k]);
                    }
                }
                acc(adj, pred, gp);
                acc(adj, target, gt);
                let shape = lv.shape();
                acc(adj, log_var, Matrix::new(shape.0, shape.1, glv));
            }
        }
    }
}

fn acc(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(m) => m.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

/// Adjoint of `A ↦ chol(A)` for symmetric `A`, returned as a symmetric matrix.
fn cholesky_adjoint(l: &Matrix, gl: &Matrix) -> Matrix {
    let n = l.rows();
    // Φ(Lᵀ L̄): lower triangle with halved diagonal
    let mut p = gemm(l, true, &gl.lower_triangle(), false);
    for i in 0..n {
        for j in i + 1..n {
            p.set(i, j, 0.0);
        }
        p.set(i, i, 0.5 * p.get(i, i));
    }
    let s = p.add(&p.transpose());
    let y = l.solve_lower(&s, true);
    let ga = l.solve_lower(&y.transpose(), true);
    // ½ (L⁻ᵀ S L⁻¹), symmetrized against round-off
    Matrix::from_fn(n, n, |i, j| 0.25 * (ga.get(i, j) + ga.get(j, i)))
}

fn se_kernel_adjoint(
    x: &Matrix,
    z: &Matrix,
    log_l2: &Matrix,
    k: &Matrix,
    g: &Matrix,
) -> (Matrix, Matrix, f64, Vec<f64>) {
    let d = x.cols();
    let inv_l2: Vec<f64> = log_l2.data().iter().map(|l| (-l).exp()).collect();
    let mut gx = Matrix::zeros(x.rows(), d);
    let mut gz = Matrix::zeros(z.rows(), d);
    let mut gs = 0.0;
    let mut gl = vec![0.0; d];
    for i in 0..x.rows() {
        let xi = x.row(i);
        for j in 0..z.rows() {
            let h = g.get(i, j) * k.get(i, j);
            if h == 0.0 {
                continue;
            }
            gs += h;
            let zj = z.row(j);
            for c in 0..d {
                let diff = xi[c] - zj[c];
                let t = h * diff * inv_l2[c];
                gx.row_mut(i)[c] -= t;
                gz.row_mut(j)[c] += t;
                gl[c] += 0.5 * t * diff;
            }
        }
    }
    (gx, gz, gs, gl)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(3.0));
        let y = t.square(x);
        let g = t.grad(y, &[x]);
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn sum_of_exp_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(vec![0.0, 0.0]));
        let e = t.exp(x);
        let s = t.sum(e);
        assert_eq!(t.grad(s, &[x])[0], Matrix::row_vector(vec![1.0, 1.0]));
    }

    #[test]
    fn logdet_via_cholesky_of_diagonal() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::diag(&[2.0, 5.0]));
        let l = t.cholesky(a).unwrap();
        let d = t.diag_part(l);
        let ld = t.log(d);
        let s = t.sum(ld);
        let logdet = t.scale(s, 2.0);
        assert!((t.scalar(logdet) - 10f64.ln()).abs() < 1e-14);
        let g = &t.grad(logdet, &[a])[0];
        assert!(g.max_abs_diff(&Matrix::diag(&[0.5, 0.2])) < 1e-14);
    }

    #[test]
    fn unreachable_input_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(1.0));
        let y = t.leaf(Matrix::row_vector(vec![1.0, 2.0]));
        let out = t.square(x);
        let g = t.backward(out);
        assert!(!g.reached(y));
        assert_eq!(g.wrt(y), Matrix::zeros(1, 2));
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[[0.3, -1.2], [0.7, 0.1], [2.0, 0.5]]));
        let ls = t.leaf(Matrix::scalar(0.2));
        let ll = t.leaf(Matrix::row_vector(vec![0.1, -0.3]));
        let k = t.se_kernel(x, x, ls, ll);
        let l = t.cholesky(k).unwrap();
        let e = t.leaf(Matrix::identity(3));
        let inv = t.tri_solve(l, e, false);
        let s = t.sum(inv);
        let _ = t.tanh(s);
        let replayed = t.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, t.value(Var(i)));
        }
    }
}
