use proptest::prelude::*;
use prssm::tensor::{Matrix, Tape, Var};

/// Builds a scalar from one input matrix.
type Build = fn(&mut Tape, Var) -> Var;

fn scalar_of(build: Build, x: &Matrix) -> f64 {
    let mut t = Tape::new();
    let v = t.leaf(x.clone());
    let out = build(&mut t, v);
    t.scalar(out)
}

/// Largest relative difference between the tape gradient and central differences.
fn gradient_error(build: Build, x: &Matrix) -> f64 {
    let mut t = Tape::new();
    let v = t.leaf(x.clone());
    let out = build(&mut t, v);
    let g = t.grad(out, &[v]).remove(0);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let fd = (scalar_of(build, &p) - scalar_of(build, &m)) / (2.0 * h);
        let a = g.data()[i];
        worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1.0));
    }
    worst
}

/// Fixed weights so every output entry reaches the scalar differently.
fn weighted_sum(t: &mut Tape, y: Var) -> Var {
    let (r, c) = t.value(y).shape();
    let w = t.leaf(Matrix::from_fn(r, c, |i, j| 0.3 + 0.7 * ((i * c + j) as f64).sin()));
    let p = t.mul(y, w);
    t.sum(p)
}

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d))
}

fn spd(n: usize) -> impl Strategy<Value = Matrix> {
    matrix(n, n, -1.0, 1.0).prop_map(move |a| {
        let mut s = a.matmul(&a.transpose());
        for i in 0..n {
            s.set(i, i, s.get(i, i) + n as f64);
        }
        s
    })
}

const TOL: f64 = 1e-6;

/// `(A + Aᵀ) / 2`, so perturbing one entry keeps the input symmetric.
fn sym(t: &mut Tape, a: Var) -> Var {
    let at = t.transpose(a);
    let s = t.add(a, at);
    t.scale(s, 0.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn elementwise_ops(x in matrix(3, 2, 0.2, 2.0)) {
        let builds: [Build; 6] = [
            |t, x| { let y = t.exp(x); weighted_sum(t, y) },
            |t, x| { let y = t.log(x); weighted_sum(t, y) },
            |t, x| { let y = t.sqrt(x); weighted_sum(t, y) },
            |t, x| { let y = t.tanh(x); weighted_sum(t, y) },
            |t, x| { let y = t.square(x); weighted_sum(t, y) },
            |t, x| { let y = t.clamp_min(x, 0.1); weighted_sum(t, y) },
        ];
        for b in builds {
            prop_assert!(gradient_error(b, &x) < TOL);
        }
    }

    #[test]
    fn arithmetic_and_layout(x in matrix(3, 3, -1.5, 1.5)) {
        let builds: [Build; 10] = [
            |t, x| { let s = t.square(x); let y = t.add(x, s); weighted_sum(t, y) },
            |t, x| { let e = t.exp(x); let y = t.sub(e, x); weighted_sum(t, y) },
            |t, x| { let y = t.mul(x, x); weighted_sum(t, y) },
            |t, x| { let a = t.scale(x, -2.5); let b = t.offset(a, 1.0); let y = t.neg(b); weighted_sum(t, y) },
            |t, x| { let y = t.transpose(x); weighted_sum(t, y) },
            |t, x| { let y = t.sum_rows(x); weighted_sum(t, y) },
            |t, x| { let y = t.sum_cols(x); weighted_sum(t, y) },
            |t, x| { let s = t.slice(x, 0, 0, 3, 2); let c = t.col(x, 2); let y = t.concat_cols(&[s, c, s]); let z = t.square(y); weighted_sum(t, z) },
            |t, x| { let d = t.diag_part(x); let e = t.diag_embed(d); let y = t.matmul(e, x); weighted_sum(t, y) },
            |t, x| { let s = t.slice(x, 0, 0, 1, 1); let y = t.broadcast(s, 2, 3); let z = t.mul(y, y); weighted_sum(t, z) },
        ];
        for b in builds {
            prop_assert!(gradient_error(b, &x) < TOL);
        }
    }

    #[test]
    fn products(x in matrix(3, 3, -1.5, 1.5)) {
        let builds: [Build; 4] = [
            |t, x| { let y = t.matmul(x, x); weighted_sum(t, y) },
            |t, x| { let y = t.matmul_t(x, true, x, false); weighted_sum(t, y) },
            |t, x| { let y = t.matmul_t(x, false, x, true); weighted_sum(t, y) },
            |t, x| { let y = t.row_quad(x, x); weighted_sum(t, y) },
        ];
        for b in builds {
            prop_assert!(gradient_error(b, &x) < TOL);
        }
    }

    #[test]
    fn cholesky_and_solves(a in spd(3)) {
        let builds: [Build; 3] = [
            |t, a| { let s = sym(t, a); let l = t.cholesky(s).unwrap(); weighted_sum(t, l) },
            |t, a| {
                let s = sym(t, a); let l = t.cholesky(s).unwrap();
                let b = t.leaf(Matrix::from_rows(&[[1.0, -0.5], [0.3, 2.0], [-1.0, 0.7]]));
                let y = t.tri_solve(l, b, false);
                weighted_sum(t, y)
            },
            |t, a| {
                let s = sym(t, a); let l = t.cholesky(s).unwrap();
                let y = t.tri_solve(l, a, true);
                weighted_sum(t, y)
            },
        ];
        for b in builds {
            prop_assert!(gradient_error(b, &a) < TOL);
        }
    }

    #[test]
    fn squared_exponential_kernel(x in matrix(4, 2, -2.0, 2.0)) {
        let builds: [Build; 3] = [
            |t, x| {
                let z = t.leaf(Matrix::from_rows(&[[0.5, -0.2], [1.0, 1.0], [-1.5, 0.3]]));
                let sf = t.leaf(Matrix::scalar(0.2));
                let l2 = t.leaf(Matrix::row_vector(vec![0.1, -0.4]));
                let k = t.se_kernel(x, z, sf, l2);
                weighted_sum(t, k)
            },
            |t, x| {
                let z = t.slice(x, 0, 0, 2, 2);
                let sf = t.leaf(Matrix::scalar(-0.3));
                let l2 = t.leaf(Matrix::row_vector(vec![0.5, 0.0]));
                let k = t.se_kernel(x, z, sf, l2);
                weighted_sum(t, k)
            },
            |t, h| {
                let x = t.leaf(Matrix::from_rows(&[[0.1, 0.2], [-0.7, 1.1]]));
                let z = t.leaf(Matrix::from_rows(&[[0.0, 0.0], [1.0, -1.0]]));
                let sf = t.slice(h, 0, 0, 1, 1);
                let l2 = t.slice(h, 1, 0, 1, 2);
                let k = t.se_kernel(x, z, sf, l2);
                weighted_sum(t, k)
            },
        ];
        for b in builds {
            prop_assert!(gradient_error(b, &x) < TOL);
        }
    }

    #[test]
    fn gaussian_log_likelihood(x in matrix(3, 2, -1.0, 1.0)) {
        let builds: [Build; 3] = [
            |t, pred| {
                let y = t.leaf(Matrix::from_rows(&[[0.2, -0.1], [1.0, 0.4], [0.0, 0.3]]));
                let lv = t.leaf(Matrix::row_vector(vec![-1.0, 0.5]));
                t.gauss_loglik(pred, y, lv)
            },
            |t, x| {
                let pred = t.leaf(Matrix::from_rows(&[[0.2, -0.1], [1.0, 0.4], [0.0, 0.3]]));
                let y = t.slice(x, 0, 0, 1, 2);
                let lv = t.leaf(Matrix::row_vector(vec![0.0, -0.5]));
                t.gauss_loglik(pred, y, lv)
            },
            |t, x| {
                let pred = t.leaf(Matrix::from_rows(&[[0.2, -0.1], [1.0, 0.4], [0.0, 0.3]]));
                let y = t.leaf(Matrix::zeros(3, 2));
                let lv = t.slice(x, 2, 0, 1, 2);
                t.gauss_loglik(pred, y, lv)
            },
        ];
        for b in builds {
            prop_assert!(gradient_error(b, &x) < TOL);
        }
    }
}
