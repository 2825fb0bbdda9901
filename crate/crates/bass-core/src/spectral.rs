//! Dense symmetric eigendecomposition helpers shared across the crate.
//!
//! All matrices in this crate are small (tens of nodes), symmetric, and
//! dense, so a full eigendecomposition is the workhorse: spectral norms,
//! extremal eigenpairs, and algebraic connectivity all come from it. The
//! decomposition is deterministic for identical inputs.

use nalgebra::{DMatrix, DVector};

/// Iteration cap for the symmetric QL sweeps. Generous for the matrix sizes
/// used here; hitting it indicates a malformed (e.g. non-finite) input.
const EIG_MAX_SWEEPS: usize = 10_000;

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted ascending.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Eigenvectors as columns, matching `values` order, each with its first
    /// component of magnitude > 1e-12 made positive.
    pub vectors: DMatrix<f64>,
}

/// Full eigendecomposition of a symmetric matrix.
///
/// Panics if the matrix is not square or the decomposition does not
/// converge (non-finite entries).
pub fn sym_eig(m: &DMatrix<f64>) -> SymEig {
    assert_eq!(m.nrows(), m.ncols(), "sym_eig requires a square matrix");
    let eig = m
        .clone()
        .try_symmetric_eigen(f64::EPSILON, EIG_MAX_SWEEPS)
        .expect("symmetric eigendecomposition did not converge");
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).clone_owned();
        // Sign convention: first component with non-negligible magnitude is
        // positive, so repeated runs agree bit for bit.
        if let Some(pivot) = col.iter().find(|v| v.abs() > 1e-12) {
            if *pivot < 0.0 {
                col.neg_mut();
            }
        }
        vectors.set_column(k, &col);
    }
    SymEig { values, vectors }
}

impl SymEig {
    /// Largest eigenvalue.
    pub fn lambda_max(&self) -> f64 {
        *self.values.last().expect("empty spectrum")
    }

    /// Smallest eigenvalue.
    pub fn lambda_min(&self) -> f64 {
        self.values[0]
    }

    /// Eigenvector for the largest eigenvalue.
    pub fn top_vector(&self) -> DVector<f64> {
        self.vectors.column(self.values.len() - 1).clone_owned()
    }
}

/// Largest eigenvalue of a symmetric matrix.
pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    sym_eig(m).lambda_max()
}

/// Spectral norm (largest singular value) of a symmetric matrix, i.e. the
/// largest absolute eigenvalue.
pub fn spectral_norm_sym(m: &DMatrix<f64>) -> f64 {
    let eig = sym_eig(m);
    eig.lambda_max().abs().max(eig.lambda_min().abs())
}

/// The averaging projector J = (1/n) 1 1^T.
pub fn averaging_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, n, 1.0 / n as f64)
}

/// Max absolute deviation from symmetry, `max |M - M^T|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Max absolute deviation of row sums from `target`.
pub fn row_sum_error(m: &DMatrix<f64>, target: f64) -> f64 {
    (0..m.nrows())
        .map(|i| (m.row(i).sum() - target).abs())
        .fold(0.0, f64::max)
}

/// Minimize a convex scalar function on `[lo, hi]`, expanding `hi` first if
/// the minimum appears to lie beyond it. Returns `(argmin, min)`.
///
/// Brent's method (golden section with parabolic interpolation); for smooth
/// objectives the argmin is resolved to near machine precision.
pub fn minimize_convex_scalar<F>(f: F, lo: f64, hi: f64, tol: f64, max_iters: usize) -> (f64, f64)
where
    F: Fn(f64) -> f64,
{
    assert!(lo < hi, "invalid bracket");
    let mut hi = hi;
    let mut f_hi = f(hi);
    // Expand to the right while the function is still decreasing at hi.
    for _ in 0..60 {
        let probe = hi * (1.0 - 1e-6);
        if f(probe) >= f_hi {
            hi *= 2.0;
            f_hi = f(hi);
        } else {
            break;
        }
    }
    brent_min(&f, lo, hi, tol, max_iters)
}

/// Brent minimization on a bracketing interval `[a, b]`.
fn brent_min<F: Fn(f64) -> f64>(
    f: &F,
    mut a: f64,
    mut b: f64,
    tol: f64,
    max_iters: usize,
) -> (f64, f64) {
    const GOLD: f64 = 0.381_966_011_250_105; // 2 - golden ratio
    let mut x = a + GOLD * (b - a);
    let mut w = x;
    let mut v = x;
    let mut fx = f(x);
    let mut fw = fx;
    let mut fv = fx;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..max_iters {
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-15;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut use_golden = true;
        if e.abs() > tol1 {
            // Parabolic fit through x, v, w.
            let r = (x - w) * (fx - fv);
            let q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            let mut q2 = 2.0 * (q - r);
            if q2 > 0.0 {
                p = -p;
            }
            q2 = q2.abs();
            let e_old = e;
            e = d;
            if p.abs() < (0.5 * q2 * e_old).abs() && p > q2 * (a - x) && p < q2 * (b - x) {
                d = p / q2;
                let u = x + d;
                if (u - a) < tol2 || (b - u) < tol2 {
                    d = if m > x { tol1 } else { -tol1 };
                }
                use_golden = false;
            }
        }
        if use_golden {
            e = if x < m { b - x } else { a - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else {
            x + if d > 0.0 { tol1 } else { -tol1 }
        };
        let fu = f(u);
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}
