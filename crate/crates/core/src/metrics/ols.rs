use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ridge used when callers have no opinion; only there for conditioning.
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Least squares of `t` on `[1, x]`. Returns `[intercept, slopes...]`.
pub fn fit_ols(x: &Tensor, t: &[f64], ridge: f64) -> Result<Vec<f64>> {
    fit_wls(x, t, None, ridge)
}

/// Weighted least squares; `weights = None` means uniform.
pub fn fit_wls(x: &Tensor, t: &[f64], weights: Option<&[f64]>, ridge: f64) -> Result<Vec<f64>> {
    let (n, k) = (x.rows(), x.cols());
    if t.len() != n {
        return Err(Error::Dimension(format!("{n} rows but {} targets", t.len())));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Dimension(format!("{n} rows but {} weights", w.len())));
        }
    }
    if n <= k {
        return Err(Error::Domain(format!("least squares needs more rows than columns ({n} <= {k})")));
    }
    let p = k + 1;
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let mut z = vec![1.0; p];
    for i in 0..n {
        z[1..].copy_from_slice(x.row(i));
        let w = weights.map_or(1.0, |w| w[i]);
        for a in 0..p {
            let wa = w * z[a];
            rhs[a] += wa * t[i];
            for b in a..p {
                gram[(a, b)] += wa * z[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
        gram[(a, a)] += ridge;
    }
    let beta = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .ok_or_else(|| Error::Numeric("singular least-squares system".into()))?;
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Numeric("least-squares solution is not finite".into()));
    }
    Ok(beta.iter().copied().collect())
}

pub fn predict_linear(coef: &[f64], x: &Tensor) -> Vec<f64> {
    (0..x.rows())
        .map(|i| coef[0] + x.row(i).iter().zip(&coef[1..]).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    /// Gaussian elimination with partial pivoting, kept apart from the nalgebra path.
    fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
                .unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for c in col..n {
                    a[row][c] -= f * a[col][c];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
            x[row] = (b[row] - s) / a[row][row];
        }
        x
    }

    #[test]
    fn exact_line() {
        let x = Tensor::matrix(5, 1, vec![-2.0, -1.0, 0.0, 1.5, 4.0]).unwrap();
        let t: Vec<f64> = x.data().iter().map(|v| 3.0 + 2.0 * v).collect();
        let b = fit_ols(&x, &t, DEFAULT_RIDGE).unwrap();
        assert!((b[0] - 3.0).abs() < 1e-8 && (b[1] - 2.0).abs() < 1e-8, "{b:?}");
    }

    #[test]
    fn constant_target() {
        let mut rng = seeded(3, 0);
        let x = Tensor::matrix(40, 2, (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = fit_ols(&x, &[7.25; 40], DEFAULT_RIDGE).unwrap();
        assert!((b[0] - 7.25).abs() < 1e-6);
        assert!(b[1].abs() < 1e-6 && b[2].abs() < 1e-6);
    }

    #[test]
    fn matches_independent_solver() {
        let mut rng = seeded(11, 0);
        let (n, k) = (60, 4);
        let x = Tensor::matrix(n, k, (0..n * k).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut a = vec![vec![0.0; k + 1]; k + 1];
        let mut rhs = vec![0.0; k + 1];
        for i in 0..n {
            let z: Vec<f64> = std::iter::once(1.0).chain(x.row(i).iter().copied()).collect();
            for p in 0..=k {
                rhs[p] += z[p] * t[i];
                for q in 0..=k {
                    a[p][q] += z[p] * z[q];
                }
            }
        }
        let oracle = gauss_solve(a, rhs);
        let b = fit_ols(&x, &t, 0.0).unwrap();
        for (u, v) in b.iter().zip(&oracle) {
            assert!((u - v).abs() < 1e-8, "{u} vs {v}");
        }
    }

    #[test]
    fn too_few_rows() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(matches!(fit_ols(&x, &[1.0, 2.0], 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn singular_without_ridge() {
        let x = Tensor::matrix(4, 2, vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 4.0, 8.0]).unwrap();
        assert!(fit_ols(&x, &[1.0, 2.0, 3.0, 4.0], 0.0).is_err());
    }
}
