//! Check that simple kriging under a separable space-time covariance reduces
//! to time-by-time spatial kriging.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SeparableKrigingOracle {
    /// T x T temporal covariance.
    pub c_t: DMatrix<f64>,
    /// n x n spatial covariance among observed sites.
    pub c_11: DMatrix<f64>,
    /// m x n spatial cross-covariance from prediction to observed sites.
    pub c_21: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrigingCheck {
    /// Max abs difference between the joint and per-time predictors.
    pub predictor: f64,
    /// Max abs difference between the diagonal blocks of the joint variance
    /// reduction and `C_t[t, t] * C_21 C_11^-1 C_12`.
    pub variance: f64,
}

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DMatrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("{what} is not square")));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-10 * m.abs().max().max(1.0) {
        return Err(Error::NotPositiveDefinite(format!("{what} is not symmetric")));
    }
    m.clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// Compares `(C_t x C_21)(C_t x C_11)^-1 vec(Y)` with `C_21 C_11^-1 y_t`
/// applied at each time. `y` is T x n with one row per time.
pub fn separable_kriging_check(oracle: &SeparableKrigingOracle, y: &DMatrix<f64>) -> Result<KrigingCheck> {
    let t = oracle.c_t.nrows();
    let n = oracle.c_11.nrows();
    let m = oracle.c_21.nrows();
    if y.shape() != (t, n) || oracle.c_21.ncols() != n {
        return Err(Error::Dimension("oracle and data shapes disagree".into()));
    }
    cholesky(&oracle.c_t, "C_t")?;
    let chol11 = cholesky(&oracle.c_11, "C_11")?;

    // Row-major stacking: element (t, i) sits at t * n + i, matching kron(C_t, C_11).
    let v = DVector::from_iterator(t * n, (0..t).flat_map(|a| (0..n).map(move |i| (a, i))).map(|(a, i)| y[(a, i)]));
    let k11 = kron(&oracle.c_t, &oracle.c_11);
    let k21 = kron(&oracle.c_t, &oracle.c_21);
    let chol = cholesky(&k11, "C_t x C_11")?;
    let joint = &k21 * chol.solve(&v);

    let weights = chol11.solve(&oracle.c_21.transpose()).transpose();
    let mut predictor: f64 = 0.0;
    for a in 0..t {
        let ya = y.row(a).transpose();
        let per_time = &weights * ya;
        for j in 0..m {
            predictor = predictor.max((joint[a * m + j] - per_time[j]).abs());
        }
    }

    let reduction = &k21 * chol.solve(&k21.transpose());
    let spatial = &weights * oracle.c_21.transpose();
    let mut variance: f64 = 0.0;
    for a in 0..t {
        let block = reduction.view((a * m, a * m), (m, m));
        let expect = &spatial * oracle.c_t[(a, a)];
        variance = variance.max((block - expect).abs().max());
    }
    Ok(KrigingCheck { predictor, variance })
}
