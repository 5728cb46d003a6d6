//! Low-rank penalized radial bases.
//!
//! Both the two-dimensional thin plate basis and the one-dimensional basis use
//! the same construction: a polynomial null space plus a radial block whose
//! coefficients are constrained orthogonal to the polynomial evaluated at the
//! knots. The radial block is reparameterized through that constraint, so the
//! penalty is positive definite on it and exactly zero on the polynomial.

mod knots;

pub use knots::{distinct_points, quantile_knots, select_knots, Knots};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Point;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    Tps2d,
    Uni1d,
}

impl BasisKind {
    pub fn null_dim(self) -> usize {
        match self {
            BasisKind::Tps2d => 3,
            BasisKind::Uni1d => 2,
        }
    }
}

/// Thin plate radial function for two dimensions, `r^2 log r`, with `eta(0) = 0`.
pub fn tps_eta(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

/// Cubic radial function for one dimension.
pub fn cubic_eta(r: f64) -> f64 {
    r.abs().powi(3)
}

/// Everything needed to evaluate a basis at new locations: knots, the
/// coordinate scaling, and the constraint reparameterization of the radial
/// block. This is what model files persist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub knots: Knots,
    pub center: Point,
    pub scale: f64,
    /// k x (k - null_dim) orthonormal basis for the radial coefficients
    /// orthogonal to the polynomial at the knots.
    radial_map: DMatrix<f64>,
}

impl BasisSpec {
    pub fn null_dim(&self) -> usize {
        self.kind.null_dim()
    }

    /// Number of basis columns (equal to the knot count).
    pub fn ncols(&self) -> usize {
        self.null_dim() + self.radial_map.ncols()
    }

    fn scaled(&self, p: Point) -> Point {
        match self.kind {
            BasisKind::Tps2d => [
                (p[0] - self.center[0]) / self.scale,
                (p[1] - self.center[1]) / self.scale,
            ],
            BasisKind::Uni1d => [(p[0] - self.center[0]) / self.scale, 0.0],
        }
    }

    fn eta(&self, a: Point, b: Point) -> f64 {
        match self.kind {
            BasisKind::Tps2d => tps_eta(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()),
            BasisKind::Uni1d => cubic_eta(a[0] - b[0]),
        }
    }

    fn scaled_knots(&self) -> Vec<Point> {
        self.knots.points.iter().map(|&k| self.scaled(k)).collect()
    }

    /// Design rows at the given locations (1-D bases read slot 0).
    pub fn evaluate(&self, points: &[Point]) -> DMatrix<f64> {
        let m = self.null_dim();
        let knots = self.scaled_knots();
        let mut raw = DMatrix::zeros(points.len(), knots.len());
        let mut out = DMatrix::zeros(points.len(), self.ncols());
        for (i, &p) in points.iter().enumerate() {
            let u = self.scaled(p);
            out[(i, 0)] = 1.0;
            out[(i, 1)] = u[0];
            if m == 3 {
                out[(i, 2)] = u[1];
            }
            for (j, &kn) in knots.iter().enumerate() {
                raw[(i, j)] = self.eta(u, kn);
            }
        }
        let radial = raw * &self.radial_map;
        out.view_mut((0, m), (points.len(), radial.ncols()))
            .copy_from(&radial);
        out
    }

    pub fn evaluate_scalars(&self, x: &[f64]) -> DMatrix<f64> {
        let pts: Vec<Point> = x.iter().map(|&v| [v, 0.0]).collect();
        self.evaluate(&pts)
    }

    /// Penalty matrix on the basis coefficients.
    pub fn penalty(&self) -> DMatrix<f64> {
        let m = self.null_dim();
        let knots = self.scaled_knots();
        let k = knots.len();
        let omega = DMatrix::from_fn(k, k, |i, j| self.eta(knots[i], knots[j]));
        let inner = self.radial_map.transpose() * omega * &self.radial_map;
        let p = self.ncols();
        let mut s = DMatrix::zeros(p, p);
        for i in 0..inner.nrows() {
            for j in 0..inner.ncols() {
                s[(m + i, m + j)] = 0.5 * (inner[(i, j)] + inner[(j, i)]);
            }
        }
        s
    }
}

/// A basis evaluated at its training locations, with its penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothBasis {
    pub spec: BasisSpec,
    pub design: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
}

impl SmoothBasis {
    pub fn kind(&self) -> BasisKind {
        self.spec.kind
    }

    pub fn null_dim(&self) -> usize {
        self.spec.null_dim()
    }

    pub fn ncols(&self) -> usize {
        self.design.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.design.nrows()
    }

    /// Orthonormal p x (p - 1) map absorbing the sum-to-zero constraint
    /// `1' X beta = 0` over the training design.
    pub fn centering_map(&self) -> DMatrix<f64> {
        sum_to_zero_map(&self.design)
    }
}

/// Columns of the returned matrix span the complement of `c` within R^p,
/// where `c` holds the column sums of `design`.
pub fn sum_to_zero_map(design: &DMatrix<f64>) -> DMatrix<f64> {
    let p = design.ncols();
    let n = design.nrows().max(1) as f64;
    let c = design.row_sum().transpose() / n;
    complement_basis(&DMatrix::from_columns(&[c]), p)
}

/// Orthonormal basis (p x (p - r)) for the orthogonal complement of the
/// column space of `t` (p x r, full column rank).
pub(crate) fn complement_basis(t: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    let r = t.ncols();
    let mut aug = DMatrix::zeros(p, r + p);
    aug.view_mut((0, 0), (p, r)).copy_from(t);
    for i in 0..p {
        aug[(i, r + i)] = 1.0;
    }
    let q = aug.qr().q();
    q.columns(r, p - r).into_owned()
}

fn coordinate_scaling(points: &[Point], dims: usize) -> (Point, f64) {
    let n = points.len().max(1) as f64;
    let mut center = [0.0, 0.0];
    for p in points {
        for d in 0..dims {
            center[d] += p[d] / n;
        }
    }
    let mut var = 0.0;
    for p in points {
        for d in 0..dims {
            var += (p[d] - center[d]).powi(2);
        }
    }
    let sd = (var / (n * dims as f64)).sqrt();
    let scale = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
    (center, scale)
}

fn build(kind: BasisKind, knots: Knots, training: &[Point]) -> Result<SmoothBasis> {
    let m = kind.null_dim();
    if knots.len() < m + 1 {
        return Err(Error::invalid(format!(
            "{} knots is too few for a basis with null space dimension {m}",
            knots.len()
        )));
    }
    let distinct = distinct_points(&knots.points);
    if distinct.len() < knots.len() {
        let dup = knots
            .points
            .iter()
            .enumerate()
            .find(|(i, p)| knots.points[..*i].contains(p))
            .map(|(_, p)| *p)
            .unwrap_or([f64::NAN, f64::NAN]);
        return Err(Error::DuplicateKnot(dup[0], dup[1]));
    }
    let dims = if kind == BasisKind::Tps2d { 2 } else { 1 };
    let (center, scale) = coordinate_scaling(training, dims);

    let k = knots.len();
    let poly = DMatrix::from_fn(k, m, |i, j| match j {
        0 => 1.0,
        1 => (knots.points[i][0] - center[0]) / scale,
        _ => (knots.points[i][1] - center[1]) / scale,
    });
    if poly.clone().svd(false, false).singular_values.min() < 1e-10 {
        return Err(Error::invalid(
            "knots do not determine the polynomial null space (collinear knots)",
        ));
    }
    let radial_map = complement_basis(&poly, k);
    let spec = BasisSpec {
        kind,
        knots,
        center,
        scale,
        radial_map,
    };
    let design = spec.evaluate(training);
    let penalty = spec.penalty();
    Ok(SmoothBasis {
        spec,
        design,
        penalty,
    })
}

/// Two-dimensional thin plate basis on `points` (km) with the given knots.
pub fn tps_basis(points: &[Point], knots: Knots) -> Result<SmoothBasis> {
    build(BasisKind::Tps2d, knots, points)
}

/// Thin plate basis with `k` space-filling knots chosen from `points`.
pub fn tps_basis_k(points: &[Point], k: usize) -> Result<SmoothBasis> {
    let knots = select_knots(points, k);
    tps_basis(points, knots)
}

/// One-dimensional penalized spline with `k` knots at quantiles of `x`;
/// the penalty is the integrated squared second derivative of the natural
/// cubic spline spanned by the radial block.
pub fn uni_basis(x: &[f64], k: usize) -> Result<SmoothBasis> {
    if k < 3 {
        return Err(Error::invalid(format!("1-D basis needs k >= 3, got {k}")));
    }
    let knots = quantile_knots(x, k);
    if knots.len() < 3 {
        return Err(Error::invalid(format!(
            "1-D basis needs at least 3 distinct values, found {}",
            knots.len()
        )));
    }
    let pts: Vec<Point> = x.iter().map(|&v| [v, 0.0]).collect();
    build(BasisKind::Uni1d, Knots::from_scalars(&knots), &pts)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn grid(n: usize) -> Vec<Point> {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push([i as f64 * 13.0 + (j as f64 * 0.7).sin(), j as f64 * 11.0 + 0.3 * i as f64]);
            }
        }
        pts
    }

    #[test]
    fn eta_vanishes_at_one_and_zero() {
        assert_eq!(tps_eta(1.0), 0.0);
        assert_eq!(tps_eta(0.0), 0.0);
        assert!(tps_eta(2.0) > 0.0);
    }

    #[test]
    fn affine_surface_has_zero_penalty() {
        let pts = grid(6);
        let basis = tps_basis_k(&pts, 20).unwrap();
        let mut beta = DVector::zeros(basis.ncols());
        beta[0] = 1.5;
        beta[1] = -0.3;
        beta[2] = 2.0;
        let q = (beta.transpose() * &basis.penalty * &beta)[(0, 0)];
        assert!(q.abs() < 1e-10);
    }

    #[test]
    fn penalty_psd_with_null_dim_zeros() {
        let pts = grid(6);
        let basis = tps_basis_k(&pts, 25).unwrap();
        let ev = sym_eigenvalues(&basis.penalty);
        assert!(ev[0] > -1e-10);
        let zeros = ev.iter().filter(|v| v.abs() < 1e-8).count();
        assert_eq!(zeros, 3);

        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin() * 5.0).collect();
        let b1 = uni_basis(&x, 10).unwrap();
        let ev = sym_eigenvalues(&b1.penalty);
        assert!(ev[0] > -1e-10);
        assert_eq!(ev.iter().filter(|v| v.abs() < 1e-8).count(), 2);
    }

    #[test]
    fn straight_line_has_zero_penalty_1d() {
        let x: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let basis = uni_basis(&x, 8).unwrap();
        let mut beta = DVector::zeros(basis.ncols());
        beta[0] = 3.0;
        beta[1] = -1.0;
        let q = (beta.transpose() * &basis.penalty * &beta)[(0, 0)];
        assert!(q.abs() < 1e-10);
    }

    #[test]
    fn evaluation_reproduces_design() {
        let pts = grid(5);
        let basis = tps_basis_k(&pts, 12).unwrap();
        let again = basis.spec.evaluate(&pts);
        assert_eq!(again, basis.design);
    }

    #[test]
    fn duplicate_knots_rejected() {
        let pts = grid(3);
        let knots = Knots {
            points: vec![pts[0], pts[1], pts[2], pts[4], pts[1]],
        };
        assert!(matches!(tps_basis(&pts, knots), Err(Error::DuplicateKnot(..))));
    }

    #[test]
    fn uni_basis_requires_three_knots() {
        assert!(uni_basis(&[1.0, 2.0, 3.0], 2).is_err());
        assert!(uni_basis(&[1.0, 1.0, 2.0], 5).is_err());
    }

    #[test]
    fn centering_map_annihilates_column_means() {
        let pts = grid(5);
        let basis = tps_basis_k(&pts, 10).unwrap();
        let z = basis.centering_map();
        let centered = &basis.design * &z;
        for j in 0..centered.ncols() {
            assert!(centered.column(j).sum().abs() < 1e-9);
        }
        assert_eq!(z.ncols(), basis.ncols() - 1);
    }
}
