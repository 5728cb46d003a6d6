//! Penalized least squares for additive models with GCV smoothing parameter
//! selection.
//!
//! A problem is prepared once for a fixed design (terms, fixed-effect blocks,
//! weights) and can then be fitted to any number of response vectors, which
//! is what backfitting and stochastic EM need. Every smooth term is centered
//! (sum-to-zero over its training design); the level is carried by an
//! intercept, or by a grouping factor when one is present. A grouping factor
//! is profiled out by weighted within-group centering rather than expanded
//! into dummy columns.
//!
//! Each fit works from the QR factor `R0` of the weighted design. For a given
//! set of smoothing parameters the penalized problem is solved by a second QR
//! of `[R0; B]`, where `B'B` is the total penalty, which avoids forming
//! `X'WX` explicitly.

mod search;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splines::{BasisSpec, SmoothBasis};
use crate::types::Point;

pub use search::{LAMBDA_LOG10_MAX, LAMBDA_LOG10_MIN};

/// How a term's smoothing parameter is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LambdaPolicy {
    Free,
    Fixed(f64),
    /// Chosen by GCV but never below the given value.
    LowerBounded(f64),
}

#[derive(Debug, Clone)]
pub struct TermSpec {
    pub name: String,
    pub basis: SmoothBasis,
    pub lambda_policy: LambdaPolicy,
}

impl TermSpec {
    pub fn new(name: impl Into<String>, basis: SmoothBasis) -> Self {
        TermSpec {
            name: name.into(),
            basis,
            lambda_policy: LambdaPolicy::Free,
        }
    }

    pub fn with_policy(mut self, policy: LambdaPolicy) -> Self {
        self.lambda_policy = policy;
        self
    }
}

/// Unpenalized fixed-effect blocks.
#[derive(Debug, Clone)]
pub enum FixedBlock {
    Dense { name: String, matrix: DMatrix<f64> },
    /// Grouping factor with levels `0..n_groups`; replaces the intercept.
    Grouping { name: String, groups: Vec<usize>, n_groups: usize },
}

impl FixedBlock {
    pub fn name(&self) -> &str {
        match self {
            FixedBlock::Dense { name, .. } | FixedBlock::Grouping { name, .. } => name,
        }
    }
}

/// Locations at which to evaluate a term.
#[derive(Debug, Clone)]
pub enum TermData {
    Points(Vec<Point>),
    Scalars(Vec<f64>),
}

impl TermData {
    pub fn len(&self) -> usize {
        match self {
            TermData::Points(p) => p.len(),
            TermData::Scalars(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A fitted term: its basis recipe, centering map, and coefficient slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTerm {
    pub name: String,
    pub spec: BasisSpec,
    centering: DMatrix<f64>,
    pub offset: usize,
    pub len: usize,
    pub lambda: f64,
    pub edf: f64,
    /// Range of the training inputs; queries outside it are extrapolation.
    pub support: [Point; 2],
}

impl FittedTerm {
    pub fn design(&self, data: &TermData) -> DMatrix<f64> {
        let raw = match data {
            TermData::Points(p) => self.spec.evaluate(p),
            TermData::Scalars(s) => self.spec.evaluate_scalars(s),
        };
        raw * &self.centering
    }

    pub fn outside_support(&self, data: &TermData) -> Vec<bool> {
        let [lo, hi] = self.support;
        match data {
            TermData::Points(p) => p
                .iter()
                .map(|q| q[0] < lo[0] || q[0] > hi[0] || q[1] < lo[1] || q[1] > hi[1])
                .collect(),
            TermData::Scalars(s) => s.iter().map(|v| *v < lo[0] || *v > hi[0]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedInfo {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Result of `AdditiveProblem::fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveFit {
    pub n: usize,
    pub coefficients: DVector<f64>,
    pub terms: Vec<FittedTerm>,
    pub fixed: Vec<FixedInfo>,
    pub has_intercept: bool,
    /// Per-level effects when a grouping factor was profiled out.
    pub group_effects: Option<Vec<f64>>,
    pub group_variances: Option<Vec<f64>>,
    pub sigma2: f64,
    pub rss: f64,
    pub trace: f64,
    pub gcv: f64,
    /// `sigma2 * (X'WX + S)^-1`.
    pub coef_cov: DMatrix<f64>,
    pub fitted: DVector<f64>,
}

impl AdditiveFit {
    pub fn term(&self, name: &str) -> Result<&FittedTerm> {
        self.terms
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTerm(name.to_string()))
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.lambda).collect()
    }

    pub fn edf(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.edf).collect()
    }

    pub fn intercept(&self) -> f64 {
        if self.has_intercept {
            self.coefficients[0]
        } else {
            0.0
        }
    }

    pub fn term_coefficients(&self, name: &str) -> Result<DVector<f64>> {
        let t = self.term(name)?;
        Ok(self.coefficients.rows(t.offset, t.len).into_owned())
    }

    /// Mean and standard error of one term at new data.
    pub fn term_predict(&self, name: &str, data: &TermData) -> Result<(DVector<f64>, DVector<f64>)> {
        self.predict_joint(&[(name, data)], false)
    }

    /// Mean and standard error of a sum of terms (optionally plus the
    /// intercept), using the joint block of the coefficient covariance.
    pub fn predict_joint(
        &self,
        parts: &[(&str, &TermData)],
        include_intercept: bool,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let m = parts
            .first()
            .map(|(_, d)| d.len())
            .unwrap_or(if include_intercept { 1 } else { 0 });
        let p = self.coefficients.len();
        let mut x = DMatrix::zeros(m, p);
        if include_intercept && self.has_intercept {
            x.column_mut(0).fill(1.0);
        }
        for (name, data) in parts {
            let t = self.term(name)?;
            if data.len() != m {
                return Err(Error::Dimension(format!(
                    "term '{name}' has {} rows, expected {m}",
                    data.len()
                )));
            }
            let d = t.design(data);
            x.view_mut((0, t.offset), (m, t.len)).copy_from(&d);
        }
        let mean = &x * &self.coefficients;
        let xv = &x * &self.coef_cov;
        let se = DVector::from_iterator(
            m,
            (0..m).map(|i| xv.row(i).dot(&x.row(i)).max(0.0).sqrt()),
        );
        Ok((mean, se))
    }

    pub fn residuals(&self, y: &DVector<f64>) -> DVector<f64> {
        y - &self.fitted
    }
}

struct PenaltyRoot {
    /// rank x len block with `root' root = S` (on the centered basis).
    root: DMatrix<f64>,
    /// Penalty normalization so GCV search ranges are comparable across terms.
    scale: f64,
}

struct TermLayout {
    name: String,
    spec: BasisSpec,
    centering: DMatrix<f64>,
    offset: usize,
    len: usize,
    policy: LambdaPolicy,
    penalty: DMatrix<f64>,
    root: PenaltyRoot,
    support: [Point; 2],
}

/// A prepared design, reusable across responses.
pub struct AdditiveProblem {
    n: usize,
    p: usize,
    sqrt_w: DVector<f64>,
    weights: DVector<f64>,
    /// Profiled (within-group centered when grouped) unweighted design.
    design: DMatrix<f64>,
    has_intercept: bool,
    grouping: Option<Grouping>,
    fixed: Vec<FixedInfo>,
    terms: Vec<TermLayout>,
    q0: DMatrix<f64>,
    r0: DMatrix<f64>,
    n_eff: usize,
    /// Trace inflation in the GCV denominator.
    gamma: f64,
}

struct Grouping {
    groups: Vec<usize>,
    n_groups: usize,
    weight_sums: Vec<f64>,
    /// Weighted group means of the raw design columns (n_groups x p).
    means: DMatrix<f64>,
}

/// Intermediate quantities for one response vector.
pub struct PreparedResponse {
    y_profiled: DVector<f64>,
    group_means: Option<Vec<f64>>,
    f: DVector<f64>,
    rss0: f64,
    /// Residual sum of squares attributable to rounding alone.
    rounding_ss: f64,
}

impl PreparedResponse {
    /// Weighted sum of squares of the (profiled) response.
    pub(crate) fn total_ss(&self) -> f64 {
        self.rss0 + self.f.norm_squared()
    }

    pub(crate) fn rounding_ss(&self) -> f64 {
        self.rounding_ss
    }
}

/// Penalized solution at fixed smoothing parameters.
pub(crate) struct Solution {
    pub beta: DVector<f64>,
    pub rss: f64,
    pub trace: f64,
    r1: DMatrix<f64>,
    q1_top: DMatrix<f64>,
}

fn support_of(basis: &SmoothBasis, data_points: &[Point]) -> [Point; 2] {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in data_points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    if basis.kind() == crate::splines::BasisKind::Uni1d {
        lo[1] = 0.0;
        hi[1] = 0.0;
    }
    [lo, hi]
}

fn recover_inputs(basis: &SmoothBasis) -> Vec<Point> {
    // Polynomial columns 1 (and 2) hold scaled coordinates.
    let s = &basis.spec;
    (0..basis.nrows())
        .map(|i| {
            let x = basis.design[(i, 1)] * s.scale + s.center[0];
            let y = if basis.null_dim() == 3 {
                basis.design[(i, 2)] * s.scale + s.center[1]
            } else {
                0.0
            };
            [x, y]
        })
        .collect()
}

fn penalty_root(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(s.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let tol = max * 1e-12;
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > tol)
        .collect();
    let mut root = DMatrix::zeros(keep.len(), s.ncols());
    for (r, &i) in keep.iter().enumerate() {
        let sq = eig.eigenvalues[i].sqrt();
        for j in 0..s.ncols() {
            root[(r, j)] = sq * eig.eigenvectors[(j, i)];
        }
    }
    root
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.ncols() == 0 || m.nrows() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().fold(0.0f64, |a, &b| a.max(b));
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&v| v > max * 1e-9).count()
}

impl AdditiveProblem {
    pub fn new(
        terms: Vec<TermSpec>,
        fixed_blocks: Vec<FixedBlock>,
        weights: Option<&[f64]>,
    ) -> Result<Self> {
        let n = terms
            .first()
            .map(|t| t.basis.nrows())
            .or_else(|| {
                fixed_blocks.first().map(|b| match b {
                    FixedBlock::Dense { matrix, .. } => matrix.nrows(),
                    FixedBlock::Grouping { groups, .. } => groups.len(),
                })
            })
            .ok_or_else(|| Error::invalid("additive model needs at least one term or block"))?;

        for t in &terms {
            if t.basis.nrows() != n {
                return Err(Error::Dimension(format!(
                    "term '{}' has {} rows, expected {n}",
                    t.name,
                    t.basis.nrows()
                )));
            }
            match t.lambda_policy {
                LambdaPolicy::Fixed(l) if !(l >= 0.0) => {
                    return Err(Error::invalid(format!("term '{}': fixed lambda must be >= 0", t.name)))
                }
                LambdaPolicy::LowerBounded(l) if !(l > 0.0) => {
                    return Err(Error::invalid(format!("term '{}': lambda floor must be > 0", t.name)))
                }
                _ => {}
            }
        }

        let mut weights_v = match weights {
            Some(w) => {
                if w.len() != n {
                    return Err(Error::Dimension(format!("{} weights for {n} rows", w.len())));
                }
                if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(Error::invalid("weights must be finite and nonnegative"));
                }
                DVector::from_column_slice(w)
            }
            None => DVector::from_element(n, 1.0),
        };
        let n_eff = weights_v.iter().filter(|&&v| v > 0.0).count();
        if n_eff == 0 {
            return Err(Error::invalid("all weights are zero"));
        }
        let wmean = weights_v.sum() / n_eff as f64;
        weights_v /= wmean;
        let sqrt_w = weights_v.map(f64::sqrt);

        // Column layout.
        let mut grouping_spec: Option<(Vec<usize>, usize)> = None;
        let mut dense: Vec<(String, DMatrix<f64>)> = Vec::new();
        for b in fixed_blocks {
            match b {
                FixedBlock::Dense { name, matrix } => {
                    if matrix.nrows() != n {
                        return Err(Error::Dimension(format!(
                            "fixed block '{name}' has {} rows, expected {n}",
                            matrix.nrows()
                        )));
                    }
                    dense.push((name, matrix));
                }
                FixedBlock::Grouping { name, groups, n_groups } => {
                    if grouping_spec.is_some() {
                        return Err(Error::invalid("at most one grouping factor is supported"));
                    }
                    if groups.len() != n || groups.iter().any(|&g| g >= n_groups) {
                        return Err(Error::Dimension(format!("grouping '{name}' is malformed")));
                    }
                    grouping_spec = Some((groups, n_groups));
                }
            }
        }
        let has_intercept = grouping_spec.is_none();
        let mut p = usize::from(has_intercept);
        let mut fixed = Vec::new();
        for (name, m) in &dense {
            fixed.push(FixedInfo {
                name: name.clone(),
                offset: p,
                len: m.ncols(),
            });
            p += m.ncols();
        }
        let mut layouts = Vec::new();
        let mut centered_designs = Vec::new();
        for t in terms {
            let centering = t.basis.centering_map();
            let design = &t.basis.design * &centering;
            let penalty = centering.transpose() * &t.basis.penalty * &centering;
            let penalty = (&penalty + penalty.transpose()) * 0.5;
            let len = design.ncols();
            let inputs = recover_inputs(&t.basis);
            layouts.push(TermLayout {
                name: t.name,
                support: support_of(&t.basis, &inputs),
                spec: t.basis.spec,
                centering,
                offset: p,
                len,
                policy: t.lambda_policy,
                root: PenaltyRoot {
                    root: penalty_root(&penalty),
                    scale: 1.0,
                },
                penalty,
            });
            centered_designs.push(design);
            p += len;
        }

        let mut design = DMatrix::zeros(n, p);
        if has_intercept {
            design.column_mut(0).fill(1.0);
        }
        for (info, (_, m)) in fixed.iter().zip(&dense) {
            design.view_mut((0, info.offset), (n, info.len)).copy_from(m);
        }
        for (l, d) in layouts.iter().zip(&centered_designs) {
            design.view_mut((0, l.offset), (n, l.len)).copy_from(d);
        }

        let grouping = match grouping_spec {
            Some((groups, n_groups)) => {
                let mut weight_sums = vec![0.0; n_groups];
                let mut means = DMatrix::zeros(n_groups, p);
                for i in 0..n {
                    let g = groups[i];
                    weight_sums[g] += weights_v[i];
                    for j in 0..p {
                        means[(g, j)] += weights_v[i] * design[(i, j)];
                    }
                }
                for g in 0..n_groups {
                    if weight_sums[g] > 0.0 {
                        for j in 0..p {
                            means[(g, j)] /= weight_sums[g];
                        }
                    }
                }
                for i in 0..n {
                    let g = groups[i];
                    for j in 0..p {
                        design[(i, j)] -= means[(g, j)];
                    }
                }
                Some(Grouping {
                    groups,
                    n_groups,
                    weight_sums,
                    means,
                })
            }
            None => None,
        };

        let mut weighted = design.clone();
        for i in 0..n {
            weighted.row_mut(i).scale_mut(sqrt_w[i]);
        }

        // Penalty normalization against the weighted term design.
        for l in layouts.iter_mut() {
            let xk = weighted.columns(l.offset, l.len);
            let xtx = xk.transpose() * xk;
            let sn = l.penalty.norm();
            let xn = xtx.norm();
            l.root.scale = if sn > 0.0 && xn > 0.0 { xn / sn } else { 1.0 };
        }

        let mut problem = AdditiveProblem {
            n,
            p,
            sqrt_w,
            weights: weights_v,
            design,
            has_intercept,
            grouping,
            fixed,
            terms: layouts,
            q0: DMatrix::zeros(0, 0),
            r0: DMatrix::zeros(0, 0),
            n_eff,
            gamma: 1.0,
        };
        problem.check_identifiable(&weighted)?;

        let qr = weighted.qr();
        problem.q0 = qr.q();
        problem.r0 = qr.r();
        Ok(problem)
    }

    /// Use `n * RSS / (n - gamma * tr(A))^2` when selecting smoothing
    /// parameters. Values above one penalize flexible fits more heavily and
    /// rule out near-interpolating minima on small samples.
    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(gamma >= 1.0) || !gamma.is_finite() {
            return Err(Error::invalid(format!("GCV gamma must be >= 1, got {gamma}")));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ncoef(&self) -> usize {
        self.p
    }

    pub fn term_names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.name.clone()).collect()
    }

    fn n_groups(&self) -> usize {
        self.grouping.as_ref().map(|g| g.n_groups).unwrap_or(0)
    }

    /// Unpenalized directions must be estimable; otherwise name the blocks
    /// that are collinear with the rest.
    fn check_identifiable(&self, weighted: &DMatrix<f64>) -> Result<()> {
        let mut blocks: Vec<(String, DMatrix<f64>)> = Vec::new();
        if self.has_intercept {
            blocks.push(("(intercept)".into(), weighted.columns(0, 1).into_owned()));
        }
        for f in &self.fixed {
            blocks.push((f.name.clone(), weighted.columns(f.offset, f.len).into_owned()));
        }
        for t in &self.terms {
            let eig = SymmetricEigen::new(t.penalty.clone());
            let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            let null: Vec<usize> = (0..eig.eigenvalues.len())
                .filter(|&i| eig.eigenvalues[i].abs() <= max * 1e-9)
                .collect();
            if null.is_empty() {
                continue;
            }
            let dirs = DMatrix::from_fn(t.len, null.len(), |r, c| eig.eigenvectors[(r, null[c])]);
            blocks.push((t.name.clone(), weighted.columns(t.offset, t.len) * dirs));
        }
        if blocks.is_empty() {
            return Ok(());
        }
        let assemble = |skip: Option<usize>| {
            let cols: usize = blocks
                .iter()
                .enumerate()
                .filter(|(i, _)| Some(*i) != skip)
                .map(|(_, b)| b.1.ncols())
                .sum();
            let mut m = DMatrix::zeros(self.n, cols);
            let mut c = 0;
            for (i, b) in blocks.iter().enumerate() {
                if Some(i) == skip {
                    continue;
                }
                m.view_mut((0, c), (self.n, b.1.ncols())).copy_from(&b.1);
                c += b.1.ncols();
            }
            m
        };
        let all = assemble(None);
        let rank = numerical_rank(&all);
        if rank == all.ncols() {
            return Ok(());
        }
        let mut culprits = Vec::new();
        for (i, b) in blocks.iter().enumerate() {
            let without = numerical_rank(&assemble(Some(i)));
            if rank - without < b.1.ncols() {
                culprits.push(b.0.clone());
            }
        }
        if self.grouping.is_some() && culprits.is_empty() {
            culprits.push("(grouping)".into());
        }
        Err(Error::RankDeficient(culprits))
    }

    pub fn prepare(&self, y: &[f64]) -> Result<PreparedResponse> {
        if y.len() != self.n {
            return Err(Error::Dimension(format!(
                "response has {} rows, expected {}",
                y.len(),
                self.n
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("response contains non-finite values"));
        }
        let y = DVector::from_column_slice(y);
        let (y_profiled, group_means) = match &self.grouping {
            Some(g) => {
                let mut sums = vec![0.0; g.n_groups];
                for i in 0..self.n {
                    sums[g.groups[i]] += self.weights[i] * y[i];
                }
                let means: Vec<f64> = sums
                    .iter()
                    .zip(&g.weight_sums)
                    .map(|(s, w)| if *w > 0.0 { s / w } else { 0.0 })
                    .collect();
                let yp = DVector::from_iterator(self.n, (0..self.n).map(|i| y[i] - means[g.groups[i]]));
                (yp, Some(means))
            }
            None => (y.clone(), None),
        };
        let wy = y_profiled.component_mul(&self.sqrt_w);
        let f = self.q0.transpose() * &wy;
        let rss0 = (&wy - &self.q0 * &f).norm_squared();
        let scale = y.amax() * self.sqrt_w.amax();
        let rounding_ss = self.n as f64 * (1e3 * f64::EPSILON * scale).powi(2);
        Ok(PreparedResponse {
            y_profiled,
            group_means,
            f,
            rss0,
            rounding_ss,
        })
    }

    /// Penalized solution for given smoothing parameters (one per term, raw
    /// units).
    pub(crate) fn solve(&self, resp: &PreparedResponse, lambdas: &[f64]) -> Result<Solution> {
        let r = self.r0.nrows();
        let extra: usize = self
            .terms
            .iter()
            .zip(lambdas)
            .filter(|(_, &l)| l > 0.0)
            .map(|(t, _)| t.root.root.nrows())
            .sum();
        let mut aug = DMatrix::zeros(r + extra, self.p);
        aug.view_mut((0, 0), (r, self.p)).copy_from(&self.r0);
        let mut row = r;
        for (t, &l) in self.terms.iter().zip(lambdas) {
            if l > 0.0 {
                let rk = t.root.root.nrows();
                let block = &t.root.root * l.sqrt();
                aug.view_mut((row, t.offset), (rk, t.len)).copy_from(&block);
                row += rk;
            }
        }
        if aug.nrows() < self.p {
            return Err(Error::RankDeficient(self.term_names()));
        }
        let qr = aug.qr();
        let q1 = qr.q();
        let r1 = qr.r();
        let diag_max = (0..self.p).fold(0.0f64, |a, i| a.max(r1[(i, i)].abs()));
        if (0..self.p).any(|i| r1[(i, i)].abs() <= diag_max * 1e-13) {
            return Err(Error::RankDeficient(self.term_names()));
        }
        let rhs = q1.rows(0, r).transpose() * &resp.f;
        let beta = r1
            .solve_upper_triangular(&rhs)
            .ok_or_else(|| Error::RankDeficient(self.term_names()))?;
        let resid_top = &resp.f - &self.r0 * &beta;
        let rss = resp.rss0 + resid_top.norm_squared();
        let q1_top = q1.rows(0, r).into_owned();
        let trace = q1_top.norm_squared() + self.n_groups() as f64;
        Ok(Solution {
            beta,
            rss,
            trace,
            r1,
            q1_top,
        })
    }

    /// `n * RSS / (n - gamma * tr(A))^2` at the given smoothing parameters.
    pub fn gcv_score(&self, y: &[f64], lambdas: &[f64]) -> Result<f64> {
        let resp = self.prepare(y)?;
        let sol = self.solve(&resp, lambdas)?;
        self.score(&sol)
    }

    pub(crate) fn score(&self, sol: &Solution) -> Result<f64> {
        let n = self.n_eff as f64;
        if self.gamma * sol.trace >= n {
            return Err(Error::OverParameterized {
                trace: self.gamma * sol.trace,
                n: self.n_eff,
            });
        }
        Ok(n * sol.rss / (n - self.gamma * sol.trace).powi(2))
    }

    /// Fit with smoothing parameters chosen by GCV according to each term's
    /// policy.
    pub fn fit(&self, y: &[f64]) -> Result<AdditiveFit> {
        let resp = self.prepare(y)?;
        let lambdas = search::select_lambdas(self, &resp)?;
        self.finish(&resp, &lambdas)
    }

    /// Fit at the given smoothing parameters (raw units), ignoring policies.
    pub fn fit_with_lambdas(&self, y: &[f64], lambdas: &[f64]) -> Result<AdditiveFit> {
        if lambdas.len() != self.terms.len() {
            return Err(Error::Dimension(format!(
                "{} lambdas for {} terms",
                lambdas.len(),
                self.terms.len()
            )));
        }
        let resp = self.prepare(y)?;
        self.finish(&resp, lambdas)
    }

    fn finish(&self, resp: &PreparedResponse, lambdas: &[f64]) -> Result<AdditiveFit> {
        let sol = self.solve(resp, lambdas)?;
        let n = self.n_eff as f64;
        let all_fixed = self
            .terms
            .iter()
            .all(|t| matches!(t.policy, LambdaPolicy::Fixed(_)));
        // Fixed-lambda interpolating fits are legitimate; GCV is then undefined
        // and the residual variance is taken as zero.
        let (gcv, sigma2) = if sol.trace < n {
            let g = self.score(&sol).unwrap_or(f64::INFINITY);
            (g, (sol.rss / (n - sol.trace)).max(0.0))
        } else if all_fixed {
            (f64::INFINITY, 0.0)
        } else {
            return Err(Error::OverParameterized {
                trace: sol.trace,
                n: self.n_eff,
            });
        };

        let r1_inv = sol
            .r1
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::RankDeficient(self.term_names()))?;
        let unscaled = &r1_inv * r1_inv.transpose();
        let unscaled = (&unscaled + unscaled.transpose()) * 0.5;
        // F = (X'WX + S)^-1 X'WX = R1^-1 Q1top' R0
        let f_mat = &r1_inv * (sol.q1_top.transpose() * &self.r0);

        let terms = self
            .terms
            .iter()
            .zip(lambdas)
            .map(|(t, &l)| FittedTerm {
                name: t.name.clone(),
                spec: t.spec.clone(),
                centering: t.centering.clone(),
                offset: t.offset,
                len: t.len,
                lambda: l,
                edf: (t.offset..t.offset + t.len).map(|i| f_mat[(i, i)]).sum(),
                support: t.support,
            })
            .collect();

        let mut fitted = &self.design * &sol.beta;
        let (group_effects, group_variances) = match (&self.grouping, &resp.group_means) {
            (Some(g), Some(ym)) => {
                let xbar_beta = &g.means * &sol.beta;
                let effects: Vec<f64> = (0..g.n_groups).map(|k| ym[k] - xbar_beta[k]).collect();
                let v = &unscaled * sigma2;
                let vars: Vec<f64> = (0..g.n_groups)
                    .map(|k| {
                        let xb = g.means.row(k);
                        let sampling = if g.weight_sums[k] > 0.0 {
                            sigma2 / g.weight_sums[k]
                        } else {
                            f64::INFINITY
                        };
                        sampling + (xb * &v).dot(&xb)
                    })
                    .collect();
                // alpha_g + x_raw'beta = y_mean_g + x_profiled'beta
                for i in 0..self.n {
                    fitted[i] += ym[g.groups[i]];
                }
                (Some(effects), Some(vars))
            }
            _ => (None, None),
        };

        Ok(AdditiveFit {
            n: self.n,
            coefficients: sol.beta,
            terms,
            fixed: self.fixed.clone(),
            has_intercept: self.has_intercept,
            group_effects,
            group_variances,
            sigma2,
            rss: sol.rss,
            trace: sol.trace,
            gcv,
            coef_cov: unscaled * sigma2,
            fitted,
        })
    }

    pub(crate) fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub(crate) fn term_policy(&self, k: usize) -> LambdaPolicy {
        self.terms[k].policy
    }

    pub(crate) fn term_scale(&self, k: usize) -> f64 {
        self.terms[k].root.scale
    }

    /// Dense design actually used in the fit (profiled when grouped); test support.
    pub fn profiled_design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn normalized_weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Total penalty at the given smoothing parameters, embedded in the full
    /// coefficient space.
    pub fn total_penalty(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.p, self.p);
        for (t, &l) in self.terms.iter().zip(lambdas) {
            let block = &t.penalty * l;
            let mut v = s.view_mut((t.offset, t.offset), (t.len, t.len));
            v += block;
        }
        s
    }

    /// Within-group centered response when grouped, else the response itself.
    pub fn profiled_response(&self, y: &[f64]) -> Result<DVector<f64>> {
        Ok(self.prepare(y)?.y_profiled)
    }

    pub fn n_profiled_groups(&self) -> usize {
        self.n_groups()
    }
}

/// Convenience: fit a model in one call.
pub fn fit_additive(
    y: &[f64],
    terms: Vec<TermSpec>,
    fixed_blocks: Vec<FixedBlock>,
    weights: Option<&[f64]>,
) -> Result<AdditiveFit> {
    AdditiveProblem::new(terms, fixed_blocks, weights)?.fit(y)
}
