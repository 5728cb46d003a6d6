//! Backfitting of site effects plus regression smooths against a set of
//! independent spatial surfaces, one per row group (month or season).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gam::{AdditiveFit, AdditiveProblem, FixedBlock, LambdaPolicy, TermData, TermSpec};
use crate::splines::{distinct_points, tps_basis_k, uni_basis, BasisKind};
use crate::types::Point;

pub const SURFACE_TERM: &str = "g";

/// A fitted spatial surface for one row group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceFit {
    /// `None` for a zero surface (too few distinct locations).
    pub fit: Option<AdditiveFit>,
    pub n_obs: usize,
    /// Trace of the surface smoother, including its level.
    pub edf: f64,
    pub rss: f64,
    /// Residual variance of the group's final residuals.
    pub sigma2: f64,
    pub degenerate: bool,
}

impl SurfaceFit {
    /// Mean and variance of the surface at `points`.
    pub fn predict(&self, points: &[Point]) -> Result<(Vec<f64>, Vec<f64>)> {
        match &self.fit {
            None => Ok((vec![0.0; points.len()], vec![0.0; points.len()])),
            Some(f) => {
                let data = TermData::Points(points.to_vec());
                let (m, se) = f.predict_joint(&[(SURFACE_TERM, &data)], true)?;
                Ok((m.iter().copied().collect(), se.iter().map(|s| s * s).collect()))
            }
        }
    }
}

pub(crate) struct BackfitSpec<'a> {
    pub y: &'a [f64],
    pub sites: &'a [usize],
    pub n_sites: usize,
    pub points: &'a [Point],
    pub groups: &'a [usize],
    pub n_groups: usize,
    /// Row-level covariates entering as 1-D smooths.
    pub smooths: &'a [(String, Vec<f64>)],
    pub smooth_knots: usize,
    pub surface_knots: usize,
    /// One policy per group.
    pub surface_policy: &'a [LambdaPolicy],
    /// GCV trace inflation for the surfaces.
    pub surface_gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
}

pub(crate) struct BackfitResult {
    pub regression: Option<AdditiveFit>,
    pub site_effects: Vec<f64>,
    pub site_variances: Vec<f64>,
    pub surfaces: Vec<SurfaceFit>,
    /// Regression part of the fitted values (site effects plus smooths).
    pub regression_fitted: Vec<f64>,
    pub surface_fitted: Vec<f64>,
    pub iterations: usize,
    pub last_change: f64,
}

struct Regression {
    fit: Option<AdditiveFit>,
    effects: Vec<f64>,
    variances: Vec<f64>,
    fitted: Vec<f64>,
}

enum RegressionProblem {
    /// Site effects only: weighted group means.
    Means,
    Smooths(AdditiveProblem),
}

struct GroupProblem {
    rows: Vec<usize>,
    problem: Option<AdditiveProblem>,
}

fn regression_problem(spec: &BackfitSpec) -> Result<RegressionProblem> {
    if spec.smooths.is_empty() {
        return Ok(RegressionProblem::Means);
    }
    let mut terms = Vec::new();
    for (name, x) in spec.smooths {
        let mut distinct: Vec<f64> = x.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let k = spec.smooth_knots.min(distinct.len());
        let basis = uni_basis(x, k)
            .map_err(|e| Error::invalid(format!("smooth of '{name}': {e}")))?;
        terms.push(TermSpec::new(name.clone(), basis));
    }
    let grouping = FixedBlock::Grouping {
        name: "site".into(),
        groups: spec.sites.to_vec(),
        n_groups: spec.n_sites,
    };
    Ok(RegressionProblem::Smooths(AdditiveProblem::new(terms, vec![grouping], None)?))
}

fn fit_regression(spec: &BackfitSpec, problem: &RegressionProblem, target: &[f64]) -> Result<Regression> {
    match problem {
        RegressionProblem::Means => {
            let g = spec.n_sites;
            let mut sums = vec![0.0; g];
            let mut counts = vec![0.0; g];
            for (i, &s) in spec.sites.iter().enumerate() {
                sums[s] += target[i];
                counts[s] += 1.0;
            }
            let effects: Vec<f64> = sums.iter().zip(&counts).map(|(s, c)| s / c).collect();
            let fitted: Vec<f64> = spec.sites.iter().map(|&s| effects[s]).collect();
            let rss: f64 = target.iter().zip(&fitted).map(|(a, b)| (a - b).powi(2)).sum();
            let df = target.len() as f64 - g as f64;
            let sigma2 = if df > 0.0 { rss / df } else { 0.0 };
            let variances = counts.iter().map(|c| sigma2 / c).collect();
            Ok(Regression {
                fit: None,
                effects,
                variances,
                fitted,
            })
        }
        RegressionProblem::Smooths(p) => {
            let fit = p.fit(target)?;
            let effects = fit.group_effects.clone().expect("grouped fit");
            let variances = fit.group_variances.clone().expect("grouped fit");
            let fitted = fit.fitted.iter().copied().collect();
            Ok(Regression {
                fit: Some(fit),
                effects,
                variances,
                fitted,
            })
        }
    }
}

fn regression_trace(spec: &BackfitSpec, reg: &Regression) -> f64 {
    reg.fit.as_ref().map(|f| f.trace).unwrap_or(spec.n_sites as f64)
}

fn group_problems(spec: &BackfitSpec) -> Result<Vec<GroupProblem>> {
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); spec.n_groups];
    for (i, &g) in spec.groups.iter().enumerate() {
        rows[g].push(i);
    }
    rows.into_par_iter()
        .enumerate()
        .map(|(g, rows)| {
            let pts: Vec<Point> = rows.iter().map(|&i| spec.points[i]).collect();
            let distinct = distinct_points(&pts).len();
            if distinct <= BasisKind::Tps2d.null_dim() {
                return Ok(GroupProblem { rows, problem: None });
            }
            let basis = tps_basis_k(&pts, spec.surface_knots.min(distinct))?;
            let term = TermSpec::new(SURFACE_TERM, basis).with_policy(spec.surface_policy[g]);
            Ok(GroupProblem {
                rows,
                problem: Some(AdditiveProblem::new(vec![term], vec![], None)?.with_gamma(spec.surface_gamma)?),
            })
        })
        .collect()
}

fn fit_surfaces(problems: &[GroupProblem], target: &[f64]) -> Result<Vec<Option<AdditiveFit>>> {
    problems
        .par_iter()
        .map(|gp| match &gp.problem {
            None => Ok(None),
            Some(p) => {
                let y: Vec<f64> = gp.rows.iter().map(|&i| target[i]).collect();
                p.fit(&y).map(Some)
            }
        })
        .collect()
}

fn surface_values(problems: &[GroupProblem], fits: &[Option<AdditiveFit>], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (gp, f) in problems.iter().zip(fits) {
        if let Some(f) = f {
            for (j, &i) in gp.rows.iter().enumerate() {
                out[i] = f.fitted[j];
            }
        }
    }
    out
}

pub(crate) fn backfit(spec: &BackfitSpec) -> Result<BackfitResult> {
    let n = spec.y.len();
    if spec.sites.len() != n || spec.points.len() != n || spec.groups.len() != n {
        return Err(Error::Dimension("backfit inputs differ in length".into()));
    }
    if spec.surface_policy.len() != spec.n_groups {
        return Err(Error::Dimension("one surface policy per group is required".into()));
    }
    let reg_problem = regression_problem(spec)?;
    let problems = group_problems(spec)?;

    let mut reg = fit_regression(spec, &reg_problem, spec.y)?;
    let mut surf_fits: Vec<Option<AdditiveFit>> = vec![None; spec.n_groups];
    let mut surf = vec![0.0; n];
    let mut combined = reg.fitted.clone();
    let mut change = f64::INFINITY;
    let mut previous = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    // Rows of groups without a surface. A constant can move between the site
    // effects and the surface levels, and only these rows pin it, which makes
    // plain backfitting crawl along that direction; an exact line search
    // along it each cycle removes the stall.
    let pinned: Vec<usize> = problems
        .iter()
        .filter(|gp| gp.problem.is_none())
        .flat_map(|gp| gp.rows.iter().copied())
        .collect();
    let has_surfaces = pinned.len() < n;
    while iterations < spec.max_iter {
        iterations += 1;
        let shift = if iterations > 1 && has_surfaces && !pinned.is_empty() {
            pinned.iter().map(|&i| spec.y[i] - combined[i]).sum::<f64>() / pinned.len() as f64
        } else {
            0.0
        };
        let partial: Vec<f64> = (0..n).map(|i| spec.y[i] - reg.fitted[i] - shift).collect();
        surf_fits = fit_surfaces(&problems, &partial)?;
        surf = surface_values(&problems, &surf_fits, n);
        let target: Vec<f64> = (0..n).map(|i| spec.y[i] - surf[i]).collect();
        reg = fit_regression(spec, &reg_problem, &target)?;
        let next: Vec<f64> = (0..n).map(|i| reg.fitted[i] + surf[i]).collect();
        previous = change;
        change = next
            .iter()
            .zip(&combined)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        combined = next;
        log::debug!("backfit iteration {iterations}: max change {change:.3e}");
        if change < spec.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NotConverged {
            iterations,
            last_change: change,
            previous_change: previous,
        });
    }

    // Residual degrees of freedom: each group is charged its surface trace
    // plus its row share of the regression trace.
    let reg_trace = regression_trace(spec, &reg);
    let surfaces = problems
        .iter()
        .zip(surf_fits)
        .map(|(gp, fit)| {
            let n_g = gp.rows.len();
            let rss: f64 = gp
                .rows
                .iter()
                .map(|&i| (spec.y[i] - combined[i]).powi(2))
                .sum();
            let edf = fit.as_ref().map(|f| f.trace).unwrap_or(0.0);
            let df = n_g as f64 - edf - reg_trace * n_g as f64 / n as f64;
            let sigma2 = if n_g == 0 {
                0.0
            } else if df > 0.0 {
                rss / df
            } else {
                rss / n_g as f64
            };
            SurfaceFit {
                degenerate: fit.is_none(),
                fit,
                n_obs: n_g,
                edf,
                rss,
                sigma2,
            }
        })
        .collect();

    Ok(BackfitResult {
        regression: reg.fit,
        site_effects: reg.effects,
        site_variances: reg.variances,
        surfaces,
        regression_fitted: reg.fitted,
        surface_fitted: surf,
        iterations,
        last_change: change,
    })
}
