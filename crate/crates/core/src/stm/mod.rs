//! The two-stage spatio-temporal model.
//!
//! Stage one decomposes the transformed monthly concentration at site `i`
//! and month `t` as
//!
//! ```text
//! y_it = mu_i + sum_k h_k(x_kit) + g_t(s_i) + e_it,   e_it ~ N(0, sigma_t^2)
//! ```
//!
//! with site effects `mu_i`, smooths `h_k` of time-varying covariates and an
//! independent spatial surface `g_t` per month, fitted by backfitting. Stage
//! two regresses the site effects on a spatial surface and smooths of
//! time-invariant covariates:
//!
//! ```text
//! mu_i = g_mu(s_i) + sum_j f_j(z_ji) + b_i,   b_i ~ N(0, sigma_mu^2)
//! ```

mod backfit;
mod model_file;
mod predict;
#[cfg(test)]
mod tests;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{CovariateFrame, MonthlyObservation, Projection, Site};
use crate::error::{Error, Result};
use crate::gam::{AdditiveFit, AdditiveProblem, LambdaPolicy, TermSpec};
use crate::splines::{distinct_points, tps_basis_k, uni_basis, BasisKind};
use crate::types::{Point, Season, Transform, YearMonth};

pub use backfit::{SurfaceFit, SURFACE_TERM};
pub(crate) use backfit::{backfit, BackfitSpec};
pub use model_file::{
    load_model, read_manifest, read_model, save_model, write_model, ModelKind, ModelPayload,
    MODEL_FORMAT_VERSION,
};
pub use predict::{
    coarse_pm, delta_se, longterm_from_monthly, write_predictions, Coarse, Flag, Location, Prediction,
    VarianceParts,
};
pub(crate) use predict::{invariant_part, invariant_values, varying_values};

/// Name of the stage-two spatial term.
pub const SPATIAL_TERM: &str = "s(x,y)";

/// Monitoring locations with their monthly observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub locations: BTreeMap<String, Point>,
    /// Sorted by site, then month.
    pub observations: Vec<MonthlyObservation>,
}

impl Panel {
    pub fn new(locations: BTreeMap<String, Point>, mut observations: Vec<MonthlyObservation>) -> Result<Self> {
        let unknown: BTreeSet<String> = observations
            .iter()
            .filter(|o| !locations.contains_key(&o.site_id))
            .map(|o| o.site_id.clone())
            .collect();
        if !unknown.is_empty() {
            return Err(Error::invalid(format!(
                "observations reference unknown sites: {}",
                unknown.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }
        observations.sort_by(|a, b| {
            (a.site_id.as_str(), a.year_month()).cmp(&(b.site_id.as_str(), b.year_month()))
        });
        for w in observations.windows(2) {
            if w[0].site_id == w[1].site_id && w[0].year_month() == w[1].year_month() {
                return Err(Error::invalid(format!(
                    "duplicate observation for {} {}",
                    w[0].site_id,
                    w[0].year_month()
                )));
            }
        }
        Ok(Panel {
            locations,
            observations,
        })
    }

    pub fn from_sites(sites: &[Site], observations: Vec<MonthlyObservation>) -> Result<Self> {
        let locations = sites.iter().map(|s| (s.site_id.clone(), s.point())).collect();
        Panel::new(locations, observations)
    }

    /// Panel restricted to the sites accepted by `keep`.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> Panel {
        Panel {
            locations: self
                .locations
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
            observations: self
                .observations
                .iter()
                .filter(|o| keep(&o.site_id))
                .cloned()
                .collect(),
        }
    }

    pub fn site_ids(&self) -> Vec<String> {
        self.locations.keys().cloned().collect()
    }

    pub fn months(&self) -> BTreeSet<YearMonth> {
        self.observations.iter().map(|o| o.year_month()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Options {
    pub transform: Transform,
    /// Convergence threshold on the max absolute change of fitted values.
    pub tol: f64,
    pub max_iter: usize,
    /// Basis rank cap for monthly surfaces.
    pub surface_knots: usize,
    /// Basis rank for time-varying covariate smooths.
    pub smooth_knots: usize,
    /// Trace inflation in the GCV criterion for monthly surfaces.
    pub surface_gamma: f64,
    /// Floor monthly smoothing parameters at a seasonal pooled fit's value.
    pub seasonal_lambda_floor: bool,
    /// Sites with fewer observations are left out.
    pub min_site_obs: usize,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Stage1Options {
            transform: Transform::Log,
            tol: 1e-4,
            max_iter: 50,
            surface_knots: 100,
            smooth_knots: 10,
            surface_gamma: 1.4,
            seasonal_lambda_floor: false,
            min_site_obs: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteEffect {
    pub site_id: String,
    pub point: Point,
    pub effect: f64,
    /// Sampling variance of the estimated effect.
    pub variance: f64,
    pub n_obs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub site_id: String,
    pub month: YearMonth,
    pub y: f64,
    pub fitted: f64,
}

impl ResidualRow {
    pub fn residual(&self) -> f64 {
        self.y - self.fitted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Fit {
    pub transform: Transform,
    pub tv_names: Vec<String>,
    pub site_effects: Vec<SiteEffect>,
    /// Site effects plus time-varying smooths; `None` without covariates.
    pub regression: Option<AdditiveFit>,
    /// One entry per month from the first to the last observed month.
    pub surfaces: BTreeMap<YearMonth, SurfaceFit>,
    pub backfit_iterations: usize,
    pub last_change: f64,
    pub excluded_sites: Vec<String>,
    pub residuals: Vec<ResidualRow>,
}

impl Stage1Fit {
    pub fn first_month(&self) -> YearMonth {
        *self.surfaces.keys().next().expect("stage one has at least one month")
    }

    pub fn last_month(&self) -> YearMonth {
        *self.surfaces.keys().next_back().expect("stage one has at least one month")
    }

    pub fn site_effect(&self, site_id: &str) -> Option<&SiteEffect> {
        self.site_effects.iter().find(|s| s.site_id == site_id)
    }

    pub fn is_degenerate(&self, month: YearMonth) -> bool {
        self.surfaces.get(&month).map(|s| s.degenerate).unwrap_or(true)
    }

    /// Residual variance for a month; degenerate months borrow the mean over
    /// non-degenerate months of the same season (or of all months).
    pub fn sigma2_t(&self, month: YearMonth) -> f64 {
        if let Some(s) = self.surfaces.get(&month) {
            if !s.degenerate {
                return s.sigma2;
            }
        }
        let healthy = |season: Option<Season>| -> Vec<f64> {
            self.surfaces
                .iter()
                .filter(|(m, s)| !s.degenerate && season.map_or(true, |se| m.season() == se))
                .map(|(_, s)| s.sigma2)
                .collect()
        };
        let mut v = healthy(Some(month.season()));
        if v.is_empty() {
            v = healthy(None);
        }
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn check_month(&self, month: YearMonth) -> Result<()> {
        if month < self.first_month() || month > self.last_month() {
            return Err(Error::MonthOutOfRange(month.to_string()));
        }
        Ok(())
    }
}

/// Looks up row-level time-varying covariates, reporting every gap at once.
pub(crate) fn varying_columns(
    covariates: &CovariateFrame,
    names: &[String],
    rows: &[(&str, YearMonth)],
) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    for name in names {
        let mut values = Vec::with_capacity(rows.len());
        let mut missing = Vec::new();
        for (site, ym) in rows {
            match covariates.varying(name, site, *ym) {
                Ok(v) => values.push(v),
                Err(_) => missing.push(format!("{site}@{ym}")),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingCovariate {
                name: name.clone(),
                ids: missing,
            });
        }
        out.push((name.clone(), values));
    }
    Ok(out)
}

/// Per-season smoothing parameter of a pooled surface fit to `resid`.
fn seasonal_floors(
    points: &[Point],
    months: &[YearMonth],
    resid: &[f64],
    knots: usize,
) -> BTreeMap<Season, f64> {
    let mut out = BTreeMap::new();
    for season in Season::ALL {
        let rows: Vec<usize> = (0..points.len()).filter(|&i| months[i].season() == season).collect();
        let pts: Vec<Point> = rows.iter().map(|&i| points[i]).collect();
        let distinct = distinct_points(&pts).len();
        if distinct <= BasisKind::Tps2d.null_dim() {
            continue;
        }
        let y: Vec<f64> = rows.iter().map(|&i| resid[i]).collect();
        let fit = tps_basis_k(&pts, knots.min(distinct))
            .and_then(|b| AdditiveProblem::new(vec![TermSpec::new(SURFACE_TERM, b)], vec![], None))
            .and_then(|p| p.fit(&y));
        match fit {
            Ok(f) if f.terms[0].lambda > 0.0 => {
                out.insert(season, f.terms[0].lambda);
            }
            Ok(_) => {}
            Err(e) => log::warn!("seasonal pre-fit for {} failed: {e}", season.name()),
        }
    }
    out
}

/// Backfitted first stage.
pub fn fit_stage1(
    panel: &Panel,
    covariates: &CovariateFrame,
    tv_names: &[String],
    options: &Stage1Options,
) -> Result<Stage1Fit> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for o in &panel.observations {
        *counts.entry(o.site_id.as_str()).or_default() += 1;
    }
    let excluded_sites: Vec<String> = counts
        .iter()
        .filter(|(_, &c)| c < options.min_site_obs)
        .map(|(s, _)| s.to_string())
        .collect();
    if !excluded_sites.is_empty() {
        log::warn!(
            "{} sites have fewer than {} observations and are left out",
            excluded_sites.len(),
            options.min_site_obs
        );
    }
    let obs: Vec<&MonthlyObservation> = panel
        .observations
        .iter()
        .filter(|o| counts[o.site_id.as_str()] >= options.min_site_obs)
        .collect();
    if obs.is_empty() {
        return Err(Error::NoData("no site has enough observations".into()));
    }
    for o in &obs {
        if !(o.mean_value > 0.0) {
            return Err(Error::NonPositiveValue {
                site_id: o.site_id.clone(),
                date: o.year_month().to_string(),
                value: o.mean_value,
            });
        }
    }

    let site_ids: Vec<String> = obs
        .iter()
        .map(|o| o.site_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let site_index: BTreeMap<&str, usize> =
        site_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let first = obs.iter().map(|o| o.year_month()).min().unwrap();
    let last = obs.iter().map(|o| o.year_month()).max().unwrap();
    let months: Vec<YearMonth> = (first.ordinal()..=last.ordinal())
        .map(YearMonth::from_ordinal)
        .collect();

    let y: Vec<f64> = obs.iter().map(|o| options.transform.forward(o.mean_value)).collect();
    let sites: Vec<usize> = obs.iter().map(|o| site_index[o.site_id.as_str()]).collect();
    let points: Vec<Point> = obs.iter().map(|o| panel.locations[&o.site_id]).collect();
    let row_months: Vec<YearMonth> = obs.iter().map(|o| o.year_month()).collect();
    let groups: Vec<usize> = row_months
        .iter()
        .map(|m| (m.ordinal() - first.ordinal()) as usize)
        .collect();
    let keys: Vec<(&str, YearMonth)> = obs.iter().map(|o| (o.site_id.as_str(), o.year_month())).collect();
    let smooths = varying_columns(covariates, tv_names, &keys)?;

    let policies: Vec<LambdaPolicy> = if options.seasonal_lambda_floor {
        let mut sums = vec![0.0; site_ids.len()];
        let mut n = vec![0.0; site_ids.len()];
        for (i, &s) in sites.iter().enumerate() {
            sums[s] += y[i];
            n[s] += 1.0;
        }
        let resid: Vec<f64> = (0..y.len()).map(|i| y[i] - sums[sites[i]] / n[sites[i]]).collect();
        let floors = seasonal_floors(&points, &row_months, &resid, options.surface_knots);
        months
            .iter()
            .map(|m| match floors.get(&m.season()) {
                Some(&l) => LambdaPolicy::LowerBounded(l),
                None => LambdaPolicy::Free,
            })
            .collect()
    } else {
        vec![LambdaPolicy::Free; months.len()]
    };

    let result = backfit(&BackfitSpec {
        y: &y,
        sites: &sites,
        n_sites: site_ids.len(),
        points: &points,
        groups: &groups,
        n_groups: months.len(),
        smooths: &smooths,
        smooth_knots: options.smooth_knots,
        surface_knots: options.surface_knots,
        surface_policy: &policies,
        surface_gamma: options.surface_gamma,
        tol: options.tol,
        max_iter: options.max_iter,
    })?;

    let site_effects = site_ids
        .iter()
        .enumerate()
        .map(|(k, id)| SiteEffect {
            site_id: id.clone(),
            point: panel.locations[id],
            effect: result.site_effects[k],
            variance: result.site_variances[k],
            n_obs: counts[id.as_str()],
        })
        .collect();
    for (m, s) in months.iter().zip(&result.surfaces) {
        if s.degenerate && s.n_obs > 0 {
            log::warn!("month {m} has {} observations; surface set to zero", s.n_obs);
        }
    }
    let residuals = (0..y.len())
        .map(|i| ResidualRow {
            site_id: obs[i].site_id.clone(),
            month: row_months[i],
            y: y[i],
            fitted: result.regression_fitted[i] + result.surface_fitted[i],
        })
        .collect();

    Ok(Stage1Fit {
        transform: options.transform,
        tv_names: tv_names.to_vec(),
        site_effects,
        regression: result.regression,
        surfaces: months.into_iter().zip(result.surfaces).collect(),
        backfit_iterations: result.iterations,
        last_change: result.last_change,
        excluded_sites,
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Options {
    pub spatial_knots: usize,
    pub smooth_knots: usize,
    pub heteroscedastic: bool,
    /// Fixed heteroscedastic coefficient; estimated when `None`.
    pub kappa: Option<f64>,
    /// GCV trace inflation; values above 1 favour smoother surfaces.
    pub gamma: f64,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Stage2Options {
            spatial_knots: 200,
            smooth_knots: 10,
            heteroscedastic: false,
            kappa: None,
            gamma: 1.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Fit {
    pub fit: AdditiveFit,
    pub ti_names: Vec<String>,
    /// Fine-scale variance of a new site's effect about the regression.
    pub sigma2_mu: f64,
    pub kappa: Option<f64>,
    pub site_ids: Vec<String>,
}

const KAPPA_GRID: std::ops::RangeInclusive<i32> = -8..=12;

struct Stage2Problem {
    y: Vec<f64>,
    variances: Vec<f64>,
    terms: Vec<TermSpec>,
    gamma: f64,
}

impl Stage2Problem {
    fn fit(&self, kappa: f64) -> Result<(AdditiveFit, f64)> {
        let w: Vec<f64> = self.variances.iter().map(|v| 1.0 / (1.0 + kappa * v)).collect();
        let mean_w = w.iter().sum::<f64>() / w.len() as f64;
        let problem = AdditiveProblem::new(self.terms.clone(), vec![], Some(&w))?.with_gamma(self.gamma)?;
        let fit = problem.fit(&self.y)?;
        // Normalized weights are w / mean(w), so a site with zero sampling
        // variance has residual variance sigma2 * mean(w).
        let s2 = fit.sigma2 * mean_w;
        Ok((fit, s2))
    }
}

/// Second stage: site effects on a spatial surface plus smooths of
/// time-invariant covariates.
pub fn fit_stage2(
    stage1: &Stage1Fit,
    covariates: &CovariateFrame,
    ti_names: &[String],
    options: &Stage2Options,
) -> Result<Stage2Fit> {
    fit_site_regression(&stage1.site_effects, covariates, ti_names, options)
}

/// Stage two on any set of estimated site effects.
pub fn fit_site_regression(
    site_effects: &[SiteEffect],
    covariates: &CovariateFrame,
    ti_names: &[String],
    options: &Stage2Options,
) -> Result<Stage2Fit> {
    let null = BasisKind::Tps2d.null_dim();
    let n = site_effects.len();
    if n < null + 2 {
        return Err(Error::invalid(format!(
            "second stage needs at least {} sites, got {n}",
            null + 2
        )));
    }
    let ids: Vec<&str> = site_effects.iter().map(|s| s.site_id.as_str()).collect();
    covariates.check_invariant(ti_names, &ids)?;
    let points: Vec<Point> = site_effects.iter().map(|s| s.point).collect();
    let distinct = distinct_points(&points).len();
    let mut terms = vec![TermSpec::new(
        SPATIAL_TERM,
        tps_basis_k(&points, options.spatial_knots.min(distinct))?,
    )];
    for name in ti_names {
        let z: Vec<f64> = ids.iter().map(|id| covariates.invariant(name, id)).collect::<Result<_>>()?;
        let mut d = z.clone();
        d.sort_by(f64::total_cmp);
        d.dedup();
        let basis = uni_basis(&z, options.smooth_knots.min(d.len()))
            .map_err(|e| Error::invalid(format!("smooth of '{name}': {e}")))?;
        terms.push(TermSpec::new(name.clone(), basis));
    }
    let problem = Stage2Problem {
        y: site_effects.iter().map(|s| s.effect).collect(),
        variances: site_effects.iter().map(|s| s.variance).collect(),
        terms,
        gamma: options.gamma,
    };

    let (fit, sigma2_mu, kappa) = if !options.heteroscedastic {
        let (f, s2) = problem.fit(0.0)?;
        (f, s2, None)
    } else if let Some(k) = options.kappa {
        if !(k >= 0.0) {
            return Err(Error::invalid("kappa must be nonnegative"));
        }
        let (f, s2) = problem.fit(k)?;
        (f, s2, Some(k))
    } else {
        // Profile GCV over kappa on a log grid relative to the typical
        // sampling variance, plus kappa = 0.
        let vbar = problem.variances.iter().sum::<f64>() / n as f64;
        let mut grid = vec![0.0];
        if vbar > 0.0 && vbar.is_finite() {
            grid.extend(KAPPA_GRID.map(|e| 10f64.powf(e as f64 / 4.0) / vbar));
        }
        let mut best: Option<(AdditiveFit, f64, f64)> = None;
        for k in grid {
            let (f, s2) = problem.fit(k)?;
            if best.as_ref().map_or(true, |(b, _, _)| f.gcv < b.gcv) {
                best = Some((f, s2, k));
            }
        }
        let (f, s2, k) = best.expect("grid is nonempty");
        (f, s2, Some(k))
    };

    Ok(Stage2Fit {
        fit,
        ti_names: ti_names.to_vec(),
        sigma2_mu: sigma2_mu.max(0.0),
        kappa,
        site_ids: ids.iter().map(|s| s.to_string()).collect(),
    })
}

/// A fitted two-stage model with its coordinate system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PMModel {
    pub stage1: Stage1Fit,
    pub stage2: Stage2Fit,
    pub projection: Projection,
    pub format_version: u32,
}

impl PMModel {
    pub fn new(stage1: Stage1Fit, stage2: Stage2Fit, projection: Projection) -> Self {
        PMModel {
            stage1,
            stage2,
            projection,
            format_version: MODEL_FORMAT_VERSION,
        }
    }

    pub fn transform(&self) -> Transform {
        self.stage1.transform
    }

    pub fn tv_names(&self) -> &[String] {
        &self.stage1.tv_names
    }

    pub fn ti_names(&self) -> &[String] {
        &self.stage2.ti_names
    }
}

/// Options for both stages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub stage1: Stage1Options,
    pub stage2: Stage2Options,
}

/// Fits both stages.
pub fn fit_model(
    panel: &Panel,
    covariates: &CovariateFrame,
    tv_names: &[String],
    ti_names: &[String],
    projection: Projection,
    options: &FitOptions,
) -> Result<PMModel> {
    let s1 = fit_stage1(panel, covariates, tv_names, &options.stage1)?;
    let s2 = fit_stage2(&s1, covariates, ti_names, &options.stage2)?;
    Ok(PMModel::new(s1, s2, projection))
}
