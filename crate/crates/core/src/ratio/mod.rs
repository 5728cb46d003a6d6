//! Log-ratio model for a sparsely monitored co-pollutant.
//!
//! The response is `y_it = log(PM25_it / PM10hat_it)`, where `PM10hat` is
//! the dense model's median prediction. Stage one backfits site effects, a
//! smooth time trend, smooths of `log PM10hat`, of log extinction and of any
//! other covariates, against one spatial surface per season. Stage two is
//! the usual site-effect regression. Predictions scale `PM10hat` by
//! `exp(y_hat)`.

#[cfg(test)]
mod tests;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{CovariateFrame, MonthlyObservation};
use crate::error::{Error, Result};
use crate::gam::{AdditiveFit, LambdaPolicy, TermData};
use crate::stm::{
    backfit, fit_site_regression, invariant_part, invariant_values, varying_columns, varying_values, BackfitSpec,
    Flag, Location, ModelKind, ModelPayload, PMModel, Panel, Prediction, ResidualRow, SiteEffect, Stage2Fit,
    Stage2Options, SurfaceFit, VarianceParts, MODEL_FORMAT_VERSION,
};
use crate::types::{Point, Season, Transform, YearMonth};

pub const TREND_TERM: &str = "trend";
pub const PM10_TERM: &str = "log_pm10";
pub const VIS_TERM: &str = "log_bext";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub surface_knots: usize,
    pub smooth_knots: usize,
    pub surface_gamma: f64,
    /// Year at which the month index `t = 12 (year - origin) + month` starts.
    pub trend_origin: i32,
    /// Covariate holding monthly extinction; `None` leaves the term out.
    pub vis_covariate: Option<String>,
    /// Inclusive prediction range in years.
    pub first_year: i32,
    pub last_year: i32,
    pub stage2: Stage2Options,
}

impl Default for RatioOptions {
    fn default() -> Self {
        RatioOptions {
            tol: 1e-4,
            max_iter: 50,
            surface_knots: 100,
            smooth_knots: 10,
            surface_gamma: 1.4,
            trend_origin: 1988,
            vis_covariate: Some(crate::visibility::BEXT_COVARIATE.to_string()),
            first_year: 1988,
            last_year: 2002,
            stage2: Stage2Options::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioModel {
    pub site_effects: Vec<SiteEffect>,
    /// Site effects plus trend and covariate smooths.
    pub regression: AdditiveFit,
    /// Extra time-varying covariates beyond the trend, PM10 and extinction.
    pub tv_names: Vec<String>,
    pub seasonal: BTreeMap<Season, SurfaceFit>,
    pub stage2: Stage2Fit,
    pub options: RatioOptions,
    pub backfit_iterations: usize,
    pub residuals: Vec<ResidualRow>,
    pub format_version: u32,
}

fn month_index(origin: i32, ym: YearMonth) -> f64 {
    (12 * (ym.year - origin) + ym.month as i32) as f64
}

impl RatioModel {
    /// Residual variance of a season; a season without a surface borrows the
    /// mean over the others.
    pub fn sigma2_season(&self, season: Season) -> f64 {
        let s = &self.seasonal[&season];
        if !s.degenerate {
            return s.sigma2;
        }
        let v: Vec<f64> = self.seasonal.values().filter(|s| !s.degenerate).map(|s| s.sigma2).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn ti_names(&self) -> &[String] {
        &self.stage2.ti_names
    }

    fn check_month(&self, month: YearMonth) -> Result<()> {
        if month.year < self.options.first_year || month.year > self.options.last_year {
            return Err(Error::MonthOutOfRange(format!(
                "{month} (ratio predictions cover {}-{})",
                self.options.first_year, self.options.last_year
            )));
        }
        Ok(())
    }

    /// Row-level smooth inputs in model order: trend, log PM10, optional log
    /// extinction, then the extra covariates.
    fn smooth_inputs(&self, month: YearMonth, pm10: f64, bext: Option<f64>, extra: &[f64]) -> Vec<(&str, f64)> {
        let mut v = vec![
            (TREND_TERM, month_index(self.options.trend_origin, month)),
            (PM10_TERM, pm10.ln()),
        ];
        if let Some(b) = bext {
            v.push((VIS_TERM, b.ln()));
        }
        for (n, x) in self.tv_names.iter().zip(extra) {
            v.push((n.as_str(), *x));
        }
        v
    }

    /// Predicted log ratio and its variance pieces at one site-month, given
    /// the PM10 median prediction there.
    pub fn predict_log_ratio(
        &self,
        location: &Location,
        month: YearMonth,
        pm10_median: f64,
        cov: &CovariateFrame,
    ) -> Result<(f64, VarianceParts, BTreeSet<Flag>)> {
        self.check_month(month)?;
        if !(pm10_median > 0.0) {
            return Err(Error::NonPositiveValue {
                site_id: location.id.clone(),
                date: month.to_string(),
                value: pm10_median,
            });
        }
        let ti = invariant_values(&self.stage2.ti_names, cov, &location.id)?;
        let bext = match &self.options.vis_covariate {
            Some(name) => Some(cov.varying(name, &location.id, month)?),
            None => None,
        };
        let extra = varying_values(&self.tv_names, cov, &location.id, month)?;
        let (mut y_hat, var_inv) = invariant_part(&self.stage2, location.point, &ti)?;
        let mut var_tv = 0.0;
        let mut flags = BTreeSet::new();
        for (name, x) in self.smooth_inputs(month, pm10_median, bext, &extra) {
            if !x.is_finite() {
                return Err(Error::invalid(format!("covariate '{name}' is not finite at {} {month}", location.id)));
            }
            let data = TermData::Scalars(vec![x]);
            if name == TREND_TERM && self.regression.term(name)?.outside_support(&data)[0] {
                flags.insert(Flag::Extrapolation);
            }
            let (m, se) = self.regression.term_predict(name, &data)?;
            y_hat += m[0];
            var_tv += se[0] * se[0];
        }
        let surface = &self.seasonal[&month.season()];
        let (gm, gv) = surface.predict(&[location.point])?;
        y_hat += gm[0];
        var_tv += gv[0];
        if surface.degenerate {
            flags.insert(Flag::DegenerateMonth);
        }
        let parts = VarianceParts {
            invariant: var_inv,
            sigma2_mu: self.stage2.sigma2_mu,
            time_varying: var_tv,
            sigma2_t: self.sigma2_season(month.season()),
            offset: 0.0,
        };
        Ok((y_hat, parts, flags))
    }
}

/// Variance of `log PM10hat` implied by a dense-model prediction.
fn log_scale_variance(p: &Prediction) -> f64 {
    match p.transform {
        Transform::Log => p.var,
        // log c = 2 log s, so Var(log c) ~ 4 Var(s) / s^2.
        Transform::Sqrt => 4.0 * p.var / (p.y_hat * p.y_hat),
    }
}

/// Fits the ratio model to observed PM2.5 at sites with locations in
/// `pm25.locations`, using `pm10` predictions at the same site-months.
pub fn fit_ratio(
    pm25: &Panel,
    pm10: &PMModel,
    covariates: &CovariateFrame,
    tv_names: &[String],
    ti_names: &[String],
    options: &RatioOptions,
) -> Result<RatioModel> {
    let obs: Vec<&MonthlyObservation> = pm25.observations.iter().collect();
    if obs.is_empty() {
        return Err(Error::NoData("no PM2.5 observations".into()));
    }
    let mut pm10_hat = Vec::with_capacity(obs.len());
    for o in &obs {
        if !(o.mean_value > 0.0) {
            return Err(Error::NonPositiveValue {
                site_id: o.site_id.clone(),
                date: o.year_month().to_string(),
                value: o.mean_value,
            });
        }
        let loc = Location::new(o.site_id.clone(), pm25.locations[&o.site_id]);
        let p = pm10.predict(&loc, o.year_month(), covariates)?;
        if !(p.conc_median > 0.0) || !p.conc_median.is_finite() {
            return Err(Error::NonPositiveValue {
                site_id: o.site_id.clone(),
                date: o.year_month().to_string(),
                value: p.conc_median,
            });
        }
        pm10_hat.push(p.conc_median);
    }

    let site_ids: Vec<String> = obs.iter().map(|o| o.site_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let site_index: BTreeMap<&str, usize> = site_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let months: Vec<YearMonth> = obs.iter().map(|o| o.year_month()).collect();
    let y: Vec<f64> = obs.iter().zip(&pm10_hat).map(|(o, p)| (o.mean_value / p).ln()).collect();
    let sites: Vec<usize> = obs.iter().map(|o| site_index[o.site_id.as_str()]).collect();
    let points: Vec<Point> = obs.iter().map(|o| pm25.locations[&o.site_id]).collect();
    let groups: Vec<usize> = months.iter().map(|m| m.season().index()).collect();

    let keys: Vec<(&str, YearMonth)> = obs.iter().map(|o| (o.site_id.as_str(), o.year_month())).collect();
    let mut smooths = vec![
        (
            TREND_TERM.to_string(),
            months.iter().map(|m| month_index(options.trend_origin, *m)).collect::<Vec<_>>(),
        ),
        (PM10_TERM.to_string(), pm10_hat.iter().map(|p| p.ln()).collect()),
    ];
    if let Some(name) = &options.vis_covariate {
        let (_, b) = varying_columns(covariates, std::slice::from_ref(name), &keys)?.remove(0);
        if let Some(i) = b.iter().position(|v| !(*v > 0.0)) {
            return Err(Error::invalid(format!(
                "extinction '{name}' must be positive; found {} at {} {}",
                b[i], keys[i].0, keys[i].1
            )));
        }
        smooths.push((VIS_TERM.to_string(), b.iter().map(|v| v.ln()).collect()));
    }
    smooths.extend(varying_columns(covariates, tv_names, &keys)?);

    let result = backfit(&BackfitSpec {
        y: &y,
        sites: &sites,
        n_sites: site_ids.len(),
        points: &points,
        groups: &groups,
        n_groups: Season::ALL.len(),
        smooths: &smooths,
        smooth_knots: options.smooth_knots,
        surface_knots: options.surface_knots,
        surface_policy: &[LambdaPolicy::Free; 4],
        surface_gamma: options.surface_gamma,
        tol: options.tol,
        max_iter: options.max_iter,
    })?;
    let regression = result.regression.ok_or_else(|| Error::invalid("ratio regression has no smooths"))?;

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for o in &obs {
        *counts.entry(o.site_id.as_str()).or_default() += 1;
    }
    let site_effects: Vec<SiteEffect> = site_ids
        .iter()
        .enumerate()
        .map(|(k, id)| SiteEffect {
            site_id: id.clone(),
            point: pm25.locations[id],
            effect: result.site_effects[k],
            variance: result.site_variances[k],
            n_obs: counts[id.as_str()],
        })
        .collect();
    let seasonal: BTreeMap<Season, SurfaceFit> = Season::ALL.into_iter().zip(result.surfaces).collect();
    for (s, f) in &seasonal {
        if f.degenerate {
            log::warn!("{} has {} ratio observations; its surface is zero", s.name(), f.n_obs);
        }
    }
    let residuals = (0..y.len())
        .map(|i| ResidualRow {
            site_id: obs[i].site_id.clone(),
            month: months[i],
            y: y[i],
            fitted: result.regression_fitted[i] + result.surface_fitted[i],
        })
        .collect();
    let stage2 = fit_site_regression(&site_effects, covariates, ti_names, &options.stage2)?;

    Ok(RatioModel {
        site_effects,
        regression,
        tv_names: tv_names.to_vec(),
        seasonal,
        stage2,
        options: options.clone(),
        backfit_iterations: result.iterations,
        residuals,
        format_version: MODEL_FORMAT_VERSION,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioPrediction {
    /// On the log PM2.5 scale: `y_hat` is the log ratio plus `log PM10hat`,
    /// and the variance adds the PM10 model's log-scale variance.
    pub prediction: Prediction,
    /// Predicted log ratio.
    pub log_ratio: f64,
    pub pm10_pred: f64,
}

impl RatioPrediction {
    /// `exp(log_ratio)`.
    pub fn ratio_hat(&self) -> f64 {
        self.log_ratio.exp()
    }
}

/// PM2.5 at a location and month as `exp(y_hat) * PM10hat`, treating the two
/// models' errors as independent.
pub fn predict_pm25(
    ratio: &RatioModel,
    pm10: &PMModel,
    location: &Location,
    month: YearMonth,
    cov: &CovariateFrame,
) -> Result<RatioPrediction> {
    ratio.check_month(month)?;
    let p10 = pm10.predict(location, month, cov)?;
    combine(ratio, &p10, location, month, cov)
}

/// As `predict_pm25` with the PM10 prediction already in hand.
pub fn combine(
    ratio: &RatioModel,
    p10: &Prediction,
    location: &Location,
    month: YearMonth,
    cov: &CovariateFrame,
) -> Result<RatioPrediction> {
    let (lr, mut parts, mut flags) = ratio.predict_log_ratio(location, month, p10.conc_median, cov)?;
    if lr > 0.0 {
        flags.insert(Flag::RatioExceedsOne);
    }
    if p10.flags.contains(&Flag::Extrapolation) {
        flags.insert(Flag::Extrapolation);
    }
    parts.offset = log_scale_variance(p10);
    let y_hat = lr + p10.conc_median.ln();
    Ok(RatioPrediction {
        prediction: Prediction::new(location.clone(), Some(month), Transform::Log, y_hat, parts, flags),
        log_ratio: lr,
        pm10_pred: p10.conc_median,
    })
}

pub fn write_ratio_predictions<W: Write>(writer: W, preds: &[RatioPrediction]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "location_id",
        "x",
        "y",
        "year",
        "month",
        "y_hat",
        "var",
        "conc_median",
        "conc_unbiased",
        "se_conc",
        "flags",
        "ratio_hat",
        "pm10_pred",
    ])?;
    for r in preds {
        let p = &r.prediction;
        let (year, month) = match p.month {
            Some(m) => (m.year.to_string(), m.month.to_string()),
            None => (String::new(), String::new()),
        };
        wtr.write_record([
            p.location.id.clone(),
            p.location.point[0].to_string(),
            p.location.point[1].to_string(),
            year,
            month,
            p.y_hat.to_string(),
            p.var.to_string(),
            p.conc_median.to_string(),
            p.conc_unbiased.to_string(),
            p.se_conc.to_string(),
            p.flag_names(),
            r.ratio_hat().to_string(),
            r.pm10_pred.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

impl ModelPayload for RatioModel {
    const KIND: ModelKind = ModelKind::Ratio;

    fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": Self::KIND.name(),
            "format_version": MODEL_FORMAT_VERSION,
            "time_varying": self.tv_names,
            "time_invariant": self.stage2.ti_names,
            "visibility": self.options.vis_covariate,
            "years": [self.options.first_year, self.options.last_year],
            "trend_origin": self.options.trend_origin,
            "sites": self.site_effects.len(),
        })
    }
}

/// Cross-validation of the ratio model against a fixed dense-pollutant model.
pub struct RatioRecipe<'a> {
    pub pm10: &'a PMModel,
    pub covariates: &'a CovariateFrame,
    pub tv_names: Vec<String>,
    pub ti_names: Vec<String>,
    pub options: RatioOptions,
}

impl crate::eval::CvRecipe for RatioRecipe<'_> {
    type Model = RatioModel;

    fn fit(&self, train: &Panel) -> Result<RatioModel> {
        fit_ratio(train, self.pm10, self.covariates, &self.tv_names, &self.ti_names, &self.options)
    }

    fn predict(&self, model: &RatioModel, location: &Location, month: YearMonth) -> Result<Prediction> {
        Ok(predict_pm25(model, self.pm10, location, month, self.covariates)?.prediction)
    }

    fn transform(&self) -> Transform {
        Transform::Log
    }
}
