use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{PMModel, Stage2Fit, SPATIAL_TERM};
use crate::data::CovariateFrame;
use crate::error::{Error, Result};
use crate::gam::TermData;
use crate::types::{Point, Transform, YearMonth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Flag {
    Extrapolation,
    DegenerateMonth,
    NegativeCoarse,
    RatioExceedsOne,
}

impl Flag {
    pub fn name(self) -> &'static str {
        match self {
            Flag::Extrapolation => "extrapolation",
            Flag::DegenerateMonth => "degenerate_month",
            Flag::NegativeCoarse => "negative_coarse",
            Flag::RatioExceedsOne => "ratio_exceeds_one",
        }
    }
}

/// A prediction location: an id used for covariate lookup and its projected point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: String,
    pub point: Point,
}

impl Location {
    pub fn new(id: impl Into<String>, point: Point) -> Self {
        Location { id: id.into(), point }
    }
}

/// Additive pieces of the predictive variance on the transformed scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VarianceParts {
    /// Joint variance of the stage-two regression at the location.
    pub invariant: f64,
    pub sigma2_mu: f64,
    /// Sum of the variances of the time-varying smooths and the surface.
    pub time_varying: f64,
    pub sigma2_t: f64,
    /// Variance of an offset taken from another model.
    pub offset: f64,
}

impl VarianceParts {
    pub fn total(&self) -> f64 {
        self.invariant + self.sigma2_mu + self.time_varying + self.sigma2_t + self.offset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub location: Location,
    /// `None` for long-term averages.
    pub month: Option<YearMonth>,
    pub transform: Transform,
    pub y_hat: f64,
    pub var: f64,
    pub conc_median: f64,
    pub conc_unbiased: f64,
    pub se_conc: f64,
    pub flags: BTreeSet<Flag>,
    pub parts: VarianceParts,
}

impl Prediction {
    pub fn new(
        location: Location,
        month: Option<YearMonth>,
        transform: Transform,
        y_hat: f64,
        parts: VarianceParts,
        flags: BTreeSet<Flag>,
    ) -> Self {
        let var = parts.total();
        Prediction {
            location,
            month,
            transform,
            y_hat,
            var,
            conc_median: transform.inverse(y_hat),
            conc_unbiased: transform.inverse_unbiased(y_hat, var),
            se_conc: match transform {
                Transform::Log => delta_se(y_hat, var),
                Transform::Sqrt => 2.0 * y_hat.abs() * var.sqrt(),
            },
            flags,
            parts,
        }
    }

    pub fn flag_names(&self) -> String {
        self.flags.iter().map(|f| f.name()).collect::<Vec<_>>().join(";")
    }

    /// Two-sided interval on the transformed scale.
    pub fn interval(&self, z: f64) -> (f64, f64) {
        let h = z * self.var.sqrt();
        (self.y_hat - h, self.y_hat + h)
    }
}

/// Delta-method standard error of `exp(Y)` for `Y` with mean `y_hat` and variance `var`.
pub fn delta_se(y_hat: f64, var: f64) -> f64 {
    y_hat.exp() * var.max(0.0).sqrt()
}

/// Mean and variance of the stage-two regression at one location.
pub(crate) fn invariant_part(stage2: &Stage2Fit, point: Point, ti: &[f64]) -> Result<(f64, f64)> {
    let spatial = TermData::Points(vec![point]);
    let scalars: Vec<TermData> = ti.iter().map(|&z| TermData::Scalars(vec![z])).collect();
    let mut parts: Vec<(&str, &TermData)> = vec![(SPATIAL_TERM, &spatial)];
    for (name, d) in stage2.ti_names.iter().zip(&scalars) {
        parts.push((name.as_str(), d));
    }
    let (m, se) = stage2.fit.predict_joint(&parts, true)?;
    Ok((m[0], se[0] * se[0]))
}

pub(crate) fn invariant_values(names: &[String], cov: &CovariateFrame, id: &str) -> Result<Vec<f64>> {
    names.iter().map(|n| cov.invariant(n, id)).collect()
}

pub(crate) fn varying_values(
    names: &[String],
    cov: &CovariateFrame,
    id: &str,
    month: YearMonth,
) -> Result<Vec<f64>> {
    names.iter().map(|n| cov.varying(n, id, month)).collect()
}

impl PMModel {
    pub fn in_domain(&self, point: Point) -> bool {
        let (lon, lat) = self.projection.inverse(point);
        self.projection.domain.contains(lon, lat)
    }

    /// Monthly prediction with the full variance decomposition.
    pub fn predict(&self, location: &Location, month: YearMonth, cov: &CovariateFrame) -> Result<Prediction> {
        self.stage1.check_month(month)?;
        let ti = invariant_values(&self.stage2.ti_names, cov, &location.id)?;
        let tv = varying_values(&self.stage1.tv_names, cov, &location.id, month)?;
        self.predict_values(location, month, &tv, &ti)
    }

    /// As `predict` with the covariate values supplied directly, in the
    /// order of the model's covariate names.
    pub fn predict_values(
        &self,
        location: &Location,
        month: YearMonth,
        tv: &[f64],
        ti: &[f64],
    ) -> Result<Prediction> {
        self.stage1.check_month(month)?;
        if tv.len() != self.stage1.tv_names.len() || ti.len() != self.stage2.ti_names.len() {
            return Err(Error::Dimension("covariate values do not match the model schema".into()));
        }
        let (mean_inv, var_inv) = invariant_part(&self.stage2, location.point, ti)?;
        let mut y_hat = mean_inv;
        let mut var_tv = 0.0;
        if let Some(reg) = &self.stage1.regression {
            for (name, &x) in self.stage1.tv_names.iter().zip(tv) {
                let (m, se) = reg.term_predict(name, &TermData::Scalars(vec![x]))?;
                y_hat += m[0];
                var_tv += se[0] * se[0];
            }
        }
        let surface = &self.stage1.surfaces[&month];
        let (gm, gv) = surface.predict(&[location.point])?;
        y_hat += gm[0];
        var_tv += gv[0];

        let mut flags = BTreeSet::new();
        if !self.in_domain(location.point) {
            flags.insert(Flag::Extrapolation);
        }
        if surface.degenerate {
            flags.insert(Flag::DegenerateMonth);
        }
        let parts = VarianceParts {
            invariant: var_inv,
            sigma2_mu: self.stage2.sigma2_mu,
            time_varying: var_tv,
            sigma2_t: self.stage1.sigma2_t(month),
            offset: 0.0,
        };
        Ok(Prediction::new(
            location.clone(),
            Some(month),
            self.transform(),
            y_hat,
            parts,
            flags,
        ))
    }

    /// Average over `months`: time-varying contributions are independent
    /// across months and shrink with their count.
    pub fn predict_longterm(
        &self,
        location: &Location,
        months: &[YearMonth],
        cov: &CovariateFrame,
    ) -> Result<Prediction> {
        let monthly = months
            .iter()
            .map(|&m| self.predict(location, m, cov))
            .collect::<Result<Vec<_>>>()?;
        longterm_from_monthly(location, self.transform(), &monthly)
    }
}

/// Combines monthly predictions at one location into a long-term average.
pub fn longterm_from_monthly(
    location: &Location,
    transform: Transform,
    monthly: &[Prediction],
) -> Result<Prediction> {
    let first = monthly
        .first()
        .ok_or_else(|| Error::invalid("long-term prediction needs at least one month"))?;
    if monthly.len() == 1 {
        return Ok(first.clone());
    }
    let m = monthly.len() as f64;
    let y_hat = monthly.iter().map(|p| p.y_hat).sum::<f64>() / m;
    let tv: f64 = monthly.iter().map(|p| p.parts.time_varying).sum();
    let s2t: f64 = monthly.iter().map(|p| p.parts.sigma2_t).sum();
    let parts = VarianceParts {
        invariant: first.parts.invariant,
        sigma2_mu: first.parts.sigma2_mu,
        time_varying: tv / (m * m),
        sigma2_t: s2t / (m * m),
        offset: 0.0,
    };
    let flags = monthly.iter().flat_map(|p| p.flags.iter().copied()).collect();
    Ok(Prediction::new(location.clone(), None, transform, y_hat, parts, flags))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coarse {
    pub value: f64,
    pub negative: bool,
}

/// Coarse fraction as the difference of two concentration predictions.
pub fn coarse_pm(pm10: &Prediction, pm25: &Prediction) -> Result<Coarse> {
    if pm10.location != pm25.location || pm10.month != pm25.month {
        return Err(Error::invalid(
            "coarse fraction needs predictions at the same location and month",
        ));
    }
    let value = pm10.conc_median - pm25.conc_median;
    Ok(Coarse {
        value,
        negative: value < 0.0,
    })
}

pub fn write_predictions<W: Write>(writer: W, preds: &[Prediction]) -> Result<()> {
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
    ])?;
    for p in preds {
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
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
