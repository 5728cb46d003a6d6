//! Airport visual range as a censored light-extinction proxy.
//!
//! Visual range brackets are converted to log extinction intervals with the
//! Koshmeider relation, corrected to a reference humidity with a seasonal
//! calibration curve, smoothed in space day by day, and averaged to months.

mod em;
mod io;


use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Point, Season, YearMonth};

pub use em::{
    MIN_CALIBRATION_OBS, MIN_DAILY_STATIONS,
    fit_rh_calibration, run_stochastic_em, sample_truncated_normal, smooth_all_days, smooth_daily, CalibrationCurve,
    DailySurface, EmConfig, EmOutcome, RH_GRID_STEP, RH_REFERENCE,
};
pub use io::{
    read_calibration, read_visibility, write_bext, write_calibration, write_intervals, write_visibility,
};

/// Name under which the monthly proxy enters covariate frames.
pub const BEXT_COVARIATE: &str = "bext";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibilityObs {
    pub station_id: String,
    pub day: NaiveDate,
    pub v_lo: f64,
    /// `f64::INFINITY` when the farthest marker was visible.
    pub v_hi: f64,
    pub rh: f64,
    pub precipitation: bool,
}

impl VisibilityObs {
    fn validate(&self) -> Result<()> {
        if !(self.v_lo > 0.0) || !(self.v_lo <= self.v_hi) {
            return Err(Error::invalid(format!(
                "visual range [{}, {}] at {} on {} is not an ordered positive interval",
                self.v_lo, self.v_hi, self.station_id, self.day
            )));
        }
        if !(0.0..=100.0).contains(&self.rh) {
            return Err(Error::invalid(format!(
                "relative humidity {} at {} on {} is outside [0, 100]",
                self.rh, self.station_id, self.day
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CensorKind {
    Interval,
    RightTruncated,
}

impl CensorKind {
    pub fn name(self) -> &'static str {
        match self {
            CensorKind::Interval => "interval",
            CensorKind::RightTruncated => "right_truncated",
        }
    }
}

/// Bounds on log extinction (log km^-1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtinctionInterval {
    pub station_id: String,
    pub day: NaiveDate,
    pub lb: f64,
    pub ub: f64,
    pub rh: f64,
    pub censor_kind: CensorKind,
}

impl ExtinctionInterval {
    pub fn season(&self) -> Season {
        Season::of_month(self.day.month() as u8)
    }

    pub fn width(&self) -> f64 {
        self.ub - self.lb
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KoshmeiderConfig {
    pub k: f64,
    /// Rayleigh scattering subtracted from both bounds (km^-1).
    pub rayleigh: f64,
    /// Extinction floor applied before the log (km^-1).
    pub floor: f64,
    /// Observations whose upper visual range falls below this are treated
    /// as fog or precipitation (km).
    pub min_visibility: f64,
    pub max_rh: f64,
}

impl Default for KoshmeiderConfig {
    fn default() -> Self {
        KoshmeiderConfig {
            k: 1.9,
            rayleigh: 0.10,
            floor: 1e-3,
            min_visibility: 0.8,
            max_rh: 99.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rejection {
    Precipitation,
    Fog,
    LowVisibility,
    /// Both bounds at the floor: the reading says nothing.
    Uninformative,
}

impl Rejection {
    pub fn name(self) -> &'static str {
        match self {
            Rejection::Precipitation => "precipitation",
            Rejection::Fog => "fog",
            Rejection::LowVisibility => "low_visibility",
            Rejection::Uninformative => "uninformative",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Conversion {
    Interval(ExtinctionInterval),
    Rejected(Rejection),
}

/// Koshmeider conversion `b = K / V - rayleigh`, floored and logged.
/// Errors only on malformed input; filtered readings come back as
/// `Conversion::Rejected`.
pub fn to_extinction_interval(obs: &VisibilityObs, config: &KoshmeiderConfig) -> Result<Conversion> {
    obs.validate()?;
    if obs.precipitation {
        return Ok(Conversion::Rejected(Rejection::Precipitation));
    }
    if obs.rh > config.max_rh {
        return Ok(Conversion::Rejected(Rejection::Fog));
    }
    if obs.v_hi < config.min_visibility {
        return Ok(Conversion::Rejected(Rejection::LowVisibility));
    }
    let extinction = |v: f64| (config.k / v - config.rayleigh).max(config.floor);
    let (b_lo, kind) = if obs.v_hi.is_infinite() {
        (config.floor, CensorKind::RightTruncated)
    } else {
        (extinction(obs.v_hi), CensorKind::Interval)
    };
    let b_hi = extinction(obs.v_lo);
    if b_hi <= config.floor {
        return Ok(Conversion::Rejected(Rejection::Uninformative));
    }
    Ok(Conversion::Interval(ExtinctionInterval {
        station_id: obs.station_id.clone(),
        day: obs.day,
        lb: b_lo.ln(),
        ub: b_hi.ln(),
        rh: obs.rh,
        censor_kind: kind,
    }))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConversionSummary {
    pub intervals: Vec<ExtinctionInterval>,
    pub rejected: BTreeMap<Rejection, usize>,
}

/// Converts a batch, tallying rejections.
pub fn convert_all(obs: &[VisibilityObs], config: &KoshmeiderConfig) -> Result<ConversionSummary> {
    let mut out = ConversionSummary::default();
    for o in obs {
        match to_extinction_interval(o, config)? {
            Conversion::Interval(iv) => out.intervals.push(iv),
            Conversion::Rejected(r) => *out.rejected.entry(r).or_default() += 1,
        }
    }
    for (r, n) in &out.rejected {
        log::info!("dropped {n} visibility readings: {}", r.name());
    }
    Ok(out)
}

/// Shifts both bounds by `c(rh) - c(60)`, preserving the width.
pub fn adjust_to_60(interval: &ExtinctionInterval, curve: &CalibrationCurve) -> Result<ExtinctionInterval> {
    let shift = curve.adjustment(interval.rh)?;
    Ok(ExtinctionInterval {
        lb: interval.lb - shift,
        ub: interval.ub - shift,
        ..interval.clone()
    })
}

/// Adjusts each interval with its season's curve.
pub fn adjust_all(
    intervals: &[ExtinctionInterval],
    curves: &BTreeMap<Season, CalibrationCurve>,
) -> Result<Vec<ExtinctionInterval>> {
    intervals
        .iter()
        .map(|iv| {
            let season = iv.season();
            let curve = curves
                .get(&season)
                .ok_or_else(|| Error::NoData(format!("no calibration curve for {}", season.name())))?;
            adjust_to_60(iv, curve)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonthlyBext {
    /// Mean over days of `exp(surface)` (km^-1).
    pub value: f64,
    pub n_days: usize,
    /// Fewer than `MIN_MONTH_DAYS` usable days.
    pub sparse: bool,
}

pub const MIN_MONTH_DAYS: usize = 5;

/// Monthly extinction at a location from the daily surfaces of that month.
pub fn monthly_bext(surfaces: &[DailySurface], location: Point, year: i32, month: u8) -> Result<MonthlyBext> {
    let days: Vec<&DailySurface> = surfaces
        .iter()
        .filter(|s| s.day.year() == year && s.day.month() == month as u32)
        .collect();
    if days.is_empty() {
        return Err(Error::NoData(format!("no smoothed visibility days in {year}-{month:02}")));
    }
    let mut sum = 0.0;
    for s in &days {
        sum += s.evaluate(&[location])?[0].exp();
    }
    Ok(MonthlyBext {
        value: sum / days.len() as f64,
        n_days: days.len(),
        sparse: days.len() < MIN_MONTH_DAYS,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BextRow {
    pub location_id: String,
    pub month: YearMonth,
    pub bext: MonthlyBext,
}

/// The monthly proxy for every location and every month with surfaces.
pub fn monthly_bext_table(surfaces: &[DailySurface], locations: &[(String, Point)]) -> Result<Vec<BextRow>> {
    let months: std::collections::BTreeSet<YearMonth> = surfaces
        .iter()
        .map(|s| YearMonth::new(s.day.year(), s.day.month() as u8))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (id, p) in locations {
        for ym in &months {
            let bext = monthly_bext(surfaces, *p, ym.year, ym.month)?;
            if bext.sparse {
                log::warn!("{id} {ym}: only {} usable visibility days", bext.n_days);
            }
            rows.push(BextRow {
                location_id: id.clone(),
                month: *ym,
                bext,
            });
        }
    }
    Ok(rows)
}

/// Adds the monthly proxy to a covariate frame as a time-varying covariate.
pub fn add_bext_covariate(frame: &mut crate::data::CovariateFrame, rows: &[BextRow]) {
    for r in rows {
        frame.set_varying(BEXT_COVARIATE, &r.location_id, r.month, r.bext.value);
    }
}
