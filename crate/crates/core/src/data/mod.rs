//! Monitoring data: daily records, sites, monthly aggregation, covariates.

pub mod io;
mod met;
mod projection;

pub use met::{smooth_met_covariate, MetSmoothOptions, StationValue};
pub use projection::{haversine_km, DomainBox, Projection, EARTH_RADIUS_KM};

use std::collections::{BTreeMap, HashMap};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Point, YearMonth};

#[derive(Debug, Clone, PartialEq)]
pub struct DailyRecord {
    pub site_id: String,
    pub date: NaiveDate,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Network {
    Regulatory,
    Wilderness,
    Research,
}

impl Network {
    pub fn parse(s: &str) -> Result<Network> {
        match s.trim().to_ascii_lowercase().as_str() {
            "regulatory" => Ok(Network::Regulatory),
            "wilderness" => Ok(Network::Wilderness),
            "research" => Ok(Network::Research),
            other => Err(Error::invalid(format!("unknown network '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Network::Regulatory => "regulatory",
            Network::Wilderness => "wilderness",
            Network::Research => "research",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Siting {
    PopulationExposure,
    Hotspot,
    Unknown,
}

impl Siting {
    pub fn parse(s: &str) -> Result<Siting> {
        match s.trim().to_ascii_lowercase().as_str() {
            "population_exposure" => Ok(Siting::PopulationExposure),
            "hotspot" => Ok(Siting::Hotspot),
            "unknown" | "" => Ok(Siting::Unknown),
            other => Err(Error::invalid(format!("unknown siting '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Siting::PopulationExposure => "population_exposure",
            Siting::Hotspot => "hotspot",
            Siting::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub site_id: String,
    pub lon: f64,
    pub lat: f64,
    pub x: f64,
    pub y: f64,
    pub network: Network,
    pub siting: Siting,
}

impl Site {
    pub fn new(
        site_id: impl Into<String>,
        lon: f64,
        lat: f64,
        network: Network,
        siting: Siting,
        projection: &Projection,
    ) -> Result<Site> {
        let [x, y] = projection.project(lon, lat)?;
        Ok(Site {
            site_id: site_id.into(),
            lon,
            lat,
            x,
            y,
            network,
            siting,
        })
    }

    pub fn point(&self) -> Point {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyObservation {
    pub site_id: String,
    pub year: i32,
    pub month: u8,
    pub mean_value: f64,
    pub n_days: u32,
    pub n_scheduled: u32,
}

impl MonthlyObservation {
    pub fn year_month(&self) -> YearMonth {
        YearMonth {
            year: self.year,
            month: self.month,
        }
    }
}

/// Completeness rules for a site-month: at least four daily values, and at
/// most one third of scheduled observations missing.
pub fn passes_completeness(n_days: u32, n_scheduled: u32) -> bool {
    n_days >= 4 && n_days >= n_scheduled.saturating_sub(n_scheduled / 3)
}

/// Scheduled observation counts keyed by (site, month).
pub type Schedule = HashMap<(String, YearMonth), u32>;

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub site_id: String,
    pub date: NaiveDate,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Aggregation {
    pub observations: Vec<MonthlyObservation>,
    pub rejected: Vec<Rejection>,
    /// Site-months dropped by the completeness rules.
    pub excluded: Vec<(String, YearMonth, u32, u32)>,
}

/// Sampling cadence in days (1, 3 or 6) from the modal gap between
/// consecutive distinct sampling days.
pub fn infer_cadence(days: &[NaiveDate]) -> u32 {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for w in days.windows(2) {
        let gap = (w[1] - w[0]).num_days();
        if gap > 0 {
            *counts.entry(gap).or_default() += 1;
        }
    }
    let modal = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(g, _)| *g)
        .unwrap_or(1);
    [1u32, 3, 6]
        .into_iter()
        .min_by_key(|c| (*c as i64 - modal).abs())
        .unwrap_or(1)
}

fn days_in_month(ym: YearMonth) -> u32 {
    let first = NaiveDate::from_ymd_opt(ym.year, ym.month as u32, 1).expect("valid month");
    let next = YearMonth::from_ordinal(ym.ordinal() + 1);
    let next_first = NaiveDate::from_ymd_opt(next.year, next.month as u32, 1).expect("valid month");
    (next_first - first).num_days() as u32
}

/// Days in `ym` on the sampling grid anchored at `anchor` with period `cadence`.
fn scheduled_days(ym: YearMonth, anchor: NaiveDate, cadence: u32) -> u32 {
    let first = NaiveDate::from_ymd_opt(ym.year, ym.month as u32, 1).expect("valid month");
    (0..days_in_month(ym))
        .filter(|d| {
            let day = first + chrono::Duration::days(*d as i64);
            (day - anchor).num_days().rem_euclid(cadence as i64) == 0
        })
        .count() as u32
}

/// Monthly means of daily records passing both completeness rules.
///
/// Duplicate site-days are averaged first. Records with nonpositive values are
/// rejected with a diagnostic. When `schedule` is `None` (or lacks a site-month)
/// the scheduled count comes from the site's inferred cadence.
pub fn aggregate_monthly(records: &[DailyRecord], schedule: Option<&Schedule>) -> Aggregation {
    let mut out = Aggregation::default();
    let mut by_site_day: BTreeMap<(&str, NaiveDate), (f64, u32)> = BTreeMap::new();
    for r in records {
        if !(r.value > 0.0) || !r.value.is_finite() {
            out.rejected.push(Rejection {
                site_id: r.site_id.clone(),
                date: r.date,
                reason: format!("nonpositive or non-finite value {}", r.value),
            });
            continue;
        }
        let e = by_site_day.entry((r.site_id.as_str(), r.date)).or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }

    // site -> sorted distinct days with their daily means
    let mut sites: BTreeMap<&str, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for ((site, day), (sum, count)) in by_site_day {
        sites.entry(site).or_default().push((day, sum / count as f64));
    }

    for (site, days) in sites {
        let dates: Vec<NaiveDate> = days.iter().map(|d| d.0).collect();
        let cadence = infer_cadence(&dates);
        let anchor = dates[0];
        let mut months: BTreeMap<YearMonth, Vec<f64>> = BTreeMap::new();
        for (day, v) in &days {
            let ym = YearMonth {
                year: day.year(),
                month: day.month() as u8,
            };
            months.entry(ym).or_default().push(*v);
        }
        for (ym, values) in months {
            let n_days = values.len() as u32;
            let n_scheduled = schedule
                .and_then(|s| s.get(&(site.to_string(), ym)).copied())
                .unwrap_or_else(|| scheduled_days(ym, anchor, cadence));
            if passes_completeness(n_days, n_scheduled) {
                // Sum in day order so results do not depend on input order.
                let mean = values.iter().sum::<f64>() / n_days as f64;
                out.observations.push(MonthlyObservation {
                    site_id: site.to_string(),
                    year: ym.year,
                    month: ym.month,
                    mean_value: mean,
                    n_days,
                    n_scheduled,
                });
            } else {
                out.excluded.push((site.to_string(), ym, n_days, n_scheduled));
            }
        }
    }
    out
}

/// Precomputed covariates: time-invariant values per location and
/// time-varying values per location-month.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CovariateFrame {
    pub time_invariant: BTreeMap<String, BTreeMap<String, f64>>,
    pub time_varying: BTreeMap<String, BTreeMap<(String, YearMonth), f64>>,
}

impl CovariateFrame {
    pub fn set_invariant(&mut self, name: &str, location: &str, value: f64) {
        self.time_invariant
            .entry(name.to_string())
            .or_default()
            .insert(location.to_string(), value);
    }

    pub fn set_varying(&mut self, name: &str, location: &str, ym: YearMonth, value: f64) {
        self.time_varying
            .entry(name.to_string())
            .or_default()
            .insert((location.to_string(), ym), value);
    }

    pub fn invariant(&self, name: &str, location: &str) -> Result<f64> {
        self.time_invariant
            .get(name)
            .and_then(|m| m.get(location))
            .copied()
            .ok_or_else(|| Error::MissingCovariate {
                name: name.to_string(),
                ids: vec![location.to_string()],
            })
    }

    pub fn varying(&self, name: &str, location: &str, ym: YearMonth) -> Result<f64> {
        self.time_varying
            .get(name)
            .and_then(|m| m.get(&(location.to_string(), ym)))
            .copied()
            .ok_or_else(|| Error::MissingCovariate {
                name: name.to_string(),
                ids: vec![format!("{location}@{ym}")],
            })
    }

    /// Errors listing every location lacking any of the named invariant covariates.
    pub fn check_invariant(&self, names: &[String], locations: &[&str]) -> Result<()> {
        for name in names {
            let missing: Vec<String> = locations
                .iter()
                .filter(|l| self.invariant(name, l).is_err())
                .map(|l| l.to_string())
                .collect();
            if !missing.is_empty() {
                return Err(Error::MissingCovariate {
                    name: name.clone(),
                    ids: missing,
                });
            }
        }
        Ok(())
    }

    pub fn invariant_names(&self) -> Vec<String> {
        self.time_invariant.keys().cloned().collect()
    }

    pub fn varying_names(&self) -> Vec<String> {
        self.time_varying.keys().cloned().collect()
    }
}
