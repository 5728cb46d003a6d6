use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{BextRow, CalibrationCurve, ExtinctionInterval, VisibilityObs, RH_GRID_STEP};
use crate::error::{Error, Result};
use crate::types::Season;

#[derive(Serialize, Deserialize)]
struct VisibilityRow {
    station_id: String,
    date: String,
    v_lo_km: f64,
    /// Empty when right-truncated.
    v_hi_km: Option<f64>,
    rh_pct: f64,
    precip: u8,
}

/// Reads `station_id, date, v_lo_km, v_hi_km, rh_pct, precip`; an empty
/// `v_hi_km` marks a right-truncated reading.
pub fn read_visibility<R: Read>(reader: R) -> Result<Vec<VisibilityObs>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<VisibilityRow>().enumerate() {
        let row = row?;
        let day = NaiveDate::parse_from_str(row.date.trim(), "%Y-%m-%d").map_err(|_| {
            Error::invalid(format!("line {}: field 'date' is not ISO-8601: '{}'", i + 2, row.date))
        })?;
        if row.precip > 1 {
            return Err(Error::invalid(format!("line {}: precip must be 0 or 1", i + 2)));
        }
        out.push(VisibilityObs {
            station_id: row.station_id,
            day,
            v_lo: row.v_lo_km,
            v_hi: row.v_hi_km.unwrap_or(f64::INFINITY),
            rh: row.rh_pct,
            precipitation: row.precip == 1,
        });
    }
    Ok(out)
}

pub fn write_visibility<W: Write>(writer: W, obs: &[VisibilityObs]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for o in obs {
        wtr.serialize(VisibilityRow {
            station_id: o.station_id.clone(),
            date: o.day.format("%Y-%m-%d").to_string(),
            v_lo_km: o.v_lo,
            v_hi_km: o.v_hi.is_finite().then_some(o.v_hi),
            rh_pct: o.rh,
            precip: o.precipitation as u8,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_intervals<W: Write>(writer: W, intervals: &[ExtinctionInterval]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["station_id", "date", "lb", "ub", "rh_pct", "censor_kind"])?;
    for iv in intervals {
        wtr.write_record([
            iv.station_id.clone(),
            iv.day.format("%Y-%m-%d").to_string(),
            iv.lb.to_string(),
            iv.ub.to_string(),
            iv.rh.to_string(),
            iv.censor_kind.name().to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CalibrationRow {
    season: String,
    rh: f64,
    adjustment: f64,
    seed: u64,
    iterations: usize,
    keep: usize,
    n_obs: usize,
}

/// One row per season and grid point; `adjustment` is `c(rh) - c(60)`.
pub fn write_calibration<W: Write>(writer: W, curves: &BTreeMap<Season, CalibrationCurve>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for c in curves.values() {
        for (i, v) in c.values.iter().enumerate() {
            wtr.serialize(CalibrationRow {
                season: c.season.name().to_string(),
                rh: i as f64 * RH_GRID_STEP,
                adjustment: v - c.reference,
                seed: c.seed,
                iterations: c.iterations,
                keep: c.keep,
                n_obs: c.n_obs,
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Reads curves written by `write_calibration`. Each season must cover the
/// full grid in order.
pub fn read_calibration<R: Read>(reader: R) -> Result<BTreeMap<Season, CalibrationCurve>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out: BTreeMap<Season, CalibrationCurve> = BTreeMap::new();
    for row in rdr.deserialize::<CalibrationRow>() {
        let row = row?;
        let season = Season::parse(&row.season)?;
        let c = out.entry(season).or_insert_with(|| CalibrationCurve {
            season,
            values: Vec::new(),
            reference: 0.0,
            seed: row.seed,
            iterations: row.iterations,
            keep: row.keep,
            n_obs: row.n_obs,
            burn_in_shift: 0.0,
        });
        let expected = c.values.len() as f64 * RH_GRID_STEP;
        if (row.rh - expected).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "{} calibration: expected rh {expected}, found {}",
                season.name(),
                row.rh
            )));
        }
        c.values.push(row.adjustment);
    }
    let full = CalibrationCurve::grid().len();
    for c in out.values() {
        if c.values.len() != full {
            return Err(Error::invalid(format!(
                "{} calibration has {} grid points, expected {full}",
                c.season.name(),
                c.values.len()
            )));
        }
    }
    Ok(out)
}

pub fn write_bext<W: Write>(writer: W, rows: &[BextRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["location_id", "year", "month", "bext", "n_days"])?;
    for r in rows {
        wtr.write_record([
            r.location_id.clone(),
            r.month.year.to_string(),
            r.month.month.to_string(),
            r.bext.value.to_string(),
            r.bext.n_days.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
