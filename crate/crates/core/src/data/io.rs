//! CSV readers and writers for the monitoring and covariate files.
//!
//! All files are UTF-8 with a mandatory header row and '.' decimals.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{CovariateFrame, DailyRecord, MonthlyObservation, Network, Projection, Site, Siting};
use crate::error::{Error, Result};
use crate::types::YearMonth;

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path)
        .map_err(|e| Error::invalid(format!("cannot open {}: {e}", path.display())))
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::invalid(format!("missing column '{name}'")))
}

fn parse_f64(s: &str, field: &str, line: u64) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::invalid(format!("line {line}: field '{field}' is not a number: '{s}'")))
}

#[derive(Deserialize)]
struct DailyRow {
    site_id: String,
    date: String,
    value: f64,
}

pub fn read_daily<R: Read>(reader: R) -> Result<Vec<DailyRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<DailyRow>().enumerate() {
        let row = row?;
        let date = NaiveDate::parse_from_str(row.date.trim(), "%Y-%m-%d").map_err(|_| {
            Error::invalid(format!("line {}: field 'date' is not ISO-8601: '{}'", i + 2, row.date))
        })?;
        out.push(DailyRecord {
            site_id: row.site_id,
            date,
            value: row.value,
        });
    }
    Ok(out)
}

pub fn read_daily_path(path: &Path) -> Result<Vec<DailyRecord>> {
    read_daily(open(path)?)
}

pub fn read_monthly<R: Read>(reader: R) -> Result<Vec<MonthlyObservation>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<MonthlyObservation>() {
        let row = row?;
        YearMonth::new(row.year, row.month)?;
        if !(row.mean_value > 0.0) {
            return Err(Error::invalid(format!(
                "monthly mean for {} {}-{} must be positive",
                row.site_id, row.year, row.month
            )));
        }
        out.push(row);
    }
    Ok(out)
}

pub fn read_monthly_path(path: &Path) -> Result<Vec<MonthlyObservation>> {
    read_monthly(open(path)?)
}

pub fn write_monthly<W: Write>(writer: W, obs: &[MonthlyObservation]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for o in obs {
        wtr.serialize(o)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SiteRow {
    site_id: String,
    lon: f64,
    lat: f64,
    network: String,
    siting: String,
}

pub fn read_sites<R: Read>(reader: R, projection: &Projection) -> Result<Vec<Site>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.deserialize::<SiteRow>() {
        let row = row?;
        if !seen.insert(row.site_id.clone()) {
            return Err(Error::invalid(format!("duplicate site_id '{}'", row.site_id)));
        }
        out.push(Site::new(
            row.site_id,
            row.lon,
            row.lat,
            Network::parse(&row.network)?,
            Siting::parse(&row.siting)?,
            projection,
        )?);
    }
    Ok(out)
}

pub fn read_sites_path(path: &Path, projection: &Projection) -> Result<Vec<Site>> {
    read_sites(open(path)?, projection)
}

pub fn write_sites<W: Write>(writer: W, sites: &[Site]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for s in sites {
        wtr.serialize(SiteRow {
            site_id: s.site_id.clone(),
            lon: s.lon,
            lat: s.lat,
            network: s.network.name().into(),
            siting: s.siting.name().into(),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

/// Long-format covariates: `site_id` (or `grid_id`), optional `year` and
/// `month` (blank for time-invariant rows), `name`, `value`.
pub fn read_covariates<R: Read>(reader: R) -> Result<CovariateFrame> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id = header_index(&headers, "site_id").or_else(|_| header_index(&headers, "grid_id"))?;
    let year = header_index(&headers, "year").ok();
    let month = header_index(&headers, "month").ok();
    let name = header_index(&headers, "name")?;
    let value = header_index(&headers, "value")?;
    let mut frame = CovariateFrame::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let loc = rec.get(id).unwrap_or("").trim();
        let nm = rec.get(name).unwrap_or("").trim();
        let v = parse_f64(rec.get(value).unwrap_or(""), "value", line)?;
        let y = year.and_then(|c| rec.get(c)).map(str::trim).unwrap_or("");
        let m = month.and_then(|c| rec.get(c)).map(str::trim).unwrap_or("");
        if y.is_empty() && m.is_empty() {
            frame.set_invariant(nm, loc, v);
        } else {
            let yy: i32 = y
                .parse()
                .map_err(|_| Error::invalid(format!("line {line}: field 'year' is invalid: '{y}'")))?;
            let mm: u8 = m
                .parse()
                .map_err(|_| Error::invalid(format!("line {line}: field 'month' is invalid: '{m}'")))?;
            frame.set_varying(nm, loc, YearMonth::new(yy, mm)?, v);
        }
    }
    Ok(frame)
}

pub fn read_covariates_path(path: &Path) -> Result<CovariateFrame> {
    read_covariates(open(path)?)
}

pub fn write_covariates<W: Write>(writer: W, frame: &CovariateFrame) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["site_id", "year", "month", "name", "value"])?;
    for (name, m) in &frame.time_invariant {
        for (loc, v) in m {
            wtr.write_record([loc.as_str(), "", "", name.as_str(), &v.to_string()])?;
        }
    }
    for (name, m) in &frame.time_varying {
        for ((loc, ym), v) in m {
            wtr.write_record([
                loc.as_str(),
                &ym.year.to_string(),
                &ym.month.to_string(),
                name.as_str(),
                &v.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DomainBox;

    #[test]
    fn reads_daily_and_reports_bad_dates() {
        let ok = "site_id,date,value\nA,2000-01-05,12.5\n";
        let recs = read_daily(ok.as_bytes()).unwrap();
        assert_eq!(recs[0].value, 12.5);
        let bad = "site_id,date,value\nA,05/01/2000,12.5\n";
        let err = read_daily(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("date"));
    }

    #[test]
    fn covariates_long_format() {
        let text = "site_id,year,month,name,value\nA,,,elev,120.5\nA,2000,3,temp,4.25\n";
        let f = read_covariates(text.as_bytes()).unwrap();
        assert_eq!(f.invariant("elev", "A").unwrap(), 120.5);
        let ym = YearMonth::new(2000, 3).unwrap();
        assert_eq!(f.varying("temp", "A", ym).unwrap(), 4.25);
        let mut buf = Vec::new();
        write_covariates(&mut buf, &f).unwrap();
        assert_eq!(read_covariates(buf.as_slice()).unwrap(), f);
    }

    #[test]
    fn sites_are_projected_and_unique() {
        let proj = Projection::new(DomainBox::NORTHEAST_US).unwrap();
        let text = "site_id,lon,lat,network,siting\nA,-75.5,42.0,regulatory,hotspot\nB,-72.0,41.0,wilderness,unknown\n";
        let sites = read_sites(text.as_bytes(), &proj).unwrap();
        assert_eq!(sites.len(), 2);
        assert!(sites[0].x.is_finite());
        let dup = "site_id,lon,lat,network,siting\nA,-75.5,42.0,regulatory,hotspot\nA,-72.0,41.0,research,unknown\n";
        assert!(read_sites(dup.as_bytes(), &proj).is_err());
    }
}
