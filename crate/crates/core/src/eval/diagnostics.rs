//! Residual semivariogram and per-site autocorrelation.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::types::{Point, YearMonth};

pub const DEFAULT_MIN_COOCCUR: usize = 10;
pub const DEFAULT_MIN_OBS: usize = 100;
pub const DEFAULT_MAX_LAG: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemivariogramBin {
    pub lo: f64,
    pub hi: f64,
    /// Square root of the mean over pairs of the mean squared difference.
    pub value: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Semivariogram {
    pub bins: Vec<SemivariogramBin>,
}

impl Semivariogram {
    /// 0-25, 25-50, ..., 475-500 km.
    pub fn default_edges() -> Vec<f64> {
        (0..=20).map(|k| 25.0 * k as f64).collect()
    }
}

type Series = BTreeMap<String, BTreeMap<YearMonth, f64>>;

fn by_site(residuals: &[(String, YearMonth, f64)]) -> Series {
    let mut out: Series = BTreeMap::new();
    for (s, m, r) in residuals {
        out.entry(s.clone()).or_default().insert(*m, *r);
    }
    out
}

/// Binned root mean squared residual differences between site pairs.
/// Pairs sharing fewer than `min_cooccur` months are ignored, as are bins
/// without qualifying pairs.
pub fn semivariogram(
    residuals: &[(String, YearMonth, f64)],
    locations: &BTreeMap<String, Point>,
    edges: &[f64],
    min_cooccur: usize,
) -> Semivariogram {
    let series = by_site(residuals);
    let sites: Vec<(&String, &BTreeMap<YearMonth, f64>, Point)> = series
        .iter()
        .filter_map(|(s, ser)| locations.get(s).map(|p| (s, ser, *p)))
        .collect();
    let nb = edges.len().saturating_sub(1);
    let mut sums = vec![0.0; nb];
    let mut counts = vec![0usize; nb];
    for a in 0..sites.len() {
        for b in a + 1..sites.len() {
            let (_, sa, pa) = sites[a];
            let (_, sb, pb) = sites[b];
            let d = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
            let Some(bin) = (0..nb).find(|&k| d >= edges[k] && d < edges[k + 1]) else {
                continue;
            };
            let mut n = 0usize;
            let mut ss = 0.0;
            for (m, ra) in sa {
                if let Some(rb) = sb.get(m) {
                    n += 1;
                    ss += (ra - rb).powi(2);
                }
            }
            if n >= min_cooccur {
                sums[bin] += ss / n as f64;
                counts[bin] += 1;
            }
        }
    }
    let bins = (0..nb)
        .filter(|&k| counts[k] > 0)
        .map(|k| SemivariogramBin {
            lo: edges[k],
            hi: edges[k + 1],
            value: (sums[k] / counts[k] as f64).sqrt(),
            pairs: counts[k],
        })
        .collect();
    Semivariogram { bins }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteAcf {
    pub site_id: String,
    pub n_obs: usize,
    /// Index `l - 1` holds lag `l`; `None` when no month pair is present.
    pub acf: Vec<Option<f64>>,
    pub pairs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcfSummary {
    pub min_obs: usize,
    pub sites: Vec<SiteAcf>,
    pub excluded: Vec<String>,
}

impl AcfSummary {
    /// Mean over sites of the lag-`lag` autocorrelation.
    pub fn mean_at(&self, lag: usize) -> Option<f64> {
        let v: Vec<f64> = self.sites.iter().filter_map(|s| s.acf.get(lag - 1).copied().flatten()).collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }

    /// Total number of month pairs contributing at `lag`.
    pub fn pairs_at(&self, lag: usize) -> usize {
        self.sites.iter().map(|s| s.pairs.get(lag - 1).copied().unwrap_or(0)).sum()
    }
}

/// Per-site sample autocorrelation on the monthly grid, using the month
/// pairs present at each lag.
pub fn residual_acf(residuals: &[(String, YearMonth, f64)], min_obs: usize, max_lag: usize) -> AcfSummary {
    let series = by_site(residuals);
    let mut sites = Vec::new();
    let mut excluded = Vec::new();
    for (id, ser) in series {
        let n = ser.len();
        if n < min_obs {
            excluded.push(id);
            continue;
        }
        let mean = ser.values().sum::<f64>() / n as f64;
        let c0 = ser.values().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
        let by_ord: BTreeMap<i64, f64> = ser.iter().map(|(m, r)| (m.ordinal(), r - mean)).collect();
        let mut acf = Vec::with_capacity(max_lag);
        let mut pairs = Vec::with_capacity(max_lag);
        for lag in 1..=max_lag as i64 {
            let mut s = 0.0;
            let mut k = 0usize;
            for (t, a) in &by_ord {
                if let Some(b) = by_ord.get(&(t + lag)) {
                    s += a * b;
                    k += 1;
                }
            }
            pairs.push(k);
            acf.push(if k == 0 || !(c0 > 0.0) {
                None
            } else {
                Some((s / k as f64 / c0).clamp(-1.0, 1.0))
            });
        }
        sites.push(SiteAcf {
            site_id: id,
            n_obs: n,
            acf,
            pairs,
        });
    }
    if sites.is_empty() {
        log::warn!("no site has at least {min_obs} residuals; autocorrelation summary is empty");
    }
    AcfSummary {
        min_obs,
        sites,
        excluded,
    }
}

pub fn write_semivariogram<W: Write>(writer: W, sv: &Semivariogram) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["bin_lo_km", "bin_hi_km", "value", "pairs"])?;
    for b in &sv.bins {
        wtr.write_record([b.lo.to_string(), b.hi.to_string(), b.value.to_string(), b.pairs.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_acf<W: Write>(writer: W, acf: &AcfSummary) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["site_id", "lag", "acf", "pairs"])?;
    for s in &acf.sites {
        for (i, (a, n)) in s.acf.iter().zip(&s.pairs).enumerate() {
            wtr.write_record([
                s.site_id.clone(),
                (i + 1).to_string(),
                a.map(|v| v.to_string()).unwrap_or_default(),
                n.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}
