use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::ExtinctionInterval;
use crate::error::{Error, Result};
use crate::gam::{AdditiveFit, AdditiveProblem, TermData, TermSpec};
use crate::splines::{distinct_points, tps_basis_k, uni_basis, BasisKind};
use crate::types::{Point, Season};

pub const RH_REFERENCE: f64 = 60.0;
pub const RH_GRID_STEP: f64 = 0.5;
const RH_TERM: &str = "rh";
const SPACE_TERM: &str = "s";
pub const MIN_CALIBRATION_OBS: usize = 200;
pub const MIN_DAILY_STATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub iterations: usize,
    /// Trailing iterations averaged into the final fit.
    pub keep: usize,
    pub seed: u64,
    /// Basis rank for the humidity curve.
    pub rh_knots: usize,
    /// Basis rank cap for daily surfaces.
    pub space_knots: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            iterations: 200,
            keep: 100,
            seed: 0,
            rh_knots: 10,
            space_knots: 100,
        }
    }
}

impl EmConfig {
    fn validate(&self) -> Result<()> {
        if self.keep == 0 || self.keep > self.iterations {
            return Err(Error::invalid(format!(
                "EM keeps {} of {} iterations",
                self.keep, self.iterations
            )));
        }
        Ok(())
    }
}

/// Draw from `N(mean, sd^2)` truncated to `[lo, hi]` by inverting the normal
/// CDF. Works in whichever tail keeps the probabilities away from 1.
pub fn sample_truncated_normal<R: Rng>(rng: &mut R, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return lo;
    }
    if !(sd > 0.0) {
        return mean.clamp(lo, hi);
    }
    let std = Normal::standard();
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    let flip = a > 0.0;
    let (pa, pb) = if flip {
        (std.cdf(-b), std.cdf(-a))
    } else {
        (std.cdf(a), std.cdf(b))
    };
    if !(pb > pa) {
        // All mass sits against the bound nearest the mean.
        return if flip { lo } else { hi };
    }
    let u = pa + (pb - pa) * rng.random::<f64>();
    let z = std.inverse_cdf(u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON));
    let x = if flip { mean - sd * z } else { mean + sd * z };
    x.clamp(lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmOutcome {
    /// The final iteration's fit with its coefficients and fitted values
    /// replaced by the average over the kept iterations.
    pub fit: AdditiveFit,
    /// Mean over the kept iterations of the residual sd.
    pub residual_sd: f64,
    /// Max abs difference between the fitted values averaged over the
    /// second quarter and over the second half of the chain.
    pub burn_in_shift: f64,
}

/// Stochastic EM: start from a fit to interval midpoints, then alternate
/// between imputing each value from the current fit's truncated normal and
/// refitting.
pub fn run_stochastic_em<R: Rng>(
    problem: &AdditiveProblem,
    lb: &[f64],
    ub: &[f64],
    config: &EmConfig,
    rng: &mut R,
) -> Result<EmOutcome> {
    config.validate()?;
    let n = lb.len();
    if ub.len() != n || problem.n() != n {
        return Err(Error::Dimension("EM bounds and problem differ in length".into()));
    }
    if let Some(i) = (0..n).find(|&i| !(lb[i] <= ub[i]) || !lb[i].is_finite() || !ub[i].is_finite()) {
        return Err(Error::invalid(format!("interval {i} has bounds [{}, {}]", lb[i], ub[i])));
    }
    let mid: Vec<f64> = lb.iter().zip(ub).map(|(a, b)| 0.5 * (a + b)).collect();
    let mut fit = problem.fit(&mid)?;

    let iters = config.iterations;
    let keep_from = iters - config.keep + 1;
    let (early_lo, early_hi) = (iters / 4 + 1, iters / 2);
    let mut coef_sum = DVector::zeros(fit.coefficients.len());
    let mut fitted_sum = DVector::zeros(n);
    let mut sd_sum = 0.0;
    let mut early = DVector::zeros(n);
    let mut late = DVector::zeros(n);
    let mut draws = vec![0.0; n];
    for it in 1..=iters {
        let sd = fit.sigma2.max(0.0).sqrt();
        for i in 0..n {
            draws[i] = sample_truncated_normal(rng, fit.fitted[i], sd, lb[i], ub[i]);
        }
        fit = problem.fit(&draws)?;
        if it >= keep_from {
            coef_sum += &fit.coefficients;
            fitted_sum += &fit.fitted;
            sd_sum += fit.sigma2.max(0.0).sqrt();
        }
        if (early_lo..=early_hi).contains(&it) {
            early += &fit.fitted;
        }
        if it > early_hi {
            late += &fit.fitted;
        }
    }
    let k = config.keep as f64;
    let burn_in_shift = if early_hi >= early_lo && iters > early_hi {
        let e = early / (early_hi + 1 - early_lo) as f64;
        let l = late / (iters - early_hi) as f64;
        (e - l).amax()
    } else {
        0.0
    };
    fit.coefficients = coef_sum / k;
    fit.fitted = fitted_sum / k;
    Ok(EmOutcome {
        fit,
        residual_sd: sd_sum / k,
        burn_in_shift,
    })
}

fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seasonal log-extinction adjustment on the humidity grid 0, 0.5, ..., 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub season: Season,
    /// `c(rh)` at `rh = i * RH_GRID_STEP`.
    pub values: Vec<f64>,
    /// `c(60)`.
    pub reference: f64,
    pub seed: u64,
    pub iterations: usize,
    pub keep: usize,
    pub n_obs: usize,
    pub burn_in_shift: f64,
}

impl CalibrationCurve {
    pub fn grid() -> Vec<f64> {
        (0..=200).map(|i| i as f64 * RH_GRID_STEP).collect()
    }

    /// Linear interpolation of `c` on the grid.
    pub fn value(&self, rh: f64) -> Result<f64> {
        if !(0.0..=100.0).contains(&rh) {
            return Err(Error::invalid(format!("relative humidity {rh} is outside the calibration grid")));
        }
        let pos = rh / RH_GRID_STEP;
        let i = (pos.floor() as usize).min(self.values.len() - 2);
        let t = pos - i as f64;
        Ok(self.values[i] * (1.0 - t) + self.values[i + 1] * t)
    }

    /// `c(rh) - c(60)`.
    pub fn adjustment(&self, rh: f64) -> Result<f64> {
        Ok(self.value(rh)? - self.reference)
    }
}

/// Fits the humidity curve for one season from that season's intervals.
pub fn fit_rh_calibration(
    intervals: &[ExtinctionInterval],
    season: Season,
    config: &EmConfig,
) -> Result<CalibrationCurve> {
    let rows: Vec<&ExtinctionInterval> = intervals.iter().filter(|iv| iv.season() == season).collect();
    if rows.len() < MIN_CALIBRATION_OBS {
        return Err(Error::NoData(format!(
            "{} has {} extinction intervals; calibration needs {MIN_CALIBRATION_OBS}",
            season.name(),
            rows.len()
        )));
    }
    let rh: Vec<f64> = rows.iter().map(|r| r.rh).collect();
    let lb: Vec<f64> = rows.iter().map(|r| r.lb).collect();
    let ub: Vec<f64> = rows.iter().map(|r| r.ub).collect();
    let mut distinct = rh.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let basis = uni_basis(&rh, config.rh_knots.min(distinct.len()))?;
    let problem = AdditiveProblem::new(vec![TermSpec::new(RH_TERM, basis)], vec![], None)?;
    let mut rng = seeded_stream(config.seed, season.index() as u64);
    let out = run_stochastic_em(&problem, &lb, &ub, config, &mut rng)?;
    if out.burn_in_shift > 0.1 * out.residual_sd.max(1e-12) {
        log::warn!(
            "{} calibration: chain means still drift by {:.3e} after burn-in",
            season.name(),
            out.burn_in_shift
        );
    }
    let grid = CalibrationCurve::grid();
    let (values, _) = out
        .fit
        .predict_joint(&[(RH_TERM, &TermData::Scalars(grid))], true)?;
    let values: Vec<f64> = values.iter().copied().collect();
    let reference = values[(RH_REFERENCE / RH_GRID_STEP) as usize];
    Ok(CalibrationCurve {
        season,
        values,
        reference,
        seed: config.seed,
        iterations: config.iterations,
        keep: config.keep,
        n_obs: rows.len(),
        burn_in_shift: out.burn_in_shift,
    })
}

/// Averaged stochastic-EM surface of log extinction for one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySurface {
    pub day: NaiveDate,
    pub fit: AdditiveFit,
    pub residual_sd: f64,
    pub n_stations: usize,
}

impl DailySurface {
    pub fn evaluate(&self, points: &[Point]) -> Result<Vec<f64>> {
        let (m, _) = self
            .fit
            .predict_joint(&[(SPACE_TERM, &TermData::Points(points.to_vec()))], true)?;
        Ok(m.iter().copied().collect())
    }
}

/// Smooths one day's adjusted intervals in space. All intervals must share
/// the day; stations without a location are an error.
pub fn smooth_daily(
    intervals: &[ExtinctionInterval],
    stations: &BTreeMap<String, Point>,
    config: &EmConfig,
) -> Result<DailySurface> {
    let day = intervals
        .first()
        .map(|iv| iv.day)
        .ok_or_else(|| Error::NoData("no intervals to smooth".into()))?;
    if intervals.iter().any(|iv| iv.day != day) {
        return Err(Error::invalid("smooth_daily expects intervals from a single day"));
    }
    let points: Vec<Point> = intervals
        .iter()
        .map(|iv| {
            stations
                .get(&iv.station_id)
                .copied()
                .ok_or_else(|| Error::invalid(format!("unknown visibility station '{}'", iv.station_id)))
        })
        .collect::<Result<_>>()?;
    let n_stations = distinct_points(&points).len();
    if n_stations < MIN_DAILY_STATIONS || n_stations <= BasisKind::Tps2d.null_dim() {
        return Err(Error::NoData(format!(
            "{day}: {n_stations} reporting stations, need {MIN_DAILY_STATIONS}"
        )));
    }
    let basis = tps_basis_k(&points, config.space_knots.min(n_stations))?;
    let problem = AdditiveProblem::new(vec![TermSpec::new(SPACE_TERM, basis)], vec![], None)?;
    let lb: Vec<f64> = intervals.iter().map(|r| r.lb).collect();
    let ub: Vec<f64> = intervals.iter().map(|r| r.ub).collect();
    let mut rng = seeded_stream(config.seed, day.num_days_from_ce() as u64);
    let out = run_stochastic_em(&problem, &lb, &ub, config, &mut rng)?;
    Ok(DailySurface {
        day,
        fit: out.fit,
        residual_sd: out.residual_sd,
        n_stations,
    })
}

/// Smooths every day in parallel. Days that cannot be smoothed are returned
/// with the reason rather than failing the batch.
pub fn smooth_all_days(
    intervals: &[ExtinctionInterval],
    stations: &BTreeMap<String, Point>,
    config: &EmConfig,
) -> (Vec<DailySurface>, Vec<(NaiveDate, String)>) {
    let mut by_day: BTreeMap<NaiveDate, Vec<ExtinctionInterval>> = BTreeMap::new();
    for iv in intervals {
        by_day.entry(iv.day).or_default().push(iv.clone());
    }
    let results: Vec<(NaiveDate, Result<DailySurface>)> = by_day
        .into_par_iter()
        .map(|(day, rows)| (day, smooth_daily(&rows, stations, config)))
        .collect();
    let mut surfaces = Vec::new();
    let mut skipped = Vec::new();
    for (day, r) in results {
        match r {
            Ok(s) => surfaces.push(s),
            Err(e) => {
                log::warn!("skipping visibility day {day}: {e}");
                skipped.push((day, e.to_string()));
            }
        }
    }
    (surfaces, skipped)
}
