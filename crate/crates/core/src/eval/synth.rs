//! Synthetic data drawn from the two-stage generative model, with the true
//! components kept for oracle scoring.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{CovariateFrame, DomainBox, MonthlyObservation, Network, Projection, Site, Siting};
use crate::error::{Error, Result};
use crate::types::{Point, Transform, YearMonth};

/// Gaussian bump `amplitude * exp(-|s - center|^2 / (2 scale^2))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    /// Projected km relative to the domain center.
    pub center: Point,
    pub scale_km: f64,
    pub amplitude: f64,
}

impl Bump {
    fn shape(center: Point, scale: f64, p: Point) -> f64 {
        let d2 = (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2);
        (-d2 / (2.0 * scale * scale)).exp()
    }

    pub fn eval(&self, p: Point) -> f64 {
        self.amplitude * Bump::shape(self.center, self.scale_km, p)
    }
}

/// Linear trend (per 1000 km) plus bumps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSpec {
    pub gradient: [f64; 2],
    pub bumps: Vec<Bump>,
}

impl SurfaceSpec {
    pub fn eval(&self, p: Point) -> f64 {
        self.gradient[0] * p[0] / 1000.0
            + self.gradient[1] * p[1] / 1000.0
            + self.bumps.iter().map(|b| b.eval(p)).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Effect {
    Linear { slope: f64 },
    Sine { amplitude: f64, frequency: f64 },
}

impl Effect {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Effect::Linear { slope } => slope * x,
            Effect::Sine { amplitude, frequency } => amplitude * (frequency * x).sin(),
        }
    }
}

/// A time-varying covariate: seasonal cycle plus a spatial gradient plus noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvSpec {
    pub name: String,
    pub effect: Effect,
    pub seasonal_amplitude: f64,
    /// Calendar-month phase offset of the seasonal cycle.
    pub phase: f64,
    pub gradient: [f64; 2],
    pub noise_sd: f64,
}

/// A time-invariant covariate drawn uniformly on [0, 1] per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiSpec {
    pub name: String,
    pub effect: Effect,
}

/// Monthly surfaces `g_t(s) = A cos(2 pi (m - 1) / 12) + sum_j c_tj phi_j(s)`
/// with `phi` the two coordinates (per 1000 km) and unit bumps at `centers`,
/// and `c_tj ~ N(0, coef_sd^2)` drawn per month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlySpec {
    pub seasonal_amplitude: f64,
    pub coef_sd: f64,
    pub centers: Vec<Point>,
    pub scale_km: f64,
}

impl MonthlySpec {
    pub fn n_coefficients(&self) -> usize {
        2 + self.centers.len()
    }

    pub fn eval(&self, month: YearMonth, coefs: &[f64], p: Point) -> f64 {
        let season = self.seasonal_amplitude
            * (std::f64::consts::TAU * (month.month as f64 - 1.0) / 12.0).cos();
        let mut v = season + coefs[0] * p[0] / 1000.0 + coefs[1] * p[1] / 1000.0;
        for (c, center) in coefs[2..].iter().zip(&self.centers) {
            v += c * Bump::shape(*center, self.scale_km, p);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_sites: usize,
    pub start: YearMonth,
    pub n_months: usize,
    pub domain: DomainBox,
    pub transform: Transform,
    /// Overall level on the transformed scale.
    pub level: f64,
    pub spatial: SurfaceSpec,
    pub monthly: MonthlySpec,
    pub tv: Vec<TvSpec>,
    pub ti: Vec<TiSpec>,
    pub sigma_mu: f64,
    /// Residual sd per month; length 1 (constant) or `n_months`.
    pub sigma_t: Vec<f64>,
    /// Probability that a site-month is observed.
    pub obs_prob: f64,
}

impl SynthConfig {
    /// The configuration used by the acceptance suite: 30 sites over 24
    /// months with two time-varying covariates.
    pub fn reference() -> SynthConfig {
        SynthConfig {
            n_sites: 30,
            start: YearMonth { year: 2000, month: 1 },
            n_months: 24,
            domain: DomainBox::NORTHEAST_US,
            transform: Transform::Log,
            level: 3.0,
            spatial: SurfaceSpec {
                gradient: [-0.4, 0.3],
                bumps: vec![Bump {
                    center: [150.0, -100.0],
                    scale_km: 500.0,
                    amplitude: 0.3,
                }],
            },
            monthly: MonthlySpec {
                seasonal_amplitude: 0.4,
                coef_sd: 0.15,
                centers: vec![[-300.0, 200.0]],
                scale_km: 450.0,
            },
            tv: vec![
                TvSpec {
                    name: "temp".into(),
                    effect: Effect::Sine {
                        amplitude: 0.2,
                        frequency: 1.2,
                    },
                    seasonal_amplitude: 1.0,
                    phase: 0.0,
                    gradient: [0.0, -0.5],
                    noise_sd: 0.4,
                },
                TvSpec {
                    name: "wind".into(),
                    effect: Effect::Linear { slope: -0.15 },
                    seasonal_amplitude: 0.5,
                    phase: 3.0,
                    gradient: [0.4, 0.0],
                    noise_sd: 0.6,
                },
            ],
            ti: vec![TiSpec {
                name: "urban".into(),
                effect: Effect::Linear { slope: 0.3 },
            }],
            sigma_mu: 0.145,
            sigma_t: vec![0.15],
            obs_prob: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_sites == 0 || self.n_months == 0 {
            return Err(Error::invalid("synthetic config needs sites and months"));
        }
        if self.sigma_t.len() != 1 && self.sigma_t.len() != self.n_months {
            return Err(Error::invalid(format!(
                "sigma_t has {} entries; expected 1 or {}",
                self.sigma_t.len(),
                self.n_months
            )));
        }
        if self.sigma_mu < 0.0 || self.sigma_t.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("noise standard deviations must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.obs_prob) {
            return Err(Error::invalid("obs_prob must lie in [0, 1]"));
        }
        let names: std::collections::BTreeSet<&str> =
            self.tv.iter().map(|t| t.name.as_str()).chain(self.ti.iter().map(|t| t.name.as_str())).collect();
        if names.len() != self.tv.len() + self.ti.len() {
            return Err(Error::invalid("covariate names must be unique"));
        }
        Ok(())
    }

    pub fn tv_names(&self) -> Vec<String> {
        self.tv.iter().map(|t| t.name.clone()).collect()
    }

    pub fn ti_names(&self) -> Vec<String> {
        self.ti.iter().map(|t| t.name.clone()).collect()
    }

    pub fn months(&self) -> Vec<YearMonth> {
        (0..self.n_months as i64)
            .map(|k| YearMonth::from_ordinal(self.start.ordinal() + k))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub site_id: String,
    pub month: YearMonth,
    /// Deterministic part: everything except the site and monthly noise.
    pub oracle_mean: f64,
    /// Level, spatial surface and time-invariant effects.
    pub site_mean: f64,
    pub monthly_surface: f64,
    pub tv_effect: f64,
    pub site_noise: f64,
    pub noise: f64,
    /// Transformed-scale value.
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// `mu_i` including the site noise `b_i`.
    pub site_effects: BTreeMap<String, f64>,
    pub monthly_coefficients: Vec<Vec<f64>>,
    pub rows: Vec<TruthRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub projection: Projection,
    pub sites: Vec<Site>,
    pub observations: Vec<MonthlyObservation>,
    pub covariates: CovariateFrame,
    pub truth: SynthTruth,
}

impl SynthDataset {
    pub fn truth_row(&self, site_id: &str, month: YearMonth) -> Option<&TruthRow> {
        self.truth
            .rows
            .iter()
            .find(|r| r.site_id == site_id && r.month == month)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws a dataset. Every site-month gets covariates; observations are
/// thinned by `obs_prob`.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    config.validate()?;
    let projection = Projection::new(config.domain)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.domain;
    let width = config.n_sites.to_string().len().max(3);

    let mut sites = Vec::with_capacity(config.n_sites);
    for i in 0..config.n_sites {
        let lon = rng.random_range(d.lon_min..=d.lon_max);
        let lat = rng.random_range(d.lat_min..=d.lat_max);
        sites.push(Site::new(
            format!("S{:0width$}", i + 1),
            lon,
            lat,
            Network::Regulatory,
            Siting::Unknown,
            &projection,
        )?);
    }

    let mut covariates = CovariateFrame::default();
    let mut site_effects = BTreeMap::new();
    let mut base = Vec::with_capacity(sites.len());
    let mut site_noise = Vec::with_capacity(sites.len());
    for s in &sites {
        let mut m = config.level + config.spatial.eval(s.point());
        for t in &config.ti {
            let z: f64 = rng.random();
            covariates.set_invariant(&t.name, &s.site_id, z);
            m += t.effect.eval(z);
        }
        let b = config.sigma_mu * normal(&mut rng);
        site_effects.insert(s.site_id.clone(), m + b);
        base.push(m);
        site_noise.push(b);
    }

    let months = config.months();
    let monthly_coefficients: Vec<Vec<f64>> = months
        .iter()
        .map(|_| {
            (0..config.monthly.n_coefficients())
                .map(|_| config.monthly.coef_sd * normal(&mut rng))
                .collect()
        })
        .collect();

    let mut observations = Vec::new();
    let mut rows = Vec::new();
    for (t, &ym) in months.iter().enumerate() {
        let sigma = config.sigma_t[if config.sigma_t.len() == 1 { 0 } else { t }];
        for (i, s) in sites.iter().enumerate() {
            let p = s.point();
            let surface = config.monthly.eval(ym, &monthly_coefficients[t], p);
            let mut tv_effect = 0.0;
            for c in &config.tv {
                let cycle = c.seasonal_amplitude
                    * (std::f64::consts::TAU * (ym.month as f64 - 1.0 + c.phase) / 12.0).cos();
                let x = cycle
                    + c.gradient[0] * p[0] / 1000.0
                    + c.gradient[1] * p[1] / 1000.0
                    + c.noise_sd * normal(&mut rng);
                covariates.set_varying(&c.name, &s.site_id, ym, x);
                tv_effect += c.effect.eval(x);
            }
            let mean = base[i] + surface + tv_effect;
            let eps = sigma * normal(&mut rng);
            let observed = rng.random::<f64>() < config.obs_prob;
            let y = mean + site_noise[i] + eps;
            if !observed {
                continue;
            }
            let value = config.transform.inverse(y);
            if !(value > 0.0) {
                return Err(Error::invalid(format!(
                    "synthetic value {value} at {} {ym} is not positive",
                    s.site_id
                )));
            }
            observations.push(MonthlyObservation {
                site_id: s.site_id.clone(),
                year: ym.year,
                month: ym.month,
                mean_value: value,
                n_days: 10,
                n_scheduled: 10,
            });
            rows.push(TruthRow {
                site_id: s.site_id.clone(),
                month: ym,
                oracle_mean: mean,
                site_mean: base[i],
                monthly_surface: surface,
                tv_effect,
                site_noise: site_noise[i],
                noise: eps,
                y,
            });
        }
    }

    Ok(SynthDataset {
        projection,
        sites,
        observations,
        covariates,
        truth: SynthTruth {
            site_effects,
            monthly_coefficients,
            rows,
        },
    })
}

/// Log-ratio field for a co-pollutant measured at the synthetic sites:
/// `log r = log base_ratio + a_season + c_season * x / 1000
///          + vis_slope * (log bext - mean) + u_i + e_it`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioWorldSpec {
    pub base_ratio: f64,
    /// Amplitude of the seasonal intercepts `a_season`.
    pub seasonal_amplitude: f64,
    /// Amplitude of the seasonal east-west gradients `c_season`.
    pub seasonal_gradient: f64,
    pub vis_slope: f64,
    pub site_sd: f64,
    pub noise_sd: f64,
}

impl RatioWorldSpec {
    /// The ratio is exactly `base_ratio` everywhere.
    pub fn constant(base_ratio: f64) -> Self {
        RatioWorldSpec {
            base_ratio,
            seasonal_amplitude: 0.0,
            seasonal_gradient: 0.0,
            vis_slope: 0.0,
            site_sd: 0.0,
            noise_sd: 0.0,
        }
    }

    pub fn seasonal() -> Self {
        RatioWorldSpec {
            base_ratio: 0.55,
            seasonal_amplitude: 0.15,
            seasonal_gradient: 0.2,
            vis_slope: 0.3,
            site_sd: 0.06,
            noise_sd: 0.08,
        }
    }

    /// Noise-free log ratio at a point, month and log extinction.
    pub fn log_ratio(&self, p: Point, month: YearMonth, log_bext: f64) -> f64 {
        let k = month.season().index() as f64;
        let phase = std::f64::consts::FRAC_PI_2 * k;
        self.base_ratio.ln()
            + self.seasonal_amplitude * phase.cos()
            + self.seasonal_gradient * phase.sin() * p[0] / 1000.0
            + self.vis_slope * (log_bext - BEXT_LOG_MEAN)
    }
}

const BEXT_LOG_MEAN: f64 = -1.5;

/// Monthly extinction with a seasonal cycle, a north-south gradient and noise.
pub fn synth_bext(dataset: &mut SynthDataset, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let months: std::collections::BTreeSet<YearMonth> = dataset.truth.rows.iter().map(|r| r.month).collect();
    for s in &dataset.sites {
        let p = s.point();
        for ym in &months {
            let cycle = 0.3 * (std::f64::consts::TAU * (ym.month as f64 - 7.0) / 12.0).cos();
            let v = BEXT_LOG_MEAN + cycle - 0.3 * p[1] / 1000.0 + 0.2 * normal(&mut rng);
            dataset
                .covariates
                .set_varying(crate::visibility::BEXT_COVARIATE, &s.site_id, *ym, v.exp());
        }
    }
}

/// Co-pollutant observations at every site-month of `dataset`, built by
/// scaling `pm10_median(site, month)` by the ratio field. Needs the
/// extinction covariate from `synth_bext`.
pub fn synth_ratio_observations(
    dataset: &SynthDataset,
    spec: &RatioWorldSpec,
    seed: u64,
    pm10_median: impl Fn(&str, YearMonth) -> Result<f64>,
) -> Result<Vec<MonthlyObservation>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let site_noise: BTreeMap<&str, f64> = dataset
        .sites
        .iter()
        .map(|s| (s.site_id.as_str(), spec.site_sd * normal(&mut rng)))
        .collect();
    let points: BTreeMap<&str, Point> = dataset.sites.iter().map(|s| (s.site_id.as_str(), s.point())).collect();
    let mut out = Vec::new();
    for o in &dataset.observations {
        let ym = o.year_month();
        let bext = dataset
            .covariates
            .varying(crate::visibility::BEXT_COVARIATE, &o.site_id, ym)?;
        let lr = spec.log_ratio(points[o.site_id.as_str()], ym, bext.ln())
            + site_noise[o.site_id.as_str()]
            + spec.noise_sd * normal(&mut rng);
        out.push(MonthlyObservation {
            mean_value: lr.exp() * pm10_median(&o.site_id, ym)?,
            ..o.clone()
        });
    }
    Ok(out)
}
