//! Run configuration: a TOML file with one section per stage.
//!
//! Relative paths resolve against the directory holding the config file.
//! `--set section.key=value` overrides any key before validation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pmspace::data::DomainBox;
use pmspace::eval::SynthConfig;
use pmspace::ratio::RatioOptions;
use pmspace::stm::{FitOptions, Stage1Options, Stage2Options};
use pmspace::visibility::{EmConfig, KoshmeiderConfig};
use pmspace::{Transform, YearMonth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub ratio: RatioSection,
    #[serde(default)]
    pub cv: CvSection,
    #[serde(default)]
    pub diagnose: DiagnoseSection,
    #[serde(default)]
    pub visibility: VisibilitySection,
    #[serde(default)]
    pub synth: SynthSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// lon_min, lon_max, lat_min, lat_max
    pub domain: [f64; 4],
    pub sites: Option<PathBuf>,
    pub daily: Option<PathBuf>,
    pub monthly: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub pm25_monthly: Option<PathBuf>,
    pub bext: Option<PathBuf>,
    pub locations: Option<PathBuf>,
    pub visibility: Option<PathBuf>,
    pub stations: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub ratio_model: Option<PathBuf>,
}

impl Default for DataPaths {
    fn default() -> Self {
        let d = DomainBox::NORTHEAST_US;
        DataPaths {
            domain: [d.lon_min, d.lon_max, d.lat_min, d.lat_max],
            sites: None,
            daily: None,
            monthly: None,
            covariates: None,
            pm25_monthly: None,
            bext: None,
            locations: None,
            visibility: None,
            stations: None,
            calibration: None,
            model: None,
            ratio_model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub transform: String,
    pub tv_covariates: Vec<String>,
    pub ti_covariates: Vec<String>,
    pub tol: f64,
    pub max_iter: usize,
    pub surface_knots: usize,
    pub smooth_knots: usize,
    pub spatial_knots: usize,
    pub surface_gamma: f64,
    pub stage2_gamma: f64,
    pub seasonal_lambda_floor: bool,
    pub min_site_obs: usize,
    pub heteroscedastic: bool,
    pub kappa: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let s1 = Stage1Options::default();
        let s2 = Stage2Options::default();
        ModelSection {
            transform: s1.transform.name().into(),
            tv_covariates: Vec::new(),
            ti_covariates: Vec::new(),
            tol: s1.tol,
            max_iter: s1.max_iter,
            surface_knots: s1.surface_knots,
            smooth_knots: s1.smooth_knots,
            spatial_knots: s2.spatial_knots,
            surface_gamma: s1.surface_gamma,
            stage2_gamma: s2.gamma,
            seasonal_lambda_floor: s1.seasonal_lambda_floor,
            min_site_obs: s1.min_site_obs,
            heteroscedastic: s2.heteroscedastic,
            kappa: s2.kappa,
        }
    }
}

impl ModelSection {
    pub fn transform(&self) -> Result<Transform> {
        Transform::parse(&self.transform).context("model.transform")
    }

    pub fn stage2(&self) -> Stage2Options {
        Stage2Options {
            spatial_knots: self.spatial_knots,
            smooth_knots: self.smooth_knots,
            heteroscedastic: self.heteroscedastic,
            kappa: self.kappa,
            gamma: self.stage2_gamma,
        }
    }

    pub fn fit_options(&self) -> Result<FitOptions> {
        Ok(FitOptions {
            stage1: Stage1Options {
                transform: self.transform()?,
                tol: self.tol,
                max_iter: self.max_iter,
                surface_knots: self.surface_knots,
                smooth_knots: self.smooth_knots,
                surface_gamma: self.surface_gamma,
                seasonal_lambda_floor: self.seasonal_lambda_floor,
                min_site_obs: self.min_site_obs,
            },
            stage2: self.stage2(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    /// `YYYY-MM`; defaults to the model's first month.
    pub first_month: Option<String>,
    pub last_month: Option<String>,
}

impl PredictSection {
    pub fn range(&self, first: YearMonth, last: YearMonth) -> Result<Vec<YearMonth>> {
        let a = match &self.first_month {
            Some(s) => parse_month(s).context("predict.first_month")?,
            None => first,
        };
        let b = match &self.last_month {
            Some(s) => parse_month(s).context("predict.last_month")?,
            None => last,
        };
        if b < a {
            bail!("predict.last_month {b} precedes predict.first_month {a}");
        }
        Ok((a.ordinal()..=b.ordinal()).map(YearMonth::from_ordinal).collect())
    }
}

pub fn parse_month(s: &str) -> Result<YearMonth> {
    let (y, m) = s
        .trim()
        .split_once('-')
        .with_context(|| format!("'{s}' is not a YYYY-MM month"))?;
    Ok(YearMonth::new(
        y.parse().with_context(|| format!("'{s}' has an invalid year"))?,
        m.parse().with_context(|| format!("'{s}' has an invalid month"))?,
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatioSection {
    pub tv_covariates: Vec<String>,
    pub ti_covariates: Vec<String>,
    /// Empty to leave the visibility proxy out.
    pub vis_covariate: String,
    pub trend_origin: i32,
    pub first_year: i32,
    pub last_year: i32,
    pub tol: f64,
    pub max_iter: usize,
    pub surface_knots: usize,
}

impl Default for RatioSection {
    fn default() -> Self {
        let o = RatioOptions::default();
        RatioSection {
            tv_covariates: Vec::new(),
            ti_covariates: Vec::new(),
            vis_covariate: o.vis_covariate.unwrap_or_default(),
            trend_origin: o.trend_origin,
            first_year: o.first_year,
            last_year: o.last_year,
            tol: o.tol,
            max_iter: o.max_iter,
            surface_knots: o.surface_knots,
        }
    }
}

impl RatioSection {
    pub fn options(&self, model: &ModelSection) -> RatioOptions {
        RatioOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            surface_knots: self.surface_knots,
            smooth_knots: model.smooth_knots,
            surface_gamma: model.surface_gamma,
            trend_origin: self.trend_origin,
            vis_covariate: (!self.vis_covariate.is_empty()).then(|| self.vis_covariate.clone()),
            first_year: self.first_year,
            last_year: self.last_year,
            stage2: model.stage2(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvSection {
    pub folds: usize,
    pub seed: u64,
    pub boundary_sites: Vec<String>,
    /// `two_stage` or `ratio`.
    pub model: String,
}

impl Default for CvSection {
    fn default() -> Self {
        CvSection {
            folds: 10,
            seed: 1,
            boundary_sites: Vec::new(),
            model: "two_stage".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    pub min_cooccur: usize,
    pub min_obs: usize,
    pub max_lag: usize,
    pub bin_width_km: f64,
    pub max_distance_km: f64,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        DiagnoseSection {
            min_cooccur: pmspace::eval::DEFAULT_MIN_COOCCUR,
            min_obs: pmspace::eval::DEFAULT_MIN_OBS,
            max_lag: pmspace::eval::DEFAULT_MAX_LAG,
            bin_width_km: 25.0,
            max_distance_km: 500.0,
        }
    }
}

impl DiagnoseSection {
    pub fn edges(&self) -> Result<Vec<f64>> {
        if !(self.bin_width_km > 0.0) || !(self.max_distance_km >= self.bin_width_km) {
            bail!("diagnose.bin_width_km must be positive and no larger than diagnose.max_distance_km");
        }
        let n = (self.max_distance_km / self.bin_width_km).round() as usize;
        Ok((0..=n).map(|k| k as f64 * self.bin_width_km).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisibilitySection {
    pub seed: Option<u64>,
    pub iterations: usize,
    pub keep: usize,
    pub rh_knots: usize,
    pub space_knots: usize,
    pub k: f64,
    pub rayleigh: f64,
    pub floor: f64,
    pub min_visibility: f64,
    pub max_rh: f64,
}

impl Default for VisibilitySection {
    fn default() -> Self {
        let em = EmConfig::default();
        let k = KoshmeiderConfig::default();
        VisibilitySection {
            seed: None,
            iterations: em.iterations,
            keep: em.keep,
            rh_knots: em.rh_knots,
            space_knots: em.space_knots,
            k: k.k,
            rayleigh: k.rayleigh,
            floor: k.floor,
            min_visibility: k.min_visibility,
            max_rh: k.max_rh,
        }
    }
}

impl VisibilitySection {
    pub fn em(&self) -> Result<EmConfig> {
        let seed = self
            .seed
            .context("visibility.seed is required for the stochastic EM steps")?;
        Ok(EmConfig {
            iterations: self.iterations,
            keep: self.keep,
            seed,
            rh_knots: self.rh_knots,
            space_knots: self.space_knots,
        })
    }

    pub fn koshmeider(&self) -> KoshmeiderConfig {
        KoshmeiderConfig {
            k: self.k,
            rayleigh: self.rayleigh,
            floor: self.floor,
            min_visibility: self.min_visibility,
            max_rh: self.max_rh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub seed: Option<u64>,
    pub n_sites: usize,
    pub n_months: usize,
    pub start: String,
    pub sigma_mu: f64,
    pub sigma_t: f64,
    pub obs_prob: f64,
    /// `none`, `seasonal` or `constant`.
    pub ratio_world: String,
    pub constant_ratio: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let r = SynthConfig::reference();
        SynthSection {
            seed: None,
            n_sites: r.n_sites,
            n_months: r.n_months,
            start: r.start.to_string(),
            sigma_mu: r.sigma_mu,
            sigma_t: r.sigma_t[0],
            obs_prob: r.obs_prob,
            ratio_world: "none".into(),
            constant_ratio: 0.6,
        }
    }
}

impl SynthSection {
    pub fn config(&self, domain: DomainBox) -> Result<SynthConfig> {
        let mut c = SynthConfig::reference();
        c.n_sites = self.n_sites;
        c.n_months = self.n_months;
        c.start = parse_month(&self.start).context("synth.start")?;
        c.sigma_mu = self.sigma_mu;
        c.sigma_t = vec![self.sigma_t];
        c.obs_prob = self.obs_prob;
        c.domain = domain;
        Ok(c)
    }
}

impl RunConfig {
    /// Parses TOML text with overrides applied, resolving relative paths
    /// against `base`.
    pub fn from_toml(text: &str, base: &Path, overrides: &[String]) -> Result<RunConfig> {
        let mut value: toml::Value = toml::from_str(text).context("config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = value.try_into().context("invalid config")?;
        cfg.resolve(base);
        Ok(cfg)
    }

    /// Loads a TOML config, or the config embedded in a run manifest.
    pub fn load(path: &Path, overrides: &[String]) -> Result<(RunConfig, String)> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let text = if path.extension().is_some_and(|e| e == "json") {
            let m: serde_json::Value =
                serde_json::from_str(&raw).with_context(|| format!("{} is not a run manifest", path.display()))?;
            m["config_toml"]
                .as_str()
                .with_context(|| format!("{} has no config_toml field", path.display()))?
                .to_string()
        } else {
            raw
        };
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cfg = RunConfig::from_toml(&text, &base, overrides)?;
        Ok((cfg, text))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        let d = &mut self.data;
        for p in [
            &mut d.sites,
            &mut d.daily,
            &mut d.monthly,
            &mut d.covariates,
            &mut d.pm25_monthly,
            &mut d.bext,
            &mut d.locations,
            &mut d.visibility,
            &mut d.stations,
            &mut d.calibration,
            &mut d.model,
            &mut d.ratio_model,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn domain(&self) -> DomainBox {
        let [lon_min, lon_max, lat_min, lat_max] = self.data.domain;
        DomainBox {
            lon_min,
            lon_max,
            lat_min,
            lat_max,
        }
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    pub fn model_path(&self) -> PathBuf {
        self.data.model.clone().unwrap_or_else(|| self.output("model.pmspace"))
    }

    pub fn ratio_model_path(&self) -> PathBuf {
        self.data.ratio_model.clone().unwrap_or_else(|| self.output("ratio_model.pmspace"))
    }
}

/// Applies `a.b.c=value`; the value is parsed as TOML and falls back to a
/// plain string.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override '{spec}' is not key=value"))?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .with_context(|| format!("override '{key}': '{part}' is not a section"))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .with_context(|| format!("override '{key}' does not name a key in a section"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_resolution() {
        let text = "output_dir = \"out\"\n[data]\nsites = \"s.csv\"\n[model]\nsurface_knots = 80\n";
        let cfg = RunConfig::from_toml(
            text,
            Path::new("/base"),
            &["model.surface_knots=40".into(), "cv.seed=7".into(), "model.transform=sqrt".into()],
        )
        .unwrap();
        assert_eq!(cfg.model.surface_knots, 40);
        assert_eq!(cfg.cv.seed, 7);
        assert_eq!(cfg.model.transform, "sqrt");
        assert_eq!(cfg.output_dir, Path::new("/base/out"));
        assert_eq!(cfg.data.sites.as_deref(), Some(Path::new("/base/s.csv")));
        assert_eq!(cfg.model_path(), Path::new("/base/out/model.pmspace"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("output_dir = \"o\"\n[model]\nknots = 3\n", Path::new("."), &[]).unwrap_err();
        assert!(format!("{err:#}").contains("knots"));
        assert!(RunConfig::from_toml("output_dir = \"o\"", Path::new("."), &["nokey".into()]).is_err());
    }

    #[test]
    fn month_ranges() {
        let p = PredictSection {
            first_month: Some("2000-11".into()),
            last_month: Some("2001-02".into()),
        };
        let first = YearMonth::new(2000, 1).unwrap();
        let r = p.range(first, first).unwrap();
        assert_eq!(r.len(), 4);
        assert!(parse_month("2000/1").is_err());
        assert!(PredictSection::default().range(first, YearMonth::new(2000, 3).unwrap()).unwrap().len() == 3);
    }

    #[test]
    fn stochastic_steps_need_a_seed() {
        assert!(VisibilitySection::default().em().is_err());
    }
}
