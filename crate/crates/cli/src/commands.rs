use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use pmspace::data::io::{
    read_covariates_path, read_daily_path, read_monthly_path, read_sites_path, write_covariates, write_monthly,
    write_sites,
};
use pmspace::data::{aggregate_monthly, CovariateFrame, Projection, Site};
use pmspace::eval::{
    assign_folds, pooled_metrics, residual_acf, run_cv, semivariogram, synth_bext, synth_generate,
    synth_ratio_observations, write_acf, write_cv_rows, write_metrics, write_semivariogram, CvRecipe, CvRow,
    FoldAssignment, RatioWorldSpec, Scale, TwoStageRecipe,
};
use pmspace::ratio::{fit_ratio, predict_pm25, write_ratio_predictions, RatioModel, RatioRecipe};
use pmspace::stm::{fit_model, load_model, save_model, write_predictions, Location, PMModel, Panel};
use pmspace::visibility::{
    adjust_all, convert_all, fit_rh_calibration, monthly_bext_table, read_calibration, read_visibility,
    smooth_all_days, write_bext, write_calibration, write_intervals, BEXT_COVARIATE,
};
use pmspace::{Point, Season, YearMonth};

use crate::manifest::RunContext;

/// Input path from the config, or the standard file name in the output
/// directory so that chained commands need only `output_dir`.
fn input_path(ctx: &mut RunContext, configured: Option<PathBuf>, default_name: &str, key: &str) -> Result<PathBuf> {
    let path = configured.unwrap_or_else(|| ctx.cfg.output(default_name));
    ctx.input(&path, key)
}

fn projection(ctx: &RunContext) -> Result<Projection> {
    Projection::new(ctx.cfg.domain()).context("data.domain")
}

fn load_sites(ctx: &mut RunContext, proj: &Projection) -> Result<Vec<Site>> {
    let path = input_path(ctx, ctx.cfg.data.sites.clone(), "sites.csv", "data.sites")?;
    read_sites_path(&path, proj).with_context(|| format!("reading {}", path.display()))
}

fn load_panel(ctx: &mut RunContext, sites: &[Site], monthly: Option<PathBuf>, name: &str, key: &str) -> Result<Panel> {
    let path = input_path(ctx, monthly, name, key)?;
    let obs = read_monthly_path(&path).with_context(|| format!("reading {}", path.display()))?;
    Panel::from_sites(sites, obs).with_context(|| format!("matching {} to the site list", path.display()))
}

/// Covariates from `data.covariates` (optional when left at its default)
/// merged with the monthly extinction table from `data.bext`.
fn load_covariates(ctx: &mut RunContext) -> Result<CovariateFrame> {
    let mut frame = match ctx.cfg.data.covariates.clone() {
        Some(p) => {
            let p = ctx.input(&p, "data.covariates")?;
            read_covariates_path(&p).with_context(|| format!("reading {}", p.display()))?
        }
        None => {
            let p = ctx.cfg.output("covariates.csv");
            if p.exists() {
                let p = ctx.input(&p, "data.covariates")?;
                read_covariates_path(&p).with_context(|| format!("reading {}", p.display()))?
            } else {
                CovariateFrame::default()
            }
        }
    };
    if let Some(p) = ctx.cfg.data.bext.clone() {
        let p = ctx.input(&p, "data.bext")?;
        read_bext_into(&p, &mut frame)?;
    }
    Ok(frame)
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<&'a str> {
    rec.get(idx)
        .map(str::trim)
        .with_context(|| format!("line {line}: missing field '{name}'"))
}

fn column(headers: &csv::StringRecord, names: &[&str], path: &Path) -> Result<usize> {
    names
        .iter()
        .find_map(|n| headers.iter().position(|h| h.trim() == *n))
        .with_context(|| format!("{}: missing column '{}'", path.display(), names.join("' or '")))
}

/// Reads `id, lon, lat` rows; the id column may be named `location_id`,
/// `site_id` or `station_id`. Points outside the domain are kept and
/// flagged at prediction time.
pub fn read_locations(path: &Path, proj: &Projection) -> Result<Vec<Location>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let id = column(&headers, &["location_id", "site_id", "station_id"], path)?;
    let lon = column(&headers, &["lon"], path)?;
    let lat = column(&headers, &["lat"], path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let parse = |idx: usize, name: &str| -> Result<f64> {
            let s = field(&rec, idx, name, line)?;
            s.parse()
                .with_context(|| format!("{} line {line}: field '{name}' is not a number: '{s}'", path.display()))
        };
        let (x, y) = (parse(lon, "lon")?, parse(lat, "lat")?);
        out.push(Location::new(field(&rec, id, "location_id", line)?, proj.project_unchecked(x, y)));
    }
    if out.is_empty() {
        bail!("{} lists no locations", path.display());
    }
    Ok(out)
}

/// Reads a monthly extinction table written by `vis-smooth`.
fn read_bext_into(path: &Path, frame: &mut CovariateFrame) -> Result<()> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let id = column(&headers, &["location_id", "site_id"], path)?;
    let year = column(&headers, &["year"], path)?;
    let month = column(&headers, &["month"], path)?;
    let value = column(&headers, &["bext"], path)?;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let ctx = || format!("{} line {line}", path.display());
        let ym = YearMonth::new(
            field(&rec, year, "year", line)?.parse().with_context(ctx)?,
            field(&rec, month, "month", line)?.parse().with_context(ctx)?,
        )?;
        let v: f64 = field(&rec, value, "bext", line)?.parse().with_context(ctx)?;
        frame.set_varying(BEXT_COVARIATE, field(&rec, id, "location_id", line)?, ym, v);
    }
    Ok(())
}

/// Prediction locations: `data.locations` when given, else the sites.
fn load_locations(ctx: &mut RunContext, proj: &Projection) -> Result<Vec<Location>> {
    match ctx.cfg.data.locations.clone() {
        Some(p) => {
            let p = ctx.input(&p, "data.locations")?;
            read_locations(&p, proj)
        }
        None => Ok(load_sites(ctx, proj)?
            .iter()
            .map(|s| Location::new(s.site_id.clone(), s.point()))
            .collect()),
    }
}

fn load_pm_model(ctx: &mut RunContext) -> Result<PMModel> {
    let path = ctx.cfg.model_path();
    let path = ctx.input(&path, "data.model")?;
    load_model(&path).with_context(|| format!("loading model {}", path.display()))
}

fn load_ratio_model(ctx: &mut RunContext) -> Result<RatioModel> {
    let path = ctx.cfg.ratio_model_path();
    let path = ctx.input(&path, "data.ratio_model")?;
    load_model(&path).with_context(|| format!("loading ratio model {}", path.display()))
}

pub fn ingest(ctx: &mut RunContext) -> Result<()> {
    let path = input_path(ctx, ctx.cfg.data.daily.clone(), "daily.csv", "data.daily")?;
    let records = read_daily_path(&path).with_context(|| format!("reading {}", path.display()))?;
    let agg = aggregate_monthly(&records, None);
    log::info!(
        "{} daily records: {} site-months kept, {} excluded as incomplete, {} values rejected",
        records.len(),
        agg.observations.len(),
        agg.excluded.len(),
        agg.rejected.len()
    );
    write_monthly(ctx.create("monthly.csv")?, &agg.observations)?;
    let mut w = csv::Writer::from_writer(ctx.create("excluded.csv")?);
    w.write_record(["site_id", "year", "month", "n_days", "n_scheduled"])?;
    for (site, ym, nd, ns) in &agg.excluded {
        w.write_record([site.clone(), ym.year.to_string(), ym.month.to_string(), nd.to_string(), ns.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(ctx.create("rejected.csv")?);
    w.write_record(["site_id", "date", "reason"])?;
    for r in &agg.rejected {
        w.write_record([r.site_id.clone(), r.date.to_string(), r.reason.clone()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn fit(ctx: &mut RunContext) -> Result<()> {
    let proj = projection(ctx)?;
    let sites = load_sites(ctx, &proj)?;
    let panel = load_panel(ctx, &sites, ctx.cfg.data.monthly.clone(), "monthly.csv", "data.monthly")?;
    let cov = load_covariates(ctx)?;
    let m = &ctx.cfg.model;
    let model = fit_model(&panel, &cov, &m.tv_covariates, &m.ti_covariates, proj, &m.fit_options()?)?;
    log::info!(
        "fitted {} sites over {} to {} in {} backfitting iterations (last change {:.2e})",
        model.stage1.site_effects.len(),
        model.stage1.first_month(),
        model.stage1.last_month(),
        model.stage1.backfit_iterations,
        model.stage1.last_change
    );
    let path = ctx.cfg.output("model.pmspace");
    save_model(&path, &model)?;
    ctx.produced(path);

    let mut w = csv::Writer::from_writer(ctx.create("site_effects.csv")?);
    w.write_record(["site_id", "x", "y", "effect", "variance", "n_obs"])?;
    for s in &model.stage1.site_effects {
        w.write_record([
            s.site_id.clone(),
            s.point[0].to_string(),
            s.point[1].to_string(),
            s.effect.to_string(),
            s.variance.to_string(),
            s.n_obs.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(ctx.create("surfaces.csv")?);
    w.write_record(["year", "month", "n_obs", "edf", "rss", "sigma2", "sigma2_used", "degenerate"])?;
    for (ym, s) in &model.stage1.surfaces {
        w.write_record([
            ym.year.to_string(),
            ym.month.to_string(),
            s.n_obs.to_string(),
            s.edf.to_string(),
            s.rss.to_string(),
            s.sigma2.to_string(),
            model.stage1.sigma2_t(*ym).to_string(),
            s.degenerate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn predict(ctx: &mut RunContext) -> Result<()> {
    let model = load_pm_model(ctx)?;
    let proj = model.projection;
    let locations = load_locations(ctx, &proj)?;
    let cov = load_covariates(ctx)?;
    let months = ctx
        .cfg
        .predict
        .range(model.stage1.first_month(), model.stage1.last_month())?;
    let per_location: Vec<Vec<_>> = locations
        .par_iter()
        .map(|loc| {
            months
                .iter()
                .map(|&m| model.predict(loc, m, &cov).with_context(|| format!("predicting {} {m}", loc.id)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let preds: Vec<_> = per_location.into_iter().flatten().collect();
    let extrapolated = preds
        .iter()
        .filter(|p| p.flags.contains(&pmspace::stm::Flag::Extrapolation))
        .count();
    if extrapolated > 0 {
        log::warn!("{extrapolated} predictions lie outside the fitting domain");
    }
    log::info!("{} predictions at {} locations", preds.len(), locations.len());
    write_predictions(ctx.create("predictions.csv")?, &preds)?;
    Ok(())
}

pub fn predict_longterm(ctx: &mut RunContext) -> Result<()> {
    let model = load_pm_model(ctx)?;
    let proj = model.projection;
    let locations = load_locations(ctx, &proj)?;
    let cov = load_covariates(ctx)?;
    let months = ctx
        .cfg
        .predict
        .range(model.stage1.first_month(), model.stage1.last_month())?;
    let preds: Vec<_> = locations
        .par_iter()
        .map(|loc| {
            model
                .predict_longterm(loc, &months, &cov)
                .with_context(|| format!("long-term prediction at {}", loc.id))
        })
        .collect::<Result<_>>()?;
    log::info!(
        "long-term means over {} months ({} to {}) at {} locations",
        months.len(),
        months[0],
        months[months.len() - 1],
        preds.len()
    );
    write_predictions(ctx.create("predictions_longterm.csv")?, &preds)?;
    Ok(())
}

pub fn ratio_fit(ctx: &mut RunContext) -> Result<()> {
    let pm10 = load_pm_model(ctx)?;
    let proj = pm10.projection;
    let sites = load_sites(ctx, &proj)?;
    let panel = load_panel(
        ctx,
        &sites,
        ctx.cfg.data.pm25_monthly.clone(),
        "pm25_monthly.csv",
        "data.pm25_monthly",
    )?;
    let cov = load_covariates(ctx)?;
    let r = &ctx.cfg.ratio;
    let opts = r.options(&ctx.cfg.model);
    let model = fit_ratio(&panel, &pm10, &cov, &r.tv_covariates, &r.ti_covariates, &opts)?;
    log::info!(
        "ratio model on {} sites in {} backfitting iterations",
        model.site_effects.len(),
        model.backfit_iterations
    );
    for season in Season::ALL {
        log::info!("{} residual variance {:.4}", season.name(), model.sigma2_season(season));
    }
    let path = ctx.cfg.output("ratio_model.pmspace");
    save_model(&path, &model)?;
    ctx.produced(path);
    Ok(())
}

pub fn ratio_predict(ctx: &mut RunContext) -> Result<()> {
    let pm10 = load_pm_model(ctx)?;
    let ratio = load_ratio_model(ctx)?;
    let proj = pm10.projection;
    let locations = load_locations(ctx, &proj)?;
    let cov = load_covariates(ctx)?;
    let first = pm10
        .stage1
        .first_month()
        .max(YearMonth::new(ratio.options.first_year, 1)?);
    let last = pm10
        .stage1
        .last_month()
        .min(YearMonth::new(ratio.options.last_year, 12)?);
    if last < first {
        bail!(
            "the PM10 model ({} to {}) does not overlap the ratio model years {}-{}",
            pm10.stage1.first_month(),
            pm10.stage1.last_month(),
            ratio.options.first_year,
            ratio.options.last_year
        );
    }
    let months = ctx.cfg.predict.range(first, last)?;
    let per_location: Vec<Vec<_>> = locations
        .par_iter()
        .map(|loc| {
            months
                .iter()
                .map(|&m| {
                    predict_pm25(&ratio, &pm10, loc, m, &cov).with_context(|| format!("predicting {} {m}", loc.id))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let preds: Vec<_> = per_location.into_iter().flatten().collect();
    log::info!("{} PM2.5 predictions at {} locations", preds.len(), locations.len());
    write_ratio_predictions(ctx.create("ratio_predictions.csv")?, &preds)?;
    Ok(())
}

fn load_intervals(ctx: &mut RunContext) -> Result<Vec<pmspace::visibility::ExtinctionInterval>> {
    let path = input_path(ctx, ctx.cfg.data.visibility.clone(), "visibility.csv", "data.visibility")?;
    let file = std::fs::File::open(&path).with_context(|| format!("cannot open {}", path.display()))?;
    let obs = read_visibility(file).with_context(|| format!("reading {}", path.display()))?;
    let summary = convert_all(&obs, &ctx.cfg.visibility.koshmeider())?;
    let dropped: usize = summary.rejected.values().sum();
    log::info!(
        "{} visibility readings: {} intervals, {} dropped",
        obs.len(),
        summary.intervals.len(),
        dropped
    );
    Ok(summary.intervals)
}

pub fn vis_calibrate(ctx: &mut RunContext) -> Result<()> {
    let em = ctx.cfg.visibility.em()?;
    let intervals = load_intervals(ctx)?;
    let fits: Vec<_> = Season::ALL
        .par_iter()
        .map(|&s| (s, fit_rh_calibration(&intervals, s, &em)))
        .collect();
    let mut curves = BTreeMap::new();
    for (season, fit) in fits {
        match fit {
            Ok(c) => {
                curves.insert(season, c);
            }
            Err(e) => log::warn!("no calibration for {}: {e}", season.name()),
        }
    }
    if curves.is_empty() {
        bail!("no season has enough visibility readings to calibrate");
    }
    write_calibration(ctx.create("calibration.csv")?, &curves)?;
    write_intervals(ctx.create("intervals.csv")?, &intervals)?;
    Ok(())
}

pub fn vis_smooth(ctx: &mut RunContext) -> Result<()> {
    let em = ctx.cfg.visibility.em()?;
    let proj = projection(ctx)?;
    let intervals = load_intervals(ctx)?;
    let cal_path = input_path(ctx, ctx.cfg.data.calibration.clone(), "calibration.csv", "data.calibration")?;
    let file = std::fs::File::open(&cal_path).with_context(|| format!("cannot open {}", cal_path.display()))?;
    let curves = read_calibration(file).with_context(|| format!("reading {}", cal_path.display()))?;
    let adjusted = adjust_all(&intervals, &curves)?;
    let st_path = input_path(ctx, ctx.cfg.data.stations.clone(), "stations.csv", "data.stations")?;
    let stations: BTreeMap<String, Point> = read_locations(&st_path, &proj)?
        .into_iter()
        .map(|l| (l.id, l.point))
        .collect();
    let (surfaces, skipped) = smooth_all_days(&adjusted, &stations, &em);
    log::info!("{} days smoothed, {} skipped", surfaces.len(), skipped.len());
    if surfaces.is_empty() {
        bail!("no visibility day has enough stations to smooth");
    }
    let targets: Vec<(String, Point)> = load_locations(ctx, &proj)?.into_iter().map(|l| (l.id, l.point)).collect();
    let rows = monthly_bext_table(&surfaces, &targets)?;
    write_bext(ctx.create("bext.csv")?, &rows)?;
    let mut w = csv::Writer::from_writer(ctx.create("skipped_days.csv")?);
    w.write_record(["date", "reason"])?;
    for (d, why) in &skipped {
        w.write_record([d.to_string(), why.clone()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_folds(ctx: &mut RunContext, folds: &FoldAssignment, boundary: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(ctx.create("folds.csv")?);
    w.write_record(["site_id", "fold", "role"])?;
    for (site, f) in &folds.folds {
        let role = if boundary.contains(site) {
            "boundary"
        } else if *f == folds.test_fold {
            "test"
        } else {
            "validation"
        };
        w.write_record([site.clone(), f.to_string(), role.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn cv_outputs<R: CvRecipe>(ctx: &mut RunContext, recipe: &R, panel: &Panel) -> Result<()> {
    let c = &ctx.cfg.cv;
    let boundary = c.boundary_sites.clone();
    for b in &boundary {
        if !panel.locations.contains_key(b) {
            bail!("cv.boundary_sites: '{b}' is not a known site");
        }
    }
    let folds = assign_folds(&panel.site_ids(), c.folds, c.seed)?;
    let result = run_cv(recipe, panel, &folds, &boundary)?;
    if result.leak_count() > 0 {
        bail!("{} held-out sites leaked into training", result.leak_count());
    }
    if result.rows.is_empty() {
        bail!("every cross-validation fold failed");
    }
    for (f, why) in &result.skipped {
        log::warn!("fold {f} produced no predictions: {why}");
    }
    log::info!(
        "cross-validated R2 {:.3} (transformed), {:.3} (concentration); coverage {:.3}",
        result.transformed.r2,
        result.concentration.r2,
        result.transformed.coverage
    );
    let mut rows = vec![
        ("pooled".to_string(), Scale::Transformed, result.transformed),
        ("pooled".to_string(), Scale::Concentration, result.concentration),
    ];
    let mut by_fold: BTreeMap<usize, Vec<CvRow>> = BTreeMap::new();
    for r in &result.rows {
        by_fold.entry(r.fold).or_default().push(r.clone());
    }
    for (f, fr) in &by_fold {
        match pooled_metrics(fr, recipe.transform()) {
            Ok((t, k)) => {
                rows.push((format!("fold_{f}"), Scale::Transformed, t));
                rows.push((format!("fold_{f}"), Scale::Concentration, k));
            }
            Err(e) => log::warn!("fold {f} metrics undefined: {e}"),
        }
    }
    write_cv_rows(ctx.create("cv_predictions.csv")?, &result.rows)?;
    write_metrics(ctx.create("metrics.csv")?, &rows)?;
    write_folds(ctx, &folds, &boundary)
}

pub fn cv(ctx: &mut RunContext) -> Result<()> {
    let proj = projection(ctx)?;
    let sites = load_sites(ctx, &proj)?;
    let cov = load_covariates(ctx)?;
    let m = ctx.cfg.model.clone();
    match ctx.cfg.cv.model.as_str() {
        "two_stage" => {
            let panel = load_panel(ctx, &sites, ctx.cfg.data.monthly.clone(), "monthly.csv", "data.monthly")?;
            let recipe = TwoStageRecipe {
                covariates: &cov,
                tv_names: m.tv_covariates.clone(),
                ti_names: m.ti_covariates.clone(),
                projection: proj,
                options: m.fit_options()?,
            };
            cv_outputs(ctx, &recipe, &panel)
        }
        "ratio" => {
            let pm10 = load_pm_model(ctx)?;
            let panel = load_panel(
                ctx,
                &sites,
                ctx.cfg.data.pm25_monthly.clone(),
                "pm25_monthly.csv",
                "data.pm25_monthly",
            )?;
            let r = ctx.cfg.ratio.clone();
            let recipe = RatioRecipe {
                pm10: &pm10,
                covariates: &cov,
                tv_names: r.tv_covariates.clone(),
                ti_names: r.ti_covariates.clone(),
                options: r.options(&m),
            };
            cv_outputs(ctx, &recipe, &panel)
        }
        other => bail!("cv.model must be 'two_stage' or 'ratio', not '{other}'"),
    }
}

pub fn diagnose(ctx: &mut RunContext) -> Result<()> {
    let model = load_pm_model(ctx)?;
    let d = ctx.cfg.diagnose.clone();
    let residuals: Vec<(String, YearMonth, f64)> = model
        .stage1
        .residuals
        .iter()
        .map(|r| (r.site_id.clone(), r.month, r.residual()))
        .collect();
    let locations: BTreeMap<String, Point> = model
        .stage1
        .site_effects
        .iter()
        .map(|s| (s.site_id.clone(), s.point))
        .collect();
    let sv = semivariogram(&residuals, &locations, &d.edges()?, d.min_cooccur);
    let acf = residual_acf(&residuals, d.min_obs, d.max_lag);
    write_semivariogram(ctx.create("semivariogram.csv")?, &sv)?;
    write_acf(ctx.create("acf.csv")?, &acf)?;
    let mut w = csv::Writer::from_writer(ctx.create("residuals.csv")?);
    w.write_record(["site_id", "year", "month", "y", "fitted", "residual"])?;
    for r in &model.stage1.residuals {
        w.write_record([
            r.site_id.clone(),
            r.month.year.to_string(),
            r.month.month.to_string(),
            r.y.to_string(),
            r.fitted.to_string(),
            r.residual().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn synth(ctx: &mut RunContext) -> Result<()> {
    let s = ctx.cfg.synth.clone();
    let seed = s.seed.context("synth.seed is required")?;
    let config = s.config(ctx.cfg.domain())?;
    let mut ds = synth_generate(&config, seed)?;
    synth_bext(&mut ds, seed.wrapping_add(1));
    log::info!(
        "{} sites, {} site-months from {}",
        ds.sites.len(),
        ds.observations.len(),
        config.start
    );
    write_sites(ctx.create("sites.csv")?, &ds.sites)?;
    write_monthly(ctx.create("monthly.csv")?, &ds.observations)?;
    write_covariates(ctx.create("covariates.csv")?, &ds.covariates)?;

    let mut w = csv::Writer::from_writer(ctx.create("truth.csv")?);
    w.write_record(["site_id", "year", "month", "oracle_mean", "site_mean", "monthly_surface", "tv_effect", "y"])?;
    for r in &ds.truth.rows {
        w.write_record([
            r.site_id.clone(),
            r.month.year.to_string(),
            r.month.month.to_string(),
            r.oracle_mean.to_string(),
            r.site_mean.to_string(),
            r.monthly_surface.to_string(),
            r.tv_effect.to_string(),
            r.y.to_string(),
        ])?;
    }
    w.flush()?;

    let spec = match s.ratio_world.as_str() {
        "none" => None,
        "seasonal" => Some(RatioWorldSpec::seasonal()),
        "constant" => Some(RatioWorldSpec::constant(s.constant_ratio)),
        other => bail!("synth.ratio_world must be none, seasonal or constant, not '{other}'"),
    };
    if let Some(spec) = spec {
        let truth: BTreeMap<(&str, YearMonth), f64> = ds
            .truth
            .rows
            .iter()
            .map(|r| ((r.site_id.as_str(), r.month), config.transform.inverse(r.y)))
            .collect();
        let pm25 = synth_ratio_observations(&ds, &spec, seed.wrapping_add(2), |site, ym| {
            truth
                .get(&(site, ym))
                .copied()
                .ok_or_else(|| pmspace::Error::invalid(format!("no synthetic value for {site} {ym}")))
        })?;
        write_monthly(ctx.create("pm25_monthly.csv")?, &pm25)?;
    }
    Ok(())
}
