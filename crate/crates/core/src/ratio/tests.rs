use approx::assert_relative_eq;

use super::*;
use crate::eval::{synth_bext, synth_generate, synth_ratio_observations, RatioWorldSpec, SynthConfig, SynthDataset};
use crate::splines::BasisKind;
use crate::stm::{fit_model, read_model, write_model, FitOptions};

struct World {
    ds: SynthDataset,
    pm10: PMModel,
    pm25: Panel,
}

fn world(spec: &RatioWorldSpec, seed: u64) -> World {
    let cfg = SynthConfig::reference();
    let mut ds = synth_generate(&cfg, seed).unwrap();
    synth_bext(&mut ds, seed + 100);
    let panel = Panel::from_sites(&ds.sites, ds.observations.clone()).unwrap();
    let pm10 = fit_model(
        &panel,
        &ds.covariates,
        &cfg.tv_names(),
        &cfg.ti_names(),
        ds.projection,
        &FitOptions::default(),
    )
    .unwrap();
    let obs = synth_ratio_observations(&ds, spec, seed + 200, |site, ym| {
        let loc = Location::new(site, panel.locations[site]);
        Ok(pm10.predict(&loc, ym, &ds.covariates)?.conc_median)
    })
    .unwrap();
    let pm25 = Panel::from_sites(&ds.sites, obs).unwrap();
    World { ds, pm10, pm25 }
}

fn fit(w: &World, options: &RatioOptions) -> RatioModel {
    fit_ratio(&w.pm25, &w.pm10, &w.ds.covariates, &[], &["urban".to_string()], options).unwrap()
}

#[test]
fn constant_ratio_is_recovered() {
    let w = world(&RatioWorldSpec::constant(0.6), 11);
    let m = fit(&w, &RatioOptions::default());
    let worst = m
        .residuals
        .iter()
        .map(|r| (r.fitted - 0.6f64.ln()).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.02, "max deviation {worst}");
    for t in &m.regression.terms {
        assert!(t.edf <= BasisKind::Uni1d.null_dim() as f64 + 0.1, "{} edf {}", t.name, t.edf);
    }
    for s in &w.ds.sites {
        let loc = Location::new(s.site_id.clone(), s.point());
        for ym in [YearMonth::new(2000, 1).unwrap(), YearMonth::new(2001, 7).unwrap()] {
            let p = predict_pm25(&m, &w.pm10, &loc, ym, &w.ds.covariates).unwrap();
            let rel = p.prediction.conc_median / (0.6 * p.pm10_pred) - 1.0;
            assert!(rel.abs() < 0.03, "{} {ym}: {rel}", s.site_id);
            assert!(!p.prediction.flags.contains(&Flag::RatioExceedsOne));
        }
    }
}

#[test]
fn scaling_and_flag_above_one() {
    let w = world(&RatioWorldSpec::constant(0.1f64.exp()), 12);
    let m = fit(&w, &RatioOptions::default());
    let s = &w.ds.sites[0];
    let loc = Location::new(s.site_id.clone(), s.point());
    let ym = YearMonth::new(2000, 6).unwrap();
    let p = predict_pm25(&m, &w.pm10, &loc, ym, &w.ds.covariates).unwrap();
    assert_relative_eq!(p.log_ratio, 0.1, epsilon = 0.02);
    assert_relative_eq!(p.prediction.conc_median, p.ratio_hat() * p.pm10_pred, max_relative = 1e-12);
    assert!(p.prediction.flags.contains(&Flag::RatioExceedsOne));
    assert_eq!(p.prediction.flag_names(), "ratio_exceeds_one");
}

#[test]
fn variance_adds_the_dense_model() {
    let w = world(&RatioWorldSpec::seasonal(), 13);
    let m = fit(&w, &RatioOptions::default());
    let s = &w.ds.sites[3];
    let loc = Location::new(s.site_id.clone(), s.point());
    let ym = YearMonth::new(2001, 2).unwrap();
    let p10 = w.pm10.predict(&loc, ym, &w.ds.covariates).unwrap();
    let p = predict_pm25(&m, &w.pm10, &loc, ym, &w.ds.covariates).unwrap();
    let (lr, parts, _) = m.predict_log_ratio(&loc, ym, p10.conc_median, &w.ds.covariates).unwrap();
    assert_relative_eq!(p.prediction.var, parts.total() + p10.var, max_relative = 1e-12);
    assert_relative_eq!(p.prediction.y_hat, lr + p10.y_hat, max_relative = 1e-12);

    // Every row sits in exactly one seasonal surface.
    let total: usize = m.seasonal.values().map(|s| s.n_obs).sum();
    assert_eq!(total, w.pm25.observations.len());
    for season in Season::ALL {
        let n = w.pm25.observations.iter().filter(|o| o.year_month().season() == season).count();
        assert_eq!(m.seasonal[&season].n_obs, n);
    }
}

#[test]
fn flat_trend_stays_within_its_band() {
    let w = world(&RatioWorldSpec::seasonal(), 14);
    let m = fit(&w, &RatioOptions::default());
    let months: Vec<f64> = (145..=168).map(|t| t as f64).collect();
    let (mt, se) = m.regression.term_predict(TREND_TERM, &TermData::Scalars(months.clone())).unwrap();
    let mean = mt.iter().sum::<f64>() / mt.len() as f64;
    let inside = mt
        .iter()
        .zip(se.iter())
        .filter(|(v, s)| (*v - mean).abs() <= 3.0 * *s + 1e-12)
        .count();
    assert!(inside as f64 >= 0.95 * months.len() as f64, "{inside} of {}", months.len());
}

#[test]
fn empty_season_gives_null_surface() {
    let w = world(&RatioWorldSpec::seasonal(), 15);
    let no_summer = Panel::new(
        w.pm25.locations.clone(),
        w.pm25
            .observations
            .iter()
            .filter(|o| o.year_month().season() != Season::Summer)
            .cloned()
            .collect(),
    )
    .unwrap();
    let m = fit_ratio(&no_summer, &w.pm10, &w.ds.covariates, &[], &["urban".into()], &RatioOptions::default()).unwrap();
    assert!(m.seasonal[&Season::Summer].degenerate);
    assert_eq!(m.seasonal[&Season::Summer].n_obs, 0);
    assert!(m.sigma2_season(Season::Summer) > 0.0);
    let s = &w.ds.sites[0];
    let loc = Location::new(s.site_id.clone(), s.point());
    let p = predict_pm25(&m, &w.pm10, &loc, YearMonth::new(2000, 7).unwrap(), &w.ds.covariates).unwrap();
    assert!(p.prediction.flags.contains(&Flag::DegenerateMonth));
}

#[test]
fn range_and_input_errors() {
    let w = world(&RatioWorldSpec::constant(0.6), 16);
    let m = fit(
        &w,
        &RatioOptions {
            first_year: 2001,
            ..Default::default()
        },
    );
    let s = &w.ds.sites[0];
    let loc = Location::new(s.site_id.clone(), s.point());
    let err = predict_pm25(&m, &w.pm10, &loc, YearMonth::new(2000, 5).unwrap(), &w.ds.covariates).unwrap_err();
    assert!(matches!(err, Error::MonthOutOfRange(_)));
    let err = m
        .predict_log_ratio(&loc, YearMonth::new(2001, 5).unwrap(), 0.0, &w.ds.covariates)
        .unwrap_err();
    assert!(matches!(err, Error::NonPositiveValue { .. }));

    let mut cov = w.ds.covariates.clone();
    cov.set_varying(crate::visibility::BEXT_COVARIATE, &s.site_id, YearMonth::new(2000, 1).unwrap(), 0.0);
    assert!(fit_ratio(&w.pm25, &w.pm10, &cov, &[], &["urban".into()], &RatioOptions::default()).is_err());
}

#[test]
fn model_file_round_trip() {
    let w = world(&RatioWorldSpec::seasonal(), 17);
    let m = fit(&w, &RatioOptions::default());
    let mut buf = Vec::new();
    write_model(&mut buf, &m).unwrap();
    let back: RatioModel = read_model(buf.as_slice()).unwrap();
    assert_eq!(back, m);
    assert!(read_model::<PMModel, _>(buf.as_slice()).is_err());

    let s = &w.ds.sites[2];
    let loc = Location::new(s.site_id.clone(), s.point());
    let preds = vec![predict_pm25(&m, &w.pm10, &loc, YearMonth::new(2000, 3).unwrap(), &w.ds.covariates).unwrap()];
    let mut out = Vec::new();
    write_ratio_predictions(&mut out, &preds).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.lines().next().unwrap().ends_with("flags,ratio_hat,pm10_pred"));
}
