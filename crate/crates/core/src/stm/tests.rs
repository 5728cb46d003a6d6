use std::sync::OnceLock;

use approx::assert_relative_eq;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::eval::{synth_generate, SynthConfig, SynthDataset};
use crate::gam::TermData;
use crate::types::Transform;

struct Reference {
    cfg: SynthConfig,
    ds: SynthDataset,
    panel: Panel,
    model: PMModel,
}

fn reference() -> &'static Reference {
    static CELL: OnceLock<Reference> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = SynthConfig::reference();
        let ds = synth_generate(&cfg, 3).unwrap();
        let panel = Panel::from_sites(&ds.sites, ds.observations.clone()).unwrap();
        let model = fit_model(
            &panel,
            &ds.covariates,
            &cfg.tv_names(),
            &cfg.ti_names(),
            ds.projection,
            &FitOptions::default(),
        )
        .unwrap();
        Reference { cfg, ds, panel, model }
    })
}

fn obs(site: &str, ym: YearMonth, value: f64) -> MonthlyObservation {
    MonthlyObservation {
        site_id: site.into(),
        year: ym.year,
        month: ym.month,
        mean_value: value,
        n_days: 10,
        n_scheduled: 10,
    }
}

fn site_effect(id: &str, point: Point, effect: f64, variance: f64) -> SiteEffect {
    SiteEffect {
        site_id: id.into(),
        point,
        effect,
        variance,
        n_obs: 12,
    }
}

fn grid_points(n: usize) -> Vec<Point> {
    let side = (n as f64).sqrt().ceil() as usize;
    (0..n)
        .map(|i| [(i % side) as f64 * 90.0 - 300.0, (i / side) as f64 * 70.0 - 250.0 + (i % 3) as f64 * 11.0])
        .collect()
}

#[test]
fn zero_surfaces_give_site_means() {
    // Three sites per month never identify a surface, so every month is
    // degenerate and the site effects reduce to site means.
    let points = grid_points(6);
    let locations: BTreeMap<String, Point> =
        points.iter().enumerate().map(|(i, p)| (format!("s{i}"), *p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut rows = Vec::new();
    for t in 0..12i64 {
        let ym = YearMonth::from_ordinal(YearMonth::new(2001, 1).unwrap().ordinal() + t);
        for k in 0..3 {
            let i = (t as usize + 2 * k) % 6;
            rows.push(obs(&format!("s{i}"), ym, (2.0 + i as f64 * 0.1 + noise.sample(&mut rng)).exp()));
        }
    }
    let panel = Panel::new(locations, rows.clone()).unwrap();
    let s1 = fit_stage1(&panel, &CovariateFrame::default(), &[], &Stage1Options::default()).unwrap();
    assert!(s1.surfaces.values().all(|s| s.degenerate));
    for e in &s1.site_effects {
        let ys: Vec<f64> = rows
            .iter()
            .filter(|o| o.site_id == e.site_id)
            .map(|o| o.mean_value.ln())
            .collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        assert_relative_eq!(e.effect, mean, epsilon = 1e-10);
    }
}

#[test]
fn null_monthly_field_gives_small_surfaces() {
    let mut cfg = SynthConfig::reference();
    cfg.monthly.seasonal_amplitude = 0.0;
    cfg.monthly.coef_sd = 0.0;
    cfg.tv.clear();
    let ds = synth_generate(&cfg, 5).unwrap();
    let panel = Panel::from_sites(&ds.sites, ds.observations.clone()).unwrap();
    let s1 = fit_stage1(&panel, &ds.covariates, &[], &Stage1Options::default()).unwrap();
    let pts: Vec<Point> = ds.sites.iter().map(|s| s.point()).collect();
    let mut total = 0.0;
    for s in s1.surfaces.values() {
        let (m, _) = s.predict(&pts).unwrap();
        total += m.iter().map(|v| v.abs()).fold(0.0, f64::max);
    }
    let mean_max = total / s1.surfaces.len() as f64;
    assert!(mean_max < 0.1, "mean max |g_t| = {mean_max}");
}

#[test]
fn reference_fit_converges_to_a_fixed_point() {
    let r = reference();
    let s1 = &r.model.stage1;
    assert!(s1.backfit_iterations <= 50, "{} iterations", s1.backfit_iterations);
    assert!(s1.last_change < 1e-4);
    assert_eq!(s1.surfaces.len(), 24);
    assert!(s1.surfaces.values().all(|s| !s.degenerate && s.sigma2 >= 0.0));
    assert_eq!(s1.site_effects.len(), 30);

    // Forcing one more cycle than convergence needed reports its change.
    let opts = Stage1Options {
        tol: 0.0,
        max_iter: s1.backfit_iterations + 1,
        ..Default::default()
    };
    match fit_stage1(&r.panel, &r.ds.covariates, &r.cfg.tv_names(), &opts) {
        Err(Error::NotConverged { last_change, .. }) => assert!(last_change < 1e-3, "{last_change}"),
        other => panic!("expected non-convergence, got {other:?}"),
    }
}

#[test]
fn row_order_does_not_matter() {
    let r = reference();
    let mut rows = r.ds.observations.clone();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let panel = Panel::from_sites(&r.ds.sites, rows).unwrap();
    let model = fit_model(
        &panel,
        &r.ds.covariates,
        &r.cfg.tv_names(),
        &r.cfg.ti_names(),
        r.ds.projection,
        &FitOptions::default(),
    )
    .unwrap();
    for (a, b) in model.stage1.site_effects.iter().zip(&r.model.stage1.site_effects) {
        assert_eq!(a.site_id, b.site_id);
        assert_relative_eq!(a.effect, b.effect, epsilon = 1e-10);
    }
    for (a, b) in model.stage1.residuals.iter().zip(&r.model.stage1.residuals) {
        assert_relative_eq!(a.fitted, b.fitted, epsilon = 1e-10);
    }
    assert_relative_eq!(model.stage2.sigma2_mu, r.model.stage2.sigma2_mu, epsilon = 1e-10);
}

#[test]
fn too_few_observations_and_bad_values() {
    let r = reference();
    let mut rows = r.ds.observations.clone();
    rows.retain(|o| o.site_id != "S001" || o.month == 1 && o.year == 2000);
    let panel = Panel::from_sites(&r.ds.sites, rows.clone()).unwrap();
    let s1 = fit_stage1(&panel, &r.ds.covariates, &[], &Stage1Options::default()).unwrap();
    assert_eq!(s1.excluded_sites, vec!["S001".to_string()]);
    assert!(s1.site_effect("S001").is_none());

    rows[5].mean_value = 0.0;
    let panel = Panel::from_sites(&r.ds.sites, rows).unwrap();
    let err = fit_stage1(&panel, &r.ds.covariates, &[], &Stage1Options::default()).unwrap_err();
    assert!(matches!(err, Error::NonPositiveValue { .. }));
}

#[test]
fn sparse_month_is_degenerate_with_seasonal_variance() {
    let r = reference();
    let thin = YearMonth::new(2000, 7).unwrap();
    let rows: Vec<MonthlyObservation> = r
        .ds
        .observations
        .iter()
        .filter(|o| o.year_month() != thin || ["S001", "S002"].contains(&o.site_id.as_str()))
        .cloned()
        .collect();
    let panel = Panel::from_sites(&r.ds.sites, rows).unwrap();
    let model = fit_model(
        &panel,
        &r.ds.covariates,
        &r.cfg.tv_names(),
        &r.cfg.ti_names(),
        r.ds.projection,
        &FitOptions::default(),
    )
    .unwrap();
    let s1 = &model.stage1;
    assert!(s1.is_degenerate(thin));
    let summer: Vec<f64> = s1
        .surfaces
        .iter()
        .filter(|(m, s)| m.season() == Season::Summer && !s.degenerate)
        .map(|(_, s)| s.sigma2)
        .collect();
    assert_eq!(summer.len(), 5);
    assert_relative_eq!(s1.sigma2_t(thin), summer.iter().sum::<f64>() / 5.0, max_relative = 1e-12);

    let site = &r.ds.sites[4];
    let p = model.predict(&Location::new(site.site_id.clone(), site.point()), thin, &r.ds.covariates).unwrap();
    assert!(p.flags.contains(&Flag::DegenerateMonth));
    assert_eq!(p.parts.sigma2_t, s1.sigma2_t(thin));
}

#[test]
fn constant_site_effects_give_a_flat_surface() {
    let effects: Vec<SiteEffect> = grid_points(20)
        .iter()
        .enumerate()
        .map(|(i, p)| site_effect(&format!("s{i}"), *p, 2.5, 0.01))
        .collect();
    let fit = fit_site_regression(&effects, &CovariateFrame::default(), &[], &Stage2Options::default()).unwrap();
    let t = fit.fit.term(SPATIAL_TERM).unwrap();
    assert!(t.edf <= BasisKind::Tps2d.null_dim() as f64 + 0.1, "edf {}", t.edf);
    assert!(fit.sigma2_mu < 1e-10, "{}", fit.sigma2_mu);
}

fn linear_effects(n: usize, seed: u64) -> (Vec<SiteEffect>, CovariateFrame) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut cov = CovariateFrame::default();
    let effects = grid_points(n)
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let id = format!("s{i}");
            let z = rand::Rng::random::<f64>(&mut rng);
            cov.set_invariant("z", &id, z);
            let v = 0.001 + 0.004 * (i % 5) as f64;
            site_effect(&id, *p, 1.0 + 0.5 * z + noise.sample(&mut rng), v)
        })
        .collect();
    (effects, cov)
}

#[test]
fn time_invariant_effect_is_recovered() {
    let (effects, cov) = linear_effects(60, 2);
    let fit = fit_site_regression(&effects, &cov, &["z".into()], &Stage2Options::default()).unwrap();
    let (m, se) = fit.fit.term_predict("z", &TermData::Scalars(vec![0.0, 1.0])).unwrap();
    let slope = m[1] - m[0];
    let band = 2.0 * (se[0].powi(2) + se[1].powi(2)).sqrt();
    assert!((slope - 0.5).abs() <= band, "slope {slope} band {band}");
}

#[test]
fn unit_weights_match_the_homoscedastic_fit() {
    let (effects, cov) = linear_effects(40, 3);
    let ti = ["z".to_string()];
    let homo = fit_site_regression(&effects, &cov, &ti, &Stage2Options::default()).unwrap();
    let opts = Stage2Options {
        heteroscedastic: true,
        kappa: Some(0.0),
        ..Default::default()
    };
    let hetero = fit_site_regression(&effects, &cov, &ti, &opts).unwrap();
    for (a, b) in homo.fit.coefficients.iter().zip(hetero.fit.coefficients.iter()) {
        assert_relative_eq!(a, b, epsilon = 1e-8);
    }
    assert_eq!(hetero.kappa, Some(0.0));

    let estimated = fit_site_regression(
        &effects,
        &cov,
        &ti,
        &Stage2Options {
            heteroscedastic: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(estimated.kappa.unwrap() >= 0.0);
    assert!(estimated.sigma2_mu >= 0.0);
}

#[test]
fn missing_time_invariant_covariate_lists_sites() {
    let (effects, mut cov) = linear_effects(12, 4);
    let mut fresh = CovariateFrame::default();
    for e in &effects[2..] {
        fresh.set_invariant("z", &e.site_id, cov.invariant("z", &e.site_id).unwrap());
    }
    cov = fresh;
    let err = fit_site_regression(&effects, &cov, &["z".into()], &Stage2Options::default()).unwrap_err();
    let text = err.to_string();
    assert!(text.contains("s0") && text.contains("s1"), "{text}");
    let too_few: Vec<SiteEffect> = effects[..4].to_vec();
    assert!(fit_site_regression(&too_few, &CovariateFrame::default(), &[], &Stage2Options::default()).is_err());
}

#[test]
fn back_transform_examples() {
    let loc = Location::new("a", [0.0, 0.0]);
    let parts = VarianceParts {
        invariant: 0.01,
        sigma2_mu: 0.01,
        time_varying: 0.01,
        sigma2_t: 0.01,
        offset: 0.0,
    };
    let p = Prediction::new(loc.clone(), None, Transform::Log, 10f64.ln(), parts, BTreeSet::new());
    assert_relative_eq!(p.var, 0.04, epsilon = 1e-15);
    assert_relative_eq!(p.conc_median, 10.0, epsilon = 1e-12);
    assert_relative_eq!(p.conc_unbiased, 10.0 * 0.02f64.exp(), epsilon = 1e-12);
    assert!((p.conc_unbiased - 10.202).abs() < 5e-4);

    let bare = VarianceParts {
        sigma2_mu: 0.02,
        sigma2_t: 0.03,
        ..Default::default()
    };
    let p = Prediction::new(loc.clone(), None, Transform::Log, 1.0, bare, BTreeSet::new());
    assert_eq!(p.var, 0.02 + 0.03);

    let p = Prediction::new(loc, None, Transform::Sqrt, 3.0, parts, BTreeSet::new());
    assert_relative_eq!(p.conc_median, 9.0);
    assert_relative_eq!(p.conc_unbiased, 9.04, epsilon = 1e-12);
}

#[test]
fn delta_method_examples() {
    assert_eq!(delta_se(1.3, 0.0), 0.0);
    assert_relative_eq!(delta_se(0.0, 1.0), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for &(y, v) in &[(2.0, 0.01), (3.0, 0.05), (1.0, 0.002)] {
        let d = Normal::new(y, f64::sqrt(v)).unwrap();
        let draws: Vec<f64> = (0..100_000).map(|_| d.sample(&mut rng).exp()).collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let sd = (draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64).sqrt();
        let rel = delta_se(y, v) / sd - 1.0;
        assert!(rel.abs() < 0.1, "y {y} var {v}: {rel}");
    }
}

#[test]
fn variance_floor_holds_everywhere() {
    let r = reference();
    for s in &r.ds.sites {
        let loc = Location::new(s.site_id.clone(), s.point());
        for ym in r.cfg.months() {
            let p = r.model.predict(&loc, ym, &r.ds.covariates).unwrap();
            assert!(p.var >= p.parts.sigma2_mu + p.parts.sigma2_t);
            assert_eq!(p.parts.sigma2_mu, r.model.stage2.sigma2_mu);
            assert!(p.conc_unbiased >= p.conc_median);
            assert!(p.flags.is_empty(), "{:?}", p.flags);
        }
    }
    let s = &r.ds.sites[0];
    let err = r
        .model
        .predict(&Location::new(s.site_id.clone(), s.point()), YearMonth::new(2003, 1).unwrap(), &r.ds.covariates)
        .unwrap_err();
    assert!(matches!(err, Error::MonthOutOfRange(_)));
    let far = Location::new(s.site_id.clone(), [4000.0, 0.0]);
    let p = r.model.predict(&far, YearMonth::new(2000, 3).unwrap(), &r.ds.covariates).unwrap();
    assert!(p.flags.contains(&Flag::Extrapolation));
}

#[test]
fn predict_values_matches_predict() {
    let r = reference();
    let s = &r.ds.sites[7];
    let loc = Location::new(s.site_id.clone(), s.point());
    let ym = YearMonth::new(2001, 4).unwrap();
    let a = r.model.predict(&loc, ym, &r.ds.covariates).unwrap();
    let tv: Vec<f64> = r.cfg.tv_names().iter().map(|n| r.ds.covariates.varying(n, &s.site_id, ym).unwrap()).collect();
    let ti: Vec<f64> = r.cfg.ti_names().iter().map(|n| r.ds.covariates.invariant(n, &s.site_id).unwrap()).collect();
    assert_eq!(r.model.predict_values(&loc, ym, &tv, &ti).unwrap(), a);
    assert!(r.model.predict_values(&loc, ym, &tv[..1], &ti).is_err());
}

#[test]
fn longterm_reductions() {
    let r = reference();
    let s = &r.ds.sites[11];
    let loc = Location::new(s.site_id.clone(), s.point());
    let one = [YearMonth::new(2000, 5).unwrap()];
    let single = r.model.predict_longterm(&loc, &one, &r.ds.covariates).unwrap();
    assert_eq!(single, r.model.predict(&loc, one[0], &r.ds.covariates).unwrap());

    let months = r.cfg.months();
    let monthly: Vec<Prediction> = months
        .iter()
        .map(|&m| r.model.predict(&loc, m, &r.ds.covariates).unwrap())
        .collect();
    let lt = r.model.predict_longterm(&loc, &months, &r.ds.covariates).unwrap();
    let mean = monthly.iter().map(|p| p.y_hat).sum::<f64>() / monthly.len() as f64;
    assert!((lt.y_hat - mean).abs() < 1e-12);
    assert!(lt.month.is_none());
    let m = months.len() as f64;
    let tv: f64 = monthly.iter().map(|p| p.parts.time_varying + p.parts.sigma2_t).sum();
    assert_relative_eq!(
        lt.var,
        monthly[0].parts.invariant + monthly[0].parts.sigma2_mu + tv / (m * m),
        max_relative = 1e-12
    );
    let min_monthly = monthly.iter().map(|p| p.var).fold(f64::INFINITY, f64::min);
    assert!(lt.var <= min_monthly);
    assert!(r.model.predict_longterm(&loc, &[], &r.ds.covariates).is_err());
}

#[test]
fn coarse_fraction_examples() {
    let loc = Location::new("a", [0.0, 0.0]);
    let ym = Some(YearMonth::new(2000, 1).unwrap());
    let at = |c: f64, month| Prediction::new(loc.clone(), month, Transform::Log, c.ln(), VarianceParts::default(), BTreeSet::new());
    let c = coarse_pm(&at(25.0, ym), &at(25.0, ym)).unwrap();
    assert_eq!((c.value, c.negative), (0.0, false));
    let c = coarse_pm(&at(25.0, ym), &at(10.0, ym)).unwrap();
    assert_relative_eq!(c.value, 15.0, epsilon = 1e-12);
    assert!(!c.negative);
    let c = coarse_pm(&at(10.0, ym), &at(12.0, ym)).unwrap();
    assert_relative_eq!(c.value, -2.0, epsilon = 1e-12);
    assert!(c.negative);
    assert!(coarse_pm(&at(10.0, ym), &at(12.0, None)).is_err());
}

#[test]
fn model_file_is_bit_exact() {
    let r = reference();
    let mut buf = Vec::new();
    write_model(&mut buf, &r.model).unwrap();
    let back: PMModel = read_model(buf.as_slice()).unwrap();
    assert_eq!(back, r.model);
    let mut again = Vec::new();
    write_model(&mut again, &back).unwrap();
    assert_eq!(buf, again);

    let (kind, manifest) = read_manifest(&mut buf.as_slice()).unwrap();
    assert_eq!(kind, ModelKind::TwoStage);
    assert!(manifest.to_string().contains("temp"));

    let mut corrupt = buf.clone();
    corrupt.truncate(buf.len() / 2);
    assert!(read_model::<PMModel, _>(corrupt.as_slice()).is_err());
    assert!(read_model::<PMModel, _>(&b"not a model"[..]).is_err());
}

#[test]
fn prediction_csv_layout() {
    let r = reference();
    let s = &r.ds.sites[0];
    let loc = Location::new(s.site_id.clone(), s.point());
    let p = r.model.predict(&loc, YearMonth::new(2000, 2).unwrap(), &r.ds.covariates).unwrap();
    let mut out = Vec::new();
    write_predictions(&mut out, &[p]).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "location_id,x,y,year,month,y_hat,var,conc_median,conc_unbiased,se_conc,flags"
    );
    assert!(lines.next().unwrap().starts_with("S001,"));
}

#[test]
fn sqrt_transform_fits() {
    let mut cfg = SynthConfig::reference();
    cfg.transform = Transform::Sqrt;
    cfg.level = 5.0;
    cfg.n_months = 6;
    let ds = synth_generate(&cfg, 8).unwrap();
    let panel = Panel::from_sites(&ds.sites, ds.observations.clone()).unwrap();
    let options = FitOptions {
        stage1: Stage1Options {
            transform: Transform::Sqrt,
            ..Default::default()
        },
        ..Default::default()
    };
    let model = fit_model(&panel, &ds.covariates, &cfg.tv_names(), &cfg.ti_names(), ds.projection, &options).unwrap();
    let s = &ds.sites[0];
    let p = model
        .predict(&Location::new(s.site_id.clone(), s.point()), cfg.start, &ds.covariates)
        .unwrap();
    assert_relative_eq!(p.conc_median, p.y_hat * p.y_hat);
    assert_relative_eq!(p.conc_unbiased, p.y_hat * p.y_hat + p.var);
}
