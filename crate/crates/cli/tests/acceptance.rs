//! Acceptance suite. Prints one PASS/FAIL line per criterion; with
//! `PMSPACE_ACCEPTANCE_STRICT=1` it also exits nonzero if any fail. Pass
//! criterion numbers to run a subset, e.g. `cargo test -p pmspace-cli --test acceptance -- 3 9`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use pmspace::data::{CovariateFrame, DomainBox};
use pmspace::eval::{
    assign_folds, residual_acf, run_cv, run_fold, semivariogram, separable_kriging_check, synth_bext,
    synth_generate, synth_ratio_observations, CvRow, RatioWorldSpec, Semivariogram, SeparableKrigingOracle,
    SynthConfig, SynthDataset, TwoStageRecipe, DEFAULT_MIN_COOCCUR, Z95,
};
use pmspace::gam::{AdditiveProblem, FixedBlock, LambdaPolicy, TermSpec};
use pmspace::ratio::{fit_ratio, predict_pm25, RatioOptions, RatioRecipe};
use pmspace::splines::{tps_basis, tps_basis_k, uni_basis, Knots};
use pmspace::stm::{fit_model, FitOptions, Location, PMModel, Panel};
use pmspace::visibility::{
    fit_rh_calibration, smooth_daily, CensorKind, EmConfig, ExtinctionInterval,
};
use pmspace::{Point, Season, YearMonth};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn panel_of(ds: &SynthDataset) -> Panel {
    Panel::from_sites(&ds.sites, ds.observations.clone()).unwrap()
}

fn reference_recipe<'a>(ds: &'a SynthDataset, config: &SynthConfig) -> TwoStageRecipe<'a> {
    TwoStageRecipe {
        covariates: &ds.covariates,
        tv_names: config.tv_names(),
        ti_names: config.ti_names(),
        projection: ds.projection,
        options: FitOptions::default(),
    }
}

fn fit_reference(ds: &SynthDataset, config: &SynthConfig) -> PMModel {
    fit_model(
        &panel_of(ds),
        &ds.covariates,
        &config.tv_names(),
        &config.ti_names(),
        ds.projection,
        &FitOptions::default(),
    )
    .unwrap()
}

fn r2(obs: &[f64], pred: &[f64]) -> f64 {
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let tss: f64 = obs.iter().map(|o| (o - mean).powi(2)).sum();
    let sse: f64 = obs.iter().zip(pred).map(|(o, p)| (o - p).powi(2)).sum();
    1.0 - sse / tss
}

// 1 -----------------------------------------------------------------------

/// Explicit n x n influence matrix on the problem's own design and penalty.
fn dense_gcv(problem: &AdditiveProblem, y: &[f64], lambdas: &[f64]) -> f64 {
    let x = problem.profiled_design();
    let w = problem.normalized_weights();
    let yv = problem.profiled_response(y).unwrap();
    let s = problem.total_penalty(lambdas);
    let n = x.nrows();
    let wm = DMatrix::from_diagonal(w);
    let h = x.transpose() * &wm * x + s;
    let a = x * h.try_inverse().unwrap() * x.transpose() * &wm;
    let resid = &yv - &a * &yv;
    let rss: f64 = (0..n).map(|i| w[i] * resid[i] * resid[i]).sum();
    let trace = a.trace() + problem.n_profiled_groups() as f64;
    n as f64 * rss / (n as f64 - trace).powi(2)
}

fn gcv_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut max_p = 0;
    for case in 0..50 {
        let n = rng.random_range(30..=200);
        let pts: Vec<Point> = (0..n)
            .map(|_| [rng.random_range(-300.0..300.0), rng.random_range(-200.0..200.0)])
            .collect();
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| (pts[i][0] / 90.0).sin() + (z[i] / 3.0).cos() + 0.3 * normal(&mut rng))
            .collect();
        let k_tps = rng.random_range(6..=(n / 3).clamp(7, 45));
        let mut terms = vec![TermSpec::new("s(x,y)", tps_basis_k(&pts, k_tps).unwrap())];
        if case % 3 != 0 {
            terms.push(TermSpec::new("s(z)", uni_basis(&z, rng.random_range(4..=12)).unwrap()));
        }
        let weights: Option<Vec<f64>> = (case % 2 == 0).then(|| (0..n).map(|_| rng.random_range(0.2..3.0)).collect());
        let fixed = if case % 5 == 1 {
            let g = 6;
            vec![FixedBlock::Grouping {
                name: "site".into(),
                groups: (0..n).map(|i| i % g).collect(),
                n_groups: g,
            }]
        } else {
            vec![]
        };
        let problem = AdditiveProblem::new(terms, fixed, weights.as_deref()).unwrap();
        max_p = max_p.max(problem.ncoef());
        let lambdas: Vec<f64> = (0..problem.term_names().len())
            .map(|_| 10f64.powf(rng.random_range(-4.0..3.0)))
            .collect();
        let fast = problem.gcv_score(&y, &lambdas).unwrap();
        let dense = dense_gcv(&problem, &y, &lambdas);
        worst = worst.max(((fast - dense) / dense).abs());
    }
    outcome(
        worst < 1e-10 && max_p <= 60,
        format!("max relative error {worst:.2e} over 50 problems (p <= {max_p})"),
    )
}

// 2 -----------------------------------------------------------------------

fn interpolation_limit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for n in [8, 15, 25, 35, 50, 50] {
        let pts: Vec<Point> = (0..n)
            .map(|_| [rng.random_range(0.0..400.0), rng.random_range(0.0..300.0)])
            .collect();
        let y: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let basis = tps_basis(&pts, Knots { points: pts.clone() }).unwrap();
        let term = TermSpec::new("s(x,y)", basis).with_policy(LambdaPolicy::Fixed(0.0));
        let problem = AdditiveProblem::new(vec![term], vec![], None).unwrap();
        let fit = problem.fit_with_lambdas(&y, &[0.0]).unwrap();
        let max = fit.fitted.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(max);
    }
    outcome(worst < 1e-6, format!("max |fitted - y| {worst:.2e} for n up to 50"))
}

// 3 -----------------------------------------------------------------------

fn oracle_r2(ds: &SynthDataset, rows: &[CvRow]) -> f64 {
    let obs: Vec<f64> = rows.iter().map(|r| r.observed).collect();
    let oracle: Vec<f64> = rows
        .iter()
        .map(|r| ds.truth_row(&r.site_id, r.month).unwrap().oracle_mean)
        .collect();
    r2(&obs, &oracle)
}

fn two_stage_recovery() -> Outcome {
    let config = SynthConfig::reference();
    let ds = synth_generate(&config, 3).unwrap();
    let panel = panel_of(&ds);
    let folds = assign_folds(&panel.site_ids(), 10, 3).unwrap();
    let result = run_cv(&reference_recipe(&ds, &config), &panel, &folds, &[]).unwrap();
    let model = result.transformed.r2;
    let oracle = oracle_r2(&ds, &result.rows);
    outcome(
        (model - oracle).abs() <= 0.05 && result.skipped.is_empty(),
        format!(
            "9-fold R2 {model:.4} vs oracle {oracle:.4} (gap {:.4}, {} rows, {} folds skipped)",
            oracle - model,
            result.rows.len(),
            result.skipped.len()
        ),
    )
}

// 4 -----------------------------------------------------------------------

fn coverage_calibration() -> Outcome {
    let config = SynthConfig::reference();
    let per_rep: Vec<(usize, usize)> = (0..50u64)
        .into_par_iter()
        .map(|r| {
            let ds = synth_generate(&config, 4000 + r).unwrap();
            let panel = panel_of(&ds);
            let folds = assign_folds(&panel.site_ids(), 10, r).unwrap();
            let fold = folds.validation_folds()[(r as usize) % 9];
            match run_fold(&reference_recipe(&ds, &config), &panel, &folds, &[], fold) {
                Ok((rows, _)) => {
                    let hit = rows
                        .iter()
                        .filter(|row| {
                            let (lo, hi) = row.prediction.interval(Z95);
                            row.observed >= lo && row.observed <= hi
                        })
                        .count();
                    (hit, rows.len())
                }
                Err(_) => (0, 0),
            }
        })
        .collect();
    let failed = per_rep.iter().filter(|(_, n)| *n == 0).count();
    let hit: usize = per_rep.iter().map(|p| p.0).sum();
    let n: usize = per_rep.iter().map(|p| p.1).sum();
    let cov = hit as f64 / n as f64;
    outcome(
        (0.92..=0.97).contains(&cov) && failed == 0,
        format!("coverage {cov:.4} over {n} held-out site-months in 50 replicates ({failed} failed)"),
    )
}

// 5 -----------------------------------------------------------------------

fn variance_calibration() -> Outcome {
    let mut config = SynthConfig::reference();
    config.n_sites = 15;
    config.n_months = 12;
    let per_rep: Vec<Option<(f64, f64, usize)>> = (0..200u64)
        .into_par_iter()
        .map(|r| {
            let ds = synth_generate(&config, 5000 + r).unwrap();
            let panel = panel_of(&ds);
            let folds = assign_folds(&panel.site_ids(), 5, r).unwrap();
            let fold = folds.validation_folds()[(r as usize) % 4];
            // Fifteen sites converge slowly, so allow more backfit sweeps.
            let mut recipe = reference_recipe(&ds, &config);
            recipe.options.stage1.max_iter = 200;
            let (rows, _) = run_fold(&recipe, &panel, &folds, &[], fold).ok()?;
            let var: f64 = rows.iter().map(|x| x.prediction.var).sum();
            let se: f64 = rows.iter().map(|x| (x.observed - x.prediction.y_hat).powi(2)).sum();
            Some((var, se, rows.len()))
        })
        .collect();
    let failed = per_rep.iter().filter(|p| p.is_none()).count();
    let (var, se, n) = per_rep
        .iter()
        .flatten()
        .fold((0.0, 0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let ratio = (var / n as f64) / (se / n as f64);
    outcome(
        (ratio - 1.0).abs() <= 0.15 && failed <= 10,
        format!(
            "mean variance {:.4} vs MSE {:.4} (ratio {ratio:.3}) over {n} rows, {failed} of 200 replicates failed",
            var / n as f64,
            se / n as f64
        ),
    )
}

// 6 -----------------------------------------------------------------------

fn longterm_averaging() -> Outcome {
    let config = SynthConfig::reference();
    let ds = synth_generate(&config, 6).unwrap();
    let model = fit_reference(&ds, &config);
    let months = config.months();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut mean_err: f64 = 0.0;
    let mut var_err: f64 = 0.0;
    for site in ds.sites.iter().take(5) {
        let loc = Location::new(site.site_id.clone(), site.point());
        let lt = model.predict_longterm(&loc, &months, &ds.covariates).unwrap();
        let monthly: Vec<_> = months
            .iter()
            .map(|&m| model.predict(&loc, m, &ds.covariates).unwrap())
            .collect();
        let direct = monthly.iter().map(|p| p.y_hat).sum::<f64>() / months.len() as f64;
        mean_err = mean_err.max((lt.y_hat - direct).abs());

        // Draw each variance component: the time-invariant pieces are shared
        // by every month, the time-varying ones are independent across months.
        let draws = 20_000;
        let mut values = Vec::with_capacity(draws);
        for _ in 0..draws {
            let shared = monthly[0].parts.invariant.sqrt() * normal(&mut rng)
                + monthly[0].parts.sigma2_mu.sqrt() * normal(&mut rng);
            let mut total = 0.0;
            for p in &monthly {
                total += p.y_hat
                    + shared
                    + p.parts.time_varying.sqrt() * normal(&mut rng)
                    + p.parts.sigma2_t.sqrt() * normal(&mut rng);
            }
            values.push(total / monthly.len() as f64);
        }
        let m = values.iter().sum::<f64>() / draws as f64;
        let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
        var_err = var_err.max((v / lt.var - 1.0).abs());
    }
    outcome(
        mean_err < 1e-12 && var_err <= 0.15,
        format!("max mean difference {mean_err:.1e}; max Monte Carlo variance deviation {:.2}%", 100.0 * var_err),
    )
}

// 7 -----------------------------------------------------------------------

fn calibration_intervals(n: usize, seed: u64, width: f64, curve: impl Fn(f64) -> f64) -> Vec<ExtinctionInterval> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let rh = (rng.random_range(20.0f64..98.0) * 2.0).round() / 2.0;
            let v = -1.5 + curve(rh) + 0.3 * normal(&mut rng);
            let lb = (v / width).floor() * width;
            ExtinctionInterval {
                station_id: format!("A{:02}", i % 60),
                day: chrono::NaiveDate::from_ymd_opt(1996, 7, 1 + (i % 30) as u32).unwrap(),
                lb,
                ub: lb + width,
                rh,
                censor_kind: CensorKind::Interval,
            }
        })
        .collect()
}

fn em_recovery() -> Outcome {
    let truth = |rh: f64| 0.012 * (rh - 60.0);
    let ivs = calibration_intervals(5000, 7, 0.3, truth);
    let config = EmConfig { seed: 17, ..Default::default() };
    let start = Instant::now();
    let a = fit_rh_calibration(&ivs, Season::Summer, &config).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let b = fit_rh_calibration(&ivs, Season::Summer, &config).unwrap();
    let grid: Vec<f64> = (60..=190).map(|i| i as f64 * 0.5).collect();
    let mse = grid
        .iter()
        .map(|&rh| (a.adjustment(rh).unwrap() - truth(rh)).powi(2))
        .sum::<f64>()
        / grid.len() as f64;
    let rmse = mse.sqrt();
    outcome(
        rmse < 0.05 && a == b && secs < 60.0,
        format!("grid RMSE {rmse:.4} on RH 30-95; repeat identical: {}; {secs:.1}s per fit", a == b),
    )
}

// 8 -----------------------------------------------------------------------

fn censoring_degeneracy() -> Outcome {
    let mut worst_excess: f64 = 0.0;
    let mut worst_diff: f64 = 0.0;
    for run in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + run);
        let stations: BTreeMap<String, Point> = (0..35)
            .map(|i| (format!("K{i:02}"), [rng.random_range(-400.0..400.0), rng.random_range(-300.0..300.0)]))
            .collect();
        let day = chrono::NaiveDate::from_ymd_opt(1997, 4, 2 + run as u32).unwrap();
        let ivs: Vec<ExtinctionInterval> = stations
            .iter()
            .map(|(id, p)| {
                let v = -1.2 + p[0] / 900.0 + 0.3 * (p[1] / 150.0).sin() + 0.1 * normal(&mut rng);
                ExtinctionInterval {
                    station_id: id.clone(),
                    day,
                    lb: v,
                    ub: v,
                    rh: 60.0,
                    censor_kind: CensorKind::Interval,
                }
            })
            .collect();
        let pts: Vec<Point> = ivs.iter().map(|iv| stations[&iv.station_id]).collect();
        let y: Vec<f64> = ivs.iter().map(|iv| iv.lb).collect();
        let direct = AdditiveProblem::new(
            vec![TermSpec::new("s", tps_basis_k(&pts, pts.len().min(100)).unwrap())],
            vec![],
            None,
        )
        .unwrap()
        .fit(&y)
        .unwrap();
        // Monte Carlo spread from repeated chains on the same day.
        let chains: Vec<DVector<f64>> = (0..3)
            .map(|c| {
                let config = EmConfig {
                    seed: run * 10 + c,
                    iterations: 40,
                    keep: 20,
                    ..Default::default()
                };
                smooth_daily(&ivs, &stations, &config).unwrap().fit.fitted
            })
            .collect();
        for i in 0..y.len() {
            let vals: Vec<f64> = chains.iter().map(|c| c[i]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
            for v in &vals {
                let d = (v - direct.fitted[i]).abs();
                worst_diff = worst_diff.max(d);
                worst_excess = worst_excess.max(d - 2.0 * sd - 1e-9);
            }
        }
    }
    outcome(
        worst_excess <= 0.0,
        format!("max |EM - direct| {worst_diff:.2e} across 10 runs (bound: 2 x Monte Carlo sd + 1e-9)"),
    )
}

// 9 -----------------------------------------------------------------------

fn ratio_options(vis: Option<&str>) -> RatioOptions {
    RatioOptions {
        vis_covariate: vis.map(String::from),
        first_year: 2000,
        last_year: 2001,
        ..Default::default()
    }
}

fn extra_locations(domain: DomainBox, proj: &pmspace::data::Projection) -> Vec<Location> {
    let mut out = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            let lon = domain.lon_min + (domain.lon_max - domain.lon_min) * (0.1 + 0.2 * i as f64);
            let lat = domain.lat_min + (domain.lat_max - domain.lat_min) * (0.1 + 0.2 * j as f64);
            out.push(Location::new(format!("G{i}{j}"), proj.project(lon, lat).unwrap()));
        }
    }
    out
}

fn ratio_recovery() -> Outcome {
    // Constant world: PM2.5 is exactly 0.6 times the PM10 model's median.
    let config = SynthConfig::reference();
    let mut ds = synth_generate(&config, 9).unwrap();
    synth_bext(&mut ds, 10);
    let panel = panel_of(&ds);
    let empty = CovariateFrame::default();
    let pm10 = fit_model(&panel, &empty, &[], &[], ds.projection, &FitOptions::default()).unwrap();
    let pm25_obs = synth_ratio_observations(&ds, &RatioWorldSpec::constant(0.6), 11, |site, ym| {
        let p = panel.locations[site];
        Ok(pm10.predict(&Location::new(site, p), ym, &empty)?.conc_median)
    })
    .unwrap();
    let pm25 = Panel::from_sites(&ds.sites, pm25_obs).unwrap();
    let ratio = fit_ratio(&pm25, &pm10, &empty, &[], &[], &ratio_options(None)).unwrap();
    let mut locations: Vec<Location> = ds.sites.iter().map(|s| Location::new(s.site_id.clone(), s.point())).collect();
    locations.extend(extra_locations(config.domain, &ds.projection));
    let mut worst: f64 = 0.0;
    for loc in &locations {
        for &m in &config.months() {
            let p = predict_pm25(&ratio, &pm10, loc, m, &empty).unwrap();
            worst = worst.max((p.prediction.conc_median / (0.6 * p.pm10_pred) - 1.0).abs());
        }
    }

    // Seasonal world with the extinction covariate, scored by site-held-out CV.
    let mut ds = synth_generate(&config, 19).unwrap();
    synth_bext(&mut ds, 20);
    let pm10 = fit_reference(&ds, &config);
    let truth: BTreeMap<(String, YearMonth), f64> = ds
        .truth
        .rows
        .iter()
        .map(|r| ((r.site_id.clone(), r.month), r.y.exp()))
        .collect();
    let pm25_obs = synth_ratio_observations(&ds, &RatioWorldSpec::seasonal(), 21, |site, ym| {
        Ok(truth[&(site.to_string(), ym)])
    })
    .unwrap();
    let pm25 = Panel::from_sites(&ds.sites, pm25_obs).unwrap();
    let recipe = RatioRecipe {
        pm10: &pm10,
        covariates: &ds.covariates,
        tv_names: vec![],
        ti_names: vec![],
        options: ratio_options(Some("bext")),
    };
    let folds = assign_folds(&pm25.site_ids(), 10, 21).unwrap();
    let cv = run_cv(&recipe, &pm25, &folds, &[]).unwrap();
    let conc_r2 = cv.concentration.r2;
    outcome(
        worst <= 0.03 && conc_r2 >= 0.7,
        format!(
            "constant world max ratio error {:.3}% at {} locations; seasonal world concentration R2 {conc_r2:.3}",
            100.0 * worst,
            locations.len()
        ),
    )
}

// 10 ----------------------------------------------------------------------

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (br, bc) = b.shape();
    DMatrix::from_fn(a.nrows() * br, a.ncols() * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

fn exp_cov(a: &[Point], b: &[Point], range: f64) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let d = ((a[i][0] - b[j][0]).powi(2) + (a[i][1] - b[j][1]).powi(2)).sqrt();
        (-d / range).exp()
    })
}

/// Joint simple-kriging predictor in time-major order.
fn joint_predictor(o: &SeparableKrigingOracle, y: &DMatrix<f64>) -> DVector<f64> {
    let (t, n) = y.shape();
    let v = DVector::from_fn(t * n, |k, _| y[(k / n, k % n)]);
    let k11 = kron(&o.c_t, &o.c_11);
    let k21 = kron(&o.c_t, &o.c_21);
    &k21 * k11.cholesky().unwrap().solve(&v)
}

fn separability() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut worst: f64 = 0.0;
    let mut worst_scale: f64 = 0.0;
    for _ in 0..50 {
        let t = rng.random_range(1..=5);
        let n = rng.random_range(3..=50);
        let m = rng.random_range(1..=8);
        let pts: Vec<Point> = (0..n).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
        let new: Vec<Point> = (0..m).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
        let range = rng.random_range(10.0..60.0);
        let c_11 = exp_cov(&pts, &pts, range) + DMatrix::identity(n, n) * 0.05;
        let c_21 = exp_cov(&new, &pts, range);
        let a = DMatrix::from_fn(t, t, |_, _| normal(&mut rng));
        let c_t = &a * a.transpose() + DMatrix::identity(t, t) * 0.5;
        let y = DMatrix::from_fn(t, n, |_, _| normal(&mut rng));
        let o = SeparableKrigingOracle { c_t, c_11, c_21 };
        let check = separable_kriging_check(&o, &y).unwrap();
        worst = worst.max(check.predictor).max(check.variance);
        let base = joint_predictor(&o, &y);
        let scaled = SeparableKrigingOracle {
            c_t: &o.c_t * 7.0,
            ..o.clone()
        };
        let diff = (joint_predictor(&scaled, &y) - base).amax();
        worst_scale = worst_scale.max(diff);
        let check_scaled = separable_kriging_check(&scaled, &y).unwrap();
        worst = worst.max(check_scaled.predictor);
    }
    outcome(
        worst < 1e-8 && worst_scale < 1e-10,
        format!("max discrepancy {worst:.2e} over 50 instances; C_t scaling changes predictor by {worst_scale:.2e}"),
    )
}

// 11 ----------------------------------------------------------------------

fn diagnostics_sanity() -> Outcome {
    let mut config = SynthConfig::reference();
    config.n_sites = 200;
    let ds = synth_generate(&config, 11).unwrap();
    let model = fit_reference(&ds, &config);
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
    let sv = semivariogram(&residuals, &locations, &Semivariogram::default_edges(), DEFAULT_MIN_COOCCUR);
    let used: Vec<f64> = sv.bins.iter().filter(|b| b.pairs >= 200).map(|b| b.value).collect();
    let flat = used.iter().cloned().fold(f64::MIN, f64::max) / used.iter().cloned().fold(f64::MAX, f64::min);

    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let start = YearMonth::new(1990, 1).unwrap();
    let iid: Vec<(String, YearMonth, f64)> = (0..40)
        .flat_map(|s| (0..1200).map(move |k| (s, k)))
        .map(|(s, k)| (format!("N{s:03}"), YearMonth::from_ordinal(start.ordinal() + k), 0.0))
        .map(|(s, m, _)| (s, m, normal(&mut rng)))
        .collect();
    let acf = residual_acf(&iid, 100, 12);
    // Pass/fail uses lag 1; longer lags are reported only, since twelve
    // separate 2-sigma bands would reject pure noise about half the time.
    let pooled = acf.mean_at(1).unwrap().abs() * (acf.pairs_at(1) as f64).sqrt() / 2.0;
    let per_site = acf
        .sites
        .iter()
        .filter_map(|s| Some(s.acf[0]?.abs() * (s.pairs[0] as f64).sqrt() / 2.0))
        .sum::<f64>()
        / acf.sites.len() as f64;
    let longer = (2..=12)
        .map(|lag| acf.mean_at(lag).unwrap().abs() * (acf.pairs_at(lag) as f64).sqrt() / 2.0)
        .fold(0.0, f64::max);
    outcome(
        used.len() >= 3 && flat < 1.25 && pooled < 1.0 && per_site < 1.0,
        format!(
            "semivariogram max/min {flat:.3} over {} bins with >= 200 pairs; iid lag-1 ACF: pooled mean at {:.0}%, \
             mean |acf| at {:.0}% of 2/sqrt(n_eff) (lags 2-12 max {:.0}%)",
            used.len(),
            100.0 * pooled,
            100.0 * per_site,
            100.0 * longer
        ),
    )
}

// 12 ----------------------------------------------------------------------

fn run_sample(dir: &Path) -> Result<(), String> {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/config/sample.toml");
    for cmd in ["synth", "fit", "cv", "diagnose"] {
        let out = Command::new(env!("CARGO_BIN_EXE_pmspace"))
            .args([cmd, "--config", config, "--output-dir", dir.to_str().unwrap(), "-q"])
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{cmd}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn end_to_end_determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    if let Err(e) = run_sample(a.path()).and_then(|_| run_sample(b.path())) {
        return outcome(false, format!("pipeline failed: {e}"));
    }
    let mut names: Vec<String> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| !n.starts_with("manifest_"))
        .collect();
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(a.path().join(n)).ok() != std::fs::read(b.path().join(n)).ok())
        .collect();
    let metrics = std::fs::read_to_string(a.path().join("metrics.csv")).unwrap();
    let r2: f64 = metrics
        .lines()
        .find(|l| l.starts_with("pooled,transformed,"))
        .and_then(|l| l.split(',').nth(2))
        .and_then(|v| v.parse().ok())
        .unwrap_or(f64::NAN);
    outcome(
        differing.is_empty() && r2 > 0.8,
        format!(
            "{} output files compared, {} differ; sample CV R2 {r2:.3}",
            names.len(),
            differing.len()
        ),
    )
}

// -------------------------------------------------------------------------

type Criterion = (u32, &'static str, f64, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        (1, "GCV oracle equivalence", 30.0, gcv_oracle),
        (2, "interpolation limit", f64::INFINITY, interpolation_limit),
        (3, "two-stage recovery", 120.0, two_stage_recovery),
        (4, "coverage calibration", f64::INFINITY, coverage_calibration),
        (5, "variance calibration", 600.0, variance_calibration),
        (6, "long-term averaging", f64::INFINITY, longterm_averaging),
        (7, "stochastic EM recovery", 60.0, em_recovery),
        (8, "censoring degeneracy", f64::INFINITY, censoring_degeneracy),
        (9, "ratio model recovery", f64::INFINITY, ratio_recovery),
        (10, "separability identity", f64::INFINITY, separability),
        (11, "diagnostics sanity", f64::INFINITY, diagnostics_sanity),
        (12, "end-to-end determinism", f64::INFINITY, end_to_end_determinism),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if std::env::args().any(|a| a == "--list") {
        for (n, name, _, _) in &criteria {
            println!("criterion_{n:02}_{}: test", name.replace([' ', '-'], "_"));
        }
        return;
    }
    let mut failed = 0;
    for (n, name, limit, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run);
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(o) => (o.pass && secs <= limit, o.detail),
            Err(e) => (
                false,
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()),
            ),
        };
        let budget = if limit.is_finite() { format!(", limit {limit:.0}s") } else { String::new() };
        println!(
            "criterion {n:>2} {} {name}: {detail} [{secs:.1}s{budget}]",
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        if std::env::var("PMSPACE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
