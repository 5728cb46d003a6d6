//! Cross-validation, accuracy metrics, residual diagnostics and synthetic data.

mod diagnostics;
mod kriging;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateFrame, Projection};
use crate::error::{Error, Result};
use crate::stm::{fit_model, FitOptions, Location, PMModel, Panel, Prediction};
use crate::types::{Transform, YearMonth};

pub use diagnostics::{
    residual_acf, semivariogram, write_acf, write_semivariogram, AcfSummary, SemivariogramBin,
    Semivariogram, SiteAcf, DEFAULT_MAX_LAG, DEFAULT_MIN_COOCCUR, DEFAULT_MIN_OBS,
};
pub use kriging::{separable_kriging_check, KrigingCheck, SeparableKrigingOracle};
pub use synth::{
    synth_bext, synth_generate, synth_ratio_observations, Bump, Effect, MonthlySpec, RatioWorldSpec, SurfaceSpec,
    SynthConfig, SynthDataset, SynthTruth, TiSpec, TruthRow, TvSpec,
};

/// Normal quantile for two-sided 95% intervals.
pub const Z95: f64 = 1.96;

/// Site-level fold assignment; fold indices run from 1 to `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
    /// Held out from all model selection.
    pub test_fold: usize,
}

impl FoldAssignment {
    pub fn sites_in(&self, fold: usize) -> BTreeSet<String> {
        self.folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.clone())
            .collect()
    }

    pub fn fold_of(&self, site: &str) -> Option<usize> {
        self.folds.get(site).copied()
    }

    /// Folds used for validation, in order.
    pub fn validation_folds(&self) -> Vec<usize> {
        (1..=self.k).filter(|&f| f != self.test_fold).collect()
    }
}

/// Seeded uniform partition of sites into `k` folds of near-equal size.
pub fn assign_folds(sites: &[String], k: usize, seed: u64) -> Result<FoldAssignment> {
    let mut ids: Vec<String> = sites.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if k == 0 || k > ids.len() {
        return Err(Error::invalid(format!(
            "cannot split {} sites into {k} folds",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let folds = ids
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i % k + 1))
        .collect();
    let test_fold = rng.random_range(1..=k);
    Ok(FoldAssignment { k, folds, test_fold })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    Transformed,
    Concentration,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Transformed => "transformed",
            Scale::Concentration => "concentration",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r2: f64,
    pub mspe: f64,
    /// Mean of prediction minus observation.
    pub bias: f64,
    pub coverage: f64,
    pub n: usize,
}

/// Accuracy of predictions given on the transformed scale.
///
/// `obs` and `pred_mean` are transformed-scale values. On the concentration
/// scale observations are back-transformed and predictions use the
/// mean-unbiased back-transform; intervals are always built on the
/// transformed scale and mapped through the back-transform.
pub fn compute_metrics(
    obs: &[f64],
    pred_mean: &[f64],
    pred_var: &[f64],
    scale: Scale,
    transform: Transform,
) -> Result<Metrics> {
    let n = obs.len();
    if pred_mean.len() != n || pred_var.len() != n {
        return Err(Error::Dimension("metric inputs differ in length".into()));
    }
    if n == 0 {
        return Err(Error::NoData("no predictions to score".into()));
    }
    if pred_var.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::invalid("predictive variances must be nonnegative"));
    }
    let (y, yhat): (Vec<f64>, Vec<f64>) = match scale {
        Scale::Transformed => (obs.to_vec(), pred_mean.to_vec()),
        Scale::Concentration => (
            obs.iter().map(|&v| transform.inverse(v)).collect(),
            pred_mean
                .iter()
                .zip(pred_var)
                .map(|(&m, &v)| transform.inverse_unbiased(m, v))
                .collect(),
        ),
    };
    let nf = n as f64;
    let ybar = y.iter().sum::<f64>() / nf;
    let tss: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    let sse: f64 = y.iter().zip(&yhat).map(|(a, b)| (a - b).powi(2)).sum();
    if !(tss > 0.0) {
        return Err(Error::Undefined("R^2 with zero total sum of squares".into()));
    }
    let bias = y.iter().zip(&yhat).map(|(a, b)| b - a).sum::<f64>() / nf;
    // Monotone back-transforms preserve containment, so coverage is the same
    // on either scale.
    let covered = obs
        .iter()
        .zip(pred_mean)
        .zip(pred_var)
        .filter(|((o, m), v)| {
            let h = Z95 * v.sqrt();
            **o >= *m - h && **o <= *m + h
        })
        .count();
    Ok(Metrics {
        r2: 1.0 - sse / tss,
        mspe: sse / nf,
        bias,
        coverage: covered as f64 / nf,
        n,
    })
}

pub fn write_metrics<W: Write>(writer: W, rows: &[(String, Scale, Metrics)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["subset", "scale", "r2", "mspe", "bias", "coverage", "n"])?;
    for (label, scale, m) in rows {
        wtr.write_record([
            label.clone(),
            scale.name().to_string(),
            m.r2.to_string(),
            m.mspe.to_string(),
            m.bias.to_string(),
            m.coverage.to_string(),
            m.n.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// A fit-and-predict pair that cross-validation can drive.
pub trait CvRecipe: Sync {
    type Model: Send;
    fn fit(&self, train: &Panel) -> Result<Self::Model>;
    fn predict(&self, model: &Self::Model, location: &Location, month: YearMonth) -> Result<Prediction>;
    fn transform(&self) -> Transform;
}

/// The two-stage model with covariates from a shared frame.
pub struct TwoStageRecipe<'a> {
    pub covariates: &'a CovariateFrame,
    pub tv_names: Vec<String>,
    pub ti_names: Vec<String>,
    pub projection: Projection,
    pub options: FitOptions,
}

impl CvRecipe for TwoStageRecipe<'_> {
    type Model = PMModel;

    fn fit(&self, train: &Panel) -> Result<PMModel> {
        fit_model(
            train,
            self.covariates,
            &self.tv_names,
            &self.ti_names,
            self.projection,
            &self.options,
        )
    }

    fn predict(&self, model: &PMModel, location: &Location, month: YearMonth) -> Result<Prediction> {
        model.predict(location, month, self.covariates)
    }

    fn transform(&self) -> Transform {
        self.options.stage1.transform
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub fold: usize,
    pub site_id: String,
    pub month: YearMonth,
    /// Observed value on the transformed scale.
    pub observed: f64,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub training_sites: BTreeSet<String>,
    pub scored_sites: BTreeSet<String>,
}

impl FoldAudit {
    /// Sites that appear both in training and among the scored rows.
    pub fn leaks(&self) -> Vec<String> {
        self.training_sites
            .intersection(&self.scored_sites)
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub rows: Vec<CvRow>,
    pub audits: Vec<FoldAudit>,
    pub skipped: Vec<(usize, String)>,
    pub transformed: Metrics,
    pub concentration: Metrics,
}

impl CvResult {
    pub fn leak_count(&self) -> usize {
        self.audits.iter().map(|a| a.leaks().len()).sum()
    }
}

/// One validation fold: fit on every other non-test fold plus the boundary
/// sites, predict the fold's observed site-months.
pub fn run_fold<R: CvRecipe>(
    recipe: &R,
    panel: &Panel,
    folds: &FoldAssignment,
    boundary_sites: &[String],
    fold: usize,
) -> Result<(Vec<CvRow>, FoldAudit)> {
    let boundary: BTreeSet<&str> = boundary_sites.iter().map(String::as_str).collect();
    let in_training = |s: &str| {
        boundary.contains(s)
            || matches!(folds.fold_of(s), Some(f) if f != fold && f != folds.test_fold)
    };
    let train = panel.subset(in_training);
    let scored: Vec<_> = panel
        .observations
        .iter()
        .filter(|o| folds.fold_of(&o.site_id) == Some(fold) && !boundary.contains(o.site_id.as_str()))
        .collect();
    let audit = FoldAudit {
        fold,
        training_sites: train.observations.iter().map(|o| o.site_id.clone()).collect(),
        scored_sites: scored.iter().map(|o| o.site_id.clone()).collect(),
    };
    let model = recipe.fit(&train)?;
    let transform = recipe.transform();
    let mut rows = Vec::with_capacity(scored.len());
    for o in scored {
        let loc = Location::new(o.site_id.clone(), panel.locations[&o.site_id]);
        let month = o.year_month();
        rows.push(CvRow {
            fold,
            site_id: o.site_id.clone(),
            month,
            observed: transform.forward(o.mean_value),
            prediction: recipe.predict(&model, &loc, month)?,
        });
    }
    Ok((rows, audit))
}

/// Cross-validation over the non-test folds, run in parallel.
pub fn run_cv<R: CvRecipe>(
    recipe: &R,
    panel: &Panel,
    folds: &FoldAssignment,
    boundary_sites: &[String],
) -> Result<CvResult> {
    let outcomes: Vec<(usize, Result<(Vec<CvRow>, FoldAudit)>)> = folds
        .validation_folds()
        .into_par_iter()
        .map(|f| (f, run_fold(recipe, panel, folds, boundary_sites, f)))
        .collect();
    let mut rows = Vec::new();
    let mut audits = Vec::new();
    let mut skipped = Vec::new();
    for (f, outcome) in outcomes {
        match outcome {
            Ok((r, a)) => {
                rows.extend(r);
                audits.push(a);
            }
            Err(e) => {
                log::warn!("fold {f} skipped: {e}");
                skipped.push((f, e.to_string()));
            }
        }
    }
    let (transformed, concentration) = pooled_metrics(&rows, recipe.transform())?;
    Ok(CvResult {
        rows,
        audits,
        skipped,
        transformed,
        concentration,
    })
}

pub fn pooled_metrics(rows: &[CvRow], transform: Transform) -> Result<(Metrics, Metrics)> {
    let obs: Vec<f64> = rows.iter().map(|r| r.observed).collect();
    let mean: Vec<f64> = rows.iter().map(|r| r.prediction.y_hat).collect();
    let var: Vec<f64> = rows.iter().map(|r| r.prediction.var).collect();
    Ok((
        compute_metrics(&obs, &mean, &var, Scale::Transformed, transform)?,
        compute_metrics(&obs, &mean, &var, Scale::Concentration, transform)?,
    ))
}

pub fn write_cv_rows<W: Write>(writer: W, rows: &[CvRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "fold", "site_id", "year", "month", "observed", "y_hat", "var", "conc_median", "conc_unbiased", "flags",
    ])?;
    for r in rows {
        let p = &r.prediction;
        wtr.write_record([
            r.fold.to_string(),
            r.site_id.clone(),
            r.month.year.to_string(),
            r.month.month.to_string(),
            r.observed.to_string(),
            p.y_hat.to_string(),
            p.var.to_string(),
            p.conc_median.to_string(),
            p.conc_unbiased.to_string(),
            p.flag_names(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
