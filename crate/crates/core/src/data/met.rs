use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gam::{fit_additive, FixedBlock, LambdaPolicy, TermData, TermSpec};
use crate::splines::{distinct_points, tps_basis_k};
use crate::types::{Point, YearMonth};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationValue {
    pub point: Point,
    pub month: YearMonth,
    pub value: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct MetSmoothOptions {
    pub max_knots: usize,
    pub lambda: LambdaPolicy,
}

impl Default for MetSmoothOptions {
    fn default() -> Self {
        MetSmoothOptions {
            max_knots: 100,
            lambda: LambdaPolicy::Free,
        }
    }
}

/// Per-month 2-D smooth of station values, evaluated at `targets`.
pub fn smooth_met_covariate(
    stations: &[StationValue],
    targets: &[Point],
    options: MetSmoothOptions,
) -> Result<BTreeMap<YearMonth, Vec<f64>>> {
    let mut by_month: BTreeMap<YearMonth, Vec<&StationValue>> = BTreeMap::new();
    for s in stations {
        by_month.entry(s.month).or_default().push(s);
    }
    let mut out = BTreeMap::new();
    for (month, rows) in by_month {
        let pts: Vec<Point> = rows.iter().map(|r| r.point).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.value).collect();
        let n_distinct = distinct_points(&pts).len();
        if n_distinct < 3 {
            return Err(Error::DegenerateMonth {
                month: month.to_string(),
                stations: n_distinct,
                required: 3,
            });
        }
        let values = if n_distinct == 3 {
            // Only the affine part is identifiable.
            let xy = DMatrix::from_fn(pts.len(), 2, |i, j| pts[i][j]);
            let fit = fit_additive(
                &y,
                vec![],
                vec![FixedBlock::Dense {
                    name: "affine".into(),
                    matrix: xy,
                }],
                None,
            )?;
            let b = &fit.coefficients;
            targets.iter().map(|t| b[0] + b[1] * t[0] + b[2] * t[1]).collect()
        } else {
            let basis = tps_basis_k(&pts, options.max_knots.min(n_distinct))?;
            let fit = fit_additive(
                &y,
                vec![TermSpec::new("s(x,y)", basis).with_policy(options.lambda)],
                vec![],
                None,
            )?;
            let (mean, _) =
                fit.predict_joint(&[("s(x,y)", &TermData::Points(targets.to_vec()))], true)?;
            mean.iter().copied().collect()
        };
        out.insert(month, values);
    }
    Ok(out)
}
