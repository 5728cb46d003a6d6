//! Coordinate-wise GCV minimization over log10 smoothing parameters.
//!
//! Each free coordinate is seeded from an integer grid on [-8, 8] and refined
//! by golden-section search in the bracket around the best grid point. Cycles
//! repeat until the relative score improvement drops below 1e-7 or 30 cycles
//! have run. Coordinates are on the normalized scale `lambda / scale_k`, where
//! `scale_k` matches the penalty to the term's weighted cross-product.

use super::{AdditiveProblem, LambdaPolicy, PreparedResponse};
use crate::error::Result;

pub const LAMBDA_LOG10_MIN: f64 = -8.0;
pub const LAMBDA_LOG10_MAX: f64 = 8.0;
const MAX_CYCLES: usize = 30;
const REL_TOL: f64 = 1e-7;
const GOLDEN_TOL: f64 = 1e-3;

enum Coord {
    Fixed(f64),
    Search { lo: f64, hi: f64 },
}

struct Objective<'a> {
    problem: &'a AdditiveProblem,
    resp: &'a PreparedResponse,
    scales: Vec<f64>,
    /// Scores closer than this are ties; ties resolve toward larger lambda.
    tie: f64,
}

impl Objective<'_> {
    fn no_worse(&self, candidate: f64, incumbent: f64) -> bool {
        candidate <= incumbent + self.tie + 1e-12 * incumbent.abs()
    }
}

impl Objective<'_> {
    fn raw(&self, rho: &[f64]) -> Vec<f64> {
        rho.iter()
            .zip(&self.scales)
            .map(|(r, s)| s * 10f64.powf(*r))
            .collect()
    }

    fn score(&self, rho: &[f64], coords: &[Coord]) -> f64 {
        let lambdas: Vec<f64> = self
            .raw(rho)
            .into_iter()
            .zip(coords)
            .map(|(l, c)| match c {
                Coord::Fixed(v) => *v,
                Coord::Search { .. } => l,
            })
            .collect();
        match self.problem.solve(self.resp, &lambdas) {
            Ok(sol) => self.problem.score(&sol).unwrap_or(f64::INFINITY),
            Err(_) => f64::INFINITY,
        }
    }
}

pub(super) fn select_lambdas(problem: &AdditiveProblem, resp: &PreparedResponse) -> Result<Vec<f64>> {
    let k = problem.n_terms();
    let scales: Vec<f64> = (0..k).map(|i| problem.term_scale(i)).collect();
    let coords: Vec<Coord> = (0..k)
        .map(|i| match problem.term_policy(i) {
            LambdaPolicy::Fixed(l) => Coord::Fixed(l),
            LambdaPolicy::Free => Coord::Search {
                lo: LAMBDA_LOG10_MIN,
                hi: LAMBDA_LOG10_MAX,
            },
            LambdaPolicy::LowerBounded(l) => {
                let floor = (l / scales[i]).log10();
                if floor >= LAMBDA_LOG10_MAX {
                    Coord::Fixed(l)
                } else {
                    Coord::Search {
                        lo: floor.max(LAMBDA_LOG10_MIN),
                        hi: LAMBDA_LOG10_MAX,
                    }
                }
            }
        })
        .collect();
    let n = problem.n() as f64;
    let obj = Objective {
        problem,
        resp,
        scales,
        tie: (1e-20 * resp.total_ss()).max(resp.rounding_ss()) / n,
    };
    let mut rho: Vec<f64> = coords
        .iter()
        .map(|c| match c {
            Coord::Fixed(_) => 0.0,
            Coord::Search { lo, hi } => 0.0f64.clamp(*lo, *hi),
        })
        .collect();

    let free: Vec<usize> = (0..k).filter(|&i| matches!(coords[i], Coord::Search { .. })).collect();
    if !free.is_empty() {
        let mut best = obj.score(&rho, &coords);
        for _cycle in 0..MAX_CYCLES {
            let start = best;
            for &i in &free {
                let Coord::Search { lo, hi } = coords[i] else {
                    unreachable!()
                };
                let (r, s) = minimize_coordinate(&obj, &coords, &mut rho, i, lo, hi);
                if s <= best {
                    rho[i] = r;
                    best = s;
                }
            }
            let improvement = start - best;
            if !(improvement > REL_TOL * best.abs().max(f64::MIN_POSITIVE)) {
                break;
            }
        }
    }

    let raw = obj.raw(&rho);
    Ok(raw
        .into_iter()
        .zip(&coords)
        .map(|(l, c)| match c {
            Coord::Fixed(v) => *v,
            Coord::Search { .. } => l,
        })
        .collect())
}

/// Grid seed then golden-section refinement along coordinate `i`. Returns the
/// best coordinate value and its score; leaves `rho[i]` at its input value.
fn minimize_coordinate(
    obj: &Objective<'_>,
    coords: &[Coord],
    rho: &mut [f64],
    i: usize,
    lo: f64,
    hi: f64,
) -> (f64, f64) {
    let original = rho[i];
    let eval = |r: f64, rho: &mut [f64]| {
        rho[i] = r;
        obj.score(rho, coords)
    };

    let mut grid: Vec<f64> = Vec::new();
    let mut g = lo.ceil();
    grid.push(lo);
    while g < hi {
        if g > lo {
            grid.push(g);
        }
        g += 1.0;
    }
    grid.push(hi);
    if !grid.contains(&original) {
        grid.push(original);
    }

    let mut best_r = original;
    let mut best_s = f64::INFINITY;
    grid.sort_by(f64::total_cmp);
    for &r in &grid {
        let s = eval(r, rho);
        if s.is_finite() && obj.no_worse(s, best_s) {
            best_s = s;
            best_r = r;
        }
    }

    let mut a = (best_r - 1.0).max(lo);
    let mut b = (best_r + 1.0).min(hi);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = eval(c, rho);
    let mut fd = eval(d, rho);
    while b - a > GOLDEN_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = eval(c, rho);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = eval(d, rho);
        }
    }
    for (r, s) in [(c, fc), (d, fd)] {
        if s < best_s {
            best_s = s;
            best_r = r;
        }
    }
    rho[i] = original;
    (best_r, best_s)
}
