use log::warn;
use serde::{Deserialize, Serialize};

use crate::types::Point;

/// Knot locations for a low-rank radial basis. One-dimensional knots store the
/// coordinate in slot 0 and zero in slot 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knots {
    pub points: Vec<Point>,
}

impl Knots {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn from_scalars(values: &[f64]) -> Knots {
        Knots {
            points: values.iter().map(|&v| [v, 0.0]).collect(),
        }
    }
}

fn dist2(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Distinct points in first-occurrence order.
pub fn distinct_points(points: &[Point]) -> Vec<Point> {
    let mut keyed: Vec<(u64, u64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (canonical_bits(p[0]), canonical_bits(p[1]), i))
        .collect();
    keyed.sort_unstable();
    keyed.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    let mut first: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();
    first.sort_unstable();
    first.into_iter().map(|i| points[i]).collect()
}

fn canonical_bits(v: f64) -> u64 {
    // -0.0 and 0.0 are the same location
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

/// Space-filling knot selection: start from the point nearest the centroid,
/// then repeatedly add the point farthest from the current knot set. Ties go
/// to the lowest input index, so the result depends only on input order.
pub fn select_knots(points: &[Point], k: usize) -> Knots {
    let distinct = distinct_points(points);
    let k = if distinct.len() < k {
        warn!(
            "requested {k} knots but only {} distinct points; reducing",
            distinct.len()
        );
        distinct.len()
    } else {
        k
    };
    if k == 0 {
        return Knots { points: Vec::new() };
    }
    if k == distinct.len() {
        return Knots { points: distinct };
    }

    let n = distinct.len() as f64;
    let centroid = distinct.iter().fold([0.0, 0.0], |acc, p| {
        [acc[0] + p[0] / n, acc[1] + p[1] / n]
    });
    let mut start = 0;
    let mut best = f64::INFINITY;
    for (i, p) in distinct.iter().enumerate() {
        let d = dist2(*p, centroid);
        if d < best {
            best = d;
            start = i;
        }
    }

    let mut chosen = vec![start];
    let mut min_d: Vec<f64> = distinct.iter().map(|p| dist2(*p, distinct[start])).collect();
    while chosen.len() < k {
        let mut next = 0;
        let mut far = -1.0;
        for (i, &d) in min_d.iter().enumerate() {
            if d > far {
                far = d;
                next = i;
            }
        }
        chosen.push(next);
        for (i, p) in distinct.iter().enumerate() {
            let d = dist2(*p, distinct[next]);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    Knots {
        points: chosen.into_iter().map(|i| distinct[i]).collect(),
    }
}

/// Knots at (approximately) evenly spaced quantiles of the distinct values of
/// `x`. Every knot is an observed value.
pub fn quantile_knots(x: &[f64], k: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted.dedup();
    let k = if sorted.len() < k {
        warn!(
            "requested {k} knots but only {} distinct values; reducing",
            sorted.len()
        );
        sorted.len()
    } else {
        k
    };
    if k <= 1 {
        return sorted.into_iter().take(k).collect();
    }
    let last = (sorted.len() - 1) as f64;
    let mut knots: Vec<f64> = (0..k)
        .map(|i| sorted[(last * i as f64 / (k - 1) as f64).round() as usize])
        .collect();
    knots.dedup();
    knots
}
