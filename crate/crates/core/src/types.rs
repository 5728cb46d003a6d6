//! Small value types shared across the crate.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Planar location in projected kilometres.
pub type Point = [f64; 2];

/// A calendar month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct YearMonth {
    pub year: i32,
    pub month: u8,
}

impl YearMonth {
    pub fn new(year: i32, month: u8) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::invalid(format!("month {month} not in 1..=12")));
        }
        Ok(YearMonth { year, month })
    }

    /// Months elapsed since January of year 0; consecutive months differ by one.
    pub fn ordinal(&self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    pub fn from_ordinal(ordinal: i64) -> Self {
        YearMonth {
            year: ordinal.div_euclid(12) as i32,
            month: (ordinal.rem_euclid(12) + 1) as u8,
        }
    }

    pub fn season(&self) -> Season {
        Season::of_month(self.month)
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Season {
    Winter,
    Spring,
    Summer,
    Fall,
}

impl Season {
    pub const ALL: [Season; 4] = [Season::Winter, Season::Spring, Season::Summer, Season::Fall];

    /// Dec-Feb winter, Mar-May spring, Jun-Aug summer, Sep-Nov fall.
    pub fn of_month(month: u8) -> Season {
        match month {
            12 | 1 | 2 => Season::Winter,
            3..=5 => Season::Spring,
            6..=8 => Season::Summer,
            _ => Season::Fall,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Season::Winter => "winter",
            Season::Spring => "spring",
            Season::Summer => "summer",
            Season::Fall => "fall",
        }
    }

    pub fn parse(s: &str) -> Result<Season> {
        match s.trim().to_ascii_lowercase().as_str() {
            "winter" => Ok(Season::Winter),
            "spring" => Ok(Season::Spring),
            "summer" => Ok(Season::Summer),
            "fall" | "autumn" => Ok(Season::Fall),
            other => Err(Error::invalid(format!("unknown season '{other}'"))),
        }
    }
}

/// Variance-stabilising transform applied to concentrations before modeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Transform {
    #[default]
    Log,
    Sqrt,
}

impl Transform {
    pub fn forward(self, conc: f64) -> f64 {
        match self {
            Transform::Log => conc.ln(),
            Transform::Sqrt => conc.sqrt(),
        }
    }

    /// Median-unbiased back-transform.
    pub fn inverse(self, value: f64) -> f64 {
        match self {
            Transform::Log => value.exp(),
            Transform::Sqrt => value * value,
        }
    }

    /// Mean-unbiased back-transform given the predictive variance.
    pub fn inverse_unbiased(self, value: f64, var: f64) -> f64 {
        match self {
            Transform::Log => (value + 0.5 * var).exp(),
            Transform::Sqrt => value * value + var,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Transform::Log => "log",
            Transform::Sqrt => "sqrt",
        }
    }

    pub fn parse(s: &str) -> Result<Transform> {
        match s.trim().to_ascii_lowercase().as_str() {
            "log" => Ok(Transform::Log),
            "sqrt" => Ok(Transform::Sqrt),
            other => Err(Error::invalid(format!("unknown transform '{other}'"))),
        }
    }
}

/// Axis-aligned box in projected coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Point,
    pub max: Point,
}

impl BoundingBox {
    pub fn from_points(points: &[Point]) -> Option<BoundingBox> {
        let first = points.first()?;
        let mut bbox = BoundingBox {
            min: *first,
            max: *first,
        };
        for p in points {
            for d in 0..2 {
                bbox.min[d] = bbox.min[d].min(p[d]);
                bbox.max[d] = bbox.max[d].max(p[d]);
            }
        }
        Some(bbox)
    }

    pub fn contains(&self, p: Point) -> bool {
        (0..2).all(|d| p[d] >= self.min[d] && p[d] <= self.max[d])
    }

    pub fn width(&self) -> f64 {
        (self.max[0] - self.min[0]).max(self.max[1] - self.min[1])
    }
}
