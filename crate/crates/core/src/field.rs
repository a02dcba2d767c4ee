//! Sampled solution fields, uniform grids, and the evaluator trait shared by
//! every construction.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `x_min, x_min + Δx, ..., x_max` with `n >= 2` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub n: usize,
}

impl Grid {
    pub fn new(x_min: f64, x_max: f64, n: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite() && x_min < x_max) {
            return Err(Error::InvalidArgument(format!(
                "grid needs finite x_min < x_max, got [{x_min}, {x_max}]"
            )));
        }
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 2 points, got {n}"
            )));
        }
        Ok(Self { x_min, x_max, n })
    }

    /// Grid over `[x_min, x_max]` whose spacing is at most `dx`.
    pub fn with_spacing(x_min: f64, x_max: f64, dx: f64) -> Result<Self> {
        if !(dx > 0.0) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {dx}")));
        }
        let n = ((x_max - x_min) / dx * (1.0 - 1e-12)).ceil() as usize + 1;
        Self::new(x_min, x_max, n.max(2))
    }

    pub fn spacing(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        if i == self.n - 1 {
            self.x_max
        } else {
            self.x_min + i as f64 * self.spacing()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.point(i)).collect()
    }
}

/// Second-derivative scheme used to turn `log τ` into `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// 5-point central second difference of `log τ`.
    Fd,
    /// Closed form from the rank-one structure of `∂ₓK`.
    Trace,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fd" => Ok(Scheme::Fd),
            "trace" => Ok(Scheme::Trace),
            other => Err(Error::InvalidArgument(format!(
                "scheme must be fd or trace, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Fd => "fd",
            Scheme::Trace => "trace",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldMeta {
    pub measure: String,
    pub method: String,
    /// Quadrature nodes per density piece.
    pub n: usize,
    pub scheme: Option<Scheme>,
    /// Non-negative measure provenance (needed by bound checks).
    pub nonnegative: bool,
    pub warnings: Vec<String>,
}

impl FieldMeta {
    pub fn new(measure: impl Into<String>, method: impl Into<String>) -> Self {
        Self {
            measure: measure.into(),
            method: method.into(),
            n: 0,
            scheme: None,
            nonnegative: true,
            warnings: Vec::new(),
        }
    }
}

/// Samples of `q(x, t)` at fixed `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionField {
    pub x: Vec<f64>,
    pub t: f64,
    pub q: Vec<f64>,
    /// Samples at or next to a zero of `τ`; their `q` is NaN.
    pub singular: Vec<bool>,
    pub meta: FieldMeta,
}

impl SolutionField {
    pub fn zeros(grid: &Grid, t: f64, meta: FieldMeta) -> Self {
        Self {
            x: grid.points(),
            t,
            q: vec![0.0; grid.n],
            singular: vec![false; grid.n],
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn is_singular(&self) -> bool {
        self.singular.iter().any(|&s| s)
    }

    /// `max |q - other.q|` over samples regular in both fields.
    pub fn sup_distance(&self, other: &SolutionField) -> Result<f64> {
        if self.x.len() != other.x.len()
            || self.x.iter().zip(&other.x).any(|(a, b)| (a - b).abs() > 1e-12 * (1.0 + a.abs()))
        {
            return Err(Error::InvalidArgument(
                "fields are sampled on different grids".into(),
            ));
        }
        Ok(self
            .q
            .iter()
            .zip(&other.q)
            .zip(self.singular.iter().zip(&other.singular))
            .filter(|(_, (a, b))| !**a && !**b)
            .map(|((a, b), _)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn sup_norm(&self) -> f64 {
        self.q
            .iter()
            .zip(&self.singular)
            .filter(|(_, s)| !**s)
            .map(|(v, _)| v.abs())
            .fold(0.0, f64::max)
    }

    /// CSV with header `x,q`, 17 significant digits, LF endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(40 * (self.x.len() + 1));
        out.push_str("x,q\n");
        for (x, q) in self.x.iter().zip(&self.q) {
            let _ = writeln!(out, "{},{}", fmt_sig17(*x), fmt_sig17(*q));
        }
        out
    }
}

/// Formats with 17 significant digits in scientific notation.
pub fn fmt_sig17(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.16e}")
    }
}

/// Anything that can evaluate `q(x, t)` pointwise.
pub trait Producer: Sync {
    fn q(&self, x: f64, t: f64) -> Result<f64>;
}

impl<F> Producer for F
where
    F: Fn(f64, f64) -> Result<f64> + Sync,
{
    fn q(&self, x: f64, t: f64) -> Result<f64> {
        self(x, t)
    }
}

/// Zero potential.
#[derive(Debug, Clone, Copy, Default)]
pub struct Vacuum;

impl Producer for Vacuum {
    fn q(&self, _x: f64, _t: f64) -> Result<f64> {
        Ok(0.0)
    }
}

/// `-2κ² sech²(κ(x - 4κ²t - x₀))` with `x₀ = ln(c²/(2κ)) / (2κ)`, the
/// field generated by a single atom `(κ, c²)`.
pub fn one_soliton(kappa: f64, weight: f64, x: f64, t: f64) -> f64 {
    let x0 = (weight / (2.0 * kappa)).ln() / (2.0 * kappa);
    let s = 1.0 / (kappa * (x - 4.0 * kappa * kappa * t - x0)).cosh();
    -2.0 * kappa * kappa * s * s
}
