//! The soliton condensate: `dσ = 2(k/h)√(h² − k²) dk` on `[0, h]`, the
//! reflectionless step from `-h²` at `-∞` to `0` at `+∞`.
//!
//! Besides the Dyson route, the field is available through the auxiliary
//! second-kind equation
//! `Y(α) + ∫ e^{8s³t − 2sx} Y(s) / (s + α) dσ(s) = 1`,
//! from which `q = 8 I₁² − 8 I₂` with `I₁ = ∫ s√(1−s²) e^{8s³t−2sx} Y ds`,
//! `I₂ = ∫ s²√(1−s²) e^{8s³t−2sx} Y ds` (h = 1).

use rayon::prelude::*;

use crate::dyson::EXPONENT_GUARD;
use crate::error::{Error, Result};
use crate::field::{FieldMeta, Grid, SolutionField};
use crate::measures::{discretize, DensityForm, DensityPiece, DiscretizedMeasure, SpectralMeasure};
use crate::numkit::Lu;

/// Condition estimates above this attach an accuracy warning.
pub const CONDITION_WARNING: f64 = 1e12;

pub fn condensate_measure(h: f64) -> Result<SpectralMeasure> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("condensate edge h must be positive, got {h}")));
    }
    let m = SpectralMeasure::empty(format!("condensate(h={h})")).with_density(DensityPiece::new(
        DensityForm::Condensate { h },
        [0.0, h],
        1,
    ));
    m.validate()?;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CondensateSpec {
    pub h: f64,
    /// Quadrature order.
    pub n: usize,
    pub t: f64,
}

impl CondensateSpec {
    pub fn new(h: f64, n: usize, t: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("quadrature order must be at least 1".into()));
        }
        if !t.is_finite() {
            return Err(Error::InvalidArgument(format!("time must be finite, got {t}")));
        }
        condensate_measure(h)?;
        Ok(Self { h, n, t })
    }

    pub fn measure(&self) -> SpectralMeasure {
        condensate_measure(self.h).expect("validated in new")
    }

    pub fn discretized(&self) -> Result<DiscretizedMeasure> {
        discretize(&self.measure(), self.n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct YSolution {
    pub nodes: Vec<f64>,
    pub values: Vec<f64>,
    pub x: f64,
    pub t: f64,
    /// `dσ` weights times `e^{8s³t − 2sx}` at each node.
    pub kernel_weights: Vec<f64>,
    /// `max |Y_i + Σ_j B_ij Y_j − 1|`.
    pub residual: f64,
    /// 1-norm condition estimate of `I + B`.
    pub condition: f64,
    pub warnings: Vec<String>,
}

/// Nyström solve of the `Y` equation on the quadrature nodes of `d`.
pub fn solve_y_discrete(d: &DiscretizedMeasure, x: f64, t: f64) -> Result<YSolution> {
    let nodes = &d.nodes;
    let n = nodes.len();
    let exps: Vec<f64> = nodes.iter().map(|&s| 8.0 * s * s * s * t - 2.0 * s * x).collect();
    if let Some(&e) = exps.iter().max_by(|a, b| a.total_cmp(b)) {
        if e > EXPONENT_GUARD || !e.is_finite() {
            return Err(Error::ExponentOverflow {
                exponent: e,
                limit: EXPONENT_GUARD,
                x,
                t,
            });
        }
    }
    let kw: Vec<f64> = d.weights.iter().zip(&exps).map(|(w, e)| w * e.exp()).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| kw[j] / (nodes[i] + nodes[j]) + if i == j { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let lu = Lu::new(n, &flat)?;
    let values = lu.solve(&vec![1.0; n]);
    let residual = rows
        .iter()
        .map(|r| (r.iter().zip(&values).map(|(a, b)| a * b).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let condition = lu.condition_estimate();
    let mut warnings = Vec::new();
    if condition > CONDITION_WARNING {
        warnings.push(format!("Y system at x={x}, t={t}: condition estimate {condition:.3e}, accuracy degraded"));
    }
    if residual > 1e-10 {
        warnings.push(format!("Y system at x={x}, t={t}: residual {residual:.3e}"));
    }
    Ok(YSolution {
        nodes: nodes.clone(),
        values,
        x,
        t,
        kernel_weights: kw,
        residual,
        condition,
        warnings,
    })
}

pub fn solve_y(spec: &CondensateSpec, x: f64) -> Result<YSolution> {
    solve_y_discrete(&spec.discretized()?, x, spec.t)
}

impl YSolution {
    /// `8 I₁² − 8 I₂`; with `dσ = 2s√(1−s²) ds` this is
    /// `2 (Σ w̃ Y)² − 4 Σ w̃ s Y` where `w̃` are the kernel weights.
    pub fn q(&self) -> f64 {
        let i1: f64 = 0.5 * self.kernel_weights.iter().zip(&self.values).map(|(w, y)| w * y).sum::<f64>();
        let i2: f64 = 0.5
            * self
                .kernel_weights
                .iter()
                .zip(&self.values)
                .zip(&self.nodes)
                .map(|((w, y), s)| w * s * y)
                .sum::<f64>();
        8.0 * i1 * i1 - 8.0 * i2
    }
}

/// The condensate field through the `Y` equation; `h = 1` only.
pub fn q_condensate_via_y(spec: &CondensateSpec, grid: &Grid) -> Result<SolutionField> {
    if spec.h != 1.0 {
        return Err(Error::InvalidArgument(format!(
            "the Y-route representation is implemented for h = 1 only, got h = {}; use the Dyson route",
            spec.h
        )));
    }
    let d = spec.discretized()?;
    let xs = grid.points();
    let sols: Vec<Option<YSolution>> = xs
        .par_iter()
        .map(|&x| match solve_y_discrete(&d, x, spec.t) {
            Ok(s) => Ok(Some(s)),
            Err(Error::ExponentOverflow { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let mut meta = FieldMeta::new(spec.measure().name, "y-equation");
    meta.n = spec.n;
    let mut field = SolutionField {
        x: Vec::with_capacity(xs.len()),
        t: spec.t,
        q: Vec::with_capacity(xs.len()),
        singular: Vec::with_capacity(xs.len()),
        meta,
    };
    let mut dropped = 0usize;
    let mut worst_condition: f64 = 0.0;
    let mut degraded = 0usize;
    for (x, s) in xs.iter().zip(sols) {
        match s {
            None => dropped += 1,
            Some(s) => {
                worst_condition = worst_condition.max(s.condition);
                if !s.warnings.is_empty() {
                    degraded += 1;
                }
                field.x.push(*x);
                field.q.push(s.q());
                field.singular.push(false);
            }
        }
    }
    if field.x.is_empty() {
        return Err(Error::ExponentOverflow {
            exponent: f64::INFINITY,
            limit: EXPONENT_GUARD,
            x: grid.x_min,
            t: spec.t,
        });
    }
    if dropped > 0 {
        field.meta.warnings.push(format!("exponent guard: dropped {dropped} grid points"));
    }
    if degraded > 0 {
        field.meta.warnings.push(format!(
            "accuracy degraded at {degraded} grid points (worst condition estimate {worst_condition:.3e})"
        ));
    }
    Ok(field)
}

/// Outer plateau levels of a field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Levels {
    pub left: f64,
    pub right: f64,
    /// Least-squares slopes over the plateau windows.
    pub left_slope: f64,
    pub right_slope: f64,
}

impl Levels {
    /// `(left + h², right)`: deviations from the step limits.
    pub fn deviation(&self, h: f64) -> (f64, f64) {
        (self.left + h * h, self.right)
    }
}

/// Fraction of the window used for each plateau.
pub const PLATEAU_FRACTION: f64 = 0.1;
/// Largest admissible plateau slope per unit x.
pub const PLATEAU_SLOPE: f64 = 1e-3;

fn fit(x: &[f64], q: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let mq = q.iter().sum::<f64>() / n;
    let num: f64 = x.iter().zip(q).map(|(a, b)| (a - mx) * (b - mq)).sum();
    let den: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    (mq, if den > 0.0 { num / den } else { 0.0 })
}

/// Averages over the outer 10% of the samples on each side.
pub fn asymptotic_levels(field: &SolutionField) -> Result<Levels> {
    let n = field.len();
    let m = ((n as f64 * PLATEAU_FRACTION).round() as usize).max(2);
    if n < 2 * m {
        return Err(Error::InconclusiveAsymptotics(format!("{n} samples are too few for plateau detection")));
    }
    let side = |lo: usize, hi: usize, name: &str| -> Result<(f64, f64)> {
        if field.singular[lo..hi].iter().any(|&s| s) {
            return Err(Error::InconclusiveAsymptotics(format!("{name} window contains singular samples")));
        }
        let (level, slope) = fit(&field.x[lo..hi], &field.q[lo..hi]);
        if !(slope.abs() < PLATEAU_SLOPE) {
            return Err(Error::InconclusiveAsymptotics(format!(
                "no {name} plateau: slope {slope:.3e} over x in [{}, {}]",
                field.x[lo],
                field.x[hi - 1]
            )));
        }
        Ok((level, slope))
    };
    let (left, left_slope) = side(0, m, "left")?;
    let (right, right_slope) = side(n - m, n, "right")?;
    Ok(Levels {
        left,
        right,
        left_slope,
        right_slope,
    })
}
