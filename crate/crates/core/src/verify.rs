//! Verification instruments: KdV residual, sign/bound checks, Sturm
//! counting of bound states, and a leading-trough probe.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{Producer, SolutionField};

/// Sample points used by [`kdv_residual`] when none are given.
pub const DEFAULT_RESIDUAL_POINTS: usize = 101;

/// Norms of `u_t - 6 u u_x + u_xxx` over a window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub window: (f64, f64),
    pub t: f64,
    pub dx: f64,
    pub dt: f64,
    pub sup: f64,
    pub l2: f64,
    /// Sample points whose stencil touched a zero of `τ`.
    pub excluded: usize,
    pub points: usize,
    /// Sup norm at `2dx, 2dt`.
    pub coarse_sup: Option<f64>,
    /// `log2(coarse_sup / sup)`.
    pub order: Option<f64>,
}

impl ResidualReport {
    /// `coarse_sup / sup`; about 16 for a fourth-order scheme.
    pub fn reduction(&self) -> Option<f64> {
        self.coarse_sup.map(|c| c / self.sup)
    }
}

fn residual_at<P: Producer + ?Sized>(p: &P, x: f64, t: f64, dx: f64, dt: f64) -> Result<Option<f64>> {
    let eval = |x: f64, t: f64| -> Result<Option<f64>> {
        match p.q(x, t) {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            Ok(_) | Err(Error::SingularDeterminant { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let mut ux = [0.0; 7];
    for (j, slot) in ux.iter_mut().enumerate() {
        match eval(x + (j as f64 - 3.0) * dx, t)? {
            Some(v) => *slot = v,
            None => return Ok(None),
        }
    }
    let mut ut = [0.0; 4];
    for (j, off) in [-2.0, -1.0, 1.0, 2.0].iter().enumerate() {
        match eval(x, t + off * dt)? {
            Some(v) => ut[j] = v,
            None => return Ok(None),
        }
    }
    let u = ux[3];
    let u_t = (ut[0] - 8.0 * ut[1] + 8.0 * ut[2] - ut[3]) / (12.0 * dt);
    let u_x = (ux[1] - 8.0 * ux[2] + 8.0 * ux[4] - ux[5]) / (12.0 * dx);
    let u_xxx = (-ux[6] + 8.0 * ux[5] - 13.0 * ux[4] + 13.0 * ux[2] - 8.0 * ux[1] + ux[0]) / (8.0 * dx * dx * dx);
    Ok(Some(u_t - 6.0 * u * u_x + u_xxx))
}

fn residual_norms<P: Producer + ?Sized>(p: &P, xs: &[f64], t: f64, dx: f64, dt: f64) -> Result<(f64, f64, usize)> {
    let r: Vec<Option<f64>> = xs
        .par_iter()
        .map(|&x| residual_at(p, x, t, dx, dt))
        .collect::<Result<_>>()?;
    let excluded = r.iter().filter(|v| v.is_none()).count();
    let vals: Vec<f64> = r.into_iter().flatten().collect();
    let sup = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let l2 = if vals.is_empty() {
        0.0
    } else {
        (vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64).sqrt()
    };
    Ok((sup, l2, excluded))
}

/// KdV residual of `p` at `points` evenly spaced positions of `window`,
/// differentiating the producer itself at `(dx, dt)` and at `(2dx, 2dt)`.
///
/// The coarse pair keeps the order estimate above the roundoff floor of the
/// third difference, which grows like `ε/dx³`.
pub fn kdv_residual<P: Producer + ?Sized>(p: &P, window: (f64, f64), t: f64, dx: f64, dt: f64, points: usize) -> Result<ResidualReport> {
    let (a, b) = window;
    if !(a < b) || !(dx > 0.0) || !(dt > 0.0) || points < 2 {
        return Err(Error::InvalidArgument(format!(
            "residual needs a < b, positive steps and 2+ points (window [{a}, {b}], dx {dx}, dt {dt}, {points} points)"
        )));
    }
    let xs: Vec<f64> = (0..points)
        .map(|i| a + (b - a) * i as f64 / (points - 1) as f64)
        .collect();
    let (sup, l2, excluded) = residual_norms(p, &xs, t, dx, dt)?;
    let (coarse, _, coarse_excluded) = residual_norms(p, &xs, t, 2.0 * dx, 2.0 * dt)?;
    let order = if coarse > 0.0 && sup > 0.0 { Some((coarse / sup).log2()) } else { None };
    Ok(ResidualReport {
        window,
        t,
        dx,
        dt,
        sup,
        l2,
        excluded: excluded.max(coarse_excluded),
        points,
        coarse_sup: Some(coarse),
        order,
    })
}

/// Extremes of a field checked against `-2h² < q < 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub h: f64,
    pub min: f64,
    pub max: f64,
    pub samples: usize,
    /// Samples within `1e-12` of `-2h²` (accepted as the boundary case).
    pub boundary_hits: usize,
}

/// Tolerance on either side of the open interval.
pub const BOUND_SLACK: f64 = 1e-9;
/// Distance from `-2h²` still accepted as touching the bound.
pub const BOUNDARY_EQUALITY: f64 = 1e-12;

/// Checks `-2h² < q < 0` at every sample of a field built from a
/// non-negative measure.
pub fn bounds_check(field: &SolutionField, h: f64) -> Result<BoundsReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("h must be positive, got {h}")));
    }
    if !field.meta.nonnegative {
        return Err(Error::InvalidArgument(format!(
            "bounds need a non-negative measure, {} is signed",
            field.meta.measure
        )));
    }
    let lower = -2.0 * h * h;
    let mut report = BoundsReport {
        h,
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
        samples: 0,
        boundary_hits: 0,
    };
    for ((&x, &q), &s) in field.x.iter().zip(&field.q).zip(&field.singular) {
        if s || !q.is_finite() || q > BOUND_SLACK || q < lower - BOUND_SLACK {
            return Err(Error::BoundViolated { x, q, lower, upper: 0.0 });
        }
        if (q - lower).abs() <= BOUNDARY_EQUALITY {
            report.boundary_hits += 1;
        }
        report.min = report.min.min(q);
        report.max = report.max.max(q);
        report.samples += 1;
    }
    Ok(report)
}

/// Dirichlet eigenvalues below `energy` on `[a, b]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralCount {
    pub energy: f64,
    pub count: usize,
    /// One bracket `(lo, hi)` per eigenvalue, increasing.
    pub brackets: Vec<(f64, f64)>,
}

impl SpectralCount {
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.brackets.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }
}

/// Bracket width at which bisection stops.
pub const EIGEN_TOLERANCE: f64 = 1e-10;
const RENORMALIZE: f64 = 1e100;

/// `q` tabulated on a half-step lattice for repeated shooting.
struct Shooting {
    h: f64,
    steps: usize,
    q: Vec<f64>,
}

impl Shooting {
    fn new<P: Producer + ?Sized>(p: &P, t: f64, a: f64, b: f64, step: f64) -> Result<Self> {
        let steps = crate::numkit::ode::substeps(b - a, step);
        let h = (b - a) / steps as f64;
        let q = (0..=2 * steps)
            .into_par_iter()
            .map(|i| p.q(a + 0.5 * h * i as f64, t))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(i) = q.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "potential is not finite at x = {}",
                a + 0.5 * h * i as f64
            )));
        }
        Ok(Self { h, steps, q })
    }

    /// Sign changes of `y` for `y'' = (q - E) y`, `y(a) = 0`, `y'(a) = 1`.
    fn nodes(&self, e: f64) -> usize {
        let h = self.h;
        let (mut y, mut dy) = (0.0f64, 1.0f64);
        let mut count = 0;
        let mut prev = 0.0f64;
        for s in 0..self.steps {
            let (q0, q1, q2) = (self.q[2 * s] - e, self.q[2 * s + 1] - e, self.q[2 * s + 2] - e);
            let (k1y, k1d) = (dy, q0 * y);
            let (k2y, k2d) = (dy + 0.5 * h * k1d, q1 * (y + 0.5 * h * k1y));
            let (k3y, k3d) = (dy + 0.5 * h * k2d, q1 * (y + 0.5 * h * k2y));
            let (k4y, k4d) = (dy + h * k3d, q2 * (y + h * k3y));
            y += h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
            dy += h / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d);
            if y != 0.0 {
                if prev != 0.0 && (y > 0.0) != (prev > 0.0) {
                    count += 1;
                }
                prev = y;
            }
            let m = y.abs().max(dy.abs());
            if m > RENORMALIZE {
                y /= m;
                dy /= m;
                prev = y;
            }
        }
        count
    }

    fn min_q(&self) -> f64 {
        self.q.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn bisect(sh: &Shooting, lo: f64, hi: f64, n_lo: usize, n_hi: usize, out: &mut Vec<(f64, f64)>) {
    if n_hi == n_lo {
        return;
    }
    if hi - lo <= EIGEN_TOLERANCE * (1.0 + hi.abs()) {
        for _ in n_lo..n_hi {
            out.push((lo, hi));
        }
        return;
    }
    let mid = 0.5 * (lo + hi);
    let n_mid = sh.nodes(mid);
    bisect(sh, lo, mid, n_lo, n_mid, out);
    bisect(sh, mid, hi, n_mid, n_hi, out);
}

/// Counts eigenvalues of `-y'' + q y = E y` below `energy` on `[a, b]` with
/// Dirichlet ends (RK4 shooting at `step`), and brackets each by bisection.
pub fn count_bound_states<P: Producer + ?Sized>(p: &P, t: f64, interval: (f64, f64), energy: f64, step: f64) -> Result<SpectralCount> {
    let (a, b) = interval;
    if !(a < b) || !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need a < b and a positive step, got [{a}, {b}] and {step}"
        )));
    }
    if !(energy < 0.0) {
        return Err(Error::InvalidArgument(format!("energy must be negative, got {energy}")));
    }
    let sh = Shooting::new(p, t, a, b, step)?;
    let count = sh.nodes(energy);
    let floor = sh.min_q().min(energy) - 1.0;
    let mut brackets = Vec::with_capacity(count);
    bisect(&sh, floor, energy, sh.nodes(floor), count, &mut brackets);
    Ok(SpectralCount { energy, count, brackets })
}

/// Leading trough of a field: depth, position and speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolitonProbe {
    pub depth: f64,
    pub position: f64,
    pub speed: f64,
}

/// Time offset for the speed estimate.
pub const PROBE_DELTA: f64 = 0.1;
/// A trough counts as separated when the maximum between it and the next
/// trough on its left rises above this fraction of its depth.
pub const SEPARATION: f64 = 0.5;

fn refine_minimum<P: Producer + ?Sized>(p: &P, t: f64, x0: f64, dx: f64) -> Result<(f64, f64)> {
    let mut x = x0;
    let mut h = dx;
    while h > 1e-6 {
        let (a, b, c) = (p.q(x - h, t)?, p.q(x, t)?, p.q(x + h, t)?);
        let curv = a - 2.0 * b + c;
        if !(curv > 0.0) {
            break;
        }
        let shift = 0.5 * h * (a - c) / curv;
        x += shift.clamp(-h, h);
        h *= 0.1;
    }
    Ok((x, p.q(x, t)?))
}

fn leading_trough<P: Producer + ?Sized>(p: &P, t: f64, window: (f64, f64), dx: f64) -> Result<(f64, f64)> {
    let (a, b) = window;
    let n = ((b - a) / dx).round() as usize + 1;
    let xs: Vec<f64> = (0..n).map(|i| a + dx * i as f64).collect();
    let q = xs.par_iter().map(|&x| p.q(x, t)).collect::<Result<Vec<f64>>>()?;
    let scale = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::Inconclusive(format!("field vanishes on [{a}, {b}] at t = {t}")));
    }
    let minima: Vec<usize> = (1..n - 1)
        .filter(|&i| q[i] < q[i - 1] && q[i] <= q[i + 1] && q[i] < -1e-3 * scale)
        .collect();
    let Some(&lead) = minima.last() else {
        return Err(Error::Inconclusive(format!("no trough on [{a}, {b}] at t = {t}")));
    };
    if lead + 1 >= n - 1 {
        return Err(Error::Inconclusive(format!("trough at the right edge of [{a}, {b}]")));
    }
    let depth = q[lead];
    let left_max = q[..lead].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gap = match minima.len() {
        1 => left_max,
        m => q[minima[m - 2]..lead].iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    if gap < depth * (1.0 - SEPARATION) {
        return Err(Error::Inconclusive(format!(
            "trough at x = {:.3} (q = {depth:.4}) is not separated: the field only recovers to {gap:.4} on its left",
            xs[lead]
        )));
    }
    refine_minimum(p, t, xs[lead], dx)
}

/// Locates the right-most separated trough of `q(·, t)` on `window`
/// (sampled at `dx`), then again at `t - δ` to estimate its speed.
pub fn leading_soliton_probe<P: Producer + ?Sized>(p: &P, t: f64, window: (f64, f64), dx: f64) -> Result<SolitonProbe> {
    if !(window.0 < window.1) || !(dx > 0.0) || dx * 4.0 > window.1 - window.0 {
        return Err(Error::InvalidArgument(format!(
            "probe window [{}, {}] with spacing {dx} is not usable",
            window.0, window.1
        )));
    }
    let (x1, depth) = leading_trough(p, t, window, dx)?;
    let (x0, _) = leading_trough(p, t - PROBE_DELTA, window, dx)?;
    Ok(SolitonProbe {
        depth,
        position: x1,
        speed: (x1 - x0) / PROBE_DELTA,
    })
}
