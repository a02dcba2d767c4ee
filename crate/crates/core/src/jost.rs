//! Right Jost solutions `ψ(s; iλ) ~ e^{-λs}` of a seed potential decaying at
//! `+∞`, and the overlap kernel `∫ₓ^∞ ψ(s; iλ) ψ(s; iμ) ds`.
//!
//! Integration runs backward in `φ = ψ e^{λs}`, which satisfies
//! `φ'' = 2λφ' + qφ`; the growing free mode `e^{2λs}` decays in that
//! direction. The boundary at `X` is `φ = 1 + I/(2λ)`, `φ' = -q(X)/(2λ)`
//! with `I = ∫_X^∞ q`, the first Born correction to the free solution.

use rayon::prelude::*;

use crate::dyson::DysonSolver;
use crate::error::{Error, Result};
use crate::field::{Grid, SolutionField};
use crate::measures::SpectralMeasure;
use crate::numkit::SymmetricMatrix;

/// Default RK4 step.
pub const DEFAULT_STEP: f64 = 1e-3;
/// Default bound on `|q|` beyond the cutoff.
pub const DEFAULT_TAIL: f64 = 1e-10;

/// Cubic Hermite interpolant of uniform samples with fourth-order slopes and
/// an exponential model beyond the last sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSeed {
    pub x0: f64,
    pub dx: f64,
    pub q: Vec<f64>,
    slopes: Vec<f64>,
    /// `q ≈ q_N e^{-β(x - x_N)}` beyond the samples.
    pub tail_rate: f64,
}

impl SampledSeed {
    pub fn new(x0: f64, dx: f64, q: Vec<f64>) -> Result<Self> {
        let n = q.len();
        if n < 5 || !(dx > 0.0) || q.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "sampled seed needs at least 5 finite uniform samples".into(),
            ));
        }
        let slopes = (0..n)
            .map(|i| {
                let d = if i >= 2 && i + 2 < n {
                    (q[i - 2] - 8.0 * q[i - 1] + 8.0 * q[i + 1] - q[i + 2]) / 12.0
                } else if i < 2 {
                    (-25.0 * q[i] + 48.0 * q[i + 1] - 36.0 * q[i + 2] + 16.0 * q[i + 3] - 3.0 * q[i + 4]) / 12.0
                } else {
                    (25.0 * q[i] - 48.0 * q[i - 1] + 36.0 * q[i - 2] - 16.0 * q[i - 3] + 3.0 * q[i - 4]) / 12.0
                };
                d / dx
            })
            .collect();
        // rate from the last 1/10 of the samples (at least 4 steps)
        let span = (n / 10).max(4).min(n - 1);
        let (a, b) = (q[n - 1 - span], q[n - 1]);
        let tail_rate = if a * b > 0.0 && a.abs() > b.abs() {
            (a / b).ln() / (span as f64 * dx)
        } else {
            0.0
        };
        Ok(Self {
            x0,
            dx,
            q,
            slopes,
            tail_rate,
        })
    }

    pub fn from_field(field: &SolutionField) -> Result<Self> {
        if field.is_singular() {
            return Err(Error::InvalidArgument("cannot build a seed from a singular field".into()));
        }
        let dx = (field.x[field.len() - 1] - field.x[0]) / (field.len() - 1) as f64;
        Self::new(field.x[0], dx, field.q.clone())
    }

    pub fn x_last(&self) -> f64 {
        self.x0 + (self.q.len() - 1) as f64 * self.dx
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        let n = self.q.len();
        let last = self.x_last();
        if x > last {
            let qn = self.q[n - 1];
            return Ok(if self.tail_rate > 0.0 {
                qn * (-self.tail_rate * (x - last)).exp()
            } else {
                qn
            });
        }
        let r = (x - self.x0) / self.dx;
        if r < -1e-9 {
            return Err(Error::InvalidArgument(format!(
                "seed evaluated at x={x}, left of its samples (x0={})",
                self.x0
            )));
        }
        let i = (r.floor().max(0.0) as usize).min(n - 2);
        let s = (r - i as f64).clamp(0.0, 1.0);
        let (p0, p1) = (self.q[i], self.q[i + 1]);
        let (m0, m1) = (self.slopes[i] * self.dx, self.slopes[i + 1] * self.dx);
        let s2 = s * s;
        let s3 = s2 * s;
        Ok((2.0 * s3 - 3.0 * s2 + 1.0) * p0 + (s3 - 2.0 * s2 + s) * m0 + (-2.0 * s3 + 3.0 * s2) * p1 + (s3 - s2) * m1)
    }

    fn tail_integral(&self, x: f64) -> Result<f64> {
        if x < self.x_last() {
            return Err(Error::InvalidArgument("tail integral requested inside the samples".into()));
        }
        let v = self.eval(x)?;
        Ok(if self.tail_rate > 0.0 { v / self.tail_rate } else { 0.0 })
    }
}

#[derive(Debug, Clone)]
enum SeedKind {
    Zero,
    Dyson(Box<DysonSolver>),
    Sampled { seed: Box<SampledSeed>, t: f64 },
}

/// A potential decaying at `+∞` together with its known discrete data `ρ`.
#[derive(Debug, Clone)]
pub struct SeedPotential {
    kind: SeedKind,
    /// Spectral data of the seed, as far as known.
    pub data: SpectralMeasure,
    /// Bound on `|q|` beyond the cutoff.
    pub eps_tail: f64,
}

impl SeedPotential {
    pub fn zero() -> Self {
        Self {
            kind: SeedKind::Zero,
            data: SpectralMeasure::empty("zero"),
            eps_tail: DEFAULT_TAIL,
        }
    }

    /// Reflectionless seed `q_ρ` evaluated by Dyson's formula.
    pub fn from_measure(rho: &SpectralMeasure, n: usize) -> Result<Self> {
        Ok(Self {
            kind: SeedKind::Dyson(Box::new(DysonSolver::new(rho, n)?)),
            data: rho.clone(),
            eps_tail: DEFAULT_TAIL,
        })
    }

    /// Snapshot seed at time `t` carrying data `data`.
    pub fn from_samples(seed: SampledSeed, t: f64, data: SpectralMeasure) -> Self {
        Self {
            kind: SeedKind::Sampled {
                seed: Box::new(seed),
                t,
            },
            data,
            eps_tail: DEFAULT_TAIL,
        }
    }

    pub fn with_tail_tolerance(mut self, eps: f64) -> Self {
        self.eps_tail = eps;
        self
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, SeedKind::Zero)
    }

    pub fn name(&self) -> String {
        match &self.kind {
            SeedKind::Zero => "zero".into(),
            SeedKind::Dyson(d) => d.name.clone(),
            SeedKind::Sampled { .. } => format!("sampled[{}]", self.data.name),
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if let SeedKind::Sampled { t: ts, .. } = &self.kind {
            if (t - ts).abs() > 1e-12 * (1.0 + ts.abs()) {
                return Err(Error::InvalidArgument(format!(
                    "sampled seed is a snapshot at t={ts}, requested t={t}"
                )));
            }
        }
        Ok(())
    }

    pub fn q(&self, x: f64, t: f64) -> Result<f64> {
        match &self.kind {
            SeedKind::Zero => Ok(0.0),
            SeedKind::Dyson(d) => d.q_point(x, t),
            SeedKind::Sampled { seed, .. } => {
                self.check_time(t)?;
                seed.eval(x)
            }
        }
    }

    /// `∫_x^∞ q(s, t) ds`, used beyond the cutoff only.
    pub fn tail_integral(&self, x: f64, t: f64) -> Result<f64> {
        match &self.kind {
            SeedKind::Zero => Ok(0.0),
            SeedKind::Dyson(d) => d.tail_integral(x, t),
            SeedKind::Sampled { seed, .. } => {
                self.check_time(t)?;
                seed.tail_integral(x.max(seed.x_last()))
            }
        }
    }

    /// Smallest `X ≥ from` (on a unit lattice, at most `from + 1000`) with
    /// `|q| ≤ eps_tail` at every sample of `[X, X + 20]` (step 0.25).
    pub fn cutoff(&self, from: f64, t: f64) -> Result<f64> {
        if self.is_zero() {
            return Ok(from);
        }
        self.check_time(t)?;
        let floor = match &self.kind {
            SeedKind::Sampled { seed, .. } => seed.x_last(),
            _ => from,
        };
        let mut x = from.max(floor.min(from + 1000.0));
        let mut last_value = 0.0;
        while x <= from + 1000.0 {
            let probe: Vec<f64> = (0..=80).map(|j| x + 0.25 * j as f64).collect();
            let vals: Vec<f64> = probe.par_iter().map(|&s| self.q(s, t)).collect::<Result<_>>()?;
            match vals.iter().position(|v| v.abs() > self.eps_tail) {
                None => return Ok(x),
                Some(j) => {
                    last_value = vals[j];
                    x = probe[j].floor() + 1.0;
                }
            }
        }
        Err(Error::TailNotNegligible {
            x_max: from + 1000.0,
            value: last_value,
            tolerance: self.eps_tail,
        })
    }
}

/// Right Jost solutions for a set of `λ` on a lattice aligned with an output
/// grid, with the scaled overlaps accumulated along the way.
#[derive(Debug, Clone)]
pub struct JostTable {
    pub lambdas: Vec<f64>,
    pub t: f64,
    /// Lowest tabulated point; tabulated points are `x_lo + i·dx`.
    pub x_lo: f64,
    pub dx: f64,
    /// Cutoff `X`, above the last tabulated point.
    pub x_max: f64,
    /// RK4 step (divides `dx`).
    pub step: f64,
    /// Seed values at the tabulated points.
    pub seed_q: Vec<f64>,
    /// `φ = ψ e^{λs}` per point, per λ.
    pub phi: Vec<Vec<f64>>,
    /// `φ'` per point, per λ.
    pub dphi: Vec<Vec<f64>>,
    /// `K̂_ij(x) = e^{(λ_i+λ_j)x} K(λ_i, λ_j; x)` per point, packed lower.
    khat: Vec<Vec<f64>>,
    /// `∫_X^∞ q` used for the boundary.
    pub tail_integral: f64,
}

fn packed(i: usize, j: usize) -> usize {
    let (a, b) = if i >= j { (i, j) } else { (j, i) };
    a * (a + 1) / 2 + b
}

impl JostTable {
    /// Integrates every `λ` from the seed cutoff down to `x_lo`, recording
    /// points `x_lo + i·dx`, `i = 0..count`. `max_step` bounds the RK4 step.
    pub fn build(seed: &SeedPotential, lambdas: &[f64], t: f64, x_lo: f64, dx: f64, count: usize, max_step: f64) -> Result<Self> {
        if let Some(&l) = lambdas.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "Jost solutions need λ > 0 (k on the positive imaginary axis), got {l}"
            )));
        }
        if !(dx > 0.0 && max_step > 0.0) || count == 0 {
            return Err(Error::InvalidArgument("Jost lattice needs dx > 0, step > 0 and points".into()));
        }
        let m = (dx / max_step).ceil().max(1.0) as usize;
        let step = dx / m as f64;
        let x_top_needed = x_lo + (count - 1) as f64 * dx;
        let cut = seed.cutoff(x_top_needed, t)?;
        // extend to a lattice index at or above the cutoff
        let extra = ((cut - x_top_needed) / dx).ceil().max(0.0) as usize;
        let top_point = count - 1 + extra;
        let total_steps = top_point * m;
        let x_max = x_lo + top_point as f64 * dx;

        // seed on the half-step lattice, shared by every λ
        let half: Vec<f64> = (0..=2 * total_steps)
            .into_par_iter()
            .map(|j| seed.q(x_lo + j as f64 * 0.5 * step, t))
            .collect::<Result<_>>()?;
        let tail = seed.tail_integral(x_max, t)?;
        let q_top = half[2 * total_steps];

        let nl = lambdas.len();
        let mut y: Vec<[f64; 2]> = lambdas
            .iter()
            .map(|&l| [1.0 + tail / (2.0 * l), -q_top / (2.0 * l)])
            .collect();
        let npairs = nl * (nl + 1) / 2;
        let mut kh: Vec<f64> = (0..npairs).map(|_| 0.0).collect();
        for i in 0..nl {
            for j in 0..=i {
                kh[packed(i, j)] = y[i][0] * y[j][0] / (lambdas[i] + lambdas[j]);
            }
        }
        let mut phi = vec![Vec::new(); count];
        let mut dphi = vec![Vec::new(); count];
        let mut khat = vec![Vec::new(); count];
        let mut seed_q = vec![0.0; count];
        let record = |p: usize, y: &[[f64; 2]], kh: &[f64], phi: &mut Vec<Vec<f64>>, dphi: &mut Vec<Vec<f64>>, khat: &mut Vec<Vec<f64>>| {
            if p < count {
                phi[p] = y.iter().map(|v| v[0]).collect();
                dphi[p] = y.iter().map(|v| v[1]).collect();
                khat[p] = kh.to_vec();
            }
        };
        record(top_point, &y, &kh, &mut phi, &mut dphi, &mut khat);
        if top_point < count {
            seed_q[top_point] = q_top;
        }

        let h = -step;
        for s in (0..total_steps).rev() {
            // step from lattice index s+1 down to s
            let (q1, qm, q0) = (half[2 * s + 2], half[2 * s + 1], half[2 * s]);
            let prev = y.clone();
            for (yl, &l) in y.iter_mut().zip(lambdas) {
                let f = |q: f64, v: [f64; 2]| [v[1], 2.0 * l * v[1] + q * v[0]];
                let k1 = f(q1, *yl);
                let k2 = f(qm, [yl[0] + 0.5 * h * k1[0], yl[1] + 0.5 * h * k1[1]]);
                let k3 = f(qm, [yl[0] + 0.5 * h * k2[0], yl[1] + 0.5 * h * k2[1]]);
                let k4 = f(q0, [yl[0] + h * k3[0], yl[1] + h * k3[1]]);
                let next = [
                    yl[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
                    yl[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
                ];
                if !(next[0].is_finite() && next[1].is_finite()) {
                    return Err(Error::IntegrationDiverged {
                        at: x_lo + s as f64 * step,
                    });
                }
                *yl = next;
            }
            // K̂(a) = e^{-Λ Δ} K̂(b) + ∫_a^b φ_iφ_j e^{-Λ(r-a)} dr, endpoint-corrected trapezoid
            for i in 0..nl {
                for j in 0..=i {
                    let lam = lambdas[i] + lambdas[j];
                    let decay = (-lam * step).exp();
                    let fa = y[i][0] * y[j][0];
                    let dfa = y[i][1] * y[j][0] + y[i][0] * y[j][1] - lam * fa;
                    let fb = prev[i][0] * prev[j][0] * decay;
                    let dfb = (prev[i][1] * prev[j][0] + prev[i][0] * prev[j][1] - lam * prev[i][0] * prev[j][0]) * decay;
                    let integral = 0.5 * step * (fa + fb) + step * step / 12.0 * (dfa - dfb);
                    let idx = packed(i, j);
                    kh[idx] = decay * kh[idx] + integral;
                }
            }
            if s % m == 0 {
                let p = s / m;
                record(p, &y, &kh, &mut phi, &mut dphi, &mut khat);
                if p < count {
                    seed_q[p] = q0;
                }
            }
        }
        Ok(Self {
            lambdas: lambdas.to_vec(),
            t,
            x_lo,
            dx,
            x_max,
            step,
            seed_q,
            phi,
            dphi,
            khat,
            tail_integral: tail,
        })
    }

    /// Table whose points include `grid` and `margin` extra points each side.
    pub fn for_grid(seed: &SeedPotential, lambdas: &[f64], t: f64, grid: &Grid, margin: usize, max_step: f64) -> Result<Self> {
        let dx = grid.spacing();
        Self::build(seed, lambdas, t, grid.x_min - margin as f64 * dx, dx, grid.n + 2 * margin, max_step)
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn point(&self, p: usize) -> f64 {
        self.x_lo + p as f64 * self.dx
    }

    /// Index of the tabulated point at `x`.
    pub fn index(&self, x: f64) -> Result<usize> {
        let r = (x - self.x_lo) / self.dx;
        let p = r.round();
        if p < 0.0 || p as usize >= self.len() || (r - p).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("x={x} is not a tabulated Jost point")));
        }
        Ok(p as usize)
    }

    /// `K̂_ij` at tabulated point `p`.
    pub fn khat(&self, p: usize, i: usize, j: usize) -> f64 {
        self.khat[p][packed(i, j)]
    }

    /// `ψ(x; iλ_l)` at tabulated point `p`.
    pub fn psi(&self, p: usize, l: usize) -> f64 {
        self.phi[p][l] * (-self.lambdas[l] * self.point(p)).exp()
    }

    /// `∂ₛψ(x; iλ_l)` at tabulated point `p`.
    pub fn dpsi(&self, p: usize, l: usize) -> f64 {
        (self.dphi[p][l] - self.lambdas[l] * self.phi[p][l]) * (-self.lambdas[l] * self.point(p)).exp()
    }
}

/// `ψ(s; iλ)` of `seed` at time `t` on `grid`.
pub fn jost_solve(seed: &SeedPotential, lambda: f64, t: f64, grid: &Grid, max_step: f64) -> Result<Vec<f64>> {
    let table = JostTable::for_grid(seed, &[lambda], t, grid, 0, max_step)?;
    Ok((0..grid.n).map(|p| table.psi(p, 0)).collect())
}

/// `K(λ_i, λ_j; x) = ∫ₓ^∞ ψ_i ψ_j`, stored with offsets `-λ_i x`.
pub fn overlap_kernel(table: &JostTable, x: f64) -> Result<SymmetricMatrix> {
    let p = table.index(x)?;
    let n = table.lambdas.len();
    SymmetricMatrix::from_fn(n, |i, j| table.khat(p, i, j)).with_offsets(table.lambdas.iter().map(|l| -l * x).collect())
}
