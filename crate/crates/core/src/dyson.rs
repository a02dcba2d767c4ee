//! Dyson's determinant formula `q = -2 ∂ₓ² log det(I + K_{x,t})`,
//! discretized by Nyström quadrature of the spectral measure.
//!
//! The kernel `K(s, k) = e^{-(s+k)x} / (s+k)` acting on `L²(dσ_t)` becomes,
//! after symmetrization with `u_i = √|w_i| e^{-k_i x + 4k_i³t}`, the matrix
//! `C_ij = u_i u_j / (k_i + k_j)`. Signs of the weights go into a diagonal
//! signature `S`, and `det(I + K) = det(S + C) · det(S)`. Because
//! `∂ₓC = -u uᵀ` is rank one, the second derivative has the closed form
//! `q = 4⟨∂ₓu, P⟩ + 2⟨u, P⟩²` with `P = (S + C)⁻¹ u`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{FieldMeta, Grid, Producer, Scheme, SolutionField};
use crate::measures::{carleson_check, discretize, evolve, Atom, DiscretizedMeasure, EvolvedWeights, SpectralMeasure};
use crate::numkit::{Cholesky, Lu, SymmetricMatrix};

/// Largest admissible `2 g_i`, `g_i = -k_i x + 4 k_i³ t`.
pub const EXPONENT_GUARD: f64 = 600.0;

/// Signed log-determinant `τ = sign · exp(log_abs)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tau {
    pub log_abs: f64,
    pub sign: f64,
}

/// `S + C` at one `(x, t)`, stored with per-index log offsets
/// `o_i = max(g_i, 0)` so every stored entry is O(|w|).
#[derive(Debug, Clone)]
pub struct KernelSystem {
    pub x: f64,
    pub t: f64,
    /// `sign(w_i)`.
    pub signature: Vec<f64>,
    /// `e^{-o_i} u_i`.
    pub u: Vec<f64>,
    /// `e^{-o_i} ∂ₓu_i`.
    pub du: Vec<f64>,
    /// Stored `e^{-o} (S + C) e^{-o}` carrying the offsets `o`.
    pub matrix: SymmetricMatrix,
}

/// Anything that yields `τ` and the trace-formula increment at one `(x, t)`.
pub trait TauSystem {
    fn tau(&self) -> Result<Tau>;
    fn trace_increment(&self) -> Result<f64>;
    /// `2 ∂ₓ log τ`, which equals `∫ₓ^∞` of the increment.
    fn tail_integral(&self) -> Result<f64>;
}

enum Factor {
    Chol(Cholesky),
    Lu(Lu),
}

impl KernelSystem {
    /// Assembles `S + C` from scaled vectors. `overlap(i, j)` must return the
    /// stored (offset-free) value of `C_ij`.
    pub fn assemble<F>(x: f64, t: f64, signature: Vec<f64>, offsets: Vec<f64>, u: Vec<f64>, du: Vec<f64>, mut overlap: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> f64,
    {
        let n = u.len();
        let matrix = SymmetricMatrix::from_fn(n, |i, j| {
            let c = overlap(i, j);
            if i == j {
                signature[i] * (-2.0 * offsets[i]).exp() + c
            } else {
                c
            }
        })
        .with_offsets(offsets)?;
        Ok(Self {
            x,
            t,
            signature,
            u,
            du,
            matrix,
        })
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    fn nonnegative(&self) -> bool {
        self.signature.iter().all(|&s| s > 0.0)
    }

    fn factor(&self) -> Result<Factor> {
        if self.nonnegative() {
            Ok(Factor::Chol(Cholesky::new(&self.matrix)?))
        } else {
            Ok(Factor::Lu(Lu::from_symmetric(&self.matrix)?))
        }
    }

    fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        Ok(match self.factor()? {
            Factor::Chol(c) => c.solve_stored(rhs),
            Factor::Lu(lu) => lu.solve(rhs),
        })
    }
}

impl TauSystem for KernelSystem {
    /// `det(I + K)` with its sign. Non-negative measures go through Cholesky,
    /// signed ones through LU.
    fn tau(&self) -> Result<Tau> {
        let flips = self.signature.iter().filter(|&&s| s < 0.0).count();
        let sig_sign = if flips % 2 == 0 { 1.0 } else { -1.0 };
        match self.factor()? {
            Factor::Chol(c) => Ok(Tau {
                log_abs: c.logdet(),
                sign: 1.0,
            }),
            Factor::Lu(lu) => {
                let (log, sign) = lu.log_abs_det();
                let offsets: f64 = 2.0 * self.matrix.offsets().iter().sum::<f64>();
                Ok(Tau {
                    log_abs: log + offsets,
                    sign: sign * sig_sign,
                })
            }
        }
    }

    /// `-2 ∂ₓ² log τ` by the rank-one trace formula.
    fn trace_increment(&self) -> Result<f64> {
        let p = self.solve(&self.u)?;
        Ok(trace_formula(&self.u, &self.du, &p))
    }

    fn tail_integral(&self) -> Result<f64> {
        let p = self.solve(&self.u)?;
        Ok(-2.0 * dot(&self.u, &p))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `4⟨∂ₓu, P⟩ + 2⟨u, P⟩²`.
fn trace_formula(u: &[f64], du: &[f64], p: &[f64]) -> f64 {
    let up = dot(u, p);
    4.0 * dot(du, p) + 2.0 * up * up
}

/// `I + C` for a non-negative measure, `C_ij = u_i u_j / (k_i + k_j)`.
///
/// `C` is Cauchy-like, so its pivoted `LDLᵀ` follows from generator updates
/// `u_i ← u_i (k_i - k_p) / (k_i + k_p)` without cancellation, and `D` is
/// obtained to high relative accuracy even when it spans hundreds of orders
/// of magnitude. With `Y = L⁻¹L⁻ᵀ` (well conditioned since `|L_ij| ≤ 1`),
/// `det(I + C) = det(D + Y)` and `(I + C)⁻¹ = L⁻ᵀ (D + Y)⁻¹ L⁻¹`.
///
/// Derivatives use the resolvent `G = (I + C)⁻¹` and `KC + CK = uuᵀ`:
/// `⟨u, P⟩ = 2 tr K - 2 tr(KG)` and `q = 8 tr(KGKG) - 8 tr(K²G)`.
#[derive(Debug, Clone)]
pub struct CauchyKernel {
    pub x: f64,
    pub t: f64,
    /// `D + Y` in pivot order.
    pub core: SymmetricMatrix,
    /// Nodes in pivot order.
    pub k: Vec<f64>,
    linv: Vec<Vec<f64>>,
}

impl CauchyKernel {
    pub fn new(x: f64, t: f64, k: &[f64], u: &[f64]) -> Self {
        let n = k.len();
        let mut gen = u.to_vec();
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut order = Vec::with_capacity(n);
        let mut d = Vec::with_capacity(n);
        // raw[i][s]: column s of L at original row i
        let mut raw = vec![vec![0.0; n]; n];
        for s in 0..n {
            let (pos, &p) = remaining
                .iter()
                .enumerate()
                .max_by(|(_, &a), (_, &b)| {
                    let da = gen[a] * gen[a] / (2.0 * k[a]);
                    let db = gen[b] * gen[b] / (2.0 * k[b]);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("remaining is non-empty");
            remaining.remove(pos);
            order.push(p);
            let gp = gen[p];
            d.push(gp * gp / (2.0 * k[p]));
            raw[p][s] = 1.0;
            for &i in &remaining {
                if gp != 0.0 {
                    raw[i][s] = gen[i] / gp * (2.0 * k[p]) / (k[i] + k[p]);
                }
                gen[i] *= (k[i] - k[p]) / (k[i] + k[p]);
            }
        }
        let l: Vec<Vec<f64>> = order.iter().map(|&i| raw[i].clone()).collect();
        let mut linv = vec![vec![0.0; n]; n];
        for j in 0..n {
            linv[j][j] = 1.0;
            for i in j + 1..n {
                let mut acc = 0.0;
                for m in j..i {
                    acc -= l[i][m] * linv[m][j];
                }
                linv[i][j] = acc;
            }
        }
        let core = SymmetricMatrix::from_fn(n, |i, j| {
            let y: f64 = (0..=i.min(j)).map(|m| linv[i][m] * linv[j][m]).sum();
            if i == j {
                y + d[i]
            } else {
                y
            }
        });
        Self {
            x,
            t,
            core,
            k: order.iter().map(|&i| k[i]).collect(),
            linv,
        }
    }

    pub fn dim(&self) -> usize {
        self.k.len()
    }

    /// `G = L⁻ᵀ (D + Y)⁻¹ L⁻¹`, row-major, in pivot order.
    fn resolvent(&self) -> Result<Vec<Vec<f64>>> {
        let n = self.dim();
        let chol = Cholesky::new(&self.core)?;
        // H = (D + Y)⁻¹ L⁻¹, column by column
        let mut h = vec![vec![0.0; n]; n];
        for j in 0..n {
            let col: Vec<f64> = (0..n).map(|i| self.linv[i][j]).collect();
            for (i, v) in chol.solve(&col).into_iter().enumerate() {
                h[i][j] = v;
            }
        }
        let mut g = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = (i.max(j)..n).map(|m| self.linv[m][i] * h[m][j]).sum();
                g[i][j] = v;
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                g[i][j] = g[j][i];
            }
        }
        Ok(g)
    }
}

impl TauSystem for CauchyKernel {
    fn tau(&self) -> Result<Tau> {
        Ok(Tau {
            log_abs: Cholesky::new(&self.core)?.logdet(),
            sign: 1.0,
        })
    }

    fn trace_increment(&self) -> Result<f64> {
        let g = self.resolvent()?;
        let k = &self.k;
        let n = self.dim();
        let mut quad = 0.0;
        let mut lin = 0.0;
        for i in 0..n {
            lin += k[i] * k[i] * g[i][i];
            for j in 0..n {
                quad += k[i] * g[i][j] * k[j] * g[j][i];
            }
        }
        Ok(8.0 * quad - 8.0 * lin)
    }

    fn tail_integral(&self) -> Result<f64> {
        let g = self.resolvent()?;
        let up: f64 = self.k.iter().enumerate().map(|(i, &ki)| 2.0 * ki * (1.0 - g[i][i])).sum();
        Ok(-2.0 * up)
    }
}

/// Exponents `g_i = -k_i x + 4 k_i³ t`, checked against the guard.
fn exponents(ew: &EvolvedWeights, x: f64) -> Result<Vec<f64>> {
    let g: Vec<f64> = ew
        .base
        .nodes
        .iter()
        .zip(&ew.log_factors)
        .map(|(&ki, &lf)| -ki * x + 0.5 * lf)
        .collect();
    if let Some(&gmax) = g.iter().max_by(|a, b| a.total_cmp(b)) {
        if 2.0 * gmax > EXPONENT_GUARD || !gmax.is_finite() {
            return Err(Error::ExponentOverflow {
                exponent: 2.0 * gmax,
                limit: EXPONENT_GUARD,
                x,
                t: ew.t,
            });
        }
    }
    Ok(g)
}

/// Structured kernel for a non-negative discretized measure.
pub fn build_cauchy_kernel(ew: &EvolvedWeights, x: f64) -> Result<CauchyKernel> {
    if !ew.base.is_nonnegative() {
        return Err(Error::InvalidArgument(
            "structured kernel needs non-negative weights".into(),
        ));
    }
    let g = exponents(ew, x)?;
    let u: Vec<f64> = ew.base.weights.iter().zip(&g).map(|(w, gi)| w.sqrt() * gi.exp()).collect();
    Ok(CauchyKernel::new(x, ew.t, &ew.base.nodes, &u))
}

/// The kernel system used for a given measure sign.
pub enum DysonSystem {
    General(KernelSystem),
    Structured(CauchyKernel),
}

impl TauSystem for DysonSystem {
    fn tau(&self) -> Result<Tau> {
        match self {
            DysonSystem::General(k) => k.tau(),
            DysonSystem::Structured(k) => k.tau(),
        }
    }

    fn trace_increment(&self) -> Result<f64> {
        match self {
            DysonSystem::General(k) => k.trace_increment(),
            DysonSystem::Structured(k) => k.trace_increment(),
        }
    }

    fn tail_integral(&self) -> Result<f64> {
        match self {
            DysonSystem::General(k) => k.tail_integral(),
            DysonSystem::Structured(k) => k.tail_integral(),
        }
    }
}

/// Kernels with `max 2g_i` above this go through [`CauchyKernel`] when the
/// measure is non-negative.
pub const STRUCTURED_THRESHOLD: f64 = 10.0;

/// Offset-scaled general kernel while entries are moderate; the structured
/// factorization once a non-negative kernel grows large, where plain
/// elimination loses the small Schur complements.
pub fn build_system(ew: &EvolvedWeights, x: f64) -> Result<DysonSystem> {
    let g = exponents(ew, x)?;
    let gmax = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if ew.base.is_nonnegative() && 2.0 * gmax > STRUCTURED_THRESHOLD {
        build_cauchy_kernel(ew, x).map(DysonSystem::Structured)
    } else {
        build_kernel(ew, x).map(DysonSystem::General)
    }
}

/// Symmetrized Nyström matrix of `I + K_{x,t}`; atoms contribute the
/// Kay–Moses entries `c_n c_m e^{-(κ_n+κ_m)x + 4(κ_n³+κ_m³)t} / (κ_n+κ_m)`.
pub fn build_kernel(ew: &EvolvedWeights, x: f64) -> Result<KernelSystem> {
    let k = &ew.base.nodes;
    let w = &ew.base.weights;
    let g = exponents(ew, x)?;
    let offsets: Vec<f64> = g.iter().map(|&gi| gi.max(0.0)).collect();
    let u: Vec<f64> = w
        .iter()
        .zip(g.iter().zip(&offsets))
        .map(|(&wi, (&gi, &oi))| wi.abs().sqrt() * (gi - oi).exp())
        .collect();
    let du: Vec<f64> = u.iter().zip(k).map(|(ui, ki)| -ki * ui).collect();
    let signature = w.iter().map(|&wi| if wi < 0.0 { -1.0 } else { 1.0 }).collect();
    let uu = u.clone();
    KernelSystem::assemble(x, ew.t, signature, offsets, u, du, |i, j| uu[i] * uu[j] / (k[i] + k[j]))
}

/// `log det(I + K_{x,t})` with sign; `≥ 0` for non-negative measures.
pub fn log_tau(ew: &EvolvedWeights, x: f64) -> Result<Tau> {
    build_system(ew, x)?.tau()
}

/// Outcome of evaluating one grid point.
enum PointValue {
    Regular { dq: f64, sign: f64 },
    Singular,
    Overflow,
}

/// Increment `-2 ∂ₓ² log τ` on a set of points.
pub(crate) struct IncrementSamples {
    pub x: Vec<f64>,
    pub dq: Vec<f64>,
    pub singular: Vec<bool>,
    pub warnings: Vec<String>,
}

/// Fd stencil `(-L₂ + 16L₁ - 30L₀ + 16L₋₁ - L₋₂) / (12h²)` applied to `log|τ|`.
fn fd_point<B, S>(build: &B, x: f64, h: f64) -> Result<PointValue>
where
    B: Fn(f64) -> Result<S>,
    S: TauSystem,
{
    let mut logs = [0.0; 5];
    let mut signs = [0.0; 5];
    for (j, off) in [-2.0, -1.0, 0.0, 1.0, 2.0].iter().enumerate() {
        match build(x + off * h).and_then(|ks| ks.tau()) {
            Ok(tau) => {
                logs[j] = tau.log_abs;
                signs[j] = tau.sign;
            }
            Err(Error::ExponentOverflow { .. }) => return Ok(PointValue::Overflow),
            Err(Error::SingularDeterminant { .. }) => return Ok(PointValue::Singular),
            Err(e) => return Err(e),
        }
    }
    if signs.iter().any(|&s| s != signs[2]) {
        return Ok(PointValue::Singular);
    }
    let d2 = (-logs[4] + 16.0 * logs[3] - 30.0 * logs[2] + 16.0 * logs[1] - logs[0]) / (12.0 * h * h);
    Ok(PointValue::Regular {
        dq: -2.0 * d2,
        sign: signs[2],
    })
}

fn trace_point<B, S>(build: &B, x: f64) -> Result<PointValue>
where
    B: Fn(f64) -> Result<S>,
    S: TauSystem,
{
    let ks = match build(x) {
        Ok(ks) => ks,
        Err(Error::ExponentOverflow { .. }) => return Ok(PointValue::Overflow),
        Err(e) => return Err(e),
    };
    let tau = match ks.tau() {
        Ok(t) => t,
        Err(Error::SingularDeterminant { .. }) => return Ok(PointValue::Singular),
        Err(e) => return Err(e),
    };
    match ks.trace_increment() {
        Ok(dq) if dq.is_finite() => Ok(PointValue::Regular { dq, sign: tau.sign }),
        Ok(_) | Err(Error::SingularDeterminant { .. }) => Ok(PointValue::Singular),
        Err(e) => Err(e),
    }
}

/// Evaluates the increment on `xs` in parallel. Points whose kernel trips the
/// exponent guard are dropped with a warning; a sign change of `τ` between
/// neighbours marks both as singular.
pub(crate) fn sample_increment<B, S>(build: B, xs: &[f64], scheme: Scheme, fd_step: f64, richardson: bool) -> Result<IncrementSamples>
where
    B: Fn(f64) -> Result<S> + Sync,
    S: TauSystem,
{
    let values: Vec<PointValue> = xs
        .par_iter()
        .map(|&x| match scheme {
            Scheme::Trace => trace_point(&build, x),
            Scheme::Fd if richardson => {
                let coarse = fd_point(&build, x, fd_step)?;
                let fine = fd_point(&build, x, 0.5 * fd_step)?;
                Ok(match (coarse, fine) {
                    (PointValue::Regular { dq: c, .. }, PointValue::Regular { dq: f, sign }) => PointValue::Regular {
                        dq: (16.0 * f - c) / 15.0,
                        sign,
                    },
                    (PointValue::Overflow, _) | (_, PointValue::Overflow) => PointValue::Overflow,
                    _ => PointValue::Singular,
                })
            }
            Scheme::Fd => fd_point(&build, x, fd_step),
        })
        .collect::<Result<_>>()?;

    let mut out = IncrementSamples {
        x: Vec::with_capacity(xs.len()),
        dq: Vec::with_capacity(xs.len()),
        singular: Vec::with_capacity(xs.len()),
        warnings: Vec::new(),
    };
    let mut signs = Vec::with_capacity(xs.len());
    let mut dropped: Vec<f64> = Vec::new();
    for (&x, v) in xs.iter().zip(values) {
        match v {
            PointValue::Overflow => dropped.push(x),
            PointValue::Singular => {
                out.x.push(x);
                out.dq.push(f64::NAN);
                out.singular.push(true);
                signs.push(0.0);
            }
            PointValue::Regular { dq, sign } => {
                out.x.push(x);
                out.dq.push(dq);
                out.singular.push(false);
                signs.push(sign);
            }
        }
    }
    if out.x.is_empty() && !xs.is_empty() {
        return Err(Error::ExponentOverflow {
            exponent: f64::INFINITY,
            limit: EXPONENT_GUARD,
            x: xs[0],
            t: f64::NAN,
        });
    }
    if !dropped.is_empty() {
        let lo = dropped.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = dropped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.warnings.push(format!(
            "exponent guard: dropped {} grid points in [{lo}, {hi}]",
            dropped.len()
        ));
    }
    for i in 1..signs.len() {
        if signs[i - 1] != 0.0 && signs[i] != 0.0 && signs[i - 1] != signs[i] {
            for j in [i - 1, i] {
                out.singular[j] = true;
                out.dq[j] = f64::NAN;
            }
        }
    }
    if out.singular.iter().any(|&s| s) {
        let n = out.singular.iter().filter(|&&s| s).count();
        out.warnings.push(format!("tau vanishes near {n} grid points (pole of q)"));
    }
    Ok(out)
}

/// Dyson evaluator for one discretized measure, reusable across times.
#[derive(Debug, Clone)]
pub struct DysonSolver {
    pub disc: DiscretizedMeasure,
    pub name: String,
    pub n: usize,
    fd_step: Option<f64>,
    richardson: bool,
}

impl DysonSolver {
    /// Checks the Carleson condition and discretizes with `n` nodes per piece.
    pub fn new(m: &SpectralMeasure, n: usize) -> Result<Self> {
        carleson_check(m)?;
        Ok(Self::from_discretized(discretize(m, n)?, m.name.clone()))
    }

    pub fn from_discretized(disc: DiscretizedMeasure, name: impl Into<String>) -> Self {
        let n = disc.provenance.n_per_piece;
        Self {
            disc,
            name: name.into(),
            n,
            fd_step: None,
            richardson: false,
        }
    }

    /// Overrides the fd step (default: the output grid spacing).
    pub fn with_fd_step(mut self, h: f64) -> Self {
        self.fd_step = Some(h);
        self
    }

    pub fn with_richardson(mut self, on: bool) -> Self {
        self.richardson = on;
        self
    }

    pub fn evolved(&self, t: f64) -> Result<EvolvedWeights> {
        evolve(&self.disc, t)
    }

    pub fn kernel(&self, x: f64, t: f64) -> Result<KernelSystem> {
        build_kernel(&self.evolved(t)?, x)
    }

    pub fn system(&self, x: f64, t: f64) -> Result<DysonSystem> {
        build_system(&self.evolved(t)?, x)
    }

    /// `q` at one point by the trace formula.
    pub fn q_point(&self, x: f64, t: f64) -> Result<f64> {
        self.system(x, t)?.trace_increment()
    }

    /// `∫_x^∞ q ds = 2 ∂ₓ log τ(x) = -2⟨u, P⟩`.
    pub fn tail_integral(&self, x: f64, t: f64) -> Result<f64> {
        self.system(x, t)?.tail_integral()
    }

    pub fn field(&self, grid: &Grid, t: f64, scheme: Scheme) -> Result<SolutionField> {
        self.field_at(&grid.points(), grid.spacing(), t, scheme, "dyson")
    }

    pub(crate) fn field_at(&self, xs: &[f64], spacing: f64, t: f64, scheme: Scheme, method: &str) -> Result<SolutionField> {
        let ew = self.evolved(t)?;
        let h = self.fd_step.unwrap_or(spacing);
        let s = sample_increment(|x| build_system(&ew, x), xs, scheme, h, self.richardson)?;
        let mut meta = FieldMeta::new(self.name.clone(), method);
        meta.n = self.n;
        meta.scheme = Some(scheme);
        meta.nonnegative = self.disc.is_nonnegative();
        meta.warnings = s.warnings;
        Ok(SolutionField {
            x: s.x,
            t,
            q: s.dq,
            singular: s.singular,
            meta,
        })
    }
}

impl Producer for DysonSolver {
    fn q(&self, x: f64, t: f64) -> Result<f64> {
        self.q_point(x, t)
    }
}

/// Dyson's formula for `σ` on `grid` at time `t`.
pub fn q_dyson(m: &SpectralMeasure, grid: &Grid, t: f64, n: usize, scheme: Scheme) -> Result<SolutionField> {
    DysonSolver::new(m, n)?.field(grid, t, scheme)
}

/// Pure N-soliton solution from atoms, through the exact `N × N` matrix.
pub fn kay_moses(atoms: &[Atom], grid: &Grid, t: f64, scheme: Scheme) -> Result<SolutionField> {
    let m = SpectralMeasure {
        name: format!("{}-soliton", atoms.len()),
        atoms: atoms.to_vec(),
        densities: Vec::new(),
    };
    carleson_check(&m)?;
    let solver = DysonSolver::from_discretized(discretize(&m, 1)?, m.name.clone());
    let points = grid.points();
    solver.field_at(&points, grid.spacing(), t, scheme, "kay-moses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::one_soliton;
    use crate::measures::{DensityForm, DensityPiece};

    fn atom(kappa: f64, weight: f64) -> SpectralMeasure {
        SpectralMeasure::from_atoms("atom", &[(kappa, weight)])
    }

    fn condensate(h: f64) -> SpectralMeasure {
        SpectralMeasure::empty("condensate").with_density(DensityPiece::new(DensityForm::Condensate { h }, [0.0, h], 1))
    }

    /// Brute-force `det(I + K)` for atoms, straight from the Kay–Moses entries
    /// by cofactor expansion (N ≤ 3).
    fn kay_moses_det(atoms: &[(f64, f64)], x: f64, t: f64) -> f64 {
        let n = atoms.len();
        let e = |i: usize, j: usize| {
            let (ki, wi) = atoms[i];
            let (kj, wj) = atoms[j];
            let v = (wi * wj).sqrt() / (ki + kj) * (-(ki + kj) * x + 4.0 * (ki.powi(3) + kj.powi(3)) * t).exp();
            v + if i == j { 1.0 } else { 0.0 }
        };
        match n {
            0 => 1.0,
            1 => e(0, 0),
            2 => e(0, 0) * e(1, 1) - e(0, 1) * e(1, 0),
            3 => {
                e(0, 0) * (e(1, 1) * e(2, 2) - e(1, 2) * e(2, 1)) - e(0, 1) * (e(1, 0) * e(2, 2) - e(1, 2) * e(2, 0))
                    + e(0, 2) * (e(1, 0) * e(2, 1) - e(1, 1) * e(2, 0))
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn empty_measure_kernel() {
        let ew = evolve(&discretize(&SpectralMeasure::empty("e"), 4).unwrap(), 0.0).unwrap();
        let ks = build_kernel(&ew, 0.3).unwrap();
        assert_eq!(ks.dim(), 0);
        assert_eq!(ks.tau().unwrap(), Tau { log_abs: 0.0, sign: 1.0 });
        let g = Grid::new(-1.0, 1.0, 11).unwrap();
        let f = q_dyson(&SpectralMeasure::empty("e"), &g, 0.0, 4, Scheme::Fd).unwrap();
        assert!(f.q.iter().all(|&q| q == 0.0));
    }

    #[test]
    fn single_atom_kernel_entry() {
        let ew = evolve(&discretize(&atom(1.0, 2.0), 1).unwrap(), 0.0).unwrap();
        let ks = build_kernel(&ew, 0.0).unwrap();
        assert!((ks.matrix.value(0, 0) - 2.0).abs() < 1e-15); // 1 + 2/(2·1)
        assert!((log_tau(&ew, 0.0).unwrap().log_abs - std::f64::consts::LN_2).abs() < 1e-15);
        // far right: det -> 1
        assert!(log_tau(&ew, 60.0).unwrap().log_abs < 1e-40);
    }

    #[test]
    fn negative_atom_pole() {
        let ew = evolve(&discretize(&atom(0.5, -1.0), 1).unwrap(), 1.0).unwrap();
        assert!(matches!(log_tau(&ew, 1.0), Err(Error::SingularDeterminant { .. })));
        let left = log_tau(&ew, 0.5).unwrap();
        let right = log_tau(&ew, 1.5).unwrap();
        assert_eq!(left.sign, -1.0);
        assert_eq!(right.sign, 1.0);
        // τ = 1 - e^{t-x}
        assert!((right.log_abs - (1.0 - (-0.5f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn exponent_guard() {
        let ew = evolve(&discretize(&atom(1.0, 1.0), 1).unwrap(), 0.0).unwrap();
        assert!(build_kernel(&ew, -299.0).is_ok());
        assert!(matches!(build_kernel(&ew, -301.0), Err(Error::ExponentOverflow { .. })));
        let g = Grid::new(-310.0, 0.0, 32).unwrap();
        let f = q_dyson(&atom(1.0, 1.0), &g, 0.0, 1, Scheme::Trace).unwrap();
        assert!(f.len() < 32 && f.len() > 20);
        assert!(f.meta.warnings.iter().any(|w| w.contains("exponent guard")));
    }

    #[test]
    fn one_soliton_values() {
        let g = Grid::new(-1.0, 1.0, 3).unwrap();
        for scheme in [Scheme::Trace, Scheme::Fd] {
            let f = DysonSolver::new(&atom(1.0, 2.0), 1).unwrap().with_fd_step(1e-3).field(&g, 0.0, scheme).unwrap();
            assert!((f.q[1] + 2.0).abs() < 1e-9, "{scheme}: {}", f.q[1]);
        }
        let solver = DysonSolver::new(&atom(1.0, 2.0), 1).unwrap();
        let q10 = solver.q_point(10.0, 0.0).unwrap();
        let exact = -2.0 / 10f64.cosh().powi(2);
        assert!((q10 - exact).abs() < 1e-12);
        assert!((q10 + 8.0 * (-20f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn trace_formula_matches_closed_form_soliton() {
        let solver = DysonSolver::new(&SpectralMeasure::from_atoms("a", &[(1.3, 0.7)]), 1).unwrap();
        for &t in &[-0.3, 0.0, 0.4] {
            for i in 0..=40 {
                let x = -6.0 + 0.3 * i as f64;
                let q = solver.q_point(x, t).unwrap();
                assert!((q - one_soliton(1.3, 0.7, x, t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tau_matches_brute_force_determinants() {
        let atoms = [(0.5, 0.3), (1.0, 2.0), (1.7, 0.05)];
        for n in 1..=3 {
            let m = SpectralMeasure::from_atoms("a", &atoms[..n]);
            let ew = evolve(&discretize(&m, 1).unwrap(), 0.2).unwrap();
            for &x in &[-3.0, -0.5, 0.0, 2.5] {
                let tau = log_tau(&ew, x).unwrap();
                let brute = kay_moses_det(&atoms[..n], x, 0.2).ln();
                assert!((tau.log_abs - brute).abs() < 1e-11 * brute.abs().max(1.0));
                assert!(tau.log_abs >= 0.0);
            }
        }
    }

    #[test]
    fn two_soliton_separated_depths() {
        // brute-force second difference of the 2x2 determinant as oracle
        let atoms = [(1.0, 1.0), (2.0, 3.0)];
        let oracle = |x: f64, t: f64| {
            let h = 1e-2;
            let l = |x| kay_moses_det(&atoms, x, t).ln();
            -2.0 * (-l(x + 2.0 * h) + 16.0 * l(x + h) - 30.0 * l(x) + 16.0 * l(x - h) - l(x - 2.0 * h)) / (12.0 * h * h)
        };
        let a: Vec<Atom> = atoms.iter().map(|&(kappa, weight)| Atom { kappa, weight }).collect();
        for &t in &[-5.0, 5.0] {
            let g = Grid::new(-100.0, 100.0, 8001).unwrap();
            let f = kay_moses(&a, &g, t, Scheme::Trace).unwrap();
            let mut minima: Vec<f64> = (1..f.len() - 1)
                .filter(|&i| f.q[i] < f.q[i - 1] && f.q[i] < f.q[i + 1] && f.q[i] < -0.5)
                .map(|i| f.q[i])
                .collect();
            minima.sort_by(|a, b| a.total_cmp(b));
            assert_eq!(minima.len(), 2, "t={t}: {minima:?}");
            assert!((minima[0] + 8.0).abs() < 0.08);
            assert!((minima[1] + 2.0).abs() < 0.02);
            for i in (0..f.len()).step_by(40).filter(|&i| f.x[i].abs() < 40.0) {
                assert!((f.q[i] - oracle(f.x[i], t)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn kay_moses_equals_dyson_on_atoms() {
        let atoms = [(0.6, 1.0), (1.1, 0.2), (1.4, 3.0)];
        let a: Vec<Atom> = atoms.iter().map(|&(kappa, weight)| Atom { kappa, weight }).collect();
        let g = Grid::new(-8.0, 8.0, 161).unwrap();
        for scheme in [Scheme::Fd, Scheme::Trace] {
            let km = kay_moses(&a, &g, 0.1, scheme).unwrap();
            let dy = q_dyson(&SpectralMeasure::from_atoms("a", &atoms), &g, 0.1, 30, scheme).unwrap();
            assert!(km.sup_distance(&dy).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn schemes_agree_on_condensate() {
        let g = Grid::new(-5.0, 5.0, 101).unwrap();
        let solver = DysonSolver::new(&condensate(1.0), 40).unwrap().with_fd_step(1e-2);
        let fd = solver.field(&g, 0.0, Scheme::Fd).unwrap();
        let tr = solver.field(&g, 0.0, Scheme::Trace).unwrap();
        let d = fd.sup_distance(&tr).unwrap();
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn richardson_improves_fd() {
        let g = Grid::new(-3.0, 3.0, 61).unwrap();
        let m = atom(1.0, 2.0);
        let exact: Vec<f64> = g.points().iter().map(|&x| one_soliton(1.0, 2.0, x, 0.0)).collect();
        let err = |f: SolutionField| f.q.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let plain = err(DysonSolver::new(&m, 1).unwrap().field(&g, 0.0, Scheme::Fd).unwrap());
        let rich = err(DysonSolver::new(&m, 1).unwrap().with_richardson(true).field(&g, 0.0, Scheme::Fd).unwrap());
        assert!(rich < plain / 10.0, "{plain} {rich}");
    }

    #[test]
    fn tail_integral_of_soliton() {
        // ∫_x^∞ -2 sech²(s) ds = -2 (1 - tanh x)
        let solver = DysonSolver::new(&atom(1.0, 2.0), 1).unwrap();
        for &x in &[-2.0, 0.0, 3.0] {
            let v = solver.tail_integral(x, 0.0).unwrap();
            assert!((v + 2.0 * (1.0 - f64::tanh(x))).abs() < 1e-13);
        }
    }

    #[test]
    fn structured_kernel_matches_general_where_both_are_accurate() {
        let m = SpectralMeasure::from_atoms("a", &[(0.4, 0.3), (0.9, 1.0)]).with_density(DensityPiece::new(
            DensityForm::Uniform { c: 0.5 },
            [1.0, 1.5],
            1,
        ));
        let ew = evolve(&discretize(&m, 12).unwrap(), 0.05).unwrap();
        for &x in &[-6.0, -2.0, 0.0, 1.5] {
            let s = build_cauchy_kernel(&ew, x).unwrap();
            let g = build_kernel(&ew, x).unwrap();
            let (ts, tg) = (s.tau().unwrap().log_abs, g.tau().unwrap().log_abs);
            assert!((ts - tg).abs() < 1e-12 * tg.max(1.0), "{ts} {tg}");
            let (qs, qg) = (s.trace_increment().unwrap(), g.trace_increment().unwrap());
            assert!((qs - qg).abs() < 1e-11, "{qs} {qg}");
            let (is, ig) = (s.tail_integral().unwrap(), g.tail_integral().unwrap());
            assert!((is - ig).abs() < 1e-11 * ig.abs().max(1.0), "{is} {ig}");
        }
    }

    #[test]
    fn structured_kernel_far_left_of_condensate() {
        // the plain factorization breaks down here; fd of the structured
        // log τ is an independent check of its trace formula
        let ew = evolve(&discretize(&condensate(1.0), 40).unwrap(), 0.0).unwrap();
        assert!(build_kernel(&ew, -30.0).and_then(|k| k.tau()).is_err());
        let lt = |x: f64| build_cauchy_kernel(&ew, x).unwrap().tau().unwrap().log_abs;
        let h = 0.05;
        for &x in &[-40.0, -30.0, -20.0] {
            let fd = -2.0 * (-lt(x + 2.0 * h) + 16.0 * lt(x + h) - 30.0 * lt(x) + 16.0 * lt(x - h) - lt(x - 2.0 * h)) / (12.0 * h * h);
            let tr = build_cauchy_kernel(&ew, x).unwrap().trace_increment().unwrap();
            assert!((fd - tr).abs() < 1e-6, "x={x}: {fd} {tr}");
            assert!(tr < -0.9 && tr > -1.1);
            // ∫_x^∞ q ≈ -(|x| + const) on the plateau
            let tail = build_cauchy_kernel(&ew, x).unwrap().tail_integral().unwrap();
            assert!((tail - x).abs() < 1.5, "{tail}");
        }
    }

    #[test]
    fn evaluation_is_order_independent() {
        let g = Grid::new(-5.0, 5.0, 257).unwrap();
        let solver = DysonSolver::new(&condensate(1.0), 30).unwrap();
        let a = solver.field(&g, 0.1, Scheme::Trace).unwrap();
        let b = solver.field(&g, 0.1, Scheme::Trace).unwrap();
        assert_eq!(a, b);
        let rev: Vec<f64> = g.points().into_iter().rev().collect();
        let c = solver.field_at(&rev, g.spacing(), 0.1, Scheme::Trace, "dyson").unwrap();
        let mut cq = c.q.clone();
        cq.reverse();
        assert_eq!(a.q, cq);
    }

    #[test]
    fn nystrom_self_convergence_on_condensate() {
        let g = Grid::new(-5.0, 5.0, 101).unwrap();
        let a = q_dyson(&condensate(1.0), &g, 0.0, 40, Scheme::Trace).unwrap();
        let b = q_dyson(&condensate(1.0), &g, 0.0, 80, Scheme::Trace).unwrap();
        assert!(a.sup_distance(&b).unwrap() <= 1e-8);
    }

    fn positive_measure() -> impl Strategy<Value = SpectralMeasure> {
        (
            proptest::collection::vec((0.2f64..1.5, 0.1f64..5.0), 0..4),
            proptest::option::of((0.2f64..1.4, 0.05f64..0.5, 0.1f64..2.0)),
        )
            .prop_filter_map("needs some mass", |(atoms, density)| {
                let mut m = SpectralMeasure::from_atoms("random", &atoms);
                if let Some((a, w, c)) = density {
                    m = m.with_density(DensityPiece::new(DensityForm::Uniform { c }, [a, (a + w).min(1.5)], 1));
                }
                (!m.is_empty()).then_some(m)
            })
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn tau_at_least_one_and_q_within_bounds(m in positive_measure(), t in -1.0f64..1.0) {
            let g = Grid::new(-10.0, 10.0, 81).unwrap();
            let s = DysonSolver::new(&m, 12).unwrap();
            let ew = s.evolved(t).unwrap();
            for &x in &g.points() {
                let tau = log_tau(&ew, x).unwrap();
                prop_assert!(tau.sign > 0.0 && tau.log_abs >= 0.0);
            }
            let h = m.support_bounds().unwrap().1;
            let f = s.field(&g, t, Scheme::Trace).unwrap();
            prop_assert!(crate::verify::bounds_check(&f, h).is_ok(), "{:?}", f.q);
        }

        #[test]
        fn scaling_covariance(m in positive_measure(), c in 0.5f64..2.0, t in -0.5f64..0.5) {
            let scaled = crate::measures::scale_pushforward(&m, c).unwrap();
            let a = DysonSolver::new(&scaled, 12).unwrap();
            let b = DysonSolver::new(&m, 12).unwrap();
            for i in 0..21 {
                let x = -5.0 + 0.5 * i as f64;
                let lhs = a.q_point(x, t).unwrap();
                let rhs = c * c * b.q_point(c * x, c * c * c * t).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()), "x={} {} vs {}", x, lhs, rhs);
            }
        }

        #[test]
        fn decay_rate_at_plus_infinity(m in positive_measure(), t in -0.5f64..0.5) {
            let (b, _) = m.support_bounds().unwrap();
            let s = DysonSolver::new(&m, 12).unwrap();
            let x0 = 20.0 / b;
            let x1 = x0 + 10.0 / b;
            let rate = ((-s.q_point(x0, t).unwrap()).ln() - (-s.q_point(x1, t).unwrap()).ln()) / (x1 - x0);
            prop_assert!(rate >= 2.0 * b * 0.95, "rate {} for b {}", rate, b);
        }
    }
}
