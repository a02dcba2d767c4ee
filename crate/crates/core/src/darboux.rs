//! Continuous binary Darboux transformation of a step-type seed:
//! `q_σ = q - 2∂ₓ² log det(I + 𝕂)`, `𝕂(λ, μ) = ∫ₓ^∞ ψ(s; iλ) ψ(s; iμ) ds`
//! acting on `L²(dσ_t)`. With `q = 0` this is Dyson's formula.

use crate::dyson::{sample_increment, KernelSystem, EXPONENT_GUARD};
use crate::error::{Error, Result};
use crate::field::{FieldMeta, Grid, Scheme, SolutionField};
use crate::jost::{JostTable, SampledSeed, SeedPotential, DEFAULT_STEP};
use crate::measures::{carleson_check, discretize, evolve, SpectralMeasure};

/// Points beyond each end of the output grid kept for the fd stencil.
const MARGIN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DarbouxOptions {
    /// Quadrature nodes per density piece of `σ`.
    pub n: usize,
    pub scheme: Scheme,
    /// RK4 step bound for the Jost solutions.
    pub step: f64,
    /// Sample spacing used when a dressed field becomes a seed.
    pub resample: f64,
}

impl Default for DarbouxOptions {
    fn default() -> Self {
        Self {
            n: 40,
            scheme: Scheme::Trace,
            step: DEFAULT_STEP,
            resample: 2.5e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DressedSolution {
    pub seed: SeedPotential,
    pub sigma: SpectralMeasure,
    /// Data of the dressed field, `ρ + σ`.
    pub data: SpectralMeasure,
    pub t: f64,
    pub options: DarbouxOptions,
    pub field: SolutionField,
}

/// `dρ + dσ ≥ 0` where it can be decided: atoms of `σ` must not drive a
/// known atom of `ρ` negative, and negative density pieces must cancel an
/// identical positive piece of `ρ`.
pub fn check_positivity(rho: &SpectralMeasure, sigma: &SpectralMeasure) -> Result<()> {
    for a in &sigma.atoms {
        let existing: f64 = rho
            .atoms
            .iter()
            .filter(|b| (b.kappa - a.kappa).abs() <= 1e-12 * a.kappa.max(1.0))
            .map(|b| b.weight)
            .sum();
        let total = existing + a.weight;
        if total < -1e-12 * existing.abs().max(a.weight.abs()) {
            return Err(Error::DataPositivityViolated(format!(
                "atom at kappa={} would carry weight {total}",
                a.kappa
            )));
        }
    }
    for p in sigma.densities.iter().filter(|p| p.sign < 0) {
        let cancels = rho.densities.iter().any(|r| {
            r.sign > 0 && r.form == p.form && r.support == p.support && r.scale == p.scale
        });
        if !cancels {
            return Err(Error::DataPositivityViolated(format!(
                "negative density piece on [{}, {}] is not matched by the seed data",
                p.support[0], p.support[1]
            )));
        }
    }
    Ok(())
}

/// Stored overlap entries per Jost table; larger grids are split.
const TABLE_BUDGET: usize = 4_000_000;

/// Dresses `seed` by `σ` on `grid` at time `t`.
pub fn darboux_transform(seed: &SeedPotential, sigma: &SpectralMeasure, grid: &Grid, t: f64, options: DarbouxOptions) -> Result<DressedSolution> {
    carleson_check(sigma)?;
    check_positivity(&seed.data, sigma)?;
    let disc = discretize(sigma, options.n)?;
    let pairs = disc.len() * (disc.len() + 1) / 2;
    let chunk = (TABLE_BUDGET / pairs.max(1)).max(16);
    let field = if grid.n <= chunk {
        dress_on_grid(seed, sigma, &disc, grid, t, options)?
    } else {
        let dx = grid.spacing();
        let mut parts: Vec<SolutionField> = Vec::new();
        let mut start = 0;
        while start < grid.n {
            let end = (start + chunk).min(grid.n) - 1;
            let sub = if end > start {
                Grid::new(grid.point(start), grid.point(end), end - start + 1)?
            } else {
                Grid::new(grid.point(start) - dx, grid.point(start), 2)?
            };
            let mut f = dress_on_grid(seed, sigma, &disc, &sub, t, options)?;
            if end == start {
                f.x.remove(0);
                f.q.remove(0);
                f.singular.remove(0);
            }
            parts.push(f);
            start = end + 1;
        }
        let mut it = parts.into_iter();
        let mut field = it.next().expect("grid has points");
        for f in it {
            field.x.extend(f.x);
            field.q.extend(f.q);
            field.singular.extend(f.singular);
            for w in f.meta.warnings {
                if !field.meta.warnings.contains(&w) {
                    field.meta.warnings.push(w);
                }
            }
        }
        field
    };
    Ok(DressedSolution {
        seed: seed.clone(),
        sigma: sigma.clone(),
        data: seed.data.plus(sigma),
        t,
        options,
        field,
    })
}

fn dress_on_grid(seed: &SeedPotential, sigma: &SpectralMeasure, disc: &crate::measures::DiscretizedMeasure, grid: &Grid, t: f64, options: DarbouxOptions) -> Result<SolutionField> {
    let disc = disc.clone();
    let ew = evolve(&disc, t)?;
    let lambdas = &disc.nodes;
    let dx = grid.spacing();

    let table = if lambdas.is_empty() {
        None
    } else {
        Some(JostTable::for_grid(seed, lambdas, t, grid, MARGIN, options.step)?)
    };
    let seed_at = |x: f64| -> Result<f64> {
        match &table {
            Some(tab) => Ok(tab.seed_q[tab.index(x)?]),
            None => seed.q(x, t),
        }
    };

    let mut meta = FieldMeta::new(format!("{} + {}", seed.name(), sigma.name), "darboux");
    meta.n = options.n;
    meta.scheme = Some(options.scheme);
    meta.nonnegative = seed.data.is_nonnegative() && sigma.is_nonnegative();

    let field = match &table {
        None => {
            let xs = grid.points();
            let q = xs.iter().map(|&x| seed_at(x)).collect::<Result<Vec<_>>>()?;
            SolutionField {
                singular: vec![false; xs.len()],
                x: xs,
                t,
                q,
                meta,
            }
        }
        Some(tab) => {
            let signature: Vec<f64> = ew.base.weights.iter().map(|&w| if w < 0.0 { -1.0 } else { 1.0 }).collect();
            let build = |x: f64| -> Result<KernelSystem> {
                let p = tab.index(x)?;
                let g: Vec<f64> = lambdas
                    .iter()
                    .zip(&ew.log_factors)
                    .map(|(&l, &lf)| -l * x + 0.5 * lf)
                    .collect();
                let gmax = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if 2.0 * gmax > EXPONENT_GUARD {
                    return Err(Error::ExponentOverflow {
                        exponent: 2.0 * gmax,
                        limit: EXPONENT_GUARD,
                        x,
                        t,
                    });
                }
                let offsets: Vec<f64> = g.iter().map(|&gi| gi.max(0.0)).collect();
                let v: Vec<f64> = ew
                    .base
                    .weights
                    .iter()
                    .zip(g.iter().zip(&offsets))
                    .map(|(w, (gi, oi))| w.abs().sqrt() * (gi - oi).exp())
                    .collect();
                let phi = &tab.phi[p];
                let dphi = &tab.dphi[p];
                let u: Vec<f64> = v.iter().zip(phi).map(|(a, b)| a * b).collect();
                let du: Vec<f64> = (0..v.len()).map(|i| v[i] * (dphi[i] - lambdas[i] * phi[i])).collect();
                KernelSystem::assemble(x, t, signature.clone(), offsets, u, du, |i, j| v[i] * v[j] * tab.khat(p, i, j))
            };
            let s = sample_increment(build, &grid.points(), options.scheme, dx, false)?;
            if let Some(i) = s.singular.iter().position(|&b| b) {
                return Err(Error::SingularDeterminant { step: i });
            }
            let q = s
                .x
                .iter()
                .zip(&s.dq)
                .map(|(&x, dq)| Ok(seed_at(x)? + dq))
                .collect::<Result<Vec<_>>>()?;
            meta.warnings = s.warnings;
            if tab.tail_integral != 0.0 {
                meta.warnings.push(format!(
                    "seed tail closed at x={} with first-order correction (tail integral {:.3e})",
                    tab.x_max, tab.tail_integral
                ));
            }
            SolutionField {
                singular: vec![false; s.x.len()],
                x: s.x,
                t,
                q,
                meta,
            }
        }
    };
    Ok(field)
}

impl DressedSolution {
    /// The dressed field on another grid.
    pub fn resample(&self, grid: &Grid) -> Result<SolutionField> {
        Ok(darboux_transform(&self.seed, &self.sigma, grid, self.t, self.options)?.field)
    }

    /// The dressed field as a seed covering `[x_from, ∞)`: cubic interpolant
    /// of fine samples, extended right until `|q| ≤ eps_tail`, plus the
    /// exponential tail model.
    pub fn as_seed(&self, x_from: f64) -> Result<SeedPotential> {
        let eps = self.seed.eps_tail;
        let ds = self.options.resample;
        let mut x_hi = self.field.x.last().copied().unwrap_or(x_from).max(x_from) + 10.0;
        loop {
            let probe = Grid::new(x_hi, x_hi + 20.0, 81)?;
            let f = self.resample(&probe)?;
            if f.q.iter().all(|v| v.abs() <= eps) {
                break;
            }
            x_hi += 10.0;
            if x_hi > x_from + 1000.0 {
                return Err(Error::TailNotNegligible {
                    x_max: x_hi,
                    value: f.sup_norm(),
                    tolerance: eps,
                });
            }
        }
        let fine = Grid::with_spacing(x_from, x_hi, ds)?;
        let f = self.resample(&fine)?;
        if f.len() != fine.n {
            return Err(Error::ExponentOverflow {
                exponent: f64::INFINITY,
                limit: EXPONENT_GUARD,
                x: x_from,
                t: self.t,
            });
        }
        let mut data = self.data.clone();
        data.name = format!("{} + {}", self.seed.data.name, self.sigma.name);
        Ok(SeedPotential::from_samples(SampledSeed::from_field(&f)?, self.t, data).with_tail_tolerance(eps))
    }
}

/// `(q_σ)_{-σ}` on `grid`; should reproduce the original seed.
pub fn darboux_invert(dressed: &DressedSolution, grid: &Grid) -> Result<SolutionField> {
    let from = grid.x_min - (MARGIN as f64 + 2.0) * grid.spacing() - 1.0;
    let seed = dressed.as_seed(from)?;
    let undo = dressed.sigma.negated();
    Ok(darboux_transform(&seed, &undo, grid, dressed.t, dressed.options)?.field)
}

#[derive(Debug, Clone)]
pub struct CompositionReport {
    /// `sup |q_{σ₁ then σ₂} - q_{σ₁+σ₂}|` over the grid.
    pub discrepancy: f64,
    pub two_step: SolutionField,
    pub one_shot: SolutionField,
}

/// Dressing by `σ₁` then `σ₂` against a single dressing by `σ₁ + σ₂`.
pub fn composition_check(seed: &SeedPotential, sigma1: &SpectralMeasure, sigma2: &SpectralMeasure, grid: &Grid, t: f64, options: DarbouxOptions) -> Result<CompositionReport> {
    let first = darboux_transform(seed, sigma1, grid, t, options)?;
    let from = grid.x_min - (MARGIN as f64 + 2.0) * grid.spacing() - 1.0;
    let two_step = if sigma2.is_empty() {
        first.field.clone()
    } else {
        darboux_transform(&first.as_seed(from)?, sigma2, grid, t, options)?.field
    };
    let one_shot = darboux_transform(seed, &sigma1.plus(sigma2), grid, t, options)?.field;
    Ok(CompositionReport {
        discrepancy: two_step.sup_distance(&one_shot)?,
        two_step,
        one_shot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyson::{kay_moses, q_dyson};
    use crate::field::one_soliton;
    use crate::measures::Atom;

    fn atom(kappa: f64, weight: f64) -> SpectralMeasure {
        SpectralMeasure::from_atoms(format!("atom({kappa},{weight})"), &[(kappa, weight)])
    }

    fn opts(scheme: Scheme) -> DarbouxOptions {
        DarbouxOptions {
            n: 20,
            scheme,
            ..DarbouxOptions::default()
        }
    }

    #[test]
    fn zero_seed_atom_is_one_soliton() {
        let g = Grid::new(-5.0, 5.0, 101).unwrap();
        for scheme in [Scheme::Trace, Scheme::Fd] {
            for t in [0.0, 0.3] {
                let d = darboux_transform(&SeedPotential::zero(), &atom(1.0, 2.0), &g, t, opts(scheme)).unwrap();
                let err = d
                    .field
                    .x
                    .iter()
                    .zip(&d.field.q)
                    .map(|(&x, q)| (q - one_soliton(1.0, 2.0, x, t)).abs())
                    .fold(0.0, f64::max);
                let tol = if scheme == Scheme::Trace { 1e-8 } else { 1e-4 };
                assert!(err < tol, "{scheme} t={t}: {err}");
            }
        }
    }

    #[test]
    fn empty_sigma_is_identity() {
        let g = Grid::new(-3.0, 3.0, 31).unwrap();
        let seed = SeedPotential::from_measure(&atom(1.0, 2.0), 1).unwrap();
        let d = darboux_transform(&seed, &SpectralMeasure::empty("e"), &g, 0.0, opts(Scheme::Trace)).unwrap();
        for (x, q) in d.field.x.iter().zip(&d.field.q) {
            assert_eq!(*q, seed.q(*x, 0.0).unwrap());
        }
    }

    #[test]
    fn positivity_rejections() {
        let g = Grid::new(-1.0, 1.0, 5).unwrap();
        let r = darboux_transform(&SeedPotential::zero(), &atom(1.0, -1.0), &g, 0.0, opts(Scheme::Trace));
        assert!(matches!(r, Err(Error::DataPositivityViolated(_))));
        let seed = SeedPotential::from_measure(&atom(1.0, 2.0), 1).unwrap();
        assert!(check_positivity(&seed.data, &atom(1.0, -2.0)).is_ok());
        assert!(check_positivity(&seed.data, &atom(1.0, -3.0)).is_err());
        let c = crate::condensate::condensate_measure(1.0).unwrap();
        assert!(check_positivity(&SpectralMeasure::empty("z"), &c.negated()).is_err());
        assert!(check_positivity(&c, &c.negated()).is_ok());
    }

    #[test]
    fn soliton_seed_plus_atom_is_two_soliton() {
        let g = Grid::new(-5.0, 5.0, 51).unwrap();
        let seed = SeedPotential::from_measure(&atom(1.0, 2.0), 1).unwrap();
        let d = darboux_transform(&seed, &atom(2.0, 1.0), &g, 0.0, opts(Scheme::Trace)).unwrap();
        let km = kay_moses(
            &[Atom { kappa: 1.0, weight: 2.0 }, Atom { kappa: 2.0, weight: 1.0 }],
            &g,
            0.0,
            Scheme::Trace,
        )
        .unwrap();
        let err = d.field.sup_distance(&km).unwrap();
        assert!(err < 1e-8, "{err}");
        assert_eq!(d.data.atoms.len(), 2);
    }

    #[test]
    fn zero_seed_condensate_reduces_to_dyson() {
        let g = Grid::new(-5.0, 5.0, 41).unwrap();
        let c = crate::condensate::condensate_measure(1.0).unwrap();
        let d = darboux_transform(&SeedPotential::zero(), &c, &g, 0.0, opts(Scheme::Trace)).unwrap();
        let dy = q_dyson(&c, &g, 0.0, 20, Scheme::Trace).unwrap();
        let err = d.field.sup_distance(&dy).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn invert_atom_dressing() {
        let g = Grid::new(-5.0, 5.0, 101).unwrap();
        let d = darboux_transform(&SeedPotential::zero(), &atom(1.0, 2.0), &g, 0.0, opts(Scheme::Trace)).unwrap();
        let back = darboux_invert(&d, &g).unwrap();
        let err = back.sup_norm();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn remove_one_of_two_atoms() {
        // removing the κ = 2 bound state sends τ to 0 like e^{4x} on the left,
        // so seed errors are amplified by e^{4|x|} there
        let g = Grid::new(-3.0, 5.0, 81).unwrap();
        let both = SpectralMeasure::from_atoms("two", &[(1.0, 2.0), (2.0, 1.0)]);
        let d = darboux_transform(&SeedPotential::zero(), &both, &g, 0.0, opts(Scheme::Trace)).unwrap();
        let from = g.x_min - 5.0 * g.spacing() - 1.0;
        let back = darboux_transform(&d.as_seed(from).unwrap(), &atom(2.0, 1.0).negated(), &g, 0.0, opts(Scheme::Trace)).unwrap();
        let km = kay_moses(&[Atom { kappa: 1.0, weight: 2.0 }], &g, 0.0, Scheme::Trace).unwrap();
        let err = back.field.sup_distance(&km).unwrap();
        assert!(err < 1e-5, "{err}");
        assert_eq!(back.data.atoms.len(), 1);
    }

    #[test]
    fn composition_of_two_atoms() {
        let g = Grid::new(-5.0, 5.0, 101).unwrap();
        let r = composition_check(&SeedPotential::zero(), &atom(1.0, 2.0), &atom(2.0, 1.0), &g, 0.0, opts(Scheme::Trace)).unwrap();
        assert!(r.discrepancy <= 1e-5, "{}", r.discrepancy);
        let km = kay_moses(
            &[Atom { kappa: 1.0, weight: 2.0 }, Atom { kappa: 2.0, weight: 1.0 }],
            &g,
            0.0,
            Scheme::Trace,
        )
        .unwrap();
        assert!(r.two_step.sup_distance(&km).unwrap() <= 1e-5);
        assert!(r.one_shot.sup_distance(&km).unwrap() <= 1e-8);
        let e = composition_check(&SeedPotential::zero(), &atom(1.0, 2.0), &SpectralMeasure::empty("e"), &g, 0.0, opts(Scheme::Trace)).unwrap();
        assert_eq!(e.discrepancy, 0.0);
    }

    #[test]
    fn soliton_injected_into_condensate() {
        // the condensate tail is algebraic, so the seed cutoff needs a looser tolerance
        let g = Grid::new(-5.0, 5.0, 41).unwrap();
        let c = crate::condensate::condensate_measure(1.0).unwrap();
        let seed = SeedPotential::zero().with_tail_tolerance(1e-6);
        let r = composition_check(&seed, &c, &atom(1.5, 1.0), &g, 0.0, opts(Scheme::Trace)).unwrap();
        assert!(r.discrepancy <= 1e-4, "{}", r.discrepancy);
    }
}
