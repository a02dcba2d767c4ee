//! Spectral measures on `[0, ∞)`: Dirac atoms plus density pieces.
//!
//! A measure is a value type. Positivity is a property of the data, not of
//! the type: signed atoms and negative pieces are representable everywhere,
//! and operations that need `dσ ≥ 0` check it themselves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::gauss_legendre;

/// Coincidence threshold between discretization nodes.
const NODE_COLLISION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub kappa: f64,
    /// Signed mass `c_n^2` placed at `kappa`.
    pub weight: f64,
}

/// Closed set of density shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", content = "params", rename_all = "lowercase")]
pub enum DensityForm {
    /// `2 (k/h) sqrt(h^2 - k^2)` on `[0, h]`.
    Condensate { h: f64 },
    /// Constant value `c`.
    Uniform { c: f64 },
    /// Piecewise-linear interpolation of `(k, density)` samples.
    Table { k: Vec<f64>, density: Vec<f64> },
}

impl DensityForm {
    fn value(&self, k: f64) -> f64 {
        match self {
            DensityForm::Condensate { h } => {
                if k < 0.0 || k > *h {
                    0.0
                } else {
                    2.0 * (k / h) * (h * h - k * k).sqrt()
                }
            }
            DensityForm::Uniform { c } => *c,
            DensityForm::Table { k: ks, density } => {
                if k < ks[0] || k > ks[ks.len() - 1] {
                    return 0.0;
                }
                let j = ks.partition_point(|&kj| kj <= k).clamp(1, ks.len() - 1);
                let (k0, k1) = (ks[j - 1], ks[j]);
                let (d0, d1) = (density[j - 1], density[j]);
                d0 + (d1 - d0) * (k - k0) / (k1 - k0)
            }
        }
    }
}

fn default_scale() -> f64 {
    1.0
}

fn is_unit(v: &f64) -> bool {
    *v == 1.0
}

/// One absolutely continuous component: `sign * scale * form(k)` on
/// `support`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityPiece {
    #[serde(flatten)]
    pub form: DensityForm,
    pub support: [f64; 2],
    pub sign: i8,
    /// Positive multiplier; produced by push-forwards, omitted from JSON when 1.
    #[serde(default = "default_scale", skip_serializing_if = "is_unit")]
    pub scale: f64,
}

impl DensityPiece {
    pub fn new(form: DensityForm, support: [f64; 2], sign: i8) -> Self {
        Self {
            form,
            support,
            sign,
            scale: 1.0,
        }
    }

    /// Signed density at `k` (zero outside the support).
    pub fn density(&self, k: f64) -> f64 {
        if k < self.support[0] || k > self.support[1] {
            return 0.0;
        }
        f64::from(self.sign) * self.scale * self.form.value(k)
    }

    fn validate(&self, index: usize) -> Result<()> {
        let field = |what: &str| format!("densities[{index}].{what}");
        let [a, b] = self.support;
        if !(a.is_finite() && b.is_finite() && a >= 0.0 && a < b) {
            return Err(Error::InvalidArgument(format!(
                "{}: need 0 <= a < b < inf, got [{a}, {b}]",
                field("support")
            )));
        }
        if self.sign != 1 && self.sign != -1 {
            return Err(Error::InvalidArgument(format!(
                "{}: must be 1 or -1, got {}",
                field("sign"),
                self.sign
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{}: must be positive, got {}",
                field("scale"),
                self.scale
            )));
        }
        match &self.form {
            DensityForm::Condensate { h } => {
                if !(*h > 0.0 && h.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "{}: condensate edge h must be positive, got {h}",
                        field("params.h")
                    )));
                }
                if b > *h * (1.0 + 1e-14) {
                    return Err(Error::InvalidArgument(format!(
                        "{}: condensate support must lie in [0, h = {h}], got [{a}, {b}]",
                        field("support")
                    )));
                }
            }
            DensityForm::Uniform { c } => {
                if !c.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "{}: must be finite",
                        field("params.c")
                    )));
                }
            }
            DensityForm::Table { k, density } => {
                if k.len() < 2 || k.len() != density.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{}: need at least two samples and equal lengths (k: {}, density: {})",
                        field("params"),
                        k.len(),
                        density.len()
                    )));
                }
                if !k.windows(2).all(|w| w[0] < w[1]) || k.iter().chain(density).any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "{}: sample abscissas must be finite and strictly increasing",
                        field("params.k")
                    )));
                }
                if k[0] > a || k[k.len() - 1] < b {
                    return Err(Error::InvalidArgument(format!(
                        "{}: table covers [{}, {}] but support is [{a}, {b}]",
                        field("params.k"),
                        k[0],
                        k[k.len() - 1]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Exact `∫ |density(k)| / k dk` over the support.
    fn carleson_integral(&self, index: usize) -> Result<f64> {
        let [a, b] = self.support;
        let amp = self.scale;
        let at_zero = |what: &str| {
            Error::CarlesonViolated(format!(
                "densities[{index}] ({what}) is nonzero at k = 0, so density/k is not integrable"
            ))
        };
        match &self.form {
            DensityForm::Condensate { h } => {
                // d/k = (2/h) sqrt(h^2 - k^2)
                let anti = |k: f64| (k * (h * h - k * k).max(0.0).sqrt() + h * h * (k / h).clamp(-1.0, 1.0).asin()) / h;
                Ok(amp * (anti(b) - anti(a)))
            }
            DensityForm::Uniform { c } => {
                if *c == 0.0 {
                    Ok(0.0)
                } else if a == 0.0 {
                    Err(at_zero("uniform"))
                } else {
                    Ok(amp * c.abs() * (b / a).ln())
                }
            }
            DensityForm::Table { k, .. } => {
                // breakpoints restricted to [a, b]
                let mut pts = vec![a];
                pts.extend(k.iter().copied().filter(|&kj| kj > a && kj < b));
                pts.push(b);
                let mut total = 0.0;
                for w in pts.windows(2) {
                    let (k0, k1) = (w[0], w[1]);
                    let (d0, d1) = (self.form.value(k0), self.form.value(k1));
                    total += abs_linear_over_k(k0, k1, d0, d1).ok_or_else(|| at_zero("table"))?;
                }
                Ok(amp * total)
            }
        }
    }
}

/// `∫_{k0}^{k1} |d(k)|/k dk` for linear `d`; `None` when non-integrable at 0.
fn abs_linear_over_k(k0: f64, k1: f64, d0: f64, d1: f64) -> Option<f64> {
    let slope = (d1 - d0) / (k1 - k0);
    let intercept = d0 - slope * k0;
    let piece = |lo: f64, hi: f64| -> Option<f64> {
        if hi <= lo {
            return Some(0.0);
        }
        // ∫ (α + βk)/k = α ln(hi/lo) + β (hi - lo)
        let log_part = if intercept == 0.0 {
            0.0
        } else if lo == 0.0 {
            return None;
        } else {
            intercept * (hi / lo).ln()
        };
        Some((log_part + slope * (hi - lo)).abs())
    };
    if d0 * d1 < 0.0 {
        let root = k0 - d0 / slope;
        Some(piece(k0, root)? + piece(root, k1)?)
    } else {
        piece(k0, k1)
    }
}

/// A compactly supported signed measure on `[0, ∞)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralMeasure {
    pub name: String,
    #[serde(default)]
    pub atoms: Vec<Atom>,
    #[serde(default)]
    pub densities: Vec<DensityPiece>,
}

impl SpectralMeasure {
    pub fn empty(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            atoms: Vec::new(),
            densities: Vec::new(),
        }
    }

    pub fn from_atoms(name: impl Into<String>, atoms: &[(f64, f64)]) -> Self {
        Self {
            name: name.into(),
            atoms: atoms
                .iter()
                .map(|&(kappa, weight)| Atom { kappa, weight })
                .collect(),
            densities: Vec::new(),
        }
    }

    pub fn with_density(mut self, piece: DensityPiece) -> Self {
        self.densities.push(piece);
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let m: SpectralMeasure = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::InvalidArgument(format!("measure JSON at `{path}`: {}", e.into_inner()))
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("measure serializes")
    }

    /// Structural checks; the Carleson condition is checked separately.
    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.atoms.iter().enumerate() {
            if !a.kappa.is_finite() || !a.weight.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "atoms[{i}]: kappa and weight must be finite"
                )));
            }
        }
        for (i, p) in self.densities.iter().enumerate() {
            p.validate(i)?;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty() && self.densities.is_empty()
    }

    /// True when every atom weight and every density value is non-negative.
    pub fn is_nonnegative(&self) -> bool {
        self.atoms.iter().all(|a| a.weight >= 0.0)
            && self.densities.iter().all(|p| {
                let sign = f64::from(p.sign);
                match &p.form {
                    DensityForm::Condensate { .. } => sign > 0.0,
                    DensityForm::Uniform { c } => sign * c >= 0.0,
                    DensityForm::Table { density, .. } => density.iter().all(|d| sign * d >= 0.0),
                }
            })
    }

    /// `(inf, sup)` of the support, ignoring zero-weight atoms.
    pub fn support_bounds(&self) -> Option<(f64, f64)> {
        let atom_ks = self.atoms.iter().filter(|a| a.weight != 0.0).map(|a| a.kappa);
        let piece_lo = self.densities.iter().map(|p| p.support[0]);
        let piece_hi = self.densities.iter().map(|p| p.support[1]);
        let lo = atom_ks.clone().chain(piece_lo).fold(f64::INFINITY, f64::min);
        let hi = atom_ks.chain(piece_hi).fold(f64::NEG_INFINITY, f64::max);
        (lo <= hi).then_some((lo, hi))
    }

    /// Measure sum: concatenates atoms and pieces.
    /// Sum of measures; atoms at the same `κ` are merged and dropped when
    /// they cancel.
    pub fn plus(&self, other: &SpectralMeasure) -> SpectralMeasure {
        let mut atoms: Vec<Atom> = Vec::new();
        for a in self.atoms.iter().chain(&other.atoms) {
            match atoms.iter_mut().find(|b| b.kappa == a.kappa) {
                Some(b) => b.weight += a.weight,
                None => atoms.push(*a),
            }
        }
        atoms.retain(|a| a.weight != 0.0);
        SpectralMeasure {
            name: format!("{}+{}", self.name, other.name),
            atoms,
            densities: self.densities.iter().chain(&other.densities).cloned().collect(),
        }
    }

    /// The measure `-σ`.
    pub fn negated(&self) -> SpectralMeasure {
        SpectralMeasure {
            name: format!("-({})", self.name),
            atoms: self
                .atoms
                .iter()
                .map(|a| Atom {
                    kappa: a.kappa,
                    weight: -a.weight,
                })
                .collect(),
            densities: self
                .densities
                .iter()
                .cloned()
                .map(|mut p| {
                    p.sign = -p.sign;
                    p
                })
                .collect(),
        }
    }
}

/// `∫ |dσ(k)| / k`.
pub fn carleson_check(m: &SpectralMeasure) -> Result<f64> {
    m.validate()?;
    let mut total = 0.0;
    for (i, a) in m.atoms.iter().enumerate() {
        if a.kappa <= 0.0 {
            return Err(Error::CarlesonViolated(format!(
                "atoms[{i}] sits at kappa = {} <= 0",
                a.kappa
            )));
        }
        total += a.weight.abs() / a.kappa;
    }
    for (i, p) in m.densities.iter().enumerate() {
        total += p.carleson_integral(i)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub n_per_piece: usize,
    pub atoms: Vec<Atom>,
}

/// Quadrature realization of a measure: `∫ f dσ ≈ Σ w_i f(k_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedMeasure {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub provenance: Provenance,
}

impl DiscretizedMeasure {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.weights.iter().all(|&w| w >= 0.0)
    }

    /// Concatenation followed by the same merge/collision rules as
    /// [`discretize`].
    pub fn plus(&self, other: &DiscretizedMeasure) -> Result<DiscretizedMeasure> {
        let pairs: Vec<(f64, f64, bool)> = self
            .nodes
            .iter()
            .zip(&self.weights)
            .chain(other.nodes.iter().zip(&other.weights))
            .map(|(&k, &w)| (k, w, true))
            .collect();
        let (nodes, weights) = merge_nodes(pairs)?;
        Ok(DiscretizedMeasure {
            nodes,
            weights,
            provenance: Provenance {
                n_per_piece: self.provenance.n_per_piece.max(other.provenance.n_per_piece),
                atoms: self
                    .provenance
                    .atoms
                    .iter()
                    .chain(&other.provenance.atoms)
                    .copied()
                    .collect(),
            },
        })
    }

    pub fn negated(&self) -> DiscretizedMeasure {
        DiscretizedMeasure {
            nodes: self.nodes.clone(),
            weights: self.weights.iter().map(|w| -w).collect(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Sorts `(k, w, mergeable)` triples; coincident mergeable entries have their
/// weights summed, any other coincidence is degenerate. Zero weights drop.
fn merge_nodes(mut pairs: Vec<(f64, f64, bool)>) -> Result<(Vec<f64>, Vec<f64>)> {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut nodes: Vec<f64> = Vec::with_capacity(pairs.len());
    let mut weights: Vec<f64> = Vec::with_capacity(pairs.len());
    let mut last_mergeable = false;
    for (k, w, mergeable) in pairs {
        if let Some(&prev) = nodes.last() {
            if (k - prev).abs() <= NODE_COLLISION {
                if mergeable && last_mergeable {
                    *weights.last_mut().expect("nonempty") += w;
                    continue;
                }
                return Err(Error::DegenerateDiscretization { a: prev, b: k });
            }
        }
        nodes.push(k);
        weights.push(w);
        last_mergeable = mergeable;
    }
    let (nodes, weights) = nodes
        .into_iter()
        .zip(weights)
        .filter(|(_, w)| *w != 0.0)
        .unzip();
    Ok((nodes, weights))
}

/// Copies atoms exactly (coincident atoms merged) and places `n_per_piece`
/// Gauss–Legendre nodes on each density piece with weights
/// `density(k_i) * w_i^{GL}`.
/// Nodes and weights for one density piece. Condensate pieces are integrated
/// in the angle `k = h sin θ`, which removes the square-root edge and restores
/// spectral convergence.
fn piece_rule(piece: &DensityPiece, n: usize) -> Result<Vec<(f64, f64)>> {
    let [a, b] = piece.support;
    match piece.form {
        DensityForm::Condensate { h } => {
            let ta = (a / h).clamp(0.0, 1.0).asin();
            let tb = (b / h).clamp(0.0, 1.0).asin();
            let rule = gauss_legendre(ta, tb, n)?;
            Ok(rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(&th, &w)| {
                    let k = h * th.sin();
                    (k, piece.density(k) * h * th.cos() * w)
                })
                .collect())
        }
        _ => {
            let rule = gauss_legendre(a, b, n)?;
            Ok(rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(&k, &w)| (k, piece.density(k) * w))
                .collect())
        }
    }
}

pub fn discretize(m: &SpectralMeasure, n_per_piece: usize) -> Result<DiscretizedMeasure> {
    if n_per_piece == 0 {
        return Err(Error::InvalidArgument(
            "n_per_piece must be at least 1".into(),
        ));
    }
    m.validate()?;
    let mut pairs: Vec<(f64, f64, bool)> = m.atoms.iter().map(|a| (a.kappa, a.weight, true)).collect();
    for piece in &m.densities {
        pairs.extend(piece_rule(piece, n_per_piece)?.into_iter().map(|(k, w)| (k, w, false)));
    }
    let (nodes, weights) = merge_nodes(pairs)?;
    Ok(DiscretizedMeasure {
        nodes,
        weights,
        provenance: Provenance {
            n_per_piece,
            atoms: m.atoms.clone(),
        },
    })
}

/// `dσ_t = exp(8k^3 t) dσ`, kept in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolvedWeights {
    pub base: DiscretizedMeasure,
    pub t: f64,
    /// `8 k_i^3 t`.
    pub log_factors: Vec<f64>,
}

impl EvolvedWeights {
    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }
}

pub fn evolve(d: &DiscretizedMeasure, t: f64) -> Result<EvolvedWeights> {
    if !t.is_finite() {
        return Err(Error::InvalidArgument(format!("time must be finite, got {t}")));
    }
    Ok(EvolvedWeights {
        log_factors: d.nodes.iter().map(|&k| 8.0 * k * k * k * t).collect(),
        base: d.clone(),
        t,
    })
}

/// Push-forward under `k ↦ c k` with an extra factor `c`: atoms
/// `(κ, w) ↦ (cκ, c w)`, densities `ρ(k) ↦ ρ(k / c)`.
pub fn scale_pushforward(m: &SpectralMeasure, c: f64) -> Result<SpectralMeasure> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "scale factor must be positive and finite, got {c}"
        )));
    }
    let densities = m
        .densities
        .iter()
        .map(|p| {
            let support = [c * p.support[0], c * p.support[1]];
            let (form, scale) = match &p.form {
                // ρ_h(k/c) = ρ_{ch}(k) / c
                DensityForm::Condensate { h } => (DensityForm::Condensate { h: c * h }, p.scale / c),
                DensityForm::Uniform { c: v } => (DensityForm::Uniform { c: *v }, p.scale),
                DensityForm::Table { k, density } => (
                    DensityForm::Table {
                        k: k.iter().map(|kj| c * kj).collect(),
                        density: density.clone(),
                    },
                    p.scale,
                ),
            };
            DensityPiece {
                form,
                support,
                sign: p.sign,
                scale,
            }
        })
        .collect();
    Ok(SpectralMeasure {
        name: if c == 1.0 { m.name.clone() } else { format!("{}@x{c}", m.name) },
        atoms: m
            .atoms
            .iter()
            .map(|a| Atom {
                kappa: c * a.kappa,
                weight: c * a.weight,
            })
            .collect(),
        densities,
    })
}
