//! Dense factorizations for the small kernel systems built at each (x, t).
//!
//! Matrices carry per-index log offsets: the represented matrix is
//! `M_ij = exp(o_i + o_j) * stored_ij`. Offsets keep stored entries O(1)
//! when the underlying kernel grows like `exp(-2kx + 8k^3 t)`.

use crate::error::{Error, Result};

/// Square symmetric matrix with per-index log-scale offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    n: usize,
    data: Vec<f64>,
    offsets: Vec<f64>,
}

impl SymmetricMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
            offsets: vec![0.0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * m.n + i] = d;
        }
        m
    }

    /// Builds from a full row-major array, averaging `(a_ij + a_ji) / 2` so
    /// the stored matrix is exactly symmetric.
    pub fn from_rows(n: usize, rows: &[f64]) -> Result<Self> {
        if rows.len() != n * n {
            return Err(Error::InvalidArgument(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                rows.len()
            )));
        }
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                m.set(i, j, 0.5 * (rows[i * n + j] + rows[j * n + i]));
            }
        }
        Ok(m)
    }

    /// Builds `stored_ij = f(i, j)` for `j <= i`, mirrored.
    pub fn from_fn<F: FnMut(usize, usize) -> f64>(n: usize, mut f: F) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn with_offsets(mut self, offsets: Vec<f64>) -> Result<Self> {
        if offsets.len() != self.n {
            return Err(Error::InvalidArgument(format!(
                "offset vector has length {}, matrix dimension is {}",
                offsets.len(),
                self.n
            )));
        }
        self.offsets = offsets;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// Stored (offset-free) entry.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Entry of the represented matrix, `exp(o_i + o_j) * stored_ij`.
    pub fn value(&self, i: usize, j: usize) -> f64 {
        (self.offsets[i] + self.offsets[j]).exp() * self.get(i, j)
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    /// Max absolute row sum of the stored matrix.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|i| self.data[i * self.n..(i + 1) * self.n].iter().map(|v| v.abs()).sum())
            .fold(0.0, f64::max)
    }

    /// Product with the represented matrix.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let scale: Vec<f64> = self.offsets.iter().map(|o| o.exp()).collect();
        (0..self.n)
            .map(|i| {
                let row = &self.data[i * self.n..(i + 1) * self.n];
                scale[i]
                    * row
                        .iter()
                        .zip(v)
                        .zip(&scale)
                        .map(|((a, x), s)| a * s * x)
                        .sum::<f64>()
            })
            .collect()
    }

    fn offset_sum(&self) -> f64 {
        2.0 * self.offsets.iter().sum::<f64>()
    }
}

/// Pivoted (diagonal-pivoting) Cholesky factorization `P S P^T = L L^T` of the
/// stored matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
    perm: Vec<usize>,
    offsets: Vec<f64>,
}

impl Cholesky {
    pub fn new(m: &SymmetricMatrix) -> Result<Self> {
        let n = m.n;
        let tolerance = 1e-10 * m.norm_inf();
        let mut a = m.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            // choose the largest remaining diagonal
            let mut p = k;
            for i in k + 1..n {
                if a[i * n + i] > a[p * n + p] {
                    p = i;
                }
            }
            if p != k {
                swap_sym(&mut a, n, k, p);
                perm.swap(k, p);
            }
            let pivot = a[k * n + k];
            if !(pivot > 0.0) {
                return Err(if pivot >= -tolerance && !pivot.is_nan() {
                    Error::SingularDeterminant { step: k }
                } else {
                    Error::NotPositiveDefinite {
                        step: k,
                        pivot,
                        tolerance: -tolerance,
                    }
                });
            }
            let d = pivot.sqrt();
            a[k * n + k] = d;
            for i in k + 1..n {
                a[i * n + k] /= d;
            }
            for j in k + 1..n {
                let ljk = a[j * n + k];
                if ljk == 0.0 {
                    continue;
                }
                // full symmetric update so later pivot swaps see valid entries
                for i in j..n {
                    let v = a[i * n + j] - a[i * n + k] * ljk;
                    a[i * n + j] = v;
                    a[j * n + i] = v;
                }
            }
        }
        // keep the lower triangle only
        for i in 0..n {
            for j in i + 1..n {
                a[i * n + j] = 0.0;
            }
        }
        Ok(Self {
            n,
            l: a,
            perm,
            offsets: m.offsets.clone(),
        })
    }

    /// `log det M` including the offset contribution `2 Σ o_i`.
    pub fn logdet(&self) -> f64 {
        let diag: f64 = (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum();
        2.0 * diag + 2.0 * self.offsets.iter().sum::<f64>()
    }

    /// Solves `M x = b` for the represented matrix `M`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = b
            .iter()
            .zip(&self.offsets)
            .map(|(v, o)| v * (-o).exp())
            .collect();
        self.solve_stored(&scaled)
            .into_iter()
            .zip(&self.offsets)
            .map(|(v, o)| v * (-o).exp())
            .collect()
    }

    /// Solves against the stored (offset-free) matrix.
    pub fn solve_stored(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s -= self.l[i * n + j] * y[j];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= self.l[j * n + i] * y[j];
            }
            y[i] = s / self.l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = y[k];
        }
        x
    }
}

fn swap_sym(a: &mut [f64], n: usize, i: usize, j: usize) {
    for c in 0..n {
        a.swap(i * n + c, j * n + c);
    }
    for r in 0..n {
        a.swap(r * n + i, r * n + j);
    }
}

/// LU factorization with partial pivoting of a general square matrix.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
    norm1: f64,
}

impl Lu {
    /// Factorizes a row-major `n x n` matrix. An exactly zero pivot column is
    /// reported as a singular determinant.
    pub fn new(n: usize, rows: &[f64]) -> Result<Self> {
        if rows.len() != n * n {
            return Err(Error::InvalidArgument(format!(
                "expected {} entries, got {}",
                n * n,
                rows.len()
            )));
        }
        let norm1 = (0..n)
            .map(|j| (0..n).map(|i| rows[i * n + j].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let mut a = rows.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let mut p = k;
            let mut best = a[k * n + k].abs();
            for i in k + 1..n {
                let v = a[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || best.is_nan() {
                return Err(Error::SingularDeterminant { step: k });
            }
            if p != k {
                for c in 0..n {
                    a.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = a[k * n + k];
            for i in k + 1..n {
                let f = a[i * n + k] / pivot;
                a[i * n + k] = f;
                if f == 0.0 {
                    continue;
                }
                for c in k + 1..n {
                    a[i * n + c] -= f * a[k * n + c];
                }
            }
        }
        Ok(Self {
            n,
            lu: a,
            perm,
            sign,
            norm1,
        })
    }

    pub fn from_symmetric(m: &SymmetricMatrix) -> Result<Self> {
        Self::new(m.n, &m.data)
    }

    /// `(log |det|, sign)` of the factorized matrix.
    pub fn log_abs_det(&self) -> (f64, f64) {
        let mut log = 0.0;
        let mut sign = self.sign;
        for i in 0..self.n {
            let d = self.lu[i * self.n + i];
            log += d.abs().ln();
            if d < 0.0 {
                sign = -sign;
            }
        }
        (log, sign)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                y[i] -= self.lu[i * n + j] * y[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                y[i] -= self.lu[i * n + j] * y[j];
            }
            y[i] /= self.lu[i * n + i];
        }
        y
    }

    fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        // A^T = U^T L^T P, solve U^T z = b, L^T w = z, x = P^T w
        let mut z = b.to_vec();
        for i in 0..n {
            for j in 0..i {
                z[i] -= self.lu[j * n + i] * z[j];
            }
            z[i] /= self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                z[i] -= self.lu[j * n + i] * z[j];
            }
        }
        let mut x = vec![0.0; n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = z[k];
        }
        x
    }

    /// Hager–Higham estimate of the 1-norm condition number.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.n;
        if n == 0 {
            return 1.0;
        }
        let mut x = vec![1.0 / n as f64; n];
        let mut inv_norm = 0.0;
        for _ in 0..5 {
            let y = self.solve(&x);
            let est: f64 = y.iter().map(|v| v.abs()).sum();
            let xi: Vec<f64> = y.iter().map(|v| if *v >= 0.0 { 1.0 } else { -1.0 }).collect();
            let z = self.solve_transpose(&xi);
            let (jmax, zmax) = z
                .iter()
                .enumerate()
                .fold((0, 0.0), |(bj, bv), (j, v)| if v.abs() > bv { (j, v.abs()) } else { (bj, bv) });
            let ztx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
            inv_norm = f64::max(inv_norm, est);
            if zmax <= ztx {
                break;
            }
            x = vec![0.0; n];
            x[jmax] = 1.0;
        }
        inv_norm * self.norm1
    }
}

/// `log det M` for `M = I + P`, `P` positive semidefinite, via pivoted
/// Cholesky. Offsets are folded back in.
pub fn logdet_posdef(m: &SymmetricMatrix) -> Result<f64> {
    Ok(Cholesky::new(m)?.logdet())
}

/// `(log |det M|, sign)` for a general symmetric `M` by LU with partial
/// pivoting.
pub fn logdet_general(m: &SymmetricMatrix) -> Result<(f64, f64)> {
    let lu = Lu::from_symmetric(m)?;
    let (log, sign) = lu.log_abs_det();
    Ok((log + m.offset_sum(), sign))
}

/// Solves `M x = rhs` for symmetric positive definite `M`.
pub fn solve_spd(m: &SymmetricMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    if rhs.len() != m.n {
        return Err(Error::InvalidArgument(format!(
            "right-hand side has length {}, matrix dimension is {}",
            rhs.len(),
            m.n
        )));
    }
    Ok(Cholesky::new(m)?.solve(rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_spd(n: usize, seed: u64) -> SymmetricMatrix {
        // I + B B^T / n
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        SymmetricMatrix::from_fn(n, |i, j| {
            let dot: f64 = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum();
            dot / n as f64 + if i == j { 1.0 } else { 0.0 }
        })
    }

    #[test]
    fn logdet_identity_is_zero() {
        assert_eq!(logdet_posdef(&SymmetricMatrix::identity(3)).unwrap(), 0.0);
    }

    #[test]
    fn logdet_e() {
        let m = SymmetricMatrix::from_diagonal(&[1.0 + (std::f64::consts::E - 1.0)]);
        assert!((logdet_posdef(&m).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn one_soliton_determinant_at_origin() {
        let x: f64 = 0.0;
        let m = SymmetricMatrix::from_diagonal(&[1.0 + (-2.0 * x).exp()]);
        assert!((logdet_posdef(&m).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn offsets_are_folded_in() {
        // stored 1 with offset 300 represents exp(600)
        let m = SymmetricMatrix::from_diagonal(&[1.0])
            .with_offsets(vec![300.0])
            .unwrap();
        assert!((logdet_posdef(&m).unwrap() - 600.0).abs() < 1e-12);
        let x = solve_spd(&m, &[1.0]).unwrap();
        assert!((x[0].ln() + 600.0).abs() < 1e-12);
    }

    #[test]
    fn general_logdet_signs() {
        let m = SymmetricMatrix::from_diagonal(&[1.0, -1.0]);
        assert_eq!(logdet_general(&m).unwrap(), (0.0, -1.0));
        let m = SymmetricMatrix::from_rows(2, &[2.0, 1.0, 1.0, 2.0]).unwrap();
        let (l, s) = logdet_general(&m).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-15);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn negative_atom_at_its_pole_is_singular() {
        // 1 - exp(t - x) at x = t
        let (x, t) = (1.0_f64, 1.0_f64);
        let m = SymmetricMatrix::from_diagonal(&[1.0 - (t - x).exp()]);
        assert_eq!(
            logdet_general(&m).unwrap_err(),
            Error::SingularDeterminant { step: 0 }
        );
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = SymmetricMatrix::from_diagonal(&[1.0, -1.0]);
        assert!(matches!(
            logdet_posdef(&m),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn solve_trivial_systems() {
        let b = vec![1.0, -2.0, 3.5];
        assert_eq!(solve_spd(&SymmetricMatrix::identity(3), &b).unwrap(), b);
        let x = solve_spd(&SymmetricMatrix::from_diagonal(&[2.0]), &[4.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-15);
        let y = solve_spd(&SymmetricMatrix::from_diagonal(&[1.0 + 1.0]), &[1.0]).unwrap();
        assert!((y[0] - 0.5).abs() < 1e-15);
        assert!(solve_spd(&SymmetricMatrix::identity(2), &[1.0]).is_err());
    }

    #[test]
    fn solve_spd_residual_dimension_200() {
        let m = random_spd(200, 7);
        let mut rng = rand::rngs::StdRng::seed_from_u64(8);
        let b: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = solve_spd(&m, &b).unwrap();
        let r = m.mul_vec(&x);
        let res: f64 = r.iter().zip(&b).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(res <= 1e-10 * nb);
    }

    #[test]
    fn condition_estimate_of_diagonal() {
        let m = SymmetricMatrix::from_diagonal(&[1.0, 1e-6, 10.0]);
        let lu = Lu::from_symmetric(&m).unwrap();
        let c = lu.condition_estimate();
        assert!((c - 1e7).abs() / 1e7 < 1e-12, "{c}");
    }

    proptest! {
        #[test]
        fn posdef_logdet_nonnegative_and_matches_lu(n in 1usize..30, seed in 0u64..1000) {
            let m = random_spd(n, seed);
            let chol = logdet_posdef(&m).unwrap();
            let (lu, sign) = logdet_general(&m).unwrap();
            prop_assert!(chol >= 0.0);
            prop_assert_eq!(sign, 1.0);
            prop_assert!((chol - lu).abs() <= 1e-11 * chol.abs().max(1.0));
        }

        #[test]
        fn solve_multiply_back(n in 1usize..60, seed in 0u64..1000) {
            let m = random_spd(n, seed);
            let b: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.37 + seed as f64).sin()).collect();
            let x = solve_spd(&m, &b).unwrap();
            let r = m.mul_vec(&x);
            let res: f64 = r.iter().zip(&b).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            prop_assert!(res <= 1e-10 * nb);
        }
    }
}
