//! Gauss–Legendre rules on arbitrary finite intervals.

use crate::error::{Error, Result};

/// An n-point Gauss–Legendre rule mapped onto `(a, b)`.
///
/// Nodes are strictly increasing and interior; weights are positive and sum
/// to `b - a`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub a: f64,
    pub b: f64,
}

impl QuadratureRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Evaluates `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p_prev = 1.0;
    let mut p = x;
    for k in 2..=n {
        let k = k as f64;
        let p_next = ((2.0 * k - 1.0) * x * p - (k - 1.0) * p_prev) / k;
        p_prev = p;
        p = p_next;
    }
    let n = n as f64;
    let dp = n * (x * p - p_prev) / (x * x - 1.0);
    (p, dp)
}

/// Builds the n-point Gauss–Legendre rule on `(a, b)`.
///
/// Roots of `P_n` are found by Newton iteration from Tricomi-style initial
/// guesses and refined until the correction falls below `1e-15`; the rule
/// is mirrored about the midpoint so that symmetry is exact.
pub fn gauss_legendre(a: f64, b: f64, n: usize) -> Result<QuadratureRule> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "quadrature bounds must be finite, got ({a}, {b})"
        )));
    }
    if a >= b {
        return Err(Error::InvalidArgument(format!(
            "quadrature interval must satisfy a < b, got ({a}, {b})"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "quadrature order must be at least 1".into(),
        ));
    }

    // Reference rule on (-1, 1), built on the non-negative half.
    let mut ref_nodes = vec![0.0; n];
    let mut ref_weights = vec![0.0; n];
    let half = n.div_ceil(2);
    for i in 0..half {
        // i-th largest root
        let theta = std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5);
        let mut x = theta.cos();
        if n == 1 {
            x = 0.0;
        }
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            if n == 1 {
                break;
            }
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-15 {
                let (_, d) = legendre_with_derivative(n, x);
                dp = d;
                break;
            }
        }
        if n % 2 == 1 && i == half - 1 {
            x = 0.0;
            dp = legendre_with_derivative(n, 0.0).1;
        }
        let w = if n == 1 {
            2.0
        } else {
            2.0 / ((1.0 - x * x) * dp * dp)
        };
        ref_nodes[n - 1 - i] = x;
        ref_nodes[i] = -x;
        ref_weights[n - 1 - i] = w;
        ref_weights[i] = w;
    }

    let mid = 0.5 * (a + b);
    let half_len = 0.5 * (b - a);
    let nodes = ref_nodes.iter().map(|&x| mid + half_len * x).collect();
    let weights = ref_weights.iter().map(|&w| half_len * w).collect();
    Ok(QuadratureRule {
        nodes,
        weights,
        a,
        b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn midpoint_rule() {
        let r = gauss_legendre(-1.0, 1.0, 1).unwrap();
        assert_eq!(r.nodes, vec![0.0]);
        assert_eq!(r.weights, vec![2.0]);
    }

    #[test]
    fn two_point_rule() {
        let r = gauss_legendre(-1.0, 1.0, 2).unwrap();
        let x = 1.0 / 3f64.sqrt();
        assert!((r.nodes[0] + x).abs() < 1e-15);
        assert!((r.nodes[1] - x).abs() < 1e-15);
        assert!((r.weights[0] - 1.0).abs() < 1e-15);
        assert!((r.weights[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn linear_on_unit_interval() {
        let r = gauss_legendre(0.0, 1.0, 20).unwrap();
        assert!((r.integrate(|k| k) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(gauss_legendre(1.0, 1.0, 3).is_err());
        assert!(gauss_legendre(0.0, f64::INFINITY, 3).is_err());
        assert!(gauss_legendre(f64::NAN, 1.0, 3).is_err());
        assert!(gauss_legendre(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn structural_invariants_large_orders() {
        for n in [1, 2, 3, 7, 40, 81, 200, 400] {
            let r = gauss_legendre(-0.5, 2.0, n).unwrap();
            assert_eq!(r.order(), n);
            assert!(r.nodes.windows(2).all(|w| w[0] < w[1]));
            assert!(r.nodes[0] > -0.5 && r.nodes[n - 1] < 2.0);
            assert!(r.weights.iter().all(|&w| w > 0.0));
            let s: f64 = r.weights.iter().sum();
            assert!((s - 2.5).abs() <= 1e-13 * 2.5, "n={n} sum={s}");
            // Newton correction on the reference interval
            let reference = gauss_legendre(-1.0, 1.0, n).unwrap();
            for &x in &reference.nodes {
                let (p, dp) = legendre_with_derivative(n, x);
                if n > 1 {
                    assert!((p / dp).abs() <= 1e-14, "n={n} correction {}", p / dp);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn exact_for_polynomials_up_to_degree_2n_minus_1(
            n in 1usize..25,
            a in -3.0f64..0.0,
            len in 0.1f64..4.0,
            coeffs in proptest::collection::vec(-1.0f64..1.0, 50),
        ) {
            let b = a + len;
            let degree = 2 * n - 1;
            let c = &coeffs[..=degree];
            let rule = gauss_legendre(a, b, n).unwrap();
            let approx = rule.integrate(|x| c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci));
            // exact antiderivative
            let anti = |x: f64| {
                c.iter()
                    .enumerate()
                    .map(|(k, &ck)| ck * x.powi(k as i32 + 1) / (k as f64 + 1.0))
                    .sum::<f64>()
            };
            let exact = anti(b) - anti(a);
            let scale = c.iter().enumerate().map(|(k, ck)| ck.abs() * a.abs().max(b.abs()).powi(k as i32 + 1) / (k as f64 + 1.0)).sum::<f64>().max(1.0);
            prop_assert!((approx - exact).abs() <= 1e-12 * scale, "n={} approx={} exact={}", n, approx, exact);
        }
    }
}
