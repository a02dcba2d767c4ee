//! Fixed-step classical Runge–Kutta integration.

use crate::error::{Error, Result};

/// One classical RK4 step of size `h` (negative `h` integrates backward).
pub fn rk4_step<F>(f: &F, s: f64, y: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    f(s, y, &mut k1);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    f(s + 0.5 * h, &tmp, &mut k2);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    f(s + 0.5 * h, &tmp, &mut k3);
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    f(s + h, &tmp, &mut k4);
    (0..n)
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Number of equal substeps of size at most `max_step` covering `gap`.
pub fn substeps(gap: f64, max_step: f64) -> usize {
    ((gap.abs() / max_step) * (1.0 - 1e-12)).ceil().max(1.0) as usize
}

/// Integrates `y' = f(s, y)` from `(s0, y0)` through the monotone sample
/// points `samples` (all on the same side of `s0`), returning the state at
/// each sample. Each gap is covered by equal steps no larger than
/// `max_step`; local error is O(step^5), global O(step^4).
pub fn integrate_ode<F>(
    f: F,
    y0: &[f64],
    s0: f64,
    samples: &[f64],
    max_step: f64,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    if !(max_step > 0.0) || !max_step.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive and finite, got {max_step}"
        )));
    }
    let direction = samples
        .iter()
        .find(|&&s| s != s0)
        .map(|&s| (s - s0).signum())
        .unwrap_or(1.0);
    let mut prev = s0;
    for &s in samples {
        if (s - prev) * direction < 0.0 || !s.is_finite() {
            return Err(Error::InvalidArgument(
                "sample points must be finite and monotone away from s0".into(),
            ));
        }
        prev = s;
    }

    let mut out = Vec::with_capacity(samples.len());
    let mut y = y0.to_vec();
    let mut s = s0;
    for &target in samples {
        let gap = target - s;
        if gap != 0.0 {
            let m = substeps(gap, max_step);
            let h = gap / m as f64;
            for i in 0..m {
                let si = s + i as f64 * h;
                y = rk4_step(&f, si, &y, h);
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::IntegrationDiverged { at: si + h });
                }
            }
            s = target;
        }
        out.push(y.clone());
    }
    Ok(out)
}
