//! Retarded interaction with a three-dimensional wave field: delay kernel,
//! effective forcing amplitude and the resulting forcing term.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitBall, UnitSphere};
use std::f64::consts::PI;

/// Length of the delay window; the kernel vanishes beyond it.
pub const DELAY: f64 = 2.0;

/// Monomial coefficients of the kernel, `P(s) = sum c[j] s^j`.
pub const KERNEL_COEFFS: [f64; 5] = [0.0, 4.0 * PI / 3.0, -PI, 0.0, PI / 12.0];

/// Self-interaction kernel `P(s) = (pi/12)(16 - 12 s + s^3) s` on `[0, 2]`.
pub fn kernel_p(s: f64) -> Result<f64> {
    if !(0.0..=DELAY).contains(&s) {
        return Err(Error::Domain(format!("kernel argument {s} outside [0, 2]")));
    }
    Ok(kernel_eval(s))
}

#[inline]
pub(crate) fn kernel_eval(s: f64) -> f64 {
    PI / 12.0 * s * (16.0 + s * (-12.0 + s * s))
}

/// `int_0^2 P(s) ds`.
pub fn kernel_mass() -> f64 {
    8.0 * PI / 15.0
}

/// `int_0^2 s P(s) ds`.
pub fn kernel_first_moment() -> f64 {
    4.0 * PI / 9.0
}

/// Partial masses `int_0^d P` and `int_0^d s P`.
#[inline]
pub(crate) fn kernel_partial(d: f64) -> (f64, f64) {
    let d2 = d * d;
    let m0 = PI / 12.0 * d2 * (8.0 - 4.0 * d + 0.2 * d2 * d);
    let m1 = PI / 12.0 * d2 * d * (16.0 / 3.0 - 3.0 * d + d2 * d / 6.0);
    (m0, m1)
}

/// Monte Carlo estimate of `P(s)` as `(4 pi / 3) s Pr(|x - s n| <= 1)` with `x`
/// uniform in the unit ball and `n` uniform on the unit sphere.
/// Returns the estimate and its standard error.
pub fn kernel_oracle_mc(s: f64, samples: usize, seed: u64) -> Result<(f64, f64)> {
    if !(0.0..=DELAY).contains(&s) {
        return Err(Error::Domain(format!("kernel argument {s} outside [0, 2]")));
    }
    if samples < 2 {
        return Err(Error::InsufficientData("need at least two samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..samples {
        let x: [f64; 3] = UnitBall.sample(&mut rng);
        let n: [f64; 3] = UnitSphere.sample(&mut rng);
        let d2 = (0..3).map(|i| (x[i] - s * n[i]).powi(2)).sum::<f64>();
        if d2 <= 1.0 {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    let scale = 4.0 * PI / 3.0 * s;
    let se = scale * (p * (1.0 - p) / (samples as f64 - 1.0)).sqrt();
    Ok((scale * p, se))
}

/// `C(omega) = int_{|y| <= 1} cos(omega y_1) dy`.
pub fn ball_cosine_integral(omega: f64) -> f64 {
    let w = omega.abs();
    if w < 1e-3 {
        let w2 = w * w;
        4.0 * PI * (1.0 / 3.0 - w2 / 30.0 + w2 * w2 / 840.0)
    } else {
        4.0 * PI * (w.sin() - w * w.cos()) / (w * w * w)
    }
}

/// `C(omega)` by Gauss quadrature over spherical shells in `(r, cos(angle))`.
pub fn ball_cosine_shells(omega: f64, nodes: usize) -> f64 {
    let (x, w) = crate::quad::gauss_legendre(nodes);
    let mut acc = 0.0;
    for (xr, wr) in x.iter().zip(&w) {
        let r = 0.5 * (xr + 1.0);
        let mut shell = 0.0;
        for (xm, wm) in x.iter().zip(&w) {
            shell += wm * (omega * r * xm).cos();
        }
        acc += 0.5 * wr * r * r * shell;
    }
    2.0 * PI * acc
}

/// `n`-th positive zero of `C`, i.e. the `n`-th positive root of `tan w = w`.
pub fn ball_cosine_zero(n: usize) -> f64 {
    assert!(n >= 1);
    // root of g(w) = sin w - w cos w in (n pi, n pi + pi/2)
    let g = |w: f64| w.sin() - w * w.cos();
    let (mut lo, mut hi) = (n as f64 * PI + 1e-9, n as f64 * PI + PI / 2.0 - 1e-9);
    let glo = g(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (g(mid) > 0.0) == (glo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Effective forcing amplitude for one spectral line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AOmega {
    pub value: f64,
    /// Set when `|A| < 1e-12`: the pumping mechanism is inactive.
    pub degenerate: bool,
}

/// `A = K alpha0 4 pi omega^2 C(omega)`.
pub fn compute_a_omega(k_amp: f64, alpha0: f64, omega: f64) -> AOmega {
    let value = k_amp * alpha0 * 4.0 * PI * omega * omega * ball_cosine_integral(omega);
    AOmega { value, degenerate: value.abs() < 1e-12 }
}

/// Leading-order force exerted by the incident wave on the oscillator.
#[inline]
pub fn forcing_term(eps: f64, a_omega: f64, grad_k: [f64; 2], theta: f64) -> [f64; 2] {
    let c = -eps * a_omega * theta.sin();
    [c * grad_k[0], c * grad_k[1]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert!((kernel_p(1.0).unwrap() - 5.0 * PI / 12.0).abs() < 1e-15);
        assert_eq!(kernel_p(0.0).unwrap(), 0.0);
        assert!(kernel_p(2.0).unwrap().abs() < 1e-14);
        assert!(kernel_p(2.5).is_err());
        assert!(kernel_p(-0.1).is_err());
    }

    #[test]
    fn partial_masses_reach_totals() {
        let (m0, m1) = kernel_partial(2.0);
        assert!((m0 - kernel_mass()).abs() < 1e-14);
        assert!((m1 - kernel_first_moment()).abs() < 1e-14);
    }

    #[test]
    fn coefficients_match_closed_form() {
        for &s in &[0.1f64, 0.7, 1.3, 1.9] {
            let poly: f64 = KERNEL_COEFFS.iter().enumerate().map(|(j, c)| c * s.powi(j as i32)).sum();
            assert!((poly - kernel_eval(s)).abs() < 1e-14);
        }
    }

    #[test]
    fn cosine_integral_special_values() {
        assert!((ball_cosine_integral(PI) - 4.0 / PI).abs() < 1e-14);
        assert!((ball_cosine_integral(0.0) - 4.0 * PI / 3.0).abs() < 1e-15);
        let a = ball_cosine_integral(0.999e-3);
        let b = ball_cosine_integral(1.001e-3);
        assert!((a - b).abs() < 1e-9);
        let z = ball_cosine_zero(1);
        assert!((z - 4.493409457909064).abs() < 1e-10);
        assert!(compute_a_omega(1.0, 1.0, z).degenerate);
    }

    #[test]
    fn forcing_sign() {
        let f = forcing_term(1e-3, 2.0, [1.0, 0.0], PI / 2.0);
        assert!((f[0] + 2e-3).abs() < 1e-18);
        assert_eq!(f[1], 0.0);
    }
}
