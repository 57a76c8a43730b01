//! Closed-form solution of the non-interacting limit (`U = 0`), where the
//! first-order moments obey a linear system with constant coefficients.
//!
//! In the oscillatory regime `4 J^2 > gamma_plus^2` the solution is a
//! damped rotation at `omega = sqrt(4 J^2 - gamma_plus^2)` around the
//! steady state, parametrized by four real constants `kappa_i` fixed by
//! the initial moments. Purity envelopes follow by pinning the
//! oscillatory phase at its extremes.

use crate::bbr::BlochMoments;
use crate::error::{Error, Result};
use crate::params::SystemParams;

/// The four constants that select a particular solution of the linear
/// system; `kappa3 >= 0` and `kappa4` lies in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaParams {
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub kappa4: f64,
}

/// Attracting fixed point of the linear system in `(s_x, s_y, s_z, n)`
/// order; the `s_x` component always vanishes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyState {
    pub alpha: [f64; 4],
}

fn omega_checked(p: &SystemParams) -> Result<f64> {
    p.omega().ok_or_else(|| {
        Error::UnsupportedRegime(format!(
            "4J^2 = {} does not exceed gamma_plus^2 = {}; only the oscillatory branch is supported",
            4.0 * p.j * p.j,
            p.gamma_plus().powi(2)
        ))
    })
}

/// Steady state of the linear system. The closed system
/// (`gamma_loss = gamma_gain = 0`) is handled as the special case
/// `alpha = 0`; any other configuration with `gamma_minus <= 0` has no
/// attractor and is rejected.
pub fn steady_state(p: &SystemParams) -> Result<SteadyState> {
    if p.gamma_loss == 0.0 && p.gamma_gain == 0.0 {
        return Ok(SteadyState { alpha: [0.0; 4] });
    }
    let gm = p.gamma_minus();
    let gp = p.gamma_plus();
    if gm <= 0.0 {
        return Err(Error::NoSteadyState);
    }
    let denom = 4.0 * p.j * p.j - gp * gp + gm * gm;
    if denom.abs() < 1e-14 {
        return Err(Error::InvalidParameter(
            "steady-state denominator 4J^2 - gamma_plus^2 + gamma_minus^2 vanishes".into(),
        ));
    }
    let c = (gp * gp - gm * gm) / denom;
    Ok(SteadyState {
        alpha: [
            0.0,
            c * 2.0 * p.j / gm,
            c,
            c * (1.0 + 4.0 * p.j * p.j / (gm * (gp + gm))),
        ],
    })
}

/// Invert the oscillatory solution at `t = 0` for the constants
/// `kappa_i` that reproduce the given initial moments.
pub fn solve_kappas(initial: &BlochMoments, p: &SystemParams) -> Result<KappaParams> {
    let omega = omega_checked(p)?;
    let alpha = steady_state(p)?.alpha;
    let gp = p.gamma_plus();
    let two_j = 2.0 * p.j;

    let kappa1 = initial.sx;
    let v = (initial.sz - alpha[2]) / omega;
    let rhs_y = initial.sy - alpha[1];
    let rhs_n = initial.n - alpha[3];
    // gamma_plus kappa2 + 2J u = rhs_y;  2J kappa2 + gamma_plus u = rhs_n.
    // The determinant is gamma_plus^2 - 4J^2 = -omega^2, nonzero in-regime.
    let det = gp * gp - two_j * two_j;
    let kappa2 = (gp * rhs_y - two_j * rhs_n) / det;
    let u = (gp * rhs_n - two_j * rhs_y) / det;
    let kappa3 = u.hypot(v);
    let mut kappa4 = if kappa3 > 0.0 { v.atan2(u) } else { 0.0 };
    if kappa4 <= -std::f64::consts::PI {
        kappa4 += std::f64::consts::TAU;
    }
    Ok(KappaParams {
        kappa1,
        kappa2,
        kappa3,
        kappa4,
    })
}

/// Evaluate the oscillatory solution on a time grid.
pub fn analytic_solution(
    kappa: &KappaParams,
    p: &SystemParams,
    t_grid: &[f64],
) -> Result<Vec<BlochMoments>> {
    let omega = omega_checked(p)?;
    let alpha = steady_state(p)?.alpha;
    let gm = p.gamma_minus();
    let gp = p.gamma_plus();
    let two_j = 2.0 * p.j;
    Ok(t_grid
        .iter()
        .map(|&t| {
            let damp = (-gm * t).exp();
            let phase = omega * t - kappa.kappa4;
            let osc_c = kappa.kappa3 * phase.cos();
            let osc_s = kappa.kappa3 * phase.sin();
            BlochMoments {
                sx: kappa.kappa1 * damp,
                sy: alpha[1] + (gp * kappa.kappa2 + two_j * osc_c) * damp,
                sz: alpha[2] - omega * osc_s * damp,
                n: alpha[3] + (two_j * kappa.kappa2 + gp * osc_c) * damp,
            }
        })
        .collect())
}

/// Lower and upper purity envelopes, obtained by pinning the oscillatory
/// phase at `kappa3 cos(omega t - kappa4) = -|kappa3|` (lower) and
/// `+|kappa3|` (upper) with the sine term zeroed.
pub fn envelopes(
    kappa: &KappaParams,
    p: &SystemParams,
    t_grid: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    omega_checked(p)?;
    let alpha = steady_state(p)?.alpha;
    let gm = p.gamma_minus();
    let gp = p.gamma_plus();
    let two_j = 2.0 * p.j;
    let k3 = kappa.kappa3.abs();
    let mut lower = Vec::with_capacity(t_grid.len());
    let mut upper = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let grow = (gm * t).exp();
        let mut vals = [0.0f64; 2];
        for (slot, sign) in [(-1.0), 1.0].into_iter().enumerate() {
            let num = kappa.kappa1.powi(2)
                + (alpha[1] * grow + gp * kappa.kappa2 + sign * two_j * k3).powi(2)
                + alpha[2].powi(2) * grow * grow;
            let den = (alpha[3] * grow + two_j * kappa.kappa2 + sign * gp * k3).powi(2);
            if den == 0.0 {
                return Err(Error::SingularEnvelope { t });
            }
            vals[slot] = num / den;
        }
        lower.push(vals[0]);
        upper.push(vals[1]);
    }
    Ok((lower, upper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbr::{self, pure_state_moments, CovarianceMode, CovarianceSet};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_system_steady_state_is_origin() {
        let p = SystemParams::with_rates(1.0, 0.0, 5, 0.0, 0.0).unwrap();
        let s = steady_state(&p).unwrap();
        assert_eq!(s.alpha, [0.0; 4]);
    }

    #[test]
    fn zero_gamma_minus_has_no_steady_state() {
        let p = SystemParams::with_rates(1.0, 0.0, 5, 0.4, 0.4).unwrap();
        assert!(matches!(steady_state(&p), Err(Error::NoSteadyState)));
    }

    #[test]
    fn steady_state_is_fixed_point_of_linear_system() {
        for &(n0, gl) in &[(100u64, 1.5), (50, 0.7), (400, 1.9)] {
            let p = SystemParams::balanced(1.0, 0.0, n0, gl).unwrap();
            let a = steady_state(&p).unwrap().alpha;
            let m = BlochMoments {
                sx: a[0],
                sy: a[1],
                sz: a[2],
                n: a[3],
            };
            let (dm, _) = bbr::bloch_derivative(&m, &CovarianceSet::default(), &p);
            let norm = dm
                .as_array()
                .iter()
                .map(|x| x.abs())
                .fold(0.0f64, f64::max);
            assert!(norm <= 1e-12 * n0 as f64, "residual {norm}");
        }
    }

    #[test]
    fn kappa_round_trip_reproduces_initial_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n0 = rng.gen_range(2..=500u64);
            let gl = rng.gen_range(0.05..1.9);
            let p = SystemParams::balanced(1.0, 0.0, n0, gl).unwrap();
            let m0 = pure_state_moments(
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::PI),
                n0,
            );
            let kappa = solve_kappas(&m0, &p).unwrap();
            assert!(kappa.kappa3 >= 0.0);
            assert!(kappa.kappa4 > -std::f64::consts::PI - 1e-15);
            assert!(kappa.kappa4 <= std::f64::consts::PI + 1e-15);
            let m = &analytic_solution(&kappa, &p, &[0.0]).unwrap()[0];
            let scale = n0 as f64;
            assert_relative_eq!(m.sx, m0.sx, epsilon = 1e-12 * scale);
            assert_relative_eq!(m.sy, m0.sy, epsilon = 1e-12 * scale);
            assert_relative_eq!(m.sz, m0.sz, epsilon = 1e-12 * scale);
            assert_relative_eq!(m.n, m0.n, epsilon = 1e-12 * scale);
        }
    }

    #[test]
    fn steady_initial_state_gives_zero_kappas() {
        let p = SystemParams::balanced(1.0, 0.0, 100, 1.2).unwrap();
        let a = steady_state(&p).unwrap().alpha;
        let m0 = BlochMoments {
            sx: a[0],
            sy: a[1],
            sz: a[2],
            n: a[3],
        };
        let kappa = solve_kappas(&m0, &p).unwrap();
        assert!(kappa.kappa1.abs() < 1e-10);
        assert!(kappa.kappa2.abs() < 1e-10);
        assert!(kappa.kappa3 < 1e-10);
        // kappa = 0 makes the solution constant in time.
        let series = analytic_solution(&kappa, &p, &[0.0, 3.0, 17.0]).unwrap();
        for m in &series {
            assert_relative_eq!(m.n, a[3], epsilon = 1e-8);
            assert_relative_eq!(m.sy, a[1], epsilon = 1e-8);
        }
    }

    #[test]
    fn matches_moment_hierarchy_at_zero_interaction() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let t_grid: Vec<f64> = (0..=60).map(|i| i as f64 * 0.25).collect();
        for _ in 0..10 {
            let n0 = rng.gen_range(5..=200u64);
            let gl = rng.gen_range(0.1..1.8);
            let p = SystemParams::balanced(1.0, 0.0, n0, gl).unwrap();
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let m0 = pure_state_moments(phi, theta, n0);
            let c0 = bbr::pure_state_covariances(phi, theta, n0);
            let kappa = solve_kappas(&m0, &p).unwrap();
            let exact = analytic_solution(&kappa, &p, &t_grid).unwrap();
            let series = bbr::integrate_bbr((m0, c0), &t_grid, &p, CovarianceMode::Full).unwrap();
            let tol = 1e-8 * n0 as f64;
            for (a, b) in exact.iter().zip(&series.moments) {
                for (x, y) in a.as_array().iter().zip(b.as_array()) {
                    assert!((x - y).abs() < tol, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn decay_towards_steady_state_at_rate_gamma_minus() {
        let p = SystemParams::balanced(1.0, 0.0, 100, 1.5).unwrap();
        let a = steady_state(&p).unwrap().alpha;
        let m0 = pure_state_moments(1.0, 2.0, 100);
        let kappa = solve_kappas(&m0, &p).unwrap();
        let gm = p.gamma_minus();
        let omega = p.omega().unwrap();
        // Sample the distance to the fixed point one full period apart so
        // the oscillatory phase cancels; window much longer than 2 pi/omega.
        let window = 40.0 * std::f64::consts::TAU / omega;
        let t1 = 10.0;
        let t2 = t1 + window;
        let dist = |t: f64| {
            let m = &analytic_solution(&kappa, &p, &[t]).unwrap()[0];
            let d = [m.sx - a[0], m.sy - a[1], m.sz - a[2], m.n - a[3]];
            d.iter().map(|x| x * x).sum::<f64>().sqrt()
        };
        let ratio = dist(t2) / dist(t1);
        let expected = (-gm * window).exp();
        assert_relative_eq!(ratio, expected, max_relative = 0.01);
    }

    #[test]
    fn envelope_band_collapses_without_oscillation() {
        let p = SystemParams::balanced(1.0, 0.0, 100, 1.2).unwrap();
        let kappa = KappaParams {
            kappa1: 5.0,
            kappa2: -3.0,
            kappa3: 0.0,
            kappa4: 0.0,
        };
        let t: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let (lo, hi) = envelopes(&kappa, &p, &t).unwrap();
        for (l, h) in lo.iter().zip(&hi) {
            assert_relative_eq!(*l, h, epsilon = 1e-14);
        }
    }

    #[test]
    fn small_gain_loss_limit_oscillates_at_two_j() {
        let p = SystemParams::balanced(1.0, 0.0, 100_000, 1e-6).unwrap();
        assert_relative_eq!(p.omega().unwrap(), 2.0, epsilon = 1e-9);
        let m0 = pure_state_moments(0.5, 1.0, 100_000);
        let kappa = solve_kappas(&m0, &p).unwrap();
        // omega ~ 2J = 2, so the period is pi; half a period flips the
        // oscillatory part of s_z.
        let series =
            analytic_solution(&kappa, &p, &[0.0, std::f64::consts::FRAC_PI_2]).unwrap();
        let a = steady_state(&p).unwrap().alpha;
        assert_relative_eq!(
            series[1].sz - a[2],
            -(series[0].sz - a[2]),
            max_relative = 1e-5,
            epsilon = 1e-5 * 100_000.0
        );
    }
}
