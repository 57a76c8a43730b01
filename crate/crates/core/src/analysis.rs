//! Observables, condensed-mode extraction, and purity-revival analysis.
//!
//! The revival machinery integrates the moment hierarchy from a pure
//! initial state, detects purity extrema, measures the revival strength
//! of each minimum-to-maximum pair, and applies the reliability rule:
//! the hierarchy is trusted up to the last maximum at which the revival
//! strength still grows.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::bbr::{self, integrate_bbr_with, BbrOpts, BlochMoments, CovarianceMode};
use crate::error::{Error, Result};
use crate::optim::{nelder_mead_2d, NelderMeadOpts};
use crate::params::SystemParams;

/// Purity, average interference contrast, and squared number imbalance.
/// The three satisfy `nu^2 = P - I` identically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observables {
    pub purity: f64,
    pub contrast: f64,
    pub imbalance: f64,
}

pub fn observables(m: &BlochMoments) -> Result<Observables> {
    if !(m.n > 0.0) {
        return Err(Error::UndefinedObservable(format!(
            "observables need n > 0, got n = {}",
            m.n
        )));
    }
    let n2 = m.n * m.n;
    Ok(Observables {
        purity: (m.sx * m.sx + m.sy * m.sy + m.sz * m.sz) / n2,
        contrast: (m.sx * m.sx + m.sy * m.sy).sqrt() / m.n,
        imbalance: (m.sz * m.sz) / n2,
    })
}

pub fn purity(m: &BlochMoments) -> f64 {
    (m.sx * m.sx + m.sy * m.sy + m.sz * m.sz) / (m.n * m.n)
}

/// Reduced single-particle density matrix (trace one) from Bloch moments.
pub fn sigma_red_from_moments(m: &BlochMoments) -> [[Complex64; 2]; 2] {
    let n = m.n;
    let s11 = Complex64::new(0.5 * (n - m.sz) / n, 0.0);
    let s22 = Complex64::new(0.5 * (n + m.sz) / n, 0.0);
    let s12 = Complex64::new(0.5 * m.sx / n, -0.5 * m.sy / n);
    [[s11, s12], [s12.conj(), s22]]
}

/// Eigendecomposition of the transposed reduced single-particle density
/// matrix. The eigenvalues satisfy `lambda_{1,2} = (1 +- sqrt(P))/2`; the
/// eigenvector of the larger one is the condensed mode, phase-fixed so
/// its second component is real nonnegative. The mode is undefined at
/// the fully fragmented point P = 0.
#[derive(Debug, Clone, Copy)]
pub struct SpdmEigen {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mode: Option<[Complex64; 2]>,
}

pub fn spdm_eigen(sigma_red: [[Complex64; 2]; 2]) -> Result<SpdmEigen> {
    let tr = (sigma_red[0][0] + sigma_red[1][1]).re;
    if (tr - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidParameter(format!(
            "reduced matrix must have unit trace, got {tr}"
        )));
    }
    if (sigma_red[0][1] - sigma_red[1][0].conj()).norm() > 1e-8 {
        return Err(Error::InvalidParameter(
            "reduced matrix must be Hermitian".into(),
        ));
    }
    // Work with the transpose: t = [[a, b*], [b, d]] for b = sigma_12.
    let a = sigma_red[0][0].re;
    let d = sigma_red[1][1].re;
    let b = sigma_red[0][1];
    let gap = ((a - d).powi(2) + 4.0 * b.norm_sqr()).sqrt();
    let lambda1 = 0.5 * (tr + gap);
    let lambda2 = 0.5 * (tr - gap);
    if gap < 1e-12 {
        return Ok(SpdmEigen {
            lambda1,
            lambda2,
            mode: None,
        });
    }
    // Eigenvector of the transpose for lambda1; two algebraic forms,
    // pick the better conditioned one.
    let v_a = [Complex64::new(lambda1 - d, 0.0), b];
    let v_b = [b.conj(), Complex64::new(lambda1 - a, 0.0)];
    let na = v_a[0].norm_sqr() + v_a[1].norm_sqr();
    let nb = v_b[0].norm_sqr() + v_b[1].norm_sqr();
    let mut v = if na >= nb { v_a } else { v_b };
    let norm = (v[0].norm_sqr() + v[1].norm_sqr()).sqrt();
    v[0] /= norm;
    v[1] /= norm;
    // Global phase: second component real nonnegative.
    if v[1].norm() > 1e-14 {
        let phase = v[1] / v[1].norm();
        v[0] *= phase.conj();
        v[1] = Complex64::new(v[1].norm(), 0.0);
    } else {
        let phase = v[0] / v[0].norm();
        v[0] = Complex64::new(v[0].norm(), 0.0);
        v[1] *= phase.conj();
    }
    Ok(SpdmEigen {
        lambda1,
        lambda2,
        mode: Some(v),
    })
}

// ---------------------------------------------------------------------------
// Revival detection.
// ---------------------------------------------------------------------------

/// Extrema of a purity time series with revival strengths and the
/// reliability cutoff.
#[derive(Debug, Clone, Default)]
pub struct RevivalReport {
    pub minima: Vec<(f64, f64)>,
    pub maxima: Vec<(f64, f64)>,
    /// `delta_p[i] = P_max,i - P_min,i` for consecutive min-max pairs.
    pub strengths: Vec<f64>,
    /// Index of the last pair whose strength still grew; beyond it the
    /// closure's artificial beating is in charge.
    pub reliability_index: Option<usize>,
    /// Strongest revival within the reliability window and its time.
    pub strongest: f64,
    pub t_strongest: f64,
}

/// Quadratic refinement of an extremum through three samples.
fn refine_extremum(t: [f64; 3], p: [f64; 3]) -> (f64, f64) {
    // Lagrange parabola vertex; falls back to the middle sample when
    // the curvature vanishes.
    let (t0, t1, t2) = (t[0], t[1], t[2]);
    let (p0, p1, p2) = (p[0], p[1], p[2]);
    let d01 = (p1 - p0) / (t1 - t0);
    let d12 = (p2 - p1) / (t2 - t1);
    let curv = (d12 - d01) / (t2 - t0);
    if curv.abs() < 1e-300 {
        return (t1, p1);
    }
    let tv = 0.5 * (t0 + t1 - d01 / curv);
    let tv = tv.clamp(t0, t2);
    // Evaluate the parabola at the vertex.
    let pv = p0 + d01 * (tv - t0) + curv * (tv - t0) * (tv - t1);
    (tv, pv)
}

pub fn revival_analysis(t: &[f64], p: &[f64]) -> RevivalReport {
    assert_eq!(t.len(), p.len());
    let mut report = RevivalReport::default();
    if t.len() < 3 {
        return report;
    }
    #[derive(Clone, Copy, PartialEq)]
    enum Kind {
        Min,
        Max,
    }
    let mut extrema: Vec<(Kind, f64, f64)> = Vec::new();
    for i in 1..t.len() - 1 {
        let d1 = p[i] - p[i - 1];
        let d2 = p[i + 1] - p[i];
        let kind = if d1 < 0.0 && d2 >= 0.0 {
            Some(Kind::Min)
        } else if d1 > 0.0 && d2 <= 0.0 {
            Some(Kind::Max)
        } else {
            None
        };
        if let Some(kind) = kind {
            let (tv, pv) = refine_extremum(
                [t[i - 1], t[i], t[i + 1]],
                [p[i - 1], p[i], p[i + 1]],
            );
            extrema.push((kind, tv, pv));
        }
    }
    let mut last_min: Option<(f64, f64)> = None;
    let mut pair_times = Vec::new();
    for &(kind, tv, pv) in &extrema {
        match kind {
            Kind::Min => {
                report.minima.push((tv, pv));
                last_min = Some((tv, pv));
            }
            Kind::Max => {
                report.maxima.push((tv, pv));
                if let Some((_, p_min)) = last_min.take() {
                    report.strengths.push(pv - p_min);
                    pair_times.push(tv);
                }
            }
        }
    }
    if report.strengths.is_empty() {
        return report;
    }
    // First strict decrease marks the end of the trustworthy window.
    let mut cut = report.strengths.len() - 1;
    for i in 1..report.strengths.len() {
        if report.strengths[i] < report.strengths[i - 1] * (1.0 - 1e-9) - 1e-12 {
            cut = i - 1;
            break;
        }
    }
    report.reliability_index = Some(cut);
    let mut best = 0;
    for i in 0..=cut {
        if report.strengths[i] > report.strengths[best] {
            best = i;
        }
    }
    report.strongest = report.strengths[best];
    report.t_strongest = pair_times[best];
    report
}

// ---------------------------------------------------------------------------
// Strongest revival from a pure initial state.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct RevivalOpts {
    /// Purity samples per oscillation period `2 pi / omega`.
    pub samples_per_period: usize,
    /// Integration cap in units of the envelope time `1/gamma_minus`.
    pub max_envelope_times: f64,
    /// Give up on near-stationary states once `this many` envelope times
    /// passed with every strength below `zero_threshold`.
    pub quiet_envelope_times: f64,
    /// Strengths below this are reported as zero.
    pub zero_threshold: f64,
    pub rtol: f64,
    pub divergence_factor: f64,
}

impl Default for RevivalOpts {
    fn default() -> Self {
        Self {
            samples_per_period: 48,
            max_envelope_times: 8.0,
            quiet_envelope_times: 4.0,
            zero_threshold: 1e-3,
            rtol: 1e-9,
            divergence_factor: 1e4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RevivalOutcome {
    pub delta_p: f64,
    pub t_star: f64,
    pub stable: bool,
    pub report: RevivalReport,
}

/// Integrate the hierarchy from the pure state `(phi, theta)` until the
/// revival strengths pass their peak (or the caps fire) and report the
/// strongest revival within the reliability window. Unstable
/// trajectories are excluded with `delta_p = 0`.
pub fn strongest_revival(
    params: &SystemParams,
    phi: f64,
    theta: f64,
    opts: &RevivalOpts,
) -> RevivalOutcome {
    let (phi, theta) = canonical_angles(phi, theta);
    let n0 = params.n0;
    let gm = params.gamma_minus();
    if params.gamma_loss == 0.0 && params.gamma_gain == 0.0 {
        // Closed system: the purity of the hierarchy state is constant.
        return RevivalOutcome {
            delta_p: 0.0,
            t_star: 0.0,
            stable: true,
            report: RevivalReport::default(),
        };
    }
    let envelope_time = if gm > 1e-12 { 1.0 / gm } else { 50.0 / params.j };
    let period = match params.omega() {
        Some(w) => std::f64::consts::TAU / w,
        None => std::f64::consts::PI / params.j.max(1e-6),
    };
    let dt = period / opts.samples_per_period as f64;
    let chunk_steps = ((0.5 * envelope_time / dt).ceil() as usize).clamp(64, 2_000_000);
    let bbr_opts = BbrOpts {
        rtol: opts.rtol,
        atol_scale: 1e-9,
        divergence_factor: opts.divergence_factor,
    };

    let mut s = bbr::pure_state_moments(phi, theta, n0);
    let mut c = bbr::pure_state_covariances(phi, theta, n0);
    let mut t0 = 0.0;
    let mut t_all = vec![0.0];
    let mut p_all = vec![purity(&s)];
    let t_cap = opts.max_envelope_times * envelope_time;
    let quiet_cap = opts.quiet_envelope_times * envelope_time;

    loop {
        let t_grid: Vec<f64> = (0..=chunk_steps).map(|i| t0 + i as f64 * dt).collect();
        let series = match integrate_bbr_with(
            (s, c),
            &t_grid,
            params,
            CovarianceMode::Full,
            &bbr_opts,
        ) {
            Ok(series) => series,
            Err(_) => {
                // Stiffness or step failure inside the chunk: treat like
                // a diverging trajectory and exclude it.
                return RevivalOutcome {
                    delta_p: 0.0,
                    t_star: 0.0,
                    stable: false,
                    report: RevivalReport::default(),
                };
            }
        };
        for (k, m) in series.moments.iter().enumerate().skip(1) {
            t_all.push(series.t[k]);
            p_all.push(purity(m));
        }
        if !series.stable {
            return RevivalOutcome {
                delta_p: 0.0,
                t_star: 0.0,
                stable: false,
                report: revival_analysis(&t_all, &p_all),
            };
        }
        let report = revival_analysis(&t_all, &p_all);
        let have_decrease = report
            .reliability_index
            .map(|i| i + 1 < report.strengths.len())
            .unwrap_or(false);
        let t_now = *t_all.last().unwrap();
        let quiet = report.strengths.iter().all(|&d| d < opts.zero_threshold);
        if have_decrease || t_now >= t_cap || (quiet && t_now >= quiet_cap) {
            let mut delta_p = report.strongest;
            if delta_p < opts.zero_threshold {
                delta_p = 0.0;
            }
            return RevivalOutcome {
                delta_p,
                t_star: report.t_strongest,
                stable: true,
                report,
            };
        }
        s = *series.moments.last().unwrap();
        c = *series.covariances.last().unwrap();
        t0 = t_now;
    }
}

/// Map angles onto the fundamental Bloch-sphere domain
/// `phi in [0, 2 pi)`, `theta in [0, pi]`.
pub fn canonical_angles(phi: f64, theta: f64) -> (f64, f64) {
    let mut theta = theta.rem_euclid(std::f64::consts::TAU);
    let mut phi = phi;
    if theta > std::f64::consts::PI {
        theta = std::f64::consts::TAU - theta;
        phi += std::f64::consts::PI;
    }
    (phi.rem_euclid(std::f64::consts::TAU), theta)
}

// ---------------------------------------------------------------------------
// Revival maps and maximization.
// ---------------------------------------------------------------------------

/// Strongest-revival map over a grid of pure initial states.
#[derive(Debug, Clone)]
pub struct RevivalMap {
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
    /// Row-major `[phi_index][theta_index]`.
    pub delta_p: Vec<f64>,
    pub t_star: Vec<f64>,
    pub stable: Vec<bool>,
}

/// Cell-centre grids over `[0, 2 pi) x (0, pi)`.
pub fn map_grid(n_phi: usize, n_theta: usize) -> (Vec<f64>, Vec<f64>) {
    let phi = (0..n_phi)
        .map(|i| (i as f64 + 0.5) * std::f64::consts::TAU / n_phi as f64)
        .collect();
    let theta = (0..n_theta)
        .map(|j| (j as f64 + 0.5) * std::f64::consts::PI / n_theta as f64)
        .collect();
    (phi, theta)
}

pub fn revival_map(
    params: &SystemParams,
    n_phi: usize,
    n_theta: usize,
    opts: &RevivalOpts,
) -> RevivalMap {
    let (phi, theta) = map_grid(n_phi, n_theta);
    let cells: Vec<(f64, f64, bool)> = (0..n_phi * n_theta)
        .into_par_iter()
        .map(|idx| {
            let i = idx / n_theta;
            let j = idx % n_theta;
            let out = strongest_revival(params, phi[i], theta[j], opts);
            (out.delta_p, out.t_star, out.stable)
        })
        .collect();
    RevivalMap {
        phi,
        theta,
        delta_p: cells.iter().map(|c| c.0).collect(),
        t_star: cells.iter().map(|c| c.1).collect(),
        stable: cells.iter().map(|c| c.2).collect(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RevivalOptimum {
    pub phi: f64,
    pub theta: f64,
    pub delta_p: f64,
    pub t_star: f64,
    /// Central-difference gradient norm of `Delta P` at the optimum.
    pub grad_norm: f64,
}

/// Maximize the strongest revival over the initial state by multistart
/// simplex descent seeded from the best cells of a coarse map.
pub fn maximize_revival(
    params: &SystemParams,
    multistart: usize,
    opts: &RevivalOpts,
) -> Result<RevivalOptimum> {
    let coarse_n = 16;
    let coarse = revival_map(params, coarse_n, coarse_n, opts);
    let mut cells: Vec<(usize, f64)> = coarse
        .delta_p
        .iter()
        .enumerate()
        .filter(|&(i, _)| coarse.stable[i])
        .map(|(i, &d)| (i, d))
        .collect();
    // Deterministic order: strength descending, index ascending.
    cells.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    if cells.is_empty() || cells[0].1 <= 0.0 {
        return Err(Error::NoStableOptimum);
    }
    let starts: Vec<[f64; 2]> = cells
        .iter()
        .take(multistart.max(1))
        .map(|&(i, _)| [coarse.phi[i / coarse_n], coarse.theta[i % coarse_n]])
        .collect();

    let objective = |x: [f64; 2]| {
        let out = strongest_revival(params, x[0], x[1], opts);
        if out.stable {
            -out.delta_p
        } else {
            0.0
        }
    };
    let nm_opts = NelderMeadOpts {
        max_iter: 300,
        x_tol: 1e-6,
        f_tol: 1e-10,
        scale: std::f64::consts::PI / coarse_n as f64,
    };
    let results: Vec<_> = starts
        .par_iter()
        .map(|&x0| nelder_mead_2d(objective, x0, &nm_opts))
        .collect();
    let best = results
        .iter()
        .min_by(|a, b| a.f.partial_cmp(&b.f).unwrap())
        .ok_or(Error::NoStableOptimum)?;
    if best.f >= 0.0 {
        return Err(Error::NoStableOptimum);
    }
    let (phi, theta) = canonical_angles(best.x[0], best.x[1]);
    let out = strongest_revival(params, phi, theta, opts);

    // First-order condition by central differences.
    let h = 1e-3;
    let dp = |x: [f64; 2]| strongest_revival(params, x[0], x[1], opts).delta_p;
    let gx = (dp([phi + h, theta]) - dp([phi - h, theta])) / (2.0 * h);
    let gy = (dp([phi, theta + h]) - dp([phi, theta - h])) / (2.0 * h);

    Ok(RevivalOptimum {
        phi,
        theta,
        delta_p: out.delta_p,
        t_star: out.t_star,
        grad_norm: gx.hypot(gy),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn observable_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = rng.gen_range(1.0..500.0);
            // Random moments with |s| <= n.
            let frac: f64 = rng.gen_range(0.0..1.0);
            let dir: [f64; 3] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let norm = (dir.iter().map(|x| x * x).sum::<f64>()).sqrt().max(1e-9);
            let m = BlochMoments {
                sx: n * frac * dir[0] / norm,
                sy: n * frac * dir[1] / norm,
                sz: n * frac * dir[2] / norm,
                n,
            };
            let o = observables(&m).unwrap();
            assert_relative_eq!(
                o.contrast * o.contrast,
                o.purity - o.imbalance,
                epsilon = 1e-12
            );
            assert!(o.purity <= 1.0 + 1e-9 && o.purity >= 0.0);
            // Eigenvalues carry the same information as the purity.
            let eig = spdm_eigen(sigma_red_from_moments(&m)).unwrap();
            assert_relative_eq!(
                eig.lambda1,
                0.5 * (1.0 + o.purity.sqrt()),
                epsilon = 1e-10
            );
            assert_relative_eq!(
                eig.lambda2,
                0.5 * (1.0 - o.purity.sqrt()),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn observable_corner_cases() {
        let pure = BlochMoments {
            sx: 0.0,
            sy: 0.0,
            sz: 7.0,
            n: 7.0,
        };
        let o = observables(&pure).unwrap();
        assert_relative_eq!(o.purity, 1.0, epsilon = 1e-14);
        assert_relative_eq!(o.imbalance, 1.0, epsilon = 1e-14);
        assert!(o.contrast.abs() < 1e-12);

        let mixed = BlochMoments {
            sx: 0.0,
            sy: 0.0,
            sz: 0.0,
            n: 3.0,
        };
        let o = observables(&mixed).unwrap();
        assert_eq!(o.purity, 0.0);
        assert_eq!(o.contrast, 0.0);
        assert_eq!(o.imbalance, 0.0);

        assert!(observables(&BlochMoments {
            sx: 0.0,
            sy: 0.0,
            sz: 0.0,
            n: 0.0
        })
        .is_err());
    }

    #[test]
    fn spdm_eigen_degenerate_and_pure() {
        // Maximally mixed: eigenvalues 1/2, mode undefined.
        let half = Complex64::new(0.5, 0.0);
        let zero = Complex64::default();
        let eig = spdm_eigen([[half, zero], [zero, half]]).unwrap();
        assert_relative_eq!(eig.lambda1, 0.5, epsilon = 1e-14);
        assert!(eig.mode.is_none());

        // Pure state: mode reproduces the state itself.
        let c1 = Complex64::from_polar(0.6, 1.1);
        let c2 = Complex64::new(0.8, 0.0);
        let sigma = [[c1 * c1.conj(), c1.conj() * c2], [c2.conj() * c1, c2 * c2.conj()]];
        let eig = spdm_eigen(sigma).unwrap();
        assert_relative_eq!(eig.lambda1, 1.0, epsilon = 1e-12);
        let mode = eig.mode.unwrap();
        assert!((mode[0] - c1).norm() < 1e-10, "{:?}", mode);
        assert!((mode[1] - c2).norm() < 1e-10);
    }

    #[test]
    fn revival_analysis_on_synthetic_series() {
        // Smooth envelope that ramps up and then decays: the reliability
        // cutoff must sit at the last growing revival.
        let envelope = |t: f64| 0.06 * t * (1.0 - t / 5.0).exp();
        let series_p = |t: f64| 0.5 - envelope(t) * (std::f64::consts::TAU * t).cos();
        let t: Vec<f64> = (0..=(14 * 64)).map(|i| i as f64 / 64.0).collect();
        let p: Vec<f64> = t.iter().map(|&t| series_p(t)).collect();
        let report = revival_analysis(&t, &p);
        assert!(report.strengths.len() >= 8, "{:?}", report.strengths);

        // Independent expectation: minima sit near integer times, maxima
        // near half-integers, so pair k has strength about
        // A(k) + A(k + 1/2); apply the same first-decrease rule to those.
        let expected: Vec<f64> = (0..13)
            .map(|k| envelope(k as f64) + envelope(k as f64 + 0.5))
            .collect();
        let mut expected_cut = expected.len() - 1;
        for i in 1..expected.len() {
            if expected[i] < expected[i - 1] {
                expected_cut = i - 1;
                break;
            }
        }
        let cut = report.reliability_index.unwrap();
        assert_eq!(cut, expected_cut, "strengths: {:?}", report.strengths);
        assert_relative_eq!(report.strongest, expected[expected_cut], epsilon = 1e-3);
        assert_relative_eq!(
            report.t_strongest,
            expected_cut as f64 + 0.5,
            epsilon = 0.05
        );
    }

    #[test]
    fn monotone_series_has_no_revivals() {
        let t: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let p: Vec<f64> = t.iter().map(|&t| (-0.3 * t).exp()).collect();
        let report = revival_analysis(&t, &p);
        assert!(report.strengths.is_empty());
        assert_eq!(report.strongest, 0.0);
    }

    #[test]
    fn refinement_is_stable_under_resampling() {
        // Doubling the sampling density moves the strongest revival by
        // very little.
        let p = SystemParams::balanced(1.0, 0.0, 60, 1.2).unwrap();
        let coarse = strongest_revival(&p, 1.3, 1.9, &RevivalOpts::default());
        let fine = strongest_revival(
            &p,
            1.3,
            1.9,
            &RevivalOpts {
                samples_per_period: 96,
                ..Default::default()
            },
        );
        assert!(coarse.stable && fine.stable);
        assert!(
            (coarse.delta_p - fine.delta_p).abs() <= 1e-3,
            "coarse {} fine {}",
            coarse.delta_p,
            fine.delta_p
        );
    }

    #[test]
    fn canonical_angle_wrapping() {
        let (phi, theta) = canonical_angles(-0.3, 3.5);
        assert!(phi >= 0.0 && phi < std::f64::consts::TAU);
        assert!(theta >= 0.0 && theta <= std::f64::consts::PI);
        // Wrapped angles describe the same Bloch vector.
        let m1 = bbr::pure_state_moments(-0.3, 3.5, 10);
        let m2 = bbr::pure_state_moments(phi, theta, 10);
        assert_relative_eq!(m1.sx, m2.sx, epsilon = 1e-9);
        assert_relative_eq!(m1.sy, m2.sy, epsilon = 1e-9);
        assert_relative_eq!(m1.sz, m2.sz, epsilon = 1e-9);
    }
}
