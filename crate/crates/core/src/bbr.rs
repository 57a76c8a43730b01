//! Moment hierarchy for the single-particle density matrix and its
//! covariances, closed at third order (Bogoliubov backreaction).
//!
//! Two equivalent formulations are provided: the general M-site equations
//! for `sigma_jk` and the rank-4 covariance tensor, and the two-mode
//! Bloch-form specialization in the ten independent real covariances.
//! Both must produce identical derivatives for M = 2; a dedicated test
//! checks the two code paths against each other.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::ode::{self, Dopri5Opts, StopReason};
use crate::params::SystemParams;

/// First-order Bloch moments `s_j = 2 <L_j>` and `n = <n>`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BlochMoments {
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
    pub n: f64,
}

impl BlochMoments {
    pub fn as_array(&self) -> [f64; 4] {
        [self.sx, self.sy, self.sz, self.n]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            sx: a[0],
            sy: a[1],
            sz: a[2],
            n: a[3],
        }
    }
}

/// The ten independent second-order covariances in Bloch form.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CovarianceSet {
    pub xx: f64,
    pub yy: f64,
    pub zz: f64,
    pub xy: f64,
    pub xz: f64,
    pub yz: f64,
    pub xn: f64,
    pub yn: f64,
    pub zn: f64,
    pub nn: f64,
}

impl CovarianceSet {
    pub fn as_array(&self) -> [f64; 10] {
        [
            self.xx, self.yy, self.zz, self.xy, self.xz, self.yz, self.xn, self.yn, self.zn,
            self.nn,
        ]
    }

    pub fn from_array(a: [f64; 10]) -> Self {
        Self {
            xx: a[0],
            yy: a[1],
            zz: a[2],
            xy: a[3],
            xz: a[4],
            yz: a[5],
            xn: a[6],
            yn: a[7],
            zn: a[8],
            nn: a[9],
        }
    }

    pub const LABELS: [&'static str; 10] = [
        "dxx", "dyy", "dzz", "dxy", "dxz", "dyz", "dxn", "dyn", "dzn", "dnn",
    ];
}

/// Bloch moments of the pure product state with angles `(phi, theta)`.
pub fn pure_state_moments(phi: f64, theta: f64, n0: u64) -> BlochMoments {
    let n0 = n0 as f64;
    BlochMoments {
        sx: n0 * theta.sin() * phi.cos(),
        sy: n0 * theta.sin() * phi.sin(),
        sz: n0 * theta.cos(),
        n: n0,
    }
}

/// Closed-form covariances of the pure product state: with the Bloch unit
/// vector `u`, `Delta_ab = (N0/2)(delta_ab - u_a u_b)` on the spin block
/// and zero for every pair involving `n` (the total number is sharp).
/// Verified against brute-force operator algebra for small `N0` in tests.
pub fn pure_state_covariances(phi: f64, theta: f64, n0: u64) -> CovarianceSet {
    let n0 = n0 as f64;
    let u = [
        theta.sin() * phi.cos(),
        theta.sin() * phi.sin(),
        theta.cos(),
    ];
    let d = |a: usize, b: usize| {
        let delta = if a == b { 1.0 } else { 0.0 };
        0.5 * n0 * (delta - u[a] * u[b])
    };
    CovarianceSet {
        xx: d(0, 0),
        yy: d(1, 1),
        zz: d(2, 2),
        xy: d(0, 1),
        xz: d(0, 2),
        yz: d(1, 2),
        xn: 0.0,
        yn: 0.0,
        zn: 0.0,
        nn: 0.0,
    }
}

/// Time derivative of the Bloch-form moments and covariances.
pub fn bloch_derivative(
    s: &BlochMoments,
    c: &CovarianceSet,
    p: &SystemParams,
) -> (BlochMoments, CovarianceSet) {
    let j = p.j;
    let u = p.u;
    let gm = p.gamma_minus();
    let gp = p.gamma_plus();
    let gg = p.gamma_gain;

    let ds = BlochMoments {
        sx: -u * (s.sy * s.sz + 2.0 * c.yz) - gm * s.sx,
        sy: 2.0 * j * s.sz + u * (s.sx * s.sz + 2.0 * c.xz) - gm * s.sy,
        sz: -2.0 * j * s.sy + gp * s.n - gm * s.sz + gg,
        n: -gm * s.n + gp * s.sz + gg,
    };

    let dc = CovarianceSet {
        xx: -2.0 * u * (s.sz * c.xy + s.sy * c.xz) - gm * (2.0 * c.xx - 0.5 * s.sz)
            + 0.5 * gp * s.n
            + 0.5 * gg,
        yy: 4.0 * j * c.yz + 2.0 * u * (s.sz * c.xy + s.sx * c.yz)
            - gm * (2.0 * c.yy - 0.5 * s.sz)
            + 0.5 * gp * s.n
            + 0.5 * gg,
        zz: -4.0 * j * c.yz - gm * (2.0 * c.zz + 0.5 * s.sz)
            + gp * (c.zn + 0.5 * s.n)
            + 0.5 * gg,
        xy: 2.0 * j * c.xz + u * (s.sx * c.xz + s.sz * c.xx - s.sz * c.yy - s.sy * c.yz)
            - 2.0 * gm * c.xy,
        xz: -2.0 * j * c.xy - u * (s.sy * c.zz + s.sz * c.yz)
            - gm * (2.0 * c.xz + 0.5 * s.sx)
            + 0.5 * gp * c.xn,
        yz: 2.0 * j * (c.zz - c.yy) + u * (s.sx * c.zz + s.sz * c.xz)
            - gm * (2.0 * c.yz + 0.5 * s.sy)
            + 0.5 * gp * c.yn,
        xn: -u * (s.sz * c.yn + s.sy * c.zn) - 2.0 * gm * c.xn + gp * (2.0 * c.xz + s.sx),
        yn: 2.0 * j * c.zn + u * (s.sx * c.zn + s.sz * c.xn) - 2.0 * gm * c.yn
            + gp * (2.0 * c.yz + s.sy),
        zn: -2.0 * j * c.yn - gm * (2.0 * c.zn + s.n)
            + gp * (2.0 * c.zz + 0.5 * c.nn + s.sz)
            + gg,
        nn: -gm * (2.0 * c.nn + 2.0 * s.sz) + gp * (4.0 * c.zn + 2.0 * s.n) + 2.0 * gg,
    };
    (ds, dc)
}

/// Whether the second-order covariances are propagated or dropped
/// entirely (the pure mean-field-moment approximation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceMode {
    Full,
    NeglectCovariances,
}

#[derive(Debug, Clone, Copy)]
pub struct BbrOpts {
    pub rtol: f64,
    /// Absolute tolerance per unit particle; the effective atol is
    /// `atol_scale * N0`.
    pub atol_scale: f64,
    /// Trajectories with `n` beyond `divergence_factor * N0` are flagged
    /// unstable and integration stops.
    pub divergence_factor: f64,
}

impl Default for BbrOpts {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol_scale: 1e-9,
            divergence_factor: 1e4,
        }
    }
}

/// Result of a moment-hierarchy integration. When the divergence guard
/// fires, `stable` is false and the series is truncated at the last grid
/// point reached.
#[derive(Debug, Clone)]
pub struct BbrSeries {
    pub t: Vec<f64>,
    pub moments: Vec<BlochMoments>,
    pub covariances: Vec<CovarianceSet>,
    pub stable: bool,
}

/// Integrate the Bloch-form hierarchy over `t_grid`.
pub fn integrate_bbr(
    initial: (BlochMoments, CovarianceSet),
    t_grid: &[f64],
    params: &SystemParams,
    mode: CovarianceMode,
) -> Result<BbrSeries> {
    integrate_bbr_with(initial, t_grid, params, mode, &BbrOpts::default())
}

pub fn integrate_bbr_with(
    initial: (BlochMoments, CovarianceSet),
    t_grid: &[f64],
    params: &SystemParams,
    mode: CovarianceMode,
    opts: &BbrOpts,
) -> Result<BbrSeries> {
    let n0 = params.n0 as f64;
    let ode_opts = Dopri5Opts {
        rtol: opts.rtol,
        atol: opts.atol_scale * n0,
        ..Default::default()
    };
    let bound = opts.divergence_factor * n0;
    let p = *params;

    let mut t_out = Vec::with_capacity(t_grid.len());
    let mut moments = Vec::with_capacity(t_grid.len());
    let mut covariances = Vec::with_capacity(t_grid.len());

    let reason = match mode {
        CovarianceMode::Full => {
            let mut y0 = [0.0f64; 14];
            y0[..4].copy_from_slice(&initial.0.as_array());
            y0[4..].copy_from_slice(&initial.1.as_array());
            ode::integrate_to_grid_guarded(
                move |_t, y: &[f64], dy: &mut [f64]| {
                    let s = BlochMoments::from_array(y[..4].try_into().unwrap());
                    let c = CovarianceSet::from_array(y[4..].try_into().unwrap());
                    let (ds, dc) = bloch_derivative(&s, &c, &p);
                    dy[..4].copy_from_slice(&ds.as_array());
                    dy[4..].copy_from_slice(&dc.as_array());
                },
                t_grid,
                &y0,
                ode_opts,
                |_, t, y| {
                    t_out.push(t);
                    moments.push(BlochMoments::from_array(y[..4].try_into().unwrap()));
                    covariances.push(CovarianceSet::from_array(y[4..].try_into().unwrap()));
                },
                |_, y| !y[3].is_finite() || y[3].abs() > bound,
            )
        }
        CovarianceMode::NeglectCovariances => {
            let y0 = initial.0.as_array();
            let zero_cov = CovarianceSet::default();
            ode::integrate_to_grid_guarded(
                move |_t, y: &[f64], dy: &mut [f64]| {
                    let s = BlochMoments::from_array(y.try_into().unwrap());
                    let (ds, _) = bloch_derivative(&s, &CovarianceSet::default(), &p);
                    dy.copy_from_slice(&ds.as_array());
                },
                t_grid,
                &y0,
                ode_opts,
                |_, t, y| {
                    t_out.push(t);
                    moments.push(BlochMoments::from_array(y.try_into().unwrap()));
                    covariances.push(zero_cov);
                },
                |_, y| !y[3].is_finite() || y[3].abs() > bound,
            )
        }
    }?;

    Ok(BbrSeries {
        t: t_out,
        moments,
        covariances,
        stable: matches!(reason, StopReason::Completed),
    })
}

// ---------------------------------------------------------------------------
// General M-site formulation.
// ---------------------------------------------------------------------------

/// Per-site incoherent rates for the general M-site chain.
#[derive(Debug, Clone)]
pub struct SiteRates {
    pub loss: Vec<f64>,
    pub gain: Vec<f64>,
}

impl SiteRates {
    /// Two-mode arrangement of this crate: loss at site 1, gain at site 2.
    pub fn dimer(params: &SystemParams) -> Self {
        Self {
            loss: vec![params.gamma_loss, 0.0],
            gain: vec![0.0, params.gamma_gain],
        }
    }
}

/// Single-particle density matrix and covariance tensor for an M-site
/// open chain. `sigma` is `M x M` (row-major); `delta` is the rank-4
/// tensor `Delta_jklm` stored with `m` fastest.
#[derive(Debug, Clone)]
pub struct GeneralMoments {
    pub m: usize,
    pub sigma: Vec<Complex64>,
    pub delta: Vec<Complex64>,
}

impl GeneralMoments {
    pub fn zero(m: usize) -> Self {
        Self {
            m,
            sigma: vec![Complex64::default(); m * m],
            delta: vec![Complex64::default(); m * m * m * m],
        }
    }

    #[inline]
    pub fn sig(&self, j: usize, k: usize) -> Complex64 {
        self.sigma[j * self.m + k]
    }

    #[inline]
    pub fn del(&self, j: usize, k: usize, l: usize, mm: usize) -> Complex64 {
        self.delta[((j * self.m + k) * self.m + l) * self.m + mm]
    }

    #[inline]
    fn didx(&self, q: [usize; 4]) -> usize {
        ((q[0] * self.m + q[1]) * self.m + q[2]) * self.m + q[3]
    }

    /// Worst violation of the two covariance symmetry relations and of
    /// the Hermiticity of `sigma`.
    pub fn symmetry_violation(&self) -> f64 {
        let m = self.m;
        let mut worst = 0.0f64;
        for j in 0..m {
            for k in 0..m {
                worst = worst.max((self.sig(j, k) - self.sig(k, j).conj()).norm());
            }
        }
        for j in 0..m {
            for k in 0..m {
                for l in 0..m {
                    for mm in 0..m {
                        let d = self.del(j, k, l, mm);
                        worst = worst.max((d - self.del(mm, l, k, j).conj()).norm());
                        let swap = self.del(l, mm, j, k);
                        let mut expect = swap;
                        if j == mm {
                            expect -= self.sig(l, k);
                        }
                        if l == k {
                            expect += self.sig(j, mm);
                        }
                        worst = worst.max((d - expect).norm());
                    }
                }
            }
        }
        worst
    }

    /// Bloch-form view of the two-mode case.
    pub fn to_bloch(&self) -> (BlochMoments, CovarianceSet) {
        assert_eq!(self.m, 2, "Bloch form is defined for two modes");
        let s01 = self.sig(0, 1);
        let moments = BlochMoments {
            sx: 2.0 * s01.re,
            sy: -2.0 * s01.im,
            sz: (self.sig(1, 1) - self.sig(0, 0)).re,
            n: (self.sig(0, 0) + self.sig(1, 1)).re,
        };
        let cov = bloch_cov_from_tensor(|j, k, l, mm| self.del(j, k, l, mm));
        (moments, cov)
    }
}

/// Coefficients of the Bloch operators over `T_pq = a_p^dag a_q`
/// (0-based sites; site 0 carries loss, site 1 gain).
fn bloch_coeffs() -> [[(usize, usize, Complex64); 2]; 4] {
    let h = Complex64::new(0.5, 0.0);
    let ih = Complex64::new(0.0, 0.5);
    let one = Complex64::new(1.0, 0.0);
    [
        [(0, 1, h), (1, 0, h)],                     // L_x
        [(0, 1, ih), (1, 0, -ih)],                  // L_y
        [(0, 0, -h), (1, 1, h)],                    // L_z
        [(0, 0, one), (1, 1, one)],                 // n
    ]
}

/// `Delta_AB = sum alpha_pq beta_rs (Delta_pqrs + Delta_rspq)` for Bloch
/// operators A, B; works for both states and their time derivatives.
fn bloch_cov_from_tensor(del: impl Fn(usize, usize, usize, usize) -> Complex64) -> CovarianceSet {
    let ops = bloch_coeffs();
    let pair = |a: usize, b: usize| -> f64 {
        let mut acc = Complex64::default();
        for &(p, q, alpha) in &ops[a] {
            for &(r, s, beta) in &ops[b] {
                acc += alpha * beta * (del(p, q, r, s) + del(r, s, p, q));
            }
        }
        acc.re
    };
    CovarianceSet {
        xx: pair(0, 0),
        yy: pair(1, 1),
        zz: pair(2, 2),
        xy: pair(0, 1),
        xz: pair(0, 2),
        yz: pair(1, 2),
        xn: pair(0, 3),
        yn: pair(1, 3),
        zn: pair(2, 3),
        nn: pair(3, 3),
    }
}

/// Time derivative of the single-particle density matrix element
/// `(j, k)`; exact (the interaction term couples to the stored
/// covariances, no closure enters here).
fn sigma_dot(gm: &GeneralMoments, rates: &SiteRates, j_rate: f64, u: f64, j: usize, k: usize) -> Complex64 {
    let m = gm.m;
    let i = Complex64::i();
    let mut tun = Complex64::default();
    if j + 1 < m {
        tun += gm.sig(j + 1, k);
    }
    if j >= 1 {
        tun += gm.sig(j - 1, k);
    }
    if k + 1 < m {
        tun -= gm.sig(j, k + 1);
    }
    if k >= 1 {
        tun -= gm.sig(j, k - 1);
    }
    let mut out = -i * j_rate * tun;
    if u != 0.0 {
        let nl = (gm.sig(k, k) - gm.sig(j, j)) * gm.sig(j, k) + gm.del(j, k, k, k)
            - gm.del(j, j, j, k);
        out += -i * u * nl;
    }
    out += gm.sig(j, k) * (-0.5 * (rates.loss[j] + rates.loss[k]));
    let delta_jk = if j == k { 1.0 } else { 0.0 };
    out += (gm.sig(j, k) + delta_jk) * (0.5 * (rates.gain[j] + rates.gain[k]));
    out
}

/// Time derivative of the covariance `Delta_jklm` with the third-order
/// closure applied to the interaction term.
fn delta_dot(
    gm: &GeneralMoments,
    rates: &SiteRates,
    j_rate: f64,
    u: f64,
    q: [usize; 4],
) -> Complex64 {
    let m = gm.m;
    let [j, k, l, mm] = q;
    let i = Complex64::i();
    let mut tun = Complex64::default();
    if j + 1 < m {
        tun += gm.del(j + 1, k, l, mm);
    }
    if j >= 1 {
        tun += gm.del(j - 1, k, l, mm);
    }
    if k + 1 < m {
        tun -= gm.del(j, k + 1, l, mm);
    }
    if k >= 1 {
        tun -= gm.del(j, k - 1, l, mm);
    }
    if l + 1 < m {
        tun += gm.del(j, k, l + 1, mm);
    }
    if l >= 1 {
        tun += gm.del(j, k, l - 1, mm);
    }
    if mm + 1 < m {
        tun -= gm.del(j, k, l, mm + 1);
    }
    if mm >= 1 {
        tun -= gm.del(j, k, l, mm - 1);
    }
    let mut out = -i * j_rate * tun;
    if u != 0.0 {
        let diag = gm.sig(j, j) - gm.sig(k, k) + gm.sig(l, l) - gm.sig(mm, mm);
        let nl = gm.del(j, k, l, mm) * diag
            + (gm.del(j, j, l, mm) - gm.del(k, k, l, mm)) * gm.sig(j, k)
            + (gm.del(j, k, l, l) - gm.del(j, k, mm, mm)) * gm.sig(l, mm);
        out += i * u * nl;
    }
    let loss_sum = rates.loss[j] + rates.loss[k] + rates.loss[l] + rates.loss[mm];
    out += gm.del(j, k, l, mm) * (-0.5 * loss_sum);
    if k == l {
        out += gm.sig(j, mm) * rates.loss[k];
    }
    let gain_sum = rates.gain[j] + rates.gain[k] + rates.gain[l] + rates.gain[mm];
    out += gm.del(j, k, l, mm) * (0.5 * gain_sum);
    if j == mm {
        let delta_lk = if l == k { 1.0 } else { 0.0 };
        out += (gm.sig(l, k) + delta_lk) * rates.gain[j];
    }
    out
}

/// Derivative of the full M-site moment set.
///
/// The closure breaks index commutation for the raw covariance
/// derivatives: evaluating the formula at `(j,k,l,m)` and at the swapped
/// pair order `(l,m,j,k)` gives different answers, so only the
/// swap-symmetrized combination is well defined. That combination is the
/// independent content; the antisymmetric part is fixed by the operator
/// identity `Delta_jklm - Delta_lmjk = -delta_jm sigma_lk + delta_lk
/// sigma_jm` and is reconstructed from `d sigma` here. Both symmetry
/// relations then hold exactly under integration, and the two-mode
/// reduction coincides with the Bloch-form equations.
pub fn general_derivative(
    gm: &GeneralMoments,
    rates: &SiteRates,
    params: &SystemParams,
) -> GeneralMoments {
    let m = gm.m;
    assert_eq!(rates.loss.len(), m);
    assert_eq!(rates.gain.len(), m);
    let mut out = GeneralMoments::zero(m);

    // sigma: upper triangle plus diagonal, Hermitian completion.
    for j in 0..m {
        for k in j..m {
            let d = sigma_dot(gm, rates, params.j, params.u, j, k);
            let d = if j == k { Complex64::new(d.re, 0.0) } else { d };
            out.sigma[j * m + k] = d;
            out.sigma[k * m + j] = d.conj();
        }
    }

    let swap = |q: [usize; 4]| [q[2], q[3], q[0], q[1]];
    let conj_rev = |q: [usize; 4]| [q[3], q[2], q[1], q[0]];
    // d/dt of (delta_jm sigma_lk - delta_lk sigma_jm)
    let correction = |dsigma: &[Complex64], q: [usize; 4]| -> Complex64 {
        let mut corr = Complex64::default();
        if q[0] == q[3] {
            corr += dsigma[q[2] * m + q[1]];
        }
        if q[2] == q[1] {
            corr -= dsigma[q[0] * m + q[3]];
        }
        corr
    };

    for j in 0..m {
        for k in 0..m {
            for l in 0..m {
                for mm in 0..m {
                    let q = [j, k, l, mm];
                    let s = swap(q);
                    let c = conj_rev(q);
                    let cs = conj_rev(s);
                    let canon = *[q, s, c, cs].iter().min().unwrap();
                    if q != canon {
                        continue;
                    }
                    let d_here = delta_dot(gm, rates, params.j, params.u, q);
                    let d_swap = delta_dot(gm, rates, params.j, params.u, s);
                    let sym = 0.5 * (d_here + d_swap);
                    let corr = correction(&out.sigma, q);
                    let val_q = sym - 0.5 * corr;
                    let val_s = sym + 0.5 * corr;
                    let idx_q = out.didx(q);
                    out.delta[idx_q] = val_q;
                    if s != q {
                        let idx = out.didx(s);
                        out.delta[idx] = val_s;
                    }
                    if c != q && c != s {
                        let idx = out.didx(c);
                        out.delta[idx] = val_q.conj();
                    }
                    if cs != q && cs != s && cs != c {
                        let idx = out.didx(cs);
                        out.delta[idx] = val_s.conj();
                    }
                }
            }
        }
    }
    out
}

/// Integrate the general M-site hierarchy over `t_grid`; the full
/// redundant moment set is propagated, with the derivative construction
/// keeping the symmetry relations exact.
pub fn integrate_general(
    initial: &GeneralMoments,
    t_grid: &[f64],
    rates: &SiteRates,
    params: &SystemParams,
    opts: &BbrOpts,
) -> Result<Vec<GeneralMoments>> {
    let m = initial.m;
    let n_sig = m * m;
    let mut y0 = Vec::with_capacity(n_sig + initial.delta.len());
    y0.extend_from_slice(&initial.sigma);
    y0.extend_from_slice(&initial.delta);
    let ode_opts = Dopri5Opts {
        rtol: opts.rtol,
        atol: opts.atol_scale * params.n0 as f64,
        ..Default::default()
    };
    let rates = rates.clone();
    let p = *params;
    let mut out = Vec::with_capacity(t_grid.len());
    let mut work = GeneralMoments::zero(m);
    ode::integrate_to_grid(
        move |_t, y: &[Complex64], dy: &mut [Complex64]| {
            work.sigma.copy_from_slice(&y[..n_sig]);
            work.delta.copy_from_slice(&y[n_sig..]);
            let d = general_derivative(&work, &rates, &p);
            dy[..n_sig].copy_from_slice(&d.sigma);
            dy[n_sig..].copy_from_slice(&d.delta);
        },
        t_grid,
        &y0,
        ode_opts,
        |_, _, y| {
            let mut g = GeneralMoments::zero(m);
            g.sigma.copy_from_slice(&y[..n_sig]);
            g.delta.copy_from_slice(&y[n_sig..]);
            out.push(g);
        },
    )?;
    if out.len() != t_grid.len() {
        return Err(Error::NumericalFailure(
            "general moment integration ended early".into(),
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Brute-force construction from many-particle states (used by tests and
// by the trajectory initialisation).
// ---------------------------------------------------------------------------

use crate::fock::{FockVector, Site};

impl GeneralMoments {
    /// Exact two-mode moments of a normalized many-particle state,
    /// evaluated by direct operator application. The state must leave
    /// one unit of headroom below `n_max` so creation operators act
    /// without truncation.
    pub fn from_state(state: &FockVector) -> Self {
        let m = 2;
        let mut gm = Self::zero(m);
        let site = |p: usize| if p == 0 { Site::One } else { Site::Two };
        // w[p][q] = T_pq |psi> = a_p^dag a_q |psi>
        let w: Vec<Vec<FockVector>> = (0..m)
            .map(|p| {
                (0..m)
                    .map(|q| state.annihilate(site(q)).create(site(p)))
                    .collect()
            })
            .collect();
        for p in 0..m {
            for q in 0..m {
                gm.sigma[p * m + q] = state.inner(&w[p][q]);
            }
        }
        for j in 0..m {
            for k in 0..m {
                for l in 0..m {
                    for mm in 0..m {
                        // <T_jk T_lm> = <T_kj psi | T_lm psi>
                        let second = w[k][j].inner(&w[l][mm]);
                        let idx = gm.didx([j, k, l, mm]);
                        gm.delta[idx] = second - gm.sig(j, k) * gm.sig(l, mm);
                    }
                }
            }
        }
        gm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{covariances_from_state, product_state, FockBasis};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn balanced_filling_has_stationary_particle_number() {
        let p = SystemParams::balanced(1.0, 0.7, 100, 1.3).unwrap();
        let s = BlochMoments {
            sx: 30.0,
            sy: -12.0,
            sz: 0.0,
            n: 100.0,
        };
        let (ds, _) = bloch_derivative(&s, &CovarianceSet::default(), &p);
        assert!(ds.n.abs() < 1e-12, "dn/dt = {}", ds.n);
    }

    #[test]
    fn closed_linear_system_preserves_bloch_length() {
        let p = SystemParams::with_rates(1.0, 0.0, 10, 0.0, 0.0).unwrap();
        let s = BlochMoments {
            sx: 3.0,
            sy: -1.0,
            sz: 2.0,
            n: 10.0,
        };
        let (ds, _) = bloch_derivative(&s, &CovarianceSet::default(), &p);
        assert!(ds.n.abs() < 1e-15);
        let len_dot = 2.0 * (s.sx * ds.sx + s.sy * ds.sy + s.sz * ds.sz);
        assert!(len_dot.abs() < 1e-12);
    }

    #[test]
    fn first_order_decouples_at_zero_interaction() {
        let p = SystemParams::balanced(1.0, 0.0, 50, 0.9).unwrap();
        let s = BlochMoments {
            sx: 5.0,
            sy: 2.0,
            sz: -7.0,
            n: 50.0,
        };
        let c1 = CovarianceSet::default();
        let mut c2 = CovarianceSet::default();
        c2.xz = 123.0;
        c2.yz = -55.0;
        let (d1, _) = bloch_derivative(&s, &c1, &p);
        let (d2, _) = bloch_derivative(&s, &c2, &p);
        assert_eq!(d1.as_array(), d2.as_array());
    }

    #[test]
    fn pure_state_covariances_match_brute_force() {
        let b = FockBasis::new(8);
        for n0 in 1..=6u64 {
            for &phi in &[0.0, 0.9, 2.5, -0.4] {
                for &theta in &[0.2, 1.1, 2.0, 2.9] {
                    let state = product_state(phi, theta, n0, b).unwrap();
                    let brute = covariances_from_state(&state);
                    let closed = pure_state_covariances(phi, theta, n0);
                    for (a, e) in brute.as_array().iter().zip(closed.as_array()) {
                        assert_relative_eq!(*a, e, epsilon = 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn general_loss_only_decay() {
        // sigma diagonal and real, U = 0, J = 0, loss only at site 1:
        // d sigma_00 = -gamma sigma_00, d sigma_11 = 0.
        let p = SystemParams::with_rates(0.0, 0.0, 10, 0.8, 0.0).unwrap();
        let rates = SiteRates::dimer(&p);
        let mut gm = GeneralMoments::zero(2);
        gm.sigma[0] = Complex64::new(3.0, 0.0);
        gm.sigma[3] = Complex64::new(7.0, 0.0);
        let d = general_derivative(&gm, &rates, &p);
        assert_relative_eq!(d.sig(0, 0).re, -0.8 * 3.0, epsilon = 1e-14);
        assert!(d.sig(1, 1).norm() < 1e-14);
    }

    #[test]
    fn general_free_tunneling_conserves_trace() {
        let p = SystemParams::with_rates(1.0, 0.0, 4, 0.0, 0.0).unwrap();
        let rates = SiteRates::dimer(&p);
        let b = FockBasis::new(6);
        let st = product_state(0.7, 1.3, 4, b).unwrap();
        let gm = GeneralMoments::from_state(&st);
        let d = general_derivative(&gm, &rates, &p);
        let tr = d.sig(0, 0) + d.sig(1, 1);
        assert!(tr.norm() < 1e-12);
    }

    #[test]
    fn general_path_matches_bloch_path() {
        // Build physical moments from random mixtures of small product
        // states, then compare the two derivative formulations in Bloch
        // coordinates.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = FockBasis::new(9);
        for trial in 0..40 {
            let balanced = trial % 2 == 0;
            let gl = rng.gen_range(0.0..1.8);
            let n0 = rng.gen_range(2..=6u64);
            let g = rng.gen_range(-1.0..2.0);
            let p = if balanced {
                SystemParams::balanced(1.0, g, n0, gl).unwrap()
            } else {
                SystemParams::with_rates(1.0, g, n0, gl, rng.gen_range(0.0..1.0)).unwrap()
            };
            let rates = SiteRates::dimer(&p);

            // Random normalized state (superposition over product states).
            let mut st = product_state(
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.05..3.1),
                n0,
                b,
            )
            .unwrap();
            let other = product_state(
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.05..3.1),
                n0.saturating_sub(1).max(1),
                b,
            )
            .unwrap();
            let w: f64 = rng.gen_range(0.0..1.0);
            for (a, o) in st.amp.iter_mut().zip(&other.amp) {
                *a = *a * (1.0 - w).sqrt() + o * w.sqrt();
            }
            st.normalize();

            let gm = GeneralMoments::from_state(&st);
            assert!(gm.symmetry_violation() < 1e-10);

            let d_general = general_derivative(&gm, &rates, &p);
            let (ds_g, dc_g) = d_general.to_bloch();

            let (s, c) = gm.to_bloch();
            let (ds_b, dc_b) = bloch_derivative(&s, &c, &p);

            let scale = n0 as f64 * n0 as f64;
            for (a, e) in ds_g.as_array().iter().zip(ds_b.as_array()) {
                assert_relative_eq!(*a, e, epsilon = 1e-10 * scale, max_relative = 1e-10);
            }
            for (a, e) in dc_g.as_array().iter().zip(dc_b.as_array()) {
                assert_relative_eq!(*a, e, epsilon = 1e-10 * scale, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn derivative_preserves_symmetry_relations() {
        let p = SystemParams::balanced(1.0, 1.0, 5, 1.2).unwrap();
        let rates = SiteRates::dimer(&p);
        let b = FockBasis::new(8);
        let st = product_state(1.0, 1.0, 5, b).unwrap();
        let gm = GeneralMoments::from_state(&st);
        let t_grid = [0.0, 0.5, 1.0, 2.0];
        let series = integrate_general(&gm, &t_grid, &rates, &p, &BbrOpts::default()).unwrap();
        for g in &series {
            assert!(
                g.symmetry_violation() < 1e-7,
                "violation {}",
                g.symmetry_violation()
            );
        }
    }

    #[test]
    fn closed_system_conserves_n_over_long_times() {
        let p = SystemParams::with_rates(1.0, 0.5, 20, 0.0, 0.0).unwrap();
        let s0 = pure_state_moments(0.4, 1.2, 20);
        let c0 = pure_state_covariances(0.4, 1.2, 20);
        let t_grid: Vec<f64> = (0..=50).map(|i| i as f64 * 2.0).collect();
        let series = integrate_bbr((s0, c0), &t_grid, &p, CovarianceMode::Full).unwrap();
        assert!(series.stable);
        for m in &series.moments {
            assert!((m.n - 20.0).abs() < 1e-9, "n drifted to {}", m.n);
        }
    }

    #[test]
    fn g_zero_first_moments_ignore_covariance_initial_values() {
        let p = SystemParams::balanced(1.0, 0.0, 30, 1.1).unwrap();
        let s0 = pure_state_moments(1.0, 1.5, 30);
        let c0 = pure_state_covariances(1.0, 1.5, 30);
        let mut c_perturbed = c0;
        c_perturbed.xx += 40.0;
        c_perturbed.yz -= 11.0;
        let t_grid: Vec<f64> = (0..=30).map(|i| i as f64).collect();
        let a = integrate_bbr((s0, c0), &t_grid, &p, CovarianceMode::Full).unwrap();
        let b = integrate_bbr((s0, c_perturbed), &t_grid, &p, CovarianceMode::Full).unwrap();
        // The trajectories are mathematically identical; they differ only
        // through the adaptive step sequence, i.e. at integration accuracy.
        for (ma, mb) in a.moments.iter().zip(&b.moments) {
            for (x, y) in ma.as_array().iter().zip(mb.as_array()) {
                assert_relative_eq!(*x, y, epsilon = 1e-6, max_relative = 1e-7);
            }
        }
    }

    #[test]
    fn divergence_guard_flags_unstable_run() {
        // Gain-dominated unbalanced parameters blow n up quickly.
        let p = SystemParams::with_rates(1.0, 0.0, 2, 0.0, 3.0).unwrap();
        let s0 = pure_state_moments(0.5, 1.0, 2);
        let c0 = pure_state_covariances(0.5, 1.0, 2);
        let t_grid: Vec<f64> = (0..=40).map(|i| i as f64).collect();
        let opts = BbrOpts {
            divergence_factor: 100.0,
            ..Default::default()
        };
        let series =
            integrate_bbr_with((s0, c0), &t_grid, &p, CovarianceMode::Full, &opts).unwrap();
        assert!(!series.stable);
        assert!(series.t.len() < t_grid.len());
    }
}
