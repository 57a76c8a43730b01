//! Truncated two-mode Fock space: basis indexing, many-particle states,
//! creation/annihilation actions, and expectation values.
//!
//! Basis states are labelled `|n1, n2>` with the occupation of site 1
//! first; both occupations are capped by `n_max`.

use num_complex::Complex64;

use crate::bbr::{BlochMoments, CovarianceSet};
use crate::error::{Error, Result};

/// Truncated product Fock basis with per-mode occupation cap `n_max`.
/// The dense index of `|n1, n2>` is `n1 * (n_max + 1) + n2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FockBasis {
    n_max: usize,
}

impl FockBasis {
    pub fn new(n_max: usize) -> Self {
        Self { n_max }
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn dim(&self) -> usize {
        (self.n_max + 1) * (self.n_max + 1)
    }

    #[inline]
    pub fn index(&self, n1: usize, n2: usize) -> usize {
        debug_assert!(n1 <= self.n_max && n2 <= self.n_max);
        n1 * (self.n_max + 1) + n2
    }

    #[inline]
    pub fn label(&self, idx: usize) -> (usize, usize) {
        (idx / (self.n_max + 1), idx % (self.n_max + 1))
    }
}

/// Site of the dimer, used to select operator actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    One,
    Two,
}

/// Many-particle state over a [`FockBasis`].
#[derive(Debug, Clone)]
pub struct FockVector {
    pub basis: FockBasis,
    pub amp: Vec<Complex64>,
}

impl FockVector {
    pub fn zero(basis: FockBasis) -> Self {
        Self {
            basis,
            amp: vec![Complex64::default(); basis.dim()],
        }
    }

    pub fn basis_state(basis: FockBasis, n1: usize, n2: usize) -> Result<Self> {
        if n1 > basis.n_max() || n2 > basis.n_max() {
            return Err(Error::Truncation(format!(
                "|{n1}, {n2}> lies outside the basis with n_max = {}",
                basis.n_max()
            )));
        }
        let mut v = Self::zero(basis);
        v.amp[basis.index(n1, n2)] = Complex64::new(1.0, 0.0);
        Ok(v)
    }

    pub fn norm_sq(&self) -> f64 {
        self.amp.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn normalize(&mut self) {
        let n = self.norm_sq().sqrt();
        if n > 0.0 {
            for a in &mut self.amp {
                *a /= n;
            }
        }
    }

    pub fn inner(&self, other: &Self) -> Complex64 {
        self.amp
            .iter()
            .zip(&other.amp)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// Apply the annihilation operator `a_site`.
    pub fn annihilate(&self, site: Site) -> Self {
        let b = self.basis;
        let mut out = Self::zero(b);
        for n1 in 0..=b.n_max() {
            for n2 in 0..=b.n_max() {
                let a = self.amp[b.index(n1, n2)];
                if a == Complex64::default() {
                    continue;
                }
                match site {
                    Site::One if n1 > 0 => {
                        out.amp[b.index(n1 - 1, n2)] += a * (n1 as f64).sqrt();
                    }
                    Site::Two if n2 > 0 => {
                        out.amp[b.index(n1, n2 - 1)] += a * (n2 as f64).sqrt();
                    }
                    _ => {}
                }
            }
        }
        out
    }

    /// Apply the creation operator `a_site^dagger`. Amplitude that would
    /// exceed `n_max` is dropped (truncation).
    pub fn create(&self, site: Site) -> Self {
        let b = self.basis;
        let mut out = Self::zero(b);
        for n1 in 0..=b.n_max() {
            for n2 in 0..=b.n_max() {
                let a = self.amp[b.index(n1, n2)];
                if a == Complex64::default() {
                    continue;
                }
                match site {
                    Site::One if n1 < b.n_max() => {
                        out.amp[b.index(n1 + 1, n2)] += a * ((n1 + 1) as f64).sqrt();
                    }
                    Site::Two if n2 < b.n_max() => {
                        out.amp[b.index(n1, n2 + 1)] += a * ((n2 + 1) as f64).sqrt();
                    }
                    _ => {}
                }
            }
        }
        out
    }

    /// Total probability in the outermost occupation shell
    /// (`n1 = n_max` or `n2 = n_max`); the truncation monitor quantity.
    pub fn top_shell_weight(&self) -> f64 {
        let b = self.basis;
        let m = b.n_max();
        let mut w = 0.0;
        for k in 0..=m {
            w += self.amp[b.index(m, k)].norm_sqr();
            if k < m {
                w += self.amp[b.index(k, m)].norm_sqr();
            }
        }
        w
    }
}

/// Pure product state with `n0` particles shared between the modes,
/// `c1 = sin(theta/2) e^{i phi}`, `c2 = cos(theta/2)` (global phase fixed
/// by `c2` real nonnegative). Amplitudes carry binomial weights; they are
/// accumulated in log space so large `n0` cannot overflow.
pub fn product_state(phi: f64, theta: f64, n0: u64, basis: FockBasis) -> Result<FockVector> {
    if (basis.n_max() as u64) < n0 {
        return Err(Error::Truncation(format!(
            "n_max = {} cannot hold {} particles per mode",
            basis.n_max(),
            n0
        )));
    }
    if !(0.0..=std::f64::consts::PI + 1e-12).contains(&theta) {
        return Err(Error::InvalidParameter(format!(
            "theta must lie in [0, pi], got {theta}"
        )));
    }
    let n0u = n0 as usize;
    let c1_mag = (theta / 2.0).sin();
    let c2_mag = (theta / 2.0).cos();
    let mut v = FockVector::zero(basis);
    // log |amplitude| of |n0 - m, m>, up to the common normalization
    let mut log_binom = 0.0f64; // ln C(n0, m), accumulated
    let mut log_mags = Vec::with_capacity(n0u + 1);
    let mut phases = Vec::with_capacity(n0u + 1);
    for m in 0..=n0u {
        if m > 0 {
            log_binom += ((n0u - m + 1) as f64 / m as f64).ln();
        }
        let k1 = (n0u - m) as f64; // power of c1
        let k2 = m as f64; // power of c2
        let lm1 = if k1 == 0.0 { 0.0 } else { k1 * c1_mag.ln() };
        let lm2 = if k2 == 0.0 { 0.0 } else { k2 * c2_mag.ln() };
        log_mags.push(0.5 * log_binom + lm1 + lm2);
        phases.push(k1 * phi);
    }
    let log_max = log_mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut norm_sq = 0.0;
    for m in 0..=n0u {
        let mag = (log_mags[m] - log_max).exp();
        norm_sq += mag * mag;
    }
    let scale = 1.0 / norm_sq.sqrt();
    for m in 0..=n0u {
        let mag = (log_mags[m] - log_max).exp() * scale;
        v.amp[basis.index(n0u - m, m)] = Complex64::from_polar(mag, phases[m]);
    }
    Ok(v)
}

/// Bloch-operator actions on a [`FockVector`]: `L_x`, `L_y`, `L_z` and the
/// total number operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlochOp {
    Lx,
    Ly,
    Lz,
    N,
}

pub const BLOCH_OPS: [BlochOp; 4] = [BlochOp::Lx, BlochOp::Ly, BlochOp::Lz, BlochOp::N];

pub fn apply_bloch_op(op: BlochOp, state: &FockVector) -> FockVector {
    let b = state.basis;
    let mut out = FockVector::zero(b);
    let half = Complex64::new(0.5, 0.0);
    let ihalf = Complex64::new(0.0, 0.5);
    for n1 in 0..=b.n_max() {
        for n2 in 0..=b.n_max() {
            let a = state.amp[b.index(n1, n2)];
            if a == Complex64::default() {
                continue;
            }
            match op {
                BlochOp::Lx | BlochOp::Ly => {
                    // a1^dag a2 : |n1, n2> -> sqrt((n1+1) n2) |n1+1, n2-1>
                    if n2 > 0 && n1 < b.n_max() {
                        let c = (((n1 + 1) * n2) as f64).sqrt();
                        let w = if op == BlochOp::Lx { half } else { ihalf };
                        out.amp[b.index(n1 + 1, n2 - 1)] += w * a * c;
                    }
                    // a2^dag a1 : |n1, n2> -> sqrt(n1 (n2+1)) |n1-1, n2+1>
                    if n1 > 0 && n2 < b.n_max() {
                        let c = ((n1 * (n2 + 1)) as f64).sqrt();
                        let w = if op == BlochOp::Lx { half } else { -ihalf };
                        out.amp[b.index(n1 - 1, n2 + 1)] += w * a * c;
                    }
                }
                BlochOp::Lz => {
                    out.amp[b.index(n1, n2)] = a * ((n2 as f64 - n1 as f64) / 2.0);
                }
                BlochOp::N => {
                    out.amp[b.index(n1, n2)] = a * ((n1 + n2) as f64);
                }
            }
        }
    }
    out
}

/// First-order Bloch moments `s_j = 2 <L_j>`, `n = <n>` of a normalized state.
pub fn bloch_moments(state: &FockVector) -> BlochMoments {
    let w: Vec<FockVector> = BLOCH_OPS
        .iter()
        .map(|&op| apply_bloch_op(op, state))
        .collect();
    BlochMoments {
        sx: 2.0 * state.inner(&w[0]).re,
        sy: 2.0 * state.inner(&w[1]).re,
        sz: 2.0 * state.inner(&w[2]).re,
        n: state.inner(&w[3]).re,
    }
}

/// The ten independent second-order covariances
/// `Delta_jk = <A_j A_k + A_k A_j> - 2 <A_j><A_k>` over
/// `{L_x, L_y, L_z, n}`, evaluated by direct operator application.
pub fn covariances_from_state(state: &FockVector) -> CovarianceSet {
    let w: Vec<FockVector> = BLOCH_OPS
        .iter()
        .map(|&op| apply_bloch_op(op, state))
        .collect();
    let mean: Vec<f64> = w.iter().map(|wj| state.inner(wj).re).collect();
    let d = |j: usize, k: usize| 2.0 * w[j].inner(&w[k]).re - 2.0 * mean[j] * mean[k];
    CovarianceSet {
        xx: d(0, 0),
        yy: d(1, 1),
        zz: d(2, 2),
        xy: d(0, 1),
        xz: d(0, 2),
        yz: d(1, 2),
        xn: d(0, 3),
        yn: d(1, 3),
        zn: d(2, 3),
        nn: d(3, 3),
    }
}

/// Single-particle density matrix `sigma_jk = <a_j^dag a_k>` of a
/// normalized state.
pub fn spdm_from_state(state: &FockVector) -> [[Complex64; 2]; 2] {
    let v1 = state.annihilate(Site::One);
    let v2 = state.annihilate(Site::Two);
    let s11 = v1.inner(&v1);
    let s22 = v2.inner(&v2);
    let s12 = v1.inner(&v2);
    [[s11, s12], [s12.conj(), s22]]
}

/// Dense density operator over a [`FockBasis`], stored row-major.
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    pub basis: FockBasis,
    pub entries: Vec<Complex64>,
}

impl DensityMatrix {
    pub fn zero(basis: FockBasis) -> Self {
        Self {
            basis,
            entries: vec![Complex64::default(); basis.dim() * basis.dim()],
        }
    }

    pub fn from_pure(state: &FockVector) -> Self {
        let dim = state.basis.dim();
        let mut rho = Self::zero(state.basis);
        for r in 0..dim {
            for c in 0..dim {
                rho.entries[r * dim + c] = state.amp[r] * state.amp[c].conj();
            }
        }
        rho
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.entries[r * self.basis.dim() + c]
    }

    pub fn trace(&self) -> Complex64 {
        let dim = self.basis.dim();
        (0..dim).map(|i| self.entries[i * dim + i]).sum()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let dim = self.basis.dim();
        let mut worst = 0.0f64;
        for r in 0..dim {
            for c in r..dim {
                worst = worst.max((self.get(r, c) - self.get(c, r).conj()).norm());
            }
        }
        worst
    }

    /// Probability in the outermost occupation shell (diagonal weight).
    pub fn top_shell_weight(&self) -> f64 {
        let b = self.basis;
        let m = b.n_max();
        let mut w = 0.0;
        for k in 0..=m {
            w += self.get(b.index(m, k), b.index(m, k)).re;
            if k < m {
                w += self.get(b.index(k, m), b.index(k, m)).re;
            }
        }
        w
    }

    /// Positivity certificate: `rho + tol * I` admits a Cholesky
    /// factorization iff the smallest eigenvalue is at least `-tol`.
    pub fn is_positive_within(&self, tol: f64) -> bool {
        let dim = self.basis.dim();
        let mut m: Vec<Complex64> = self.entries.clone();
        // Symmetrize first so roundoff asymmetry does not spoil the test.
        for r in 0..dim {
            for c in 0..r {
                let avg = 0.5 * (m[r * dim + c] + m[c * dim + r].conj());
                m[r * dim + c] = avg;
                m[c * dim + r] = avg.conj();
            }
            let d = m[r * dim + r].re + tol;
            m[r * dim + r] = Complex64::new(d, 0.0);
        }
        // In-place complex Cholesky; fails on a nonpositive pivot.
        for j in 0..dim {
            let mut d = m[j * dim + j].re;
            for k in 0..j {
                d -= m[j * dim + k].norm_sqr();
            }
            if d <= 0.0 {
                return false;
            }
            let d_sqrt = d.sqrt();
            m[j * dim + j] = Complex64::new(d_sqrt, 0.0);
            for i in (j + 1)..dim {
                let mut s = m[i * dim + j];
                for k in 0..j {
                    s -= m[i * dim + k] * m[j * dim + k].conj();
                }
                m[i * dim + j] = s / d_sqrt;
            }
        }
        true
    }

    /// `sigma_jk = tr(a_j^dag a_k rho)`.
    pub fn spdm(&self) -> [[Complex64; 2]; 2] {
        let b = self.basis;
        let dim = b.dim();
        let mut s11 = Complex64::default();
        let mut s22 = Complex64::default();
        let mut s12 = Complex64::default();
        for r in 0..dim {
            let (n1, n2) = b.label(r);
            let d = self.entries[r * dim + r];
            s11 += d * n1 as f64;
            s22 += d * n2 as f64;
            // tr(a1^dag a2 rho): row (n1, n2) of a1^dag a2 hits column
            // (n1 - 1, n2 + 1) with weight sqrt(n1 (n2 + 1)).
            if n1 > 0 && n2 < b.n_max() {
                let c = b.index(n1 - 1, n2 + 1);
                s12 += self.entries[c * dim + r] * ((n1 * (n2 + 1)) as f64).sqrt();
            }
        }
        [[s11, s12], [s12.conj(), s22]]
    }

    /// Raw traces against the Bloch operators: first element packs
    /// `(2 tr(L_x M), 2 tr(L_y M), 2 tr(L_z M), tr(n M))`, second the ten
    /// symmetrized products `tr((A_j A_k + A_k A_j) M)` in canonical pair
    /// order. Works for density matrices and their derivatives alike.
    pub fn bloch_moments_and_covariances_raw(&self) -> (BlochMoments, [f64; 10]) {
        let dim = self.basis.dim();
        // B M for each Bloch operator.
        let brho: Vec<Vec<Complex64>> = BLOCH_OPS
            .iter()
            .map(|&op| self.apply_bloch_left(op))
            .collect();
        let mean: Vec<f64> = brho
            .iter()
            .map(|m| (0..dim).map(|i| m[i * dim + i].re).sum())
            .collect();
        let mut prod = [[0.0f64; 4]; 4];
        for (aj, a_op) in BLOCH_OPS.iter().enumerate() {
            for bk in 0..4 {
                prod[aj][bk] = self.trace_op_times(*a_op, &brho[bk]).re;
            }
        }
        let sym = |j: usize, k: usize| prod[j][k] + prod[k][j];
        (
            BlochMoments {
                sx: 2.0 * mean[0],
                sy: 2.0 * mean[1],
                sz: 2.0 * mean[2],
                n: mean[3],
            },
            [
                sym(0, 0),
                sym(1, 1),
                sym(2, 2),
                sym(0, 1),
                sym(0, 2),
                sym(1, 2),
                sym(0, 3),
                sym(1, 3),
                sym(2, 3),
                sym(3, 3),
            ],
        )
    }

    /// First and second Bloch moments of a (trace-one) density matrix.
    pub fn bloch_moments_and_covariances(&self) -> (BlochMoments, CovarianceSet) {
        let (m, raw) = self.bloch_moments_and_covariances_raw();
        let a = [0.5 * m.sx, 0.5 * m.sy, 0.5 * m.sz, m.n];
        let pairs = [
            (0, 0),
            (1, 1),
            (2, 2),
            (0, 1),
            (0, 2),
            (1, 2),
            (0, 3),
            (1, 3),
            (2, 3),
            (3, 3),
        ];
        let mut d = [0.0f64; 10];
        for (slot, &(j, k)) in pairs.iter().enumerate() {
            d[slot] = raw[slot] - 2.0 * a[j] * a[k];
        }
        (m, CovarianceSet::from_array(d))
    }

    fn apply_bloch_left(&self, op: BlochOp) -> Vec<Complex64> {
        let b = self.basis;
        let dim = b.dim();
        let mut out = vec![Complex64::default(); dim * dim];
        for r in 0..dim {
            let (m1, m2) = b.label(r);
            for (q, coef) in bloch_row(op, b, m1, m2) {
                let src = &self.entries[q * dim..(q + 1) * dim];
                let dst = &mut out[r * dim..(r + 1) * dim];
                for c in 0..dim {
                    dst[c] += coef * src[c];
                }
            }
        }
        out
    }

    fn trace_op_times(&self, op: BlochOp, m: &[Complex64]) -> Complex64 {
        let b = self.basis;
        let dim = b.dim();
        let mut tr = Complex64::default();
        for r in 0..dim {
            let (m1, m2) = b.label(r);
            for (q, coef) in bloch_row(op, b, m1, m2) {
                tr += coef * m[q * dim + r];
            }
        }
        tr
    }
}

/// Nonzero entries `(column, value)` of row `(m1, m2)` of a Bloch operator.
fn bloch_row(op: BlochOp, b: FockBasis, m1: usize, m2: usize) -> Vec<(usize, Complex64)> {
    let mut row = Vec::with_capacity(2);
    match op {
        BlochOp::Lx | BlochOp::Ly => {
            // <m1, m2| a1^dag a2 |m1-1, m2+1> = sqrt(m1 (m2+1))
            if m1 > 0 && m2 < b.n_max() {
                let c = ((m1 * (m2 + 1)) as f64).sqrt();
                let w = if op == BlochOp::Lx {
                    Complex64::new(0.5 * c, 0.0)
                } else {
                    Complex64::new(0.0, 0.5 * c)
                };
                row.push((b.index(m1 - 1, m2 + 1), w));
            }
            // <m1, m2| a2^dag a1 |m1+1, m2-1> = sqrt((m1+1) m2)
            if m2 > 0 && m1 < b.n_max() {
                let c = (((m1 + 1) * m2) as f64).sqrt();
                let w = if op == BlochOp::Lx {
                    Complex64::new(0.5 * c, 0.0)
                } else {
                    Complex64::new(0.0, -0.5 * c)
                };
                row.push((b.index(m1 + 1, m2 - 1), w));
            }
        }
        BlochOp::Lz => {
            row.push((
                b.index(m1, m2),
                Complex64::new((m2 as f64 - m1 as f64) / 2.0, 0.0),
            ));
        }
        BlochOp::N => {
            row.push((b.index(m1, m2), Complex64::new((m1 + m2) as f64, 0.0)));
        }
    }
    row
}
