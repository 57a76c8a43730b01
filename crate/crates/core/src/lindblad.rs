//! Exact dense integration of the master equation: the coherent
//! Bose-Hubbard dynamics plus loss at site 1 and gain at site 2. Serves
//! as the small-system oracle for the trajectory and moment solvers.
//!
//! Initial states that are block-diagonal in the total particle number
//! (pure product states for instance) stay block-diagonal: the
//! Hamiltonian and both anticommutators preserve the number, and the
//! jump terms map the diagonal `N` block into `N -+ 1`. The solver
//! detects this and integrates the block sequence, which is roughly an
//! order of magnitude smaller than the full matrix.

use num_complex::Complex64;

use crate::bbr::{BlochMoments, CovarianceSet};
use crate::error::{Error, Result};
use crate::fock::{DensityMatrix, FockBasis};
use crate::ode::{self, Dopri5Opts, StopReason};
use crate::params::SystemParams;
use crate::shells::{shell_range, ShellTables};

/// Truncation-monitor thresholds: probability in the outermost
/// occupation shell above `TRUNCATION_WARN` sets a warning flag; above
/// `TRUNCATION_ABORT` the run is aborted.
pub const TRUNCATION_WARN: f64 = 1e-8;
pub const TRUNCATION_ABORT: f64 = 1e-4;

// ---------------------------------------------------------------------------
// Full-matrix Liouvillian.
// ---------------------------------------------------------------------------

/// Per-basis-index tables for the full-matrix Liouvillian kernel.
struct LiouvTables {
    dim: usize,
    h_diag: Vec<f64>,
    /// gamma_loss * n1 (anticommutator weight of the loss channel).
    loss_diag: Vec<f64>,
    /// gamma_gain * (n2 + 1) below the cap, zero on it (truncated gain).
    gain_diag: Vec<f64>,
    /// Tunneling rows: up to two `(index, weight)` entries per row with
    /// weight `-J sqrt(...)`.
    tun: Vec<[(usize, f64); 2]>,
    tun_len: Vec<u8>,
    /// Loss shift: index of `(n1+1, n2)` and `sqrt(n1+1)`, if inside.
    up1: Vec<(usize, f64)>,
    /// Gain shift: index of `(n1, n2-1)` and `sqrt(n2)`, if n2 > 0.
    down2: Vec<(usize, f64)>,
}

impl LiouvTables {
    fn build(basis: FockBasis, p: &SystemParams) -> Self {
        let dim = basis.dim();
        let n_max = basis.n_max();
        let mut h_diag = vec![0.0; dim];
        let mut loss_diag = vec![0.0; dim];
        let mut gain_diag = vec![0.0; dim];
        let mut tun = vec![[(0usize, 0.0f64); 2]; dim];
        let mut tun_len = vec![0u8; dim];
        let mut up1 = vec![(usize::MAX, 0.0); dim];
        let mut down2 = vec![(usize::MAX, 0.0); dim];
        for r in 0..dim {
            let (n1, n2) = basis.label(r);
            h_diag[r] = 0.5
                * p.u
                * ((n1 * n1.saturating_sub(1)) as f64 + (n2 * n2.saturating_sub(1)) as f64);
            loss_diag[r] = p.gamma_loss * n1 as f64;
            // L^dag L of the truncated gain operator: (n2 + 1) below the
            // cap, zero on it. The untruncated weight would leak trace
            // through the boundary.
            gain_diag[r] = if n2 < n_max {
                p.gamma_gain * (n2 as f64 + 1.0)
            } else {
                0.0
            };
            let mut k = 0;
            if n1 >= 1 && n2 < n_max {
                tun[r][k] = (
                    basis.index(n1 - 1, n2 + 1),
                    -p.j * ((n1 * (n2 + 1)) as f64).sqrt(),
                );
                k += 1;
            }
            if n2 >= 1 && n1 < n_max {
                tun[r][k] = (
                    basis.index(n1 + 1, n2 - 1),
                    -p.j * (((n1 + 1) * n2) as f64).sqrt(),
                );
                k += 1;
            }
            tun_len[r] = k as u8;
            if n1 < n_max {
                up1[r] = (basis.index(n1 + 1, n2), ((n1 + 1) as f64).sqrt());
            }
            if n2 >= 1 {
                down2[r] = (basis.index(n1, n2 - 1), (n2 as f64).sqrt());
            }
        }
        Self {
            dim,
            h_diag,
            loss_diag,
            gain_diag,
            tun,
            tun_len,
            up1,
            down2,
        }
    }

    /// Full Lindblad right-hand side on a flat row-major density matrix.
    fn apply(&self, p: &SystemParams, rho: &[Complex64], out: &mut [Complex64]) {
        let dim = self.dim;
        let i_unit = Complex64::i();
        for r in 0..dim {
            let row = &rho[r * dim..(r + 1) * dim];
            let out_row = &mut out[r * dim..(r + 1) * dim];
            let hr = self.h_diag[r];
            let decay_r = self.loss_diag[r] + self.gain_diag[r];
            for c in 0..dim {
                // -i (H rho - rho H) diagonal part and both
                // anticommutator halves.
                let mut acc = -i_unit * ((hr - self.h_diag[c]) * row[c]);
                acc -= row[c] * (0.5 * (decay_r + self.loss_diag[c] + self.gain_diag[c]));
                out_row[c] = acc;
            }
            // Tunneling: -i H rho (row structure of H at r).
            for k in 0..self.tun_len[r] as usize {
                let (q, w) = self.tun[r][k];
                let src = &rho[q * dim..(q + 1) * dim];
                for c in 0..dim {
                    out_row[c] -= i_unit * (w * src[c]);
                }
            }
            let (r1, w1) = self.up1[r];
            let (r2, w2) = self.down2[r];
            for c in 0..dim {
                // +i rho H (column structure of H at c).
                let mut acc = Complex64::default();
                for k in 0..self.tun_len[c] as usize {
                    let (q, w) = self.tun[c][k];
                    acc += i_unit * (w * row[q]);
                }
                // Jump terms: gamma_l a1 rho a1^dag, gamma_g a2^dag rho a2.
                if r1 != usize::MAX {
                    let (c1, v1) = self.up1[c];
                    if c1 != usize::MAX {
                        acc += rho[r1 * dim + c1] * (p.gamma_loss * w1 * v1);
                    }
                }
                if r2 != usize::MAX {
                    let (c2, v2) = self.down2[c];
                    if c2 != usize::MAX {
                        acc += rho[r2 * dim + c2] * (p.gamma_gain * w2 * v2);
                    }
                }
                out_row[c] += acc;
            }
        }
    }
}

/// Time derivative of `rho` under the full Lindblad generator:
/// `-i[H, rho] + L_loss rho + L_gain rho`.
pub fn liouvillian_apply(rho: &DensityMatrix, params: &SystemParams) -> DensityMatrix {
    let tables = LiouvTables::build(rho.basis, params);
    let mut out = DensityMatrix::zero(rho.basis);
    tables.apply(params, &rho.entries, &mut out.entries);
    out
}

// ---------------------------------------------------------------------------
// Number-block fast path.
// ---------------------------------------------------------------------------

/// Layout of the block-diagonal representation: one square block per
/// total number `N`, flattened back to back.
struct BlockLayout {
    tables: ShellTables,
    offsets: Vec<usize>,
    lens: Vec<usize>,
    total: usize,
}

impl BlockLayout {
    fn build(n_max: usize, p: &SystemParams) -> Self {
        let tables = ShellTables::build(n_max, p);
        let mut offsets = Vec::with_capacity(2 * n_max + 2);
        let mut lens = Vec::with_capacity(2 * n_max + 1);
        let mut total = 0usize;
        for n_total in 0..=(2 * n_max) {
            let (_, len) = shell_range(n_total, n_max);
            offsets.push(total);
            lens.push(len);
            total += len * len;
        }
        offsets.push(total);
        Self {
            tables,
            offsets,
            lens,
            total,
        }
    }

    /// Lindblad derivative on the diagonal-block representation.
    fn rhs(&self, p: &SystemParams, y: &[Complex64], dy: &mut [Complex64]) {
        let n_max = self.tables.n_max;
        let i_unit = Complex64::i();
        for n_total in 0..=(2 * n_max) {
            let len = self.lens[n_total];
            let co = &self.tables.shells[n_total];
            let off = self.offsets[n_total];
            let rho = &y[off..off + len * len];
            // -i [H, rho] - 1/2 {Gamma, rho}
            for r in 0..len {
                for c in 0..len {
                    let mut acc = -i_unit * ((co.h_diag[r] - co.h_diag[c]) * rho[r * len + c]);
                    acc -= rho[r * len + c] * (0.5 * (co.decay[r] + co.decay[c]));
                    // Tridiagonal tunneling, rows minus columns; H carries
                    // the weight -J hop so -i H rho + i rho H becomes
                    // +iJ (row hops) - iJ (column hops).
                    let mut tun = Complex64::default();
                    if r >= 1 {
                        tun += co.hop[r - 1] * rho[(r - 1) * len + c];
                    }
                    if r + 1 < len {
                        tun += co.hop[r] * rho[(r + 1) * len + c];
                    }
                    if c >= 1 {
                        tun -= co.hop[c - 1] * rho[r * len + c - 1];
                    }
                    if c + 1 < len {
                        tun -= co.hop[c] * rho[r * len + c + 1];
                    }
                    acc += i_unit * (p.j * tun);
                    dy[off + r * len + c] = acc;
                }
            }
            // Loss feed from block N + 1: gamma_l a1 rho_{N+1} a1^dag.
            if p.gamma_loss > 0.0 && n_total + 1 <= 2 * n_max {
                let src_len = self.lens[n_total + 1];
                let src_off = self.offsets[n_total + 1];
                let (s_dst, _) = shell_range(n_total, n_max);
                let (s_src, _) = shell_range(n_total + 1, n_max);
                for r in 0..len {
                    let n1r = s_dst + r;
                    if n1r + 1 > n_max {
                        continue;
                    }
                    let sr = n1r + 1 - s_src;
                    let wr = ((n1r + 1) as f64).sqrt();
                    for c in 0..len {
                        let n1c = s_dst + c;
                        if n1c + 1 > n_max {
                            continue;
                        }
                        let sc = n1c + 1 - s_src;
                        let w = p.gamma_loss * wr * ((n1c + 1) as f64).sqrt();
                        dy[off + r * len + c] += y[src_off + sr * src_len + sc] * w;
                    }
                }
            }
            // Gain feed from block N - 1: gamma_g a2^dag rho_{N-1} a2.
            if p.gamma_gain > 0.0 && n_total >= 1 {
                let src_len = self.lens[n_total - 1];
                let src_off = self.offsets[n_total - 1];
                let (s_dst, _) = shell_range(n_total, n_max);
                let (s_src, _) = shell_range(n_total - 1, n_max);
                for r in 0..len {
                    let n1r = s_dst + r;
                    let n2r = n_total - n1r;
                    if n2r == 0 || n1r < s_src || n1r - s_src >= src_len {
                        continue;
                    }
                    let sr = n1r - s_src;
                    let wr = (n2r as f64).sqrt();
                    for c in 0..len {
                        let n1c = s_dst + c;
                        let n2c = n_total - n1c;
                        if n2c == 0 || n1c < s_src || n1c - s_src >= src_len {
                            continue;
                        }
                        let sc = n1c - s_src;
                        let w = p.gamma_gain * wr * (n2c as f64).sqrt();
                        dy[off + r * len + c] += y[src_off + sr * src_len + sc] * w;
                    }
                }
            }
        }
    }

    fn trace(&self, y: &[Complex64]) -> f64 {
        let mut tr = 0.0;
        for (n_total, &len) in self.lens.iter().enumerate() {
            let off = self.offsets[n_total];
            for i in 0..len {
                tr += y[off + i * len + i].re;
            }
        }
        tr
    }

    fn top_shell_weight(&self, y: &[Complex64]) -> f64 {
        let n_max = self.tables.n_max;
        let mut w = 0.0;
        for n_total in n_max..=(2 * n_max) {
            let len = self.lens[n_total];
            let off = self.offsets[n_total];
            let (start, _) = shell_range(n_total, n_max);
            // n1 = n_max at the last slot, n2 = n_max at the first.
            if start + len - 1 == n_max {
                w += y[off + (len - 1) * len + (len - 1)].re;
            }
            if n_total - start == n_max && len > 1 {
                w += y[off].re;
            }
        }
        w
    }

    /// All blocks positive semidefinite within `tol` (Cholesky test).
    fn positive_within(&self, y: &[Complex64], tol: f64) -> bool {
        for (n_total, &len) in self.lens.iter().enumerate() {
            let off = self.offsets[n_total];
            let mut m: Vec<Complex64> = y[off..off + len * len].to_vec();
            for r in 0..len {
                for c in 0..r {
                    let avg = 0.5 * (m[r * len + c] + m[c * len + r].conj());
                    m[r * len + c] = avg;
                    m[c * len + r] = avg.conj();
                }
                let d = m[r * len + r].re + tol;
                m[r * len + r] = Complex64::new(d, 0.0);
            }
            for j in 0..len {
                let mut d = m[j * len + j].re;
                for k in 0..j {
                    d -= m[j * len + k].norm_sqr();
                }
                if d <= 0.0 {
                    return false;
                }
                let d_sqrt = d.sqrt();
                m[j * len + j] = Complex64::new(d_sqrt, 0.0);
                for i in (j + 1)..len {
                    let mut s = m[i * len + j];
                    for k in 0..j {
                        s -= m[i * len + k] * m[j * len + k].conj();
                    }
                    m[i * len + j] = s / d_sqrt;
                }
            }
        }
        true
    }

    /// First Bloch moments and raw symmetrized second products.
    fn moments(&self, y: &[Complex64]) -> (BlochMoments, [f64; 10]) {
        let n_max = self.tables.n_max;
        let mut mean = [0.0f64; 4];
        let mut prod = [[0.0f64; 4]; 4];
        let mut bm: Vec<Complex64> = Vec::new();
        for n_total in 0..=(2 * n_max) {
            let len = self.lens[n_total];
            let off = self.offsets[n_total];
            let co = &self.tables.shells[n_total];
            let rho = &y[off..off + len * len];
            bm.clear();
            bm.resize(4 * len * len, Complex64::default());
            for op in 0..4 {
                let chunk = &mut bm[op * len * len..(op + 1) * len * len];
                apply_bloch_block(op, co, n_total, len, rho, chunk);
            }
            for op in 0..4 {
                let m = &bm[op * len * len..(op + 1) * len * len];
                for i in 0..len {
                    mean[op] += m[i * len + i].re;
                }
            }
            for a_op in 0..4 {
                for b_op in 0..4 {
                    let m = &bm[b_op * len * len..(b_op + 1) * len * len];
                    prod[a_op][b_op] += trace_bloch_times(a_op, co, n_total, len, m);
                }
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
}

/// `op`: 0 = L_x, 1 = L_y, 2 = L_z, 3 = n. Computes `A rho_N` on a
/// block. L_x and L_y couple neighbouring occupations within the shell.
fn apply_bloch_block(
    op: usize,
    co: &crate::shells::ShellCoeffs,
    n_total: usize,
    len: usize,
    rho: &[Complex64],
    out: &mut [Complex64],
) {
    match op {
        0 | 1 => {
            for r in 0..len {
                for c in 0..len {
                    let mut acc = Complex64::default();
                    if r >= 1 {
                        let w = 0.5 * co.hop[r - 1];
                        let z = rho[(r - 1) * len + c];
                        acc += if op == 0 {
                            w * z
                        } else {
                            Complex64::new(0.0, w) * z
                        };
                    }
                    if r + 1 < len {
                        let w = 0.5 * co.hop[r];
                        let z = rho[(r + 1) * len + c];
                        acc += if op == 0 {
                            w * z
                        } else {
                            Complex64::new(0.0, -w) * z
                        };
                    }
                    out[r * len + c] = acc;
                }
            }
        }
        2 => {
            for r in 0..len {
                let n1 = co.n1_start + r;
                let w = (n_total as f64 - 2.0 * n1 as f64) / 2.0;
                for c in 0..len {
                    out[r * len + c] = w * rho[r * len + c];
                }
            }
        }
        _ => {
            let w = n_total as f64;
            for (o, z) in out.iter_mut().zip(rho) {
                *o = w * *z;
            }
        }
    }
}

/// `tr(A M)` for a Bloch operator and a block-local matrix `M`.
fn trace_bloch_times(
    op: usize,
    co: &crate::shells::ShellCoeffs,
    n_total: usize,
    len: usize,
    m: &[Complex64],
) -> f64 {
    let mut tr = Complex64::default();
    match op {
        0 | 1 => {
            for r in 0..len {
                if r >= 1 {
                    let w = 0.5 * co.hop[r - 1];
                    let z = m[(r - 1) * len + r];
                    tr += if op == 0 {
                        w * z
                    } else {
                        Complex64::new(0.0, w) * z
                    };
                }
                if r + 1 < len {
                    let w = 0.5 * co.hop[r];
                    let z = m[(r + 1) * len + r];
                    tr += if op == 0 {
                        w * z
                    } else {
                        Complex64::new(0.0, -w) * z
                    };
                }
            }
        }
        2 => {
            for r in 0..len {
                let n1 = co.n1_start + r;
                tr += m[r * len + r] * ((n_total as f64 - 2.0 * n1 as f64) / 2.0);
            }
        }
        _ => {
            for r in 0..len {
                tr += m[r * len + r] * (n_total as f64);
            }
        }
    }
    tr.re
}

/// Whether every nonzero entry of `rho` connects equal total numbers.
fn is_number_block_diagonal(rho: &DensityMatrix) -> bool {
    let b = rho.basis;
    let dim = b.dim();
    for r in 0..dim {
        let (n1, n2) = b.label(r);
        for c in 0..dim {
            if rho.entries[r * dim + c] != Complex64::default() {
                let (m1, m2) = b.label(c);
                if n1 + n2 != m1 + m2 {
                    return false;
                }
            }
        }
    }
    true
}

fn blocks_from_dense(layout: &BlockLayout, rho: &DensityMatrix) -> Vec<Complex64> {
    let b = rho.basis;
    let dim = b.dim();
    let n_max = b.n_max();
    let mut y = vec![Complex64::default(); layout.total];
    for r in 0..dim {
        let (n1, n2) = b.label(r);
        let n_total = n1 + n2;
        let (start, len) = shell_range(n_total, n_max);
        for c in 0..dim {
            let v = rho.entries[r * dim + c];
            if v == Complex64::default() {
                continue;
            }
            let (m1, m2) = b.label(c);
            if m1 + m2 != n_total {
                continue;
            }
            y[layout.offsets[n_total] + (n1 - start) * len + (m1 - start)] = v;
        }
    }
    y
}

// ---------------------------------------------------------------------------
// Public integration interface.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct DenseOpts {
    pub rtol: f64,
    pub atol: f64,
    /// Verify positive semidefiniteness (within 1e-6) at output times.
    pub check_positivity: bool,
    /// Top-shell probability beyond which the run aborts. The stimulated
    /// gain builds geometric occupation tails, so matched-truncation
    /// comparisons may disable the abort and rely on the warning flag.
    pub abort_threshold: f64,
}

impl Default for DenseOpts {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            check_positivity: true,
            abort_threshold: TRUNCATION_ABORT,
        }
    }
}

/// Result of a dense integration, with moments extracted at every grid
/// point so large density matrices need not be retained.
#[derive(Debug, Clone)]
pub struct DenseSeries {
    pub t: Vec<f64>,
    pub moments: Vec<BlochMoments>,
    pub covariances: Vec<CovarianceSet>,
    pub truncation_warning: bool,
    /// Largest |tr rho - 1| seen at the output times.
    pub max_trace_error: f64,
    /// All output states positive semidefinite within 1e-6 (only
    /// evaluated when `check_positivity` is set).
    pub positivity_ok: bool,
}

fn raw_to_cov(m: &BlochMoments, raw: &[f64; 10]) -> CovarianceSet {
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
    CovarianceSet::from_array(d)
}

/// Dense integration returning Bloch-form moments and covariances at the
/// grid points. Number-block-diagonal initial states take the fast
/// block path automatically.
pub fn evolve_dense(
    rho0: &DensityMatrix,
    t_grid: &[f64],
    params: &SystemParams,
    opts: &DenseOpts,
) -> Result<DenseSeries> {
    if rho0.hermiticity_error() > 1e-9 {
        return Err(Error::InvalidParameter(
            "initial density matrix is not Hermitian".into(),
        ));
    }
    let mut out = DenseSeries {
        t: Vec::with_capacity(t_grid.len()),
        moments: Vec::with_capacity(t_grid.len()),
        covariances: Vec::with_capacity(t_grid.len()),
        truncation_warning: false,
        max_trace_error: 0.0,
        positivity_ok: true,
    };
    let n_max = rho0.basis.n_max();

    if is_number_block_diagonal(rho0) {
        let layout = BlockLayout::build(n_max, params);
        let y0 = blocks_from_dense(&layout, rho0);
        let p = *params;
        let mut warn = false;
        let ode_opts = Dopri5Opts {
            rtol: opts.rtol,
            atol: opts.atol,
            ..Default::default()
        };
        let layout_ref = &layout;
        let out_ref = &mut out;
        let reason = ode::integrate_to_grid_guarded(
            |_t, y: &[Complex64], dy: &mut [Complex64]| layout_ref.rhs(&p, y, dy),
            t_grid,
            &y0,
            ode_opts,
            |_, t, y| {
                let (m, raw) = layout_ref.moments(y);
                out_ref.t.push(t);
                out_ref.covariances.push(raw_to_cov(&m, &raw));
                out_ref.moments.push(m);
                out_ref.max_trace_error = out_ref
                    .max_trace_error
                    .max((layout_ref.trace(y) - 1.0).abs());
                if opts.check_positivity && !layout_ref.positive_within(y, 1e-6) {
                    out_ref.positivity_ok = false;
                }
            },
            |_, y| {
                let w = layout_ref.top_shell_weight(y);
                if w > TRUNCATION_WARN {
                    warn = true;
                }
                w > opts.abort_threshold
            },
        )?;
        out.truncation_warning = warn;
        match reason {
            StopReason::Completed => Ok(out),
            StopReason::GuardStop { t } => Err(Error::Truncation(format!(
                "top-shell probability exceeded {:.0e} at t = {t}; increase n_max",
                opts.abort_threshold
            ))),
        }
    } else {
        let mut scratch = DensityMatrix::zero(rho0.basis);
        let out_ref = &mut out;
        let warn = evolve_dense_observe_full(rho0, t_grid, params, opts, |_, t, y| {
            scratch.entries.copy_from_slice(y);
            let (m, raw) = scratch.bloch_moments_and_covariances_raw();
            out_ref.t.push(t);
            out_ref.covariances.push(raw_to_cov(&m, &raw));
            out_ref.moments.push(m);
            out_ref.max_trace_error =
                out_ref.max_trace_error.max((scratch.trace().re - 1.0).abs());
            if opts.check_positivity && !scratch.is_positive_within(1e-6) {
                out_ref.positivity_ok = false;
            }
        })?;
        out.truncation_warning = warn;
        Ok(out)
    }
}

/// Full-matrix integration handing the flat state to `observe` at every
/// grid point.
fn evolve_dense_observe_full(
    rho0: &DensityMatrix,
    t_grid: &[f64],
    params: &SystemParams,
    opts: &DenseOpts,
    mut observe: impl FnMut(usize, f64, &[Complex64]),
) -> Result<bool> {
    let basis = rho0.basis;
    let tables = LiouvTables::build(basis, params);
    let p = *params;
    let ode_opts = Dopri5Opts {
        rtol: opts.rtol,
        atol: opts.atol,
        ..Default::default()
    };
    let mut warn = false;
    let reason = ode::integrate_to_grid_guarded(
        move |_t, y: &[Complex64], dy: &mut [Complex64]| tables.apply(&p, y, dy),
        t_grid,
        &rho0.entries,
        ode_opts,
        |idx, t, y| observe(idx, t, y),
        |_, y| {
            let w = top_shell_weight_flat(basis, y);
            if w > TRUNCATION_WARN {
                warn = true;
            }
            w > opts.abort_threshold
        },
    )?;
    match reason {
        StopReason::Completed => Ok(warn),
        StopReason::GuardStop { t } => Err(Error::Truncation(format!(
            "top-shell probability exceeded {:.0e} at t = {t}; increase n_max",
            opts.abort_threshold
        ))),
    }
}

/// Dense integration retaining the full density matrix at every grid
/// point. Only sensible for small bases; always takes the full-matrix
/// path.
pub fn evolve_dense_states(
    rho0: &DensityMatrix,
    t_grid: &[f64],
    params: &SystemParams,
    opts: &DenseOpts,
) -> Result<Vec<DensityMatrix>> {
    if rho0.hermiticity_error() > 1e-9 {
        return Err(Error::InvalidParameter(
            "initial density matrix is not Hermitian".into(),
        ));
    }
    let mut states = Vec::with_capacity(t_grid.len());
    let basis = rho0.basis;
    evolve_dense_observe_full(rho0, t_grid, params, opts, |_, _, y| {
        states.push(DensityMatrix {
            basis,
            entries: y.to_vec(),
        });
    })?;
    Ok(states)
}

fn top_shell_weight_flat(basis: FockBasis, rho: &[Complex64]) -> f64 {
    let dim = basis.dim();
    let m = basis.n_max();
    let mut w = 0.0;
    for k in 0..=m {
        let i = basis.index(m, k);
        w += rho[i * dim + i].re;
        if k < m {
            let j = basis.index(k, m);
            w += rho[j * dim + j].re;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbr::{bloch_derivative, GeneralMoments, SiteRates};
    use crate::fock::{product_state, FockVector};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_hermitian(basis: FockBasis, rng: &mut impl Rng) -> DensityMatrix {
        let dim = basis.dim();
        let mut rho = DensityMatrix::zero(basis);
        for r in 0..dim {
            for c in r..dim {
                let z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                if r == c {
                    rho.entries[r * dim + c] = Complex64::new(z.re.abs(), 0.0);
                } else {
                    rho.entries[r * dim + c] = z;
                    rho.entries[c * dim + r] = z.conj();
                }
            }
        }
        let tr = rho.trace().re;
        for e in &mut rho.entries {
            *e /= tr;
        }
        rho
    }

    #[test]
    fn vacuum_feels_only_gain() {
        let basis = FockBasis::new(3);
        let p = SystemParams::with_rates(1.0, 0.0, 1, 0.7, 0.3).unwrap();
        let vac = FockVector::basis_state(basis, 0, 0).unwrap();
        let rho = DensityMatrix::from_pure(&vac);
        let d = liouvillian_apply(&rho, &p);
        let dim = basis.dim();
        let i00 = basis.index(0, 0);
        let i01 = basis.index(0, 1);
        // d rho = gamma_gain (|0,1><0,1| - |0,0><0,0|)
        for r in 0..dim {
            for c in 0..dim {
                let v = d.entries[r * dim + c];
                let expect = if r == i00 && c == i00 {
                    Complex64::new(-0.3, 0.0)
                } else if r == i01 && c == i01 {
                    Complex64::new(0.3, 0.0)
                } else {
                    Complex64::default()
                };
                assert!((v - expect).norm() < 1e-14, "entry ({r},{c}) = {v}");
            }
        }
    }

    #[test]
    fn trace_free_for_random_states() {
        let basis = FockBasis::new(4);
        let p = SystemParams::balanced(1.0, 0.8, 3, 1.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let rho = random_hermitian(basis, &mut rng);
            let d = liouvillian_apply(&rho, &p);
            assert!(d.trace().norm() < 1e-12, "trace {}", d.trace());
            assert!(d.hermiticity_error() < 1e-12);
        }
    }

    #[test]
    fn closed_system_is_pure_commutator() {
        let basis = FockBasis::new(4);
        let p = SystemParams::with_rates(1.0, 0.5, 3, 0.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rho = random_hermitian(basis, &mut rng);
        let d = liouvillian_apply(&rho, &p);
        assert!(d.trace().norm() < 1e-12);
        assert!(d.hermiticity_error() < 1e-12);
    }

    #[test]
    fn rabi_oscillation_of_single_particle() {
        let basis = FockBasis::new(2);
        let p = SystemParams::with_rates(1.0, 0.0, 1, 0.0, 0.0).unwrap();
        let psi = FockVector::basis_state(basis, 1, 0).unwrap();
        let rho0 = DensityMatrix::from_pure(&psi);
        let t_grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.2).collect();
        let series = evolve_dense(&rho0, &t_grid, &p, &DenseOpts::default()).unwrap();
        for (k, &t) in t_grid.iter().enumerate() {
            let n1 = 0.5 * (series.moments[k].n - series.moments[k].sz);
            assert_relative_eq!(n1, (t).cos().powi(2), epsilon = 1e-7);
        }
        assert!(series.max_trace_error < 1e-10);
        assert!(series.positivity_ok);
    }

    #[test]
    fn pure_loss_decays_exponentially() {
        let basis = FockBasis::new(2);
        let p = SystemParams::with_rates(0.0, 0.0, 1, 0.9, 0.0).unwrap();
        let psi = FockVector::basis_state(basis, 1, 0).unwrap();
        let rho0 = DensityMatrix::from_pure(&psi);
        let t_grid: Vec<f64> = (0..=10).map(|i| i as f64 * 0.5).collect();
        let series = evolve_dense(&rho0, &t_grid, &p, &DenseOpts::default()).unwrap();
        for (k, &t) in t_grid.iter().enumerate() {
            let n1 = 0.5 * (series.moments[k].n - series.moments[k].sz);
            assert_relative_eq!(n1, (-0.9 * t).exp(), epsilon = 1e-8);
        }
    }

    #[test]
    fn zero_time_grid_returns_initial_state() {
        let basis = FockBasis::new(3);
        let p = SystemParams::balanced(1.0, 0.3, 2, 0.8).unwrap();
        let psi = product_state(0.3, 1.0, 2, basis).unwrap();
        let rho0 = DensityMatrix::from_pure(&psi);
        let states = evolve_dense_states(&rho0, &[0.0], &p, &DenseOpts::default()).unwrap();
        assert_eq!(states.len(), 1);
        for (a, b) in states[0].entries.iter().zip(&rho0.entries) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn block_path_matches_full_path() {
        // A sharp-number initial state takes the block path in
        // evolve_dense; compare against the explicit full-matrix
        // integration on the same grid.
        let basis = FockBasis::new(16);
        let p = SystemParams::balanced(1.0, 0.6, 3, 0.9).unwrap();
        let psi = product_state(0.8, 1.9, 3, basis).unwrap();
        let rho0 = DensityMatrix::from_pure(&psi);
        let t_grid: Vec<f64> = (0..=6).map(|i| i as f64 * 0.2).collect();
        let fast = evolve_dense(&rho0, &t_grid, &p, &DenseOpts::default()).unwrap();
        let states = evolve_dense_states(&rho0, &t_grid, &p, &DenseOpts::default()).unwrap();
        for (k, rho) in states.iter().enumerate() {
            let (m, c) = rho.bloch_moments_and_covariances();
            for (a, b) in m.as_array().iter().zip(fast.moments[k].as_array()) {
                assert_relative_eq!(*a, b, epsilon = 1e-7, max_relative = 1e-7);
            }
            for (a, b) in c.as_array().iter().zip(fast.covariances[k].as_array()) {
                assert_relative_eq!(*a, b, epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn sigma_derivative_matches_moment_hierarchy_exactly() {
        // The first-order moment equations carry no closure error, so
        // tr(T_jk L rho) must equal the hierarchy derivative exactly,
        // for any interaction strength.
        let basis = FockBasis::new(8);
        let p = SystemParams::balanced(1.0, 1.3, 4, 0.9).unwrap();
        let psi = product_state(0.7, 1.9, 4, basis).unwrap();
        let rho = DensityMatrix::from_pure(&psi);
        let drho = liouvillian_apply(&rho, &p);

        let (m, _) = rho.bloch_moments_and_covariances();
        let gm = GeneralMoments::from_state(&psi);
        let (s_check, c) = gm.to_bloch();
        assert_relative_eq!(m.sx, s_check.sx, epsilon = 1e-10);

        let (dm, _) = drho.bloch_moments_and_covariances_raw();
        let (ds, _) = bloch_derivative(&s_check, &c, &p);
        assert_relative_eq!(dm.sx, ds.sx, epsilon = 1e-9, max_relative = 1e-9);
        assert_relative_eq!(dm.sy, ds.sy, epsilon = 1e-9, max_relative = 1e-9);
        assert_relative_eq!(dm.sz, ds.sz, epsilon = 1e-9, max_relative = 1e-9);
        assert_relative_eq!(dm.n, ds.n, epsilon = 1e-9, max_relative = 1e-9);
    }

    #[test]
    fn covariance_derivative_matches_hierarchy_without_interaction() {
        // At U = 0 the covariance equations are exact as well: compare
        // d Delta from the dense generator against the general
        // derivative on a mixed state.
        let basis = FockBasis::new(8);
        let p = SystemParams::balanced(1.0, 0.0, 4, 1.2).unwrap();
        let rates = SiteRates::dimer(&p);
        let psi_a = product_state(0.7, 1.9, 4, basis).unwrap();
        let psi_b = product_state(2.9, 0.8, 3, basis).unwrap();
        let dim = basis.dim();
        let mut rho = DensityMatrix::zero(basis);
        for r in 0..dim {
            for c in 0..dim {
                rho.entries[r * dim + c] = 0.6 * psi_a.amp[r] * psi_a.amp[c].conj()
                    + 0.4 * psi_b.amp[r] * psi_b.amp[c].conj();
            }
        }
        let drho = liouvillian_apply(&rho, &p);

        let gm = general_from_density(&rho);
        let d_gm = crate::bbr::general_derivative(&gm, &rates, &p);
        let (_, dc_hier) = d_gm.to_bloch();

        // Dense derivative of the covariances:
        // d Delta_AB = tr((AB + BA) drho) - 2 d<A><B> - 2 <A> d<B>.
        let (m0, _) = rho.bloch_moments_and_covariances_raw();
        let (dm, dp) = drho.bloch_moments_and_covariances_raw();
        let a0 = [0.5 * m0.sx, 0.5 * m0.sy, 0.5 * m0.sz, m0.n];
        let da = [0.5 * dm.sx, 0.5 * dm.sy, 0.5 * dm.sz, dm.n];
        let mut dc = [0.0f64; 10];
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
        for (slot, &(j, k)) in pairs.iter().enumerate() {
            dc[slot] = dp[slot] - 2.0 * (da[j] * a0[k] + a0[j] * da[k]);
        }
        for (a, b) in dc.iter().zip(dc_hier.as_array()) {
            assert_relative_eq!(*a, b, epsilon = 1e-8, max_relative = 1e-8);
        }
    }

    fn general_from_density(rho: &DensityMatrix) -> GeneralMoments {
        // Covariances are not linear in rho, so evaluate traces directly.
        let b = rho.basis;
        let dim = b.dim();
        let mut gm = GeneralMoments::zero(2);
        let t_op = |p: usize, q: usize, rho: &DensityMatrix| -> Vec<Complex64> {
            // T_pq rho as a flat matrix, T_pq = a_p^dag a_q.
            let mut out = vec![Complex64::default(); dim * dim];
            for r in 0..dim {
                let (n1, n2) = b.label(r);
                let (w, src) = match (p, q) {
                    (0, 0) => (n1 as f64, (n1, n2)),
                    (1, 1) => (n2 as f64, (n1, n2)),
                    (0, 1) => {
                        if n1 >= 1 && n2 < b.n_max() {
                            (((n1 * (n2 + 1)) as f64).sqrt(), (n1 - 1, n2 + 1))
                        } else {
                            continue;
                        }
                    }
                    (1, 0) => {
                        if n2 >= 1 && n1 < b.n_max() {
                            ((((n1 + 1) * n2) as f64).sqrt(), (n1 + 1, n2 - 1))
                        } else {
                            continue;
                        }
                    }
                    _ => unreachable!(),
                };
                let src = b.index(src.0, src.1);
                for c in 0..dim {
                    out[r * dim + c] += w * rho.entries[src * dim + c];
                }
            }
            out
        };
        let trace = |m: &[Complex64]| -> Complex64 { (0..dim).map(|i| m[i * dim + i]).sum() };
        let mut t_rho = Vec::new();
        for p in 0..2 {
            for q in 0..2 {
                t_rho.push(t_op(p, q, rho));
            }
        }
        for p in 0..2 {
            for q in 0..2 {
                gm.sigma[p * 2 + q] = trace(&t_rho[p * 2 + q]);
            }
        }
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    for mm in 0..2 {
                        let tmp = DensityMatrix {
                            basis: b,
                            entries: t_rho[l * 2 + mm].clone(),
                        };
                        let both = t_op(j, k, &tmp);
                        let second = trace(&both);
                        let idx = ((j * 2 + k) * 2 + l) * 2 + mm;
                        gm.delta[idx] = second - gm.sigma[j * 2 + k] * gm.sigma[l * 2 + mm];
                    }
                }
            }
        }
        gm
    }

    #[test]
    fn gain_distribution_matches_exact_law() {
        // Pure gain from the vacuum is exactly solvable:
        // P(n2 = k, t) = e^{-gt} (1 - e^{-gt})^k. The geometric tail is
        // what drives the truncation-cap requirements.
        let g = 0.6;
        let t_final = 2.0;
        let p = SystemParams::with_rates(0.0, 0.0, 1, 0.0, g).unwrap();
        let basis = FockBasis::new(60);
        let vac = FockVector::basis_state(basis, 0, 0).unwrap();
        let rho0 = DensityMatrix::from_pure(&vac);
        let layout = BlockLayout::build(60, &p);
        let y0 = blocks_from_dense(&layout, &rho0);
        let mut final_y = y0.clone();
        crate::ode::integrate_to_grid(
            |_t, y: &[Complex64], dy: &mut [Complex64]| layout.rhs(&p, y, dy),
            &[0.0, t_final],
            &y0,
            crate::ode::Dopri5Opts {
                rtol: 1e-9,
                atol: 1e-13,
                ..Default::default()
            },
            |idx, _t, y| {
                if idx == 1 {
                    final_y.copy_from_slice(y);
                }
            },
        )
        .unwrap();
        let q = 1.0 - (-g * t_final).exp();
        for k in [0usize, 3, 10, 25, 40] {
            let got = final_y[layout.offsets[k]].re;
            let exact = (1.0 - q) * q.powi(k as i32);
            assert_relative_eq!(got, exact, max_relative = 1e-4, epsilon = 1e-12);
        }
    }

    #[test]
    fn trace_and_positivity_preserved_over_time() {
        let basis = FockBasis::new(40);
        let p = SystemParams::balanced(1.0, 0.5, 3, 1.0).unwrap();
        let psi = product_state(1.2, 1.6, 3, basis).unwrap();
        let rho0 = DensityMatrix::from_pure(&psi);
        let t_grid: Vec<f64> = (0..=8).map(|i| i as f64 * 0.25).collect();
        let series = evolve_dense(&rho0, &t_grid, &p, &DenseOpts::default()).unwrap();
        assert!(series.max_trace_error < 1e-8, "{}", series.max_trace_error);
        assert!(series.positivity_ok);
        // The gain process has heavy occupation tails; the monitor must
        // at most warn at this cap over this horizon.
        let tighter = FockBasis::new(12);
        let psi = product_state(1.2, 1.6, 3, tighter).unwrap();
        let rho0 = DensityMatrix::from_pure(&psi);
        assert!(matches!(
            evolve_dense(&rho0, &t_grid, &p, &DenseOpts::default()),
            Err(Error::Truncation(_))
        ));
    }
}
