//! Quantum-jump (Monte Carlo wave function) unraveling of the master
//! equation.
//!
//! Between jumps the state drifts under the non-Hermitian generator
//! `H_eff = H - (i/2)[gamma_loss n_1 + gamma_gain (n_2 + 1)]`; a jump
//! fires when the squared norm crosses a pre-drawn uniform threshold,
//! located inside the accepted step with the integrator's fifth-order
//! interpolant. Both `H` and the drift conserve the total particle
//! number and each jump shifts it by one, so a trajectory started from a
//! sharp-number state always lives on a single number shell. States are
//! therefore stored shell-wise: the dynamics on shell `N` is tridiagonal
//! of size `N + 1` (clipped by the per-mode cap), which is what makes
//! ensembles at `N0 = 100` affordable. The per-mode truncation semantics
//! of [`FockBasis`] are preserved exactly: shell entries with an
//! occupation beyond `n_max` do not exist, and the monitor watches the
//! probability sitting on the cap.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bbr::{BlochMoments, CovarianceSet};
use crate::error::{Error, Result};
use crate::fock::{FockVector, Site};
use crate::shells::{shell_range, ShellTables};
use crate::lindblad::{TRUNCATION_ABORT, TRUNCATION_WARN};
use crate::ode::{Dopri5Opts, Stepper};
use crate::params::SystemParams;

/// One dissipation channel of the dimer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpChannel {
    pub site: Site,
    pub kind: JumpKind,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JumpKind {
    Loss,
    Gain,
}

/// The two channels of the balanced-gain-loss dimer: loss (`a_1`) at
/// site 1 and gain (`a_2^dag`) at site 2.
pub fn channels(params: &SystemParams) -> [JumpChannel; 2] {
    [
        JumpChannel {
            site: Site::One,
            kind: JumpKind::Loss,
            rate: params.gamma_loss,
        },
        JumpChannel {
            site: Site::Two,
            kind: JumpKind::Gain,
            rate: params.gamma_gain,
        },
    ]
}

#[derive(Debug, Clone, Copy)]
pub struct JumpOpts {
    pub rtol: f64,
    pub atol: f64,
    /// Per-trajectory cap-occupation fraction beyond which the run
    /// aborts; matched-truncation comparisons may disable it and rely on
    /// the warning flag.
    pub abort_threshold: f64,
}

impl Default for JumpOpts {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-10,
            abort_threshold: TRUNCATION_ABORT,
        }
    }
}

/// First- and second-order Bloch moments at one time.
#[derive(Debug, Clone, Copy, Default)]
pub struct MomentRecord {
    pub moments: BlochMoments,
    pub cov: CovarianceSet,
}

/// Ensemble means, standard errors and bookkeeping of a trajectory run.
#[derive(Debug, Clone)]
pub struct TrajectoryEnsembleResult {
    pub t: Vec<f64>,
    pub means: Vec<MomentRecord>,
    pub stderr: Vec<MomentRecord>,
    /// Sample covariance of the per-trajectory first moments
    /// `(s_x, s_y, s_z, n)`, upper triangle row-major (10 entries), per
    /// time point. Needed to propagate errors into derived quantities.
    pub first_moment_cov: Vec<[f64; 10]>,
    pub n_traj: usize,
    pub seed: u64,
    pub n_max: usize,
    pub jump_counts: Vec<u64>,
    pub truncation_warning: bool,
}

impl TrajectoryEnsembleResult {
    /// Purity of the ensemble-averaged moments with its standard error
    /// (linear error propagation through `P = (s.s)/n^2`).
    pub fn purity_with_stderr(&self) -> (Vec<f64>, Vec<f64>) {
        let mut p_out = Vec::with_capacity(self.t.len());
        let mut e_out = Vec::with_capacity(self.t.len());
        for (rec, cov) in self.means.iter().zip(&self.first_moment_cov) {
            let m = rec.moments;
            let p = (m.sx * m.sx + m.sy * m.sy + m.sz * m.sz) / (m.n * m.n);
            let grad = [
                2.0 * m.sx / (m.n * m.n),
                2.0 * m.sy / (m.n * m.n),
                2.0 * m.sz / (m.n * m.n),
                -2.0 * p / m.n,
            ];
            let idx = |j: usize, k: usize| {
                let (a, b) = if j <= k { (j, k) } else { (k, j) };
                // upper-triangle row-major offset
                a * 4 + b - a * (a + 1) / 2
            };
            let mut var = 0.0;
            for j in 0..4 {
                for k in 0..4 {
                    var += grad[j] * grad[k] * cov[idx(j, k)];
                }
            }
            p_out.push(p);
            e_out.push((var.max(0.0) / self.n_traj as f64).sqrt());
        }
        (p_out, e_out)
    }
}

// ---------------------------------------------------------------------------
// Trajectory state and per-trajectory simulation.
// ---------------------------------------------------------------------------

/// Trajectory state: amplitudes over a contiguous band of number shells.
/// Sharp-number initial states keep the band at width one for the whole
/// run.
#[derive(Clone)]
struct ShellState {
    n_lo: usize,
    shells: Vec<Vec<Complex64>>,
}

impl ShellState {
    fn from_fock(psi: &FockVector) -> Result<Self> {
        let n_max = psi.basis.n_max();
        let mut by_total: Vec<Vec<Complex64>> = (0..=(2 * n_max))
            .map(|n_total| vec![Complex64::default(); shell_range(n_total, n_max).1])
            .collect();
        let mut weights = vec![0.0f64; 2 * n_max + 1];
        for n1 in 0..=n_max {
            for n2 in 0..=n_max {
                let a = psi.amp[psi.basis.index(n1, n2)];
                if a == Complex64::default() {
                    continue;
                }
                let n_total = n1 + n2;
                let (start, _) = shell_range(n_total, n_max);
                by_total[n_total][n1 - start] = a;
                weights[n_total] += a.norm_sqr();
            }
        }
        let n_lo = weights.iter().position(|&w| w > 0.0);
        let n_hi = weights.iter().rposition(|&w| w > 0.0);
        match (n_lo, n_hi) {
            (Some(lo), Some(hi)) => Ok(Self {
                n_lo: lo,
                shells: by_total.drain(lo..=hi).collect(),
            }),
            _ => Err(Error::NumericalFailure(
                "initial trajectory state has zero norm".into(),
            )),
        }
    }


    fn flatten_into(&self, out: &mut Vec<Complex64>) {
        out.clear();
        for s in &self.shells {
            out.extend_from_slice(s);
        }
    }

    fn unflatten_from(&mut self, flat: &[Complex64]) {
        let mut off = 0;
        for s in &mut self.shells {
            let len = s.len();
            s.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
    }

    fn norm_sq(&self) -> f64 {
        self.shells
            .iter()
            .flat_map(|s| s.iter())
            .map(|a| a.norm_sqr())
            .sum()
    }

    fn scale(&mut self, f: f64) {
        for s in &mut self.shells {
            for a in s.iter_mut() {
                *a *= f;
            }
        }
    }

    /// Probability on the per-mode occupation cap, relative to the norm.
    fn cap_weight(&self, tables: &ShellTables) -> f64 {
        let n_max = tables.n_max;
        let mut w = 0.0;
        for (s, amp) in self.shells.iter().enumerate() {
            let n_total = self.n_lo + s;
            if n_total < n_max {
                continue;
            }
            let (start, len) = shell_range(n_total, n_max);
            // n1 = n_max sits at the end, n2 = n_max (n1 = start) at the
            // beginning of the shell slice.
            if start + len - 1 == n_max {
                w += amp[len - 1].norm_sqr();
            }
            if n_total - start == n_max && len > 1 {
                w += amp[0].norm_sqr();
            }
        }
        let n2 = self.norm_sq();
        if n2 > 0.0 {
            w / n2
        } else {
            0.0
        }
    }
}

// ---------------------------------------------------------------------------
// Per-trajectory simulation.
// ---------------------------------------------------------------------------

struct TrajOutput {
    /// Per time point: raw means <L_x>, <L_y>, <L_z>, <n>.
    a: Vec<[f64; 4]>,
    /// Per time point: symmetrized products <A_j A_k + A_k A_j>.
    p: Vec<[f64; 10]>,
    jumps: u64,
    warn: bool,
}

fn rhs_shells(
    tables: &ShellTables,
    n_lo: usize,
    lens: &[usize],
    j_rate: f64,
    y: &[Complex64],
    dy: &mut [Complex64],
) {
    let mut off = 0;
    for (s, &len) in lens.iter().enumerate() {
        let coeffs = &tables.shells[n_lo + s];
        let y_s = &y[off..off + len];
        let dy_s = &mut dy[off..off + len];
        for i in 0..len {
            // (-i h_diag - decay/2) * y
            let z = y_s[i];
            let d = coeffs.h_diag[i];
            let g = 0.5 * coeffs.decay[i];
            dy_s[i] = Complex64::new(-g * z.re + d * z.im, -g * z.im - d * z.re);
        }
        if j_rate != 0.0 {
            for i in 0..len.saturating_sub(1) {
                // tunneling -J hop (i <-> i+1); -i * (-J hop) = iJ hop
                let w = j_rate * coeffs.hop[i];
                let zr = y_s[i + 1];
                let zl = y_s[i];
                dy_s[i] += Complex64::new(-w * zr.im, w * zr.re);
                dy_s[i + 1] += Complex64::new(-w * zl.im, w * zl.re);
            }
        }
        off += len;
    }
}

/// Bloch-operator images of the flattened state; diagonal ops and
/// within-shell hops only, so everything stays shell-local.
fn bloch_images(
    tables: &ShellTables,
    n_lo: usize,
    lens: &[usize],
    y: &[Complex64],
    w: &mut [Vec<Complex64>; 4],
) {
    for buf in w.iter_mut() {
        buf.clear();
        buf.resize(y.len(), Complex64::default());
    }
    let mut off = 0;
    for (s, &len) in lens.iter().enumerate() {
        let n_total = n_lo + s;
        let coeffs = &tables.shells[n_total];
        let y_s = &y[off..off + len];
        for i in 0..len {
            let n1 = coeffs.n1_start + i;
            let n2 = n_total - n1;
            w[2][off + i] = y_s[i] * ((n2 as f64 - n1 as f64) / 2.0);
            w[3][off + i] = y_s[i] * (n_total as f64);
        }
        for i in 0..len.saturating_sub(1) {
            let hop = coeffs.hop[i];
            // T12 moves amplitude i -> i+1, T21 moves i+1 -> i.
            w[0][off + i + 1] += y_s[i] * (0.5 * hop);
            w[0][off + i] += y_s[i + 1] * (0.5 * hop);
            w[1][off + i + 1] += y_s[i] * Complex64::new(0.0, 0.5 * hop);
            w[1][off + i] += y_s[i + 1] * Complex64::new(0.0, -0.5 * hop);
        }
        off += len;
    }
}

fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn draw_unit_open(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}

struct TrajContext<'a> {
    tables: &'a ShellTables,
    params: &'a SystemParams,
    t_grid: &'a [f64],
    opts: &'a JumpOpts,
    seed: u64,
}

fn run_single(ctx: &TrajContext, traj_idx: usize, psi0: &ShellState) -> Result<TrajOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    rng.set_stream(traj_idx as u64 + 1);

    let mut state = psi0.clone();
    let mut jumps = 0u64;
    let mut warn = false;
    let mut threshold = draw_unit_open(&mut rng);
    let mut h_carry: Option<f64> = None;

    let n_times = ctx.t_grid.len();
    let mut out = TrajOutput {
        a: Vec::with_capacity(n_times),
        p: Vec::with_capacity(n_times),
        jumps: 0,
        warn: false,
    };
    let mut wbufs: [Vec<Complex64>; 4] = Default::default();
    let mut flat: Vec<Complex64> = Vec::new();
    let mut interp: Vec<Complex64> = Vec::new();

    let record = |state: &ShellState,
                  out: &mut TrajOutput,
                  wbufs: &mut [Vec<Complex64>; 4],
                  flat: &mut Vec<Complex64>| {
        let lens: Vec<usize> = state.shells.iter().map(|s| s.len()).collect();
        state.flatten_into(flat);
        let norm = state.norm_sq().sqrt();
        if norm > 0.0 {
            for a in flat.iter_mut() {
                *a /= norm;
            }
        }
        bloch_images(ctx.tables, state.n_lo, &lens, flat, wbufs);
        let mut a = [0.0f64; 4];
        for (j, wj) in wbufs.iter().enumerate() {
            a[j] = inner(flat, wj).re;
        }
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
        let mut p = [0.0f64; 10];
        for (slot, &(j, k)) in pairs.iter().enumerate() {
            p[slot] = 2.0 * inner(&wbufs[j], &wbufs[k]).re;
        }
        out.a.push(a);
        out.p.push(p);
    };

    record(&state, &mut out, &mut wbufs, &mut flat);

    let mut t = ctx.t_grid[0];
    for seg in 1..n_times {
        let t_end = ctx.t_grid[seg];
        'rebuild: loop {
            let lens: Vec<usize> = state.shells.iter().map(|s| s.len()).collect();
            state.flatten_into(&mut flat);
            let n_lo = state.n_lo;
            let tables = ctx.tables;
            let j_rate = ctx.params.j;
            let mut stepper = Stepper::new(
                move |_t, y: &[Complex64], dy: &mut [Complex64]| {
                    rhs_shells(tables, n_lo, &lens, j_rate, y, dy)
                },
                t,
                &flat,
                Dopri5Opts {
                    rtol: ctx.opts.rtol,
                    atol: ctx.opts.atol,
                    h_init: h_carry,
                    ..Default::default()
                },
            );
            loop {
                stepper.advance(t_end - stepper.t)?;
                let norm2: f64 = stepper.y.iter().map(|a| a.norm_sqr()).sum();
                if norm2 < 1e-280 {
                    return Err(Error::NumericalFailure(
                        "trajectory norm underflowed to zero".into(),
                    ));
                }
                if norm2 <= threshold {
                    // Locate the crossing inside [t_old, t] by bisection
                    // on the interpolated squared norm (monotone since the
                    // total decay rate is positive).
                    let (mut lo, mut hi) = stepper.last_interval();
                    interp.resize(stepper.y.len(), Complex64::default());
                    for _ in 0..60 {
                        if hi - lo <= 1e-12 * hi.abs().max(1.0) {
                            break;
                        }
                        let mid = 0.5 * (lo + hi);
                        stepper.dense(mid, &mut interp);
                        let nm: f64 = interp.iter().map(|a| a.norm_sqr()).sum();
                        if nm <= threshold {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    let t_jump = hi;
                    stepper.dense(t_jump, &mut interp);
                    state.unflatten_from(&interp);
                    h_carry = Some(stepper.suggested_step());
                    apply_jump(ctx, &mut state, &mut rng)?;
                    jumps += 1;
                    threshold = draw_unit_open(&mut rng);
                    let w = state.cap_weight(ctx.tables);
                    if w > ctx.opts.abort_threshold {
                        return Err(Error::Truncation(format!(
                            "cap occupation {w:.2e} after jump at t = {t_jump}; increase n_max"
                        )));
                    }
                    if w > TRUNCATION_WARN {
                        warn = true;
                    }
                    t = t_jump;
                    continue 'rebuild;
                }
                if stepper.t >= t_end - 1e-14 * t_end.abs().max(1.0) {
                    state.unflatten_from(&stepper.y);
                    h_carry = Some(stepper.suggested_step());
                    t = t_end;
                    break 'rebuild;
                }
            }
        }
        record(&state, &mut out, &mut wbufs, &mut flat);
        let w = state.cap_weight(ctx.tables);
        if w > ctx.opts.abort_threshold {
            return Err(Error::Truncation(format!(
                "cap occupation {w:.2e} at t = {t_end}; increase n_max"
            )));
        }
        if w > TRUNCATION_WARN {
            warn = true;
        }
    }

    out.jumps = jumps;
    out.warn = warn;
    Ok(out)
}

/// Apply one jump: choose the channel with probability proportional to
/// `rate * <L^dag L>`, apply `a_1` or `a_2^dag`, renormalize.
fn apply_jump(ctx: &TrajContext, state: &mut ShellState, rng: &mut ChaCha8Rng) -> Result<()> {
    let n_max = ctx.tables.n_max;
    // <L^dag L> over the unnormalized state for both truncated channels.
    let mut w_n1 = 0.0;
    let mut w_n2p = 0.0;
    for (s, amp) in state.shells.iter().enumerate() {
        let n_total = state.n_lo + s;
        let (start, _) = shell_range(n_total, n_max);
        for (i, a) in amp.iter().enumerate() {
            let q = a.norm_sqr();
            let n1 = start + i;
            let n2 = n_total - n1;
            w_n1 += q * n1 as f64;
            if n2 < n_max {
                w_n2p += q * (n2 as f64 + 1.0);
            }
        }
    }
    let w_loss = ctx.params.gamma_loss * w_n1;
    let w_gain = ctx.params.gamma_gain * w_n2p;
    let total = w_loss + w_gain;
    if !(total > 0.0) {
        return Err(Error::NumericalFailure(
            "norm threshold crossed with vanishing jump rates".into(),
        ));
    }
    let pick_loss = rng.gen::<f64>() * total < w_loss;

    let old_lo = state.n_lo;
    let n_shells = state.shells.len();
    if pick_loss {
        // a_1 : shell N -> N - 1, n1 -> n1 - 1.
        let new_lo = old_lo.saturating_sub(1);
        let mut new_shells: Vec<Vec<Complex64>> = (0..n_shells)
            .map(|s| {
                let n_new = new_lo + s;
                vec![Complex64::default(); shell_range(n_new, n_max).1]
            })
            .collect();
        for (s, amp) in state.shells.iter().enumerate() {
            let n_total = old_lo + s;
            if n_total == 0 {
                continue;
            }
            let (start, _) = shell_range(n_total, n_max);
            let (new_start, new_len) = shell_range(n_total - 1, n_max);
            let dst_shell = n_total - 1 - new_lo;
            let dst = &mut new_shells[dst_shell];
            for (i, a) in amp.iter().enumerate() {
                let n1 = start + i;
                if n1 == 0 {
                    continue;
                }
                let tgt = n1 - 1;
                debug_assert!(tgt >= new_start && tgt < new_start + new_len);
                dst[tgt - new_start] += a * (n1 as f64).sqrt();
            }
        }
        state.n_lo = new_lo;
        state.shells = new_shells;
    } else {
        // a_2^dag (truncated): shell N -> N + 1, n2 -> n2 + 1; the
        // operator annihilates components already on the cap, and the
        // channel weight above excluded them.
        let top = old_lo + n_shells - 1;
        if top + 1 > 2 * n_max {
            return Err(Error::Truncation(format!(
                "gain pushed the total particle number past 2 n_max = {}",
                2 * n_max
            )));
        }
        let new_lo = old_lo + 1;
        let mut new_shells: Vec<Vec<Complex64>> = (0..n_shells)
            .map(|s| {
                let n_new = new_lo + s;
                vec![Complex64::default(); shell_range(n_new, n_max).1]
            })
            .collect();
        for (s, amp) in state.shells.iter().enumerate() {
            let n_total = old_lo + s;
            let (start, _) = shell_range(n_total, n_max);
            let (new_start, _) = shell_range(n_total + 1, n_max);
            let dst = &mut new_shells[s];
            for (i, a) in amp.iter().enumerate() {
                let n1 = start + i;
                let n2 = n_total - n1;
                if n2 + 1 > n_max {
                    continue;
                }
                dst[n1 - new_start] += a * ((n2 + 1) as f64).sqrt();
            }
        }
        state.n_lo = new_lo;
        state.shells = new_shells;
    }

    let norm2 = state.norm_sq();
    if norm2 <= 0.0 {
        return Err(Error::NumericalFailure(
            "jump annihilated the state".into(),
        ));
    }
    state.scale(1.0 / norm2.sqrt());
    Ok(())
}

// ---------------------------------------------------------------------------
// Ensemble driver.
// ---------------------------------------------------------------------------

pub fn run_trajectories(
    psi0: &FockVector,
    t_grid: &[f64],
    params: &SystemParams,
    n_traj: usize,
    seed: u64,
) -> Result<TrajectoryEnsembleResult> {
    run_trajectories_with(psi0, t_grid, params, n_traj, seed, &JumpOpts::default())
}

pub fn run_trajectories_with(
    psi0: &FockVector,
    t_grid: &[f64],
    params: &SystemParams,
    n_traj: usize,
    seed: u64,
    opts: &JumpOpts,
) -> Result<TrajectoryEnsembleResult> {
    if n_traj < 1 {
        return Err(Error::InvalidParameter("n_traj must be at least 1".into()));
    }
    if (psi0.norm_sq() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(
            "initial trajectory state must be normalized".into(),
        ));
    }
    assert!(
        t_grid.len() >= 2 && t_grid.windows(2).all(|w| w[1] > w[0]),
        "time grid must be strictly increasing with at least two points"
    );
    let n_max = psi0.basis.n_max();
    let tables = ShellTables::build(n_max, params);
    let shell0 = ShellState::from_fock(psi0)?;
    let ctx = TrajContext {
        tables: &tables,
        params,
        t_grid,
        opts,
        seed,
    };

    // Trajectories are independent; results are collected in index order
    // and reduced sequentially so the output is bit-identical no matter
    // how many workers run.
    let outputs: Result<Vec<TrajOutput>> = (0..n_traj)
        .into_par_iter()
        .map(|i| run_single(&ctx, i, &shell0))
        .collect();
    let outputs = outputs?;

    let n_times = t_grid.len();
    let nt = n_traj as f64;
    let pairs = [
        (0usize, 0usize),
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

    let mut means = Vec::with_capacity(n_times);
    let mut stderr = Vec::with_capacity(n_times);
    let mut first_cov = Vec::with_capacity(n_times);
    for k in 0..n_times {
        let mut sum_a = [0.0f64; 4];
        let mut sum_aa = [[0.0f64; 4]; 4];
        let mut sum_p = [0.0f64; 10];
        let mut sum_pp = [0.0f64; 10];
        let mut sum_pa = [[0.0f64; 2]; 10];
        for o in &outputs {
            let a = o.a[k];
            let p = o.p[k];
            for j in 0..4 {
                sum_a[j] += a[j];
                for l in j..4 {
                    sum_aa[j][l] += a[j] * a[l];
                }
            }
            for (slot, &(j, l)) in pairs.iter().enumerate() {
                sum_p[slot] += p[slot];
                sum_pp[slot] += p[slot] * p[slot];
                sum_pa[slot][0] += p[slot] * a[j];
                sum_pa[slot][1] += p[slot] * a[l];
            }
        }
        let mean_a: Vec<f64> = sum_a.iter().map(|s| s / nt).collect();
        let mean_p: Vec<f64> = sum_p.iter().map(|s| s / nt).collect();
        // Sample covariances of the per-trajectory quantum means.
        let denom = if n_traj > 1 { nt - 1.0 } else { 1.0 };
        let cov_a = |j: usize, l: usize| {
            let (a, b) = if j <= l { (j, l) } else { (l, j) };
            (sum_aa[a][b] - nt * mean_a[a] * mean_a[b]) / denom
        };

        let moments = BlochMoments {
            sx: 2.0 * mean_a[0],
            sy: 2.0 * mean_a[1],
            sz: 2.0 * mean_a[2],
            n: mean_a[3],
        };
        let mut delta = [0.0f64; 10];
        let mut delta_err = [0.0f64; 10];
        for (slot, &(j, l)) in pairs.iter().enumerate() {
            delta[slot] = mean_p[slot] - 2.0 * mean_a[j] * mean_a[l];
            let var_m = (sum_pp[slot] - nt * mean_p[slot] * mean_p[slot]) / denom;
            let cov_mj = (sum_pa[slot][0] - nt * mean_p[slot] * mean_a[j]) / denom;
            let cov_ml = (sum_pa[slot][1] - nt * mean_p[slot] * mean_a[l]) / denom;
            let var = var_m
                + 4.0 * mean_a[l] * mean_a[l] * cov_a(j, j)
                + 4.0 * mean_a[j] * mean_a[j] * cov_a(l, l)
                - 4.0 * mean_a[l] * cov_mj
                - 4.0 * mean_a[j] * cov_ml
                + 8.0 * mean_a[j] * mean_a[l] * cov_a(j, l);
            delta_err[slot] = (var.max(0.0) / nt).sqrt();
        }
        let stderr_rec = MomentRecord {
            moments: BlochMoments {
                sx: 2.0 * (cov_a(0, 0) / nt).max(0.0).sqrt(),
                sy: 2.0 * (cov_a(1, 1) / nt).max(0.0).sqrt(),
                sz: 2.0 * (cov_a(2, 2) / nt).max(0.0).sqrt(),
                n: (cov_a(3, 3) / nt).max(0.0).sqrt(),
            },
            cov: CovarianceSet::from_array(delta_err),
        };
        means.push(MomentRecord {
            moments,
            cov: CovarianceSet::from_array(delta),
        });
        stderr.push(stderr_rec);
        // Bloch-scaled first-moment covariance (upper triangle).
        let scale = [2.0, 2.0, 2.0, 1.0];
        let mut packed = [0.0f64; 10];
        let mut slot = 0;
        for j in 0..4 {
            for l in j..4 {
                packed[slot] = scale[j] * scale[l] * cov_a(j, l);
                slot += 1;
            }
        }
        first_cov.push(packed);
    }

    Ok(TrajectoryEnsembleResult {
        t: t_grid.to_vec(),
        means,
        stderr,
        first_moment_cov: first_cov,
        n_traj,
        seed,
        n_max,
        jump_counts: outputs.iter().map(|o| o.jumps).collect(),
        truncation_warning: outputs.iter().any(|o| o.warn),
    })
}
