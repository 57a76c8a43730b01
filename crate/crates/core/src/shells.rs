//! Total-particle-number shell geometry and per-shell coefficient
//! tables, shared by the trajectory engine and the block-diagonal dense
//! solver.
//!
//! The Hamiltonian and the non-Hermitian drift conserve the total number
//! `N`; jumps shift it by one. On shell `N` the available site-1
//! occupations are `n1 in [max(0, N - n_max), min(N, n_max)]` under the
//! per-mode cap, and the tunneling term is tridiagonal.

use crate::params::SystemParams;

/// `(n1_start, length)` of shell `N` under the per-mode cap.
#[inline]
pub(crate) fn shell_range(n_total: usize, n_max: usize) -> (usize, usize) {
    let start = n_total.saturating_sub(n_max);
    let len = n_total.min(n_max) - start + 1;
    (start, len)
}

pub(crate) struct ShellCoeffs {
    pub n1_start: usize,
    /// Interaction diagonal of the Hamiltonian.
    pub h_diag: Vec<f64>,
    /// Total decay weight `gamma_loss n1 + gamma_gain (n2 + 1)` with the
    /// truncated gain convention (zero weight on the cap).
    pub decay: Vec<f64>,
    /// Tunneling amplitudes between neighbouring occupations,
    /// `hop[i] = sqrt((n1 + 1) n2)` for the pair `(i, i + 1)`.
    pub hop: Vec<f64>,
}

pub(crate) struct ShellTables {
    pub n_max: usize,
    pub shells: Vec<ShellCoeffs>,
}

impl ShellTables {
    pub fn build(n_max: usize, p: &SystemParams) -> Self {
        let mut shells = Vec::with_capacity(2 * n_max + 1);
        for n_total in 0..=(2 * n_max) {
            let (start, len) = shell_range(n_total, n_max);
            let mut h_diag = Vec::with_capacity(len);
            let mut decay = Vec::with_capacity(len);
            let mut hop = Vec::with_capacity(len.saturating_sub(1));
            for i in 0..len {
                let n1 = start + i;
                let n2 = n_total - n1;
                h_diag.push(
                    0.5 * p.u
                        * ((n1 * n1.saturating_sub(1)) as f64
                            + (n2 * n2.saturating_sub(1)) as f64),
                );
                let gain_w = if n2 < n_max {
                    p.gamma_gain * (n2 as f64 + 1.0)
                } else {
                    0.0
                };
                decay.push(p.gamma_loss * n1 as f64 + gain_w);
                if i + 1 < len {
                    hop.push((((n1 + 1) * n2) as f64).sqrt());
                }
            }
            shells.push(ShellCoeffs {
                n1_start: start,
                h_diag,
                decay,
                hop,
            });
        }
        Self { n_max, shells }
    }
}
