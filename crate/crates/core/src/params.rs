//! Physical parameters of the two-mode system.
//!
//! All quantities are expressed in units of the tunneling rate `J`
//! (`hbar` = 1), which sets the time unit `tau = 1/J`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the open two-mode Bose-Hubbard system: tunneling `J`,
/// on-site interaction `U`, macroscopic interaction `g = (N0 - 1) U`,
/// initial particle number `N0`, and the incoherent rates for particle
/// loss at site 1 and particle gain at site 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub j: f64,
    pub u: f64,
    pub g: f64,
    pub n0: u64,
    pub gamma_loss: f64,
    pub gamma_gain: f64,
}

impl SystemParams {
    /// Build parameters with the gain rate tied to the loss rate by the
    /// balance condition `gamma_loss = (N0 + 2)/N0 * gamma_gain`, so that
    /// gain and loss cancel at equal filling.
    pub fn balanced(j: f64, g: f64, n0: u64, gamma_loss: f64) -> Result<Self> {
        let gamma_gain = gamma_loss * n0 as f64 / (n0 as f64 + 2.0);
        Self::with_rates(j, g, n0, gamma_loss, gamma_gain)
    }

    /// Build parameters with explicitly chosen loss and gain rates.
    pub fn with_rates(j: f64, g: f64, n0: u64, gamma_loss: f64, gamma_gain: f64) -> Result<Self> {
        if n0 < 1 {
            return Err(Error::InvalidParameter(format!(
                "N0 must be at least 1, got {n0}"
            )));
        }
        if !(gamma_loss >= 0.0) || !(gamma_gain >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "rates must be nonnegative, got gamma_loss = {gamma_loss}, gamma_gain = {gamma_gain}"
            )));
        }
        if !(j >= 0.0) || !j.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "tunneling rate must be nonnegative and finite, got {j}"
            )));
        }
        if !g.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "interaction strength must be finite, got {g}"
            )));
        }
        // U is only defined through g = (N0 - 1) U for N0 > 1.
        let u = if n0 > 1 {
            g / (n0 as f64 - 1.0)
        } else if g == 0.0 {
            0.0
        } else {
            return Err(Error::InvalidParameter(
                "g must be 0 for N0 = 1 (U undefined otherwise)".into(),
            ));
        };
        Ok(Self {
            j,
            u,
            g,
            n0,
            gamma_loss,
            gamma_gain,
        })
    }

    /// `gamma_minus = (gamma_loss - gamma_gain)/2`, the overall decay rate
    /// towards the steady state.
    pub fn gamma_minus(&self) -> f64 {
        0.5 * (self.gamma_loss - self.gamma_gain)
    }

    /// `gamma_plus = (gamma_loss + gamma_gain)/2`.
    pub fn gamma_plus(&self) -> f64 {
        0.5 * (self.gamma_loss + self.gamma_gain)
    }

    /// Characteristic oscillation frequency `omega = sqrt(4 J^2 - gamma_plus^2)`
    /// of the linear system, defined in the oscillatory regime `4 J^2 > gamma_plus^2`.
    pub fn omega(&self) -> Option<f64> {
        let d = 4.0 * self.j * self.j - self.gamma_plus().powi(2);
        (d > 0.0).then(|| d.sqrt())
    }

    /// Default per-mode Fock truncation for runs with particle gain.
    pub fn default_n_max(&self) -> usize {
        (2.5 * self.n0 as f64).ceil() as usize + 10
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn balanced_rates_match_hand_evaluation() {
        // J=1, g=0.5, N0=100, gamma_loss=1.5
        let p = SystemParams::balanced(1.0, 0.5, 100, 1.5).unwrap();
        assert_relative_eq!(p.u, 0.5 / 99.0, max_relative = 1e-15);
        assert_relative_eq!(p.gamma_gain, 1.5 * 100.0 / 102.0, max_relative = 1e-15);
        assert_relative_eq!(p.gamma_minus(), 0.0147059, max_relative = 1e-5);
        assert_relative_eq!(p.gamma_plus(), 1.4852941, max_relative = 1e-6);

        // J=1, g=1, N0=50, gamma_loss=1 (Fig-2c-style parameter set)
        let p = SystemParams::balanced(1.0, 1.0, 50, 1.0).unwrap();
        assert_relative_eq!(p.gamma_gain, 50.0 / 52.0, max_relative = 1e-15);
        assert_relative_eq!(p.u, 1.0 / 49.0, max_relative = 1e-15);
    }

    #[test]
    fn all_couplings_off() {
        let p = SystemParams::balanced(1.0, 0.0, 1, 0.0).unwrap();
        assert_eq!(p.u, 0.0);
        assert_eq!(p.gamma_gain, 0.0);
        assert_eq!(p.gamma_minus(), 0.0);
        assert_eq!(p.gamma_plus(), 0.0);
    }

    #[test]
    fn balance_implies_gamma_minus_is_gain_over_n0() {
        for &(n0, gl) in &[(10u64, 0.3), (100, 1.5), (501, 1.9)] {
            let p = SystemParams::balanced(1.0, 0.0, n0, gl).unwrap();
            assert_relative_eq!(
                p.gamma_minus(),
                p.gamma_gain / n0 as f64,
                max_relative = 1e-12
            );
            assert!(p.gamma_minus() > 0.0);
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(SystemParams::balanced(1.0, 0.0, 0, 1.0).is_err());
        assert!(SystemParams::balanced(1.0, 0.0, 10, -1.0).is_err());
        assert!(SystemParams::with_rates(1.0, 0.0, 10, 0.5, -0.1).is_err());
        assert!(SystemParams::balanced(1.0, 0.5, 1, 1.0).is_err());
    }
}
