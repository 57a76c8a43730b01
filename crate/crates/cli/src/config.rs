//! Run configuration: a serializable record of everything needed to
//! reproduce a run. Unknown keys in a config file are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use bhdimer::SystemParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    Dense,
    Jump,
    Bbr,
    BbrNeglect,
    Analytic,
    Gpe,
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Solver::Dense => "dense",
            Solver::Jump => "jump",
            Solver::Bbr => "bbr",
            Solver::BbrNeglect => "bbr-neglect",
            Solver::Analytic => "analytic",
            Solver::Gpe => "gpe",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub solver: Solver,
    /// Tunneling rate; sets the unit of time.
    pub j: f64,
    /// Macroscopic interaction strength g = (N0 - 1) U.
    pub g: f64,
    pub n0: u64,
    /// Loss rate at site 1 (the gain-loss parameter).
    pub gamma: f64,
    /// Explicit gain rate; omitted means balanced gain and loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_gain: Option<f64>,
    /// Initial pure state angles.
    pub phi: f64,
    pub theta: f64,
    pub t_max: f64,
    pub n_steps: usize,
    /// Trajectory count (jump solver only).
    pub n_traj: usize,
    pub seed: u64,
    /// Per-mode Fock truncation; omitted means the gain-bearing default
    /// ceil(2.5 N0) + 10.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_max: Option<usize>,
    pub output: PathBuf,
}

impl RunConfig {
    pub fn params(&self) -> bhdimer::Result<SystemParams> {
        match self.gamma_gain {
            Some(gg) => SystemParams::with_rates(self.j, self.g, self.n0, self.gamma, gg),
            None => SystemParams::balanced(self.j, self.g, self.n0, self.gamma),
        }
    }

    pub fn n_max(&self, params: &SystemParams) -> usize {
        self.n_max.unwrap_or_else(|| params.default_n_max())
    }

    pub fn time_grid(&self) -> Vec<f64> {
        let n = self.n_steps.max(1);
        (0..=n).map(|i| self.t_max * i as f64 / n as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_identity() {
        let cfg = RunConfig {
            solver: Solver::Jump,
            j: 1.0,
            g: 0.5,
            n0: 100,
            gamma: 1.5,
            gamma_gain: None,
            phi: 1.5707963267948966,
            theta: 1.5707963267948966,
            t_max: 30.0,
            n_steps: 600,
            n_traj: 500,
            seed: 42,
            n_max: Some(260),
            output: PathBuf::from("out.csv"),
        };
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"
solver = "bbr"
j = 1.0
g = 0.0
n0 = 10
gamma = 0.5
phi = 0.0
theta = 1.0
t_max = 5.0
n_steps = 100
n_traj = 1
seed = 1
output = "x.csv"
frobnicate = true
"#;
        assert!(toml::from_str::<RunConfig>(text).is_err());
    }
}
