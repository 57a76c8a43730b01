//! Implementations of the CLI subcommands.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use serde::Serialize;

use bhdimer::analysis::{self, RevivalOpts};
use bhdimer::bbr::{self, CovarianceMode};
use bhdimer::fock::{product_state, DensityMatrix, FockBasis};
use bhdimer::jump;
use bhdimer::lindblad::{self, DenseOpts};
use bhdimer::linear;
use bhdimer::meanfield::{self, MeanFieldState};
use bhdimer::output::{moment_row, write_csv, write_json};
use bhdimer::SystemParams;

use crate::config::{RunConfig, Solver};
use crate::ScenarioArgs;

/// Errors in the run setup (bad flags or config files) exit with 2;
/// failures during the numerics exit with 3.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<bhdimer::Error>() {
        Some(
            bhdimer::Error::InvalidParameter(_)
            | bhdimer::Error::UnsupportedRegime(_)
            | bhdimer::Error::BeyondExceptionalPoint { .. }
            | bhdimer::Error::NoSteadyState,
        ) => 2,
        _ => 3,
    }
}

fn version() -> &'static str {
    option_env!("BHDIMER_GIT_DESCRIBE").unwrap_or(env!("CARGO_PKG_VERSION"))
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    version: &'a str,
    config: &'a RunConfig,
    n_max_effective: usize,
    wall_time_s: f64,
    truncation_warning: bool,
    stable: bool,
}

fn json_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn simulate(
    solver: Option<Solver>,
    scenario: ScenarioArgs,
    output: Option<PathBuf>,
    config_file: Option<PathBuf>,
    dump_config: Option<PathBuf>,
) -> Result<()> {
    let cfg = match config_file {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .with_context(|| UsageError(format!("cannot read config {}", path.display())))
                .map_err(|e| anyhow!(UsageError(format!("{e:#}"))))?;
            toml::from_str::<RunConfig>(&text)
                .map_err(|e| anyhow!(UsageError(format!("invalid config: {e}"))))?
        }
        None => {
            let solver = solver
                .ok_or_else(|| anyhow!(UsageError("--solver is required".into())))?;
            let output = output
                .ok_or_else(|| anyhow!(UsageError("--output is required".into())))?;
            scenario.to_config(solver, output)
        }
    };
    if let Some(path) = dump_config {
        let text = toml::to_string_pretty(&cfg).context("config serialization")?;
        std::fs::write(&path, text)?;
        return Ok(());
    }
    run_config(&cfg)
}

pub fn run_config(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let params = cfg.params()?;
    let t_grid = cfg.time_grid();
    let n_max = cfg.n_max(&params);
    let mut warn = false;
    let mut stable = true;

    match cfg.solver {
        Solver::Dense => {
            let basis = FockBasis::new(n_max);
            let psi0 = product_state(cfg.phi, cfg.theta, cfg.n0, basis)?;
            let rho0 = DensityMatrix::from_pure(&psi0);
            let series = lindblad::evolve_dense(&rho0, &t_grid, &params, &DenseOpts::default())?;
            warn = series.truncation_warning;
            write_csv(
                &cfg.output,
                &moment_header(),
                series
                    .t
                    .iter()
                    .zip(series.moments.iter().zip(&series.covariances))
                    .map(|(&t, (m, c))| moment_row(t, m, c)),
            )?;
        }
        Solver::Jump => {
            let basis = FockBasis::new(n_max);
            let psi0 = product_state(cfg.phi, cfg.theta, cfg.n0, basis)?;
            let res = jump::run_trajectories(&psi0, &t_grid, &params, cfg.n_traj, cfg.seed)?;
            warn = res.truncation_warning;
            let mut header = moment_header();
            for name in bhdimer::output::MOMENT_COLUMNS {
                header.push(Box::leak(format!("err_{name}").into_boxed_str()));
            }
            write_csv(
                &cfg.output,
                &header,
                res.t.iter().enumerate().map(|(k, &t)| {
                    let mut row = moment_row(t, &res.means[k].moments, &res.means[k].cov);
                    row.extend_from_slice(&res.stderr[k].moments.as_array());
                    row.extend_from_slice(&res.stderr[k].cov.as_array());
                    row
                }),
            )?;
        }
        Solver::Bbr | Solver::BbrNeglect => {
            let mode = if cfg.solver == Solver::Bbr {
                CovarianceMode::Full
            } else {
                CovarianceMode::NeglectCovariances
            };
            let m0 = bbr::pure_state_moments(cfg.phi, cfg.theta, cfg.n0);
            let c0 = bbr::pure_state_covariances(cfg.phi, cfg.theta, cfg.n0);
            let series = bbr::integrate_bbr((m0, c0), &t_grid, &params, mode)?;
            stable = series.stable;
            let mut header = moment_header();
            header.push("stable");
            write_csv(
                &cfg.output,
                &header,
                series
                    .t
                    .iter()
                    .zip(series.moments.iter().zip(&series.covariances))
                    .map(|(&t, (m, c))| {
                        let mut row = moment_row(t, m, c);
                        row.push(1.0);
                        row
                    }),
            )?;
        }
        Solver::Analytic => {
            if cfg.g != 0.0 {
                return Err(anyhow!(bhdimer::Error::UnsupportedRegime(
                    "the closed-form solution requires g = 0".into()
                )));
            }
            let m0 = bbr::pure_state_moments(cfg.phi, cfg.theta, cfg.n0);
            let kappa = linear::solve_kappas(&m0, &params)?;
            let series = linear::analytic_solution(&kappa, &params, &t_grid)?;
            let (lower, upper) = linear::envelopes(&kappa, &params, &t_grid)?;
            write_csv(
                &cfg.output,
                &["t", "sx", "sy", "sz", "n", "purity", "p_lower", "p_upper"],
                t_grid.iter().enumerate().map(|(k, &t)| {
                    let m = &series[k];
                    vec![
                        t,
                        m.sx,
                        m.sy,
                        m.sz,
                        m.n,
                        analysis::purity(m),
                        lower[k],
                        upper[k],
                    ]
                }),
            )?;
        }
        Solver::Gpe => {
            let c0 = MeanFieldState::from_angles(cfg.phi, cfg.theta);
            let series = meanfield::integrate_gpe(&c0, &t_grid, &params)?;
            stable = series.stable;
            write_csv(
                &cfg.output,
                &[
                    "t",
                    "c1_abs",
                    "c2_abs",
                    "rel_phase",
                    "norm_sq",
                    "c1_abs_renorm",
                    "c2_abs_renorm",
                ],
                series.t.iter().zip(&series.states).map(|(&t, c)| {
                    let norm = c.norm_sq().sqrt();
                    vec![
                        t,
                        c.c1.norm(),
                        c.c2.norm(),
                        (c.c1 * c.c2.conj()).arg(),
                        norm * norm,
                        c.c1.norm() / norm,
                        c.c2.norm() / norm,
                    ]
                }),
            )?;
        }
    }

    let meta = RunMetadata {
        version: version(),
        config: cfg,
        n_max_effective: n_max,
        wall_time_s: started.elapsed().as_secs_f64(),
        truncation_warning: warn,
        stable,
    };
    write_json(json_path(&cfg.output), &meta)?;
    Ok(())
}

fn moment_header() -> Vec<&'static str> {
    let mut h = vec!["t"];
    h.extend(bhdimer::output::MOMENT_COLUMNS);
    h
}

/// Moments of one solver on the scenario grid, reduced to the five
/// comparison columns (sx, sy, sz, n, purity).
fn solver_track(cfg: &RunConfig, solver: Solver) -> Result<Vec<[f64; 5]>> {
    let params = cfg.params()?;
    let t_grid = cfg.time_grid();
    let n_max = cfg.n_max(&params);
    let to_track = |moments: &[bbr::BlochMoments]| -> Vec<[f64; 5]> {
        moments
            .iter()
            .map(|m| [m.sx, m.sy, m.sz, m.n, analysis::purity(m)])
            .collect()
    };
    match solver {
        Solver::Dense => {
            let basis = FockBasis::new(n_max);
            let psi0 = product_state(cfg.phi, cfg.theta, cfg.n0, basis)?;
            let rho0 = DensityMatrix::from_pure(&psi0);
            let series = lindblad::evolve_dense(&rho0, &t_grid, &params, &DenseOpts::default())?;
            Ok(to_track(&series.moments))
        }
        Solver::Jump => {
            let basis = FockBasis::new(n_max);
            let psi0 = product_state(cfg.phi, cfg.theta, cfg.n0, basis)?;
            let res = jump::run_trajectories(&psi0, &t_grid, &params, cfg.n_traj, cfg.seed)?;
            let moments: Vec<_> = res.means.iter().map(|r| r.moments).collect();
            Ok(to_track(&moments))
        }
        Solver::Bbr | Solver::BbrNeglect => {
            let mode = if solver == Solver::Bbr {
                CovarianceMode::Full
            } else {
                CovarianceMode::NeglectCovariances
            };
            let m0 = bbr::pure_state_moments(cfg.phi, cfg.theta, cfg.n0);
            let c0 = bbr::pure_state_covariances(cfg.phi, cfg.theta, cfg.n0);
            let series = bbr::integrate_bbr((m0, c0), &t_grid, &params, mode)?;
            if !series.stable {
                return Err(anyhow!(bhdimer::Error::NumericalFailure(
                    "trajectory diverged before t_max; comparison grids must align".into()
                )));
            }
            Ok(to_track(&series.moments))
        }
        Solver::Analytic => {
            if cfg.g != 0.0 {
                return Err(anyhow!(bhdimer::Error::UnsupportedRegime(
                    "the closed-form solution requires g = 0".into()
                )));
            }
            let m0 = bbr::pure_state_moments(cfg.phi, cfg.theta, cfg.n0);
            let kappa = linear::solve_kappas(&m0, &params)?;
            let series = linear::analytic_solution(&kappa, &params, &t_grid)?;
            Ok(to_track(&series))
        }
        Solver::Gpe => {
            let c0 = MeanFieldState::from_angles(cfg.phi, cfg.theta);
            let series = meanfield::integrate_gpe(&c0, &t_grid, &params)?;
            if !series.stable {
                return Err(anyhow!(bhdimer::Error::NumericalFailure(
                    "mean-field run diverged before t_max".into()
                )));
            }
            // Scaled to many-particle moments through the pure-state map.
            Ok(series
                .states
                .iter()
                .map(|c| {
                    let norm = c.norm_sq();
                    let n0 = cfg.n0 as f64;
                    let s12 = c.c1.conj() * c.c2 / norm;
                    [
                        2.0 * n0 * s12.re,
                        -2.0 * n0 * s12.im,
                        n0 * (c.c2.norm_sqr() - c.c1.norm_sqr()) / norm,
                        n0,
                        1.0,
                    ]
                })
                .collect())
        }
    }
}

pub fn compare(solvers: &[Solver], scenario: ScenarioArgs, output: PathBuf) -> Result<()> {
    if solvers.len() < 2 {
        return Err(anyhow!(UsageError(
            "compare needs at least two solvers".into()
        )));
    }
    let started = Instant::now();
    let cfg = scenario.to_config(solvers[0], output.clone());
    let t_grid = cfg.time_grid();
    let mut tracks = Vec::new();
    for &s in solvers {
        tracks.push((s, solver_track(&cfg, s)?));
    }

    let mut header: Vec<String> = vec!["t".into()];
    for (s, _) in &tracks {
        for col in ["sx", "sy", "sz", "n", "purity"] {
            header.push(format!("{s}_{col}"));
        }
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_csv(
        &output,
        &header_refs,
        t_grid.iter().enumerate().map(|(k, &t)| {
            let mut row = vec![t];
            for (_, track) in &tracks {
                row.extend_from_slice(&track[k]);
            }
            row
        }),
    )?;

    // Max absolute deviation of every solver from the first.
    let mut summary = BTreeMap::new();
    let (ref_solver, ref_track) = &tracks[0];
    for (s, track) in &tracks[1..] {
        let mut dev = [0.0f64; 5];
        for k in 0..t_grid.len() {
            for c in 0..5 {
                dev[c] = dev[c].max((track[k][c] - ref_track[k][c]).abs());
            }
        }
        let cols = ["sx", "sy", "sz", "n", "purity"];
        let entry: BTreeMap<String, f64> = cols
            .iter()
            .zip(dev)
            .map(|(c, d)| (c.to_string(), d))
            .collect();
        summary.insert(format!("{s}_vs_{ref_solver}"), entry);
    }

    #[derive(Serialize)]
    struct CompareMetadata<'a> {
        version: &'a str,
        config: &'a RunConfig,
        solvers: Vec<String>,
        max_abs_deviation: &'a BTreeMap<String, BTreeMap<String, f64>>,
        wall_time_s: f64,
    }
    write_json(
        json_path(&output),
        &CompareMetadata {
            version: version(),
            config: &cfg,
            solvers: solvers.iter().map(|s| s.to_string()).collect(),
            max_abs_deviation: &summary,
            wall_time_s: started.elapsed().as_secs_f64(),
        },
    )?;
    for (pair, cols) in &summary {
        let p = cols.get("purity").copied().unwrap_or(f64::NAN);
        println!("{pair}: max |dP| = {p:.3e}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Revival maps with checkpointed cells.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct CellRecord {
    phi: f64,
    theta: f64,
    delta_p: f64,
    t_star: f64,
    stable: bool,
}

fn checkpoint_path(output: &Path) -> PathBuf {
    let mut os = output.as_os_str().to_owned();
    os.push(".partial");
    PathBuf::from(os)
}

fn read_checkpoint(path: &Path) -> Result<BTreeMap<usize, CellRecord>> {
    let mut done = BTreeMap::new();
    if !path.exists() {
        return Ok(done);
    }
    let reader = BufReader::new(File::open(path)?);
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            continue; // torn write at the tail of an interrupted run
        }
        let parse = |s: &str| s.parse::<f64>().ok();
        if let (Ok(idx), Some(phi), Some(theta), Some(dp), Some(ts), Some(st)) = (
            fields[0].parse::<usize>(),
            parse(fields[1]),
            parse(fields[2]),
            parse(fields[3]),
            parse(fields[4]),
            parse(fields[5]),
        ) {
            done.insert(
                idx,
                CellRecord {
                    phi,
                    theta,
                    delta_p: dp,
                    t_star: ts,
                    stable: st != 0.0,
                },
            );
        }
    }
    Ok(done)
}

pub fn revival_map(
    scenario: ScenarioArgs,
    grid: usize,
    output: PathBuf,
    resume: bool,
) -> Result<()> {
    use rayon::prelude::*;
    if grid < 2 {
        return Err(anyhow!(UsageError("--grid must be at least 2".into())));
    }
    let started = Instant::now();
    let cfg = scenario.to_config(Solver::Bbr, output.clone());
    let params = cfg.params()?;
    let opts = RevivalOpts::default();
    let (phi_grid, theta_grid) = analysis::map_grid(grid, grid);
    let total = grid * grid;

    let ckpt = checkpoint_path(&output);
    let mut done = if resume {
        read_checkpoint(&ckpt)?
    } else {
        BTreeMap::new()
    };
    let remaining: Vec<usize> = (0..total).filter(|i| !done.contains_key(i)).collect();
    eprintln!(
        "revival map {}x{}: {} cells ({} cached)",
        grid,
        grid,
        remaining.len(),
        done.len()
    );

    let (tx, rx) = mpsc::channel::<(usize, CellRecord)>();
    let writer = std::thread::spawn({
        let ckpt = ckpt.clone();
        move || -> Result<Vec<(usize, CellRecord)>> {
            let mut file = OpenOptions::new().create(true).append(true).open(&ckpt)?;
            let mut received = Vec::new();
            let mut done_count = 0usize;
            for (idx, rec) in rx {
                writeln!(
                    file,
                    "{},{},{},{},{},{}",
                    idx,
                    rec.phi,
                    rec.theta,
                    rec.delta_p,
                    rec.t_star,
                    if rec.stable { 1 } else { 0 }
                )?;
                done_count += 1;
                if done_count % 100 == 0 {
                    eprint!("\r{done_count} cells");
                    let _ = std::io::stderr().flush();
                }
                received.push((idx, rec));
            }
            file.flush()?;
            Ok(received)
        }
    });

    remaining.par_iter().for_each_with(tx, |tx, &idx| {
        let phi = phi_grid[idx / grid];
        let theta = theta_grid[idx % grid];
        let out = analysis::strongest_revival(&params, phi, theta, &opts);
        let rec = CellRecord {
            phi,
            theta,
            delta_p: out.delta_p,
            t_star: out.t_star,
            stable: out.stable,
        };
        let _ = tx.send((idx, rec));
    });
    let computed = writer
        .join()
        .map_err(|_| anyhow!("checkpoint writer panicked"))??;
    eprintln!();
    done.extend(computed);

    write_csv(
        &output,
        &["phi", "theta", "delta_p", "t_star", "stable"],
        done.values().map(|r| {
            vec![
                r.phi,
                r.theta,
                r.delta_p,
                r.t_star,
                if r.stable { 1.0 } else { 0.0 },
            ]
        }),
    )?;
    std::fs::remove_file(&ckpt).ok();

    #[derive(Serialize)]
    struct MapMetadata<'a> {
        version: &'a str,
        config: &'a RunConfig,
        grid: usize,
        cells: usize,
        wall_time_s: f64,
    }
    write_json(
        json_path(&output),
        &MapMetadata {
            version: version(),
            config: &cfg,
            grid,
            cells: total,
            wall_time_s: started.elapsed().as_secs_f64(),
        },
    )?;
    Ok(())
}

fn parse_sweep(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(anyhow!(UsageError(format!(
            "sweep must be a:b:n, got {text}"
        ))));
    }
    let a: f64 = parts[0]
        .parse()
        .map_err(|_| anyhow!(UsageError(format!("bad sweep start {}", parts[0]))))?;
    let b: f64 = parts[1]
        .parse()
        .map_err(|_| anyhow!(UsageError(format!("bad sweep end {}", parts[1]))))?;
    let n: usize = parts[2]
        .parse()
        .map_err(|_| anyhow!(UsageError(format!("bad sweep count {}", parts[2]))))?;
    if n < 1 {
        return Err(anyhow!(UsageError("sweep count must be positive".into())));
    }
    if n == 1 {
        return Ok(vec![a]);
    }
    Ok((0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect())
}

pub fn maximize(
    scenario: ScenarioArgs,
    gamma_sweep: Option<String>,
    g_sweep: Option<String>,
    multistart: usize,
    output: PathBuf,
) -> Result<()> {
    let started = Instant::now();
    let gammas = match &gamma_sweep {
        Some(text) => parse_sweep(text)?,
        None => vec![scenario.gamma],
    };
    let gs = match &g_sweep {
        Some(text) => parse_sweep(text)?,
        None => vec![scenario.g],
    };

    #[derive(Serialize)]
    struct OptimumRecord {
        gamma: f64,
        g: f64,
        n0: u64,
        found: bool,
        phi: f64,
        theta: f64,
        delta_p_max: f64,
        t_star: f64,
        grad_norm: f64,
    }

    let opts = RevivalOpts::default();
    let mut records = Vec::new();
    let mut any_found = false;
    for &gamma in &gammas {
        for &g in &gs {
            let params = SystemParams::balanced(scenario.j, g, scenario.n0, gamma)?;
            eprintln!("maximize: gamma = {gamma}, g = {g}");
            match analysis::maximize_revival(&params, multistart, &opts) {
                Ok(opt) => {
                    any_found = true;
                    records.push(OptimumRecord {
                        gamma,
                        g,
                        n0: scenario.n0,
                        found: true,
                        phi: opt.phi,
                        theta: opt.theta,
                        delta_p_max: opt.delta_p,
                        t_star: opt.t_star,
                        grad_norm: opt.grad_norm,
                    });
                }
                Err(bhdimer::Error::NoStableOptimum) => records.push(OptimumRecord {
                    gamma,
                    g,
                    n0: scenario.n0,
                    found: false,
                    phi: f64::NAN,
                    theta: f64::NAN,
                    delta_p_max: 0.0,
                    t_star: f64::NAN,
                    grad_norm: f64::NAN,
                }),
                Err(e) => return Err(e.into()),
            }
        }
    }
    if !any_found {
        return Err(anyhow!(bhdimer::Error::NoStableOptimum));
    }

    #[derive(Serialize)]
    struct MaximizeOutput<'a> {
        version: &'a str,
        n0: u64,
        j: f64,
        multistart: usize,
        records: Vec<OptimumRecord>,
        wall_time_s: f64,
    }
    write_json(
        &output,
        &MaximizeOutput {
            version: version(),
            n0: scenario.n0,
            j: scenario.j,
            multistart,
            records,
            wall_time_s: started.elapsed().as_secs_f64(),
        },
    )?;
    Ok(())
}
