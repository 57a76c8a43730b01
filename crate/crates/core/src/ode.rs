//! Embedded Dormand-Prince 5(4) integrator with dense output.
//!
//! All solvers in this crate share this integrator. It works on flat
//! slices of either `f64` or `Complex64` and exposes both a one-shot
//! driver ([`integrate_to_grid`]) and a resumable [`Stepper`] used by the
//! quantum-jump engine, which needs to locate norm-threshold crossings
//! inside accepted steps via the fifth-order interpolant.

use num_complex::Complex64;
use num_traits::Zero;

use crate::error::{Error, Result};

/// Scalar element of an ODE state vector.
pub trait OdeScalar:
    Copy
    + Zero
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<f64, Output = Self>
    + std::ops::AddAssign
    + 'static
{
    fn modulus(self) -> f64;
}

impl OdeScalar for f64 {
    fn modulus(self) -> f64 {
        self.abs()
    }
}

impl OdeScalar for Complex64 {
    fn modulus(self) -> f64 {
        self.norm()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dopri5Opts {
    pub rtol: f64,
    pub atol: f64,
    pub h_max: f64,
    pub h_init: Option<f64>,
    pub max_steps: usize,
}

impl Default for Dopri5Opts {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-9,
            h_max: f64::INFINITY,
            h_init: None,
            max_steps: 100_000_000,
        }
    }
}

// Dormand-Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
// Error estimate weights b - bhat.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Dense-output weights.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

/// Resumable Dormand-Prince stepper.
///
/// After every accepted step the interval `[t_old, t]` carries a
/// fifth-order interpolant, evaluated with [`Stepper::dense`].
pub struct Stepper<T, F> {
    f: F,
    opts: Dopri5Opts,
    pub t: f64,
    pub y: Vec<T>,
    t_old: f64,
    h_last: f64,
    h: f64,
    k: Vec<Vec<T>>,
    cont: Vec<Vec<T>>,
    scratch: Vec<T>,
    y_new: Vec<T>,
    k1_fresh: bool,
    pub n_steps: usize,
    pub n_evals: usize,
}

impl<T, F> Stepper<T, F>
where
    T: OdeScalar,
    F: FnMut(f64, &[T], &mut [T]),
{
    pub fn new(mut f: F, t0: f64, y0: &[T], opts: Dopri5Opts) -> Self {
        let n = y0.len();
        let mut k = vec![vec![T::zero(); n]; 7];
        f(t0, y0, &mut k[0]);
        let mut s = Self {
            f,
            opts,
            t: t0,
            y: y0.to_vec(),
            t_old: t0,
            h_last: 0.0,
            h: 0.0,
            k,
            cont: vec![vec![T::zero(); n]; 5],
            scratch: vec![T::zero(); n],
            y_new: vec![T::zero(); n],
            k1_fresh: true,
            n_steps: 0,
            n_evals: 1,
        };
        s.h = s.opts.h_init.unwrap_or_else(|| s.guess_initial_step());
        s
    }

    /// Replace the current state (used after a quantum jump) and
    /// invalidate the stored derivative.
    pub fn reset_state(&mut self, t: f64, y: &[T]) {
        self.t = t;
        self.t_old = t;
        self.y.copy_from_slice(y);
        self.k1_fresh = false;
    }

    pub fn suggested_step(&self) -> f64 {
        self.h
    }

    pub fn set_step(&mut self, h: f64) {
        self.h = h;
    }

    fn weighted_norm(&self, err: &[T], y0: &[T], y1: &[T]) -> f64 {
        let mut acc = 0.0;
        for i in 0..err.len() {
            let sc = self.opts.atol + self.opts.rtol * y0[i].modulus().max(y1[i].modulus());
            let r = err[i].modulus() / sc;
            acc += r * r;
        }
        (acc / err.len() as f64).sqrt()
    }

    fn guess_initial_step(&mut self) -> f64 {
        let n = self.y.len();
        let mut d0 = 0.0f64;
        let mut d1 = 0.0f64;
        for i in 0..n {
            let sc = self.opts.atol + self.opts.rtol * self.y[i].modulus();
            d0 += (self.y[i].modulus() / sc).powi(2);
            d1 += (self.k[0][i].modulus() / sc).powi(2);
        }
        d0 = (d0 / n as f64).sqrt();
        d1 = (d1 / n as f64).sqrt();
        let h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        // One explicit Euler probe to estimate the second derivative.
        for i in 0..n {
            self.scratch[i] = self.y[i] + self.k[0][i] * h0;
        }
        (self.f)(self.t + h0, &self.scratch, &mut self.y_new);
        self.n_evals += 1;
        let mut d2 = 0.0f64;
        for i in 0..n {
            let sc = self.opts.atol + self.opts.rtol * self.y[i].modulus();
            d2 += ((self.y_new[i] - self.k[0][i]).modulus() / sc).powi(2);
        }
        d2 = (d2 / n as f64).sqrt() / h0;
        let d_max = d1.max(d2);
        let h1 = if d_max <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d_max).powf(0.2)
        };
        (100.0 * h0).min(h1).min(self.opts.h_max)
    }

    /// Advance by one accepted step of size at most `h_limit`
    /// (`f64::INFINITY` for no limit). Returns the accepted step size.
    pub fn advance(&mut self, h_limit: f64) -> Result<f64> {
        let n = self.y.len();
        if !self.k1_fresh {
            let (t, y) = (self.t, &self.y);
            (self.f)(t, y, &mut self.k[0]);
            self.n_evals += 1;
            self.k1_fresh = true;
        }
        loop {
            if self.n_steps >= self.opts.max_steps {
                return Err(Error::NumericalFailure(format!(
                    "step budget exhausted at t = {}",
                    self.t
                )));
            }
            let mut h = self.h.min(self.opts.h_max).min(h_limit);
            if !(h > 0.0) || self.t + h == self.t {
                return Err(Error::Stiffness { t: self.t });
            }
            let clipped = h_limit.is_finite() && h >= h_limit;
            if clipped {
                h = h_limit;
            }

            macro_rules! stage {
                ($ti:expr, $($coef:expr => $ki:expr),+) => {{
                    for i in 0..n {
                        let mut acc = T::zero();
                        $(acc += self.k[$ki][i] * ($coef);)+
                        self.scratch[i] = self.y[i] + acc * h;
                    }
                    let t_stage = self.t + $ti * h;
                    (self.f)(t_stage, &self.scratch, &mut self.y_new);
                    self.n_evals += 1;
                }};
            }

            stage!(C2, A21 => 0);
            std::mem::swap(&mut self.k[1], &mut self.y_new);
            stage!(C3, A31 => 0, A32 => 1);
            std::mem::swap(&mut self.k[2], &mut self.y_new);
            stage!(C4, A41 => 0, A42 => 1, A43 => 2);
            std::mem::swap(&mut self.k[3], &mut self.y_new);
            stage!(C5, A51 => 0, A52 => 1, A53 => 2, A54 => 3);
            std::mem::swap(&mut self.k[4], &mut self.y_new);
            stage!(1.0, A61 => 0, A62 => 1, A63 => 2, A64 => 3, A65 => 4);
            std::mem::swap(&mut self.k[5], &mut self.y_new);

            // Fifth-order solution; its derivative is the seventh stage (FSAL).
            for i in 0..n {
                let mut acc = self.k[0][i] * B1;
                acc += self.k[2][i] * B3;
                acc += self.k[3][i] * B4;
                acc += self.k[4][i] * B5;
                acc += self.k[5][i] * B6;
                self.y_new[i] = self.y[i] + acc * h;
            }
            {
                let t_end = self.t + h;
                let (y_new, k7) = (&self.y_new, &mut self.k[6]);
                (self.f)(t_end, y_new, k7);
                self.n_evals += 1;
            }

            // Embedded error estimate.
            for i in 0..n {
                let mut acc = self.k[0][i] * E1;
                acc += self.k[2][i] * E3;
                acc += self.k[3][i] * E4;
                acc += self.k[4][i] * E5;
                acc += self.k[5][i] * E6;
                acc += self.k[6][i] * E7;
                self.scratch[i] = acc * h;
            }
            let err = self.weighted_norm(&self.scratch.clone(), &self.y, &self.y_new);

            if err.is_nan() || err > 1.0 {
                let fac = if err.is_nan() {
                    FAC_MIN
                } else {
                    (SAFETY * err.powf(-0.2)).max(FAC_MIN)
                };
                self.h = h * fac.min(1.0);
                continue;
            }

            // Accepted: store dense-output coefficients for [t, t+h].
            for i in 0..n {
                let dy = self.y_new[i] - self.y[i];
                let bspl = self.k[0][i] * h - dy;
                self.cont[0][i] = self.y[i];
                self.cont[1][i] = dy;
                self.cont[2][i] = bspl;
                self.cont[3][i] = dy - self.k[6][i] * h - bspl;
                let mut acc = self.k[0][i] * D1;
                acc += self.k[2][i] * D3;
                acc += self.k[3][i] * D4;
                acc += self.k[4][i] * D5;
                acc += self.k[5][i] * D6;
                acc += self.k[6][i] * D7;
                self.cont[4][i] = acc * h;
            }

            self.t_old = self.t;
            self.t += h;
            self.h_last = h;
            std::mem::swap(&mut self.y, &mut self.y_new);
            self.k.swap(0, 6); // FSAL
            self.n_steps += 1;

            let fac = (SAFETY * err.max(1e-10).powf(-0.2)).clamp(FAC_MIN, FAC_MAX);
            let h_next = h * fac;
            if !clipped || h_next < h_limit {
                self.h = h_next;
            }
            return Ok(h);
        }
    }

    /// Interpolant over the last accepted step `[t_old, t]`.
    pub fn dense(&self, t_query: f64, out: &mut [T]) {
        debug_assert!(self.h_last > 0.0);
        let theta = ((t_query - self.t_old) / self.h_last).clamp(0.0, 1.0);
        let theta1 = 1.0 - theta;
        for i in 0..out.len() {
            let inner = self.cont[3][i] + self.cont[4][i] * theta1;
            let mid = self.cont[2][i] + inner * theta;
            out[i] = self.cont[0][i] + (self.cont[1][i] + mid * theta1) * theta;
        }
    }

    pub fn last_interval(&self) -> (f64, f64) {
        (self.t_old, self.t)
    }
}

pub enum StopReason {
    Completed,
    GuardStop { t: f64 },
}

/// Integrate over a strictly increasing time grid, invoking `observe`
/// with `(grid index, time, state)` at every grid point (including the
/// initial one). `guard` is checked after every accepted step; returning
/// `true` stops the run early.
pub fn integrate_to_grid_guarded<T, F, O, G>(
    f: F,
    t_grid: &[f64],
    y0: &[T],
    opts: Dopri5Opts,
    mut observe: O,
    mut guard: G,
) -> Result<StopReason>
where
    T: OdeScalar,
    F: FnMut(f64, &[T], &mut [T]),
    O: FnMut(usize, f64, &[T]),
    G: FnMut(f64, &[T]) -> bool,
{
    assert!(!t_grid.is_empty(), "empty time grid");
    assert!(
        t_grid.windows(2).all(|w| w[1] > w[0]),
        "time grid must be strictly increasing"
    );
    observe(0, t_grid[0], y0);
    if t_grid.len() == 1 {
        return Ok(StopReason::Completed);
    }
    let mut stepper = Stepper::new(f, t_grid[0], y0, opts);
    let mut out_idx = 1;
    let mut interp = vec![T::zero(); y0.len()];
    while out_idx < t_grid.len() {
        stepper.advance(t_grid[t_grid.len() - 1] - stepper.t)?;
        while out_idx < t_grid.len() && t_grid[out_idx] <= stepper.t + 1e-14 {
            if (t_grid[out_idx] - stepper.t).abs() <= 1e-14 {
                observe(out_idx, t_grid[out_idx], &stepper.y);
            } else {
                stepper.dense(t_grid[out_idx], &mut interp);
                observe(out_idx, t_grid[out_idx], &interp);
            }
            out_idx += 1;
        }
        if guard(stepper.t, &stepper.y) {
            return Ok(StopReason::GuardStop { t: stepper.t });
        }
    }
    Ok(StopReason::Completed)
}

/// [`integrate_to_grid_guarded`] without an early-stop guard.
pub fn integrate_to_grid<T, F, O>(
    f: F,
    t_grid: &[f64],
    y0: &[T],
    opts: Dopri5Opts,
    observe: O,
) -> Result<StopReason>
where
    T: OdeScalar,
    F: FnMut(f64, &[T], &mut [T]),
    O: FnMut(usize, f64, &[T]),
{
    integrate_to_grid_guarded(f, t_grid, y0, opts, observe, |_, _| false)
}
