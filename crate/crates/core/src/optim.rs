//! Minimal Nelder-Mead simplex minimizer for two-dimensional landscapes.

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOpts {
    pub max_iter: usize,
    pub x_tol: f64,
    pub f_tol: f64,
    /// Initial simplex edge length.
    pub scale: f64,
}

impl Default for NelderMeadOpts {
    fn default() -> Self {
        Self {
            max_iter: 500,
            x_tol: 1e-7,
            f_tol: 1e-12,
            scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadResult {
    pub x: [f64; 2],
    pub f: f64,
    pub n_evals: usize,
}

/// Minimize `f` over the plane starting from `x0`.
pub fn nelder_mead_2d(
    mut f: impl FnMut([f64; 2]) -> f64,
    x0: [f64; 2],
    opts: &NelderMeadOpts,
) -> NelderMeadResult {
    const ALPHA: f64 = 1.0; // reflection
    const GAMMA: f64 = 2.0; // expansion
    const RHO: f64 = 0.5; // contraction
    const SIGMA: f64 = 0.5; // shrink

    let mut n_evals = 0;
    let mut eval = |x: [f64; 2], n: &mut usize| {
        *n += 1;
        f(x)
    };

    let mut simplex = [
        x0,
        [x0[0] + opts.scale, x0[1]],
        [x0[0], x0[1] + opts.scale],
    ];
    let mut fv = [
        eval(simplex[0], &mut n_evals),
        eval(simplex[1], &mut n_evals),
        eval(simplex[2], &mut n_evals),
    ];

    for _ in 0..opts.max_iter {
        // Order best -> worst.
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| fv[a].partial_cmp(&fv[b]).unwrap_or(std::cmp::Ordering::Equal));
        let (best, mid, worst) = (order[0], order[1], order[2]);

        let spread = (fv[worst] - fv[best]).abs();
        let diam = simplex
            .iter()
            .map(|p| {
                ((p[0] - simplex[best][0]).powi(2) + (p[1] - simplex[best][1]).powi(2)).sqrt()
            })
            .fold(0.0f64, f64::max);
        if spread < opts.f_tol && diam < opts.x_tol {
            break;
        }

        let centroid = [
            0.5 * (simplex[best][0] + simplex[mid][0]),
            0.5 * (simplex[best][1] + simplex[mid][1]),
        ];
        let reflect = [
            centroid[0] + ALPHA * (centroid[0] - simplex[worst][0]),
            centroid[1] + ALPHA * (centroid[1] - simplex[worst][1]),
        ];
        let f_r = eval(reflect, &mut n_evals);

        if f_r < fv[best] {
            let expand = [
                centroid[0] + GAMMA * (reflect[0] - centroid[0]),
                centroid[1] + GAMMA * (reflect[1] - centroid[1]),
            ];
            let f_e = eval(expand, &mut n_evals);
            if f_e < f_r {
                simplex[worst] = expand;
                fv[worst] = f_e;
            } else {
                simplex[worst] = reflect;
                fv[worst] = f_r;
            }
            continue;
        }
        if f_r < fv[mid] {
            simplex[worst] = reflect;
            fv[worst] = f_r;
            continue;
        }
        // Contraction.
        let contract = [
            centroid[0] + RHO * (simplex[worst][0] - centroid[0]),
            centroid[1] + RHO * (simplex[worst][1] - centroid[1]),
        ];
        let f_c = eval(contract, &mut n_evals);
        if f_c < fv[worst] {
            simplex[worst] = contract;
            fv[worst] = f_c;
            continue;
        }
        // Shrink towards the best vertex.
        for idx in [mid, worst] {
            simplex[idx] = [
                simplex[best][0] + SIGMA * (simplex[idx][0] - simplex[best][0]),
                simplex[best][1] + SIGMA * (simplex[idx][1] - simplex[best][1]),
            ];
            fv[idx] = eval(simplex[idx], &mut n_evals);
        }
    }

    let mut best = 0;
    for i in 1..3 {
        if fv[i] < fv[best] {
            best = i;
        }
    }
    NelderMeadResult {
        x: simplex[best],
        f: fv[best],
        n_evals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_quadratic_minimum() {
        let r = nelder_mead_2d(
            |x| (x[0] - 1.3).powi(2) + 2.0 * (x[1] + 0.4).powi(2),
            [0.0, 0.0],
            &NelderMeadOpts::default(),
        );
        assert!((r.x[0] - 1.3).abs() < 1e-5);
        assert!((r.x[1] + 0.4).abs() < 1e-5);
    }

    #[test]
    fn handles_rosenbrock_valley() {
        let r = nelder_mead_2d(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            [-0.5, 0.5],
            &NelderMeadOpts {
                max_iter: 5000,
                scale: 0.5,
                ..Default::default()
            },
        );
        assert!((r.x[0] - 1.0).abs() < 1e-3, "{:?}", r);
        assert!((r.x[1] - 1.0).abs() < 1e-3);
    }
}
