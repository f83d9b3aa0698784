//! Monte-Carlo verification of the small-step expansion of the dual
//! objective at feedback-particle potentials.
//!
//! For potentials of the form `f(x; y) = ½x² + φ(x)y + ψ(x)·dt` evaluated on
//! observations `Y = h(X)·dt + σ_w·√dt·W`, the objective `J(f)` expands as
//! `c₀ + J₁(φ)·dt + O(dt²)`, with `J₁` the weighted-Dirichlet cost of the
//! Poisson problem (see [`j1_objective`](crate::fpf::j1_objective)). This
//! module estimates `J(f)` on a grid of step sizes and fits the linear
//! coefficient, which the tests compare against the quadrature value of `J₁`.
//!
//! Estimator notes, all aimed at making a 10%-level slope readable at
//! desk-scale sample counts:
//!
//! * the same prior draws and noise draws serve every step size (common
//!   random numbers), so the dt-dependence of the table is smooth;
//! * each prior draw appears with both `+W` and `−W` (antithetic pairs),
//!   which cancels the O(√dt) noise terms of the conjugate average exactly;
//! * the product-coupling term is computed in closed form from the separable
//!   structure `f = a(x) + φ(x)y + ψ(x)dt`: the double sum over pairs
//!   factorizes into products of marginal means, and the antithetic noise
//!   cancels from `mean(Y)` identically;
//! * the conjugate `f*(x, y) = max_z (zx − f(z; y))` has no closed form for
//!   general `φ, ψ`, so it is computed per sample by safeguarded bisection on
//!   the strictly decreasing `d/dz (zx − f) = x − z − φ′(z)y − ψ′(z)dt`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::models::PriorSampler;
use crate::rng::Stream;
use crate::{Error, Result};

/// A C¹ scalar function given as a value/derivative closure pair, the form in
/// which φ and ψ enter the expansion check.
pub struct ScalarC1<'a> {
    value: &'a dyn Fn(f64) -> f64,
    deriv: &'a dyn Fn(f64) -> f64,
}

impl<'a> ScalarC1<'a> {
    /// Bundle a function with its derivative.
    pub fn new(value: &'a dyn Fn(f64) -> f64, deriv: &'a dyn Fn(f64) -> f64) -> Self {
        Self { value, deriv }
    }

    /// The zero function.
    pub fn zero() -> Self {
        ScalarC1 {
            value: &|_| 0.0,
            deriv: &|_| 0.0,
        }
    }

    /// Function value.
    pub fn value(&self, x: f64) -> f64 {
        (self.value)(x)
    }

    /// Derivative value.
    pub fn deriv(&self, x: f64) -> f64 {
        (self.deriv)(x)
    }
}

/// One step size and its Monte-Carlo objective value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prop2Row {
    /// Observation step size.
    pub dt: f64,
    /// Estimated `J(f)` at this step size.
    pub objective: f64,
}

/// Output of [`prop2_expansion_check`]: the (dt, J) table and the fitted
/// affine law `J ≈ intercept + slope·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prop2Fit {
    /// Rows in the order of the surviving step sizes, ascending.
    pub rows: Vec<Prop2Row>,
    /// Fitted constant term (free; not pinned to a theoretical value).
    pub intercept: f64,
    /// Fitted linear coefficient, the quantity compared against `J₁(φ)`.
    pub slope: f64,
}

/// Estimate `J(½x² + φ(x)y + ψ(x)dt)` over a list of step sizes and fit the
/// linear-in-dt law.
///
/// `prior` must be one-dimensional. Step sizes where the per-sample conjugate
/// maximization fails (the potential stops being convex at that dt) are
/// dropped from the table; if fewer than two survive, the failure is
/// reported as [`Error::ConjugateMaximization`]. Deterministic in `seed`.
pub fn prop2_expansion_check(
    prior: &dyn PriorSampler,
    h: &dyn Fn(f64) -> f64,
    sigma_w: f64,
    phi: &ScalarC1,
    psi: &ScalarC1,
    dt_list: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Prop2Fit> {
    if prior.dim() != 1 {
        return Err(Error::DimensionMismatch {
            context: format!("expansion check is 1-D; prior has dimension {}", prior.dim()),
        });
    }
    if !(sigma_w.is_finite() && sigma_w > 0.0) {
        return Err(Error::InvalidConfig {
            context: format!("sigma_w must be positive and finite, got {sigma_w}"),
        });
    }
    if samples < 2 {
        return Err(Error::TooFewParticles {
            what: "expansion check",
            needed: 2,
            got: samples,
        });
    }
    if dt_list.is_empty() {
        return Err(Error::InvalidConfig {
            context: "dt list is empty".into(),
        });
    }
    for &dt in dt_list {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidConfig {
                context: format!("step sizes must be positive and finite, got {dt}"),
            });
        }
    }
    let mut dts: Vec<f64> = dt_list.to_vec();
    dts.sort_by(|a, b| a.partial_cmp(b).expect("finite dt"));

    // Common random numbers: one set of prior draws and one set of noise
    // draws shared by every dt and used in antithetic ± pairs.
    let mut rng = Stream(33).rng(seed);
    let xs: Vec<f64> = (0..samples).map(|_| prior.sample(&mut rng)[0]).collect();
    let ws: Vec<f64> = (0..samples)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();

    // dt-independent pieces of the factorized product term.
    let n = samples as f64;
    let mean_half_sq = xs.iter().map(|x| 0.5 * x * x).sum::<f64>() / n;
    let mean_phi = xs.iter().map(|&x| phi.value(x)).sum::<f64>() / n;
    let mean_psi = xs.iter().map(|&x| psi.value(x)).sum::<f64>() / n;
    let mean_h = xs.iter().map(|&x| h(x)).sum::<f64>() / n;

    let mut rows = Vec::with_capacity(dts.len());
    let mut last_failure: Option<Error> = None;
    'next_dt: for &dt in &dts {
        // Product term: (1/M²) Σ_ij f(X_i, Y_j) with M = 2·samples antithetic
        // pairs. mean(Y) = mean(h(X))·dt exactly — the ±W pairs cancel.
        let product_term = mean_half_sq + mean_phi * mean_h * dt + mean_psi * dt;

        let noise_scale = sigma_w * dt.sqrt();
        let mut conjugate_term = 0.0;
        for i in 0..samples {
            let x = xs[i];
            let drift = h(x) * dt;
            for sign in [1.0, -1.0] {
                let y = drift + sign * noise_scale * ws[i];
                match conjugate_by_bisection(x, y, dt, phi, psi) {
                    Some(value) => conjugate_term += value,
                    None => {
                        last_failure = Some(Error::ConjugateMaximization { dt });
                        continue 'next_dt;
                    }
                }
            }
        }
        conjugate_term /= 2.0 * n;
        rows.push(Prop2Row {
            dt,
            objective: product_term + conjugate_term,
        });
    }

    if rows.len() < 2 {
        return Err(last_failure.unwrap_or(Error::InvalidConfig {
            context: "fewer than two step sizes supplied".into(),
        }));
    }

    let (intercept, slope) = fit_line(&rows);
    Ok(Prop2Fit {
        rows,
        intercept,
        slope,
    })
}

/// Maximize `g(z) = zx − ½z² − φ(z)y − ψ(z)dt` by safeguarded bisection on
/// its strictly decreasing derivative. Returns `None` when no sign-changing
/// bracket can be found — the convexity of the potential has failed at this
/// step size.
fn conjugate_by_bisection(x: f64, y: f64, dt: f64, phi: &ScalarC1, psi: &ScalarC1) -> Option<f64> {
    let g_prime = |z: f64| x - z - phi.deriv(z) * y - psi.deriv(z) * dt;
    let g = |z: f64| z * x - 0.5 * z * z - phi.value(z) * y - psi.value(z) * dt;

    // Expand a bracket around the unperturbed maximizer z = x.
    let mut step = 1.0 + x.abs();
    let (mut lo, mut hi) = (x - step, x + step);
    let mut expansions = 0;
    while g_prime(lo) <= 0.0 {
        hi = lo;
        step *= 2.0;
        lo = x - step;
        expansions += 1;
        if expansions > 60 || !lo.is_finite() {
            return None;
        }
    }
    while g_prime(hi) >= 0.0 {
        lo = hi;
        step *= 2.0;
        hi = x + step;
        expansions += 1;
        if expansions > 60 || !hi.is_finite() {
            return None;
        }
    }

    // g′(lo) > 0 > g′(hi): bisect to the root.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g_prime(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * (1.0 + mid.abs()) {
            break;
        }
    }
    let z = 0.5 * (lo + hi);
    let value = g(z);
    value.is_finite().then_some(value)
}

/// Ordinary least squares for `objective ≈ intercept + slope·dt`.
fn fit_line(rows: &[Prop2Row]) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean_t = rows.iter().map(|r| r.dt).sum::<f64>() / n;
    let mean_j = rows.iter().map(|r| r.objective).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for r in rows {
        cov += (r.dt - mean_t) * (r.objective - mean_j);
        var += (r.dt - mean_t) * (r.dt - mean_t);
    }
    let slope = cov / var;
    (mean_j - slope * mean_t, slope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GaussianPrior;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn standard_prior() -> GaussianPrior {
        GaussianPrior::standard(1)
    }

    fn identity_field() -> ScalarC1<'static> {
        ScalarC1::new(&|x| x, &|_| 1.0)
    }

    #[test]
    fn zero_fields_give_flat_objective() {
        // f = ½x² is self-conjugate and ignores y entirely, so every row is
        // exactly the empirical E[x²] and the slope is exactly zero.
        let prior = standard_prior();
        let fit = prop2_expansion_check(
            &prior,
            &|x| x,
            1.0,
            &ScalarC1::zero(),
            &ScalarC1::zero(),
            &[1e-3, 2e-3, 5e-3, 1e-2],
            4000,
            7,
        )
        .unwrap();
        assert_eq!(fit.rows.len(), 4);
        let first = fit.rows[0].objective;
        for row in &fit.rows {
            assert_abs_diff_eq!(row.objective, first, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(fit.slope, 0.0, epsilon = 1e-9);
        // The level is E[X²] ≈ 1 up to Monte-Carlo error.
        assert_abs_diff_eq!(fit.intercept, 1.0, epsilon = 0.08);
    }

    #[test]
    fn optimal_linear_field_recovers_j1_slope() {
        // Gaussian prior, h(x) = x, σ_w = 1, φ(x) = x: J₁ = −½ and the exact
        // expansion is J = 1 − dt/2 + dt²/2, so the fitted slope on small dt
        // sits within a few percent of −0.5.
        let prior = standard_prior();
        let fit = prop2_expansion_check(
            &prior,
            &|x| x,
            1.0,
            &identity_field(),
            &ScalarC1::zero(),
            &[1e-3, 2e-3, 5e-3, 1e-2],
            30_000,
            11,
        )
        .unwrap();
        assert_relative_eq!(fit.slope, -0.5, max_relative = 0.1);
        assert_abs_diff_eq!(fit.intercept, 1.0, epsilon = 0.05);
    }

    #[test]
    fn doubled_field_has_zero_slope_and_loses_to_optimal() {
        // φ(x) = 2x has J₁ = E[2 − 2x²] = 0: the slope vanishes and is
        // therefore strictly worse (larger) than the optimal slope −½.
        let prior = standard_prior();
        let doubled = ScalarC1::new(&|x| 2.0 * x, &|_| 2.0);
        let dt_list = [1e-3, 2e-3, 5e-3, 1e-2];
        let suboptimal = prop2_expansion_check(
            &prior,
            &|x| x,
            1.0,
            &doubled,
            &ScalarC1::zero(),
            &dt_list,
            30_000,
            11,
        )
        .unwrap();
        assert_abs_diff_eq!(suboptimal.slope, 0.0, epsilon = 0.1);

        let optimal = prop2_expansion_check(
            &prior,
            &|x| x,
            1.0,
            &identity_field(),
            &ScalarC1::zero(),
            &dt_list,
            30_000,
            11,
        )
        .unwrap();
        assert!(
            optimal.slope < suboptimal.slope - 0.3,
            "optimal {} vs suboptimal {}",
            optimal.slope,
            suboptimal.slope
        );
    }

    #[test]
    fn helmholtz_psi_lowers_the_quadratic_coefficient() {
        // With φ(x) = x fixed, the optimal second-order correction is
        // ψ(x) = −x²/4 (its gradient is the expansion velocity −x/2). The
        // exact laws are J = 1 − dt/2 + (3/8)dt² against 1 − dt/2 + (1/2)dt²
        // for ψ ≡ 0, so the fitted quadratic coefficient must drop. Larger
        // steps make dt² resolvable; shared seeds correlate the noise away.
        let prior = standard_prior();
        let psi_star = ScalarC1::new(&|x| -0.25 * x * x, &|x| -0.5 * x);
        let dt_list = [0.05, 0.1, 0.15, 0.2];
        let with_psi = prop2_expansion_check(
            &prior, &|x| x, 1.0, &identity_field(), &psi_star, &dt_list, 40_000, 5,
        )
        .unwrap();
        let without = prop2_expansion_check(
            &prior,
            &|x| x,
            1.0,
            &identity_field(),
            &ScalarC1::zero(),
            &dt_list,
            40_000,
            5,
        )
        .unwrap();
        let quad = |fit: &Prop2Fit| -> f64 {
            // Exact quadratic through three spread rows of the four.
            let (a, b, c) = (fit.rows[0], fit.rows[2], fit.rows[3]);
            let d1 = (b.objective - a.objective) / (b.dt - a.dt);
            let d2 = (c.objective - b.objective) / (c.dt - b.dt);
            (d2 - d1) / (c.dt - a.dt)
        };
        let c2_with = quad(&with_psi);
        let c2_without = quad(&without);
        assert!(
            c2_with < c2_without,
            "quadratic coefficient {c2_with} not below {c2_without}"
        );
        // Both should sit near their exact values.
        assert_abs_diff_eq!(c2_with, 0.375, epsilon = 0.1);
        assert_abs_diff_eq!(c2_without, 0.5, epsilon = 0.1);
    }

    #[test]
    fn infeasible_step_sizes_are_dropped_or_reported() {
        // φ(z) = z² makes f″ = 1 + 2y; a huge σ_w drives y negative enough
        // that convexity fails and the bracket search cannot close. With all
        // step sizes failing, the error names the step size.
        let prior = standard_prior();
        let quad_phi = ScalarC1::new(&|x| x * x, &|x| 2.0 * x);
        let err = prop2_expansion_check(
            &prior,
            &|x| x,
            1.0,
            &quad_phi,
            &ScalarC1::zero(),
            &[4.0, 9.0],
            400,
            3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ConjugateMaximization { .. }));
    }

    #[test]
    fn results_are_deterministic_in_the_seed() {
        let prior = standard_prior();
        let run = || {
            prop2_expansion_check(
                &prior,
                &|x| x,
                1.0,
                &identity_field(),
                &ScalarC1::zero(),
                &[1e-3, 1e-2],
                2000,
                9,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}
