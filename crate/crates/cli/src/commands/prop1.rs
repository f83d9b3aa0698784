//! `prop1-check`: the closed-form Gaussian transport coefficients against an
//! independent gradient-descent minimization, on random moment sets.
//!
//! Each case draws a joint covariance as `G Gᵀ + 0.1 I` (so the implied
//! posterior is automatically consistent), solves for `(A, K, b)` both ways,
//! and records the entrywise gap. CSV columns:
//! `case,dim_x,dim_y,max_error,closed_objective,descent_objective`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use otbayes::enkf::solve_prop1;
use otbayes::ensemble::MomentSet;
use otbayes::rng::Stream;
use otbayes::variational::{minimize_population_objective, population_objective_quadratic, DescentConfig};

use super::write_artifact;
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::report::{Check, Report};

/// Entrywise agreement threshold between the two solvers.
const AGREEMENT_LIMIT: f64 = 1e-4;

pub fn run(cfg: &RunConfig) -> CliResult<Report> {
    if cfg.degenerate {
        // Demonstrate the error exit: a singular Σ_y has no transport
        // coefficients, and the library refusal propagates as a hard error.
        let mom = MomentSet::new(
            DVector::zeros(2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            DMatrix::zeros(2, 2),
        )?;
        solve_prop1(&mom)?;
        unreachable!("a singular Σ_y cannot produce a solution");
    }

    let mut rng = Stream(50).rng(cfg.seed);
    let mut csv = String::from("case,dim_x,dim_y,max_error,closed_objective,descent_objective\n");
    let mut worst: f64 = 0.0;
    for case in 0..cfg.cases {
        // Case 0 pins the scalar degenerate corner; the rest draw dimensions.
        let (n, m) = if case == 0 {
            (1, 1)
        } else {
            (rng.random_range(1..=4), rng.random_range(1..=3))
        };
        let mom = random_moments(n, m, &mut rng)?;
        let closed = solve_prop1(&mom)?;
        let descent = minimize_population_objective(&mom, &DescentConfig::default())?;

        let gap = (closed.potential.a() - descent.a())
            .amax()
            .max((closed.potential.k() - descent.k()).amax())
            .max((closed.potential.b() - descent.b()).amax());
        worst = worst.max(gap);

        let closed_objective = population_objective_quadratic(&closed.potential, &mom)?;
        let descent_objective = population_objective_quadratic(&descent, &mom)?;
        csv.push_str(&format!(
            "{case},{n},{m},{gap},{closed_objective},{descent_objective}\n"
        ));
    }
    write_artifact(cfg, "prop1-check.csv", &csv)?;

    let mut report = Report::new();
    report.push(Check::below(
        "prop1-closed-form-agreement",
        worst,
        AGREEMENT_LIMIT,
    ));
    Ok(report)
}

/// A random consistent moment set: joint covariance `G Gᵀ + 0.1 I` split
/// into blocks, means uniform in `[-1, 1]`.
fn random_moments(n: usize, m: usize, rng: &mut impl Rng) -> CliResult<MomentSet> {
    let d = n + m;
    let g = DMatrix::from_fn(d, d, |_, _| 2.0 * rng.random::<f64>() - 1.0);
    let joint = &g * g.transpose() + DMatrix::identity(d, d) * 0.1;
    let mean_x = DVector::from_fn(n, |_, _| 2.0 * rng.random::<f64>() - 1.0);
    let mean_y = DVector::from_fn(m, |_, _| 2.0 * rng.random::<f64>() - 1.0);
    let cov_xx = joint.view((0, 0), (n, n)).into_owned();
    let cov_yy = joint.view((n, n), (m, m)).into_owned();
    let cov_xy = joint.view((0, n), (n, m)).into_owned();
    Ok(MomentSet::new(mean_x, mean_y, cov_xx, cov_yy, cov_xy)?)
}
