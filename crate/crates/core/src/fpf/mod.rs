//! Feedback-particle limit of the transport formulation, in one dimension.
//!
//! In the continuous-time limit the transport potential degenerates to the
//! identity plus an O(dt) correction whose coefficient φ solves the weighted
//! Poisson equation
//!
//! ```text
//! −(1/p) (p φ′)′ = (h − ĥ)/σ_w²,     ĥ = E_p[h],
//! ```
//!
//! and the particle filter applies the gain `K = φ′` through an
//! Euler–Maruyama update. In 1-D the equation integrates exactly: the flux is
//!
//! ```text
//! p(x) φ′(x) = −(1/σ_w²) ∫_{−∞}^{x} (h(s) − ĥ) p(s) ds,
//! ```
//!
//! (integrating the divergence form once; the boundary flux vanishes because
//! `h − ĥ` has p-mean zero), so the solver is pure quadrature rather than a
//! generic elliptic solve. The associated cost functional
//!
//! ```text
//! J₁(φ) = E_p[ (σ_w²/2) φ′(X)² − φ(X)(h(X) − ĥ) ]
//! ```
//!
//! is minimized by the Poisson solution, which the tests verify along with the
//! closed forms of the linear-Gaussian case (constant gain `σ²/σ_w²`,
//! `J₁ = −σ⁴/(2σ_w²)`).
//!
//! Submodules: [`prop2_expansion_check`] verifies the small-dt expansion of
//! the dual objective at potentials of the form `½x² + φ(x)y + ψ(x)dt`, and
//! [`fpf_simulate`] runs the interacting particle system against synthesized
//! observation increments.

mod prop2;
mod simulate;

pub use prop2::{prop2_expansion_check, Prop2Fit, Prop2Row, ScalarC1};
pub use simulate::{estimate_gain, fpf_simulate, FpfConfig, FpfRun};

use crate::{Error, Result};

/// A uniform 1-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D {
    nodes: Vec<f64>,
    spacing: f64,
}

impl Grid1D {
    /// Uniform grid of `m` nodes spanning `[lo, hi]`.
    pub fn new(lo: f64, hi: f64, m: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::InvalidConfig {
                context: format!("grid bounds [{lo}, {hi}] are not an increasing finite interval"),
            });
        }
        if m < 3 {
            return Err(Error::InvalidConfig {
                context: format!("grid needs at least 3 nodes, got {m}"),
            });
        }
        let spacing = (hi - lo) / (m - 1) as f64;
        let nodes = (0..m).map(|i| lo + spacing * i as f64).collect();
        Ok(Self { nodes, spacing })
    }

    /// Adopt explicit nodes, validating strict increase and uniformity
    /// (spacing constant to within 1e-12 relative).
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(Error::InvalidConfig {
                context: format!("grid needs at least 3 nodes, got {}", nodes.len()),
            });
        }
        crate::ensure_finite_slice(&nodes, "grid nodes")?;
        let spacing = nodes[1] - nodes[0];
        if spacing <= 0.0 {
            return Err(Error::InvalidConfig {
                context: "grid nodes must be strictly increasing".into(),
            });
        }
        for i in 1..nodes.len() {
            let step = nodes[i] - nodes[i - 1];
            if (step - spacing).abs() > 1e-12 * spacing.max(1.0) {
                return Err(Error::InvalidConfig {
                    context: format!(
                        "grid is not uniform: spacing {step} at node {i} vs {spacing}"
                    ),
                });
            }
        }
        Ok(Self { nodes, spacing })
    }

    /// Node coordinates.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Whether the grid has no nodes (never true for a constructed grid).
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Uniform spacing between adjacent nodes.
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Evaluate a function on every node.
    pub fn evaluate(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes.iter().map(|&x| f(x)).collect()
    }

    /// Trapezoid quadrature of nodal values.
    pub fn trapezoid(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        let mut total = 0.0;
        for i in 1..values.len() {
            total += values[i - 1] + values[i];
        }
        0.5 * self.spacing * total
    }

    /// Cumulative trapezoid integral from the left boundary; `out[0] = 0`.
    pub fn cumulative_trapezoid(&self, values: &[f64]) -> Vec<f64> {
        debug_assert_eq!(values.len(), self.len());
        let mut out = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        out.push(0.0);
        for i in 1..values.len() {
            acc += 0.5 * self.spacing * (values[i - 1] + values[i]);
            out.push(acc);
        }
        out
    }

    /// Piecewise-linear interpolation of nodal values, clamped to the end
    /// values outside the grid.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        let lo = self.nodes[0];
        if x <= lo {
            return values[0];
        }
        let hi = *self.nodes.last().expect("grid nonempty");
        if x >= hi {
            return *values.last().expect("grid nonempty");
        }
        let t = (x - lo) / self.spacing;
        let i = (t.floor() as usize).min(self.len() - 2);
        let frac = t - i as f64;
        values[i] * (1.0 - frac) + values[i + 1] * frac
    }
}

/// Solution of the 1-D weighted Poisson equation on a grid.
///
/// Invariants established by [`solve_poisson_1d`]: `density ≥ 0` with unit
/// trapezoid mass, `gain = φ′` satisfying the flux identity, and `phi`
/// centered to p-mean zero (the equation only fixes φ up to a constant, which
/// the gain never sees).
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonSolution1D {
    /// The grid everything lives on.
    pub grid: Grid1D,
    /// Normalized density on the nodes.
    pub density: Vec<f64>,
    /// Potential φ on the nodes, p-mean zero.
    pub phi: Vec<f64>,
    /// Gain `φ′` on the nodes.
    pub gain: Vec<f64>,
    /// The p-average `ĥ` of the observation function.
    pub h_hat: f64,
}

impl PoissonSolution1D {
    /// Interpolated gain at an arbitrary point.
    pub fn gain_at(&self, x: f64) -> f64 {
        self.grid.interpolate(&self.gain, x)
    }

    /// Interpolated potential at an arbitrary point.
    pub fn phi_at(&self, x: f64) -> f64 {
        self.grid.interpolate(&self.phi, x)
    }

    /// Gain derivative `φ″` on the nodes, by central differences (one-sided
    /// at the boundaries).
    pub fn gain_derivative(&self) -> Vec<f64> {
        let m = self.grid.len();
        let dx = self.grid.spacing();
        let mut out = vec![0.0; m];
        out[0] = (self.gain[1] - self.gain[0]) / dx;
        out[m - 1] = (self.gain[m - 1] - self.gain[m - 2]) / dx;
        for i in 1..m - 1 {
            out[i] = (self.gain[i + 1] - self.gain[i - 1]) / (2.0 * dx);
        }
        out
    }
}

/// Solve the weighted Poisson equation on a grid by direct flux integration.
///
/// `density` and `h_values` are nodal values of the (possibly unnormalized)
/// density and the observation function. The density must be strictly
/// positive on interior nodes; its trapezoid mass is normalized to one before
/// solving. The returned gain satisfies
/// `p·gain = −(1/σ_w²)·cumulative-trapezoid((h − ĥ)p)` — the sign makes the
/// flux the *negative* antiderivative of the right-hand side, which is what
/// the divergence form demands (for a standard Gaussian with `h(x) = x` it
/// yields the constant gain `+σ²/σ_w²`, not its negative).
///
/// Two numerical policies keep the division by `p` sane: the right-hand side
/// is projected onto the discrete solvability condition (its quadrature
/// residue, a multiple of machine epsilon, is removed), and the gain is set
/// to zero on nodes where `p` is below `1e-13` of its peak — outside the
/// numerical support the flux is pure roundoff, and those nodes contribute
/// nothing representable to any `p`-weighted quantity.
pub fn solve_poisson_1d(
    grid: &Grid1D,
    density: &[f64],
    h_values: &[f64],
    sigma_w: f64,
) -> Result<PoissonSolution1D> {
    let m = grid.len();
    if density.len() != m || h_values.len() != m {
        return Err(Error::DimensionMismatch {
            context: format!(
                "grid has {m} nodes but density has {} and h has {}",
                density.len(),
                h_values.len()
            ),
        });
    }
    if !(sigma_w.is_finite() && sigma_w > 0.0) {
        return Err(Error::InvalidConfig {
            context: format!("sigma_w must be positive and finite, got {sigma_w}"),
        });
    }
    crate::ensure_finite_slice(density, "density")?;
    crate::ensure_finite_slice(h_values, "h values")?;
    for (node, &p) in density.iter().enumerate().take(m - 1).skip(1) {
        if p <= 0.0 {
            return Err(Error::DensityUnderflow { node, value: p });
        }
    }
    if density[0] < 0.0 {
        return Err(Error::DensityUnderflow {
            node: 0,
            value: density[0],
        });
    }
    if density[m - 1] < 0.0 {
        return Err(Error::DensityUnderflow {
            node: m - 1,
            value: density[m - 1],
        });
    }

    let mass = grid.trapezoid(density);
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::DensityUnderflow {
            node: 0,
            value: mass,
        });
    }
    let p: Vec<f64> = density.iter().map(|v| v / mass).collect();

    let hp: Vec<f64> = h_values.iter().zip(&p).map(|(h, p)| h * p).collect();
    let h_hat = grid.trapezoid(&hp);

    let mut rhs: Vec<f64> = h_values
        .iter()
        .zip(&p)
        .map(|(h, p)| (h - h_hat) * p)
        .collect();
    // Discrete solvability projection: the continuous equation requires
    // ∫(h − ĥ)p = 0, but quadrature roundoff leaves a small residue that
    // would drift the flux away from zero at the right boundary and then be
    // amplified wherever p is small. Subtracting residue·p (p has unit mass)
    // restores the condition to machine precision; for a constant h it
    // cancels the right-hand side almost exactly.
    let residue = grid.trapezoid(&rhs);
    for (r, p) in rhs.iter_mut().zip(&p) {
        *r -= residue * p;
    }
    let inv_var = 1.0 / (sigma_w * sigma_w);
    let flux: Vec<f64> = grid
        .cumulative_trapezoid(&rhs)
        .into_iter()
        .map(|v| -inv_var * v)
        .collect();

    // Divide only on the numerical support of p. Below ~1e-13 of the peak
    // the computed flux is accumulated roundoff, and dividing by a density
    // that far underwater amplifies it without bound — while the true
    // contribution of such nodes to any p-weighted functional is beneath
    // double precision. The gain is therefore zero there and φ stays flat.
    let peak = p.iter().cloned().fold(0.0, f64::max);
    let support = peak * 1e-13;
    let mut gain = vec![0.0; m];
    for i in 0..m {
        if p[i] >= support {
            gain[i] = flux[i] / p[i];
        }
    }

    let mut phi = grid.cumulative_trapezoid(&gain);
    let weighted: Vec<f64> = phi.iter().zip(&p).map(|(phi, p)| phi * p).collect();
    let mean = grid.trapezoid(&weighted);
    for v in &mut phi {
        *v -= mean;
    }

    Ok(PoissonSolution1D {
        grid: grid.clone(),
        density: p,
        phi,
        gain,
        h_hat,
    })
}

/// The cost functional `J₁(φ) = E_p[(σ_w²/2)φ′² − φ(h − ĥ)]` by trapezoid
/// quadrature, given the gain `φ′` on the nodes.
///
/// φ itself is reconstructed by cumulative integration of the gain; the free
/// integration constant is irrelevant because `h − ĥ` has p-mean zero.
pub fn j1_objective(grid: &Grid1D, gain: &[f64], density: &[f64], h_values: &[f64], sigma_w: f64) -> Result<f64> {
    let m = grid.len();
    if gain.len() != m || density.len() != m || h_values.len() != m {
        return Err(Error::DimensionMismatch {
            context: format!(
                "grid has {m} nodes but gain/density/h have {}/{}/{}",
                gain.len(),
                density.len(),
                h_values.len()
            ),
        });
    }
    if !(sigma_w.is_finite() && sigma_w > 0.0) {
        return Err(Error::InvalidConfig {
            context: format!("sigma_w must be positive and finite, got {sigma_w}"),
        });
    }
    let mass = grid.trapezoid(density);
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::DensityUnderflow {
            node: 0,
            value: mass,
        });
    }
    let p: Vec<f64> = density.iter().map(|v| v / mass).collect();
    let hp: Vec<f64> = h_values.iter().zip(&p).map(|(h, p)| h * p).collect();
    let h_hat = grid.trapezoid(&hp);
    let phi = grid.cumulative_trapezoid(gain);
    let half_var = 0.5 * sigma_w * sigma_w;
    let integrand: Vec<f64> = (0..m)
        .map(|i| (half_var * gain[i] * gain[i] - phi[i] * (h_values[i] - h_hat)) * p[i])
        .collect();
    Ok(grid.trapezoid(&integrand))
}

/// Standard normal pdf with mean `mu` and standard deviation `sigma`.
#[cfg(test)]
pub(crate) fn gaussian_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::bimodal_prior;
    use crate::rng;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::Rng;

    fn gaussian_setup(sigma: f64, m: usize) -> (Grid1D, Vec<f64>, Vec<f64>) {
        // At least ±6σ of domain, so that the tail mass missing from the
        // flux integral sits well below the gain tolerances.
        let half_width = 8.0f64.max(6.0 * sigma);
        let grid = Grid1D::new(-half_width, half_width, m).unwrap();
        let p = grid.evaluate(|x| gaussian_pdf(x, 0.0, sigma));
        let h = grid.evaluate(|x| x);
        (grid, p, h)
    }

    #[test]
    fn grid_construction_and_quadrature() {
        let grid = Grid1D::new(0.0, 1.0, 101).unwrap();
        assert_abs_diff_eq!(grid.spacing(), 0.01, epsilon = 1e-15);
        // ∫₀¹ x dx = ½ exactly for the trapezoid rule on a linear integrand.
        let linear = grid.evaluate(|x| x);
        assert_relative_eq!(grid.trapezoid(&linear), 0.5, epsilon = 1e-14);
        let cumulative = grid.cumulative_trapezoid(&linear);
        assert_relative_eq!(cumulative[100], 0.5, epsilon = 1e-14);
        // Interpolation reproduces nodal values and midpoints of a line.
        assert_abs_diff_eq!(grid.interpolate(&linear, 0.375), 0.375, epsilon = 1e-14);
        assert_abs_diff_eq!(grid.interpolate(&linear, -3.0), 0.0);
        assert_abs_diff_eq!(grid.interpolate(&linear, 7.0), 1.0);
    }

    #[test]
    fn invalid_grids_are_rejected() {
        assert!(Grid1D::new(1.0, 0.0, 10).is_err());
        assert!(Grid1D::new(0.0, 1.0, 2).is_err());
        assert!(Grid1D::from_nodes(vec![0.0, 0.1, 0.3]).is_err());
        assert!(Grid1D::from_nodes(vec![0.0, 0.1, 0.2]).is_ok());
    }

    #[test]
    fn standard_gaussian_linear_observation_has_unit_gain() {
        // φ′ = σ²/σ_w² is the exact solution; σ = σ_w = 1 gives gain ≡ 1.
        let (grid, p, h) = gaussian_setup(1.0, 2000);
        let sol = solve_poisson_1d(&grid, &p, &h, 1.0).unwrap();
        let mut worst: f64 = 0.0;
        for (i, &x) in grid.nodes().iter().enumerate() {
            if x.abs() <= 3.0 {
                worst = worst.max((sol.gain[i] - 1.0).abs());
            }
        }
        assert!(worst < 1e-3, "sup gain error {worst} on |x| ≤ 3");
        assert_abs_diff_eq!(sol.h_hat, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn wide_gaussian_gain_is_sigma_squared() {
        let (grid, p, h) = gaussian_setup(2.0, 2000);
        let sol = solve_poisson_1d(&grid, &p, &h, 1.0).unwrap();
        for (i, &x) in grid.nodes().iter().enumerate() {
            if x.abs() <= 3.0 {
                assert_relative_eq!(sol.gain[i], 4.0, max_relative = 1e-3);
            }
        }
    }

    #[test]
    fn constant_observation_gives_zero_gain() {
        let grid = Grid1D::new(-6.0, 6.0, 500).unwrap();
        let p = grid.evaluate(|x| gaussian_pdf(x, 0.3, 1.2));
        let h = vec![2.5; grid.len()];
        let sol = solve_poisson_1d(&grid, &p, &h, 0.7).unwrap();
        assert!(sol.gain.iter().all(|g| g.abs() < 1e-12));
        assert!(sol.phi.iter().all(|v| v.abs() < 1e-12));
        assert_relative_eq!(sol.h_hat, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn solution_invariants_hold() {
        let grid = Grid1D::new(-7.0, 7.0, 1200).unwrap();
        let mixture = bimodal_prior();
        let p = grid.evaluate(|x| mixture.pdf(x));
        let h = grid.evaluate(|x| x);
        let sol = solve_poisson_1d(&grid, &p, &h, 1.0).unwrap();
        // Unit mass and p-mean-zero φ.
        assert_abs_diff_eq!(grid.trapezoid(&sol.density), 1.0, epsilon = 1e-9);
        let weighted: Vec<f64> = sol.phi.iter().zip(&sol.density).map(|(a, b)| a * b).collect();
        assert_abs_diff_eq!(grid.trapezoid(&weighted), 0.0, epsilon = 1e-9);
        // Solvability: the flux returns to zero at the right boundary.
        let rhs: Vec<f64> = (0..grid.len())
            .map(|i| (h[i] - sol.h_hat) * sol.density[i])
            .collect();
        let total = grid.trapezoid(&rhs);
        assert!(total.abs() < 1e-6, "boundary flux {total}");
    }

    #[test]
    fn poisson_residual_shrinks_at_second_order() {
        // Central-differencing the flux against the right-hand side measures
        // pure quadrature error, which must drop ~4× when the grid doubles.
        let residual = |m: usize| -> f64 {
            let (grid, p, h) = gaussian_setup(1.0, m);
            let sol = solve_poisson_1d(&grid, &p, &h, 1.0).unwrap();
            let dx = grid.spacing();
            let inv_var = 1.0;
            let mut worst: f64 = 0.0;
            for i in 1..grid.len() - 1 {
                let flux_i = |j: usize| sol.density[j] * sol.gain[j];
                let derivative = (flux_i(i + 1) - flux_i(i - 1)) / (2.0 * dx);
                let rhs = -(h[i] - sol.h_hat) * sol.density[i] * inv_var;
                worst = worst.max((derivative - rhs).abs());
            }
            worst
        };
        let coarse = residual(500);
        let fine = residual(1000);
        let ratio = coarse / fine;
        assert!(
            (3.0..5.0).contains(&ratio),
            "residual ratio {ratio} (coarse {coarse}, fine {fine})"
        );
    }

    #[test]
    fn negative_interior_density_is_an_underflow_error() {
        let grid = Grid1D::new(-1.0, 1.0, 11).unwrap();
        let mut p = vec![1.0; 11];
        p[5] = 0.0;
        let h = grid.evaluate(|x| x);
        let err = solve_poisson_1d(&grid, &p, &h, 1.0).unwrap_err();
        match err {
            Error::DensityUnderflow { node, value } => {
                assert_eq!(node, 5);
                assert_eq!(value, 0.0);
            }
            other => panic!("expected underflow, got {other}"),
        }
    }

    #[test]
    fn j1_objective_closed_forms() {
        let (grid, p, h) = gaussian_setup(1.0, 2000);
        // φ ≡ 0 → 0 exactly.
        assert_eq!(
            j1_objective(&grid, &vec![0.0; grid.len()], &p, &h, 1.0).unwrap(),
            0.0
        );
        // Exact gain: J₁ = −σ⁴/(2σ_w²) = −0.5 for σ = σ_w = 1.
        let sol = solve_poisson_1d(&grid, &p, &h, 1.0).unwrap();
        let j = j1_objective(&grid, &sol.gain, &p, &h, 1.0).unwrap();
        assert_abs_diff_eq!(j, -0.5, epsilon = 1e-3);
        // Doubled gain (φ = 2x): E[2 − 2x²] = 0.
        let doubled: Vec<f64> = sol.gain.iter().map(|g| 2.0 * g).collect();
        let j2 = j1_objective(&grid, &doubled, &p, &h, 1.0).unwrap();
        assert_abs_diff_eq!(j2, 0.0, epsilon = 3e-3);
        // Wider prior: σ = 2, σ_w = 1 → −σ⁴/2 = −8.
        let (grid4, p4, h4) = gaussian_setup(2.0, 2000);
        let sol4 = solve_poisson_1d(&grid4, &p4, &h4, 1.0).unwrap();
        let j4 = j1_objective(&grid4, &sol4.gain, &p4, &h4, 1.0).unwrap();
        assert_relative_eq!(j4, -8.0, max_relative = 1e-2);
    }

    #[test]
    fn solver_gain_minimizes_j1() {
        // Convexity of J₁: every perturbation of the solver output scores
        // strictly higher.
        let grid = Grid1D::new(-7.0, 7.0, 1500).unwrap();
        let mixture = bimodal_prior();
        let p = grid.evaluate(|x| mixture.pdf(x));
        let h = grid.evaluate(|x| x);
        let sol = solve_poisson_1d(&grid, &p, &h, 1.0).unwrap();
        let base = j1_objective(&grid, &sol.gain, &p, &h, 1.0).unwrap();

        let mut rng = rng::seeded(17);
        for _ in 0..10 {
            let perturbed: Vec<f64> = sol
                .gain
                .iter()
                .map(|g| g + 1e-2 * (rng.random::<f64>() * 2.0 - 1.0))
                .collect();
            let j = j1_objective(&grid, &perturbed, &p, &h, 1.0).unwrap();
            assert!(j > base, "perturbation scored {j} ≤ {base}");
        }

        // And it beats the best constant gain on a non-Gaussian density.
        let mut best_constant = f64::INFINITY;
        for k in 0..400 {
            let c = k as f64 * 0.01;
            let constant = vec![c; grid.len()];
            let j = j1_objective(&grid, &constant, &p, &h, 1.0).unwrap();
            best_constant = best_constant.min(j);
        }
        assert!(
            base <= best_constant,
            "solver J₁ {base} vs best constant {best_constant}"
        );
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let grid = Grid1D::new(-1.0, 1.0, 10).unwrap();
        let err = j1_objective(&grid, &vec![0.0; 9], &vec![1.0; 10], &vec![0.0; 10], 1.0)
            .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
        let err = solve_poisson_1d(&grid, &vec![1.0; 10], &vec![0.0; 7], 1.0).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }
}
