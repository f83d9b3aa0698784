//! Closed-form Gaussian transport and ensemble filtering.
//!
//! Over jointly Gaussian `(X, Y)` the optimal quadratic potential is
//! explicit in the moments:
//!
//! ```text
//! K = Σ_xy Σ_y⁻¹
//! A = Σ_x^{-1/2} ( Σ_x^{1/2} (Σ_x − K Σ_y Kᵀ) Σ_x^{1/2} )^{1/2} Σ_x^{-1/2}
//! ```
//!
//! with the intercept anchored so the gradient map reads
//! `x ↦ m_x + A(x − m_x) + K(y − m_y)`.  `A` is the symmetric positive
//! square-root factor carrying the prior covariance onto the posterior
//! covariance `Σ_x − K Σ_y Kᵀ`, so the map is a *deterministic* coupling:
//! applied to prior particles it produces posterior particles without
//! injecting noise.
//!
//! The classical perturbed-observation update
//! `X^i ← X^i + K (y − Y^i)` reaches the same empirical mean and covariance
//! — exactly, at every finite `N`, under `1/N` covariance normalisation —
//! but does so stochastically, by cancelling sampled observation noise.
//! Both updates and a sequential filter harness around them live here; the
//! closed form is cross-checked elsewhere against gradient descent on the
//! population objective it minimises.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{moments_of, Ensemble, JointSamples, MomentSet};
use crate::models::{ObservationModel, PriorSampler};
use crate::rng::Stream;
use crate::variational::{transport, QuadraticPotential};
use crate::{Error, Result};

/// Principal square root of a symmetric positive semi-definite matrix via
/// its spectral decomposition.
///
/// Eigenvalues in `[-1e-10·scale, 0)` are treated as rounded zeros and
/// clamped; anything more negative is a genuine violation and errors.
/// Asymmetric input (beyond `1e-10` relative) is rejected rather than
/// silently symmetrised.
pub fn sqrt_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            context: format!("square root of a {:?} matrix", m.shape()),
        });
    }
    let scale = m.amax().max(1.0);
    let gap = (m - m.transpose()).amax();
    if gap > 1e-10 * scale {
        return Err(Error::Asymmetric { max_gap: gap });
    }
    let eig = nalgebra::SymmetricEigen::new((m + m.transpose()) / 2.0);
    let mut roots = DVector::zeros(eig.eigenvalues.len());
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -1e-10 * scale {
            return Err(Error::NotPsd { eigenvalue: lambda });
        }
        roots[i] = lambda.max(0.0).sqrt();
    }
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    Ok((&root + root.transpose()) / 2.0)
}

/// The optimal quadratic potential for a Gaussian moment set, plus the
/// context needed to apply and audit it.
#[derive(Debug, Clone)]
pub struct EnkfSolution {
    /// The minimising potential; its gradient map is the prior-to-posterior
    /// transport.
    pub potential: QuadraticPotential,
    /// The moments the solution was built from.
    pub moments: MomentSet,
    /// Whether `Σ_y` was close enough to singular that a diagonal ridge
    /// `ε I` was added before inverting.  Callers surfacing results to users
    /// should report this.
    pub regularized: bool,
}

impl EnkfSolution {
    /// Relative gap in the defining identity `A Σ_x A = Σ_x − K Σ_y Kᵀ`.
    ///
    /// This is the covariance-transport property the square-root formula
    /// exists to satisfy; the gap should sit at rounding level (≤ 1e-8)
    /// for any solvable moment set.
    pub fn consistency_gap(&self) -> f64 {
        let a = self.potential.a();
        let k = self.potential.k();
        let lhs = a * &self.moments.cov_xx * a;
        let rhs = &self.moments.cov_xx - k * &self.moments.cov_yy * k.transpose();
        let scale = self.moments.cov_xx.amax().max(1e-30);
        (lhs - rhs).amax() / scale
    }
}

/// Relative ridge added to a near-singular `Σ_y`, as a fraction of its
/// mean eigenvalue.
const SIGMA_Y_RIDGE: f64 = 1e-8;

/// Solves for the optimal `(A, K, b)` from joint moments.
///
/// Fails with `degenerate moments` when `Σ_x` is not positive definite or
/// `Σ_y` is singular, and with `inconsistent moments` when the implied
/// posterior covariance `Σ_x − K Σ_y Kᵀ` has a negative eigenvalue (the
/// cross-covariance claims more correlation than the marginals allow).  A
/// `Σ_y` that is positive definite but within `1e-8` (relative) of
/// singular is ridged by `ε I` and flagged in the result.
pub fn solve_prop1(mom: &MomentSet) -> Result<EnkfSolution> {
    let m = mom.dim_y();
    let eig_y = nalgebra::SymmetricEigen::new(mom.cov_yy.clone());
    let min_y = eig_y.eigenvalues.min();
    if min_y <= 0.0 {
        return Err(Error::DegenerateMoments {
            context: format!("Σ_y is singular (min eigenvalue {min_y:.3e})"),
        });
    }
    let ridge = SIGMA_Y_RIDGE * mom.cov_yy.trace() / m as f64;
    let (cov_yy, regularized) = if min_y < ridge {
        (&mom.cov_yy + DMatrix::identity(m, m) * ridge, true)
    } else {
        (mom.cov_yy.clone(), false)
    };
    let chol_y = nalgebra::Cholesky::new(cov_yy.clone()).ok_or(Error::DegenerateMoments {
        context: "Σ_y is not positive definite".to_owned(),
    })?;
    // K = Σ_xy Σ_y⁻¹ = (Σ_y⁻¹ Σ_yx)ᵀ, using the symmetry of Σ_y.
    let k = chol_y.solve(&mom.cov_xy.transpose()).transpose();

    let eig_x = nalgebra::SymmetricEigen::new(mom.cov_xx.clone());
    let min_x = eig_x.eigenvalues.min();
    if min_x <= 0.0 {
        return Err(Error::DegenerateMoments {
            context: format!("Σ_x is not positive definite (min eigenvalue {min_x:.3e})"),
        });
    }
    let sqrt_x = spectral_power(&eig_x, 0.5);
    let inv_sqrt_x = spectral_power(&eig_x, -0.5);

    let posterior_cov = &mom.cov_xx - &k * &cov_yy * k.transpose();
    let inner = &sqrt_x * &posterior_cov * &sqrt_x;
    let inner_sqrt = sqrt_spd(&inner).map_err(|err| match err {
        Error::NotPsd { eigenvalue } => Error::InconsistentMoments {
            context: format!(
                "implied posterior covariance has negative eigenvalue ({eigenvalue:.3e} after symmetric conjugation)"
            ),
        },
        other => other,
    })?;
    let a = {
        let raw = &inv_sqrt_x * inner_sqrt * &inv_sqrt_x;
        (&raw + raw.transpose()) / 2.0
    };
    let b = &mom.mean_x - &a * &mom.mean_x - &k * &mom.mean_y;
    Ok(EnkfSolution {
        potential: QuadraticPotential::new(a, k, b)?,
        moments: mom.clone(),
        regularized,
    })
}

fn spectral_power(eig: &nalgebra::SymmetricEigen<f64, nalgebra::Dyn>, p: f64) -> DMatrix<f64> {
    let powered = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.powf(p)),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&powered) * eig.eigenvectors.transpose()
}

/// Deterministic transport update: fits the optimal quadratic map to the
/// empirical moments of `joint` and pushes every particle of `ens` through
/// it at the observed `y`.
///
/// In the standard filtering flow `ens` *is* `joint.x()`; the separate
/// argument allows transporting fresh prior draws through a map fitted on
/// others.
pub fn ot_enkf_update(ens: &Ensemble, joint: &JointSamples, y: &DVector<f64>) -> Result<Ensemble> {
    check_update_dims(ens, joint, y)?;
    let solution = solve_prop1(&moments_of(joint)?)?;
    transport(&solution.potential, ens, y)
}

/// Stochastic perturbed-observation update `X^i ← X^i + K (y − Y^i)` with
/// the gain fitted to the empirical moments of `joint`.
///
/// Row `i` of `ens` is offset by row `i` of `joint.y()`, so the two must
/// pair up; the finite-`N` moment identities with [`ot_enkf_update`]
/// additionally assume `ens ≡ joint.x()`.
pub fn perturbed_enkf_update(
    ens: &Ensemble,
    joint: &JointSamples,
    y: &DVector<f64>,
) -> Result<Ensemble> {
    check_update_dims(ens, joint, y)?;
    if ens.len() != joint.len() {
        return Err(Error::RowCountMismatch {
            left: ens.len(),
            right: joint.len(),
        });
    }
    let solution = solve_prop1(&moments_of(joint)?)?;
    let k = solution.potential.k();
    let mut out = DMatrix::zeros(ens.len(), ens.dim());
    for i in 0..ens.len() {
        let moved = ens.particle(i) + k * (y - joint.y().particle(i));
        out.row_mut(i).copy_from(&moved.transpose());
    }
    Ensemble::new(out)
}

fn check_update_dims(ens: &Ensemble, joint: &JointSamples, y: &DVector<f64>) -> Result<()> {
    if ens.dim() != joint.x().dim() {
        return Err(Error::DimensionMismatch {
            context: format!(
                "ensemble dimension {} vs joint state dimension {}",
                ens.dim(),
                joint.x().dim()
            ),
        });
    }
    if y.len() != joint.y().dim() {
        return Err(Error::DimensionMismatch {
            context: format!(
                "observed y length {} vs joint observation dimension {}",
                y.len(),
                joint.y().dim()
            ),
        });
    }
    Ok(())
}

/// Which ensemble update a filter uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMethod {
    /// Deterministic transport through the fitted quadratic map.
    OptimalTransport,
    /// Stochastic perturbed-observation offset.
    Perturbed,
}

impl UpdateMethod {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ot" => Ok(Self::OptimalTransport),
            "perturbed" => Ok(Self::Perturbed),
            _ => Err(Error::InvalidConfig {
                context: format!("unknown update method \"{name}\" (expected \"ot\" or \"perturbed\")"),
            }),
        }
    }
}

/// Runs a full assimilation cycle: propagate particles through the state
/// dynamics, simulate one observation per particle, update against the
/// recorded observation, repeat.
///
/// Returns the posterior ensemble after each assimilation step.  All
/// randomness derives from `seed` through fixed stream ids (prior draw,
/// dynamics noise, observation noise), so a rerun reproduces the particle
/// paths exactly.
pub fn sequential_filter(
    prior: &dyn PriorSampler,
    dynamics: &dyn Fn(&DVector<f64>, &mut rand_chacha::ChaCha8Rng) -> DVector<f64>,
    obs: &dyn ObservationModel,
    observations: &[DVector<f64>],
    method: UpdateMethod,
    n_particles: usize,
    seed: u64,
) -> Result<Vec<Ensemble>> {
    if n_particles < 2 {
        return Err(Error::TooFewParticles {
            what: "sequential filter",
            needed: 2,
            got: n_particles,
        });
    }
    let dim = prior.dim();
    let mut rng_prior = Stream(1).rng(seed);
    let mut rng_dyn = Stream(2).rng(seed);
    let mut rng_obs = Stream(3).rng(seed);

    let mut particles = DMatrix::zeros(n_particles, dim);
    for i in 0..n_particles {
        particles.row_mut(i).copy_from(&prior.sample(&mut rng_prior).transpose());
    }
    let mut state = Ensemble::new(particles)?;

    let mut posteriors = Vec::with_capacity(observations.len());
    for y in observations {
        // Propagate.
        let mut propagated = DMatrix::zeros(n_particles, dim);
        for i in 0..n_particles {
            let next = dynamics(&state.particle(i), &mut rng_dyn);
            if next.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: format!(
                        "dynamics returned length {} for state dimension {dim}",
                        next.len()
                    ),
                });
            }
            propagated.row_mut(i).copy_from(&next.transpose());
        }
        let forecast = Ensemble::new(propagated)?;

        // Simulate observations and update.
        let mut ys = DMatrix::zeros(n_particles, obs.obs_dim());
        for i in 0..n_particles {
            ys.row_mut(i)
                .copy_from(&obs.sample(&forecast.particle(i), &mut rng_obs).transpose());
        }
        let joint = JointSamples::new(forecast.clone(), Ensemble::new(ys)?)?;
        let posterior = match method {
            UpdateMethod::OptimalTransport => ot_enkf_update(&forecast, &joint, y)?,
            UpdateMethod::Perturbed => perturbed_enkf_update(&forecast, &joint, y)?,
        };
        state = posterior.clone();
        posteriors.push(posterior);
    }
    Ok(posteriors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{empirical_cov, empirical_mean};
    use crate::models::{kalman_oracle, LinearGaussianObservation};
    use crate::rng;
    use crate::variational::Potential;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Four points whose `1/N` moments are exactly
    /// `m = (0,0), Σ_x = 1, Σ_y = 2, Σ_xy = 1` — the reference-model values.
    fn reference_joint() -> JointSamples {
        JointSamples::new(
            Ensemble::from_scalar_samples(&[1.0, 1.0, -1.0, -1.0]).unwrap(),
            Ensemble::from_scalar_samples(&[2.0, 0.0, 0.0, -2.0]).unwrap(),
        )
        .unwrap()
    }

    fn reference_moments() -> MomentSet {
        moments_of(&reference_joint()).unwrap()
    }

    #[test]
    fn sqrt_of_diagonal_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let root = sqrt_spd(&m).unwrap();
        assert_relative_eq!(root[(0, 0)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(root[(1, 1)], 3.0, epsilon = 1e-12);
        assert_relative_eq!(root[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sqrt_rejects_asymmetric_and_indefinite() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
        assert!(matches!(sqrt_spd(&asym).unwrap_err(), Error::Asymmetric { .. }));
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(matches!(sqrt_spd(&indef).unwrap_err(), Error::NotPsd { .. }));
    }

    #[test]
    fn sqrt_clamps_rounding_level_negatives() {
        let nearly = DMatrix::from_row_slice(1, 1, &[-1e-12]);
        let root = sqrt_spd(&nearly).unwrap();
        assert_eq!(root[(0, 0)], 0.0);
    }

    #[test]
    fn prop1_scalar_reference_solution() {
        let sol = solve_prop1(&reference_moments()).unwrap();
        assert_relative_eq!(sol.potential.a()[(0, 0)], 0.5f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(sol.potential.k()[(0, 0)], 0.5, epsilon = 1e-12);
        assert!(sol.potential.b()[0].abs() < 1e-12);
        assert!(!sol.regularized);
        assert!(sol.consistency_gap() < 1e-12);
    }

    #[test]
    fn prop1_uncorrelated_moments_give_identity_map() {
        let mom = MomentSet::new(
            DVector::zeros(2),
            DVector::zeros(1),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            DMatrix::from_element(1, 1, 1.5),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        let sol = solve_prop1(&mom).unwrap();
        assert_relative_eq!(sol.potential.a()[(0, 0)], 1.0, epsilon = 1e-10);
        assert_relative_eq!(sol.potential.a()[(1, 1)], 1.0, epsilon = 1e-10);
        assert!(sol.potential.a()[(0, 1)].abs() < 1e-10);
        assert!(sol.potential.k().amax() < 1e-12);
    }

    #[test]
    fn prop1_flags_near_singular_sigma_y() {
        let mom = MomentSet::new(
            DVector::zeros(1),
            DVector::zeros(2),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-12]),
            DMatrix::from_row_slice(1, 2, &[0.1, 0.0]),
        )
        .unwrap();
        let sol = solve_prop1(&mom).unwrap();
        assert!(sol.regularized);
    }

    #[test]
    fn prop1_rejects_singular_and_inconsistent_moments() {
        let singular_y = MomentSet::new(
            DVector::zeros(1),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 0.0),
        )
        .unwrap();
        assert!(matches!(
            solve_prop1(&singular_y).unwrap_err(),
            Error::DegenerateMoments { .. }
        ));

        // |corr| = 2 > 1: the marginals cannot support the claimed
        // cross-covariance.
        let impossible = MomentSet::new(
            DVector::zeros(1),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 2.0),
        )
        .unwrap();
        assert!(matches!(
            solve_prop1(&impossible).unwrap_err(),
            Error::InconsistentMoments { .. }
        ));
    }

    #[test]
    fn ot_update_of_reference_particle() {
        // One particle at 1.0 through the exact reference map at y = 0.5:
        // √0.5 · 1 + 0.5 · 0.5 = 0.95711.
        let joint = reference_joint();
        let ens = Ensemble::from_scalar_samples(&[1.0]).unwrap();
        let updated = ot_enkf_update(&ens, &joint, &DVector::from_element(1, 0.5)).unwrap();
        assert_relative_eq!(
            updated.particles()[(0, 0)],
            0.957_106_781_186_547_5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn perturbed_update_of_reference_particles() {
        // K = 1/2 exactly; row 0 pairs X = 1 with Y = 2 at y = 0.5:
        // 1 + 0.5 (0.5 − 2) = 0.25.
        let joint = reference_joint();
        let updated =
            perturbed_enkf_update(joint.x(), &joint, &DVector::from_element(1, 0.5)).unwrap();
        assert_relative_eq!(updated.particles()[(0, 0)], 0.25, epsilon = 1e-12);
        assert_relative_eq!(updated.particles()[(1, 0)], 1.25, epsilon = 1e-12);
    }

    #[test]
    fn reference_posterior_moments_from_large_ensemble() {
        // Pushing 10^4 prior draws through the fitted map at y = 1.0 must
        // reproduce the analytic posterior N(0.5, 0.5).
        let model = crate::models::reference_gaussian_model();
        let mut r = rng::seeded(40);
        let joint = model.sample_joint(10_000, &mut r).unwrap();
        let posterior =
            ot_enkf_update(joint.x(), &joint, &DVector::from_element(1, 1.0)).unwrap();
        let mean = empirical_mean(&posterior)[0];
        let var = empirical_cov(&posterior).unwrap()[(0, 0)];
        let n = posterior.len() as f64;
        assert!(
            (mean - 0.5).abs() < 9.0 * (0.5 / n).sqrt(),
            "posterior mean {mean}"
        );
        assert!((var - 0.5).abs() < 0.05, "posterior variance {var}");
    }

    /// Random well-conditioned joint draws for the finite-N identity.
    fn random_joint(n: usize, dim_x: usize, dim_y: usize, seed: u64) -> JointSamples {
        let mut r = rng::seeded(seed);
        let xs = DMatrix::from_fn(n, dim_x, |_, _| r.sample::<f64, _>(StandardNormal));
        // Correlate y with x so the gain is non-trivial.
        let ys = DMatrix::from_fn(n, dim_y, |i, j| {
            0.7 * xs[(i, j % dim_x)] + r.sample::<f64, _>(StandardNormal)
        });
        JointSamples::new(Ensemble::new(xs).unwrap(), Ensemble::new(ys).unwrap()).unwrap()
    }

    #[test]
    fn finite_n_moment_identity_between_updates() {
        // The two updates share empirical mean and covariance exactly at
        // any N ≥ 3, not just in expectation.
        for (case, &(n, dx, dy)) in [(3usize, 1usize, 1usize), (7, 2, 1), (12, 3, 2), (40, 2, 2)]
            .iter()
            .enumerate()
        {
            let joint = random_joint(n, dx, dy, 100 + case as u64);
            let y = DVector::from_element(dy, 0.3);
            let ot = ot_enkf_update(joint.x(), &joint, &y).unwrap();
            let pert = perturbed_enkf_update(joint.x(), &joint, &y).unwrap();
            let mean_gap = (empirical_mean(&ot) - empirical_mean(&pert)).amax();
            let cov_gap =
                (empirical_cov(&ot).unwrap() - empirical_cov(&pert).unwrap()).amax();
            let scale = empirical_cov(&ot).unwrap().amax().max(1.0);
            assert!(mean_gap < 1e-8, "case {case}: mean gap {mean_gap}");
            assert!(cov_gap < 1e-8 * scale, "case {case}: cov gap {cov_gap}");
        }
    }

    #[test]
    fn ot_map_moves_less_mass_than_perturbed_update() {
        // Mean-square displacement of the deterministic map vs the noise
        // cancellation, averaged over observed y drawn from the marginal:
        // (√0.5 − 1)² + 0.5 ≈ 0.586 against K²·2σ_y² = 1.
        let model = crate::models::reference_gaussian_model();
        let mut r = rng::seeded(77);
        let joint = model.sample_joint(20_000, &mut r).unwrap();
        let sol = solve_prop1(&moments_of(&joint).unwrap()).unwrap();
        let k = sol.potential.k()[(0, 0)];
        let mut ot_cost = 0.0;
        let mut pert_cost = 0.0;
        for i in 0..joint.len() {
            let x = joint.x().particle(i);
            // An independent y from the marginal: use the shuffled pairing
            // one index over.
            let y = joint.y().particle((i + 1) % joint.len());
            let moved = sol.potential.grad_x(&x, &y).unwrap();
            ot_cost += (moved - &x).norm_squared();
            pert_cost += (k * (&y - joint.y().particle(i))).norm_squared();
        }
        ot_cost /= joint.len() as f64;
        pert_cost /= joint.len() as f64;
        assert_relative_eq!(ot_cost, 0.586, epsilon = 0.05);
        assert_relative_eq!(pert_cost, 1.0, epsilon = 0.05);
        assert!(ot_cost < pert_cost);
    }

    #[test]
    fn descent_on_population_objective_matches_closed_form() {
        use crate::variational::{minimize_population_objective, DescentConfig};
        let mom = reference_moments();
        let fitted = minimize_population_objective(&mom, &DescentConfig::default()).unwrap();
        let sol = solve_prop1(&mom).unwrap();
        assert_relative_eq!(
            fitted.a()[(0, 0)],
            sol.potential.a()[(0, 0)],
            epsilon = 1e-5
        );
        assert_relative_eq!(
            fitted.k()[(0, 0)],
            sol.potential.k()[(0, 0)],
            epsilon = 1e-5
        );
        assert!((fitted.b()[0] - sol.potential.b()[0]).abs() < 1e-5);
    }

    #[test]
    fn sequential_filter_tracks_kalman_oracle() {
        // Linear dynamics x' = 0.9x + N(0, 0.1), unit-noise observation.
        let process_std = 0.1f64.sqrt();
        let obs = LinearGaussianObservation::scalar(1.0, 1.0).unwrap();
        let prior = crate::models::GaussianPrior::standard(1);

        // Simulate a truth trajectory and its observations.
        let mut r = rng::seeded(1234);
        let mut truth = r.sample::<f64, _>(StandardNormal);
        let steps = 10;
        let mut observations = Vec::with_capacity(steps);
        for _ in 0..steps {
            truth = 0.9 * truth + process_std * r.sample::<f64, _>(StandardNormal);
            observations.push(DVector::from_element(1, truth + r.sample::<f64, _>(StandardNormal)));
        }

        // Kalman oracle on the same observation sequence.
        let mut oracle = Vec::with_capacity(steps);
        let (mut m, mut p) = (DVector::zeros(1), DMatrix::from_element(1, 1, 1.0));
        for y in &observations {
            m *= 0.9;
            p = 0.81 * p + DMatrix::from_element(1, 1, 0.1);
            let (pm, pc) = kalman_oracle(
                &m,
                &p,
                &DMatrix::from_element(1, 1, 1.0),
                &DMatrix::from_element(1, 1, 1.0),
                y,
            )
            .unwrap();
            oracle.push((pm[0], pc[(0, 0)]));
            m = pm;
            p = pc;
        }

        let n = 2000;
        let dynamics = move |x: &DVector<f64>, rng: &mut rand_chacha::ChaCha8Rng| {
            x * 0.9
                + DVector::from_element(1, process_std * rng.sample::<f64, _>(StandardNormal))
        };
        for method in [UpdateMethod::OptimalTransport, UpdateMethod::Perturbed] {
            let posteriors =
                sequential_filter(&prior, &dynamics, &obs, &observations, method, n, 99).unwrap();
            assert_eq!(posteriors.len(), steps);
            for (t, (post, &(om, ov))) in posteriors.iter().zip(&oracle).enumerate() {
                let mean = empirical_mean(post)[0];
                let stderr = (ov / n as f64).sqrt();
                assert!(
                    (mean - om).abs() < 5.0 * stderr,
                    "{method:?} step {t}: mean {mean} vs oracle {om} (stderr {stderr})"
                );
            }
        }
    }

    #[test]
    fn sequential_filter_is_deterministic() {
        let obs = LinearGaussianObservation::scalar(1.0, 1.0).unwrap();
        let prior = crate::models::GaussianPrior::standard(1);
        let dynamics = |x: &DVector<f64>, _: &mut rand_chacha::ChaCha8Rng| x.clone();
        let observations = vec![DVector::from_element(1, 0.7); 3];
        let run = |seed| {
            sequential_filter(
                &prior,
                &dynamics,
                &obs,
                &observations,
                UpdateMethod::OptimalTransport,
                50,
                seed,
            )
            .unwrap()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        /// sqrt_spd multiplied by itself recovers the input.
        #[test]
        fn sqrt_multiplies_back(seed in 0u64..10_000, dim in 1usize..5) {
            let mut r = rng::seeded(seed);
            let raw = DMatrix::from_fn(dim, dim, |_, _| r.sample::<f64, _>(StandardNormal));
            let spd = &raw * raw.transpose() + DMatrix::identity(dim, dim) * 0.1;
            let root = sqrt_spd(&spd).unwrap();
            let back = &root * &root;
            let gap = (&back - &spd).amax() / spd.amax();
            prop_assert!(gap < 1e-10, "relative gap {gap}");
        }

        /// A depends on Σ_xy only through Σ_xy Σ_y⁻¹ Σ_xyᵀ, so flipping the
        /// sign of the cross-covariance flips K but leaves A untouched.
        #[test]
        fn contraction_factor_ignores_cross_covariance_sign(
            var_x in 0.3f64..3.0,
            var_y in 0.3f64..3.0,
            corr in -0.9f64..0.9,
        ) {
            let cov_xy = corr * (var_x * var_y).sqrt();
            let build = |sxy: f64| MomentSet::new(
                DVector::zeros(1),
                DVector::zeros(1),
                DMatrix::from_element(1, 1, var_x),
                DMatrix::from_element(1, 1, var_y),
                DMatrix::from_element(1, 1, sxy),
            ).unwrap();
            let plus = solve_prop1(&build(cov_xy)).unwrap();
            let minus = solve_prop1(&build(-cov_xy)).unwrap();
            let a_gap = (plus.potential.a() - minus.potential.a()).amax();
            prop_assert!(a_gap < 1e-12, "A gap {a_gap}");
            let k_sum = (plus.potential.k() + minus.potential.k()).amax();
            prop_assert!(k_sum < 1e-12, "K should flip sign, sum {k_sum}");
        }

        /// The fitted map is strictly increasing in x (1-D conditional
        /// monotonicity), since A is positive definite.
        #[test]
        fn fitted_map_is_monotone(
            var_x in 0.3f64..3.0,
            var_y in 0.3f64..3.0,
            corr in -0.9f64..0.9,
            x in -3.0f64..3.0,
            dx in 0.01f64..2.0,
            y in -3.0f64..3.0,
        ) {
            let mom = MomentSet::new(
                DVector::zeros(1),
                DVector::zeros(1),
                DMatrix::from_element(1, 1, var_x),
                DMatrix::from_element(1, 1, var_y),
                DMatrix::from_element(1, 1, corr * (var_x * var_y).sqrt()),
            ).unwrap();
            let sol = solve_prop1(&mom).unwrap();
            let yv = DVector::from_element(1, y);
            let g1 = sol.potential.grad_x(&DVector::from_element(1, x), &yv).unwrap()[0];
            let g2 = sol.potential.grad_x(&DVector::from_element(1, x + dx), &yv).unwrap()[0];
            prop_assert!(g2 > g1);
            prop_assert!(sol.consistency_gap() < 1e-8);
        }
    }
}
