//! Particle ensembles and their empirical moments.
//!
//! Ensembles are stored row-major: an `N × n` matrix holds `N` particles of
//! dimension `n`.  Covariances use the `1/N` normalisation throughout — the
//! transport identities checked elsewhere in the crate (for instance, that
//! the two ensemble update rules produce *identical* empirical means and
//! covariances at any finite `N`) hold exactly under `1/N` and only
//! asymptotically under `1/(N-1)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::{ensure_finite_slice, Error, Result};

/// A set of `N` particles in `R^n`, one particle per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    particles: DMatrix<f64>,
}

impl Ensemble {
    /// Wraps an `N × n` particle matrix.  Fails on zero rows or non-finite
    /// entries.
    pub fn new(particles: DMatrix<f64>) -> Result<Self> {
        if particles.nrows() == 0 {
            return Err(Error::EmptyEnsemble);
        }
        ensure_finite_slice(particles.as_slice(), "ensemble particles")?;
        Ok(Self { particles })
    }

    /// Builds a 1-D ensemble from a flat list of particle values.
    pub fn from_scalar_samples(values: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(values.len(), 1, values))
    }

    /// Number of particles `N`.
    pub fn len(&self) -> usize {
        self.particles.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.nrows() == 0
    }

    /// State dimension `n`.
    pub fn dim(&self) -> usize {
        self.particles.ncols()
    }

    /// The underlying `N × n` matrix.
    pub fn particles(&self) -> &DMatrix<f64> {
        &self.particles
    }

    /// Particle `i` as a column vector.
    pub fn particle(&self, i: usize) -> DVector<f64> {
        self.particles.row(i).transpose()
    }

    /// The 1-D particle values, in order.  Errors when `n != 1`.
    pub fn scalar_samples(&self) -> Result<Vec<f64>> {
        if self.dim() != 1 {
            return Err(Error::DimensionMismatch {
                context: format!("scalar view of a {}-dimensional ensemble", self.dim()),
            });
        }
        Ok(self.particles.column(0).iter().copied().collect())
    }
}

/// Paired draws `(X^i, Y^i)` from a joint distribution, row `i` of `x`
/// aligned with row `i` of `y`.
///
/// The pairing carries the joint coupling; forgetting it (pairing every
/// `X^i` with every `Y^j`, or with an independently shuffled `Y`) yields the
/// product coupling `P_X ⊗ P_Y` from the *same* draws.  Both views feed the
/// two halves of the dual transport objective.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSamples {
    x: Ensemble,
    y: Ensemble,
}

impl JointSamples {
    pub fn new(x: Ensemble, y: Ensemble) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::RowCountMismatch {
                left: x.len(),
                right: y.len(),
            });
        }
        Ok(Self { x, y })
    }

    /// Number of paired draws.
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &Ensemble {
        &self.x
    }

    pub fn y(&self) -> &Ensemble {
        &self.y
    }

    /// A product-coupling view: the same marginal draws with the `y` rows
    /// permuted uniformly at random, breaking the pairing.
    pub fn shuffled_product(&self, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        let y = DMatrix::from_fn(self.y.len(), self.y.dim(), |i, j| {
            self.y.particles()[(order[i], j)]
        });
        Self {
            x: self.x.clone(),
            y: Ensemble { particles: y },
        }
    }
}

/// First and second moments of a joint `(X, Y)` in `R^n × R^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    pub mean_x: DVector<f64>,
    pub mean_y: DVector<f64>,
    /// `n × n` covariance of `X`; kept symmetric by construction.
    pub cov_xx: DMatrix<f64>,
    /// `m × m` covariance of `Y`; kept symmetric by construction.
    pub cov_yy: DMatrix<f64>,
    /// `n × m` cross-covariance `Cov(X, Y)`.
    pub cov_xy: DMatrix<f64>,
}

impl MomentSet {
    /// Validates shapes and symmetry.  The covariance blocks must be
    /// symmetric to machine precision relative to their own scale.
    pub fn new(
        mean_x: DVector<f64>,
        mean_y: DVector<f64>,
        cov_xx: DMatrix<f64>,
        cov_yy: DMatrix<f64>,
        cov_xy: DMatrix<f64>,
    ) -> Result<Self> {
        let (n, m) = (mean_x.len(), mean_y.len());
        if cov_xx.shape() != (n, n) || cov_yy.shape() != (m, m) || cov_xy.shape() != (n, m) {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "moment blocks {:?}/{:?}/{:?} against means of length {n} and {m}",
                    cov_xx.shape(),
                    cov_yy.shape(),
                    cov_xy.shape()
                ),
            });
        }
        ensure_symmetric(&cov_xx)?;
        ensure_symmetric(&cov_yy)?;
        ensure_finite_slice(mean_x.as_slice(), "mean_x")?;
        ensure_finite_slice(mean_y.as_slice(), "mean_y")?;
        ensure_finite_slice(cov_xx.as_slice(), "cov_xx")?;
        ensure_finite_slice(cov_yy.as_slice(), "cov_yy")?;
        ensure_finite_slice(cov_xy.as_slice(), "cov_xy")?;
        Ok(Self {
            mean_x,
            mean_y,
            cov_xx,
            cov_yy,
            cov_xy,
        })
    }

    /// State dimension `n`.
    pub fn dim_x(&self) -> usize {
        self.mean_x.len()
    }

    /// Observation dimension `m`.
    pub fn dim_y(&self) -> usize {
        self.mean_y.len()
    }
}

fn ensure_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    let max_gap = (m - m.transpose()).amax();
    if max_gap > 1e-12 * scale {
        return Err(Error::Asymmetric { max_gap });
    }
    Ok(())
}

/// Mean particle of an `N × n` ensemble.
pub fn empirical_mean(ens: &Ensemble) -> DVector<f64> {
    let n = ens.len() as f64;
    ens.particles().row_sum().transpose() / n
}

/// Cross-covariance `(1/N) Σ_i (a^i − ā)(b^i − b̄)^T` of two row-aligned
/// ensembles.
///
/// With `a == b` this is the ordinary empirical covariance; the result is
/// then symmetric PSD by construction.  Needs `N ≥ 2` so that the estimate
/// is not vacuously zero, and the rows of `a` and `b` must pair up.
pub fn empirical_cross_cov(a: &Ensemble, b: &Ensemble) -> Result<DMatrix<f64>> {
    if a.len() != b.len() {
        return Err(Error::RowCountMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::TooFewParticles {
            what: "empirical covariance",
            needed: 2,
            got: a.len(),
        });
    }
    let n = a.len() as f64;
    let mean_a = empirical_mean(a);
    let mean_b = empirical_mean(b);
    let mut acc = DMatrix::zeros(a.dim(), b.dim());
    for i in 0..a.len() {
        let da = a.particle(i) - &mean_a;
        let db = b.particle(i) - &mean_b;
        acc += da * db.transpose();
    }
    Ok(acc / n)
}

/// Empirical covariance of a single ensemble, `1/N`-normalised.
pub fn empirical_cov(ens: &Ensemble) -> Result<DMatrix<f64>> {
    let raw = empirical_cross_cov(ens, ens)?;
    // Symmetrise away the last-bit asymmetry of summed outer products.
    Ok((&raw + raw.transpose()) / 2.0)
}

/// All first and second moments of a paired sample set in one pass.
pub fn moments_of(joint: &JointSamples) -> Result<MomentSet> {
    let cov_xx = empirical_cov(joint.x())?;
    let cov_yy = empirical_cov(joint.y())?;
    let cov_xy = empirical_cross_cov(joint.x(), joint.y())?;
    MomentSet::new(
        empirical_mean(joint.x()),
        empirical_mean(joint.y()),
        cov_xx,
        cov_yy,
        cov_xy,
    )
}
