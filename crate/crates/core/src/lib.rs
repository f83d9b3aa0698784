//! Conditioning as optimal transport.
//!
//! Everything in this crate revolves around one object: a block-triangular
//! map `S(x, y) = (T(x, y), y)` that pushes the product of a prior and an
//! observation marginal, `P_X ⊗ P_Y`, onto the joint `P_XY`.  When such a map
//! exists with `T(·, y)` the gradient of a convex potential for every fixed
//! `y`, that gradient is exactly the prior-to-posterior transport: feeding the
//! observed value `y` and a fresh prior sample `x` through `T` produces a
//! posterior sample, with no likelihood evaluations anywhere.
//!
//! The potential is found variationally.  For a candidate `f(x; y)`, convex
//! in `x`, the dual objective
//!
//! ```text
//! J(f) = E[f(X, Y)]          over the product coupling P_X ⊗ P_Y
//!      + E[f*(X, Y)]         over the joint P_XY, conjugacy in x
//! ```
//!
//! is minimised exactly at the potential whose x-gradient is the transport
//! map.  The crate works this principle at three levels:
//!
//! * [`variational`] — the objective itself: quadratic potentials with
//!   closed-form conjugates, the empirical two-sample estimator, and the
//!   population objective over Gaussian moments.
//! * [`enkf`] — the Gaussian/quadratic case in closed form: the optimal
//!   `(A, K, b)` from first and second moments, and the resulting
//!   ensemble update beside the classical perturbed-observation update.
//! * [`icnn`] — the nonparametric case: input-convex neural networks trained
//!   by an alternating min-max scheme on two-sample batches.
//! * [`fpf`] — the continuous-time limit: as the observation becomes an
//!   increment of a noisy path, the optimality condition collapses to a
//!   weighted Poisson equation and the map to a gain-times-innovation
//!   particle update.
//! * [`ensemble`] — particle containers and empirical moments shared by all
//!   of the above.
//! * [`models`] — reference models (Gaussian, Gaussian mixture) and the
//!   analytic oracles (Kalman, Kalman–Bucy, conjugate mixture posteriors)
//!   used to validate the transport routines against ground truth.
//!
//! Randomness is always explicit: every stochastic routine takes a
//! [`rng::Stream`]-derived generator, and equal seeds reproduce results
//! bit for bit.

pub mod ensemble;
pub mod enkf;
pub mod fpf;
pub mod icnn;
pub mod models;
pub mod rng;
pub mod variational;

use thiserror::Error;

/// Errors shared across the crate.
///
/// Numerical preconditions (symmetry, positive definiteness, finiteness,
/// matching dimensions) are checked eagerly so that failures carry the name
/// of the offending quantity instead of surfacing later as NaNs.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A particle container with zero rows was supplied.
    #[error("empty ensemble")]
    EmptyEnsemble,
    /// An operation needed more particles than were supplied.
    #[error("{what} needs at least {needed} particles, got {got}")]
    TooFewParticles {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    /// Two containers that must pair row-for-row have different row counts.
    #[error("row count mismatch: {left} vs {right}")]
    RowCountMismatch { left: usize, right: usize },
    /// Incompatible dimensions between two quantities that must conform.
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    /// A NaN or infinity where a finite value is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    /// The empirical objective hit a non-finite term; the indices identify
    /// the offending sample pair.
    #[error("non-finite objective term at sample pair ({i}, {j})")]
    NonFiniteObjective { i: usize, j: usize },
    /// A quadratic potential whose curvature matrix is not symmetric
    /// positive definite.
    #[error("degenerate potential: {context}")]
    DegeneratePotential { context: String },
    /// A matrix that must be symmetric is not.
    #[error("asymmetric input: max |M - M^T| entry {max_gap:.3e}")]
    Asymmetric { max_gap: f64 },
    /// A matrix that must be positive semi-definite has a genuinely negative
    /// eigenvalue.
    #[error("not PSD: eigenvalue {eigenvalue:.6e}")]
    NotPsd { eigenvalue: f64 },
    /// Moment matrices too singular to solve for the transport coefficients.
    #[error("degenerate moments: {context}")]
    DegenerateMoments { context: String },
    /// Moment matrices that are individually fine but mutually impossible
    /// (the implied posterior covariance is not PSD).
    #[error("inconsistent moments: {context}")]
    InconsistentMoments { context: String },
    /// A network parameterisation that breaks the input-convexity
    /// conditions.
    #[error("convexity violated: {context}")]
    ConvexityViolated { context: String },
    /// The min-max training loop produced a non-finite objective. Carries the
    /// objective values recorded up to the failing step so a caller can still
    /// inspect (or dump) the partial loss trace.
    #[error("training diverged at outer step {step}")]
    TrainingDiverged { step: usize, trace: Vec<f64> },
    /// A checkpoint file could not be written, read or parsed.
    #[error("checkpoint: {context}")]
    Checkpoint { context: String },
    /// The inner 1-D concave maximisation for a conjugate value failed to
    /// bracket a maximiser (the potential is no longer convex at this step
    /// size).
    #[error("conjugate maximization failed at dt = {dt:.3e}")]
    ConjugateMaximization { dt: f64 },
    /// A density value on the grid fell below the representable floor where
    /// a division by it is required.
    #[error("density underflow on grid at node {node} (p = {value:.3e})")]
    DensityUnderflow { node: usize, value: f64 },
    /// The iterative minimiser exhausted its iteration budget without
    /// meeting its tolerance.
    #[error("minimization did not converge: {context}")]
    NoConvergence { context: String },
    /// An unusable configuration value.
    #[error("invalid configuration: {context}")]
    InvalidConfig { context: String },
    /// A model registry lookup with an unknown key.
    #[error("unknown model \"{name}\"")]
    UnknownModel { name: String },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn ensure_finite_slice(values: &[f64], context: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(idx) => Err(Error::NonFinite {
            context: format!("{context} (flat index {idx})"),
        }),
    }
}
